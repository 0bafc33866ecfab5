//! Command-line front end: configuration, parameter sweeps and CSV output.
//!
//! A run is one scenario, a master seed, a trial count and a set of parameter
//! settings. Every setting is a single value, a list `a,b,c` or a range
//! `start:stop:step`; the cartesian product of all settings (earlier keys vary
//! slowest) gives the parameter points. Each point runs `trials` trials with
//! trial indices `0..trials`, so trial `t` is identical whatever the count.
//!
//! Config files are `key = value` lines under `[run]`, `[params]` or a
//! section named after a scenario (only the active scenario's section
//! applies). Flags override the file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use clap::Parser;
use rayon::prelude::*;
use thiserror::Error;

use crate::scenarios::{histogram, run_trial, ScenarioError, ScenarioKind, ScenarioParams, Summary, TrialOutput};

pub const LATENCY_BIN_WIDTH: f64 = 0.5;

const RUN_KEYS: [&str; 5] = ["scenario", "trials", "seed", "out", "events_log"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser, Debug, Clone, Default)]
#[command(name = "uwsn", version, about = "Underwater RF sensor network simulator")]
pub struct Args {
    /// Scenario: p2p, routing-grid, diffusion-unicast or diffusion-broadcast.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Config file with [run], [params] and per-scenario sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameter override `key=value`; value may be a list or a range.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub trials: Option<u32>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the per-frame event log.
    #[arg(long)]
    pub events_log: bool,
}

/// Raw contents of a config file.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    pub run: Vec<(String, String)>,
    pub params: Vec<(String, String)>,
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

pub fn parse_config_text(text: &str) -> Result<ConfigFile, CliError> {
    enum Target {
        None,
        Run,
        Params,
        Scenario(String),
    }
    let mut file = ConfigFile::default();
    let mut target = Target::None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            target = match name {
                "run" => Target::Run,
                "params" => Target::Params,
                _ => {
                    ScenarioKind::from_name(name)
                        .map_err(|_| config_err(format!("line {}: unknown section `[{name}]`", i + 1)))?;
                    Target::Scenario(name.to_string())
                }
            };
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(config_err(format!("line {}: expected `key = value`", i + 1)));
        };
        let entry = (k.trim().to_string(), v.trim().to_string());
        match &target {
            Target::None => return Err(config_err(format!("line {}: `{}` outside a section", i + 1, entry.0))),
            Target::Run => {
                if !RUN_KEYS.contains(&entry.0.as_str()) {
                    return Err(config_err(format!("unknown key `{}` in [run]", entry.0)));
                }
                file.run.push(entry);
            }
            Target::Params => file.params.push(entry),
            Target::Scenario(s) => file.sections.entry(s.clone()).or_default().push(entry),
        }
    }
    Ok(file)
}

/// Expands a setting into its values: `a,b,c`, `start:stop:step` or a
/// single value. Range values are rounded to 12 decimals.
pub fn expand_values(key: &str, text: &str) -> Result<Vec<String>, CliError> {
    let text = text.trim();
    if text.contains(',') {
        let vals: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
        if vals.iter().any(String::is_empty) {
            return Err(config_err(format!("empty list element for key `{key}`")));
        }
        return Ok(vals);
    }
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [_] => Ok(vec![text.to_string()]),
        [a, b, s] => {
            let num = |p: &str| {
                p.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| config_err(format!("bad range `{text}` for key `{key}`")))
            };
            let (a, b, s) = (num(a)?, num(b)?, num(s)?);
            if s <= 0.0 || b < a {
                return Err(config_err(format!("bad range `{text}` for key `{key}`: need start ≤ stop, step > 0")));
            }
            let n = ((b - a) / s + 1e-9).floor() as usize;
            Ok((0..=n)
                .map(|i| {
                    let v = ((a + i as f64 * s) * 1e12).round() / 1e12;
                    format!("{}", v + 0.0)
                })
                .collect())
        }
        _ => Err(config_err(format!("bad range `{text}` for key `{key}`"))),
    }
}

/// Fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub trials: u32,
    pub master_seed: u64,
    pub out: PathBuf,
    pub events_log: bool,
    /// `(key, raw setting, expanded values)` in scenario key order.
    pub settings: Vec<(String, String, Vec<String>)>,
}

pub const DEFAULT_TRIALS: u32 = 20;
pub const DEFAULT_SEED: u64 = 1;

impl RunConfig {
    pub fn resolve(args: &Args) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => parse_config_text(&fs::read_to_string(path).map_err(io_err(path))?)?,
            None => ConfigFile::default(),
        };
        let run_value = |k: &str| file.run.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());

        let name = args
            .scenario
            .as_deref()
            .or(run_value("scenario"))
            .ok_or_else(|| config_err("missing scenario (use --scenario or `scenario` in [run])"))?;
        let scenario = ScenarioKind::from_name(name)?;

        let trials = match (args.trials, run_value("trials")) {
            (Some(t), _) => t,
            (None, Some(v)) => v.parse().map_err(|_| config_err(format!("invalid value `{v}` for key `trials`")))?,
            (None, None) => DEFAULT_TRIALS,
        };
        if trials == 0 {
            return Err(config_err("invalid value `0` for key `trials`: need at least one trial"));
        }
        let master_seed = match (args.seed, run_value("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => v.parse().map_err(|_| config_err(format!("invalid value `{v}` for key `seed`")))?,
            (None, None) => DEFAULT_SEED,
        };
        let out = args.out.clone().or(run_value("out").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
        let events_log = args.events_log
            || match run_value("events_log") {
                None => false,
                Some(v) => v.parse().map_err(|_| config_err(format!("invalid value `{v}` for key `events_log`")))?,
            };

        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in scenario.default_sweep() {
            raw.insert(k.to_string(), v.to_string());
        }
        let section = file.sections.get(scenario.name()).into_iter().flatten();
        for (k, v) in file.params.iter().chain(section) {
            raw.insert(k.clone(), v.clone());
        }
        for s in &args.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| config_err(format!("--set expects key=value, got `{s}`")))?;
            raw.insert(k.trim().to_string(), v.trim().to_string());
        }

        let keys = scenario.keys();
        if let Some(k) = raw.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(ScenarioError::UnknownKey(k.clone()).into());
        }
        let mut probe = ScenarioParams::preset(scenario);
        let mut settings = Vec::new();
        for key in keys {
            if let Some(text) = raw.get(key) {
                let values = expand_values(key, text)?;
                for v in &values {
                    probe.set(key, v)?;
                }
                settings.push((key.to_string(), text.clone(), values));
            }
        }
        Ok(RunConfig { scenario, trials, master_seed, out, events_log, settings })
    }

    /// Keys taking more than one value.
    pub fn swept_keys(&self) -> Vec<&str> {
        self.settings.iter().filter(|(_, _, v)| v.len() > 1).map(|(k, _, _)| k.as_str()).collect()
    }

    /// Parameter columns of the summary: the scenario's fixed columns, then
    /// any other swept key.
    pub fn param_columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = self.scenario.columns().to_vec();
        for k in self.swept_keys() {
            if !cols.contains(&k) {
                cols.push(k);
            }
        }
        cols
    }

    /// Every parameter point, earlier keys varying slowest.
    pub fn points(&self) -> Result<Vec<ScenarioParams>, CliError> {
        let mut points = vec![ScenarioParams::preset(self.scenario)];
        for (key, _, values) in &self.settings {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut q = p.clone();
                    q.set(key, v)?;
                    next.push(q);
                }
            }
            points = next;
        }
        Ok(points)
    }

    /// Re-loadable text form of the run, every parameter included.
    pub fn effective_text(&self) -> String {
        let preset = ScenarioParams::preset(self.scenario);
        let mut s = String::from("# effective configuration; reload with --config\n[run]\n");
        s += &format!("scenario = {}\ntrials = {}\nseed = {}\n", self.scenario, self.trials, self.master_seed);
        s += &format!("events_log = {}\n\n[params]\n", self.events_log);
        for key in self.scenario.keys() {
            let value = match self.settings.iter().find(|(k, _, _)| k == key) {
                Some((_, raw, _)) => raw.clone(),
                None => preset.get(key).unwrap_or_default(),
            };
            s += &format!("{key} = {value}\n");
        }
        s
    }
}

/// What a batch produced.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub points: usize,
    pub trials: u32,
    pub out: PathBuf,
    pub summaries: Vec<Summary>,
}

fn fmt_f64(x: f64) -> String {
    format!("{}", x)
}

fn csv_writer(dir: &Path, name: &str) -> Result<(csv::Writer<BufWriter<File>>, PathBuf), CliError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(io_err(&path))?;
    Ok((csv::Writer::from_writer(BufWriter::new(f)), path))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), source: io::Error::other(e) }
}

/// Runs every trial of every point and writes the output files.
pub fn run_batch(cfg: &RunConfig) -> Result<BatchReport, CliError> {
    let points = cfg.points()?;
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;

    let jobs: Vec<(usize, u32)> = (0..points.len()).flat_map(|p| (0..cfg.trials).map(move |t| (p, t))).collect();
    let outputs: Vec<TrialOutput> = jobs
        .par_iter()
        .map(|&(p, t)| run_trial(&points[p], cfg.master_seed, t, cfg.events_log))
        .collect::<Result<_, _>>()?;
    let per_point: Vec<&[TrialOutput]> = outputs.chunks(cfg.trials as usize).collect();

    let cols = cfg.param_columns();
    let values = |p: &ScenarioParams| -> Vec<String> { cols.iter().map(|k| p.get(k).unwrap_or_default()).collect() };
    let mut summaries = Vec::with_capacity(points.len());

    let (mut w, path) = csv_writer(&cfg.out, "summary.csv")?;
    let e = csv_io(&path);
    let mut header = vec!["point", "scenario"];
    header.extend(&cols);
    header.extend([
        "trials",
        "mean_success",
        "stderr_success",
        "latency_p50",
        "latency_p95",
        "latency_p99",
        "sent",
        "delivered",
    ]);
    w.write_record(&header).map_err(&e)?;
    for (i, (p, trials)) in points.iter().zip(&per_point).enumerate() {
        let metrics: Vec<_> = trials.iter().map(|o| o.metrics.clone()).collect();
        let s = Summary::from_trials(&metrics);
        let mut row = vec![i.to_string(), cfg.scenario.to_string()];
        row.extend(values(p));
        row.extend([
            s.trials.to_string(),
            fmt_f64(s.mean_success),
            fmt_f64(s.stderr_success),
            fmt_f64(s.latency_p50),
            fmt_f64(s.latency_p95),
            fmt_f64(s.latency_p99),
            s.sent.to_string(),
            s.delivered.to_string(),
        ]);
        w.write_record(&row).map_err(&e)?;
        summaries.push(s);
    }
    w.flush().map_err(io_err(&path))?;

    let (mut w, path) = csv_writer(&cfg.out, "trials.csv")?;
    let e = csv_io(&path);
    let mut header = vec!["point", "scenario"];
    header.extend(&cols);
    header.extend([
        "trial",
        "sent",
        "delivered",
        "success",
        "duplicates",
        "drop_queue_full",
        "fail_retries",
        "drop_forward",
        "drop_loop",
        "drop_no_route",
        "lost_noise",
        "lost_collision",
        "below_sensitivity",
        "events",
        "invariants_ok",
    ]);
    w.write_record(&header).map_err(&e)?;
    for (i, (p, trials)) in points.iter().zip(&per_point).enumerate() {
        for (t, o) in trials.iter().enumerate() {
            let m = &o.metrics;
            let d = &m.drops;
            let mut row = vec![i.to_string(), cfg.scenario.to_string()];
            row.extend(values(p));
            row.extend([
                t.to_string(),
                m.sent.to_string(),
                m.delivered.to_string(),
                fmt_f64(m.success_rate()),
                m.duplicates.to_string(),
                d.queue_full.to_string(),
                d.failed_retries.to_string(),
                d.congestion.to_string(),
                d.routing_loop.to_string(),
                d.no_route.to_string(),
                d.lost_noise.to_string(),
                d.lost_collision.to_string(),
                d.below_sensitivity.to_string(),
                m.events.to_string(),
                m.invariants_ok.to_string(),
            ]);
            w.write_record(&row).map_err(&e)?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let (mut w, path) = csv_writer(&cfg.out, "latency_hist.csv")?;
    let e = csv_io(&path);
    w.write_record(["point", "bin_lo", "bin_hi", "count"]).map_err(&e)?;
    for (i, s) in summaries.iter().enumerate() {
        for (lo, hi, c) in histogram(&s.latencies, LATENCY_BIN_WIDTH) {
            w.write_record([i.to_string(), fmt_f64(lo), fmt_f64(hi), c.to_string()]).map_err(&e)?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let (mut w, path) = csv_writer(&cfg.out, "sink_deliveries.csv")?;
    let e = csv_io(&path);
    w.write_record(["point", "trial", "arrival", "origin", "seqno", "latency", "hop_count"]).map_err(&e)?;
    for (i, trials) in per_point.iter().enumerate() {
        for (t, o) in trials.iter().enumerate() {
            for r in &o.sink {
                w.write_record([
                    i.to_string(),
                    t.to_string(),
                    fmt_f64(r.arrival),
                    r.origin.to_string(),
                    r.seqno.to_string(),
                    fmt_f64(r.latency),
                    r.hop_count.to_string(),
                ])
                .map_err(&e)?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;

    if cfg.events_log {
        let (mut w, path) = csv_writer(&cfg.out, "events.csv")?;
        let e = csv_io(&path);
        w.write_record(["point", "trial", "time", "node", "origin", "dest", "seqno", "event"]).map_err(&e)?;
        for (i, trials) in per_point.iter().enumerate() {
            for (t, o) in trials.iter().enumerate() {
                for r in &o.log {
                    w.write_record([
                        i.to_string(),
                        t.to_string(),
                        fmt_f64(r.time),
                        r.node.to_string(),
                        r.origin.to_string(),
                        r.dest.map_or_else(|| "broadcast".to_string(), |d| d.to_string()),
                        r.seqno.to_string(),
                        r.event.as_str().to_string(),
                    ])
                    .map_err(&e)?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
    }

    let path = cfg.out.join("effective_config.txt");
    fs::write(&path, cfg.effective_text()).map_err(io_err(&path))?;

    Ok(BatchReport { points: points.len(), trials: cfg.trials, out: cfg.out.clone(), summaries })
}

/// Resolves and runs; what `main` calls.
pub fn run(args: &Args) -> Result<BatchReport, CliError> {
    let cfg = RunConfig::resolve(args)?;
    run_batch(&cfg)
}

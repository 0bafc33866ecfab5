use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uwsn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwsn")).args(args).arg("--out").arg(out).output().unwrap()
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn column(header: &str, name: &str) -> usize {
    header.split(',').position(|c| c == name).unwrap()
}

#[test]
fn default_p2p_sweep_writes_75_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p2p");
    let o = uwsn(&["--scenario", "p2p", "--trials", "2"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 76);
    assert_eq!(
        summary[0],
        "point,scenario,tx_power,receiver,coding,distance,trials,mean_success,stderr_success,\
         latency_p50,latency_p95,latency_p99,sent,delivered"
    );
    assert_eq!(rows(&out.join("trials.csv")).len(), 1 + 75 * 2);
    for f in ["latency_hist.csv", "sink_deliveries.csv", "effective_config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("events.csv").exists());
}

#[test]
fn broadcast_delta_sweep_has_11_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = uwsn(&["--scenario", "diffusion-broadcast", "--trials", "2", "--set", "p_packets=10"], &out);
    assert!(o.status.success());
    let summary = rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 12);
    let m = column(&summary[0], "mean_success");
    let means: Vec<f64> = summary[1..].iter().map(|r| r.split(',').nth(m).unwrap().parse().unwrap()).collect();
    assert_eq!(means[0], 0.0);
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        &["--scenario", "p2p", "--set", "tx_pwoer=30"][..],
        &["--scenario", "p2p", "--set", "tx_power=loud"],
        &["--scenario", "warp"],
        &["--trials", "3"],
        &["--scenario", "p2p", "--trials", "0"],
    ] {
        let o = uwsn(args, &out);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    let o = uwsn(&["--scenario", "p2p", "--set", "tx_pwoer=30"], &out);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tx_pwoer"));

    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "[params]\ntx_pwoer = 20\n").unwrap();
    let o = uwsn(&["--scenario", "p2p", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = uwsn(&["--scenario", "p2p", "--trials", "1"], &blocker.join("sub"));
    assert_eq!(o.status.code(), Some(3));
    let missing = dir.path().join("missing.conf");
    let o = uwsn(&["--config", missing.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "[run]\nscenario = p2p\ntrials = 1\n\n[params]\ntx_power = 20\ndistance = 5\n").unwrap();
    let out = dir.path().join("o");
    let o = uwsn(&["--config", cfg.to_str().unwrap(), "--set", "tx_power=30"], &out);
    assert!(o.status.success());
    let summary = rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    let p = column(&summary[0], "tx_power");
    assert_eq!(summary[1].split(',').nth(p), Some("30"));
    let eff = fs::read_to_string(out.join("effective_config.txt")).unwrap();
    assert!(eff.contains("tx_power = 30\n") && eff.contains("distance = 5\n"));

    let again = dir.path().join("again");
    let o = uwsn(&["--config", out.join("effective_config.txt").to_str().unwrap()], &again);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), fs::read(again.join("summary.csv")).unwrap());
}

#[test]
fn trial_rows_do_not_depend_on_trial_count() {
    let dir = tempfile::tempdir().unwrap();
    let args = |n: &'static str| ["--scenario", "routing-grid", "--set", "period=30", "--seed", "5", "--trials", n];
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    assert!(uwsn(&args("1"), &one).status.success());
    assert!(uwsn(&args("4"), &many).status.success());
    let a = rows(&one.join("trials.csv"));
    let b = rows(&many.join("trials.csv"));
    assert_eq!(a.len(), 2);
    assert_eq!(b.len(), 5);
    assert_eq!(a[..2], b[..2]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--scenario", "diffusion-unicast", "--trials", "2", "--set", "unicast_period=5,40", "--events-log"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(uwsn(&args, &a).status.success());
    assert!(uwsn(&args, &b).status.success());
    for f in ["summary.csv", "trials.csv", "events.csv", "latency_hist.csv", "effective_config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let events = rows(&a.join("events.csv"));
    assert_eq!(events[0], "point,trial,time,node,origin,dest,seqno,event");
    assert!(events.len() > 100);
}

//! Narrow-band propagation: path-loss laws, least-squares fitting of their
//! parameters from measurements, Gaussian fast fading and the link budget.
//!
//! Two laws are supported. The affine law models loss in dB as linear in
//! distance, `L(d) = offset + slope·d`, and the free-space law as linear in
//! log-distance, `L(d) = L(d0) + eta·10·log10(d/d0)`. Both are fitted with
//! the same normal-equations solver, [`fit_affine`], by choosing the
//! regressor.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("regressor and loss vectors differ in length ({regressors} vs {losses})")]
    Shape { regressors: usize, losses: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("regressors are degenerate; the normal equations are singular")]
    Singular,
    #[error("distance must be positive, got {0}")]
    Domain(f64),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Planar node coordinates in meters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Position<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Position<T> {
    pub fn new(x: T, y: T) -> Self {
        Position { x, y }
    }

    pub fn distance_to(&self, other: &Position<T>) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Loss-versus-distance law.
pub trait PathLoss<T: Real> {
    /// Deterministic loss in dB at `d` meters.
    fn loss_db(&self, d: T) -> Result<T, ChannelError>;
}

fn check_distance<T: Real>(d: T) -> Result<(), ChannelError> {
    if d > T::zero() && d.is_finite() {
        Ok(())
    } else {
        Err(ChannelError::Domain(d.to_f64_lossy()))
    }
}

/// Affine law `L(d) = l_d0 + slope_per_m·d`.
///
/// `l_d0` is the fitted intercept and `slope_per_m` the per-meter slope
/// (the regression on `d/d0` yields `slope_per_m·d0`, stored divided by `d0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPathLoss<T> {
    l_d0: T,
    slope_per_m: T,
    d0: T,
}

impl<T: Real> LinearPathLoss<T> {
    pub fn new(l_d0: T, slope_per_m: T, d0: T) -> Result<Self, ChannelError> {
        if !(slope_per_m > T::zero()) {
            return Err(ChannelError::InvalidParameter(format!("slope_per_m = {slope_per_m}")));
        }
        if !(l_d0 > T::zero()) {
            return Err(ChannelError::InvalidParameter(format!("l_d0 = {l_d0}")));
        }
        if !(d0 > T::zero()) {
            return Err(ChannelError::InvalidParameter(format!("d0 = {d0}")));
        }
        Ok(LinearPathLoss { l_d0, slope_per_m, d0 })
    }

    /// 46 kHz underwater fit: 47.40 dB offset, 10.45 dB/m, d0 = 2 m.
    pub fn reference_46khz() -> Self {
        LinearPathLoss { l_d0: T::lit(47.40), slope_per_m: T::lit(10.45), d0: T::lit(2.0) }
    }

    pub fn l_d0(&self) -> T {
        self.l_d0
    }

    pub fn slope_per_m(&self) -> T {
        self.slope_per_m
    }

    pub fn d0(&self) -> T {
        self.d0
    }

    /// Distance at which the deterministic loss equals `loss_db`.
    pub fn distance_for_loss(&self, loss_db: T) -> T {
        (loss_db - self.l_d0) / self.slope_per_m
    }
}

impl<T: Real> PathLoss<T> for LinearPathLoss<T> {
    fn loss_db(&self, d: T) -> Result<T, ChannelError> {
        check_distance(d)?;
        Ok(self.l_d0 + self.slope_per_m * d)
    }
}

/// Free-space law `L(d) = l_d0 + eta·10·log10(d/d0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeSpacePathLoss<T> {
    l_d0: T,
    eta: T,
    d0: T,
}

impl<T: Real> FreeSpacePathLoss<T> {
    pub fn new(l_d0: T, eta: T, d0: T) -> Result<Self, ChannelError> {
        if !(eta > T::zero()) {
            return Err(ChannelError::InvalidParameter(format!("eta = {eta}")));
        }
        if !(d0 > T::zero()) {
            return Err(ChannelError::InvalidParameter(format!("d0 = {d0}")));
        }
        Ok(FreeSpacePathLoss { l_d0, eta, d0 })
    }

    pub fn l_d0(&self) -> T {
        self.l_d0
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn d0(&self) -> T {
        self.d0
    }
}

impl<T: Real> PathLoss<T> for FreeSpacePathLoss<T> {
    fn loss_db(&self, d: T) -> Result<T, ChannelError> {
        check_distance(d)?;
        Ok(self.l_d0 + self.eta * T::lit(10.0) * (d / self.d0).log10())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathLossModel<T> {
    Linear(LinearPathLoss<T>),
    FreeSpace(FreeSpacePathLoss<T>),
}

impl<T: Real> PathLoss<T> for PathLossModel<T> {
    fn loss_db(&self, d: T) -> Result<T, ChannelError> {
        match self {
            PathLossModel::Linear(m) => m.loss_db(d),
            PathLossModel::FreeSpace(m) => m.loss_db(d),
        }
    }
}

/// Per-frame fast fading added to the received power, in dB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FadingModel<T> {
    None,
    Gaussian { sigma: T },
}

impl<T: Real> FadingModel<T> {
    pub fn gaussian(sigma: T) -> Result<Self, ChannelError> {
        if sigma >= T::zero() && sigma.is_finite() {
            Ok(FadingModel::Gaussian { sigma })
        } else {
            Err(ChannelError::InvalidParameter(format!("sigma = {sigma}")))
        }
    }

    /// Gaussian fading with variance 0.56 dB², fitted at 46 kHz.
    pub fn reference_46khz() -> Self {
        FadingModel::Gaussian { sigma: T::lit(0.56f64.sqrt()) }
    }

    pub fn sigma(&self) -> T {
        match self {
            FadingModel::None => T::zero(),
            FadingModel::Gaussian { sigma } => *sigma,
        }
    }

    /// One independent draw. Always consumes exactly one normal variate for
    /// the Gaussian kind, so stream positions do not depend on sigma.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        match self {
            FadingModel::None => T::zero(),
            FadingModel::Gaussian { sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                if *sigma == T::zero() {
                    T::zero()
                } else {
                    *sigma * T::lit(z)
                }
            }
        }
    }
}

/// Free function form of [`FadingModel::sample`].
pub fn sample_fading<T: Real, R: Rng + ?Sized>(model: &FadingModel<T>, rng: &mut R) -> T {
    model.sample(rng)
}

/// Loss measurements at increasing distances.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet<T> {
    distances: Vec<T>,
    losses: Vec<T>,
}

impl<T: Real> MeasurementSet<T> {
    pub fn new(distances: Vec<T>, losses: Vec<T>) -> Result<Self, ChannelError> {
        if distances.len() != losses.len() {
            return Err(ChannelError::Shape { regressors: distances.len(), losses: losses.len() });
        }
        if distances.len() < 2 {
            return Err(ChannelError::InsufficientData { needed: 2, got: distances.len() });
        }
        if let Some(d) = distances.iter().find(|d| !(**d > T::zero())) {
            return Err(ChannelError::Domain(d.to_f64_lossy()));
        }
        if distances.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ChannelError::InvalidParameter("distances must be strictly increasing".into()));
        }
        Ok(MeasurementSet { distances, losses })
    }

    pub fn distances(&self) -> &[T] {
        &self.distances
    }

    pub fn losses(&self) -> &[T] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// Parses `distance_m,loss_db` rows. A non-numeric first row is treated as
    /// a header; blank lines and `#` comments are skipped.
    pub fn from_csv_str(text: &str) -> Result<Self, ChannelError> {
        let mut distances = Vec::new();
        let mut losses = Vec::new();
        let mut first_row = true;
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(ChannelError::Parse {
                    line: idx + 1,
                    message: format!("expected 2 columns, found {}", fields.len()),
                });
            }
            let parsed = (fields[0].parse::<f64>(), fields[1].parse::<f64>());
            match parsed {
                (Ok(d), Ok(l)) => {
                    distances.push(T::lit(d));
                    losses.push(T::lit(l));
                }
                _ if first_row => {}
                _ => {
                    return Err(ChannelError::Parse { line: idx + 1, message: format!("not a number pair: {line:?}") })
                }
            }
            first_row = false;
        }
        MeasurementSet::new(distances, losses)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => line[..i].trim(),
        None => line.trim(),
    }
}

/// One-column fading trace (dB per line, `#` comments allowed).
pub fn parse_trace<T: Real>(text: &str) -> Result<Vec<T>, ChannelError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<f64>().map_err(|e| ChannelError::Parse { line: idx + 1, message: e.to_string() })?;
        out.push(T::lit(v));
    }
    Ok(out)
}

/// Least-squares solution of `m ≈ coefficient·b + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit<T> {
    pub coefficient: T,
    pub offset: T,
}

/// Solves the normal equations `(AᵀA) x = Aᵀm` for `A = [b, 1]`.
pub fn fit_affine<T: Real>(regressors: &[T], losses: &[T]) -> Result<AffineFit<T>, ChannelError> {
    if regressors.len() != losses.len() {
        return Err(ChannelError::Shape { regressors: regressors.len(), losses: losses.len() });
    }
    let n = regressors.len();
    if n < 2 {
        return Err(ChannelError::InsufficientData { needed: 2, got: n });
    }
    if regressors.iter().all(|b| *b == regressors[0]) {
        return Err(ChannelError::Singular);
    }

    // AᵀA = [[Σb², Σb], [Σb, n]],  Aᵀm = [Σbm, Σm]
    let (mut s_bb, mut s_b, mut s_bm, mut s_m) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (&b, &m) in regressors.iter().zip(losses) {
        s_bb = s_bb + b * b;
        s_b = s_b + b;
        s_bm = s_bm + b * m;
        s_m = s_m + m;
    }
    let n = T::from_usize(n).unwrap();
    let det = s_bb * n - s_b * s_b;
    if !(det > s_bb * n * T::epsilon() * T::lit(16.0)) {
        return Err(ChannelError::Singular);
    }
    Ok(AffineFit { coefficient: (n * s_bm - s_b * s_m) / det, offset: (s_bb * s_m - s_b * s_bm) / det })
}

/// Fits the affine law by regressing on `d/d0`.
pub fn fit_linear_model<T: Real>(meas: &MeasurementSet<T>, d0: T) -> Result<LinearPathLoss<T>, ChannelError> {
    if !(d0 > T::zero()) {
        return Err(ChannelError::Domain(d0.to_f64_lossy()));
    }
    let b: Vec<T> = meas.distances.iter().map(|&d| d / d0).collect();
    let fit = fit_affine(&b, &meas.losses)?;
    LinearPathLoss::new(fit.offset, fit.coefficient / d0, d0)
}

/// Fits the free-space law by regressing on `10·log10(d/d0)`.
pub fn fit_freespace_model<T: Real>(meas: &MeasurementSet<T>, d0: T) -> Result<FreeSpacePathLoss<T>, ChannelError> {
    if !(d0 > T::zero()) {
        return Err(ChannelError::Domain(d0.to_f64_lossy()));
    }
    let b: Vec<T> = meas.distances.iter().map(|&d| T::lit(10.0) * (d / d0).log10()).collect();
    let fit = fit_affine(&b, &meas.losses)?;
    FreeSpacePathLoss::new(fit.offset, fit.coefficient, d0)
}

/// Residual sum of squares of `model` against the measurements.
pub fn residual_sum_of_squares<T: Real, M: PathLoss<T>>(
    model: &M,
    meas: &MeasurementSet<T>,
) -> Result<T, ChannelError> {
    meas.distances.iter().zip(&meas.losses).try_fold(T::zero(), |acc, (&d, &m)| {
        let r = model.loss_db(d)? - m;
        Ok(acc + r * r)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FadingEstimate<T> {
    pub mu: T,
    pub sigma: T,
}

/// Sample mean and unbiased sample standard deviation of a dB trace.
pub fn estimate_fading_params<T: Real>(trace: &[T]) -> Result<FadingEstimate<T>, ChannelError> {
    if trace.len() < 2 {
        return Err(ChannelError::InsufficientData { needed: 2, got: trace.len() });
    }
    let n = T::from_usize(trace.len()).unwrap();
    let mu = trace.iter().fold(T::zero(), |a, &x| a + x) / n;
    let ss = trace.iter().fold(T::zero(), |a, &x| a + (x - mu) * (x - mu));
    Ok(FadingEstimate { mu, sigma: (ss / (n - T::one())).sqrt() })
}

/// Received power; a positive fading sample raises it.
#[inline]
pub fn rx_power_dbm<T: Real>(tx_dbm: T, loss_db: T, fading_db: T) -> T {
    tx_dbm - loss_db + fading_db
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Purpose, RngStream, StreamId};
    use approx::assert_relative_eq;

    fn stream(node: u32) -> RngStream {
        RngStream::new(2024, StreamId { trial: 0, node, purpose: Purpose::Fading })
    }

    #[test]
    fn fit_affine_recovers_exact_line() {
        let fit = fit_affine(&[1.0, 2.0, 3.0], &[12.0, 22.0, 32.0]).unwrap();
        assert_relative_eq!(fit.coefficient, 10.0, epsilon = 1e-12);
        assert_relative_eq!(fit.offset, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_affine_flat_data() {
        let fit = fit_affine(&[0.0, 1.0], &[5.0, 5.0]).unwrap();
        assert_relative_eq!(fit.coefficient, 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit.offset, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_affine_noisy_line_matches_frozen_oracle() {
        // Frozen from the covariance/variance formula: cov = 50.2/4, var = 5/4.
        let fit = fit_affine(&[1.0, 2.0, 3.0, 4.0], &[11.9, 22.1, 31.9, 42.1]).unwrap();
        assert_relative_eq!(fit.coefficient, 10.04, epsilon = 1e-9);
        assert_relative_eq!(fit.offset, 1.90, epsilon = 1e-9);
    }

    #[test]
    fn fit_affine_errors() {
        assert_eq!(fit_affine(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(ChannelError::Singular));
        assert_eq!(fit_affine(&[1.0, 2.0], &[1.0]), Err(ChannelError::Shape { regressors: 2, losses: 1 }));
        assert_eq!(fit_affine::<f64>(&[1.0], &[1.0]), Err(ChannelError::InsufficientData { needed: 2, got: 1 }));
    }

    #[test]
    fn fit_affine_works_in_f32() {
        let fit = fit_affine::<f32>(&[1.0, 2.0, 3.0], &[12.0, 22.0, 32.0]).unwrap();
        assert_relative_eq!(fit.coefficient, 10.0, epsilon = 1e-4);
        assert_relative_eq!(fit.offset, 2.0, epsilon = 1e-4);
    }

    #[test]
    fn linear_fit_recovers_preset() {
        let d: Vec<f64> = vec![2.0, 3.0, 4.0, 5.0, 6.0];
        let m: Vec<f64> = d.iter().map(|d| 47.40 + 10.45 * d).collect();
        let model = fit_linear_model(&MeasurementSet::new(d, m).unwrap(), 2.0).unwrap();
        assert_relative_eq!(model.slope_per_m(), 10.45, max_relative = 1e-12);
        assert_relative_eq!(model.l_d0(), 47.40, max_relative = 1e-12);
        assert_eq!(model.d0(), 2.0);
    }

    #[test]
    fn freespace_fit_recovers_synthetic() {
        let d: Vec<f64> = vec![2.0, 3.0, 4.0, 5.0, 6.0];
        let m: Vec<f64> = d.iter().map(|d| 40.0 + 2.0 * 10.0 * (d / 2.0).log10()).collect();
        let model = fit_freespace_model(&MeasurementSet::new(d, m).unwrap(), 2.0).unwrap();
        assert_relative_eq!(model.eta(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(model.l_d0(), 40.0, max_relative = 1e-12);
    }

    #[test]
    fn freespace_two_point_offset_is_loss_at_reference() {
        let meas = MeasurementSet::new(vec![2.0, 9.0], vec![61.3, 90.0]).unwrap();
        let model = fit_freespace_model(&meas, 2.0).unwrap();
        assert_relative_eq!(model.l_d0(), 61.3, max_relative = 1e-12);
    }

    #[test]
    fn linear_fit_noise_monte_carlo() {
        // The least-squares slope is unbiased; 100 resamples at sigma 0.75 dB
        // put the mean within a small fraction of a dB/m of the truth.
        let mut rng = stream(9);
        let fading = FadingModel::gaussian(0.75).unwrap();
        let d = vec![2.0, 3.0, 4.0, 5.0, 6.0];
        let mut sum = 0.0;
        for _ in 0..100 {
            let m: Vec<f64> = d.iter().map(|d| 47.40 + 10.45 * d + fading.sample(&mut rng)).collect();
            sum += fit_linear_model(&MeasurementSet::new(d.clone(), m).unwrap(), 2.0).unwrap().slope_per_m();
        }
        assert!((sum / 100.0 - 10.45).abs() < 0.5);
    }

    #[test]
    fn path_loss_examples() {
        let lin = LinearPathLoss::<f64>::reference_46khz();
        assert_relative_eq!(lin.loss_db(5.0).unwrap(), 99.65, epsilon = 1e-9);
        let fs = FreeSpacePathLoss::new(47.40, 3.0, 2.0).unwrap();
        assert_relative_eq!(fs.loss_db(2.0).unwrap(), 47.40, epsilon = 1e-12);
        assert_relative_eq!(fs.loss_db(20.0).unwrap(), 77.40, epsilon = 1e-9);
        assert_eq!(lin.loss_db(0.0), Err(ChannelError::Domain(0.0)));
        assert_eq!(fs.loss_db(-1.0), Err(ChannelError::Domain(-1.0)));
    }

    #[test]
    fn model_constructors_validate() {
        assert!(LinearPathLoss::new(47.4, -1.0, 2.0).is_err());
        assert!(LinearPathLoss::new(-1.0, 10.0, 2.0).is_err());
        assert!(LinearPathLoss::new(47.4, 10.0, 0.0).is_err());
        assert!(FreeSpacePathLoss::new(47.4, 0.0, 2.0).is_err());
        assert!(FadingModel::gaussian(-0.1).is_err());
    }

    #[test]
    fn fading_none_and_zero_sigma_are_zero() {
        let mut rng = stream(1);
        for _ in 0..100 {
            assert_eq!(FadingModel::<f64>::None.sample(&mut rng), 0.0);
            assert_eq!(FadingModel::Gaussian { sigma: 0.0 }.sample(&mut rng), 0.0);
        }
    }

    #[test]
    fn fading_variance_matches_preset() {
        let mut rng = stream(2);
        let model = FadingModel::<f64>::reference_46khz();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_fading(&model, &mut rng)).collect();
        let est = estimate_fading_params(&xs).unwrap();
        assert!((est.sigma * est.sigma - 0.56).abs() <= 0.05 * 0.56);
        assert!(est.mu.abs() <= 4.0 * model.sigma() / (n as f64).sqrt());
    }

    #[test]
    fn fading_estimates() {
        let est = estimate_fading_params(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(est.sigma, 0.0);
        let est = estimate_fading_params(&[-1.0, 1.0]).unwrap();
        assert_eq!(est.mu, 0.0);
        assert_relative_eq!(est.sigma, 2f64.sqrt(), epsilon = 1e-15);
        assert!(estimate_fading_params(&[1.0]).is_err());

        let mut rng = stream(3);
        let model = FadingModel::gaussian(0.56f64.sqrt()).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| model.sample(&mut rng)).collect();
        let est = estimate_fading_params(&xs).unwrap();
        assert!((est.sigma.powi(2) - 0.56).abs() <= 0.056);
    }

    #[test]
    fn rx_power_examples() {
        assert_relative_eq!(rx_power_dbm(30.0, 99.65, 0.0), -69.65, epsilon = 1e-12);
        assert_eq!(rx_power_dbm(0.0, 0.0, 0.0), 0.0);
        assert_eq!(rx_power_dbm(20.0, 100.0, 2.0), -78.0);
    }

    #[test]
    fn measurement_csv_parsing() {
        let text = "distance_m,loss_db\n# comment\n2, 78.5\n3,88 # trailing\n\n4,98\n";
        let meas = MeasurementSet::<f64>::from_csv_str(text).unwrap();
        assert_eq!(meas.distances(), &[2.0, 3.0, 4.0]);
        assert_eq!(meas.losses(), &[78.5, 88.0, 98.0]);

        let headerless = MeasurementSet::<f64>::from_csv_str("2,1\n3,2").unwrap();
        assert_eq!(headerless.len(), 2);

        assert!(matches!(MeasurementSet::<f64>::from_csv_str("2,1\nx,y\n"), Err(ChannelError::Parse { line: 2, .. })));
        assert!(MeasurementSet::<f64>::from_csv_str("3,1\n2,1").is_err());
        assert!(MeasurementSet::<f64>::from_csv_str("2,1,0\n").is_err());
    }

    #[test]
    fn trace_parsing() {
        let t: Vec<f64> = parse_trace("# dB\n0.5\n-0.25\n\n1").unwrap();
        assert_eq!(t, vec![0.5, -0.25, 1.0]);
        assert!(parse_trace::<f64>("abc").is_err());
    }

    #[test]
    fn positions() {
        let a = Position::new(0.0, 0.0);
        let b = Position::new(3.0, 4.0);
        assert_eq!(a.distance_to(&b), 5.0);
    }
}

//! Estimators on polarimeter records: window integrals, back-to-back pair
//! statistics, the conditional-variance squeezing parameter, and the
//! SN + PN + CN noise decomposition.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DeterministicPath, MomentModel};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::trajectories::TrajectoryRecord;

/// Integrals of one record over `[0, T]` and `[T, 2T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeasurementPair {
    pub m1: f64,
    pub m2: f64,
}

fn steps(len: f64, dt: f64) -> usize {
    (len / dt).round() as usize
}

/// `Σ dM` over `[start, start + length)`; the window is snapped to the sample grid.
pub fn integrate_record(rec: &TrajectoryRecord, start: f64, length: f64) -> Result<f64> {
    if !(start >= 0.0) || !(length > 0.0) {
        return Err(Error::domain(format!("window [{start:e}, +{length:e}) is empty or negative")));
    }
    let i0 = steps(start, rec.dt);
    let n = steps(length, rec.dt);
    if n == 0 || i0 + n > rec.dm.len() {
        return Err(Error::domain(format!(
            "window [{start:e}, {:e}) s overruns a record of {} samples at dt = {:e}",
            start + length,
            rec.dm.len(),
            rec.dt
        )));
    }
    Ok(rec.dm[i0..i0 + n].iter().sum())
}

pub fn measurement_pair(rec: &TrajectoryRecord, window: f64) -> Result<MeasurementPair> {
    Ok(MeasurementPair { m1: integrate_record(rec, 0.0, window)?, m2: integrate_record(rec, window, window)? })
}

pub fn measurement_pairs<'a>(records: impl IntoIterator<Item = &'a TrajectoryRecord>, window: f64) -> Result<Vec<MeasurementPair>> {
    records.into_iter().map(|r| measurement_pair(r, window)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n−1) sample variance.
pub fn sample_variance(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::domain("variance needs at least two samples"));
    }
    let m = mean(xs);
    Ok(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
}

fn split(pairs: &[MeasurementPair]) -> (Vec<f64>, Vec<f64>) {
    (pairs.iter().map(|p| p.m1).collect(), pairs.iter().map(|p| p.m2).collect())
}

/// `cov(M₁,M₂) = [Δ(M₁+M₂)² − Δ(M₁−M₂)²]/4`.
pub fn covariance_estimate(pairs: &[MeasurementPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::domain("covariance needs at least two pairs"));
    }
    let sum: Vec<f64> = pairs.iter().map(|p| p.m1 + p.m2).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.m1 - p.m2).collect();
    Ok((sample_variance(&sum)? - sample_variance(&diff)?) / 4.0)
}

/// `Δ(M₂|M₁)² = ΔM₂² − cov(M₁,M₂)²/ΔM₁²`.
pub fn conditional_variance(pairs: &[MeasurementPair]) -> Result<f64> {
    let (m1, m2) = split(pairs);
    let v1 = sample_variance(&m1)?;
    if !(v1 > 0.0) {
        return Err(Error::domain("first-window variance is zero; conditional variance undefined"));
    }
    let c = covariance_estimate(pairs)?;
    Ok(sample_variance(&m2)? - c * c / v1)
}

/// How the mean-spin ratio `|<F₂>|²/|<F₁>|²` enters the squeezing estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSpinConvention {
    /// Divide: lost mean spin costs sensitivity, the Wineland form.
    #[default]
    Divide,
    /// Multiply, as in the literal printed estimator.
    Multiply,
}

impl MeanSpinConvention {
    pub fn apply(self, normalized: f64, ratio: f64) -> f64 {
        match self {
            MeanSpinConvention::Divide => normalized / ratio,
            MeanSpinConvention::Multiply => normalized * ratio,
        }
    }
}

/// `ξ² = [(Δ(M₂|M₁)² − ΔM_SN²)/ΔM_PN²]` combined with the mean-spin ratio.
pub fn squeezing_parameter(cond_var: f64, sn: f64, pn: f64, mean_spin_ratio: f64, conv: MeanSpinConvention) -> Result<f64> {
    if !(pn > 0.0) {
        return Err(Error::domain(format!("projection-noise reference must be positive, got {pn:e}")));
    }
    if !(mean_spin_ratio > 0.0) {
        return Err(Error::domain(format!("mean-spin ratio must be positive, got {mean_spin_ratio}")));
    }
    Ok(conv.apply((cond_var - sn) / pn, mean_spin_ratio))
}

pub fn squeezing_from_records(pairs: &[MeasurementPair], sn: f64, pn: f64, mean_spin_ratio: f64, conv: MeanSpinConvention) -> Result<f64> {
    squeezing_parameter(conditional_variance(pairs)?, sn, pn, mean_spin_ratio, conv)
}

/// Shot-noise and projection-noise references of a window of length `T` in
/// record units: `T/κ` and `T²ΔF_z²(0)`.
pub fn noise_references(kappa: f64, var_fz0: f64, window: f64) -> (f64, f64) {
    (window / kappa, window * window * var_fz0)
}

#[derive(Clone, Debug, Serialize)]
pub struct SqueezingEstimate {
    pub window: f64,
    pub n: usize,
    pub var_m1: f64,
    pub var_m2: f64,
    pub cov: f64,
    pub conditional_variance: f64,
    pub shot_noise: f64,
    pub projection_noise: f64,
    pub mean_spin_ratio: f64,
    pub convention: MeanSpinConvention,
    pub xi2: f64,
    pub xi2_db: f64,
    /// Bootstrap standard deviation of `ξ²` (linear units).
    pub xi2_sd: f64,
}

/// Full estimate with a pair-resampling bootstrap for the spread.
pub fn estimate_squeezing(
    pairs: &[MeasurementPair],
    window: f64,
    sn: f64,
    pn: f64,
    mean_spin_ratio: f64,
    conv: MeanSpinConvention,
    n_boot: usize,
    boot_seed: u64,
) -> Result<SqueezingEstimate> {
    let (m1, m2) = split(pairs);
    let cond = conditional_variance(pairs)?;
    let xi2 = squeezing_parameter(cond, sn, pn, mean_spin_ratio, conv)?;
    let xi2_sd = if n_boot >= 2 {
        let boots = bootstrap(pairs, n_boot, boot_seed, |s| squeezing_from_records(s, sn, pn, mean_spin_ratio, conv))?;
        sample_variance(&boots)?.sqrt()
    } else {
        f64::NAN
    };
    Ok(SqueezingEstimate {
        window,
        n: pairs.len(),
        var_m1: sample_variance(&m1)?,
        var_m2: sample_variance(&m2)?,
        cov: covariance_estimate(pairs)?,
        conditional_variance: cond,
        shot_noise: sn,
        projection_noise: pn,
        mean_spin_ratio,
        convention: conv,
        xi2,
        xi2_db: 10.0 * xi2.log10(),
        xi2_sd,
    })
}

/// Resample pairs with replacement `n_boot` times and evaluate `stat` on each.
pub fn bootstrap(
    pairs: &[MeasurementPair],
    n_boot: usize,
    seed: u64,
    stat: impl Fn(&[MeasurementPair]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut rng = NoiseStream::new(seed, u64::MAX);
    let n = pairs.len();
    let mut sample = vec![pairs[0]; n];
    let mut out = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        for s in sample.iter_mut() {
            *s = pairs[((rng.uniform() * n as f64) as usize).min(n - 1)];
        }
        out.push(stat(&sample)?);
    }
    Ok(out)
}

/// `|<F_x>(3T/2)|² / |<F_x>(T/2)|²`: mean spin at the window midpoints.
pub fn mean_spin_decay_ratio(path: &DeterministicPath, window: f64) -> Result<f64> {
    let end = path.times.last().copied().unwrap_or(0.0);
    if 2.0 * window > end + 0.5 * path.dt {
        return Err(Error::domain(format!("path ends at {end:e} s, before 2T = {:e} s", 2.0 * window)));
    }
    let a = path.moments[path.index_at(0.5 * window)].fx;
    let b = path.moments[path.index_at(1.5 * window)].fx;
    if a == 0.0 {
        return Err(Error::domain("zero mean spin in the first window"));
    }
    Ok((b / a).powi(2))
}

/// Exact ensemble statistics of `(M₁, M₂)` implied by the filter equations
/// on a given path. Every record is a linear functional of the innovations,
/// `M_w = Σ_m c_m^w dW_m`, so the moments follow from one backward sweep per
/// window.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpectedPairStatistics {
    pub var_m1: f64,
    pub var_m2: f64,
    pub cov: f64,
    pub shot_noise: f64,
}

impl ExpectedPairStatistics {
    pub fn conditional_variance(&self) -> f64 {
        self.var_m2 - self.cov * self.cov / self.var_m1
    }
}

fn innovation_weights(model: &MomentModel, path: &DeterministicPath, i0: usize, n: usize) -> Vec<f64> {
    let dt = path.dt;
    let sk = model.kappa.sqrt();
    let h = model.measurement_vector();
    let end = i0 + n;
    let mut psi = DVector::<f64>::zeros(h.len());
    let mut coef = vec![0.0; end];
    for m in (0..end).rev() {
        let inside = m >= i0;
        coef[m] = if inside { 1.0 / sk } else { 0.0 } + sk * psi.dot(&path.gains[m]);
        psi += model.odd_drift_transposed(&psi) * dt;
        if inside {
            psi.axpy(dt, h, 1.0);
        }
    }
    coef
}

pub fn expected_pair_statistics(model: &MomentModel, path: &DeterministicPath, window: f64) -> Result<ExpectedPairStatistics> {
    if !(model.kappa > 0.0) {
        return Err(Error::domain("record statistics need κ > 0"));
    }
    let n = steps(window, path.dt);
    if n == 0 || 2 * n > path.n_steps() {
        return Err(Error::domain(format!("path of {} steps cannot hold two windows of {n}", path.n_steps())));
    }
    let c1 = innovation_weights(model, path, 0, n);
    let c2 = innovation_weights(model, path, n, n);
    let dt = path.dt;
    let var_m1 = c1.iter().map(|c| c * c).sum::<f64>() * dt;
    let var_m2 = c2.iter().map(|c| c * c).sum::<f64>() * dt;
    let cov = c1.iter().zip(&c2).map(|(a, b)| a * b).sum::<f64>() * dt;
    Ok(ExpectedPairStatistics { var_m1, var_m2, cov, shot_noise: n as f64 * dt / model.kappa })
}

/// Expected total variance of a single window `[0, T]`.
pub fn expected_window_variance(model: &MomentModel, path: &DeterministicPath, window: f64) -> Result<f64> {
    let n = steps(window, path.dt);
    if n == 0 || n > path.n_steps() {
        return Err(Error::domain("window longer than path"));
    }
    let c = innovation_weights(model, path, 0, n);
    Ok(c.iter().map(|c| c * c).sum::<f64>() * path.dt)
}

/// One `ΔM²` observation at atom number `N₁` with its sampling variance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VariancePoint {
    pub n1: f64,
    pub variance: f64,
    pub sampling_variance: f64,
}

impl VariancePoint {
    /// Sample variance of `n` Gaussian draws: sampling variance `2σ⁴/(n−1)`.
    pub fn from_samples(n1: f64, xs: &[f64]) -> Result<Self> {
        let v = sample_variance(xs)?;
        Ok(VariancePoint { n1, variance: v, sampling_variance: 2.0 * v * v / (xs.len() - 1) as f64 })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseDecomposition {
    pub shot_noise: f64,
    /// PN slope.
    pub a: f64,
    /// CN curvature.
    pub b: f64,
    /// Covariance of `(a, b)`.
    pub covariance: [[f64; 2]; 2],
    pub points: Vec<DecomposedPoint>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecomposedPoint {
    pub n1: f64,
    pub total: f64,
    pub projection_noise: f64,
    pub classical_noise: f64,
    pub residual: f64,
}

impl NoiseDecomposition {
    pub fn a_sd(&self) -> f64 {
        self.covariance[0][0].sqrt()
    }

    pub fn b_sd(&self) -> f64 {
        self.covariance[1][1].sqrt()
    }
}

/// Weighted least squares for `ΔM² − ΔM_SN² = aN₁ + bN₁²` with the shot-noise
/// level held at its independent value.
pub fn noise_decomposition_fit(points: &[VariancePoint], shot_noise: f64) -> Result<NoiseDecomposition> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.n1).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::domain(format!("decomposition fit needs >= 3 distinct N₁ values, got {}", distinct.len())));
    }
    let mut normal = Matrix2::<f64>::zeros();
    let mut rhs = Vector2::<f64>::zeros();
    for p in points {
        if !(p.sampling_variance > 0.0) {
            return Err(Error::domain(format!("non-positive sampling variance at N₁ = {:e}", p.n1)));
        }
        let w = 1.0 / p.sampling_variance;
        let x = Vector2::new(p.n1, p.n1 * p.n1);
        normal += w * x * x.transpose();
        rhs += w * x * (p.variance - shot_noise);
    }
    // rescale columns so the conditioning check is meaningful
    let s = Matrix2::from_diagonal(&Vector2::new(1.0 / normal[(0, 0)].sqrt(), 1.0 / normal[(1, 1)].sqrt()));
    let scaled = s * normal * s;
    let cov_scaled = scaled.try_inverse().filter(|_| scaled.determinant() > 1e-12).ok_or_else(|| Error::domain("decomposition fit is rank deficient"))?;
    let cov = s * cov_scaled * s;
    let ab = cov * rhs;
    let (a, b) = (ab[0], ab[1]);
    let decomposed = points
        .iter()
        .map(|p| DecomposedPoint {
            n1: p.n1,
            total: p.variance,
            projection_noise: a * p.n1,
            classical_noise: b * p.n1 * p.n1,
            residual: p.variance - shot_noise - a * p.n1 - b * p.n1 * p.n1,
        })
        .collect();
    Ok(NoiseDecomposition {
        shot_noise,
        a,
        b,
        covariance: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        points: decomposed,
    })
}

pub fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

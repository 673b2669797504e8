//! Gaussian moment engine for the collective qutrit operators.
//!
//! Variables per slice `k` and spin-wave mode `a`:
//! populations `N_i^a(k)` (`i ∈ {↑,↓,T}`), coherence means `X_c^a(k)`, and the
//! covariance of the coherences that are odd under a π rotation about `x`
//! (`↑↓`, `↓T`). `F_z` lives entirely in the odd sector; the pumping map and the
//! initial state are parity-even, so odd–even covariances vanish identically
//! and the even coherence `↑T` only needs its (deterministic) mean.
//!
//! Covariances, populations and the even mean are record-independent and are
//! advanced with classical RK4; odd means take an Euler–Maruyama step driven by
//! the same `dW` that produces the record sample.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::Serialize;

use crate::angular::{SpinMatrices, TwoJ};
use crate::atomic::AtomicSpecies;
use crate::error::{Error, Result};
use crate::geometry::OverlapTables;
use crate::probe::{ColorQuantities, TwoColorProbe, effective_measurement_rate};
use crate::pumping::{ColorPumping, PumpingTables, DOWN_T, UP_DOWN, UP_T};

/// `f_z` and `f_x` restricted to the qutrit, in the operator basis `n_i`, `x_c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpinCoefficients {
    pub two_f: i32,
    /// `Tr(f_z x_↑↓)`: coefficient of `X_↑↓` in `F_z`.
    pub v_up: f64,
    /// `Tr(f_z x_↓T)`.
    pub w_up: f64,
    /// `(Δf_z²)` in `|↑>` and `|↓>`.
    pub variance_up: f64,
    pub variance_down: f64,
    /// `f_x` eigenvalues `(f, f-1, f-2)` weighting the populations.
    pub fx_weights: [f64; 3],
}

/// Coefficients from exact angular-momentum matrices in the `m_x` eigenbasis.
pub fn spin_coefficients(two_f: TwoJ) -> Result<SpinCoefficients> {
    if two_f.0 < 1 {
        return Err(Error::domain("spin coefficients need f >= 1/2"));
    }
    let spin = SpinMatrices::new(two_f);
    let eig = spin.x.map(|v| v.re).symmetric_eigen();
    let mut order: Vec<usize> = (0..spin.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let fz = spin.z.map(|v| v.re);
    let ket = |k: usize| eig.eigenvectors.column(order[k]).into_owned();
    let var = |k: usize| {
        let v = ket(k);
        let m1 = (v.transpose() * &fz * &v)[(0, 0)];
        let m2 = (v.transpose() * &fz * &fz * &v)[(0, 0)];
        m2 - m1 * m1
    };
    let element = |a: usize, b: usize| {
        if b >= spin.dim() {
            0.0
        } else {
            (ket(a).transpose() * &fz * ket(b))[(0, 0)].abs()
        }
    };
    let f = f64::from(two_f.0) / 2.0;
    let variance_up = var(0);
    let variance_down = var(1);
    Ok(SpinCoefficients {
        two_f: two_f.0,
        v_up: std::f64::consts::SQRT_2 * element(0, 1),
        w_up: std::f64::consts::SQRT_2 * element(1, 2),
        variance_up,
        variance_down,
        fx_weights: [f, f - 1.0, f - 2.0],
    })
}

impl SpinCoefficients {
    pub fn f(&self) -> f64 {
        f64::from(self.two_f) / 2.0
    }
}

/// Symmetrised single-atom moment `<ψ|½{x_c, x_d}|ψ>` for a qutrit basis state.
fn qutrit_pair_moment(state: usize, c: usize, d: usize) -> f64 {
    let x = |c: usize| {
        let (i, j) = crate::pumping::COHERENCE_PAIRS[c];
        let mut m = Matrix3::zeros();
        m[(i, j)] = std::f64::consts::FRAC_1_SQRT_2;
        m[(j, i)] = std::f64::consts::FRAC_1_SQRT_2;
        m
    };
    let s = (x(c) * x(d) + x(d) * x(c)) * 0.5;
    s[(state, state)]
}

const ODD: [usize; 2] = [UP_DOWN, DOWN_T];
/// Even-sector components: three populations and the `↑T` coherence mean.
const EVEN_COMPONENTS: usize = 4;

/// Means and odd-sector covariance for all slices and modes.
///
/// Layout: even vector index `(k·4 + comp)·M + a` with `comp` = ↑, ↓, T, X_↑T;
/// odd index `(k·2 + s)·M + a` with `s` = ↑↓, ↓T.
#[derive(Clone, Debug)]
pub struct MomentState {
    pub time: f64,
    pub n_modes: usize,
    pub n_slices: usize,
    pub even: DVector<f64>,
    pub odd: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MomentState {
    pub fn population(&self, k: usize, i: usize, a: usize) -> f64 {
        self.even[(k * EVEN_COMPONENTS + i) * self.n_modes + a]
    }

    pub fn coherence(&self, k: usize, c: usize, a: usize) -> f64 {
        match c {
            UP_T => self.even[(k * EVEN_COMPONENTS + 3) * self.n_modes + a],
            UP_DOWN => self.odd[(k * 2) * self.n_modes + a],
            DOWN_T => self.odd[(k * 2 + 1) * self.n_modes + a],
            _ => panic!("coherence index {c} out of range"),
        }
    }

    /// `Σ_k N_i^{00}(k)` for each basis state.
    pub fn fundamental_populations(&self) -> [f64; 3] {
        let mut p = [0.0; 3];
        for k in 0..self.n_slices {
            for (i, v) in p.iter_mut().enumerate() {
                *v += self.population(k, i, 0);
            }
        }
        p
    }

    /// Multiply every covariance by `s` (e.g. the thermal/CS variance ratio).
    pub fn with_variance_scale(mut self, s: f64) -> Self {
        self.covariance *= s;
        self
    }

    pub fn odd_dimension(&self) -> usize {
        self.odd.len()
    }
}

/// Every atom in `|↑>`: the coherent spin state along `x`.
pub fn initial_moment_state(overlaps: &OverlapTables) -> MomentState {
    let m = overlaps.n_modes();
    let k_n = overlaps.n_slices;
    let mut even = DVector::zeros(EVEN_COMPONENTS * m * k_n);
    let mut cov = DMatrix::zeros(2 * m * k_n, 2 * m * k_n);
    for k in 0..k_n {
        for a in 0..m {
            even[(k * EVEN_COMPONENTS) * m + a] = overlaps.population(k, a).re;
            for s in 0..2 {
                for t in 0..2 {
                    let w = qutrit_pair_moment(0, ODD[s], ODD[t]);
                    if w == 0.0 {
                        continue;
                    }
                    for b in 0..m {
                        cov[((k * 2 + s) * m + a, (k * 2 + t) * m + b)] = w * overlaps.pair(k, a, b).re;
                    }
                }
            }
        }
    }
    MomentState { time: 0.0, n_modes: m, n_slices: k_n, even, odd: DVector::zeros(2 * m * k_n), covariance: cov }
}

/// `(<F_x^{00}>, <F_z^{00}>, ΔF_z^{00}²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpinWaveMoments {
    pub fx: f64,
    pub fz: f64,
    pub var_fz: f64,
}

/// The moment equations for one cloud, probe and pumping configuration.
#[derive(Clone, Debug)]
pub struct MomentModel {
    pub overlaps: OverlapTables,
    /// Sum over colors of `γ_{j'} × tables`, in 1/s at peak intensity.
    pub rates: PumpingTables,
    pub kappa: f64,
    pub spin: SpinCoefficients,
    /// Feed the `Tr[𝒩 x_↑T]<X_↑T>` part of the one-body noise back in.
    pub coherence_feedback: bool,
    m: usize,
    k: usize,
    even_gen: Vec<DMatrix<f64>>,
    odd_gen: Vec<DMatrix<f64>>,
    g: Vec<Vec<f64>>,
    h: DVector<f64>,
}

impl MomentModel {
    pub fn new(overlaps: OverlapTables, rates: PumpingTables, kappa: f64, spin: SpinCoefficients) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::domain(format!("measurement rate must be finite and >= 0, got {kappa}")));
        }
        rates.check_real(1e-10)?;
        if overlaps.max_imaginary() > 1e-10 {
            return Err(Error::domain("moment engine needs real (slice-real convention) overlap tables"));
        }
        let m = overlaps.n_modes();
        let k_n = overlaps.n_slices;
        let t = &rates;
        let mut t_even = DMatrix::<f64>::zeros(EVEN_COMPONENTS, EVEN_COMPONENTS);
        for i in 0..3 {
            for l in 0..3 {
                t_even[(i, l)] = t.t_nn[i][l];
            }
            t_even[(i, 3)] = t.t_nx[i][UP_T];
            t_even[(3, i)] = t.t_xn[UP_T][i];
        }
        t_even[(3, 3)] = t.t_xx[UP_T][UP_T];
        let t_odd = DMatrix::<f64>::from_fn(2, 2, |s, u| t.t_xx[ODD[s]][ODD[u]]);
        let mut even_gen = Vec::with_capacity(k_n);
        let mut odd_gen = Vec::with_capacity(k_n);
        let mut g = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let c = DMatrix::<f64>::from_fn(m, m, |a, b| overlaps.c(k, a, b).re);
            even_gen.push(t_even.kronecker(&c));
            odd_gen.push(t_odd.kronecker(&c));
            let mut gk = vec![0.0; m * m * m];
            for a in 0..m {
                for b in 0..m {
                    for e in 0..m {
                        gk[(a * m + b) * m + e] = overlaps.g(k, a, b, e).re;
                    }
                }
            }
            g.push(gk);
        }
        let mut h = DVector::zeros(2 * m * k_n);
        for k in 0..k_n {
            h[(k * 2) * m] = spin.v_up;
            h[(k * 2 + 1) * m] = spin.w_up;
        }
        Ok(MomentModel { overlaps, rates, kappa, spin, coherence_feedback: true, m, k: k_n, even_gen, odd_gen, g, h })
    }

    /// Pumping rates from the active colors of `probe`, κ from its Faraday signals.
    pub fn from_probe(species: &AtomicSpecies, probe: &TwoColorProbe, overlaps: OverlapTables) -> Result<Self> {
        let kappa = effective_measurement_rate(species, probe)?;
        let rates = probe_pumping_rates(species, probe)?;
        MomentModel::new(overlaps, rates, kappa, spin_coefficients(species.f_ground())?)
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn n1(&self) -> f64 {
        self.overlaps.fundamental_number(1)
    }

    pub fn n2(&self) -> f64 {
        self.overlaps.fundamental_number(2)
    }

    /// Measurement vector: `<F_z^{00}> = h · odd`.
    pub fn measurement_vector(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn initial_state(&self) -> MomentState {
        initial_moment_state(&self.overlaps)
    }

    pub fn spinwave_moments(&self, s: &MomentState) -> SpinWaveMoments {
        let pops = s.fundamental_populations();
        let fx = (0..3).map(|i| self.spin.fx_weights[i] * pops[i]).sum();
        let fz = self.h.dot(&s.odd);
        let var_fz = (s.covariance.transpose() * &self.h).dot(&self.h);
        SpinWaveMoments { fx, fz, var_fz }
    }

    /// `ξ_m² = 2f (N₁²/N₂) ΔF_z² / <F_x>²`.
    pub fn metrological_squeezing(&self, s: &MomentState) -> Result<f64> {
        let mm = self.spinwave_moments(s);
        metrological_squeezing(mm, self.spin.f(), self.n1(), self.n2())
    }

    fn pumping_noise(&self, even: &DVector<f64>) -> DMatrix<f64> {
        let (m, k_n) = (self.m, self.k);
        let n = 2 * m * k_n;
        let mut out = DMatrix::zeros(n, n);
        let t = &self.rates;
        for k in 0..k_n {
            // σ_{st}(e) for every mode e of this slice
            let mut sigma = [[vec![0.0; m], vec![0.0; m]], [vec![0.0; m], vec![0.0; m]]];
            for s in 0..2 {
                for u in 0..2 {
                    for e in 0..m {
                        let mut v = 0.0;
                        for l in 0..3 {
                            v += t.n_table[ODD[s]][ODD[u]][l] * even[(k * EVEN_COMPONENTS + l) * m + e];
                        }
                        if self.coherence_feedback {
                            v += t.n_table_x[ODD[s]][ODD[u]][UP_T] * even[(k * EVEN_COMPONENTS + 3) * m + e];
                        }
                        sigma[s][u][e] = v;
                    }
                }
            }
            let gk = &self.g[k];
            for s in 0..2 {
                for u in 0..2 {
                    for a in 0..m {
                        for b in 0..m {
                            let mut v = 0.0;
                            for e in 0..m {
                                v += gk[(a * m + b) * m + e] * sigma[s][u][e];
                            }
                            out[((k * 2 + s) * m + a, (k * 2 + u) * m + b)] = v;
                        }
                    }
                }
            }
        }
        out
    }

    fn even_rhs(&self, even: &DVector<f64>) -> DVector<f64> {
        let w = EVEN_COMPONENTS * self.m;
        let mut out = DVector::zeros(even.len());
        for k in 0..self.k {
            let blk = &self.even_gen[k] * even.rows(k * w, w);
            out.rows_mut(k * w, w).copy_from(&blk);
        }
        out
    }

    /// Pumping drift of the odd means.
    pub fn odd_drift(&self, odd: &DVector<f64>) -> DVector<f64> {
        let w = 2 * self.m;
        let mut out = DVector::zeros(odd.len());
        for k in 0..self.k {
            let blk = &self.odd_gen[k] * odd.rows(k * w, w);
            out.rows_mut(k * w, w).copy_from(&blk);
        }
        out
    }

    /// `Aᵀ v` for the odd pumping generator `A`.
    pub fn odd_drift_transposed(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = 2 * self.m;
        let mut out = DVector::zeros(v.len());
        for k in 0..self.k {
            let blk = self.odd_gen[k].tr_mul(&v.rows(k * w, w));
            out.rows_mut(k * w, w).copy_from(&blk);
        }
        out
    }

    fn cov_rhs(&self, even: &DVector<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
        let w = 2 * self.m;
        let n = cov.nrows();
        let mut ac = DMatrix::zeros(n, n);
        for k in 0..self.k {
            let blk = &self.odd_gen[k] * cov.rows(k * w, w);
            ac.rows_mut(k * w, w).copy_from(&blk);
        }
        let ch = cov * &self.h;
        let mut d = &ac + ac.transpose() + self.pumping_noise(even);
        d.ger(-self.kappa, &ch, &ch, 1.0);
        d
    }

    fn rk4(&self, s: &MomentState, dt: f64) -> MomentState {
        let (e0, c0) = (&s.even, &s.covariance);
        let ke1 = self.even_rhs(e0);
        let kc1 = self.cov_rhs(e0, c0);
        let e1 = e0 + &ke1 * (dt / 2.0);
        let c1 = c0 + &kc1 * (dt / 2.0);
        let ke2 = self.even_rhs(&e1);
        let kc2 = self.cov_rhs(&e1, &c1);
        let e2 = e0 + &ke2 * (dt / 2.0);
        let c2 = c0 + &kc2 * (dt / 2.0);
        let ke3 = self.even_rhs(&e2);
        let kc3 = self.cov_rhs(&e2, &c2);
        let e3 = e0 + &ke3 * dt;
        let c3 = c0 + &kc3 * dt;
        let ke4 = self.even_rhs(&e3);
        let kc4 = self.cov_rhs(&e3, &c3);
        let even = e0 + (ke1 + ke2 * 2.0 + ke3 * 2.0 + ke4) * (dt / 6.0);
        let mut cov = c0 + (kc1 + kc2 * 2.0 + kc3 * 2.0 + kc4) * (dt / 6.0);
        cov = (&cov + cov.transpose()) * 0.5;
        MomentState { time: s.time + dt, even, odd: s.odd.clone(), covariance: cov, ..*s }
    }

    fn check(&self, before: &MomentState, after: &MomentState) -> std::result::Result<(), String> {
        let mm = self.spinwave_moments(after);
        let empty = self.spinwave_moments(before).var_fz == 0.0;
        if !mm.var_fz.is_finite() || mm.var_fz < 0.0 || (mm.var_fz == 0.0 && !empty) {
            return Err(format!("ΔF_z² = {:e} is not positive", mm.var_fz));
        }
        let scale = after.covariance.diagonal().amax().max(f64::MIN_POSITIVE);
        if after.covariance.diagonal().iter().any(|&v| !v.is_finite() || v < -1e-9 * scale) {
            return Err("negative covariance diagonal".into());
        }
        let p0: f64 = before.fundamental_populations().iter().sum();
        let p1: f64 = after.fundamental_populations().iter().sum();
        if !p1.is_finite() || p1 > p0 * (1.0 + 1e-12) + 1e-300 {
            return Err(format!("total population grew from {p0:e} to {p1:e}"));
        }
        Ok(())
    }

    /// Record-independent part of one step: populations, even coherence and
    /// covariances. Halves the step (up to four times) on instability.
    pub fn deterministic_drift(&self, s: &MomentState, dt: f64) -> Result<MomentState> {
        self.drift_with_retry(s, dt, 0)
    }

    fn drift_with_retry(&self, s: &MomentState, dt: f64, depth: u32) -> Result<MomentState> {
        let next = self.rk4(s, dt);
        match self.check(s, &next) {
            Ok(()) => Ok(next),
            Err(_) if depth < 4 => {
                let mid = self.drift_with_retry(s, dt / 2.0, depth + 1)?;
                self.drift_with_retry(&mid, dt / 2.0, depth + 1)
            }
            Err(reason) => Err(Error::Instability { time: s.time, reason }),
        }
    }

    /// Innovation update of the odd means with `dW`, plus their pumping drift.
    pub fn conditional_mean_step(&self, s: &MomentState, dw: f64, dt: f64) -> MomentState {
        let gain = &s.covariance * &self.h;
        let odd = &s.odd + self.odd_drift(&s.odd) * dt + gain * (self.kappa.sqrt() * dw);
        MomentState { odd, ..s.clone() }
    }

    /// One paired step: returns the record sample `dM = <F_z>dt + dW/√κ` and
    /// the state advanced with that same `dW`.
    pub fn record_step(&self, s: &MomentState, dw: f64, dt: f64) -> Result<(f64, MomentState)> {
        if !(self.kappa > 0.0) {
            return Err(Error::domain("a measurement record needs κ > 0"));
        }
        let dm = self.h.dot(&s.odd) * dt + dw / self.kappa.sqrt();
        let cond = self.conditional_mean_step(s, dw, dt);
        let mut next = self.deterministic_drift(&cond, dt)?;
        next.odd = cond.odd;
        Ok((dm, next))
    }

    /// `min(1/(κΔF_z²(0)), 1/γ_max)/200`, γ_max the fastest table rate.
    pub fn default_step(&self) -> f64 {
        let s0 = self.initial_state();
        let var = self.spinwave_moments(&s0).var_fz;
        let gamma = self.rates.t_nn.iter().flatten().chain(self.rates.t_xx.iter().flatten()).fold(0.0f64, |a, v| a.max(v.abs()));
        let mut scale = f64::INFINITY;
        if self.kappa * var > 0.0 {
            scale = scale.min(1.0 / (self.kappa * var));
        }
        if gamma > 0.0 {
            scale = scale.min(1.0 / gamma);
        }
        if scale.is_finite() {
            scale / 200.0
        } else {
            1e-7
        }
    }

    /// Record-independent path on a fixed grid, with the Kalman gains.
    pub fn deterministic_path(&self, s0: &MomentState, dt: f64, n_steps: usize) -> Result<DeterministicPath> {
        let mut s = s0.clone();
        let mut path = DeterministicPath {
            dt,
            times: Vec::with_capacity(n_steps + 1),
            moments: Vec::with_capacity(n_steps + 1),
            populations: Vec::with_capacity(n_steps + 1),
            gains: Vec::with_capacity(n_steps + 1),
        };
        for step in 0..=n_steps {
            path.times.push(s.time);
            path.moments.push(self.spinwave_moments(&s));
            path.populations.push(s.fundamental_populations());
            path.gains.push(&s.covariance * &self.h);
            if step < n_steps {
                s = self.deterministic_drift(&s, dt)?;
            }
        }
        Ok(path)
    }

    /// One conditioned trajectory on a precomputed path: `(dM, <F_z>)` per step.
    /// `noise` yields `dW` samples with variance `dt`.
    pub fn filter(&self, path: &DeterministicPath, s0: &MomentState, mut noise: impl FnMut() -> f64) -> Result<FilterOutput> {
        if !(self.kappa > 0.0) {
            return Err(Error::domain("a measurement record needs κ > 0"));
        }
        let dt = path.dt;
        let sk = self.kappa.sqrt();
        let n_steps = path.times.len() - 1;
        let mut odd = s0.odd.clone();
        let mut dm = Vec::with_capacity(n_steps);
        let mut fz = Vec::with_capacity(n_steps);
        for step in 0..n_steps {
            let dw = noise();
            let mean = self.h.dot(&odd);
            fz.push(mean);
            dm.push(mean * dt + dw / sk);
            let drift = self.odd_drift(&odd);
            odd += drift * dt;
            odd.axpy(sk * dw, &path.gains[step], 1.0);
        }
        Ok(FilterOutput { dm, fz, final_odd: odd })
    }
}

/// `Σ_j γ_j(peak) T_j` over the active colors.
pub fn probe_pumping_rates(species: &AtomicSpecies, probe: &TwoColorProbe) -> Result<PumpingTables> {
    let mut parts = Vec::new();
    for c in probe.active_colors() {
        let q = ColorQuantities::evaluate(species, c)?;
        parts.push((q.gamma, ColorPumping::build(species, c.line, c.detuning)?.tables));
    }
    let refs: Vec<(f64, &PumpingTables)> = parts.iter().map(|(g, t)| (*g, t)).collect();
    Ok(PumpingTables::weighted_sum(&refs))
}

pub fn metrological_squeezing(m: SpinWaveMoments, f: f64, n1: f64, n2: f64) -> Result<f64> {
    if !(m.fx.abs() > 0.0) || !(n2 > 0.0) {
        return Err(Error::domain("metrological squeezing needs a non-zero mean spin and N₂ > 0"));
    }
    Ok(2.0 * f * n1 * n1 / n2 * m.var_fz / (m.fx * m.fx))
}

/// Record-independent quantities on the integration grid.
#[derive(Clone, Debug)]
pub struct DeterministicPath {
    pub dt: f64,
    pub times: Vec<f64>,
    pub moments: Vec<SpinWaveMoments>,
    pub populations: Vec<[f64; 3]>,
    /// `C h`: covariance of every odd coherence with `F_z^{00}`.
    pub gains: Vec<DVector<f64>>,
}

impl DeterministicPath {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Index of the grid point nearest `t`.
    pub fn index_at(&self, t: f64) -> usize {
        ((t / self.dt).round() as usize).min(self.n_steps())
    }

    /// `ξ_m²(t)` along the path.
    pub fn squeezing(&self, f: f64, n1: f64, n2: f64) -> Result<Vec<f64>> {
        self.moments.iter().map(|&m| metrological_squeezing(m, f, n1, n2)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub dm: Vec<f64>,
    /// Conditional `<F_z^{00}>` at the start of each step.
    pub fz: Vec<f64>,
    pub final_odd: DVector<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomic::Line;
    use crate::geometry::{CloudGeometry, ModeBasis, ModeConvention};

    fn zero_rates() -> PumpingTables {
        PumpingTables::weighted_sum(&[])
    }

    fn single(beta: f64) -> OverlapTables {
        OverlapTables::point_atoms(&[beta])
    }

    fn cs_coeffs() -> SpinCoefficients {
        spin_coefficients(TwoJ(8)).unwrap()
    }

    fn nominal_rates(gamma: f64) -> PumpingTables {
        let s = AtomicSpecies::cesium();
        let g = s.manifold(Line::D2).unwrap().linewidth;
        let t = ColorPumping::build(&s, Line::D2, -580.0 * g).unwrap().tables;
        PumpingTables::weighted_sum(&[(gamma, &t)])
    }

    #[test]
    fn spin_coefficients_for_cesium_and_spin_half() {
        let c = cs_coeffs();
        assert!((c.v_up - 2.0).abs() < 1e-12);
        assert!((c.w_up - 7f64.sqrt()).abs() < 1e-12);
        assert!((c.variance_up - 2.0).abs() < 1e-12);
        assert!((c.variance_down - 5.5).abs() < 1e-12);
        // w↑² = 2(Δf_z²)_↓ - 2(Δf_z²)_↑, v↑² = 2(Δf_z²)_↑
        assert!((c.w_up.powi(2) - 2.0 * (c.variance_down - c.variance_up)).abs() < 1e-12);
        assert!((c.v_up.powi(2) - 2.0 * c.variance_up).abs() < 1e-12);
        let half = spin_coefficients(TwoJ(1)).unwrap();
        assert_eq!(half.w_up, 0.0);
        assert!((half.variance_up - 0.25).abs() < 1e-12);
    }

    #[test]
    fn coherent_state_moments() {
        let basis = ModeBasis::new(20e-6, 852e-9, 2, 1, crate::geometry::SliceGrid::covering(150e-6, 6).unwrap(), Default::default()).unwrap();
        let cloud = CloudGeometry::with_atom_number(2e6, 30e-6, 50e-6).unwrap();
        let t = OverlapTables::build(&basis, &cloud, ModeConvention::RealSlice);
        let model = MomentModel::new(t, zero_rates(), 0.0, cs_coeffs()).unwrap();
        let s = model.initial_state();
        let mm = model.spinwave_moments(&s);
        assert!((mm.fx - 4.0 * model.n1()).abs() < 1e-9 * mm.fx);
        assert_eq!(mm.fz, 0.0);
        assert!((mm.var_fz - 2.0 * model.n2()).abs() < 1e-9 * mm.var_fz);
        assert!((model.metrological_squeezing(&s).unwrap() - 1.0).abs() < 1e-12);
        assert!(s.odd.iter().all(|&v| v == 0.0));
        // full ↑→↓ transfer reweights the mean spin
        let mut moved = s.clone();
        for k in 0..s.n_slices {
            let up = moved.population(k, 0, 0);
            moved.even[(k * 4) * s.n_modes] = 0.0;
            moved.even[(k * 4 + 1) * s.n_modes] = up;
        }
        assert!((model.spinwave_moments(&moved).fx - 3.0 * model.n1()).abs() < 1e-9 * mm.fx);
    }

    #[test]
    fn variance_cross_term_matches_single_atom_density_matrix() {
        // |ψ> = a|↑> + b|↓> + c|T> (real): the engine's hᵀCh vs <f_z²> - <f_z>².
        let spin = SpinMatrices::new(TwoJ(8));
        let basis = crate::pumping::QutritBasis::new(TwoJ(8)).unwrap();
        let amps = [0.6, 0.5, 0.3f64];
        let norm = amps.iter().map(|v| v * v).sum::<f64>().sqrt();
        let amps = amps.map(|v| v / norm);
        let psi = (0..3).fold(DVector::zeros(9), |acc: DVector<num_complex::Complex64>, i| acc + basis.ket(i) * num_complex::Complex64::new(amps[i], 0.0));
        // three-level operator: f_z compressed onto the qutrit
        let fz = &basis.embedding * (basis.embedding.adjoint() * &spin.z * &basis.embedding) * basis.embedding.adjoint();
        let m1 = (psi.adjoint() * &fz * &psi)[(0, 0)].re;
        let m2 = (psi.adjoint() * &fz * &fz * &psi)[(0, 0)].re;
        // qutrit moments of x_c
        let c = cs_coeffs();
        let rho = Matrix3::from_fn(|i, j| amps[i] * amps[j]);
        let x = |cc: usize| {
            let (i, j) = crate::pumping::COHERENCE_PAIRS[cc];
            let mut m = Matrix3::zeros();
            m[(i, j)] = std::f64::consts::FRAC_1_SQRT_2;
            m[(j, i)] = std::f64::consts::FRAC_1_SQRT_2;
            m
        };
        let ex = |a: &Matrix3<f64>| (rho * a).trace();
        let (xa, xb) = (x(UP_DOWN), x(DOWN_T));
        let cov = |p: &Matrix3<f64>, q: &Matrix3<f64>| ex(&((p * q + q * p) * 0.5)) - ex(p) * ex(q);
        let var = c.v_up.powi(2) * cov(&xa, &xa) + 2.0 * c.v_up * c.w_up * cov(&xa, &xb) + c.w_up.powi(2) * cov(&xb, &xb);
        assert!((var - (m2 - m1 * m1)).abs() < 1e-10, "{var} vs {}", m2 - m1 * m1);
    }

    #[test]
    fn frozen_without_light() {
        let model = MomentModel::new(single(0.8), zero_rates(), 0.0, cs_coeffs()).unwrap();
        let s0 = model.initial_state();
        let s1 = model.deterministic_drift(&s0, 1e-6).unwrap();
        assert_eq!(s0.even, s1.even);
        assert_eq!(s0.covariance, s1.covariance);
        let s2 = model.conditional_mean_step(&s0, 0.0, 1e-6);
        assert_eq!(s2.odd, s0.odd);
    }

    #[test]
    fn pure_backaction_is_riccati() {
        for r in [0.1, 1.0, 3.4] {
            let model0 = MomentModel::new(single(1.0), zero_rates(), 0.0, cs_coeffs()).unwrap();
            let s0 = model0.initial_state();
            let v0 = model0.spinwave_moments(&s0).var_fz;
            let t_end = 1.0;
            let model = model0.with_kappa(r / (t_end * v0));
            let n = 2000;
            let mut s = s0.clone();
            let mut prev = v0;
            for _ in 0..n {
                s = model.deterministic_drift(&s, t_end / n as f64).unwrap();
                let v = model.spinwave_moments(&s).var_fz;
                assert!(v < prev);
                prev = v;
            }
            let ratio = prev / v0;
            assert!((ratio * (1.0 + r) - 1.0).abs() < 1e-9, "r={r}: {ratio}");
            // ⟨F_x⟩ untouched ⇒ ξ_m² = 1/(1+r)
            assert!((model.metrological_squeezing(&s).unwrap() * (1.0 + r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kalman_gain_for_single_quadrature() {
        let model = MomentModel::new(single(1.0), zero_rates(), 2.5, cs_coeffs()).unwrap();
        let s0 = model.initial_state();
        let var = model.spinwave_moments(&s0).var_fz;
        let dw = 1e-3;
        let s1 = model.conditional_mean_step(&s0, dw, 1e-6);
        let dfz = model.spinwave_moments(&s1).fz;
        assert!((dfz - model.kappa.sqrt() * var * dw).abs() < 1e-12 * dfz.abs());
    }

    #[test]
    fn populations_follow_rate_matrix_exponential() {
        let gamma = 3.0e4;
        let rates = nominal_rates(gamma);
        let model = MomentModel::new(single(1.0), rates.clone(), 0.0, cs_coeffs()).unwrap();
        let mut s = model.initial_state();
        let dt = 1e-7;
        for _ in 0..500 {
            s = model.deterministic_drift(&s, dt).unwrap();
        }
        // oracle: exp of the 4×4 even generator on (n↑, n↓, n_T, x_↑T)
        let mut gen = nalgebra::Matrix4::<f64>::zeros();
        for i in 0..3 {
            for l in 0..3 {
                gen[(i, l)] = rates.t_nn[i][l];
            }
            gen[(i, 3)] = rates.t_nx[i][UP_T];
            gen[(3, i)] = rates.t_xn[UP_T][i];
        }
        gen[(3, 3)] = rates.t_xx[UP_T][UP_T];
        let v = (gen * 5e-5).exp() * nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0);
        let p = s.fundamental_populations();
        for i in 0..3 {
            assert!((p[i] - v[i]).abs() < 1e-12, "{i}: {} vs {}", p[i], v[i]);
        }
        assert!((s.coherence(0, UP_T, 0) - v[3]).abs() < 1e-12);
    }

    #[test]
    fn pumping_alone_keeps_variance_positive_and_population_falling() {
        let basis = ModeBasis::new(20e-6, 852e-9, 2, 0, crate::geometry::SliceGrid::covering(150e-6, 4).unwrap(), Default::default()).unwrap();
        let cloud = CloudGeometry::with_atom_number(1e6, 25e-6, 50e-6).unwrap();
        let t = OverlapTables::build(&basis, &cloud, ModeConvention::RealSlice);
        let model = MomentModel::new(t, nominal_rates(3e4), 0.0, cs_coeffs()).unwrap();
        let mut s = model.initial_state();
        let mut pop: f64 = s.fundamental_populations().iter().sum();
        for _ in 0..400 {
            s = model.deterministic_drift(&s, 5e-7).unwrap();
            let p: f64 = s.fundamental_populations().iter().sum();
            assert!(p <= pop);
            pop = p;
            let sym = (&s.covariance - s.covariance.transpose()).amax();
            assert!(sym < 1e-9 * s.covariance.amax());
        }
        assert!(model.spinwave_moments(&s).var_fz > 0.0);
    }

    #[test]
    fn fast_filter_matches_full_step() {
        let model = MomentModel::new(OverlapTables::point_atoms(&[1.0, 0.7]), nominal_rates(3e4), 1e3, cs_coeffs()).unwrap();
        let s0 = model.initial_state();
        let dt = 1e-7;
        let n = 300;
        let path = model.deterministic_path(&s0, dt, n).unwrap();
        let noise: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.37).sin()) * dt.sqrt()).collect();
        let mut it = noise.iter().cloned();
        let fast = model.filter(&path, &s0, || it.next().unwrap()).unwrap();
        let mut s = s0.clone();
        for i in 0..n {
            let (dm, next) = model.record_step(&s, noise[i], dt).unwrap();
            assert!((dm - fast.dm[i]).abs() < 1e-12 * dm.abs().max(1e-6));
            s = next;
        }
        assert!((&s.odd - &fast.final_odd).amax() < 1e-9 * s.odd.amax().max(1e-12));
    }

    #[test]
    fn angular_classes_decouple_from_the_measured_mode() {
        let grid = crate::geometry::SliceGrid::covering(150e-6, 3).unwrap();
        let basis = ModeBasis::new(20e-6, 852e-9, 1, 1, grid, Default::default()).unwrap();
        let cloud = CloudGeometry::with_atom_number(1e6, 25e-6, 50e-6).unwrap();
        let full = OverlapTables::build(&basis, &cloud, ModeConvention::RealSlice);
        let reduced = full.restricted(|m| m.l == 0).unwrap();
        let run = |t: OverlapTables| {
            let model = MomentModel::new(t, nominal_rates(3e4), 0.05, cs_coeffs()).unwrap();
            let mut s = model.initial_state();
            for _ in 0..100 {
                s = model.deterministic_drift(&s, 5e-7).unwrap();
            }
            model.spinwave_moments(&s)
        };
        let (a, b) = (run(full), run(reduced));
        assert!((a.var_fz - b.var_fz).abs() < 1e-9 * a.var_fz);
        assert!((a.fx - b.fx).abs() < 1e-9 * a.fx);
    }
}

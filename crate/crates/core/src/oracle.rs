//! Exact small-ensemble references.
//!
//! [`ExactEnsemble`] integrates the conditional master equation for up to three
//! atoms without any Gaussian assumption. Each atom carries an extra sink level
//! that collects population leaving the tracked manifold, so the ensemble state
//! stays normalised and lost atoms simply stop contributing to `F_z`. Each step
//! applies the measurement as the exact QND Kraus factor for the record sample
//! (diagonal in the eigenbasis of the measured operator), then the exact
//! one-step pumping propagator of every atom.
//!
//! [`mean_spin_decay_experiment`] runs the rotate–probe–rotate-back protocol on
//! single atoms sampled from the cloud.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::angular::SpinMatrices;
use crate::atomic::{AtomicSpecies, Line};
use crate::dynamics::{spin_coefficients, MomentModel};
use crate::error::{Error, Result};
use crate::geometry::{CloudGeometry, ModeBasis, OverlapTables};
use crate::probe::{tensor_shift_strength, ColorQuantities, ProbeColor, TwoColorProbe};
use crate::pumping::{sandwich, vectorize, ColorPumping, PumpingMap, PumpingTables, QutritBasis};
use crate::rng::NoiseStream;

type CMat = DMatrix<Complex64>;
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalSpace {
    /// All `2f+1` sublevels.
    Full,
    /// The `{↑, ↓, T}` block, with compressed `f_z`.
    Qutrit,
}

/// Per-atom space with a sink, in the eigenbasis of the measured operator.
#[derive(Clone, Debug)]
pub struct AtomSpace {
    pub space: InternalSpace,
    /// Tracked levels plus one sink.
    pub dim: usize,
    /// Eigenvalues of the measured single-atom operator; 0 on the sink.
    pub f_values: Vec<f64>,
    /// Trace-preserving generator at unit intensity, row-major vec convention.
    pub generator: CMat,
    /// Initial state `|m_x = f>`.
    pub initial: DVector<Complex64>,
    /// Columns: tracked basis states in the `m_z` basis of the full manifold.
    pub isometry: CMat,
}

impl AtomSpace {
    /// `maps` are `(rate, Larmor-averaged map)` pairs; the sum is the unit-β generator.
    pub fn new(species: &AtomicSpecies, maps: &[(f64, &PumpingMap)], space: InternalSpace) -> Result<Self> {
        let two_f = species.f_ground();
        let spin = SpinMatrices::new(two_f);
        let full = spin.dim();
        let qutrit = QutritBasis::new(two_f)?;
        let (isometry, f_values) = match space {
            InternalSpace::Full => {
                // the m_z basis already diagonalises f_z
                let f: Vec<f64> = two_f.projections().map(|m| f64::from(m) / 2.0).collect();
                (CMat::identity(full, full), f)
            }
            InternalSpace::Qutrit => {
                let e = &qutrit.embedding;
                let fz = e.adjoint() * &spin.z * e;
                let re = fz.map(|v| v.re);
                if fz.iter().any(|v| v.im.abs() > 1e-12) {
                    return Err(Error::domain("compressed f_z is not real"));
                }
                let eig = SymmetricEigen::new(re);
                let v = eig.eigenvectors.map(|x| Complex64::new(x, 0.0));
                (e * v, eig.eigenvalues.iter().copied().collect())
            }
        };
        let k = isometry.ncols();
        let dim = k + 1;
        let mut total = CMat::zeros(full * full, full * full);
        for (rate, map) in maps {
            if map.dim != full {
                return Err(Error::domain("pumping map dimension does not match the ground manifold"));
            }
            total += map.matrix.map(|v| v * *rate);
        }
        let map = PumpingMap { dim: full, matrix: total, two_m: two_f.projections().collect() };
        let mut gen = CMat::zeros(dim * dim, dim * dim);
        for a in 0..k {
            for b in 0..k {
                let mut unit = CMat::zeros(k, k);
                unit[(a, b)] = Complex64::new(1.0, 0.0);
                let image = isometry.adjoint() * map.apply(&(&isometry * unit * isometry.adjoint())) * &isometry;
                let mut lost = ZERO;
                for i in 0..k {
                    lost -= image[(i, i)];
                    for j in 0..k {
                        gen[(i * dim + j, a * dim + b)] = image[(i, j)];
                    }
                }
                gen[((dim - 1) * dim + dim - 1, a * dim + b)] = lost;
            }
        }
        let ket = qutrit.ket(0);
        let mut initial = DVector::zeros(dim);
        let coords = isometry.adjoint() * ket;
        for i in 0..k {
            initial[i] = coords[i];
        }
        let mut fv = f_values;
        fv.push(0.0);
        Ok(AtomSpace { space, dim, f_values: fv, generator: gen, initial, isometry })
    }

    /// Embed a full-manifold operator into this space (zero on the sink).
    pub fn operator(&self, op: &CMat) -> CMat {
        let k = self.dim - 1;
        let inner = self.isometry.adjoint() * op * &self.isometry;
        CMat::from_fn(self.dim, self.dim, |i, j| if i < k && j < k { inner[(i, j)] } else { ZERO })
    }
}

/// Sparse row-major superoperator.
#[derive(Clone, Debug)]
struct SparseSuper {
    entries: Vec<(usize, usize, Complex64)>,
}

impl SparseSuper {
    fn from_dense(m: &CMat) -> Self {
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.norm()));
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v.norm() > 1e-15 * scale {
                    entries.push((r, c, v));
                }
            }
        }
        SparseSuper { entries }
    }
}

/// Conditional state of a few atoms, `ρ` stored row-major.
#[derive(Clone, Debug)]
pub struct ExactEnsemble {
    pub atom: AtomSpace,
    pub betas: Vec<f64>,
    pub kappa: f64,
    pub time: f64,
    dim: usize,
    rho: Vec<Complex64>,
    f_diag: Vec<f64>,
    propagators: Vec<SparseSuper>,
    dt: f64,
}

impl ExactEnsemble {
    pub fn new(atom: AtomSpace, betas: &[f64], kappa: f64, dt: f64) -> Result<Self> {
        if betas.is_empty() || betas.len() > 3 {
            return Err(Error::domain(format!("exact engine handles 1 to 3 atoms, got {}", betas.len())));
        }
        if !(dt > 0.0) || !(kappa >= 0.0) {
            return Err(Error::domain("exact engine needs dt > 0 and κ >= 0"));
        }
        let d = atom.dim;
        let n = betas.len();
        let dim = d.pow(n as u32);
        let mut psi = vec![Complex64::new(1.0, 0.0); dim];
        let mut f_diag = vec![0.0; dim];
        for (idx, (p, f)) in psi.iter_mut().zip(f_diag.iter_mut()).enumerate() {
            for (a, beta) in betas.iter().enumerate() {
                let digit = (idx / d.pow((n - 1 - a) as u32)) % d;
                *p *= atom.initial[digit];
                *f += beta * atom.f_values[digit];
            }
        }
        let mut rho = vec![ZERO; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                rho[i * dim + j] = psi[i] * psi[j].conj();
            }
        }
        let propagators = betas
            .iter()
            .map(|&b| SparseSuper::from_dense(&atom.generator.map(|v| v * (b * dt)).exp()))
            .collect();
        Ok(ExactEnsemble { atom, betas: betas.to_vec(), kappa, time: 0.0, dim, rho, f_diag, propagators, dt })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn density_matrix(&self) -> CMat {
        CMat::from_row_slice(self.dim, self.dim, &self.rho)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.rho[i * self.dim + i].re).sum()
    }

    /// `(<F>, <F²> - <F>²)` for `F = Σ β_n f^{(n)}`.
    pub fn moments(&self) -> (f64, f64) {
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..self.dim {
            let p = self.rho[i * self.dim + i].re;
            m1 += p * self.f_diag[i];
            m2 += p * self.f_diag[i] * self.f_diag[i];
        }
        (m1, m2 - m1 * m1)
    }

    /// Reduced state of atom `a`.
    pub fn reduced(&self, a: usize) -> CMat {
        let d = self.atom.dim;
        let n = self.betas.len();
        let stride = d.pow((n - 1 - a) as u32);
        let mut out = CMat::zeros(d, d);
        for i in 0..self.dim {
            let di = (i / stride) % d;
            let rest = i - di * stride;
            for dj in 0..d {
                let j = rest + dj * stride;
                out[(di, dj)] += self.rho[i * self.dim + j];
            }
        }
        out
    }

    /// Population of every atom's sink.
    pub fn sink_populations(&self) -> Vec<f64> {
        let d = self.atom.dim;
        (0..self.betas.len()).map(|a| self.reduced(a)[(d - 1, d - 1)].re).collect()
    }

    fn pump(&mut self) {
        let d = self.atom.dim;
        let n = self.betas.len();
        let dim = self.dim;
        let mut block = vec![ZERO; d * d];
        let mut out = vec![ZERO; d * d];
        for a in 0..n {
            let stride = d.pow((n - 1 - a) as u32);
            let rests: Vec<usize> = (0..dim).filter(|i| (i / stride) % d == 0).collect();
            let prop = &self.propagators[a];
            // the propagator preserves Hermiticity: the (rj, ri) block is the adjoint
            for (ii, &ri) in rests.iter().enumerate() {
                for &rj in &rests[ii..] {
                    for x in 0..d {
                        for y in 0..d {
                            block[x * d + y] = self.rho[(ri + x * stride) * dim + rj + y * stride];
                        }
                    }
                    out.iter_mut().for_each(|v| *v = ZERO);
                    for &(r, c, v) in &prop.entries {
                        out[r] += v * block[c];
                    }
                    for x in 0..d {
                        for y in 0..d {
                            let v = out[x * d + y];
                            self.rho[(ri + x * stride) * dim + rj + y * stride] = v;
                            self.rho[(rj + y * stride) * dim + ri + x * stride] = v.conj();
                        }
                    }
                }
            }
        }
    }

    /// One step driven by the innovation `dW`; returns the record sample
    /// `dM = <F>dt + dW/√κ`.
    pub fn step(&mut self, dw: f64) -> Result<f64> {
        let dt = self.dt;
        let dim = self.dim;
        let (mean, _) = self.moments();
        let dm = if self.kappa > 0.0 { mean * dt + dw / self.kappa.sqrt() } else { 0.0 };
        if self.kappa > 0.0 {
            let k = self.kappa;
            let a: Vec<f64> = self.f_diag.iter().map(|&f| (0.5 * k * f * dm - 0.25 * k * f * f * dt).exp()).collect();
            for i in 0..dim {
                for j in 0..dim {
                    self.rho[i * dim + j] *= a[i] * a[j];
                }
            }
            let tr = self.trace();
            if !(tr > 0.0) || !tr.is_finite() {
                return Err(Error::Instability { time: self.time, reason: format!("exact state trace {tr} after measurement") });
            }
            self.rho.iter_mut().for_each(|v| *v /= tr);
        }
        self.pump();
        self.time += dt;
        Ok(dm)
    }

    /// Smallest eigenvalue and largest anti-Hermitian part.
    pub fn positivity(&self) -> (f64, f64) {
        let m = self.density_matrix();
        let asym = (&m - m.adjoint()).iter().fold(0.0f64, |a, v| a.max(v.norm()));
        let herm = (&m + m.adjoint()).map(|v| v * 0.5);
        let ev = SymmetricEigen::new(herm).eigenvalues;
        (ev.iter().fold(f64::INFINITY, |a, &v| a.min(v)), asym)
    }

    pub fn check_positive(&self, floor: f64) -> Result<()> {
        let (min, asym) = self.positivity();
        if min < floor || asym > 1e-10 {
            return Err(Error::Instability {
                time: self.time,
                reason: format!("exact state lost positivity: min eigenvalue {min:e}, anti-Hermitian part {asym:e}"),
            });
        }
        Ok(())
    }
}

/// One color of the pumping used by the oracle: peak rate and averaged map.
pub struct OracleColor {
    pub gamma: f64,
    pub pumping: ColorPumping,
}

pub fn oracle_colors(species: &AtomicSpecies, probe: &TwoColorProbe) -> Result<Vec<OracleColor>> {
    probe
        .active_colors()
        .map(|c| {
            Ok(OracleColor { gamma: ColorQuantities::evaluate(species, c)?.gamma, pumping: ColorPumping::build(species, c.line, c.detuning)? })
        })
        .collect()
}

/// Gaussian and exact engines for the same few atoms.
pub struct OraclePair {
    pub model: MomentModel,
    pub atom: AtomSpace,
    pub betas: Vec<f64>,
    /// Peak scattering rate summed over colors.
    pub gamma: f64,
}

impl OraclePair {
    pub fn new(species: &AtomicSpecies, colors: &[OracleColor], betas: &[f64], kappa: f64, space: InternalSpace) -> Result<Self> {
        let maps: Vec<(f64, &PumpingMap)> = colors.iter().map(|c| (c.gamma, &c.pumping.averaged)).collect();
        let atom = AtomSpace::new(species, &maps, space)?;
        let tables: Vec<(f64, &PumpingTables)> = colors.iter().map(|c| (c.gamma, &c.pumping.tables)).collect();
        let model = MomentModel::new(
            OverlapTables::point_atoms(betas),
            PumpingTables::weighted_sum(&tables),
            kappa,
            spin_coefficients(species.f_ground())?,
        )?;
        Ok(OraclePair { model, atom, betas: betas.to_vec(), gamma: colors.iter().map(|c| c.gamma).sum() })
    }

    /// Pair with κ chosen so that `κ T <F_z²>(0) = coupling` at `T = 1/γ`;
    /// returns the pair and that `T`.
    pub fn at_coupling(
        species: &AtomicSpecies,
        colors: &[OracleColor],
        betas: &[f64],
        coupling: f64,
        space: InternalSpace,
    ) -> Result<(Self, f64)> {
        let mut pair = OraclePair::new(species, colors, betas, 1.0, space)?;
        if !(pair.gamma > 0.0) {
            return Err(Error::domain("oracle comparison needs a scattering probe"));
        }
        let t_end = 1.0 / pair.gamma;
        let var0 = pair.model.spinwave_moments(&pair.model.initial_state()).var_fz;
        pair.model = pair.model.with_kappa(coupling / (t_end * var0));
        Ok((pair, t_end))
    }

    /// Step bound `1e-3 / max(κ<F_z²>, γ_max)`.
    pub fn step_bound(&self) -> f64 {
        let var0 = self.model.spinwave_moments(&self.model.initial_state()).var_fz;
        let gamma = self.betas.iter().fold(0.0f64, |a, &b| a.max(b)) * self.gamma;
        let rate = (self.model.kappa * var0).max(gamma);
        if rate > 0.0 {
            1e-3 / rate
        } else {
            1e-3
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub space: InternalSpace,
    pub n_atoms: usize,
    pub betas: Vec<f64>,
    pub kappa: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_traj: usize,
    /// `κ T <F_z²>(0)`.
    pub coupling: f64,
    pub weak_coupling: bool,
    pub times: Vec<f64>,
    pub gaussian_variance: Vec<f64>,
    pub exact_variance: Vec<f64>,
    /// `[trajectory][time]` conditional means.
    pub gaussian_mean: Vec<Vec<f64>>,
    pub exact_mean: Vec<Vec<f64>>,
    pub max_relative_variance_error: f64,
    pub mean_path_correlation: f64,
    pub min_eigenvalue: f64,
    pub variance_tolerance: f64,
    pub correlation_threshold: f64,
    pub pass: Option<bool>,
}

/// Run both engines on the same innovations and compare `ΔF_z²` and `<F_z>`.
pub fn compare_gaussian_vs_exact(pair: &OraclePair, t_end: f64, n_traj: usize, seed: u64, n_samples: usize) -> Result<ComparisonReport> {
    if n_traj == 0 || !(t_end > 0.0) {
        return Err(Error::domain("comparison needs n_traj >= 1 and T > 0"));
    }
    let model = &pair.model;
    let bound = pair.step_bound();
    let n_steps = (t_end / bound).ceil().max(1.0) as usize;
    let dt = t_end / n_steps as f64;
    let s0 = model.initial_state();
    let path = model.deterministic_path(&s0, dt, n_steps)?;
    let every = (n_steps / n_samples.max(1)).max(1);
    let sample_idx: Vec<usize> = (0..=n_steps).step_by(every).collect();
    let times: Vec<f64> = sample_idx.iter().map(|&i| path.times[i]).collect();
    let gaussian_variance: Vec<f64> = sample_idx.iter().map(|&i| path.moments[i].var_fz).collect();
    let mut exact_var_sum = vec![0.0; sample_idx.len()];
    let mut gaussian_mean = Vec::with_capacity(n_traj);
    let mut exact_mean = Vec::with_capacity(n_traj);
    let mut min_eig = f64::INFINITY;
    for traj in 0..n_traj as u64 {
        let mut noise = NoiseStream::new(seed, traj);
        let dws: Vec<f64> = (0..n_steps).map(|_| noise.wiener(dt)).collect();
        let mut k = 0;
        let gauss = if model.kappa > 0.0 {
            let out = model.filter(&path, &s0, || {
                k += 1;
                dws[k - 1]
            })?;
            let mut fz = out.fz;
            fz.push(model.measurement_vector().dot(&out.final_odd));
            fz
        } else {
            vec![0.0; n_steps + 1]
        };
        let mut exact = ExactEnsemble::new(pair.atom.clone(), &pair.betas, model.kappa, dt)?;
        let mut em = Vec::with_capacity(sample_idx.len());
        let mut next = 0;
        for step in 0..=n_steps {
            if next < sample_idx.len() && sample_idx[next] == step {
                let (m, v) = exact.moments();
                em.push(m);
                exact_var_sum[next] += v;
                next += 1;
            }
            if step < n_steps {
                exact.step(dws[step])?;
            }
        }
        min_eig = min_eig.min(exact.positivity().0);
        gaussian_mean.push(sample_idx.iter().map(|&i| gauss[i]).collect::<Vec<f64>>());
        exact_mean.push(em);
    }
    let exact_variance: Vec<f64> = exact_var_sum.iter().map(|v| v / n_traj as f64).collect();
    let max_rel = gaussian_variance
        .iter()
        .zip(&exact_variance)
        .map(|(g, e)| ((g - e) / g).abs())
        .fold(0.0f64, f64::max);
    let xs: Vec<f64> = gaussian_mean.iter().flatten().copied().collect();
    let ys: Vec<f64> = exact_mean.iter().flatten().copied().collect();
    let corr = pearson(&xs, &ys);
    let coupling = model.kappa * t_end * gaussian_variance[0];
    let weak = coupling <= 0.2 + 1e-12;
    let (var_tol, corr_min) = (0.02, 0.99);
    let pass = weak.then(|| max_rel < var_tol && (model.kappa == 0.0 || corr > corr_min) && min_eig > -1e-10);
    Ok(ComparisonReport {
        space: pair.atom.space,
        n_atoms: pair.betas.len(),
        betas: pair.betas.clone(),
        kappa: model.kappa,
        t_end,
        dt,
        n_traj,
        coupling,
        weak_coupling: weak,
        times,
        gaussian_variance,
        exact_variance,
        gaussian_mean,
        exact_mean,
        max_relative_variance_error: max_rel,
        mean_path_correlation: corr,
        min_eigenvalue: min_eig,
        variance_tolerance: var_tol,
        correlation_threshold: corr_min,
        pass,
    })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,gaussian_var,exact_var,gaussian_mean_0,exact_mean_0\n");
        for (i, t) in self.times.iter().enumerate() {
            s.push_str(&format!(
                "{t:.9e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                self.gaussian_variance[i], self.exact_variance[i], self.gaussian_mean[0][i], self.exact_mean[0][i]
            ));
        }
        s
    }
}

/// Fig. 1c style protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Single color, spin prepared along the probe axis `|m_z = f>`.
    PumpingOnly,
    /// Single color at the same total scattering rate, spin rotated to `x`.
    PumpingPlusTensor,
    /// The two-color probe, spin rotated to `x`.
    TwoColorCancelled,
}

impl DecayMode {
    pub const ALL: [DecayMode; 3] = [DecayMode::PumpingOnly, DecayMode::PumpingPlusTensor, DecayMode::TwoColorCancelled];

    pub fn label(self) -> &'static str {
        match self {
            DecayMode::PumpingOnly => "pumping_only",
            DecayMode::PumpingPlusTensor => "pumping_plus_tensor",
            DecayMode::TwoColorCancelled => "two_color_cancelled",
        }
    }
}

/// Random atoms drawn from the cloud density, returned as local `β = I/I_max`.
pub fn sample_atom_betas(cloud: &CloudGeometry, basis: &ModeBasis, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = NoiseStream::new(seed, 0);
    let (sp, sz) = (cloud.w_perp / 2.0, cloud.w_z / 2.0);
    (0..n)
        .map(|_| {
            let (x, y, z) = (sp * rng.standard_normal(), sp * rng.standard_normal(), sz * rng.standard_normal());
            let w = basis.beam_radius(z);
            (basis.waist / w).powi(2) * (-2.0 * (x * x + y * y) / (w * w)).exp()
        })
        .collect()
}

/// The single-color D2 probe whose peak scattering rate equals that of `probe`.
pub fn equal_rate_single_color(species: &AtomicSpecies, probe: &TwoColorProbe) -> Result<ProbeColor> {
    let d2 = probe.colors()[1];
    if d2.line != Line::D2 {
        return Err(Error::domain("the second probe color must be the D2 component"));
    }
    let target = probe.total_scattering_rate(species)?;
    let unit = ColorQuantities::evaluate(species, &d2.with_power(1.0))?.gamma;
    Ok(d2.with_power(target / unit))
}

/// Setup of one protocol: the unit-β single-atom generator, the initial state,
/// and the spin component read out at the end.
#[derive(Clone, Debug, Serialize)]
pub struct DecaySetup {
    pub mode: DecayMode,
    pub gamma: f64,
    /// Net `C^{(2)}V` at peak intensity, rad/s.
    pub tensor_shift: f64,
    pub colors: Vec<ProbeColor>,
}

pub fn decay_setup(species: &AtomicSpecies, probe: &TwoColorProbe, mode: DecayMode) -> Result<DecaySetup> {
    let colors: Vec<ProbeColor> = match mode {
        DecayMode::TwoColorCancelled => probe.active_colors().copied().collect(),
        _ => vec![equal_rate_single_color(species, probe)?],
    };
    let mut gamma = 0.0;
    let mut tensor = 0.0;
    for c in &colors {
        gamma += ColorQuantities::evaluate(species, c)?.gamma;
        tensor += tensor_shift_strength(species, c, 1.0)?;
    }
    if mode == DecayMode::PumpingOnly {
        // |m_z = f> is an eigenstate of the rotating-frame tensor term
        tensor = 0.0;
    }
    Ok(DecaySetup { mode, gamma, tensor_shift: tensor, colors })
}

/// Normalised mean spin after probing for each `T`, averaged over atoms with
/// the probe's own weight `β`. Both pumping and the tensor shift scale with
/// `β`, so every atom follows the same unit-β curve at scaled time `βT`; that
/// curve is tabulated once by exact stepping and interpolated per atom.
pub fn mean_spin_decay_experiment(
    species: &AtomicSpecies,
    setup: &DecaySetup,
    t_grid: &[f64],
    betas: &[f64],
) -> Result<Vec<f64>> {
    let two_f = species.f_ground();
    let spin = SpinMatrices::new(two_f);
    let d = spin.dim();
    let f = two_f.value();
    let mut gen = CMat::zeros(d * d, d * d);
    for c in &setup.colors {
        let q = ColorQuantities::evaluate(species, c)?;
        let cp = ColorPumping::build(species, c.line, c.detuning)?;
        gen += cp.averaged.matrix.map(|v| v * q.gamma);
    }
    if setup.tensor_shift != 0.0 {
        let h = (&spin.z * &spin.z).map(|v| v * (setup.tensor_shift / 2.0));
        let id = CMat::identity(d, d);
        let comm = sandwich(&h, &id) - sandwich(&id, &h);
        gen += comm.map(|v| v * Complex64::new(0.0, -1.0));
    }
    let (rho0, observable) = match setup.mode {
        DecayMode::PumpingOnly => {
            let mut r = CMat::zeros(d, d);
            r[(0, 0)] = Complex64::new(1.0, 0.0);
            (r, spin.z.clone())
        }
        _ => {
            let k = QutritBasis::new(two_f)?.ket(0);
            (&k * k.adjoint(), spin.x.clone())
        }
    };
    let t_max = t_grid.iter().fold(0.0f64, |a, &t| a.max(t));
    if t_max == 0.0 {
        return Ok(vec![1.0; t_grid.len()]);
    }
    let omega = setup.gamma + (setup.tensor_shift * f * f / 2.0).abs();
    let n_grid = ((t_max * omega * 40.0).ceil() as usize).max(4000);
    let ds = t_max / n_grid as f64;
    let prop = gen.map(|v| v * ds).exp();
    let obs_row = vectorize(&observable.transpose());
    let mut v = vectorize(&rho0);
    let mut curve = Vec::with_capacity(n_grid + 1);
    for i in 0..=n_grid {
        curve.push(obs_row.dot(&v).re / f);
        if i < n_grid {
            v = &prop * v;
        }
    }
    let total: f64 = betas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::domain("atom sample has no probe overlap"));
    }
    let interp = |s: f64| {
        let x = s / ds;
        let i = (x.floor() as usize).min(n_grid - 1);
        let w = x - i as f64;
        curve[i] * (1.0 - w) + curve[i + 1] * w
    };
    Ok(t_grid.iter().map(|&t| betas.iter().map(|&b| b * interp(b * t)).sum::<f64>() / total).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayCurves {
    pub times: Vec<f64>,
    pub setups: Vec<DecaySetup>,
    pub curves: Vec<Vec<f64>>,
    pub n_atoms: usize,
    pub seed: u64,
    pub mean_beta: f64,
}

impl DecayCurves {
    pub fn curve(&self, mode: DecayMode) -> Option<&[f64]> {
        self.setups.iter().position(|s| s.mode == mode).map(|i| self.curves[i].as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s");
        for st in &self.setups {
            s.push(',');
            s.push_str(st.mode.label());
        }
        s.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            s.push_str(&format!("{t:.9e}"));
            for c in &self.curves {
                s.push_str(&format!(",{:.12e}", c[i]));
            }
            s.push('\n');
        }
        s
    }
}

pub fn fig1c_curves(
    species: &AtomicSpecies,
    probe: &TwoColorProbe,
    cloud: &CloudGeometry,
    basis: &ModeBasis,
    t_grid: &[f64],
    n_atoms: usize,
    seed: u64,
) -> Result<DecayCurves> {
    let betas = sample_atom_betas(cloud, basis, n_atoms, seed);
    let mut setups = Vec::new();
    let mut curves = Vec::new();
    for mode in DecayMode::ALL {
        let s = decay_setup(species, probe, mode)?;
        curves.push(mean_spin_decay_experiment(species, &s, t_grid, &betas)?);
        setups.push(s);
    }
    Ok(DecayCurves {
        times: t_grid.to_vec(),
        setups,
        curves,
        n_atoms,
        seed,
        mean_beta: betas.iter().sum::<f64>() / n_atoms.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angular::TwoJ;

    fn cs() -> AtomicSpecies {
        AtomicSpecies::cesium()
    }

    fn nominal_probe(s: &AtomicSpecies) -> TwoColorProbe {
        let g = s.manifold(Line::D2).unwrap().linewidth;
        let d2 = -580.0 * g;
        let d1 = -0.9407 * d2;
        let x = crate::probe::cancellation_operating_point(s, d1, d2).unwrap();
        let w0 = 16e-6;
        let unit = TwoColorProbe::new(ProbeColor::new(Line::D1, d1, x, w0).unwrap(), ProbeColor::new(Line::D2, d2, 1.0, w0).unwrap()).unwrap();
        let p3 = 1.0 / (35e-6 * unit.total_scattering_rate(s).unwrap());
        TwoColorProbe::new(ProbeColor::new(Line::D1, d1, x * p3, w0).unwrap(), ProbeColor::new(Line::D2, d2, p3, w0).unwrap()).unwrap()
    }

    fn bare(space: InternalSpace) -> AtomSpace {
        AtomSpace::new(&cs(), &[], space).unwrap()
    }

    #[test]
    fn initial_state_points_along_x() {
        for space in [InternalSpace::Full, InternalSpace::Qutrit] {
            let a = bare(space);
            let fx = a.operator(&SpinMatrices::new(TwoJ(8)).x);
            let v = (a.initial.adjoint() * fx * &a.initial)[(0, 0)].re;
            assert!((v - 4.0).abs() < 1e-12, "{space:?}: {v}");
            let e = ExactEnsemble::new(a, &[1.0], 0.0, 1e-6).unwrap();
            let (m, var) = e.moments();
            assert!(m.abs() < 1e-12 && (var - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_without_probe() {
        let mut e = ExactEnsemble::new(bare(InternalSpace::Full), &[1.0, 0.5], 0.0, 1e-6).unwrap();
        let before = e.density_matrix();
        for _ in 0..50 {
            e.step(0.3).unwrap();
        }
        assert!((e.density_matrix() - before).norm() < 1e-13);
    }

    #[test]
    fn single_spin_qnd_filter_matches_closed_form() {
        // p_m(t) ∝ p_m(0) exp(κ m M - κ m² t / 2) with M the integrated record
        let a = bare(InternalSpace::Full);
        let p0: Vec<f64> = a.initial.iter().map(|c| c.norm_sqr()).collect();
        let (kappa, dt) = (0.7, 1e-3);
        let mut e = ExactEnsemble::new(a.clone(), &[1.0], kappa, dt).unwrap();
        let mut noise = NoiseStream::new(5, 0);
        let mut m_tot = 0.0;
        for _ in 0..400 {
            m_tot += e.step(noise.wiener(dt)).unwrap();
        }
        let t = e.time;
        let w: Vec<f64> = (0..a.dim).map(|i| p0[i] * (kappa * a.f_values[i] * m_tot - 0.5 * kappa * a.f_values[i].powi(2) * t).exp()).collect();
        let z: f64 = w.iter().sum();
        let rho = e.density_matrix();
        for i in 0..a.dim {
            assert!((rho[(i, i)].re - w[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_conditional_variance_decreases() {
        let a = bare(InternalSpace::Full);
        let (kappa, dt, n_traj) = (1.0, 2e-3, 200);
        let mut avg = vec![0.0; 6];
        for traj in 0..n_traj {
            let mut e = ExactEnsemble::new(a.clone(), &[1.0], kappa, dt).unwrap();
            let mut noise = NoiseStream::new(8, traj);
            for (k, v) in avg.iter_mut().enumerate() {
                if k > 0 {
                    for _ in 0..50 {
                        e.step(noise.wiener(dt)).unwrap();
                    }
                }
                *v += e.moments().1 / n_traj as f64;
            }
        }
        assert!(avg.windows(2).all(|w| w[1] < w[0]), "{avg:?}");
    }

    #[test]
    fn equal_atoms_stay_exchange_symmetric() {
        let s = cs();
        let colors = oracle_colors(&s, &nominal_probe(&s)).unwrap();
        let maps: Vec<(f64, &PumpingMap)> = colors.iter().map(|c| (c.gamma, &c.pumping.averaged)).collect();
        let a = AtomSpace::new(&s, &maps, InternalSpace::Qutrit).unwrap();
        let d = a.dim;
        let mut e = ExactEnsemble::new(a, &[0.8, 0.8], 3e3, 2e-7).unwrap();
        let mut noise = NoiseStream::new(1, 1);
        for _ in 0..200 {
            e.step(noise.wiener(2e-7)).unwrap();
        }
        let rho = e.density_matrix();
        let swap = |i: usize| (i % d) * d + i / d;
        let mut worst = 0.0f64;
        for i in 0..d * d {
            for j in 0..d * d {
                worst = worst.max((rho[(i, j)] - rho[(swap(i), swap(j))]).norm());
            }
        }
        assert!(worst < 1e-12, "{worst}");
        e.check_positive(-1e-10).unwrap();
    }

    #[test]
    fn pumping_only_populations_match_moment_engine() {
        let s = cs();
        let colors = oracle_colors(&s, &nominal_probe(&s)).unwrap();
        let betas = [1.0, 0.6];
        let pair = OraclePair::new(&s, &colors, &betas, 0.0, InternalSpace::Qutrit).unwrap();
        let dt = 1e-7;
        let n = 300;
        let mut e = ExactEnsemble::new(pair.atom.clone(), &betas, 0.0, dt).unwrap();
        let mut sinks = vec![0.0; betas.len()];
        let mut g = pair.model.initial_state();
        let basis = QutritBasis::new(s.f_ground()).unwrap();
        for step in 0..=n {
            if step % 100 == 0 {
                for (k, &b) in betas.iter().enumerate() {
                    let red = e.reduced(k);
                    let mut kept = 0.0;
                    for i in 0..3 {
                        let p = (pair.atom.operator(&basis.n(i)) * &red).trace().re;
                        kept += p;
                        assert!((p - g.population(k, i, 0) / b).abs() < 1e-8, "step {step} atom {k} level {i}");
                    }
                    let sink = red[(pair.atom.dim - 1, pair.atom.dim - 1)].re;
                    assert!((kept + sink - 1.0).abs() < 1e-12);
                    assert!(sink >= sinks[k] - 1e-15);
                    sinks[k] = sink;
                }
            }
            if step < n {
                e.step(0.0).unwrap();
                g = pair.model.deterministic_drift(&g, dt).unwrap();
            }
        }
        assert!(sinks[0] > sinks[1] && sinks[1] > 0.0);
    }

    #[test]
    fn weak_coupling_single_atom_agrees_with_gaussian_engine() {
        let s = cs();
        let colors = oracle_colors(&s, &nominal_probe(&s)).unwrap();
        let gamma: f64 = colors.iter().map(|c| c.gamma).sum();
        let t_end = 1.0 / gamma;
        let kappa = 0.2 / (t_end * 2.0);
        let pair = OraclePair::new(&s, &colors, &[1.0], kappa, InternalSpace::Qutrit).unwrap();
        let r = compare_gaussian_vs_exact(&pair, t_end, 40, 11, 10).unwrap();
        assert!(r.weak_coupling);
        assert_eq!(r.pass, Some(true), "rel {} corr {}", r.max_relative_variance_error, r.mean_path_correlation);
        assert_eq!(r.times.len(), r.exact_variance.len());
        let again = compare_gaussian_vs_exact(&pair, t_end, 40, 11, 10).unwrap();
        assert_eq!(r.exact_mean, again.exact_mean);
    }

    #[test]
    fn decay_curves_start_at_one_and_cancelled_tensor_changes_nothing() {
        let s = cs();
        let probe = nominal_probe(&s);
        let betas = [1.0, 0.5, 0.2];
        let grid = [0.0, 50e-6, 100e-6, 200e-6];
        for mode in DecayMode::ALL {
            let setup = decay_setup(&s, &probe, mode).unwrap();
            let c = mean_spin_decay_experiment(&s, &setup, &grid, &betas).unwrap();
            assert!((c[0] - 1.0).abs() < 1e-12, "{mode:?}");
            assert!(c.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{mode:?}: {c:?}");
        }
        let setup = decay_setup(&s, &probe, DecayMode::TwoColorCancelled).unwrap();
        assert!(setup.tensor_shift.abs() < 1e-9 * setup.gamma);
        let zeroed = DecaySetup { tensor_shift: 0.0, ..setup.clone() };
        let a = mean_spin_decay_experiment(&s, &setup, &grid, &[1.0; 4]).unwrap();
        let b = mean_spin_decay_experiment(&s, &zeroed, &grid, &[1.0; 4]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        // uniform β: the ensemble curve is the single-atom curve
        let one = mean_spin_decay_experiment(&s, &zeroed, &grid, &[1.0]).unwrap();
        assert_eq!(one, b);
    }

    #[test]
    fn tensor_shift_accelerates_decay_and_equal_rates_hold() {
        let s = cs();
        let probe = nominal_probe(&s);
        let single = equal_rate_single_color(&s, &probe).unwrap();
        let g1 = ColorQuantities::evaluate(&s, &single).unwrap().gamma;
        assert!((g1 / probe.total_scattering_rate(&s).unwrap() - 1.0).abs() < 1e-12);
        let grid = [200e-6];
        let betas = [1.0, 0.6, 0.3];
        let with = mean_spin_decay_experiment(&s, &decay_setup(&s, &probe, DecayMode::PumpingPlusTensor).unwrap(), &grid, &betas).unwrap();
        let without = mean_spin_decay_experiment(&s, &decay_setup(&s, &probe, DecayMode::TwoColorCancelled).unwrap(), &grid, &betas).unwrap();
        assert!(with[0] < without[0]);
    }
}

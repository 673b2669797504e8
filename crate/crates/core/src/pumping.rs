//! Single-atom optical pumping on the upper ground manifold, its Larmor-cycle
//! average, and the qutrit-projected trace tables used by the moment engine.
//!
//! Operators live on the `2f+1` sublevels ordered `m_z = f, ..., -f`. A
//! superoperator is stored as a `d² × d²` matrix acting on the row-major
//! vectorisation `vec(ρ)[a·d + b] = ρ_ab`, so `vec(AρB) = (A ⊗ Bᵀ) vec(ρ)`.
//!
//! The map is rate-normalised: `γ_{j'}(r) 𝒟` is the physical generator when
//! `γ_{j'}` is the characteristic scattering rate of the probe module. Every
//! Raman/Rayleigh amplitude is therefore divided by the line-strength factor
//! already contained in that rate.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::angular::{SpinMatrices, TwoJ};
use crate::atomic::{AtomicSpecies, Line};
use crate::error::{Error, Result};

type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn real(m: &DMatrix<f64>) -> CMat {
    m.map(|v| Complex64::new(v, 0.0))
}

/// `A ⊗ B`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == ZERO {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Superoperator of `ρ ↦ A ρ B`.
pub fn sandwich(a: &CMat, b: &CMat) -> CMat {
    kron(a, &b.transpose())
}

pub fn vectorize(rho: &CMat) -> nalgebra::DVector<Complex64> {
    let d = rho.nrows();
    nalgebra::DVector::from_fn(d * d, |k, _| rho[(k / d, k % d)])
}

pub fn unvectorize(v: &nalgebra::DVector<Complex64>, d: usize) -> CMat {
    CMat::from_fn(d, d, |a, b| v[a * d + b])
}

/// `Tr(A B)`.
pub fn trace_product(a: &CMat, b: &CMat) -> Complex64 {
    let mut s = ZERO;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// Jump operators `W_q` (q = -1, 0, +1) and the anti-Hermitian absorption
/// generator, rate-normalised and dimensionless.
#[derive(Clone, Debug)]
pub struct JumpOperators {
    pub line: Line,
    pub detuning: f64,
    pub w: [CMat; 3],
    /// `H = -(i/2) R` with `R` the absorption-rate operator.
    pub h_loss: CMat,
    /// Line-strength factor divided out of the physical amplitudes.
    pub line_factor: f64,
}

impl JumpOperators {
    pub fn dim(&self) -> usize {
        self.h_loss.nrows()
    }

    /// `R = 2i H`, Hermitian and positive.
    pub fn absorption_rate_operator(&self) -> CMat {
        self.h_loss.map(|v| v * Complex64::new(0.0, 2.0))
    }

    /// `Σ_q W_q† W_q`, the rate of return into the tracked manifold.
    pub fn feeding_rate_operator(&self) -> CMat {
        let mut s = CMat::zeros(self.dim(), self.dim());
        for w in &self.w {
            s += w.adjoint() * w;
        }
        s
    }
}

/// Build `W_q = Σ_{f'} Δ/(Δ_{f'} + iΓ/2) (e_q*·D_{ff'})(e_x·D†_{f'f})`.
pub fn jump_operators(species: &AtomicSpecies, line: Line, detuning: f64) -> Result<JumpOperators> {
    let m = species.manifold(line)?;
    let f = species.f_ground().0;
    let d = TwoJ(f).dim();
    let levels = species.line_detunings(line, detuning)?;
    let factor = species.scattering_line_factor(line, detuning)?;
    let norm = 1.0 / factor.sqrt();
    let mut w = [CMat::zeros(d, d), CMat::zeros(d, d), CMat::zeros(d, d)];
    let mut r = CMat::zeros(d, d);
    for &(fp, dfp) in &levels {
        let amp = Complex64::new(detuning, 0.0) / Complex64::new(dfp, 0.5 * m.linewidth);
        let sph = species.dipole_raising_operator(line, fp, f)?;
        let cart = species.dipole_raising_cartesian(line, fp, f)?;
        let absorb = &cart[0]; // e_x · D†
        for (qi, dq) in sph.iter().enumerate() {
            // e_q* · D = (D†_q)†
            let emit = real(&dq.transpose());
            w[qi] += (&emit * absorb).map(|v| v * amp * norm);
        }
        r += (absorb.adjoint() * absorb).map(|v| v * amp.norm_sqr() / factor);
    }
    let h_loss = r.map(|v| v * Complex64::new(0.0, -0.5));
    Ok(JumpOperators { line, detuning, w, h_loss, line_factor: factor })
}

/// A linear map on `d × d` operators in the row-major superoperator form.
#[derive(Clone, Debug)]
pub struct PumpingMap {
    pub dim: usize,
    pub matrix: CMat,
    /// Doubled `m_z` labels of the basis states.
    pub two_m: Vec<i32>,
}

impl PumpingMap {
    pub fn zero_like(&self) -> Self {
        PumpingMap { dim: self.dim, matrix: CMat::zeros(self.matrix.nrows(), self.matrix.ncols()), two_m: self.two_m.clone() }
    }

    pub fn apply(&self, rho: &CMat) -> CMat {
        unvectorize(&(&self.matrix * vectorize(rho)), self.dim)
    }

    /// Heisenberg-picture adjoint: `Tr(𝒟†[X] ρ) = Tr(X 𝒟[ρ])` for all `ρ`.
    pub fn adjoint(&self, x: &CMat) -> CMat {
        let d = self.dim;
        // (𝒟†X)_{ba} = Tr(X 𝒟[|a><b|]) = Σ_{uv} X_{vu} 𝒟_{(u,v),(a,b)}
        let mut out = CMat::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let col = a * d + b;
                let mut s = ZERO;
                for u in 0..d {
                    for v in 0..d {
                        let e = self.matrix[(u * d + v, col)];
                        if e != ZERO {
                            s += x[(v, u)] * e;
                        }
                    }
                }
                out[(b, a)] = s;
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        PumpingMap { dim: self.dim, matrix: self.matrix.map(|v| v * s), two_m: self.two_m.clone() }
    }

    pub fn add(&self, other: &PumpingMap) -> Self {
        PumpingMap { dim: self.dim, matrix: &self.matrix + &other.matrix, two_m: self.two_m.clone() }
    }

    /// Choi matrix `Σ_{ab} |a><b| ⊗ 𝒟[|a><b|]`.
    pub fn choi(&self) -> CMat {
        let d = self.dim;
        let mut out = CMat::zeros(d * d, d * d);
        for a in 0..d {
            for b in 0..d {
                let col = a * d + b;
                for u in 0..d {
                    for v in 0..d {
                        out[(a * d + u, b * d + v)] = self.matrix[(u * d + v, col)];
                    }
                }
            }
        }
        out
    }
}

fn two_m_labels(two_f: i32) -> Vec<i32> {
    TwoJ(two_f).projections().collect()
}

/// `𝒟[ρ] = -i(Hρ - ρH†) + Σ_q W_q ρ W_q†`.
pub fn single_atom_pumping_map(jumps: &JumpOperators) -> PumpingMap {
    let d = jumps.dim();
    let id = CMat::identity(d, d);
    let h = &jumps.h_loss;
    let mut m = (sandwich(h, &id) - sandwich(&id, &h.adjoint())).map(|v| v * -I);
    for w in &jumps.w {
        m += sandwich(w, &w.adjoint());
    }
    PumpingMap { dim: d, matrix: m, two_m: two_m_labels((d - 1) as i32) }
}

/// Only the feeding part `Σ_q W_q ρ W_q†`.
pub fn feeding_map(jumps: &JumpOperators) -> PumpingMap {
    let d = jumps.dim();
    let mut m = CMat::zeros(d * d, d * d);
    for w in &jumps.w {
        m += sandwich(w, &w.adjoint());
    }
    PumpingMap { dim: d, matrix: m, two_m: two_m_labels((d - 1) as i32) }
}

/// Average `U(φ) 𝒟[U†(φ) · U(φ)] U†(φ)` over a Larmor cycle, `U = exp(-iφ f_z)`.
///
/// In the `m_z` basis the element taking `|c><d|` to `|a><b|` picks up the phase
/// `exp(-iφ[(m_a - m_b) - (m_c - m_d)])`, so the average keeps exactly the
/// elements with balanced weights.
pub fn larmor_average(map: &PumpingMap) -> PumpingMap {
    let d = map.dim;
    let mut out = map.matrix.clone();
    for a in 0..d {
        for b in 0..d {
            for c in 0..d {
                for e in 0..d {
                    let row = map.two_m[a] - map.two_m[b];
                    let col = map.two_m[c] - map.two_m[e];
                    if row != col {
                        out[(a * d + b, c * d + e)] = ZERO;
                    }
                }
            }
        }
    }
    PumpingMap { dim: d, matrix: out, two_m: map.two_m.clone() }
}

/// `exp(-iφ f_z)` on the sublevels of `map`.
pub fn larmor_rotation(two_m: &[i32], phi: f64) -> CMat {
    let d = two_m.len();
    CMat::from_fn(d, d, |a, b| if a == b { Complex64::from_polar(1.0, -phi * f64::from(two_m[a]) / 2.0) } else { ZERO })
}

pub const POPULATIONS: [&str; 3] = ["up", "down", "T"];
pub const COHERENCES: [&str; 3] = ["up_down", "up_T", "down_T"];
/// `(i, j)` of each coherence in [`COHERENCES`] order.
pub const COHERENCE_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
pub const UP_DOWN: usize = 0;
pub const UP_T: usize = 1;
pub const DOWN_T: usize = 2;

/// The `m_x = f, f-1, f-2` states embedded in the sublevel space.
#[derive(Clone, Debug)]
pub struct QutritBasis {
    pub two_f: i32,
    /// Columns are `|↑>, |↓>, |T>` in the `m_z` basis.
    pub embedding: CMat,
}

impl QutritBasis {
    /// `|m_x> = exp(-iπ/2 f_y)|m_z = m>`, phases fixed so `<↑|f_z|↓>` and
    /// `<↓|f_z|T>` are positive.
    pub fn new(two_f: TwoJ) -> Result<Self> {
        if two_f.0 < 1 {
            return Err(Error::domain("qutrit basis needs f >= 1/2"));
        }
        let spin = SpinMatrices::new(two_f);
        let d = spin.dim();
        let gen = spin.y.map(|v| v * Complex64::new(0.0, -PI / 2.0));
        let rot = gen.exp();
        let n = d.min(3);
        let mut emb = CMat::zeros(d, 3);
        for k in 0..n {
            emb.set_column(k, &rot.column(k));
        }
        // orient so that f_x |m_x> = m |m_x>
        let fx_top = (emb.column(0).adjoint() * &spin.x * emb.column(0))[(0, 0)].re;
        if fx_top < 0.0 {
            // rotated the wrong way; use the opposite sense
            let rot = spin.y.map(|v| v * Complex64::new(0.0, PI / 2.0)).exp();
            for k in 0..n {
                emb.set_column(k, &rot.column(k));
            }
        }
        for k in 1..n {
            let el = (emb.column(k - 1).adjoint() * &spin.z * emb.column(k))[(0, 0)];
            if el.re < 0.0 {
                let col = emb.column(k).map(|v| -v);
                emb.set_column(k, &col);
            }
        }
        Ok(QutritBasis { two_f: two_f.0, embedding: emb })
    }

    pub fn dim(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn ket(&self, i: usize) -> nalgebra::DVector<Complex64> {
        self.embedding.column(i).into_owned()
    }

    pub fn n(&self, i: usize) -> CMat {
        let k = self.ket(i);
        &k * k.adjoint()
    }

    pub fn x(&self, c: usize) -> CMat {
        let (i, j) = COHERENCE_PAIRS[c];
        let (a, b) = (self.ket(i), self.ket(j));
        (&a * b.adjoint() + &b * a.adjoint()).map(|v| v * FRAC_1_SQRT_2)
    }

    /// The quadrature `i(|i><j| - |j><i|)/√2` not tracked by the moment engine.
    pub fn y(&self, c: usize) -> CMat {
        let (i, j) = COHERENCE_PAIRS[c];
        let (a, b) = (self.ket(i), self.ket(j));
        (&a * b.adjoint() - &b * a.adjoint()).map(|v| v * Complex64::new(0.0, FRAC_1_SQRT_2))
    }

    /// Projector onto the qutrit block.
    pub fn projector(&self) -> CMat {
        &self.embedding * self.embedding.adjoint()
    }
}

/// Qutrit trace tables of one color's (rate-normalised, Larmor-averaged) map.
///
/// Index conventions: populations `[↑, ↓, T]`, coherences `[↑↓, ↑T, ↓T]`.
#[derive(Clone, Debug, Serialize)]
pub struct PumpingTables {
    pub line: Option<Line>,
    pub detuning: f64,
    /// `Tr[𝒟†[n_i] n_ℓ]`
    pub t_nn: [[f64; 3]; 3],
    /// `Tr[𝒟†[n_i] x_ℓm]`
    pub t_nx: [[f64; 3]; 3],
    /// `Tr[𝒟†[x_ij] n_ℓ]`
    pub t_xn: [[f64; 3]; 3],
    /// `Tr[𝒟†[x_ij] x_ℓm]`
    pub t_xx: [[f64; 3]; 3],
    /// `Tr[𝒟[x_ij] n_ℓ]`, the Schrödinger-picture companion.
    pub t_xn_mean: [[f64; 3]; 3],
    /// `Tr[𝒟[x_ij] x_ℓm]`
    pub t_xx_mean: [[f64; 3]; 3],
    /// `Tr[𝒩[x_ij, x_i'j'] n_ℓ]`
    pub n_table: [[[f64; 3]; 3]; 3],
    /// `Tr[𝒩[x_ij, x_i'j'] x_ℓm]`
    pub n_table_x: [[[f64; 3]; 3]; 3],
    /// Rate out of the qutrit block from each basis state.
    pub loss: [f64; 3],
    /// Largest `|Tr[𝒟†[x_ij] y_ℓm]|`: leakage into the untracked quadrature.
    pub quadrature_leakage: f64,
    /// Largest imaginary part met while tracing.
    pub max_imaginary: f64,
}

impl PumpingTables {
    fn zero(line: Option<Line>, detuning: f64) -> Self {
        PumpingTables {
            line,
            detuning,
            t_nn: [[0.0; 3]; 3],
            t_nx: [[0.0; 3]; 3],
            t_xn: [[0.0; 3]; 3],
            t_xx: [[0.0; 3]; 3],
            t_xn_mean: [[0.0; 3]; 3],
            t_xx_mean: [[0.0; 3]; 3],
            n_table: [[[0.0; 3]; 3]; 3],
            n_table_x: [[[0.0; 3]; 3]; 3],
            loss: [0.0; 3],
            quadrature_leakage: 0.0,
            max_imaginary: 0.0,
        }
    }

    /// `Σ_j w_j T_j`, e.g. the `γ`-weighted two-color tables.
    pub fn weighted_sum(parts: &[(f64, &PumpingTables)]) -> Self {
        let mut out = PumpingTables::zero(None, f64::NAN);
        for &(w, t) in parts {
            for i in 0..3 {
                for j in 0..3 {
                    out.t_nn[i][j] += w * t.t_nn[i][j];
                    out.t_nx[i][j] += w * t.t_nx[i][j];
                    out.t_xn[i][j] += w * t.t_xn[i][j];
                    out.t_xx[i][j] += w * t.t_xx[i][j];
                    out.t_xn_mean[i][j] += w * t.t_xn_mean[i][j];
                    out.t_xx_mean[i][j] += w * t.t_xx_mean[i][j];
                    for l in 0..3 {
                        out.n_table[i][j][l] += w * t.n_table[i][j][l];
                        out.n_table_x[i][j][l] += w * t.n_table_x[i][j][l];
                    }
                }
                out.loss[i] += w * t.loss[i];
            }
            out.quadrature_leakage = out.quadrature_leakage.max(w.abs() * t.quadrature_leakage);
            out.max_imaginary = out.max_imaginary.max(w.abs() * t.max_imaginary);
        }
        out
    }

    /// Abort with diagnostics if any table entry is not real to `tol`.
    pub fn check_real(&self, tol: f64) -> Result<()> {
        if self.max_imaginary > tol {
            return Err(Error::Instability {
                time: 0.0,
                reason: format!("pumping tables carry imaginary parts up to {:e} (tolerance {tol:e})", self.max_imaginary),
            });
        }
        Ok(())
    }

    /// Human-readable dump, one entry per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let src = match self.line {
            Some(l) => format!("{} detuning={:.6e} rad/s", l.label(), self.detuning),
            None => "combined".to_string(),
        };
        let mut put = |name: &str, a: &str, b: &str, v: f64| {
            s.push_str(&format!("{name}[{a}][{b}] = {v:+.12e}  # {src}\n"));
        };
        for i in 0..3 {
            for l in 0..3 {
                put("T_nn", POPULATIONS[i], POPULATIONS[l], self.t_nn[i][l]);
            }
        }
        for i in 0..3 {
            for l in 0..3 {
                put("T_nx", POPULATIONS[i], COHERENCES[l], self.t_nx[i][l]);
            }
        }
        for c in 0..3 {
            for l in 0..3 {
                put("T_xn", COHERENCES[c], POPULATIONS[l], self.t_xn[c][l]);
            }
        }
        for c in 0..3 {
            for l in 0..3 {
                put("T_xx", COHERENCES[c], COHERENCES[l], self.t_xx[c][l]);
            }
        }
        for c in 0..3 {
            for l in 0..3 {
                put("T_xn_mean", COHERENCES[c], POPULATIONS[l], self.t_xn_mean[c][l]);
            }
        }
        for c in 0..3 {
            for l in 0..3 {
                put("T_xx_mean", COHERENCES[c], COHERENCES[l], self.t_xx_mean[c][l]);
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                for l in 0..3 {
                    put("N", &format!("{}][{}", COHERENCES[a], COHERENCES[b]), POPULATIONS[l], self.n_table[a][b][l]);
                }
            }
        }
        for i in 0..3 {
            put("loss", POPULATIONS[i], "-", self.loss[i]);
        }
        s
    }
}

fn anticomm(a: &CMat, b: &CMat) -> CMat {
    a * b + b * a
}

/// `𝒩[a, b] = ½(𝒟†[{a,b}] - {𝒟†[a], b} - {a, 𝒟†[b]})`.
pub fn two_body_correction(map: &PumpingMap, a: &CMat, b: &CMat) -> CMat {
    let ab = map.adjoint(&anticomm(a, b));
    let da = map.adjoint(a);
    let db = map.adjoint(b);
    (ab - anticomm(&da, b) - anticomm(a, &db)).map(|v| v * 0.5)
}

/// Project a (Larmor-averaged) map onto the qutrit and trace every table entry.
pub fn qutrit_projected_tables(map: &PumpingMap, basis: &QutritBasis) -> PumpingTables {
    let mut t = PumpingTables::zero(None, f64::NAN);
    let n: Vec<CMat> = (0..3).map(|i| basis.n(i)).collect();
    let x: Vec<CMat> = (0..3).map(|c| basis.x(c)).collect();
    let y: Vec<CMat> = (0..3).map(|c| basis.y(c)).collect();
    let dn: Vec<CMat> = n.iter().map(|o| map.adjoint(o)).collect();
    let dx: Vec<CMat> = x.iter().map(|o| map.adjoint(o)).collect();
    let sx: Vec<CMat> = x.iter().map(|o| map.apply(o)).collect();
    let mut imag = 0.0f64;
    let mut re = |v: Complex64| {
        imag = imag.max(v.im.abs());
        v.re
    };
    for i in 0..3 {
        for l in 0..3 {
            t.t_nn[i][l] = re(trace_product(&dn[i], &n[l]));
            t.t_nx[i][l] = re(trace_product(&dn[i], &x[l]));
            t.t_xn[i][l] = re(trace_product(&dx[i], &n[l]));
            t.t_xx[i][l] = re(trace_product(&dx[i], &x[l]));
            t.t_xn_mean[i][l] = re(trace_product(&sx[i], &n[l]));
            t.t_xx_mean[i][l] = re(trace_product(&sx[i], &x[l]));
        }
    }
    for a in 0..3 {
        for b in 0..3 {
            let nn = two_body_correction(map, &x[a], &x[b]);
            for l in 0..3 {
                t.n_table[a][b][l] = re(trace_product(&nn, &n[l]));
                t.n_table_x[a][b][l] = re(trace_product(&nn, &x[l]));
            }
        }
    }
    for i in 0..3 {
        t.loss[i] = -(0..3).map(|l| t.t_nn[l][i]).sum::<f64>();
    }
    let mut leak = 0.0f64;
    for c in 0..3 {
        for l in 0..3 {
            leak = leak.max(trace_product(&dx[c], &y[l]).norm());
        }
    }
    t.quadrature_leakage = leak;
    t.max_imaginary = imag;
    t
}

/// Everything needed for one color: jumps, raw and averaged maps, and tables.
#[derive(Clone, Debug)]
pub struct ColorPumping {
    pub jumps: JumpOperators,
    pub map: PumpingMap,
    pub averaged: PumpingMap,
    pub tables: PumpingTables,
}

impl ColorPumping {
    pub fn build(species: &AtomicSpecies, line: Line, detuning: f64) -> Result<Self> {
        let jumps = jump_operators(species, line, detuning)?;
        let map = single_atom_pumping_map(&jumps);
        let averaged = larmor_average(&map);
        let basis = QutritBasis::new(species.f_ground())?;
        let mut tables = qutrit_projected_tables(&averaged, &basis);
        tables.line = Some(line);
        tables.detuning = detuning;
        tables.check_real(1e-10)?;
        Ok(ColorPumping { jumps, map, averaged, tables })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angular::clebsch_gordan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cs() -> AtomicSpecies {
        AtomicSpecies::cesium()
    }

    fn nominal(line: Line) -> f64 {
        let s = cs();
        let g = s.manifold(Line::D2).unwrap().linewidth;
        match line {
            Line::D2 => -580.0 * g,
            Line::D1 => 580.0 * g,
        }
    }

    fn random_density(rng: &mut ChaCha8Rng, d: usize) -> CMat {
        let a = CMat::from_fn(d, d, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let r = &a * a.adjoint();
        let tr = r.trace();
        r.map(|v| v / tr)
    }

    fn min_eigenvalue(m: &CMat) -> f64 {
        let h = (m + m.adjoint()).map(|v| v * 0.5);
        h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn rate_matrix_is_positive() {
        let s = cs();
        for line in Line::BOTH {
            let j = jump_operators(&s, line, nominal(line)).unwrap();
            assert!(min_eigenvalue(&j.feeding_rate_operator()) > -1e-14);
            assert!(min_eigenvalue(&j.absorption_rate_operator()) > 0.0);
            // absorption exceeds return into the manifold
            let diff = j.absorption_rate_operator() - j.feeding_rate_operator();
            assert!(min_eigenvalue(&diff) > -1e-12);
        }
    }

    #[test]
    fn jump_selection_rules() {
        let s = cs();
        let j = jump_operators(&s, Line::D2, nominal(Line::D2)).unwrap();
        let two_m = two_m_labels(8);
        for (qi, q) in [-2, 0, 2].into_iter().enumerate() {
            for a in 0..9 {
                for b in 0..9 {
                    if j.w[qi][(a, b)].norm() > 1e-14 {
                        let dm = two_m[a] - two_m[b];
                        assert!(dm == 2 - q || dm == -2 - q, "q={q} {}->{}", two_m[b], two_m[a]);
                    }
                }
            }
        }
    }

    #[test]
    fn stretched_state_scattering_rate() {
        // independent sum over f' and q from Clebsch–Gordan coefficients
        let s = cs();
        for line in Line::BOTH {
            let delta = nominal(line);
            let m = s.manifold(line).unwrap();
            let j = jump_operators(&s, line, delta).unwrap();
            let rate = j.absorption_rate_operator()[(0, 0)].re;
            let mut want = 0.0;
            for (fp, dfp) in s.line_detunings(line, delta).unwrap() {
                let o = s.reduced_strength(line, fp, 8).unwrap();
                let lorentz = delta * delta / (dfp * dfp + 0.25 * m.linewidth * m.linewidth);
                for q in [-2, 2] {
                    let cg = clebsch_gordan(8, 8, 2, q, fp, 8 + q);
                    want += 0.5 * lorentz * o * o * cg * cg;
                }
            }
            want /= s.scattering_line_factor(line, delta).unwrap();
            assert!((rate - want).abs() < 1e-12 * want, "{line:?}: {rate} vs {want}");
            // far from resonance the fine-structure share of the oscillator strength
            let far = jump_operators(&s, line, delta.signum() * 1e6 * m.linewidth).unwrap();
            let share = if line == Line::D2 { 2.0 / 3.0 } else { 1.0 / 3.0 };
            assert!((far.absorption_rate_operator()[(0, 0)].re - share).abs() < 1e-3);
        }
    }

    #[test]
    fn mixed_state_loses_population_to_lower_level() {
        let s = cs();
        for line in Line::BOTH {
            let delta = nominal(line);
            let m = s.manifold(line).unwrap();
            let c = ColorPumping::build(&s, line, delta).unwrap();
            let rho = CMat::identity(9, 9).map(|v| v / 9.0);
            let rate = c.map.apply(&rho).trace().re;
            // brute force: absorption weight per f' times branching o²_{f',f=3}
            let mut absorbed = 0.0;
            let mut lost = 0.0;
            for (fp, dfp) in s.line_detunings(line, delta).unwrap() {
                let lorentz = delta * delta / (dfp * dfp + 0.25 * m.linewidth * m.linewidth);
                let o = s.reduced_strength(line, fp, 8).unwrap();
                let mut a = 0.0;
                for tm in TwoJ(8).projections() {
                    for q in [-2, 2] {
                        let cg = clebsch_gordan(8, tm, 2, q, fp, tm + q);
                        a += 0.5 * o * o * cg * cg / 9.0;
                    }
                }
                a *= lorentz;
                let b = if (fp - 6).abs() <= 2 { s.reduced_strength(line, fp, 6).unwrap().powi(2) } else { 0.0 };
                absorbed += a;
                lost += a * b;
            }
            let factor = s.scattering_line_factor(line, delta).unwrap();
            assert!((rate + lost / factor).abs() < 1e-12, "{line:?}");
            let branching = lost / absorbed;
            assert!(branching > 0.0 && branching < 1.0);
            // the averaged map loses at the same rate from a rotation-invariant state
            assert!((c.averaged.apply(&rho).trace().re - rate).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_prefactor_freezes_state() {
        let s = cs();
        let c = ColorPumping::build(&s, Line::D2, nominal(Line::D2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rho = random_density(&mut rng, 9);
        let z = c.averaged.scaled(0.0).apply(&rho);
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn positivity_over_many_small_steps() {
        let s = cs();
        let c = ColorPumping::build(&s, Line::D2, nominal(Line::D2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rho = random_density(&mut rng, 9);
        let dt = 1e-3;
        let mut prev_trace = rho.trace().re;
        for step in 0..10_000 {
            let k1 = c.averaged.apply(&rho);
            rho += k1.map(|v| v * dt);
            if step % 100 == 0 {
                assert!((&rho - rho.adjoint()).norm() < 1e-12);
                assert!(min_eigenvalue(&rho) > -1e-10);
                let tr = rho.trace().re;
                assert!(tr <= prev_trace + 1e-15);
                prev_trace = tr;
            }
        }
    }

    #[test]
    fn larmor_average_commutes_with_rotations() {
        let s = cs();
        let c = ColorPumping::build(&s, Line::D1, nominal(Line::D1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let rho = random_density(&mut rng, 9);
            let phi = rng.gen::<f64>() * 2.0 * PI;
            let u = larmor_rotation(&c.averaged.two_m, phi);
            let lhs = &u * c.averaged.apply(&rho) * u.adjoint();
            let rhs = c.averaged.apply(&(&u * &rho * u.adjoint()));
            assert!((lhs - rhs).norm() < 1e-12);
        }
        // idempotent
        let twice = larmor_average(&c.averaged);
        assert!((twice.matrix - &c.averaged.matrix).norm() < 1e-15);
    }

    #[test]
    fn larmor_average_matches_phase_quadrature_and_keeps_populations() {
        let s = cs();
        let c = ColorPumping::build(&s, Line::D2, nominal(Line::D2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = random_density(&mut rng, 9);
        // brute-force φ average (trapezoid is exact for the finite Fourier content)
        let n = 40;
        let mut acc = CMat::zeros(9, 9);
        for k in 0..n {
            let u = larmor_rotation(&c.map.two_m, 2.0 * PI * k as f64 / n as f64);
            acc += &u * c.map.apply(&(u.adjoint() * &rho * &u)) * u.adjoint();
        }
        acc = acc.map(|v| v / n as f64);
        assert!((acc - c.averaged.apply(&rho)).norm() < 1e-12);
        // population → population elements untouched
        for a in 0..9 {
            for b in 0..9 {
                let (r, col) = (a * 9 + a, b * 9 + b);
                assert_eq!(c.map.matrix[(r, col)], c.averaged.matrix[(r, col)]);
            }
        }
    }

    #[test]
    fn feeding_part_is_completely_positive() {
        let s = cs();
        for line in Line::BOTH {
            let j = jump_operators(&s, line, nominal(line)).unwrap();
            let choi = feeding_map(&j).choi();
            assert!(min_eigenvalue(&choi) > -1e-12);
        }
    }

    #[test]
    fn qutrit_basis_is_an_isometry_with_orthonormal_operators() {
        let b = QutritBasis::new(TwoJ(8)).unwrap();
        let g = b.embedding.adjoint() * &b.embedding;
        assert!((g - CMat::identity(3, 3)).norm() < 1e-13);
        let spin = SpinMatrices::new(TwoJ(8));
        for (k, m) in [4.0, 3.0, 2.0].into_iter().enumerate() {
            let v = b.ket(k);
            assert!((&spin.x * &v - v.map(|c| c * m)).norm() < 1e-12);
        }
        let mut ops: Vec<CMat> = (0..3).map(|i| b.n(i)).collect();
        ops.extend((0..3).map(|c| b.x(c)));
        for (i, a) in ops.iter().enumerate() {
            assert!((a - a.adjoint()).norm() < 1e-14);
            if i >= 3 {
                assert!(a.trace().norm() < 1e-14);
            }
            for (j, c) in ops.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((trace_product(a, c) - Complex64::new(want, 0.0)).norm() < 1e-13);
            }
        }
        // f_z on the block
        let fz = b.embedding.adjoint() * &spin.z * &b.embedding;
        assert!((fz[(0, 1)].re - 2f64.sqrt()).abs() < 1e-12);
        assert!((fz[(1, 2)].re - 3.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nominal_tables_have_expected_structure() {
        let s = cs();
        let d2 = ColorPumping::build(&s, Line::D2, nominal(Line::D2)).unwrap();
        let d1 = ColorPumping::build(&s, Line::D1, nominal(Line::D1)).unwrap();
        for t in [&d1.tables, &d2.tables] {
            assert!(t.t_nn[0][0] < 0.0, "fiducial population decays");
            assert!(t.t_nn[1][0] > 0.0, "↑ feeds ↓");
            assert!(t.t_xx[UP_DOWN][DOWN_T].abs() > 1e-6, "coherence transfer");
            assert!(t.loss.iter().all(|&l| l >= -1e-14));
            assert!(t.max_imaginary < 1e-12);
            // parity about x: odd coherences do not mix with even operators
            for l in 0..3 {
                assert!(t.t_xn[UP_DOWN][l].abs() < 1e-12 && t.t_xn[DOWN_T][l].abs() < 1e-12);
                assert!(t.t_nx[l][UP_DOWN].abs() < 1e-12 && t.t_nx[l][DOWN_T].abs() < 1e-12);
            }
            assert!(t.t_xx[UP_DOWN][UP_T].abs() < 1e-12 && t.t_xx[DOWN_T][UP_T].abs() < 1e-12);
        }
        // two-color additivity
        let (g1, g2) = (0.3, 0.7);
        let combined = PumpingTables::weighted_sum(&[(g1, &d1.tables), (g2, &d2.tables)]);
        let direct_map = d1.averaged.scaled(g1).add(&d2.averaged.scaled(g2));
        let direct = qutrit_projected_tables(&direct_map, &QutritBasis::new(TwoJ(8)).unwrap());
        for i in 0..3 {
            for l in 0..3 {
                assert!((combined.t_xx[i][l] - direct.t_xx[i][l]).abs() < 1e-12);
                assert!((combined.t_nn[i][l] - direct.t_nn[i][l]).abs() < 1e-12);
                for k in 0..3 {
                    assert!((combined.n_table[i][l][k] - direct.n_table[i][l][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn schroedinger_tables_are_transposes() {
        let s = cs();
        let t = ColorPumping::build(&s, Line::D2, nominal(Line::D2)).unwrap().tables;
        for c in 0..3 {
            for l in 0..3 {
                assert!((t.t_xx_mean[c][l] - t.t_xx[l][c]).abs() < 1e-13);
                assert!((t.t_xn_mean[c][l] - t.t_nx[l][c]).abs() < 1e-13);
            }
        }
    }
}

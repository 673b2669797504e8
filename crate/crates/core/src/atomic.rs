//! Alkali ground/excited-state structure and the irreducible light-shift coefficients.
//!
//! Energies and rates are stored as angular frequencies (rad/s). The hyperfine
//! labels `f`, `f'` are carried doubled (see [`TwoJ`]) so that the same code
//! serves integer and half-integer nuclear spins.
//!
//! The dimensionless raising operator `D†_{f'f}` has matrix elements
//! `o_{j'f'f} <f m; 1 q | f' m'>` with `o² = (2j'+1)(2f+1){j' f' i; f j 1}²`,
//! which makes the total decay of every excited sublevel equal to `Γ_{j'}`.
//! The rank-K coefficients `C^{(K)}_{j'f'f}` are obtained by decomposing the
//! Cartesian tensor `D_a D†_b` on the ground manifold into
//! `C0 δ_ab + i C1 ε_abc f_c + C2 ((f_a f_b + f_b f_a)/2 - δ_ab f²/3)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::angular::{clebsch_gordan, wigner_6j, SpinMatrices, TwoJ};
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const HBAR: f64 = 1.054_571_817e-34;

/// Detunings closer than this many linewidths to a line are rejected.
pub const NEAR_RESONANCE_FLOOR: f64 = 10.0;

const DEFAULT_DATA: &str = include_str!("../data/cesium.toml");

/// The two fine-structure components of the alkali D doublet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Line {
    /// `j' = 1/2`
    D1,
    /// `j' = 3/2`
    D2,
}

impl Line {
    pub const BOTH: [Line; 2] = [Line::D1, Line::D2];

    pub fn two_j(self) -> TwoJ {
        match self {
            Line::D1 => TwoJ(1),
            Line::D2 => TwoJ(3),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Line::D1 => "D1",
            Line::D2 => "D2",
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawExcited {
    label: String,
    j: f64,
    wavelength_nm: f64,
    linewidth_mhz: f64,
    hyperfine_mhz: BTreeMap<String, f64>,
    saturation_intensity_w_m2: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawSpecies {
    name: String,
    version: String,
    nuclear_spin: f64,
    ground_j: f64,
    ground_hyperfine_mhz: BTreeMap<String, f64>,
    excited: Vec<RawExcited>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcitedManifold {
    pub line: Line,
    /// Natural linewidth Γ, rad/s.
    pub linewidth: f64,
    /// Vacuum wavelength, m.
    pub wavelength: f64,
    /// Transition angular frequency 2πc/λ.
    pub omega: f64,
    /// Hyperfine offsets keyed by doubled `f'`, rad/s.
    pub hyperfine: BTreeMap<i32, f64>,
    /// Saturation intensity for unit oscillator strength, W/m².
    pub saturation_intensity: f64,
}

impl ExcitedManifold {
    /// Resonant cross section `3λ²/2π` for unit oscillator strength.
    pub fn cross_section(&self) -> f64 {
        3.0 * self.wavelength * self.wavelength / (2.0 * PI)
    }

    pub fn photon_energy(&self) -> f64 {
        HBAR * self.omega
    }

    pub fn max_f(&self) -> i32 {
        *self.hyperfine.keys().next_back().expect("manifold without hyperfine levels")
    }

    /// Span between the highest and lowest hyperfine level, rad/s.
    pub fn hyperfine_span(&self) -> f64 {
        let lo = self.hyperfine.values().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.hyperfine.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AtomicSpecies {
    pub name: String,
    pub version: String,
    pub two_i: TwoJ,
    pub two_j_ground: TwoJ,
    /// Ground hyperfine offsets keyed by doubled `f`, rad/s.
    pub ground_hyperfine: BTreeMap<i32, f64>,
    pub excited: Vec<ExcitedManifold>,
    /// SHA-256 of the data file text.
    pub checksum: String,
}

fn mhz_to_rad(v: f64) -> f64 {
    2.0 * PI * v * 1e6
}

fn doubled(v: f64, what: &str) -> Result<i32> {
    let d = 2.0 * v;
    if (d - d.round()).abs() > 1e-9 || d < 0.0 {
        return Err(Error::Format(format!("{what} = {v} is not a non-negative half-integer")));
    }
    Ok(d.round() as i32)
}

fn parse_level_map(raw: &BTreeMap<String, f64>, what: &str) -> Result<BTreeMap<i32, f64>> {
    raw.iter()
        .map(|(k, v)| {
            let f: f64 = k
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{what}: bad level label {k:?}")))?;
            Ok((doubled(f, what)?, mhz_to_rad(*v)))
        })
        .collect()
}

impl AtomicSpecies {
    /// The bundled cesium data.
    pub fn cesium() -> Self {
        Self::from_toml_str(DEFAULT_DATA).expect("bundled cesium data is valid")
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawSpecies = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let two_i = TwoJ(doubled(raw.nuclear_spin, "nuclear_spin")?);
        let two_j_ground = TwoJ(doubled(raw.ground_j, "ground_j")?);
        let ground_hyperfine = parse_level_map(&raw.ground_hyperfine_mhz, "ground_hyperfine_mhz")?;
        let mut excited = Vec::new();
        for e in &raw.excited {
            let line = match doubled(e.j, "excited.j")? {
                1 => Line::D1,
                3 => Line::D2,
                other => {
                    return Err(Error::Format(format!(
                        "excited manifold {} has unsupported j' = {}/2",
                        e.label, other
                    )))
                }
            };
            if e.wavelength_nm <= 0.0 || e.linewidth_mhz <= 0.0 {
                return Err(Error::Format(format!(
                    "excited manifold {} needs positive wavelength and linewidth",
                    e.label
                )));
            }
            let hyperfine = parse_level_map(&e.hyperfine_mhz, "hyperfine_mhz")?;
            let two_j = line.two_j().0;
            for &tf in hyperfine.keys() {
                if tf < (two_j - two_i.0).abs() || tf > two_j + two_i.0 {
                    return Err(Error::Format(format!(
                        "{}: f' = {}/2 outside |j'-i| ..= j'+i",
                        e.label, tf
                    )));
                }
            }
            let wavelength = e.wavelength_nm * 1e-9;
            let linewidth = mhz_to_rad(e.linewidth_mhz);
            let omega = 2.0 * PI * SPEED_OF_LIGHT / wavelength;
            let sigma = 3.0 * wavelength * wavelength / (2.0 * PI);
            let saturation_intensity = e
                .saturation_intensity_w_m2
                .unwrap_or(HBAR * omega * linewidth / (2.0 * sigma));
            excited.push(ExcitedManifold {
                line,
                linewidth,
                wavelength,
                omega,
                hyperfine,
                saturation_intensity,
            });
        }
        let checksum = format!("{:x}", Sha256::digest(text.as_bytes()));
        Ok(AtomicSpecies {
            name: raw.name,
            version: raw.version,
            two_i,
            two_j_ground,
            ground_hyperfine,
            excited,
            checksum,
        })
    }

    pub fn manifold(&self, line: Line) -> Result<&ExcitedManifold> {
        self.excited
            .iter()
            .find(|m| m.line == line)
            .ok_or_else(|| Error::InvalidLevel { what: format!("no {} data", line.label()) })
    }

    /// Doubled upper ground hyperfine level `f = i + 1/2`.
    pub fn f_ground(&self) -> TwoJ {
        TwoJ(self.two_i.0 + self.two_j_ground.0)
    }

    fn check_levels(&self, line: Line, two_fp: i32, two_f: i32) -> Result<&ExcitedManifold> {
        let m = self.manifold(line)?;
        if !m.hyperfine.contains_key(&two_fp) {
            return Err(Error::InvalidLevel {
                what: format!("{} has no f' = {}/2", line.label(), two_fp),
            });
        }
        if !self.ground_hyperfine.contains_key(&two_f) {
            return Err(Error::InvalidLevel { what: format!("no ground level f = {}/2", two_f) });
        }
        Ok(m)
    }

    /// `Δ_{j'f'f}` given the effective detuning `Δ_{j'}` from the `f = f_ground → f'_max` line.
    pub fn detuning_to_level(&self, line: Line, two_fp: i32, two_f: i32, delta: f64) -> Result<f64> {
        let m = self.check_levels(line, two_fp, two_f)?;
        let e_ref = m.hyperfine[&m.max_f()] - self.ground_hyperfine[&self.f_ground().0];
        let e_line = m.hyperfine[&two_fp] - self.ground_hyperfine[&two_f];
        Ok(delta + e_ref - e_line)
    }

    /// Excited levels reachable by a dipole transition from ground `f`.
    pub fn coupled_levels(&self, line: Line, two_f: i32) -> Result<Vec<i32>> {
        let m = self.manifold(line)?;
        Ok(m.hyperfine.keys().cloned().filter(|&fp| (fp - two_f).abs() <= 2).collect())
    }

    /// Relative hyperfine dipole strength `o_{j'f'f}` (with a conventional phase).
    pub fn reduced_strength(&self, line: Line, two_fp: i32, two_f: i32) -> Result<f64> {
        self.check_levels(line, two_fp, two_f)?;
        let tjp = line.two_j().0;
        let tj = self.two_j_ground.0;
        let ti = self.two_i.0;
        let sixj = wigner_6j(tjp, two_fp, ti, two_f, tj, 2);
        let phase = if ((two_fp + tj + 2 + ti) / 2) % 2 == 0 { 1.0 } else { -1.0 };
        Ok(phase * (f64::from(tjp + 1) * f64::from(two_f + 1)).sqrt() * sixj)
    }

    /// Spherical components `q = -1, 0, +1` of `D†_{f'f}`; each matrix is
    /// `(2f'+1) × (2f+1)` with rows/cols ordered from the stretched `m` down.
    pub fn dipole_raising_operator(
        &self,
        line: Line,
        two_fp: i32,
        two_f: i32,
    ) -> Result<[DMatrix<f64>; 3]> {
        let o = self.reduced_strength(line, two_fp, two_f)?;
        let fp = TwoJ(two_fp);
        let f = TwoJ(two_f);
        let mut out = [
            DMatrix::zeros(fp.dim(), f.dim()),
            DMatrix::zeros(fp.dim(), f.dim()),
            DMatrix::zeros(fp.dim(), f.dim()),
        ];
        for (qi, q) in [-2, 0, 2].into_iter().enumerate() {
            for (col, tm) in f.projections().enumerate() {
                let tmp = tm + q;
                if tmp.abs() > two_fp {
                    continue;
                }
                let row = fp.index_of(tmp);
                out[qi][(row, col)] = o * clebsch_gordan(two_f, tm, 2, q, two_fp, tmp);
            }
        }
        Ok(out)
    }

    /// Cartesian components `(x, y, z)` of `D†_{f'f}` built from the spherical ones.
    pub fn dipole_raising_cartesian(
        &self,
        line: Line,
        two_fp: i32,
        two_f: i32,
    ) -> Result<[DMatrix<Complex64>; 3]> {
        let [m1, z0, p1] = self.dipole_raising_operator(line, two_fp, two_f)?;
        let c = |m: &DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
        let (m1, z0, p1) = (c(&m1), c(&z0), c(&p1));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let x = (&m1 - &p1).map(|v| v * s);
        let y = (&m1 + &p1).map(|v| v * Complex64::new(0.0, s));
        Ok([x, y, z0])
    }

    /// `(C0, C1, C2)` for the `(j', f', f)` line.
    pub fn coefficients_ck(&self, line: Line, two_fp: i32, two_f: i32) -> Result<[f64; 3]> {
        let d = self.dipole_raising_cartesian(line, two_fp, two_f)?;
        let spin = SpinMatrices::new(TwoJ(two_f));
        Ok(project_rank_decomposition(&d, &spin))
    }

    fn check_resonance(&self, line: Line, two_fp: i32, delta_fp: f64) -> Result<()> {
        let m = self.manifold(line)?;
        if delta_fp.abs() <= NEAR_RESONANCE_FLOOR * m.linewidth {
            return Err(Error::NearResonance {
                line: line.label().into(),
                f_prime: f64::from(two_fp) / 2.0,
                detuning: delta_fp,
                floor: NEAR_RESONANCE_FLOOR,
            });
        }
        Ok(())
    }

    /// Individual detunings of every dipole-coupled `f'` from the upper ground level,
    /// checked against the near-resonance floor.
    pub fn line_detunings(&self, line: Line, delta: f64) -> Result<Vec<(i32, f64)>> {
        let f = self.f_ground().0;
        let mut out = Vec::new();
        for fp in self.coupled_levels(line, f)? {
            let d = self.detuning_to_level(line, fp, f, delta)?;
            self.check_resonance(line, fp, d)?;
            out.push((fp, d));
        }
        Ok(out)
    }

    /// Effective rank-K coefficient `Σ_{f'} C^{(K)}_{j'f'f} Δ_{j'}/Δ_{j'f'f}` for the upper ground level.
    pub fn effective_ck(&self, line: Line, rank: usize, delta: f64) -> Result<f64> {
        if rank > 2 {
            return Err(Error::domain(format!("rank {rank} is not 0, 1 or 2")));
        }
        let f = self.f_ground().0;
        let mut sum = 0.0;
        for (fp, dfp) in self.line_detunings(line, delta)? {
            sum += self.coefficients_ck(line, fp, f)?[rank] * delta / dfp;
        }
        Ok(sum)
    }

    /// Relative hyperfine strength `S_{ff'} = (2f'+1)(2j+1){j j' 1; f' f i}²`;
    /// sums to one over `f'`.
    pub fn relative_line_strength(&self, line: Line, two_fp: i32, two_f: i32) -> Result<f64> {
        self.check_levels(line, two_fp, two_f)?;
        let tj = self.two_j_ground.0;
        let sixj = wigner_6j(tj, line.two_j().0, 2, two_fp, two_f, self.two_i.0);
        Ok(f64::from(two_fp + 1) * f64::from(tj + 1) * sixj * sixj)
    }

    /// `Σ_{f'} S_{ff'} Δ²/Δ_{f'}²`, the near-resonance correction to the scattering
    /// rate. Each line is weighted by its relative strength so the sum tends to one
    /// far from all lines.
    pub fn scattering_line_factor(&self, line: Line, delta: f64) -> Result<f64> {
        let f = self.f_ground().0;
        let mut sum = 0.0;
        for (fp, d) in self.line_detunings(line, delta)? {
            sum += self.relative_line_strength(line, fp, f)? * (delta / d).powi(2);
        }
        Ok(sum)
    }
}

fn hs(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> Complex64 {
    // Tr(a† b)
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Hilbert–Schmidt projection of `T_ab = D_a D†_b` onto the three irreducible parts.
fn project_rank_decomposition(d: &[DMatrix<Complex64>; 3], spin: &SpinMatrices) -> [f64; 3] {
    let f = [&spin.x, &spin.y, &spin.z];
    let n = spin.dim();
    let mut t: Vec<Vec<DMatrix<Complex64>>> = Vec::with_capacity(3);
    for a in 0..3 {
        let mut row = Vec::with_capacity(3);
        for b in 0..3 {
            row.push(d[a].adjoint() * &d[b]);
        }
        t.push(row);
    }
    let trace_sum: DMatrix<Complex64> = &t[0][0] + &t[1][1] + &t[2][2];
    let c0 = trace_sum.trace().re / (3.0 * n as f64);

    // antisymmetric part: (T_xy - T_yx)/2 = i C1 f_z
    let anti = (&t[0][1] - &t[1][0]).map(|v| v * 0.5);
    let c1 = (hs(&spin.z, &anti) / Complex64::i()).re / hs(&spin.z, &spin.z).re;

    let casimir = spin.casimir();
    let ident = DMatrix::<Complex64>::identity(n, n);
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let mut s = (&t[a][b] + &t[b][a]).map(|v| v * 0.5);
            let mut q = (f[a] * f[b] + f[b] * f[a]).map(|v| v * 0.5);
            if a == b {
                s -= &trace_sum.map(|v| v / 3.0);
                q -= ident.map(|v| v * casimir / 3.0);
            }
            num += hs(&q, &s).re;
            den += hs(&q, &q).re;
        }
    }
    [c0, c1, num / den]
}

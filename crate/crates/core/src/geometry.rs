//! Cloud density, Laguerre–Gauss modes, spin-wave weights and projection overlaps.
//!
//! Modes are normalized as `(1/A_m) ∫ |u_pl|² d²r = 1` with `A_m = π w₀²/2`, so
//! `u₀₀` peaks at one and `β₀₀ = |u₀₀|²` is literally `I/I_max`.
//!
//! Two phase conventions are available. [`ModeConvention::Complex`] keeps the
//! full paraxial modes (`e^{ilφ}`, Gouy and wavefront-curvature phases) and is
//! what [`overlap_c`] / [`overlap_g`] evaluate. [`ModeConvention::RealSlice`]
//! drops the slice-constant Gouy phase and the curvature phase (which cancels in
//! every `β_pl = u*_pl u₀₀`) and replaces `e^{±ilφ}` by `√2 cos(lφ)`, `√2 sin(lφ)`.
//! That is a unitary change of basis inside each slice, leaves `β₀₀` untouched,
//! and makes every overlap real; the moment engine uses it.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_laguerre, gauss_legendre, laguerre};

/// Gaussian cloud `η₀ exp(-2r⊥²/w⊥² - 2z²/w_z²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudGeometry {
    pub peak_density: f64,
    pub w_perp: f64,
    pub w_z: f64,
}

impl CloudGeometry {
    pub fn new(peak_density: f64, w_perp: f64, w_z: f64) -> Result<Self> {
        if !(peak_density >= 0.0) || !(w_perp > 0.0) || !(w_z > 0.0) {
            return Err(Error::domain("cloud needs peak density >= 0 and positive radii"));
        }
        Ok(CloudGeometry { peak_density, w_perp, w_z })
    }

    pub fn with_atom_number(n_atoms: f64, w_perp: f64, w_z: f64) -> Result<Self> {
        let unit = CloudGeometry::new(1.0, w_perp, w_z)?;
        CloudGeometry::new(n_atoms / unit.atom_number(), w_perp, w_z)
    }

    /// `N_A = η₀ (π/2)^{3/2} w⊥² w_z`.
    pub fn atom_number(&self) -> f64 {
        self.peak_density * (PI / 2.0).powf(1.5) * self.w_perp * self.w_perp * self.w_z
    }

    pub fn density(&self, r_perp: f64, z: f64) -> f64 {
        self.peak_density
            * (-2.0 * r_perp * r_perp / (self.w_perp * self.w_perp) - 2.0 * z * z / (self.w_z * self.w_z)).exp()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CloudGeometry { peak_density: self.peak_density * factor, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    pub p: u32,
    pub l: i32,
}

impl ModeIndex {
    pub const FUNDAMENTAL: ModeIndex = ModeIndex { p: 0, l: 0 };

    pub fn new(p: u32, l: i32) -> Self {
        ModeIndex { p, l }
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{:+}", self.p, self.l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeConvention {
    Complex,
    RealSlice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub radial_order: usize,
    pub angular_points: usize,
    /// Gauss–Legendre points per slice for longitudinal integrals.
    pub slice_order: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { radial_order: 64, angular_points: 128, slice_order: 16 }
    }
}

impl QuadratureSpec {
    pub fn doubled(&self) -> Self {
        QuadratureSpec {
            radial_order: 2 * self.radial_order,
            angular_points: 2 * self.angular_points,
            slice_order: 2 * self.slice_order,
        }
    }
}

/// Longitudinal slices tiling `[-extent, extent]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub centers: Vec<f64>,
    pub width: f64,
}

impl SliceGrid {
    pub fn covering(extent: f64, count: usize) -> Result<Self> {
        if count == 0 || !(extent > 0.0) {
            return Err(Error::domain("slice grid needs a positive extent and count"));
        }
        let width = 2.0 * extent / count as f64;
        let centers = (0..count).map(|k| -extent + (k as f64 + 0.5) * width).collect();
        Ok(SliceGrid { centers, width })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn bounds(&self, k: usize) -> (f64, f64) {
        let c = self.centers[k];
        (c - 0.5 * self.width, c + 0.5 * self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub waist: f64,
    pub wavelength: f64,
    pub modes: Vec<ModeIndex>,
    pub slices: SliceGrid,
    pub quadrature: QuadratureSpec,
}

impl ModeBasis {
    /// Modes with `p ≤ p_max`, `|l| ≤ l_max`, fundamental first.
    pub fn new(
        waist: f64,
        wavelength: f64,
        p_max: u32,
        l_max: u32,
        slices: SliceGrid,
        quadrature: QuadratureSpec,
    ) -> Result<Self> {
        if !(waist > 0.0) || !(wavelength > 0.0) {
            return Err(Error::domain("mode basis needs positive waist and wavelength"));
        }
        let mut modes = Vec::new();
        for p in 0..=p_max {
            modes.push(ModeIndex::new(p, 0));
            for l in 1..=l_max as i32 {
                modes.push(ModeIndex::new(p, l));
                modes.push(ModeIndex::new(p, -l));
            }
        }
        Ok(ModeBasis { waist, wavelength, modes, slices, quadrature })
    }

    /// Default truncation for a cloud: slices over `±3 w_z`.
    pub fn for_cloud(
        waist: f64,
        wavelength: f64,
        cloud: &CloudGeometry,
        p_max: u32,
        l_max: u32,
        n_slices: usize,
    ) -> Result<Self> {
        let slices = SliceGrid::covering(3.0 * cloud.w_z, n_slices)?;
        ModeBasis::new(waist, wavelength, p_max, l_max, slices, QuadratureSpec::default())
    }

    pub fn rayleigh_range(&self) -> f64 {
        PI * self.waist * self.waist / self.wavelength
    }

    /// Orthonormality area `π w₀²/2`.
    pub fn mode_area(&self) -> f64 {
        0.5 * PI * self.waist * self.waist
    }

    pub fn beam_radius(&self, z: f64) -> f64 {
        let zr = self.rayleigh_range();
        self.waist * (1.0 + (z / zr).powi(2)).sqrt()
    }

    pub fn gouy_phase(&self, z: f64) -> f64 {
        (z / self.rayleigh_range()).atan()
    }

    /// `1/R(z)`, zero at the focus.
    pub fn inverse_curvature(&self, z: f64) -> f64 {
        let zr = self.rayleigh_range();
        z / (z * z + zr * zr)
    }

    pub fn mode_position(&self, m: ModeIndex) -> Option<usize> {
        self.modes.iter().position(|&x| x == m)
    }

    fn check_mode(&self, m: ModeIndex) -> Result<()> {
        if self.mode_position(m).is_none() {
            return Err(Error::domain(format!("mode {m} not in basis")));
        }
        Ok(())
    }

    /// Radial profile without the Gaussian envelope:
    /// `C_pl (w₀/w)(√2 r/w)^{|l|} L_p^{|l|}(2r²/w²)`.
    fn radial_polynomial(&self, m: ModeIndex, r: f64, z: f64) -> f64 {
        let w = self.beam_radius(z);
        let al = m.l.unsigned_abs();
        let s = 2.0 * r * r / (w * w);
        let norm = (ln_gamma_int(m.p as usize) - ln_gamma_int((m.p + al) as usize)).exp().sqrt();
        norm * (self.waist / w) * s.powf(0.5 * al as f64) * laguerre(m.p as usize, al as f64, s)
    }

    fn angular(&self, m: ModeIndex, phi: f64, conv: ModeConvention) -> Complex64 {
        match conv {
            ModeConvention::Complex => Complex64::from_polar(1.0, m.l as f64 * phi),
            ModeConvention::RealSlice => {
                let v = if m.l > 0 {
                    2f64.sqrt() * (m.l as f64 * phi).cos()
                } else if m.l < 0 {
                    2f64.sqrt() * ((-m.l) as f64 * phi).sin()
                } else {
                    1.0
                };
                Complex64::new(v, 0.0)
            }
        }
    }

    /// Mode amplitude at `(r⊥, φ, z)` in the requested convention.
    pub fn amplitude(&self, m: ModeIndex, r: f64, phi: f64, z: f64, conv: ModeConvention) -> Complex64 {
        let w = self.beam_radius(z);
        let radial = self.radial_polynomial(m, r, z) * (-r * r / (w * w)).exp();
        let mut v = self.angular(m, phi, conv) * radial;
        if conv == ModeConvention::Complex {
            let k = 2.0 * PI / self.wavelength;
            let order = (2 * m.p + m.l.unsigned_abs() + 1) as f64;
            let phase = -0.5 * k * r * r * self.inverse_curvature(z) + order * self.gouy_phase(z);
            v *= Complex64::from_polar(1.0, phase);
        }
        v
    }
}

fn ln_gamma_int(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Full paraxial LG amplitude (Gouy and curvature phases included).
pub fn lg_mode_amplitude(basis: &ModeBasis, p: u32, l: i32, r_perp: f64, phi: f64, z: f64) -> Result<Complex64> {
    let m = ModeIndex::new(p, l);
    basis.check_mode(m)?;
    Ok(basis.amplitude(m, r_perp, phi, z, ModeConvention::Complex))
}

/// `β_pl = u*_pl u₀₀`.
pub fn spinwave_weight(basis: &ModeBasis, p: u32, l: i32, r_perp: f64, phi: f64, z: f64) -> Result<Complex64> {
    let u = lg_mode_amplitude(basis, p, l, r_perp, phi, z)?;
    let u0 = basis.amplitude(ModeIndex::FUNDAMENTAL, r_perp, phi, z, ModeConvention::Complex);
    Ok(u.conj() * u0)
}

/// One factor in a transverse product integral.
#[derive(Clone, Copy, Debug)]
struct Factor {
    mode: ModeIndex,
    conj: bool,
}

/// Transverse integral `∫ d²r⊥ ρ(r⊥) Π u(·)` at plane `z`, where `ρ` is an optional
/// Gaussian weight `exp(-2 r²/w_ρ²)`. The radial rule is mapped onto the total
/// Gaussian decay of the integrand so polynomial parts are integrated exactly.
fn transverse_product(
    basis: &ModeBasis,
    factors: &[Factor],
    z: f64,
    weight_radius: Option<f64>,
    conv: ModeConvention,
    rule: &TransverseRule,
) -> Complex64 {
    // angular selection for complex modes
    if conv == ModeConvention::Complex {
        let net: i32 = factors.iter().map(|f| if f.conj { -f.mode.l } else { f.mode.l }).sum();
        if net != 0 {
            return Complex64::new(0.0, 0.0);
        }
    }
    let w = basis.beam_radius(z);
    let mut decay = factors.len() as f64 / (w * w);
    if let Some(wr) = weight_radius {
        decay += 2.0 / (wr * wr);
    }
    // residual curvature phase from unbalanced conjugation
    let k = 2.0 * PI / basis.wavelength;
    let unconj = factors.iter().filter(|f| !f.conj).count() as f64;
    let conj = factors.len() as f64 - unconj;
    let curvature = if conv == ModeConvention::Complex {
        -0.5 * k * basis.inverse_curvature(z) * (unconj - conj)
    } else {
        0.0
    };
    let gouy: f64 = if conv == ModeConvention::Complex {
        factors
            .iter()
            .map(|f| {
                let o = (2 * f.mode.p + f.mode.l.unsigned_abs() + 1) as f64;
                if f.conj {
                    -o
                } else {
                    o
                }
            })
            .sum::<f64>()
            * basis.gouy_phase(z)
    } else {
        0.0
    };

    // angular factor by trapezoid (exact for the trigonometric polynomials involved)
    let mut ang = Complex64::new(0.0, 0.0);
    let na = rule.angular.len();
    for &phi in &rule.angular {
        let mut v = Complex64::new(1.0, 0.0);
        for f in factors {
            let a = basis.angular(f.mode, phi, conv);
            v *= if f.conj { a.conj() } else { a };
        }
        ang += v;
    }
    ang *= 2.0 * PI / na as f64;
    if ang.norm() < 1e-13 {
        return Complex64::new(0.0, 0.0);
    }

    let mut rad = Complex64::new(0.0, 0.0);
    for (&x, &wt) in rule.nodes.iter().zip(&rule.weights) {
        let r = (x / decay).sqrt();
        let mut poly = 1.0;
        for f in factors {
            poly *= basis.radial_polynomial(f.mode, r, z);
        }
        rad += Complex64::from_polar(wt * poly, curvature * r * r);
    }
    // ∫ r dr e^{-decay r²} G = (1/(2 decay)) Σ w G
    rad /= 2.0 * decay;
    ang * rad * Complex64::from_polar(1.0, gouy)
}

#[derive(Clone, Debug)]
struct TransverseRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    angular: Vec<f64>,
}

impl TransverseRule {
    fn new(q: &QuadratureSpec) -> Self {
        let (nodes, weights) = gauss_laguerre(q.radial_order);
        let angular = (0..q.angular_points).map(|i| 2.0 * PI * i as f64 / q.angular_points as f64).collect();
        TransverseRule { nodes, weights, angular }
    }
}

fn fac(mode: ModeIndex, conj: bool) -> Factor {
    Factor { mode, conj }
}

fn c_factors(a: ModeIndex, b: ModeIndex, conv: ModeConvention) -> Vec<Factor> {
    let f0 = ModeIndex::FUNDAMENTAL;
    let _ = conv;
    vec![fac(f0, false), fac(f0, false), fac(a, true), fac(b, true)]
}

fn g_factors(a: ModeIndex, b: ModeIndex, c: ModeIndex) -> Vec<Factor> {
    let f0 = ModeIndex::FUNDAMENTAL;
    // u₀₀ u_c β_a β_b with β = u* u₀₀
    vec![fac(f0, false), fac(c, false), fac(a, true), fac(f0, false), fac(b, true), fac(f0, false)]
}

/// `c^{pl}_{p'l'}(z) = (1/A) ∫ u₀₀² u*_pl u*_{p'l'}` with complex modes.
pub fn overlap_c(basis: &ModeBasis, a: ModeIndex, b: ModeIndex, z: f64) -> Result<Complex64> {
    basis.check_mode(a)?;
    basis.check_mode(b)?;
    let rule = TransverseRule::new(&basis.quadrature);
    Ok(transverse_product(basis, &c_factors(a, b, ModeConvention::Complex), z, None, ModeConvention::Complex, &rule)
        / basis.mode_area())
}

/// `g^{pl p'l'}_{p''l''}(z) = (1/A) ∫ u₀₀ u_{p''l''} β_pl β_{p'l'}` with complex modes.
pub fn overlap_g(basis: &ModeBasis, a: ModeIndex, b: ModeIndex, c: ModeIndex, z: f64) -> Result<Complex64> {
    for m in [a, b, c] {
        basis.check_mode(m)?;
    }
    let rule = TransverseRule::new(&basis.quadrature);
    Ok(transverse_product(basis, &g_factors(a, b, c), z, None, ModeConvention::Complex, &rule) / basis.mode_area())
}

/// `(1/A) ∫ u*_a u_b` at plane `z`.
pub fn mode_inner_product(basis: &ModeBasis, a: ModeIndex, b: ModeIndex, z: f64, conv: ModeConvention) -> Complex64 {
    let rule = TransverseRule::new(&basis.quadrature);
    transverse_product(basis, &[fac(a, true), fac(b, false)], z, None, conv, &rule) / basis.mode_area()
}

/// `∫ dz ∫ d²r⊥ η(r) F(r)` over `[z0, z1]` with Gauss–Legendre in `z`.
fn slice_integral(
    basis: &ModeBasis,
    cloud: &CloudGeometry,
    factors: &[Factor],
    z0: f64,
    z1: f64,
    conv: ModeConvention,
    rule: &TransverseRule,
) -> Complex64 {
    let (xs, ws) = gauss_legendre(basis.quadrature.slice_order);
    let half = 0.5 * (z1 - z0);
    let mid = 0.5 * (z1 + z0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (x, w) in xs.iter().zip(&ws) {
        let z = mid + half * x;
        let axial = cloud.peak_density * (-2.0 * z * z / (cloud.w_z * cloud.w_z)).exp();
        acc += transverse_product(basis, factors, z, Some(cloud.w_perp), conv, rule) * (axial * w * half);
    }
    acc
}

/// `N_K = ∫ d³r η |u₀₀|^{2K}` over the slice span.
pub fn effective_atom_number(cloud: &CloudGeometry, basis: &ModeBasis, k: u32) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::domain(format!("effective atom number order {k} not in 1..=3")));
    }
    let rule = TransverseRule::new(&basis.quadrature);
    let f0 = ModeIndex::FUNDAMENTAL;
    let mut factors = Vec::new();
    for _ in 0..k {
        factors.push(fac(f0, false));
        factors.push(fac(f0, true));
    }
    let mut total = 0.0;
    for s in 0..basis.slices.len() {
        let (z0, z1) = basis.slices.bounds(s);
        total += slice_integral(basis, cloud, &factors, z0, z1, ModeConvention::RealSlice, &rule).re;
    }
    Ok(total)
}

/// Precomputed per-slice projection data for the moment engine.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapTables {
    pub convention: ModeConvention,
    pub modes: Vec<ModeIndex>,
    pub n_slices: usize,
    pub quadrature: QuadratureSpec,
    /// `c[k][a][b]`, flattened as `(k * M + a) * M + b`.
    pub c: Vec<Complex64>,
    /// `g[k][a][b][c]`, flattened as `((k * M + a) * M + b) * M + c`.
    pub g: Vec<Complex64>,
    /// `∫_slice η β_a`, flattened as `k * M + a`.
    pub population: Vec<Complex64>,
    /// `∫_slice η β_a β_b`, flattened as `(k * M + a) * M + b`.
    pub pair: Vec<Complex64>,
}

impl OverlapTables {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn c(&self, k: usize, a: usize, b: usize) -> Complex64 {
        let m = self.n_modes();
        self.c[(k * m + a) * m + b]
    }

    pub fn g(&self, k: usize, a: usize, b: usize, c: usize) -> Complex64 {
        let m = self.n_modes();
        self.g[((k * m + a) * m + b) * m + c]
    }

    pub fn population(&self, k: usize, a: usize) -> Complex64 {
        self.population[k * self.n_modes() + a]
    }

    pub fn pair(&self, k: usize, a: usize, b: usize) -> Complex64 {
        let m = self.n_modes();
        self.pair[(k * m + a) * m + b]
    }

    /// Largest imaginary part anywhere in the tables.
    pub fn max_imaginary(&self) -> f64 {
        self.c
            .iter()
            .chain(&self.g)
            .chain(&self.population)
            .chain(&self.pair)
            .fold(0.0f64, |a, v| a.max(v.im.abs()))
    }

    /// Discrete atoms, one per slice, each seeing the fundamental weight `β_n`.
    /// Exact for a handful of atoms: `c = β_n`, `g = β_n²`.
    pub fn point_atoms(betas: &[f64]) -> Self {
        let c = |v: f64| Complex64::new(v, 0.0);
        OverlapTables {
            convention: ModeConvention::RealSlice,
            modes: vec![ModeIndex::FUNDAMENTAL],
            n_slices: betas.len(),
            quadrature: QuadratureSpec::default(),
            c: betas.iter().map(|&b| c(b)).collect(),
            g: betas.iter().map(|&b| c(b * b)).collect(),
            population: betas.iter().map(|&b| c(b)).collect(),
            pair: betas.iter().map(|&b| c(b * b)).collect(),
        }
    }

    /// Keep only the modes accepted by `keep` (the fundamental must survive).
    pub fn restricted(&self, keep: impl Fn(ModeIndex) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n_modes()).filter(|&a| keep(self.modes[a])).collect();
        if idx.first().map(|&a| self.modes[a]) != Some(ModeIndex::FUNDAMENTAL) {
            return Err(Error::domain("mode restriction must keep the fundamental mode first"));
        }
        let mut out = OverlapTables {
            convention: self.convention,
            modes: idx.iter().map(|&a| self.modes[a]).collect(),
            n_slices: self.n_slices,
            quadrature: self.quadrature,
            c: Vec::new(),
            g: Vec::new(),
            population: Vec::new(),
            pair: Vec::new(),
        };
        for k in 0..self.n_slices {
            for &a in &idx {
                out.population.push(self.population(k, a));
                for &b in &idx {
                    out.c.push(self.c(k, a, b));
                    out.pair.push(self.pair(k, a, b));
                    for &cc in &idx {
                        out.g.push(self.g(k, a, b, cc));
                    }
                }
            }
        }
        Ok(out)
    }

    /// `Σ_k ∫ η β₀₀^K` recovered from the tables (K = 1, 2).
    pub fn fundamental_number(&self, k: u32) -> f64 {
        (0..self.n_slices)
            .map(|s| if k == 1 { self.population(s, 0).re } else { self.pair(s, 0, 0).re })
            .sum()
    }

    /// Tables for the same cloud shape at `factor` times the density. Only the
    /// density integrals change; `c` and `g` are pure mode geometry.
    pub fn density_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.population.iter_mut().chain(out.pair.iter_mut()).for_each(|v| *v *= factor);
        out
    }

    /// Build all tables. Parallel over slices.
    pub fn build(basis: &ModeBasis, cloud: &CloudGeometry, conv: ModeConvention) -> Self {
        let m = basis.modes.len();
        let rule = TransverseRule::new(&basis.quadrature);
        let area = basis.mode_area();
        let f0 = ModeIndex::FUNDAMENTAL;
        let per_slice: Vec<_> = (0..basis.slices.len())
            .into_par_iter()
            .map(|k| {
                let z = basis.slices.centers[k];
                let (z0, z1) = basis.slices.bounds(k);
                let mut c = vec![Complex64::new(0.0, 0.0); m * m];
                let mut pair = vec![Complex64::new(0.0, 0.0); m * m];
                let mut g = vec![Complex64::new(0.0, 0.0); m * m * m];
                let mut pop = vec![Complex64::new(0.0, 0.0); m];
                for (a, &ma) in basis.modes.iter().enumerate() {
                    pop[a] = slice_integral(basis, cloud, &[fac(ma, true), fac(f0, false)], z0, z1, conv, &rule);
                    for (b, &mb) in basis.modes.iter().enumerate() {
                        c[a * m + b] = transverse_product(basis, &c_factors(ma, mb, conv), z, None, conv, &rule) / area;
                        pair[a * m + b] = slice_integral(
                            basis,
                            cloud,
                            &[fac(ma, true), fac(f0, false), fac(mb, true), fac(f0, false)],
                            z0,
                            z1,
                            conv,
                            &rule,
                        );
                        for (cc, &mc) in basis.modes.iter().enumerate() {
                            g[(a * m + b) * m + cc] =
                                transverse_product(basis, &g_factors(ma, mb, mc), z, None, conv, &rule) / area;
                        }
                    }
                }
                (c, g, pop, pair)
            })
            .collect();
        let mut out = OverlapTables {
            convention: conv,
            modes: basis.modes.clone(),
            n_slices: basis.slices.len(),
            quadrature: basis.quadrature,
            c: Vec::with_capacity(per_slice.len() * m * m),
            g: Vec::with_capacity(per_slice.len() * m * m * m),
            population: Vec::with_capacity(per_slice.len() * m),
            pair: Vec::with_capacity(per_slice.len() * m * m),
        };
        for (c, g, pop, pair) in per_slice {
            out.c.extend(c);
            out.g.extend(g);
            out.population.extend(pop);
            out.pair.extend(pair);
        }
        out
    }
}

const CACHE_MAGIC: &[u8; 8] = b"SSQTBL\0\0";
const CACHE_VERSION: u32 = 1;

/// Content key for a table build: basis, cloud shape and convention.
pub fn table_hash(basis: &ModeBasis, cloud: &CloudGeometry, conv: ModeConvention) -> String {
    let text = serde_json::to_string(&(basis, cloud, conv, CACHE_VERSION)).expect("serializable");
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// Binary cache layout (all little-endian):
/// magic `SSQTBL\0\0`, `u32` version, 64-byte ASCII hex hash, `u32` modes `M`,
/// `u32` slices `K`, `u8` convention (0 complex, 1 real-slice), then the mode list
/// as `M` pairs of (`u32` p, `i32` l), then `f64` (re, im) pairs for `c`, `g`,
/// `population`, `pair` in their documented flattened order.
pub fn write_table_cache(path: &Path, hash: &str, t: &OverlapTables) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let hb = hash.as_bytes();
    if hb.len() != 64 {
        return Err(Error::Format("table hash must be 64 hex characters".into()));
    }
    buf.extend_from_slice(hb);
    buf.extend_from_slice(&(t.modes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.n_slices as u32).to_le_bytes());
    buf.push(match t.convention {
        ModeConvention::Complex => 0,
        ModeConvention::RealSlice => 1,
    });
    for m in &t.modes {
        buf.extend_from_slice(&m.p.to_le_bytes());
        buf.extend_from_slice(&m.l.to_le_bytes());
    }
    for v in t.c.iter().chain(&t.g).chain(&t.population).chain(&t.pair) {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a cache file; `Ok(None)` if the stored hash differs from `hash`.
pub fn read_table_cache(path: &Path, hash: &str, quadrature: QuadratureSpec) -> Result<Option<OverlapTables>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Format("truncated table cache".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(Error::Format("not a table cache file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Ok(None);
    }
    if take(64)? != hash.as_bytes() {
        return Ok(None);
    }
    let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let convention = match take(1)?[0] {
        0 => ModeConvention::Complex,
        1 => ModeConvention::RealSlice,
        other => return Err(Error::Format(format!("unknown convention tag {other}"))),
    };
    let mut modes = Vec::with_capacity(m);
    for _ in 0..m {
        let p = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let l = i32::from_le_bytes(take(4)?.try_into().unwrap());
        modes.push(ModeIndex { p, l });
    }
    let mut read_block = |n: usize| -> Result<Vec<Complex64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let re = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let im = f64::from_le_bytes(take(8)?.try_into().unwrap());
            v.push(Complex64::new(re, im));
        }
        Ok(v)
    };
    let c = read_block(k * m * m)?;
    let g = read_block(k * m * m * m)?;
    let population = read_block(k * m)?;
    let pair = read_block(k * m * m)?;
    Ok(Some(OverlapTables { convention, modes, n_slices: k, quadrature, c, g, population, pair }))
}

/// Load tables from `cache_dir` when a matching file exists, otherwise build and store.
pub fn cached_tables(
    basis: &ModeBasis,
    cloud: &CloudGeometry,
    conv: ModeConvention,
    cache_dir: Option<&Path>,
) -> Result<(OverlapTables, String)> {
    let hash = table_hash(basis, cloud, conv);
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("overlap-{}.bin", &hash[..16]));
        if path.exists() {
            if let Some(t) = read_table_cache(&path, &hash, basis.quadrature)? {
                return Ok((t, hash));
            }
        }
        let t = OverlapTables::build(basis, cloud, conv);
        std::fs::create_dir_all(dir)?;
        write_table_cache(&path, &hash, &t)?;
        return Ok((t, hash));
    }
    Ok((OverlapTables::build(basis, cloud, conv), hash))
}

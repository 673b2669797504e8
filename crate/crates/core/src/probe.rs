//! Per-color probe physics and the two-color design problem.
//!
//! All rates are angular (rad/s or 1/s). The Faraday angle uses the
//! characteristic probe area `π w₀²`; local intensities enter only through the
//! relative weight `β = I/I_max`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomic::{AtomicSpecies, Line};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeColor {
    pub line: Line,
    /// Effective detuning from the `f=4 → f'_max` line, rad/s.
    pub detuning: f64,
    /// Power, W.
    pub power: f64,
    /// `e⁻²` intensity radius at the focus, m.
    pub waist: f64,
}

impl ProbeColor {
    pub fn new(line: Line, detuning: f64, power: f64, waist: f64) -> Result<Self> {
        if !(power >= 0.0) || !power.is_finite() {
            return Err(Error::domain(format!("probe power must be >= 0, got {power}")));
        }
        if !(waist > 0.0) || !waist.is_finite() {
            return Err(Error::domain(format!("probe waist must be > 0, got {waist}")));
        }
        if !detuning.is_finite() || detuning == 0.0 {
            return Err(Error::domain("probe detuning must be finite and nonzero"));
        }
        Ok(ProbeColor { line, detuning, power, waist })
    }

    pub fn with_power(self, power: f64) -> Self {
        ProbeColor { power, ..self }
    }

    pub fn with_line(self, line: Line) -> Self {
        ProbeColor { line, ..self }
    }

    /// Photons per second, `P/ħω`.
    pub fn photon_flux(&self, species: &AtomicSpecies) -> Result<f64> {
        Ok(self.power / species.manifold(self.line)?.photon_energy())
    }

    /// Peak intensity of a TEM₀₀ beam, `2P/(π w₀²)`.
    pub fn peak_intensity(&self) -> f64 {
        2.0 * self.power / (PI * self.waist * self.waist)
    }

    /// Area entering the Faraday angle.
    pub fn faraday_area(&self) -> f64 {
        PI * self.waist * self.waist
    }
}

/// `χ = -C^{(1)} (σ/A) Γ/(2Δ)`, rad per unit `f_z`.
pub fn faraday_angle(species: &AtomicSpecies, color: &ProbeColor) -> Result<f64> {
    let m = species.manifold(color.line)?;
    let c1 = species.effective_ck(color.line, 1, color.detuning)?;
    Ok(-c1 * m.cross_section() / color.faraday_area() * m.linewidth / (2.0 * color.detuning))
}

/// `C^{(2)} V` at local intensity `β I_max`, rad/s: the coefficient of `f_x²` in
/// the tensor light shift (divide by ħ already applied).
pub fn tensor_shift_strength(species: &AtomicSpecies, color: &ProbeColor, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let m = species.manifold(color.line)?;
    let c2 = species.effective_ck(color.line, 2, color.detuning)?;
    let s = beta * color.peak_intensity() / m.saturation_intensity;
    Ok(c2 * m.linewidth / 8.0 * s * m.linewidth / color.detuning)
}

/// Photon scattering rate at local intensity `β I_max` for unit line strength.
pub fn scattering_rate(species: &AtomicSpecies, color: &ProbeColor, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let m = species.manifold(color.line)?;
    let factor = species.scattering_line_factor(color.line, color.detuning)?;
    let flux_density = m.cross_section() * beta * color.peak_intensity() / m.photon_energy();
    Ok(flux_density * m.linewidth * m.linewidth / (4.0 * color.detuning * color.detuning) * factor)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("intensity ratio {beta} outside [0, 1]")));
    }
    Ok(())
}

/// Derived per-color quantities at peak intensity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ColorQuantities {
    pub chi: f64,
    pub flux: f64,
    pub gamma: f64,
    pub tensor_shift: f64,
    /// `η = ħω χ Ṅ`
    pub eta: f64,
    /// `(ħω)² Ṅ`, the shot-noise scale of the detected signal.
    pub shot_noise_scale: f64,
    /// `χ² Ṅ`
    pub kappa: f64,
}

impl ColorQuantities {
    pub fn evaluate(species: &AtomicSpecies, color: &ProbeColor) -> Result<Self> {
        let m = species.manifold(color.line)?;
        let hw = m.photon_energy();
        let chi = faraday_angle(species, color)?;
        let flux = color.photon_flux(species)?;
        Ok(ColorQuantities {
            chi,
            flux,
            gamma: scattering_rate(species, color, 1.0)?,
            tensor_shift: tensor_shift_strength(species, color, 1.0)?,
            eta: hw * chi * flux,
            shot_noise_scale: hw * hw * flux,
            kappa: chi * chi * flux,
        })
    }
}

/// Single-color `(r, r_max)` for a window `T` and initial `ΔF_z²`.
pub fn single_color_measurement_strength(
    species: &AtomicSpecies,
    color: &ProbeColor,
    t: f64,
    var_fz: f64,
) -> Result<(f64, f64)> {
    if !(t > 0.0) || !(var_fz > 0.0) {
        return Err(Error::domain("measurement window and variance must be positive"));
    }
    let q = ColorQuantities::evaluate(species, color)?;
    if q.shot_noise_scale == 0.0 {
        return Err(Error::domain("probe power is zero"));
    }
    let r = q.eta * q.eta * t * var_fz / q.shot_noise_scale;
    let r_max = q.eta * q.eta * var_fz / (q.shot_noise_scale * q.gamma);
    Ok((r, r_max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoColorProbe {
    pub d1: ProbeColor,
    pub d2: ProbeColor,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TwoColorSummary {
    pub d1: ColorQuantities,
    pub d2: ColorQuantities,
    pub gamma_total: f64,
    pub kappa_meas: f64,
    pub cancellation_residual: f64,
    pub r_over_rmax: f64,
}

impl TwoColorProbe {
    pub fn new(d1: ProbeColor, d2: ProbeColor) -> Result<Self> {
        if d1.line != Line::D1 || d2.line != Line::D2 {
            return Err(Error::domain("two-color probe needs a D1 and a D2 component"));
        }
        Ok(TwoColorProbe { d1, d2 })
    }

    pub fn colors(&self) -> [&ProbeColor; 2] {
        [&self.d1, &self.d2]
    }

    pub fn active_colors(&self) -> impl Iterator<Item = &ProbeColor> {
        self.colors().into_iter().filter(|c| c.power > 0.0)
    }

    fn check_active(&self) -> Result<()> {
        if self.d1.power <= 0.0 && self.d2.power <= 0.0 {
            return Err(Error::domain("both probe powers are zero"));
        }
        Ok(())
    }

    /// Peak scattering rate summed over colors.
    pub fn total_scattering_rate(&self, species: &AtomicSpecies) -> Result<f64> {
        Ok(scattering_rate(species, &self.d1, 1.0)? + scattering_rate(species, &self.d2, 1.0)?)
    }

    pub fn summary(&self, species: &AtomicSpecies) -> Result<TwoColorSummary> {
        self.check_active()?;
        let d1 = ColorQuantities::evaluate(species, &self.d1)?;
        let d2 = ColorQuantities::evaluate(species, &self.d2)?;
        Ok(TwoColorSummary {
            d1,
            d2,
            gamma_total: d1.gamma + d2.gamma,
            kappa_meas: effective_measurement_rate(species, self)?,
            cancellation_residual: cancellation_residual(d1.tensor_shift, d2.tensor_shift),
            r_over_rmax: two_color_strength_ratio(species, self)?,
        })
    }
}

/// `|Σ C²V| / Σ |C²V|`, zero for perfect cancellation.
pub fn cancellation_residual(shift_d1: f64, shift_d2: f64) -> f64 {
    let den = shift_d1.abs() + shift_d2.abs();
    if den == 0.0 {
        0.0
    } else {
        (shift_d1 + shift_d2).abs() / den
    }
}

/// Two-color measurement strength over the single-color maximum of the
/// reference color (D2 unless it is dark), with the window `1/(γ₁+γ₃)`.
pub fn two_color_strength_ratio(species: &AtomicSpecies, probe: &TwoColorProbe) -> Result<f64> {
    probe.check_active()?;
    let a = ColorQuantities::evaluate(species, &probe.d1)?;
    let b = ColorQuantities::evaluate(species, &probe.d2)?;
    let reference = if probe.d2.power > 0.0 { b } else { a };
    let r = (a.eta + b.eta).powi(2) / ((a.shot_noise_scale + b.shot_noise_scale) * (a.gamma + b.gamma));
    let r_max = reference.eta * reference.eta / (reference.shot_noise_scale * reference.gamma);
    Ok(r / r_max)
}

/// `P₁/₂ / P₃/₂` that makes the peak tensor shifts cancel.
pub fn cancellation_operating_point(
    species: &AtomicSpecies,
    delta_d1: f64,
    delta_d2: f64,
) -> Result<f64> {
    // Both shifts are linear in power, so evaluate them per watt.
    let unit1 = ProbeColor::new(Line::D1, delta_d1, 1.0, 1.0)?;
    let unit2 = ProbeColor::new(Line::D2, delta_d2, 1.0, 1.0)?;
    let s1 = tensor_shift_strength(species, &unit1, 1.0)?;
    let s2 = tensor_shift_strength(species, &unit2, 1.0)?;
    if s1 == 0.0 || s2 == 0.0 || s1.signum() == s2.signum() {
        return Err(Error::Uncancellable);
    }
    Ok(-s2 / s1)
}

/// `[Σ sgn(χ) √(Ṅ κ)]² / Σ Ṅ` over the active colors.
pub fn effective_measurement_rate(species: &AtomicSpecies, probe: &TwoColorProbe) -> Result<f64> {
    probe.check_active()?;
    let mut amp = 0.0;
    let mut flux = 0.0;
    for c in probe.active_colors() {
        let chi = faraday_angle(species, c)?;
        let n = c.photon_flux(species)?;
        let kappa = chi * chi * n;
        amp += chi.signum() * (n * kappa).sqrt();
        flux += n;
    }
    Ok(amp * amp / flux)
}

/// Relative sign of the two detunings in a scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetuningSign {
    Opposite,
    Same,
}

impl DetuningSign {
    pub const BOTH: [DetuningSign; 2] = [DetuningSign::Opposite, DetuningSign::Same];

    pub fn factor(self) -> f64 {
        match self {
            DetuningSign::Opposite => -1.0,
            DetuningSign::Same => 1.0,
        }
    }
}

/// A point in the `(Δ₁/₂/Δ₃/₂, P₁/₂/P₃/₂)` plane at fixed `Δ₃/₂` and waist.
#[derive(Clone, Copy, Debug)]
pub struct DesignPlane<'a> {
    pub species: &'a AtomicSpecies,
    pub delta_d2: f64,
    pub waist: f64,
}

impl<'a> DesignPlane<'a> {
    pub fn probe(&self, delta_ratio: f64, power_ratio: f64) -> Result<TwoColorProbe> {
        // The ratio landscape is power-scale free; 1 W on D2 is a convenient unit.
        TwoColorProbe::new(
            ProbeColor::new(Line::D1, delta_ratio * self.delta_d2, power_ratio, self.waist)?,
            ProbeColor::new(Line::D2, self.delta_d2, 1.0, self.waist)?,
        )
    }

    /// `(r/r_max, cancellation residual)` at a signed detuning ratio.
    pub fn evaluate(&self, delta_ratio: f64, power_ratio: f64) -> Result<(f64, f64)> {
        let p = self.probe(delta_ratio, power_ratio)?;
        let r = two_color_strength_ratio(self.species, &p)?;
        let s1 = tensor_shift_strength(self.species, &p.d1, 1.0)?;
        let s2 = tensor_shift_strength(self.species, &p.d2, 1.0)?;
        Ok((r, cancellation_residual(s1, s2)))
    }

    /// `r/r_max` with the D1 power fixed by tensor-shift cancellation.
    pub fn cancelled(&self, delta_ratio: f64) -> Result<(f64, f64)> {
        let x = cancellation_operating_point(self.species, delta_ratio * self.delta_d2, self.delta_d2)?;
        Ok((self.evaluate(delta_ratio, x)?.0, x))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanSpec {
    pub delta_ratio_min: f64,
    pub delta_ratio_max: f64,
    pub n_delta: usize,
    pub power_ratio_min: f64,
    pub power_ratio_max: f64,
    pub n_power: usize,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            delta_ratio_min: 0.2,
            delta_ratio_max: 5.0,
            n_delta: 60,
            power_ratio_min: 0.01,
            power_ratio_max: 2.0,
            n_power: 60,
        }
    }
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_ratio_min > 0.0 && self.delta_ratio_max > self.delta_ratio_min) {
            return Err(Error::domain("detuning-ratio range must satisfy 0 < min < max"));
        }
        if !(self.power_ratio_min > 0.0 && self.power_ratio_max > self.power_ratio_min) {
            return Err(Error::domain("power-ratio range must satisfy 0 < min < max"));
        }
        if self.n_delta < 2 || self.n_power < 2 {
            return Err(Error::domain("scan needs at least 2 points per axis"));
        }
        Ok(())
    }

    /// Detuning-ratio magnitudes, log-spaced.
    pub fn delta_axis(&self) -> Vec<f64> {
        let (a, b) = (self.delta_ratio_min.ln(), self.delta_ratio_max.ln());
        (0..self.n_delta)
            .map(|i| (a + (b - a) * i as f64 / (self.n_delta - 1) as f64).exp())
            .collect()
    }

    pub fn power_axis(&self) -> Vec<f64> {
        let (a, b) = (self.power_ratio_min, self.power_ratio_max);
        (0..self.n_power).map(|i| a + (b - a) * i as f64 / (self.n_power - 1) as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScanCell {
    /// Signed `Δ₁/₂/Δ₃/₂`.
    pub delta_ratio: f64,
    pub power_ratio: f64,
    /// `None` where a color sits within the near-resonance floor.
    pub r_over_rmax: Option<f64>,
    pub cancellation_residual: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrengthScan {
    pub sign: DetuningSign,
    pub spec: ScanSpec,
    /// Row-major: detuning ratio outer, power ratio inner.
    pub cells: Vec<ScanCell>,
}

impl StrengthScan {
    pub fn best_cell(&self) -> Option<&ScanCell> {
        self.cells
            .iter()
            .filter(|c| c.r_over_rmax.is_some())
            .max_by(|a, b| a.r_over_rmax.partial_cmp(&b.r_over_rmax).unwrap())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta_ratio,power_ratio,r_over_rmax,cancellation_residual\n");
        for c in &self.cells {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
            s.push_str(&format!(
                "{:.12e},{:.12e},{},{}\n",
                c.delta_ratio,
                c.power_ratio,
                fmt(c.r_over_rmax),
                fmt(c.cancellation_residual)
            ));
        }
        s
    }
}

/// Dense grid over the detuning/power ratios for one sign combination.
pub fn scan_strength(plane: &DesignPlane, sign: DetuningSign, spec: &ScanSpec) -> Result<StrengthScan> {
    spec.validate()?;
    let deltas = spec.delta_axis();
    let powers = spec.power_axis();
    let cells: Vec<ScanCell> = deltas
        .par_iter()
        .flat_map_iter(|&d| {
            let d = sign.factor() * d;
            powers.iter().map(move |&x| match plane.evaluate(d, x) {
                Ok((r, res)) => ScanCell {
                    delta_ratio: d,
                    power_ratio: x,
                    r_over_rmax: Some(r),
                    cancellation_residual: Some(res),
                },
                Err(_) => ScanCell { delta_ratio: d, power_ratio: x, r_over_rmax: None, cancellation_residual: None },
            })
        })
        .collect();
    Ok(StrengthScan { sign, spec: spec.clone(), cells })
}

/// Maximize a unimodal function on `[a, b]` by golden-section search.
pub fn golden_section_max<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Operating point on the tensor-cancelled line of the design plane.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DesignOptimum {
    pub sign: DetuningSign,
    /// Signed `Δ₁/₂/Δ₃/₂`.
    pub delta_ratio: f64,
    pub power_ratio: f64,
    pub r_over_rmax: f64,
    pub r_over_rmax_squared: f64,
}

/// Best measurement strength along the cancellation line `P₁/₂(Δ₁/₂)` for one
/// sign: dense sampling of the detuning magnitude, then golden-section refinement
/// around the best sample. `None` if cancellation is impossible throughout.
pub fn cancelled_optimum(
    plane: &DesignPlane,
    sign: DetuningSign,
    spec: &ScanSpec,
) -> Result<Option<DesignOptimum>> {
    spec.validate()?;
    let axis = spec.delta_axis();
    let value = |m: f64| plane.cancelled(sign.factor() * m).map(|(r, _)| r).ok();
    let samples: Vec<Option<f64>> = axis.iter().map(|&m| value(m)).collect();
    let Some((best, _)) = samples
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    else {
        return Ok(None);
    };
    let lo = axis[best.saturating_sub(1)].ln();
    let hi = axis[(best + 1).min(axis.len() - 1)].ln();
    let m = golden_section_max(|u| value(u.exp()).unwrap_or(f64::NEG_INFINITY), lo, hi, 1e-10).exp();
    let (m, r) = match value(m) {
        Some(r) if r >= samples[best].unwrap() => (m, r),
        _ => (axis[best], samples[best].unwrap()),
    };
    let d = sign.factor() * m;
    let (_, x) = plane.cancelled(d)?;
    Ok(Some(DesignOptimum { sign, delta_ratio: d, power_ratio: x, r_over_rmax: r, r_over_rmax_squared: r * r }))
}

/// The better of the two sign combinations along the cancellation line.
pub fn design_optimum(plane: &DesignPlane, spec: &ScanSpec) -> Result<DesignOptimum> {
    let mut best: Option<DesignOptimum> = None;
    for sign in DetuningSign::BOTH {
        if let Some(o) = cancelled_optimum(plane, sign, spec)? {
            if best.map_or(true, |b| o.r_over_rmax > b.r_over_rmax) {
                best = Some(o);
            }
        }
    }
    best.ok_or(Error::Uncancellable)
}

/// Unconstrained grid maximum refined by alternating golden-section searches
/// on each axis (log detuning magnitude, linear power ratio).
pub fn refined_grid_optimum(plane: &DesignPlane, scan: &StrengthScan) -> Result<ScanCell> {
    let start = *scan.best_cell().ok_or_else(|| Error::domain("scan has no valid cell"))?;
    let sign = scan.sign.factor();
    let spec = &scan.spec;
    let f = |m: f64, x: f64| plane.evaluate(sign * m, x).map(|v| v.0).unwrap_or(f64::NEG_INFINITY);
    let step_d = (spec.delta_ratio_max / spec.delta_ratio_min).ln() / (spec.n_delta - 1) as f64;
    let step_p = (spec.power_ratio_max - spec.power_ratio_min) / (spec.n_power - 1) as f64;
    let mut m = start.delta_ratio.abs();
    let mut x = start.power_ratio;
    for _ in 0..8 {
        let lo = (m.ln() - step_d).max(spec.delta_ratio_min.ln());
        let hi = (m.ln() + step_d).min(spec.delta_ratio_max.ln());
        let mm = golden_section_max(|u| f(u.exp(), x), lo, hi, 1e-11).exp();
        if f(mm, x) >= f(m, x) {
            m = mm;
        }
        let lo = (x - step_p).max(spec.power_ratio_min);
        let hi = (x + step_p).min(spec.power_ratio_max);
        let xx = golden_section_max(|p| f(m, p), lo, hi, 1e-11);
        if f(m, xx) >= f(m, x) {
            x = xx;
        }
    }
    let (r, res) = plane.evaluate(sign * m, x)?;
    Ok(ScanCell { delta_ratio: sign * m, power_ratio: x, r_over_rmax: Some(r), cancellation_residual: Some(res) })
}

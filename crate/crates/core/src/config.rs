//! Run configuration: a TOML file where every physical quantity is a string with
//! an explicit unit (`"16 um"`, `"-580 gamma_d2"`, `"35 us"`). [`validate_config`]
//! resolves it to SI units and reports every problem at once.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::MeanSpinConvention;
use crate::atomic::{AtomicSpecies, Line};
use crate::dynamics::MomentModel;
use crate::error::{Error, Result};
use crate::geometry::{cached_tables, CloudGeometry, ModeBasis, ModeConvention, QuadratureSpec, SliceGrid};
use crate::probe::{cancellation_operating_point, design_optimum, DesignPlane, ProbeColor, ScanSpec, TwoColorProbe};

pub const NOMINAL_TOML: &str = include_str!("../data/nominal.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `"builtin:cesium"` or a path to a species TOML file.
    pub atomic: String,
    pub output_dir: String,
    pub probe: ProbeSection,
    pub cloud: CloudSection,
    pub basis: BasisSection,
    pub integration: IntegrationSection,
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub fig1b: Fig1bSection,
    #[serde(default)]
    pub fig1c: Fig1cSection,
    #[serde(default)]
    pub fig2: Fig2Section,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub delta_d2: String,
    pub delta_d1: String,
    pub power_ratio: PowerRatio,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_d2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_anchor: Option<String>,
    pub waist: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PowerRatio {
    Value(f64),
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSection {
    pub w_perp: String,
    pub w_z: String,
    pub n1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub p_max: u32,
    pub l_max: u32,
    pub slices: usize,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    pub dt: String,
    pub t_end: String,
    pub n_traj: usize,
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub window: String,
    pub t_grid: Vec<String>,
    pub convention: String,
    pub bootstrap: usize,
    pub bootstrap_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig1bSection {
    pub delta_ratio_min: f64,
    pub delta_ratio_max: f64,
    pub n_delta: usize,
    pub power_ratio_min: f64,
    pub power_ratio_max: f64,
    pub n_power: usize,
}

impl Default for Fig1bSection {
    fn default() -> Self {
        let s = ScanSpec::default();
        Fig1bSection {
            delta_ratio_min: s.delta_ratio_min,
            delta_ratio_max: s.delta_ratio_max,
            n_delta: s.n_delta,
            power_ratio_min: s.power_ratio_min,
            power_ratio_max: s.power_ratio_max,
            n_power: s.n_power,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig1cSection {
    pub n_atoms: usize,
    pub t_end: String,
    pub n_times: usize,
    pub seed: u64,
}

impl Default for Fig1cSection {
    fn default() -> Self {
        Fig1cSection { n_atoms: 2000, t_end: "200 us".into(), n_times: 41, seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig2Section {
    pub n1_values: Vec<f64>,
    pub window: String,
    pub n_traj: usize,
}

impl Default for Fig2Section {
    fn default() -> Self {
        Fig2Section { n1_values: vec![2e5, 4e5, 6e5, 8e5, 1e6], window: "120 us".into(), n_traj: 500 }
    }
}

impl RunConfig {
    pub fn nominal() -> Self {
        Self::from_toml_str(NOMINAL_TOML).expect("bundled nominal config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantityKind {
    Length,
    Time,
    Power,
    Detuning,
}

impl QuantityKind {
    fn units(self) -> &'static str {
        match self {
            QuantityKind::Length => "m, mm, um, nm",
            QuantityKind::Time => "s, ms, us, ns",
            QuantityKind::Power => "W, mW, uW, nW",
            QuantityKind::Detuning => "Hz, kHz, MHz, GHz, rad/s, gamma_d1, gamma_d2",
        }
    }
}

/// Parse `"<number> <unit>"` to SI (detunings to rad/s; `Hz` units are
/// ordinary frequencies and pick up 2π).
pub fn parse_quantity(text: &str, kind: QuantityKind, species: Option<&AtomicSpecies>) -> std::result::Result<f64, String> {
    let mut parts = text.split_whitespace();
    let (Some(num), Some(unit), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(format!("expected \"<number> <unit>\" with unit in [{}], got {text:?}", kind.units()));
    };
    let value: f64 = num.parse().map_err(|_| format!("{num:?} is not a number"))?;
    if !value.is_finite() {
        return Err(format!("{num:?} is not finite"));
    }
    let scale = match (kind, unit) {
        (QuantityKind::Length, "m") | (QuantityKind::Time, "s") | (QuantityKind::Power, "W") => 1.0,
        (QuantityKind::Length, "mm") | (QuantityKind::Time, "ms") | (QuantityKind::Power, "mW") => 1e-3,
        (QuantityKind::Length, "um") | (QuantityKind::Time, "us") | (QuantityKind::Power, "uW") => 1e-6,
        (QuantityKind::Length, "nm") | (QuantityKind::Time, "ns") | (QuantityKind::Power, "nW") => 1e-9,
        (QuantityKind::Detuning, "Hz") => 2.0 * PI,
        (QuantityKind::Detuning, "kHz") => 2.0 * PI * 1e3,
        (QuantityKind::Detuning, "MHz") => 2.0 * PI * 1e6,
        (QuantityKind::Detuning, "GHz") => 2.0 * PI * 1e9,
        (QuantityKind::Detuning, "rad/s") => 1.0,
        (QuantityKind::Detuning, "gamma_d1" | "gamma_d2") => {
            let line = if unit == "gamma_d1" { Line::D1 } else { Line::D2 };
            let s = species.ok_or("linewidth units need valid atomic data")?;
            s.manifold(line).map_err(|e| e.to_string())?.linewidth
        }
        _ => return Err(format!("unknown unit {unit:?}; expected one of [{}]", kind.units())),
    };
    Ok(value * scale)
}

/// Where the D1 detuning comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum D1Choice {
    Optimum,
    Ratio(f64),
    Detuning(f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig1cSettings {
    pub n_atoms: usize,
    pub t_end: f64,
    pub n_times: usize,
    pub seed: u64,
}

impl Fig1cSettings {
    pub fn t_grid(&self) -> Vec<f64> {
        let n = self.n_times.max(2);
        (0..n).map(|i| self.t_end * i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig2Settings {
    pub n1_values: Vec<f64>,
    pub window: f64,
    pub n_traj: usize,
}

/// A validated configuration in SI units.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedConfig {
    pub source: RunConfig,
    pub config_hash: String,
    #[serde(skip)]
    pub species: AtomicSpecies,
    pub species_checksum: String,
    pub delta_d2: f64,
    pub delta_d1: f64,
    /// Signed `Δ₁/₂/Δ₃/₂`.
    pub delta_ratio: f64,
    pub power_ratio: f64,
    pub power_d2: f64,
    pub power_d1: f64,
    pub waist: f64,
    /// Total scattering rate of the resolved probe, 1/s.
    pub gamma_total: f64,
    pub w_perp: f64,
    pub w_z: f64,
    pub n1: f64,
    pub p_max: u32,
    pub l_max: u32,
    pub slices: usize,
    pub quadrature: QuadratureSpec,
    pub dt: f64,
    pub t_end: f64,
    pub n_traj: usize,
    pub base_seed: u64,
    pub window: f64,
    pub t_grid: Vec<f64>,
    pub convention: MeanSpinConvention,
    pub bootstrap: usize,
    pub bootstrap_seed: u64,
    pub scan: ScanSpec,
    pub fig1c: Fig1cSettings,
    pub fig2: Fig2Settings,
    pub output_dir: PathBuf,
}

/// Validate and resolve. Relative species paths are taken from `base_dir`.
/// Every failing field is reported in a single [`Error::Config`].
pub fn validate_config(cfg: &RunConfig, base_dir: Option<&Path>) -> Result<ResolvedConfig> {
    let mut errs: Vec<String> = Vec::new();
    let species = match cfg.atomic.as_str() {
        "builtin:cesium" => Some(AtomicSpecies::cesium()),
        p => {
            let path = base_dir.map_or_else(|| PathBuf::from(p), |d| d.join(p));
            match AtomicSpecies::from_file(&path) {
                Ok(s) => Some(s),
                Err(e) => {
                    errs.push(format!("atomic: cannot load {}: {e}", path.display()));
                    None
                }
            }
        }
    };
    let sp = species.as_ref();

    let q = |errs: &mut Vec<String>, field: &str, text: &str, kind: QuantityKind| -> Option<f64> {
        match parse_quantity(text, kind, sp) {
            Ok(v) => Some(v),
            Err(e) => {
                errs.push(format!("{field}: {e}"));
                None
            }
        }
    };
    let delta_d2 = q(&mut errs, "probe.delta_d2", &cfg.probe.delta_d2, QuantityKind::Detuning);
    let d1_choice = match cfg.probe.delta_d1.trim() {
        "optimum" => Some(D1Choice::Optimum),
        t if t.ends_with("delta_d2") => {
            let num = t.trim_end_matches("delta_d2").trim();
            match num.parse::<f64>() {
                Ok(v) if v.is_finite() && v != 0.0 => Some(D1Choice::Ratio(v)),
                _ => {
                    errs.push(format!("probe.delta_d1: {num:?} is not a non-zero multiple of delta_d2"));
                    None
                }
            }
        }
        t => q(&mut errs, "probe.delta_d1", t, QuantityKind::Detuning).map(D1Choice::Detuning),
    };
    let waist = q(&mut errs, "probe.waist", &cfg.probe.waist, QuantityKind::Length);
    let power_d2 = cfg.probe.power_d2.as_deref().map(|t| q(&mut errs, "probe.power_d2", t, QuantityKind::Power));
    let anchor = cfg.probe.gamma_anchor.as_deref().map(|t| q(&mut errs, "probe.gamma_anchor", t, QuantityKind::Time));
    let w_perp = q(&mut errs, "cloud.w_perp", &cfg.cloud.w_perp, QuantityKind::Length);
    let w_z = q(&mut errs, "cloud.w_z", &cfg.cloud.w_z, QuantityKind::Length);
    let dt = q(&mut errs, "integration.dt", &cfg.integration.dt, QuantityKind::Time);
    let t_end = q(&mut errs, "integration.t_end", &cfg.integration.t_end, QuantityKind::Time);
    let window = q(&mut errs, "analysis.window", &cfg.analysis.window, QuantityKind::Time);
    let t_grid: Vec<Option<f64>> = cfg
        .analysis
        .t_grid
        .iter()
        .enumerate()
        .map(|(i, t)| q(&mut errs, &format!("analysis.t_grid[{i}]"), t, QuantityKind::Time))
        .collect();
    let fig1c_t = q(&mut errs, "fig1c.t_end", &cfg.fig1c.t_end, QuantityKind::Time);
    let fig2_window = q(&mut errs, "fig2.window", &cfg.fig2.window, QuantityKind::Time);

    let positive = |errs: &mut Vec<String>, field: &str, v: Option<f64>| {
        if let Some(v) = v {
            if !(v > 0.0) {
                errs.push(format!("{field}: must be positive, got {v:e}"));
            }
        }
    };
    positive(&mut errs, "probe.waist", waist);
    positive(&mut errs, "cloud.w_perp", w_perp);
    positive(&mut errs, "cloud.w_z", w_z);
    positive(&mut errs, "integration.dt", dt);
    positive(&mut errs, "integration.t_end", t_end);
    positive(&mut errs, "analysis.window", window);
    positive(&mut errs, "fig1c.t_end", fig1c_t);
    positive(&mut errs, "fig2.window", fig2_window);
    if let Some(Some(p)) = power_d2 {
        positive(&mut errs, "probe.power_d2", Some(p));
    }
    if let Some(Some(a)) = anchor {
        positive(&mut errs, "probe.gamma_anchor", Some(a));
    }
    match (&power_d2, &anchor) {
        (None, None) => errs.push("probe: set either power_d2 or gamma_anchor".into()),
        (Some(_), Some(_)) => errs.push("probe: power_d2 and gamma_anchor are mutually exclusive".into()),
        _ => {}
    }
    if delta_d2 == Some(0.0) {
        errs.push("probe.delta_d2: must be non-zero".into());
    }
    if let Some(D1Choice::Detuning(0.0)) = d1_choice {
        errs.push("probe.delta_d1: must be non-zero".into());
    }
    let power_ratio_choice = match &cfg.probe.power_ratio {
        PowerRatio::Value(x) if *x >= 0.0 && x.is_finite() => Some(Some(*x)),
        PowerRatio::Value(x) => {
            errs.push(format!("probe.power_ratio: must be >= 0, got {x}"));
            None
        }
        PowerRatio::Keyword(k) if k == "cancel" => Some(None),
        PowerRatio::Keyword(k) => {
            errs.push(format!("probe.power_ratio: expected a number or \"cancel\", got {k:?}"));
            None
        }
    };
    if matches!(d1_choice, Some(D1Choice::Optimum)) && matches!(power_ratio_choice, Some(Some(_))) {
        errs.push("probe.power_ratio: delta_d1 = \"optimum\" fixes the ratio; use \"cancel\"".into());
    }

    if !(cfg.cloud.n1 > 0.0 && cfg.cloud.n1.is_finite()) {
        errs.push(format!("cloud.n1: must be positive, got {}", cfg.cloud.n1));
    }
    if cfg.basis.slices == 0 {
        errs.push("basis.slices: need at least one slice".into());
    }
    let qd = cfg.basis.quadrature;
    if qd.radial_order < 2 || qd.angular_points < 2 || qd.slice_order < 1 {
        errs.push("basis.quadrature: orders too small".into());
    }
    for (field, seed) in [("integration.base_seed", cfg.integration.base_seed), ("analysis.bootstrap_seed", cfg.analysis.bootstrap_seed)] {
        if seed > i64::MAX as u64 {
            errs.push(format!("{field}: {seed} exceeds the TOML integer range"));
        }
    }
    if cfg.integration.n_traj == 0 {
        errs.push("integration.n_traj: must be at least 1".into());
    }
    if let (Some(dt), Some(t)) = (dt, t_end) {
        if dt > 0.0 && t < dt {
            errs.push("integration.t_end: shorter than one step".into());
        }
    }
    if let (Some(w), Some(t)) = (window, t_end) {
        if 2.0 * w > t * (1.0 + 1e-12) {
            errs.push(format!("analysis.window: two windows ({:.1} us) exceed integration.t_end", 2e6 * w));
        }
    }
    if cfg.analysis.t_grid.is_empty() {
        errs.push("analysis.t_grid: must not be empty".into());
    }
    for (i, t) in t_grid.iter().enumerate() {
        if let (Some(t), Some(te)) = (*t, t_end) {
            if !(t > 0.0) {
                errs.push(format!("analysis.t_grid[{i}]: must be positive"));
            } else if 2.0 * t > te * (1.0 + 1e-12) {
                errs.push(format!("analysis.t_grid[{i}]: 2T = {:.1} us exceeds integration.t_end", 2e6 * t));
            }
        }
    }
    if let (Some(w), Some(te)) = (fig2_window, t_end) {
        if w > te * (1.0 + 1e-12) {
            errs.push("fig2.window: exceeds integration.t_end".into());
        }
    }
    let convention = match cfg.analysis.convention.as_str() {
        "divide" => Some(MeanSpinConvention::Divide),
        "multiply" => Some(MeanSpinConvention::Multiply),
        other => {
            errs.push(format!("analysis.convention: expected \"divide\" or \"multiply\", got {other:?}"));
            None
        }
    };
    if cfg.analysis.bootstrap < 2 {
        errs.push("analysis.bootstrap: need at least 2 resamples".into());
    }
    let f = &cfg.fig1b;
    let scan = ScanSpec {
        delta_ratio_min: f.delta_ratio_min,
        delta_ratio_max: f.delta_ratio_max,
        n_delta: f.n_delta,
        power_ratio_min: f.power_ratio_min,
        power_ratio_max: f.power_ratio_max,
        n_power: f.n_power,
    };
    if let Err(e) = scan.validate() {
        errs.push(format!("fig1b: {e}"));
    }
    if cfg.fig1c.n_atoms == 0 || cfg.fig1c.n_times < 2 {
        errs.push("fig1c: need n_atoms >= 1 and n_times >= 2".into());
    }
    if cfg.fig2.n1_values.iter().any(|&n| !(n > 0.0)) {
        errs.push("fig2.n1_values: all must be positive".into());
    }
    if cfg.fig2.n_traj < 2 {
        errs.push("fig2.n_traj: need at least 2 trajectories".into());
    }

    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    // Everything parsed; the remaining steps are physics and can still fail.
    let species = species.expect("checked");
    let delta_d2 = delta_d2.unwrap();
    let waist = waist.unwrap();
    let physics = |e: Error, field: &str| Error::Config(vec![format!("{field}: {e}")]);
    let (delta_ratio, power_ratio) = match (d1_choice.unwrap(), power_ratio_choice.unwrap()) {
        (D1Choice::Optimum, _) => {
            let plane = DesignPlane { species: &species, delta_d2, waist };
            let o = design_optimum(&plane, &scan).map_err(|e| physics(e, "probe.delta_d1"))?;
            (o.delta_ratio, o.power_ratio)
        }
        (choice, ratio) => {
            let d1 = match choice {
                D1Choice::Ratio(r) => r * delta_d2,
                D1Choice::Detuning(d) => d,
                D1Choice::Optimum => unreachable!(),
            };
            let x = match ratio {
                Some(x) => x,
                None => cancellation_operating_point(&species, d1, delta_d2).map_err(|e| physics(e, "probe.power_ratio"))?,
            };
            (d1 / delta_d2, x)
        }
    };
    let delta_d1 = delta_ratio * delta_d2;
    let make = |p2: f64| -> Result<TwoColorProbe> {
        TwoColorProbe::new(
            ProbeColor::new(Line::D1, delta_d1, power_ratio * p2, waist)?,
            ProbeColor::new(Line::D2, delta_d2, p2, waist)?,
        )
    };
    let power_d2 = match (power_d2, anchor) {
        (Some(Some(p)), _) => p,
        (_, Some(Some(t_anchor))) => {
            let unit = make(1.0).map_err(|e| physics(e, "probe"))?;
            let g = unit.total_scattering_rate(&species).map_err(|e| physics(e, "probe"))?;
            1.0 / (t_anchor * g)
        }
        _ => unreachable!(),
    };
    let probe = make(power_d2).map_err(|e| physics(e, "probe"))?;
    let gamma_total = probe.total_scattering_rate(&species).map_err(|e| physics(e, "probe"))?;

    Ok(ResolvedConfig {
        source: cfg.clone(),
        config_hash: cfg.content_hash(),
        species_checksum: species.checksum.clone(),
        species,
        delta_d2,
        delta_d1,
        delta_ratio,
        power_ratio,
        power_d2,
        power_d1: power_ratio * power_d2,
        waist,
        gamma_total,
        w_perp: w_perp.unwrap(),
        w_z: w_z.unwrap(),
        n1: cfg.cloud.n1,
        p_max: cfg.basis.p_max,
        l_max: cfg.basis.l_max,
        slices: cfg.basis.slices,
        quadrature: qd,
        dt: dt.unwrap(),
        t_end: t_end.unwrap(),
        n_traj: cfg.integration.n_traj,
        base_seed: cfg.integration.base_seed,
        window: window.unwrap(),
        t_grid: t_grid.into_iter().map(Option::unwrap).collect(),
        convention: convention.unwrap(),
        bootstrap: cfg.analysis.bootstrap,
        bootstrap_seed: cfg.analysis.bootstrap_seed,
        scan,
        fig1c: Fig1cSettings {
            n_atoms: cfg.fig1c.n_atoms,
            t_end: fig1c_t.unwrap(),
            n_times: cfg.fig1c.n_times,
            seed: cfg.fig1c.seed,
        },
        fig2: Fig2Settings { n1_values: cfg.fig2.n1_values.clone(), window: fig2_window.unwrap(), n_traj: cfg.fig2.n_traj },
        output_dir: PathBuf::from(&cfg.output_dir),
    })
}

impl ResolvedConfig {
    pub fn probe(&self) -> TwoColorProbe {
        TwoColorProbe::new(
            ProbeColor::new(Line::D1, self.delta_d1, self.power_d1, self.waist).expect("validated"),
            ProbeColor::new(Line::D2, self.delta_d2, self.power_d2, self.waist).expect("validated"),
        )
        .expect("validated")
    }

    /// Cloud shape with a placeholder density; see [`ResolvedConfig::model`].
    pub fn cloud_shape(&self) -> CloudGeometry {
        CloudGeometry::with_atom_number(1.0, self.w_perp, self.w_z).expect("validated")
    }

    pub fn basis(&self) -> Result<ModeBasis> {
        let slices = SliceGrid::covering(3.0 * self.w_z, self.slices)?;
        let wavelength = self.species.manifold(Line::D2)?.wavelength;
        ModeBasis::new(self.waist, wavelength, self.p_max, self.l_max, slices, self.quadrature)
    }

    /// Moment model at effective atom number `n1`; tables are built for the unit
    /// cloud (optionally cached) and density-scaled. Returns the table hash too.
    pub fn model_at(&self, n1: f64, cache_dir: Option<&Path>) -> Result<(MomentModel, String)> {
        let basis = self.basis()?;
        let (tables, hash) = cached_tables(&basis, &self.cloud_shape(), ModeConvention::RealSlice, cache_dir)?;
        let n1_unit = tables.fundamental_number(1);
        if !(n1_unit > 0.0) {
            return Err(Error::domain("cloud has no overlap with the probe mode"));
        }
        let tables = tables.density_scaled(n1 / n1_unit);
        Ok((MomentModel::from_probe(&self.species, &self.probe(), tables)?, hash))
    }

    pub fn model(&self, cache_dir: Option<&Path>) -> Result<(MomentModel, String)> {
        self.model_at(self.n1, cache_dir)
    }

    /// Total atom number for effective number `n1`.
    pub fn atom_number_for(&self, n1: f64) -> Result<f64> {
        let basis = self.basis()?;
        let n1_unit = crate::geometry::effective_atom_number(&self.cloud_shape(), &basis, 1)?;
        Ok(n1 / n1_unit)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal() -> ResolvedConfig {
        validate_config(&RunConfig::nominal(), None).unwrap()
    }

    #[test]
    fn quantity_units() {
        let cs = AtomicSpecies::cesium();
        let p = |t, k| parse_quantity(t, k, Some(&cs)).unwrap();
        assert_eq!(p("16 um", QuantityKind::Length), 16e-6);
        assert_eq!(p("35 us", QuantityKind::Time), 35e-6);
        assert_eq!(p("2 mW", QuantityKind::Power), 2e-3);
        assert!((p("1 MHz", QuantityKind::Detuning) - 2.0 * PI * 1e6).abs() < 1e-6);
        assert!(parse_quantity("16", QuantityKind::Length, None).is_err());
        assert!(parse_quantity("16 us", QuantityKind::Length, None).is_err());
        assert!(parse_quantity("1 gamma_d2", QuantityKind::Detuning, None).is_err());
    }

    #[test]
    fn linewidth_detuning_is_three_ghz_class() {
        let r = nominal();
        let ghz = r.delta_d2 / (2.0 * PI * 1e9);
        assert!((ghz + 3.03).abs() < 0.05, "{ghz} GHz");
    }

    #[test]
    fn anchor_resolves_power() {
        let r = nominal();
        assert!((1.0 / r.gamma_total - 35e-6).abs() < 1e-12);
        assert!(r.power_d2 > 1e-6 && r.power_d2 < 1e-4, "{}", r.power_d2);
        let mut cfg = RunConfig::nominal();
        cfg.probe.gamma_anchor = None;
        cfg.probe.power_d2 = Some(format!("{:e} W", r.power_d2));
        let r2 = validate_config(&cfg, None).unwrap();
        assert!((r2.gamma_total / r.gamma_total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors_are_exhaustive_and_name_fields() {
        let mut cfg = RunConfig::nominal();
        cfg.probe.waist = "-16 um".into();
        cfg.cloud.w_z = "200 parsecs".into();
        cfg.integration.n_traj = 0;
        cfg.analysis.convention = "sideways".into();
        let Err(Error::Config(errs)) = validate_config(&cfg, None) else { panic!("expected config error") };
        let joined = errs.join("\n");
        for field in ["probe.waist", "cloud.w_z", "integration.n_traj", "analysis.convention"] {
            assert!(joined.contains(field), "{field} missing from {joined}");
        }
    }

    #[test]
    fn explicit_ratio_and_cancel() {
        let r = nominal();
        let mut cfg = RunConfig::nominal();
        cfg.probe.delta_d1 = format!("{} delta_d2", r.delta_ratio);
        let r2 = validate_config(&cfg, None).unwrap();
        assert!((r2.power_ratio - r.power_ratio).abs() < 1e-9);
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = RunConfig::nominal();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());
        let mut other = cfg.clone();
        other.integration.base_seed += 1;
        assert_ne!(other.content_hash(), cfg.content_hash());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = NOMINAL_TOML.replace("[cloud]", "[cloud]\nbogus = 1");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }
}

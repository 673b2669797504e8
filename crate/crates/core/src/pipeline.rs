//! End-to-end figure pipelines. Each writes CSV/JSON payloads whose header
//! carries the config hash, plus a `manifest.json` with file digests, the
//! resolved configuration and the embedded checks. Payloads are deterministic;
//! the wall-clock timestamp lives only in the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{
    db, estimate_squeezing, expected_pair_statistics, expected_window_variance, integrate_record, mean_spin_decay_ratio,
    measurement_pairs, noise_decomposition_fit, noise_references, squeezing_parameter, NoiseDecomposition,
    SqueezingEstimate, VariancePoint,
};
use crate::config::ResolvedConfig;
use crate::dynamics::{DeterministicPath, MomentModel};
use crate::error::{Error, Result};
use crate::oracle::{fig1c_curves, DecayCurves, DecayMode};
use crate::probe::{design_optimum, refined_grid_optimum, scan_strength, DesignOptimum, DesignPlane, DetuningSign, ScanCell};
use crate::rng::RNG_ALGORITHM;
use crate::trajectories::{batch_simulate, TrajectoryRecord};

/// PN variance of a thermal `f = 4` ensemble relative to the coherent state:
/// `f(f+1)/3 ÷ f/2`.
pub const THERMAL_TO_COHERENT: f64 = 10.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineName {
    Fig1b,
    Fig1c,
    Fig2,
    Fig3,
}

impl PipelineName {
    pub const ALL: [PipelineName; 4] = [PipelineName::Fig1b, PipelineName::Fig1c, PipelineName::Fig2, PipelineName::Fig3];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineName::Fig1b => "fig1b",
            PipelineName::Fig1c => "fig1c",
            PipelineName::Fig2 => "fig2",
            PipelineName::Fig3 => "fig3",
        }
    }
}

impl FromStr for PipelineName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PipelineName::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = PipelineName::ALL.iter().map(|p| p.as_str()).collect();
            format!("unknown pipeline {s:?}; valid names: {}", names.join(", "))
        })
    }
}

/// An embedded acceptance check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
}

impl Check {
    pub fn range(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Check { name: name.into(), value, expected: format!("[{}, {}]", tidy(lo), tidy(hi)), pass: value >= lo && value <= hi }
    }

    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, expected: format!("<= {limit}"), pass: value <= limit }
    }
}

fn tidy(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub pipeline: String,
    pub crate_version: &'static str,
    pub config_hash: String,
    pub species_checksum: String,
    pub rng: &'static str,
    pub created_unix_s: u64,
    pub elapsed_s: f64,
    pub resolved_config: serde_json::Value,
    pub files: Vec<FileEntry>,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl PipelineOutput {
    pub fn all_checks_pass(&self) -> bool {
        self.manifest.checks.iter().all(|c| c.pass)
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Overrides the config's output directory.
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

/// Collects payload files for one run.
pub struct ArtifactWriter {
    dir: PathBuf,
    config_hash: String,
    label: String,
    files: Vec<FileEntry>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, label: &str, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), config_hash: config_hash.into(), label: label.into(), files: Vec::new() })
    }

    pub fn put(&mut self, name: &str, body: String) -> Result<()> {
        std::fs::write(self.dir.join(name), &body)?;
        self.files.push(FileEntry { name: name.into(), sha256: format!("{:x}", Sha256::digest(body.as_bytes())), bytes: body.len() });
        Ok(())
    }

    /// CSV with `# config_hash` / `# pipeline` header lines.
    pub fn csv(&mut self, name: &str, header_notes: &[String], body: &str) -> Result<()> {
        let mut s = format!("# config_hash: {}\n# pipeline: {}\n", self.config_hash, self.label);
        for n in header_notes {
            let _ = writeln!(s, "# {n}");
        }
        s.push_str(body);
        self.put(name, s)
    }

    /// JSON object with a `config_hash` field.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
        if let serde_json::Value::Object(m) = &mut v {
            m.insert("config_hash".into(), self.config_hash.clone().into());
        }
        let mut body = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
        body.push('\n');
        self.put(name, body)
    }

    pub fn finish(self, cfg: &ResolvedConfig, checks: Vec<Check>, started: Instant) -> Result<PipelineOutput> {
        let manifest = Manifest {
            pipeline: self.label,
            crate_version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.config_hash.clone(),
            species_checksum: cfg.species_checksum.clone(),
            rng: RNG_ALGORITHM,
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_s: started.elapsed().as_secs_f64(),
            resolved_config: cfg.to_json(),
            files: self.files,
            checks,
        };
        let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.dir.join("manifest.json"), body + "\n")?;
        Ok(PipelineOutput { dir: self.dir, manifest })
    }
}

pub fn run_pipeline(name: PipelineName, cfg: &ResolvedConfig, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let root = opts.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let dir = root.join(name.as_str());
    let cache = opts.cache_dir.as_deref();
    match name {
        PipelineName::Fig1b => fig1b(cfg, &dir),
        PipelineName::Fig1c => fig1c(cfg, &dir),
        PipelineName::Fig2 => fig2(cfg, &dir, cache),
        PipelineName::Fig3 => fig3(cfg, &dir, cache),
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

// ---------------------------------------------------------------- fig1b

#[derive(Clone, Debug, Serialize)]
pub struct Fig1bSummary {
    pub delta_d2: f64,
    pub waist: f64,
    /// Best point on the tensor-cancelled line.
    pub cancelled_optimum: DesignOptimum,
    /// Per sign: best grid cell and its refinement.
    pub grid: Vec<(DetuningSign, ScanCell, ScanCell)>,
}

pub fn fig1b_summary(cfg: &ResolvedConfig) -> Result<(Fig1bSummary, Vec<crate::probe::StrengthScan>)> {
    let plane = DesignPlane { species: &cfg.species, delta_d2: cfg.delta_d2, waist: cfg.waist };
    let mut scans = Vec::new();
    let mut grid = Vec::new();
    for sign in DetuningSign::BOTH {
        let scan = stage("scan", scan_strength(&plane, sign, &cfg.scan))?;
        let best = *scan.best_cell().ok_or_else(|| Error::domain("scan has no valid cell").in_stage("scan"))?;
        let refined = stage("refine", refined_grid_optimum(&plane, &scan))?;
        grid.push((sign, best, refined));
        scans.push(scan);
    }
    let cancelled_optimum = stage("cancelled-optimum", design_optimum(&plane, &cfg.scan))?;
    Ok((Fig1bSummary { delta_d2: cfg.delta_d2, waist: cfg.waist, cancelled_optimum, grid }, scans))
}

/// Checks on the tensor-cancelled operating point.
pub fn design_point_checks(o: &DesignOptimum) -> Vec<Check> {
    vec![
        Check::range("(r/r_max)^2 at cancelled optimum", o.r_over_rmax_squared, 0.90, 0.97),
        Check::range("|delta_D1/delta_D2|", o.delta_ratio.abs(), 0.8, 1.25),
        Check::range("P_D1/P_D2 for cancellation", o.power_ratio, 0.15, 0.25),
    ]
}

fn fig1b(cfg: &ResolvedConfig, dir: &Path) -> Result<PipelineOutput> {
    let started = Instant::now();
    let (summary, scans) = fig1b_summary(cfg)?;
    let mut w = ArtifactWriter::new(dir, "fig1b", &cfg.config_hash)?;
    for scan in &scans {
        let name = match scan.sign {
            DetuningSign::Opposite => "fig1b_scan_opposite.csv",
            DetuningSign::Same => "fig1b_scan_same.csv",
        };
        let notes = vec![format!("delta_d2_rad_s: {:e}", cfg.delta_d2), "columns: signed delta ratio D1/D2, power ratio P_D1/P_D2".into()];
        w.csv(name, &notes, &scan.to_csv())?;
    }
    w.json("fig1b_optimum.json", &summary)?;
    let mut checks = design_point_checks(&summary.cancelled_optimum);
    for (sign, best, refined) in &summary.grid {
        let (b, r) = (best.r_over_rmax.unwrap_or(f64::NAN), refined.r_over_rmax.unwrap_or(f64::NAN));
        checks.push(Check {
            name: format!("{sign:?}: grid maximum vs refined optimum"),
            value: r - b,
            expected: "refined >= grid maximum, within one grid step".into(),
            pass: r >= b - 1e-12 && (r - b) < 0.05 * b.abs().max(1e-12),
        });
    }
    w.finish(cfg, checks, started)
}

// ---------------------------------------------------------------- fig1c

/// Target normalized mean spin at the end of the decay window, per mode.
pub const FIG1C_TARGETS: [(DecayMode, f64); 3] =
    [(DecayMode::PumpingOnly, 0.94), (DecayMode::PumpingPlusTensor, 0.62), (DecayMode::TwoColorCancelled, 0.88)];

pub fn fig1c_decay(cfg: &ResolvedConfig) -> Result<DecayCurves> {
    let basis = stage("basis", cfg.basis())?;
    let n_atoms = stage("cloud", cfg.atom_number_for(cfg.n1))?;
    let cloud = stage("cloud", crate::geometry::CloudGeometry::with_atom_number(n_atoms, cfg.w_perp, cfg.w_z))?;
    let f = &cfg.fig1c;
    stage("decay", fig1c_curves(&cfg.species, &cfg.probe(), &cloud, &basis, &f.t_grid(), f.n_atoms, f.seed))
}

pub fn fig1c_checks(curves: &DecayCurves) -> Vec<Check> {
    FIG1C_TARGETS
        .iter()
        .map(|&(mode, target)| {
            let v = curves.curve(mode).and_then(|c| c.last().copied()).unwrap_or(f64::NAN);
            Check::range(&format!("{} at t_end", mode.label()), v, target - 0.06, target + 0.06)
        })
        .collect()
}

fn fig1c(cfg: &ResolvedConfig, dir: &Path) -> Result<PipelineOutput> {
    let started = Instant::now();
    let curves = fig1c_decay(cfg)?;
    let mut w = ArtifactWriter::new(dir, "fig1c", &cfg.config_hash)?;
    let notes = vec![
        format!("n_atoms: {} seed: {} mean_beta: {:.6}", curves.n_atoms, curves.seed, curves.mean_beta),
        "values: <F_x>(t)/<F_x>(0) (pumping_only: <F_z>), weighted by probe intensity".into(),
    ];
    w.csv("fig1c_decay.csv", &notes, &curves.to_csv())?;
    w.json("fig1c_setups.json", &serde_json::json!({ "setups": curves.setups, "mean_beta": curves.mean_beta }))?;
    let checks = fig1c_checks(&curves);
    w.finish(cfg, checks, started)
}

// ---------------------------------------------------------------- fig2

#[derive(Clone, Debug, Serialize)]
pub struct ThermalComparison {
    pub n1: f64,
    /// Model `ΔF_z²(0)` ratio thermal/coherent.
    pub initial_variance_ratio: f64,
    /// Model ratio of `ΔM² − SN` over the window.
    pub expected_pn_ratio: f64,
    /// Record ratio of `ΔM² − SN`.
    pub record_pn_ratio: f64,
    pub record_pn_ratio_sd: f64,
    pub coherent: VariancePoint,
    pub thermal: VariancePoint,
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig2Result {
    pub window: f64,
    pub n_traj: usize,
    pub shot_noise_model: f64,
    pub empty_trap: VariancePoint,
    pub points: Vec<VariancePoint>,
    /// Model `ΔM²` for each point.
    pub expected: Vec<f64>,
    pub decomposition: NoiseDecomposition,
    /// `(ΔM² − SN)/SN` at the nominal `N₁`, dB.
    pub pn_over_sn_db: f64,
    pub pn_over_sn_db_sd: f64,
    pub thermal: ThermalComparison,
}

fn m1_samples(model: &MomentModel, variance_scale: f64, window: f64, dt: f64, n: usize, seed: u64, hash: &str) -> Result<Vec<f64>> {
    let s0 = model.initial_state().with_variance_scale(variance_scale);
    let batch = batch_simulate(model, &s0, window, dt, n, seed, hash)?;
    if let Some((i, e)) = batch.failures().into_iter().next() {
        return Err(Error::domain(format!("trajectory {i} failed: {e}")));
    }
    batch.ok_records().map(|r| integrate_record(r, 0.0, window)).collect()
}

fn expected_m1(model: &MomentModel, variance_scale: f64, window: f64, dt: f64) -> Result<f64> {
    let s0 = model.initial_state().with_variance_scale(variance_scale);
    let path = model.deterministic_path(&s0, dt, (window / dt).round() as usize)?;
    expected_window_variance(model, &path, window)
}

pub fn fig2_run(cfg: &ResolvedConfig, cache: Option<&Path>) -> Result<Fig2Result> {
    let f2 = &cfg.fig2;
    let (window, dt, n) = (f2.window, cfg.dt, f2.n_traj);
    let seed = cfg.base_seed;
    let hash = &cfg.config_hash;
    let mut points = Vec::new();
    let mut expected = Vec::new();
    for (i, &n1) in f2.n1_values.iter().enumerate() {
        let (model, _) = stage("tables", cfg.model_at(n1, cache))?;
        let xs = stage("records", m1_samples(&model, 1.0, window, dt, n, seed.wrapping_add(i as u64 + 1), hash))?;
        points.push(stage("variance", VariancePoint::from_samples(n1, &xs))?);
        expected.push(stage("expected", expected_m1(&model, 1.0, window, dt))?);
    }
    let (nominal, _) = stage("tables", cfg.model_at(cfg.n1, cache))?;
    let empty = stage("empty-trap", MomentModel::new(nominal.overlaps.density_scaled(0.0), nominal.rates.clone(), nominal.kappa, nominal.spin.clone()))?;
    let xs = stage("empty-trap", m1_samples(&empty, 1.0, window, dt, n, seed.wrapping_add(1000), hash))?;
    let empty_trap = stage("empty-trap", VariancePoint::from_samples(0.0, &xs))?;
    let sn = window / nominal.kappa;
    let decomposition = stage("decomposition", noise_decomposition_fit(&points, empty_trap.variance))?;

    let cs = VariancePoint::from_samples(cfg.n1, &stage("thermal", m1_samples(&nominal, 1.0, window, dt, n, seed.wrapping_add(2000), hash))?)?;
    let th = VariancePoint::from_samples(
        cfg.n1,
        &stage("thermal", m1_samples(&nominal, THERMAL_TO_COHERENT, window, dt, n, seed.wrapping_add(2001), hash))?,
    )?;
    let v0 = |scale: f64| nominal.spinwave_moments(&nominal.initial_state().with_variance_scale(scale)).var_fz;
    let e_cs = stage("thermal", expected_m1(&nominal, 1.0, window, dt))?;
    let e_th = stage("thermal", expected_m1(&nominal, THERMAL_TO_COHERENT, window, dt))?;
    let (pn_cs, pn_th) = (cs.variance - sn, th.variance - sn);
    let ratio = pn_th / pn_cs;
    // delta method on independent sample variances
    let ratio_sd = ratio * ((th.sampling_variance / (pn_th * pn_th)) + (cs.sampling_variance / (pn_cs * pn_cs))).sqrt();
    let thermal = ThermalComparison {
        n1: cfg.n1,
        initial_variance_ratio: v0(THERMAL_TO_COHERENT) / v0(1.0),
        expected_pn_ratio: (e_th - sn) / (e_cs - sn),
        record_pn_ratio: ratio,
        record_pn_ratio_sd: ratio_sd,
        coherent: cs,
        thermal: th,
    };
    let pn_over_sn_db = db(pn_cs / sn);
    let pn_over_sn_db_sd = 10.0 / std::f64::consts::LN_10 * cs.sampling_variance.sqrt() / pn_cs;
    Ok(Fig2Result {
        window,
        n_traj: n,
        shot_noise_model: sn,
        empty_trap,
        points,
        expected,
        decomposition,
        pn_over_sn_db,
        pn_over_sn_db_sd,
        thermal,
    })
}

pub fn fig2_checks(r: &Fig2Result) -> Vec<Check> {
    let sn_z = (r.empty_trap.variance - r.shot_noise_model) / r.empty_trap.sampling_variance.sqrt();
    let th = &r.thermal;
    let th_z = (th.record_pn_ratio - th.expected_pn_ratio) / th.record_pn_ratio_sd;
    vec![
        Check::range("PN/SN at nominal N1 (dB)", r.pn_over_sn_db, 4.3, 6.3),
        Check::at_most("thermal/coherent initial variance: |ratio - 10/3|", (th.initial_variance_ratio - THERMAL_TO_COHERENT).abs(), 1e-9),
        Check::at_most("thermal/coherent record PN ratio vs model (|z|)", th_z.abs(), 3.0),
        Check::at_most("empty-trap variance vs T/kappa (|z|)", sn_z.abs(), 3.0),
    ]
}

fn fig2(cfg: &ResolvedConfig, dir: &Path, cache: Option<&Path>) -> Result<PipelineOutput> {
    let started = Instant::now();
    let r = fig2_run(cfg, cache)?;
    let mut w = ArtifactWriter::new(dir, "fig2", &cfg.config_hash)?;
    let mut body = String::from("n1,dM2,dM2_sd,dM2_model,shot_noise,projection_noise,classical_noise\n");
    for (i, p) in r.points.iter().enumerate() {
        let d = &r.decomposition.points[i];
        let _ = writeln!(
            body,
            "{:.6e},{:.12e},{:.6e},{:.12e},{:.12e},{:.12e},{:.12e}",
            p.n1,
            p.variance,
            p.sampling_variance.sqrt(),
            r.expected[i],
            r.empty_trap.variance,
            d.projection_noise,
            d.classical_noise
        );
    }
    let notes = vec![format!("window_s: {:e} n_traj: {}", r.window, r.n_traj), "units: F_z^2 s^2".into()];
    w.csv("fig2_variance.csv", &notes, &body)?;
    w.json("fig2_decomposition.json", &r)?;
    let checks = fig2_checks(&r);
    w.finish(cfg, checks, started)
}

// ---------------------------------------------------------------- fig3

#[derive(Clone, Debug, Serialize)]
pub struct Fig3Point {
    pub window: f64,
    pub record: SqueezingEstimate,
    /// Model `ξ_m²` at `t = T`.
    pub model_xi_m2: f64,
    /// Expected value of the record estimator under the model.
    pub expected_xi2: f64,
    /// Pure-QND reference `1/(1+r)`, `r = κ T ΔF_z²(0)`.
    pub qnd_reference: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig3Result {
    pub n_traj: usize,
    pub n1: f64,
    pub n2: f64,
    pub kappa: f64,
    pub points: Vec<Fig3Point>,
    /// Minimum of the dense model curve and where it occurs.
    pub model_min_xi_m2: f64,
    pub model_min_time: f64,
    pub f: f64,
    #[serde(skip)]
    pub path: DeterministicPath,
}

pub fn fig3_run(cfg: &ResolvedConfig, cache: Option<&Path>) -> Result<Fig3Result> {
    let (model, _) = stage("tables", cfg.model(cache))?;
    let s0 = model.initial_state();
    let batch = stage("records", batch_simulate(&model, &s0, cfg.t_end, cfg.dt, cfg.n_traj, cfg.base_seed, &cfg.config_hash))?;
    if let Some((i, e)) = batch.failures().into_iter().next() {
        return Err(Error::domain(format!("trajectory {i} failed: {e}")).in_stage("records"));
    }
    let path = &batch.path;
    let f = model.spin.f();
    let (n1, n2) = (model.n1(), model.n2());
    let xi_m = stage("model", path.squeezing(f, n1, n2))?;
    let var0 = path.moments[0].var_fz;
    let mut points = Vec::new();
    for &t in &cfg.t_grid {
        let pairs = stage("pairs", measurement_pairs(batch.ok_records(), t))?;
        let (sn, pn) = noise_references(model.kappa, var0, t);
        let ratio = stage("mean-spin", mean_spin_decay_ratio(path, t))?;
        let record = stage("estimate", estimate_squeezing(&pairs, t, sn, pn, ratio, cfg.convention, cfg.bootstrap, cfg.bootstrap_seed))?;
        let e = stage("expected", expected_pair_statistics(&model, path, t))?;
        let expected_xi2 = stage("expected", squeezing_parameter(e.conditional_variance(), sn, pn, ratio, cfg.convention))?;
        points.push(Fig3Point {
            window: t,
            record,
            model_xi_m2: xi_m[path.index_at(t)],
            expected_xi2,
            qnd_reference: 1.0 / (1.0 + model.kappa * t * var0),
        });
    }
    let (imin, &min) = xi_m
        .iter()
        .enumerate()
        .skip(1)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::domain("empty model path").in_stage("model"))?;
    Ok(Fig3Result {
        n_traj: cfg.n_traj,
        n1,
        n2,
        kappa: model.kappa,
        points,
        model_min_xi_m2: min,
        model_min_time: path.times[imin],
        f,
        path: batch.path,
    })
}

pub fn fig3_checks(r: &Fig3Result) -> Vec<Check> {
    let (i_rec, rec_min) = r
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.record.xi2))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, f64::NAN));
    let t_rec = r.points.get(i_rec).map_or(f64::NAN, |p| p.window);
    let worst_z = r
        .points
        .iter()
        .map(|p| ((p.record.xi2 - p.model_xi_m2) / p.record.xi2_sd).abs())
        .fold(0.0f64, |a, z| if z.is_nan() { f64::INFINITY } else { a.max(z) });
    vec![
        Check::range("model min xi_m^2 (dB)", db(r.model_min_xi_m2), -5.5, -3.0),
        Check::range("model argmin (us)", r.model_min_time * 1e6, 60.0, 150.0),
        Check::range("record min xi^2 (dB)", db(rec_min), -5.5, -3.0),
        Check::range("record argmin (us)", t_rec * 1e6, 60.0, 150.0),
        Check::at_most("record vs model, worst |z| over the grid", worst_z, 3.0),
    ]
}

fn fig3(cfg: &ResolvedConfig, dir: &Path, cache: Option<&Path>) -> Result<PipelineOutput> {
    let started = Instant::now();
    let r = fig3_run(cfg, cache)?;
    let mut w = ArtifactWriter::new(dir, "fig3", &cfg.config_hash)?;
    let notes = vec![format!("n_traj: {} convention: {:?}", r.n_traj, cfg.convention), "T in s; xi^2 linear, with dB columns".into()];
    let mut rec = String::from("T_s,xi2,xi2_sd,xi2_db,var_m1,var_m2,cov,conditional_variance,mean_spin_ratio\n");
    let mut model = String::from("T_s,xi_m2,xi_m2_db,expected_xi2,expected_xi2_db,qnd_reference\n");
    for p in &r.points {
        let e = &p.record;
        let _ = writeln!(
            rec,
            "{:.9e},{:.12e},{:.6e},{:.6},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            p.window, e.xi2, e.xi2_sd, e.xi2_db, e.var_m1, e.var_m2, e.cov, e.conditional_variance, e.mean_spin_ratio
        );
        let _ = writeln!(
            model,
            "{:.9e},{:.12e},{:.6},{:.12e},{:.6},{:.12e}",
            p.window,
            p.model_xi_m2,
            db(p.model_xi_m2),
            p.expected_xi2,
            db(p.expected_xi2),
            p.qnd_reference
        );
    }
    w.csv("fig3_xi2.csv", &notes, &rec)?;
    w.csv("fig3_xi_m2.csv", &notes, &model)?;
    let xi = stage("model", r.path.squeezing(r.f, r.n1, r.n2))?;
    let stride = (1e-6 / r.path.dt).round().max(1.0) as usize;
    let mut dense = String::from("t_s,xi_m2,var_fz,fx\n");
    for i in (0..r.path.moments.len()).step_by(stride) {
        let m = r.path.moments[i];
        let _ = writeln!(dense, "{:.9e},{:.12e},{:.12e},{:.12e}", r.path.times[i], xi[i], m.var_fz, m.fx);
    }
    w.csv("fig3_model_path.csv", &[], &dense)?;
    w.json("fig3_summary.json", &r)?;
    let checks = fig3_checks(&r);
    w.finish(cfg, checks, started)
}

// ---------------------------------------------------------------- records

/// Simulate `cfg.n_traj` records and write one CSV per trajectory plus a manifest.
pub fn simulate_to_dir(cfg: &ResolvedConfig, dir: &Path, cache: Option<&Path>) -> Result<PipelineOutput> {
    let started = Instant::now();
    let (model, table_hash) = stage("tables", cfg.model(cache))?;
    let s0 = model.initial_state();
    let batch = stage("records", batch_simulate(&model, &s0, cfg.t_end, cfg.dt, cfg.n_traj, cfg.base_seed, &cfg.config_hash))?;
    let mut w = ArtifactWriter::new(dir, "simulate", &cfg.config_hash)?;
    let mut failures = Vec::new();
    for (i, r) in batch.records.iter().enumerate() {
        match r {
            Ok(rec) => w.put(&format!("traj_{i:05}.csv"), rec.to_csv())?,
            Err(e) => failures.push(format!("trajectory {i}: {e}")),
        }
    }
    w.json("simulate_summary.json", &serde_json::json!({
        "table_hash": table_hash,
        "kappa": model.kappa,
        "n1": model.n1(),
        "n2": model.n2(),
        "failures": failures,
    }))?;
    let checks = vec![Check::at_most("failed trajectories", failures.len() as f64, 0.0)];
    w.finish(cfg, checks, started)
}

/// Squeezing estimates from stored records at each window, with the model
/// references (shot/projection noise, mean-spin ratio) from `cfg`.
pub fn analyze_records(
    cfg: &ResolvedConfig,
    records: &[TrajectoryRecord],
    windows: &[f64],
    cache: Option<&Path>,
) -> Result<Vec<SqueezingEstimate>> {
    if records.is_empty() {
        return Err(Error::domain("no records to analyze"));
    }
    let (model, _) = stage("tables", cfg.model(cache))?;
    let t_max = windows.iter().fold(0.0f64, |a, &b| a.max(b));
    let dt = records[0].dt;
    let path = stage("model", model.deterministic_path(&model.initial_state(), dt, (2.0 * t_max / dt).ceil() as usize))?;
    let var0 = path.moments[0].var_fz;
    windows
        .iter()
        .map(|&t| {
            let pairs = stage("pairs", measurement_pairs(records, t))?;
            let (sn, pn) = noise_references(model.kappa, var0, t);
            let ratio = stage("mean-spin", mean_spin_decay_ratio(&path, t))?;
            stage("estimate", estimate_squeezing(&pairs, t, sn, pn, ratio, cfg.convention, cfg.bootstrap, cfg.bootstrap_seed))
        })
        .collect()
}

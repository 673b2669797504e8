use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spinsqueeze::config::{validate_config, ResolvedConfig, RunConfig};
use spinsqueeze::dynamics::probe_pumping_rates;
use spinsqueeze::geometry::{cached_tables, ModeConvention};
use spinsqueeze::oracle::{compare_gaussian_vs_exact, oracle_colors, InternalSpace, OraclePair};
use spinsqueeze::pipeline::{
    analyze_records, design_point_checks, fig1b_summary, fig1c_checks, fig1c_decay, run_pipeline, simulate_to_dir,
    ArtifactWriter, Check, PipelineName, PipelineOptions,
};
use spinsqueeze::pumping::ColorPumping;
use spinsqueeze::trajectories::TrajectoryRecord;
use spinsqueeze::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "spinsqueeze", version, about = "Two-color QND measurement and spin-squeezing simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Defaults to the built-in nominal setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config); TOML integers cap it at 2^63 - 1.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Rebuild overlap tables instead of using the on-disk cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Evaluate embedded acceptance checks; exit 4 if any fails.
    #[arg(long, global = true)]
    check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Measurement-strength scan over the detuning/power-ratio plane.
    ScanStrength,
    /// Tensor-cancelled operating point and the resolved probe.
    DesignPoint,
    /// Build (or load) the overlap tables and report effective atom numbers.
    BuildTables,
    /// Print the qutrit pumping tables for each probe color.
    DumpPumpingTables,
    /// Record-independent moment evolution: ΔF_z², <F_x>, ξ_m² vs t.
    Evolve,
    /// Simulate polarimeter records, one CSV per trajectory.
    Simulate,
    /// Conditional-variance squeezing from stored records.
    Analyze {
        /// Record CSV files or directories containing them.
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Single window length in µs (default: the config's T grid).
        #[arg(long)]
        window_us: Option<f64>,
    },
    /// Exact few-atom reference computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Figure pipelines: fig1b, fig1c, fig2, fig3.
    Pipeline {
        #[arg(value_parser = parse_pipeline)]
        name: PipelineName,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Shared-noise Gaussian vs exact conditional evolution.
    Compare {
        #[arg(long, default_value_t = 1)]
        atoms: usize,
        #[arg(long, value_enum, default_value_t = Space::Qutrit)]
        space: Space,
        #[arg(long, default_value_t = 20)]
        traj: usize,
        /// Target κ T ΔF_z²(0) over T = 1/γ.
        #[arg(long, default_value_t = 0.2)]
        coupling: f64,
    },
    /// Mean-spin decay curves of sampled atoms.
    Fig1c,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Full,
    Qutrit,
}

fn parse_pipeline(s: &str) -> Result<PipelineName, String> {
    s.parse()
}

fn load(global: &Global) -> spinsqueeze::Result<ResolvedConfig> {
    let (mut cfg, base) = match &global.config {
        Some(p) => (RunConfig::from_file(p)?, p.parent().map(Path::to_path_buf)),
        None => (RunConfig::nominal(), None),
    };
    if let Some(seed) = global.seed {
        cfg.integration.base_seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output_dir = out.display().to_string();
    }
    validate_config(&cfg, base.as_deref())
}

fn cache_dir(global: &Global, cfg: &ResolvedConfig) -> Option<PathBuf> {
    (!global.no_cache).then(|| cfg.output_dir.join(".cache"))
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {}: {:.6} (expected {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.expected);
    }
    checks.iter().all(|c| c.pass)
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: &Cli) -> spinsqueeze::Result<bool> {
    let g = &cli.global;
    let cfg = load(g)?;
    let cache = cache_dir(g, &cfg);
    let cache = cache.as_deref();
    let out = cfg.output_dir.clone();
    let mut ok = true;
    match &cli.command {
        Command::ScanStrength => {
            let (summary, scans) = fig1b_summary(&cfg)?;
            let mut w = ArtifactWriter::new(&out.join("scan-strength"), "scan-strength", &cfg.config_hash)?;
            for scan in &scans {
                w.csv(&format!("scan_{:?}.csv", scan.sign).to_lowercase(), &[], &scan.to_csv())?;
            }
            w.json("optimum.json", &summary)?;
            println!("{}", json(&summary));
            let checks = if g.check { design_point_checks(&summary.cancelled_optimum) } else { Vec::new() };
            ok = print_checks(&checks);
            w.finish(&cfg, checks, std::time::Instant::now())?;
        }
        Command::DesignPoint => {
            let probe = cfg.probe();
            println!("{}", json(&serde_json::json!({
                "delta_d2_rad_s": cfg.delta_d2,
                "delta_d1_rad_s": cfg.delta_d1,
                "delta_ratio": cfg.delta_ratio,
                "power_ratio": cfg.power_ratio,
                "power_d2_w": cfg.power_d2,
                "power_d1_w": cfg.power_d1,
                "gamma_total_per_s": cfg.gamma_total,
                "summary": probe.summary(&cfg.species)?,
            })));
            if g.check {
                let (summary, _) = fig1b_summary(&cfg)?;
                ok = print_checks(&design_point_checks(&summary.cancelled_optimum));
            }
        }
        Command::BuildTables => {
            let basis = cfg.basis()?;
            let (tables, hash) = cached_tables(&basis, &cfg.cloud_shape(), ModeConvention::RealSlice, cache)?;
            let (model, _) = cfg.model(cache)?;
            println!("table_hash = {hash}");
            println!("modes = {}, slices = {}", tables.n_modes(), tables.n_slices);
            println!("N1 = {:.6e}, N2 = {:.6e}, N_atoms = {:.6e}", model.n1(), model.n2(), cfg.atom_number_for(cfg.n1)?);
            println!("kappa = {:.6e} 1/s", model.kappa);
        }
        Command::DumpPumpingTables => {
            for c in cfg.probe().active_colors() {
                print!("{}", ColorPumping::build(&cfg.species, c.line, c.detuning)?.tables.dump());
            }
            print!("{}", probe_pumping_rates(&cfg.species, &cfg.probe())?.dump());
        }
        Command::Evolve => {
            let (model, _) = cfg.model(cache)?;
            let n = (cfg.t_end / cfg.dt).round() as usize;
            let path = model.deterministic_path(&model.initial_state(), cfg.dt, n)?;
            let xi = path.squeezing(model.spin.f(), model.n1(), model.n2())?;
            let stride = (1e-6 / cfg.dt).round().max(1.0) as usize;
            let mut body = String::from("t_s,var_fz,fx,xi_m2\n");
            for i in (0..=n).step_by(stride) {
                let m = path.moments[i];
                body.push_str(&format!("{:.9e},{:.12e},{:.12e},{:.12e}\n", path.times[i], m.var_fz, m.fx, xi[i]));
            }
            let mut w = ArtifactWriter::new(&out.join("evolve"), "evolve", &cfg.config_hash)?;
            w.csv("evolve.csv", &[], &body)?;
            let o = w.finish(&cfg, Vec::new(), std::time::Instant::now())?;
            println!("wrote {}", o.dir.join("evolve.csv").display());
        }
        Command::Simulate => {
            let o = simulate_to_dir(&cfg, &out.join("simulate"), cache)?;
            println!("wrote {} files to {}", o.manifest.files.len(), o.dir.display());
            ok = print_checks(&o.manifest.checks) || !g.check;
        }
        Command::Analyze { inputs, window_us } => {
            let mut files = Vec::new();
            for p in inputs {
                if p.is_dir() {
                    let mut v: Vec<PathBuf> = std::fs::read_dir(p)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                        .collect();
                    v.sort();
                    files.extend(v);
                } else {
                    files.push(p.clone());
                }
            }
            let records = files
                .iter()
                .map(|f| TrajectoryRecord::from_csv(&std::fs::read_to_string(f)?))
                .collect::<spinsqueeze::Result<Vec<_>>>()?;
            if let Some(r) = records.iter().find(|r| r.config_hash != cfg.config_hash) {
                eprintln!("warning: records carry config hash {} but the analysis config is {}", r.config_hash, cfg.config_hash);
            }
            let windows = window_us.map_or_else(|| cfg.t_grid.clone(), |w| vec![w * 1e-6]);
            let est = analyze_records(&cfg, &records, &windows, cache)?;
            let mut body = String::from("T_s,xi2,xi2_sd,xi2_db,conditional_variance,mean_spin_ratio\n");
            for e in &est {
                body.push_str(&format!(
                    "{:.9e},{:.12e},{:.6e},{:.6},{:.12e},{:.12e}\n",
                    e.window, e.xi2, e.xi2_sd, e.xi2_db, e.conditional_variance, e.mean_spin_ratio
                ));
            }
            let mut w = ArtifactWriter::new(&out.join("analyze"), "analyze", &cfg.config_hash)?;
            w.csv("xi2.csv", &[format!("records: {}", records.len())], &body)?;
            w.json("analysis.json", &serde_json::json!({ "n_records": records.len(), "estimates": est }))?;
            w.finish(&cfg, Vec::new(), std::time::Instant::now())?;
            print!("{body}");
        }
        Command::Oracle(OracleCommand::Compare { atoms, space, traj, coupling }) => {
            if !(1..=3).contains(atoms) {
                return Err(Error::Config(vec![format!("--atoms: must be 1..=3, got {atoms}")]));
            }
            let space = match space {
                Space::Full => InternalSpace::Full,
                Space::Qutrit => InternalSpace::Qutrit,
            };
            let betas: Vec<f64> = [1.0, 0.7, 0.45][..*atoms].to_vec();
            let colors = oracle_colors(&cfg.species, &cfg.probe())?;
            let (pair, t_end) = OraclePair::at_coupling(&cfg.species, &colors, &betas, *coupling, space)?;
            let r = compare_gaussian_vs_exact(&pair, t_end, *traj, cfg.base_seed, 20)?;
            let mut w = ArtifactWriter::new(&out.join("oracle-compare"), "oracle-compare", &cfg.config_hash)?;
            w.csv("compare.csv", &[], &r.to_csv())?;
            let checks = vec![
                Check::at_most("max relative variance error", r.max_relative_variance_error, r.variance_tolerance),
                Check::range("mean-path correlation", r.mean_path_correlation, r.correlation_threshold, 1.0),
            ];
            w.finish(&cfg, checks.clone(), std::time::Instant::now())?;
            println!("space {:?}, atoms {}, coupling {:.3}, dt {:.3e} s", r.space, r.n_atoms, r.coupling, r.dt);
            ok = print_checks(&checks) || !g.check;
        }
        Command::Oracle(OracleCommand::Fig1c) => {
            let curves = fig1c_decay(&cfg)?;
            print!("{}", curves.to_csv());
            ok = !g.check || print_checks(&fig1c_checks(&curves));
        }
        Command::Pipeline { name } => {
            let opts = PipelineOptions { out_dir: None, cache_dir: cache.map(Path::to_path_buf) };
            let o = run_pipeline(*name, &cfg, &opts)?;
            println!("wrote {} ({} files)", o.dir.display(), o.manifest.files.len());
            if g.check {
                ok = print_checks(&o.manifest.checks);
            }
        }
    }
    Ok(ok || !g.check)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("error: {e}");
            match e.root() {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_NUMERICAL),
            }
        }
    }
}

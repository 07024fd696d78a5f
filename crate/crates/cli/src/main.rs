use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rvelab_core::expansion::verify_expansion_order;
use rvelab_core::packing::{isotropic_target, mcm_pack, rsa_pack, sam_pack};
use rvelab_core::raster::{measured_volume_fraction, voxelize};
use rvelab_core::sampling::{draw, Generator};
use rvelab_core::solver::{apparent_columns, ConvergenceMetric, NyquistRule};
use rvelab_core::study::{compute_reference, run_study, summarize_dir, ReferenceSpec, StudyConfig, WORKERS_ENV};
use rvelab_core::{Configuration, MaterialPair, PackingParams, Protocol, ProtocolSpec, ShapeSpec, SolverSettings, VoxelGrid};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rvelab", version, about = "Random microstructures and apparent conductivities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack particles into a periodic cell.
    Pack(PackArgs),
    /// Draw one realization of a sampling protocol.
    Draw(DrawArgs),
    /// Rasterize a configuration into a voxel grid.
    Voxelize(VoxelizeArgs),
    /// Apparent conductivity of a voxel grid.
    Solve(SolveArgs),
    /// Solver against the first-order expansion for shrinking contrast.
    ExpansionCheck(ExpansionArgs),
    /// Monte-Carlo studies.
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Args)]
struct ShapeArgs {
    /// disk, sphere or fiber.
    #[arg(long)]
    shape: ShapeSpec,
    /// Fiber length over diameter.
    #[arg(long)]
    aspect: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    phi: f64,
    #[arg(long, default_value_t = 1.2)]
    isolation: f64,
}

impl ShapeArgs {
    fn shape(&self) -> Result<ShapeSpec> {
        match (self.shape, self.aspect) {
            (ShapeSpec::Fiber { .. }, Some(a)) => Ok(ShapeSpec::Fiber { aspect_ratio: a }),
            (s, None) => Ok(s),
            _ => bail!("--aspect applies to fibers only"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Mcm,
    Rsa,
}

impl From<GeneratorArg> for Generator {
    fn from(g: GeneratorArg) -> Self {
        match g {
            GeneratorArg::Mcm => Generator::Mcm,
            GeneratorArg::Rsa => Generator::Rsa,
        }
    }
}

#[derive(Args)]
struct PackArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Particle count (disks and spheres); the cell edge defaults to count^(1/d).
    #[arg(long)]
    count: Option<usize>,
    /// Cell edge; disks and spheres default to round(edge)^d particles.
    #[arg(long)]
    cell: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "mcm")]
    generator: GeneratorArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DrawArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// periodized, snapshot or poisson.
    #[arg(long)]
    protocol: Protocol,
    /// Cell size K (L/ℓ for fibers).
    #[arg(long = "K", alias = "size")]
    size: f64,
    #[arg(long)]
    magnification: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "mcm")]
    generator: GeneratorArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write a voxel grid with this many voxels per axis.
    #[arg(long)]
    voxels: Option<usize>,
    /// Raw grid path for --voxels; defaults to the output with extension `raw`.
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

#[derive(Args)]
struct VoxelizeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Voxels per axis.
    #[arg(long)]
    n: usize,
    /// Raw grid output; the JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolverArgs {
    /// Stop threshold of the convergence metric.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// update or equilibrium.
    #[arg(long, default_value = "update")]
    metric: ConvergenceMetric,
    /// zero, identity or component_zeroed.
    #[arg(long, default_value = "zero")]
    nyquist: NyquistRule,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
}

impl SolverArgs {
    fn settings(&self) -> SolverSettings {
        SolverSettings {
            tolerance: self.tol,
            metric: self.metric,
            nyquist: self.nyquist,
            max_iters: self.max_iters,
            ..SolverSettings::default()
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Raw grid or its JSON sidecar.
    #[arg(long)]
    grid: PathBuf,
    /// Inclusion conductivity.
    #[arg(long, default_value_t = 1.2)]
    alpha1: f64,
    /// Matrix conductivity.
    #[arg(long, default_value_t = 0.2)]
    alpha2: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Solve only for the first unit load.
    #[arg(long)]
    first_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExpansionArgs {
    /// Use this grid instead of drawing a periodized one.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value = "sphere")]
    shape: ShapeSpec,
    #[arg(long, default_value_t = 0.3)]
    phi: f64,
    #[arg(long = "K", default_value_t = 2.0)]
    size: f64,
    #[arg(long, default_value_t = 16.0)]
    voxels_per_unit: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    alpha0: f64,
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
    #[arg(long, default_value_t = 3)]
    halvings: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Run or resume a study from a TOML or JSON config.
    Run {
        config: PathBuf,
        /// Worker threads (0 = all cores); overrides the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the summaries of a study directory.
    Summarize { dir: PathBuf },
    /// Compute the configured periodized reference.
    Reference {
        config: PathBuf,
        /// Overrides the configured reference size.
        #[arg(long = "K", alias = "size")]
        size: Option<f64>,
        #[arg(long)]
        realizations: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pack(args: &PackArgs) -> Result<i32> {
    let shape = args.shape.shape()?;
    let dim = shape.dim();
    let mut params = PackingParams::round(args.shape.phi, args.shape.isolation, args.seed);
    let (config, report) = match shape {
        ShapeSpec::Fiber { .. } => {
            if args.count.is_some() {
                bail!("fiber counts follow from the volume fraction; give --cell only");
            }
            let edge = args.cell.context("fibers need --cell")?;
            params = PackingParams::fibers(args.shape.phi, args.shape.isolation, args.seed);
            sam_pack(edge, shape.fiber_species().expect("fiber"), &params, &isotropic_target())?
        }
        _ => {
            let (count, edge) = match (args.count, args.cell) {
                (Some(c), Some(e)) => (c, e),
                (Some(c), None) => (c, (c as f64).powf(1.0 / dim as f64)),
                (None, Some(e)) => ((e.round() as usize).pow(dim as u32), e),
                (None, None) => bail!("give --count or --cell"),
            };
            match args.generator {
                GeneratorArg::Mcm => mcm_pack(shape.kind(), count, edge, &params)?,
                GeneratorArg::Rsa => rsa_pack(shape.kind(), count, edge, &params)?,
            }
        }
    };
    config.save(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.success {
        log::error!("{}", report.failure.as_deref().unwrap_or("packing failed"));
        return Ok(1);
    }
    Ok(0)
}

fn draw_cmd(args: &DrawArgs) -> Result<i32> {
    let shape = args.shape.shape()?;
    let mut spec = ProtocolSpec::new(args.protocol, shape, args.size, args.shape.phi, args.shape.isolation);
    spec.generator = args.generator.into();
    if let Some(m) = args.magnification {
        spec.magnification = m;
    }
    let d = draw(&spec, args.seed)?;
    d.config.save(&args.out)?;
    let mut summary = json!({
        "particles": d.config.len(),
        "attempts": d.attempts,
        "report": d.report,
    });
    if let Some(n) = args.voxels {
        let grid = voxelize(&d.config, n)?;
        let path = args.grid_out.clone().unwrap_or_else(|| args.out.with_extension("raw"));
        grid.save(&path)?;
        summary["grid"] = json!(path);
        summary["phi_measured"] = json!(measured_volume_fraction(&grid));
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

fn voxelize_cmd(args: &VoxelizeArgs) -> Result<i32> {
    let config = Configuration::load(&args.config)?;
    let grid = voxelize(&config, args.n)?;
    grid.save(&args.out)?;
    println!("{}", json!({ "n": args.n, "phi_measured": measured_volume_fraction(&grid) }));
    Ok(0)
}

fn solve(args: &SolveArgs) -> Result<i32> {
    let grid = VoxelGrid::load(&args.grid)?;
    let materials = MaterialPair::new(args.alpha1, args.alpha2)?;
    let settings = args.solver.settings();
    let columns: Vec<usize> = if args.first_only { vec![0] } else { (0..grid.dim()).collect() };
    let start = Instant::now();
    let r = apparent_columns(&grid, &materials, &settings, &columns)?;
    let wall = start.elapsed().as_secs_f64();
    let out = json!({
        "tensor": r.tensor,
        "a_bar": r.a_bar,
        "iterations": r.iterations,
        "residual": r.residual,
        "converged": r.converged,
        "phi_measured": r.phi_measured,
        "reference_alpha": r.reference_alpha,
        "asymmetry": r.asymmetry,
        "settings": settings,
        "timings": { "wall_s": wall, "per_iteration_s": wall / r.iterations.max(1) as f64 },
    });
    let text = serde_json::to_string_pretty(&out)?;
    match &args.out {
        Some(p) => write_text(p, &text)?,
        None => println!("{text}"),
    }
    Ok(if r.converged { 0 } else { 2 })
}

fn expansion_check(args: &ExpansionArgs) -> Result<i32> {
    let grid = match &args.grid {
        Some(p) => VoxelGrid::load(p)?,
        None => {
            let spec = ProtocolSpec::new(Protocol::Periodized, args.shape, args.size, args.phi, 1.2);
            let d = draw(&spec, args.seed)?;
            voxelize(&d.config, (args.voxels_per_unit * args.size).round() as usize)?
        }
    };
    let settings = SolverSettings { tolerance: args.tol, max_iters: 10_000, ..SolverSettings::default() };
    let rows = verify_expansion_order(&grid, args.alpha0, args.rho, args.halvings, &settings)?;
    let mut text = String::from("rho,alpha_inclusion,alpha_matrix,a_solver,a_first_order,deviation,ratio\n");
    for r in &rows {
        let ratio = if r.ratio.is_nan() { String::new() } else { r.ratio.to_string() };
        text += &format!(
            "{},{},{},{},{},{},{}\n",
            r.rho, r.alpha_inclusion, r.alpha_matrix, r.a_solver, r.a_first_order, r.deviation, ratio
        );
    }
    match &args.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn load_study(path: &Path, workers: Option<usize>) -> Result<StudyConfig> {
    let mut cfg = StudyConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(w) = workers {
        cfg.workers = w;
        std::env::remove_var(WORKERS_ENV);
    }
    Ok(cfg)
}

fn print_summaries(outcome: &rvelab_core::study::StudyOutcome) {
    println!("protocol,K,N,mean,std,excluded");
    for r in &outcome.report.summaries {
        println!("{},{},{},{},{},{}", r.protocol, r.size, r.n, r.mean, r.std, r.excluded);
    }
    println!("{} records, {} failed, written to {}", outcome.records, outcome.failures, outcome.dir.display());
}

fn study(cmd: &StudyCommand) -> Result<i32> {
    match cmd {
        StudyCommand::Run { config, workers, out } => {
            let mut cfg = load_study(config, *workers)?;
            if let Some(o) = out {
                cfg.output_dir = o.clone();
            }
            let outcome = run_study(&cfg)?;
            print_summaries(&outcome);
            Ok(outcome.exit_code())
        }
        StudyCommand::Summarize { dir } => {
            let outcome = summarize_dir(dir)?;
            print_summaries(&outcome);
            Ok(outcome.exit_code())
        }
        StudyCommand::Reference { config, size, realizations, workers } => {
            let cfg = load_study(config, *workers)?;
            let (cfg_size, cfg_n) = match cfg.reference {
                Some(ReferenceSpec::Run { size, realizations }) => (Some(size), Some(realizations)),
                _ => (None, None),
            };
            let size = size.or(cfg_size).context("no reference size configured; pass --K")?;
            let n = realizations.or(cfg_n).context("no reference count configured; pass --realizations")?;
            let s = compute_reference(&cfg, size, n)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Pack(a) => pack(a),
        Command::Draw(a) => draw_cmd(a),
        Command::Voxelize(a) => voxelize_cmd(a),
        Command::Solve(a) => solve(a),
        Command::ExpansionCheck(a) => expansion_check(a),
        Command::Study(c) => study(c),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

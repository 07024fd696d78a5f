//! Monte-Carlo studies: seeded realizations (pack, draw, voxelize, solve)
//! dispatched over a worker pool, appended to `realizations.csv` in index
//! order, and summarized per protocol and cell size.
//!
//! Study directory layout:
//!
//! - `config.json`: the resolved study configuration
//! - `realizations.csv`: one record per realization
//! - `summary.csv`: per-(protocol, size) statistics
//! - `vf_curve.csv`: normalized volume-fraction deviations
//! - `fits.json`: log-log slopes over the sizes
//! - `reference.json`: the reference value, when one is configured

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{default_schedule, radius_for_fraction, DescentParams};
use crate::raster::voxelize;
use crate::rng::{derive_seed, retry_seed};
use crate::sampling::{draw, Generator, Protocol, ProtocolSpec, ShapeSpec};
use crate::solver::{apparent_columns, MaterialPair, SolverSettings};
use crate::stats::{
    scaling_fit, std_dev, success_probability, summarize_values, vf_variance_curve, SampleSet, ScalingFit,
    StudySummary, VfPoint,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable overriding the configured worker count.
pub const WORKERS_ENV: &str = "RVELAB_WORKERS";

pub const CONFIG_FILE: &str = "config.json";
pub const REALIZATIONS_FILE: &str = "realizations.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const VF_CURVE_FILE: &str = "vf_curve.csv";
pub const FITS_FILE: &str = "fits.json";
pub const REFERENCE_FILE: &str = "reference.json";

pub use crate::stats::MIN_VF_REALIZATIONS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// `n = v · size` (16 per particle spacing for disks and spheres).
    VoxelsPerUnit(f64),
    /// `n = v · L / d` with `d` the particle diameter.
    VoxelsPerDiameter(f64),
}

impl Resolution {
    pub fn voxels(&self, shape: &ShapeSpec, phi: f64, size: f64) -> Result<usize> {
        let n = match *self {
            Resolution::VoxelsPerUnit(v) => v * size,
            Resolution::VoxelsPerDiameter(v) => {
                let d = match shape {
                    ShapeSpec::Fiber { aspect_ratio } => 1.0 / aspect_ratio,
                    _ => 2.0 * radius_for_fraction(shape.kind(), 1, 1.0, phi)?,
                };
                v * size / d
            }
        };
        let n = n.round();
        if !(n >= 1.0 && n.is_finite()) {
            return Err(Error::invalid(format!("resolution rule gives {n} voxels per axis")));
        }
        Ok(n as usize)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    /// Only the first column, enough for `ā = A₁₁`.
    #[default]
    First,
    /// One solve per axis; records every diagonal entry.
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    #[default]
    Conductivity,
    /// Geometry only: draw and voxelize, no solve.
    VolumeFraction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceSpec {
    /// A known value.
    Value(f64),
    /// Periodized runs at a large size.
    Run { size: f64, realizations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub shape: ShapeSpec,
    /// Redundant with the shape; checked when given.
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub materials: MaterialPair,
    pub phi: f64,
    #[serde(default = "default_isolation")]
    pub isolation: f64,
    pub protocols: Vec<Protocol>,
    pub sizes: Vec<f64>,
    pub resolution: Resolution,
    pub realizations: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Zero uses every available core.
    #[serde(default)]
    pub workers: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub components: Components,
    #[serde(default)]
    pub quantity: Quantity,
    #[serde(default)]
    pub generator: Generator,
    /// Parent edge over snapshot edge; shape default when absent.
    #[serde(default)]
    pub magnification: Option<f64>,
    /// Step of the volume-fraction schedule; shape default when absent.
    #[serde(default)]
    pub phi_step: Option<f64>,
    #[serde(default)]
    pub descent: Option<DescentParams>,
    /// Extra draws with a derived seed after a failed packing.
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_name() -> String {
    "study".into()
}

fn default_isolation() -> f64 {
    1.2
}

fn default_retries() -> usize {
    1
}

impl StudyConfig {
    pub fn new(shape: ShapeSpec, phi: f64, protocols: Vec<Protocol>, sizes: Vec<f64>, output_dir: PathBuf) -> Self {
        let resolution = if shape.is_round() {
            Resolution::VoxelsPerUnit(16.0)
        } else {
            Resolution::VoxelsPerDiameter(5.0)
        };
        StudyConfig {
            name: default_name(),
            shape,
            dimension: None,
            materials: MaterialPair::default(),
            phi,
            isolation: default_isolation(),
            protocols,
            sizes,
            resolution,
            realizations: 100,
            master_seed: 0,
            workers: 0,
            output_dir,
            reference: None,
            solver: SolverSettings::default(),
            components: Components::First,
            quantity: Quantity::Conductivity,
            generator: Generator::Mcm,
            magnification: None,
            phi_step: None,
            descent: None,
            retries: default_retries(),
        }
    }

    /// Reads TOML or JSON, chosen by extension (TOML unless `.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: StudyConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dimension {
            if d != self.shape.dim() {
                return Err(Error::invalid(format!("dimension {d} does not match shape {:?}", self.shape)));
            }
        }
        if self.realizations == 0 {
            return Err(Error::invalid("realizations must be at least 1"));
        }
        if self.protocols.is_empty() || self.sizes.is_empty() {
            return Err(Error::invalid("protocol and size lists must be non-empty"));
        }
        let mut seen = self.protocols.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.protocols.len() {
            return Err(Error::invalid("protocols listed twice"));
        }
        if self.sizes.iter().enumerate().any(|(i, s)| self.sizes[..i].contains(s)) {
            return Err(Error::invalid("sizes listed twice"));
        }
        let (Resolution::VoxelsPerUnit(v) | Resolution::VoxelsPerDiameter(v)) = self.resolution;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid("resolution must be positive"));
        }
        if matches!(self.resolution, Resolution::VoxelsPerUnit(_)) && !self.shape.is_round() {
            return Err(Error::invalid("fibers are resolved in voxels per diameter"));
        }
        self.materials.validate()?;
        self.solver.validate()?;
        for &p in &self.protocols {
            for &s in &self.sizes {
                self.protocol_spec(p, s).validate()?;
                self.resolution.voxels(&self.shape, self.phi, s)?;
            }
        }
        if let Some(ReferenceSpec::Value(v)) = self.reference {
            if !(v > 0.0) {
                return Err(Error::invalid("reference value must be positive"));
            }
        }
        if let Some(ReferenceSpec::Run { size, realizations }) = self.reference {
            if realizations < 2 {
                return Err(Error::invalid("a reference run needs at least two realizations"));
            }
            self.protocol_spec(Protocol::Periodized, size).validate()?;
        }
        Ok(())
    }

    pub fn protocol_spec(&self, protocol: Protocol, size: f64) -> ProtocolSpec {
        let mut spec = ProtocolSpec::new(protocol, self.shape, size, self.phi, self.isolation);
        spec.generator = self.generator;
        if let Some(m) = self.magnification {
            spec.magnification = m;
        }
        if let Some(step) = self.phi_step {
            spec.packing.phi_schedule = default_schedule(self.phi, step);
        }
        if let Some(d) = &self.descent {
            spec.packing.descent = d.clone();
        }
        spec
    }

    /// Stable hash of everything that determines the records.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.name = String::new();
        canonical.workers = 0;
        canonical.output_dir = PathBuf::new();
        canonical.reference = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        format!("{:016x}", crate::rng::tag(&text))
    }

    pub fn worker_count(&self) -> usize {
        let configured = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(self.workers);
        if configured == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            configured
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    PackingFailed,
    Unconverged,
    Diverged,
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::PackingFailed => "packing_failed",
            Status::Unconverged => "unconverged",
            Status::Diverged => "diverged",
        }
    }

    fn parse(s: &str) -> Option<Status> {
        [Status::Ok, Status::PackingFailed, Status::Unconverged, Status::Diverged]
            .into_iter()
            .find(|st| st.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealizationRecord {
    pub protocol: Protocol,
    pub size: f64,
    pub seed: u64,
    pub n: usize,
    pub phi_measured: f64,
    /// Diagonal of the apparent tensor; NaN where not solved.
    pub diagonal: Vec<f64>,
    pub iters: usize,
    pub residual: f64,
    pub index: usize,
    pub status: Status,
    pub attempts: usize,
    pub config_hash: String,
    pub code_version: String,
    pub failure: String,
}

impl RealizationRecord {
    pub fn a_bar(&self) -> f64 {
        self.diagonal[0]
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse()
    }
}

/// Column names of `realizations.csv` for a `dim`-dimensional study.
pub fn record_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["protocol", "K", "seed", "n", "phi_measured"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=dim).map(|i| format!("a{i}{i}")));
    h.extend(
        ["iters", "residual", "index", "status", "attempts", "config_hash", "code_version", "failure"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn record_fields(r: &RealizationRecord) -> Vec<String> {
    let mut f = vec![
        r.protocol.name().to_string(),
        fmt_f64(r.size),
        r.seed.to_string(),
        r.n.to_string(),
        fmt_f64(r.phi_measured),
    ];
    f.extend(r.diagonal.iter().map(|&v| fmt_f64(v)));
    f.extend([
        r.iters.to_string(),
        fmt_f64(r.residual),
        r.index.to_string(),
        r.status.name().to_string(),
        r.attempts.to_string(),
        r.config_hash.clone(),
        r.code_version.clone(),
        r.failure.clone(),
    ]);
    f
}

/// Reads `realizations.csv`, validating the header.
pub fn read_records(path: &Path) -> Result<Vec<RealizationRecord>> {
    let schema = |message: String| Error::Schema { path: path.to_path_buf(), message };
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let dim = match header.iter().filter(|h| h.starts_with('a') && h.len() == 3).count() {
        d @ (2 | 3) => d,
        d => return Err(schema(format!("expected 2 or 3 tensor columns, found {d}"))),
    };
    if header != record_header(dim) {
        return Err(schema(format!("unexpected columns {header:?}")));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |what: &str| schema(format!("record {}: bad {what}", line + 1));
        let get = |i: usize| row.get(i).unwrap_or("");
        let diagonal: Vec<f64> = (0..dim)
            .map(|k| parse_f64(get(5 + k)).map_err(|_| bad("tensor entry")))
            .collect::<Result<_>>()?;
        let o = 5 + dim;
        out.push(RealizationRecord {
            protocol: get(0).parse().map_err(|_| bad("protocol"))?,
            size: parse_f64(get(1)).map_err(|_| bad("K"))?,
            seed: get(2).parse().map_err(|_| bad("seed"))?,
            n: get(3).parse().map_err(|_| bad("n"))?,
            phi_measured: parse_f64(get(4)).map_err(|_| bad("phi_measured"))?,
            diagonal,
            iters: get(o).parse().map_err(|_| bad("iters"))?,
            residual: parse_f64(get(o + 1)).map_err(|_| bad("residual"))?,
            index: get(o + 2).parse().map_err(|_| bad("index"))?,
            status: Status::parse(get(o + 3)).ok_or_else(|| bad("status"))?,
            attempts: get(o + 4).parse().map_err(|_| bad("attempts"))?,
            config_hash: get(o + 5).to_string(),
            code_version: get(o + 6).to_string(),
            failure: get(o + 7).to_string(),
        });
    }
    Ok(out)
}

/// Seed of realization `index`; fractional fiber sizes hash by bit pattern.
pub fn realization_seed(master: u64, protocol: Protocol, size: f64, index: usize) -> u64 {
    let size_key = if size.fract() == 0.0 && size < 1e15 { size as u64 } else { size.to_bits() };
    derive_seed(master, protocol.name(), size_key, index as u64)
}

/// Runs one realization end to end. Packing failures and solver trouble
/// become record statuses; anything else is an error.
pub fn realize(cfg: &StudyConfig, spec: &ProtocolSpec, index: usize, hash: &str) -> Result<RealizationRecord> {
    let seed = realization_seed(cfg.master_seed, spec.protocol, spec.size, index);
    let dim = cfg.shape.dim();
    let n = cfg.resolution.voxels(&cfg.shape, cfg.phi, spec.size)?;
    let mut record = RealizationRecord {
        protocol: spec.protocol,
        size: spec.size,
        seed,
        n,
        phi_measured: f64::NAN,
        diagonal: vec![f64::NAN; dim],
        iters: 0,
        residual: f64::NAN,
        index,
        status: Status::Ok,
        attempts: 0,
        config_hash: hash.to_string(),
        code_version: CODE_VERSION.to_string(),
        failure: String::new(),
    };
    let mut drawn = None;
    for attempt in 0..=cfg.retries {
        match draw(spec, retry_seed(seed, attempt as u64)) {
            Ok(d) => {
                record.attempts += d.attempts;
                drawn = Some(d);
                break;
            }
            Err(Error::PackingFailed(report)) => {
                record.attempts += 1;
                record.failure = report.failure.unwrap_or_else(|| "packing failed".into());
                log::warn!("{} K={} #{index} attempt {attempt}: {}", spec.protocol, spec.size, record.failure);
            }
            Err(e) => return Err(e),
        }
    }
    let Some(d) = drawn else {
        record.status = Status::PackingFailed;
        return Ok(record);
    };
    record.failure.clear();
    let grid = voxelize(&d.config, n)?;
    record.phi_measured = crate::raster::measured_volume_fraction(&grid);
    if cfg.quantity == Quantity::VolumeFraction {
        return Ok(record);
    }
    let columns: Vec<usize> = match cfg.components {
        Components::First => vec![0],
        Components::All => (0..dim).collect(),
    };
    match apparent_columns(&grid, &cfg.materials, &cfg.solver, &columns) {
        Ok(r) => {
            for &c in &columns {
                record.diagonal[c] = r.tensor[c][c];
            }
            record.iters = r.iterations;
            record.residual = r.residual;
            if !r.converged {
                record.status = Status::Unconverged;
                record.failure = format!("no convergence within {} iterations", cfg.solver.max_iters);
            }
            let lo = cfg.materials.harmonic_mean(record.phi_measured);
            let hi = cfg.materials.arithmetic_mean(record.phi_measured);
            for &c in &columns {
                let a = r.tensor[c][c];
                if a < lo - 1e-6 || a > hi + 1e-6 {
                    log::warn!("{} K={} #{index}: a{c}{c} = {a} outside [{lo}, {hi}]", spec.protocol, spec.size);
                }
            }
        }
        Err(Error::SolverDiverged { iterations }) => {
            record.status = Status::Diverged;
            record.iters = iterations;
            record.failure = format!("non-finite iterate after {iterations} iterations");
        }
        Err(e) => return Err(e),
    }
    Ok(record)
}

/// Per-(protocol, size) row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub protocol: Protocol,
    pub size: f64,
    /// Successful realizations entering the statistics.
    pub n: usize,
    pub mean: f64,
    /// NaN when fewer than two realizations succeeded.
    pub std: f64,
    pub ci99: f64,
    pub rel_sys: f64,
    pub rel_rand: f64,
    pub p_1pct: f64,
    pub p_01pct: f64,
    /// Failed realizations left out.
    pub excluded: usize,
    pub flags: String,
}

pub const SUMMARY_HEADER: [&str; 12] =
    ["protocol", "K", "N", "mean", "std", "ci99", "rel_sys", "rel_rand", "p_1pct", "p_0.1pct", "excluded", "flags"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyFits {
    /// Standard deviation of `ā` against size.
    pub std_slope: BTreeMap<String, ScalingFit>,
    /// Relative systematic error against size (needs a reference).
    pub rel_sys_slope: BTreeMap<String, ScalingFit>,
    /// Normalized volume-fraction deviation against size.
    pub vf_slope: BTreeMap<String, ScalingFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub value: f64,
    /// Present for computed references.
    pub summary: Option<StudySummary>,
    pub size: Option<f64>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyReport {
    pub summaries: Vec<SummaryRow>,
    pub vf_curves: BTreeMap<String, Vec<VfPoint>>,
    pub fits: StudyFits,
    pub reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutcome {
    pub dir: PathBuf,
    pub records: usize,
    pub failures: usize,
    pub report: StudyReport,
}

impl StudyOutcome {
    /// Process exit code: 0 success, 2 when some realizations failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures > 0 {
            2
        } else {
            0
        }
    }
}

fn cells(cfg: &StudyConfig) -> Vec<(Protocol, f64)> {
    cfg.protocols.iter().flat_map(|&p| cfg.sizes.iter().map(move |&s| (p, s))).collect()
}

/// Records already on disk that form a prefix of this study's canonical order.
fn resumable_prefix(cfg: &StudyConfig, path: &Path, hash: &str) -> Vec<RealizationRecord> {
    let Ok(existing) = read_records(path) else {
        return Vec::new();
    };
    let order = cells(cfg)
        .into_iter()
        .flat_map(|(p, s)| (0..cfg.realizations).map(move |i| (p, s, i)));
    let mut keep = Vec::new();
    for (rec, (p, s, i)) in existing.into_iter().zip(order) {
        if rec.protocol != p || rec.size != s || rec.index != i || rec.config_hash != hash {
            break;
        }
        keep.push(rec);
    }
    keep
}

fn write_records(path: &Path, dim: usize, records: &[RealizationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(record_header(dim))?;
    for r in records {
        w.write_record(record_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

/// Runs (or resumes) a study and writes its summaries.
///
/// Records already present with the same configuration hash are kept;
/// the remaining realizations are computed in parallel chunks and appended
/// in index order, so the file content does not depend on the worker count.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    let hash = cfg.hash();
    let dim = cfg.shape.dim();
    let path = dir.join(REALIZATIONS_FILE);
    let mut records = resumable_prefix(cfg, &path, &hash);
    if !records.is_empty() {
        log::info!("resuming {} after {} records", dir.display(), records.len());
    }
    // rewrite so that a torn last line or foreign records disappear
    write_records(&path, dim, &records)?;
    let workers = cfg.worker_count();
    let pool = build_pool(workers)?;
    let chunk = (4 * workers).max(8);
    let file = OpenOptions::new().append(true).open(&path)?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    let start = Instant::now();
    let mut done_before = records.len();
    for (protocol, size) in cells(cfg) {
        let spec = cfg.protocol_spec(protocol, size);
        let first = done_before.min(cfg.realizations);
        done_before -= first;
        let cell_start = Instant::now();
        let mut next = first;
        while next < cfg.realizations {
            let end = (next + chunk).min(cfg.realizations);
            let batch: Vec<Result<RealizationRecord>> =
                pool.install(|| (next..end).into_par_iter().map(|i| realize(cfg, &spec, i, &hash)).collect());
            for r in batch {
                let r = r?;
                out.write_record(record_fields(&r))?;
                records.push(r);
            }
            out.flush()?;
            next = end;
        }
        if first < cfg.realizations {
            log::info!(
                "{protocol} K={size}: {} realizations in {:.1}s",
                cfg.realizations - first,
                cell_start.elapsed().as_secs_f64()
            );
        }
    }
    drop(out);
    log::info!("study {} finished in {:.1}s", cfg.name, start.elapsed().as_secs_f64());
    let reference = resolve_reference(cfg)?;
    let report = write_summaries(cfg, &dir, &records, reference)?;
    let failures = records.iter().filter(|r| r.status != Status::Ok).count();
    Ok(StudyOutcome { dir, records: records.len(), failures, report })
}

fn resolve_reference(cfg: &StudyConfig) -> Result<Option<f64>> {
    match cfg.reference {
        None => Ok(None),
        Some(ReferenceSpec::Value(v)) => {
            let rec = ReferenceRecord { value: v, summary: None, size: None, config_hash: None };
            fs::write(cfg.output_dir.join(REFERENCE_FILE), serde_json::to_string_pretty(&rec)?)?;
            Ok(Some(v))
        }
        Some(ReferenceSpec::Run { size, realizations }) => Ok(Some(compute_reference(cfg, size, realizations)?.mean)),
    }
}

/// Config of the periodized reference run behind `cfg`.
pub fn reference_config(cfg: &StudyConfig, size: f64, realizations: usize) -> StudyConfig {
    StudyConfig {
        name: format!("{}-reference", cfg.name),
        protocols: vec![Protocol::Periodized],
        sizes: vec![size],
        realizations,
        output_dir: cfg.output_dir.join("reference"),
        reference: None,
        ..cfg.clone()
    }
}

/// Mean and 99% interval of `realizations` periodized runs at `size`,
/// stored as the study's `reference.json`. Runs live in `reference/` and
/// are resumed like any study.
pub fn compute_reference(cfg: &StudyConfig, size: f64, realizations: usize) -> Result<StudySummary> {
    let rcfg = reference_config(cfg, size, realizations);
    let outcome = run_study(&rcfg)?;
    let values: Vec<f64> = read_records(&outcome.dir.join(REALIZATIONS_FILE))?
        .iter()
        .filter(|r| r.status == Status::Ok)
        .map(|r| r.a_bar())
        .collect();
    let summary = summarize_values(&values)?;
    let rec = ReferenceRecord { value: summary.mean, summary: Some(summary), size: Some(size), config_hash: Some(rcfg.hash()) };
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(REFERENCE_FILE), serde_json::to_string_pretty(&rec)?)?;
    Ok(summary)
}

/// Volume fraction at which the reference length `L₀` is the particle spacing.
pub const L0_REFERENCE_PHI: f64 = 0.3;

/// `L₀` in cell-size units: cells of size `K` hold `K^d` disks or spheres,
/// so at fraction `φ` the particles of the `φ = 30%` spacing sit at
/// `L₀ = (φ / 0.3)^(1/d)`. Fiber sizes are already `L/ℓ`.
pub fn reference_length(cfg: &StudyConfig) -> f64 {
    if cfg.shape.is_round() {
        (cfg.phi / L0_REFERENCE_PHI).powf(1.0 / cfg.shape.dim() as f64)
    } else {
        1.0
    }
}

fn size_label(size: f64) -> String {
    format!("{size}")
}

/// Statistics of a finished record set; writes `summary.csv`,
/// `vf_curve.csv` and `fits.json` into `dir`.
pub fn write_summaries(
    cfg: &StudyConfig,
    dir: &Path,
    records: &[RealizationRecord],
    reference: Option<f64>,
) -> Result<StudyReport> {
    let mut summaries = Vec::new();
    let mut vf_series: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for (protocol, size) in cells(cfg) {
        let cell: Vec<&RealizationRecord> =
            records.iter().filter(|r| r.protocol == protocol && r.size == size).collect();
        if cell.is_empty() {
            continue;
        }
        let ok: Vec<&RealizationRecord> = cell.iter().copied().filter(|r| r.status == Status::Ok).collect();
        let excluded = cell.len() - ok.len();
        let phis: Vec<f64> = ok.iter().map(|r| r.phi_measured).collect();
        if phis.len() >= MIN_VF_REALIZATIONS {
            vf_series.entry(protocol.name().to_string()).or_default().push((size, phis.clone()));
        }
        let values: Vec<f64> = if cfg.quantity == Quantity::VolumeFraction {
            phis
        } else {
            ok.iter().map(|r| r.a_bar()).collect()
        };
        let mut row = SummaryRow {
            protocol,
            size,
            n: values.len(),
            mean: f64::NAN,
            std: f64::NAN,
            ci99: f64::NAN,
            rel_sys: f64::NAN,
            rel_rand: f64::NAN,
            p_1pct: f64::NAN,
            p_01pct: f64::NAN,
            excluded,
            flags: String::new(),
        };
        match values.len() {
            0 => row.flags = "no_successful_realizations".into(),
            1 => {
                row.mean = values[0];
                row.flags = "std_undefined".into();
            }
            _ => {
                let s = summarize_values(&values)?;
                row.mean = s.mean;
                row.std = s.std;
                row.ci99 = s.ci_halfwidth;
                row.rel_rand = s.std / s.mean;
            }
        }
        if let (Some(reference), false) = (reference, values.is_empty()) {
            let set = SampleSet::from_values(values.clone());
            row.rel_sys = (row.mean / reference - 1.0).abs();
            row.p_1pct = success_probability(&set, reference, 0.01)?;
            row.p_01pct = success_probability(&set, reference, 0.001)?;
        }
        summaries.push(row);
    }

    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE))?;
    w.write_record(SUMMARY_HEADER)?;
    for r in &summaries {
        w.write_record([
            r.protocol.name().to_string(),
            size_label(r.size),
            r.n.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.std),
            fmt_f64(r.ci99),
            fmt_f64(r.rel_sys),
            fmt_f64(r.rel_rand),
            fmt_f64(r.p_1pct),
            fmt_f64(r.p_01pct),
            r.excluded.to_string(),
            r.flags.clone(),
        ])?;
    }
    w.flush()?;

    let mut vf_curves = BTreeMap::new();
    let mut w = csv::Writer::from_path(dir.join(VF_CURVE_FILE))?;
    w.write_record(["protocol", "K", "L_over_L0", "N", "mean_phi", "normalized_std"])?;
    for (protocol, series) in &vf_series {
        let curve = vf_variance_curve(series, cfg.phi, reference_length(cfg))?;
        for p in &curve {
            w.write_record([
                protocol.clone(),
                size_label(p.size),
                fmt_f64(p.relative_size),
                p.realizations.to_string(),
                fmt_f64(p.mean_phi),
                fmt_f64(p.normalized_std),
            ])?;
        }
        vf_curves.insert(protocol.clone(), curve);
    }
    w.flush()?;

    let mut fits = StudyFits::default();
    for protocol in &cfg.protocols {
        let rows: Vec<&SummaryRow> = summaries.iter().filter(|r| r.protocol == *protocol).collect();
        let std_pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.std > 0.0).map(|r| (r.size, r.std)).collect();
        if std_pts.len() >= 3 {
            fits.std_slope.insert(protocol.name().into(), scaling_fit(&std_pts)?);
        }
        let sys_pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.rel_sys > 0.0).map(|r| (r.size, r.rel_sys)).collect();
        if sys_pts.len() >= 3 {
            fits.rel_sys_slope.insert(protocol.name().into(), scaling_fit(&sys_pts)?);
        }
        if let Some(curve) = vf_curves.get(protocol.name()) {
            let pts: Vec<(f64, f64)> =
                curve.iter().filter(|p| p.normalized_std > 0.0).map(|p| (p.relative_size, p.normalized_std)).collect();
            if pts.len() >= 3 {
                fits.vf_slope.insert(protocol.name().into(), scaling_fit(&pts)?);
            }
        }
    }
    fs::write(dir.join(FITS_FILE), serde_json::to_string_pretty(&fits)?)?;
    Ok(StudyReport { summaries, vf_curves, fits, reference })
}

/// Recomputes the summaries of an existing study directory.
pub fn summarize_dir(dir: &Path) -> Result<StudyOutcome> {
    let cfg: StudyConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let records = read_records(&dir.join(REALIZATIONS_FILE))?;
    let reference = match fs::read_to_string(dir.join(REFERENCE_FILE)) {
        Ok(text) => Some(serde_json::from_str::<ReferenceRecord>(&text)?.value),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let report = write_summaries(&cfg, dir, &records, reference)?;
    let failures = records.iter().filter(|r| r.status != Status::Ok).count();
    Ok(StudyOutcome { dir: dir.to_path_buf(), records: records.len(), failures, report })
}

/// Writes a radially binned autocorrelation curve as CSV.
pub fn write_correlation_csv(path: &Path, curve: &crate::stats::CorrelationCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["distance_over_radius", "h", "count"])?;
    for i in 0..curve.h.len() {
        w.write_record([fmt_f64(curve.distance[i]), fmt_f64(curve.h[i]), curve.counts[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Sample standard deviation of the successful `ā` values of one cell.
pub fn cell_std(records: &[RealizationRecord], protocol: Protocol, size: f64) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.protocol == protocol && r.size == size && r.status == Status::Ok)
        .map(|r| r.a_bar())
        .collect();
    std_dev(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> StudyConfig {
        let mut cfg = StudyConfig::new(ShapeSpec::Disk, 0.3, vec![Protocol::Periodized, Protocol::Snapshot], vec![2.0, 4.0], dir.to_path_buf());
        cfg.realizations = 6;
        cfg.master_seed = 9;
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let text = r#"
            shape = "disk"
            phi = 0.3
            protocols = ["periodized", "snapshot"]
            sizes = [2, 4]
            resolution = { voxels_per_unit = 16 }
            realizations = 10
            output_dir = "out"
            reference = 0.3174257
            [solver]
            tolerance = 1e-6
        "#;
        let cfg: StudyConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.reference, Some(ReferenceSpec::Value(0.3174257)));
        assert_eq!(cfg.isolation, 1.2);
        let back: StudyConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let run: StudyConfig = toml::from_str(&text.replace("0.3174257", "{ size = 8, realizations = 10 }")).unwrap();
        assert_eq!(run.reference, Some(ReferenceSpec::Run { size: 8.0, realizations: 10 }));
        assert!(toml::from_str::<StudyConfig>(&format!("bogus = 1\n{text}")).is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let dir = PathBuf::from("unused");
        let mut cfg = small(&dir);
        cfg.validate().unwrap();
        cfg.dimension = Some(3);
        assert!(cfg.validate().is_err());
        cfg.dimension = None;
        cfg.sizes = vec![2.5];
        assert!(cfg.validate().is_err());
        cfg.sizes = vec![2.0, 2.0];
        assert!(cfg.validate().is_err());
        cfg.sizes = vec![2.0];
        cfg.realizations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolution_rules() {
        assert_eq!(Resolution::VoxelsPerUnit(16.0).voxels(&ShapeSpec::Sphere, 0.3, 4.0).unwrap(), 64);
        let fiber = ShapeSpec::Fiber { aspect_ratio: 20.0 };
        assert_eq!(Resolution::VoxelsPerDiameter(5.0).voxels(&fiber, 0.15, 1.0).unwrap(), 100);
    }

    #[test]
    fn reference_length_matches_particle_volume() {
        let mut cfg = small(Path::new("x"));
        assert_eq!(reference_length(&cfg), 1.0);
        cfg.phi = 0.5;
        // one disk of area 0.5 has the area of 0.3 L0^2
        assert!((0.3 * reference_length(&cfg).powi(2) - 0.5).abs() < 1e-12);
        cfg.shape = ShapeSpec::Fiber { aspect_ratio: 20.0 };
        assert_eq!(reference_length(&cfg), 1.0);
    }

    #[test]
    fn hash_ignores_workers_and_paths() {
        let a = small(Path::new("a"));
        let mut b = small(Path::new("b"));
        b.workers = 7;
        assert_eq!(a.hash(), b.hash());
        b.master_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn study_is_reproducible_and_resumable() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(&tmp.path().join("one"));
        let first = run_study(&cfg).unwrap();
        assert_eq!(first.records, 24);
        assert_eq!(first.exit_code(), 0);
        let text = fs::read_to_string(tmp.path().join("one").join(REALIZATIONS_FILE)).unwrap();

        let mut two = cfg.clone();
        two.output_dir = tmp.path().join("two");
        two.workers = 3;
        run_study(&two).unwrap();
        assert_eq!(text, fs::read_to_string(tmp.path().join("two").join(REALIZATIONS_FILE)).unwrap());

        // tear the file mid-record and resume
        let path = tmp.path().join("two").join(REALIZATIONS_FILE);
        fs::write(&path, &text[..text.len() * 2 / 3]).unwrap();
        run_study(&two).unwrap();
        assert_eq!(text, fs::read_to_string(&path).unwrap());

        let records = read_records(&path).unwrap();
        assert!(records.iter().all(|r| r.status == Status::Ok && r.a_bar() > 0.2 && r.a_bar() < 1.2));
        assert!(records.iter().all(|r| r.diagonal[1].is_nan()));
        let summary = fs::read_to_string(tmp.path().join("two").join(SUMMARY_FILE)).unwrap();
        assert_eq!(summary.lines().count(), 5);
        assert!(summary.starts_with("protocol,K,N,mean,std,ci99,rel_sys,rel_rand,p_1pct,p_0.1pct"));
    }

    #[test]
    fn single_realization_flags_undefined_std() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.protocols = vec![Protocol::Periodized];
        cfg.sizes = vec![2.0];
        cfg.realizations = 1;
        cfg.reference = Some(ReferenceSpec::Value(0.3174257));
        let out = run_study(&cfg).unwrap();
        assert_eq!(out.records, 1);
        let row = &out.report.summaries[0];
        assert_eq!(row.flags, "std_undefined");
        assert!(row.std.is_nan() && row.mean > 0.0);
        let again = summarize_dir(tmp.path()).unwrap();
        assert_eq!(again.report.summaries[0].mean, row.mean);
        assert_eq!(again.report.reference, Some(0.3174257));
    }

    #[test]
    fn failed_packings_are_recorded_and_excluded() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = StudyConfig::new(ShapeSpec::Sphere, 0.4, vec![Protocol::Periodized], vec![2.0], tmp.path().into());
        cfg.realizations = 2;
        cfg.workers = 1;
        cfg.descent = Some(DescentParams { max_iters: 200, ..Default::default() });
        let out = run_study(&cfg).unwrap();
        assert_eq!(out.failures, 2);
        assert_eq!(out.exit_code(), 2);
        let records = read_records(&tmp.path().join(REALIZATIONS_FILE)).unwrap();
        assert!(records.iter().all(|r| r.status == Status::PackingFailed && r.attempts == 2 && !r.failure.is_empty()));
        assert_eq!(out.report.summaries[0].excluded, 2);
        assert_eq!(out.report.summaries[0].flags, "no_successful_realizations");
    }

    #[test]
    fn homogeneous_reference_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.materials = MaterialPair::new(0.7, 0.7).unwrap();
        let s = compute_reference(&cfg, 2.0, 3).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!(s.ci_halfwidth < 1e-12);
        let rec: ReferenceRecord = serde_json::from_str(&fs::read_to_string(tmp.path().join(REFERENCE_FILE)).unwrap()).unwrap();
        assert_eq!(rec.value, s.mean);
    }

    #[test]
    fn schema_errors_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("r.csv");
        fs::write(&p, "protocol,K\nperiodized,2\n").unwrap();
        assert!(matches!(read_records(&p), Err(Error::Schema { .. })));
    }
}

//! Non-overlapping particle packings.
//!
//! * [`remove_overlaps`]: gradient descent on the overlap energy
//!   `W = ½ Σ_{i<j} δ_ij²`, `δ_ij = max(0, 2 r_eff - gap_ij)`.
//! * [`mcm_pack`]: mechanical contraction, alternating overlap removal with
//!   a rescaling of cell and centers along an increasing schedule of
//!   volume fractions.
//! * [`sam_pack`]: sequential addition and migration of spherocylinders in
//!   a cell of fixed size, with a penalty steering the second-order
//!   orientation tensor towards a target.
//! * [`rsa_pack`]: random sequential adsorption.
//!
//! Every routine reports failure through [`PackingReport`] instead of an
//! error; the configuration is returned as far as it got.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    add, norm, periodic_segment_contact, scale, segment_contact, sub, Cell, Configuration,
    NeighborIndex, Point, ShapeKind, Species, SpeciesMeta,
};

/// Relative inflation of the radius whose overlaps drive the descent; the
/// descent stops once the energy at the effective radius vanishes.
const WORK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentParams {
    /// Fraction of the negative energy gradient applied per step.
    pub step_size: f64,
    /// Divide each particle's step by its current number of overlaps.
    #[serde(default)]
    pub scale_by_multiplicity: bool,
    /// Stop once `W ≤ energy_tol`; `None` means `1e-20 (2 r_eff)^2` per particle.
    pub energy_tol: Option<f64>,
    pub max_iters: usize,
}

impl Default for DescentParams {
    fn default() -> Self {
        DescentParams { step_size: 0.5, scale_by_multiplicity: false, energy_tol: None, max_iters: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackingParams {
    pub target_phi: f64,
    /// Ratio of the radius used for overlap checks to the particle radius.
    pub isolation_factor: f64,
    pub phi_schedule: Vec<f64>,
    pub descent: DescentParams,
    pub seed: u64,
    /// Step factor of the orientation-penalty gradient (fibers only).
    pub orientation_weight: f64,
    /// Largest accepted entry-wise deviation of the orientation tensor from its target.
    pub orientation_tol: f64,
    /// Proposals per particle before random sequential adsorption gives up.
    pub proposals_per_particle: usize,
}

impl PackingParams {
    /// Defaults for disks and spheres: schedule in 10% steps.
    pub fn round(target_phi: f64, isolation_factor: f64, seed: u64) -> Self {
        Self::with_step(target_phi, isolation_factor, seed, 0.1)
    }

    /// Defaults for fibers: schedule in 5% steps.
    pub fn fibers(target_phi: f64, isolation_factor: f64, seed: u64) -> Self {
        Self::with_step(target_phi, isolation_factor, seed, 0.05)
    }

    pub fn with_step(target_phi: f64, isolation_factor: f64, seed: u64, step: f64) -> Self {
        PackingParams {
            target_phi,
            isolation_factor,
            phi_schedule: default_schedule(target_phi, step),
            descent: DescentParams::default(),
            seed,
            orientation_weight: 1.0,
            orientation_tol: 0.01,
            proposals_per_particle: 1000,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PackingParams { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_phi >= 0.0 && self.target_phi < 1.0) {
            return Err(Error::invalid(format!("target volume fraction {} not in [0, 1)", self.target_phi)));
        }
        if !(self.isolation_factor >= 1.0 && self.isolation_factor.is_finite()) {
            return Err(Error::invalid("isolation factor must be at least 1"));
        }
        if self.target_phi > 0.0 {
            if self.phi_schedule.is_empty() {
                return Err(Error::invalid("empty volume-fraction schedule"));
            }
            if self.phi_schedule.windows(2).any(|w| w[1] <= w[0]) || self.phi_schedule[0] <= 0.0 {
                return Err(Error::invalid("volume-fraction schedule must be positive and strictly increasing"));
            }
            let last = *self.phi_schedule.last().unwrap();
            if (last - self.target_phi).abs() > 1e-12 {
                return Err(Error::invalid("volume-fraction schedule must end at the target"));
            }
        }
        if self.descent.energy_tol.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::invalid("energy tolerance must be non-negative"));
        }
        if !(self.descent.step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        Ok(())
    }
}

/// `step, 2 step, …` strictly below `target`, then `target`.
pub fn default_schedule(target: f64, step: f64) -> Vec<f64> {
    if target <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut k = 1;
    while (k as f64) * step < target - 1e-9 {
        out.push(k as f64 * step);
        k += 1;
    }
    out.push(target);
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PackingReport {
    /// Descent iterations per contraction or addition step.
    pub iterations: Vec<usize>,
    pub final_energy: f64,
    pub wall_time_s: f64,
    pub success: bool,
    pub failure: Option<String>,
    /// Volume fraction reached by the returned configuration.
    pub achieved_phi: f64,
    pub particles: usize,
}

impl PackingReport {
    pub fn into_result(self) -> Result<Self> {
        if self.success {
            Ok(self)
        } else {
            Err(Error::PackingFailed(Box::new(self)))
        }
    }
}

/// Per-particle accumulation of one energy evaluation.
struct Sweep {
    energy: f64,
    /// Energy at the (smaller) check radius.
    check: f64,
    /// `Σ_j δ_ij u_ij`, `u_ij` the unit vector from the contact point on `j` to the one on `i`.
    push: Vec<Point>,
    /// Axis counterpart `Σ_j δ_ij s_ij u_ij` (fibers only).
    twist: Vec<Point>,
    multiplicity: Vec<u32>,
}

impl Sweep {
    fn new(n: usize, fibers: bool) -> Self {
        Sweep {
            energy: 0.0,
            check: 0.0,
            push: vec![[0.0; 3]; n],
            twist: if fibers { vec![[0.0; 3]; n] } else { Vec::new() },
            multiplicity: vec![0; n],
        }
    }
}

/// Fallback separation direction for coincident centers.
fn tie_direction(dim: usize) -> Point {
    if dim == 2 {
        let v = [1.0, 0.618_033_988_749_895, 0.0];
        scale(&v, 1.0 / norm(&v))
    } else {
        let v = [1.0, 0.618_033_988_749_895, 0.414_213_562_373_095];
        scale(&v, 1.0 / norm(&v))
    }
}

fn round_sweep(cell: &Cell, centers: &[Point], r_eff: f64, r_check: f64) -> Sweep {
    let n = centers.len();
    let mut sweep = Sweep::new(n, false);
    let reach = 2.0 * r_eff;
    let check = 2.0 * r_check;
    let index = NeighborIndex::build(cell, centers, reach);
    let tie = tie_direction(cell.dim());
    index.for_each_pair(|i, j| {
        let d = cell.delta(&centers[i], &centers[j]);
        let dist = norm(&d);
        if dist >= reach {
            return;
        }
        let delta = reach - dist;
        let u = if dist > 0.0 { scale(&d, 1.0 / dist) } else { tie };
        sweep.energy += 0.5 * delta * delta;
        if dist < check {
            sweep.check += 0.5 * (check - dist).powi(2);
        }
        sweep.push[i] = add(&sweep.push[i], &scale(&u, delta));
        sweep.push[j] = sub(&sweep.push[j], &scale(&u, delta));
        sweep.multiplicity[i] += 1;
        sweep.multiplicity[j] += 1;
    });
    sweep
}

/// Lattice offsets `m L ≠ 0` within `reach`, one representative of each `±m` pair.
fn self_image_offsets(cell: &Cell, reach: f64) -> Vec<Point> {
    if !cell.is_periodic() {
        return Vec::new();
    }
    cell.image_offsets()
        .into_iter()
        .filter(|o| {
            let first_nonzero = o.iter().find(|&&x| x != 0.0);
            matches!(first_nonzero, Some(&x) if x > 0.0) && norm(o) <= reach
        })
        .collect()
}

fn fiber_sweep(cell: &Cell, centers: &[Point], axes: &[Point], half: f64, r_eff: f64, r_check: f64) -> Sweep {
    let n = centers.len();
    let mut sweep = Sweep::new(n, true);
    let reach = 2.0 * r_eff;
    let check = 2.0 * r_check;
    let cutoff = 2.0 * half + reach;
    let index = NeighborIndex::build(cell, centers, cutoff);
    let tie = tie_direction(cell.dim());
    let record = |i: usize, j: Option<usize>, s: f64, t: f64, diff: Point, dist: f64, sweep: &mut Sweep| {
        let delta = reach - dist;
        let u = if dist > 0.0 { scale(&diff, 1.0 / dist) } else { tie };
        sweep.energy += 0.5 * delta * delta;
        if dist < check {
            sweep.check += 0.5 * (check - dist).powi(2);
        }
        match j {
            Some(j) => {
                sweep.push[i] = add(&sweep.push[i], &scale(&u, delta));
                sweep.push[j] = sub(&sweep.push[j], &scale(&u, delta));
                sweep.twist[i] = add(&sweep.twist[i], &scale(&u, delta * s));
                sweep.twist[j] = sub(&sweep.twist[j], &scale(&u, delta * t));
                sweep.multiplicity[i] += 1;
                sweep.multiplicity[j] += 1;
            }
            None => {
                sweep.twist[i] = add(&sweep.twist[i], &scale(&u, delta * (s - t)));
                sweep.multiplicity[i] += 1;
            }
        }
    };
    let offsets = cell.image_offsets();
    index.for_each_pair(|i, j| {
        let base = cell.delta(&centers[j], &centers[i]);
        for off in &offsets {
            let rel = add(&base, off);
            if norm(&rel) > cutoff {
                continue;
            }
            let img = add(&centers[i], &rel);
            let c = segment_contact(&centers[i], &axes[i], half, &img, &axes[j], half);
            if c.dist < reach {
                record(i, Some(j), c.s, c.t, c.diff, c.dist, &mut sweep);
            }
        }
    });
    let self_offsets = self_image_offsets(cell, cutoff);
    if !self_offsets.is_empty() {
        for i in 0..n {
            for off in &self_offsets {
                let img = add(&centers[i], off);
                let c = segment_contact(&centers[i], &axes[i], half, &img, &axes[i], half);
                if c.dist < reach {
                    record(i, None, c.s, c.t, c.diff, c.dist, &mut sweep);
                }
            }
        }
    }
    sweep
}

fn sweep_config(config: &Configuration, r_eff: f64) -> Sweep {
    match config.species {
        Species::Spherocylinder { .. } => fiber_sweep(
            &config.cell,
            &config.centers,
            &config.axes,
            config.species.half_length(),
            r_eff,
            r_eff,
        ),
        _ => round_sweep(&config.cell, &config.centers, r_eff, r_eff),
    }
}

/// Overlap energy at the given effective radius.
///
/// For spherocylinders all overlapping periodic images are summed,
/// including a fiber's overlap with its own images.
pub fn overlap_energy(config: &Configuration, effective_radius: f64) -> f64 {
    sweep_config(config, effective_radius).energy
}

/// Gradient of [`overlap_energy`] with respect to centers and (for fibers) axes.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapGradient {
    pub centers: Vec<Point>,
    /// Empty for disks and spheres.
    pub axes: Vec<Point>,
}

pub fn overlap_gradient(config: &Configuration, effective_radius: f64) -> OverlapGradient {
    let sweep = sweep_config(config, effective_radius);
    OverlapGradient {
        centers: sweep.push.iter().map(|p| scale(p, -1.0)).collect(),
        axes: sweep.twist.iter().map(|p| scale(p, -1.0)).collect(),
    }
}

fn energy_tol(params: &PackingParams, r_eff: f64, n: usize) -> f64 {
    params
        .descent
        .energy_tol
        .unwrap_or(1e-20 * (2.0 * r_eff).powi(2) * n.max(1) as f64)
}

fn step_factor(params: &PackingParams, step: f64, multiplicity: u32) -> f64 {
    if params.descent.scale_by_multiplicity {
        step / multiplicity as f64
    } else {
        step
    }
}

/// Descent on the overlap energy of round particles; returns iterations and
/// the final working-radius energy.
fn descend_round(
    cell: &Cell,
    centers: &mut [Point],
    r_eff: f64,
    params: &PackingParams,
) -> (usize, f64, bool) {
    let r_work = r_eff * (1.0 + WORK_MARGIN);
    let tol = energy_tol(params, r_eff, centers.len());
    let step = params.descent.step_size;
    let mut iters = 0;
    loop {
        let sweep = round_sweep(cell, centers, r_work, r_eff);
        if sweep.check <= tol {
            return (iters, sweep.check, true);
        }
        if iters >= params.descent.max_iters {
            return (iters, sweep.check, false);
        }
        for (i, c) in centers.iter_mut().enumerate() {
            let m = sweep.multiplicity[i];
            if m > 0 {
                let moved = add(c, &scale(&sweep.push[i], step_factor(params, step, m)));
                *c = cell.wrap(&moved);
            }
        }
        iters += 1;
    }
}

/// Second-order orientation tensor `(1/N) Σ n nᵀ`.
pub fn orientation_tensor(axes: &[Point]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    if axes.is_empty() {
        return m;
    }
    for a in axes {
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += a[r] * a[c];
            }
        }
    }
    let inv = 1.0 / axes.len() as f64;
    m.iter_mut().flatten().for_each(|x| *x *= inv);
    m
}

pub fn isotropic_target() -> [[f64; 3]; 3] {
    let t = 1.0 / 3.0;
    [[t, 0.0, 0.0], [0.0, t, 0.0], [0.0, 0.0, t]]
}

pub fn orientation_deviation(axes: &[Point], target: &[[f64; 3]; 3]) -> f64 {
    if axes.is_empty() {
        return 0.0;
    }
    let m = orientation_tensor(axes);
    let mut dev: f64 = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            dev = dev.max((m[r][c] - target[r][c]).abs());
        }
    }
    dev
}

struct FiberDescent<'a> {
    cell: &'a Cell,
    half: f64,
    r_eff: f64,
    target: &'a [[f64; 3]; 3],
    params: &'a PackingParams,
}

impl FiberDescent<'_> {
    fn run(&self, centers: &mut [Point], axes: &mut [Point]) -> (usize, f64, bool) {
        let r_work = self.r_eff * (1.0 + WORK_MARGIN);
        let tol = energy_tol(self.params, self.r_eff, centers.len());
        let step = self.params.descent.step_size;
        // an end point moves by at most half of the translational share
        let twist_gain = 0.5 * step / (self.half * self.half);
        let mut iters = 0;
        loop {
            let sweep = fiber_sweep(self.cell, centers, axes, self.half, r_work, self.r_eff);
            let m = orientation_tensor(axes);
            let dev = orientation_deviation(axes, self.target);
            if sweep.check <= tol && dev <= self.params.orientation_tol {
                return (iters, sweep.check, true);
            }
            if iters >= self.params.descent.max_iters {
                return (iters, sweep.check, false);
            }
            let kappa = self.params.orientation_weight;
            for i in 0..centers.len() {
                let mult = sweep.multiplicity[i];
                let mut n = axes[i];
                if mult > 0 {
                    let f = step_factor(self.params, 1.0, mult);
                    let moved = add(&centers[i], &scale(&sweep.push[i], step * f));
                    centers[i] = self.cell.wrap(&moved);
                    n = add(&n, &scale(&sweep.twist[i], twist_gain * f));
                }
                if dev > 0.5 * self.params.orientation_tol {
                    let mut g = [0.0; 3];
                    for r in 0..3 {
                        for c in 0..3 {
                            g[r] += (m[r][c] - self.target[r][c]) * axes[i][c];
                        }
                    }
                    n = sub(&n, &scale(&g, kappa));
                }
                let len = norm(&n);
                if len > 0.0 {
                    axes[i] = scale(&n, 1.0 / len);
                }
            }
            iters += 1;
        }
    }
}

/// Gradient-descent overlap removal at `isolation_factor × radius`.
///
/// Particles without overlap do not move. Fiber axes additionally follow
/// the orientation penalty towards the isotropic tensor.
pub fn remove_overlaps(config: &Configuration, params: &PackingParams) -> (Configuration, PackingReport) {
    let start = Instant::now();
    let r_eff = params.isolation_factor * config.species.radius();
    let mut out = config.clone();
    let (iters, _, ok) = match config.species {
        Species::Spherocylinder { .. } => {
            let target = isotropic_target();
            let descent = FiberDescent {
                cell: &config.cell,
                half: config.species.half_length(),
                r_eff,
                target: &target,
                params,
            };
            descent.run(&mut out.centers, &mut out.axes)
        }
        _ => descend_round(&config.cell, &mut out.centers, r_eff, params),
    };
    let final_energy = overlap_energy(&out, r_eff);
    let success = ok && final_energy <= energy_tol(params, r_eff, out.len());
    out.non_overlapping = success;
    let achieved_phi = out.len() as f64 * out.species.volume() / out.cell.volume();
    let report = PackingReport {
        iterations: vec![iters],
        final_energy,
        wall_time_s: start.elapsed().as_secs_f64(),
        success,
        failure: (!success).then(|| format!("overlap removal did not converge in {iters} iterations")),
        achieved_phi,
        particles: out.len(),
    };
    (out, report)
}

/// Radius for which `count` particles of the given round kind fill `phi` of a cell of edge `edge`.
pub fn radius_for_fraction(kind: ShapeKind, count: usize, edge: f64, phi: f64) -> Result<f64> {
    if count == 0 {
        return Err(Error::invalid("no particles to reach a positive volume fraction"));
    }
    let per = phi * edge.powi(kind.dim() as i32) / count as f64;
    match kind {
        ShapeKind::Disk => Ok((per / std::f64::consts::PI).sqrt()),
        ShapeKind::Sphere => Ok((3.0 * per / (4.0 * std::f64::consts::PI)).cbrt()),
        ShapeKind::Spherocylinder => Err(Error::invalid("fiber radius is fixed by the aspect ratio")),
    }
}

fn round_species(kind: ShapeKind, radius: f64) -> Result<Species> {
    match kind {
        ShapeKind::Disk => Ok(Species::Disk { radius }),
        ShapeKind::Sphere => Ok(Species::Sphere { radius }),
        ShapeKind::Spherocylinder => Err(Error::invalid("use sam_pack for spherocylinders")),
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, dim: usize, edge: f64) -> Point {
    let mut p = [0.0; 3];
    for x in p.iter_mut().take(dim) {
        *x = rng.random::<f64>() * edge;
        if *x >= edge {
            *x = 0.0;
        }
    }
    p
}

fn uniform_axis(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = norm(&v);
        if n > 1e-12 {
            return scale(&v, 1.0 / n);
        }
    }
}

fn failed(
    config: Configuration,
    mut report: PackingReport,
    start: Instant,
    reason: String,
) -> (Configuration, PackingReport) {
    report.success = false;
    report.failure = Some(reason);
    report.wall_time_s = start.elapsed().as_secs_f64();
    report.particles = config.len();
    (config, report)
}

/// Mechanical contraction method for disks or spheres.
///
/// `count` particles end up in a periodic cell of edge `edge` with the
/// radius that realizes `params.target_phi`; overlap checks use
/// `params.isolation_factor × radius`.
pub fn mcm_pack(
    kind: ShapeKind,
    count: usize,
    edge: f64,
    params: &PackingParams,
) -> Result<(Configuration, PackingReport)> {
    params.validate()?;
    let start = Instant::now();
    let dim = kind.dim();
    let meta = SpeciesMeta { target_phi: params.target_phi, isolation_factor: params.isolation_factor };
    let cell = Cell::periodic(dim, edge)?;
    if count == 0 || params.target_phi == 0.0 {
        let placeholder = round_species(kind, edge * 1e-3)?;
        let config = Configuration::empty(cell, placeholder, meta)?;
        let report = PackingReport { success: count == 0, particles: 0, ..Default::default() };
        if count == 0 {
            return Ok((config, report));
        }
        return Ok(failed(config, report, start, "zero target volume fraction with particles".into()));
    }
    let radius = radius_for_fraction(kind, count, edge, params.target_phi)?;
    let species = round_species(kind, radius)?;
    let r_eff = params.isolation_factor * radius;
    let mut report = PackingReport::default();
    let final_target = params.target_phi;
    let stage_edge = |phi: f64| edge * (final_target / phi).powf(1.0 / dim as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut current_edge = stage_edge(params.phi_schedule[0]);
    let mut centers: Vec<Point> = (0..count).map(|_| uniform_point(&mut rng, dim, current_edge)).collect();

    if 2.0 * r_eff * (1.0 + WORK_MARGIN) >= 0.5 * edge {
        let config = Configuration::new(cell, species, vec![], vec![], meta)?;
        return Ok(failed(
            config,
            report,
            start,
            format!("isolation diameter {:.4} exceeds half the cell edge {:.4}", 2.0 * r_eff, edge),
        ));
    }

    for (k, &phi) in params.phi_schedule.iter().enumerate() {
        let target_edge = stage_edge(phi);
        if k > 0 {
            let s = target_edge / current_edge;
            for c in centers.iter_mut() {
                *c = scale(c, s);
            }
        }
        current_edge = target_edge;
        let stage_cell = Cell::periodic(dim, current_edge)?;
        for c in centers.iter_mut() {
            *c = stage_cell.wrap(c);
        }
        let (iters, energy, ok) = descend_round(&stage_cell, &mut centers, r_eff, params);
        report.iterations.push(iters);
        report.final_energy = energy;
        if !ok {
            let s = edge / current_edge;
            let scaled: Vec<Point> = centers.iter().map(|c| cell.wrap(&scale(c, s))).collect();
            let config = Configuration::new(cell, species, scaled, vec![], meta)?;
            report.achieved_phi = if k > 0 { params.phi_schedule[k - 1] } else { 0.0 };
            return Ok(failed(
                config,
                report,
                start,
                format!("contraction step {} (phi = {phi}) did not converge after {iters} iterations", k + 1),
            ));
        }
    }
    // final stage edge equals `edge` up to rounding; snap onto the requested cell
    let s = edge / current_edge;
    let centers: Vec<Point> = centers.iter().map(|c| cell.wrap(&scale(c, s))).collect();
    let mut config = Configuration::new(cell, species, centers, vec![], meta)?;
    let energy = overlap_energy(&config, r_eff);
    config.non_overlapping = energy == 0.0;
    report.final_energy = energy;
    report.success = config.non_overlapping;
    if !report.success {
        report.failure = Some(format!("residual overlap energy {energy:e} after rescaling"));
    }
    report.achieved_phi = count as f64 * species.volume() / cell.volume();
    report.particles = count;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((config, report))
}

/// Sequential addition and migration of spherocylinders in a periodic cell
/// of fixed edge.
///
/// `species` fixes radius and length; the fiber count for each schedule
/// entry `φ_k` is `⌈φ_k L³ / V⌉` with `V` the volume of one fiber.
pub fn sam_pack(
    edge: f64,
    species: Species,
    params: &PackingParams,
    orientation_target: &[[f64; 3]; 3],
) -> Result<(Configuration, PackingReport)> {
    params.validate()?;
    let Species::Spherocylinder { length, .. } = species else {
        return Err(Error::invalid("sam_pack needs a spherocylinder species"));
    };
    let trace: f64 = (0..3).map(|i| orientation_target[i][i]).sum();
    if (trace - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("orientation target must have unit trace"));
    }
    if length > edge {
        return Err(Error::invalid("fiber length exceeds the cell edge"));
    }
    let start = Instant::now();
    let cell = Cell::periodic(3, edge)?;
    let meta = SpeciesMeta { target_phi: params.target_phi, isolation_factor: params.isolation_factor };
    let r_eff = params.isolation_factor * species.radius();
    let mut report = PackingReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers: Vec<Point> = Vec::new();
    let mut axes: Vec<Point> = Vec::new();
    let fiber_volume = species.volume();
    let descent = FiberDescent {
        cell: &cell,
        half: species.half_length(),
        r_eff,
        target: orientation_target,
        params,
    };
    if params.target_phi > 0.0 {
        for (k, &phi) in params.phi_schedule.iter().enumerate() {
            let count = (phi * cell.volume() / fiber_volume - 1e-9).ceil() as usize;
            while centers.len() < count {
                centers.push(uniform_point(&mut rng, 3, edge));
                axes.push(uniform_axis(&mut rng));
            }
            let (iters, energy, ok) = descent.run(&mut centers, &mut axes);
            report.iterations.push(iters);
            report.final_energy = energy;
            if !ok {
                let config = Configuration::new(cell, species, centers, axes, meta)?;
                report.achieved_phi = config.len() as f64 * fiber_volume / cell.volume();
                return Ok(failed(
                    config,
                    report,
                    start,
                    format!("addition step {} (phi = {phi}) did not converge after {iters} iterations", k + 1),
                ));
            }
        }
    }
    let mut config = Configuration::new(cell, species, centers, axes, meta)?;
    let energy = overlap_energy(&config, r_eff);
    config.non_overlapping = energy == 0.0;
    report.final_energy = energy;
    report.success = config.non_overlapping;
    if !report.success {
        report.failure = Some(format!("residual overlap energy {energy:e}"));
    }
    report.achieved_phi = config.len() as f64 * fiber_volume / cell.volume();
    report.particles = config.len();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((config, report))
}

/// Random sequential adsorption of disks or spheres.
///
/// Proposals are uniform in the cell and accepted iff the inflated particle
/// does not overlap any accepted one. Gives up after
/// `proposals_per_particle × count` proposals.
pub fn rsa_pack(
    kind: ShapeKind,
    count: usize,
    edge: f64,
    params: &PackingParams,
) -> Result<(Configuration, PackingReport)> {
    params.validate()?;
    let start = Instant::now();
    let dim = kind.dim();
    let cell = Cell::periodic(dim, edge)?;
    let meta = SpeciesMeta { target_phi: params.target_phi, isolation_factor: params.isolation_factor };
    if count == 0 || params.target_phi == 0.0 {
        let config = Configuration::empty(cell, round_species(kind, edge * 1e-3)?, meta)?;
        let report = PackingReport { success: true, ..Default::default() };
        return Ok((config, report));
    }
    let radius = radius_for_fraction(kind, count, edge, params.target_phi)?;
    let species = round_species(kind, radius)?;
    let reach = 2.0 * params.isolation_factor * radius;
    if reach >= 0.5 * edge {
        let config = Configuration::new(cell, species, vec![], vec![], meta)?;
        return Ok(failed(config, PackingReport::default(), start, "isolation diameter exceeds half the cell edge".into()));
    }
    let nb = ((edge / reach).floor() as usize).clamp(1, if dim == 3 { 256 } else { 4096 });
    let bin_edge = edge / nb as f64;
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); nb.pow(dim as u32)];
    let bin_coord = |x: f64| ((x / bin_edge) as usize).min(nb - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers: Vec<Point> = Vec::with_capacity(count);
    let budget = params.proposals_per_particle.saturating_mul(count);
    let mut proposals = 0usize;
    let zr: &[isize] = if dim == 3 { &[-1, 0, 1] } else { &[0] };
    while centers.len() < count && proposals < budget {
        proposals += 1;
        let p = uniform_point(&mut rng, dim, edge);
        let bc = [bin_coord(p[0]), bin_coord(p[1]), if dim == 3 { bin_coord(p[2]) } else { 0 }];
        let mut clash = false;
        'search: for &dz in zr {
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let w = |c: usize, d: isize| (c as isize + d).rem_euclid(nb as isize) as usize;
                    let b = if dim == 3 {
                        (w(bc[2], dz) * nb + w(bc[1], dy)) * nb + w(bc[0], dx)
                    } else {
                        w(bc[1], dy) * nb + w(bc[0], dx)
                    };
                    for &j in &bins[b] {
                        if norm(&cell.delta(&p, &centers[j as usize])) < reach {
                            clash = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !clash {
            let b = if dim == 3 { (bc[2] * nb + bc[1]) * nb + bc[0] } else { bc[1] * nb + bc[0] };
            bins[b].push(centers.len() as u32);
            centers.push(p);
        }
    }
    let placed = centers.len();
    let mut config = Configuration::new(cell, species, centers, vec![], meta)?;
    config.non_overlapping = true;
    let report = PackingReport {
        iterations: vec![proposals],
        final_energy: 0.0,
        wall_time_s: start.elapsed().as_secs_f64(),
        success: placed == count,
        failure: (placed < count).then(|| {
            format!("proposal budget exhausted after placing {placed} of {count} particles")
        }),
        achieved_phi: placed as f64 * species.volume() / cell.volume(),
        particles: placed,
    };
    Ok((config, report))
}

/// Smallest periodic gap over all pairs, by brute force (test and audit helper).
pub fn min_pair_gap(config: &Configuration) -> f64 {
    let mut best = f64::INFINITY;
    let n = config.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let g = match config.species {
                Species::Spherocylinder { .. } => periodic_segment_contact(
                    &config.cell,
                    &config.centers[i],
                    &config.axes[i],
                    &config.centers[j],
                    &config.axes[j],
                    config.species.half_length(),
                    f64::INFINITY,
                )
                .map(|c| c.dist)
                .unwrap_or(f64::INFINITY),
                _ => norm(&config.cell.delta(&config.centers[i], &config.centers[j])),
            };
            best = best.min(g);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spheres(cell: Cell, radius: f64, centers: Vec<Point>) -> Configuration {
        Configuration::new(cell, Species::Sphere { radius }, centers, vec![], SpeciesMeta::default()).unwrap()
    }

    #[test]
    fn energy_examples() {
        let cell = Cell::periodic(3, 4.0).unwrap();
        // δ = 0.6 - 0.5 = 0.1
        let pair = spheres(cell, 0.3, vec![[1.0, 1.0, 1.0], [1.5, 1.0, 1.0]]);
        assert!((overlap_energy(&pair, 0.3) - 0.005).abs() < 1e-15);
        let apart = spheres(cell, 0.3, vec![[1.0, 1.0, 1.0], [2.0, 1.0, 1.0]]);
        assert_eq!(overlap_energy(&apart, 0.3), 0.0);
        let h = 0.25 * 3f64.sqrt();
        let tri = spheres(
            cell,
            0.3,
            vec![[1.0, 1.0, 1.0], [1.5, 1.0, 1.0], [1.25, 1.0 + h, 1.0]],
        );
        assert!((overlap_energy(&tri, 0.3) - 0.015).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_gradient() {
        let cell = Cell::periodic(3, 4.0).unwrap();
        let pair = spheres(cell, 0.3, vec![[1.0, 1.0, 1.0], [1.5, 1.0, 1.0]]);
        let g = overlap_gradient(&pair, 0.3);
        assert!((g.centers[0][0] - 0.1).abs() < 1e-12);
        assert!((g.centers[1][0] + 0.1).abs() < 1e-12);
        let apart = spheres(cell, 0.3, vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]);
        assert!(overlap_gradient(&apart, 0.3).centers.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn removal_is_identity_without_overlap() {
        let cell = Cell::periodic(3, 4.0).unwrap();
        let cfg = spheres(cell, 0.3, vec![[1.0, 1.0, 1.0], [2.5, 1.0, 1.0]]);
        let params = PackingParams::round(0.1, 1.2, 0);
        let (out, report) = remove_overlaps(&cfg, &params);
        assert!(report.success);
        assert_eq!(report.iterations, vec![0]);
        assert_eq!(out.centers, cfg.centers);
    }

    #[test]
    fn symmetric_pair_separates() {
        let cell = Cell::periodic(3, 4.0).unwrap();
        let cfg = spheres(cell, 0.3, vec![[1.0, 1.0, 1.0], [1.5, 1.0, 1.0]]);
        let params = PackingParams::round(0.1, 1.2, 0);
        let (out, report) = remove_overlaps(&cfg, &params);
        assert!(report.success);
        let gap = norm(&cell.delta(&out.centers[0], &out.centers[1]));
        assert!(gap >= 2.0 * 0.36);
        let mid0 = 0.5 * (cfg.centers[0][0] + cfg.centers[1][0]);
        let mid1 = 0.5 * (out.centers[0][0] + out.centers[1][0]);
        assert!((mid0 - mid1).abs() < 1e-12);
    }

    #[test]
    fn schedule_defaults() {
        let s = default_schedule(0.3, 0.1);
        assert_eq!(s.len(), 3);
        assert!((s[0] - 0.1).abs() < 1e-15 && (s[1] - 0.2).abs() < 1e-15 && s[2] == 0.3);
        let f = default_schedule(0.15, 0.05);
        assert_eq!(f.len(), 3);
        assert!(default_schedule(0.0, 0.1).is_empty());
        let mut p = PackingParams::round(0.3, 1.2, 0);
        p.phi_schedule = vec![0.2, 0.1, 0.3];
        assert!(p.validate().is_err());
    }

    #[test]
    fn mcm_small_spheres() {
        let params = PackingParams::round(0.3, 1.2, 7);
        let (cfg, report) = mcm_pack(ShapeKind::Sphere, 8, 2.0, &params).unwrap();
        assert!(report.success, "{report:?}");
        assert_eq!(cfg.len(), 8);
        let r = cfg.species.radius();
        assert!(min_pair_gap(&cfg) >= 2.0 * 1.2 * r);
        let phi = crate::geometry::analytic_volume_fraction(&cfg).unwrap();
        assert!((phi - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rsa_empty_target() {
        let params = PackingParams::round(0.0, 1.0, 1);
        let (cfg, report) = rsa_pack(ShapeKind::Disk, 0, 1.0, &params).unwrap();
        assert!(report.success && cfg.is_empty());
    }

    #[test]
    fn sam_zero_fraction_is_empty() {
        let species = Species::Spherocylinder { radius: 0.025, length: 1.0, include_caps: false };
        let params = PackingParams::fibers(0.0, 1.2, 1);
        let (cfg, report) = sam_pack(1.0, species, &params, &isotropic_target()).unwrap();
        assert!(report.success && cfg.is_empty());
    }
}

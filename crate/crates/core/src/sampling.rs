//! The two ensemble protocols: periodized generation on the torus `Q_L`,
//! and snapshots cut out of a larger periodized parent.
//!
//! Lengths are measured in units of the nominal particle spacing for disks
//! and spheres (a cell of size index `K` has edge `K` and holds `K^d`
//! particles) and in fiber lengths for spherocylinders.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Cell, Configuration, Point, ShapeKind, Species};
use crate::packing::{isotropic_target, mcm_pack, rsa_pack, sam_pack, PackingParams, PackingReport};
use crate::rng::{retry_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Periodized,
    Snapshot,
    /// Periodized with a Poisson-distributed particle count.
    Poisson,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Periodized => "periodized",
            Protocol::Snapshot => "snapshot",
            Protocol::Poisson => "poisson",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodized" => Ok(Protocol::Periodized),
            "snapshot" => Ok(Protocol::Snapshot),
            "poisson" => Ok(Protocol::Poisson),
            other => Err(Error::invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Accepts either a bare name (`"sphere"`) or a table with a `kind` field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "ShapeRepr")]
pub enum ShapeSpec {
    Disk,
    Sphere,
    /// Spherocylinder of unit segment length and diameter `1 / aspect_ratio`.
    Fiber { aspect_ratio: f64 },
}

impl ShapeSpec {
    pub fn kind(&self) -> ShapeKind {
        match self {
            ShapeSpec::Disk => ShapeKind::Disk,
            ShapeSpec::Sphere => ShapeKind::Sphere,
            ShapeSpec::Fiber { .. } => ShapeKind::Spherocylinder,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    pub fn is_round(&self) -> bool {
        !matches!(self, ShapeSpec::Fiber { .. })
    }

    /// Fiber species, caps excluded from the phase.
    pub fn fiber_species(&self) -> Option<Species> {
        match *self {
            ShapeSpec::Fiber { aspect_ratio } => Some(Species::Spherocylinder {
                radius: 0.5 / aspect_ratio,
                length: 1.0,
                include_caps: false,
            }),
            _ => None,
        }
    }

    pub fn default_magnification(&self) -> f64 {
        if self.is_round() {
            2.0
        } else {
            1.5
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ShapeRepr {
    Name(String),
    Table { kind: String, aspect_ratio: Option<f64> },
}

impl TryFrom<ShapeRepr> for ShapeSpec {
    type Error = Error;
    fn try_from(r: ShapeRepr) -> Result<Self> {
        match r {
            ShapeRepr::Name(name) => name.parse(),
            ShapeRepr::Table { kind, aspect_ratio } => match (kind.parse()?, aspect_ratio) {
                (ShapeSpec::Fiber { .. }, Some(aspect_ratio)) => Ok(ShapeSpec::Fiber { aspect_ratio }),
                (shape, None) => Ok(shape),
                (_, Some(_)) => Err(Error::invalid("aspect_ratio applies to fibers only")),
            },
        }
    }
}

impl FromStr for ShapeSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" | "disks" => Ok(ShapeSpec::Disk),
            "sphere" | "spheres" => Ok(ShapeSpec::Sphere),
            "fiber" | "fibers" => Ok(ShapeSpec::Fiber { aspect_ratio: 20.0 }),
            other => Err(Error::invalid(format!("unknown shape {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Mechanical contraction (sequential addition and migration for fibers).
    #[default]
    Mcm,
    /// Random sequential adsorption (round particles only).
    Rsa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    pub shape: ShapeSpec,
    /// `K` for disks and spheres, `L/ℓ` for fibers.
    pub size: f64,
    /// Parent edge over snapshot edge.
    pub magnification: f64,
    pub generator: Generator,
    /// Packing parameters; the seed is replaced per draw.
    pub packing: PackingParams,
    /// Poisson counts tried per draw before giving up.
    pub poisson_attempts: usize,
}

impl ProtocolSpec {
    pub fn new(protocol: Protocol, shape: ShapeSpec, size: f64, phi: f64, isolation: f64) -> Self {
        let packing = if shape.is_round() {
            PackingParams::round(phi, isolation, 0)
        } else {
            PackingParams::fibers(phi, isolation, 0)
        };
        ProtocolSpec {
            protocol,
            shape,
            size,
            magnification: shape.default_magnification(),
            generator: Generator::Mcm,
            packing,
            poisson_attempts: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.size.is_finite()) {
            return Err(Error::invalid(format!("size must be positive, got {}", self.size)));
        }
        if self.shape.is_round() && self.size.fract() != 0.0 {
            return Err(Error::invalid("size index K must be an integer for disks and spheres"));
        }
        if let ShapeSpec::Fiber { aspect_ratio } = self.shape {
            if !(aspect_ratio > 0.0 && aspect_ratio.is_finite()) {
                return Err(Error::invalid("aspect ratio must be positive"));
            }
            if self.size < 1.0 {
                return Err(Error::invalid("fiber cells must be at least one fiber length wide"));
            }
            if self.generator == Generator::Rsa {
                return Err(Error::invalid("random sequential adsorption handles round particles only"));
            }
            if self.protocol == Protocol::Poisson {
                return Err(Error::invalid("Poisson counts are defined for round particles only"));
            }
        }
        if self.protocol == Protocol::Snapshot && !(self.magnification > 1.0) {
            return Err(Error::invalid("snapshot magnification must exceed 1"));
        }
        self.packing.validate()
    }

    /// Edge of the cell handed to the solver.
    pub fn edge(&self) -> f64 {
        self.size
    }
}

/// One drawn realization.
#[derive(Clone, Debug)]
pub struct Draw {
    pub config: Configuration,
    pub report: PackingReport,
    /// Generator runs spent on this draw (Poisson retries included).
    pub attempts: usize,
}

fn pack_periodic(spec: &ProtocolSpec, edge: f64, count: usize, seed: u64) -> Result<(Configuration, PackingReport)> {
    let params = spec.packing.with_seed(seed);
    match spec.shape {
        ShapeSpec::Fiber { .. } => {
            let species = spec.shape.fiber_species().expect("fiber shape");
            sam_pack(edge, species, &params, &isotropic_target())
        }
        _ => match spec.generator {
            Generator::Mcm => mcm_pack(spec.shape.kind(), count, edge, &params),
            Generator::Rsa => rsa_pack(spec.shape.kind(), count, edge, &params),
        },
    }
}

fn round_count(shape: &ShapeSpec, size: f64) -> usize {
    (size.round() as usize).pow(shape.dim() as u32)
}

fn finish(config: Configuration, report: PackingReport, attempts: usize) -> Result<Draw> {
    let report = report.into_result()?;
    Ok(Draw { config, report, attempts })
}

/// A configuration on the periodic cell `Q_L` with `K^d` round particles or
/// the fiber count of the volume fraction.
pub fn draw_periodized(spec: &ProtocolSpec, seed: u64) -> Result<Draw> {
    spec.validate()?;
    let (config, report) = pack_periodic(spec, spec.edge(), round_count(&spec.shape, spec.size), seed)?;
    finish(config, report, 1)
}

/// Periodized parent on `Q_{mL}`, restricted to `[0, L)^d`.
pub fn draw_snapshot(spec: &ProtocolSpec, seed: u64) -> Result<Draw> {
    spec.validate()?;
    let parent_edge = spec.magnification * spec.edge();
    let count = round_count(&spec.shape, spec.magnification * spec.size);
    let (parent, report) = pack_periodic(spec, parent_edge, count, seed)?;
    let report = report.into_result()?;
    let config = cut_out(&parent, spec.edge())?;
    Ok(Draw { config, report, attempts: 1 })
}

/// Restriction of a periodic configuration to the subcell `[0, edge)^d` at
/// the origin corner.
///
/// Every periodic image of a particle whose bounding ball of radius
/// `extent` reaches the subcell is kept with its uncut geometry; the
/// returned cell is non-periodic so that the voxelizer clips it.
pub fn cut_out(parent: &Configuration, edge: f64) -> Result<Configuration> {
    if !parent.cell.is_periodic() {
        return Err(Error::invalid("snapshots are cut from periodic configurations"));
    }
    if !(edge > 0.0 && edge <= parent.cell.edge()) {
        return Err(Error::invalid("snapshot edge must lie in (0, parent edge]"));
    }
    let dim = parent.dim();
    let extent = parent.species.extent();
    let cell = Cell::new(dim, edge, false)?;
    let mut centers = Vec::new();
    let mut axes = Vec::new();
    let offsets = parent.cell.image_offsets();
    for (i, c) in parent.centers.iter().enumerate() {
        for off in &offsets {
            let p: Point = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
            let gap_sq: f64 = (0..dim)
                .map(|k| {
                    let g = if p[k] < 0.0 {
                        -p[k]
                    } else if p[k] > edge {
                        p[k] - edge
                    } else {
                        0.0
                    };
                    g * g
                })
                .sum();
            if gap_sq <= extent * extent {
                centers.push(p);
                if !parent.axes.is_empty() {
                    axes.push(parent.axes[i]);
                }
            }
        }
    }
    let mut config = Configuration::new(cell, parent.species, centers, axes, parent.meta)?;
    config.non_overlapping = parent.non_overlapping;
    Ok(config)
}

/// Periodized draw with `N ~ Poisson(K^d)` particles, radius adjusted to the
/// target fraction. Counts the generator cannot realize are redrawn with a
/// derived seed, up to `poisson_attempts` times.
pub fn draw_poisson_periodized(spec: &ProtocolSpec, seed: u64) -> Result<Draw> {
    spec.validate()?;
    if !spec.shape.is_round() {
        return Err(Error::invalid("Poisson counts are defined for round particles only"));
    }
    let mean = round_count(&spec.shape, spec.size) as f64;
    let poisson = Poisson::new(mean).map_err(|e| Error::invalid(e.to_string()))?;
    let mut last: Option<PackingReport> = None;
    for attempt in 0..spec.poisson_attempts.max(1) {
        let s = retry_seed(seed, attempt as u64);
        let count = stream(s).sample(poisson) as usize;
        if count == 0 {
            log::info!("poisson draw {seed:#x} attempt {attempt}: empty count, redrawing");
            continue;
        }
        let (config, report) = pack_periodic(spec, spec.edge(), count, s)?;
        if report.success {
            return Ok(Draw { config, report, attempts: attempt + 1 });
        }
        log::info!(
            "poisson draw {seed:#x} attempt {attempt}: {count} particles infeasible ({})",
            report.failure.as_deref().unwrap_or("unknown")
        );
        last = Some(report);
    }
    let mut report = last.unwrap_or_default();
    report.success = false;
    report.failure = Some(format!(
        "no feasible Poisson count within {} attempts; last: {}",
        spec.poisson_attempts,
        report.failure.as_deref().unwrap_or("empty counts")
    ));
    Err(Error::PackingFailed(Box::new(report)))
}

/// Draw under the protocol of `spec`.
pub fn draw(spec: &ProtocolSpec, seed: u64) -> Result<Draw> {
    match spec.protocol {
        Protocol::Periodized => draw_periodized(spec, seed),
        Protocol::Snapshot => draw_snapshot(spec, seed),
        Protocol::Poisson => draw_poisson_periodized(spec, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{analytic_volume_fraction, SpeciesMeta};
    use crate::packing::overlap_energy;

    #[test]
    fn periodized_counts() {
        let spec = ProtocolSpec::new(Protocol::Periodized, ShapeSpec::Sphere, 2.0, 0.3, 1.2);
        let d = draw_periodized(&spec, 11).unwrap();
        assert_eq!(d.config.len(), 8);
        assert!(d.config.cell.is_periodic());
        assert!((analytic_volume_fraction(&d.config).unwrap() - 0.3).abs() < 1e-12);
        let spec = ProtocolSpec::new(Protocol::Periodized, ShapeSpec::Disk, 2.0, 0.3, 1.2);
        let d = draw_periodized(&spec, 11).unwrap();
        assert_eq!(d.config.len(), 4);
        assert!((analytic_volume_fraction(&d.config).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn snapshot_is_a_restriction_of_its_parent() {
        let spec = ProtocolSpec::new(Protocol::Snapshot, ShapeSpec::Disk, 2.0, 0.3, 1.2);
        let d = draw_snapshot(&spec, 5).unwrap();
        assert!(!d.config.cell.is_periodic());
        assert_eq!(d.config.cell.edge(), 2.0);
        let parent_spec = ProtocolSpec { size: 4.0, ..spec.clone() };
        let parent = draw_periodized(&parent_spec, 5).unwrap().config;
        assert_eq!(parent.len(), 16);
        let r = parent.species.radius();
        for c in &d.config.centers {
            let wrapped = parent.cell.wrap(c);
            assert!(parent.centers.iter().any(|p| (0..2).all(|k| (p[k] - wrapped[k]).abs() < 1e-12)));
            // the kept disk reaches into the subcell
            let gx = (-c[0]).max(c[0] - 2.0).max(0.0);
            let gy = (-c[1]).max(c[1] - 2.0).max(0.0);
            assert!(gx * gx + gy * gy <= r * r);
        }
        // every parent disk touching the subcell is kept
        for p in &parent.centers {
            for off in parent.cell.image_offsets() {
                let q = [p[0] + off[0], p[1] + off[1], 0.0];
                let gx = (-q[0]).max(q[0] - 2.0).max(0.0);
                let gy = (-q[1]).max(q[1] - 2.0).max(0.0);
                if gx * gx + gy * gy <= r * r {
                    assert!(d.config.centers.iter().any(|c| (c[0] - q[0]).abs() < 1e-12 && (c[1] - q[1]).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn cut_out_keeps_every_touching_image() {
        let cell = Cell::periodic(2, 3.0).unwrap();
        let species = Species::Disk { radius: 0.2 };
        let centers = vec![[2.9, 0.1, 0.0], [1.0, 1.0, 0.0], [2.5, 2.5, 0.0]];
        let mut parent = Configuration::new(cell, species, centers, vec![], SpeciesMeta::default()).unwrap();
        parent.non_overlapping = overlap_energy(&parent, 0.2) == 0.0;
        let cut = cut_out(&parent, 2.0).unwrap();
        // the corner disk shows up through its image at (-0.1, 0.1); the disk at 2.5 is out of reach
        assert_eq!(cut.len(), 2);
        assert!(cut.centers.iter().any(|c| (c[0] + 0.1).abs() < 1e-12 && (c[1] - 0.1).abs() < 1e-12));
        assert!(cut.non_overlapping);
    }

    #[test]
    fn poisson_counts_vary() {
        let spec = ProtocolSpec::new(Protocol::Poisson, ShapeSpec::Disk, 4.0, 0.3, 1.2);
        let counts: Vec<usize> = (0..20).map(|s| draw(&spec, s).unwrap().config.len()).collect();
        assert!(counts.iter().any(|&c| c != counts[0]));
        for s in 0..5 {
            let d = draw(&spec, s).unwrap();
            assert!((analytic_volume_fraction(&d.config).unwrap() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = ProtocolSpec::new(Protocol::Periodized, ShapeSpec::Sphere, 2.5, 0.3, 1.2);
        assert!(spec.validate().is_err());
        spec.size = 2.0;
        spec.validate().unwrap();
        let fiber = ProtocolSpec::new(Protocol::Poisson, "fiber".parse().unwrap(), 1.0, 0.15, 1.2);
        assert!(fiber.validate().is_err());
        assert_eq!(fiber.magnification, 1.5);
        assert_eq!("snapshot".parse::<Protocol>().unwrap(), Protocol::Snapshot);
        assert!("grid".parse::<Protocol>().is_err());
    }

    #[test]
    fn shape_spec_forms() {
        let s: ShapeSpec = serde_json::from_str("\"disk\"").unwrap();
        assert_eq!(s, ShapeSpec::Disk);
        let s: ShapeSpec = serde_json::from_str(r#"{"kind": "fiber", "aspect_ratio": 10}"#).unwrap();
        assert_eq!(s, ShapeSpec::Fiber { aspect_ratio: 10.0 });
        assert!(serde_json::from_str::<ShapeSpec>(r#"{"kind": "sphere", "aspect_ratio": 10}"#).is_err());
        let back: ShapeSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}

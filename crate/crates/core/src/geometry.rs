//! Periodic cells, particle shapes, distance kernels and cell-linked lists.
//!
//! Points are stored as `[f64; 3]` regardless of dimension; in two
//! dimensions the third coordinate is always zero.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Tolerance on `|axis| = 1` for spherocylinder axes.
pub const AXIS_NORM_TOL: f64 = 1e-12;

#[inline]
pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

/// A cubic (d = 3) or square (d = 2) cell `[0, L)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    dim: usize,
    edge: f64,
    periodic: bool,
}

impl Cell {
    pub fn new(dim: usize, edge: f64, periodic: bool) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("cell dimension must be 2 or 3, got {dim}")));
        }
        if !(edge > 0.0 && edge.is_finite()) {
            return Err(Error::invalid(format!("cell edge must be positive, got {edge}")));
        }
        Ok(Cell { dim, edge, periodic })
    }

    pub fn periodic(dim: usize, edge: f64) -> Result<Self> {
        Self::new(dim, edge, true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edge(&self) -> f64 {
        self.edge
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn volume(&self) -> f64 {
        self.edge.powi(self.dim as i32)
    }

    /// Same cell with a different edge length.
    pub fn with_edge(&self, edge: f64) -> Result<Self> {
        Self::new(self.dim, edge, self.periodic)
    }

    /// Wraps a coordinate into `[0, L)`.
    #[inline]
    pub fn wrap_coord(&self, x: f64) -> f64 {
        let l = self.edge;
        let w = x - l * (x / l).floor();
        if w >= l {
            0.0
        } else {
            w
        }
    }

    /// Wraps all active coordinates into `[0, L)`; a no-op on non-periodic cells.
    #[inline]
    pub fn wrap(&self, p: &Point) -> Point {
        if !self.periodic {
            return *p;
        }
        let mut out = [0.0; 3];
        for k in 0..self.dim {
            out[k] = self.wrap_coord(p[k]);
        }
        out
    }

    /// Difference `a - b`, each coordinate wrapped into `[-L/2, L/2]` on periodic cells.
    #[inline]
    pub fn delta(&self, a: &Point, b: &Point) -> Point {
        let mut d = [0.0; 3];
        let l = self.edge;
        for k in 0..self.dim {
            let mut x = a[k] - b[k];
            if self.periodic {
                x -= l * (x / l).round();
            }
            d[k] = x;
        }
        d
    }

    /// Lattice translation offsets `m * L`, `m ∈ {-1, 0, 1}^d`; only the zero
    /// offset on non-periodic cells.
    pub fn image_offsets(&self) -> Vec<Point> {
        if !self.periodic {
            return vec![[0.0; 3]];
        }
        let l = self.edge;
        let mut out = Vec::with_capacity(27);
        let zs: &[f64] = if self.dim == 3 { &[-1.0, 0.0, 1.0] } else { &[0.0] };
        for &mz in zs {
            for my in [-1.0, 0.0, 1.0] {
                for mx in [-1.0, 0.0, 1.0] {
                    out.push([mx * l, my * l, mz * l]);
                }
            }
        }
        out
    }

    fn check_point(&self, p: &Point) -> Result<()> {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("non-finite coordinate"));
        }
        if self.dim == 2 && p[2] != 0.0 {
            return Err(Error::contract("two-dimensional point with non-zero z coordinate"));
        }
        Ok(())
    }
}

/// Euclidean distance between `a` and `b`, minimized over periodic images
/// when the cell is periodic.
pub fn periodic_distance(a: &Point, b: &Point, cell: &Cell) -> Result<f64> {
    cell.check_point(a)?;
    cell.check_point(b)?;
    Ok(norm(&cell.delta(a, b)))
}

/// Shape of one particle, including its orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParticleShape {
    Disk { radius: f64 },
    Sphere { radius: f64 },
    Spherocylinder { radius: f64, length: f64, axis: Point },
}

impl ParticleShape {
    pub fn radius(&self) -> f64 {
        match *self {
            ParticleShape::Disk { radius }
            | ParticleShape::Sphere { radius }
            | ParticleShape::Spherocylinder { radius, .. } => radius,
        }
    }

    fn kind(&self) -> ShapeKind {
        match self {
            ParticleShape::Disk { .. } => ShapeKind::Disk,
            ParticleShape::Sphere { .. } => ShapeKind::Sphere,
            ParticleShape::Spherocylinder { .. } => ShapeKind::Spherocylinder,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub shape: ParticleShape,
    pub center: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Sphere,
    Spherocylinder,
}

impl ShapeKind {
    pub fn dim(&self) -> usize {
        match self {
            ShapeKind::Disk => 2,
            ShapeKind::Sphere | ShapeKind::Spherocylinder => 3,
        }
    }
}

/// The single species shared by every particle of a configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Species {
    Disk { radius: f64 },
    Sphere { radius: f64 },
    /// `length` is the length of the axis segment (the cylinder part).
    Spherocylinder { radius: f64, length: f64, include_caps: bool },
}

impl Species {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Species::Disk { .. } => ShapeKind::Disk,
            Species::Sphere { .. } => ShapeKind::Sphere,
            Species::Spherocylinder { .. } => ShapeKind::Spherocylinder,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    pub fn radius(&self) -> f64 {
        match *self {
            Species::Disk { radius }
            | Species::Sphere { radius }
            | Species::Spherocylinder { radius, .. } => radius,
        }
    }

    /// Half length of the axis segment, zero for round particles.
    pub fn half_length(&self) -> f64 {
        match *self {
            Species::Spherocylinder { length, .. } => 0.5 * length,
            _ => 0.0,
        }
    }

    /// Largest distance from the center to a point of the particle.
    pub fn extent(&self) -> f64 {
        self.half_length() + self.radius()
    }

    /// Volume (area in 2D) of one particle; spherocylinder caps only when included.
    pub fn volume(&self) -> f64 {
        match *self {
            Species::Disk { radius } => PI * radius * radius,
            Species::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            Species::Spherocylinder { radius, length, include_caps } => {
                let cyl = PI * radius * radius * length;
                if include_caps {
                    cyl + 4.0 / 3.0 * PI * radius.powi(3)
                } else {
                    cyl
                }
            }
        }
    }

    pub fn with_radius(&self, radius: f64) -> Species {
        match *self {
            Species::Disk { .. } => Species::Disk { radius },
            Species::Sphere { .. } => Species::Sphere { radius },
            Species::Spherocylinder { length, include_caps, .. } => {
                Species::Spherocylinder { radius, length, include_caps }
            }
        }
    }

    /// Uniformly scaled copy (radius and length).
    pub fn scaled(&self, s: f64) -> Species {
        match *self {
            Species::Disk { radius } => Species::Disk { radius: radius * s },
            Species::Sphere { radius } => Species::Sphere { radius: radius * s },
            Species::Spherocylinder { radius, length, include_caps } => Species::Spherocylinder {
                radius: radius * s,
                length: length * s,
                include_caps,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let r = self.radius();
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("particle radius must be positive, got {r}")));
        }
        if let Species::Spherocylinder { length, .. } = *self {
            if !(length > 0.0 && length.is_finite()) {
                return Err(Error::invalid(format!("fiber length must be positive, got {length}")));
            }
        }
        Ok(())
    }
}

/// Generating parameters recorded alongside a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMeta {
    pub target_phi: f64,
    pub isolation_factor: f64,
}

impl Default for SpeciesMeta {
    fn default() -> Self {
        SpeciesMeta { target_phi: 0.0, isolation_factor: 1.0 }
    }
}

/// A geometric realization: a cell and a single species of particles.
///
/// On periodic cells every center lies in `[0, L)^d`. Snapshot cut-outs
/// live on non-periodic cells and keep the parent image of each particle
/// nearest to the cut-out, so centers may lie slightly outside `[0, L)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    pub cell: Cell,
    pub species: Species,
    pub centers: Vec<Point>,
    /// Unit axes, one per particle for spherocylinders, empty otherwise.
    pub axes: Vec<Point>,
    pub meta: SpeciesMeta,
    pub non_overlapping: bool,
}

impl Configuration {
    pub fn new(
        cell: Cell,
        species: Species,
        centers: Vec<Point>,
        axes: Vec<Point>,
        meta: SpeciesMeta,
    ) -> Result<Self> {
        species.validate()?;
        if species.dim() != cell.dim() {
            return Err(Error::contract(format!(
                "{:?} particles need a {}-dimensional cell",
                species.kind(),
                species.dim()
            )));
        }
        let fibers = matches!(species, Species::Spherocylinder { .. });
        if fibers && axes.len() != centers.len() {
            return Err(Error::contract("one axis per spherocylinder required"));
        }
        if !fibers && !axes.is_empty() {
            return Err(Error::contract("axes given for round particles"));
        }
        if let Species::Spherocylinder { length, .. } = species {
            if length > cell.edge() {
                return Err(Error::invalid("fiber length exceeds the cell edge"));
            }
        }
        for c in &centers {
            cell.check_point(c)?;
            if cell.is_periodic() && (0..cell.dim()).any(|k| c[k] < 0.0 || c[k] >= cell.edge()) {
                return Err(Error::contract(format!("center {c:?} outside the periodic cell")));
            }
        }
        for a in &axes {
            cell.check_point(a)?;
            if (norm(a) - 1.0).abs() > AXIS_NORM_TOL {
                return Err(Error::contract(format!("axis {a:?} is not a unit vector")));
            }
        }
        Ok(Configuration { cell, species, centers, axes, meta, non_overlapping: false })
    }

    pub fn empty(cell: Cell, species: Species, meta: SpeciesMeta) -> Result<Self> {
        let mut c = Self::new(cell, species, Vec::new(), Vec::new(), meta)?;
        c.non_overlapping = true;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.cell.dim()
    }

    pub fn particle(&self, i: usize) -> Particle {
        let center = self.centers[i];
        let shape = match self.species {
            Species::Disk { radius } => ParticleShape::Disk { radius },
            Species::Sphere { radius } => ParticleShape::Sphere { radius },
            Species::Spherocylinder { radius, length, .. } => {
                ParticleShape::Spherocylinder { radius, length, axis: self.axes[i] }
            }
        };
        Particle { shape, center }
    }

    pub fn particles(&self) -> impl Iterator<Item = Particle> + '_ {
        (0..self.len()).map(|i| self.particle(i))
    }

    /// Axis of particle `i`, the zero vector for round particles.
    #[inline]
    pub fn axis(&self, i: usize) -> Point {
        self.axes.get(i).copied().unwrap_or([0.0; 3])
    }

    /// Rigid translation of every particle, wrapped back into periodic cells.
    pub fn translated(&self, shift: &Point) -> Configuration {
        let mut out = self.clone();
        for c in &mut out.centers {
            *c = self.cell.wrap(&add(c, shift));
        }
        out
    }

    pub fn to_record(&self) -> ConfigurationRecord {
        let d = self.dim();
        let (shape, length, include_caps) = match self.species {
            Species::Disk { .. } => (ShapeKind::Disk, None, None),
            Species::Sphere { .. } => (ShapeKind::Sphere, None, None),
            Species::Spherocylinder { length, include_caps, .. } => {
                (ShapeKind::Spherocylinder, Some(length), Some(include_caps))
            }
        };
        ConfigurationRecord {
            dim: d,
            edge: self.cell.edge(),
            periodic: self.cell.is_periodic(),
            shape,
            radius: self.species.radius(),
            length,
            include_caps,
            centers: self.centers.iter().map(|c| c[..d].to_vec()).collect(),
            axes: if self.axes.is_empty() {
                None
            } else {
                Some(self.axes.iter().map(|a| a[..d].to_vec()).collect())
            },
            non_overlapping: self.non_overlapping,
            species_meta: self.meta,
        }
    }

    pub fn from_record(rec: ConfigurationRecord) -> Result<Self> {
        let cell = Cell::new(rec.dim, rec.edge, rec.periodic)?;
        let species = match rec.shape {
            ShapeKind::Disk => Species::Disk { radius: rec.radius },
            ShapeKind::Sphere => Species::Sphere { radius: rec.radius },
            ShapeKind::Spherocylinder => Species::Spherocylinder {
                radius: rec.radius,
                length: rec
                    .length
                    .ok_or_else(|| Error::invalid("spherocylinder record without length"))?,
                include_caps: rec.include_caps.unwrap_or(false),
            },
        };
        let to_point = |v: &Vec<f64>| -> Result<Point> {
            if v.len() != rec.dim {
                return Err(Error::contract(format!(
                    "coordinate list of length {} in a {}-dimensional record",
                    v.len(),
                    rec.dim
                )));
            }
            let mut p = [0.0; 3];
            p[..rec.dim].copy_from_slice(v);
            Ok(p)
        };
        let centers = rec.centers.iter().map(to_point).collect::<Result<Vec<_>>>()?;
        let axes = match &rec.axes {
            Some(a) => a.iter().map(to_point).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let mut config = Configuration::new(cell, species, centers, axes, rec.species_meta)?;
        config.non_overlapping = rec.non_overlapping;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// JSON form of a [`Configuration`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationRecord {
    pub dim: usize,
    pub edge: f64,
    #[serde(default = "default_true")]
    pub periodic: bool,
    pub shape: ShapeKind,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_caps: Option<bool>,
    pub centers: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub non_overlapping: bool,
    #[serde(default)]
    pub species_meta: SpeciesMeta,
}

fn default_true() -> bool {
    true
}

/// Closest points between segments `p1 + s d1` and `p2 + t d2`, `s, t ∈ [0, 1]`.
/// Returns `(s, t)`.
fn closest_params(p1: &Point, d1: &Point, p2: &Point, d2: &Point) -> (f64, f64) {
    const EPS: f64 = 1e-300;
    let r = sub(p1, p2);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, &r);
    if a <= EPS && e <= EPS {
        return (0.0, 0.0);
    }
    if a <= EPS {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = dot(d1, &r);
    if e <= EPS {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = dot(d1, d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-14 * a * e { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

/// Closest approach of two axis segments given by center, unit axis and half length.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SegmentContact {
    /// Signed position of the contact point along the first axis, in `[-h1, h1]`.
    pub s: f64,
    /// Signed position along the second axis.
    pub t: f64,
    /// Vector from the second contact point to the first.
    pub diff: Point,
    pub dist: f64,
}

pub(crate) fn segment_contact(
    c1: &Point,
    n1: &Point,
    h1: f64,
    c2: &Point,
    n2: &Point,
    h2: f64,
) -> SegmentContact {
    let p1 = sub(c1, &scale(n1, h1));
    let d1 = scale(n1, 2.0 * h1);
    let p2 = sub(c2, &scale(n2, h2));
    let d2 = scale(n2, 2.0 * h2);
    let (u, v) = closest_params(&p1, &d1, &p2, &d2);
    let q1 = add(&p1, &scale(&d1, u));
    let q2 = add(&p2, &scale(&d2, v));
    let diff = sub(&q1, &q2);
    SegmentContact { s: (2.0 * u - 1.0) * h1, t: (2.0 * v - 1.0) * h2, diff, dist: norm(&diff) }
}

/// Closest contact between the segment of particle 1 and all images of the
/// segment of particle 2 whose center offset is at most `cutoff` (all
/// images when `cutoff` is infinite).
pub(crate) fn periodic_segment_contact(
    cell: &Cell,
    c1: &Point,
    n1: &Point,
    c2: &Point,
    n2: &Point,
    half_length: f64,
    cutoff: f64,
) -> Option<SegmentContact> {
    let base = cell.delta(c2, c1);
    let mut best: Option<SegmentContact> = None;
    for off in cell.image_offsets() {
        let rel = add(&base, &off);
        if norm(&rel) > cutoff {
            continue;
        }
        let img = add(c1, &rel);
        let contact = segment_contact(c1, n1, half_length, &img, n2, half_length);
        if best.is_none_or(|b| contact.dist < b.dist) {
            best = Some(contact);
        }
    }
    best
}

/// Surface-independent separation of two particles: periodic center distance
/// for disks and spheres, periodic axis-segment distance for spherocylinders.
pub fn pair_gap(p: &Particle, q: &Particle, cell: &Cell) -> Result<f64> {
    if p.shape.kind() != q.shape.kind() {
        return Err(Error::contract("pair_gap on particles of different shape kinds"));
    }
    match (p.shape, q.shape) {
        (
            ParticleShape::Spherocylinder { length: l1, axis: a1, .. },
            ParticleShape::Spherocylinder { length: l2, axis: a2, .. },
        ) => {
            cell.check_point(&p.center)?;
            cell.check_point(&q.center)?;
            let base = cell.delta(&q.center, &p.center);
            let mut best = f64::INFINITY;
            for off in cell.image_offsets() {
                let img = add(&p.center, &add(&base, &off));
                let c = segment_contact(&p.center, &a1, 0.5 * l1, &img, &a2, 0.5 * l2);
                best = best.min(c.dist);
            }
            Ok(best)
        }
        _ => periodic_distance(&p.center, &q.center, cell),
    }
}

/// Macaulay bracket `max(0, 2 r_eff - gap)`.
pub fn overlap_indicator(p: &Particle, q: &Particle, cell: &Cell, effective_radius: f64) -> Result<f64> {
    let r = p.shape.radius().max(q.shape.radius());
    if effective_radius < r {
        return Err(Error::contract(format!(
            "effective radius {effective_radius} below particle radius {r}"
        )));
    }
    Ok((2.0 * effective_radius - pair_gap(p, q, cell)?).max(0.0))
}

/// Exact filler fraction of a non-overlapping configuration.
///
/// Particles of snapshot cut-outs are counted with their full volume.
pub fn analytic_volume_fraction(config: &Configuration) -> Result<f64> {
    if !config.non_overlapping {
        return Err(Error::Overlapping);
    }
    Ok(config.len() as f64 * config.species.volume() / config.cell.volume())
}

/// Cell-linked list over particle centers.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    cell: Cell,
    range: f64,
    bins_per_axis: usize,
    bin_edge: f64,
    /// CSR layout: particles of bin `b` are `items[starts[b]..starts[b + 1]]`.
    starts: Vec<usize>,
    items: Vec<usize>,
    bin_of: Vec<usize>,
}

impl NeighborIndex {
    pub fn build(cell: &Cell, centers: &[Point], range: f64) -> Self {
        let l = cell.edge();
        let mut nb = if range > 0.0 { (l / range).floor() as usize } else { 1 };
        // Periodic stencils need three distinct bins per axis; larger ranges
        // degrade to a single bin, i.e. all pairs.
        if cell.is_periodic() && nb < 3 {
            nb = 1;
        }
        nb = nb.clamp(1, 1 << 10);
        if cell.dim() == 3 {
            nb = nb.min(256);
        }
        let bin_edge = l / nb as f64;
        let nbins = nb.pow(cell.dim() as u32);
        let bin_of: Vec<usize> = centers
            .iter()
            .map(|c| {
                let mut b = 0;
                for k in (0..cell.dim()).rev() {
                    let x = if cell.is_periodic() { cell.wrap_coord(c[k]) } else { c[k] };
                    let i = ((x / bin_edge).floor() as isize).clamp(0, nb as isize - 1) as usize;
                    b = b * nb + i;
                }
                b
            })
            .collect();
        let mut starts = vec![0usize; nbins + 1];
        for &b in &bin_of {
            starts[b + 1] += 1;
        }
        for b in 0..nbins {
            starts[b + 1] += starts[b];
        }
        let mut fill = starts.clone();
        let mut items = vec![0usize; centers.len()];
        for (i, &b) in bin_of.iter().enumerate() {
            items[fill[b]] = i;
            fill[b] += 1;
        }
        NeighborIndex { cell: *cell, range, bins_per_axis: nb, bin_edge, starts, items, bin_of }
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn bins_per_axis(&self) -> usize {
        self.bins_per_axis
    }

    /// Diagonal of one bin.
    pub fn bin_diagonal(&self) -> f64 {
        self.bin_edge * (self.cell.dim() as f64).sqrt()
    }

    fn bin_coords(&self, b: usize) -> [usize; 3] {
        let nb = self.bins_per_axis;
        [b % nb, (b / nb) % nb, b / (nb * nb)]
    }

    /// Distinct bins adjacent to `b` (including `b`), sorted.
    fn stencil(&self, b: usize) -> ([usize; 27], usize) {
        let mut out = [0usize; 27];
        let nb = self.bins_per_axis as isize;
        if nb == 1 {
            return (out, 1);
        }
        let dim = self.cell.dim();
        let bc = self.bin_coords(b);
        let mut len = 0;
        let zr: &[isize] = if dim == 3 { &[-1, 0, 1] } else { &[0] };
        for &dz in zr {
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let mut idx = [bc[0] as isize + dx, bc[1] as isize + dy, bc[2] as isize + dz];
                    let mut ok = true;
                    for v in idx.iter_mut().take(dim) {
                        if *v < 0 || *v >= nb {
                            if self.cell.is_periodic() {
                                *v = v.rem_euclid(nb);
                            } else {
                                ok = false;
                            }
                        }
                    }
                    if ok {
                        let lin = if dim == 3 {
                            (idx[2] * nb + idx[1]) * nb + idx[0]
                        } else {
                            idx[1] * nb + idx[0]
                        };
                        out[len] = lin as usize;
                        len += 1;
                    }
                }
            }
        }
        out[..len].sort_unstable();
        let mut uniq = 0;
        for k in 0..len {
            if uniq == 0 || out[k] != out[uniq - 1] {
                out[uniq] = out[k];
                uniq += 1;
            }
        }
        (out, uniq)
    }

    fn bin_items(&self, b: usize) -> &[usize] {
        &self.items[self.starts[b]..self.starts[b + 1]]
    }

    /// Candidate neighbors of particle `i` (excluding `i`): a superset of all
    /// particles within `range`.
    pub fn candidates(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let (st, len) = self.stencil(self.bin_of[i]);
        for &nb in &st[..len] {
            out.extend(self.bin_items(nb).iter().copied().filter(|&j| j != i));
        }
        out
    }

    /// Indices of particles whose (periodic) distance to particle `i` is at most `range`.
    pub fn neighbors_within(&self, centers: &[Point], i: usize, range: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .candidates(i)
            .into_iter()
            .filter(|&j| norm(&self.cell.delta(&centers[j], &centers[i])) <= range)
            .collect();
        out.sort_unstable();
        out
    }

    /// Calls `f(i, j)` once for every unordered candidate pair `i != j`.
    pub fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let nb = self.bins_per_axis as isize;
        let dim = self.cell.dim();
        if nb == 1 {
            let own = self.bin_items(0);
            for (k, &i) in own.iter().enumerate() {
                for &j in &own[k + 1..] {
                    f(i, j);
                }
            }
            return;
        }
        // forward half of the stencil: offsets lexicographically after zero
        let mut half: Vec<[isize; 3]> = Vec::with_capacity(13);
        let zr: &[isize] = if dim == 3 { &[-1, 0, 1] } else { &[0] };
        for &dz in zr {
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    if (dz, dy, dx) > (0, 0, 0) {
                        half.push([dx, dy, dz]);
                    }
                }
            }
        }
        let periodic = self.cell.is_periodic();
        let nz = if dim == 3 { nb } else { 1 };
        for z in 0..nz {
            for y in 0..nb {
                for x in 0..nb {
                    let b = ((z * nb + y) * nb + x) as usize;
                    let own = self.bin_items(b);
                    if own.is_empty() {
                        continue;
                    }
                    for (k, &i) in own.iter().enumerate() {
                        for &j in &own[k + 1..] {
                            f(i, j);
                        }
                    }
                    'offsets: for off in &half {
                        let mut c = [x + off[0], y + off[1], z + off[2]];
                        for v in c.iter_mut().take(dim) {
                            if *v < 0 || *v >= nb {
                                if !periodic {
                                    continue 'offsets;
                                }
                                *v = v.rem_euclid(nb);
                            }
                        }
                        let other = self.bin_items(((c[2] * nb + c[1]) * nb + c[0]) as usize);
                        for &i in own {
                            for &j in other {
                                f(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cell-linked list for the configuration's centers with the given interaction range.
pub fn build_neighbor_index(config: &Configuration, range: f64) -> NeighborIndex {
    NeighborIndex::build(&config.cell, &config.centers, range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn unit3() -> Cell {
        Cell::periodic(3, 1.0).unwrap()
    }

    #[test]
    fn periodic_distance_examples() {
        let c = unit3();
        let d = periodic_distance(&[0.05, 0.0, 0.0], &[0.95, 0.0, 0.0], &c).unwrap();
        assert!(close(d, 0.1, 1e-12));
        assert_eq!(periodic_distance(&[0.3, 0.2, 0.1], &[0.3, 0.2, 0.1], &c).unwrap(), 0.0);
        let c2 = Cell::periodic(2, 1.0).unwrap();
        let d = periodic_distance(&[0.25, 0.25, 0.0], &[0.75, 0.75, 0.0], &c2).unwrap();
        assert!(close(d, 0.5f64.sqrt(), 1e-12));
        let open = Cell::new(3, 1.0, false).unwrap();
        let d = periodic_distance(&[0.05, 0.0, 0.0], &[0.95, 0.0, 0.0], &open).unwrap();
        assert!(close(d, 0.9, 1e-12));
    }

    #[test]
    fn periodic_distance_rejects_bad_points() {
        let c2 = Cell::periodic(2, 1.0).unwrap();
        assert!(periodic_distance(&[0.0, 0.0, 0.5], &[0.0; 3], &c2).is_err());
        assert!(Cell::new(4, 1.0, true).is_err());
        assert!(Cell::new(3, 0.0, true).is_err());
    }

    fn sphere(c: Point, r: f64) -> Particle {
        Particle { shape: ParticleShape::Sphere { radius: r }, center: c }
    }

    fn fiber(c: Point, axis: Point, length: f64) -> Particle {
        Particle { shape: ParticleShape::Spherocylinder { radius: 0.01, length, axis }, center: c }
    }

    #[test]
    fn pair_gap_examples() {
        let c = Cell::periodic(3, 4.0).unwrap();
        let g = pair_gap(&sphere([1.0, 1.0, 1.0], 0.1), &sphere([1.5, 1.0, 1.0], 0.1), &c).unwrap();
        assert!(close(g, 0.5, 1e-12));
        // coaxial, end-to-end gap 0.3
        let a = fiber([1.0, 1.0, 1.0], [1.0, 0.0, 0.0], 1.0);
        let b = fiber([2.3, 1.0, 1.0], [1.0, 0.0, 0.0], 1.0);
        assert!(close(pair_gap(&a, &b, &c).unwrap(), 0.3, 1e-12));
        // parallel side by side
        let b = fiber([1.2, 1.3, 1.0], [1.0, 0.0, 0.0], 1.0);
        assert!(close(pair_gap(&a, &b, &c).unwrap(), 0.3, 1e-12));
        assert!(pair_gap(&a, &sphere([1.0; 3], 0.1), &c).is_err());
    }

    /// Brute force: both segments sampled at 10^4 parameter pairs.
    fn brute_segment_gap(p: &Particle, q: &Particle, cell: &Cell) -> f64 {
        let (ParticleShape::Spherocylinder { length: l1, axis: a1, .. }, ParticleShape::Spherocylinder { length: l2, axis: a2, .. }) = (p.shape, q.shape) else {
            unreachable!()
        };
        let m = 100;
        let mut best = f64::INFINITY;
        for i in 0..=m {
            let s = (i as f64 / m as f64 - 0.5) * l1;
            let x = add(&p.center, &scale(&a1, s));
            for j in 0..=m {
                let t = (j as f64 / m as f64 - 0.5) * l2;
                let y = add(&q.center, &scale(&a2, t));
                best = best.min(norm(&cell.delta(&x, &y)));
            }
        }
        best
    }

    #[test]
    fn perpendicular_crossing_fibers() {
        let c = Cell::periodic(3, 4.0).unwrap();
        let a = fiber([2.0, 2.0, 2.0], [1.0, 0.0, 0.0], 1.0);
        let b = fiber([2.0, 2.0, 2.1], [0.0, 1.0, 0.0], 1.0);
        let exact = pair_gap(&a, &b, &c).unwrap();
        let brute = brute_segment_gap(&a, &b, &c);
        assert!(close(brute, 0.1, 1e-12));
        assert!(close(exact, 0.1, 1e-12));
        // across the periodic boundary
        let a = fiber([0.1, 2.0, 2.0], [1.0, 0.0, 0.0], 1.0);
        let b = fiber([3.9, 2.0, 2.1], [0.0, 1.0, 0.0], 1.0);
        assert!(close(pair_gap(&a, &b, &c).unwrap(), 0.1, 1e-12));
    }

    #[test]
    fn random_fiber_gaps_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = Cell::periodic(3, 3.0).unwrap();
        for _ in 0..20 {
            let mut pt = || [rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0];
            let (c1, c2) = (pt(), pt());
            let mut ax = || {
                let v = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
                scale(&v, 1.0 / norm(&v))
            };
            let (n1, n2) = (ax(), ax());
            let a = fiber(c1, n1, 1.0);
            let b = fiber(c2, n2, 1.0);
            let exact = pair_gap(&a, &b, &c).unwrap();
            let brute = brute_segment_gap(&a, &b, &c);
            // sampling resolution 0.01 along each segment
            assert!(exact <= brute + 1e-12);
            assert!(brute - exact < 1e-2, "{exact} vs {brute}");
        }
    }

    #[test]
    fn overlap_indicator_examples() {
        let c = Cell::periodic(3, 4.0).unwrap();
        let p = sphere([1.0, 1.0, 1.0], 0.3);
        let q = |g: f64| sphere([1.0 + g, 1.0, 1.0], 0.3);
        assert!(close(overlap_indicator(&p, &q(0.5), &c, 0.3).unwrap(), 0.1, 1e-12));
        assert_eq!(overlap_indicator(&p, &q(0.7), &c, 0.3).unwrap(), 0.0);
        assert!(close(overlap_indicator(&p, &q(0.7), &c, 0.36).unwrap(), 0.02, 1e-12));
        assert!(overlap_indicator(&p, &q(0.7), &c, 0.2).is_err());
    }

    #[test]
    fn analytic_volume_fraction_examples() {
        let c = unit3();
        let mut cfg = Configuration::new(
            c,
            Species::Sphere { radius: 0.25 },
            vec![[0.5; 3]],
            vec![],
            SpeciesMeta::default(),
        )
        .unwrap();
        assert!(matches!(analytic_volume_fraction(&cfg), Err(Error::Overlapping)));
        cfg.non_overlapping = true;
        assert!(close(analytic_volume_fraction(&cfg).unwrap(), 0.065449846949787, 1e-12));
        let c2 = Cell::periodic(2, 1.0).unwrap();
        let mut disk = Configuration::new(
            c2,
            Species::Disk { radius: 0.25 },
            vec![[0.5, 0.5, 0.0]],
            vec![],
            SpeciesMeta::default(),
        )
        .unwrap();
        disk.non_overlapping = true;
        assert!(close(analytic_volume_fraction(&disk).unwrap(), 0.19634954084936207, 1e-12));
        let empty = Configuration::empty(c, Species::Sphere { radius: 0.1 }, SpeciesMeta::default()).unwrap();
        assert_eq!(analytic_volume_fraction(&empty).unwrap(), 0.0);
    }

    #[test]
    fn configuration_validation() {
        let c = unit3();
        let meta = SpeciesMeta::default();
        assert!(Configuration::new(c, Species::Sphere { radius: 0.1 }, vec![[1.0, 0.0, 0.0]], vec![], meta).is_err());
        assert!(Configuration::new(c, Species::Sphere { radius: -0.1 }, vec![], vec![], meta).is_err());
        let fib = Species::Spherocylinder { radius: 0.01, length: 0.5, include_caps: false };
        assert!(Configuration::new(c, fib, vec![[0.5; 3]], vec![[1.0, 1e-5, 0.0]], meta).is_err());
        assert!(Configuration::new(c, fib, vec![[0.5; 3]], vec![[1.0, 0.0, 0.0]], meta).is_ok());
        let too_long = Species::Spherocylinder { radius: 0.01, length: 1.5, include_caps: false };
        assert!(Configuration::new(c, too_long, vec![], vec![], meta).is_err());
        assert!(Configuration::new(Cell::periodic(2, 1.0).unwrap(), Species::Sphere { radius: 0.1 }, vec![], vec![], meta).is_err());
    }

    #[test]
    fn neighbor_index_examples() {
        let c = unit3();
        let meta = SpeciesMeta::default();
        let sp = Species::Sphere { radius: 0.01 };
        let cfg = Configuration::new(c, sp, vec![[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]], vec![], meta).unwrap();
        let idx = build_neighbor_index(&cfg, 0.2);
        assert_eq!(idx.neighbors_within(&cfg.centers, 0, 0.2), vec![1]);
        let cfg = Configuration::new(c, sp, vec![[0.05, 0.5, 0.5], [0.95, 0.5, 0.5]], vec![], meta).unwrap();
        let idx = build_neighbor_index(&cfg, 0.2);
        assert!(idx.candidates(0).contains(&1));
        assert_eq!(idx.neighbors_within(&cfg.centers, 0, 0.2), vec![1]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let c = Cell::periodic(3, 2.0).unwrap();
        let fib = Species::Spherocylinder { radius: 0.025, length: 1.0, include_caps: false };
        let ax = scale(&[1.0, 2.0, 3.0], 1.0 / 14f64.sqrt());
        let mut cfg = Configuration::new(
            c,
            fib,
            vec![[0.1, 1.0 / 3.0, 2.0 - 1e-15]],
            vec![ax],
            SpeciesMeta { target_phi: 0.15, isolation_factor: 1.2 },
        )
        .unwrap();
        cfg.non_overlapping = true;
        let back = Configuration::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

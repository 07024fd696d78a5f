//! Midpoint voxelization and raw grid I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, sub, Configuration, Point, Species};

pub const PHASE_ENCODING: &str = "u8:0=matrix,1=inclusion";
pub const VOXEL_ORDER: &str = "x-fastest";

/// Binary phase map on an `n^d` grid over `[0, L)^d`; index `x + n (y + n z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dim: usize,
    n: usize,
    edge: f64,
    phase: Vec<u8>,
}

impl VoxelGrid {
    pub fn new(dim: usize, n: usize, edge: f64, phase: Vec<u8>) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::invalid(format!("grid dimension {dim}")));
        }
        if n == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        if !(edge > 0.0 && edge.is_finite()) {
            return Err(Error::invalid("grid edge must be positive"));
        }
        if phase.len() != n.pow(dim as u32) {
            return Err(Error::invalid(format!("{} phase values for {n}^{dim} voxels", phase.len())));
        }
        if phase.iter().any(|&v| v > 1) {
            return Err(Error::invalid("phase values must be 0 or 1"));
        }
        Ok(VoxelGrid { dim, n, edge, phase })
    }

    pub fn filled(dim: usize, n: usize, edge: f64, value: u8) -> Result<Self> {
        Self::new(dim, n, edge, vec![value; n.pow(dim as u32)])
    }

    pub fn from_fn(dim: usize, n: usize, edge: f64, f: impl Fn([usize; 3]) -> bool) -> Result<Self> {
        let total = n.pow(dim as u32);
        let phase = (0..total)
            .map(|idx| {
                let x = idx % n;
                let y = (idx / n) % n;
                let z = if dim == 3 { idx / (n * n) } else { 0 };
                f([x, y, z]) as u8
            })
            .collect();
        Self::new(dim, n, edge, phase)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge(&self) -> f64 {
        self.edge
    }

    pub fn spacing(&self) -> f64 {
        self.edge / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }

    pub fn phase(&self) -> &[u8] {
        &self.phase
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n; self.dim]
    }

    /// Phase map with 0 and 1 exchanged.
    pub fn complement(&self) -> VoxelGrid {
        VoxelGrid { phase: self.phase.iter().map(|v| 1 - v).collect(), ..self.clone() }
    }

    /// Cyclic shift by whole voxels along each axis.
    pub fn rolled(&self, shift: [isize; 3]) -> VoxelGrid {
        let n = self.n as isize;
        let mut out = vec![0u8; self.phase.len()];
        let nz = if self.dim == 3 { n } else { 1 };
        for z in 0..nz {
            for y in 0..n {
                for x in 0..n {
                    let src = ((z * n + y) * n + x) as usize;
                    let tx = (x + shift[0]).rem_euclid(n);
                    let ty = (y + shift[1]).rem_euclid(n);
                    let tz = if self.dim == 3 { (z + shift[2]).rem_euclid(n) } else { 0 };
                    out[((tz * n + ty) * n + tx) as usize] = self.phase[src];
                }
            }
        }
        VoxelGrid { phase: out, ..self.clone() }
    }

    /// Writes `path` (one byte per voxel) and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.phase)?;
        let side = GridSidecar {
            dim: self.dim,
            n: self.n,
            edge: self.edge,
            phase_encoding: PHASE_ENCODING.to_string(),
            order: VOXEL_ORDER.to_string(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Reads a grid from either its raw file or its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let (raw, side_path) = if path.extension().is_some_and(|e| e == "json") {
            (path.with_extension("raw"), path.to_path_buf())
        } else {
            (path.to_path_buf(), sidecar_path(path))
        };
        let schema = |message: String| Error::Schema { path: side_path.clone(), message };
        let side: GridSidecar = serde_json::from_str(&fs::read_to_string(&side_path)?)
            .map_err(|e| schema(e.to_string()))?;
        if side.phase_encoding != PHASE_ENCODING {
            return Err(schema(format!("unsupported phase encoding {:?}", side.phase_encoding)));
        }
        if side.order != VOXEL_ORDER {
            return Err(schema(format!("unsupported voxel order {:?}", side.order)));
        }
        let bytes = fs::read(&raw)?;
        VoxelGrid::new(side.dim, side.n, side.edge, bytes).map_err(|e| schema(e.to_string()))
    }
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSidecar {
    pub dim: usize,
    pub n: usize,
    #[serde(rename = "L")]
    pub edge: f64,
    pub phase_encoding: String,
    #[serde(default = "default_order")]
    pub order: String,
}

fn default_order() -> String {
    VOXEL_ORDER.to_string()
}

/// Voxel index range `[lo, hi]` (unwrapped) whose midpoints may lie in `[a, b]`.
fn index_range(a: f64, b: f64, h: f64) -> (i64, i64) {
    ((a / h - 0.5).floor() as i64, (b / h - 0.5).ceil() as i64)
}

/// Inclusion test for one particle, given the voxel midpoint relative to the particle center.
#[derive(Clone, Copy)]
enum Footprint {
    Round { r2: f64 },
    Fiber { r2: f64, half: f64, axis: Point, caps: bool },
}

impl Footprint {
    #[inline]
    fn contains(&self, rel: &Point) -> bool {
        match *self {
            Footprint::Round { r2 } => dot(rel, rel) <= r2,
            Footprint::Fiber { r2, half, axis, caps } => {
                let s = dot(rel, &axis);
                let perp2 = dot(rel, rel) - s * s;
                if s.abs() <= half {
                    perp2 <= r2
                } else if caps {
                    let e = s.abs() - half;
                    perp2 + e * e <= r2
                } else {
                    false
                }
            }
        }
    }
}

/// Midpoint segmentation: a voxel is inclusion iff its midpoint lies in a
/// particle (boundary counts as inside). Periodic cells wrap particles
/// around; non-periodic cells clip them.
pub fn voxelize(config: &Configuration, n: usize) -> Result<VoxelGrid> {
    if n == 0 {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    let dim = config.dim();
    let edge = config.cell.edge();
    let h = edge / n as f64;
    let periodic = config.cell.is_periodic();
    let r = config.species.radius();
    let footprint = |i: usize| match config.species {
        Species::Spherocylinder { include_caps, .. } => Footprint::Fiber {
            r2: r * r,
            half: config.species.half_length(),
            axis: config.axes[i],
            caps: include_caps,
        },
        _ => Footprint::Round { r2: r * r },
    };

    // per-axis half extent of each particle's bounding box
    let half_box = |i: usize| -> Point {
        match config.species {
            Species::Spherocylinder { include_caps, .. } => {
                let a = config.axes[i];
                let hl = config.species.half_length();
                let mut out = [0.0; 3];
                for k in 0..3 {
                    let cap = if include_caps { r } else { r * (1.0 - a[k] * a[k]).max(0.0).sqrt() };
                    out[k] = hl * a[k].abs() + cap;
                }
                out
            }
            _ => [r, r, r],
        }
    };

    // bucket particles by the slabs (last axis) they touch
    let slab_axis = dim - 1;
    let mut slabs: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut boxes: Vec<[(i64, i64); 3]> = Vec::with_capacity(config.len());
    for i in 0..config.len() {
        let c = config.centers[i];
        let hb = half_box(i);
        let mut b = [(0i64, -1i64); 3];
        for k in 0..dim {
            let (mut lo, mut hi) = index_range(c[k] - hb[k], c[k] + hb[k], h);
            if !periodic {
                lo = lo.max(0);
                hi = hi.min(n as i64 - 1);
            }
            b[k] = (lo, hi);
        }
        boxes.push(b);
        let (lo, hi) = b[slab_axis];
        if hi < lo {
            continue;
        }
        if periodic && hi - lo + 1 >= n as i64 {
            for s in slabs.iter_mut() {
                s.push(i as u32);
            }
        } else {
            for z in lo..=hi {
                let zi = z.rem_euclid(n as i64) as usize;
                slabs[zi].push(i as u32);
            }
        }
    }

    let slab_len = n.pow(slab_axis as u32);
    let mut phase = vec![0u8; n.pow(dim as u32)];
    let ni = n as i64;
    phase.par_chunks_mut(slab_len).enumerate().for_each(|(zs, slab)| {
        for &pi in &slabs[zs] {
            let i = pi as usize;
            let c = config.centers[i];
            let fp = footprint(i);
            let b = boxes[i];
            // unwrapped slab indices that map onto this slab
            let (zlo, zhi) = b[slab_axis];
            let zs_i = zs as i64;
            let first = zlo + (zs_i - zlo).rem_euclid(ni);
            let mut z = first;
            while z <= zhi {
                let zc = (z as f64 + 0.5) * h - c[slab_axis];
                if dim == 2 {
                    stamp_row(slab, 0, &b[0], ni, h, &c, [0.0, zc, 0.0], &fp);
                } else {
                    for y in b[1].0..=b[1].1 {
                        let yc = (y as f64 + 0.5) * h - c[1];
                        let row = y.rem_euclid(ni) as usize * n;
                        stamp_row(slab, row, &b[0], ni, h, &c, [0.0, yc, zc], &fp);
                    }
                }
                if !periodic {
                    break;
                }
                z += ni;
            }
        }
    });
    VoxelGrid::new(dim, n, edge, phase)
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn stamp_row(
    slab: &mut [u8],
    row: usize,
    xr: &(i64, i64),
    n: i64,
    h: f64,
    c: &Point,
    mut rel: Point,
    fp: &Footprint,
) {
    for x in xr.0..=xr.1 {
        rel[0] = (x as f64 + 0.5) * h - c[0];
        if fp.contains(&rel) {
            slab[row + x.rem_euclid(n) as usize] = 1;
        }
    }
}

/// Mean of the phase indicator.
pub fn measured_volume_fraction(grid: &VoxelGrid) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    let ones: usize = grid.phase.iter().map(|&v| v as usize).sum();
    ones as f64 / grid.len() as f64
}

/// Distance of the unwrapped position `p` to the voxel midpoint `(idx + ½) h`, for tests.
pub fn midpoint(idx: [usize; 3], h: f64) -> Point {
    [(idx[0] as f64 + 0.5) * h, (idx[1] as f64 + 0.5) * h, (idx[2] as f64 + 0.5) * h]
}

/// Offset of a voxel midpoint from a point; exposed for brute-force checks.
pub fn midpoint_offset(idx: [usize; 3], h: f64, p: &Point) -> Point {
    sub(&midpoint(idx, h), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Cell, SpeciesMeta};

    fn one(dim: usize, species: Species, center: Point, periodic: bool) -> Configuration {
        let cell = Cell::new(dim, 1.0, periodic).unwrap();
        let axes = match species {
            Species::Spherocylinder { .. } => vec![[0.0, 0.0, 1.0]],
            _ => vec![],
        };
        Configuration::new(cell, species, vec![center], axes, SpeciesMeta::default()).unwrap()
    }

    #[test]
    fn sphere_volume_within_one_percent() {
        let cfg = one(3, Species::Sphere { radius: 0.25 }, [0.5, 0.5, 0.5], true);
        let g = voxelize(&cfg, 64).unwrap();
        let phi = measured_volume_fraction(&g);
        assert!((phi / 0.065449846949787 - 1.0).abs() < 0.01, "{phi}");
    }

    #[test]
    fn empty_and_checkerboard() {
        let cell = Cell::periodic(2, 1.0).unwrap();
        let cfg = Configuration::empty(cell, Species::Disk { radius: 0.1 }, SpeciesMeta::default()).unwrap();
        let g = voxelize(&cfg, 8).unwrap();
        assert!(g.phase().iter().all(|&v| v == 0));
        assert_eq!(measured_volume_fraction(&VoxelGrid::filled(3, 4, 1.0, 1).unwrap()), 1.0);
        let cb = VoxelGrid::from_fn(2, 8, 1.0, |[x, y, _]| (x + y) % 2 == 0).unwrap();
        assert_eq!(measured_volume_fraction(&cb), 0.5);
    }

    #[test]
    fn corner_disk_wraps_into_four_corners() {
        let cfg = one(2, Species::Disk { radius: 0.2 }, [0.0, 0.0, 0.0], true);
        let g = voxelize(&cfg, 16).unwrap();
        let at = |x: usize, y: usize| g.phase()[y * 16 + x];
        assert_eq!((at(0, 0), at(15, 0), at(0, 15), at(15, 15)), (1, 1, 1, 1));
        assert_eq!(at(8, 8), 0);
        let clipped = voxelize(&one(2, Species::Disk { radius: 0.2 }, [0.0, 0.0, 0.0], false), 16).unwrap();
        assert_eq!(clipped.phase()[15 * 16 + 15], 0);
        assert_eq!(clipped.phase()[0], 1);
        let ratio = measured_volume_fraction(&g) / measured_volume_fraction(&clipped);
        assert!((ratio - 4.0).abs() < 0.2);
    }

    #[test]
    fn matches_brute_force_midpoints() {
        let species = Species::Spherocylinder { radius: 0.08, length: 0.5, include_caps: true };
        let cell = Cell::periodic(3, 1.0).unwrap();
        let a = [0.6f64, 0.0, 0.8];
        let cfg = Configuration::new(cell, species, vec![[0.9, 0.1, 0.2]], vec![a], SpeciesMeta::default())
            .unwrap();
        let n = 24;
        let g = voxelize(&cfg, n).unwrap();
        let h = 1.0 / n as f64;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let m = midpoint([x, y, z], h);
                    let d = cell.delta(&m, &cfg.centers[0]);
                    let s = dot(&d, &a).clamp(-0.25, 0.25);
                    let q = sub(&d, &crate::geometry::scale(&a, s));
                    let inside = dot(&q, &q) <= 0.08 * 0.08;
                    assert_eq!(g.phase()[(z * n + y) * n + x] == 1, inside, "{x} {y} {z}");
                }
            }
        }
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::from_fn(3, 5, 2.0, |[x, y, z]| x * y + z > 6).unwrap();
        let p = dir.path().join("g.raw");
        g.save(&p).unwrap();
        assert_eq!(VoxelGrid::load(&p).unwrap(), g);
        assert_eq!(VoxelGrid::load(&dir.path().join("g.json")).unwrap(), g);
        std::fs::write(dir.path().join("g.json"), r#"{"dim":3,"n":4,"L":2.0,"phase_encoding":"u8:0=matrix,1=inclusion"}"#)
            .unwrap();
        assert!(matches!(VoxelGrid::load(&p), Err(Error::Schema { .. })));
    }
}

//! Periodic corrector problem on voxel grids, solved with the Eyre–Milton
//! polarization scheme on the Moulinec–Suquet frequency set.
//!
//! With reference conductivity `α₀`, the polarization `p = (A + α₀) ξ`
//! satisfies `p = 2 α₀ ξ̄ + Y Z⁰ p`, where `Y = Id − 2Γ` is the Helmholtz
//! reflection and `Z⁰ = (A − α₀)(A + α₀)⁻¹` acts pointwise. Real vector
//! fields are transformed pairwise as the real and imaginary parts of one
//! complex field and separated again through Hermitian symmetry.

use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{frequency, is_nyquist, mirror, FftNd};
use crate::raster::{measured_volume_fraction, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialPair {
    pub alpha_inclusion: f64,
    pub alpha_matrix: f64,
}

impl Default for MaterialPair {
    fn default() -> Self {
        MaterialPair { alpha_inclusion: 1.2, alpha_matrix: 0.2 }
    }
}

impl MaterialPair {
    pub fn new(alpha_inclusion: f64, alpha_matrix: f64) -> Result<Self> {
        let m = MaterialPair { alpha_inclusion, alpha_matrix };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_inclusion > 0.0 && self.alpha_matrix > 0.0)
            || !self.alpha_inclusion.is_finite()
            || !self.alpha_matrix.is_finite()
        {
            return Err(Error::invalid("conductivities must be positive and finite"));
        }
        Ok(())
    }

    pub fn alpha(&self, phase: u8) -> f64 {
        if phase == 1 {
            self.alpha_inclusion
        } else {
            self.alpha_matrix
        }
    }

    pub fn swapped(&self) -> Self {
        MaterialPair { alpha_inclusion: self.alpha_matrix, alpha_matrix: self.alpha_inclusion }
    }

    pub fn harmonic_mean(&self, phi: f64) -> f64 {
        1.0 / (phi / self.alpha_inclusion + (1.0 - phi) / self.alpha_matrix)
    }

    pub fn arithmetic_mean(&self, phi: f64) -> f64 {
        phi * self.alpha_inclusion + (1.0 - phi) * self.alpha_matrix
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMetric {
    /// `‖p^{m+1} − p^m‖ / ‖p^{m+1}‖`.
    #[default]
    PolarizationUpdate,
    /// RMS of `Γ(Aξ)` over `|⟨Aξ⟩|`.
    Equilibrium,
}

impl FromStr for ConvergenceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "update" | "polarization_update" => Ok(ConvergenceMetric::PolarizationUpdate),
            "equilibrium" => Ok(ConvergenceMetric::Equilibrium),
            other => Err(Error::invalid(format!("unknown convergence metric {other:?}"))),
        }
    }
}

/// Treatment of modes with a Nyquist component on even grids.
///
/// The plain rank-one projector at such a mode does not commute with
/// complex conjugation, so it is replaced by one of these real projectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NyquistRule {
    /// `Γ = Id`: the flux `Aξ` has no Nyquist content.
    Identity,
    /// `Γ = 0`: the gradient `ξ` has no Nyquist content.
    #[default]
    Zero,
    /// Nyquist components of the wave vector are set to zero before projecting.
    ComponentZeroed,
}

impl FromStr for NyquistRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(NyquistRule::Identity),
            "zero" => Ok(NyquistRule::Zero),
            "component_zeroed" => Ok(NyquistRule::ComponentZeroed),
            other => Err(Error::invalid(format!("unknown Nyquist rule {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// `None` selects the geometric mean of the conductivities present in the grid.
    pub reference_alpha: Option<f64>,
    pub tolerance: f64,
    pub max_iters: usize,
    pub metric: ConvergenceMetric,
    pub nyquist: NyquistRule,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            reference_alpha: None,
            tolerance: 1e-6,
            max_iters: 1000,
            metric: ConvergenceMetric::PolarizationUpdate,
            nyquist: NyquistRule::Zero,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("solver tolerance must be positive"));
        }
        if self.reference_alpha.is_some_and(|a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("reference conductivity must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }

    fn reference(&self, grid: &VoxelGrid, materials: &MaterialPair) -> f64 {
        if let Some(a) = self.reference_alpha {
            return a;
        }
        let ones = grid.phase().iter().filter(|&&v| v == 1).count();
        if ones == 0 {
            materials.alpha_matrix
        } else if ones == grid.len() {
            materials.alpha_inclusion
        } else {
            (materials.alpha_inclusion * materials.alpha_matrix).sqrt()
        }
    }
}

/// Solution for one macroscopic gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadResult {
    pub load: Vec<f64>,
    /// `⟨A ξ⟩`.
    pub mean_flux: Vec<f64>,
    /// `⟨ξ⟩`.
    pub mean_gradient: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Convergence metric after every iteration.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApparentResult {
    pub dim: usize,
    /// Row-major `d × d`; columns that were not solved for are NaN.
    pub tensor: Vec<Vec<f64>>,
    pub a_bar: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// `max |T − Tᵀ| / max |T|` before symmetrization (NaN unless all columns were solved).
    pub asymmetry: f64,
    pub phi_measured: f64,
    pub reference_alpha: f64,
    pub loads: Vec<LoadResult>,
    pub wall_time_s: f64,
}

/// Projection workspace for real `d`-component fields.
struct Spectral {
    dim: usize,
    n: usize,
    fft: FftNd,
    /// Components 0 and 1 as real and imaginary part.
    a: Vec<Complex64>,
    /// Component 2 (3D only).
    b: Vec<Complex64>,
    rule: NyquistRule,
}

#[derive(Clone, Copy, PartialEq)]
enum Op {
    Project,
    Reflect,
}

impl Spectral {
    fn new(dim: usize, n: usize, rule: NyquistRule) -> Self {
        let fft = FftNd::new(dim, n);
        let len = fft.len();
        Spectral {
            dim,
            n,
            fft,
            a: vec![Complex64::default(); len],
            b: if dim == 3 { vec![Complex64::default(); len] } else { Vec::new() },
            rule,
        }
    }

    fn len(&self) -> usize {
        self.a.len()
    }

    /// Forward transform, apply `op` per mode, inverse transform (unnormalized).
    fn apply(&mut self, op: Op) {
        self.fft.forward(&mut self.a);
        if self.dim == 3 {
            self.fft.forward(&mut self.b);
        }
        let (dim, n, rule) = (self.dim, self.n, self.rule);
        let (a, b) = (&mut self.a, &mut self.b);
        let i = Complex64::new(0.0, 1.0);
        mode_pairs(dim, n, |idx, mid, k, km, nyq| {
            let (pk, pm) = unpack(a, b, dim, idx, mid);
            let gk = gamma(rule, dim, n, &k, nyq, &pk);
            let gm = gamma(rule, dim, n, &km, nyq, &pm);
            let (qk, qm) = match op {
                Op::Project => (gk, gm),
                Op::Reflect => (
                    [pk[0] - 2.0 * gk[0], pk[1] - 2.0 * gk[1], pk[2] - 2.0 * gk[2]],
                    [pm[0] - 2.0 * gm[0], pm[1] - 2.0 * gm[1], pm[2] - 2.0 * gm[2]],
                ),
            };
            a[idx] = qk[0] + i * qk[1];
            a[mid] = qm[0] + i * qm[1];
            if dim == 3 {
                b[idx] = qk[2];
                b[mid] = qm[2];
            }
        });
        self.fft.inverse(&mut self.a);
        if self.dim == 3 {
            self.fft.inverse(&mut self.b);
        }
    }

    /// `Σ_x |Γ f|²` for the field currently packed in the buffers.
    fn gamma_norm_sq(&mut self) -> f64 {
        self.fft.forward(&mut self.a);
        if self.dim == 3 {
            self.fft.forward(&mut self.b);
        }
        let (dim, n, rule) = (self.dim, self.n, self.rule);
        let (a, b) = (&self.a, &self.b);
        let mut acc = 0.0;
        mode_pairs(dim, n, |idx, mid, k, km, nyq| {
            let (pk, pm) = unpack(a, b, dim, idx, mid);
            let gk = gamma(rule, dim, n, &k, nyq, &pk);
            acc += gk.iter().map(|c| c.norm_sqr()).sum::<f64>();
            if mid != idx {
                let gm = gamma(rule, dim, n, &km, nyq, &pm);
                acc += gm.iter().map(|c| c.norm_sqr()).sum::<f64>();
            }
        });
        acc / self.len() as f64
    }

    fn pack(&mut self, f: impl Fn(usize) -> [f64; 3]) {
        for x in 0..self.a.len() {
            let v = f(x);
            self.a[x] = Complex64::new(v[0], v[1]);
            if self.dim == 3 {
                self.b[x] = Complex64::new(v[2], 0.0);
            }
        }
    }

    #[inline]
    fn unpacked(&self, x: usize) -> [f64; 3] {
        let a = self.a[x];
        let c = if self.dim == 3 { self.b[x].re } else { 0.0 };
        [a.re, a.im, c]
    }
}

/// `Γ p` at one mode.
#[inline]
fn gamma(rule: NyquistRule, dim: usize, n: usize, k: &[f64; 3], nyq: bool, p: &[Complex64; 3]) -> [Complex64; 3] {
    let zero = [Complex64::default(); 3];
    let mut kk = *k;
    if nyq {
        match rule {
            NyquistRule::Identity => return *p,
            NyquistRule::Zero => return zero,
            NyquistRule::ComponentZeroed => {
                for x in kk.iter_mut().take(dim) {
                    if n % 2 == 0 && *x == (n / 2) as f64 {
                        *x = 0.0;
                    }
                }
            }
        }
    }
    let k2: f64 = kk.iter().map(|x| x * x).sum();
    if k2 == 0.0 {
        return zero;
    }
    let kp = (p[0] * kk[0] + p[1] * kk[1] + p[2] * kk[2]) / k2;
    [kp * kk[0], kp * kk[1], kp * kk[2]]
}

/// Visits each pair `{k, −k}` once with linear indices and wave vectors.
fn mode_pairs(dim: usize, n: usize, mut f: impl FnMut(usize, usize, [f64; 3], [f64; 3], bool)) {
    let nz = if dim == 3 { n } else { 1 };
    let fz = |x: usize| if dim == 3 { frequency(x, n) as f64 } else { 0.0 };
    for l in 0..nz {
        let ml = if dim == 3 { mirror(l, n) } else { 0 };
        let nyq_l = dim == 3 && is_nyquist(l, n);
        for j in 0..n {
            let mj = mirror(j, n);
            let nyq_j = nyq_l || is_nyquist(j, n);
            for i in 0..n {
                let mi = mirror(i, n);
                let idx = (l * n + j) * n + i;
                let mid = (ml * n + mj) * n + mi;
                if mid < idx {
                    continue;
                }
                let nyq = nyq_j || is_nyquist(i, n);
                let k = [frequency(i, n) as f64, frequency(j, n) as f64, fz(l)];
                let km = [frequency(mi, n) as f64, frequency(mj, n) as f64, fz(ml)];
                f(idx, mid, k, km, nyq);
            }
        }
    }
}

/// Spectra of the packed components at `k` and `−k`.
#[inline]
fn unpack(a: &[Complex64], b: &[Complex64], dim: usize, idx: usize, mid: usize) -> ([Complex64; 3], [Complex64; 3]) {
    let mi = Complex64::new(0.0, -0.5);
    let za = a[idx];
    let zm = a[mid];
    let pk0 = (za + zm.conj()) * 0.5;
    let pk1 = (za - zm.conj()) * mi;
    let pm0 = (zm + za.conj()) * 0.5;
    let pm1 = (zm - za.conj()) * mi;
    let (pk2, pm2) = if dim == 3 { (b[idx], b[mid]) } else { Default::default() };
    ([pk0, pk1, pk2], [pm0, pm1, pm2])
}

fn check_components(field: &[Vec<f64>], dim: usize, n: usize) -> Result<()> {
    if !(dim == 2 || dim == 3) {
        return Err(Error::invalid(format!("dimension {dim}")));
    }
    if field.len() != dim {
        return Err(Error::contract(format!("{} components for a {dim}-dimensional field", field.len())));
    }
    let total = n.pow(dim as u32);
    if field.iter().any(|c| c.len() != total) {
        return Err(Error::contract("component length does not match the grid"));
    }
    Ok(())
}

/// Helmholtz projection of a real vector field given as `d` component
/// arrays on an `n^d` grid.
pub fn helmholtz_apply(field: &[Vec<f64>], dim: usize, n: usize, rule: NyquistRule) -> Result<Vec<Vec<f64>>> {
    check_components(field, dim, n)?;
    let mut sp = Spectral::new(dim, n, rule);
    sp.pack(|x| {
        let mut v = [0.0; 3];
        for (c, comp) in field.iter().enumerate() {
            v[c] = comp[x];
        }
        v
    });
    sp.apply(Op::Project);
    let inv = 1.0 / sp.len() as f64;
    let mut out = vec![vec![0.0; sp.len()]; dim];
    for x in 0..sp.len() {
        let v = sp.unpacked(x);
        for c in 0..dim {
            out[c][x] = v[c] * inv;
        }
    }
    Ok(out)
}

struct Problem<'a> {
    grid: &'a VoxelGrid,
    materials: MaterialPair,
    settings: SolverSettings,
    alpha0: f64,
}

impl Problem<'_> {
    fn solve(&self, sp: &mut Spectral, load: &[f64]) -> Result<LoadResult> {
        let dim = self.grid.dim();
        let len = self.grid.len();
        let phase = self.grid.phase();
        let a0 = self.alpha0;
        let alpha = [self.materials.alpha_matrix, self.materials.alpha_inclusion];
        let z = [(alpha[0] - a0) / (alpha[0] + a0), (alpha[1] - a0) / (alpha[1] + a0)];
        let mut drive = [0.0; 3];
        for c in 0..dim {
            drive[c] = 2.0 * a0 * load[c];
        }
        let mut p: Vec<[f64; 3]> = vec![drive; len];
        let inv = 1.0 / len as f64;
        let mut history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        while iterations < self.settings.max_iters {
            sp.pack(|x| {
                let zx = z[phase[x] as usize];
                let v = p[x];
                [zx * v[0], zx * v[1], zx * v[2]]
            });
            sp.apply(Op::Reflect);
            let mut diff2 = 0.0;
            let mut norm2 = 0.0;
            for (x, px) in p.iter_mut().enumerate() {
                let q = sp.unpacked(x);
                for c in 0..dim {
                    let new = drive[c] + q[c] * inv;
                    let d = new - px[c];
                    diff2 += d * d;
                    norm2 += new * new;
                    px[c] = new;
                }
            }
            iterations += 1;
            if !diff2.is_finite() || !norm2.is_finite() {
                return Err(Error::SolverDiverged { iterations });
            }
            residual = match self.settings.metric {
                ConvergenceMetric::PolarizationUpdate => {
                    if norm2 > 0.0 {
                        (diff2 / norm2).sqrt()
                    } else {
                        0.0
                    }
                }
                ConvergenceMetric::Equilibrium => self.equilibrium(sp, &p, &alpha),
            };
            history.push(residual);
            if residual <= self.settings.tolerance {
                converged = true;
                break;
            }
        }
        // per-phase sums keep the homogeneous case exact
        let mut sums = [[0.0; 3]; 2];
        for (x, px) in p.iter().enumerate() {
            let ph = phase[x] as usize;
            let s = 1.0 / (alpha[ph] + a0);
            for c in 0..dim {
                sums[ph][c] += px[c] * s;
            }
        }
        let mut flux = vec![0.0; dim];
        let mut grad = vec![0.0; dim];
        for c in 0..dim {
            let (m, i) = (sums[0][c] * inv, sums[1][c] * inv);
            grad[c] = m + i;
            flux[c] = alpha[0] * m + alpha[1] * i;
        }
        Ok(LoadResult {
            load: load.to_vec(),
            mean_flux: flux,
            mean_gradient: grad,
            iterations,
            residual,
            converged,
            history,
        })
    }

    fn equilibrium(&self, sp: &mut Spectral, p: &[[f64; 3]], alpha: &[f64; 2]) -> f64 {
        let phase = self.grid.phase();
        let a0 = self.alpha0;
        let dim = self.grid.dim();
        let mut mean = [0.0; 3];
        let flux = |x: usize| {
            let ax = alpha[phase[x] as usize];
            let s = ax / (ax + a0);
            [s * p[x][0], s * p[x][1], s * p[x][2]]
        };
        for x in 0..p.len() {
            let f = flux(x);
            for c in 0..dim {
                mean[c] += f[c];
            }
        }
        let inv = 1.0 / p.len() as f64;
        let mean_norm = (mean.iter().map(|m| (m * inv).powi(2)).sum::<f64>()).sqrt();
        sp.pack(flux);
        let rms = (sp.gamma_norm_sq() * inv).sqrt();
        if mean_norm > 0.0 {
            rms / mean_norm
        } else {
            rms
        }
    }
}

fn prepare<'a>(
    grid: &'a VoxelGrid,
    materials: &MaterialPair,
    settings: &SolverSettings,
) -> Result<(Problem<'a>, Spectral)> {
    materials.validate()?;
    settings.validate()?;
    let alpha0 = settings.reference(grid, materials);
    let sp = Spectral::new(grid.dim(), grid.n(), settings.nyquist);
    Ok((Problem { grid, materials: *materials, settings: *settings, alpha0 }, sp))
}

/// Solves the corrector problem for one macroscopic gradient `load`.
pub fn eyre_milton_solve(
    grid: &VoxelGrid,
    materials: &MaterialPair,
    load: &[f64],
    settings: &SolverSettings,
) -> Result<LoadResult> {
    if load.len() != grid.dim() {
        return Err(Error::contract("load dimension does not match the grid"));
    }
    let (problem, mut sp) = prepare(grid, materials, settings)?;
    problem.solve(&mut sp, load)
}

/// Apparent tensor from the unit loads listed in `columns`.
pub fn apparent_columns(
    grid: &VoxelGrid,
    materials: &MaterialPair,
    settings: &SolverSettings,
    columns: &[usize],
) -> Result<ApparentResult> {
    let start = Instant::now();
    let dim = grid.dim();
    if columns.is_empty() || columns.iter().any(|&c| c >= dim) {
        return Err(Error::invalid("load columns must be a non-empty subset of the axes"));
    }
    let (problem, mut sp) = prepare(grid, materials, settings)?;
    let mut tensor = vec![vec![f64::NAN; dim]; dim];
    let mut loads = Vec::new();
    for &col in columns {
        let mut e = vec![0.0; dim];
        e[col] = 1.0;
        let r = problem.solve(&mut sp, &e)?;
        for row in 0..dim {
            tensor[row][col] = r.mean_flux[row];
        }
        loads.push(r);
    }
    let full = (0..dim).all(|c| columns.contains(&c));
    let mut asymmetry = f64::NAN;
    if full {
        let scale = tensor.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst: f64 = 0.0;
        for r in 0..dim {
            for c in 0..r {
                worst = worst.max((tensor[r][c] - tensor[c][r]).abs());
                let s = 0.5 * (tensor[r][c] + tensor[c][r]);
                tensor[r][c] = s;
                tensor[c][r] = s;
            }
        }
        asymmetry = if scale > 0.0 { worst / scale } else { 0.0 };
    }
    Ok(ApparentResult {
        dim,
        a_bar: tensor[0][0],
        iterations: loads.iter().map(|l| l.iterations).max().unwrap_or(0),
        residual: loads.iter().map(|l| l.residual).fold(0.0, f64::max),
        converged: loads.iter().all(|l| l.converged),
        asymmetry,
        phi_measured: measured_volume_fraction(grid),
        reference_alpha: problem.alpha0,
        tensor,
        loads,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Full apparent tensor: one solve per canonical unit load, then symmetrized.
pub fn apparent_tensor(grid: &VoxelGrid, materials: &MaterialPair, settings: &SolverSettings) -> Result<ApparentResult> {
    let all: Vec<usize> = (0..grid.dim()).collect();
    apparent_columns(grid, materials, settings, &all)
}

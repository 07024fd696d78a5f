//! First-order low-contrast expansion of the apparent conductivity, used as
//! an analytic oracle for the solver.
//!
//! With `ρ = (√α₁ − √α₂)/(√α₁ + √α₂)` and `α₀ = √(α₁α₂)`,
//! `ā = α₀ (1 − 2ρ) + 4 α₀ ρ φ + O(ρ²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{measured_volume_fraction, VoxelGrid};
use crate::solver::{apparent_columns, MaterialPair, SolverSettings};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub rho: f64,
    pub alpha0: f64,
}

pub fn contrast(materials: &MaterialPair) -> Result<ContrastSummary> {
    materials.validate()?;
    let (s1, s2) = (materials.alpha_inclusion.sqrt(), materials.alpha_matrix.sqrt());
    Ok(ContrastSummary { rho: (s1 - s2) / (s1 + s2), alpha0: s1 * s2 })
}

/// Conductivities with reference `alpha0` and contrast `rho`.
pub fn materials_for_contrast(alpha0: f64, rho: f64) -> Result<MaterialPair> {
    if !(alpha0 > 0.0) || !(rho.abs() < 1.0) {
        return Err(Error::invalid("need alpha0 > 0 and |rho| < 1"));
    }
    MaterialPair::new(alpha0 * (1.0 + rho) / (1.0 - rho), alpha0 * (1.0 - rho) / (1.0 + rho))
}

pub fn first_order_apparent(materials: &MaterialPair, phi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::invalid("volume fraction must lie in [0, 1]"));
    }
    let c = contrast(materials)?;
    Ok(c.alpha0 * (1.0 - 2.0 * c.rho) + 4.0 * c.alpha0 * c.rho * phi)
}

/// Leading-order random error `4 α₀ ρ · std(φ)`, reported as a magnitude.
pub fn random_error_first_order(materials: &MaterialPair, vf_std: f64) -> Result<f64> {
    if !(vf_std >= 0.0) {
        return Err(Error::invalid("volume-fraction deviation must be non-negative"));
    }
    let c = contrast(materials)?;
    Ok((4.0 * c.alpha0 * vf_std * c.rho).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub rho: f64,
    pub alpha_inclusion: f64,
    pub alpha_matrix: f64,
    pub a_solver: f64,
    pub a_first_order: f64,
    pub deviation: f64,
    /// `deviation(ρ) / deviation(2ρ)`, NaN on the first row.
    pub ratio: f64,
}

/// Solver-versus-expansion deviations on a fixed grid, for `rho_start`,
/// `rho_start / 2`, … (`halvings + 1` rows), followed by a `ρ = 0` row.
pub fn verify_expansion_order(
    grid: &VoxelGrid,
    alpha0: f64,
    rho_start: f64,
    halvings: usize,
    settings: &SolverSettings,
) -> Result<Vec<ExpansionRow>> {
    let phi = measured_volume_fraction(grid);
    let mut rows: Vec<ExpansionRow> = Vec::new();
    let mut rhos: Vec<f64> = (0..=halvings).map(|k| rho_start / 2f64.powi(k as i32)).collect();
    rhos.push(0.0);
    for rho in rhos {
        let m = materials_for_contrast(alpha0, rho)?;
        let s = SolverSettings { reference_alpha: Some(alpha0), ..*settings };
        let r = apparent_columns(grid, &m, &s, &[0])?;
        let first = first_order_apparent(&m, phi)?;
        let deviation = (r.a_bar - first).abs();
        let ratio = match rows.last() {
            Some(prev) if rho > 0.0 => deviation / prev.deviation,
            _ => f64::NAN,
        };
        rows.push(ExpansionRow {
            rho,
            alpha_inclusion: m.alpha_inclusion,
            alpha_matrix: m.alpha_matrix,
            a_solver: r.a_bar,
            a_first_order: first,
            deviation,
            ratio,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrast_examples() {
        let c = contrast(&MaterialPair::new(0.7, 0.7).unwrap()).unwrap();
        assert_eq!(c.rho, 0.0);
        let m = MaterialPair::default();
        let c = contrast(&m).unwrap();
        // independent arithmetic: √1.2 = 1.0954451150103321, √0.2 = 0.4472135954999579
        let rho = (1.095_445_115_010_332_1 - 0.447_213_595_499_957_9) / (1.095_445_115_010_332_1 + 0.447_213_595_499_957_9);
        assert!((c.rho - rho).abs() < 1e-15);
        assert!((c.rho - 0.420204).abs() < 1e-6);
        assert!((c.alpha0 - 0.48990).abs() < 1e-5);
        let sw = contrast(&m.swapped()).unwrap();
        assert!((sw.rho + c.rho).abs() < 1e-15 && (sw.alpha0 - c.alpha0).abs() < 1e-15);
    }

    #[test]
    fn first_order_examples() {
        let same = MaterialPair::new(0.3, 0.3).unwrap();
        assert!((first_order_apparent(&same, 0.4).unwrap() - 0.3).abs() < 1e-15);
        let m = MaterialPair::default();
        let c = contrast(&m).unwrap();
        assert!((first_order_apparent(&m, 0.5).unwrap() - c.alpha0).abs() < 1e-15);
        assert!((first_order_apparent(&m, 0.0).unwrap() - c.alpha0 * (1.0 - 2.0 * c.rho)).abs() < 1e-15);
        assert_eq!(random_error_first_order(&m, 0.0).unwrap(), 0.0);
        assert_eq!(random_error_first_order(&same, 0.01).unwrap(), 0.0);
        assert!((random_error_first_order(&m, 0.01).unwrap() - 0.008234).abs() < 1e-6);
    }

    #[test]
    fn contrast_round_trip() {
        let m = materials_for_contrast(0.5, 0.3).unwrap();
        let c = contrast(&m).unwrap();
        assert!((c.rho - 0.3).abs() < 1e-14 && (c.alpha0 - 0.5).abs() < 1e-14);
    }
}

//! Ensemble statistics: summaries with Student-t intervals, error
//! decomposition, success probabilities, log-log fits, autocorrelation
//! and volume-fraction variance curves.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::fft::{frequency, FftNd};
use crate::raster::{measured_volume_fraction, VoxelGrid};

/// Two-sided confidence level of all reported intervals.
pub const CONFIDENCE: f64 = 0.99;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub values: Vec<f64>,
    pub protocol: String,
    pub size: f64,
    pub resolution: usize,
    pub seeds: Vec<u64>,
}

impl SampleSet {
    pub fn from_values(values: Vec<f64>) -> Self {
        SampleSet { values, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased (divisor `N − 1`).
    pub std: f64,
    /// `t_{0.995, N−1} · std / √N`.
    pub ci_halfwidth: f64,
}

/// Quantile `t_{(1+CONFIDENCE)/2, dof}`.
pub fn t_quantile(dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Degenerate("Student-t quantile needs at least one degree of freedom".into()));
    }
    let t = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(t.inverse_cdf(0.5 + 0.5 * CONFIDENCE))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased standard deviation; `None` for fewer than two values.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

pub fn summarize(samples: &SampleSet) -> Result<StudySummary> {
    summarize_values(&samples.values)
}

pub fn summarize_values(values: &[f64]) -> Result<StudySummary> {
    let n = values.len();
    let std = std_dev(values)
        .ok_or_else(|| Error::Degenerate(format!("standard deviation undefined for {n} sample(s)")))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let ci_halfwidth = t_quantile(n - 1)? * std / (n as f64).sqrt();
    Ok(StudySummary { n, mean: mean(values), std, ci_halfwidth })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    /// `|mean / reference − 1|`.
    pub relative_systematic: f64,
    /// `std / mean`.
    pub relative_random: f64,
}

pub fn error_decomposition(samples: &SampleSet, reference: f64) -> Result<ErrorDecomposition> {
    if !(reference > 0.0) {
        return Err(Error::invalid("reference value must be positive"));
    }
    let values = &samples.values;
    if values.is_empty() {
        return Err(Error::Degenerate("no samples".into()));
    }
    let m = mean(values);
    let s = std_dev(values).unwrap_or(f64::NAN);
    Ok(ErrorDecomposition { relative_systematic: (m / reference - 1.0).abs(), relative_random: s / m })
}

/// Fraction of samples within relative distance `rel_tol` of `reference`.
pub fn success_probability(samples: &SampleSet, reference: f64, rel_tol: f64) -> Result<f64> {
    if !(rel_tol > 0.0) {
        return Err(Error::invalid("relative tolerance must be positive"));
    }
    if !(reference > 0.0) {
        return Err(Error::invalid("reference value must be positive"));
    }
    let values = &samples.values;
    if values.is_empty() {
        return Err(Error::Degenerate("no samples".into()));
    }
    // compare |v − ref| ≤ tol·ref, which is invariant under common scaling
    let hits = values.iter().filter(|&&v| (v - reference).abs() <= rel_tol * reference).count();
    Ok(hits as f64 / values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(log₁₀ x, log₁₀ y)`.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("scaling fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::invalid("scaling fit needs positive sizes and values"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let mx = mean(&xs);
    let my = mean(&ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all sizes are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ScalingFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    /// Bin centers in units of the particle radius.
    pub distance: Vec<f64>,
    pub h: Vec<f64>,
    pub counts: Vec<usize>,
    /// Relative mismatch of the two sides of Parseval's identity.
    pub parseval_error: f64,
}

/// Circular autocorrelation of `χ − φ` normalized by `φ(1 − φ)`, as a full
/// field (zero shift at index 0), plus the Parseval audit.
pub fn autocorrelation_field(grid: &VoxelGrid) -> Result<(Vec<f64>, f64)> {
    let phi = measured_volume_fraction(grid);
    let sigma2 = phi * (1.0 - phi);
    if sigma2 == 0.0 {
        return Err(Error::Degenerate("autocorrelation undefined for a single-phase grid".into()));
    }
    let len = grid.len();
    let mut buf: Vec<Complex64> = grid.phase().iter().map(|&v| Complex64::new(v as f64 - phi, 0.0)).collect();
    let direct: f64 = buf.iter().map(|c| c.re * c.re).sum();
    let mut fft = FftNd::new(grid.dim(), grid.n());
    fft.forward(&mut buf);
    let spectral: f64 = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / len as f64;
    let parseval_error = (direct - spectral).abs() / direct;
    for c in buf.iter_mut() {
        *c = Complex64::new(c.norm_sqr(), 0.0);
    }
    fft.inverse(&mut buf);
    let norm = 1.0 / (len as f64 * len as f64 * sigma2);
    Ok((buf.iter().map(|c| c.re * norm).collect(), parseval_error))
}

/// Radially binned autocorrelation; bins are half a voxel wide and reported
/// in units of `radius`.
pub fn empirical_autocorrelation(grid: &VoxelGrid, radius: f64) -> Result<CorrelationCurve> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let (field, parseval_error) = autocorrelation_field(grid)?;
    let n = grid.n();
    let h = grid.spacing();
    let width = 0.5 * h;
    let dim = grid.dim();
    let max_dist = h * (n as f64 / 2.0) * (dim as f64).sqrt();
    let nbins = (max_dist / width).floor() as usize + 1;
    let mut sum = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    for (idx, v) in field.iter().enumerate() {
        let i = frequency(idx % n, n) as f64;
        let j = frequency((idx / n) % n, n) as f64;
        let k = if dim == 3 { frequency(idx / (n * n), n) as f64 } else { 0.0 };
        let d = h * (i * i + j * j + k * k).sqrt();
        let b = ((d / width).floor() as usize).min(nbins - 1);
        sum[b] += v;
        counts[b] += 1;
    }
    let mut curve = CorrelationCurve { distance: vec![], h: vec![], counts: vec![], parseval_error };
    for b in 0..nbins {
        if counts[b] > 0 {
            let center = if b == 0 { 0.0 } else { (b as f64 + 0.5) * width };
            curve.distance.push(center / radius);
            curve.h.push(sum[b] / counts[b] as f64);
            curve.counts.push(counts[b]);
        }
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VfPoint {
    pub size: f64,
    /// `L / L₀`.
    pub relative_size: f64,
    pub realizations: usize,
    pub mean_phi: f64,
    /// `√(Var φ_L / (φ(1 − φ)))`.
    pub normalized_std: f64,
}

/// Fewest realizations per size entering a volume-fraction curve.
pub const MIN_VF_REALIZATIONS: usize = 100;

/// Normalized volume-fraction standard deviation per cell size.
///
/// `series` holds `(L, measured fractions)`; `phi` is the ensemble's
/// nominal fraction and `l0` the reference length.
pub fn vf_variance_curve(series: &[(f64, Vec<f64>)], phi: f64, l0: f64) -> Result<Vec<VfPoint>> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::invalid("nominal volume fraction must lie in (0, 1)"));
    }
    if !(l0 > 0.0) {
        return Err(Error::invalid("reference length must be positive"));
    }
    series
        .iter()
        .map(|(size, values)| {
            if values.len() < MIN_VF_REALIZATIONS {
                return Err(Error::Contract(format!(
                    "size {size}: {} realizations, at least {MIN_VF_REALIZATIONS} required",
                    values.len()
                )));
            }
            let s = std_dev(values).expect("enough values");
            Ok(VfPoint {
                size: *size,
                relative_size: size / l0,
                realizations: values.len(),
                mean_phi: mean(values),
                normalized_std: (s * s / (phi * (1.0 - phi))).sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, b: f64) -> f64 {
        let m = 20_000;
        let h = b / m as f64;
        let mut s = f(0.0) + f(b);
        for i in 1..m {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    /// Independent Student-t CDF: with `t = √ν tan θ` the density becomes
    /// proportional to `cos^{ν-1} θ` on `(-π/2, π/2)`.
    fn t_cdf(x: f64, nu: f64) -> f64 {
        let w = |th: f64| th.cos().powf(nu - 1.0);
        let theta = (x / nu.sqrt()).atan();
        0.5 + 0.5 * simpson(w, theta) / simpson(w, std::f64::consts::FRAC_PI_2)
    }

    fn bisect_quantile(p: f64, nu: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1000.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if t_cdf(mid, nu) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn t_quantile_matches_independent_oracle() {
        let oracle = bisect_quantile(0.995, 9.0);
        assert!((oracle - 3.2498).abs() < 5e-5);
        assert!((t_quantile(9).unwrap() - oracle).abs() < 1e-8);
        for dof in [1, 4, 29, 199] {
            assert!((t_quantile(dof).unwrap() - bisect_quantile(0.995, dof as f64)).abs() < 1e-6);
        }
    }

    #[test]
    fn summary_examples() {
        let s = summarize_values(&[2.0; 5]).unwrap();
        assert_eq!((s.std, s.ci_halfwidth), (0.0, 0.0));
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let s = summarize_values(&v).unwrap();
        let sd = (110.0f64 / 12.0).sqrt();
        assert!((s.std - sd).abs() < 1e-12);
        assert!((s.ci_halfwidth - 3.249_835_5 * sd / 10f64.sqrt()).abs() < 1e-5);
        assert!(matches!(summarize_values(&[1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn published_error_decompositions() {
        let sn = SampleSet::from_values(vec![0.356449]);
        let e = error_decomposition(&sn, 0.345228).unwrap();
        assert!((e.relative_systematic - 0.0325).abs() < 1e-4);
        let per = SampleSet::from_values(vec![0.345291]);
        let e = error_decomposition(&per, 0.345228).unwrap();
        assert!((e.relative_systematic - 1.8e-4).abs() < 1e-5);
    }

    #[test]
    fn success_probability_examples() {
        let s = SampleSet::from_values(vec![1.0; 4]);
        assert_eq!(success_probability(&s, 1.0, 0.01).unwrap(), 1.0);
        let s = SampleSet::from_values(vec![1.0, 1.02, 0.995, 1.2]);
        assert_eq!(success_probability(&s, 1.0, 0.01).unwrap(), 0.5);
    }

    #[test]
    fn fit_of_published_standard_deviations() {
        let ks = [2.0, 4.0, 8.0, 16.0];
        let exact: Vec<(f64, f64)> = ks.iter().map(|&k| (k, 3.0 / k)).collect();
        let f = scaling_fit(&exact).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        assert!(scaling_fit(&exact[..2]).is_err());
        assert!(scaling_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn autocorrelation_basics() {
        let g = VoxelGrid::from_fn(2, 16, 1.0, |[x, y, _]| (x as f64 - 8.0).hypot(y as f64 - 8.0) < 4.0).unwrap();
        let (field, parseval) = autocorrelation_field(&g).unwrap();
        assert!((field[0] - 1.0).abs() < 1e-12);
        assert!(parseval < 1e-10);
        let total: f64 = field.iter().sum();
        assert!(total.abs() < 1e-10);
        let curve = empirical_autocorrelation(&g, 4.0 / 16.0).unwrap();
        assert_eq!(curve.distance[0], 0.0);
        assert!((curve.h[0] - 1.0).abs() < 1e-12);
        assert!(curve.h.iter().all(|h| h.abs() <= 1.0 + 1e-12));
        assert!(empirical_autocorrelation(&VoxelGrid::filled(2, 4, 1.0, 1).unwrap(), 1.0).is_err());
    }

    #[test]
    fn vf_curve_normalization() {
        let alternating: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 0.29 } else { 0.31 }).collect();
        let pts = vf_variance_curve(&[(2.0, alternating), (4.0, vec![0.3; 100])], 0.3, 0.5).unwrap();
        let want = ((100.0 * 0.01f64.powi(2) / 99.0) / 0.21).sqrt();
        assert!((pts[0].normalized_std - want).abs() < 1e-12);
        assert_eq!(pts[0].relative_size, 4.0);
        assert!(pts[1].normalized_std < 1e-12);
        assert!(matches!(vf_variance_curve(&[(2.0, vec![0.3; 99])], 0.3, 1.0), Err(Error::Contract(_))));
    }
}

use rvelab_core::geometry::{analytic_volume_fraction, ShapeKind};
use rvelab_core::packing::{min_pair_gap, orientation_deviation, orientation_tensor, isotropic_target};
use rvelab_core::raster::{measured_volume_fraction, voxelize};
use rvelab_core::rng::derive_seed;
use rvelab_core::sampling::{draw, Protocol, ProtocolSpec, ShapeSpec};
use rvelab_core::stats::{mean, std_dev};

#[test]
fn snapshot_volume_fraction_is_unbiased() {
    let spec = ProtocolSpec::new(Protocol::Snapshot, ShapeSpec::Disk, 2.0, 0.3, 1.2);
    let phis: Vec<f64> = (0..10_000)
        .map(|i| {
            let d = draw(&spec, derive_seed(1, "snapshot", 2, i)).unwrap();
            measured_volume_fraction(&voxelize(&d.config, 32).unwrap())
        })
        .collect();
    let se = std_dev(&phis).unwrap() / (phis.len() as f64).sqrt();
    let m = mean(&phis);
    assert!((m - 0.3).abs() <= 3.0 * se, "mean {m}, standard error {se}");
}

#[test]
fn periodized_draws_meet_the_target_exactly() {
    for (shape, k, count) in [(ShapeSpec::Sphere, 2.0, 8), (ShapeSpec::Disk, 2.0, 4), (ShapeSpec::Disk, 8.0, 64)] {
        let spec = ProtocolSpec::new(Protocol::Periodized, shape, k, 0.3, 1.2);
        let d = draw(&spec, 5).unwrap();
        assert_eq!(d.config.len(), count);
        assert!(d.config.cell.is_periodic());
        assert!((analytic_volume_fraction(&d.config).unwrap() - 0.3).abs() < 1e-12);
        let r = d.config.species.radius();
        assert!(min_pair_gap(&d.config) >= 2.0 * 1.2 * r - 1e-9);
    }
}

#[test]
fn poisson_draws_keep_the_fraction_and_average_the_count() {
    let spec = ProtocolSpec::new(Protocol::Poisson, ShapeSpec::Disk, 4.0, 0.3, 1.2);
    let mut counts = Vec::new();
    for i in 0..400 {
        let d = draw(&spec, derive_seed(2, "poisson", 4, i)).unwrap();
        assert!((analytic_volume_fraction(&d.config).unwrap() - 0.3).abs() < 1e-12);
        counts.push(d.config.len() as f64);
    }
    let se = (16.0f64 / counts.len() as f64).sqrt();
    assert!((mean(&counts) - 16.0).abs() <= 3.0 * se, "mean count {}", mean(&counts));
    assert!(std_dev(&counts).unwrap() > 2.0);
}

#[test]
fn fibers_at_unit_length_ratio() {
    let shape = ShapeSpec::Fiber { aspect_ratio: 20.0 };
    let spec = ProtocolSpec::new(Protocol::Periodized, shape, 1.0, 0.15, 1.2);
    let d = draw(&spec, 3).unwrap();
    assert_eq!(d.config.species.kind(), ShapeKind::Spherocylinder);
    assert_eq!(d.config.len(), 77);
    assert!(orientation_deviation(&d.config.axes, &isotropic_target()) <= 0.01 + 1e-12);
    let m = orientation_tensor(&d.config.axes);
    assert!(((0..3).map(|i| m[i][i]).sum::<f64>() - 1.0).abs() < 1e-12);
    let grid = voxelize(&d.config, 100).unwrap();
    let phi = measured_volume_fraction(&grid);
    assert!((phi - 0.15).abs() < 0.02, "voxel fraction {phi}");
}

#[test]
fn voxel_fraction_converges_at_least_linearly() {
    use rand::{Rng, SeedableRng};
    use rvelab_core::geometry::{Cell, Configuration, Species, SpeciesMeta};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let ns = [32usize, 64, 128];
    let mut err = [0.0f64; 3];
    let trials = 16;
    for _ in 0..trials {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let mut cfg = Configuration::new(
            Cell::periodic(3, 1.0).unwrap(),
            Species::Sphere { radius: 0.3 },
            vec![c],
            vec![],
            SpeciesMeta::default(),
        )
        .unwrap();
        cfg.non_overlapping = true;
        let exact = analytic_volume_fraction(&cfg).unwrap();
        for (e, &n) in err.iter_mut().zip(&ns) {
            *e += (measured_volume_fraction(&voxelize(&cfg, n).unwrap()) - exact).abs() / trials as f64;
        }
    }
    let pts: Vec<(f64, f64)> = ns.iter().zip(&err).map(|(&n, &e)| (n as f64, e)).collect();
    let slope = -rvelab_core::stats::scaling_fit(&pts).unwrap().slope;
    assert!(slope >= 0.8, "mean voxel error {err:?} decays with order {slope}");
}

#[test]
fn overlap_removal_of_25_disks_at_80_percent_terminates() {
    use rand::{Rng, SeedableRng};
    use rvelab_core::geometry::{Cell, Configuration, Species, SpeciesMeta};
    use rvelab_core::packing::{remove_overlaps, PackingParams};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(25);
    let edge = 5.0;
    let radius = (0.8 * edge * edge / (25.0 * std::f64::consts::PI)).sqrt();
    let centers = (0..25).map(|_| [rng.random_range(0.0..edge), rng.random_range(0.0..edge), 0.0]).collect();
    let cfg = Configuration::new(Cell::periodic(2, edge).unwrap(), Species::Disk { radius }, centers, vec![], SpeciesMeta::default())
        .unwrap();
    let mut params = PackingParams::round(0.8, 1.0, 0);
    params.descent.max_iters = 1_000_000;
    let (out, report) = remove_overlaps(&cfg, &params);
    assert!(report.success, "{report:?}");
    assert!(out.non_overlapping);
    assert!(min_pair_gap(&out) >= 2.0 * radius - 1e-9);
}

#[test]
fn disks_reach_55_percent_with_isolation() {
    use rvelab_core::packing::{mcm_pack, PackingParams};
    let (cfg, report) = mcm_pack(ShapeKind::Disk, 64, 8.0, &PackingParams::round(0.55, 1.2, 3)).unwrap();
    assert!(report.success, "{report:?}");
    assert!((analytic_volume_fraction(&cfg).unwrap() - 0.55).abs() < 1e-12);
}

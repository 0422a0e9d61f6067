use posefuse::bundle::refine;
use posefuse::geometry::{fit_homography_ratio, ransac_relative_pose, CorrespondenceSet, RansacConfig};
use posefuse::harness::{evaluate_pose, solve_geometric, GeometricConfig};
use posefuse::simulator::{generate_scene, SceneConfig, ScenePair};
use posefuse::uncertainty::{pose_uncertainty, UncertaintyError};

fn scene(cfg: SceneConfig) -> ScenePair {
    generate_scene(&cfg).expect("feasible scene")
}

#[test]
fn noise_free_ransac_marks_everything_inlier() {
    for seed in 0..10 {
        let s = scene(SceneConfig {
            n_points: 50,
            noise_sigma: 0.0,
            rng_seed: seed,
            ..SceneConfig::default()
        });
        let cfg = RansacConfig {
            inlier_threshold: 1e-6,
            ..RansacConfig::default()
        };
        let (pose, mask) = ransac_relative_pose(&s.corr, &cfg).unwrap();
        assert!(mask.iter().all(|&m| m), "seed {seed}");
        let (r, t) = evaluate_pose(&pose, &s.gt_pose);
        assert!(r < 1e-6 && t < 1e-6, "seed {seed}: errors {r:e}, {t:e}");
    }
}

#[test]
fn ransac_separates_labelled_outliers() {
    let cfg = RansacConfig {
        inlier_threshold: 3e-3,
        ..RansacConfig::default()
    };
    for seed in 0..20 {
        let s = scene(SceneConfig {
            n_points: 50,
            noise_sigma: 1e-3,
            outlier_fraction: 0.2,
            rng_seed: seed,
            ..SceneConfig::default()
        });
        assert_eq!(s.outlier_mask.iter().filter(|&&o| o).count(), 10);
        let (_, mask) = ransac_relative_pose(&s.corr, &cfg).unwrap();
        let kept_inliers = mask.iter().zip(&s.outlier_mask).filter(|(m, o)| **m && !**o).count();
        let admitted = mask.iter().zip(&s.outlier_mask).filter(|(m, o)| **m && **o).count();
        assert!(kept_inliers >= 38, "seed {seed}: kept {kept_inliers} of 40 inliers");
        assert!(admitted <= 1, "seed {seed}: admitted {admitted} outliers");
    }
}

#[test]
fn four_points_are_insufficient_for_ransac() {
    let s = scene(SceneConfig::default());
    let four = s.corr.subset(&[0, 1, 2, 3]);
    assert!(ransac_relative_pose(&four, &RansacConfig::default()).is_err());
}

#[test]
fn half_planar_scene_has_matching_homography_ratio() {
    for seed in 0..20 {
        let s = scene(SceneConfig {
            n_points: 100,
            noise_sigma: 1e-4,
            planar_ratio: 0.5,
            rng_seed: seed,
            ..SceneConfig::default()
        });
        let r = fit_homography_ratio(&s.corr, &RansacConfig::default()).unwrap();
        assert!((0.45..=0.7).contains(&r), "seed {seed}: ratio {r}");
    }
}

#[test]
fn fully_planar_noise_free_scene_has_unit_ratio() {
    let s = scene(SceneConfig {
        planar_ratio: 1.0,
        noise_sigma: 0.0,
        rng_seed: 4,
        ..SceneConfig::default()
    });
    assert_eq!(fit_homography_ratio(&s.corr, &RansacConfig::default()).unwrap(), 1.0);
}

#[test]
fn well_spread_scene_determines_every_parameter() {
    let s = scene(SceneConfig {
        n_points: 200,
        noise_sigma: 1e-3,
        rotation_magnitude: 15.0,
        rng_seed: 12,
        ..SceneConfig::default()
    });
    let g = solve_geometric(&s.corr, &GeometricConfig::default());
    assert!(g.estimate.valid, "{:?}", g.error);
    assert!(g.estimate.inverse_variances.iter().all(|&v| v > 0.0 && v.is_finite()));
}

#[test]
fn near_planar_scenes_have_less_translation_information() {
    let mut wins = 0;
    let mut pairs = 0;
    for seed in 0..50 {
        let base = SceneConfig {
            n_points: 100,
            noise_sigma: 1e-3,
            rng_seed: 1000 + seed,
            ..SceneConfig::default()
        };
        let general = solve_geometric(&scene(base.clone()).corr, &GeometricConfig::default());
        let planar = solve_geometric(
            &scene(SceneConfig {
                planar_ratio: 0.98,
                ..base
            })
            .corr,
            &GeometricConfig::default(),
        );
        pairs += 1;
        let tp = planar.estimate.effective_inverse_variances();
        let tg = general.estimate.effective_inverse_variances();
        if tp[3] + tp[4] < tg[3] + tg[4] {
            wins += 1;
        }
    }
    assert!(
        wins * 10 >= pairs * 9,
        "planar scene less informative in {wins}/{pairs} pairs"
    );
}

#[test]
fn unconverged_estimate_is_rejected() {
    let s = scene(SceneConfig {
        n_points: 30,
        rng_seed: 2,
        ..SceneConfig::default()
    });
    let mask = vec![true; s.corr.len()];
    let mut est = refine(&s.gt_pose, &s.corr, &mask).unwrap();
    est.converged = false;
    assert!(matches!(pose_uncertainty(&est), Err(UncertaintyError::NotConverged)));
}

#[test]
fn non_finite_input_is_a_recorded_failure() {
    let mut s = scene(SceneConfig::default());
    s.corr.points[0].x1.x = f64::NAN;
    let g = solve_geometric(&CorrespondenceSet::new(s.corr.points), &GeometricConfig::default());
    assert!(!g.estimate.valid);
    assert!(g.error.is_some());
}

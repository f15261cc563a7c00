use densematch::geometry::{
    apply_homography, dlt_homography, image_corners, mean_corner_error, ransac_homography,
    reprojection_errors, Homography, PointSet, RansacConfig,
};
use densematch::Error;
use nalgebra::{Matrix3, Point2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mildly projective, well-conditioned homography drawn from its entries.
fn random_h(rng: &mut ChaCha8Rng) -> Homography {
    Homography::from_rows([
        [1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-20.0..20.0)],
        [rng.gen_range(-0.2..0.2), 1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-20.0..20.0)],
        [rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3), 1.0],
    ])
    .unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, size: f64) -> PointSet {
    PointSet::new(
        (0..n)
            .map(|_| Point2::new(rng.gen_range(0.0..size), rng.gen_range(0.0..size)))
            .collect(),
    )
    .unwrap()
}

fn max_corner_discrepancy(a: &Homography, b: &Homography, w: usize, h: usize) -> f64 {
    image_corners(w, h)
        .iter()
        .map(|&c| (a.apply(c).unwrap() - b.apply(c).unwrap()).norm())
        .fold(0.0, f64::max)
}

#[test]
fn apply_matches_homogeneous_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = random_h(&mut rng);
    let pts = random_points(&mut rng, 50, 256.0);
    let got = apply_homography(&h, &pts).unwrap();
    let m = h.rows();
    for (p, q) in pts.iter().zip(got.iter()) {
        let x = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let y = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        assert!((q.x - x / w).abs() < 1e-9 && (q.y - y / w).abs() < 1e-9);
    }
}

#[test]
fn dlt_recovers_from_eight_exact_correspondences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let h = random_h(&mut rng);
        let src = random_points(&mut rng, 8, 256.0);
        let dst = apply_homography(&h, &src).unwrap();
        let est = dlt_homography(&src, &dst).unwrap();
        assert!(max_corner_discrepancy(&h, &est, 256, 256) < 1e-6);
    }
}

#[test]
fn ransac_without_outliers_equals_dlt() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = random_h(&mut rng);
    let src = random_points(&mut rng, 60, 256.0);
    let dst = apply_homography(&h, &src).unwrap();
    let direct = dlt_homography(&src, &dst).unwrap();
    let r = ransac_homography(&src, &dst, &RansacConfig::default()).unwrap();
    assert_eq!(r.inlier_count(), 60);
    assert!(max_corner_discrepancy(&direct, &r.homography, 256, 256) < 1e-6);
}

fn half_outliers_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = random_h(&mut rng);
    let src = random_points(&mut rng, 100, 256.0);
    let exact = apply_homography(&h, &src).unwrap();
    let dst: PointSet = exact
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i % 2 == 0 {
                *p
            } else {
                Point2::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0))
            }
        })
        .collect();
    let cfg = RansacConfig {
        threshold_px: 3.0,
        seed,
        ..Default::default()
    };
    match ransac_homography(&src, &dst, &cfg) {
        Ok(r) => mean_corner_error(&h, &r.homography, 256, 256).unwrap(),
        Err(_) => f64::INFINITY,
    }
}

#[test]
fn ransac_survives_half_outliers() {
    let ok = (0..20).filter(|&s| half_outliers_trial(s) < 1.0).count();
    assert!(ok >= 19, "{ok}/20 trials under 1 px");
}

#[test]
fn ransac_is_deterministic() {
    assert_eq!(half_outliers_trial(5).to_bits(), half_outliers_trial(5).to_bits());
}

#[test]
fn ransac_rejects_three_points() {
    let p = PointSet::from_xy(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
    assert!(matches!(
        ransac_homography(&p, &p, &RansacConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn mce_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let (a, b) = (random_h(&mut rng), random_h(&mut rng));
        let (w, h) = (320usize, 240usize);
        let corners = [(0.0, 0.0), (319.0, 0.0), (319.0, 239.0), (0.0, 239.0)];
        let project = |m: &Matrix3<f64>, (x, y): (f64, f64)| {
            let z = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
            (
                (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / z,
                (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / z,
            )
        };
        let want: f64 = corners
            .iter()
            .map(|&c| {
                let (p, q) = (project(a.matrix(), c), project(b.matrix(), c));
                ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
            })
            .sum();
        let got = mean_corner_error(&a, &b, w, h).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert_eq!(got, mean_corner_error(&b, &a, w, h).unwrap());
    }
}

#[test]
fn reprojection_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h = random_h(&mut rng);
    let a = random_points(&mut rng, 40, 200.0);
    let b = random_points(&mut rng, 40, 200.0);
    let e = reprojection_errors(&h, &a, &b).unwrap();
    for ((p, q), err) in a.iter().zip(b.iter()).zip(&e) {
        let m = h.rows();
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        let x = (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w;
        let y = (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w;
        assert!((err - ((x - q.x).powi(2) + (y - q.y).powi(2)).sqrt()).abs() < 1e-9);
    }
    let exact = apply_homography(&h, &a).unwrap();
    assert!(reprojection_errors(&h, &a, &exact).unwrap().iter().all(|&e| e < 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_h(&mut rng);
        let pts = random_points(&mut rng, 20, 256.0);
        let back = apply_homography(&h, &apply_homography(&h.inverse().unwrap(), &pts).unwrap()).unwrap();
        for (p, q) in pts.iter().zip(back.iter()) {
            prop_assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn dlt_is_scale_covariant(seed in any::<u64>(), s in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_h(&mut rng);
        let src = random_points(&mut rng, 10, 256.0);
        let dst = apply_homography(&h, &src).unwrap();
        let scale = Homography::scaling(s, s).unwrap();
        let ss = apply_homography(&scale, &src).unwrap();
        let ds = apply_homography(&scale, &dst).unwrap();
        let est = dlt_homography(&ss, &ds).unwrap();
        // S·H·S⁻¹ is the homography between the scaled frames
        let conj = scale.compose(&h).unwrap().compose(&scale.inverse().unwrap()).unwrap();
        let disc = image_corners(256, 256)
            .iter()
            .map(|c| Point2::new(c.x * s, c.y * s))
            .map(|c| (est.apply(c).unwrap() - conj.apply(c).unwrap()).norm() / s)
            .fold(0.0, f64::max);
        prop_assert!(disc < 1e-6, "disc {}", disc);
    }

    #[test]
    fn mce_self_is_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_h(&mut rng);
        prop_assert_eq!(mean_corner_error(&h, &h, 128, 128).unwrap(), 0.0);
    }
}

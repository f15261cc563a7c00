use densematch::geometry::PointSet;
use densematch::matching::{
    contrastive_loss, extract_matches, sample_descriptors, sample_descriptors_map,
    similarity_matrix, MatchConfig,
};
use densematch::model::FeatureMap;
use densematch::tensor::{Tape, Tensor};
use nalgebra::Point2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Bilinear value at pixel coordinates written as the explicit double sum
/// over all pixels with hat weights.
fn double_sum(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let [c, h, w] = *map.shape() else { unreachable!() };
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for n in 0..h {
                for m in 0..w {
                    let k = (1.0 - (x - m as f64).abs()).max(0.0) * (1.0 - (y - n as f64).abs()).max(0.0);
                    acc += k * map.data()[(ch * h + n) * w + m] as f64;
                }
            }
            acc
        })
        .collect()
}

#[test]
fn sampling_matches_double_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let map = uniform(&mut rng, &[4, 9, 11], -1.0, 1.0);
    let pts: PointSet = (0..200)
        .map(|_| Point2::new(rng.gen_range(0.0..=10.0), rng.gen_range(0.0..=8.0)))
        .collect();
    let f = FeatureMap::new(map.clone()).unwrap();
    let got = sample_descriptors_map(&f, &pts).unwrap();
    for (i, p) in pts.iter().enumerate() {
        let want = double_sum(&map, p.x, p.y);
        for (c, w) in want.iter().enumerate() {
            assert!((got.data()[i * 4 + c] as f64 - w).abs() < 1e-5);
        }
    }
    // the differentiable path produces the same values
    let mut tape = Tape::new();
    let m = tape.constant(map);
    let d = sample_descriptors(&mut tape, m, &pts).unwrap();
    assert_eq!(tape.data(d), got.data());
}

#[test]
fn similarity_examples() {
    let mut tape = Tape::new();
    let eye = Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let a = tape.constant(eye.clone());
    let b = tape.constant(eye.clone());
    let s = similarity_matrix(&mut tape, a, b, 1.0).unwrap();
    assert_eq!(tape.data(s), eye.data());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = (uniform(&mut rng, &[5, 4], -1.0, 1.0), uniform(&mut rng, &[5, 4], -1.0, 1.0));
    let (a, b) = (tape.constant(x), tape.constant(y));
    let s1 = similarity_matrix(&mut tape, a, b, 1.0).unwrap();
    let s2 = similarity_matrix(&mut tape, a, b, 2.0).unwrap();
    for (u, v) in tape.data(s1).iter().zip(tape.data(s2)) {
        assert_eq!(u * 0.5, *v);
    }
    let c = tape.constant(Tensor::zeros([4, 4]));
    assert!(similarity_matrix(&mut tape, a, c, 1.0).is_err());
    assert!(similarity_matrix(&mut tape, a, b, 0.0).is_err());
}

fn loss_of(s: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(s.clone());
    let l = contrastive_loss(&mut tape, v).unwrap();
    tape.item_f64(l).unwrap()
}

fn direct_loss(s: &Tensor) -> f64 {
    let n = s.shape()[0];
    let at = |i: usize, j: usize| s.data()[i * n + j] as f64;
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        let zr: f64 = (0..n).map(|k| at(i, k).exp()).sum();
        let zc: f64 = (0..n).map(|k| at(k, i).exp()).sum();
        rows -= (at(i, i).exp() / zr).ln();
        cols -= (at(i, i).exp() / zc).ln();
    }
    (rows / n as f64 + cols / n as f64) / 2.0
}

#[test]
fn loss_examples() {
    let mut diag = Tensor::zeros([5, 5]);
    for i in 0..5 {
        diag.data_mut()[i * 6] = 40.0;
    }
    assert!(loss_of(&diag) < 1e-6);
    assert!((loss_of(&Tensor::full([16, 16], 0.3)) - 16f64.ln()).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [8, 64] {
        let s = uniform(&mut rng, &[n, n], -3.0, 3.0);
        assert!((loss_of(&s) - direct_loss(&s)).abs() < 1e-6);
    }
    // a single correspondence has nothing to contrast against
    assert_eq!(loss_of(&Tensor::full([1, 1], 2.0)), 0.0);
}

#[test]
fn mutual_filter_drops_non_reciprocal_match() {
    // A descriptors are one-hot, so S[i][j] = b_j[i]:
    //   S = [[5, 1, 0], [4, 2, 0], [0, 0, 3]]
    // row 1 picks column 0, whose best row is 0.
    let fa = FeatureMap::new(Tensor::new([3, 1, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()).unwrap();
    let fb = FeatureMap::new(Tensor::new([3, 1, 3], vec![5., 1., 0., 4., 2., 0., 0., 0., 3.]).unwrap()).unwrap();
    let cfg = MatchConfig { stride_px: 1, ..Default::default() };
    let all = extract_matches(&fa, &fb, &cfg).unwrap();
    let pairs: Vec<_> = all.matches.iter().map(|m| (m.xa, m.xb, m.mutual)).collect();
    assert_eq!(pairs, vec![(0.0, 0.0, true), (1.0, 0.0, false), (2.0, 2.0, true)]);
    let mutual = extract_matches(&fa, &fb, &MatchConfig { mutual_only: true, ..cfg.clone() }).unwrap();
    let xs: Vec<_> = mutual.matches.iter().map(|m| m.xa).collect();
    assert_eq!(xs, vec![0.0, 2.0]);
    let thresholded = extract_matches(&fa, &fb, &MatchConfig { score_min: Some(3.5), ..cfg }).unwrap();
    assert_eq!(thresholded.len(), 2);
}

#[test]
fn stride_sets_grid_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = FeatureMap::new(uniform(&mut rng, &[4, 32, 32], 0.0, 1.0)).unwrap();
    for (stride, n) in [(2, 256), (4, 64), (8, 16), (16, 4)] {
        let m = extract_matches(&f, &f, &MatchConfig { stride_px: stride, ..Default::default() }).unwrap();
        assert_eq!(m.len(), n);
        assert!(m.matches.iter().all(|mt| mt.xa < 32.0 && mt.yb < 32.0));
    }
}

#[test]
fn csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = FeatureMap::new(uniform(&mut rng, &[4, 16, 16], 0.0, 1.0)).unwrap();
    let g = FeatureMap::new(uniform(&mut rng, &[4, 16, 16], 0.0, 1.0)).unwrap();
    let m = extract_matches(&f, &g, &MatchConfig { stride_px: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    m.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("xa,ya,xb,yb,score,mutual\n"));
    assert_eq!(densematch::matching::MatchSet::read_csv(&path).unwrap(), m);
}

#[test]
fn loss_decreases_under_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut a = uniform(&mut rng, &[16, 8], -1.0, 1.0).with_grad();
    let mut b = uniform(&mut rng, &[16, 8], -1.0, 1.0).with_grad();
    let mut history = Vec::new();
    for _ in 0..60 {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf_ref(&a), tape.leaf_ref(&b));
        let s = similarity_matrix(&mut tape, va, vb, 1.0).unwrap();
        let l = contrastive_loss(&mut tape, s).unwrap();
        history.push(tape.item_f64(l).unwrap());
        let g = tape.backward(l).unwrap();
        for (t, v) in [(&mut a, va), (&mut b, vb)] {
            let step: Vec<f32> = g.get(v).unwrap().to_vec();
            for (p, d) in t.data_mut().iter_mut().zip(step) {
                *p -= 0.5 * d;
            }
        }
    }
    let means: Vec<f64> = history.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{means:?}");
    }
    assert!(means.last().unwrap() < &(means[0] * 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_symmetric_under_transpose(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = uniform(&mut rng, &[n, n], -4.0, 4.0);
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                t.data_mut()[j * n + i] = s.data()[i * n + j];
            }
        }
        prop_assert!((loss_of(&s) - loss_of(&t)).abs() < 1e-7);
        prop_assert!(loss_of(&s) >= 0.0);
    }

    #[test]
    fn softmax_gradients_sum_to_zero_per_row(seed in any::<u64>(), n in 2usize..10) {
        // ∂CE/∂S_ik = (p_ik − δ_ik)/N, so each row of the gradient sums to
        // (Σ_k p_ik − 1)/N: zero iff the softmax is normalized
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = uniform(&mut rng, &[n, n], -4.0, 4.0).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&s);
        let l = tape.softmax_cross_entropy_diag(v, densematch::tensor::Axis::Row).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(v).unwrap();
        for i in 0..n {
            let row: f64 = g[i * n..(i + 1) * n].iter().map(|&x| x as f64).sum();
            prop_assert!((row * n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_invariant_under_temperature_and_monotone_maps(seed in any::<u64>(), t in 0.05f32..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FeatureMap::new(uniform(&mut rng, &[6, 8, 8], -1.0, 1.0)).unwrap();
        let g = FeatureMap::new(uniform(&mut rng, &[6, 8, 8], -1.0, 1.0)).unwrap();
        let cfg = MatchConfig { stride_px: 1, ..Default::default() };
        let base = extract_matches(&f, &g, &cfg).unwrap();
        // scaling every descriptor in A by t scales S by t (temperature)
        let scaled = FeatureMap::new(Tensor::new([6, 8, 8], f.data.data().iter().map(|v| v * t).collect()).unwrap()).unwrap();
        let other = extract_matches(&scaled, &g, &cfg).unwrap();
        for (m, o) in base.matches.iter().zip(&other.matches) {
            prop_assert_eq!((m.xb, m.yb, m.mutual), (o.xb, o.yb, o.mutual));
        }

        // same through the differentiable path with an explicit temperature
        let mut tape = Tape::new();
        let pts: PointSet = (0..8).flat_map(|y| (0..8).map(move |x| Point2::new(x as f64, y as f64))).collect();
        let (fa, fb) = (tape.constant(f.data.clone()), tape.constant(g.data.clone()));
        let da = sample_descriptors(&mut tape, fa, &pts).unwrap();
        let db = sample_descriptors(&mut tape, fb, &pts).unwrap();
        let s1 = similarity_matrix(&mut tape, da, db, 1.0).unwrap();
        let st = similarity_matrix(&mut tape, da, db, t).unwrap();
        let (s1, st) = (tape.data(s1).to_vec(), tape.data(st).to_vec());
        for i in 0..64 {
            let am = |s: &[f32]| (0..64).fold(0, |b, j| if s[i * 64 + j] > s[i * 64 + b] { j } else { b });
            prop_assert_eq!(am(&s1), am(&st));
            // exp is strictly monotone as well
            let e: Vec<f32> = s1.iter().map(|v| v.exp()).collect();
            prop_assert_eq!(am(&s1), am(&e));
        }
    }

    #[test]
    fn permuting_b_permutes_targets(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d) = (6usize, 6usize, 5usize);
        let f = uniform(&mut rng, &[d, h, w], -1.0, 1.0);
        let g = uniform(&mut rng, &[d, h, w], -1.0, 1.0);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        // pixel k of the permuted map holds pixel perm[k] of g
        let mut gp = vec![0.0; d * h * w];
        for c in 0..d {
            for k in 0..h * w {
                gp[c * h * w + k] = g.data()[c * h * w + perm[k]];
            }
        }
        let cfg = MatchConfig { stride_px: 1, ..Default::default() };
        let fa = FeatureMap::new(f).unwrap();
        let base = extract_matches(&fa, &FeatureMap::new(g).unwrap(), &cfg).unwrap();
        let moved = extract_matches(&fa, &FeatureMap::new(Tensor::new([d, h, w], gp).unwrap()).unwrap(), &cfg).unwrap();
        for (m, o) in base.matches.iter().zip(&moved.matches) {
            let k = o.yb as usize * w + o.xb as usize;
            prop_assert_eq!((m.xb as usize, m.yb as usize), (perm[k] % w, perm[k] / w));
            prop_assert_eq!(m.score, o.score);
        }
    }
}

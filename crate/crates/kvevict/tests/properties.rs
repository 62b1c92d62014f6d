use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kvevict::attnscore::{h2o_scores, noncausal_scores, snapkv_scores, AttnScoreConfig};
use kvevict::calibrate::{
    calib_value, fit_calibration, invert_retention, CalibTriple, CalibrationModel,
};
use kvevict::evict::{blend_scores, select_topk, zscore};
use kvevict::harness::{gaussian_matrix, verify_spectral};
use kvevict::leverage::{approx_leverage, exact_leverage, BasisMethod};
use kvevict::sketch::{apply_sketch, SketchSpec};
use kvevict::{ScoreKind, ScoreVector};

fn mat(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(seed), n, d)
}

fn sketch_strategy() -> impl Strategy<Value = SketchSpec> {
    (1usize..24, any::<u64>(), any::<bool>()).prop_map(|(k, s, srht)| {
        if srht {
            SketchSpec::srht(k.min(16), s)
        } else {
            SketchSpec::gaussian(k, s)
        }
    })
}

/// SRHT needs `k` at most the padded width of `d`.
fn fit(spec: SketchSpec, d: usize) -> SketchSpec {
    match spec.kind {
        kvevict::sketch::SketchKind::Srht => SketchSpec::srht(
            spec.target_dim.min(kvevict::sketch::padded_dim(d)),
            spec.seed,
        ),
        _ => spec,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sketch_is_linear(n in 1usize..40, seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0,
                        spec in sketch_strategy()) {
        let (k1, k2) = (mat(n, 13, seed), mat(n, 13, seed ^ 1));
        let lhs = apply_sketch(&(&k1 * a + &k2 * b), &spec).unwrap();
        let rhs = apply_sketch(&k1, &spec).unwrap() * a + apply_sketch(&k2, &spec).unwrap() * b;
        let scale = lhs.amax().max(1.0);
        prop_assert!((lhs - rhs).amax() <= 1e-5 * scale);
    }

    #[test]
    fn sketch_is_deterministic(n in 1usize..30, seed in any::<u64>(), spec in sketch_strategy()) {
        let k = mat(n, 11, seed);
        prop_assert_eq!(apply_sketch(&k, &spec).unwrap(), apply_sketch(&k, &spec).unwrap());
    }

    #[test]
    fn leverage_permutation_equivariant(n in 2usize..60, d in 1usize..10, seed in any::<u64>(),
                                        spec in sketch_strategy()) {
        let k = mat(n, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let kp = DMatrix::from_fn(n, d, |i, j| k[(perm[i], j)]);
        let m = BasisMethod::default();
        let spec = fit(spec, d);
        let base = approx_leverage(&k, &spec, &m).unwrap().scores.scores;
        let moved = approx_leverage(&kp, &spec, &m).unwrap().scores.scores;
        for i in 0..n {
            prop_assert!((moved[i] - base[perm[i]]).abs() < 1e-9);
        }
    }

    #[test]
    fn leverage_column_space_invariant(n in 8usize..80, d in 1usize..8, seed in any::<u64>()) {
        let k = mat(n, d, seed);
        // Identity plus a small perturbation stays well conditioned.
        let m = DMatrix::<f64>::identity(d, d) * 2.0 + mat(d, d, seed ^ 7) * (0.3 / d as f64);
        let a = exact_leverage(&k).unwrap().scores.scores;
        let b = exact_leverage(&(&k * m)).unwrap().scores.scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn leverage_in_unit_interval(n in 1usize..60, d in 1usize..12, seed in any::<u64>(), spec in sketch_strategy()) {
        let lev = approx_leverage(&mat(n, d, seed), &fit(spec, d), &BasisMethod::default()).unwrap();
        prop_assert!(lev.scores.scores.iter().all(|&s| (0.0..=1.0 + 1e-6).contains(&s)));
    }

    #[test]
    fn topk_nests(v in prop::collection::vec(-1e3f64..1e3, 1..80), r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assume!(lo > 0.0);
        let s = ScoreVector::new(v, ScoreKind::Blended);
        let small = select_topk(&s, lo).unwrap();
        let big = select_topk(&s, hi).unwrap();
        prop_assert!(small.iter().all(|i| big.binary_search(i).is_ok()));
        prop_assert!(small.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zscore_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..60), a in 0.1f64..10.0, b in -100.0f64..100.0) {
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let z = zscore(&v);
        let zt = zscore(&v.iter().map(|x| a * x + b).collect::<Vec<_>>());
        for (x, y) in z.iter().zip(&zt) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn blend_selection_ignores_affine_shift(seed in any::<u64>(), n in 3usize..100, r in 0.01f64..1.0,
                                             c in -50.0f64..50.0, m in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let o: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let sv = |v: Vec<f64>, k| ScoreVector::new(v, k);
        let base = select_topk(&blend_scores(&sv(a.clone(), ScoreKind::Attention), &sv(o.clone(), ScoreKind::Outlier), 0.3).unwrap(), r).unwrap();
        let shifted = select_topk(&blend_scores(
            &sv(a.iter().map(|x| x + c).collect(), ScoreKind::Attention),
            &sv(o.iter().map(|x| x * m).collect(), ScoreKind::Outlier), 0.3).unwrap(), r).unwrap();
        prop_assert_eq!(base, shifted);
    }

    #[test]
    fn attention_nonnegative_and_snapkv_full_window(n in 1usize..90, chunk in 1usize..40, seed in any::<u64>()) {
        let (q, k) = (mat(n, 6, seed), mat(n, 6, seed ^ 3));
        let cfg = AttnScoreConfig { chunk_size: chunk, baseline_window: n, ..Default::default() };
        let nc = noncausal_scores(&q, &k, &cfg).unwrap();
        prop_assert!(nc.scores.iter().all(|&s| s >= 0.0));
        let h = h2o_scores(&q, &k, &cfg).unwrap().scores;
        let s = snapkv_scores(&q, &k, &cfg).unwrap().scores;
        for (x, y) in h.iter().zip(&s) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_chunk_locality(n in 2usize..80, chunk in 1usize..20, seed in any::<u64>(), row in any::<prop::sample::Index>()) {
        let (q, k) = (mat(n, 5, seed), mat(n, 5, seed ^ 5));
        let cfg = AttnScoreConfig { chunk_size: chunk, ..Default::default() };
        let i = row.index(n);
        let (mut q2, mut k2) = (q.clone(), k.clone());
        q2.row_mut(i).fill(3.0);
        k2.row_mut(i).fill(-2.0);
        let a = noncausal_scores(&q, &k, &cfg).unwrap().scores;
        let b = noncausal_scores(&q2, &k2, &cfg).unwrap().scores;
        let c = i / chunk;
        for t in 0..n {
            if t / chunk != c {
                prop_assert_eq!(a[t], b[t]);
            }
        }
    }

    #[test]
    fn calibration_monotone_and_inverse(alpha in -2.0f64..2.0, beta in -2.0f64..4.0, nll in 0.0f64..6.0,
                                        r1 in 0.001f64..0.999, r2 in 0.001f64..0.999, t1 in 0.01f64..0.999, t2 in 0.01f64..0.999) {
        let m = CalibrationModel::new(alpha, beta);
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(calib_value(lo, nll, &m) < calib_value(hi, nll, &m));
        let (tl, th) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let (rl, rh) = (invert_retention(nll, tl, &m), invert_retention(nll, th, &m));
        prop_assert!(rl <= rh);
        prop_assert!(calib_value(rh, nll, &m) >= th - 1e-9);
    }
}

#[test]
fn fit_is_idempotent() {
    let truth = CalibrationModel::new(0.35, 0.6);
    let triples: Vec<CalibTriple> = [0.5, 1.5, 2.5, 4.0]
        .iter()
        .flat_map(|&nll| (1..10).map(move |i| (nll, i as f64 / 10.0)))
        .map(|(nll_c, r)| CalibTriple {
            r,
            nll_c,
            y: calib_value(r, nll_c, &truth),
        })
        .collect();
    let fitted = fit_calibration(&triples, 4.0).unwrap();
    let again: Vec<CalibTriple> = triples
        .iter()
        .map(|t| CalibTriple {
            y: calib_value(t.r, t.nll_c, &fitted),
            ..*t
        })
        .collect();
    let refit = fit_calibration(&again, 4.0).unwrap();
    assert!((refit.alpha - fitted.alpha).abs() < 1e-6);
    assert!((refit.beta - fitted.beta).abs() < 1e-6);
}

#[test]
fn gaussian_subspace_embedding_band() {
    let k = mat(1024, 64, 42);
    for seed in 0..50 {
        let khat = apply_sketch(&k, &SketchSpec::gaussian(64, seed)).unwrap();
        for i in 0..k.nrows() {
            let ratio = khat.row(i).norm_squared() / k.row(i).norm_squared();
            assert!((0.3..=2.0).contains(&ratio), "seed {seed} row {i}: {ratio}");
        }
    }
}

#[test]
fn top_leverage_rows_preserve_spectrum() {
    // Decaying column scales give a well-separated top-8 right singular subspace.
    let mut k = mat(2000, 32, 9);
    for j in 0..32 {
        k.column_mut(j).scale_mut(0.85f64.powi(j as i32));
    }
    let lev = exact_leverage(&k).unwrap().scores;
    let keep = select_topk(&lev, 512.0 / 2000.0).unwrap();
    assert_eq!(keep.len(), 512);
    let sub = DMatrix::from_fn(512, 32, |i, j| k[(keep[i], j)]);
    let gram = sub.transpose() * &sub;
    assert!(gram.symmetric_eigenvalues().min() > 0.0);

    let top8 = |m: &DMatrix<f64>| {
        let svd = m.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        DMatrix::from_fn(32, 8, |i, j| vt[(idx[j], i)])
    };
    let (v, vs) = (top8(&k), top8(&sub));
    // Largest principal angle from the smallest singular value of VᵀV̂.
    let cos_min = (v.transpose() * vs).singular_values().min().min(1.0);
    let angle = cos_min.acos();
    assert!(angle < 0.2, "principal angle {angle}");
}

#[test]
fn spectral_success_grows_with_k() {
    let rates: Vec<f64> = [16, 200, 1300]
        .iter()
        .map(|&k| {
            verify_spectral(2000, 16, k, 50, 0.5, 0.1, 11)
                .unwrap()
                .success_rate
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    assert!(rates[0] < rates[2]);
}

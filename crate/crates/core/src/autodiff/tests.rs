use super::*;
use crate::params::ParamStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let p = g.matmul(i, b).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(mat(&[&[1.0, 2.0]]));
    let c = g.constant(mat(&[&[3.0], &[4.0]]));
    let p = g.matmul(a, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut s = ParamStore::new();
    let a = s.add_normal("a", &[3, 4], 1.0, &mut rng(1)).unwrap();
    let b = s.add_normal("b", &[4, 2], 1.0, &mut rng(2)).unwrap();
    let mut g = Graph::new();
    let av = g.param(&s, a);
    let bv = g.param(&s, b);
    let p = g.matmul(av, bv).unwrap();
    let out = g.sum(p).unwrap();
    let grads = g.backward(out).unwrap();
    let ga = grads.get(av).unwrap();
    let bt = s.value(b);
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..2).map(|j| bt.at(k, j)).sum();
            assert!((ga.at(i, k) - want).abs() < 1e-12);
        }
    }
    let report = grad_check(
        &s,
        |g, s| {
            let av = g.param(s, a);
            let bv = g.param(s, b);
            let p = g.matmul(av, bv)?;
            g.sum(p)
        },
        1e-5,
        1e-4,
        usize::MAX,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_column_axis() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[0.0, 1.0], &[0.0, 1.0]]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn l2_normalize_and_cross_entropy_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[3.0, 4.0]]));
    let y = g.l2_normalize(x, 1, 0.0).unwrap();
    assert!((g.value(y).data()[0] - 0.6).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.8).abs() < 1e-15);

    let logits = g.constant(mat(&[&[0.0, 0.0]]));
    let ce = g.cross_entropy(logits, &[0], 255).unwrap();
    assert!((g.scalar(ce) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_ignores_and_validates_labels() {
    let mut g = Graph::new();
    let logits = g.constant(mat(&[&[5.0, 0.0], &[0.0, 0.0]]));
    let ce = g.cross_entropy(logits, &[255, 0], 255).unwrap();
    assert!((g.scalar(ce) - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(g.cross_entropy(logits, &[2, 0], 255), Err(Error::Index(_))));
    let none = g.cross_entropy(logits, &[255, 255], 255).unwrap();
    assert_eq!(g.scalar(none), 0.0);
}

#[test]
fn gather_then_scatter_with_permutation_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let perm = [2, 0, 1];
    let y = g.gather(x, &perm).unwrap();
    let z = g.scatter_sum(y, &perm, 3).unwrap();
    assert_eq!(g.value(z), g.value(x));
    assert!(matches!(g.gather(x, &[3]), Err(Error::Index(_))));
    assert!(matches!(g.scatter_sum(y, &[0, 1, 7], 3), Err(Error::Index(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(f64::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn grad_check_rejects_non_scalar_output() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::zeros(&[2])).unwrap();
    let err = grad_check(&s, |g, s| Ok(g.param(s, w)), 1e-5, 1e-4, usize::MAX).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn constant_graph_has_exactly_zero_gradients() {
    let mut s = ParamStore::new();
    let w = s.add_normal("w", &[3, 2], 1.0, &mut rng(3)).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let _unused = g.param(s, w);
            let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
            g.sum(c)
        },
        1e-5,
        1e-4,
        usize::MAX,
    )
    .unwrap();
    assert_eq!(report.entries[0].max_abs_grad, 0.0);
    assert_eq!(report.entries[0].max_rel_error, 0.0);
}

#[test]
fn linear_layer_passes_grad_check() {
    let mut s = ParamStore::new();
    let x = s.add_normal("x", &[5, 3], 1.0, &mut rng(4)).unwrap();
    let w = s.add_normal("w", &[3, 4], 1.0, &mut rng(5)).unwrap();
    let b = s.add_normal("b", &[4], 1.0, &mut rng(6)).unwrap();
    let t = s.add_normal("t", &[5, 4], 1.0, &mut rng(7)).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let (x, w, b, t) = (g.param(s, x), g.param(s, w), g.param(s, b), g.param(s, t));
            let y = g.matmul(x, w)?;
            let y = g.add_bias(y, b)?;
            let y = g.mul(y, t)?;
            g.sum(y)
        },
        1e-5,
        1e-4,
        usize::MAX,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Every operator, composed into one scalar, against finite differences.
#[test]
fn every_operator_passes_grad_check() {
    let mut s = ParamStore::new();
    let mut r = rng(11);
    let x = s.add_normal("x", &[4, 3], 1.0, &mut r).unwrap();
    let y = s.add_normal("y", &[4, 3], 1.0, &mut r).unwrap();
    let gamma = s.add_normal("gamma", &[3], 1.0, &mut r).unwrap();
    let beta = s.add_normal("beta", &[3], 1.0, &mut r).unwrap();
    let f = s.add_normal("f", &[5, 2], 1.0, &mut r).unwrap();
    let plan = Arc::new(CorrelationPlan {
        queries: 2,
        supports: 5,
        kernel: 2,
        offsets: vec![0, 3, 5],
        support: vec![0, 2, 4, 1, 2],
        weights: vec![0.5, 0.1, 0.0, 0.9, 0.3, 0.2, 0.7, 0.0, 0.4, 0.6],
    });
    let targets = [1usize, 0, 255, 2];
    let report = grad_check(
        &s,
        |g, s| {
            let (x, y) = (g.param(s, x), g.param(s, y));
            let (gamma, beta, f) = (g.param(s, gamma), g.param(s, beta), g.param(s, f));
            let a = g.add(x, y)?;
            let b = g.sub(a, y)?;
            let c = g.mul(b, y)?;
            let c = g.scale(c, 0.7)?;
            let c = g.add_scalar(c, 0.3)?;
            let d = g.leaky_relu(c, 0.1)?;
            let (n, _, _) = g.normalize_batch(d, gamma, beta, 1e-5)?;
            let nf = g.normalize_frozen(c, gamma, beta, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            let cat = g.concat(&[n, nf], 1)?; // 4x6
            let sm = g.softmax(cat, 1)?;
            let sm0 = g.softmax(cat, 0)?;
            let l2 = g.l2_normalize(cat, 1, 1e-12)?;
            let l20 = g.l2_normalize(cat, 0, 1e-12)?;
            let rows = g.concat(&[sm, l2, sm0, l20], 0)?; // 16x6
            let picked = g.gather(rows, &[0, 3, 3, 7, 12])?;
            let sc = g.scatter_sum(picked, &[1, 0, 1, 2, 2], 3)?;
            let tr = g.transpose(sc)?; // 6x3
            let sl = g.slice_cols(tr, 1, 2)?; // 6x2
            let rs = g.reshape(sl, &[3, 4])?;
            let w = g.slice_cols(cat, 0, 3)?; // 4x3
            let logits = g.matmul(rs, w)?; // 3x3
            let logits = g.concat(&[logits, logits], 0)?;
            let logits = g.gather(logits, &[0, 1, 2, 4])?;
            let ce = g.cross_entropy(logits, &targets, 255)?;
            let corr = g.correlate(f, plan.clone())?; // 2x4
            let cn = g.norm(corr)?;
            let mx = g.max(corr)?;
            let total = g.sum(rs)?;
            let parts = g.concat(&[ce, cn, mx, total], 0)?;
            g.sum(parts)
        },
        1e-5,
        1e-4,
        usize::MAX,
    )
    .unwrap();
    assert!(report.passed(), "{report:#?}");
}

#[test]
fn backward_is_deterministic() {
    let mut s = ParamStore::new();
    let w = s.add_normal("w", &[6, 6], 1.0, &mut rng(9)).unwrap();
    let run = || {
        let mut g = Graph::new();
        let wv = g.param(&s, w);
        let p = g.matmul(wv, wv).unwrap();
        let q = g.softmax(p, 1).unwrap();
        let o = g.sum(q).unwrap();
        let o2 = g.mul(o, o).unwrap();
        let grads = g.backward(o2).unwrap();
        grads.get(wv).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn scatter_of_gather_scales_rows_by_multiplicity(
        idx in proptest::collection::vec(0usize..5, 1..12),
        vals in proptest::collection::vec(-10.0f64..10.0, 10),
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![5, 2], vals).unwrap());
        let y = g.gather(x, &idx).unwrap();
        let z = g.scatter_sum(y, &idx, 5).unwrap();
        for r in 0..5 {
            let count = idx.iter().filter(|&&i| i == r).count() as f64;
            for c in 0..2 {
                let want = count * g.value(x).at(r, c);
                prop_assert!((g.value(z).at(r, c) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn random_matmul_softmax_chain_matches_finite_differences(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut s = ParamStore::new();
        let mut r = rng(seed);
        let a = s.add_normal("a", &[m, k], 1.0, &mut r).unwrap();
        let b = s.add_normal("b", &[k, n], 1.0, &mut r).unwrap();
        let t = s.add_normal("t", &[m, n], 1.0, &mut r).unwrap();
        let report = grad_check(&s, |g, s| {
            let (a, b, t) = (g.param(s, a), g.param(s, b), g.param(s, t));
            let p = g.matmul(a, b)?;
            let q = g.softmax(p, 1)?;
            let q = g.mul(q, t)?;
            g.sum(q)
        }, 1e-5, 1e-4, usize::MAX).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}

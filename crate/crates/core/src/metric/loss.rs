use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Hinge margins of the lazy quadruplet loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    /// Positive-versus-negative margin.
    pub alpha: f64,
    /// Positive-versus-extra margin.
    pub beta: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.2 }
    }
}

fn worst(pos: &[f64], other: &[f64], margin: f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &p in pos {
        for &o in other {
            m = m.max(p - o + margin);
        }
    }
    m.max(0.0)
}

/// `[max_ij α + δpos_i − δneg_j]₊ + [max_ik β + δpos_i − δextra_k]₊` on plain
/// distances.
pub fn lazy_quadruplet(pos: &[f64], neg: &[f64], extra: &[f64], margins: &Margins) -> f64 {
    worst(pos, neg, margins.alpha) + worst(pos, extra, margins.beta)
}

/// Loss node plus which of the two hinges were active.
#[derive(Clone, Copy, Debug)]
pub struct QuadrupletLoss {
    pub loss: Var,
    pub active: [bool; 2],
}

/// The lazy quadruplet loss on descriptor rows of `g`, with Euclidean
/// distances to the anchor. Subgradients go through the first maximal term
/// in (positive, other) index order.
pub fn lazy_quadruplet_graph(
    g: &mut Graph,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
    extra: &[Var],
    margins: &Margins,
) -> Result<QuadrupletLoss> {
    if positives.is_empty() || negatives.is_empty() || extra.is_empty() {
        return Err(Error::usage("lazy quadruplet loss needs positives, negatives and an extra sample"));
    }
    let dist = |g: &mut Graph, v: Var| -> Result<Var> {
        let d = g.sub(anchor, v)?;
        g.norm(d)
    };
    let dp = positives.iter().map(|&v| dist(g, v)).collect::<Result<Vec<_>>>()?;
    let dn = negatives.iter().map(|&v| dist(g, v)).collect::<Result<Vec<_>>>()?;
    let dx = extra.iter().map(|&v| dist(g, v)).collect::<Result<Vec<_>>>()?;
    let hinge = |g: &mut Graph, other: &[Var], margin: f64| -> Result<(Var, bool)> {
        let mut terms = Vec::with_capacity(dp.len() * other.len());
        for &p in &dp {
            for &o in other {
                let t = g.sub(p, o)?;
                terms.push(g.add_scalar(t, margin)?);
            }
        }
        let all = g.concat(&terms, 0)?;
        let m = g.max(all)?;
        let active = g.scalar(m) > 0.0;
        Ok((g.relu(m)?, active))
    };
    let (first, a1) = hinge(g, &dn, margins.alpha)?;
    let (second, a2) = hinge(g, &dx, margins.beta)?;
    Ok(QuadrupletLoss { loss: g.add(first, second)?, active: [a1, a2] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const M: Margins = Margins { alpha: 0.5, beta: 0.2 };

    #[test]
    fn equal_distances_give_sum_of_margins() {
        for d in [0.0, 0.3, 1.0, 1.7] {
            let l = lazy_quadruplet(&[d; 2], &[d; 6], &[d], &M);
            assert_eq!(l, M.alpha + M.beta);
            assert_eq!(l, 0.7);
        }
    }

    #[test]
    fn satisfied_margins_give_zero() {
        assert_eq!(lazy_quadruplet(&[0.0; 2], &[0.5, 0.9, 1.0, 0.6, 0.7, 0.5], &[1.0], &M), 0.0);
    }

    #[test]
    fn mixed_case() {
        let l = lazy_quadruplet(&[0.4, 0.6], &[0.7; 6], &[0.5], &M);
        // max(0.4, 0.2) + max(0.3, 0.1)
        assert!((l - 0.7).abs() < 1e-12, "{l}");
    }

    #[test]
    fn graph_matches_plain_evaluation() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut g = Graph::new();
            let mut row = |g: &mut Graph| {
                let v: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
                g.leaf(Tensor::new(vec![1, 8], v).unwrap())
            };
            let a = row(&mut g);
            let p: Vec<Var> = (0..2).map(|_| row(&mut g)).collect();
            let n: Vec<Var> = (0..6).map(|_| row(&mut g)).collect();
            let x = row(&mut g);
            let q = lazy_quadruplet_graph(&mut g, a, &p, &n, &[x], &M).unwrap();
            let d = |v: Var| g.value(a).data().iter().zip(g.value(v).data()).map(|(u, w)| (u - w).powi(2)).sum::<f64>().sqrt();
            let dp: Vec<f64> = p.iter().map(|&v| d(v)).collect();
            let dn: Vec<f64> = n.iter().map(|&v| d(v)).collect();
            let want = lazy_quadruplet(&dp, &dn, &[d(x)], &M);
            assert!((g.scalar(q.loss) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        // spread so that no hinge sits at a kink or tie
        let ids: Vec<_> = (0..10).map(|i| store.add_normal(&format!("d{i}"), &[1, 6], 0.5, &mut r).unwrap()).collect();
        let report = grad_check(
            &store,
            |g, st| {
                let v: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
                Ok(lazy_quadruplet_graph(g, v[0], &v[1..3], &v[3..9], &v[9..], &Margins { alpha: 2.0, beta: 1.5 })?.loss)
            },
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    proptest! {
        #[test]
        fn permutations_and_monotonicity(
            pos in proptest::collection::vec(0.0f64..2.0, 2),
            neg in proptest::collection::vec(0.0f64..2.0, 6),
            extra in 0.0f64..2.0,
            bump in 0.0f64..1.0,
            rot in 0usize..6,
        ) {
            let base = lazy_quadruplet(&pos, &neg, &[extra], &M);
            let mut p2 = pos.clone();
            p2.reverse();
            let mut n2 = neg.clone();
            n2.rotate_left(rot);
            prop_assert_eq!(base, lazy_quadruplet(&p2, &n2, &[extra], &M));
            let mut p3 = pos.clone();
            p3[0] += bump;
            prop_assert!(lazy_quadruplet(&p3, &neg, &[extra], &M) >= base);
            let zero = neg.iter().all(|&n| pos.iter().all(|&p| n >= p + M.alpha))
                && pos.iter().all(|&p| extra >= p + M.beta);
            prop_assert_eq!(base == 0.0, zero);
        }
    }
}

use crate::error::{Error, Result};
use crate::pointcloud::grid::GridIndex;
use crate::pointcloud::{dist2, Point};

/// Fixed-capacity neighbor lists, one per query point.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    capacity: usize,
    indices: Vec<usize>,
    counts: Vec<usize>,
}

impl NeighborIndex {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of query points.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, q: usize) -> usize {
        self.counts[q]
    }

    /// Valid neighbors of query `q`, nearest first.
    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.capacity..q * self.capacity + self.counts[q]]
    }
}

/// All supports within `radius` of each query, nearest first (ties to the
/// lower support index), truncated to `capacity`.
pub fn radius_neighbors(queries: &[Point], supports: &[Point], radius: f64, capacity: usize) -> Result<NeighborIndex> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::usage(format!("radius must be positive, got {radius}")));
    }
    if capacity == 0 {
        return Err(Error::usage("neighbor capacity must be at least 1"));
    }
    let grid = GridIndex::new(supports, radius);
    let r2 = radius * radius;
    let mut indices = vec![0; queries.len() * capacity];
    let mut counts = Vec::with_capacity(queries.len());
    let mut found: Vec<(f64, usize)> = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        found.clear();
        let k = grid.key(q);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    for &s in grid.bucket((k.0 + dx, k.1 + dy, k.2 + dz)) {
                        let d = dist2(q, &supports[s]);
                        if d <= r2 {
                            found.push((d, s));
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = found.len().min(capacity);
        for (slot, &(_, s)) in indices[qi * capacity..qi * capacity + n].iter_mut().zip(&found) {
            *slot = s;
        }
        counts.push(n);
    }
    Ok(NeighborIndex { capacity, indices, counts })
}

/// Index of the nearest support for every query (ties to the lower index).
/// `cell` sets the bucket size of the search grid.
pub fn nearest_neighbors(queries: &[Point], supports: &[Point], cell: f64) -> Result<Vec<usize>> {
    if supports.is_empty() {
        return Err(Error::DegenerateInput("nearest neighbor search over zero supports".into()));
    }
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::usage(format!("cell size must be positive, got {cell}")));
    }
    let grid = GridIndex::new(supports, cell);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let k = grid.key(q);
        let mut best: Option<(f64, usize)> = None;
        for ring in 0..=grid.max_ring(k) {
            // Any point in ring r+1 or beyond is at least r·cell away.
            if let Some((d, _)) = best {
                let bound = (ring - 1).max(0) as f64 * grid.cell();
                if d < bound * bound {
                    break;
                }
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        for &s in grid.bucket((k.0 + dx, k.1 + dy, k.2 + dz)) {
                            let d = dist2(q, &supports[s]);
                            let better = match best {
                                None => true,
                                Some((bd, bs)) => d < bd || (d == bd && s < bs),
                            };
                            if better {
                                best = Some((d, s));
                            }
                        }
                    }
                }
            }
        }
        out.push(best.expect("supports non-empty").1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(n: usize, r: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()
    }

    /// O(N·M) exhaustive scan.
    fn exhaustive(q: &[Point], s: &[Point], radius: f64, cap: usize) -> Vec<Vec<usize>> {
        q.iter()
            .map(|qp| {
                let mut all: Vec<(f64, usize)> = s
                    .iter()
                    .enumerate()
                    .map(|(i, sp)| (dist2(qp, sp), i))
                    .filter(|(d, _)| *d <= radius * radius)
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(cap).map(|(_, i)| i).collect()
            })
            .collect()
    }

    #[test]
    fn distance_filter_and_truncation() {
        let q = [[0.0; 3]];
        let s = [[0.5, 0.0, 0.0], [1.5, 0.0, 0.0]];
        let n = radius_neighbors(&q, &s, 1.0, 4).unwrap();
        assert_eq!(n.neighbors(0), &[0]);
        let s = [[0.9, 0.0, 0.0], [0.0, 0.3, 0.0]];
        let n = radius_neighbors(&q, &s, 1.0, 1).unwrap();
        assert_eq!(n.neighbors(0), &[1]);
        let n = radius_neighbors(&q, &[[5.0, 0.0, 0.0]], 1.0, 3).unwrap();
        assert_eq!(n.count(0), 0);
    }

    #[test]
    fn bad_arguments() {
        assert!(radius_neighbors(&[], &[], 0.0, 3).is_err());
        assert!(radius_neighbors(&[], &[], 1.0, 0).is_err());
        assert!(nearest_neighbors(&[[0.0; 3]], &[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn radius_search_equals_exhaustive_scan(seed in 0u64..10_000, radius in 0.05f64..1.0, cap in 1usize..30) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let q = pts(40, &mut r);
            let s = pts(120, &mut r);
            let n = radius_neighbors(&q, &s, radius, cap).unwrap();
            let want = exhaustive(&q, &s, radius, cap);
            for (i, w) in want.iter().enumerate() {
                prop_assert_eq!(n.neighbors(i), &w[..]);
                prop_assert!(n.count(i) <= n.capacity());
            }
        }

        #[test]
        fn nearest_equals_exhaustive_scan(seed in 0u64..10_000, cell in 0.01f64..2.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let q = pts(30, &mut r);
            let s = pts(25, &mut r);
            let got = nearest_neighbors(&q, &s, cell).unwrap();
            for (qp, g) in q.iter().zip(got) {
                let want = exhaustive(&[*qp], &s, 100.0, 1)[0][0];
                prop_assert_eq!(g, want);
            }
        }
    }
}

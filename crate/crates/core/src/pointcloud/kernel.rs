use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointcloud::Point;

const REPULSION_ITERS: usize = 600;

/// Rigid kernel-point offsets and their influence distance.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDisposition {
    offsets: Vec<Point>,
    sigma: f64,
}

impl KernelDisposition {
    pub fn new(offsets: Vec<Point>, sigma: f64) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::usage("kernel needs at least one point"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::usage(format!("kernel influence must be positive, got {sigma}")));
        }
        Ok(Self { offsets, sigma })
    }

    /// One point at the origin plus `k - 1` points spread by mutual repulsion
    /// inside the ball of `radius`. Deterministic in `(k, radius, seed)`.
    pub fn generate(k: usize, radius: f64, sigma: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::usage(format!("kernel point count must be at least 2, got {k}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::usage(format!("kernel radius must be positive, got {radius}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Unit ball; index 0 stays pinned at the origin.
        let mut pts: Vec<Point> = vec![[0.0; 3]];
        while pts.len() < k {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n2: f64 = p.iter().map(|v| v * v).sum();
            if n2 > 0.01 && n2 < 1.0 {
                pts.push(p);
            }
        }
        let mut forces = vec![[0.0; 3]; k];
        for it in 0..REPULSION_ITERS {
            let step = 0.05 * (1.0 - it as f64 / REPULSION_ITERS as f64) + 1e-3;
            for (i, f) in forces.iter_mut().enumerate().skip(1) {
                *f = [0.0; 3];
                for (j, q) in pts.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let d = [pts[i][0] - q[0], pts[i][1] - q[1], pts[i][2] - q[2]];
                    let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-12);
                    let inv = 1.0 / (r2 * r2.sqrt());
                    for c in 0..3 {
                        f[c] += d[c] * inv;
                    }
                }
            }
            for i in 1..k {
                let f = forces[i];
                let fnorm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
                if fnorm > 0.0 {
                    for c in 0..3 {
                        pts[i][c] += step * f[c] / fnorm;
                    }
                }
                let n = (pts[i][0].powi(2) + pts[i][1].powi(2) + pts[i][2].powi(2)).sqrt();
                if n > 1.0 {
                    pts[i] = pts[i].map(|v| v / n);
                }
            }
        }
        let offsets = pts.into_iter().map(|p| p.map(|v| v * radius)).collect();
        Self::new(offsets, sigma)
    }

    pub fn offsets(&self) -> &[Point] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Linear correlation `max(0, 1 - ‖rel - offset_k‖ / σ)` for every kernel
    /// point, where `rel` is the neighbor position relative to the query.
    pub fn correlations(&self, rel: &Point, out: &mut [f64]) {
        for (o, off) in out.iter_mut().zip(&self.offsets) {
            let d = ((rel[0] - off[0]).powi(2) + (rel[1] - off[1]).powi(2) + (rel[2] - off[2]).powi(2)).sqrt();
            *o = (1.0 - d / self.sigma).max(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &Point) -> f64 {
        p.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn min_pairwise(k: &KernelDisposition) -> f64 {
        let o = k.offsets();
        let mut m = f64::INFINITY;
        for i in 0..o.len() {
            for j in i + 1..o.len() {
                m = m.min(((o[i][0] - o[j][0]).powi(2) + (o[i][1] - o[j][1]).powi(2) + (o[i][2] - o[j][2]).powi(2)).sqrt());
            }
        }
        m
    }

    #[test]
    fn two_points_sit_on_the_boundary() {
        let k = KernelDisposition::generate(2, 0.7, 0.1, 1).unwrap();
        assert_eq!(k.offsets()[0], [0.0; 3]);
        assert!((norm(&k.offsets()[1]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn offsets_stay_inside_radius_and_distinct() {
        for kk in 2..20 {
            let k = KernelDisposition::generate(kk, 1.3, 0.5, 7).unwrap();
            assert_eq!(k.len(), kk);
            assert!(k.offsets().iter().all(|p| norm(p) <= 1.3 + 1e-12));
            assert!(min_pairwise(&k) > 0.0);
        }
    }

    #[test]
    fn fifteen_points_are_well_spread() {
        let k = KernelDisposition::generate(15, 1.0, 1.0, 42).unwrap();
        let m = min_pairwise(&k);
        assert!(m > 0.3, "min pairwise distance {m}");
        assert_eq!(k, KernelDisposition::generate(15, 1.0, 1.0, 42).unwrap());
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(KernelDisposition::generate(1, 1.0, 1.0, 0).is_err());
    }
}

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pointcloud::{Point, RgbPointCloud, UNLABELED};

pub(crate) type VoxelKey = (i64, i64, i64);

pub(crate) fn voxel_key(p: &Point, cell: f64) -> VoxelKey {
    (
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    )
}

fn check_cell(cell: f64) -> Result<()> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::usage(format!("cell size must be positive, got {cell}")));
    }
    Ok(())
}

/// Group point indices by voxel. Groups come out in lexicographic voxel order
/// and members in the order given by `tie`, so the grouping does not depend on
/// input ordering.
fn voxel_groups(
    points: &[Point],
    cell: f64,
    tie: impl Fn(usize, usize) -> std::cmp::Ordering,
) -> Vec<Vec<usize>> {
    let keys: Vec<VoxelKey> = points.iter().map(|p| voxel_key(p, cell)).collect();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then_with(|| tie(a, b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if keys[g[0]] == keys[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn mean3(vals: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for v in vals {
        for k in 0..3 {
            s[k] += v[k];
        }
        n += 1;
    }
    [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]
}

/// Majority label among labeled members; ties go to the smallest class id.
fn majority(labels: impl Iterator<Item = u8>) -> u8 {
    let mut counts = [0usize; 256];
    for l in labels {
        counts[l as usize] += 1;
    }
    let mut best = UNLABELED;
    let mut best_count = 0;
    for (l, &c) in counts.iter().enumerate().take(UNLABELED as usize) {
        if c > best_count {
            best = l as u8;
            best_count = c;
        }
    }
    best
}

/// One point per occupied voxel: mean position, mean color, majority label.
/// The output is ordered by voxel coordinate and invariant under any
/// permutation of the input.
pub fn grid_subsample(cloud: &RgbPointCloud, cell: f64) -> Result<RgbPointCloud> {
    check_cell(cell)?;
    if cloud.is_empty() {
        return Err(Error::DegenerateInput("cannot subsample an empty cloud".into()));
    }
    let groups = voxel_groups(cloud.positions(), cell, |a, b| cloud.cmp_points(a, b));
    let mut positions = Vec::with_capacity(groups.len());
    let mut colors = Vec::with_capacity(groups.len());
    let mut labels = Vec::with_capacity(groups.len());
    for g in &groups {
        positions.push(mean3(g.iter().map(|&i| cloud.positions()[i])));
        colors.push(mean3(g.iter().map(|&i| cloud.colors()[i])).map(|c| c.clamp(0.0, 1.0)));
        labels.push(majority(g.iter().map(|&i| cloud.labels()[i])));
    }
    RgbPointCloud::new(positions, colors, Some(labels))
}

/// Position-only grid subsampling used between encoder levels.
pub fn subsample_positions(points: &[Point], cell: f64) -> Result<Vec<Point>> {
    check_cell(cell)?;
    let cmp = |a: usize, b: usize| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    Ok(voxel_groups(points, cell, cmp)
        .iter()
        .map(|g| mean3(g.iter().map(|&i| points[i])))
        .collect())
}

/// Uniform-grid bucket index over a point set.
pub(crate) struct GridIndex {
    cell: f64,
    buckets: HashMap<VoxelKey, Vec<usize>>,
    min: VoxelKey,
    max: VoxelKey,
}

impl GridIndex {
    pub fn new(points: &[Point], cell: f64) -> Self {
        let mut buckets: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        let mut min = (i64::MAX, i64::MAX, i64::MAX);
        let mut max = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = voxel_key(p, cell);
            min = (min.0.min(k.0), min.1.min(k.1), min.2.min(k.2));
            max = (max.0.max(k.0), max.1.max(k.1), max.2.max(k.2));
            buckets.entry(k).or_default().push(i);
        }
        Self { cell, buckets, min, max }
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn key(&self, p: &Point) -> VoxelKey {
        voxel_key(p, self.cell)
    }

    pub fn bucket(&self, k: VoxelKey) -> &[usize] {
        self.buckets.get(&k).map_or(&[], Vec::as_slice)
    }

    /// Largest Chebyshev ring around `k` that can still hit an occupied cell.
    pub fn max_ring(&self, k: VoxelKey) -> i64 {
        [
            (k.0 - self.min.0).abs(),
            (self.max.0 - k.0).abs(),
            (k.1 - self.min.1).abs(),
            (self.max.1 - k.1).abs(),
            (k.2 - self.min.2).abs(),
            (self.max.2 - k.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}

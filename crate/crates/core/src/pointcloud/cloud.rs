use std::cmp::Ordering;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Label value for points without a semantic class.
pub const UNLABELED: u8 = 255;

/// Colored point cloud with per-point semantic labels ([`UNLABELED`] where
/// unknown). Positions are meters, colors are RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbPointCloud {
    positions: Vec<Point>,
    colors: Vec<[f64; 3]>,
    labels: Vec<u8>,
}

impl RgbPointCloud {
    pub fn new(positions: Vec<Point>, colors: Vec<[f64; 3]>, labels: Option<Vec<u8>>) -> Result<Self> {
        let n = positions.len();
        if colors.len() != n {
            return Err(Error::dim(format!("{n} positions but {} colors", colors.len())));
        }
        let labels = labels.unwrap_or_else(|| vec![UNLABELED; n]);
        if labels.len() != n {
            return Err(Error::dim(format!("{n} positions but {} labels", labels.len())));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::usage(format!("point {i} has a non-finite position")));
        }
        if let Some(i) = colors.iter().position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::usage(format!("point {i} has a color outside [0, 1]")));
        }
        Ok(Self { positions, colors, labels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// True when at least one point carries a class label.
    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|&l| l != UNLABELED)
    }

    /// Check every label is a class id below `classes` or [`UNLABELED`].
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l != UNLABELED && l as usize >= classes) {
            Some(i) => Err(Error::Index(format!("point {i} has label {} outside [0, {classes})", self.labels[i]))),
            None => Ok(()),
        }
    }

    /// Mean position, `None` for an empty cloud.
    pub fn centroid(&self) -> Option<Point> {
        if self.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Reorder points so that output point `i` is input point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            colors: order.iter().map(|&i| self.colors[i]).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Total order on points by position, then color, then label.
    pub(crate) fn cmp_points(&self, a: usize, b: usize) -> Ordering {
        let pa = self.positions[a].iter().chain(&self.colors[a]);
        let pb = self.positions[b].iter().chain(&self.colors[b]);
        for (x, y) in pa.zip(pb) {
            match x.total_cmp(y) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        self.labels[a].cmp(&self.labels[b])
    }

    /// Index order that sorts the points canonically; independent of the
    /// input ordering.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.cmp_points(a, b));
        idx
    }
}

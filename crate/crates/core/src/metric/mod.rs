//! Stage-2 metric learning: place predicates, tuple mining, the lazy
//! quadruplet loss and the trainer that keeps the encoder frozen.

mod loss;
mod mining;
mod train;

pub use loss::{lazy_quadruplet, lazy_quadruplet_graph, Margins, QuadrupletLoss};
pub use mining::{mine_tuple, TrainingTuple};
pub use train::{precompute_pyramids, train_stage2, train_stage2_pyramids, Stage2Config, Stage2Epoch};

use crate::pointcloud::Point;

/// Identity and location of one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceRecord {
    pub id: u32,
    pub room: String,
    /// Mean of the keyframe's point positions, meters.
    pub centroid: Point,
}

impl PlaceRecord {
    pub fn distance(&self, other: &PlaceRecord) -> f64 {
        crate::pointcloud::dist2(&self.centroid, &other.centroid).sqrt()
    }
}

/// Centroid-distance thresholds for positives and negatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// Same-room pairs closer than this are positives.
    pub positive: f64,
    /// Same-room pairs at least this far apart are negatives.
    pub negative: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { positive: 2.0, negative: 4.0 }
    }
}

impl Thresholds {
    pub fn is_positive(&self, a: &PlaceRecord, b: &PlaceRecord) -> bool {
        a.room == b.room && a.distance(b) < self.positive
    }

    /// Different room, or the same room but far apart. Same-room pairs
    /// between the two thresholds are neither positive nor negative.
    pub fn is_negative(&self, a: &PlaceRecord, b: &PlaceRecord) -> bool {
        a.room != b.room || a.distance(b) >= self.negative
    }
}

pub fn is_positive(a: &PlaceRecord, b: &PlaceRecord) -> bool {
    Thresholds::default().is_positive(a, b)
}

pub fn is_negative(a: &PlaceRecord, b: &PlaceRecord) -> bool {
    Thresholds::default().is_negative(a, b)
}

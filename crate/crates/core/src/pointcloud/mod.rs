//! Geometry kernels: point clouds, grid subsampling, radius neighborhoods and
//! kernel-point convolution.

mod cloud;
mod grid;
mod kernel;
mod kpconv;
mod neighbors;

pub use cloud::{Point, RgbPointCloud, UNLABELED};
pub use grid::{grid_subsample, subsample_positions};
pub use kernel::KernelDisposition;
pub use kpconv::{correlation_plan, kp_conv};
pub use neighbors::{nearest_neighbors, radius_neighbors, NeighborIndex};

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

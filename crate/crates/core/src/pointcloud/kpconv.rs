use std::sync::Arc;

use crate::autodiff::{CorrelationPlan, Graph, Var};
use crate::error::{Error, Result};
use crate::pointcloud::{KernelDisposition, NeighborIndex, Point};

/// Kernel correlation coefficients for every (query, neighbor) pair.
/// Neighbors outside the influence of every kernel point are dropped.
pub fn correlation_plan(
    queries: &[Point],
    supports: &[Point],
    neighbors: &NeighborIndex,
    kernel: &KernelDisposition,
) -> Result<CorrelationPlan> {
    if neighbors.len() != queries.len() {
        return Err(Error::dim(format!(
            "neighbor index covers {} queries, got {}",
            neighbors.len(),
            queries.len()
        )));
    }
    let k = kernel.len();
    let mut offsets = Vec::with_capacity(queries.len() + 1);
    let mut support = Vec::new();
    let mut weights = Vec::new();
    let mut h = vec![0.0; k];
    offsets.push(0);
    for (qi, q) in queries.iter().enumerate() {
        for &s in neighbors.neighbors(qi) {
            let p = supports
                .get(s)
                .ok_or_else(|| Error::Index(format!("neighbor {s} outside {} supports", supports.len())))?;
            let rel = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            kernel.correlations(&rel, &mut h);
            if h.iter().all(|&v| v == 0.0) {
                continue;
            }
            support.push(s);
            weights.extend_from_slice(&h);
        }
        offsets.push(support.len());
    }
    Ok(CorrelationPlan {
        queries: queries.len(),
        supports: supports.len(),
        kernel: k,
        offsets,
        support,
        weights,
    })
}

/// Rigid kernel-point convolution.
///
/// For each query `q`: `Σ_neighbors y Σ_k max(0, 1 − ‖y − q − offset_k‖/σ) · (f(y) · W_k)`
/// with `weights` shaped K×Cin×Cout. Differentiable in `features` and `weights`.
pub fn kp_conv(
    g: &mut Graph,
    queries: &[Point],
    supports: &[Point],
    features: Var,
    neighbors: &NeighborIndex,
    kernel: &KernelDisposition,
    weights: Var,
) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    if fs.len() != 2 || fs[0] != supports.len() {
        return Err(Error::dim(format!(
            "kp_conv: features {fs:?} for {} supports",
            supports.len()
        )));
    }
    let ws = g.shape(weights).to_vec();
    if ws.len() != 3 || ws[0] != kernel.len() || ws[1] != fs[1] {
        return Err(Error::dim(format!(
            "kp_conv: weights {ws:?} incompatible with {} kernel points and {} input channels",
            kernel.len(),
            fs[1]
        )));
    }
    let plan = Arc::new(correlation_plan(queries, supports, neighbors, kernel)?);
    let agg = g.correlate(features, plan)?;
    let w2 = g.reshape(weights, &[ws[0] * ws[1], ws[2]])?;
    g.matmul(agg, w2)
}

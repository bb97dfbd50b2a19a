use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VladConfig {
    pub clusters: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl VladConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("NetVLAD dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Soft-assignment residual aggregation with per-cluster and global
/// normalization, followed by a bias-free projection and a final
/// normalization.
#[derive(Clone, Debug)]
pub struct NetVlad {
    config: VladConfig,
    assign_w: ParamId,
    assign_b: ParamId,
    centers: ParamId,
    project: ParamId,
}

impl NetVlad {
    pub fn new(store: &mut ParamStore, name: &str, config: VladConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.clusters, config.input_dim);
        let assign_w = store.add_normal(&format!("{name}.assign_weights"), &[d, k], 1.0 / (d as f64).sqrt(), rng)?;
        let assign_b = store.add(format!("{name}.assign_bias"), Tensor::zeros(&[k]))?;
        let centers = store.add_normal(&format!("{name}.centers"), &[k, d], 0.1, rng)?;
        let project = store.add_normal(
            &format!("{name}.project"),
            &[k * d, config.output_dim],
            1.0 / ((k * d) as f64).sqrt(),
            rng,
        )?;
        Ok(Self { config, assign_w, assign_b, centers, project })
    }

    pub fn config(&self) -> &VladConfig {
        &self.config
    }

    /// N×d features to a 1×output_dim unit vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(Error::dim(format!(
                "NetVLAD expects N×{} features, got {s:?}",
                self.config.input_dim
            )));
        }
        let (n, d, k) = (s[0], s[1], self.config.clusters);
        let w = g.param(store, self.assign_w);
        let b = g.param(store, self.assign_b);
        let c = g.param(store, self.centers);
        let logits = g.matmul(x, w)?;
        let logits = g.add_bias(logits, b)?;
        let a = g.softmax(logits, 1)?;
        let at = g.transpose(a)?;
        // Σᵢ aₖ(xᵢ)(xᵢ − cₖ) = Aᵀx − (Aᵀ·1) ⊙ c
        let weighted = g.matmul(at, x)?;
        let ones = g.constant(Tensor::full(&[n, d], 1.0));
        let mass = g.matmul(at, ones)?;
        let shift = g.mul(mass, c)?;
        let v = g.sub(weighted, shift)?;
        let v = g.l2_normalize(v, 1, NORM_EPS)?;
        let v = g.reshape(v, &[1, k * d])?;
        let v = g.l2_normalize(v, 1, NORM_EPS)?;
        let p = g.param(store, self.project);
        let y = g.matmul(v, p)?;
        g.l2_normalize(y, 1, NORM_EPS)
    }
}

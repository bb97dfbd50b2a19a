use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::semantic::LEAKY_SLOPE;

#[derive(Clone, Debug, PartialEq)]
pub struct SaConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_out: usize,
    /// Hidden width of the feed-forward projection.
    pub ff_hidden: usize,
    /// When false the attention and fusion sublayers are replaced by the
    /// identity; only the feed-forward projection remains.
    pub attention: bool,
}

impl SaConfig {
    pub fn new(heads: usize, d_model: usize, d_out: usize) -> Self {
        Self { heads, d_model, d_out, ff_hidden: 2 * d_model, attention: true }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_out == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add_normal(&format!("{name}.weights"), &[cin, cout], gain / (cin as f64).sqrt(), rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), crate::Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Multi-head self-attention, a fusing linear layer and a two-layer
/// feed-forward projection to `d_out`. No residual paths, no positional
/// encoding.
#[derive(Clone, Debug)]
pub struct SaLayer {
    config: SaConfig,
    query: Option<Linear>,
    key: Option<Linear>,
    value: Option<Linear>,
    fuse: Option<Linear>,
    ff1: Linear,
    ff2: Linear,
}

/// Output rows plus each head's N×N attention matrix (empty when attention
/// is disabled).
#[derive(Clone, Debug)]
pub struct SaOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl SaLayer {
    pub fn new(store: &mut ParamStore, name: &str, config: SaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let (query, key, value, fuse) = if config.attention {
            (
                Some(Linear::new(store, &format!("{name}.query"), d, d, 1.0, false, rng)?),
                Some(Linear::new(store, &format!("{name}.key"), d, d, 1.0, false, rng)?),
                Some(Linear::new(store, &format!("{name}.value"), d, d, 1.0, false, rng)?),
                Some(Linear::new(store, &format!("{name}.fuse"), d, d, 1.0, true, rng)?),
            )
        } else {
            (None, None, None, None)
        };
        let ff1 = Linear::new(store, &format!("{name}.ff1"), d, config.ff_hidden, 2f64.sqrt(), true, rng)?;
        let ff2 = Linear::new(store, &format!("{name}.ff2"), config.ff_hidden, config.d_out, 1.0, true, rng)?;
        Ok(Self { config, query, key, value, fuse, ff1, ff2 })
    }

    pub fn config(&self) -> &SaConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<SaOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.config.d_model {
            return Err(Error::dim(format!(
                "attention layer expects N×{} input, got {s:?}",
                self.config.d_model
            )));
        }
        let mut attention = Vec::new();
        let mixed = match (&self.query, &self.key, &self.value, &self.fuse) {
            (Some(wq), Some(wk), Some(wv), Some(fuse)) => {
                let q = wq.apply(g, store, x)?;
                let k = wk.apply(g, store, x)?;
                let v = wv.apply(g, store, x)?;
                let dk = self.config.d_k();
                let scale = 1.0 / (dk as f64).sqrt();
                let mut heads = Vec::with_capacity(self.config.heads);
                for h in 0..self.config.heads {
                    let qh = g.slice_cols(q, h * dk, dk)?;
                    let kh = g.slice_cols(k, h * dk, dk)?;
                    let vh = g.slice_cols(v, h * dk, dk)?;
                    let kt = g.transpose(kh)?;
                    let scores = g.matmul(qh, kt)?;
                    let scores = g.scale(scores, scale)?;
                    let a = g.softmax(scores, 1)?;
                    attention.push(a);
                    heads.push(g.matmul(a, vh)?);
                }
                let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
                fuse.apply(g, store, cat)?
            }
            _ => x,
        };
        let hidden = self.ff1.apply(g, store, mixed)?;
        let hidden = g.leaky_relu(hidden, LEAKY_SLOPE)?;
        let out = self.ff2.apply(g, store, hidden)?;
        Ok(SaOutput { out, attention })
    }
}

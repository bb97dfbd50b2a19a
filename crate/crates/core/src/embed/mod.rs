//! Attention-guided embedding: per-level self-attention selection, a fusion
//! attention layer over the combined points, NetVLAD aggregation and the
//! final descriptor.

mod sa;
mod vlad;

pub use sa::{SaConfig, SaLayer, SaOutput};
pub use vlad::{NetVlad, VladConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pointcloud::RgbPointCloud;
use crate::semantic::{Encoder, EncoderConfig, FeaturePyramid, TAP_LEVELS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub heads: usize,
    /// Common feature width all levels are projected to.
    pub common_dim: usize,
    pub clusters: usize,
    pub descriptor_dim: usize,
    /// Feature widths of the tapped encoder levels.
    pub level_widths: [usize; 3],
    pub attention: bool,
}

impl EmbedConfig {
    /// Defaults matched to an encoder's tap widths.
    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        let w = enc.widths();
        Self {
            heads: 4,
            common_dim: 64,
            clusters: 64,
            descriptor_dim: 256,
            level_widths: TAP_LEVELS.map(|l| w[l - 1]),
            attention: true,
        }
    }

    fn level_sa(&self, i: usize) -> SaConfig {
        SaConfig {
            attention: self.attention,
            ..SaConfig::new(self.heads, self.level_widths[i], self.common_dim)
        }
    }

    fn fusion_sa(&self) -> SaConfig {
        SaConfig {
            attention: self.attention,
            ..SaConfig::new(self.heads, self.common_dim, self.common_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            self.level_sa(i).validate()?;
        }
        self.fusion_sa().validate()?;
        self.vlad().validate()
    }

    fn vlad(&self) -> VladConfig {
        VladConfig {
            clusters: self.clusters,
            input_dim: self.common_dim,
            output_dim: self.descriptor_dim,
        }
    }

    fn fingerprint(&self) -> Tensor {
        let mut v = vec![
            self.heads as f64,
            self.common_dim as f64,
            self.clusters as f64,
            self.descriptor_dim as f64,
            f64::from(u8::from(self.attention)),
        ];
        v.extend(self.level_widths.map(|w| w as f64));
        Tensor::vector(v).expect("non-empty")
    }
}

/// Unit-norm global place descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Trainable part of the descriptor network.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    config: EmbedConfig,
    params: ParamStore,
    levels: Vec<SaLayer>,
    fusion: SaLayer,
    vlad: NetVlad,
}

impl EmbeddingNet {
    pub fn new(config: EmbedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let levels = (0..3)
            .map(|i| SaLayer::new(&mut params, &format!("embed.level{}", TAP_LEVELS[i]), config.level_sa(i), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = SaLayer::new(&mut params, "embed.fusion", config.fusion_sa(), &mut rng)?;
        let vlad = NetVlad::new(&mut params, "embed.vlad", config.vlad(), &mut rng)?;
        params.round_to_f32();
        Ok(Self { config, params, levels, fusion, vlad })
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Per-level attention to the common width, concatenation along the
    /// point axis, then the fusion attention layer. Returns the fused rows
    /// and the outputs of the per-level layers.
    pub fn select_and_fuse(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<(Var, Vec<SaOutput>)> {
        let mut selected = Vec::with_capacity(3);
        for (layer, level) in self.levels.iter().zip(&pyramid.levels) {
            if level.points.is_empty() {
                return Err(Error::DegenerateInput(format!("pyramid level {} is empty", level.level)));
            }
            let x = g.constant(level.features.clone());
            selected.push(layer.forward(g, &self.params, x)?);
        }
        let rows: Vec<Var> = selected.iter().map(|s| s.out).collect();
        let cat = g.concat(&rows, 0)?;
        let fused = self.fusion.forward(g, &self.params, cat)?;
        Ok((fused.out, selected))
    }

    /// 1×descriptor_dim unit row on `g`.
    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<Var> {
        let (fused, _) = self.select_and_fuse(g, pyramid)?;
        self.vlad.forward(g, &self.params, fused)
    }

    pub fn describe_pyramid(&self, pyramid: &FeaturePyramid) -> Result<GlobalDescriptor> {
        let mut g = Graph::new();
        let d = self.forward(&mut g, pyramid)?;
        Ok(GlobalDescriptor(g.value(d).data().to_vec()))
    }

    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.push("embed.config".into(), self.config.fingerprint())?;
        self.params.export(ckpt)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.export(&mut ckpt)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(config: EmbedConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let stored = ckpt
            .get("embed.config")
            .ok_or_else(|| Error::usage("checkpoint has no embedding section"))?;
        if *stored != net.config.fingerprint() {
            return Err(Error::usage("checkpoint was written with a different embedding configuration"));
        }
        net.params.import(ckpt)?;
        Ok(net)
    }
}

/// Encode, select and fuse, aggregate: the full cloud-to-descriptor path.
pub fn describe(encoder: &Encoder, embed: &EmbeddingNet, cloud: &RgbPointCloud) -> Result<GlobalDescriptor> {
    embed.describe_pyramid(&encoder.encode(cloud)?)
}

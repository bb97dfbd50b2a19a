use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pointcloud::RgbPointCloud;
use crate::semantic::encoder::INPUT_CHANNELS;
use crate::semantic::{
    CloudGeometry, Encoder, EncoderConfig, EncoderTrace, Mode, Retain, RunningStats, LEAKY_SLOPE, LEVELS, NORM_EPS,
};
use crate::tensor::Tensor;

/// Per-stage batch mean and variance observed in a training pass.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

#[derive(Clone, Debug)]
struct Stage {
    weights: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: RunningStats,
}

/// Per-point class logits in the cloud's original order.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub logits: Tensor,
    pub labels: Vec<u8>,
}

impl SegmentationOutput {
    fn from_logits(logits: Tensor) -> Self {
        let labels = (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect();
        Self { logits, labels }
    }
}

/// Nearest-neighbor upsampling from level 5 back to the input points, with a
/// skip concatenation and unary layer at every step, then a linear head.
#[derive(Clone, Debug)]
pub struct Decoder {
    params: ParamStore,
    /// Stage `s` produces features for level `LEVELS - 1 - s` (0 = input).
    stages: Vec<Stage>,
    head_weights: ParamId,
    head_bias: ParamId,
}

fn stage_name(s: usize, what: &str) -> String {
    format!("decoder.up{}.{what}", s + 1)
}

impl Decoder {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = config.widths();
        let mut stages = Vec::with_capacity(LEVELS);
        let mut current = widths[LEVELS - 1];
        for s in 0..LEVELS {
            let target = LEVELS - 1 - s;
            let (skip, out) = if target == 0 {
                (INPUT_CHANNELS, widths[0])
            } else {
                (widths[target - 1], widths[target - 1])
            };
            let cin = current + skip;
            let weights = params.add_normal(&stage_name(s, "weights"), &[cin, out], (2.0 / cin as f64).sqrt(), &mut rng)?;
            let gamma = params.add(stage_name(s, "gamma"), Tensor::full(&[out], 1.0))?;
            let beta = params.add(stage_name(s, "beta"), Tensor::zeros(&[out]))?;
            stages.push(Stage { weights, gamma, beta, stats: RunningStats::new(out) });
            current = out;
        }
        let head_weights = params.add_normal("decoder.head.weights", &[current, config.classes], 0.01, &mut rng)?;
        let head_bias = params.add("decoder.head.bias", Tensor::zeros(&[config.classes]))?;
        params.round_to_f32();
        Ok(Self { params, stages, head_weights, head_bias })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Logits for every input point in canonical order, plus the batch
    /// statistics observed in [`Mode::Train`].
    pub fn forward(
        &self,
        g: &mut Graph,
        trace: &EncoderTrace,
        geo: &CloudGeometry,
        mode: Mode,
    ) -> Result<(Var, BatchStats)> {
        if trace.input_len != geo.input_len() {
            return Err(Error::usage("encoder trace belongs to a different cloud"));
        }
        let missing = || Error::usage("decoding needs every encoder level; the trace kept only the taps");
        let mut x = trace.output(LEVELS).ok_or_else(missing)?;
        let mut observed = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let target = LEVELS - 1 - s;
            let up = g.gather(x, &geo.upsample[target])?;
            let skip = if target == 0 {
                g.constant(geo.features.clone())
            } else {
                trace.output(target).ok_or_else(missing)?
            };
            let cat = g.concat(&[up, skip], 1)?;
            let w = g.param(&self.params, stage.weights);
            let lin = g.matmul(cat, w)?;
            let gamma = g.param(&self.params, stage.gamma);
            let beta = g.param(&self.params, stage.beta);
            let normed = match mode {
                Mode::Train => {
                    let (out, mean, var) = g.normalize_batch(lin, gamma, beta, NORM_EPS)?;
                    observed.push((mean, var));
                    out
                }
                Mode::Inference => g.normalize_frozen(lin, gamma, beta, &stage.stats.mean, &stage.stats.var, NORM_EPS)?,
            };
            x = g.leaky_relu(normed, LEAKY_SLOPE)?;
        }
        let w = g.param(&self.params, self.head_weights);
        let b = g.param(&self.params, self.head_bias);
        let lin = g.matmul(x, w)?;
        Ok((g.add_bias(lin, b)?, observed))
    }

    pub fn absorb(&mut self, observed: &[(Vec<f64>, Vec<f64>)]) {
        for (stage, (mean, var)) in self.stages.iter_mut().zip(observed) {
            stage.stats.absorb(mean, var);
        }
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for s in &mut self.stages {
            s.stats.round_to_f32();
        }
    }

    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.params.export(ckpt)?;
        for (s, stage) in self.stages.iter().enumerate() {
            let (mean, var) = stage.stats.to_tensors();
            ckpt.push(stage_name(s, "running_mean"), mean)?;
            ckpt.push(stage_name(s, "running_var"), var)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(config: &EncoderConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut dec = Self::new(config, 0)?;
        dec.params.import(ckpt)?;
        for (s, stage) in dec.stages.iter_mut().enumerate() {
            let c = stage.stats.mean.len();
            let read = |what: &str| -> Result<Vec<f64>> {
                let t = ckpt
                    .get(&stage_name(s, what))
                    .ok_or_else(|| Error::usage(format!("checkpoint lacks {}", stage_name(s, what))))?;
                if t.len() != c {
                    return Err(Error::dim(format!("{} has {} values, expected {c}", stage_name(s, what), t.len())));
                }
                Ok(t.data().to_vec())
            };
            stage.stats = RunningStats { mean: read("running_mean")?, var: read("running_var")? };
        }
        Ok(dec)
    }
}

/// Encoder plus decoder: the stage-1 segmentation network.
#[derive(Clone, Debug)]
pub struct SemanticNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SemanticNet {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let decoder = Decoder::new(&config, seed.wrapping_add(1))?;
        Ok(Self { encoder: Encoder::new(config, seed)?, decoder })
    }

    /// Canonical-order logits on `g`.
    pub fn forward(&self, g: &mut Graph, geo: &CloudGeometry, mode: Mode) -> Result<(Var, EncoderTrace, BatchStats)> {
        let trace = self.encoder.forward(g, geo, mode, Retain::All)?;
        let (logits, observed) = self.decoder.forward(g, &trace, geo, mode)?;
        Ok((logits, trace, observed))
    }

    pub fn segment_prepared(&self, geo: &CloudGeometry) -> Result<SegmentationOutput> {
        let mut g = Graph::new();
        let (logits, _, _) = self.forward(&mut g, geo, Mode::Inference)?;
        let mut inverse = vec![0; geo.order.len()];
        for (c, &o) in geo.order.iter().enumerate() {
            inverse[o] = c;
        }
        let original = g.gather(logits, &inverse)?;
        Ok(SegmentationOutput::from_logits(g.value(original).clone()))
    }

    /// Inference-mode segmentation of a cloud.
    pub fn segment(&self, cloud: &RgbPointCloud) -> Result<SegmentationOutput> {
        self.segment_prepared(&self.encoder.prepare(cloud)?)
    }

    pub fn round_to_f32(&mut self) {
        self.encoder.round_to_f32();
        self.decoder.round_to_f32();
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.encoder.export(&mut ckpt)?;
        self.decoder.export(&mut ckpt)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(config: EncoderConfig, ckpt: &Checkpoint) -> Result<Self> {
        let decoder = Decoder::from_checkpoint(&config, ckpt)?;
        Ok(Self { encoder: Encoder::from_checkpoint(config, ckpt)?, decoder })
    }
}

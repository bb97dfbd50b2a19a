use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CorrelationPlan, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pointcloud::{
    correlation_plan, nearest_neighbors, radius_neighbors, subsample_positions, KernelDisposition, Point,
    RgbPointCloud, UNLABELED,
};
use crate::semantic::{
    EncoderConfig, FeaturePyramid, Mode, PyramidLevel, RunningStats, LEAKY_SLOPE, LEVELS, NORM_EPS, TAP_LEVELS,
};
use crate::tensor::Tensor;

/// Input channels: RGB plus a constant one.
pub(crate) const INPUT_CHANNELS: usize = 4;

/// Everything about a cloud the encoder and decoder need that does not
/// depend on the weights: canonical ordering, per-level points, correlation
/// plans and upsampling indices. Computing it once per cloud lets training
/// reuse it every epoch.
#[derive(Clone, Debug)]
pub struct CloudGeometry {
    /// `order[c]` is the original index of canonical point `c`.
    pub(crate) order: Vec<usize>,
    /// Input points (canonical order) followed by the points of each level.
    pub(crate) points: Vec<Vec<Point>>,
    pub(crate) plans: Vec<Arc<CorrelationPlan>>,
    /// `upsample[j][p]` is the nearest point of level `j + 1` to point `p`
    /// of level `j` (level 0 being the input).
    pub(crate) upsample: Vec<Vec<usize>>,
    pub(crate) features: Tensor,
    /// Canonical-order labels, `UNLABELED` where absent.
    pub(crate) labels: Vec<usize>,
}

impl CloudGeometry {
    pub fn input_len(&self) -> usize {
        self.order.len()
    }

    /// Point count of every encoder level, level 1 first.
    pub fn level_sizes(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.points[i + 1].len())
    }

    pub fn level_points(&self, level: usize) -> &[Point] {
        &self.points[level]
    }

    /// Labels in original point order.
    pub fn labels_original(&self) -> Vec<usize> {
        let mut out = vec![UNLABELED as usize; self.order.len()];
        for (c, &o) in self.order.iter().enumerate() {
            out[o] = self.labels[c];
        }
        out
    }
}

/// Which intermediate outputs a forward pass keeps for later use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retain {
    /// Outputs of all five blocks, as the decoder needs.
    All,
    /// Only the tapped levels.
    Taps,
}

/// Result of an encoder forward pass on a graph.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Output of every block (`None` for untapped blocks under [`Retain::Taps`]).
    pub(crate) outputs: Vec<Option<Var>>,
    /// Batch statistics observed per block in [`Mode::Train`].
    pub(crate) observed: Vec<(Vec<f64>, Vec<f64>)>,
    pub(crate) input_len: usize,
}

impl EncoderTrace {
    /// Output of block `level` (1-based) if it was retained.
    pub fn output(&self, level: usize) -> Option<Var> {
        self.outputs.get(level.checked_sub(1)?).copied().flatten()
    }

    pub fn tap(&self, level: usize) -> Result<Var> {
        if !TAP_LEVELS.contains(&level) {
            return Err(Error::usage(format!("level {level} is not a tapped level")));
        }
        self.output(level)
            .ok_or_else(|| Error::usage(format!("level {level} output was not retained")))
    }
}

#[derive(Clone, Debug)]
struct Block {
    weights: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: RunningStats,
}

/// Five strided KP-Conv blocks: subsample, gather neighbors, convolve,
/// normalize, leaky ReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    blocks: Vec<Block>,
    kernels: Vec<KernelDisposition>,
}

fn block_name(i: usize, what: &str) -> String {
    format!("encoder.block{}.{what}", i + 1)
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut kernels = Vec::with_capacity(LEVELS);
        let widths = config.widths();
        let k = config.kernel_points;
        for i in 0..LEVELS {
            let cin = if i == 0 { INPUT_CHANNELS } else { widths[i - 1] };
            let cout = widths[i];
            let std = (2.0 / (k * cin) as f64).sqrt();
            let weights = params.add_normal(&block_name(i, "weights"), &[k, cin, cout], std, &mut rng)?;
            let gamma = params.add(block_name(i, "gamma"), Tensor::full(&[cout], 1.0))?;
            let beta = params.add(block_name(i, "beta"), Tensor::zeros(&[cout]))?;
            blocks.push(Block { weights, gamma, beta, stats: RunningStats::new(cout) });
            let cell = config.cells[i];
            let raw = KernelDisposition::generate(k, 1.5 * cell, cell, seed ^ (0x9e37_79b9 + i as u64))?;
            let offsets = raw.offsets().iter().map(|p| p.map(|v| v as f32 as f64)).collect();
            kernels.push(KernelDisposition::new(offsets, cell)?);
        }
        params.round_to_f32();
        Ok(Self { config, params, blocks, kernels })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn kernel(&self, level: usize) -> &KernelDisposition {
        &self.kernels[level - 1]
    }

    pub fn running_stats(&self, level: usize) -> &RunningStats {
        &self.blocks[level - 1].stats
    }

    /// Canonicalize the cloud and precompute every level's points,
    /// neighborhoods and correlation plans.
    pub fn prepare(&self, cloud: &RgbPointCloud) -> Result<CloudGeometry> {
        if cloud.is_empty() {
            return Err(Error::DegenerateInput("level 1 would have zero points: empty cloud".into()));
        }
        let order = cloud.canonical_order();
        let input: Vec<Point> = order.iter().map(|&i| cloud.positions()[i]).collect();
        let mut feats = Vec::with_capacity(order.len() * INPUT_CHANNELS);
        for &i in &order {
            feats.extend_from_slice(&cloud.colors()[i]);
            feats.push(1.0);
        }
        let labels = order.iter().map(|&i| cloud.labels()[i] as usize).collect();
        let mut points = vec![input];
        let mut plans = Vec::with_capacity(LEVELS);
        let mut upsample = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let prev = &points[i];
            let next = subsample_positions(prev, self.config.cells[i])?;
            if next.is_empty() {
                return Err(Error::DegenerateInput(format!("level {} has zero points", i + 1)));
            }
            let nb = radius_neighbors(&next, prev, self.config.radii[i], self.config.capacity)?;
            plans.push(Arc::new(correlation_plan(&next, prev, &nb, &self.kernels[i])?));
            upsample.push(nearest_neighbors(prev, &next, self.config.cells[i])?);
            points.push(next);
        }
        Ok(CloudGeometry {
            order,
            points,
            plans,
            upsample,
            features: Tensor::new(vec![cloud.len(), INPUT_CHANNELS], feats)?,
            labels,
        })
    }

    /// Run all blocks on `g`. Parameters are bound trainable; a caller that
    /// never accumulates gradients simply leaves them untouched.
    pub fn forward(&self, g: &mut Graph, geo: &CloudGeometry, mode: Mode, retain: Retain) -> Result<EncoderTrace> {
        let mut x = g.constant(geo.features.clone());
        let mut outputs = Vec::with_capacity(LEVELS);
        let mut observed = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let w = g.param(&self.params, block.weights);
            let ws = g.shape(w).to_vec();
            let agg = g.correlate(x, geo.plans[i].clone())?;
            let w2 = g.reshape(w, &[ws[0] * ws[1], ws[2]])?;
            let conv = g.matmul(agg, w2)?;
            let gamma = g.param(&self.params, block.gamma);
            let beta = g.param(&self.params, block.beta);
            let normed = match mode {
                Mode::Train => {
                    let (out, mean, var) = g.normalize_batch(conv, gamma, beta, NORM_EPS)?;
                    observed.push((mean, var));
                    out
                }
                Mode::Inference => g.normalize_frozen(conv, gamma, beta, &block.stats.mean, &block.stats.var, NORM_EPS)?,
            };
            x = g.leaky_relu(normed, LEAKY_SLOPE)?;
            let keep = retain == Retain::All || TAP_LEVELS.contains(&(i + 1));
            outputs.push(keep.then_some(x));
        }
        Ok(EncoderTrace { outputs, observed, input_len: geo.input_len() })
    }

    /// Inference-mode feature pyramid of a prepared cloud.
    pub fn pyramid(&self, geo: &CloudGeometry) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, geo, Mode::Inference, Retain::Taps)?;
        let level = |l: usize| -> Result<PyramidLevel> {
            Ok(PyramidLevel {
                level: l,
                points: geo.points[l].clone(),
                features: g.value(trace.tap(l)?).clone(),
            })
        };
        Ok(FeaturePyramid { levels: [level(2)?, level(4)?, level(5)?] })
    }

    pub fn encode(&self, cloud: &RgbPointCloud) -> Result<FeaturePyramid> {
        self.pyramid(&self.prepare(cloud)?)
    }

    /// Fold batch statistics from a training pass into the running statistics.
    pub fn absorb(&mut self, trace: &EncoderTrace) {
        for (block, (mean, var)) in self.blocks.iter_mut().zip(&trace.observed) {
            block.stats.absorb(mean, var);
        }
    }

    /// Round weights and statistics to checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for b in &mut self.blocks {
            b.stats.round_to_f32();
        }
    }

    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.push("encoder.config".into(), self.config.fingerprint())?;
        self.params.export(ckpt)?;
        for (i, (b, k)) in self.blocks.iter().zip(&self.kernels).enumerate() {
            let (mean, var) = b.stats.to_tensors();
            ckpt.push(block_name(i, "running_mean"), mean)?;
            ckpt.push(block_name(i, "running_var"), var)?;
            let offsets = k.offsets().iter().flatten().copied().collect();
            ckpt.push(block_name(i, "kernel"), Tensor::new(vec![k.len(), 3], offsets)?)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(config: EncoderConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        let stored = ckpt
            .get("encoder.config")
            .ok_or_else(|| Error::usage("checkpoint has no encoder section"))?;
        if *stored != enc.config.fingerprint() {
            return Err(Error::usage("checkpoint was written with a different encoder configuration"));
        }
        enc.params.import(ckpt)?;
        let get = |name: String| {
            ckpt.get(&name)
                .ok_or_else(|| Error::usage(format!("checkpoint lacks {name}")))
        };
        for i in 0..LEVELS {
            let c = enc.config.widths()[i];
            let mean = get(block_name(i, "running_mean"))?;
            let var = get(block_name(i, "running_var"))?;
            if mean.len() != c || var.len() != c {
                return Err(Error::dim(format!("running statistics of block {} have wrong size", i + 1)));
            }
            enc.blocks[i].stats = RunningStats { mean: mean.data().to_vec(), var: var.data().to_vec() };
            let kt = get(block_name(i, "kernel"))?;
            if kt.shape() != [enc.config.kernel_points, 3] {
                return Err(Error::dim(format!("kernel of block {} has shape {:?}", i + 1, kt.shape())));
            }
            let offsets = kt.data().chunks(3).map(|p| [p[0], p[1], p[2]]).collect();
            enc.kernels[i] = KernelDisposition::new(offsets, enc.config.cells[i])?;
        }
        Ok(enc)
    }
}

//! KP-Conv semantic encoder, nearest-upsampling decoder and the stage-1
//! segmentation trainer.

mod decoder;
mod encoder;
mod train;

pub use decoder::{Decoder, SegmentationOutput, SemanticNet};
pub use encoder::{CloudGeometry, Encoder, EncoderTrace, Retain};
pub use train::{train_stage1, Stage1Config, Stage1Epoch};

use crate::error::{Error, Result};
use crate::pointcloud::Point;
use crate::tensor::Tensor;

/// Number of strided convolution blocks in the encoder.
pub const LEVELS: usize = 5;
/// Encoder blocks whose outputs feed the embedding.
pub const TAP_LEVELS: [usize; 3] = [2, 4, 5];

pub(crate) const LEAKY_SLOPE: f64 = 0.1;
pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const NORM_MOMENTUM: f64 = 0.98;

/// Whether normalization layers use batch statistics (and report them) or
/// their frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Channel width of the first block; block `i` has `width · 2^(i-1)`.
    pub width: usize,
    /// Subsampling cell per block, meters.
    pub cells: [f64; LEVELS],
    /// Neighborhood radius per block, meters.
    pub radii: [f64; LEVELS],
    pub classes: usize,
    pub kernel_points: usize,
    /// Maximum neighbors per query point.
    pub capacity: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_base_cell(0.04)
    }
}

impl EncoderConfig {
    /// Cells doubling from `cell`, radii 2.5× the cell.
    pub fn with_base_cell(cell: f64) -> Self {
        let cells = std::array::from_fn(|i| cell * f64::from(1u32 << i));
        Self {
            width: 16,
            cells,
            radii: cells.map(|c| 2.5 * c),
            classes: 8,
            kernel_points: 15,
            capacity: 26,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 {
            return bad("encoder width must be positive".into());
        }
        if !(2..255).contains(&self.classes) {
            return bad(format!("class count must be in [2, 255), got {}", self.classes));
        }
        if self.kernel_points < 2 {
            return bad(format!("kernel point count must be at least 2, got {}", self.kernel_points));
        }
        if self.capacity == 0 {
            return bad("neighbor capacity must be positive".into());
        }
        for i in 0..LEVELS {
            let (c, r) = (self.cells[i], self.radii[i]);
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("cell size of level {} must be positive, got {c}", i + 1));
            }
            if i > 0 && c <= self.cells[i - 1] {
                return bad("cell sizes must be strictly increasing".into());
            }
            if !(r >= c && r.is_finite()) {
                return bad(format!("radius of level {} ({r}) is smaller than its cell ({c})", i + 1));
            }
        }
        Ok(())
    }

    /// Output channels of every block.
    pub fn widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.width << i)
    }

    /// Values recorded in checkpoints so a mismatched config is caught on load.
    pub(crate) fn fingerprint(&self) -> Tensor {
        let mut v = vec![
            self.width as f64,
            self.classes as f64,
            self.kernel_points as f64,
            self.capacity as f64,
        ];
        v.extend(self.cells);
        v.extend(self.radii);
        let mut t = Tensor::vector(v).expect("non-empty");
        t.round_to_f32();
        t
    }
}

/// Per-channel running statistics of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub(crate) fn absorb(&mut self, mean: &[f64], var: &[f64]) {
        let m = NORM_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    pub(crate) fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.var.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub(crate) fn to_tensors(&self) -> (Tensor, Tensor) {
        (
            Tensor::vector(self.mean.clone()).expect("non-empty"),
            Tensor::vector(self.var.clone()).expect("non-empty"),
        )
    }
}

/// One tapped encoder level: its points and the feature row of each point.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub level: usize,
    pub points: Vec<Point>,
    pub features: Tensor,
}

/// Encoder outputs after blocks 2, 4 and 5.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [PyramidLevel; 3],
}

impl FeaturePyramid {
    pub fn level(&self, level: usize) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn total_points(&self) -> usize {
        self.levels.iter().map(|l| l.points.len()).sum()
    }
}


#[cfg(test)]
mod net_tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::pointcloud::RgbPointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            width: 4,
            kernel_points: 5,
            capacity: 8,
            classes: 3,
            ..EncoderConfig::with_base_cell(0.1)
        }
    }

    /// Points in a unit cube; the class follows the dominant color channel.
    fn cloud(n: usize, seed: u64) -> RgbPointCloud {
        scaled_cloud(n, seed, 1.0)
    }

    fn scaled_cloud(n: usize, seed: u64, scale: f64) -> RgbPointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = Vec::new();
        let mut col = Vec::new();
        let mut lab = Vec::new();
        for _ in 0..n {
            pos.push([r.random::<f64>(), r.random::<f64>(), r.random::<f64>()].map(|v| v * scale));
            let class = r.random_range(0..3u8);
            let mut c = [r.random_range(0.0..0.3), r.random_range(0.0..0.3), r.random_range(0.0..0.3)];
            c[class as usize] = r.random_range(0.7..1.0);
            col.push(c);
            lab.push(class);
        }
        RgbPointCloud::new(pos, col, Some(lab)).unwrap()
    }

    #[test]
    fn single_point_runs_through_every_level() {
        let net = SemanticNet::new(small_config(), 1).unwrap();
        let c = RgbPointCloud::new(vec![[0.3, 0.2, 0.1]], vec![[0.5, 0.5, 0.5]], None).unwrap();
        let geo = net.encoder.prepare(&c).unwrap();
        assert_eq!(geo.level_sizes(), [1; LEVELS]);
        let p = net.encoder.pyramid(&geo).unwrap();
        assert_eq!(p.total_points(), 3);
        let seg = net.segment(&c).unwrap();
        assert_eq!(seg.logits.shape(), &[1, 3]);
    }

    #[test]
    fn empty_cloud_is_degenerate() {
        let net = SemanticNet::new(small_config(), 1).unwrap();
        let c = RgbPointCloud::new(vec![], vec![], None).unwrap();
        assert!(matches!(net.encoder.prepare(&c), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn pyramid_shapes_and_taps() {
        let cfg = small_config();
        let net = SemanticNet::new(cfg.clone(), 2).unwrap();
        let c = cloud(400, 3);
        let geo = net.encoder.prepare(&c).unwrap();
        let sizes = geo.level_sizes();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        let p = net.encoder.encode(&c).unwrap();
        let w = cfg.widths();
        for (lvl, tap) in p.levels.iter().zip(TAP_LEVELS) {
            assert_eq!(lvl.level, tap);
            assert_eq!(lvl.features.shape(), &[sizes[tap - 1], w[tap - 1]]);
            assert_eq!(lvl.points.len(), sizes[tap - 1]);
        }
        // the level-5 tap is the encoder's final output
        let mut g = Graph::new();
        let trace = net.encoder.forward(&mut g, &geo, Mode::Inference, Retain::All).unwrap();
        assert_eq!(g.value(trace.output(LEVELS).unwrap()), &p.level(5).unwrap().features);
        let seg = net.segment(&c).unwrap();
        assert_eq!(seg.logits.shape(), &[400, 3]);
        for i in 0..400 {
            let row = seg.logits.row(i);
            assert!(row.iter().all(|&v| v <= row[seg.labels[i] as usize]));
        }
    }

    #[test]
    fn permuted_cloud_gives_identical_outputs() {
        let net = SemanticNet::new(small_config(), 4).unwrap();
        let c = cloud(300, 5);
        let mut order: Vec<usize> = (0..300).collect();
        order.reverse();
        order.swap(3, 100);
        let pc = c.permuted(&order);
        assert_eq!(net.encoder.encode(&c).unwrap(), net.encoder.encode(&pc).unwrap());
        let a = net.segment(&c).unwrap();
        let b = net.segment(&pc).unwrap();
        for (i, &o) in order.iter().enumerate() {
            assert_eq!(b.logits.row(i), a.logits.row(o));
        }
    }

    #[test]
    fn decoding_a_taps_only_trace_is_a_usage_error() {
        let net = SemanticNet::new(small_config(), 1).unwrap();
        let geo = net.encoder.prepare(&cloud(50, 1)).unwrap();
        let mut g = Graph::new();
        let trace = net.encoder.forward(&mut g, &geo, Mode::Inference, Retain::Taps).unwrap();
        assert!(trace.output(1).is_none());
        let r = net.decoder.forward(&mut g, &trace, &geo, Mode::Inference);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // large enough that the coarsest level holds several points, so batch
        // normalization does not erase the signal
        let net = SemanticNet::new(small_config(), 6).unwrap();
        let c = scaled_cloud(600, 7, 5.0);
        let geo = net.encoder.prepare(&c).unwrap();
        let mut g = Graph::new();
        let (logits, _, _) = net.forward(&mut g, &geo, Mode::Train).unwrap();
        let loss = g.cross_entropy(logits, &geo.labels, 255).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut enc = net.encoder.params().clone();
        let mut dec = net.decoder.params().clone();
        enc.accumulate(&g, &grads);
        dec.accumulate(&g, &grads);
        for p in enc.iter().chain(dec.iter()) {
            assert!(p.grad.data().iter().any(|&v| v != 0.0), "{} has zero gradient", p.name);
        }
    }

    #[test]
    fn initial_loss_is_near_uniform_and_training_reduces_it() {
        let mut net = SemanticNet::new(small_config(), 8).unwrap();
        let clouds: Vec<_> = (0..3).map(|s| cloud(200, 10 + s)).collect();
        let cfg = Stage1Config { epochs: 5, seed: 1, ..Stage1Config::default() };
        let hist = train_stage1(&mut net, &clouds, &cfg, |_| {}).unwrap();
        let ln_c = 3f64.ln();
        // first epoch mean already includes some learning; bound it loosely
        assert!((hist[0].loss - ln_c).abs() < 0.1 * ln_c, "{:?}", hist[0]);
        for w in hist.windows(2) {
            assert!(w[1].loss < w[0].loss, "{hist:?}");
        }
    }

    #[test]
    fn unlabeled_dataset_is_rejected() {
        let mut net = SemanticNet::new(small_config(), 8).unwrap();
        let c = RgbPointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]], None).unwrap();
        let r = train_stage1(&mut net, &[c], &Stage1Config::default(), |_| {});
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_reload_is_bit_identical() {
        let mut net = SemanticNet::new(small_config(), 9).unwrap();
        let clouds = vec![cloud(150, 20)];
        let cfg = Stage1Config { epochs: 2, ..Stage1Config::default() };
        train_stage1(&mut net, &clouds, &cfg, |_| {}).unwrap();
        let bytes = net.to_checkpoint().unwrap().to_bytes().unwrap();
        let ckpt = crate::Checkpoint::from_bytes(&bytes).unwrap();
        let back = SemanticNet::from_checkpoint(small_config(), &ckpt).unwrap();
        let probe = cloud(120, 21);
        assert_eq!(net.segment(&probe).unwrap(), back.segment(&probe).unwrap());
        assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
        let other = EncoderConfig { width: 8, ..small_config() };
        assert!(SemanticNet::from_checkpoint(other, &ckpt).is_err());
    }
}

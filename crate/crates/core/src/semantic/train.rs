use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pointcloud::{RgbPointCloud, UNLABELED};
use crate::semantic::{CloudGeometry, Mode, SemanticNet};

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-2,
            lr_decay: 0.1f64.powf(1.0 / 100.0),
            momentum: 0.98,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

/// Mean loss and labeled-point accuracy of one epoch, measured on the
/// training passes themselves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for Stage1Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6},{:.6}", self.epoch, self.loss, self.accuracy)
    }
}

/// Train encoder and decoder on per-point cross-entropy, one cloud per step.
/// Unlabeled points are ignored. Weights are rounded to checkpoint precision
/// at the end.
pub fn train_stage1(
    net: &mut SemanticNet,
    clouds: &[RgbPointCloud],
    cfg: &Stage1Config,
    mut on_epoch: impl FnMut(&Stage1Epoch),
) -> Result<Vec<Stage1Epoch>> {
    if clouds.is_empty() {
        return Err(Error::usage("stage-1 training needs at least one cloud"));
    }
    let classes = net.encoder.config().classes;
    for (i, c) in clouds.iter().enumerate() {
        if !c.has_labels() {
            return Err(Error::usage(format!("cloud {i} carries no labels")));
        }
        c.validate_labels(classes)?;
    }
    let geos = clouds
        .iter()
        .map(|c| net.encoder.prepare(c))
        .collect::<Result<Vec<CloudGeometry>>>()?;
    let kind = OptimizerKind::SgdMomentum { momentum: cfg.momentum };
    let mut enc_opt = Optimizer::new(kind, cfg.lr, cfg.lr_decay, cfg.weight_decay, net.encoder.params());
    let mut dec_opt = Optimizer::new(kind, cfg.lr, cfg.lr_decay, cfg.weight_decay, net.decoder.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..geos.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut labeled) = (0.0, 0usize, 0usize);
        for &i in &order {
            let geo = &geos[i];
            let mut g = Graph::new();
            let (logits, trace, observed) = net.forward(&mut g, geo, Mode::Train)?;
            let loss = g.cross_entropy(logits, &geo.labels, UNLABELED as usize)?;
            let grads = g.backward(loss)?;
            loss_sum += g.scalar(loss);
            let lv = g.value(logits);
            for (r, &l) in geo.labels.iter().enumerate() {
                if l == UNLABELED as usize {
                    continue;
                }
                let row = lv.row(r);
                let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(arg == l);
                labeled += 1;
            }
            net.encoder.params_mut().zero_grads();
            net.decoder.params_mut().zero_grads();
            net.encoder.params_mut().accumulate(&g, &grads);
            net.decoder.params_mut().accumulate(&g, &grads);
            enc_opt.step(net.encoder.params_mut());
            dec_opt.step(net.decoder.params_mut());
            net.encoder.absorb(&trace);
            net.decoder.absorb(&observed);
        }
        enc_opt.end_epoch();
        dec_opt.end_epoch();
        let stats = Stage1Epoch {
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: correct as f64 / labeled.max(1) as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    net.round_to_f32();
    Ok(history)
}

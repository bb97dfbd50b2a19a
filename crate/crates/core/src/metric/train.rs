use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Graph, Var};
use crate::embed::EmbeddingNet;
use crate::error::{Error, Result};
use crate::metric::{lazy_quadruplet_graph, mine_tuple, Margins, PlaceRecord, Thresholds};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pointcloud::RgbPointCloud;
use crate::semantic::{Encoder, FeaturePyramid};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub margins: Margins,
    pub thresholds: Thresholds,
    pub positives: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Worker threads for descriptor passes; results do not depend on it.
    pub threads: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            lr_decay: 0.95,
            weight_decay: 1e-3,
            margins: Margins::default(),
            thresholds: Thresholds::default(),
            positives: 2,
            negatives: 6,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of hinge terms (two per tuple) that were positive.
    pub active_hinge_rate: f64,
    pub tuples: usize,
}

impl fmt::Display for Stage2Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6},{:.6}", self.epoch, self.mean_loss, self.active_hinge_rate)
    }
}

/// Inference-mode pyramids of every cloud, computed once; the encoder is
/// only read.
pub fn precompute_pyramids(encoder: &Encoder, clouds: &[RgbPointCloud], threads: usize) -> Result<Vec<FeaturePyramid>> {
    pool(threads)?.install(|| clouds.par_iter().map(|c| encoder.encode(c)).collect())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker threads: {e}")))
}

/// Train the embedding on mined tuples, one tuple per optimizer step.
/// Anchors that cannot be mined are skipped. The encoder is borrowed
/// immutably, so its weights cannot change.
pub fn train_stage2(
    encoder: &Encoder,
    embed: &mut EmbeddingNet,
    records: &[PlaceRecord],
    clouds: &[RgbPointCloud],
    cfg: &Stage2Config,
    on_epoch: impl FnMut(&Stage2Epoch, &EmbeddingNet),
) -> Result<Vec<Stage2Epoch>> {
    if records.len() != clouds.len() {
        return Err(Error::usage(format!("{} records for {} clouds", records.len(), clouds.len())));
    }
    let pyramids = precompute_pyramids(encoder, clouds, cfg.threads)?;
    train_stage2_pyramids(embed, records, &pyramids, cfg, on_epoch)
}

/// [`train_stage2`] on pyramids that were already computed.
pub fn train_stage2_pyramids(
    embed: &mut EmbeddingNet,
    records: &[PlaceRecord],
    pyramids: &[FeaturePyramid],
    cfg: &Stage2Config,
    mut on_epoch: impl FnMut(&Stage2Epoch, &EmbeddingNet),
) -> Result<Vec<Stage2Epoch>> {
    if records.len() != pyramids.len() {
        return Err(Error::usage(format!("{} records for {} pyramids", records.len(), pyramids.len())));
    }
    let workers = pool(cfg.threads)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr, cfg.lr_decay, cfg.weight_decay, embed.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut anchors: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        anchors.shuffle(&mut rng);
        let (mut loss_sum, mut active, mut tuples) = (0.0, 0usize, 0usize);
        for &anchor in &anchors {
            let tuple = match mine_tuple(anchor, records, &cfg.thresholds, cfg.positives, cfg.negatives, &mut rng) {
                Ok(t) => t,
                Err(Error::Mining { .. }) => continue,
                Err(e) => return Err(e),
            };
            let members = tuple.members();
            let net: &EmbeddingNet = embed;
            let passes = workers.install(|| {
                members
                    .par_iter()
                    .map(|&m| {
                        let mut g = Graph::new();
                        let d = net.forward(&mut g, &pyramids[m])?;
                        Ok((g, d))
                    })
                    .collect::<Result<Vec<(Graph, Var)>>>()
            })?;
            let mut lg = Graph::new();
            let leaves: Vec<Var> = passes.iter().map(|(g, d)| lg.leaf(g.value(*d).clone())).collect();
            let np = cfg.positives;
            let q = lazy_quadruplet_graph(
                &mut lg,
                leaves[0],
                &leaves[1..1 + np],
                &leaves[1 + np..leaves.len() - 1],
                &leaves[leaves.len() - 1..],
                &cfg.margins,
            )?;
            let loss = lg.scalar(q.loss);
            loss_sum += loss;
            active += q.active.iter().filter(|&&a| a).count();
            tuples += 1;
            embed.params_mut().zero_grads();
            if loss > 0.0 {
                let lgrads = lg.backward(q.loss)?;
                let seeds: Vec<Option<Tensor>> = leaves.iter().map(|&l| lgrads.get(l).cloned()).collect();
                let grads = workers.install(|| {
                    passes
                        .par_iter()
                        .zip(&seeds)
                        .map(|((g, d), seed)| match seed {
                            Some(s) => g.backward_with(*d, s.clone()).map(Some),
                            None => Ok(None),
                        })
                        .collect::<Result<Vec<Option<Gradients>>>>()
                })?;
                for ((g, _), gr) in passes.iter().zip(&grads) {
                    if let Some(gr) = gr {
                        embed.params_mut().accumulate(g, gr);
                    }
                }
            }
            opt.step(embed.params_mut());
        }
        opt.end_epoch();
        let stats = Stage2Epoch {
            epoch,
            mean_loss: loss_sum / tuples.max(1) as f64,
            active_hinge_rate: active as f64 / (2 * tuples).max(1) as f64,
            tuples,
        };
        on_epoch(&stats, embed);
        history.push(stats);
    }
    embed.params_mut().round_to_f32();
    Ok(history)
}

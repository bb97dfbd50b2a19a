//! The two training stages and database construction wired to a [`RunConfig`].

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Keyframe, Split};
use crate::embed::{describe, EmbeddingNet, GlobalDescriptor};
use crate::error::{Error, Result};
use crate::metric::{train_stage2, Stage2Epoch};
use crate::retrieval::DescriptorDatabase;
use crate::semantic::{train_stage1, Encoder, SemanticNet, Stage1Epoch};

pub fn of_split(keyframes: &[Keyframe], split: Split) -> Vec<&Keyframe> {
    keyframes.iter().filter(|k| k.split == split).collect()
}

/// Serialized encoder weights, statistics and kernels.
pub fn encoder_bytes(encoder: &Encoder) -> Result<Vec<u8>> {
    let mut ckpt = Checkpoint::new();
    encoder.export(&mut ckpt)?;
    ckpt.to_bytes()
}

/// Stage 1 on the given keyframes.
pub fn train_segmentation(
    cfg: &RunConfig,
    keyframes: &[&Keyframe],
    on_epoch: impl FnMut(&Stage1Epoch),
) -> Result<(SemanticNet, Vec<Stage1Epoch>)> {
    let clouds: Vec<_> = keyframes.iter().map(|k| k.cloud.clone()).collect();
    let mut net = SemanticNet::new(cfg.encoder_config(), cfg.semantic_seed())?;
    let history = train_stage1(&mut net, &clouds, &cfg.stage1(), on_epoch)?;
    Ok((net, history))
}

/// Stage 2 on the given keyframes with the encoder frozen.
pub fn train_embedding(
    cfg: &RunConfig,
    encoder: &Encoder,
    keyframes: &[&Keyframe],
    on_epoch: impl FnMut(&Stage2Epoch, &EmbeddingNet),
) -> Result<(EmbeddingNet, Vec<Stage2Epoch>)> {
    let clouds: Vec<_> = keyframes.iter().map(|k| k.cloud.clone()).collect();
    let records: Vec<_> = keyframes.iter().map(|k| k.record.clone()).collect();
    let mut embed = EmbeddingNet::new(cfg.embed_config(), cfg.embed_seed())?;
    let history = train_stage2(encoder, &mut embed, &records, &clouds, &cfg.stage2(), on_epoch)?;
    Ok((embed, history))
}

/// Descriptors of every keyframe, computed on `threads` workers; the order
/// of the input is kept.
pub fn describe_all(
    encoder: &Encoder,
    embed: &EmbeddingNet,
    keyframes: &[&Keyframe],
    threads: usize,
) -> Result<Vec<GlobalDescriptor>> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker threads: {e}")))?
        .install(|| keyframes.par_iter().map(|k| describe(encoder, embed, &k.cloud)).collect())
}

pub fn build_database(
    encoder: &Encoder,
    embed: &EmbeddingNet,
    keyframes: &[&Keyframe],
    threads: usize,
) -> Result<DescriptorDatabase> {
    let descriptors = describe_all(encoder, embed, keyframes, threads)?;
    let mut db = DescriptorDatabase::new(embed.config().descriptor_dim);
    for (k, d) in keyframes.iter().zip(&descriptors) {
        db.insert(k.record.clone(), d)?;
    }
    Ok(db)
}

//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Keys missing from a file keep their defaults; unknown or repeated keys are
//! rejected. The hash covers the fully resolved configuration, so two runs
//! print the same hash exactly when every tunable agrees.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::{default_palette, SceneSpec};
use crate::embed::EmbedConfig;
use crate::error::{Error, Result};
use crate::metric::{Margins, Stage2Config, Thresholds};
use crate::semantic::{EncoderConfig, Stage1Config};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub rooms: usize,
    pub keyframes_per_room: usize,
    pub room_extent_min: f64,
    pub room_extent_max: f64,
    pub room_height: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub point_spacing: f64,
    pub view_radius: f64,
    pub camera_height: f64,
    pub trajectory: f64,
    pub dropout: f64,
    pub color_jitter: f64,
    pub val_rooms: usize,
    pub test_rooms: usize,

    pub width: usize,
    pub base_cell: f64,
    pub radius_factor: f64,
    pub kernel_points: usize,
    pub neighbor_capacity: usize,

    pub seg_epochs: usize,
    pub seg_lr: f64,
    pub seg_lr_decay: f64,
    pub seg_momentum: f64,
    pub seg_weight_decay: f64,

    pub heads: usize,
    pub common_dim: usize,
    pub clusters: usize,
    pub descriptor_dim: usize,
    pub attention: bool,

    pub embed_epochs: usize,
    pub embed_lr: f64,
    pub embed_lr_decay: f64,
    pub embed_weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub positives: usize,
    pub negatives: usize,

    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let enc = EncoderConfig::default();
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        let emb = EmbedConfig::for_encoder(&enc);
        Self {
            seed: 0,
            threads: 1,
            rooms: scene.rooms,
            keyframes_per_room: scene.keyframes_per_room,
            room_extent_min: scene.extent.0,
            room_extent_max: scene.extent.1,
            room_height: scene.height,
            objects_min: scene.objects.0,
            objects_max: scene.objects.1,
            point_spacing: scene.spacing,
            view_radius: scene.view_radius,
            camera_height: scene.camera_height,
            trajectory: scene.trajectory,
            dropout: scene.dropout,
            color_jitter: scene.color_jitter,
            val_rooms: scene.val_rooms,
            test_rooms: scene.test_rooms,
            width: enc.width,
            base_cell: enc.cells[0],
            radius_factor: enc.radii[0] / enc.cells[0],
            kernel_points: enc.kernel_points,
            neighbor_capacity: enc.capacity,
            seg_epochs: s1.epochs,
            seg_lr: s1.lr,
            seg_lr_decay: s1.lr_decay,
            seg_momentum: s1.momentum,
            seg_weight_decay: s1.weight_decay,
            heads: emb.heads,
            common_dim: emb.common_dim,
            clusters: emb.clusters,
            descriptor_dim: emb.descriptor_dim,
            attention: emb.attention,
            embed_epochs: s2.epochs,
            embed_lr: s2.lr,
            embed_lr_decay: s2.lr_decay,
            embed_weight_decay: s2.weight_decay,
            alpha: s2.margins.alpha,
            beta: s2.margins.beta,
            pos_threshold: s2.thresholds.positive,
            neg_threshold: s2.thresholds.negative,
            positives: s2.positives,
            negatives: s2.negatives,
            top_k: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        impl RunConfig {
            /// Every key in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.to_string())),*]
            }
        }
    };
}

fields!(
    seed,
    threads,
    rooms,
    keyframes_per_room,
    room_extent_min,
    room_extent_max,
    room_height,
    objects_min,
    objects_max,
    point_spacing,
    view_radius,
    camera_height,
    trajectory,
    dropout,
    color_jitter,
    val_rooms,
    test_rooms,
    width,
    base_cell,
    radius_factor,
    kernel_points,
    neighbor_capacity,
    seg_epochs,
    seg_lr,
    seg_lr_decay,
    seg_momentum,
    seg_weight_decay,
    heads,
    common_dim,
    clusters,
    descriptor_dim,
    attention,
    embed_epochs,
    embed_lr,
    embed_lr_decay,
    embed_weight_decay,
    alpha,
    beta,
    pos_threshold,
    neg_threshold,
    positives,
    negatives,
    top_k,
);

impl RunConfig {
    /// Coarser sampling and cells sized for a single-core desk run.
    pub fn desk() -> Self {
        Self {
            point_spacing: 0.15,
            base_cell: 0.2,
            ..Self::default()
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key {key:?} given twice", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        for (k, v) in [
            ("room_extent_min", self.room_extent_min),
            ("room_height", self.room_height),
            ("point_spacing", self.point_spacing),
            ("view_radius", self.view_radius),
            ("base_cell", self.base_cell),
            ("seg_lr", self.seg_lr),
            ("seg_lr_decay", self.seg_lr_decay),
            ("embed_lr", self.embed_lr),
            ("embed_lr_decay", self.embed_lr_decay),
            ("pos_threshold", self.pos_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive and finite, got {v}"));
            }
        }
        for (k, v) in [
            ("camera_height", self.camera_height),
            ("seg_weight_decay", self.seg_weight_decay),
            ("embed_weight_decay", self.embed_weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative and finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.seg_momentum) {
            return bad(format!("seg_momentum must be in [0, 1), got {}", self.seg_momentum));
        }
        if self.seg_lr * self.seg_weight_decay >= 1.0 || self.embed_lr * self.embed_weight_decay >= 1.0 {
            return bad("learning rate times weight decay must stay below 1".into());
        }
        if self.radius_factor < 1.0 || !self.radius_factor.is_finite() {
            return bad(format!("radius_factor must be at least 1, got {}", self.radius_factor));
        }
        if self.neg_threshold < self.pos_threshold || !self.neg_threshold.is_finite() {
            return bad("neg_threshold must not be below pos_threshold".into());
        }
        if self.seg_epochs == 0 || self.embed_epochs == 0 {
            return bad("epoch counts must be positive".into());
        }
        if self.positives == 0 || self.negatives == 0 {
            return bad("tuples need at least one positive and one negative".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        self.scene_spec().validate().map_err(|e| Error::Config(strip(e)))?;
        let enc = self.encoder_config();
        enc.validate()?;
        self.embed_config().validate().map_err(|e| Error::Config(strip(e)))
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            rooms: self.rooms,
            extent: (self.room_extent_min, self.room_extent_max),
            height: self.room_height,
            objects: (self.objects_min, self.objects_max),
            keyframes_per_room: self.keyframes_per_room,
            spacing: self.point_spacing,
            view_radius: self.view_radius,
            camera_height: self.camera_height,
            trajectory: self.trajectory,
            dropout: self.dropout,
            color_jitter: self.color_jitter,
            val_rooms: self.val_rooms,
            test_rooms: self.test_rooms,
            palette: default_palette(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut enc = EncoderConfig::with_base_cell(self.base_cell);
        enc.width = self.width;
        enc.radii = enc.cells.map(|c| c * self.radius_factor);
        enc.classes = default_palette().len();
        enc.kernel_points = self.kernel_points;
        enc.capacity = self.neighbor_capacity;
        enc
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            heads: self.heads,
            common_dim: self.common_dim,
            clusters: self.clusters,
            descriptor_dim: self.descriptor_dim,
            attention: self.attention,
            ..EmbedConfig::for_encoder(&self.encoder_config())
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds { positive: self.pos_threshold, negative: self.neg_threshold }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            epochs: self.seg_epochs,
            lr: self.seg_lr,
            lr_decay: self.seg_lr_decay,
            momentum: self.seg_momentum,
            weight_decay: self.seg_weight_decay,
            seed: self.derived_seed(1),
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            epochs: self.embed_epochs,
            lr: self.embed_lr,
            lr_decay: self.embed_lr_decay,
            weight_decay: self.embed_weight_decay,
            margins: Margins { alpha: self.alpha, beta: self.beta },
            thresholds: self.thresholds(),
            positives: self.positives,
            negatives: self.negatives,
            seed: self.derived_seed(2),
            threads: self.threads,
        }
    }

    /// Weight-initialization seed of the segmentation network.
    pub fn semantic_seed(&self) -> u64 {
        self.derived_seed(3)
    }

    /// Weight-initialization seed of the embedding network.
    pub fn embed_seed(&self) -> u64 {
        self.derived_seed(4)
    }

    fn derived_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
    }
}

/// Message of an error without its variant prefix, for re-wrapping.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Spec(m) | Error::Usage(m) | Error::Dimension(m) => m,
        other => other.to_string(),
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

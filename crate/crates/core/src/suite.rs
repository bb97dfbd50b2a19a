//! Finite-difference gradient checks over every operator and the composed
//! network blocks, on fresh random weights.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, CorrelationPlan, GradCheckReport, Graph, Var};
use crate::embed::{EmbedConfig, EmbeddingNet, NetVlad, SaConfig, SaLayer, VladConfig};
use crate::error::Result;
use crate::metric::{lazy_quadruplet_graph, Margins};
use crate::params::ParamStore;
use crate::pointcloud::{kp_conv, radius_neighbors, KernelDisposition, Point};
use crate::semantic::{FeaturePyramid, PyramidLevel, TAP_LEVELS};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

fn random_points(n: usize, r: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n).map(|_| std::array::from_fn(|_| r.random_range(-0.5..0.5))).collect()
}

/// Contract a tensor output with fixed random weights to get a scalar whose
/// gradient reaches every output entry.
fn contract(g: &mut Graph, y: Var, t: &Tensor) -> Result<Var> {
    let tv = g.constant(t.clone());
    let p = g.mul(y, tv)?;
    g.sum(p)
}

fn check(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(store, build, STEP, TOLERANCE, usize::MAX)
}

fn operators(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let x = s.add_normal("x", &[4, 3], 1.0, r)?;
    let y = s.add_normal("y", &[4, 3], 1.0, r)?;
    let gamma = s.add_normal("gamma", &[3], 1.0, r)?;
    let beta = s.add_normal("beta", &[3], 1.0, r)?;
    let f = s.add_normal("f", &[5, 2], 1.0, r)?;
    let plan = Arc::new(CorrelationPlan {
        queries: 2,
        supports: 5,
        kernel: 2,
        offsets: vec![0, 3, 5],
        support: vec![0, 2, 4, 1, 2],
        weights: vec![0.5, 0.1, 0.0, 0.9, 0.3, 0.2, 0.7, 0.0, 0.4, 0.6],
    });
    let targets = [1usize, 0, 255, 2];
    check(&s, |g, s| {
        let (x, y) = (g.param(s, x), g.param(s, y));
        let (gamma, beta, f) = (g.param(s, gamma), g.param(s, beta), g.param(s, f));
        let a = g.add(x, y)?;
        let b = g.sub(a, y)?;
        let c = g.mul(b, y)?;
        let c = g.scale(c, 0.7)?;
        let c = g.add_scalar(c, 0.3)?;
        let d = g.leaky_relu(c, 0.1)?;
        let (n, _, _) = g.normalize_batch(d, gamma, beta, 1e-5)?;
        let nf = g.normalize_frozen(c, gamma, beta, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
        let cat = g.concat(&[n, nf], 1)?;
        let sm = g.softmax(cat, 1)?;
        let sm0 = g.softmax(cat, 0)?;
        let l2 = g.l2_normalize(cat, 1, 1e-12)?;
        let l20 = g.l2_normalize(cat, 0, 1e-12)?;
        let rows = g.concat(&[sm, l2, sm0, l20], 0)?;
        let picked = g.gather(rows, &[0, 3, 3, 7, 12])?;
        let sc = g.scatter_sum(picked, &[1, 0, 1, 2, 2], 3)?;
        let tr = g.transpose(sc)?;
        let sl = g.slice_cols(tr, 1, 2)?;
        let rs = g.reshape(sl, &[3, 4])?;
        let w = g.slice_cols(cat, 0, 3)?;
        let logits = g.matmul(rs, w)?;
        let logits = g.concat(&[logits, logits], 0)?;
        let logits = g.gather(logits, &[0, 1, 2, 4])?;
        let ce = g.cross_entropy(logits, &targets, 255)?;
        let corr = g.correlate(f, plan.clone())?;
        let cn = g.norm(corr)?;
        let mx = g.max(corr)?;
        let total = g.sum(rs)?;
        let parts = g.concat(&[ce, cn, mx, total], 0)?;
        g.sum(parts)
    })
}

/// KP-Conv followed by batch normalization and leaky ReLU, as in an encoder block.
fn kp_conv_block(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let q = random_points(6, r);
    let sp = random_points(9, r);
    let kd = KernelDisposition::generate(5, 0.4, 0.5, r.random())?;
    let nb = radius_neighbors(&q, &sp, 0.8, 6)?;
    let mut s = ParamStore::new();
    let f = s.add_normal("features", &[9, 3], 1.0, r)?;
    let w = s.add_normal("weights", &[5, 3, 4], 1.0, r)?;
    let gamma = s.add_normal("gamma", &[4], 1.0, r)?;
    let beta = s.add_normal("beta", &[4], 1.0, r)?;
    let t = random_tensor(&[6, 4], r);
    check(&s, |g, st| {
        let (fv, wv) = (g.param(st, f), g.param(st, w));
        let o = kp_conv(g, &q, &sp, fv, &nb, &kd, wv)?;
        let (gv, bv) = (g.param(st, gamma), g.param(st, beta));
        let (o, _, _) = g.normalize_batch(o, gv, bv, 1e-5)?;
        let o = g.leaky_relu(o, 0.1)?;
        contract(g, o, &t)
    })
}

fn sa_layer(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let layer = SaLayer::new(&mut s, "sa", SaConfig::new(2, 4, 3), r)?;
    let x = s.add("input", random_tensor(&[5, 4], r))?;
    let t = random_tensor(&[5, 3], r);
    check(&s, |g, st| {
        let xv = g.param(st, x);
        let y = layer.forward(g, st, xv)?.out;
        contract(g, y, &t)
    })
}

fn netvlad(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let cfg = VladConfig { clusters: 3, input_dim: 4, output_dim: 5 };
    let vlad = NetVlad::new(&mut s, "vlad", cfg, r)?;
    let x = s.add("input", random_tensor(&[6, 4], r))?;
    let t = random_tensor(&[1, 5], r);
    check(&s, |g, st| {
        let xv = g.param(st, x);
        let y = vlad.forward(g, st, xv)?;
        contract(g, y, &t)
    })
}

fn quadruplet_loss(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let ids = (0..10)
        .map(|i| s.add_normal(&format!("d{i}"), &[1, 6], 0.5, r))
        .collect::<Result<Vec<_>>>()?;
    // wide margins keep every hinge active and away from its kink
    let margins = Margins { alpha: 2.0, beta: 1.5 };
    check(&s, |g, st| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        Ok(lazy_quadruplet_graph(g, v[0], &v[1..3], &v[3..9], &v[9..], &margins)?.loss)
    })
}

fn embedding(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = EmbedConfig {
        heads: 2,
        common_dim: 6,
        clusters: 3,
        descriptor_dim: 5,
        level_widths: [4, 8, 10],
        attention: true,
    };
    let net = EmbeddingNet::new(cfg.clone(), r.random())?;
    let sizes = [5, 3, 2];
    let level = |i: usize, r: &mut ChaCha8Rng| PyramidLevel {
        level: TAP_LEVELS[i],
        points: random_points(sizes[i], r),
        features: random_tensor(&[sizes[i], cfg.level_widths[i]], r),
    };
    let pyramid = FeaturePyramid { levels: [level(0, r), level(1, r), level(2, r)] };
    let t = random_tensor(&[1, 5], r);
    check(net.params(), |g, st| {
        let mut local = net.clone();
        *local.params_mut() = st.clone();
        let d = local.forward(g, &pyramid)?;
        contract(g, d, &t)
    })
}

/// Run every check; each case draws from its own stream of `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> Result<GradCheckReport>);
    let cases: [Case; 6] = [
        ("operators", operators),
        ("kp_conv_block", kp_conv_block),
        ("sa_layer", sa_layer),
        ("netvlad", netvlad),
        ("lazy_quadruplet", quadruplet_loss),
        ("embedding", embedding),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, run))| {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Ok(SuiteCase { name, report: run(&mut r)? })
        })
        .collect()
}

//! Stage 2: adapting a copy of the source generator toward the target text.
//!
//! The image direction of latent `w` is `E_I(G_trg(w)) - E_I(G_src(w))`. The
//! baseline aligns every image direction with the single text direction; the
//! moment loss instead matches the mean and Gram matrix of the image
//! directions to those of the text direction set (the plain direction plus
//! one direction per learned variation). Two regularizers keep the adapted
//! generator close to the source: an EWC penalty weighted by a diagonal
//! Fisher estimate, and a KL term between source and target sample-relation
//! matrices.

use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::generator::{GeneratorLeaves, GeneratorParams};
use crate::metrics::{self, MetricsReport};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::{dense, Tensor};
use crate::variations::VariationSet;
use crate::world::{EncoderLeaves, World};

/// Rows shorter than this count as zero directions.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LossMode {
    #[serde(rename = "dir", alias = "dir-baseline")]
    Dir,
    #[serde(rename = "dm", alias = "dm-only")]
    Dm,
    #[serde(rename = "dm-ewc", alias = "dm+ewc")]
    DmEwc,
    #[serde(rename = "full")]
    Full,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Dir, LossMode::Dm, LossMode::DmEwc, LossMode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Dir => "dir",
            LossMode::Dm => "dm",
            LossMode::DmEwc => "dm-ewc",
            LossMode::Full => "full",
        }
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, LossMode::DmEwc | LossMode::Full)
    }

    pub fn uses_variations(self) -> bool {
        self != LossMode::Dir
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dir" | "dir-baseline" => Ok(LossMode::Dir),
            "dm" | "dm-only" => Ok(LossMode::Dm),
            "dm-ewc" | "dm+ewc" => Ok(LossMode::DmEwc),
            "full" => Ok(LossMode::Full),
            other => Err(Error::usage(format!("unknown loss mode `{other}` (expected dir, dm, dm-ewc or full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionKind {
    Text,
    Image,
}

/// A nonempty stack of nonzero direction vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    rows: Tensor,
    kind: DirectionKind,
}

impl DirectionSet {
    pub fn new(rows: Tensor, kind: DirectionKind) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::usage(format!("direction set must be a matrix, got {:?}", rows.shape())));
        }
        if let Some(i) = rows.iter_rows().position(|r| dense::norm(r) <= MIN_DIRECTION_NORM) {
            return Err(Error::Degenerate(format!("{kind:?} direction {i} is zero")));
        }
        Ok(DirectionSet { rows, kind })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn kind(&self) -> DirectionKind {
        self.kind
    }
}

/// `[t_trg - t_src; v^1 - t_src; ...; v^K - t_src]`.
pub fn build_text_directions(t_src: &[f64], t_trg: &[f64], variations: Option<&VariationSet>) -> Result<DirectionSet> {
    if t_src.len() != t_trg.len() {
        return Err(Error::usage("source and target embeddings differ in length"));
    }
    let d = t_src.len();
    let mut data: Vec<f64> = t_trg.iter().zip(t_src).map(|(a, b)| a - b).collect();
    let mut rows = 1;
    if let Some(vs) = variations {
        if vs.target != t_trg {
            return Err(Error::usage("variations were learned for a different target embedding"));
        }
        for v in vs.variations()?.iter_rows() {
            data.extend(v.iter().zip(t_src).map(|(a, b)| a - b));
            rows += 1;
        }
    }
    DirectionSet::new(Tensor::from_parts(vec![rows, d], data), DirectionKind::Text)
}

/// Image directions for each latent row; zero rows are allowed here and
/// flagged by the losses.
pub fn build_image_directions(world: &World, g_src: &GeneratorParams, g_trg: &GeneratorParams, w: &Tensor) -> Result<Tensor> {
    let a = world.encode_batch(&g_trg.generate(w)?)?;
    let b = world.encode_batch(&g_src.generate(w)?)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

// ---- loss graphs -----------------------------------------------------------

/// `mean_n (1 - cos(ΔI_n, ΔT))` with `di: [N, D]`, `dt: [1, D]`.
pub fn dir_node(g: &mut Graph, di: NodeId, dt: NodeId) -> Result<NodeId> {
    let n = g.shape(di)[0];
    let rep = g.repeat_row(dt, n)?;
    let c = g.cosine(di, rep)?;
    let d = g.one_minus(c)?;
    let l = g.mean(d)?;
    Ok(g.name(l, "loss_dir"))
}

fn gram(g: &mut Graph, x: NodeId, normalize: bool) -> Result<NodeId> {
    let rows = g.shape(x)[0];
    let xt = g.transpose(x)?;
    let s = g.matmul(xt, x)?;
    if normalize {
        g.scale(s, 1.0 / rows as f64)
    } else {
        Ok(s)
    }
}

/// Nodes of the moment loss.
#[derive(Clone, Copy, Debug)]
pub struct DmNodes {
    pub mean_term: NodeId,
    pub cov_term: NodeId,
    pub total: NodeId,
}

/// `1 - cos(μ_I, μ_T) + λ_cov·|Σ_I - Σ_T|_F`.
pub fn dm_node(g: &mut Graph, di: NodeId, dt_set: NodeId, lambda_cov: f64, gram_normalize: bool) -> Result<DmNodes> {
    let mi = g.row_mean(di)?;
    let mt = g.row_mean(dt_set)?;
    let c = g.cosine(mi, mt)?;
    let d1 = g.one_minus(c)?;
    let mean_term = g.sum(d1)?;
    let gi = gram(g, di, gram_normalize)?;
    let gt = gram(g, dt_set, gram_normalize)?;
    let diff = g.sub(gi, gt)?;
    let cov_term = g.frobenius_norm(diff)?;
    let weighted = g.scale(cov_term, lambda_cov)?;
    let total = g.add(mean_term, weighted)?;
    g.name(total, "loss_dm");
    Ok(DmNodes { mean_term, cov_term, total })
}

/// `Σ_b sum(F_b ⊙ (θt_b − θs_b)^2)` over matching block lists.
pub fn ewc_node(g: &mut Graph, theta_t: &[NodeId], theta_s: &[NodeId], fisher: &[NodeId]) -> Result<NodeId> {
    if theta_t.len() != theta_s.len() || theta_t.len() != fisher.len() || theta_t.is_empty() {
        return Err(Error::usage("EWC needs matching, nonempty parameter and Fisher block lists"));
    }
    let mut acc: Option<NodeId> = None;
    for ((t, s), f) in theta_t.iter().zip(theta_s).zip(fisher) {
        let d = g.sub(*t, *s)?;
        let sq = g.mul(d, d)?;
        let w = g.mul(sq, *f)?;
        let term = g.sum(w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let l = acc.unwrap();
    Ok(g.name(l, "loss_ewc"))
}

/// `(1/N) Σ_rows KL(softmax(x_s x_sᵀ) ‖ softmax(x_t x_tᵀ))`.
pub fn rel_node(g: &mut Graph, xs: NodeId, xt: NodeId) -> Result<NodeId> {
    let n = g.shape(xs)[0];
    let xst = g.transpose(xs)?;
    let ms = g.matmul(xs, xst)?;
    let xtt = g.transpose(xt)?;
    let mt = g.matmul(xt, xtt)?;
    let p = g.row_softmax(ms)?;
    let q = g.row_softmax(mt)?;
    let lp = g.log(p)?;
    let lq = g.log(q)?;
    let diff = g.sub(lp, lq)?;
    let kl = g.mul(p, diff)?;
    let s = g.sum(kl)?;
    let l = g.scale(s, 1.0 / n as f64)?;
    Ok(g.name(l, "loss_rel"))
}

// ---- direct evaluations -----------------------------------------------------

fn eval_inputs(build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>, values: &[&Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = values.iter().enumerate().map(|(i, v)| g.input(&format!("arg{i}"), v.shape())).collect();
    let out = build(&mut g, &ids)?;
    let mut b = Bindings::new();
    for (id, v) in ids.iter().zip(values) {
        b.bind(*id, (*v).clone());
    }
    Ok(g.forward(&b)?.value(out).item())
}

pub fn directional_loss(di: &Tensor, dt: &[f64]) -> Result<f64> {
    if dense::norm(dt) <= MIN_DIRECTION_NORM {
        return Err(Error::Degenerate("text direction is zero (source and target texts coincide)".into()));
    }
    if di.iter_rows().any(|r| dense::norm(r) <= MIN_DIRECTION_NORM) {
        warn!("directional loss evaluated with a zero image direction");
    }
    let dt = Tensor::from_parts(vec![1, dt.len()], dt.to_vec());
    eval_inputs(|g, ids| dir_node(g, ids[0], ids[1]), &[di, &dt])
}

pub fn loss_dm(di: &Tensor, dt_set: &Tensor, lambda_cov: f64, gram_normalize: bool) -> Result<f64> {
    if di.cols() != dt_set.cols() {
        return Err(Error::usage("image and text direction sets differ in width"));
    }
    eval_inputs(|g, ids| Ok(dm_node(g, ids[0], ids[1], lambda_cov, gram_normalize)?.total), &[di, dt_set])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    pub blocks: Vec<Tensor>,
    pub samples: usize,
}

impl FisherDiag {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.data().iter().copied())
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.values().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Largest `|a - b|` over entries whose Fisher value exceeds the median.
    pub fn max_displacement_above_median(&self, a: &GeneratorParams, b: &GeneratorParams) -> f64 {
        let med = self.median();
        let mut worst = 0.0f64;
        for ((f, x), y) in self.blocks.iter().zip(a.tensors()).zip(b.tensors()) {
            for ((fv, xv), yv) in f.data().iter().zip(x.data()).zip(y.data()) {
                if *fv > med {
                    worst = worst.max((xv - yv).abs());
                }
            }
        }
        worst
    }
}

/// Mean of squared per-sample gradients.
pub fn fisher_from_gradients(per_sample: &[Vec<Tensor>]) -> Result<FisherDiag> {
    let first = per_sample.first().ok_or_else(|| Error::usage("Fisher estimate needs at least one sample"))?;
    let m = per_sample.len() as f64;
    let mut blocks: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (s, grads) in per_sample.iter().enumerate() {
        if grads.len() != blocks.len() {
            return Err(Error::usage(format!("sample {s} has a different block count")));
        }
        for (acc, g) in blocks.iter_mut().zip(grads) {
            if g.shape() != acc.shape() {
                return Err(Error::usage(format!("sample {s} has a mismatched block shape")));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite Fisher gradient for sample {s}")));
            }
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v * v / m);
        }
    }
    Ok(FisherDiag { blocks, samples: per_sample.len() })
}

/// Empirical diagonal Fisher of `cos(E_I(G_src(w)), t_src)` over `m` latents.
pub fn estimate_fisher(world: &World, g_src: &GeneratorParams, t_src: &[f64], m: usize, seed: u64) -> Result<FisherDiag> {
    if m == 0 {
        return Err(Error::Config("Fisher sample count must be at least 1".into()));
    }
    let mut g = Graph::new();
    let theta = GeneratorLeaves::params(&mut g, g_src, "src");
    let enc = EncoderLeaves::declare(&mut g, &world.encoder);
    let w = g.input("latent", &[1, g_src.latent_dim()]);
    let t = g.input("t_src", &[1, world.d]);
    let x = theta.apply(&mut g, w)?;
    let e = enc.apply(&mut g, x)?;
    let c = g.cosine(e, t)?;
    let sim = g.sum(c)?;

    let mut b = Bindings::new().with(t, Tensor::from_parts(vec![1, world.d], t_src.to_vec()));
    theta.bind(&mut b, g_src);
    enc.bind(&mut b, &world.encoder);
    let mut r = rng::seeded(seed, rng::stream::FISHER);
    let mut blocks: Vec<Tensor> = g_src.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for s in 0..m {
        b.bind(w, rng::normal_matrix(&mut r, 1, g_src.latent_dim(), 1.0));
        let named = |e: Error| Error::Numeric(format!("Fisher sample {s}: {e}"));
        let ev = g.forward(&b).map_err(named)?;
        let grads = g.backward(&ev, sim).map_err(named)?;
        for (acc, id) in blocks.iter_mut().zip(theta.ids()) {
            let gi = grads.get(*id);
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, v)| *a += v * v);
        }
    }
    for blk in &mut blocks {
        blk.data_mut().iter_mut().for_each(|v| *v /= m as f64);
    }
    Ok(FisherDiag { blocks, samples: m })
}

pub fn loss_ewc(theta_t: &GeneratorParams, theta_s: &GeneratorParams, f: &FisherDiag) -> Result<f64> {
    let (a, b) = (theta_t.tensors(), theta_s.tensors());
    if a.len() != b.len() || a.len() != f.blocks.len() {
        return Err(Error::usage("EWC block counts differ"));
    }
    let mut s = 0.0;
    for ((x, y), w) in a.iter().zip(&b).zip(&f.blocks) {
        if x.shape() != y.shape() || x.shape() != w.shape() {
            return Err(Error::usage("EWC block shapes differ"));
        }
        for ((xv, yv), fv) in x.data().iter().zip(y.data()).zip(w.data()) {
            s += fv * (xv - yv) * (xv - yv);
        }
    }
    Ok(s)
}

pub fn loss_rel(x_src: &Tensor, x_trg: &Tensor) -> Result<f64> {
    if x_src.shape() != x_trg.shape() || x_src.rank() != 2 {
        return Err(Error::usage("relation loss needs two [N, D] matrices of equal shape"));
    }
    if x_src.rows() < 2 {
        return Err(Error::usage("relation loss needs at least two rows"));
    }
    eval_inputs(|g, ids| rel_node(g, ids[0], ids[1]), &[x_src, x_trg])
}

// ---- training ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub n: usize,
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_cov: f64,
    pub lambda_ewc: f64,
    pub lambda_rel: f64,
    pub fisher_samples: usize,
    pub eval_every: usize,
    pub loss_mode: LossMode,
    pub gram_normalize: bool,
    pub seed: u64,
    /// Held-out latents for periodic metrics; shared by all modes and seeds.
    pub eval_latents: usize,
    pub eval_seed: u64,
    pub eval_k: usize,
    pub eval_nn_k: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            n: 4,
            iters: 2000,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            lambda_cov: 1e3,
            lambda_ewc: 1e7,
            lambda_rel: 1e2,
            fisher_samples: 256,
            eval_every: 100,
            loss_mode: LossMode::Full,
            gram_normalize: true,
            seed: 100,
            eval_latents: 256,
            eval_seed: 999,
            eval_k: 10,
            eval_nn_k: 3,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_cov", self.lambda_cov), ("lambda_ewc", self.lambda_ewc), ("lambda_rel", self.lambda_rel)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::ConfigKey { key: format!("stage2.{k}"), msg: format!("must be a finite value >= 0, got {v}") });
            }
        }
        if self.n == 0 {
            return Err(Error::ConfigKey { key: "stage2.n".into(), msg: "batch size must be at least 1".into() });
        }
        if self.loss_mode == LossMode::Full && self.n < 2 {
            return Err(Error::ConfigKey { key: "stage2.n".into(), msg: "relation consistency needs a batch of at least 2".into() });
        }
        if self.loss_mode.uses_ewc() && self.fisher_samples == 0 {
            return Err(Error::ConfigKey { key: "stage2.fisher_samples".into(), msg: "must be at least 1".into() });
        }
        if self.eval_latents < 2 || self.eval_k == 0 || self.eval_k > self.eval_latents || self.eval_nn_k >= self.eval_latents {
            return Err(Error::Config("evaluation set must exceed both cluster and neighbour counts".into()));
        }
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }.validate()
    }
}

/// The Stage-2 graph: every loss term over one batch of latents.
pub struct Stage2Graph {
    pub graph: Graph,
    pub theta_t: GeneratorLeaves,
    pub theta_s: GeneratorLeaves,
    pub encoder: EncoderLeaves,
    pub latents: NodeId,
    pub text_dir: NodeId,
    pub text_set: NodeId,
    pub fisher: Option<Vec<NodeId>>,
    pub image_dirs: NodeId,
    pub dir: NodeId,
    pub dm: DmNodes,
    pub ewc: Option<NodeId>,
    pub rel: Option<NodeId>,
    pub total: NodeId,
}

impl Stage2Graph {
    pub fn build(world: &World, g_src: &GeneratorParams, text_rows: usize, with_fisher: bool, cfg: &AdaptConfig) -> Result<Self> {
        let mut g = Graph::new();
        let theta_t = GeneratorLeaves::params(&mut g, g_src, "trg");
        let theta_s = GeneratorLeaves::frozen(&mut g, g_src, "src");
        let encoder = EncoderLeaves::declare(&mut g, &world.encoder);
        let latents = g.input("latents", &[cfg.n, g_src.latent_dim()]);
        let text_dir = g.input("text_dir", &[1, world.d]);
        let text_set = g.input("text_set", &[text_rows, world.d]);
        let fisher = with_fisher.then(|| {
            g_src.blocks().iter().map(|(n, s)| g.input(&format!("fisher.{n}"), s)).collect::<Vec<_>>()
        });

        let gt = theta_t.apply(&mut g, latents)?;
        let xt = encoder.apply(&mut g, gt)?;
        let gs = theta_s.apply(&mut g, latents)?;
        let xs = encoder.apply(&mut g, gs)?;
        let image_dirs = g.sub(xt, xs)?;
        g.name(image_dirs, "image_directions");

        let dir = dir_node(&mut g, image_dirs, text_dir)?;
        let dm = dm_node(&mut g, image_dirs, text_set, cfg.lambda_cov, cfg.gram_normalize)?;
        let ewc = match &fisher {
            Some(f) => Some(ewc_node(&mut g, theta_t.ids(), theta_s.ids(), f)?),
            None => None,
        };
        let rel = if cfg.n >= 2 { Some(rel_node(&mut g, xs, xt)?) } else { None };

        let total = match cfg.loss_mode {
            LossMode::Dir => dir,
            LossMode::Dm => dm.total,
            LossMode::DmEwc | LossMode::Full => {
                let ewc = ewc.ok_or_else(|| Error::usage("EWC modes need a Fisher estimate"))?;
                let e = g.scale(ewc, cfg.lambda_ewc)?;
                let mut t = g.add(dm.total, e)?;
                if cfg.loss_mode == LossMode::Full {
                    let rel = rel.ok_or_else(|| Error::usage("relation consistency needs a batch of at least 2"))?;
                    let r = g.scale(rel, cfg.lambda_rel)?;
                    t = g.add(t, r)?;
                }
                t
            }
        };
        g.name(total, "loss_total");
        Ok(Stage2Graph { graph: g, theta_t, theta_s, encoder, latents, text_dir, text_set, fisher, image_dirs, dir, dm, ewc, rel, total })
    }

    /// Bindings for everything except the trainable parameters and latents.
    pub fn frozen_bindings(&self, world: &World, g_src: &GeneratorParams, texts: &DirectionSet, fisher: Option<&FisherDiag>) -> Bindings {
        let mut b = Bindings::new();
        self.theta_s.bind(&mut b, g_src);
        self.encoder.bind(&mut b, &world.encoder);
        let rows = texts.rows();
        b.bind(self.text_dir, Tensor::from_parts(vec![1, rows.cols()], rows.row_slice(0).to_vec()));
        b.bind(self.text_set, rows.clone());
        if let (Some(ids), Some(f)) = (&self.fisher, fisher) {
            for (id, t) in ids.iter().zip(&f.blocks) {
                b.bind(*id, t.clone());
            }
        }
        b
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub generator: GeneratorParams,
    /// One record per iteration `0..=iters`, losses only.
    pub losses: Vec<MetricsReport>,
    /// Records every `eval_every` iterations (and at the end) with sample metrics.
    pub evals: Vec<MetricsReport>,
    pub fisher: Option<FisherDiag>,
    /// Iterations where all image directions were zero and a sign step was taken.
    pub sign_steps: usize,
}

/// Fixed held-out latents and real target features for periodic evaluation.
pub struct EvalSet {
    pub latents: Tensor,
    pub real: Tensor,
}

impl EvalSet {
    pub fn new(world: &World, trg: &str, latent_dim: usize, n: usize, seed: u64) -> Result<Self> {
        let latents = rng::normal_matrix(&mut rng::seeded(seed, rng::stream::EVAL_LATENTS), n, latent_dim, 1.0);
        let x = world.sample_domain(trg, n, &mut rng::seeded(seed, rng::stream::EVAL_REAL))?;
        Ok(EvalSet { latents, real: world.encode_batch(&x)? })
    }
}

fn evaluate(world: &World, gp: &GeneratorParams, set: &EvalSet, cfg: &AdaptConfig, rec: &mut MetricsReport) -> Result<()> {
    let feats = world.encode_batch(&gp.generate(&set.latents)?)?;
    let m = metrics::sample_metrics(&feats, &set.real, cfg.eval_k, cfg.eval_nn_k)?;
    rec.sse = Some(m.sse);
    rec.diversity_avg = Some(m.diversity.avg);
    rec.diversity_all = Some(m.diversity.all);
    rec.frechet = Some(m.frechet);
    rec.precision = Some(m.precision);
    rec.recall = Some(m.recall);
    Ok(())
}

/// Runs Stage 2 from `θ_trg = θ_src`.
///
/// `fisher` may be supplied to reuse an estimate across runs; otherwise it is
/// estimated here when the loss mode needs it.
pub fn adapt(
    world: &World,
    g_src: &GeneratorParams,
    variations: Option<&VariationSet>,
    src: &str,
    trg: &str,
    cfg: &AdaptConfig,
    fisher: Option<&FisherDiag>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let t_src = world.encode_text(src)?;
    let t_trg = world.encode_text(trg)?;
    if dense::norm(&t_trg.iter().zip(&t_src).map(|(a, b)| a - b).collect::<Vec<_>>()) <= MIN_DIRECTION_NORM {
        return Err(Error::Degenerate(format!("texts `{src}` and `{trg}` embed identically; no direction to follow")));
    }
    let vars = if cfg.loss_mode.uses_variations() { variations } else { None };
    if cfg.loss_mode.uses_variations() && vars.is_none() {
        warn!("{} mode without learned variations: the text set holds only the plain direction", cfg.loss_mode);
    }
    let texts = build_text_directions(&t_src, &t_trg, vars)?;

    let owned_fisher;
    let fisher = match (cfg.loss_mode.uses_ewc(), fisher) {
        (false, _) => None,
        (true, Some(f)) => Some(f),
        (true, None) => {
            owned_fisher = estimate_fisher(world, g_src, &t_src, cfg.fisher_samples, cfg.seed)?;
            Some(&owned_fisher)
        }
    };

    let s2 = Stage2Graph::build(world, g_src, texts.rows().rows(), fisher.is_some(), cfg)?;
    let mut b = s2.frozen_bindings(world, g_src, &texts, fisher);
    let eval_set = EvalSet::new(world, trg, g_src.latent_dim(), cfg.eval_latents, cfg.eval_seed)?;

    let adam_cfg = AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
    let mut opt = Adam::new(adam_cfg, &g_src.blocks())?;
    let mut params = g_src.tensors();
    let mut r = rng::seeded(cfg.seed, rng::stream::ADAPT);
    let mut losses = Vec::with_capacity(cfg.iters + 1);
    let mut evals = Vec::new();
    let mut sign_steps = 0;
    let every = cfg.eval_every.max(1);

    for it in 0..=cfg.iters {
        b.bind(s2.latents, rng::normal_matrix(&mut r, cfg.n, g_src.latent_dim(), 1.0));
        s2.theta_t.bind_tensors(&mut b, &params);
        let last = losses.last().cloned();
        let ctx = |e: Error| annotate(it, last.as_ref(), e);
        let ev = s2.graph.forward(&b).map_err(ctx)?;
        let rec = MetricsReport {
            iter: it,
            loss_dir: Some(ev.value(s2.dir).item()),
            loss_dm: Some(ev.value(s2.dm.total).item()),
            loss_ewc: s2.ewc.map(|n| ev.value(n).item()),
            loss_rel: s2.rel.map(|n| ev.value(n).item()),
            loss_total: Some(ev.value(s2.total).item()),
            ..Default::default()
        };
        if it % every == 0 || it == cfg.iters {
            let gp = g_src.with_tensors(params.clone())?;
            let mut e = rec.clone();
            evaluate(world, &gp, &eval_set, cfg, &mut e)?;
            debug!(
                "adapt[{}] iter {it}: total {:.6} sse {:.3} div {:.4}",
                cfg.loss_mode,
                rec.loss_total.unwrap(),
                e.sse.unwrap(),
                e.diversity_avg.unwrap()
            );
            evals.push(e);
        }
        losses.push(rec);
        if it == cfg.iters {
            break;
        }

        let grads = s2.graph.backward(&ev, s2.total).map_err(ctx)?;
        let gs: Vec<&Tensor> = s2.theta_t.ids().iter().map(|id| grads.get(*id)).collect();
        let degenerate = ev.value(s2.image_dirs).iter_rows().any(|row| dense::norm(row) <= MIN_DIRECTION_NORM);
        if degenerate {
            if sign_steps == 0 {
                warn!("adapt[{}] iter {it}: zero image direction; taking a sign step", cfg.loss_mode);
            }
            sign_steps += 1;
            opt.sign_step(&mut params, &gs).map_err(ctx)?;
        } else {
            opt.step(&mut params, &gs).map_err(ctx)?;
        }
    }

    let generator = g_src.with_tensors(params)?;
    info!(
        "adapt[{}] finished {} iterations; final loss {:.6}",
        cfg.loss_mode,
        cfg.iters,
        losses.last().and_then(|r| r.loss_total).unwrap_or(f64::NAN)
    );
    Ok(AdaptOutcome { generator, losses, evals, fisher: fisher.cloned(), sign_steps })
}

fn annotate(it: usize, last: Option<&MetricsReport>, e: Error) -> Error {
    let breakdown = last
        .map(|r| {
            format!(
                " (previous losses: dir {:?}, dm {:?}, ewc {:?}, rel {:?}, total {:?})",
                r.loss_dir, r.loss_dm, r.loss_ewc, r.loss_rel, r.loss_total
            )
        })
        .unwrap_or_default();
    match e {
        Error::NonFinite { node } => Error::Numeric(format!("stage 2 iteration {it}: non-finite value at {node}{breakdown}")),
        Error::Numeric(m) => Error::Numeric(format!("stage 2 iteration {it}: {m}{breakdown}")),
        other => other,
    }
}

/// Optimizes free direction vectors against a fixed text set with Adam on the
/// moment loss. Returns the final directions and loss.
pub fn match_moments(texts: &Tensor, rows: usize, lambda_cov: f64, steps: usize, seed: u64) -> Result<(Tensor, f64)> {
    let d = texts.cols();
    let mut g = Graph::new();
    let di = g.param("directions", &[rows, d]);
    let ts = g.input("text_set", texts.shape());
    let dm = dm_node(&mut g, di, ts, lambda_cov, true)?;
    let mut params = vec![rng::normal_matrix(&mut rng::seeded(seed, rng::stream::CHECKS), rows, d, 1.0)];
    let mut opt = Adam::new(AdamConfig::default(), &[("directions".into(), vec![rows, d])])?;
    let mut b = Bindings::new().with(ts, texts.clone());
    for _ in 0..steps {
        b.bind(di, params[0].clone());
        let ev = g.forward(&b)?;
        let grads = g.backward(&ev, dm.total)?;
        opt.step(&mut params, &[grads.get(di)])?;
    }
    b.bind(di, params[0].clone());
    let final_loss = g.forward(&b)?.value(dm.total).item();
    Ok((params.pop().unwrap(), final_loss))
}

/// Eigenvalues (ascending) of `XᵀX / rows`.
pub fn gram_eigenvalues(x: &Tensor) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
    let gm = m.transpose() * &m / x.rows() as f64;
    let mut v: Vec<f64> = gm.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn directional_examples() {
        let dt = [1.0, 2.0];
        assert!(directional_loss(&m(&[&[1.0, 2.0], &[2.0, 4.0]]), &dt).unwrap().abs() < 1e-15);
        assert!((directional_loss(&m(&[&[-1.0, -2.0]]), &dt).unwrap() - 2.0).abs() < 1e-15);
        let l = directional_loss(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[1.0, 0.0]).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        assert!(matches!(directional_loss(&m(&[&[1.0, 0.0]]), &[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn text_direction_examples() {
        let t = build_text_directions(&[0.0, 0.0], &[1.0, 0.0], None).unwrap();
        assert_eq!(t.rows().data(), &[1.0, 0.0]);
        let vs = VariationSet { target: vec![1.0, 0.0], z: m(&[&[0.0, 1.0]]), epsilon: 1.0 };
        let t = build_text_directions(&[0.0, 0.0], &[1.0, 0.0], Some(&vs)).unwrap();
        assert_eq!(t.rows().data(), &[1.0, 0.0, 1.0, 1.0]);
        assert!(build_text_directions(&[1.0, 0.0], &[1.0, 0.0], None).is_err());
        let other = VariationSet { target: vec![2.0, 0.0], ..vs };
        assert!(build_text_directions(&[0.0, 0.0], &[1.0, 0.0], Some(&other)).is_err());
    }

    #[test]
    fn dm_examples() {
        let t = m(&[&[1.0, 0.5], &[-0.3, 2.0], &[0.7, 0.7]]);
        assert!(loss_dm(&t, &t, 1e3, true).unwrap().abs() < 1e-12);
        // identical means, rank-1 image Gram vs spread text Gram
        let mu = [1.4 / 3.0, 3.2 / 3.0];
        let flat = m(&[&mu, &mu, &mu]);
        let l = loss_dm(&flat, &t, 1.0, true).unwrap();
        let d1 = loss_dm(&flat, &t, 0.0, true).unwrap();
        assert!(d1.abs() < 1e-12 && l > 0.1);
        // zero means: cosine guard gives d1 = 1; Grams 1 vs 4
        let l = loss_dm(&m(&[&[1.0], &[-1.0]]), &m(&[&[2.0], &[-2.0]]), 1e3, true).unwrap();
        assert!((l - (1.0 + 3.0 * 1e3)).abs() < 1e-9);
    }

    #[test]
    fn fisher_and_ewc_examples() {
        let f = fisher_from_gradients(&[vec![Tensor::scalar(0.1)], vec![Tensor::scalar(0.3)]]).unwrap();
        assert!((f.blocks[0].item() - 0.05).abs() < 1e-15);
        let gp = GeneratorParams::init(&[1, 1, 1], 0).unwrap();
        let mut moved = gp.tensors();
        moved[0].data_mut()[0] += 0.5;
        let moved = gp.with_tensors(moved).unwrap();
        let blocks = gp.tensors().iter().enumerate().map(|(i, t)| Tensor::full(t.shape(), if i == 0 { 2.0 } else { 0.0 })).collect();
        let f = FisherDiag { blocks, samples: 1 };
        assert!((loss_ewc(&moved, &gp, &f).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(loss_ewc(&gp, &gp, &f).unwrap(), 0.0);
    }

    #[test]
    fn rel_examples() {
        let x = m(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]);
        assert!(loss_rel(&x, &x).unwrap().abs() < 1e-15);
        // M_src = I, M_trg = 0
        let l = loss_rel(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &m(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        let e = std::f64::consts::E;
        let p = e / (e + 1.0);
        let kl = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
        assert!((l - kl).abs() < 1e-15);
        assert!((l - 0.1109).abs() < 5e-4);
    }

    #[test]
    fn dm_gradient_matches_differences() {
        let mut r = rng::seeded(2, 0);
        let mut g = Graph::new();
        let di = g.param("di", &[4, 5]);
        let ts = g.param("ts", &[3, 5]);
        let dm = dm_node(&mut g, di, ts, 10.0, true).unwrap();
        let b = Bindings::new().with(di, rng::normal_matrix(&mut r, 4, 5, 1.0)).with(ts, rng::normal_matrix(&mut r, 3, 5, 1.0));
        let rep = grad_check(&g, &b, dm.total, 1e-5, 1e-4).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    fn tiny() -> (World, GeneratorParams) {
        let doms = crate::world::benchmark_domains(4, 3, 3.0, 0.5, crate::world::Placement::Offset);
        (World::build(4, 3, 5, 6, doms).unwrap(), GeneratorParams::init(&[8, 6, 3], 4).unwrap())
    }

    #[test]
    fn stage2_gradients_reach_only_the_target_generator() {
        let (world, gs) = tiny();
        let cfg = AdaptConfig { loss_mode: LossMode::Full, ..AdaptConfig::default() };
        let mut r = rng::seeded(9, 0);
        let texts = DirectionSet::new(rng::normal_matrix(&mut r, 3, 5, 1.0), DirectionKind::Text).unwrap();
        let fisher = FisherDiag { blocks: gs.tensors().iter().map(|t| t.map(|v| v.abs())).collect(), samples: 1 };
        let s2 = Stage2Graph::build(&world, &gs, 3, true, &cfg).unwrap();
        let mut b = s2.frozen_bindings(&world, &gs, &texts, Some(&fisher));
        let moved: Vec<Tensor> = gs.tensors().iter().map(|t| t.map(|v| v + 0.01)).collect();
        s2.theta_t.bind_tensors(&mut b, &moved);
        b.bind(s2.latents, rng::normal_matrix(&mut r, cfg.n, 8, 1.0));
        let ev = s2.graph.forward(&b).unwrap();
        let grads = s2.graph.backward(&ev, s2.total).unwrap();
        let mut frozen: Vec<NodeId> = s2.theta_s.ids().to_vec();
        frozen.extend(s2.encoder.ids());
        frozen.extend(s2.fisher.as_ref().unwrap());
        frozen.extend([s2.text_dir, s2.text_set, s2.latents]);
        for id in frozen {
            assert!(grads.get(id).data().iter().all(|v| *v == 0.0), "{}", s2.graph.label(id));
        }
        assert!(s2.theta_t.ids().iter().any(|id| grads.get(*id).data().iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn moment_loss_without_covariance_is_the_directional_loss_of_one_row() {
        let di = m(&[&[0.3, -1.2, 2.0]]);
        let dt = [1.0, 0.5, -0.25];
        let set = m(&[&dt]);
        let a = loss_dm(&di, &set, 0.0, true).unwrap();
        let b = directional_loss(&di, &dt).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn adaptation_is_deterministic() {
        let (world, gs) = tiny();
        let cfg = AdaptConfig { iters: 15, fisher_samples: 4, eval_every: 5, eval_latents: 24, eval_k: 3, ..AdaptConfig::default() };
        let run = || adapt(&world, &gs, None, "src", "trg", &cfg, None).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.losses.len(), 16);
        assert_eq!(a.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![0, 5, 10, 15]);
        assert_eq!(a.sign_steps, 1);
    }
}

//! Latent-to-data MLP generator and its MMD pretraining on the source domain.

use log::{debug, info};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tensor::{dense, Tensor};
use crate::world::World;

/// Default layer widths: latent 8, two hidden layers of 64, output P.
pub const HIDDEN: [usize; 2] = [64, 64];
pub const LATENT_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    /// `[out, in]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

/// Dense layers with tanh between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub layers: Vec<Layer>,
}

impl GeneratorParams {
    /// `sizes = [Dw, h1, ..., P]`, weights and biases ~ N(0, 1/fan_in).
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 3 || sizes.contains(&0) {
            return Err(Error::Config(format!("generator needs at least 2 layers of positive width, got {sizes:?}")));
        }
        let mut r = rng::seeded(seed, rng::stream::GENERATOR_INIT);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    name: format!("l{}", i + 1),
                    weight: rng::normal_matrix(&mut r, w[1], w[0], std),
                    bias: rng::normal_matrix(&mut r, 1, w[1], std),
                }
            })
            .collect();
        GeneratorParams::from_layers(layers)
    }

    pub fn standard(p: usize, seed: u64) -> Result<Self> {
        GeneratorParams::init(&[LATENT_DIM, HIDDEN[0], HIDDEN[1], p], seed)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Config("generator needs at least 2 layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let ws = l.weight.shape();
            if ws.len() != 2 || l.bias.shape() != [1, ws[0]] {
                return Err(Error::Config(format!("layer `{}` has inconsistent weight/bias shapes", l.name)));
            }
            if i > 0 && layers[i - 1].weight.shape()[0] != ws[1] {
                return Err(Error::Config(format!("layer `{}` does not compose with its predecessor", l.name)));
            }
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Config(format!("duplicate layer name `{}`", l.name)));
            }
        }
        Ok(GeneratorParams { layers })
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Parameter blocks in a fixed order: `l1.weight, l1.bias, l2.weight, ...`.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight.shape().to_vec()),
                    (format!("{}.bias", l.name), l.bias.shape().to_vec()),
                ]
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    /// Inverse of [`tensors`](Self::tensors); shapes must match.
    pub fn with_tensors(&self, ts: Vec<Tensor>) -> Result<Self> {
        if ts.len() != 2 * self.layers.len() {
            return Err(Error::usage("wrong number of parameter blocks"));
        }
        let mut it = ts.into_iter();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
                return Err(Error::usage(format!("block shapes of layer `{}` changed", l.name)));
            }
            layers.push(Layer { name: l.name.clone(), weight: w, bias: b });
        }
        Ok(GeneratorParams { layers })
    }

    pub fn generate(&self, w: &Tensor) -> Result<Tensor> {
        if w.rank() != 2 || w.cols() != self.latent_dim() {
            return Err(Error::usage(format!(
                "generator expects [N, {}] latents, got {:?}",
                self.latent_dim(),
                w.shape()
            )));
        }
        let n = w.rows();
        let mut x = w.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
            let wt = dense::transpose(l.weight.data(), out, inp);
            let mut y = dense::matmul(&x, &wt, n, inp, out);
            for row in y.chunks_mut(out) {
                for (v, b) in row.iter_mut().zip(l.bias.data()) {
                    *v += b;
                    if i < last {
                        *v = v.tanh();
                    }
                }
            }
            x = y;
        }
        Ok(Tensor::from_parts(vec![n, self.out_dim()], x))
    }
}

/// Generator parameters embedded in a graph, either trainable or frozen.
#[derive(Clone, Debug)]
pub struct GeneratorLeaves {
    ids: Vec<NodeId>,
}

impl GeneratorLeaves {
    pub fn params(g: &mut Graph, gp: &GeneratorParams, prefix: &str) -> Self {
        let ids = gp.blocks().iter().map(|(n, s)| g.param(&format!("{prefix}.{n}"), s)).collect();
        GeneratorLeaves { ids }
    }

    pub fn frozen(g: &mut Graph, gp: &GeneratorParams, prefix: &str) -> Self {
        let ids = gp.blocks().iter().map(|(n, s)| g.input(&format!("{prefix}.{n}"), s)).collect();
        GeneratorLeaves { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn bind(&self, b: &mut Bindings, gp: &GeneratorParams) {
        for (id, t) in self.ids.iter().zip(gp.tensors()) {
            b.bind(*id, t);
        }
    }

    pub fn bind_tensors(&self, b: &mut Bindings, ts: &[Tensor]) {
        for (id, t) in self.ids.iter().zip(ts) {
            b.bind(*id, t.clone());
        }
    }

    pub fn apply(&self, g: &mut Graph, w: NodeId) -> Result<NodeId> {
        let n_layers = self.ids.len() / 2;
        let mut x = w;
        for i in 0..n_layers {
            x = g.dense(x, self.ids[2 * i], self.ids[2 * i + 1])?;
            if i + 1 < n_layers {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }
}

fn kernel_mean(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
    let c = -1.0 / (2.0 * sigma * sigma);
    let mut s = 0.0;
    for a in x.iter_rows() {
        for b in y.iter_rows() {
            s += (c * dense::sq_dist(a, b)).exp();
        }
    }
    s / (x.rows() * y.rows()) as f64
}

/// Biased squared MMD with the RBF kernel `exp(-|a-b|^2 / 2σ^2)`.
pub fn mmd2(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::usage(format!("mmd2 needs matching [n, P] inputs, got {:?} and {:?}", x.shape(), y.shape())));
    }
    if !(sigma > 0.0) {
        return Err(Error::usage(format!("mmd2 bandwidth must be positive, got {sigma}")));
    }
    let v = kernel_mean(x, x, sigma) + kernel_mean(y, y, sigma) - 2.0 * kernel_mean(x, y, sigma);
    // Round-off can push an exactly-zero discrepancy a hair below zero.
    Ok(v.max(0.0))
}

/// Median of the nonzero pairwise distances within the pooled rows of `x` and `y`.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = x.iter_rows().chain(y.iter_rows()).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let v = dense::dist(rows[i], rows[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Graph for `mmd2(X, Y)` where `X` is a graph node and `Y`, the bandwidth
/// factor `-1/(2σ²)` are frozen inputs.
struct MmdGraph {
    graph: Graph,
    leaves: GeneratorLeaves,
    latents: NodeId,
    real: NodeId,
    neg_inv: NodeId,
    loss: NodeId,
}

fn sq_dist_matrix(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let n = g.shape(a)[0];
    let an = g.dot(a, a)?; // [n,1]
    let bn = g.dot(b, b)?; // [m,1]
    let bt = g.transpose(bn)?; // [1,m]
    let brep = g.repeat_row(bt, n)?; // [n,m]
    let bt2 = g.transpose(b)?;
    let ab = g.matmul(a, bt2)?;
    let ab2 = g.scale(ab, -2.0)?;
    let s = g.add(ab2, an)?;
    g.add(s, brep)
}

fn kernel_mean_node(g: &mut Graph, a: NodeId, b: NodeId, neg_inv: NodeId) -> Result<NodeId> {
    let d = sq_dist_matrix(g, a, b)?;
    let z = g.mul(d, neg_inv)?;
    let k = g.exp(z)?;
    g.mean(k)
}

impl MmdGraph {
    fn build(gp: &GeneratorParams, batch: usize, p: usize) -> Result<Self> {
        let mut g = Graph::new();
        let leaves = GeneratorLeaves::params(&mut g, gp, "gen");
        let latents = g.input("latents", &[batch, gp.latent_dim()]);
        let real = g.input("real", &[batch, p]);
        let neg_inv = g.input("neg_inv_2sigma2", &[]);
        let x = leaves.apply(&mut g, latents)?;
        let kxx = kernel_mean_node(&mut g, x, x, neg_inv)?;
        let kyy = kernel_mean_node(&mut g, real, real, neg_inv)?;
        let kxy = kernel_mean_node(&mut g, x, real, neg_inv)?;
        let s = g.add(kxx, kyy)?;
        let cross = g.scale(kxy, -2.0)?;
        let loss = g.add(s, cross)?;
        g.name(loss, "mmd2");
        Ok(MmdGraph { graph: g, leaves, latents, real, neg_inv, loss })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub bandwidth_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { iters: 3000, batch: 64, lr: 0.002, seed: 11, bandwidth_every: 100 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    /// `(iteration, mmd2 on the training batch)` every `bandwidth_every` steps.
    pub trace: Vec<(usize, f64)>,
    /// mmd2 on 512 fresh generated/real samples with a median-heuristic bandwidth.
    pub final_mmd2: f64,
}

fn latents(r: &mut Rng, n: usize, dw: usize) -> Tensor {
    rng::normal_matrix(r, n, dw, 1.0)
}

/// Fits the standard generator to samples of `src` by minimizing MMD.
pub fn pretrain_source(world: &World, src: &str, cfg: &PretrainConfig) -> Result<(GeneratorParams, PretrainReport)> {
    world.domain(src)?;
    if cfg.batch < 2 {
        return Err(Error::Config("pretrain batch must be at least 2".into()));
    }
    let mut gp = GeneratorParams::standard(world.p, cfg.seed)?;
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut opt = Adam::new(adam_cfg, &gp.blocks())?;
    let mg = MmdGraph::build(&gp, cfg.batch, world.p)?;
    let mut r = rng::seeded(cfg.seed, rng::stream::PRETRAIN);
    let mut params = gp.tensors();
    let mut sigma = 1.0;
    let mut trace = Vec::new();
    let every = cfg.bandwidth_every.max(1);

    for it in 0..cfg.iters {
        let w = latents(&mut r, cfg.batch, gp.latent_dim());
        let y = world.sample_domain(src, cfg.batch, &mut r)?;
        if it % every == 0 {
            let x = gp.with_tensors(params.clone())?.generate(&w)?;
            sigma = median_bandwidth(&x, &y);
        }
        let mut b = Bindings::new()
            .with(mg.latents, w)
            .with(mg.real, y)
            .with(mg.neg_inv, Tensor::scalar(-1.0 / (2.0 * sigma * sigma)));
        mg.leaves.bind_tensors(&mut b, &params);
        let ev = mg.graph.forward(&b).map_err(|e| abort(it, e))?;
        let loss = ev.value(mg.loss).item();
        if it % every == 0 {
            debug!("pretrain iter {it}: mmd2 {loss:.6} (sigma {sigma:.4})");
            trace.push((it, loss));
        }
        let grads = mg.graph.backward(&ev, mg.loss).map_err(|e| abort(it, e))?;
        let gs: Vec<&Tensor> = mg.leaves.ids().iter().map(|id| grads.get(*id)).collect();
        opt.step(&mut params, &gs).map_err(|e| abort(it, e))?;
    }
    gp = gp.with_tensors(params)?;

    let w = latents(&mut r, 512, gp.latent_dim());
    let x = gp.generate(&w)?;
    let y = world.sample_domain(src, 512, &mut r)?;
    let final_mmd2 = mmd2(&x, &y, median_bandwidth(&x, &y))?;
    info!("pretraining finished after {} iterations, mmd2 {final_mmd2:.5}", cfg.iters);
    Ok((gp, PretrainReport { trace, final_mmd2 }))
}

fn abort(it: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { node } => Error::Numeric(format!("pretraining iteration {it}: non-finite value at {node}")),
        Error::Numeric(m) => Error::Numeric(format!("pretraining iteration {it}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorParams {
        GeneratorParams::init(&[3, 5, 4, 2], 1).unwrap()
    }

    #[test]
    fn zero_params_zero_output() {
        let g = small();
        let z = g.with_tensors(g.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()).unwrap();
        let w = rng::normal_matrix(&mut rng::seeded(0, 0), 4, 3, 1.0);
        assert!(z.generate(&w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_straight_line_mlp() {
        let g = small();
        let w = rng::normal_matrix(&mut rng::seeded(2, 0), 3, 3, 1.0);
        let out = g.generate(&w).unwrap();
        for r in 0..3 {
            let mut x: Vec<f64> = w.row_slice(r).to_vec();
            for (i, l) in g.layers.iter().enumerate() {
                let (o, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
                x = (0..o)
                    .map(|j| {
                        let s: f64 = (0..inp).map(|k| l.weight.get(j, k) * x[k]).sum::<f64>() + l.bias.data()[j];
                        if i + 1 < g.layers.len() { s.tanh() } else { s }
                    })
                    .collect();
            }
            for (a, b) in out.row_slice(r).iter().zip(&x) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn graph_generator_agrees() {
        let gp = small();
        let w = rng::normal_matrix(&mut rng::seeded(4, 0), 6, 3, 1.0);
        let mut g = Graph::new();
        let leaves = GeneratorLeaves::params(&mut g, &gp, "g");
        let win = g.input("w", &[6, 3]);
        let out = leaves.apply(&mut g, win).unwrap();
        let mut b = Bindings::new().with(win, w.clone());
        leaves.bind(&mut b, &gp);
        assert!(g.forward(&b).unwrap().value(out).max_abs_diff(&gp.generate(&w).unwrap()) < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        assert!(matches!(small().generate(&Tensor::zeros(&[2, 4])), Err(Error::Usage(_))));
    }

    #[test]
    fn mmd_closed_forms() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let sigma = 1.5f64;
        let expected = 2.0 - 2.0 * (-2.0 / (2.0 * sigma * sigma)).exp();
        assert!((mmd2(&x, &y, sigma).unwrap() - expected).abs() < 1e-15);
        assert_eq!(mmd2(&x, &x, sigma).unwrap(), 0.0);
        let far = Tensor::matrix(1, 2, vec![100.0, 0.0]).unwrap();
        assert!((mmd2(&x, &far, 1.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_graph_matches_direct() {
        let gp = small();
        let mg = MmdGraph::build(&gp, 5, 2).unwrap();
        let mut r = rng::seeded(8, 0);
        let w = rng::normal_matrix(&mut r, 5, 3, 1.0);
        let y = rng::normal_matrix(&mut r, 5, 2, 1.0);
        let sigma = 0.8;
        let mut b = Bindings::new()
            .with(mg.latents, w.clone())
            .with(mg.real, y.clone())
            .with(mg.neg_inv, Tensor::scalar(-1.0 / (2.0 * sigma * sigma)));
        mg.leaves.bind(&mut b, &gp);
        let got = mg.graph.forward(&b).unwrap().value(mg.loss).item();
        let want = mmd2(&gp.generate(&w).unwrap(), &y, sigma).unwrap();
        assert!((got - want).abs() < 1e-12);
        let rep = crate::autodiff::grad_check(&mg.graph, &b, mg.loss, 1e-5, 1e-4).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn zero_iterations_is_init() {
        let doms = crate::world::benchmark_domains(1, 8, 4.0, 0.7, crate::world::Placement::Offset);
        let w = World::build(1, 8, 16, 32, doms).unwrap();
        let cfg = PretrainConfig { iters: 0, ..Default::default() };
        let (gp, _) = pretrain_source(&w, "src", &cfg).unwrap();
        assert_eq!(gp, GeneratorParams::standard(8, cfg.seed).unwrap());
    }

    #[test]
    fn short_pretraining_is_deterministic() {
        let doms = crate::world::benchmark_domains(1, 8, 4.0, 0.7, crate::world::Placement::Offset);
        let w = World::build(1, 8, 16, 32, doms).unwrap();
        let cfg = PretrainConfig { iters: 20, batch: 16, ..Default::default() };
        let (a, _) = pretrain_source(&w, "src", &cfg).unwrap();
        let (b, _) = pretrain_source(&w, "src", &cfg).unwrap();
        assert_eq!(a, b);
    }
}

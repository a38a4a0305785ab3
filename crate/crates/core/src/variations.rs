//! Stage 1: semantic variations of a target text embedding.
//!
//! Each variation is `v = t + ε·z/|z|`, a point on the sphere of radius ε
//! around the target. Training keeps the variations close to the target in
//! angle (consistency) while pushing the perturbation directions apart
//! (diversity).

use log::{debug, warn};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::{dense, Tensor};

/// Rows with a smaller norm count as degenerate perturbations.
pub const MIN_Z_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct VariationSet {
    pub target: Vec<f64>,
    /// `[K, D]`
    pub z: Tensor,
    pub epsilon: f64,
}

impl VariationSet {
    pub fn k(&self) -> usize {
        self.z.rows()
    }

    /// The `[K, D]` matrix of variations `v^i`.
    pub fn variations(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.z.numel());
        for z in self.z.iter_rows() {
            data.extend(perturb(&self.target, z, self.epsilon)?);
        }
        Ok(Tensor::from_parts(vec![self.k(), self.target.len()], data))
    }
}

pub fn perturb(target: &[f64], z: &[f64], eps: f64) -> Result<Vec<f64>> {
    if target.len() != z.len() {
        return Err(Error::usage(format!("target has {} dims, perturbation {}", target.len(), z.len())));
    }
    let n = dense::norm(z);
    if n <= MIN_Z_NORM {
        return Err(Error::Degenerate(format!("perturbation norm {n:e} is too small")));
    }
    if !(eps > 0.0) {
        return Err(Error::usage(format!("perturbation strength must be positive, got {eps}")));
    }
    Ok(target.iter().zip(z).map(|(t, zi)| t + eps * zi / n).collect())
}

/// Selection matrices picking the first and second member of every unordered pair.
fn pair_selectors(k: usize) -> (Tensor, Tensor) {
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let mut a = vec![0.0; pairs.len() * k];
    let mut b = vec![0.0; pairs.len() * k];
    for (p, (i, j)) in pairs.iter().enumerate() {
        a[p * k + i] = 1.0;
        b[p * k + j] = 1.0;
    }
    (Tensor::from_parts(vec![pairs.len(), k], a), Tensor::from_parts(vec![pairs.len(), k], b))
}

/// `mean_i (1 - cos(t, v_i))` for `t: [1, D]`, `v: [K, D]`.
pub fn cons_node(g: &mut Graph, t: NodeId, v: NodeId) -> Result<NodeId> {
    let k = g.shape(v)[0];
    let trep = g.repeat_row(t, k)?;
    let c = g.cosine(trep, v)?;
    let d = g.one_minus(c)?;
    let l = g.mean(d)?;
    Ok(g.name(l, "loss_cons"))
}

/// Mean over unordered row pairs of `|cos(z_i, z_j)|`; needs `K >= 2`.
pub fn div_node(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let k = g.shape(z)[0];
    if k < 2 {
        return Err(Error::usage("diversity loss needs at least two rows"));
    }
    let (sa, sb) = pair_selectors(k);
    let sa = g.constant(sa);
    let sb = g.constant(sb);
    let a = g.matmul(sa, z)?;
    let b = g.matmul(sb, z)?;
    let c = g.cosine(a, b)?;
    // |c| as the norm of each one-element row; its gradient at 0 is 0.
    let abs = g.l2_norm(c)?;
    let l = g.mean(abs)?;
    Ok(g.name(l, "loss_div"))
}

/// Variations `t + ε·z/|z|` for all rows of `z`.
pub fn perturb_node(g: &mut Graph, t: NodeId, z: NodeId, eps: f64) -> Result<NodeId> {
    let k = g.shape(z)[0];
    let zn = g.normalize_rows(z)?;
    let off = g.scale(zn, eps)?;
    let trep = g.repeat_row(t, k)?;
    g.add(trep, off)
}

/// Stage-1 objective `L_cons + λ_div·L_div` over a trainable `Z`.
pub struct Stage1Graph {
    pub graph: Graph,
    pub target: NodeId,
    pub z: NodeId,
    pub cons: NodeId,
    pub div: Option<NodeId>,
    pub total: NodeId,
}

impl Stage1Graph {
    pub fn build(k: usize, d: usize, eps: f64, lambda_div: f64) -> Result<Self> {
        let mut g = Graph::new();
        let z = g.param("z", &[k, d]);
        let target = g.input("target", &[1, d]);
        let v = perturb_node(&mut g, target, z, eps)?;
        let cons = cons_node(&mut g, target, v)?;
        let (div, total) = if k >= 2 {
            let div = div_node(&mut g, z)?;
            let w = g.scale(div, lambda_div)?;
            (Some(div), g.add(cons, w)?)
        } else {
            (None, cons)
        };
        g.name(total, "loss_s1");
        Ok(Stage1Graph { graph: g, target, z, cons, div, total })
    }

    pub fn bindings(&self, target: &[f64], z: &Tensor) -> Bindings {
        Bindings::new()
            .with(self.target, Tensor::from_parts(vec![1, target.len()], target.to_vec()))
            .with(self.z, z.clone())
    }
}

pub fn loss_cons(target: &[f64], v: &Tensor) -> Result<f64> {
    if dense::norm(target) <= 1e-12 {
        return Err(Error::Degenerate("consistency loss with a zero target".into()));
    }
    if v.rank() != 2 || v.cols() != target.len() {
        return Err(Error::usage(format!("variations must be [K, {}], got {:?}", target.len(), v.shape())));
    }
    let mut g = Graph::new();
    let t = g.input("target", &[1, target.len()]);
    let vi = g.input("v", v.shape());
    let l = cons_node(&mut g, t, vi)?;
    let b = Bindings::new()
        .with(t, Tensor::from_parts(vec![1, target.len()], target.to_vec()))
        .with(vi, v.clone());
    Ok(g.forward(&b)?.value(l).item())
}

pub fn loss_div(z: &Tensor) -> Result<f64> {
    if z.rank() != 2 {
        return Err(Error::usage(format!("perturbations must be [K, D], got {:?}", z.shape())));
    }
    if z.rows() < 2 {
        warn!("diversity loss with fewer than two perturbations is 0");
        return Ok(0.0);
    }
    if z.iter_rows().any(|r| dense::norm(r) <= MIN_Z_NORM) {
        return Err(Error::Degenerate("diversity loss with a zero perturbation row".into()));
    }
    let mut g = Graph::new();
    let zi = g.input("z", z.shape());
    let l = div_node(&mut g, zi)?;
    Ok(g.forward(&Bindings::new().with(zi, z.clone()))?.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Config {
    pub k: usize,
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_div: f64,
    /// Perturbation strength; `None` uses the target's norm.
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            k: 6,
            iters: 2000,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            lambda_div: 1.0,
            epsilon: None,
            seed: 3,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Log {
    pub iter: usize,
    pub loss_cons: f64,
    pub loss_div: f64,
}

/// Optimizes `K` perturbations of `target` with Adam on `L_cons + λ_div·L_div`.
pub fn learn_variations(target: &[f64], cfg: &Stage1Config) -> Result<(VariationSet, Vec<Stage1Log>)> {
    let d = target.len();
    if cfg.k == 0 {
        return Err(Error::Config("stage1.k must be at least 1".into()));
    }
    if cfg.k > d {
        return Err(Error::Config(format!("stage1.k = {} exceeds the embedding dimension {d}", cfg.k)));
    }
    if dense::norm(target) <= 1e-12 {
        return Err(Error::Degenerate("target embedding is zero".into()));
    }
    if cfg.lambda_div < 0.0 {
        return Err(Error::Config("stage1.lambda_div must be non-negative".into()));
    }
    let eps = cfg.epsilon.unwrap_or_else(|| dense::norm(target));
    if !(eps > 0.0) {
        return Err(Error::Config(format!("perturbation strength must be positive, got {eps}")));
    }
    let s1 = Stage1Graph::build(cfg.k, d, eps, cfg.lambda_div)?;
    let mut z = vec![rng::normal_matrix(&mut rng::seeded(cfg.seed, rng::stream::VARIATIONS), cfg.k, d, 1.0)];
    let adam_cfg = AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
    let mut opt = Adam::new(adam_cfg, &[("z".into(), vec![cfg.k, d])])?;
    let mut log = Vec::new();
    let every = cfg.log_every.max(1);

    for it in 0..=cfg.iters {
        let ev = s1.graph.forward(&s1.bindings(target, &z[0])).map_err(|e| abort(it, e))?;
        let entry = Stage1Log {
            iter: it,
            loss_cons: ev.value(s1.cons).item(),
            loss_div: s1.div.map_or(0.0, |n| ev.value(n).item()),
        };
        if it % every == 0 || it == cfg.iters {
            debug!("stage1 iter {it}: cons {:.6} div {:.6}", entry.loss_cons, entry.loss_div);
            log.push(entry);
        }
        if it == cfg.iters {
            break;
        }
        let grads = s1.graph.backward(&ev, s1.total).map_err(|e| abort(it, e))?;
        opt.step(&mut z, &[grads.get(s1.z)]).map_err(|e| abort(it, e))?;
        renormalize_collapsed(&mut z[0], it);
    }
    let z = z.pop().unwrap();
    Ok((VariationSet { target: target.to_vec(), z, epsilon: eps }, log))
}

fn renormalize_collapsed(z: &mut Tensor, it: usize) {
    let d = z.cols();
    for (r, row) in z.data_mut().chunks_mut(d).enumerate() {
        let n = dense::norm(row);
        if n <= MIN_Z_NORM {
            warn!("stage1 iter {it}: perturbation {r} collapsed (norm {n:e}); reset to unit norm");
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            } else {
                row.iter_mut().enumerate().for_each(|(c, x)| *x = if c == r % d { 1.0 } else { 0.0 });
            }
        }
    }
}

fn abort(it: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { node } => Error::Numeric(format!("stage 1 iteration {it}: non-finite value at {node}")),
        Error::Numeric(m) => Error::Numeric(format!("stage 1 iteration {it}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perturb_examples() {
        assert_eq!(perturb(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), vec![1.0, 1.0]);
        let v = perturb(&[1.0, 2.0], &[2.0, 4.0], 5f64.sqrt()).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15 && (v[1] - 4.0).abs() < 1e-15);
        let v = perturb(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((dense::cosine(&[1.0, 0.0], &v) - 0.70711).abs() < 1e-5);
        assert!(matches!(perturb(&[1.0, 0.0], &[0.0, 1e-9], 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cons_examples() {
        let t = [1.0, 0.0];
        assert!(loss_cons(&t, &m(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap().abs() < 1e-15);
        assert!((loss_cons(&t, &m(&[&[-1.0, 0.0]])).unwrap() - 2.0).abs() < 1e-15);
        let l = loss_cons(&t, &m(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        assert!((l - 0.14645).abs() < 1e-5);
        assert!(matches!(loss_cons(&[0.0, 0.0], &m(&[&[1.0, 0.0]])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn div_examples() {
        let basis = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(loss_div(&basis).unwrap(), 0.0);
        let same = m(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]);
        assert!((loss_div(&same).unwrap() - 1.0).abs() < 1e-15);
        // pairs (0,1)=0, (0,2)=0, (1,2)=|-1|
        let mixed = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, -2.0]]);
        assert!((loss_div(&mixed).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(loss_div(&m(&[&[1.0, 0.0]])).unwrap(), 0.0);
    }

    #[test]
    fn div_gradient_matches_differences() {
        let z = rng::normal_matrix(&mut rng::seeded(1, 0), 3, 8, 1.0);
        let mut g = Graph::new();
        let zi = g.param("z", &[3, 8]);
        let l = div_node(&mut g, zi).unwrap();
        let rep = grad_check(&g, &Bindings::new().with(zi, z), l, 1e-5, 1e-4).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn single_variation_goes_collinear() {
        let t = [0.5, -1.0, 2.0, 0.3];
        let cfg = Stage1Config { k: 1, ..Default::default() };
        let (set, log) = learn_variations(&t, &cfg).unwrap();
        let last = log.last().unwrap();
        assert!(last.loss_cons < 1e-3, "{last:?}");
        assert_eq!(last.loss_div, 0.0);
        assert_eq!(set.k(), 1);
    }

    #[test]
    fn rejects_more_variations_than_dims() {
        let cfg = Stage1Config { k: 5, ..Default::default() };
        assert!(matches!(learn_variations(&[1.0, 2.0, 3.0, 4.0], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let t: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let cfg = Stage1Config { iters: 50, ..Default::default() };
        assert_eq!(learn_variations(&t, &cfg).unwrap().0, learn_variations(&t, &cfg).unwrap().0);
    }
}

//! A frozen toy joint embedding space.
//!
//! Domains are axis-aligned Gaussians in data space `R^P`. A fixed two-layer
//! network maps data to embeddings in `R^D`; the "text" embedding of a domain
//! is simply the image embedding of its mean, so text and image agree by
//! construction.

use std::collections::HashSet;

use log::warn;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, normal, Rng};
use crate::tensor::{dense, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// How the two benchmark domain means are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Source mean ~ N(0, I), target = source + separation·u.
    Offset,
    /// Means at ±separation/2·u around the origin.
    Centered,
}

/// Source/target pair at a given distance along a random unit direction `u`.
pub fn benchmark_domains(seed: u64, p: usize, separation: f64, scale: f64, placement: Placement) -> Vec<DomainSpec> {
    let mut r = rng::seeded(seed, rng::stream::DOMAINS);
    let anchor = rng::normal_vec(&mut r, p);
    let mut u = rng::normal_vec(&mut r, p);
    let n = dense::norm(&u);
    u.iter_mut().for_each(|x| *x /= n);
    let (src, trg): (Vec<f64>, Vec<f64>) = match placement {
        Placement::Offset => (
            anchor.clone(),
            anchor.iter().zip(&u).map(|(a, d)| a + separation * d).collect(),
        ),
        Placement::Centered => (
            u.iter().map(|d| -0.5 * separation * d).collect(),
            u.iter().map(|d| 0.5 * separation * d).collect(),
        ),
    };
    vec![
        DomainSpec { name: "src".into(), mean: src, scale: vec![scale; p] },
        DomainSpec { name: "trg".into(), mean: trg, scale: vec![scale; p] },
    ]
}

/// Frozen `W2·tanh(W1·x + b1) + b2`. Biases are stored as `[1, n]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Leaf ids of an encoder embedded in a graph as frozen inputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLeaves {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl EncoderLeaves {
    pub fn declare(g: &mut Graph, enc: &Encoder) -> Self {
        EncoderLeaves {
            w1: g.input("enc.w1", enc.w1.shape()),
            b1: g.input("enc.b1", enc.b1.shape()),
            w2: g.input("enc.w2", enc.w2.shape()),
            b2: g.input("enc.b2", enc.b2.shape()),
        }
    }

    pub fn bind(&self, b: &mut Bindings, enc: &Encoder) {
        b.bind(self.w1, enc.w1.clone())
            .bind(self.b1, enc.b1.clone())
            .bind(self.w2, enc.w2.clone())
            .bind(self.b2, enc.b2.clone());
    }

    pub fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Encodes every row of `x: [N, P]`.
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.dense(x, self.w1, self.b1)?;
        let h = g.tanh(h)?;
        g.dense(h, self.w2, self.b2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub p: usize,
    pub d: usize,
    pub h: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub encoder: Encoder,
}

fn init_layer(r: &mut Rng, out: usize, fan_in: usize) -> (Tensor, Tensor) {
    let std = 1.0 / (fan_in as f64).sqrt();
    (rng::normal_matrix(r, out, fan_in, std), rng::normal_matrix(r, 1, out, std))
}

impl World {
    pub fn build(seed: u64, p: usize, d: usize, h: usize, domains: Vec<DomainSpec>) -> Result<World> {
        if p == 0 || d == 0 || h == 0 {
            return Err(Error::Config(format!("world dimensions must be positive (P={p}, D={d}, h={h})")));
        }
        if domains.len() < 2 {
            return Err(Error::Config(format!("a world needs at least 2 domains, got {}", domains.len())));
        }
        let mut seen = HashSet::new();
        for dom in &domains {
            if !seen.insert(dom.name.as_str()) {
                return Err(Error::Config(format!("duplicate domain name `{}`", dom.name)));
            }
            if dom.mean.len() != p || dom.scale.len() != p {
                return Err(Error::Config(format!("domain `{}` must have {p}-dimensional mean and scale", dom.name)));
            }
            if dom.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || dom.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("domain `{}` needs finite mean and positive scales", dom.name)));
            }
        }
        let mut r = rng::seeded(seed, rng::stream::ENCODER);
        let (w1, b1) = init_layer(&mut r, h, p);
        let (w2, b2) = init_layer(&mut r, d, h);
        Ok(World { p, d, h, seed, domains, encoder: Encoder { w1, b1, w2, b2 } })
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::usage(format!("unknown domain `{name}`")))
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.p {
            return Err(Error::usage(format!("encoder expects {} values, got {}", self.p, x.len())));
        }
        Ok(self.encode_rows(&Tensor::from_parts(vec![1, self.p], x.to_vec())).into_data())
    }

    /// Row-wise encoding of an `[N, P]` matrix.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.p {
            return Err(Error::usage(format!("encoder expects [N, {}], got {:?}", self.p, x.shape())));
        }
        Ok(self.encode_rows(x))
    }

    fn encode_rows(&self, x: &Tensor) -> Tensor {
        let e = &self.encoder;
        let n = x.rows();
        let w1t = dense::transpose(e.w1.data(), self.h, self.p);
        let mut hid = dense::matmul(x.data(), &w1t, n, self.p, self.h);
        for row in hid.chunks_mut(self.h) {
            for (v, b) in row.iter_mut().zip(e.b1.data()) {
                *v = (*v + b).tanh();
            }
        }
        let w2t = dense::transpose(e.w2.data(), self.d, self.h);
        let mut out = dense::matmul(&hid, &w2t, n, self.h, self.d);
        for row in out.chunks_mut(self.d) {
            row.iter_mut().zip(e.b2.data()).for_each(|(v, b)| *v += b);
        }
        Tensor::from_parts(vec![n, self.d], out)
    }

    pub fn encode_text(&self, name: &str) -> Result<Vec<f64>> {
        let mean = self.domain(name)?.mean.clone();
        self.encode_image(&mean)
    }

    pub fn sample_domain(&self, name: &str, n: usize, rng: &mut Rng) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::usage("sample count must be at least 1"));
        }
        let dom = self.domain(name)?;
        let mut data = Vec::with_capacity(n * self.p);
        for _ in 0..n {
            for (m, s) in dom.mean.iter().zip(&dom.scale) {
                data.push(m + s * normal(rng));
            }
        }
        Ok(Tensor::from_parts(vec![n, self.p], data))
    }

    /// Cosine between two text embeddings; warns when the pair is nearly parallel,
    /// which leaves the guiding direction ill-conditioned.
    pub fn text_separation(&self, a: &str, b: &str) -> Result<f64> {
        let c = dense::cosine(&self.encode_text(a)?, &self.encode_text(b)?);
        if c >= 0.99 {
            warn!("text embeddings of `{a}` and `{b}` have cosine {c:.4}; consider another world seed");
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(p: usize) -> Vec<DomainSpec> {
        benchmark_domains(7, p, 4.0, 0.7, Placement::Offset)
    }

    #[test]
    fn same_seed_same_encoder() {
        let a = World::build(7, 8, 16, 32, two(8)).unwrap();
        let b = World::build(7, 8, 16, 32, two(8)).unwrap();
        assert_eq!(a.encoder, b.encoder);
        let c = World::build(8, 8, 16, 32, two(8)).unwrap();
        assert_ne!(a.encoder.w1.data(), c.encoder.w1.data());
    }

    #[test]
    fn rejects_bad_domain_lists() {
        assert!(matches!(World::build(1, 8, 16, 32, vec![]), Err(Error::Config(_))));
        let mut d = two(8);
        d[1].name = "src".into();
        assert!(matches!(World::build(1, 8, 16, 32, d), Err(Error::Config(_))));
    }

    #[test]
    fn zero_encoder_gives_zero() {
        let mut w = World::build(1, 4, 3, 5, two(4)).unwrap();
        for t in [&mut w.encoder.w1, &mut w.encoder.b1, &mut w.encoder.w2, &mut w.encoder.b2] {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(w.encode_image(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn encoder_matches_straight_line_formula() {
        let w = World::build(11, 8, 16, 32, two(8)).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let e = &w.encoder;
        let mut hid = vec![0.0; 32];
        for (j, hj) in hid.iter_mut().enumerate() {
            let mut s = e.b1.data()[j];
            for i in 0..8 {
                s += e.w1.get(j, i) * x[i];
            }
            *hj = s.tanh();
        }
        let got = w.encode_image(&x).unwrap();
        for (k, g) in got.iter().enumerate() {
            let mut s = e.b2.data()[k];
            for j in 0..32 {
                s += e.w2.get(k, j) * hid[j];
            }
            assert!((g - s).abs() < 1e-13);
        }
        assert!(w.encode_image(&x[..7]).is_err());
    }

    #[test]
    fn text_is_image_of_mean() {
        let w = World::build(3, 8, 16, 32, two(8)).unwrap();
        let t = w.encode_text("src").unwrap();
        assert_eq!(t, w.encode_image(&w.domains[0].mean).unwrap());
        assert!(w.encode_text("nope").is_err());
        assert!(w.text_separation("src", "trg").unwrap() < 0.99);
    }

    #[test]
    fn graph_encoder_agrees_with_direct() {
        let w = World::build(5, 8, 16, 32, two(8)).unwrap();
        let x = w.sample_domain("trg", 3, &mut rng::seeded(1, 0)).unwrap();
        let mut g = Graph::new();
        let xin = g.input("x", &[3, 8]);
        let leaves = EncoderLeaves::declare(&mut g, &w.encoder);
        let out = leaves.apply(&mut g, xin).unwrap();
        let mut b = Bindings::new().with(xin, x.clone());
        leaves.bind(&mut b, &w.encoder);
        let ev = g.forward(&b).unwrap();
        assert!(ev.value(out).max_abs_diff(&w.encode_batch(&x).unwrap()) < 1e-13);
    }

    #[test]
    fn sampling_is_seeded_and_unbiased() {
        let doms = vec![
            DomainSpec { name: "a".into(), mean: vec![1.0, -2.0, 0.5, 3.0], scale: vec![0.5; 4] },
            DomainSpec { name: "b".into(), mean: vec![0.0; 4], scale: vec![1.0; 4] },
        ];
        let w = World::build(2, 4, 3, 5, doms).unwrap();
        let a = w.sample_domain("a", 10_000, &mut rng::seeded(9, 0)).unwrap();
        let b = w.sample_domain("a", 10_000, &mut rng::seeded(9, 0)).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            let m: f64 = (0..10_000).map(|r| a.get(r, c)).sum::<f64>() / 10_000.0;
            assert!((m - w.domains[0].mean[c]).abs() < 4.0 * 0.5 / 100.0);
        }
    }

    #[test]
    fn tiny_scale_collapses_to_mean() {
        let doms = vec![
            DomainSpec { name: "a".into(), mean: vec![1.0, 2.0], scale: vec![1e-300; 2] },
            DomainSpec { name: "b".into(), mean: vec![0.0; 2], scale: vec![1.0; 2] },
        ];
        let w = World::build(2, 2, 3, 5, doms).unwrap();
        let s = w.sample_domain("a", 5, &mut rng::seeded(1, 0)).unwrap();
        assert!(s.iter_rows().all(|r| r == [1.0, 2.0]));
    }
}

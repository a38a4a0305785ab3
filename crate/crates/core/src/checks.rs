//! Gradient suite: every loss graph checked against central differences at
//! random configurations.

use rand::Rng as _;

use crate::adapt::{dir_node, dm_node, ewc_node, rel_node, AdaptConfig, DirectionKind, DirectionSet, FisherDiag, LossMode, Stage2Graph};
use crate::autodiff::{grad_check, Bindings, Graph, NodeId};
use crate::error::Result;
use crate::generator::GeneratorParams;
use crate::rng::{self, Rng};
use crate::tensor::{dense, Tensor};
use crate::variations::{cons_node, div_node, Stage1Graph};
use crate::world::{benchmark_domains, Placement, World};

pub const LOSSES: [&str; 8] = ["L_dir", "L_cons", "L_div", "L_dm", "L_EWC", "L_rel", "L_S1", "L_S2"];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub loss: &'static str,
    pub configs: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn m(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    rng::normal_matrix(r, rows, cols, 1.0)
}

/// One random instance of `loss`: the graph, its bindings and output.
fn instance(loss: &str, r: &mut Rng) -> Result<(Graph, Bindings, NodeId)> {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let n = r.random_range(2..=5usize);
    let d = r.random_range(2..=16usize);
    let out = match loss {
        "L_dir" => {
            let di = g.param("di", &[n, d]);
            let dt = g.input("dt", &[1, d]);
            b.bind(di, m(r, n, d));
            b.bind(dt, m(r, 1, d));
            dir_node(&mut g, di, dt)?
        }
        "L_cons" => {
            let t = g.input("t", &[1, d]);
            let v = g.param("v", &[n, d]);
            b.bind(t, m(r, 1, d));
            b.bind(v, m(r, n, d));
            cons_node(&mut g, t, v)?
        }
        "L_div" => {
            let z = g.param("z", &[n, d]);
            b.bind(z, m(r, n, d));
            div_node(&mut g, z)?
        }
        "L_dm" => {
            let rows = r.random_range(2..=7usize);
            let di = g.param("di", &[n, d]);
            let ts = g.input("ts", &[rows, d]);
            b.bind(di, m(r, n, d));
            b.bind(ts, m(r, rows, d));
            dm_node(&mut g, di, ts, 1e3, r.random_bool(0.5))?.total
        }
        "L_EWC" => {
            let blocks = r.random_range(1..=3usize);
            let (mut t, mut s, mut f) = (vec![], vec![], vec![]);
            for i in 0..blocks {
                let shape = [r.random_range(1..=4usize), r.random_range(1..=4usize)];
                t.push(g.param(&format!("t{i}"), &shape));
                s.push(g.input(&format!("s{i}"), &shape));
                f.push(g.input(&format!("f{i}"), &shape));
                b.bind(t[i], m(r, shape[0], shape[1]));
                b.bind(s[i], m(r, shape[0], shape[1]));
                b.bind(f[i], m(r, shape[0], shape[1]).map(f64::abs));
            }
            ewc_node(&mut g, &t, &s, &f)?
        }
        "L_rel" => {
            let xs = g.param("xs", &[n, d]);
            let xt = g.param("xt", &[n, d]);
            b.bind(xs, m(r, n, d).map(|v| 0.5 * v));
            b.bind(xt, m(r, n, d).map(|v| 0.5 * v));
            rel_node(&mut g, xs, xt)?
        }
        "L_S1" => {
            let k = n.min(d);
            let t = rng::normal_vec(r, d);
            let s1 = Stage1Graph::build(k, d, dense::norm(&t), 1.0)?;
            let b = s1.bindings(&t, &m(r, k, d));
            return Ok((s1.graph, b, s1.total));
        }
        "L_S2" => return stage2_instance(r),
        other => unreachable!("unknown loss {other}"),
    };
    Ok((g, b, out))
}

fn stage2_instance(r: &mut Rng) -> Result<(Graph, Bindings, NodeId)> {
    let seed = r.random::<u32>() as u64;
    let world = World::build(seed, 8, 16, 32, benchmark_domains(seed, 8, 4.0, 0.7, Placement::Offset))?;
    // Narrower hidden layers than the benchmark generator keep the
    // coordinate-wise differences affordable; the graph is otherwise identical.
    let widths = [8, r.random_range(8..=24usize), r.random_range(8..=24usize), 8];
    let g_src = GeneratorParams::init(&widths, seed)?;
    let cfg = AdaptConfig { loss_mode: LossMode::Full, ..AdaptConfig::default() };
    let texts = DirectionSet::new(m(r, 7, 16), DirectionKind::Text)?;
    let fisher = FisherDiag {
        blocks: g_src
            .tensors()
            .iter()
            .map(|t| Tensor::from_parts(t.shape().to_vec(), (0..t.numel()).map(|_| 1e-4 * r.random::<f64>()).collect()))
            .collect(),
        samples: 1,
    };
    let s2 = Stage2Graph::build(&world, &g_src, 7, true, &cfg)?;
    let mut b = s2.frozen_bindings(&world, &g_src, &texts, Some(&fisher));
    let theta: Vec<Tensor> = g_src
        .tensors()
        .iter()
        .map(|t| {
            let noise = rng::normal_matrix(r, 1, t.numel(), 0.05);
            let data = t.data().iter().zip(noise.data()).map(|(a, e)| a + e).collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        })
        .collect();
    s2.theta_t.bind_tensors(&mut b, &theta);
    b.bind(s2.latents, m(r, cfg.n, g_src.latent_dim()));
    Ok((s2.graph, b, s2.total))
}

/// Checks every loss at `configs` random configurations.
pub fn gradient_suite(configs: usize, seed: u64, h: f64, tolerance: f64) -> Result<Vec<SuiteResult>> {
    let mut r = rng::seeded(seed, rng::stream::CHECKS);
    LOSSES
        .iter()
        .map(|&loss| {
            let mut res = SuiteResult { loss, configs, checked: 0, max_rel_error: 0.0, pass: true };
            for _ in 0..configs {
                let (g, b, out) = instance(loss, &mut r)?;
                let rep = grad_check(&g, &b, out, h, tolerance)?;
                res.checked += rep.checked;
                res.max_rel_error = res.max_rel_error.max(rep.max_rel_error);
            }
            res.pass = res.max_rel_error < tolerance;
            Ok(res)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let res = gradient_suite(2, 5, 1e-5, 1e-4).unwrap();
        assert_eq!(res.len(), LOSSES.len());
        for r in res {
            assert!(r.pass, "{r:?}");
        }
    }
}

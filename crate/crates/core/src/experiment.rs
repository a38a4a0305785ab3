//! End-to-end pipeline shared by the CLI and the acceptance suite.

use log::info;

use crate::adapt::{self, AdaptConfig, AdaptOutcome, FisherDiag, LossMode};
use crate::config::RunConfig;
use crate::error::Result;
use crate::generator::{self, GeneratorParams, PretrainReport};
use crate::metrics::{self, Diversity};
use crate::rng;
use crate::tensor::Tensor;
use crate::variations::{self, Stage1Log, VariationSet};
use crate::world::World;

/// Everything that precedes Stage 2 and is shared by all of its runs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub world: World,
    pub g_src: GeneratorParams,
    pub pretrain: PretrainReport,
    pub variations: VariationSet,
    pub stage1_log: Vec<Stage1Log>,
    pub fisher: FisherDiag,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let world = cfg.build_world()?;
    let (src, trg) = (&cfg.world.source, &cfg.world.target);
    world.text_separation(src, trg)?;
    let (g_src, pretrain) = generator::pretrain_source(&world, src, &cfg.pretrain_config())?;
    let t_trg = world.encode_text(trg)?;
    let (variations, stage1_log) = variations::learn_variations(&t_trg, &cfg.stage1_config())?;
    let t_src = world.encode_text(src)?;
    let fisher = adapt::estimate_fisher(&world, &g_src, &t_src, cfg.stage2.fisher_samples, cfg.stage2.seed)?;
    Ok(Prepared { world, g_src, pretrain, variations, stage1_log, fisher })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationPoint {
    pub psi: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Metrics on a large held-out sample after training.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalMetrics {
    pub sse: f64,
    pub diversity: Diversity,
    pub frechet: f64,
    pub precision_recall: Vec<TruncationPoint>,
}

pub fn eval_latents(cfg: &RunConfig, latent_dim: usize) -> Tensor {
    rng::normal_matrix(&mut rng::seeded(cfg.eval.seed, rng::stream::EVAL_LATENTS), cfg.eval.samples, latent_dim, 1.0)
}

pub fn final_metrics(world: &World, gp: &GeneratorParams, cfg: &RunConfig) -> Result<FinalMetrics> {
    let w = eval_latents(cfg, gp.latent_dim());
    let feats = world.encode_batch(&gp.generate(&w)?)?;
    let real_x = world.sample_domain(&cfg.world.target, cfg.eval.samples, &mut rng::seeded(cfg.eval.seed, rng::stream::EVAL_REAL))?;
    let real = world.encode_batch(&real_x)?;
    let mut pr = Vec::new();
    for &psi in &cfg.eval.truncation {
        let f = world.encode_batch(&gp.generate(&w.map(|v| v * psi))?)?;
        let (precision, recall) = metrics::precision_recall(&real, &f, cfg.eval.nn_k)?;
        pr.push(TruncationPoint { psi, precision, recall });
    }
    Ok(FinalMetrics {
        sse: metrics::sse_compactness(&feats),
        diversity: metrics::intra_cluster_diversity(&feats, cfg.eval.k)?,
        frechet: metrics::frechet_distance(&feats, &real)?,
        precision_recall: pr,
    })
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub mode: LossMode,
    pub seed: u64,
    pub outcome: AdaptOutcome,
    pub metrics: FinalMetrics,
}

pub fn arm_config(cfg: &RunConfig, mode: LossMode, seed: u64) -> AdaptConfig {
    AdaptConfig { loss_mode: mode, seed, ..cfg.adapt_config() }
}

pub fn run_arm(prep: &Prepared, cfg: &RunConfig, acfg: &AdaptConfig) -> Result<ArmResult> {
    let outcome = adapt::adapt(
        &prep.world,
        &prep.g_src,
        Some(&prep.variations),
        &cfg.world.source,
        &cfg.world.target,
        acfg,
        Some(&prep.fisher),
    )?;
    let metrics = final_metrics(&prep.world, &outcome.generator, cfg)?;
    info!(
        "{} seed {}: diversity avg {:.4} all {:.4}, sse {:.2}",
        acfg.loss_mode, acfg.seed, metrics.diversity.avg, metrics.diversity.all, metrics.sse
    );
    Ok(ArmResult { mode: acfg.loss_mode, seed: acfg.seed, outcome, metrics })
}

/// All four loss modes for every configured seed, seed-major.
pub fn ablation(prep: &Prepared, cfg: &RunConfig) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for &seed in &cfg.ablation.seeds {
        for mode in LossMode::ALL {
            out.push(run_arm(prep, cfg, &arm_config(cfg, mode, seed))?);
        }
    }
    Ok(out)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-mode summary of an ablation: median and spread of the final diversities.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: LossMode,
    pub median_avg: f64,
    /// Standard deviation of the per-seed `avg` values.
    pub std_avg_over_seeds: f64,
    pub median_all: f64,
    /// Mean over seeds of the per-pair standard deviation.
    pub std_all_over_pairs: f64,
    pub median_sse: f64,
}

pub fn summarize(results: &[ArmResult]) -> Vec<AblationRow> {
    LossMode::ALL
        .iter()
        .filter_map(|&mode| {
            let rs: Vec<&ArmResult> = results.iter().filter(|r| r.mode == mode).collect();
            if rs.is_empty() {
                return None;
            }
            let mut avg: Vec<f64> = rs.iter().map(|r| r.metrics.diversity.avg).collect();
            let mean = avg.iter().sum::<f64>() / avg.len() as f64;
            let std = (avg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / avg.len() as f64).sqrt();
            let mut all: Vec<f64> = rs.iter().map(|r| r.metrics.diversity.all).collect();
            let pair_std = rs.iter().map(|r| r.metrics.diversity.all_std).sum::<f64>() / rs.len() as f64;
            let mut sse: Vec<f64> = rs.iter().map(|r| r.metrics.sse).collect();
            Some(AblationRow {
                mode,
                median_avg: median(&mut avg),
                std_avg_over_seeds: std,
                median_all: median(&mut all),
                std_all_over_pairs: pair_std,
                median_sse: median(&mut sse),
            })
        })
        .collect()
}

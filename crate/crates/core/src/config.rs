//! Run configuration: a TOML document with one table per stage.
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected, and type errors name the offending key path
//! (e.g. `stage2.lambda_ewc`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdaptConfig, LossMode};
use crate::error::{Error, Result};
use crate::generator::PretrainConfig;
use crate::variations::Stage1Config;
use crate::world::{benchmark_domains, DomainSpec, Placement, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Default for DomainEntry {
    fn default() -> Self {
        DomainEntry { name: String::new(), mean: vec![], scale: vec![] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub seed: u64,
    pub p: usize,
    pub d: usize,
    pub hidden: usize,
    /// Distance between the two generated domain means.
    pub separation: f64,
    pub scale: f64,
    pub placement: Placement,
    /// Explicit domains; when empty, a `src`/`trg` pair is generated from the fields above.
    pub domains: Vec<DomainEntry>,
    pub source: String,
    pub target: String,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            seed: 11,
            p: 8,
            d: 16,
            hidden: 32,
            separation: 4.0,
            scale: 0.7,
            placement: Placement::Offset,
            domains: vec![],
            source: "src".into(),
            target: "trg".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub bandwidth_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection { iters: d.iters, batch: d.batch, lr: d.lr, seed: d.seed, bandwidth_every: d.bandwidth_every }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub k: usize,
    pub iters: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub lambda_div: f64,
    /// Defaults to the norm of the target embedding.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let d = Stage1Config::default();
        Stage1Section {
            k: d.k,
            iters: d.iters,
            lr: d.lr,
            betas: [d.beta1, d.beta2],
            lambda_div: d.lambda_div,
            epsilon: d.epsilon,
            seed: d.seed,
            log_every: d.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub n: usize,
    pub iters: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub lambda_cov: f64,
    pub lambda_ewc: f64,
    pub lambda_rel: f64,
    pub fisher_samples: usize,
    pub eval_every: usize,
    pub loss_mode: LossMode,
    pub gram_normalize: bool,
    pub seed: u64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Stage2Section {
            n: d.n,
            iters: d.iters,
            lr: d.lr,
            betas: [d.beta1, d.beta2],
            lambda_cov: d.lambda_cov,
            lambda_ewc: d.lambda_ewc,
            lambda_rel: d.lambda_rel,
            fisher_samples: d.fisher_samples,
            eval_every: d.eval_every,
            loss_mode: d.loss_mode,
            gram_normalize: d.gram_normalize,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Clusters for intra-cluster diversity.
    pub k: usize,
    /// Samples generated for final metrics.
    pub samples: usize,
    /// Latent scales for the precision/recall sweep.
    pub truncation: Vec<f64>,
    /// Neighbour rank defining kNN-manifold radii.
    pub nn_k: usize,
    /// Held-out latents used for the periodic metrics during adaptation.
    pub periodic_samples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 10, samples: 1000, truncation: vec![0.5, 0.7, 1.0], nn_k: 3, periodic_samples: 256, seed: 999 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Stage-2 seeds; each loss mode is trained once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { seeds: vec![100, 101, 102, 103, 104] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<String>,
    pub world: WorldSection,
    pub pretrain: PretrainSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

fn key_err(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigKey { key: key.into(), msg: msg.into() }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            if path.is_empty() || path == "." {
                Error::Config(inner.trim_end().to_string())
            } else {
                key_err(&path, inner.trim_end())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        for (k, v) in [("world.p", w.p), ("world.d", w.d), ("world.hidden", w.hidden)] {
            if v == 0 {
                return Err(key_err(k, "must be at least 1"));
            }
        }
        if w.domains.is_empty() {
            if !(w.separation > 0.0) || !w.separation.is_finite() {
                return Err(key_err("world.separation", "must be positive"));
            }
            if !(w.scale > 0.0) || !w.scale.is_finite() {
                return Err(key_err("world.scale", "must be positive"));
            }
        }
        let names: Vec<&str> = self.domain_names();
        for (k, n) in [("world.source", &w.source), ("world.target", &w.target)] {
            if !names.contains(&n.as_str()) {
                return Err(key_err(k, format!("domain `{n}` is not defined")));
            }
        }
        if w.source == w.target {
            return Err(key_err("world.target", "must differ from world.source"));
        }
        if self.pretrain.batch < 2 {
            return Err(key_err("pretrain.batch", "must be at least 2"));
        }
        let s1 = &self.stage1;
        if s1.k == 0 {
            return Err(key_err("stage1.k", "must be at least 1"));
        }
        if s1.k > w.d {
            return Err(key_err("stage1.k", format!("{} exceeds the embedding dimension {}", s1.k, w.d)));
        }
        if !(s1.lambda_div >= 0.0) {
            return Err(key_err("stage1.lambda_div", "must be >= 0"));
        }
        if let Some(e) = s1.epsilon {
            if !(e > 0.0) {
                return Err(key_err("stage1.epsilon", "must be positive"));
            }
        }
        check_adam("stage1", s1.lr, s1.betas)?;
        check_adam("stage2", self.stage2.lr, self.stage2.betas)?;
        check_adam("pretrain", self.pretrain.lr, [0.0, 0.99])?;
        self.adapt_config().validate()?;
        let e = &self.eval;
        if e.k == 0 || e.k > e.samples {
            return Err(key_err("eval.k", "must lie in 1..=eval.samples"));
        }
        if e.nn_k == 0 || e.nn_k >= e.samples.min(e.periodic_samples) {
            return Err(key_err("eval.nn_k", "must be at least 1 and below the sample counts"));
        }
        if e.k > e.periodic_samples {
            return Err(key_err("eval.periodic_samples", "must be at least eval.k"));
        }
        if e.truncation.iter().any(|t| !(*t > 0.0)) {
            return Err(key_err("eval.truncation", "entries must be positive"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(key_err("ablation.seeds", "must list at least one seed"));
        }
        Ok(())
    }

    fn domain_names(&self) -> Vec<&str> {
        if self.world.domains.is_empty() {
            vec!["src", "trg"]
        } else {
            self.world.domains.iter().map(|d| d.name.as_str()).collect()
        }
    }

    pub fn domains(&self) -> Vec<DomainSpec> {
        let w = &self.world;
        if w.domains.is_empty() {
            benchmark_domains(w.seed, w.p, w.separation, w.scale, w.placement)
        } else {
            w.domains.iter().map(|d| DomainSpec { name: d.name.clone(), mean: d.mean.clone(), scale: d.scale.clone() }).collect()
        }
    }

    pub fn build_world(&self) -> Result<World> {
        let w = &self.world;
        World::build(w.seed, w.p, w.d, w.hidden, self.domains())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig { iters: p.iters, batch: p.batch, lr: p.lr, seed: p.seed, bandwidth_every: p.bandwidth_every }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let s = &self.stage1;
        Stage1Config {
            k: s.k,
            iters: s.iters,
            lr: s.lr,
            beta1: s.betas[0],
            beta2: s.betas[1],
            lambda_div: s.lambda_div,
            epsilon: s.epsilon,
            seed: s.seed,
            log_every: s.log_every,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let s = &self.stage2;
        AdaptConfig {
            n: s.n,
            iters: s.iters,
            lr: s.lr,
            beta1: s.betas[0],
            beta2: s.betas[1],
            lambda_cov: s.lambda_cov,
            lambda_ewc: s.lambda_ewc,
            lambda_rel: s.lambda_rel,
            fisher_samples: s.fisher_samples,
            eval_every: s.eval_every,
            loss_mode: s.loss_mode,
            gram_normalize: s.gram_normalize,
            seed: s.seed,
            eval_latents: self.eval.periodic_samples,
            eval_seed: self.eval.seed,
            eval_k: self.eval.k,
            eval_nn_k: self.eval.nn_k,
        }
    }
}

fn check_adam(section: &str, lr: f64, betas: [f64; 2]) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(key_err(&format!("{section}.lr"), "must be positive"));
    }
    if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
        return Err(key_err(&format!("{section}.betas"), "entries must lie in [0, 1)"));
    }
    Ok(())
}

/// Hex SHA-256 of the config text, stored in checkpoint metadata.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

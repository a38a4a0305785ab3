//! Stages that read and write a run directory. Each stage reuses upstream
//! checkpoints already present in the directory and computes (and saves)
//! the missing ones, so stages can be run one by one or all at once.
//!
//! Layout:
//!
//! | file | written by |
//! |---|---|
//! | `config.toml` | every stage (resolved config) |
//! | `world.ckpt` | world |
//! | `generator_src.ckpt`, `pretrain.csv` | pretrain |
//! | `variations.ckpt`, `stage1.csv` | variations |
//! | `fisher.ckpt` | adapt, ablation |
//! | `generator_trg.ckpt`, `stage2_losses.csv`, `stage2_metrics.csv` | adapt |
//! | `eval.csv` | eval |
//! | `ablation.csv`, `ablation_summary.csv`, `ablation/*.csv` | ablation |
//! | `*.svg` | report |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::adapt::{self, AdaptOutcome, FisherDiag};
use crate::checks::{self, SuiteResult};
use crate::config::{config_hash, RunConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, AblationRow, ArmResult, FinalMetrics, Prepared};
use crate::generator::{self, GeneratorParams, PretrainReport};
use crate::io::{self, Persist, Series};
use crate::metrics::MetricsReport;
use crate::variations::{self, Stage1Log, VariationSet};
use crate::world::World;

pub struct RunDir {
    root: PathBuf,
    hash: String,
}

impl RunDir {
    /// Opens (creating if needed) a run directory and records the resolved config.
    pub fn open(root: &Path, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let text = cfg.to_toml();
        let dir = RunDir { root: root.to_path_buf(), hash: config_hash(&text) };
        let path = dir.path("config.toml");
        if path.exists() {
            let existing = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if existing != text {
                warn!("{} differs from the current config; keeping the existing file", path.display());
            }
        } else {
            dir.write_text("config.toml", &text)?;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn meta(&self, seed: u64, iteration: usize) -> Vec<(&'static str, String)> {
        vec![("seed", seed.to_string()), ("iteration", iteration.to_string()), ("config_hash", self.hash.clone())]
    }

    fn load<T: Persist>(&self, name: &str) -> Result<Option<T>> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(None);
        }
        let ck = io::Checkpoint::load(&path)?;
        ck.expect_kind(T::KIND)?;
        ck.check_config_hash(&self.hash);
        log::debug!("reusing {}", path.display());
        T::from_checkpoint(&ck).map(Some)
    }

    fn save<T: Persist>(&self, obj: &T, name: &str, seed: u64, iteration: usize) -> Result<()> {
        obj.save(&self.path(name), &self.meta(seed, iteration))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        use std::io::Write;
        let path = self.path(name);
        let mut w = io::create_new(&path)?;
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    }
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn world(dir: &RunDir, cfg: &RunConfig) -> Result<World> {
    if let Some(w) = dir.load::<World>("world.ckpt")? {
        return Ok(w);
    }
    let w = cfg.build_world()?;
    let cos = w.text_separation(&cfg.world.source, &cfg.world.target)?;
    info!("world built: text cosine between `{}` and `{}` is {cos:.4}", cfg.world.source, cfg.world.target);
    dir.save(&w, "world.ckpt", cfg.world.seed, 0)?;
    Ok(w)
}

pub fn pretrain(dir: &RunDir, cfg: &RunConfig) -> Result<GeneratorParams> {
    let w = world(dir, cfg)?;
    if let Some(g) = dir.load::<GeneratorParams>("generator_src.ckpt")? {
        return Ok(g);
    }
    let pc = cfg.pretrain_config();
    let (g, report): (GeneratorParams, PretrainReport) = generator::pretrain_source(&w, &cfg.world.source, &pc)?;
    let mut csv = String::from("iter,mmd2\n");
    for (it, v) in &report.trace {
        writeln!(csv, "{it},{}", real(*v)).unwrap();
    }
    writeln!(csv, "final,{}", real(report.final_mmd2)).unwrap();
    dir.write_text("pretrain.csv", &csv)?;
    dir.save(&g, "generator_src.ckpt", pc.seed, pc.iters)?;
    Ok(g)
}

pub fn variations(dir: &RunDir, cfg: &RunConfig) -> Result<VariationSet> {
    let w = world(dir, cfg)?;
    if let Some(v) = dir.load::<VariationSet>("variations.ckpt")? {
        return Ok(v);
    }
    let sc = cfg.stage1_config();
    let (vs, log): (VariationSet, Vec<Stage1Log>) = variations::learn_variations(&w.encode_text(&cfg.world.target)?, &sc)?;
    let mut csv = String::from("iter,loss_cons,loss_div\n");
    for l in &log {
        writeln!(csv, "{},{},{}", l.iter, real(l.loss_cons), real(l.loss_div)).unwrap();
    }
    dir.write_text("stage1.csv", &csv)?;
    dir.save(&vs, "variations.ckpt", sc.seed, sc.iters)?;
    Ok(vs)
}

pub fn fisher(dir: &RunDir, cfg: &RunConfig) -> Result<FisherDiag> {
    let w = world(dir, cfg)?;
    let g = pretrain(dir, cfg)?;
    if let Some(f) = dir.load::<FisherDiag>("fisher.ckpt")? {
        return Ok(f);
    }
    let t_src = w.encode_text(&cfg.world.source)?;
    let f = adapt::estimate_fisher(&w, &g, &t_src, cfg.stage2.fisher_samples, cfg.stage2.seed)?;
    dir.save(&f, "fisher.ckpt", cfg.stage2.seed, 0)?;
    Ok(f)
}

/// Everything Stage 2 needs, loaded from or written to the directory.
pub fn prepared(dir: &RunDir, cfg: &RunConfig) -> Result<Prepared> {
    let world = world(dir, cfg)?;
    let g_src = pretrain(dir, cfg)?;
    let variations = variations(dir, cfg)?;
    let fisher = fisher(dir, cfg)?;
    Ok(Prepared { world, g_src, pretrain: PretrainReport::default(), variations, stage1_log: vec![], fisher })
}

pub fn adapt(dir: &RunDir, cfg: &RunConfig) -> Result<AdaptOutcome> {
    let prep = prepared(dir, cfg)?;
    let acfg = cfg.adapt_config();
    let out = adapt::adapt(
        &prep.world,
        &prep.g_src,
        Some(&prep.variations),
        &cfg.world.source,
        &cfg.world.target,
        &acfg,
        Some(&prep.fisher),
    )?;
    io::write_metrics_csv(&out.losses, &dir.path("stage2_losses.csv"))?;
    io::write_metrics_csv(&out.evals, &dir.path("stage2_metrics.csv"))?;
    dir.save(&out.generator, "generator_trg.ckpt", acfg.seed, acfg.iters)?;
    Ok(out)
}

fn final_metrics_csv(m: &FinalMetrics, hash: &str) -> String {
    let rows = [
        ("sse", m.sse),
        ("diversity_avg", m.diversity.avg),
        ("diversity_all", m.diversity.all),
        ("diversity_all_std", m.diversity.all_std),
        ("frechet", m.frechet),
    ];
    let pr: Vec<(String, f64)> = m
        .precision_recall
        .iter()
        .flat_map(|p| [(format!("precision@psi={}", p.psi), p.precision), (format!("recall@psi={}", p.psi), p.recall)])
        .collect();
    let mut s = String::from("metric,value,config\n");
    for (k, v) in rows {
        writeln!(s, "{k},{},{hash}", real(v)).unwrap();
    }
    for (k, v) in pr {
        writeln!(s, "{k},{},{hash}", real(v)).unwrap();
    }
    s
}

pub fn eval(dir: &RunDir, cfg: &RunConfig) -> Result<FinalMetrics> {
    let w = world(dir, cfg)?;
    let g = match dir.load::<GeneratorParams>("generator_trg.ckpt")? {
        Some(g) => g,
        None => return Err(Error::usage(format!("{} has no generator_trg.ckpt; run `adapt` first", dir.root().display()))),
    };
    let m = experiment::final_metrics(&w, &g, cfg)?;
    dir.write_text("eval.csv", &final_metrics_csv(&m, &dir.hash))?;
    Ok(m)
}

pub fn gradcheck(dir: &RunDir, configs: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let res = checks::gradient_suite(configs, seed, 1e-5, 1e-4)?;
    let mut s = String::from("loss,configs,checked,max_rel_error,pass\n");
    for r in &res {
        writeln!(s, "{},{},{},{},{}", r.loss, r.configs, r.checked, real(r.max_rel_error), r.pass).unwrap();
    }
    dir.write_text("gradcheck.csv", &s)?;
    Ok(res)
}

pub fn ablation(dir: &RunDir, cfg: &RunConfig) -> Result<(Vec<ArmResult>, Vec<AblationRow>)> {
    let prep = prepared(dir, cfg)?;
    let results = experiment::ablation(&prep, cfg)?;
    let mut s = String::from("mode,seed,diversity_avg,diversity_all,diversity_all_std,sse,frechet,logged_sse\n");
    for r in &results {
        let m = &r.metrics;
        let logged = r.outcome.evals.last().and_then(|e| e.sse).unwrap_or(f64::NAN);
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.seed,
            real(m.diversity.avg),
            real(m.diversity.all),
            real(m.diversity.all_std),
            real(m.sse),
            real(m.frechet),
            real(logged)
        )
        .unwrap();
        io::write_metrics_csv(&r.outcome.evals, &dir.path(&format!("ablation/{}_seed{}.csv", r.mode, r.seed)))?;
    }
    dir.write_text("ablation.csv", &s)?;
    let rows = experiment::summarize(&results);
    let mut s = String::from("mode,median_diversity_avg,std_avg_over_seeds,median_diversity_all,std_all_over_pairs,median_sse\n");
    for r in &rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.mode,
            real(r.median_avg),
            real(r.std_avg_over_seeds),
            real(r.median_all),
            real(r.std_all_over_pairs),
            real(r.median_sse)
        )
        .unwrap();
    }
    dir.write_text("ablation_summary.csv", &s)?;
    Ok((results, rows))
}

fn column(records: &[MetricsReport], f: impl Fn(&MetricsReport) -> Option<f64>) -> Vec<(f64, f64)> {
    records.iter().filter_map(|r| f(r).filter(|v| v.is_finite()).map(|v| (r.iter as f64, v))).collect()
}

/// Renders charts for every metric table found in the directory.
pub fn report(dir: &RunDir) -> Result<Vec<PathBuf>> {
    let mut tables: Vec<(String, Vec<MetricsReport>)> = Vec::new();
    let main = dir.path("stage2_metrics.csv");
    if main.exists() {
        tables.push(("run".into(), io::read_metrics_csv(&main)?));
    }
    let abl = dir.path("ablation");
    if abl.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&abl)
            .map_err(|e| Error::io(&abl, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        for p in names {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            tables.push((stem, io::read_metrics_csv(&p)?));
        }
    }
    if tables.is_empty() {
        return Err(Error::usage(format!("{} holds no metric tables; run `adapt` or `ablation` first", dir.root().display())));
    }
    type Pick = fn(&MetricsReport) -> Option<f64>;
    let charts: [(&str, &str, Pick); 4] = [
        ("sse.svg", "SSE compactness", |r| r.sse),
        ("diversity.svg", "Intra-cluster diversity (avg)", |r| r.diversity_avg),
        ("loss_total.svg", "Total loss", |r| r.loss_total),
        ("frechet.svg", "Frechet distance to target", |r| r.frechet),
    ];
    let mut written = Vec::new();
    for (file, title, pick) in charts {
        let series: Vec<Series> = tables
            .iter()
            .map(|(name, rs)| (name.clone(), column(rs, pick)))
            .filter(|(_, pts)| !pts.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = dir.path(file);
        io::render_svg_chart(title, &series, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// world → pretrain → variations → adapt → eval → report.
pub fn full_run(dir: &RunDir, cfg: &RunConfig) -> Result<FinalMetrics> {
    adapt(dir, cfg)?;
    let m = eval(dir, cfg)?;
    report(dir)?;
    Ok(m)
}

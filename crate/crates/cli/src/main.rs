use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use semvar::adapt::LossMode;
use semvar::config::RunConfig;
use semvar::run::{self, RunDir};
use semvar::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "semvar", version, about = "Text-guided generator adaptation on a synthetic embedding world")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir` from the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Stage-2 seed (for `ablation`: run this single seed).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "MODE")]
    loss_mode: Option<LossMode>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic world and save its checkpoint.
    World,
    /// Pretrain the source generator.
    Pretrain,
    /// Learn the target-text variations.
    Variations,
    /// Adapt the generator to the target domain.
    Adapt,
    /// Final metrics of the adapted generator.
    Eval,
    /// Check every loss gradient against finite differences.
    Gradcheck {
        /// Random configurations per loss.
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// Train all four loss modes on the configured seeds.
    Ablation,
    /// Render SVG charts from the metric tables in the run directory.
    Report,
    /// world, pretrain, variations, adapt, eval and report in one go.
    FullRun,
}

fn resolve(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.stage2.seed = seed;
        cfg.ablation.seeds = vec![seed];
    }
    if let Some(mode) = cli.loss_mode {
        cfg.stage2.loss_mode = mode;
    }
    cfg.validate()?;
    let out = cli.out.clone().or_else(|| cfg.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("run"));
    Ok((cfg, out))
}

fn execute(cli: &Cli) -> Result<()> {
    let (cfg, out) = resolve(cli)?;
    let dir = RunDir::open(&out, &cfg)?;
    match &cli.command {
        Command::World => {
            let w = run::world(&dir, &cfg)?;
            println!("world: P={} D={} h={} domains={}", w.p, w.d, w.h, w.domains.len());
        }
        Command::Pretrain => {
            let g = run::pretrain(&dir, &cfg)?;
            println!("source generator: {} parameters", g.num_params());
        }
        Command::Variations => {
            let v = run::variations(&dir, &cfg)?;
            println!("variations: K={} epsilon={:.6}", v.k(), v.epsilon);
        }
        Command::Adapt => {
            let o = run::adapt(&dir, &cfg)?;
            let last = o.evals.last().cloned().unwrap_or_default();
            println!(
                "adapt[{}]: final loss {:.6}, sse {:.4}, diversity {:.4}",
                cfg.stage2.loss_mode,
                o.losses.last().and_then(|r| r.loss_total).unwrap_or(f64::NAN),
                last.sse.unwrap_or(f64::NAN),
                last.diversity_avg.unwrap_or(f64::NAN)
            );
        }
        Command::Eval => print_metrics(&run::eval(&dir, &cfg)?),
        Command::Gradcheck { configs } => {
            let res = run::gradcheck(&dir, *configs, cfg.stage2.seed)?;
            let mut ok = true;
            for r in &res {
                println!("{:<6} {:>8} coords  max rel error {:.3e}  {}", r.loss, r.checked, r.max_rel_error, if r.pass { "ok" } else { "FAIL" });
                ok &= r.pass;
            }
            if !ok {
                return Err(Error::Numeric("gradient check exceeded tolerance".into()));
            }
        }
        Command::Ablation => {
            let (_, rows) = run::ablation(&dir, &cfg)?;
            println!("{:<8} {:>12} {:>10} {:>12} {:>10} {:>12}", "mode", "div(avg)", "std", "div(all)", "std", "sse");
            for r in rows {
                println!(
                    "{:<8} {:>12.4} {:>10.4} {:>12.4} {:>10.4} {:>12.2}",
                    r.mode.to_string(),
                    r.median_avg,
                    r.std_avg_over_seeds,
                    r.median_all,
                    r.std_all_over_pairs,
                    r.median_sse
                );
            }
        }
        Command::Report => {
            for p in run::report(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::FullRun => print_metrics(&run::full_run(&dir, &cfg)?),
    }
    Ok(())
}

fn print_metrics(m: &semvar::experiment::FinalMetrics) {
    println!("sse {:.4}", m.sse);
    println!("diversity avg {:.4} all {:.4} (pair std {:.4})", m.diversity.avg, m.diversity.all, m.diversity.all_std);
    println!("frechet {:.4}", m.frechet);
    for p in &m.precision_recall {
        println!("psi {}: precision {:.3} recall {:.3}", p.psi, p.precision, p.recall);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

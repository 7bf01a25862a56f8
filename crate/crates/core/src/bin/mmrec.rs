use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mmrec::config::RunConfig;
use mmrec::pipeline;

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Multi-modal interest-aware sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a setting, e.g. `--set d=64`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory; takes precedence over `out_dir` in the config.
    #[arg(long, global = true, env = "MMREC_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pre-training of all parameters.
    Pretrain,
    /// Adapter fine-tuning with early stopping, then test evaluation.
    Finetune {
        /// `inductive` or `transductive`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Full-catalog evaluation on the test split.
    Eval,
    /// Writes the interest assignment of every item token.
    ClusterDebug,
    /// Writes a synthetic domain to the output directory.
    GenSynth,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides;
    if let Command::Finetune { mode: Some(m) } = &cli.command {
        overrides.push(format!("mode={m}"));
    }
    if let Some(o) = &cli.out_dir {
        overrides.push(format!("out_dir={}", o.display()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Pretrain => {
            let out = pipeline::run_pretrain(&cfg)?;
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Finetune { .. } => {
            let out = pipeline::run_finetune(&cfg)?;
            println!("wrote {}", out.checkpoint.display());
            if let Some(t) = out.test {
                for (i, k) in t.ks.iter().enumerate() {
                    println!("test R@{k}={:.4} N@{k}={:.4}", t.recall[i], t.ndcg[i]);
                }
            }
        }
        Command::Eval => {
            let t = pipeline::run_eval(&cfg)?;
            for (i, k) in t.ks.iter().enumerate() {
                println!("test R@{k}={:.4} N@{k}={:.4}", t.recall[i], t.ndcg[i]);
            }
        }
        Command::ClusterDebug => {
            let idx = pipeline::run_cluster_debug(&cfg)?;
            println!("{} prototypes; wrote {}", idx.len(), cfg.out_dir.join("clusters.tsv").display());
        }
        Command::GenSynth => {
            let paths = pipeline::run_gen_synth(&cfg)?;
            println!("wrote {}", paths.catalog.parent().unwrap_or(&cfg.out_dir).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line front end over [`crate::pipeline`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::pipeline::{self, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "neupath", version, about = "Locate, prune and edit influential neuron paths in a toy multimodal model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults to the reference configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Forget ratio preset: 0.05, 0.10 or 0.15.
    #[arg(long = "forget-ratio", global = true)]
    pub forget_ratio: Option<f64>,
    /// Neurons kept per layer when aggregating paths.
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Reseed corpus, split, model, training and editing.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus and forget/retain split.
    Gen,
    /// Train the model on the corpus.
    Train,
    /// Locate influential paths on the forget split.
    Locate,
    /// Unlearn with one method.
    Unlearn {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run and score several methods on the same split (all by default).
    Baseline {
        #[arg(long)]
        method: Vec<Method>,
    },
    /// Evaluate the unlearned model.
    Eval,
    /// Path vs pointwise top-k sweep.
    Sweep,
    /// Print a summary of the reports.
    Report,
}

/// Reference configuration overlaid with the file and flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    if let Some(r) = common.forget_ratio {
        cfg.split.forget_ratio = r;
    }
    if let Some(k) = common.top_k {
        cfg.unlearn.top_k = k;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Execute one command and return the text to print.
pub fn run(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        // only the first call in a process can size the pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(&cli.common)?;
    let out = cfg.out_dir.display().to_string();
    Ok(match &cli.command {
        Command::Gen => {
            let s = pipeline::gen(&cfg)?;
            std::fs::write(pipeline::artifact(&cfg, "config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            format!(
                "wrote {out}/{} ({} forget, {} retain examples)",
                pipeline::CORPUS_FILE,
                s.forget.len(),
                s.retain.len()
            )
        }
        Command::Train => {
            pipeline::train_stage(&cfg)?;
            format!("wrote {out}/{}", pipeline::MODEL_FILE)
        }
        Command::Locate => {
            let p = pipeline::locate(&cfg)?;
            format!("wrote {out}/{} ({} examples)", pipeline::PATHS_FILE, p.paths.len())
        }
        Command::Unlearn { method } => {
            let method = method.unwrap_or_else(|| cfg.default_method());
            let (meta, _) = pipeline::unlearn(&cfg, method)?;
            format!(
                "wrote {out}/{} ({method}, {} pruned neurons)",
                pipeline::UNLEARNED_FILE,
                meta.pruned.len()
            )
        }
        Command::Baseline { method } => {
            let methods = if method.is_empty() { Method::ALL.to_vec() } else { method.clone() };
            let rows = pipeline::baseline(&cfg, &methods)?;
            let mut text = format!("wrote {out}/{}\n", pipeline::BASELINES_FILE);
            for r in rows {
                text.push_str(&format!(
                    "{:26} forgetting {:.3}  retention {:.3}\n",
                    r.method.name(),
                    r.report.forgetting_rate.mean(),
                    r.report.retention_ratio.mean()
                ));
            }
            text.trim_end().to_string()
        }
        Command::Eval => {
            let r = pipeline::eval(&cfg)?;
            format!(
                "wrote {out}/{} (forgetting {:.3}/{:.3}, retention {:.3}/{:.3})",
                pipeline::REPORT_FILE,
                r.report.forgetting_rate.multimodal,
                r.report.forgetting_rate.text_only,
                r.report.retention_ratio.multimodal,
                r.report.retention_ratio.text_only
            )
        }
        Command::Sweep => {
            let s = pipeline::sweep(&cfg)?;
            format!(
                "wrote {out}/{} (k at 90%: path {:?}, pointwise {:?})",
                pipeline::SWEEP_FILE,
                s.path_k90,
                s.pointwise_k90
            )
        }
        Command::Report => pipeline::report(&cfg)?.trim_end().to_string(),
    })
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use curvedn::config::{RunConfig, ENV_OUTPUT_DIR, ENV_SEED};
use curvedn::{cmd_eval, cmd_gen, cmd_is, cmd_train};

#[derive(Parser)]
#[command(name = "curvedn", version, about = "Denoising-training experiments on synthetic curved text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, env = ENV_OUTPUT_DIR)]
    output_dir: Option<PathBuf>,
    #[arg(long, env = ENV_SEED)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        // clap already folded the environment into the flags.
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out datasets.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: Option<usize>,
        /// Worker threads; output is identical for any value.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train a decoder on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        snapshot_interval: Option<usize>,
        /// Train without denoising queries (implies the three flags below).
        #[arg(long)]
        no_dn: bool,
        /// Add noise to sampled points instead of control points.
        #[arg(long)]
        no_bcp: bool,
        /// Left-align denoising transcripts instead of sliding them.
        #[arg(long)]
        no_mcs: bool,
        /// Drop the background cross-entropy on negative queries.
        #[arg(long)]
        no_bct: bool,
        /// Print a progress line every this many steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Compute the matching-instability trace from training snapshots.
    Is {
        /// Directory holding snapshot-*.json files.
        snapshots: PathBuf,
        /// Output file; defaults to is.jsonl beside the snapshot directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.05)]
        match_threshold: f64,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, images, jobs } => {
            let mut cfg = common.load()?;
            if let Some(n) = images {
                cfg.images = n;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let cfg = cfg.resolve()?;
            let s = cmd_gen(&cfg)?;
            println!("wrote {} records ({} instances) to {}", s.records, s.instances, s.path.display());
            if s.eval_records > 0 {
                println!("wrote {} held-out records to {}", s.eval_records, cfg.eval_path().display());
            }
        }
        Command::Train {
            common,
            steps,
            snapshot_interval,
            no_dn,
            no_bcp,
            no_mcs,
            no_bct,
            log_every,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = snapshot_interval {
                cfg.snapshot_interval = s;
            }
            let a = &mut cfg.train.ablation;
            a.dn &= !no_dn;
            a.bcp &= !(no_bcp || no_dn);
            a.mcs &= !(no_mcs || no_dn);
            a.bct &= !(no_bct || no_dn);
            let cfg = cfg.resolve()?;
            let summary = cmd_train(&cfg, |step, o| {
                if log_every > 0 && step % log_every == 0 {
                    let dn = o.dn.as_ref().map_or(String::from("-"), |t| format!("{:.4}", t.total()));
                    eprintln!("step {step:>6}  match {:.4}  dn {dn}  lr {:.1e}", o.matching.total(), o.lr);
                }
            })?;
            if let Some(last) = summary.trace.last() {
                let line = |r: &curvedn::evaluate::EvalReport| {
                    format!("detection F1 {:.4}, end-to-end F1 {:.4}", r.detection.f1, r.end_to_end.f1)
                };
                println!("step {} train: {}", last.step, line(&last.train));
                if let Some(h) = &last.held_out {
                    println!("step {} held-out: {}", last.step, line(h));
                }
            }
            println!("checkpoint written to {}", summary.checkpoint.display());
        }
        Command::Is { snapshots, out } => {
            let out = out.unwrap_or_else(|| {
                snapshots
                    .parent()
                    .map_or_else(|| PathBuf::from("is.jsonl"), |p| p.join("is.jsonl"))
            });
            let rows = cmd_is(&snapshots, &out)?;
            for r in &rows {
                println!("{}\t{:.4}", r.step, r.is);
            }
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            score_threshold,
            match_threshold,
        } => {
            let report = cmd_eval(&checkpoint, &dataset, score_threshold, match_threshold)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use sigverify::config::RunConfig;
use sigverify::cotuplet::LossKind;
use sigverify::ndgrad::Fault;
use sigverify_cli::*;

#[derive(Parser)]
#[command(name = "sigverify", about = "Offline signature verification: synth, preprocess, train, eval, gradcheck")]
struct Cli {
    /// Flat `key = value` run config; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `loss`.
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    /// Output directory: the data dir for synth/preprocess, the run dir otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Cotuplet,
    Triplet,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Relu,
    Sigmoid,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and its writer-disjoint splits.
    Synth,
    /// Preprocess every manifest image into the tensor cache.
    Preprocess,
    /// Train with early stopping on validation EER.
    Train,
    /// Evaluate a checkpoint on a split.
    Eval {
        /// Defaults to `<run dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the seeded initialization instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write `embeddings.csv`.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Finite-difference check of the loss gradient through the whole network.
    Gradcheck {
        /// Deliberately break one backward rule (negative control).
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Command::Gradcheck { .. }) => tiny_gradcheck_config(),
        (None, _) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = cli.loss {
        cfg.loss_kind = match l {
            LossArg::Cotuplet => LossKind::CoTuplet,
            LossArg::Triplet => LossKind::Triplet,
        };
    }
    cfg.validate()?;
    let data_dir = match (&cli.command, &cli.out) {
        (Command::Synth | Command::Preprocess, Some(o)) => o.clone(),
        _ => cfg.data_dir.clone(),
    };
    let out_dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());

    match cli.command {
        Command::Synth => {
            let m = cmd_synth(&cfg, &data_dir)?;
            println!("wrote {} images for {} identities to {}", m.rows.len(), m.identities().len(), data_dir.display());
        }
        Command::Preprocess => {
            let (cache, digest) = cmd_preprocess(&cfg, &data_dir)?;
            println!("cached {} images ({}x{}) sha256 {digest}", cache.rows.len(), cache.height, cache.width);
        }
        Command::Train => {
            let run = cmd_train(&cfg, &data_dir, &out_dir, |r| {
                println!("epoch {:>2}  loss {:.5}  val EER {:.2}%", r.epoch, r.train_loss, r.val_eer)
            })?;
            println!(
                "best epoch {} val EER {:.2}% (untrained {:.2}%){}",
                run.best_epoch,
                run.best_val_eer,
                run.initial_val_eer,
                if run.stopped_early { ", stopped early" } else { "" }
            );
        }
        Command::Eval { checkpoint, untrained, split, export_embeddings } => {
            let ckpt = if untrained { None } else { Some(checkpoint.unwrap_or_else(|| out_dir.join("checkpoint.bin"))) };
            let r = cmd_eval(&cfg, ckpt.as_deref(), &data_dir, &split, &out_dir, export_embeddings)?;
            println!(
                "{split}: EER {:.2}%  AUC {:.2}%  accuracy {:.2}%  FRR {:.2}%  FAR {:.2}%  ({} positive, {} negative pairs)",
                r.eer, r.auc, r.accuracy, r.frr, r.far, r.positives, r.negatives
            );
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::Relu => Fault::ReluBackward,
                FaultArg::Sigmoid => Fault::SigmoidBackward,
            });
            let report = cmd_gradcheck(&cfg, &out_dir, fault)?;
            let failed = report.params.iter().filter(|p| !p.passed).count();
            if let Some(w) = report.worst() {
                println!("worst parameter: {} (max relative error {:.3e})", w.name, w.max_rel_error);
            }
            println!("{} of {} parameters within {:e}", report.params.len() - failed, report.params.len(), report.tolerance);
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

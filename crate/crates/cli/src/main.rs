use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use cropvit::encoders::{DualEncoder, PeMode};
use cropvit::harness::{
    ablation_table, eval_region, eval_retrieval, export_pe_viz, gradcheck_all, held_out_pairs, pretrain, run_ablation,
    score_regions, write_ablation_csv, write_run, write_scores, RunConfig,
};
use cropvit::losses::LossKind;
use cropvit::synth::write_corpus_csv;
use cropvit::{Error, Result};

#[derive(Parser)]
#[command(name = "cropvit", version, about = "Desk-scale region-aware image-text pretraining lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dual encoder and write model.ckpt, loss_trace.csv, config.txt and retrieval.csv.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print the loss every N steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Recall@K on held-out synthetic pairs.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a detector head on base categories and report region top-1 on base and held-out categories.
    EvalRegion {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse per-region VLM/detector scores from a CSV.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Export the learned positional-embedding similarity map (CSV + PGM).
    VizPe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for every differentiable op.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every PE mode x loss kind on identical seeds and tabulate.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "learnable,none,sincos,feat_crop_resize,cpe")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "softmax,focal")]
        losses: Vec<String>,
        /// Also run region evaluation for each model.
        #[arg(long)]
        region: bool,
    },
    /// Dump synthetic pair attributes and tokens for a seed range.
    Corpus {
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_or_stdout(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut file = File::create(p)?;
            f(&mut file)
        }
        None => f(&mut io::stdout().lock()),
    }
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "softmax" => Ok(LossKind::Softmax),
        "focal" => Ok(LossKind::Focal),
        _ => Err(Error::Config(format!("unknown loss kind {s:?}"))),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { config, out, log_every } => {
            let cfg = load_config(config.as_deref())?;
            let start = Instant::now();
            let outcome = pretrain(&cfg, |step, loss| {
                if log_every > 0 && step % log_every == 0 {
                    println!("step {step:5}  loss {loss:.5}");
                }
            })?;
            write_run(&out, &cfg, &outcome)?;
            let report = eval_retrieval(&outcome.model, &held_out_pairs(cfg.eval.pairs), &cfg.eval.ks)?;
            report.write_csv(File::create(out.join("retrieval.csv"))?)?;
            println!(
                "trained {} steps in {:.1}s: loss {:.4} -> {:.4} (mean of last {}), tau {:.4}",
                cfg.steps,
                start.elapsed().as_secs_f64(),
                outcome.initial_loss(),
                outcome.final_loss(cfg.final_window),
                cfg.final_window,
                outcome.model.tau()
            );
            print!("{}", report.summary());
            println!("wrote {}", out.display());
        }
        Command::EvalRetrieval { ckpt, n, k, out } => {
            let model = DualEncoder::load(&ckpt)?;
            if k.is_empty() || k.contains(&0) || k.iter().any(|&x| x > n) {
                return Err(Error::Config(format!("K values {k:?} must be in 1..={n}")));
            }
            let report = eval_retrieval(&model, &held_out_pairs(n), &k)?;
            print!("{}", report.summary());
            if let Some(p) = out.as_deref() {
                write_or_stdout(Some(p), |w| report.write_csv(w))?;
            } else {
                report.write_csv(io::stdout().lock())?;
            }
        }
        Command::EvalRegion { ckpt, config, out } => {
            let model = DualEncoder::load(&ckpt)?;
            let cfg = load_config(config.as_deref())?;
            let report = eval_region(&model, &cfg)?;
            print!("{}", report.summary());
            if let Some(p) = out.as_deref() {
                write_or_stdout(Some(p), |w| report.write_csv(w))?;
            } else {
                report.write_csv(io::stdout().lock())?;
            }
        }
        Command::Score { input, config, output } => {
            let cfg = RunConfig::from_file(&config)?;
            let (ids, rows) = score_regions(BufReader::new(File::open(&input)?), &cfg.score)?;
            write_or_stdout(output.as_deref(), |w| write_scores(&ids, &rows, w))?;
            if output.is_some() {
                println!("scored {} regions over {} categories", rows.len(), ids.len());
            }
        }
        Command::VizPe { ckpt, out } => {
            let model = DualEncoder::load(&ckpt)?;
            let (map, csv, pgm) = export_pe_viz(&model, &out)?;
            println!("{}x{} PE similarity map -> {} and {}", map.height, map.width, csv.display(), pgm.display());
        }
        Command::Gradcheck { out } => {
            let report = gradcheck_all();
            print!("{}", report.summary());
            if let Some(p) = out.as_deref() {
                write_or_stdout(Some(p), |w| report.write_csv(w))?;
            }
            if !report.all_passed() {
                for f in report.failures() {
                    eprintln!("gradient mismatch in {}: {}", f.name, f.worst);
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate { config, out, modes, losses, region } => {
            let cfg = load_config(config.as_deref())?;
            let modes = modes.iter().map(|m| m.parse::<PeMode>()).collect::<Result<Vec<_>>>()?;
            let losses = losses.iter().map(|l| parse_loss(l)).collect::<Result<Vec<_>>>()?;
            let rows = run_ablation(&cfg, &modes, &losses, region, Some(&out), |r| {
                println!("  {} / {:?}: i2t@1 {:.3}  t2i@1 {:.3}", r.pe_mode, r.loss, r.i2t_r1, r.t2i_r1);
            })?;
            write_ablation_csv(&rows, File::create(out.join("ablation.csv"))?)?;
            print!("{}", ablation_table(&rows));
        }
        Command::Corpus { start, count, out } => {
            write_or_stdout(out.as_deref(), |w| write_corpus_csv(start..start.saturating_add(count), w))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

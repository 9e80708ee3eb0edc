//! `lvctc`: train, decode, evaluate and verify LV-CTC models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure (non-finite loss, failed gradient or oracle check), 1 anything else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lvctc::config::RunConfig;
use lvctc::ctc::oracle_check;
use lvctc::data::{self, Utterance};
use lvctc::decoding::{decode_iterative, decode_single_step, error_rate};
use lvctc::gradcheck::{check_miniature, GradcheckOptions};
use lvctc::model::load_checkpoint;
use lvctc::train::{validate, validation_set, Trainer};
use lvctc::{Error, LvCtc64};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lvctc", version, about = "CTC with a latent variable model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing logs and checkpoints to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue the run saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decode an utterance dump, or the held-out set of a config.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance dump to decode.
        #[arg(long, required_unless_present = "config")]
        input: Option<PathBuf>,
        /// Checked against the checkpoint; supplies the held-out set when no input is given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Refinement rounds; 0 decodes in a single step.
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        /// Emit the full per-round trace as JSON lines.
        #[arg(long)]
        trace: bool,
        /// Write hypotheses.txt (or trace.jsonl) and timing.jsonl here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token error rates of single-step and iterative decoding on the held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        /// Overrides train.valid_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every parameter group of a miniature model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Coordinates probed per group; all when absent.
        #[arg(long)]
        coords: Option<usize>,
    },
    /// Compare the CTC dynamic program with brute-force enumeration.
    Oracle {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 6)]
        max_t: usize,
        #[arg(long, default_value_t = 3)]
        max_v: usize,
        #[arg(long, default_value_t = 3)]
        max_c: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A command error together with its exit code.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Checkpoint { .. } | Error::Record { .. } | Error::UnknownChar(_) => 2,
            Error::Io(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        };
        Failure(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(1, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            iterations,
            resume,
        } => train(&config, out, seed, iterations, resume),
        Command::Decode {
            checkpoint,
            input,
            config,
            iterations,
            trace,
            out,
        } => decode(&checkpoint, input.as_deref(), config.as_deref(), iterations, trace, out.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            iterations,
            seed,
        } => eval(&checkpoint, &config, iterations, seed),
        Command::Gradcheck { seed, coords } => gradcheck(seed, coords),
        Command::Oracle {
            trials,
            max_t,
            max_v,
            max_c,
            seed,
        } => oracle(trials, max_t, max_v, max_c, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn train(path: &Path, out: Option<PathBuf>, seed: Option<u64>, iterations: Option<usize>, resume: bool) -> CmdResult {
    let mut config = RunConfig::load(path)?;
    if let Some(out) = out {
        config.train.out_dir = out;
    }
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(k) = iterations {
        config.train.iterations = k;
    }
    let dir = config.train.out_dir.clone();
    let steps = config.train.steps;
    let mut trainer = if resume {
        Trainer::<f64>::resume(config, &dir)?
    } else {
        Trainer::<f64>::new(config, &dir)?
    };
    log::info!("training to step {steps} from step {} in {}", trainer.step(), dir.display());
    if let Some(v) = trainer.run(steps)? {
        println!(
            "{}",
            json!({"step": trainer.step(), "valid_ter_greedy": v.greedy, "valid_ter_iterative": v.iterative, "best": trainer.best()})
        );
    }
    Ok(())
}

fn load_model(checkpoint: &Path, config: Option<&RunConfig>) -> Result<LvCtc64, Failure> {
    let model: LvCtc64 = load_checkpoint(checkpoint)?;
    if let Some(c) = config {
        if &c.model != model.config() {
            return Err(Failure(
                2,
                format!("checkpoint {} does not match the model section of the config", checkpoint.display()),
            ));
        }
    }
    Ok(model)
}

fn decode(
    checkpoint: &Path,
    input: Option<&Path>,
    config: Option<&Path>,
    k: usize,
    trace: bool,
    out: Option<&Path>,
) -> CmdResult {
    let config = config.map(RunConfig::load).transpose()?;
    let model = load_model(checkpoint, config.as_ref())?;
    let utts: Vec<Utterance<f64>> = match (input, &config) {
        (Some(p), _) => data::load(BufReader::new(File::open(p)?))?,
        (None, Some(c)) => validation_set(c)?,
        (None, None) => unreachable!("clap requires input or config"),
    };
    let d_feat = model.config().d_feat;
    if let Some(u) = utts.iter().find(|u| u.features.cols() != d_feat) {
        return Err(Failure(2, format!("utterance {} has {} features, model expects {d_feat}", u.id, u.features.cols())));
    }
    let (mut main, mut timing): (Box<dyn Write>, Option<BufWriter<File>>) = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let name = if trace { "trace.jsonl" } else { "hypotheses.txt" };
            (
                Box::new(BufWriter::new(File::create(dir.join(name))?)),
                Some(BufWriter::new(File::create(dir.join("timing.jsonl"))?)),
            )
        }
        None => (Box::new(std::io::stdout().lock()), None),
    };
    let mut total = 0.0;
    for u in &utts {
        let started = Instant::now();
        let (hyp, record) = if k == 0 {
            let h = decode_single_step(&model, &u.features)?;
            let record = json!({"id": u.id, "hypotheses": [h], "converged": false, "iterations": 0});
            (h, record)
        } else {
            let t = decode_iterative(&model, &u.features, k)?;
            let logp: Vec<Vec<Vec<f64>>> = t
                .log_posteriors
                .iter()
                .map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect())
                .collect();
            let record = json!({
                "id": u.id,
                "hypotheses": t.hypotheses,
                "log_posteriors": logp,
                "converged": t.converged,
                "iterations": t.iterations,
            });
            (t.last().to_vec(), record)
        };
        let seconds = started.elapsed().as_secs_f64();
        total += seconds;
        if trace {
            writeln!(main, "{record}")?;
        } else {
            let toks: Vec<String> = hyp.iter().map(usize::to_string).collect();
            writeln!(main, "{}\t{}", u.id, toks.join(" "))?;
        }
        match &mut timing {
            Some(t) => writeln!(t, "{}", json!({"id": u.id, "frames": u.frames(), "seconds": seconds}))?,
            None => log::info!("{}: {} frames in {:.4} s", u.id, u.frames(), seconds),
        }
    }
    main.flush()?;
    if let Some(t) = &mut timing {
        t.flush()?;
    }
    log::info!(
        "decoded {} utterances in {:.3} s ({:.4} s each)",
        utts.len(),
        total,
        total / utts.len().max(1) as f64
    );
    Ok(())
}

fn eval(checkpoint: &Path, path: &Path, k: usize, seed: Option<u64>) -> CmdResult {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed {
        config.train.valid_seed = s;
    }
    let model = load_model(checkpoint, Some(&config))?;
    let utts = validation_set::<f64>(&config)?;
    let report = if k == 0 {
        let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens.clone()).collect();
        let hyps = utts
            .iter()
            .map(|u| decode_single_step(&model, &u.features))
            .collect::<lvctc::Result<Vec<_>>>()?;
        let ter = error_rate(&refs, &hyps)?;
        json!({"utterances": utts.len(), "iterations": 0, "ter_greedy": ter, "ter_iterative": ter})
    } else {
        let v = validate(&model, &utts, k)?;
        json!({"utterances": utts.len(), "iterations": k, "ter_greedy": v.greedy, "ter_iterative": v.iterative})
    };
    println!("{report}");
    Ok(())
}

fn gradcheck(seed: u64, coords: Option<usize>) -> CmdResult {
    const TOL: f64 = 1e-4;
    let opts = GradcheckOptions {
        max_coords: coords,
        seed,
        ..GradcheckOptions::default()
    };
    let report = check_miniature(seed, &opts)?;
    let width = report.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{:width$}  {:>6}  {:>12}  {:>12}  {:>10}  result", "group", "coords", "|analytic|", "|numeric|", "rel_err");
    let mut worst: f64 = 0.0;
    for r in &report {
        worst = worst.max(r.rel_err);
        let verdict = if r.rel_err < TOL { "pass" } else { "FAIL" };
        println!(
            "{:width$}  {:>6}  {:>12.4e}  {:>12.4e}  {:>10.3e}  {verdict}",
            r.name, r.coords, r.analytic_norm, r.numeric_norm, r.rel_err
        );
    }
    let failed = report.iter().filter(|r| !(r.rel_err < TOL)).count();
    println!("{} groups, max rel_err {worst:.3e}, {failed} failed", report.len());
    if failed > 0 {
        return Err(Failure(3, format!("{failed} parameter groups exceed {TOL:e}")));
    }
    Ok(())
}

fn oracle(trials: usize, max_t: usize, max_v: usize, max_c: usize, seed: u64) -> CmdResult {
    const TOL: f64 = 1e-9;
    if max_t > 6 || max_v > 5 {
        log::warn!("brute force grows as (max_v+1)^max_t; this may take a while");
    }
    let started = Instant::now();
    let report = oracle_check(trials, max_t, max_v, max_c, seed, TOL)?;
    for (trial, t, v, target, err) in &report.failures {
        println!("trial {trial}: T'={t} |V|={v} target={target:?} error {err:e}");
    }
    println!(
        "{} trials, max abs error {:.3e}, {} failed, {:.2} s",
        report.trials,
        report.max_abs_err,
        report.failures.len(),
        started.elapsed().as_secs_f64()
    );
    if !report.failures.is_empty() {
        return Err(Failure(3, format!("{} oracle trials exceed {TOL:e} (seed {seed})", report.failures.len())));
    }
    Ok(())
}

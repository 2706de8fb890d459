//! `ces` command line. Exit codes: 0 success, 2 bad input (config, flags,
//! files), 3 failure while running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CesError, Result};
use crate::eval::{
    evaluate, question_set, read_report, report_table, stratify, sweep, sweep_records, sweep_table, write_report,
    EvalSettings,
};
use crate::records::{read_jsonl_numbered, read_questions, write_jsonl, write_questions, RolloutRecord};
use crate::replay::shape_rollouts;
use crate::shaping::{ShapingConfig, ShapingMode};
use crate::tasks::TierMix;
use crate::trainer::{initial_policy, run_training};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const PRECEDENCE: &str = "Flags override the corresponding values in the --config file; \
    the file overrides built-in defaults.";

#[derive(Debug, Parser)]
#[command(name = "ces", version, about = "Conditional entropy shaping on a toy arithmetic policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write metrics plus a final checkpoint.
    #[command(after_help = PRECEDENCE)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a question set.
    Eval(EvalArgs),
    /// Re-shape a rollout dump offline.
    Shape(ShapeArgs),
    /// Train and evaluate one policy per (tau, beta) grid cell.
    #[command(after_help = PRECEDENCE)]
    Sweep(SweepArgs),
    /// Write a frozen, seed-generated question set.
    GenQuestions(GenQuestionsArgs),
}

fn parse_mode(s: &str) -> std::result::Result<ShapingMode, String> {
    ShapingMode::parse(s).ok_or_else(|| {
        let names: Vec<_> = ShapingMode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode '{s}', expected one of {}", names.join("|"))
    })
}

/// Comma-separated grid values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(Grid)
}

fn parse_mix(s: &str) -> std::result::Result<TierMix, String> {
    match s {
        "easy" => Ok(TierMix::Easy),
        "hard" => Ok(TierMix::Hard),
        "mixed" => Ok(TierMix::Mixed),
        _ => Err(format!("unknown tier mix '{s}', expected easy|hard|mixed")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// full-ces | remove-acc | detach | off | entropy-adv
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ShapingMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics output (one JSON record per step).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Also dump every sampled response.
    #[arg(long)]
    pub dump_rollouts: Option<PathBuf>,
    /// Final checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Question set written by `gen-questions`.
    #[arg(long)]
    pub questions: PathBuf,
    /// Earlier report; adds the simple/difficult comparison.
    #[arg(long)]
    pub baseline_report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Responses sampled per question.
    #[arg(long, default_value_t = 4)]
    pub generations: usize,
    #[arg(long, default_value_t = 0.4)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    /// Rollout dump from `train --dump-rollouts`.
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.4)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.4)]
    pub beta2: f64,
    /// full-ces | remove-acc | detach | off | entropy-adv
    #[arg(long, value_parser = parse_mode, default_value = "full-ces")]
    pub mode: ShapingMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated tau values.
    #[arg(long, value_parser = parse_grid, default_value = "0.005,0.01,0.05")]
    pub tau_grid: Grid,
    /// Comma-separated beta values (sets beta1 and beta2).
    #[arg(long, value_parser = parse_grid, default_value = "0.4,1.0,2.0")]
    pub beta_grid: Grid,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenQuestionsArgs {
    /// Take count, seed and tier mix from this config's [eval] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// easy | hard | mixed
    #[arg(long, value_parser = parse_mix)]
    pub tier_mix: Option<TierMix>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure with the exit code it maps to.
struct Failure(i32, CesError);

fn input(e: CesError) -> Failure {
    Failure(EXIT_INPUT, e)
}

fn runtime(e: CesError) -> Failure {
    Failure(EXIT_RUNTIME, e)
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Shape(a) => cmd_shape(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GenQuestions(a) => cmd_gen_questions(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure(code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}

fn parent_exists(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CesError::Input(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(&a.config).map_err(input)?;
    if let Some(mode) = a.mode {
        cfg.shaping.mode = mode;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = a.metrics {
        cfg.output.metrics = p;
    }
    if let Some(p) = a.checkpoint {
        cfg.output.checkpoint = p;
    }
    if a.dump_rollouts.is_some() {
        cfg.output.rollouts = a.dump_rollouts;
    }
    cfg.validate().map_err(input)?;
    let out = &cfg.output;
    for p in [Some(&out.metrics), Some(&out.checkpoint), out.rollouts.as_ref()].into_iter().flatten() {
        parent_exists(p).map_err(input)?;
    }
    let init = initial_policy(&cfg).map_err(runtime)?;
    let result = run_training(&cfg, init).map_err(runtime)?;
    if let Some(last) = result.metrics.last() {
        println!(
            "{} steps, {} samples: length {:.2}, entropy {:.4} bits, accuracy {:.3}",
            result.metrics.len(),
            last.samples,
            last.mean_length,
            last.mean_entropy_bits,
            last.mean_group_accuracy
        );
    } else {
        println!("0 steps: initial policy written");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let vocab = crate::policy::Vocabulary::arithmetic();
    let ckpt = checkpoint::load(&a.checkpoint, &vocab).map_err(input)?;
    let questions = read_questions(&a.questions).map_err(input)?;
    let baseline = a.baseline_report.as_deref().map(read_report).transpose().map_err(input)?;
    parent_exists(&a.out).map_err(input)?;
    let settings = EvalSettings {
        generations: a.generations,
        temperature: a.temperature,
        budget: ckpt.fmap.max_len,
        seed: a.seed,
    };
    if settings.generations == 0 || !(settings.temperature.is_finite() && settings.temperature > 0.0) {
        return Err(input(CesError::Input("generations and temperature must be positive".into())));
    }
    let mut report = evaluate(&ckpt.params, &ckpt.fmap, &questions, &settings).map_err(input)?;
    if let Some(base) = &baseline {
        report.comparison = Some(stratify(base, &report).map_err(input)?);
    }
    write_report(&a.out, &report).map_err(runtime)?;
    print!("{}", report_table(&report));
    Ok(())
}

fn cmd_shape(a: ShapeArgs) -> Outcome {
    let config = ShapingConfig {
        tau: a.tau,
        beta1: a.beta1,
        beta2: a.beta2,
        mode: a.mode,
    };
    config.validate().map_err(input)?;
    let records: Vec<(usize, RolloutRecord)> = read_jsonl_numbered(&a.rollouts).map_err(input)?;
    let shaped = shape_rollouts(&records, &config, &a.rollouts.display().to_string()).map_err(input)?;
    parent_exists(&a.out).map_err(input)?;
    write_jsonl(&a.out, &shaped).map_err(runtime)?;
    let selected = shaped.iter().filter(|r| r.selected).count();
    println!("{} tokens shaped, {selected} selected", shaped.len());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Outcome {
    let (taus, betas) = (a.tau_grid.0, a.beta_grid.0);
    if taus.is_empty() || betas.is_empty() {
        return Err(input(CesError::Input("sweep grids must be non-empty".into())));
    }
    let cfg = RunConfig::load(&a.config).map_err(input)?;
    parent_exists(&a.out).map_err(input)?;
    let questions = question_set(cfg.eval.seed, cfg.eval.questions, cfg.eval.tier_mix);
    let init = initial_policy(&cfg).map_err(runtime)?;
    let result = sweep(&cfg, &init, &questions, &taus, &betas).map_err(input)?;
    write_jsonl(&a.out, sweep_records(&result)).map_err(runtime)?;
    print!("{}", sweep_table(&result));
    for c in result.cells.iter().filter(|c| c.outcome.is_err()) {
        eprintln!("cell tau={} beta={} failed: {}", c.tau, c.beta, c.outcome.as_ref().unwrap_err());
    }
    if result.succeeded() == 0 {
        return Err(runtime(CesError::Input("every sweep cell failed".into())));
    }
    Ok(())
}

fn cmd_gen_questions(a: GenQuestionsArgs) -> Outcome {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(input)?,
        None => RunConfig::default(),
    };
    let count = a.count.unwrap_or(cfg.eval.questions);
    if count == 0 {
        return Err(input(CesError::Input("question count must be positive".into())));
    }
    let questions = question_set(a.seed.unwrap_or(cfg.eval.seed), count, a.tier_mix.unwrap_or(cfg.eval.tier_mix));
    parent_exists(&a.out).map_err(input)?;
    write_questions(&a.out, &questions).map_err(runtime)?;
    println!("{count} questions written");
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use avvp_core::autodiff::{load_checkpoint, Primitive};
use avvp_core::dgm::ImbalanceMode;
use avvp_core::experiment::{
    self, ablate, evaluate_checkpoint, gradcheck_suite, overlay_json, to_json, train, write_run, AblationGrid,
    ExperimentError, GradcheckOptions, Preset, RunConfig, SplitName,
};
use avvp_core::model::PipelineMode;
use avvp_core::synth::{self, SynthConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "avvp",
    version,
    about = "Imbalance-aware training for weakly-supervised audio-visual parsing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write its report, loss curves and checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one dataset split.
    Evaluate(EvaluateArgs),
    /// Run an ablation grid over cells and seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every primitive and both pipelines.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic data config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dominance: Option<f64>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DgmFlag {
    Off,
    Score,
    Discrepancy,
    Fusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeFlag {
    Traditional,
    Msdu,
}

#[derive(Args)]
struct RunOverrides {
    /// Run config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    #[arg(long, value_enum)]
    dgm: Option<DgmFlag>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    noise: Option<Switch>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Continue from a checkpoint at the epoch it records.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Grid file (JSON) with base config, cells, seeds and workers.
    #[arg(long, conflicts_with = "preset")]
    grid: Option<PathBuf>,
    #[arg(long, default_value = "pipeline")]
    preset: Preset,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Relative tolerance against central differences.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Flip the backward rule of one primitive (suite self-test).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

fn read_json<T: serde::Serialize + serde::de::DeserializeOwned>(
    path: &Path,
    defaults: &T,
) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path)?;
    overlay_json(defaults, &text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

fn run_config(o: &RunOverrides) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &o.config {
        Some(p) => read_json(p, &RunConfig::default())?,
        None => RunConfig::default(),
    };
    o.apply(&mut cfg);
    Ok(cfg)
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.model.mode = match m {
                ModeFlag::Traditional => PipelineMode::Traditional,
                ModeFlag::Msdu => PipelineMode::Msdu,
            };
        }
        if let Some(d) = self.dgm {
            cfg.optimizer.dgm = match d {
                DgmFlag::Off => None,
                DgmFlag::Score => Some(ImbalanceMode::Score),
                DgmFlag::Discrepancy => Some(ImbalanceMode::Discrepancy),
                DgmFlag::Fusion => Some(ImbalanceMode::Fusion),
            };
        }
        if let Some(g) = self.gamma {
            cfg.optimizer.gamma = g;
        }
        if let Some(n) = self.noise {
            cfg.optimizer.noise = matches!(n, Switch::On);
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
    }
}

fn generate(a: GenerateArgs) -> Result<(), ExperimentError> {
    let defaults = RunConfig::default().synth;
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p, &defaults)?,
        None => defaults,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.dominance {
        cfg.dominance = d;
    }
    if let Some(v) = a.videos {
        cfg.videos = v;
    }
    let data = synth::generate(&cfg)?;
    synth::save(&data, &a.out)?;
    println!(
        "{} videos, T={}, C={}, D_a={}, D_v={}, dominance {}, label rate {:.3} -> {}",
        data.len(),
        cfg.snippets,
        cfg.classes,
        cfg.audio_dim,
        cfg.visual_dim,
        cfg.dominance,
        data.label_rate(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), ExperimentError> {
    let cfg = run_config(&a.run)?;
    let data = cfg.load_dataset()?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let start = Instant::now();
    let outcome = train(&cfg, &data, resume)?;
    write_run(&outcome, &a.out, start.elapsed().as_secs_f64())?;
    let r = &outcome.report;
    println!(
        "final loss_a {:.4} loss_v {:.4} gap {:.4}; test segment Type@AV {:.4} -> {}",
        r.epochs.last().map_or(0.0, |e| e.loss_a),
        r.epochs.last().map_or(0.0, |e| e.loss_v),
        r.final_loss_gap,
        r.test.segment_type,
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), ExperimentError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = match &a.dataset {
        Some(dir) => synth::load(dir)?,
        None => {
            let cfg: RunConfig = serde_json::from_value(ck.meta["run"].clone())
                .map_err(|e| ExperimentError::Config(format!("checkpoint run config: {e}")))?;
            cfg.load_dataset()?
        }
    };
    let report = evaluate_checkpoint(ck, &data, a.split)?;
    let json = to_json(&report);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(experiment::METRICS_FILE), &json)?;
    }
    print!("{json}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<(), ExperimentError> {
    let mut grid = match &a.grid {
        Some(p) => read_json(p, &AblationGrid::default())?,
        None => AblationGrid::preset(a.preset, run_config(&a.run)?),
    };
    if a.grid.is_some() {
        a.run.apply(&mut grid.base);
    }
    if let Some(s) = a.seeds {
        grid.seeds = s;
    }
    if let Some(w) = a.workers {
        grid.workers = w;
    }
    let data = grid.base.load_dataset()?;
    let outcome = ablate(&grid, &data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablation.csv"), outcome.to_csv())?;
    fs::write(a.out.join("ablation_summary.csv"), outcome.summary_csv())?;
    fs::write(a.out.join("ablation_grid.json"), to_json(&grid))?;
    print!("{}", outcome.summary_csv());
    if outcome.failures() > 0 {
        eprintln!("{} grid runs failed; see ablation.csv", outcome.failures());
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool, ExperimentError> {
    let fault = match &a.fault {
        Some(name) => Some(
            Primitive::from_name(name).ok_or_else(|| ExperimentError::Config(format!("unknown primitive `{name}`")))?,
        ),
        None => None,
    };
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        step: a.step,
        fault,
        ..GradcheckOptions::default()
    };
    let results = gradcheck_suite(&opts)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        println!(
            "{} {:<24} error {:.3e} tolerance {:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.error,
            r.tolerance
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| true),
        Command::Ablate(a) => ablate_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

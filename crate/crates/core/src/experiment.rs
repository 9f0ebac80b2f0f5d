//! Training runs, evaluation, ablation grids and the gradient-check suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    grad_check_params_with, relative_error, AutodiffError, Checkpoint, Group, ParameterStore, Primitive, Tape, Tensor,
    Var,
};
use crate::dgm::{DgmError, ImbalanceMode, ImbalanceReport, Optimizer, OptimizerConfig, IMBALANCE_CSV_HEADER};
use crate::metrics::{binarize, full_report, EvalConfig, MetricsError, MetricsReport};
use crate::model::{analytic_logit_grad, Model, ModelConfig, ModelError, PipelineMode, VideoBatch};
use crate::synth::{self, DataError, Dataset, SynthConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dgm(#[from] DgmError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training aborted at epoch {epoch}, batch {batch} (videos {videos:?}): {message}")]
    Batch {
        epoch: usize,
        batch: usize,
        videos: Vec<usize>,
        message: String,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Errors caused by invalid user input rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::Data(DataError::Config(_) | DataError::Usage(_))
                | Self::Model(ModelError::Config(_))
                | Self::Dgm(DgmError::Config(_))
        )
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory; when absent the dataset is generated from `synth`.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Seeds initialization, batch order and update noise.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            dominance: 0.6,
            noise_scale: 0.1,
            ..SynthConfig::default()
        };
        let model = ModelConfig {
            audio_dim: synth.audio_dim,
            visual_dim: synth.visual_dim,
            num_classes: synth.classes,
            hidden_dim: 32,
            ..ModelConfig::default()
        };
        Self {
            dataset: None,
            synth,
            split: [2000.0 / 2400.0, 200.0 / 2400.0, 200.0 / 2400.0],
            split_seed: 0,
            model,
            optimizer: OptimizerConfig {
                learning_rate: 3.0,
                noise: false,
                ..OptimizerConfig::default()
            },
            seed: 0,
            epochs: 25,
            batch_size: 64,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fields absent from `text` keep their default values, at any depth.
    pub fn from_json(text: &str) -> Result<Self> {
        overlay_json(&Self::default(), text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ExperimentError::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    /// The dataset named by `dataset`, or a freshly generated one.
    pub fn load_dataset(&self) -> Result<Dataset> {
        Ok(match &self.dataset {
            Some(dir) => synth::load(dir)?,
            None => synth::generate(&self.synth)?,
        })
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `text` as a JSON object and applies it over `defaults`.
pub fn overlay_json<T: Serialize + serde::de::DeserializeOwned>(defaults: &T, text: &str) -> Result<T> {
    let over: serde_json::Value = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut value = serde_json::to_value(defaults)?;
    merge(&mut value, over);
    serde_json::from_value(value).map_err(|e| ExperimentError::Config(e.to_string()))
}

fn check_dims(model: &ModelConfig, data: &SynthConfig) -> Result<()> {
    let pairs = [
        ("audio dim", model.audio_dim, data.audio_dim),
        ("visual dim", model.visual_dim, data.visual_dim),
        ("classes", model.num_classes, data.classes),
    ];
    for (name, m, d) in pairs {
        if m != d {
            return Err(ExperimentError::Config(format!(
                "model {name} {m} does not match dataset {name} {d}"
            )));
        }
    }
    Ok(())
}

/// Per-epoch aggregate of the batch imbalance reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSummary {
    pub mean_omega_v_minus_a: f64,
    pub mean_mu_a: f64,
    pub mean_mu_v: f64,
    /// Batches in which the visual side was damped.
    pub visual_damped: usize,
    pub audio_damped: usize,
    pub degenerate: usize,
    pub batches: usize,
}

impl ImbalanceSummary {
    fn from_reports(reports: &[ImbalanceReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(Self {
            mean_omega_v_minus_a: reports.iter().map(|r| r.omega_v_minus_a).sum::<f64>() / n,
            mean_mu_a: reports.iter().map(|r| r.mu_a).sum::<f64>() / n,
            mean_mu_v: reports.iter().map(|r| r.mu_v).sum::<f64>() / n,
            visual_damped: reports.iter().filter(|r| r.mu_v < 1.0).count(),
            audio_damped: reports.iter().filter(|r| r.mu_a < 1.0).count(),
            degenerate: reports.iter().filter(|r| r.degenerate).count(),
            batches: reports.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_a: f64,
    pub loss_v: f64,
    pub loss_video: f64,
    pub loss_total: f64,
    pub imbalance: Option<ImbalanceSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// `msdu-branch`, or `fused-pooled` when the per-modality losses pool
    /// the fused heads and are therefore confounded by cross-attention.
    pub modality_loss_source: String,
    pub modality_loss_confounded: bool,
    pub epochs: Vec<EpochRecord>,
    /// `|loss_a - loss_v|` at the final epoch.
    pub final_loss_gap: f64,
    pub omega_evaluations: u64,
    pub parameters: usize,
    pub videos: SplitSizes,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

impl RunReport {
    pub fn all_finite(&self) -> bool {
        let epoch_ok = self.epochs.iter().all(|e| {
            [e.lr, e.loss_a, e.loss_v, e.loss_video, e.loss_total]
                .iter()
                .all(|v| v.is_finite())
                && e.imbalance.as_ref().is_none_or(|s| {
                    [s.mean_omega_v_minus_a, s.mean_mu_a, s.mean_mu_v]
                        .iter()
                        .all(|v| v.is_finite())
                })
        });
        epoch_ok
            && self.final_loss_gap.is_finite()
            && self
                .val
                .values()
                .iter()
                .chain(&self.test.values())
                .all(|v| v.is_finite())
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from("epoch,loss_a,loss_v,loss_total\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{},{}", e.epoch, e.loss_a, e.loss_v, e.loss_total).unwrap();
        }
        out
    }
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
    /// Per-batch imbalance rows, header included.
    pub imbalance_csv: String,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({
                "epoch": self.report.epochs.len(),
                "run": self.report.config,
                "history": self.report.epochs,
            }),
            params: self.model.params.clone(),
        }
    }
}

/// Batch order and update noise of one epoch, independent of earlier epochs.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains from scratch, or continues from `resume` at the epoch it records.
pub fn train(cfg: &RunConfig, dataset: &Dataset, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dims(&cfg.model, &dataset.config)?;
    let split = synth::split(dataset.len(), cfg.split, cfg.split_seed)?;

    let (mut model, mut history, start) = match resume {
        None => (Model::new(cfg.model.clone(), cfg.seed)?, Vec::new(), 0),
        Some(ck) => {
            let epoch = ck.meta["epoch"]
                .as_u64()
                .ok_or_else(|| ExperimentError::Config("checkpoint has no epoch counter".into()))?
                as usize;
            let history: Vec<EpochRecord> = serde_json::from_value(ck.meta["history"].clone())?;
            if history.len() != epoch {
                return Err(ExperimentError::Config(format!(
                    "checkpoint epoch {epoch} disagrees with its {} history records",
                    history.len()
                )));
            }
            (Model::from_params(cfg.model.clone(), ck.params)?, history, epoch)
        }
    };
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut imbalance_csv = format!("{IMBALANCE_CSV_HEADER}\n");
    let mut order = split.train.clone();

    for epoch in start..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.clone_from(&split.train);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut reports = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let abort = |message: String| ExperimentError::Batch {
                epoch,
                batch: b,
                videos: chunk.to_vec(),
                message,
            };
            let batch = dataset.batch(chunk)?;
            let mut tape = Tape::new();
            let vars = model.forward(&mut tape, &batch).map_err(|e| abort(e.to_string()))?;
            let losses = model
                .losses(&mut tape, &vars, &batch.labels)
                .map_err(|e| abort(e.to_string()))?;
            let values = [losses.audio, losses.visual, losses.video, losses.total].map(|v| tape.value(v).item());
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(abort(format!("non-finite loss {bad}")));
            }
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
            tape.backward(losses.total, &mut model.params)
                .map_err(|e| abort(e.to_string()))?;
            let heads = vars.measurement_heads().outputs(&tape);
            let report = optimizer.measure(&heads, &batch.labels)?;
            if let Some(r) = &report {
                writeln!(imbalance_csv, "{}", r.csv_row(epoch, b)).unwrap();
                reports.push(r.clone());
            }
            optimizer
                .step(&mut model.params, report.as_ref(), lr, &mut rng)
                .map_err(|e| abort(e.to_string()))?;
        }
        let n = split.train.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss_a: sums[0] / n,
            loss_v: sums[1] / n,
            loss_video: sums[2] / n,
            loss_total: sums[3] / n,
            imbalance: ImbalanceSummary::from_reports(&reports),
        };
        log::info!(
            "epoch {epoch}: loss_a {:.4} loss_v {:.4} total {:.4}",
            record.loss_a,
            record.loss_v,
            record.loss_total
        );
        history.push(record);
    }

    let last = history.last().expect("at least one epoch");
    let final_loss_gap = (last.loss_a - last.loss_v).abs();
    let confounded = cfg.model.mode == PipelineMode::Traditional;
    let report = RunReport {
        config: cfg.clone(),
        modality_loss_source: if confounded { "fused-pooled" } else { "msdu-branch" }.into(),
        modality_loss_confounded: confounded,
        epochs: history,
        final_loss_gap,
        omega_evaluations: optimizer.omega_evaluations,
        parameters: model.params.total_count(),
        videos: SplitSizes {
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        },
        val: evaluate(&model, dataset, &split.val, &cfg.eval)?,
        test: evaluate(&model, dataset, &split.test, &cfg.eval)?,
    };
    if !report.all_finite() {
        return Err(ExperimentError::Config("run report holds non-finite values".into()));
    }
    Ok(TrainOutcome {
        report,
        model,
        imbalance_csv,
    })
}

const EVAL_CHUNK: usize = 256;

/// Scores the fused snippet predictions of `indices` against their truth.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize], eval: &EvalConfig) -> Result<MetricsReport> {
    check_dims(model.config(), &dataset.config)?;
    let (t, c) = (dataset.config.snippets, dataset.config.classes);
    let mut probs_a = Vec::with_capacity(indices.len() * t * c);
    let mut probs_v = Vec::with_capacity(indices.len() * t * c);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let cache = model.infer(&batch)?;
        probs_a.extend_from_slice(cache.fused.p_a.data());
        probs_v.extend_from_slice(cache.fused.p_v.data());
    }
    let shape = vec![indices.len(), t, c];
    let pred_a = binarize(&Tensor::new(shape.clone(), probs_a)?, eval.threshold)?;
    let pred_v = binarize(&Tensor::new(shape, probs_v)?, eval.threshold)?;
    let (truth_a, truth_v) = dataset.truth(indices);
    Ok(full_report(&pred_a, &pred_v, &truth_a, &truth_v, eval)?)
}

/// Which split of the dataset to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Rebuilds a trained model from a checkpoint and scores one split.
pub fn evaluate_checkpoint(ck: Checkpoint, dataset: &Dataset, which: SplitName) -> Result<MetricsReport> {
    let cfg: RunConfig = serde_json::from_value(ck.meta["run"].clone())
        .map_err(|e| ExperimentError::Config(format!("checkpoint run config: {e}")))?;
    check_dims(&cfg.model, &dataset.config)?;
    let model = Model::from_params(cfg.model.clone(), ck.params)?;
    let split = synth::split(dataset.len(), cfg.split, cfg.split_seed)?;
    let indices = match which {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    };
    evaluate(&model, dataset, indices, &cfg.eval)
}

pub const REPORT_FILE: &str = "run_report.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const IMBALANCE_FILE: &str = "imbalance.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TIMING_FILE: &str = "timing.json";

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(outcome: &TrainOutcome, dir: &Path, seconds: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), to_json(&outcome.report))?;
    fs::write(dir.join(LOSSES_FILE), outcome.report.losses_csv())?;
    fs::write(dir.join(IMBALANCE_FILE), &outcome.imbalance_csv)?;
    fs::write(
        dir.join(METRICS_FILE),
        to_json(&serde_json::json!({ "val": outcome.report.val, "test": outcome.report.test })),
    )?;
    fs::write(dir.join(CHECKPOINT_FILE), outcome.checkpoint().to_bytes())?;
    fs::write(
        dir.join(TIMING_FILE),
        to_json(&serde_json::json!({ "seconds": seconds })),
    )?;
    Ok(())
}

/// One arm of an ablation grid, applied on top of the base run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub mode: PipelineMode,
    pub dgm: Option<ImbalanceMode>,
    pub gamma: f64,
    pub noise: bool,
}

impl AblationCell {
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.mode = self.mode;
        cfg.optimizer.dgm = self.dgm;
        cfg.optimizer.gamma = self.gamma;
        cfg.optimizer.noise = self.noise;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// baseline, +DGM, +DGM+MSDU
    Pipeline,
    /// score, discrepancy and fusion imbalance measures
    Measure,
    /// baseline plus gamma in 0.1..=0.9
    Gamma,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pipeline" => Ok(Self::Pipeline),
            "measure" => Ok(Self::Measure),
            "gamma" => Ok(Self::Gamma),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub base: RunConfig,
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
    /// Worker threads running cells concurrently.
    pub workers: usize,
}

impl AblationGrid {
    /// Fields absent from `text` keep the pipeline preset's values, at any depth.
    pub fn from_json(text: &str) -> Result<Self> {
        overlay_json(&Self::default(), text)
    }
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self::preset(Preset::Pipeline, RunConfig::default())
    }
}

pub fn baseline_cell(base: &RunConfig) -> AblationCell {
    AblationCell {
        name: "baseline".into(),
        mode: PipelineMode::Traditional,
        dgm: None,
        gamma: base.optimizer.gamma,
        noise: base.optimizer.noise,
    }
}

impl AblationGrid {
    pub fn preset(preset: Preset, base: RunConfig) -> Self {
        let gamma = base.optimizer.gamma;
        let noise = base.optimizer.noise;
        let cell = |name: &str, mode, dgm, gamma| AblationCell {
            name: name.into(),
            mode,
            dgm,
            gamma,
            noise,
        };
        let fusion = Some(ImbalanceMode::Fusion);
        let cells = match preset {
            Preset::Pipeline => vec![
                baseline_cell(&base),
                cell("dgm", PipelineMode::Traditional, fusion, gamma),
                cell("dgm+msdu", PipelineMode::Msdu, fusion, gamma),
            ],
            Preset::Measure => [ImbalanceMode::Score, ImbalanceMode::Discrepancy, ImbalanceMode::Fusion]
                .into_iter()
                .map(|m| cell(&m.to_string(), PipelineMode::Msdu, Some(m), gamma))
                .collect(),
            Preset::Gamma => std::iter::once(baseline_cell(&base))
                .chain((1..=9).map(|k| {
                    let g = k as f64 / 10.0;
                    cell(&format!("gamma={g}"), PipelineMode::Msdu, fusion, g)
                }))
                .collect(),
        };
        Self {
            base,
            cells,
            seeds: vec![0, 1, 2],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub loss_a: f64,
    pub loss_v: f64,
    pub loss_gap: f64,
    pub omega_evaluations: u64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    /// `Err` holds the failure message; the grid continues past it.
    pub result: std::result::Result<CellResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
}

fn run_cell(
    cell: &AblationCell,
    base: &RunConfig,
    seed: u64,
    dataset: &Dataset,
) -> std::result::Result<CellResult, String> {
    let cfg = cell.apply(base, seed);
    let out = train(&cfg, dataset, None).map_err(|e| e.to_string())?;
    let last = out.report.epochs.last().expect("nonempty");
    Ok(CellResult {
        loss_a: last.loss_a,
        loss_v: last.loss_v,
        loss_gap: out.report.final_loss_gap,
        omega_evaluations: out.report.omega_evaluations,
        test: out.report.test,
    })
}

/// Runs every (cell, seed) pair. Rows come back in grid order regardless of
/// the worker count.
pub fn ablate(grid: &AblationGrid, dataset: &Dataset) -> Result<AblationOutcome> {
    if grid.cells.is_empty() || grid.seeds.is_empty() {
        return Err(ExperimentError::Config("ablation grid needs cells and seeds".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..grid.cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let workers = grid.workers.clamp(1, jobs.len());
    let mut results: Vec<Option<std::result::Result<CellResult, String>>> = vec![None; jobs.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    (w..jobs.len())
                        .step_by(workers)
                        .map(|j| {
                            let (c, seed) = jobs[j];
                            log::info!("ablation cell {} seed {seed}", grid.cells[c].name);
                            (j, run_cell(&grid.cells[c], &grid.base, seed, dataset))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (j, r) in h.join().expect("ablation worker panicked") {
                results[j] = Some(r);
            }
        }
    });
    let rows = jobs
        .into_iter()
        .zip(results)
        .map(|((c, seed), r)| AblationRow {
            cell: grid.cells[c].clone(),
            seed,
            result: r.expect("every job ran"),
        })
        .collect();
    Ok(AblationOutcome { rows })
}

fn dgm_label(d: Option<ImbalanceMode>) -> String {
    d.map_or_else(|| "off".to_string(), |m| m.to_string())
}

fn mode_label(m: PipelineMode) -> &'static str {
    match m {
        PipelineMode::Traditional => "traditional",
        PipelineMode::Msdu => "msdu",
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl AblationOutcome {
    /// One row per (cell, seed).
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "cell,mode,dgm,gamma,noise,seed,status,loss_a,loss_v,loss_gap,omega_evaluations,{}\n",
            MetricsReport::CSV_HEADER
        );
        for r in &self.rows {
            let c = &r.cell;
            let prefix = format!(
                "{},{},{},{},{},{}",
                c.name,
                mode_label(c.mode),
                dgm_label(c.dgm),
                c.gamma,
                c.noise,
                r.seed
            );
            match &r.result {
                Ok(v) => writeln!(
                    out,
                    "{prefix},ok,{:.6},{:.6},{:.6},{},{}",
                    v.loss_a,
                    v.loss_v,
                    v.loss_gap,
                    v.omega_evaluations,
                    v.test.to_csv_row()
                )
                .unwrap(),
                Err(e) => {
                    let msg = e.replace([',', '\n'], ";");
                    writeln!(out, "{prefix},failed: {msg}{}", ",".repeat(14)).unwrap()
                }
            }
        }
        out
    }

    /// Cells in first-appearance order with the successful results of each.
    pub fn by_cell(&self) -> Vec<(&AblationCell, Vec<&CellResult>)> {
        let mut cells: Vec<(&AblationCell, Vec<&CellResult>)> = Vec::new();
        for r in &self.rows {
            let idx = match cells.iter().position(|(c, _)| c.name == r.cell.name) {
                Some(i) => i,
                None => {
                    cells.push((&r.cell, Vec::new()));
                    cells.len() - 1
                }
            };
            if let Ok(v) = &r.result {
                cells[idx].1.push(v);
            }
        }
        cells
    }

    /// One row per cell: mean and sample standard deviation over seeds.
    pub fn summary_csv(&self) -> String {
        let names: Vec<&str> = ["loss_gap"]
            .into_iter()
            .chain(MetricsReport::CSV_HEADER.split(','))
            .collect();
        let mut out = String::from("cell,seeds");
        for n in &names {
            write!(out, ",{n}_mean,{n}_sd").unwrap();
        }
        out.push('\n');
        for (cell, results) in self.by_cell() {
            write!(out, "{},{}", cell.name, results.len()).unwrap();
            for k in 0..names.len() {
                let xs: Vec<f64> = results
                    .iter()
                    .map(|r| if k == 0 { r.loss_gap } else { r.test.values()[k - 1] })
                    .collect();
                if xs.is_empty() {
                    out.push_str(",,");
                } else {
                    let (m, s) = mean_sd(&xs);
                    write!(out, ",{m:.6},{s:.6}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_err()).count()
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Relative tolerance against central differences.
    pub tolerance: f64,
    /// Tolerance of the closed-form logit gradient identity.
    pub identity_tolerance: f64,
    pub step: f64,
    /// Flips one primitive's backward rule, for testing the suite itself.
    pub fault: Option<Primitive>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            identity_tolerance: 1e-10,
            step: 1e-4,
            fault: None,
            seed: 7,
        }
    }
}

type CheckFn = Box<dyn Fn(&mut Tape, &ParameterStore) -> std::result::Result<Var, AutodiffError>>;

struct PrimitiveCase {
    name: &'static str,
    inputs: Vec<(&'static str, Tensor)>,
    body: CheckFn,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(name: &'static str, inputs: Vec<(&'static str, Tensor)>, body: CheckFn) -> PrimitiveCase {
    PrimitiveCase { name, inputs, body }
}

fn unary(f: fn(&mut Tape, Var) -> std::result::Result<Var, AutodiffError>) -> CheckFn {
    Box::new(move |t, s| {
        let x = t.param(s, s.id("x").unwrap());
        f(t, x)
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> std::result::Result<Var, AutodiffError>) -> CheckFn {
    Box::new(move |t, s| {
        let a = t.param(s, s.id("a").unwrap());
        let b = t.param(s, s.id("b").unwrap());
        f(t, a, b)
    })
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<PrimitiveCase> {
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(rng, shape, lo, hi);
    let x23 = r(&[2, 3], -1.5, 1.5);
    let x234 = r(&[2, 3, 4], -1.5, 1.5);
    let linear_inputs = vec![
        ("x", r(&[2, 3, 4], -1.5, 1.5)),
        ("w", r(&[4, 5], -1.5, 1.5)),
        ("b", r(&[5], -1.5, 1.5)),
    ];
    let mm = vec![("a", r(&[3, 4], -1.5, 1.5)), ("b", r(&[4, 2], -1.5, 1.5))];
    let bmm = vec![("a", r(&[2, 3, 4], -1.5, 1.5)), ("b", r(&[2, 4, 3], -1.5, 1.5))];
    let smm = vec![("a", r(&[2, 3, 4], -1.5, 1.5)), ("b", r(&[4, 2], -1.5, 1.5))];
    let bcast = vec![("a", r(&[2, 3], -1.5, 1.5)), ("b", r(&[1, 3], -1.5, 1.5))];
    let div = vec![("a", r(&[2, 3], -1.5, 1.5)), ("b", r(&[2, 1], 0.5, 1.5))];
    let positive = r(&[2, 3], 0.3, 2.0);
    let cat = vec![("a", r(&[2, 2, 3], -1.5, 1.5)), ("b", r(&[2, 1, 3], -1.5, 1.5))];
    let kinked = away_from_zero(rng, &[2, 3]);
    vec![
        case(
            "linear",
            linear_inputs,
            Box::new(|t, s| {
                let x = t.param(s, s.id("x").unwrap());
                let w = t.param(s, s.id("w").unwrap());
                let b = t.param(s, s.id("b").unwrap());
                t.linear(x, w, b)
            }),
        ),
        case("matmul", mm, binary(|t, a, b| t.matmul(a, b))),
        case("matmul.batched", bmm, binary(|t, a, b| t.matmul(a, b))),
        case("matmul.shared_rhs", smm, binary(|t, a, b| t.matmul(a, b))),
        case("add", bcast.clone(), binary(|t, a, b| t.add(a, b))),
        case("sub", bcast.clone(), binary(|t, a, b| t.sub(a, b))),
        case("mul", bcast, binary(|t, a, b| t.mul(a, b))),
        case("div", div, binary(|t, a, b| t.div(a, b))),
        case(
            "affine",
            vec![("x", x23.clone())],
            unary(|t, x| Ok(t.affine(x, -1.7, 0.3))),
        ),
        case("sigmoid", vec![("x", x23.clone())], unary(|t, x| Ok(t.sigmoid(x)))),
        case("tanh", vec![("x", x23.clone())], unary(|t, x| Ok(t.tanh(x)))),
        case("exp", vec![("x", x23)], unary(|t, x| t.exp(x))),
        case("relu", vec![("x", kinked.clone())], unary(|t, x| Ok(t.relu(x)))),
        case("clamp", vec![("x", kinked)], unary(|t, x| Ok(t.clamp(x, -1.0, 1.0)))),
        case("log", vec![("x", positive)], unary(|t, x| t.log(x))),
        case("softmax", vec![("x", x234.clone())], unary(|t, x| t.softmax(x, &[2]))),
        case(
            "softmax.joint",
            vec![("x", x234.clone())],
            unary(|t, x| t.softmax(x, &[1, 2])),
        ),
        case("concat", cat, binary(|t, a, b| t.concat(&[a, b], 1))),
        case("transpose", vec![("x", x234.clone())], unary(|t, x| t.transpose(x))),
        case("sum", vec![("x", x234.clone())], unary(|t, x| t.sum(x, &[1]))),
        case("mean", vec![("x", x234.clone())], unary(|t, x| t.mean(x, &[0, 2]))),
        case("reshape", vec![("x", x234)], unary(|t, x| t.reshape(x, &[6, 4]))),
    ]
}

/// Reduces a check body's output to a scalar through fixed random weights,
/// so every output element carries a distinct upstream gradient.
fn weighted_scalar(tape: &mut Tape, out: Var, seed: u64) -> std::result::Result<Var, AutodiffError> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.leaf(random_tensor(&mut rng, &shape, 0.5, 1.5));
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn pipeline_check(mode: PipelineMode, opts: &GradcheckOptions) -> Result<f64> {
    let cfg = ModelConfig {
        audio_dim: 3,
        visual_dim: 4,
        hidden_dim: 4,
        num_classes: 3,
        mode,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 1);
    let (n, t) = (2, 3);
    let audio = random_tensor(&mut rng, &[n, t, 3], -1.0, 1.0);
    let visual = random_tensor(&mut rng, &[n, t, 4], -1.0, 1.0);
    let labels = Tensor::new(vec![n, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).expect("shape");
    let batch = VideoBatch::new(audio, visual, labels, None)?;
    let f = |tape: &mut Tape, store: &ParameterStore| {
        let to_ad = |e: ModelError| AutodiffError::Usage(e.to_string());
        let m = Model::from_params(cfg.clone(), store.clone()).map_err(to_ad)?;
        let vars = m.forward(tape, &batch).map_err(to_ad)?;
        let losses = m.losses(tape, &vars, &batch.labels).map_err(to_ad)?;
        Ok(losses.total)
    };
    Ok(grad_check_params_with(f, &model.params, opts.step, opts.fault)?)
}

/// Autodiff gradient of the summed cross-entropy at the logits against
/// `sigmoid(z) - Y`.
fn logit_identity_check(opts: &GradcheckOptions) -> Result<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 2);
    let z = random_tensor(&mut rng, &[4, 3], -3.0, 3.0);
    let y = Tensor::from_fn(&[4, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    if let Some(p) = opts.fault {
        tape.inject_fault(p);
    }
    let zv = tape.leaf(z.clone());
    let yv = tape.leaf(y.clone());
    let p = tape.sigmoid(zv);
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(q)?;
    let ny = tape.affine(yv, -1.0, 1.0);
    let a = tape.mul(yv, log_p)?;
    let b = tape.mul(ny, log_q)?;
    let ll = tape.add(a, b)?;
    let total = tape.sum_all(ll)?;
    let loss = tape.affine(total, -1.0, 0.0);
    let grads = tape.gradients(loss)?;
    let autodiff = grads.get(zv).cloned().unwrap_or_else(|| Tensor::zeros(z.shape()));
    let analytic = analytic_logit_grad(&z, &y)?;
    Ok(autodiff
        .data()
        .iter()
        .zip(analytic.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Every primitive, both full pipelines, and the logit gradient identity.
pub fn gradcheck_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::new();
    for (k, case) in primitive_cases(&mut rng).into_iter().enumerate() {
        let mut store = ParameterStore::new();
        for (name, t) in case.inputs {
            store.insert(name, Group::Shared, t)?;
        }
        let weight_seed = opts.seed.wrapping_add(100 + k as u64);
        let body = &case.body;
        let f = |tape: &mut Tape, s: &ParameterStore| {
            let out = body(tape, s)?;
            weighted_scalar(tape, out, weight_seed)
        };
        let error = grad_check_params_with(f, &store, opts.step, opts.fault)?;
        results.push(CheckResult {
            name: case.name.into(),
            error,
            tolerance: opts.tolerance,
            passed: error < opts.tolerance,
        });
    }
    for (name, mode) in [
        ("pipeline.traditional", PipelineMode::Traditional),
        ("pipeline.msdu", PipelineMode::Msdu),
    ] {
        let error = pipeline_check(mode, opts)?;
        results.push(CheckResult {
            name: name.into(),
            error,
            tolerance: opts.tolerance,
            passed: error < opts.tolerance,
        });
    }
    let error = logit_identity_check(opts)?;
    results.push(CheckResult {
        name: "logit-gradient-identity".into(),
        error,
        tolerance: opts.identity_tolerance,
        passed: error < opts.identity_tolerance,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            synth: SynthConfig {
                videos: 40,
                snippets: 6,
                classes: 4,
                audio_dim: 6,
                visual_dim: 6,
                dominance: 0.6,
                event_density: 1.5,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                audio_dim: 6,
                visual_dim: 6,
                num_classes: 4,
                hidden_dim: 8,
                ..d.model
            },
            split: [0.5, 0.25, 0.25],
            epochs: 3,
            batch_size: 8,
            ..d
        }
    }

    #[test]
    fn run_is_deterministic_and_finite() {
        let cfg = tiny();
        let data = cfg.load_dataset().unwrap();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(to_json(&a.report), to_json(&b.report));
        assert_eq!(a.report.epochs.len(), 3);
        assert!(a.report.all_finite());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny();
        let data = cfg.load_dataset().unwrap();
        let full = train(&cfg, &data, None).unwrap();
        let first = train(
            &RunConfig {
                epochs: 2,
                ..cfg.clone()
            },
            &data,
            None,
        )
        .unwrap();
        let resumed = train(&cfg, &data, Some(first.checkpoint())).unwrap();
        assert_eq!(resumed.report.epochs[2].lr, cfg.optimizer.lr_at(2));
        assert_eq!(full.report.losses_csv(), resumed.report.losses_csv());
    }

    #[test]
    fn baseline_never_measures_imbalance() {
        let cfg = baseline_cell(&tiny()).apply(&tiny(), 0);
        let data = cfg.load_dataset().unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert_eq!(out.report.omega_evaluations, 0);
        assert!(out.report.modality_loss_confounded);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut cfg = tiny();
        cfg.model.audio_dim = 5;
        let data = tiny().load_dataset().unwrap();
        let err = train(&cfg, &data, None).unwrap_err();
        assert!(err.is_usage(), "{err}");
    }

    #[test]
    fn nan_features_abort_with_batch_ids() {
        let cfg = tiny();
        let mut data = cfg.load_dataset().unwrap();
        for v in &mut data.videos {
            v.audio[0] = f32::NAN;
        }
        match train(&cfg, &data, None) {
            Err(ExperimentError::Batch {
                epoch: 0,
                batch: 0,
                videos,
                ..
            }) => assert!(!videos.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partial_json_keeps_nested_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"mode": "msdu"}, "optimizer": {"gamma": 0.4}}"#).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.model.mode, PipelineMode::Msdu);
        assert_eq!(cfg.model.audio_dim, d.model.audio_dim);
        assert_eq!(cfg.optimizer.gamma, 0.4);
        assert_eq!(cfg.optimizer.learning_rate, d.optimizer.learning_rate);
        assert!(RunConfig::from_json(r#"{"model": {"depth": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optimizer": {"dgm": null}}"#)
            .unwrap()
            .optimizer
            .dgm
            .is_none());
    }

    #[test]
    fn preset_cardinalities() {
        let base = RunConfig::default();
        assert_eq!(AblationGrid::preset(Preset::Pipeline, base.clone()).cells.len(), 3);
        assert_eq!(AblationGrid::preset(Preset::Measure, base.clone()).cells.len(), 3);
        assert_eq!(AblationGrid::preset(Preset::Gamma, base).cells.len(), 10);
    }
}

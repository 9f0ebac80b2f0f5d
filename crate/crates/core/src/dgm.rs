//! Imbalance measurement, balance coefficients and the modulated update.
//!
//! Per batch, each modality's progress is summarized by its video-level
//! class scores `s` (single-modality attention pooling). The imbalance ratio
//! `omega_v_minus_a` compares visual to audio confidence mass; the dominant
//! modality gets its gradient damped by `mu = 1 - tanh(gamma * omega)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Group, ParameterStore, Tensor};
use crate::model::HeadOutputs;

/// Floor for numerator and denominator of the imbalance ratio.
pub const OMEGA_GUARD: f64 = 1e-8;
pub const OMEGA_MIN: f64 = 1e-3;
pub const OMEGA_MAX: f64 = 1e3;

#[derive(Debug, Error)]
pub enum DgmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("labeling error: {0}")]
    Labels(String),
    #[error("usage error: {0}")]
    Usage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceMode {
    Score,
    Discrepancy,
    Fusion,
}

impl std::str::FromStr for ImbalanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "score" => Ok(Self::Score),
            "discrepancy" => Ok(Self::Discrepancy),
            "fusion" => Ok(Self::Fusion),
            other => Err(format!("unknown imbalance mode `{other}`")),
        }
    }
}

impl std::fmt::Display for ImbalanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Score => "score",
            Self::Discrepancy => "discrepancy",
            Self::Fusion => "fusion",
        })
    }
}

/// One batch's imbalance measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub omega_v_minus_a: f64,
    pub omega_a_minus_v: f64,
    pub mu_a: f64,
    pub mu_v: f64,
    /// `sum_n sum_c s_a * Y`
    pub score_a: f64,
    pub score_v: f64,
    /// `sum_n discrepancy_a[n]`
    pub discrepancy_a: f64,
    pub discrepancy_v: f64,
    /// Set when a nonpositive ratio term forced `omega = 1`.
    pub degenerate: bool,
}

pub const IMBALANCE_CSV_HEADER: &str =
    "epoch,batch,omega_v_minus_a,mu_a,mu_v,score_a,score_v,discrepancy_a,discrepancy_v";

impl ImbalanceReport {
    /// `omega = 1`, `mu = 1`: no modulation.
    pub fn neutral() -> Self {
        Self {
            omega_v_minus_a: 1.0,
            omega_a_minus_v: 1.0,
            mu_a: 1.0,
            mu_v: 1.0,
            score_a: 0.0,
            score_v: 0.0,
            discrepancy_a: 0.0,
            discrepancy_v: 0.0,
            degenerate: false,
        }
    }

    pub fn csv_row(&self, epoch: usize, batch: usize) -> String {
        format!(
            "{epoch},{batch},{},{},{},{},{},{},{}",
            self.omega_v_minus_a,
            self.mu_a,
            self.mu_v,
            self.score_a,
            self.score_v,
            self.discrepancy_a,
            self.discrepancy_v
        )
    }

    /// Fills `mu_a`, `mu_v` from the stored ratio.
    pub fn with_mu(mut self, gamma: f64) -> Self {
        let (mu_a, mu_v) = compute_mu(self.omega_v_minus_a, gamma);
        self.mu_a = mu_a;
        self.mu_v = mu_v;
        self
    }
}

fn pool_one(p: &Tensor, a: &Tensor) -> Result<Tensor, DgmError> {
    let (ps, as_) = (p.shape(), a.shape());
    if ps.len() != 3 || as_ != [ps[0], ps[1], 1] {
        return Err(DgmError::Dimension(format!(
            "probabilities {ps:?} vs attention scores {as_:?}"
        )));
    }
    let (n, t, c) = (ps[0], ps[1], ps[2]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let scores = &a.data()[i * t..(i + 1) * t];
        let total: f64 = scores.iter().sum();
        for (k, &w) in scores.iter().enumerate() {
            let w = w / total;
            let row = &p.data()[(i * t + k) * c..(i * t + k + 1) * c];
            for (o, &pv) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o += w * pv;
            }
        }
    }
    Ok(Tensor::new(vec![n, c], out).expect("shape matches"))
}

/// Per-modality video scores `s[n][c] = sum_t w[n][t] * P[n][t][c]`, where
/// `w` normalizes the positive attention scores over that modality's `T`
/// snippets only. Returns `(s_a, s_v)`.
pub fn modality_video_scores(heads: &HeadOutputs) -> Result<(Tensor, Tensor), DgmError> {
    Ok((pool_one(&heads.p_a, &heads.a_a)?, pool_one(&heads.p_v, &heads.a_v)?))
}

fn check_pair(s: &Tensor, y: &Tensor) -> Result<(usize, usize), DgmError> {
    if s.rank() != 2 || s.shape() != y.shape() {
        return Err(DgmError::Dimension(format!(
            "scores {:?} vs labels {:?}",
            s.shape(),
            y.shape()
        )));
    }
    Ok((s.shape()[0], s.shape()[1]))
}

/// Mean score over the positive classes minus mean score over the negative
/// classes, per video. The negative mean of a video without negatives is 0.
pub fn discrepancy_term(s: &Tensor, y: &Tensor) -> Result<Vec<f64>, DgmError> {
    let (n, c) = check_pair(s, y)?;
    (0..n)
        .map(|i| {
            let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
            for k in 0..c {
                let v = s.data()[i * c + k];
                if y.data()[i * c + k] > 0.5 {
                    pos += v;
                    np += 1;
                } else {
                    neg += v;
                    nn += 1;
                }
            }
            if np == 0 {
                return Err(DgmError::Labels(format!("video {i} has no positive label")));
            }
            let neg_mean = if nn == 0 { 0.0 } else { neg / nn as f64 };
            Ok(pos / np as f64 - neg_mean)
        })
        .collect()
}

fn score_sum(s: &Tensor, y: &Tensor) -> f64 {
    s.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Imbalance ratio of visual over audio progress. `mu_a`, `mu_v` are left
/// at 1; see [`compute_mu`] and [`ImbalanceReport::with_mu`].
pub fn compute_omega(s_a: &Tensor, s_v: &Tensor, y: &Tensor, mode: ImbalanceMode) -> Result<ImbalanceReport, DgmError> {
    let (n, _) = check_pair(s_a, y)?;
    check_pair(s_v, y)?;
    if n == 0 {
        return Err(DgmError::Usage("empty batch".into()));
    }
    let score_a = score_sum(s_a, y);
    let score_v = score_sum(s_v, y);
    let discrepancy_a: f64 = discrepancy_term(s_a, y)?.iter().sum();
    let discrepancy_v: f64 = discrepancy_term(s_v, y)?.iter().sum();
    let (num, den) = match mode {
        ImbalanceMode::Score => (score_v, score_a),
        ImbalanceMode::Discrepancy => (discrepancy_v, discrepancy_a),
        ImbalanceMode::Fusion => (score_v + discrepancy_v, score_a + discrepancy_a),
    };
    let degenerate = !(num > 0.0 && den > 0.0);
    let omega = if degenerate {
        log::debug!("degenerate imbalance batch: numerator {num}, denominator {den}; omega forced to 1");
        1.0
    } else {
        (num.max(OMEGA_GUARD) / den.max(OMEGA_GUARD)).clamp(OMEGA_MIN, OMEGA_MAX)
    };
    Ok(ImbalanceReport {
        omega_v_minus_a: omega,
        omega_a_minus_v: 1.0 / omega,
        mu_a: 1.0,
        mu_v: 1.0,
        score_a,
        score_v,
        discrepancy_a,
        discrepancy_v,
        degenerate,
    })
}

/// `1 - tanh(x)` as `2 / (1 + e^{2x})`, kept strictly positive.
fn one_minus_tanh(x: f64) -> f64 {
    (2.0 / (1.0 + (2.0 * x).exp())).max(f64::MIN_POSITIVE)
}

/// Balance coefficients `(mu_a, mu_v)`. Only the side whose ratio exceeds 1
/// is damped.
pub fn compute_mu(omega_v_minus_a: f64, gamma: f64) -> (f64, f64) {
    let omega_a_minus_v = 1.0 / omega_v_minus_a;
    let mu_v = if omega_v_minus_a > 1.0 {
        one_minus_tanh(gamma * omega_v_minus_a)
    } else {
        1.0
    };
    let mu_a = if omega_a_minus_v > 1.0 {
        one_minus_tanh(gamma * omega_a_minus_v)
    } else {
        1.0
    };
    (mu_a, mu_v)
}

/// I.i.d. `N(0, (mu^2 + 1) * variance)` entries; all zeros when the variance
/// is zero.
pub fn noise_sample<R: Rng + ?Sized>(shape: &[usize], mu: f64, variance: f64, rng: &mut R) -> Tensor {
    let var = (mu * mu + 1.0) * variance;
    if var <= 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, var.sqrt()).expect("finite positive deviation");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Population variance of a tensor's elements.
pub fn element_variance(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub gamma: f64,
    /// `None` disables gradient modulation.
    pub dgm: Option<ImbalanceMode>,
    /// Compensating noise on damped tensors.
    pub noise: bool,
    /// Also damp shared tensors, by the smaller coefficient.
    pub modulate_shared: bool,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Replaces every measured ratio when set.
    pub force_omega: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 5e-4,
            gamma: 0.1,
            dgm: Some(ImbalanceMode::Fusion),
            noise: true,
            modulate_shared: false,
            lr_decay: 0.25,
            decay_every: 6,
            force_omega: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), DgmError> {
        let positive = [
            ("learning rate", self.learning_rate),
            ("gamma", self.gamma),
            ("lr decay", self.lr_decay),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(DgmError::Config(format!("{name} must be positive, got {v}")));
        }
        if self.decay_every == 0 {
            return Err(DgmError::Config("decay interval must be positive".into()));
        }
        if let Some(w) = self.force_omega {
            if !(w > 0.0 && w.is_finite()) {
                return Err(DgmError::Config(format!("forced omega must be positive, got {w}")));
            }
        }
        Ok(())
    }

    /// Step size at a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Modulated gradient-descent optimizer with an optional Adam variant.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: Vec<(Tensor, Tensor)>,
    steps: u64,
    /// Number of imbalance measurements performed.
    pub omega_evaluations: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self, DgmError> {
        config.validate()?;
        Ok(Self {
            config,
            moments: Vec::new(),
            steps: 0,
            omega_evaluations: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Imbalance report for a batch, or `None` when modulation is off.
    pub fn measure(&mut self, heads: &HeadOutputs, labels: &Tensor) -> Result<Option<ImbalanceReport>, DgmError> {
        let Some(mode) = self.config.dgm else {
            return Ok(None);
        };
        self.omega_evaluations += 1;
        let (s_a, s_v) = modality_video_scores(heads)?;
        let mut report = compute_omega(&s_a, &s_v, labels, mode)?;
        if let Some(w) = self.config.force_omega {
            report.omega_v_minus_a = w;
            report.omega_a_minus_v = 1.0 / w;
            report.degenerate = false;
        }
        Ok(Some(report.with_mu(self.config.gamma)))
    }

    fn coefficient(&self, group: Group, report: Option<&ImbalanceReport>) -> f64 {
        let Some(r) = report else { return 1.0 };
        match group {
            Group::Audio => r.mu_a,
            Group::Visual => r.mu_v,
            Group::Shared if self.config.modulate_shared => r.mu_a.min(r.mu_v),
            Group::Shared => 1.0,
        }
    }

    /// Applies one update with step size `lr` and zeroes the gradients.
    /// Damped tensors receive `mu * g`, plus compensating noise when enabled.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        params: &mut ParameterStore,
        report: Option<&ImbalanceReport>,
        lr: f64,
        rng: &mut R,
    ) -> Result<(), DgmError> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(DgmError::Usage(format!("gradient of `{}` is not finite", p.name())));
        }
        if self.config.kind == OptimizerKind::Adam && self.moments.len() != params.len() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                .collect();
        }
        self.steps += 1;
        let coefficients: Vec<f64> = params.iter().map(|p| self.coefficient(p.group(), report)).collect();
        for (i, p) in params.iter_mut().enumerate() {
            let mu = coefficients[i];
            let noise = (self.config.noise && mu < 1.0)
                .then(|| noise_sample(p.grad.shape(), mu, element_variance(&p.grad), rng));
            match self.config.kind {
                OptimizerKind::Sgd => {
                    let scale = lr * mu;
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= scale * g;
                    }
                    if let Some(eps) = &noise {
                        for (w, e) in p.value.data_mut().iter_mut().zip(eps.data()) {
                            *w -= lr * e;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    let (m, v) = &mut self.moments[i];
                    for k in 0..p.grad.len() {
                        let g = mu * p.grad.data()[k] + noise.as_ref().map_or(0.0, |e| e.data()[k]);
                        let mk = &mut m.data_mut()[k];
                        *mk = b1 * *mk + (1.0 - b1) * g;
                        let vk = &mut v.data_mut()[k];
                        *vk = b2 * *vk + (1.0 - b2) * g * g;
                        let update = (m.data()[k] / c1) / ((v.data()[k] / c2).sqrt() + eps);
                        p.value.data_mut()[k] -= lr * update;
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

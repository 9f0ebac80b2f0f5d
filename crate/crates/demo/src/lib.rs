//! Browser bindings: balance coefficient curves, a synthetic video preview,
//! and a small side-by-side training run. Every export returns JSON.

use avvp_core::dgm::{compute_mu, ImbalanceMode};
use avvp_core::experiment::{train, RunConfig};
use avvp_core::model::{ModelConfig, PipelineMode};
use avvp_core::synth::{self, SynthConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// `{gamma, omega, mu_a, mu_v}` over `points` log-spaced ratios in
/// `[1/omega_max, omega_max]`.
pub fn mu_curve_value(gamma: f64, omega_max: f64, points: usize) -> Result<Value, String> {
    if !(gamma > 0.0 && omega_max > 1.0 && points >= 2) {
        return Err("need gamma > 0, omega_max > 1 and at least 2 points".into());
    }
    let span = omega_max.ln();
    let (mut omega, mut mu_a, mut mu_v) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..points {
        let w = (-span + 2.0 * span * i as f64 / (points - 1) as f64).exp();
        let (a, v) = compute_mu(w, gamma);
        omega.push(w);
        mu_a.push(a);
        mu_v.push(v);
    }
    Ok(json!({ "gamma": gamma, "omega": omega, "mu_a": mu_a, "mu_v": mu_v }))
}

#[wasm_bindgen]
pub fn mu_curve(gamma: f64, omega_max: f64, points: usize) -> Result<String, JsError> {
    to_js(mu_curve_value(gamma, omega_max, points))
}

fn preview_config(dominance: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        videos: 1,
        snippets: 10,
        classes: 6,
        audio_dim: 16,
        visual_dim: 16,
        dominance,
        noise_scale: 0.5,
        event_density: 2.0,
        seed,
    }
}

/// One synthetic video: per-modality truth grids and the projection of each
/// snippet onto each class prototype, both `T x C` row-major.
pub fn preview_value(dominance: f64, seed: u64) -> Result<Value, String> {
    let cfg = preview_config(dominance, seed);
    let data = synth::generate(&cfg).map_err(|e| e.to_string())?;
    let protos = synth::prototypes(&cfg);
    let video = &data.videos[0];
    let project = |feat: &[f32], protos: &[Vec<f64>], dim: usize| -> Vec<f64> {
        (0..cfg.snippets)
            .flat_map(|t| {
                let row = &feat[t * dim..(t + 1) * dim];
                protos
                    .iter()
                    .map(move |p| row.iter().zip(p).map(|(&x, w)| x as f64 * w).sum::<f64>())
            })
            .collect()
    };
    Ok(json!({
        "snippets": cfg.snippets,
        "classes": cfg.classes,
        "labels": video.labels,
        "audio_truth": video.audio_truth,
        "visual_truth": video.visual_truth,
        "audio_response": project(&video.audio, &protos.audio, cfg.audio_dim),
        "visual_response": project(&video.visual, &protos.visual, cfg.visual_dim),
    }))
}

#[wasm_bindgen]
pub fn preview_video(dominance: f64, seed: u32) -> Result<String, JsError> {
    to_js(preview_value(dominance, seed.into()))
}

/// Desk configuration shrunk to run in a browser tab within seconds.
pub fn demo_config(dominance: f64, epochs: usize, seed: u64) -> RunConfig {
    let d = RunConfig::default();
    RunConfig {
        synth: SynthConfig {
            videos: 360,
            snippets: 8,
            classes: 5,
            audio_dim: 12,
            visual_dim: 12,
            dominance,
            noise_scale: 0.1,
            event_density: 1.5,
            seed,
        },
        model: ModelConfig {
            audio_dim: 12,
            visual_dim: 12,
            num_classes: 5,
            hidden_dim: 16,
            ..d.model
        },
        split: [0.75, 0.125, 0.125],
        epochs,
        batch_size: 32,
        seed,
        ..d
    }
}

/// Trains the baseline and the modulated pipeline with separated heads on
/// the same data and reports both loss curves and test scores.
pub fn compare_value(dominance: f64, epochs: usize, gamma: f64, seed: u64) -> Result<Value, String> {
    let base = demo_config(dominance, epochs, seed);
    let data = base.load_dataset().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (name, mode, dgm) in [
        ("baseline", PipelineMode::Traditional, None),
        ("dgm+msdu", PipelineMode::Msdu, Some(ImbalanceMode::Fusion)),
    ] {
        let mut cfg = base.clone();
        cfg.model.mode = mode;
        cfg.optimizer.dgm = dgm;
        cfg.optimizer.gamma = gamma;
        let out = train(&cfg, &data, None).map_err(|e| e.to_string())?;
        let r = &out.report;
        runs.push(json!({
            "name": name,
            "loss_a": r.epochs.iter().map(|e| e.loss_a).collect::<Vec<_>>(),
            "loss_v": r.epochs.iter().map(|e| e.loss_v).collect::<Vec<_>>(),
            "mu_v": r.epochs.iter().map(|e| e.imbalance.as_ref().map(|s| s.mean_mu_v)).collect::<Vec<_>>(),
            "final_loss_gap": r.final_loss_gap,
            "test": r.test,
        }));
    }
    Ok(json!({ "runs": runs }))
}

#[wasm_bindgen]
pub fn compare_training(dominance: f64, epochs: usize, gamma: f64, seed: u32) -> Result<String, JsError> {
    to_js(compare_value(dominance, epochs, gamma, seed.into()))
}

//! Synthetic weakly-labeled two-modality event videos.
//!
//! Every class owns one unit-norm prototype per modality. An event covers a
//! contiguous snippet interval and is visible in audio only, visual only, or
//! both. A snippet feature is the sum of the scaled prototypes of the events
//! visible at that snippet plus isotropic Gaussian noise. Audio prototypes are
//! scaled by `1 + dominance` and visual ones by `1 - dominance`, which makes
//! audio the easier modality whenever `dominance > 0`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::metrics::SnippetLabels;
use crate::model::{ModelError, VideoBatch};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: String,
        offset: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: usize,
    pub snippets: usize,
    pub classes: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Audio amplitude boost in `[0, 1]`.
    pub dominance: f64,
    pub noise_scale: f64,
    /// Expected number of events per video.
    pub event_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 2400,
            snippets: 10,
            classes: 8,
            audio_dim: 32,
            visual_dim: 32,
            dominance: 0.0,
            noise_scale: 0.5,
            event_density: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.dominance) {
            return Err(DataError::Config(format!(
                "dominance must lie in [0, 1], got {}",
                self.dominance
            )));
        }
        if !(self.event_density > 0.0 && self.event_density.is_finite()) {
            return Err(DataError::Config(format!(
                "event density must be positive, got {}",
                self.event_density
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(DataError::Config(format!(
                "noise scale must be nonnegative, got {}",
                self.noise_scale
            )));
        }
        let dims = [
            ("videos", self.videos),
            ("snippets", self.snippets),
            ("classes", self.classes),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::Config(format!("{name} must be positive")));
        }
        Ok(())
    }

    pub fn audio_amplitude(&self) -> f64 {
        1.0 + self.dominance
    }

    pub fn visual_amplitude(&self) -> f64 {
        1.0 - self.dominance
    }
}

/// One video: features, weak label and snippet ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    /// `T x D_a`, row-major.
    pub audio: Vec<f32>,
    /// `T x D_v`, row-major.
    pub visual: Vec<f32>,
    /// Weak label, length `C`.
    pub labels: Vec<bool>,
    /// `T x C` audio snippet truth.
    pub audio_truth: Vec<bool>,
    /// `T x C` visual snippet truth.
    pub visual_truth: Vec<bool>,
}

impl Video {
    /// `y_av = y_a AND y_v`, per snippet and class.
    pub fn audiovisual_truth(&self) -> Vec<bool> {
        self.audio_truth
            .iter()
            .zip(&self.visual_truth)
            .map(|(&a, &v)| a && v)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub videos: Vec<Video>,
}

/// Unit-norm class prototypes, `C x D` per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn prototypes(cfg: &SynthConfig) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let audio = (0..cfg.classes).map(|_| unit_vector(&mut rng, cfg.audio_dim)).collect();
    let visual = (0..cfg.classes)
        .map(|_| unit_vector(&mut rng, cfg.visual_dim))
        .collect();
    Prototypes { audio, visual }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Visibility {
    Audio,
    Visual,
    Both,
}

/// Deterministic in `cfg.seed`. Each video draws from its own ChaCha stream,
/// so videos are independent of generation order.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    if cfg.event_density >= cfg.classes as f64 {
        return Err(DataError::Generation(format!(
            "event density {} saturates the labels of {} classes",
            cfg.event_density, cfg.classes
        )));
    }
    let protos = prototypes(cfg);
    let videos = (0..cfg.videos).map(|n| generate_video(cfg, &protos, n)).collect();
    Ok(Dataset {
        config: cfg.clone(),
        videos,
    })
}

fn generate_video(cfg: &SynthConfig, protos: &Prototypes, index: usize) -> Video {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (t_len, c_len) = (cfg.snippets, cfg.classes);
    let poisson = Poisson::new(cfg.event_density).unwrap();
    let count = (poisson.sample(&mut rng) as usize).max(1);

    let mut audio_truth = vec![false; t_len * c_len];
    let mut visual_truth = vec![false; t_len * c_len];
    let max_len = (t_len / 2).max(2).min(t_len);
    let min_len = 2.min(t_len);
    for _ in 0..count {
        let class = rng.random_range(0..c_len);
        let len = rng.random_range(min_len..=max_len);
        let start = rng.random_range(0..=t_len - len);
        let u: f64 = rng.random();
        let vis = if u < 0.25 {
            Visibility::Audio
        } else if u < 0.5 {
            Visibility::Visual
        } else {
            Visibility::Both
        };
        for t in start..start + len {
            if vis != Visibility::Visual {
                audio_truth[t * c_len + class] = true;
            }
            if vis != Visibility::Audio {
                visual_truth[t * c_len + class] = true;
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let features = |truth: &[bool], protos: &[Vec<f64>], amp: f64, dim: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(t_len * dim);
        for t in 0..t_len {
            let mut row = vec![0.0f64; dim];
            for c in 0..c_len {
                if truth[t * c_len + c] {
                    for (r, p) in row.iter_mut().zip(&protos[c]) {
                        *r += amp * p;
                    }
                }
            }
            for r in row.iter_mut() {
                *r += cfg.noise_scale * normal.sample(rng);
            }
            out.extend(row.into_iter().map(|x| x as f32));
        }
        out
    };
    let audio = features(
        &audio_truth,
        &protos.audio,
        cfg.audio_amplitude(),
        cfg.audio_dim,
        &mut rng,
    );
    let visual = features(
        &visual_truth,
        &protos.visual,
        cfg.visual_amplitude(),
        cfg.visual_dim,
        &mut rng,
    );

    let labels = (0..c_len)
        .map(|c| (0..t_len).any(|t| audio_truth[t * c_len + c] || visual_truth[t * c_len + c]))
        .collect();
    Video {
        audio,
        visual,
        labels,
        audio_truth,
        visual_truth,
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Snippet truth of the selected videos, audio then visual.
    pub fn truth(&self, indices: &[usize]) -> (SnippetLabels, SnippetLabels) {
        let (t, c) = (self.config.snippets, self.config.classes);
        let a: Vec<&[bool]> = indices.iter().map(|&i| self.videos[i].audio_truth.as_slice()).collect();
        let v: Vec<&[bool]> = indices
            .iter()
            .map(|&i| self.videos[i].visual_truth.as_slice())
            .collect();
        (
            SnippetLabels::from_videos(t, c, &a),
            SnippetLabels::from_videos(t, c, &v),
        )
    }

    /// Stacks the selected videos into a batch, carrying snippet truth.
    pub fn batch(&self, indices: &[usize]) -> Result<VideoBatch, ModelError> {
        let cfg = &self.config;
        let (n, t) = (indices.len(), cfg.snippets);
        let mut audio = Vec::with_capacity(n * t * cfg.audio_dim);
        let mut visual = Vec::with_capacity(n * t * cfg.visual_dim);
        let mut labels = Vec::with_capacity(n * cfg.classes);
        for &i in indices {
            let v = &self.videos[i];
            audio.extend(v.audio.iter().map(|&x| x as f64));
            visual.extend(v.visual.iter().map(|&x| x as f64));
            labels.extend(v.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }));
        }
        VideoBatch::new(
            Tensor::new(vec![n, t, cfg.audio_dim], audio)?,
            Tensor::new(vec![n, t, cfg.visual_dim], visual)?,
            Tensor::new(vec![n, cfg.classes], labels)?,
            Some(self.truth(indices)),
        )
    }

    /// Fraction of `(video, class)` pairs with a positive weak label.
    pub fn label_rate(&self) -> f64 {
        let pos: usize = self
            .videos
            .iter()
            .map(|v| v.labels.iter().filter(|&&y| y).count())
            .sum();
        pos as f64 / (self.len() * self.config.classes) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded disjoint partition of `0..len`. Validation and test sizes are
/// rounded from their fractions; training takes the remainder.
pub fn split(len: usize, fractions: [f64; 3], seed: u64) -> Result<Split, DataError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(DataError::Usage(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let val = (fractions[1] * len as f64).round() as usize;
    let test = (fractions[2] * len as f64).round() as usize;
    if val + test >= len || val == 0 || test == 0 {
        return Err(DataError::Usage(format!(
            "fractions {fractions:?} leave an empty split of {len} videos"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_len = len - val - test;
    let mut s = Split {
        train: order[..train_len].to_vec(),
        val: order[train_len..train_len + val].to_vec(),
        test: order[train_len + val..].to_vec(),
    };
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FeatureLayout {
    file: String,
    dtype: String,
    total_bytes: u64,
    /// Bytes per video; video `n` starts at `n * video_stride`.
    video_stride: u64,
    /// Offset of the `T x D_a` audio block within a video.
    audio_offset: u64,
    /// Offset of the `T x D_v` visual block within a video.
    visual_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: SynthConfig,
    features: FeatureLayout,
    labels_file: String,
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    video_labels: Vec<Vec<u8>>,
    audio_truth: Vec<Vec<Vec<u8>>>,
    visual_truth: Vec<Vec<Vec<u8>>>,
}

fn layout(cfg: &SynthConfig) -> FeatureLayout {
    let audio_bytes = (cfg.snippets * cfg.audio_dim * 4) as u64;
    let stride = audio_bytes + (cfg.snippets * cfg.visual_dim * 4) as u64;
    FeatureLayout {
        file: FEATURES_FILE.into(),
        dtype: "f32le".into(),
        total_bytes: stride * cfg.videos as u64,
        video_stride: stride,
        audio_offset: 0,
        visual_offset: audio_bytes,
    }
}

fn nest(flat: &[bool], rows: usize, cols: usize) -> Vec<Vec<u8>> {
    (0..rows)
        .map(|r| (0..cols).map(|c| flat[r * cols + c] as u8).collect())
        .collect()
}

/// Writes `manifest.json`, `features.bin` and `labels.json` into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let cfg = &dataset.config;
    let manifest = Manifest {
        format: "avvp-synthetic".into(),
        version: 1,
        config: cfg.clone(),
        features: layout(cfg),
        labels_file: LABELS_FILE.into(),
    };
    let mut bytes = Vec::with_capacity(manifest.features.total_bytes as usize);
    for v in &dataset.videos {
        for x in v.audio.iter().chain(&v.visual) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let labels = LabelsFile {
        video_labels: dataset
            .videos
            .iter()
            .map(|v| v.labels.iter().map(|&y| y as u8).collect())
            .collect(),
        audio_truth: dataset
            .videos
            .iter()
            .map(|v| nest(&v.audio_truth, cfg.snippets, cfg.classes))
            .collect(),
        visual_truth: dataset
            .videos
            .iter()
            .map(|v| nest(&v.visual_truth, cfg.snippets, cfg.classes))
            .collect(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    fs::write(dir.join(FEATURES_FILE), bytes)?;
    fs::write(
        dir.join(LABELS_FILE),
        serde_json::to_vec(&labels).expect("labels serialize"),
    )?;
    Ok(())
}

fn json_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &[u8], file: &str) -> Result<T, DataError> {
    serde_json::from_slice(text).map_err(|e| DataError::Parse {
        file: file.into(),
        offset: json_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn unnest(rows: &[Vec<u8>], n_rows: usize, n_cols: usize, what: &str) -> Result<Vec<bool>, DataError> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return Err(DataError::Validation(format!("{what} is not {n_rows} x {n_cols}")));
    }
    rows.iter()
        .flatten()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(DataError::Validation(format!("{what} holds non-binary value {other}"))),
        })
        .collect()
}

pub fn load(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = parse_json(&manifest_bytes, MANIFEST_FILE)?;
    let cfg = manifest.config;
    cfg.validate()?;
    let expected = layout(&cfg);
    if manifest.features != expected {
        return Err(DataError::Validation(format!(
            "manifest feature layout {:?} does not match declared shapes (expected {:?})",
            manifest.features, expected
        )));
    }
    let bytes = fs::read(dir.join(&manifest.features.file))?;
    if bytes.len() as u64 != expected.total_bytes {
        let offset = bytes.len().min(expected.total_bytes as usize);
        if (bytes.len() as u64) < expected.total_bytes {
            return Err(DataError::Parse {
                file: FEATURES_FILE.into(),
                offset,
                message: format!(
                    "payload truncated: {} bytes present, manifest declares {}",
                    bytes.len(),
                    expected.total_bytes
                ),
            });
        }
        return Err(DataError::Validation(format!(
            "payload holds {} bytes, manifest declares {}",
            bytes.len(),
            expected.total_bytes
        )));
    }
    let labels_bytes = fs::read(dir.join(&manifest.labels_file))?;
    let labels: LabelsFile = parse_json(&labels_bytes, LABELS_FILE)?;
    if labels.video_labels.len() != cfg.videos
        || labels.audio_truth.len() != cfg.videos
        || labels.visual_truth.len() != cfg.videos
    {
        return Err(DataError::Validation(format!(
            "labels file does not cover {} videos",
            cfg.videos
        )));
    }

    let floats = |range: std::ops::Range<usize>| -> Vec<f32> {
        bytes[range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let stride = expected.video_stride as usize;
    let split_at = expected.visual_offset as usize;
    let mut videos = Vec::with_capacity(cfg.videos);
    for n in 0..cfg.videos {
        let base = n * stride;
        let label_row = unnest(
            std::slice::from_ref(&labels.video_labels[n]),
            1,
            cfg.classes,
            "video label",
        )?;
        let video = Video {
            audio: floats(base..base + split_at),
            visual: floats(base + split_at..base + stride),
            labels: label_row,
            audio_truth: unnest(&labels.audio_truth[n], cfg.snippets, cfg.classes, "audio truth")?,
            visual_truth: unnest(&labels.visual_truth[n], cfg.snippets, cfg.classes, "visual truth")?,
        };
        for c in 0..cfg.classes {
            let any = (0..cfg.snippets)
                .any(|t| video.audio_truth[t * cfg.classes + c] || video.visual_truth[t * cfg.classes + c]);
            if any != video.labels[c] {
                return Err(DataError::Validation(format!(
                    "video {n} class {c}: weak label disagrees with snippet truth"
                )));
            }
        }
        videos.push(video);
    }
    Ok(Dataset { config: cfg, videos })
}

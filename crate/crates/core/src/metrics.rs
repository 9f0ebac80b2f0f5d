//! Segment-level and event-level F-scores for audio, visual and
//! audio-visual event parsing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// Binary `N x T x C` snippet labels (or predictions), row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetLabels {
    videos: usize,
    snippets: usize,
    classes: usize,
    data: Vec<bool>,
}

impl SnippetLabels {
    pub fn zeros(videos: usize, snippets: usize, classes: usize) -> Self {
        Self {
            videos,
            snippets,
            classes,
            data: vec![false; videos * snippets * classes],
        }
    }

    pub fn from_fn(
        videos: usize,
        snippets: usize,
        classes: usize,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut data = Vec::with_capacity(videos * snippets * classes);
        for n in 0..videos {
            for t in 0..snippets {
                for c in 0..classes {
                    data.push(f(n, t, c));
                }
            }
        }
        Self {
            videos,
            snippets,
            classes,
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.videos, self.snippets, self.classes]
    }

    pub fn videos(&self) -> usize {
        self.videos
    }

    pub fn get(&self, n: usize, t: usize, c: usize) -> bool {
        self.data[(n * self.snippets + t) * self.classes + c]
    }

    pub fn set(&mut self, n: usize, t: usize, c: usize, value: bool) {
        self.data[(n * self.snippets + t) * self.classes + c] = value;
    }

    /// The `T x C` timeline of one video.
    pub fn video(&self, n: usize) -> &[bool] {
        let len = self.snippets * self.classes;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Selects a subset of videos, in the given order.
    pub fn select(&self, videos: &[usize]) -> Self {
        let len = self.snippets * self.classes;
        let mut data = Vec::with_capacity(videos.len() * len);
        for &n in videos {
            data.extend_from_slice(self.video(n));
        }
        Self {
            videos: videos.len(),
            snippets: self.snippets,
            classes: self.classes,
            data,
        }
    }

    /// Concatenates per-video timelines (`T x C` each) into one label set.
    pub fn from_videos(snippets: usize, classes: usize, timelines: &[&[bool]]) -> Self {
        let mut data = Vec::with_capacity(timelines.len() * snippets * classes);
        for tl in timelines {
            debug_assert_eq!(tl.len(), snippets * classes);
            data.extend_from_slice(tl);
        }
        Self {
            videos: timelines.len(),
            snippets,
            classes,
            data,
        }
    }

    fn check_same(&self, other: &Self) -> Result<(), MetricsError> {
        if self.dims() != other.dims() {
            return Err(MetricsError::Dimension(format!(
                "label sets {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Prediction is positive iff probability `>= threshold`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<SnippetLabels, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    let s = probs.shape();
    if s.len() != 3 {
        return Err(MetricsError::Dimension(format!(
            "expected N x T x C probabilities, got {s:?}"
        )));
    }
    Ok(SnippetLabels {
        videos: s[0],
        snippets: s[1],
        classes: s[2],
        data: probs.data().iter().map(|&p| p >= threshold).collect(),
    })
}

/// Elementwise AND: an audio-visual event needs both modalities at once.
pub fn audiovisual_truth(audio: &SnippetLabels, visual: &SnippetLabels) -> Result<SnippetLabels, MetricsError> {
    audio.check_same(visual)?;
    Ok(SnippetLabels {
        data: audio.data.iter().zip(&visual.data).map(|(&a, &v)| a && v).collect(),
        ..audio.clone()
    })
}

/// True/false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, and 1 when nothing was expected or predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

fn cell_counts(pred: &[bool], truth: &[bool]) -> Counts {
    let mut c = Counts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

pub fn segment_counts(pred: &SnippetLabels, truth: &SnippetLabels) -> Result<Counts, MetricsError> {
    pred.check_same(truth)?;
    Ok(cell_counts(&pred.data, &truth.data))
}

/// F-score over all `(video, snippet, class)` cells.
pub fn segment_f1(pred: &SnippetLabels, truth: &SnippetLabels) -> Result<f64, MetricsError> {
    Ok(segment_counts(pred, truth)?.f1())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    V,
    AV,
}

/// A run of consecutive positive snippets of one class. Bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventInstance {
    pub modality: Modality,
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl EventInstance {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Temporal intersection-over-union with inclusive snippet bounds.
    pub fn iou(&self, other: &EventInstance) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        let inter = if hi >= lo { hi - lo + 1 } else { 0 };
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

/// Maximal runs of 1s per class of a `T x C` timeline, ordered by class then
/// start.
pub fn extract_events(timeline: &[bool], snippets: usize, classes: usize, modality: Modality) -> Vec<EventInstance> {
    debug_assert_eq!(timeline.len(), snippets * classes);
    let mut events = Vec::new();
    for class in 0..classes {
        let mut start = None;
        for t in 0..=snippets {
            let on = t < snippets && timeline[t * classes + class];
            match (on, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(EventInstance {
                        modality,
                        class,
                        start: s,
                        end: t - 1,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    events
}

/// One-to-one matching of predicted to true events: candidate pairs share a
/// class and have IoU `>= miou`; pairs are taken greedily in descending IoU
/// order (ties by prediction, then truth index).
pub fn event_counts(pred: &[EventInstance], truth: &[EventInstance], miou: f64) -> Counts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if p.class == t.class {
                let iou = p.iou(t);
                if iou >= miou {
                    pairs.push((iou, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: truth.len() - tp,
    }
}

pub fn event_f1(pred: &[EventInstance], truth: &[EventInstance], miou: f64) -> Result<f64, MetricsError> {
    if !(miou > 0.0 && miou <= 1.0) {
        return Err(MetricsError::Usage(format!("IoU threshold {miou} outside (0, 1]")));
    }
    Ok(event_counts(pred, truth, miou).f1())
}

/// Event counts over every video of two label sets.
pub fn event_counts_all(
    pred: &SnippetLabels,
    truth: &SnippetLabels,
    modality: Modality,
    miou: f64,
) -> Result<Vec<Counts>, MetricsError> {
    pred.check_same(truth)?;
    let [n, t, c] = pred.dims();
    Ok((0..n)
        .map(|v| {
            let pe = extract_events(pred.video(v), t, c, modality);
            let te = extract_events(truth.video(v), t, c, modality);
            event_counts(&pe, &te, miou)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Counts pooled over the whole corpus.
    #[default]
    Micro,
    /// F-score per video, then averaged over videos.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub miou: f64,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            miou: 0.5,
            averaging: Averaging::Micro,
        }
    }
}

/// The five scores reported at one level, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub a: f64,
    pub v: f64,
    pub av: f64,
    pub type_av: f64,
    pub event_av: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub segment_a: f64,
    pub segment_v: f64,
    pub segment_av: f64,
    pub segment_type: f64,
    pub segment_event: f64,
    pub event_a: f64,
    pub event_v: f64,
    pub event_av: f64,
    pub event_type: f64,
    pub event_event: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "segment_a,segment_v,segment_av,segment_type,segment_event,event_a,event_v,event_av,event_type,event_event";

    pub fn segment(&self) -> LevelScores {
        LevelScores {
            a: self.segment_a,
            v: self.segment_v,
            av: self.segment_av,
            type_av: self.segment_type,
            event_av: self.segment_event,
        }
    }

    pub fn event(&self) -> LevelScores {
        LevelScores {
            a: self.event_a,
            v: self.event_v,
            av: self.event_av,
            type_av: self.event_type,
            event_av: self.event_event,
        }
    }

    pub fn values(&self) -> [f64; 10] {
        [
            self.segment_a,
            self.segment_v,
            self.segment_av,
            self.segment_type,
            self.segment_event,
            self.event_a,
            self.event_v,
            self.event_av,
            self.event_type,
            self.event_event,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> Self {
        Self {
            segment_a: v[0],
            segment_v: v[1],
            segment_av: v[2],
            segment_type: v[3],
            segment_event: v[4],
            event_a: v[5],
            event_v: v[6],
            event_av: v[7],
            event_type: v[8],
            event_event: v[9],
        }
    }

    pub fn to_csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn reduce(per_video: &[Counts], averaging: Averaging) -> f64 {
    match averaging {
        Averaging::Micro => per_video.iter().copied().sum::<Counts>().f1(),
        Averaging::Macro if per_video.is_empty() => 1.0,
        Averaging::Macro => per_video.iter().map(Counts::f1).sum::<f64>() / per_video.len() as f64,
    }
}

fn per_video_segment(pred: &SnippetLabels, truth: &SnippetLabels) -> Vec<Counts> {
    (0..pred.videos)
        .map(|n| cell_counts(pred.video(n), truth.video(n)))
        .collect()
}

/// All ten scores from binary audio and visual predictions and truth.
/// Audio-visual streams are the AND of the two modalities. Event@AV pools
/// the audio and visual counts rather than averaging their scores.
pub fn full_report(
    pred_a: &SnippetLabels,
    pred_v: &SnippetLabels,
    truth_a: &SnippetLabels,
    truth_v: &SnippetLabels,
    cfg: &EvalConfig,
) -> Result<MetricsReport, MetricsError> {
    if !(cfg.miou > 0.0 && cfg.miou <= 1.0) {
        return Err(MetricsError::Usage(format!(
            "IoU threshold {} outside (0, 1]",
            cfg.miou
        )));
    }
    pred_a.check_same(truth_a)?;
    pred_v.check_same(truth_v)?;
    pred_a.check_same(pred_v)?;
    let pred_av = audiovisual_truth(pred_a, pred_v)?;
    let truth_av = audiovisual_truth(truth_a, truth_v)?;

    let seg_a = per_video_segment(pred_a, truth_a);
    let seg_v = per_video_segment(pred_v, truth_v);
    let seg_av = per_video_segment(&pred_av, &truth_av);
    let seg_pooled: Vec<Counts> = seg_a.iter().zip(&seg_v).map(|(&a, &v)| a + v).collect();

    let ev_a = event_counts_all(pred_a, truth_a, Modality::A, cfg.miou)?;
    let ev_v = event_counts_all(pred_v, truth_v, Modality::V, cfg.miou)?;
    let ev_av = event_counts_all(&pred_av, &truth_av, Modality::AV, cfg.miou)?;
    let ev_pooled: Vec<Counts> = ev_a.iter().zip(&ev_v).map(|(&a, &v)| a + v).collect();

    let avg = cfg.averaging;
    let (sa, sv, sav) = (reduce(&seg_a, avg), reduce(&seg_v, avg), reduce(&seg_av, avg));
    let (ea, ev, eav) = (reduce(&ev_a, avg), reduce(&ev_v, avg), reduce(&ev_av, avg));
    Ok(MetricsReport {
        segment_a: sa,
        segment_v: sv,
        segment_av: sav,
        segment_type: (sa + sv + sav) / 3.0,
        segment_event: reduce(&seg_pooled, avg),
        event_a: ea,
        event_v: ev,
        event_av: eav,
        event_type: (ea + ev + eav) / 3.0,
        event_event: reduce(&ev_pooled, avg),
    })
}

//! Fused (traditional) and modality-separated (MSDU) parsing pipelines.
//!
//! Both pipelines encode each modality snippet-wise, mix the two streams with
//! a hybrid self/cross attention block, and score snippets with a
//! classification head and an attention head. The attention-weighted snippet
//! probabilities of both modalities are pooled into one video-level
//! prediction, which is the only thing the weak video label supervises.
//!
//! The MSDU pipeline adds a second pair of heads per modality that read the
//! encoder outputs before any cross-modal mixing. Their predictions depend on
//! a single modality only and drive the imbalance measurement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Group, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::metrics::SnippetLabels;

/// Logits are clamped to this magnitude before the sigmoid / exp so that
/// every log term of the loss stays finite.
pub const LOGIT_CLAMP: f64 = 16.0;
/// Probabilities entering the cross-entropy are clamped into
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("labeling error: {0}")]
    Labels(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Traditional,
    Msdu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Joint softmax of the attention scores over modality x time.
    Attentive,
    /// Plain mean over modality x time (ablation).
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub mode: PipelineMode,
    pub attention_heads: usize,
    /// Number of linear layers per encoder, with ReLU between them.
    pub encoder_depth: usize,
    pub aggregation: Aggregation,
    pub fused_heads: HeadSharing,
}

/// Whether the post-fusion heads are one shared pair or one pair per
/// modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSharing {
    #[default]
    Separate,
    Shared,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_dim: 128,
            visual_dim: 512,
            hidden_dim: 512,
            num_classes: 25,
            mode: PipelineMode::Msdu,
            attention_heads: 1,
            encoder_depth: 2,
            aggregation: Aggregation::Attentive,
            fused_heads: HeadSharing::Separate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
            ("encoder_depth", self.encoder_depth),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.attention_heads != 1 {
            return Err(ModelError::Config(format!(
                "only single-head attention is supported, got {} heads",
                self.attention_heads
            )));
        }
        Ok(())
    }
}

/// Per-snippet features of a batch of videos with their weak labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    /// `N x T x D_a`
    pub audio: Tensor,
    /// `N x T x D_v`
    pub visual: Tensor,
    /// `N x C`, entries 0 or 1.
    pub labels: Tensor,
    /// Snippet ground truth per modality, for evaluation only.
    pub truth: Option<(SnippetLabels, SnippetLabels)>,
}

impl VideoBatch {
    pub fn new(
        audio: Tensor,
        visual: Tensor,
        labels: Tensor,
        truth: Option<(SnippetLabels, SnippetLabels)>,
    ) -> Result<Self, ModelError> {
        let (sa, sv, sl) = (audio.shape(), visual.shape(), labels.shape());
        if sa.len() != 3 || sv.len() != 3 || sl.len() != 2 || sa[..2] != sv[..2] || sl[0] != sa[0] {
            return Err(ModelError::Dimension(format!(
                "batch shapes audio {sa:?}, visual {sv:?}, labels {sl:?} do not conform"
            )));
        }
        if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(ModelError::Labels("video labels must be 0 or 1".into()));
        }
        if let Some((ta, tv)) = &truth {
            let expect = [sa[0], sa[1], sl[1]];
            if ta.dims() != expect || tv.dims() != expect {
                return Err(ModelError::Dimension(format!(
                    "snippet truth dims {:?}/{:?}, expected {expect:?}",
                    ta.dims(),
                    tv.dims()
                )));
            }
            for n in 0..sa[0] {
                for c in 0..sl[1] {
                    let any = (0..sa[1]).any(|t| ta.get(n, t, c) || tv.get(n, t, c));
                    if any != (labels.get(&[n, c]) == 1.0) {
                        return Err(ModelError::Labels(format!(
                            "video {n} class {c}: label disagrees with snippet truth"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            audio,
            visual,
            labels,
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snippets(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.labels.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSet {
    Fused,
    Msdu,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    cls_w: ParamId,
    cls_b: ParamId,
    att_w: ParamId,
    att_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    self_q: ParamId,
    self_k: ParamId,
    self_v: ParamId,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    audio_encoder: Vec<(ParamId, ParamId)>,
    visual_encoder: Vec<(ParamId, ParamId)>,
    attention: AttentionIds,
    fused: (HeadIds, HeadIds),
    msdu: Option<(HeadIds, HeadIds)>,
}

/// Network parameters plus the layout that wires them into a pipeline.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParameterStore,
    layout: Layout,
}

/// Tape handles of one modality pair of head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub p_a: Var,
    pub p_v: Var,
    pub a_a: Var,
    pub a_v: Var,
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub e_a: Var,
    pub e_v: Var,
    pub f_a: Var,
    pub f_v: Var,
    pub fused: HeadVars,
    pub msdu: Option<HeadVars>,
    pub p_video: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    /// `N x T x C` snippet class probabilities.
    pub p_a: Tensor,
    pub p_v: Tensor,
    /// `N x T x 1` positive, unnormalized attention scores.
    pub a_a: Tensor,
    pub a_v: Tensor,
}

/// All activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub e_a: Tensor,
    pub e_v: Tensor,
    pub f_a: Tensor,
    pub f_v: Tensor,
    pub fused: HeadOutputs,
    /// Present in MSDU mode only.
    pub msdu: Option<HeadOutputs>,
    /// `N x C`
    pub p_video: Tensor,
}

impl HeadVars {
    pub fn outputs(&self, tape: &Tape) -> HeadOutputs {
        HeadOutputs {
            p_a: tape.value(self.p_a).clone(),
            p_v: tape.value(self.p_v).clone(),
            a_a: tape.value(self.a_a).clone(),
            a_v: tape.value(self.a_v).clone(),
        }
    }
}

impl ForwardVars {
    pub fn cache(&self, tape: &Tape) -> ForwardCache {
        ForwardCache {
            e_a: tape.value(self.e_a).clone(),
            e_v: tape.value(self.e_v).clone(),
            f_a: tape.value(self.f_a).clone(),
            f_v: tape.value(self.f_v).clone(),
            fused: self.fused.outputs(tape),
            msdu: self.msdu.map(|h| h.outputs(tape)),
            p_video: tape.value(self.p_video).clone(),
        }
    }

    /// Heads used to measure per-modality progress: the modality-separated
    /// heads when present, otherwise the fused heads.
    pub fn measurement_heads(&self) -> HeadVars {
        self.msdu.unwrap_or(self.fused)
    }
}

impl ForwardCache {
    pub fn measurement_heads(&self) -> &HeadOutputs {
        self.msdu.as_ref().unwrap_or(&self.fused)
    }
}

/// Loss terms of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// The optimized objective.
    pub total: Var,
    /// Cross-entropy of the fused video-level prediction.
    pub video: Var,
    /// Per-modality video-level losses. In MSDU mode these are the
    /// modality-separated branch losses and are part of `total`; in
    /// traditional mode they pool the fused heads per modality and are
    /// logged only.
    pub audio: Var,
    pub visual: Var,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Model {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let d = config.hidden_dim;
        let c = config.num_classes;

        let encoder = |params: &mut ParameterStore,
                       rng: &mut ChaCha8Rng,
                       prefix: &str,
                       group: Group,
                       input: usize|
         -> Result<Vec<(ParamId, ParamId)>, ModelError> {
            let mut layers = Vec::new();
            let mut fan_in = input;
            for i in 0..config.encoder_depth {
                let w = params.insert(
                    format!("{prefix}.encoder.{i}.weight"),
                    group,
                    uniform_tensor(rng, &[fan_in, d], fan_in),
                )?;
                let b = params.insert(format!("{prefix}.encoder.{i}.bias"), group, Tensor::zeros(&[d]))?;
                layers.push((w, b));
                fan_in = d;
            }
            Ok(layers)
        };
        let audio_encoder = encoder(&mut params, &mut rng, "audio", Group::Audio, config.audio_dim)?;
        let visual_encoder = encoder(&mut params, &mut rng, "visual", Group::Visual, config.visual_dim)?;

        let proj = |params: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str| {
            params.insert(
                format!("attention.{name}"),
                Group::Shared,
                uniform_tensor(rng, &[d, d], d),
            )
        };
        let attention = AttentionIds {
            self_q: proj(&mut params, &mut rng, "self.query")?,
            self_k: proj(&mut params, &mut rng, "self.key")?,
            self_v: proj(&mut params, &mut rng, "self.value")?,
            cross_q: proj(&mut params, &mut rng, "cross.query")?,
            cross_k: proj(&mut params, &mut rng, "cross.key")?,
            cross_v: proj(&mut params, &mut rng, "cross.value")?,
        };

        let head = |params: &mut ParameterStore,
                    rng: &mut ChaCha8Rng,
                    prefix: &str,
                    group: Group|
         -> Result<HeadIds, ModelError> {
            Ok(HeadIds {
                cls_w: params.insert(
                    format!("{prefix}.classifier.weight"),
                    group,
                    uniform_tensor(rng, &[d, c], d),
                )?,
                cls_b: params.insert(format!("{prefix}.classifier.bias"), group, Tensor::zeros(&[c]))?,
                att_w: params.insert(
                    format!("{prefix}.attention.weight"),
                    group,
                    uniform_tensor(rng, &[d, 1], d),
                )?,
                att_b: params.insert(format!("{prefix}.attention.bias"), group, Tensor::zeros(&[1]))?,
            })
        };
        let fused = match config.fused_heads {
            HeadSharing::Shared => {
                let h = head(&mut params, &mut rng, "fused", Group::Shared)?;
                (h, h)
            }
            HeadSharing::Separate => (
                head(&mut params, &mut rng, "audio.fused", Group::Audio)?,
                head(&mut params, &mut rng, "visual.fused", Group::Visual)?,
            ),
        };
        let msdu = match config.mode {
            PipelineMode::Traditional => None,
            PipelineMode::Msdu => Some((
                head(&mut params, &mut rng, "audio.msdu", Group::Audio)?,
                head(&mut params, &mut rng, "visual.msdu", Group::Visual)?,
            )),
        };

        Ok(Self {
            config,
            params,
            layout: Layout {
                audio_encoder,
                visual_encoder,
                attention,
                fused,
                msdu,
            },
        })
    }

    /// Rebuilds a model around stored parameters, checking that every
    /// expected tensor is present with the right shape and group.
    pub fn from_params(config: ModelConfig, params: ParameterStore) -> Result<Self, ModelError> {
        let template = Model::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                template.params.len()
            )));
        }
        for expected in template.params.iter() {
            let found = params
                .by_name(expected.name())
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks `{}`", expected.name())))?;
            if found.value.shape() != expected.value.shape() || found.group() != expected.group() {
                return Err(ModelError::Config(format!(
                    "`{}` is {:?}/{} in the checkpoint, model expects {:?}/{}",
                    expected.name(),
                    found.value.shape(),
                    found.group(),
                    expected.value.shape(),
                    expected.group()
                )));
            }
        }
        let mut model = template;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.get(id).name().to_string();
            model.params.get_mut(id).value = params.by_name(&name).unwrap().value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    fn check_batch(&self, batch: &VideoBatch) -> Result<(), ModelError> {
        let (da, dv) = (batch.audio.shape()[2], batch.visual.shape()[2]);
        if da != self.config.audio_dim || dv != self.config.visual_dim {
            return Err(ModelError::Dimension(format!(
                "batch feature dims audio {da}, visual {dv}; model expects {}, {}",
                self.config.audio_dim, self.config.visual_dim
            )));
        }
        if batch.classes() != self.config.num_classes {
            return Err(ModelError::Dimension(format!(
                "batch has {} classes, model expects {}",
                batch.classes(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Snippet-wise encoders `linear -> ReLU -> linear`, one per modality.
    pub fn encode(&self, tape: &mut Tape, audio: Var, visual: Var) -> Result<(Var, Var), ModelError> {
        let e_a = self.encoder(tape, audio, &self.layout.audio_encoder, self.config.audio_dim)?;
        let e_v = self.encoder(tape, visual, &self.layout.visual_encoder, self.config.visual_dim)?;
        Ok((e_a, e_v))
    }

    fn encoder(
        &self,
        tape: &mut Tape,
        x: Var,
        layers: &[(ParamId, ParamId)],
        input_dim: usize,
    ) -> Result<Var, ModelError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.last() != Some(&input_dim) {
            return Err(ModelError::Dimension(format!(
                "encoder expects feature dim {input_dim}, got shape {shape:?}"
            )));
        }
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            let wv = tape.param(&self.params, w);
            let bv = tape.param(&self.params, b);
            h = tape.linear(h, wv, bv)?;
        }
        Ok(h)
    }

    /// Hybrid attention: each stream keeps a residual copy of itself, attends
    /// over its own snippets, and attends over the other stream's snippets.
    pub fn cross_attend(&self, tape: &mut Tape, e_a: Var, e_v: Var) -> Result<(Var, Var), ModelError> {
        let (sa, sv) = (tape.value(e_a).shape().to_vec(), tape.value(e_v).shape().to_vec());
        if sa != sv || sa.len() != 3 || sa[2] != self.config.hidden_dim {
            return Err(ModelError::Dimension(format!(
                "cross attention needs equal N x T x {} inputs, got {sa:?} and {sv:?}",
                self.config.hidden_dim
            )));
        }
        let ids = self.layout.attention;
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let (sq, sk, sv_) = (p(tape, ids.self_q), p(tape, ids.self_k), p(tape, ids.self_v));
        let (cq, ck, cv) = (p(tape, ids.cross_q), p(tape, ids.cross_k), p(tape, ids.cross_v));

        let stream = |tape: &mut Tape, own: Var, other: Var| -> Result<Var, ModelError> {
            let own_self = self.attend(tape, own, own, (sq, sk, sv_))?;
            let own_cross = self.attend(tape, own, other, (cq, ck, cv))?;
            let h = tape.add(own, own_self)?;
            Ok(tape.add(h, own_cross)?)
        };
        let f_a = stream(tape, e_a, e_v)?;
        let f_v = stream(tape, e_v, e_a)?;
        Ok((f_a, f_v))
    }

    fn attend(
        &self,
        tape: &mut Tape,
        query: Var,
        context: Var,
        (wq, wk, wv): (Var, Var, Var),
    ) -> Result<Var, ModelError> {
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.affine(scores, 1.0 / (self.config.hidden_dim as f64).sqrt(), 0.0);
        let weights = tape.softmax(scaled, &[2])?;
        Ok(tape.matmul(weights, v)?)
    }

    /// Classification and attention heads. `Fused` heads follow
    /// [`ModelConfig::fused_heads`]; `Msdu` heads are modality-specific and
    /// must only be fed pre-fusion features.
    pub fn decision_heads(&self, tape: &mut Tape, x_a: Var, x_v: Var, set: HeadSet) -> Result<HeadVars, ModelError> {
        let (ha, hv) = match set {
            HeadSet::Fused => self.layout.fused,
            HeadSet::Msdu => self
                .layout
                .msdu
                .ok_or_else(|| ModelError::Config("modality-separated heads exist only in msdu mode".into()))?,
        };
        let (p_a, a_a) = self.head(tape, x_a, ha)?;
        let (p_v, a_v) = self.head(tape, x_v, hv)?;
        Ok(HeadVars { p_a, p_v, a_a, a_v })
    }

    fn head(&self, tape: &mut Tape, x: Var, ids: HeadIds) -> Result<(Var, Var), ModelError> {
        let w = tape.param(&self.params, ids.cls_w);
        let b = tape.param(&self.params, ids.cls_b);
        let logits = tape.linear(x, w, b)?;
        let logits = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
        let p = tape.sigmoid(logits);
        let w = tape.param(&self.params, ids.att_w);
        let b = tape.param(&self.params, ids.att_b);
        let scores = tape.linear(x, w, b)?;
        let scores = tape.clamp(scores, -LOGIT_CLAMP, LOGIT_CLAMP);
        let a = tape.exp(scores)?;
        Ok((p, a))
    }

    pub fn forward(&self, tape: &mut Tape, batch: &VideoBatch) -> Result<ForwardVars, ModelError> {
        self.check_batch(batch)?;
        let audio = tape.leaf(batch.audio.clone());
        let visual = tape.leaf(batch.visual.clone());
        let (e_a, e_v) = self.encode(tape, audio, visual)?;
        let msdu = match self.config.mode {
            PipelineMode::Traditional => None,
            PipelineMode::Msdu => Some(self.decision_heads(tape, e_a, e_v, HeadSet::Msdu)?),
        };
        let (f_a, f_v) = self.cross_attend(tape, e_a, e_v)?;
        let fused = self.decision_heads(tape, f_a, f_v, HeadSet::Fused)?;
        let p_video = aggregate_video(tape, fused, self.config.aggregation)?;
        Ok(ForwardVars {
            e_a,
            e_v,
            f_a,
            f_v,
            fused,
            msdu,
            p_video,
        })
    }

    /// Training objective: the video-level cross-entropy, plus in MSDU mode
    /// one cross-entropy per modality-separated branch.
    pub fn losses(&self, tape: &mut Tape, vars: &ForwardVars, labels: &Tensor) -> Result<LossVars, ModelError> {
        let y = tape.leaf(labels.clone());
        let video = mmil_loss(tape, vars.p_video, y)?;
        let heads = vars.measurement_heads();
        let s_a = modality_pool(tape, heads.p_a, heads.a_a)?;
        let s_v = modality_pool(tape, heads.p_v, heads.a_v)?;
        let audio = mmil_loss(tape, s_a, y)?;
        let visual = mmil_loss(tape, s_v, y)?;
        let total = match vars.msdu {
            Some(_) => {
                let t = tape.add(video, audio)?;
                tape.add(t, visual)?
            }
            None => video,
        };
        Ok(LossVars {
            total,
            video,
            audio,
            visual,
        })
    }

    /// Forward pass without gradient bookkeeping, returning the cache.
    pub fn infer(&self, batch: &VideoBatch) -> Result<ForwardCache, ModelError> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, batch)?;
        Ok(vars.cache(&tape))
    }
}

/// Video-level prediction. With attentive aggregation the `2T` attention
/// scores of a video are normalized jointly, then
/// `P[n][c] = sum_m sum_t w_m[n][t] * P_m[n][t][c]`.
pub fn aggregate_video(tape: &mut Tape, heads: HeadVars, aggregation: Aggregation) -> Result<Var, ModelError> {
    let probs = tape.concat(&[heads.p_a, heads.p_v], 1)?;
    let pooled = match aggregation {
        Aggregation::Attentive => {
            let scores = tape.concat(&[heads.a_a, heads.a_v], 1)?;
            let weights = normalize_over_time(tape, scores)?;
            let weighted = tape.mul(weights, probs)?;
            tape.sum(weighted, &[1])?
        }
        Aggregation::Mean => tape.mean(probs, &[1])?,
    };
    squeeze_time(tape, pooled)
}

/// Attention-weighted temporal pooling of a single modality:
/// `s[n][c] = sum_t (A[n][t] / sum_t' A[n][t']) * P[n][t][c]`.
pub fn modality_pool(tape: &mut Tape, p: Var, a: Var) -> Result<Var, ModelError> {
    let weights = normalize_over_time(tape, a)?;
    let weighted = tape.mul(weights, p)?;
    let pooled = tape.sum(weighted, &[1])?;
    squeeze_time(tape, pooled)
}

fn normalize_over_time(tape: &mut Tape, scores: Var) -> Result<Var, ModelError> {
    let total = tape.sum(scores, &[1])?;
    Ok(tape.div(scores, total)?)
}

fn squeeze_time(tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
    let s = tape.value(x).shape().to_vec();
    Ok(tape.reshape(x, &[s[0], s[2]])?)
}

/// Binary cross-entropy averaged over all `N x C` entries, with the
/// probabilities clamped into `[1e-7, 1 - 1e-7]`.
pub fn mmil_loss(tape: &mut Tape, p: Var, y: Var) -> Result<Var, ModelError> {
    let (sp, sy) = (tape.value(p).shape().to_vec(), tape.value(y).shape().to_vec());
    if sp != sy {
        return Err(ModelError::Dimension(format!(
            "loss prediction shape {sp:?} vs label shape {sy:?}"
        )));
    }
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(one_minus_p)?;
    let one_minus_y = tape.affine(y, -1.0, 1.0);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(one_minus_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean_all(ll)?;
    Ok(tape.affine(mean, -1.0, 0.0))
}

/// Closed-form gradient of the summed (unaveraged) cross-entropy with
/// respect to video-level logits: `sigmoid(z) - Y`.
pub fn analytic_logit_grad(z: &Tensor, y: &Tensor) -> Result<Tensor, ModelError> {
    if z.shape() != y.shape() {
        return Err(ModelError::Dimension(format!(
            "logits {:?} vs labels {:?}",
            z.shape(),
            y.shape()
        )));
    }
    let data = z
        .data()
        .iter()
        .zip(y.data())
        .map(|(&zv, &yv)| crate::autodiff::sigmoid(zv) - yv)
        .collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

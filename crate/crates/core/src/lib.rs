//! Training engine for weakly-supervised audio-visual video parsing with
//! imbalance-aware gradient modulation.
//!
//! * [`autodiff`]: reverse-mode differentiation over dense tensors.
//! * [`model`]: the fused and modality-separated network pipelines.
//! * [`dgm`]: imbalance measurement and the modulated parameter update.
//! * [`synth`]: synthetic two-modality event videos with a dominance knob.
//! * [`metrics`]: segment- and event-level F-scores.
//! * [`experiment`]: training, evaluation, ablation grids and the
//!   gradient-check suite behind the `avvp` command line tool.

pub mod autodiff;
pub mod dgm;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod synth;

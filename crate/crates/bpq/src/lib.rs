//! Cuffless blood-pressure estimation from ECG/PPG signal windows, with a
//! complete INT8 post-training quantization engine and clinical-grade
//! evaluation.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`signal`] — segment data model, binary container, splits, and a
//!   synthetic ECG/PPG generator with a known signal-to-pressure mechanism
//! - [`tensor`] — minimal dense tensors with reverse-mode gradients
//! - [`model`] — patch-tokenized encoder with alternating temporal/spatial
//!   attention and a two-output regression head
//! - [`train`] — fine-tuning (frozen/unfrozen backbone), training from
//!   scratch, and a masked-patch pretext for transfer experiments
//! - [`quant`] — INT8 quantization: scale/zero-point math, range observers,
//!   static calibration, dynamic on-the-fly mode, integer inference
//! - [`metrics`] — MAE/SD/R², BHS grading, AAMI compliance, eval reports
//! - [`cli`] — the `bpq` command-line surface
//!
//! See the crate examples for end-to-end walkthroughs of each capability.

pub mod model;
pub mod train;
pub mod signal;
pub mod tensor;

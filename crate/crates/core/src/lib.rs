//! Spectrogram decomposition with per-source normalizing flows, alongside a
//! supervised NMF baseline built from a fixed dictionary of training frames.

pub mod autodiff;
pub mod data;
pub mod dds;
pub mod dsp;
pub mod eval;
pub mod flow;
pub mod nmf;
pub mod solver;

pub use autodiff::{AdamConfig, AdamState, Record, Tensor, Var};
pub use data::{NoteEvent, PresetParams, SplitData, SplitSpec};
pub use dds::{dds_decompose, dds_loss, reconstruct, DdsConfig, DdsResult};
pub use dsp::{NormMeta, Spectrogram, Waveform};
pub use eval::{calibrate_threshold, confusion_matrix, frame_f1, reconstruction_error, ConfusionMatrix, F1Report};
pub use flow::{train_flow, FlowArch, FlowModel, TrainConfig, TrainOutcome};
pub use nmf::{group_by_source, nmf_decompose, FixedDictionary, NmfResult};
pub use solver::{SolverSchedule, SolverTrace, StopReason};

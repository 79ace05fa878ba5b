//! Detects repetitive "word salad" loops in reasoning-model generations by
//! probing the hidden state at each chunk delimiter, decides when to chop the
//! generation, and carries the offline pipeline that builds the probe.
//!
//! Modules, bottom-up:
//!
//! - [`vectors`] and [`trace`]: on-disk vector tables and the trace manifest.
//! - [`chunker`]: delimiter segmentation, offline and streaming.
//! - [`labeler`]: embedding-similarity salad labels, chopping point, relabeling.
//! - [`probe`]: the linear probe, its training loop and evaluation.
//! - [`policy`]: streak counters, chop rule and rescue regeneration suffix.
//! - [`analytics`]: corpus statistics and savings.
//! - [`protocol`], [`service`] and [`replay`]: online and offline drivers.

pub mod analytics;
pub mod chunker;
pub mod error;
pub mod labeler;
pub mod policy;
pub mod probe;
pub mod protocol;
pub mod replay;
pub mod service;
pub mod synthetic;
pub mod trace;
pub mod vectors;

pub use chunker::{segment, ChunkBoundaryEvent, ChunkSpan, ChunkerState, DelimiterSet};
pub use error::{Error, Result};
pub use labeler::{
    cosine_similarity, curate, find_chopping_point, label_salad_chunks, relabel_for_training,
    LabelerConfig, TraceLabels,
};
pub use policy::{
    apply_chop, build_regeneration_suffix, Action, ChopDecision, ChopScope, DetectorState,
    PolicyConfig, RegenerationSuffix, REGEN_PROMPT,
};
pub use probe::{
    auroc, evaluate, fit, loss_and_gradient, predict, prepare_dataset, train, EvalReport,
    LabeledDataset, ProbeModel, TrainConfig,
};
pub use protocol::Frame;
pub use replay::{replay, ReplayReport};
pub use trace::{ChunkRecord, TraceRecord, VectorRef};
pub use vectors::{load_vector_table, save_vector_table, VectorTable};

//! Wi-Fi sensing from channel state information (CSI) captured on several
//! receivers, each with several antennas.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`ingest`]: capture file formats and guard/null subcarrier pruning,
//! * [`align`]: per-receiver antenna alignment and cross-receiver matching
//!   by 802.11 sequence number,
//! * [`prepare`]: normalization, windowing, data-frame stacking, SVD
//!   compaction to an `S x S` frame and Pearson correlation features,
//! * [`fewshot`]: a prototypical network with a convolutional embedding,
//!   trained episodically,
//! * [`fusion`]: per-receiver probability superposition,
//! * [`metrics`]: accuracy/F1 reports and the supervised CNN baseline,
//! * [`synth`]: a seeded multipath channel simulator used as ground truth,
//! * [`pipeline`]: file-to-file orchestration used by the command line tool.

pub mod align;
pub mod config;
pub mod error;
pub mod fewshot;
pub mod fusion;
pub mod ingest;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod prepare;
pub mod synth;

pub use align::{macro_align, micro_align, AlignedCampaign, AlignedReceiverBlock};
pub use error::{Error, Result};
pub use fewshot::{ArchSpec, EmbeddingNet, Episode, Prototype, TrainConfig, TrainLog};
pub use fusion::{fuse, ClassProbabilities};
pub use ingest::{Bandwidth, ComplexSample, CsiRecord, CsiStream, PruneMask};
pub use linalg::Matrix;
pub use metrics::{evaluate, ConfusionMatrix, MetricsReport};
pub use prepare::{
    CompactFrame, CorrelationFeature, DataFrame, DataSegment, FeatureMode, SvdResult,
};

//! Paraphrase-aware contrastive training for multimodal classifiers.
//!
//! The crate covers the dataset model with its positive and negative set
//! queries, cross-entropy and contrastive losses with hand-written
//! gradients, curated batch construction, a small fused encoder with Adam,
//! the alternate, joint and pretrain-finetune training schemes, and the
//! consensus score over paraphrase groups.

pub mod curation;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod similarity;
pub mod synth;
pub mod training;

pub use curation::{curate, sample_ce_batch, CuratedBatch, NegativeWeights, Role};
pub use data::{build_indices, Dataset, DatasetHeader, IndexedDataset, NegativeType, Sample};
pub use error::{Error, Result};
pub use evaluation::{consensus_score, evaluate, ConsensusReport, PredictionGroup};
pub use losses::{AlphaMode, BatchRelations, ContrastiveConfig};
pub use network::{lr_at, Gradients, LrSchedule, NetworkDims, NetworkState, StepConfig};
pub use similarity::{QuestionEmbedder, TokenHashEmbedder};
pub use synth::{generate, SynthSpec};
pub use training::{train, RunLog, Scheme, TrainOutput, TrainPlan};

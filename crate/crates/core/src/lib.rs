//! A micro-video recommender that refines skip behavior into three
//! interaction levels, learns user/video embeddings over two normalized
//! bipartite graphs, and trains with a hierarchical ranking loss plus
//! binary cross-entropy.
//!
//! The pipeline: [`ingest`] parses and labels interaction logs, [`graph`]
//! builds the normalized dual graphs, [`model`] runs the two-hop dual-path
//! convolution and the preference head, [`optim`] trains with AdamW under a
//! cosine schedule, [`eval`] computes top-k ranking metrics and paired
//! t-tests, [`synth`] generates seeded corpora for desk-scale experiments,
//! and [`runner`] orchestrates file-based runs.

pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{MetricsReport, RankedList, RelevanceRule, TTestResult};
pub use graph::{DualGraphs, GraphMode, SparseMatrix};
pub use ingest::{
    DatasetSplit, FeatureTable, IdMaps, Interaction, InteractionClass, LabeledPair,
    UserInteractionProfile,
};
pub use model::{Activation, Embeddings, FeatureMode, ModelParams};
pub use optim::{BprMode, EpochRecord, LossBreakdown, OptimizerState, TrainConfig, Triplet};
pub use runner::{Checkpoint, RunConfig};
pub use synth::{SynthConfig, SynthTruth};

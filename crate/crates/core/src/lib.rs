//! Object-room affinity learning over a human-preference knowledge graph.
//!
//! The pipeline turns annotator ranks into soft scores ([`annotations`]),
//! builds a typed weighted graph over training images and rooms
//! ([`kgraph`]), trains a graph convolutional encoder ([`gcn`]) with an
//! edge-weighted contrastive objective ([`loss`], [`train`]), and ranks rooms
//! for query images by cosine similarity ([`infer`], [`metrics`]).

pub mod annotations;
pub mod error;
pub mod features;
pub mod gcn;
pub mod infer;
pub mod kgraph;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod train;

pub use annotations::{
    compute_soft_scores, ground_truth_map, read_annotations, receptacle_reciprocal,
    AnnotationRecord, GroundTruthMap, PairScore, ReceptacleScore, SoftScoreConfig, SoftScoreTable,
};
pub use error::{Error, Result};
pub use features::{
    gen_synthetic, load_features, save_features, split_dataset, DatasetSplit, FeatureManifest,
    FeatureMatrix, NodeKind, SplitPart, SplitRatios, SyntheticDataset, SyntheticSpec,
};
pub use gcn::{
    backward, forward, init_weights, load_checkpoint, save_checkpoint, GcnConfig, GcnModel,
};
pub use infer::{
    aggregate_category, embed_selfedges, evaluate_model, export_embeddings, image_affinities,
    AffinityMatrix, QuerySet,
};
pub use kgraph::{
    build_graph, graph_stats, propagation_matrix, Edge, EdgeType, GraphStats, KnowledgeGraph,
    NodeId,
};
pub use linalg::{cosine, matmul, relu, spmm, DenseMatrix, SparseMatrix};
pub use loss::{
    contrastive_loss, mean_batch_loss, sample_batch, LossConfig, SampleBatch, SamplingIndex,
};
pub use metrics::{average_precision, mean_ap, topk_hit_ratio, EvalReport};
pub use train::{adam_step, train, tune_temperature, AdamState, LrSchedule, TrainConfig, TrainLog};

//! Optimal-transport domain adaptation for embedding-based language
//! identification back-ends.
//!
//! A source-domain classifier (affine projection, length normalization,
//! softmax classifier) is trained on labeled embeddings, then adapted to an
//! unlabeled target domain by alternating between an optimal transport plan
//! over mini-batch pairs and gradient steps on the source cross-entropy plus
//! the transport cost. Both domains are scored with EER and Cavg.

pub mod adapt;
pub mod data;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod ot;
pub mod project;

pub use adapt::{
    adapt_epoch, adaptation_cost_matrix, hyper_sweep, run_adaptation, AdaptConfig, AdaptationRun,
    StepRecord, SweepRow, TrainLog,
};
pub use data::{
    load_dataset, synth_domain_pair, write_dataset, BatchSampler, DataFormat, Dataset, DomainTag,
    SamplerPolicy, SynthSpec,
};
pub use error::{Error, Result};
pub use metrics::{compute_cavg, compute_eer, score_dataset, EvalReport, TrialSet};
pub use model::{
    adam_step, cross_entropy, pretrain_source, AdamConfig, AdamState, BackendModel, ForwardTrace,
    Gradients,
};
pub use ot::{
    exact_plan_uniform, ot_objective, pairwise_sq_euclidean, sinkhorn_plan, CostKind, CostMatrix,
    OtSolver, SinkhornConfig, TransportPlan,
};

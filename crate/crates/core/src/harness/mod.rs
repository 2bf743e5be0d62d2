//! Training, evaluation and report plumbing behind the CLI.

pub mod ablate;
pub mod config;
pub mod export;
pub mod gradcheck;
pub mod optim;
pub mod region;
pub mod retrieval;
pub mod train;

pub use ablate::{ablation_table, run_ablation, write_ablation_csv, AblationRow};
pub use config::{EvalConfig, OptimConfig, RegionConfig, RunConfig};
pub use export::{export_pe_viz, score_regions, write_scores};
pub use gradcheck::{gradcheck_all, run_cases, GradCase, GradReport, GradRow, FLOOR, STEP, TOLERANCE};
pub use optim::Sgd;
pub use region::{eval_region, RegionReport};
pub use retrieval::{eval_retrieval, recall_at_k, RetrievalReport};
pub use train::{held_out_pairs, pretrain, pretrain_model, write_run, PretrainOutcome};

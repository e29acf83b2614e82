//! Multi-partition embedding interaction model for knowledge graph link
//! prediction: a dense tensor and reverse-mode gradient core, the model and
//! its training objective, Adam, triple storage, filtered ranking metrics and
//! a training driver with binary checkpoints.
//!
//! Hot loops run on rayon when the `parallel` feature (on by default) is
//! enabled; [`par::Exec::Sequential`] selects the single-threaded path at
//! run time and produces bitwise-identical results.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_check, GradTape, Gradients, Var};
pub use data::{build_filter_index, FilterIndex, Split, Triple, TripleStore};
pub use error::{MeimError, Result};
pub use eval::{evaluate, filtered_rank, EvalOptions, MetricsReport, TiePolicy};
pub use model::{
    count_params, make_special_case, score, CoreMode, Direction, ModelConfig, ModelParams,
    NormMode, Sampling, ScoreForm, SpecialCase,
};
pub use objective::{LossWeights, TargetDistribution};
pub use optim::{adam_step, lr_at, AdamState, LrSchedule};
pub use par::Exec;
pub use tensor::Tensor;
pub use train::{load_checkpoint, save_checkpoint, train, Checkpoint, Preset, RunConfig, Trainer};

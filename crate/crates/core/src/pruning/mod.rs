//! Turn an aligned MHA model into GQA: mean-pool a shared KV head per group,
//! gate each original head against it with a hard-concrete mask, train the
//! masks to zero under distillation, then drop the originals.

mod hard_concrete;
mod loss;
mod masked;
pub mod tape;
mod task;
mod train;

pub use hard_concrete::HardConcrete;
pub use loss::{bild_loss, distill_loss, kl_loss, l0_loss, next_token_loss};
pub use masked::{
    apply_masks, effective_weights, finalize_gqa, mean_pool_init, student_loss_and_grad,
    FinalizeReport, GroupHeads, GroupLayer, MaskState, StudentGrads, RESIDUAL_GATE_THRESHOLD,
};
pub use task::{
    distill_eval, lm_eval, lm_loss_and_grad, train_teacher, PatternTask, TeacherTraining,
};
pub use train::{
    max_layer_spread, prune_train, read_trajectory_csv, write_trajectory_csv, GateRecord,
    PruneOutcome, StepLog, TrainSchedule,
};

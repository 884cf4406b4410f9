//! Consistency-regularized training: Π model and Mean Teacher.
//!
//! The student is trained on cross-entropy over labeled rows plus a ramped
//! consistency penalty between its predictions and those of a teacher on
//! independently perturbed copies of every row in the batch. The teacher is
//! either the student itself or an exponential moving average of it.

mod loss;
mod perturb;
mod train;

pub use loss::{
    consistency_loss, ema_update, student_loss, teacher_predictions, total_loss, ConsistencyConfig,
    Divergence, LossBatch, LossEval, LossParts, TeacherMode, TeacherState,
};
pub use perturb::{PerturbationSpec, Projection};
pub use train::{
    train, AveragerSpec, DivergedRun, Stride, TrainConfig, TrainError, TrainOutcome,
};

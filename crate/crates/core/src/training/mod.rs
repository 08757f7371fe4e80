//! Two-step training with straight-through sign gradients.
//!
//! Step 1 trains real shadow weights against binary activations; step 2
//! binarizes the weights as well and continues from the step-1 checkpoint.

mod adam;
mod checkpoint;
mod data;
mod engine;
mod gradcheck;
mod loss;
mod run;
mod schedule;
mod ste;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{
    load_checkpoint, model_path, save_checkpoint, state_from_bytes, state_path, state_to_bytes, Checkpoint,
    MODEL_FILE, STATE_FILE,
};
pub use data::{
    load_dataset, load_folder, one_hot, read_teacher_pmf, separable_two_class, synthetic_gratings, DataSplit, Dataset,
    SyntheticSpec, SYNTHETIC_CLASSES,
};
pub use engine::{gather_batch, ForwardCache, Layout, LossAndGrad, ParamKind, Scalar, TrainNet};
pub use gradcheck::{
    check_net, gradient_check, micro_config, micro_gradient_check, single_module_config, CheckBatch,
    GradCheckReport, FD_STEP, KINK_MARGIN,
};
pub use loss::{cross_entropy, loss_distributional, PMF_TOLERANCE};
pub use run::{
    evaluate, metrics_csv, train_two_step, write_metrics_csv, EpochMetrics, Trainer, TwoStepResult, METRICS_FILE,
};
pub use schedule::{lr_schedule, LossKind, Step, TrainConfig};
pub use ste::{
    ste_activation_backward, ste_activation_surrogate, ste_weight_backward, ste_weight_surrogate,
    surrogate_derivative_gap, SteKind, CHECK_POINTS,
};

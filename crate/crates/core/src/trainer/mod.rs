//! Cross-entropy objective, backpropagation, SGD and the training loop.

mod backprop;
mod gradcheck;
mod loss;
mod train;

pub use backprop::{backward, logit_gradient, sgd_step, Gradients};
pub use gradcheck::{
    check_problem, gradient_check, tiny_arch, GradCheckProblem, GradCheckReport, KINK_MARGIN,
};
pub use loss::{cross_entropy_loss, mean_cross_entropy, LOG_EPS};
pub use train::{
    batch_ranges, train, train_with_observer, EpochStats, TrainConfig, TrainHistory,
    MIN_IMPROVEMENT,
};

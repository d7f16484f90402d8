//! Gradients, optimization, training loops and checkpoints.

mod adam;
mod backward;
mod checkpoint;
mod gradcheck;
mod loops;
mod model;

pub use adam::{lr_schedule, AdamState, LrDrop, LrSchedule};
pub use backward::{
    ih_sequence_grad, ih_sequence_loss, layer_backward, mnist_image_grad, reduce_in_order,
    smnist_image_grad, softmax_cross_entropy, BackwardOptions, ImageGrad, LayerGrad, SequenceGrad,
};
pub use checkpoint::{
    load_checkpoint, metrics_csv, parse_metrics_csv, save_checkpoint, AdamRecord, Checkpoint,
    LoadedModel, MetricRow, TensorRecord, CHECKPOINT_VERSION, METRICS_HEADER,
};
pub use gradcheck::{
    compare_fd, detach_gate_check, grad_check, grad_check_ih, grad_check_mnist, grad_check_smnist,
    rel_err, tiny_batch, tiny_ih_model, DetachCheck, GradCheckDims, GradCheckReport, GroupError,
    FD_STEP, GRAD_TOL, HEAD_GRAD_TOL,
};
pub use loops::{
    evaluate_ih, evaluate_images, ih0_train_model, ih_batch_grad, ih_checkpoint, train_ih,
    train_ih0, train_images, train_mnist, train_smnist, EvalResult, Ih0Run, ImageModel,
    TrainConfig, TrainOutcome, EVAL_SEED_XOR,
};
pub use model::{Gradients, IhModel, IhModelOptions, Learnable};

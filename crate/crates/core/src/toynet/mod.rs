//! Desk-scale multi-task harness: a tanh MLP, an SGD + weight-decay trainer,
//! synthetic rotated Gaussian-mixture tasks, and the evaluation metrics.

pub mod calibrate;
pub mod data;
pub mod metrics;
pub mod net;

pub use calibrate::{calibrate, CalibrationReport, CalibrationTarget};
pub use data::{gen_tasks, Split, SplitSizes, TaskDataset, TaskGenConfig, TaskSplits};
pub use metrics::{accuracy, ece, ensemble_predict, score, score_net, softmax_rows};
pub use net::{sgd_finetune, Capture, Layer, Plateau, SgdParams, ToyNet, TrainOutcome};

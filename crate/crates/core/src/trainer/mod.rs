//! Optimization and evaluation for both phases: density fitting of the
//! flow on source labels, then segmenter training with an optional
//! unsupervised target term.

mod flow_train;
mod metrics;
mod optim;
mod seg_train;
mod segnet;

pub use flow_train::{flow_batch, train_flow, FlowTrainConfig, FlowTraining};
pub use metrics::{
    append_csv, confusion, csv_header, csv_row, evaluate, iou_from_confusion, worker_count, write_csv, Confusion,
    MetricsRecord,
};
pub use optim::{OptimConfig, Sgd};
pub use seg_train::{train_segmenter, SegMode, SegTrainConfig, SegTraining};
pub use segnet::{OracleSegmenter, SegManifest, SegNet, Segmenter, DEFAULT_WIDTHS};

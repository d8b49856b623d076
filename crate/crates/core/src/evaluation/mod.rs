//! Retrieval evaluation: ground truth, AP/mAP and layer/scale sweeps.

mod ground_truth;
mod metrics;
mod sweep;

pub use ground_truth::{
    holidays_from_groups, holidays_from_ids, load_ground_truth, load_holidays_ground_truth, load_oxford_ground_truth,
    GroundTruth,
};
pub use metrics::{average_precision, average_precision_with, evaluate_index, mean_ap, ApVariant, EvalSummary, QueryResult};
pub use sweep::{sweep, SweepReport, SweepRow, CSV_HEADER};

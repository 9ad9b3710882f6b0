//! Evaluation measures and dataset-level reports.

mod measures;
mod report;

pub use measures::{e_measure, mae, s_measure, weighted_f};
pub use report::{
    evaluate_dataset, evaluate_pair, evaluate_pairs, prediction_path, Aggregate, EvalReport, SampleMetrics,
    REPORT_JSON, REPORT_TEXT,
};

//! Detection accuracy, compute accounting and report assembly.

pub mod detection;
pub mod mac;
pub mod report;

pub use detection::{default_iou_thresholds, mean_average_precision, mean_iou, ApReport};
pub use mac::{mac_count, mac_report, network_spec, Cost, ExitCost, LayerSpec, MacReport, NetworkSpec};
pub use report::{
    assemble_report, classifier_csv, comparison_csv, mac_csv, reference_rows, ComparisonRow, EvalInputs, EvalReport,
    ReferenceRow, RunStats, Tagged,
};

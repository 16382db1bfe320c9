//! Metrics, datasets, checkers, and evaluation protocols.

pub mod checker;
pub mod dataset;
pub mod metrics;
pub mod protocol;

pub use checker::{Checker, CheckerSpec, ResolvedChecker};
pub use dataset::TaskRecord;
pub use metrics::{g_rir, key_layer_stats, pass_at_k, KeyLayerStats};
pub use protocol::{
    clean_regression, evaluate_tasks, leave_one_in, run_protocol, EvalConfig, Localization,
    ProtocolReport, ProtocolSettings,
};

//! Scenario files, experiment runs and evaluation.

pub mod eval;
pub mod presets;
pub mod run;
pub mod scenario;

pub use eval::{argmax_rows, evaluate_accuracy};
pub use run::{
    contributions_csv, default_deadline, effective_profile, metrics_csv, run_scenario, write_outcome, Experiment, RunSummary,
    CONTRIBUTIONS_FILE, ECHO_FILE, METRICS_FILE,
};
pub use scenario::{DataSource, DeviceClassSpec, IdxSource, Scenario, SyntheticSource};

//! Synthetic data, training, metrics, self-checks, ablations and timing.

mod ablation;
mod checks;
mod data;
mod gradcheck;
mod metrics;
mod pointfile;
mod timing;
mod train;

pub use ablation::{
    rows_csv, run_ablation, AblationFactor, AblationLevel, AblationPlan, AblationRow,
};
pub use checks::{run_scan_checks, CaseId, CheckOptions, CheckReport, Suite, SuiteReport};
pub use data::{generate, sample_cloud, Dataset, Generator, SyntheticSpec};
pub use gradcheck::{
    analytic_gradients, compare_gradients, gradcheck, relative_error, GradcheckOptions,
    GradcheckReport, GroupError,
};
pub use metrics::{
    class_miou, evaluate_metrics, instance_miou, overall_accuracy, shape_iou, Metrics,
};
pub use pointfile::{parse_points, read_points};
pub use timing::{fit_slope, time_forward, TimingOptions, TimingReport, TimingRow};
pub use train::{evaluate, log_csv, train, EpochLog, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::network::NetworkConfig;

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub network: NetworkConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub seed: u64,
    pub dataset_hash: String,
}

//! Flow-correlation evaluation: workloads, traces, features, the attacker,
//! ground truth, ROC and overhead metrics.

pub mod features;
pub mod generate;
pub mod overhead;
pub mod raptor;
pub mod roc;
pub mod similarity;
pub mod stats;
pub mod trace;

pub use features::{FeatureSeries, DEFAULT_FEATURE_WINDOW};
pub use generate::{generate_flows, generate_flows_with, GeneratorParams, Profile};
pub use overhead::{
    bandwidth_overhead, bandwidth_ratio, latency_overhead, OverheadError, OverheadReport,
};
pub use raptor::{raptor_score, score_matrix, ScoreError, DISJOINT_SCORE};
pub use roc::{roc, tpr_at_fpr, RocCurve, RocError, RocPoint};
pub use similarity::{flow_distance, ground_truth_pairs};
pub use stats::{average_ranks, pearson, spearman, StatsError};
pub use trace::{
    read_traces_csv, write_traces_csv, CsvError, Direction, FlowEvent, FlowId, FlowTrace,
    PacketDir, TraceError,
};

//! Synthetic scenarios and the evaluation harness.

pub mod bench;
pub mod metrics;
pub mod protocol;
pub mod scenario;

pub use bench::{
    ablation_comparisons, evaluate_model, run_ablation, run_benchmark, run_benchmark_on, sign_test, write_comparisons_csv,
    write_summary_csv, AblationCell, AblationRow, BenchmarkReport, Comparison, ModelTracker, SignTest,
};
pub use metrics::{evaluate, failures_from_records, iou, FrameRecord, FrameStatus, Metrics, OracleTracker, RandomTracker, SequenceTracker};
pub use protocol::{run_protocol, train_cell_models, AblationProtocol};
pub use scenario::{
    distractor_signature, gen_sequence, read_dataset, read_sequence, write_sequence, DistractorPath, Event, MotionModel, Occlusion,
    ScenarioConfig, ScenarioFamily, SequenceDescriptor, SyntheticSequence,
};

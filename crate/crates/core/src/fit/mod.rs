//! Simulator fitting against paired ECG/PPG targets.

pub mod groups;
pub mod objective;
pub mod optimizer;
pub mod peaks;

pub use groups::{fit_groups, medoid, params_map_from_json, GroupFit, GroupFits, GroupWarning};
pub use objective::{
    fit_loss_components, total_fit_loss, FitComponents, FitConfig, FitWeights, PreparedTarget, Stage, TargetPair,
};
pub use optimizer::{fit_simulator, numeric_gradient, r_peak_timing_error_ms, trace_to_csv, FitResult, TraceRow};
pub use peaks::{detect_events, detect_peaks, Polarity};

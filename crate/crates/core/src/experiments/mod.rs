//! Interpolation curves, the probe-count study and report files.

pub mod interp;
pub mod report;
pub mod trace_conv;

pub use interp::{
    convexity_score, interp_grid, interpolate_dataset, interpolation_experiment, ConvexityScore, InterpCurve,
    InterpResult, PairCurve,
};
pub use report::{emit_report, ReportWriter, Table};
pub use trace_conv::{trace_convergence_experiment, trace_rows_csv, TraceRow};

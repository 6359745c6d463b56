//! Prediction-quality metrics, open- and closed-loop evaluation, and
//! ensemble sweeps.

mod experiment;
mod metrics;
mod sweep;

pub use experiment::{
    boundary_distance_ratio, build_dataset, closed_loop_eval, dataset_id, finish_harvest,
    fit_readout, free_run, harvest_member, open_loop_eval, run_member, spectra, start_plans,
    ClosedLoopResult, FittedReadout, Harvested, MemberMetric, MemberResult, SpectrumSet, StartPlan,
    VptScale,
};
pub use metrics::{
    default_segment_len, nrmse, power_spectrum, total_variance, vpt, vpt_normalized, welch,
    SpectrumResult, Vpt, Window, MIN_SPECTRUM_LEN, VPT_THRESHOLD,
};
pub use sweep::{
    member_seeds, parallel_map, run_ensemble, run_sweep, write_spectrum_csv, CellOutcome,
    ExperimentReport, MemberFailure, MetricResult, ReportRow, StateRecord, SweepAxis, SweepSpec,
    REPORT_FORMAT_VERSION,
};

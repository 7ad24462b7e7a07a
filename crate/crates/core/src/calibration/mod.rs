//! Online OD calibration on top of a traffic model, plus offline preparation
//! of its inputs and fit statistics.

mod metrics;
mod model;
mod observability;
mod online;
mod prepare;

pub use metrics::{compute_metrics, BandMetrics, ErrorMetrics, HorizonMetrics, MetricsReport, SeriesMetrics, VARIANCE_BANDS};
pub use model::{LinearModel, SimulatorModel, TrafficModel};
pub use observability::{distinguishable_od_count, identifying_time, observability_curve, route_incidence};
pub use online::{
    run_online, CalibrationInputs, IntervalRecord, OnlineCalibrator, OnlineConfig, OnlineResult, PerturbationPolicy,
    PredictionRecord, PspPattern,
};
pub use prepare::{bootstrap_inputs, prepare_inputs, PrepareConfig, PreparedInputs};

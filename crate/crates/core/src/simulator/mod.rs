//! Deterministic mesoscopic simulator: the measurement function, the data
//! generator and the snapshot/resume substrate of the calibration loop.

mod engine;
mod network;
mod scenarios;
mod snapshot;

pub use engine::{IntervalOutput, SensorFrame, SimConfig, SimState, Simulator, MICRO};
pub use network::{Network, OdPair, Route, Segment, Sensor, SensorPosition, MIN_SPEED_MPS, MPH_TO_MPS};
pub use scenarios::{
    biased_profile, build_toy_scenario, corridor_generators, corridor_network, delay_network, ramp_grid_generators,
    ramp_grid_network, sample_demand, CorridorSupply, DelayLayout, DemandTable, GeneratedScenario, PeakedDemand,
    RampGridSpec, CORRIDOR_HISTORICAL_BIAS, CORRIDOR_INTERVALS, CORRIDOR_LENGTHS_M, CORRIDOR_SPEEDS_MPH,
};
pub use snapshot::{SimulatorSnapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

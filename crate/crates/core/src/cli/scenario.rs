//! Scenario files: network, demand, horizon, filter settings, day splits and
//! seeds in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::calibration::{LinearModel, OnlineConfig, PerturbationPolicy, PrepareConfig, SimulatorModel, TrafficModel};
use crate::error::{Error, Result};
use crate::filter::ConstraintMode;
use crate::gradient::GradientMode;
use crate::simulator::{
    corridor_generators, corridor_network, delay_network, ramp_grid_generators, ramp_grid_network, CorridorSupply,
    DelayLayout, Network, OdPair, PeakedDemand, RampGridSpec, Route, Segment, Sensor, SensorPosition, SimConfig,
    Simulator, CORRIDOR_HISTORICAL_BIAS, CORRIDOR_INTERVALS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub network: NetworkSpec,
    #[serde(default)]
    pub horizon: HorizonSpec,
    #[serde(default)]
    pub demand: DemandSpec,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub splits: Splits,
    #[serde(default)]
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    /// Eight-segment freeway corridor with a bottleneck.
    Corridor(CorridorSupply),
    /// Two origins merging into one link, sensors on both origin links.
    DelayOriginLinks,
    /// Same network, sensors on the second origin link and the shared link.
    DelaySharedLink,
    /// Parallel ramp corridors with about 200 OD pairs.
    RampGrid(RampGridSpec),
    Explicit(ExplicitNetwork),
    /// Distributed-lag linear map instead of the simulator.
    Linear(LinearSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    /// `lags[k][sensor][od]`: response to flows `k` intervals back.
    pub lags: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitNetwork {
    pub segments: Vec<SegmentSpec>,
    pub ods: Vec<OdSpec>,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub free_speed_mph: f64,
    pub capacity_vph: f64,
    pub storage_veh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdSpec {
    pub id: String,
    pub origin: String,
    pub destination: String,
    pub routes: Vec<RouteSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    /// Segment ids in travel order.
    pub segments: Vec<String>,
    #[serde(default = "one")]
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    pub segment: String,
    #[serde(default)]
    pub position: SensorPosition,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSpec {
    pub interval_s: f64,
    /// Defaults to 60 for the corridor and 12 otherwise.
    pub intervals: Option<usize>,
    pub step_s: f64,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        Self {
            interval_s: 300.0,
            intervals: None,
            step_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DemandSpec {
    /// One generator per OD (veh/h). Built-in networks supply their own.
    pub generators: Option<Vec<PeakedDemand>>,
    /// Relative bias of the seed historical profile per OD.
    pub historical_bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IncidenceSource {
    /// Jacobian patterns recorded during the FD bootstrap runs.
    #[default]
    Recorded,
    /// Route structure and free-flow times.
    Routes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preparation {
    /// Per-day calibration of the training and validation days.
    #[default]
    Full,
    /// Seed profile as history, independent deviations, no training runs.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    pub degree: usize,
    pub gradient: GradientMode,
    pub constrained: bool,
    pub prediction_steps: usize,
    pub perturbation: PerturbationPolicy,
    pub gain_regularization: f64,
    pub max_ar_order: usize,
    pub preparation: Preparation,
    /// Degree of the bootstrap runs; defaults to `degree`.
    pub bootstrap_degree: Option<usize>,
    pub psp_starts: usize,
    pub incidence: IncidenceSource,
    /// Extra lags per sensor for route incidence.
    pub incidence_slack: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            degree: 1,
            gradient: GradientMode::Fd,
            constrained: true,
            prediction_steps: 3,
            perturbation: PerturbationPolicy::default(),
            gain_regularization: 1e-8,
            max_ar_order: 5,
            preparation: Preparation::Full,
            bootstrap_degree: None,
            psp_starts: 30,
            incidence: IncidenceSource::Recorded,
            incidence_slack: 1,
        }
    }
}

/// Demand seeds of the training, validation and test days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Splits {
    pub training: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            training: (100..112).collect(),
            validation: (112..115).collect(),
            test: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Demand seed of `generate` when none is given.
    pub generate: u64,
    pub coloring: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { generate: 0, coloring: 1 }
    }
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses and validates. Syntax and schema errors carry the line number.
    pub fn parse(text: &str) -> Result<Self> {
        let scenario: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.horizon;
        if !(h.interval_s > 0.0) || !(h.step_s > 0.0) || h.intervals == Some(0) {
            return Err(Error::Schema("horizon needs interval_s > 0, step_s > 0 and intervals >= 1".into()));
        }
        let f = &self.filter;
        if f.degree == 0 || f.bootstrap_degree == Some(0) || f.prediction_steps == 0 || f.max_ar_order == 0 {
            return Err(Error::Schema(
                "filter degree, bootstrap_degree, prediction_steps and max_ar_order must be >= 1".into(),
            ));
        }
        if f.gradient == GradientMode::Psp && f.incidence == IncidenceSource::Recorded && self.bootstrap_degree() < f.degree {
            return Err(Error::Schema(
                "recorded incidence needs bootstrap_degree >= degree for PSP".into(),
            ));
        }
        if f.gradient == GradientMode::Psp
            && f.incidence == IncidenceSource::Recorded
            && f.preparation == Preparation::Bootstrap
        {
            return Err(Error::Schema("bootstrap preparation records no incidence; use incidence = \"routes\"".into()));
        }
        if self.splits.training.is_empty() {
            return Err(Error::Schema("splits.training must list at least one seed".into()));
        }
        let n = self.model()?.num_ods();
        if let Some(g) = &self.demand.generators {
            if g.len() != n {
                return Err(Error::Schema(format!("demand.generators has {} entries for {n} OD pairs", g.len())));
            }
        } else if matches!(self.network, NetworkSpec::Explicit(_)) {
            return Err(Error::Schema("explicit networks need demand.generators".into()));
        }
        if let Some(b) = &self.demand.historical_bias {
            if b.len() != n || b.iter().any(|v| !(*v > -1.0)) {
                return Err(Error::Schema(format!("demand.historical_bias needs {n} entries above -1")));
            }
        }
        Ok(())
    }

    /// The road network; linear scenarios have none.
    pub fn network(&self) -> Result<Network> {
        match &self.network {
            NetworkSpec::Corridor(supply) => corridor_network(supply),
            NetworkSpec::DelayOriginLinks => delay_network(DelayLayout::OriginLinks),
            NetworkSpec::DelaySharedLink => delay_network(DelayLayout::SharedLink),
            NetworkSpec::RampGrid(spec) => ramp_grid_network(spec),
            NetworkSpec::Explicit(spec) => build_explicit(spec),
            NetworkSpec::Linear(_) => Err(Error::Schema("linear scenarios have no road network".into())),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            interval_s: self.horizon.interval_s,
            step_s: self.horizon.step_s,
        }
    }

    pub fn model(&self) -> Result<ScenarioModel> {
        match &self.network {
            NetworkSpec::Linear(spec) => Ok(ScenarioModel::Linear(build_linear(spec)?)),
            _ => Ok(ScenarioModel::Simulator(SimulatorModel::new(Simulator::new(
                self.network()?,
                self.sim_config(),
            )?))),
        }
    }

    pub fn intervals(&self) -> usize {
        self.horizon.intervals.unwrap_or(match self.network {
            NetworkSpec::Corridor(_) => CORRIDOR_INTERVALS,
            _ => 12,
        })
    }

    pub fn generators(&self, num_ods: usize) -> Vec<PeakedDemand> {
        if let Some(g) = &self.demand.generators {
            return g.clone();
        }
        match &self.network {
            NetworkSpec::Corridor(_) => corridor_generators(),
            NetworkSpec::RampGrid(spec) => ramp_grid_generators(num_ods, spec.seed),
            // Linear scenarios take flows per interval directly.
            NetworkSpec::Linear(_) => vec![
                PeakedDemand {
                    log_sd: 0.2,
                    noise_ar: 0.5,
                    ..PeakedDemand::constant(30.0)
                };
                num_ods
            ],
            _ => vec![
                PeakedDemand {
                    log_sd: 0.2,
                    noise_ar: 0.5,
                    ..PeakedDemand::constant(360.0)
                };
                num_ods
            ],
        }
    }

    pub fn historical_bias(&self, num_ods: usize) -> Vec<f64> {
        if let Some(b) = &self.demand.historical_bias {
            return b.clone();
        }
        match &self.network {
            NetworkSpec::Corridor(_) => CORRIDOR_HISTORICAL_BIAS.to_vec(),
            _ => vec![0.1; num_ods],
        }
    }

    pub fn bootstrap_degree(&self) -> usize {
        self.filter.bootstrap_degree.unwrap_or(self.filter.degree)
    }

    pub fn online_config(&self) -> OnlineConfig {
        let f = &self.filter;
        let mut cfg = OnlineConfig::default();
        cfg.filter.degree = f.degree;
        cfg.filter.constraint_mode = if f.constrained {
            ConstraintMode::Nonneg
        } else {
            ConstraintMode::Unconstrained
        };
        cfg.filter.gain_regularization = f.gain_regularization;
        cfg.gradient = f.gradient;
        cfg.prediction_steps = f.prediction_steps;
        cfg.perturbation = f.perturbation;
        cfg
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        let mut online = self.online_config();
        online.filter.degree = self.bootstrap_degree();
        PrepareConfig {
            online,
            max_ar_order: self.filter.max_ar_order,
            ..PrepareConfig::default()
        }
    }
}

/// The measurement function of a scenario with its OD and sensor labels.
#[derive(Debug, Clone)]
pub enum ScenarioModel {
    Simulator(SimulatorModel),
    Linear(LinearModel),
}

impl ScenarioModel {
    pub fn num_ods(&self) -> usize {
        match self {
            Self::Simulator(m) => m.num_params(),
            Self::Linear(m) => m.num_params(),
        }
    }

    pub fn od_ids(&self) -> Vec<String> {
        match self {
            Self::Simulator(m) => m.simulator().network().ods().iter().map(|o| o.id.clone()).collect(),
            Self::Linear(m) => (1..=m.num_params()).map(|j| format!("od{j}")).collect(),
        }
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        match self {
            Self::Simulator(m) => m.simulator().network().sensors().iter().map(|s| s.id.clone()).collect(),
            Self::Linear(m) => (1..=m.num_measurements()).map(|i| format!("s{i}")).collect(),
        }
    }

    /// Demand generator output to model flows: veh/h to vehicles per
    /// interval for the simulator, unchanged for linear maps.
    pub fn to_flows(&self, rates: &[f64]) -> Vec<f64> {
        match self {
            Self::Simulator(m) => m.to_flows(rates),
            Self::Linear(_) => rates.to_vec(),
        }
    }
}

fn build_linear(spec: &LinearSpec) -> Result<LinearModel> {
    let lags = spec
        .lags
        .iter()
        .map(|rows| {
            let m = rows.len();
            let n = rows.first().map_or(0, Vec::len);
            if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Schema("linear lag matrices must be non-empty and rectangular".into()));
            }
            Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
        })
        .collect::<Result<Vec<_>>>()?;
    LinearModel::new(lags).map_err(|e| Error::Schema(e.to_string()))
}

fn build_explicit(spec: &ExplicitNetwork) -> Result<Network> {
    let segments: Vec<Segment> = spec
        .segments
        .iter()
        .map(|s| Segment::new(&s.id, &s.from, &s.to, s.length_m, s.free_speed_mph, s.capacity_vph, s.storage_veh))
        .collect();
    let index = |id: &str| {
        segments
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Schema(format!("unknown segment `{id}`")))
    };
    let ods = spec
        .ods
        .iter()
        .map(|od| {
            let routes = od
                .routes
                .iter()
                .map(|r| {
                    Ok(Route {
                        segments: r.segments.iter().map(|s| index(s)).collect::<Result<_>>()?,
                        share: r.share,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(OdPair {
                id: od.id.clone(),
                origin: od.origin.clone(),
                destination: od.destination.clone(),
                routes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sensors = spec
        .sensors
        .iter()
        .map(|s| {
            Ok(Sensor {
                id: s.id.clone(),
                segment: index(&s.segment)?,
                position: s.position,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(segments, ods, sensors)
}

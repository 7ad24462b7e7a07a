//! Built-in networks and demand generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::engine::{IntervalOutput, SimConfig, Simulator};
use super::network::{Network, OdPair, Route, Segment, Sensor, SensorPosition};
use crate::error::{Error, Result};

/// OD departure rates (veh/h), `rates[interval][od]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandTable {
    pub rates: Vec<Vec<f64>>,
}

impl DemandTable {
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let n = rates.first().map_or(0, Vec::len);
        if let Some(bad) = rates.iter().find(|r| r.len() != n) {
            return Err(Error::dim("demand table row", n, bad.len()));
        }
        if rates.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("demand rates must be finite and non-negative".into()));
        }
        Ok(Self { rates })
    }

    pub fn zeros(intervals: usize, ods: usize) -> Self {
        Self {
            rates: vec![vec![0.0; ods]; intervals],
        }
    }

    pub fn intervals(&self) -> usize {
        self.rates.len()
    }

    pub fn num_ods(&self) -> usize {
        self.rates.first().map_or(0, Vec::len)
    }

    /// Rates of one OD across intervals.
    pub fn series(&self, od: usize) -> Vec<f64> {
        self.rates.iter().map(|r| r[od]).collect()
    }
}

/// Mean profile `base + peak * exp(-((h - center) / width)^2 / 2)` with
/// multiplicative log-normal AR(1) noise and additive Gaussian AR(1) noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakedDemand {
    pub base: f64,
    #[serde(default)]
    pub peak: f64,
    #[serde(default)]
    pub center: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    /// Amplitude of a sinusoidal component with period `wave_period`.
    #[serde(default)]
    pub wave: f64,
    #[serde(default = "default_wave_period")]
    pub wave_period: f64,
    /// Standard deviation of the log-normal factor.
    #[serde(default)]
    pub log_sd: f64,
    /// Standard deviation of the additive noise (veh/h).
    #[serde(default)]
    pub additive_sd: f64,
    #[serde(default)]
    pub noise_ar: f64,
}

fn default_width() -> f64 {
    1.0
}

fn default_wave_period() -> f64 {
    1.0
}

impl PeakedDemand {
    pub fn constant(rate: f64) -> Self {
        Self {
            base: rate,
            peak: 0.0,
            center: 0.0,
            width: 1.0,
            wave: 0.0,
            wave_period: 1.0,
            log_sd: 0.0,
            additive_sd: 0.0,
            noise_ar: 0.0,
        }
    }

    pub fn mean(&self, h: usize) -> f64 {
        let x = (h as f64 - self.center) / self.width;
        let wave = self.wave * (2.0 * std::f64::consts::PI * h as f64 / self.wave_period).sin();
        (self.base + self.peak * (-0.5 * x * x).exp() + wave).max(0.0)
    }

    pub fn profile(&self, intervals: usize) -> Vec<f64> {
        (0..intervals).map(|h| self.mean(h)).collect()
    }

    /// One noisy realisation.
    pub fn sample(&self, intervals: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let phi = self.noise_ar.clamp(-0.99, 0.99);
        let innov = (1.0 - phi * phi).sqrt();
        let (mut z_log, mut z_add) = (std_normal.sample(rng), std_normal.sample(rng));
        (0..intervals)
            .map(|h| {
                if h > 0 {
                    z_log = phi * z_log + innov * std_normal.sample(rng);
                    z_add = phi * z_add + innov * std_normal.sample(rng);
                }
                let factor = (self.log_sd * z_log - 0.5 * self.log_sd * self.log_sd).exp();
                (self.mean(h) * factor + self.additive_sd * z_add).max(0.0)
            })
            .collect()
    }
}

/// Draws one table with independent noise per OD from `seed`.
pub fn sample_demand(generators: &[PeakedDemand], intervals: usize, seed: u64) -> DemandTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series: Vec<Vec<f64>> = generators.iter().map(|g| g.sample(intervals, &mut rng)).collect();
    DemandTable {
        rates: (0..intervals).map(|h| series.iter().map(|s| s[h]).collect()).collect(),
    }
}

/// Sensor layouts of the three-link delay network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayLayout {
    /// Sensors at the entry of both origin links.
    OriginLinks,
    /// One origin-link sensor and one sensor at the entry of the shared link.
    SharedLink,
}

/// Two origins merge onto a shared link. Every link takes exactly one
/// five-minute interval at free flow (6705.6 m at 50 mph).
pub fn delay_network(layout: DelayLayout) -> Result<Network> {
    let link = |id: &str, from: &str, to: &str| Segment::new(id, from, to, 6705.6, 50.0, 20_000.0, 5_000.0);
    let segments = vec![link("a", "O1", "N"), link("b", "O2", "N"), link("c", "N", "D")];
    let ods = vec![
        OdPair {
            id: "O1D".into(),
            origin: "O1".into(),
            destination: "D".into(),
            routes: vec![Route { segments: vec![0, 2], share: 1.0 }],
        },
        OdPair {
            id: "O2D".into(),
            origin: "O2".into(),
            destination: "D".into(),
            routes: vec![Route { segments: vec![1, 2], share: 1.0 }],
        },
    ];
    let sensor = |id: &str, segment| Sensor {
        id: id.into(),
        segment,
        position: SensorPosition::Entry,
    };
    let sensors = match layout {
        DelayLayout::OriginLinks => vec![sensor("s1", 0), sensor("s2", 1)],
        DelayLayout::SharedLink => vec![sensor("s2", 1), sensor("s3", 2)],
    };
    Network::new(segments, ods, sensors)
}

/// Supply settings of the eight-segment corridor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorridorSupply {
    pub mainline_capacity_vph: f64,
    pub bottleneck_capacity_vph: f64,
    pub ramp_capacity_vph: f64,
    /// Vehicles per metre per lane at jam density.
    pub jam_density: f64,
    pub mainline_lanes: f64,
    pub ramp_lanes: f64,
    /// Share of the mainstream OD taking the upper branch (segments 2-3).
    pub upper_share: f64,
}

impl Default for CorridorSupply {
    fn default() -> Self {
        Self {
            mainline_capacity_vph: 6000.0,
            bottleneck_capacity_vph: 4000.0,
            ramp_capacity_vph: 1500.0,
            jam_density: 0.125,
            mainline_lanes: 3.0,
            ramp_lanes: 1.0,
            upper_share: 0.5,
        }
    }
}

pub const CORRIDOR_LENGTHS_M: [f64; 8] = [297.5, 553.8, 493.1, 351.2, 408.6, 666.7, 377.3, 183.0];
pub const CORRIDOR_SPEEDS_MPH: [f64; 8] = [50.0, 50.0, 50.0, 50.0, 20.0, 50.0, 50.0, 50.0];

/// Eight-segment corridor with a two-branch mainstream OD (1-2-3-4 and
/// 1-6-7-8-4) and an off-ramp OD (1-2-5). Segment 4 is the bottleneck and
/// every segment has an exit sensor.
pub fn corridor_network(supply: &CorridorSupply) -> Result<Network> {
    let nodes = [("A", "B"), ("B", "C"), ("C", "E"), ("E", "F"), ("C", "G"), ("B", "H"), ("H", "I"), ("I", "E")];
    let segments = (0..8)
        .map(|i| {
            let ramp = i == 4;
            let lanes = if ramp { supply.ramp_lanes } else { supply.mainline_lanes };
            let capacity = match i {
                3 => supply.bottleneck_capacity_vph,
                4 => supply.ramp_capacity_vph,
                _ => supply.mainline_capacity_vph,
            };
            let storage = CORRIDOR_LENGTHS_M[i] * lanes * supply.jam_density;
            Segment::new(&format!("{}", i + 1), nodes[i].0, nodes[i].1, CORRIDOR_LENGTHS_M[i], CORRIDOR_SPEEDS_MPH[i], capacity, storage)
        })
        .collect();
    let ods = vec![
        OdPair {
            id: "mainstream".into(),
            origin: "A".into(),
            destination: "F".into(),
            routes: vec![
                Route { segments: vec![0, 1, 2, 3], share: supply.upper_share },
                Route { segments: vec![0, 5, 6, 7, 3], share: 1.0 - supply.upper_share },
            ],
        },
        OdPair {
            id: "off_ramp".into(),
            origin: "A".into(),
            destination: "G".into(),
            routes: vec![Route { segments: vec![0, 1, 4], share: 1.0 }],
        },
    ];
    let sensors = (0..8)
        .map(|i| Sensor {
            id: format!("seg{}", i + 1),
            segment: i,
            position: SensorPosition::Exit,
        })
        .collect();
    Network::new(segments, ods, sensors)
}

/// Demand generators for the corridor: a peaked mainstream profile around
/// 4220 veh/h on average and a noisy off-ramp around 350 veh/h.
pub fn corridor_generators() -> Vec<PeakedDemand> {
    vec![
        PeakedDemand {
            base: 3600.0,
            peak: 1450.0,
            center: 34.0,
            width: 10.0,
            wave: 0.0,
            wave_period: 1.0,
            log_sd: 0.05,
            additive_sd: 0.0,
            noise_ar: 0.6,
        },
        PeakedDemand {
            base: 330.0,
            peak: 0.0,
            center: 0.0,
            width: 1.0,
            wave: 150.0,
            wave_period: 24.0,
            log_sd: 0.0,
            additive_sd: 220.0,
            noise_ar: 0.5,
        },
    ]
}

/// Smooth historical profile: the mean profile with a fixed bias per OD.
pub fn biased_profile(generators: &[PeakedDemand], bias: &[f64], intervals: usize) -> Vec<Vec<f64>> {
    (0..intervals)
        .map(|h| generators.iter().zip(bias).map(|(g, b)| g.mean(h) * (1.0 + b)).collect())
        .collect()
}

pub const CORRIDOR_INTERVALS: usize = 60;
pub const CORRIDOR_HISTORICAL_BIAS: [f64; 2] = [-0.08, 0.15];

/// Congested corridor scenario with its seeded demand and true outputs.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub simulator: Simulator,
    pub demand: DemandTable,
    pub outputs: Vec<IntervalOutput>,
}

pub fn build_toy_scenario(seed: u64) -> Result<GeneratedScenario> {
    let network = corridor_network(&CorridorSupply::default())?;
    let simulator = Simulator::new(network, SimConfig::default())?;
    let demand = sample_demand(&corridor_generators(), CORRIDOR_INTERVALS, seed);
    let outputs = simulator.run_window(&simulator.initial_state(), &demand.rates, demand.intervals())?;
    Ok(GeneratedScenario {
        simulator,
        demand,
        outputs,
    })
}

/// Freeway corridors with on- and off-ramps at every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampGridSpec {
    pub corridors: usize,
    /// Ramp nodes per corridor; ODs run from each node to every later one.
    pub nodes: usize,
    pub seed: u64,
    /// Put sensors on every off-ramp except the last node of each corridor.
    pub sensor_on_last: bool,
}

impl Default for RampGridSpec {
    fn default() -> Self {
        Self {
            corridors: 10,
            nodes: 7,
            seed: 17,
            sensor_on_last: false,
        }
    }
}

/// Builds the corridors: mainline links between nodes, an on-ramp into each
/// node and an off-ramp out of each node. OD pairs connect every on-ramp to
/// every downstream off-ramp of the same corridor.
pub fn ramp_grid_network(spec: &RampGridSpec) -> Result<Network> {
    use rand::Rng;
    if spec.nodes < 2 {
        return Err(Error::InvalidArgument("a corridor needs at least two ramp nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut segments = Vec::new();
    let mut ods = Vec::new();
    let mut sensors = Vec::new();
    for c in 0..spec.corridors {
        let node = |i: usize| format!("c{c}n{i}");
        let base = segments.len();
        // Layout per corridor: nodes on-ramps, nodes off-ramps, nodes-1 mainline links.
        for i in 0..spec.nodes {
            segments.push(Segment::new(&format!("c{c}on{i}"), &format!("c{c}o{i}"), &node(i), 300.0, 40.0, 2400.0, 80.0));
        }
        for i in 0..spec.nodes {
            segments.push(Segment::new(&format!("c{c}off{i}"), &node(i), &format!("c{c}d{i}"), 300.0, 40.0, 2400.0, 80.0));
        }
        for i in 0..spec.nodes - 1 {
            let length = rng.random_range(600.0..1800.0);
            segments.push(Segment::new(&format!("c{c}m{i}"), &node(i), &node(i + 1), length, 60.0, 7200.0, length * 3.0 * 0.125));
        }
        let on = |i: usize| base + i;
        let off = |i: usize| base + spec.nodes + i;
        let main = |i: usize| base + 2 * spec.nodes + i;
        for o in 0..spec.nodes - 1 {
            for d in o + 1..spec.nodes {
                let mut path = vec![on(o)];
                path.extend((o..d).map(main));
                path.push(off(d));
                ods.push(OdPair {
                    id: format!("c{c}:{o}->{d}"),
                    origin: format!("c{c}o{o}"),
                    destination: format!("c{c}d{d}"),
                    routes: vec![Route { segments: path, share: 1.0 }],
                });
            }
        }
        let last = if spec.sensor_on_last { spec.nodes } else { spec.nodes - 1 };
        for d in 1..last {
            sensors.push(Sensor {
                id: format!("c{c}off{d}"),
                segment: off(d),
                position: SensorPosition::Exit,
            });
        }
    }
    Network::new(segments, ods, sensors)
}

/// Per-OD generators for the ramp grid: flat profiles between 40 and 160
/// veh/h with mild noise.
pub fn ramp_grid_generators(num_ods: usize, seed: u64) -> Vec<PeakedDemand> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..num_ods)
        .map(|_| PeakedDemand {
            base: rng.random_range(40.0..160.0),
            peak: rng.random_range(0.0..60.0),
            center: rng.random_range(5.0..25.0),
            width: 6.0,
            wave: 0.0,
            wave_period: 1.0,
            log_sd: 0.08,
            additive_sd: 0.0,
            noise_ar: 0.5,
        })
        .collect()
}

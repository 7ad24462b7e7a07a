//! The five commands. Each writes its files into an output directory and
//! returns a short summary for the terminal.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::{IncidenceSource, Preparation, ScenarioFile, ScenarioModel};
use crate::calibration::{
    bootstrap_inputs, compute_metrics, observability_curve, prepare_inputs, route_incidence, run_online,
    CalibrationInputs, IntervalRecord, MetricsReport, OnlineConfig, OnlineResult, PspPattern, SeriesMetrics,
    TrafficModel,
};
use crate::error::{Error, Result};
use crate::gradient::{conflict_degree_stats, multi_start_color, EvaluationCounters, GradientMode, IncidenceMatrix};
use crate::simulator::{biased_profile, sample_demand};
use crate::statespace::MeasurementNoiseModel;

/// Command-line overrides of the scenario's calibration settings.
#[derive(Debug, Clone, Default)]
pub struct CalibrateOptions {
    pub degree: Option<usize>,
    pub gradient: Option<GradientMode>,
    pub constrained: Option<bool>,
    /// Demand seed of the test day; the first test split by default.
    pub seed: Option<u64>,
    /// Sensor counts to calibrate against instead of a generated day.
    pub observed: Option<PathBuf>,
    /// True demand of the observed day, for the `true` column.
    pub demand: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DemandRow {
    interval: usize,
    od_id: String,
    flow: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    interval: usize,
    sensor_id: String,
    count: f64,
    mean_speed: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TravelTimeRow<'a> {
    interval: usize,
    segment_id: &'a str,
    travel_time_s: f64,
}

#[derive(Debug, Serialize)]
struct EstimateRow<'a> {
    interval: usize,
    od_id: &'a str,
    estimated: f64,
    #[serde(rename = "true")]
    truth: Option<f64>,
    historical: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    horizon: usize,
    interval: usize,
    sensor_id: String,
    predicted: f64,
    observed: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct NoiseRow {
    sensor_id: String,
    variance: f64,
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    horizon: usize,
    group: String,
    sensors: usize,
    rmse: Option<f64>,
    wsse: Option<f64>,
    rmsn: Option<f64>,
    observations: Option<usize>,
}

#[derive(Debug, Serialize)]
struct IntervalRow {
    interval: usize,
    gradient_evaluations: usize,
    gradient_intervals: usize,
    nominal_intervals: usize,
    advance_intervals: usize,
    prediction_intervals: usize,
    model_intervals: u64,
    wall_seconds: f64,
}

#[derive(Debug, Serialize)]
struct ObservabilityRow {
    degree: usize,
    distinguishable: usize,
    total_ods: usize,
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Long-format rows into a complete `[interval][column]` table.
fn to_table(
    path: &Path,
    rows: impl IntoIterator<Item = (usize, String, f64)>,
    ids: &[String],
    intervals: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut table = vec![vec![f64::NAN; ids.len()]; intervals];
    for (h, id, value) in rows {
        let col = ids
            .iter()
            .position(|x| *x == id)
            .ok_or_else(|| Error::Schema(format!("{}: unknown id `{id}`", path.display())))?;
        if h >= intervals {
            return Err(Error::Schema(format!(
                "{}: interval {h} beyond the {intervals}-interval horizon",
                path.display()
            )));
        }
        table[h][col] = value;
    }
    for (h, row) in table.iter().enumerate() {
        if let Some(col) = row.iter().position(|v| v.is_nan()) {
            return Err(Error::Schema(format!("{}: no value for `{}` at interval {h}", path.display(), ids[col])));
        }
    }
    Ok(table)
}

pub struct GenerateSummary {
    pub seed: u64,
    pub intervals: usize,
    pub sensors: usize,
    pub total_count: f64,
}

/// Writes `demand.csv`, `counts.csv` and, for road networks,
/// `travel_times.csv` for one demand realisation.
pub fn generate(scenario: &ScenarioFile, seed: Option<u64>, out: &Path) -> Result<GenerateSummary> {
    let model = scenario.model()?;
    let seed = seed.unwrap_or(scenario.seeds.generate);
    let intervals = scenario.intervals();
    let od_ids = model.od_ids();
    let sensor_ids = model.sensor_ids();
    let table = sample_demand(&scenario.generators(od_ids.len()), intervals, seed);
    let flows: Vec<Vec<f64>> = table.rates.iter().map(|r| model.to_flows(r)).collect();
    create_dir(out)?;
    write_rows(
        &out.join("demand.csv"),
        flows.iter().enumerate().flat_map(|(h, row)| {
            row.iter().zip(&od_ids).map(move |(f, id)| DemandRow {
                interval: h,
                od_id: id.clone(),
                flow: *f,
            })
        }),
    )?;
    let (counts, speeds): (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) = match &model {
        ScenarioModel::Simulator(m) => {
            let sim = m.simulator();
            let outputs = sim.run_window(&sim.initial_state(), &table.rates, intervals)?;
            let segments = sim.network().segments();
            write_rows(
                &out.join("travel_times.csv"),
                outputs.iter().enumerate().flat_map(|(h, o)| {
                    o.segment_travel_times.iter().zip(segments).map(move |(t, s)| TravelTimeRow {
                        interval: h,
                        segment_id: &s.id,
                        travel_time_s: *t,
                    })
                }),
            )?;
            let counts = outputs.iter().map(|o| o.frame.counts.clone()).collect();
            let speeds = outputs.iter().map(|o| o.frame.mean_speeds.clone()).collect();
            (counts, Some(speeds))
        }
        ScenarioModel::Linear(m) => (m.run(&m.initial_state(), &flows)?, None),
    };
    write_rows(
        &out.join("counts.csv"),
        counts.iter().enumerate().flat_map(|(h, row)| {
            let (speeds, sensor_ids) = (&speeds, &sensor_ids);
            row.iter().enumerate().map(move |(i, c)| CountRow {
                interval: h,
                sensor_id: sensor_ids[i].clone(),
                count: *c,
                mean_speed: speeds.as_ref().map(|s| s[h][i]),
            })
        }),
    )?;
    Ok(GenerateSummary {
        seed,
        intervals,
        sensors: model.sensor_ids().len(),
        total_count: counts.iter().flatten().sum(),
    })
}

#[derive(Debug, Serialize)]
struct SeedRecord<'a> {
    test: Option<u64>,
    training: &'a [u64],
    validation: &'a [u64],
    coloring: u64,
}

#[derive(Debug, Serialize)]
struct PreparationRecord {
    mode: Preparation,
    aic_order: Option<usize>,
    chosen_order: Option<usize>,
    ar_coefficients: Option<Vec<f64>>,
    process_noise_q: f64,
}

/// Jacobian cost in the form "parameter groups, evaluations per sweep", next
/// to what plain finite differences would have needed.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationSummary {
    pub mode: GradientMode,
    pub ods: usize,
    pub parameter_groups: usize,
    pub evaluations_per_sweep: usize,
    pub fd_evaluations_per_sweep: usize,
    pub sweeps: usize,
    pub gradient_evaluations: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    scenario_name: &'a str,
    scenario: &'a str,
    observed_file: Option<String>,
    demand_file: Option<String>,
    seeds: SeedRecord<'a>,
    config: &'a OnlineConfig,
    preparation: PreparationRecord,
    ods: usize,
    sensors: usize,
    intervals: usize,
    evaluation: &'a EvaluationSummary,
    totals: &'a EvaluationCounters,
    records: &'a [IntervalRecord],
    metrics: &'a MetricsReport,
}

pub struct CalibrateSummary {
    pub evaluation: EvaluationSummary,
    pub metrics: MetricsReport,
    pub estimates: Vec<Vec<f64>>,
}

/// Prepares inputs from the training and validation days, calibrates the
/// test day online and writes `estimates.csv`, `predictions.csv`,
/// `metrics.csv`, `intervals.csv`, `noise.csv` and `manifest.json`.
pub fn calibrate(scenario: &ScenarioFile, text: &str, opts: &CalibrateOptions, out: &Path) -> Result<CalibrateSummary> {
    match scenario.model()? {
        ScenarioModel::Simulator(m) => {
            let sm = ScenarioModel::Simulator(m.clone());
            calibrate_with(&m, &sm, scenario, text, opts, out)
        }
        ScenarioModel::Linear(m) => {
            let sm = ScenarioModel::Linear(m.clone());
            calibrate_with(&m, &sm, scenario, text, opts, out)
        }
    }
}

fn calibrate_with<M: TrafficModel>(
    model: &M,
    labels: &ScenarioModel,
    scenario: &ScenarioFile,
    text: &str,
    opts: &CalibrateOptions,
    out: &Path,
) -> Result<CalibrateSummary> {
    let n = model.num_params();
    let od_ids = labels.od_ids();
    let sensor_ids = labels.sensor_ids();
    let intervals = scenario.intervals();
    let generators = scenario.generators(n);
    let demand = |seed: u64| -> Vec<Vec<f64>> {
        sample_demand(&generators, intervals, seed)
            .rates
            .iter()
            .map(|r| labels.to_flows(r))
            .collect()
    };
    let day = |seed: u64| model.run(&model.initial_state(), &demand(seed));

    let mut config = scenario.online_config();
    if let Some(r) = opts.degree {
        if r == 0 {
            return Err(Error::InvalidArgument("--degree must be >= 1".into()));
        }
        config.filter.degree = r;
    }
    if let Some(g) = opts.gradient {
        config.gradient = g;
    }
    if let Some(c) = opts.constrained {
        config.filter.constraint_mode = if c {
            crate::filter::ConstraintMode::Nonneg
        } else {
            crate::filter::ConstraintMode::Unconstrained
        };
    }
    let degree = config.filter.degree;

    let seed_profile: Vec<Vec<f64>> = biased_profile(&generators, &scenario.historical_bias(n), intervals)
        .iter()
        .map(|r| labels.to_flows(r))
        .collect();
    let training = scenario.splits.training.iter().map(|&s| day(s)).collect::<Result<Vec<_>>>()?;
    let prep_cfg = scenario.prepare_config();
    let (inputs, incidence, prep_record): (CalibrationInputs, Vec<IncidenceMatrix>, PreparationRecord) =
        match scenario.filter.preparation {
            Preparation::Full => {
                let validation = scenario.splits.validation.iter().map(|&s| day(s)).collect::<Result<Vec<_>>>()?;
                let p = prepare_inputs(model, &seed_profile, &training, &validation, &prep_cfg)?;
                log::info!("prepared inputs: AIC order {}, chosen order {}", p.aic_order, p.chosen_order);
                let record = PreparationRecord {
                    mode: Preparation::Full,
                    aic_order: Some(p.aic_order),
                    chosen_order: Some(p.chosen_order),
                    ar_coefficients: p.inputs.ar.scalar_coefficients(),
                    process_noise_q: p.inputs.ar.noise_variance_q(),
                };
                (p.inputs, p.incidence, record)
            }
            Preparation::Bootstrap => {
                let inputs = bootstrap_inputs(model, &seed_profile, &training, &prep_cfg)?;
                let record = PreparationRecord {
                    mode: Preparation::Bootstrap,
                    aic_order: None,
                    chosen_order: None,
                    ar_coefficients: inputs.ar.scalar_coefficients(),
                    process_noise_q: inputs.ar.noise_variance_q(),
                };
                (inputs, Vec::new(), record)
            }
        };

    let psp = match config.gradient {
        GradientMode::Fd => None,
        GradientMode::Psp => {
            let offsets = match scenario.filter.incidence {
                IncidenceSource::Recorded => {
                    if incidence.len() < degree {
                        return Err(Error::InvalidArgument(format!(
                            "recorded incidence covers {} lags, degree {degree} needs more; raise bootstrap_degree",
                            incidence.len()
                        )));
                    }
                    incidence[..degree].to_vec()
                }
                IncidenceSource::Routes => structural_incidence(labels, scenario, degree)?,
            };
            Some(PspPattern::colored(offsets, scenario.filter.psp_starts, scenario.seeds.coloring)?)
        }
    };
    let groups = psp.as_ref().map_or(n, |p| p.coloring().num_colors());

    let test_seed = match (&opts.observed, opts.seed) {
        (Some(_), _) => None,
        (None, Some(s)) => Some(s),
        (None, None) => Some(*scenario.splits.test.first().ok_or_else(|| {
            Error::Schema("splits.test is empty; pass --seed or --observed".into())
        })?),
    };
    let (observed, truth) = match (&opts.observed, test_seed) {
        (Some(path), _) => {
            let rows: Vec<CountRow> = read_rows(path)?;
            let observed = to_table(path, rows.into_iter().map(|r| (r.interval, r.sensor_id, r.count)), &sensor_ids, intervals)?;
            let truth = match &opts.demand {
                Some(dpath) => {
                    let rows: Vec<DemandRow> = read_rows(dpath)?;
                    Some(to_table(dpath, rows.into_iter().map(|r| (r.interval, r.od_id, r.flow)), &od_ids, intervals)?)
                }
                None => None,
            };
            (observed, truth)
        }
        (None, Some(seed)) => {
            let flows = demand(seed);
            (model.run(&model.initial_state(), &flows)?, Some(flows))
        }
        (None, None) => unreachable!("a test seed is chosen when no file is given"),
    };

    let result = run_online(model, inputs.clone(), observed.clone(), config.clone(), psp)?;
    let metrics = result.metrics(&observed, &inputs.noise)?;
    let evaluation = evaluation_summary(&result, config.gradient, n, groups);

    create_dir(out)?;
    write_rows(
        &out.join("estimates.csv"),
        result.estimates.iter().enumerate().flat_map(|(h, row)| {
            let (truth, od_ids) = (&truth, &od_ids);
            let historical = inputs.historical.flows(h);
            row.iter().enumerate().map(move |(j, x)| EstimateRow {
                interval: h,
                od_id: &od_ids[j],
                estimated: *x,
                truth: truth.as_ref().map(|t| t[h][j]),
                historical: historical[j],
            })
        }),
    )?;
    let estimated = result.estimated_counts.iter().enumerate().map(|(h, c)| (0, h, c));
    let predicted = result.predictions.iter().map(|p| (p.horizon, p.interval, &p.counts));
    write_rows(
        &out.join("predictions.csv"),
        estimated.chain(predicted).flat_map(|(k, h, counts)| {
            let observed = &observed;
            let sensor_ids = &sensor_ids;
            counts.iter().enumerate().map(move |(i, c)| PredictionRow {
                horizon: k,
                interval: h,
                sensor_id: sensor_ids[i].clone(),
                predicted: *c,
                observed: observed[h][i],
            })
        }),
    )?;
    write_rows(
        &out.join("noise.csv"),
        sensor_ids.iter().zip(inputs.noise.variances()).map(|(id, v)| NoiseRow {
            sensor_id: id.clone(),
            variance: *v,
        }),
    )?;
    write_metrics(&out.join("metrics.csv"), &metrics)?;
    write_rows(
        &out.join("intervals.csv"),
        result.records.iter().map(|r| IntervalRow {
            interval: r.interval,
            gradient_evaluations: r.counters.gradient_evaluations,
            gradient_intervals: r.counters.gradient_intervals,
            nominal_intervals: r.counters.nominal_intervals,
            advance_intervals: r.counters.advance_intervals,
            prediction_intervals: r.counters.prediction_intervals,
            model_intervals: r.model_intervals,
            wall_seconds: r.wall_seconds,
        }),
    )?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        scenario_name: &scenario.name,
        scenario: text,
        observed_file: opts.observed.as_ref().map(|p| p.display().to_string()),
        demand_file: opts.demand.as_ref().map(|p| p.display().to_string()),
        seeds: SeedRecord {
            test: test_seed,
            training: &scenario.splits.training,
            validation: &scenario.splits.validation,
            coloring: scenario.seeds.coloring,
        },
        config: &config,
        preparation: prep_record,
        ods: n,
        sensors: sensor_ids.len(),
        intervals,
        evaluation: &evaluation,
        totals: &result.totals,
        records: &result.records,
        metrics: &metrics,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(out.join("manifest.json"), json + "\n")?;
    Ok(CalibrateSummary {
        evaluation,
        metrics,
        estimates: result.estimates,
    })
}

fn evaluation_summary(result: &OnlineResult, mode: GradientMode, n: usize, groups: usize) -> EvaluationSummary {
    let per_sweep = 2 * groups;
    EvaluationSummary {
        mode,
        ods: n,
        parameter_groups: groups,
        evaluations_per_sweep: per_sweep,
        fd_evaluations_per_sweep: 2 * n,
        sweeps: result.totals.gradient_evaluations / per_sweep.max(1),
        gradient_evaluations: result.totals.gradient_evaluations,
    }
}

/// Per-lag incidence from the model structure: routes and free-flow times
/// for road networks, the non-zero pattern for linear maps.
fn structural_incidence(labels: &ScenarioModel, scenario: &ScenarioFile, lags: usize) -> Result<Vec<IncidenceMatrix>> {
    match labels {
        ScenarioModel::Simulator(m) => route_incidence(
            m.simulator().network(),
            scenario.horizon.interval_s,
            lags,
            scenario.filter.incidence_slack,
        ),
        ScenarioModel::Linear(m) => {
            let (rows, cols) = m.lags()[0].shape();
            Ok((0..lags)
                .map(|k| {
                    m.lags()
                        .get(k)
                        .map_or_else(|| IncidenceMatrix::new(rows, cols), |a| IncidenceMatrix::from_dense(a, 0.0))
                })
                .collect())
        }
    }
}

fn band_label(lower: f64, upper: f64) -> String {
    if upper.is_finite() {
        format!("{lower}-{upper}")
    } else {
        format!("{lower}+")
    }
}

fn metrics_rows(horizon: usize, m: &SeriesMetrics) -> Vec<MetricsRow> {
    let overall = &m.overall;
    let mut rows = vec![MetricsRow {
        horizon,
        group: "all".into(),
        sensors: m.bands.iter().map(|b| b.sensors.len()).sum(),
        rmse: Some(overall.rmse),
        wsse: Some(overall.wsse),
        rmsn: Some(overall.rmsn),
        observations: Some(overall.observations),
    }];
    rows.extend(m.bands.iter().map(|b| MetricsRow {
        horizon,
        group: band_label(b.lower, b.upper),
        sensors: b.sensors.len(),
        rmse: b.metrics.map(|x| x.rmse),
        wsse: b.metrics.map(|x| x.wsse),
        rmsn: b.metrics.map(|x| x.rmsn),
        observations: b.metrics.map(|x| x.observations),
    }));
    rows
}

fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write_rows(path, report.horizons.iter().flat_map(|h| metrics_rows(h.horizon, &h.metrics)))
}

/// Recomputes `metrics.csv` from a run directory's `predictions.csv` and
/// `noise.csv`.
pub fn metrics(run: &Path, out: &Path) -> Result<MetricsReport> {
    let noise_rows: Vec<NoiseRow> = read_rows(&run.join("noise.csv"))?;
    let sensor_ids: Vec<String> = noise_rows.iter().map(|r| r.sensor_id.clone()).collect();
    let noise = MeasurementNoiseModel::with_exact(noise_rows.iter().map(|r| r.variance).collect())?;
    let rows: Vec<PredictionRow> = read_rows(&run.join("predictions.csv"))?;
    let max_h = rows.iter().map(|r| r.horizon).max().unwrap_or(0);
    let mut horizons = Vec::new();
    for k in 0..=max_h {
        let mut intervals: Vec<usize> = rows.iter().filter(|r| r.horizon == k).map(|r| r.interval).collect();
        intervals.sort_unstable();
        intervals.dedup();
        if intervals.is_empty() {
            continue;
        }
        let pos = |h: usize| intervals.binary_search(&h).expect("interval listed");
        let path = run.join("predictions.csv");
        let of_horizon = || rows.iter().filter(|r| r.horizon == k);
        let predicted = to_table(
            &path,
            of_horizon().map(|r| (pos(r.interval), r.sensor_id.clone(), r.predicted)),
            &sensor_ids,
            intervals.len(),
        )?;
        let observed = to_table(
            &path,
            of_horizon().map(|r| (pos(r.interval), r.sensor_id.clone(), r.observed)),
            &sensor_ids,
            intervals.len(),
        )?;
        horizons.push(crate::calibration::HorizonMetrics {
            horizon: k,
            metrics: compute_metrics(&predicted, &observed, &noise)?,
        });
    }
    let report = MetricsReport { horizons };
    create_dir(out)?;
    write_metrics(&out.join("metrics.csv"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ColorReport {
    pub measurements: usize,
    pub ods: usize,
    pub nonzeros: usize,
    pub colors: usize,
    pub starts: usize,
    pub seed: u64,
    pub conflict_degree_min: usize,
    pub conflict_degree_mean: f64,
    pub conflict_degree_max: usize,
}

/// Colors an incidence file; writes `coloring.txt` and `color_report.json`.
pub fn color(incidence_path: &Path, starts: usize, seed: u64, out: &Path) -> Result<ColorReport> {
    let incidence = IncidenceMatrix::parse(&fs::read_to_string(incidence_path)?)?;
    let coloring = multi_start_color(&incidence, starts, seed)?;
    coloring.validate(&incidence)?;
    let (dmin, dmean, dmax) = conflict_degree_stats(&incidence);
    let report = ColorReport {
        measurements: incidence.nrows(),
        ods: incidence.ncols(),
        nonzeros: incidence.nnz(),
        colors: coloring.num_colors(),
        starts,
        seed,
        conflict_degree_min: dmin,
        conflict_degree_mean: dmean,
        conflict_degree_max: dmax,
    };
    create_dir(out)?;
    fs::write(out.join("coloring.txt"), coloring.to_text())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(out.join("color_report.json"), json + "\n")?;
    Ok(report)
}

/// Writes `observability.csv`: distinguishable OD count for degrees `1..=max_degree`.
pub fn observability(scenario: &ScenarioFile, max_degree: usize, out: &Path) -> Result<Vec<usize>> {
    if max_degree == 0 {
        return Err(Error::InvalidArgument("--max-degree must be >= 1".into()));
    }
    let network = scenario.network()?;
    let curve = observability_curve(&network, scenario.horizon.interval_s, max_degree);
    create_dir(out)?;
    write_rows(
        &out.join("observability.csv"),
        curve.iter().enumerate().map(|(r, &count)| ObservabilityRow {
            degree: r + 1,
            distinguishable: count,
            total_ods: network.num_ods(),
        }),
    )?;
    Ok(curve)
}

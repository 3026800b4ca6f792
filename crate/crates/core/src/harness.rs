//! Monte-Carlo evaluation: repeated simulate-and-estimate runs, RMSE
//! aggregation and parameter sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::assembly::{BiasKind, BiasSet, Problem, WeightMode};
use crate::config::ScenarioConfig;
use crate::error::{ConfigError, SolverError};
use crate::geometry::wrap_angle;
use crate::model::{generate_scenario, run_rng, Scenario};
use crate::solver::{bcd, AdmmOptions, BcdOptions, Termination};

/// Which weighting the estimator uses. The pseudo-ML weights take `q` from
/// the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Nls,
    Pml,
}

impl Weighting {
    pub fn mode(&self, q: f64) -> WeightMode {
        match self {
            Weighting::Nls => WeightMode::Identity,
            Weighting::Pml => WeightMode::PseudoMl { q },
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Weighting::Nls => "nls",
            Weighting::Pml => "pml",
        }
    }
}

impl FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nls" => Ok(Weighting::Nls),
            "pml" => Ok(Weighting::Pml),
            other => Err(format!("unknown weighting `{other}` (expected nls or pml)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSettings {
    pub runs: usize,
    pub base_seed: u64,
    pub weighting: Weighting,
    pub tolerance: f64,
    pub admm_tolerance: f64,
    pub max_sweeps: usize,
    pub max_admm_iterations: usize,
    /// Worker threads; 0 uses rayon's default.
    pub workers: usize,
}

impl Default for MonteCarloSettings {
    fn default() -> Self {
        let bcd = BcdOptions::default();
        Self {
            runs: 100,
            base_seed: 0,
            weighting: Weighting::Pml,
            tolerance: bcd.tolerance,
            admm_tolerance: bcd.admm.tolerance,
            max_sweeps: bcd.max_sweeps,
            max_admm_iterations: bcd.admm.max_iterations,
            workers: 0,
        }
    }
}

impl MonteCarloSettings {
    pub fn bcd_options(&self, q: f64) -> BcdOptions {
        BcdOptions {
            weight: self.weighting.mode(q),
            tolerance: self.tolerance,
            max_sweeps: self.max_sweeps,
            admm: AdmmOptions {
                tolerance: self.admm_tolerance,
                max_iterations: self.max_admm_iterations,
                ..AdmmOptions::default()
            },
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.runs == 0 {
            return Err(ConfigError::invalid("runs", "must be at least 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(ConfigError::invalid("tol", "must be >= 0"));
        }
        if !(self.admm_tolerance > 0.0) {
            return Err(ConfigError::invalid("admm-tol", "must be > 0"));
        }
        if self.max_sweeps == 0 {
            return Err(ConfigError::invalid("max-sweeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// What one Monte-Carlo run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub truth: BiasSet,
    pub outcome: Result<RunOutcome, String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub estimate: BiasSet,
    pub sweeps: usize,
    pub admm_iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

impl RunRecord {
    /// `estimate - truth` in meters and radians (angles wrapped), if the run
    /// succeeded.
    pub fn errors(&self) -> Option<BiasSet> {
        let est = &self.outcome.as_ref().ok()?.estimate;
        let mut err = est.clone();
        for (e, t) in err.range.iter_mut().zip(&self.truth.range) {
            *e -= t;
        }
        for kind in crate::assembly::AngleKind::ALL {
            let diff: Vec<f64> = est
                .angles(kind)
                .iter()
                .zip(self.truth.angles(kind))
                .map(|(a, b)| wrap_angle(a - b))
                .collect();
            *err.angles_mut(kind) = diff;
        }
        Some(err)
    }

    pub fn succeeded(&self) -> bool {
        self.outcome.is_ok()
    }
}

/// Range entries in meters, angle entries in degrees.
pub fn display_unit(kind: BiasKind) -> &'static str {
    match kind {
        BiasKind::Range => "m",
        BiasKind::Angle(_) => "deg",
    }
}

fn to_display(kind: BiasKind, value: f64) -> f64 {
    match kind {
        BiasKind::Range => value,
        BiasKind::Angle(_) => value.to_degrees(),
    }
}

/// Root-mean-square error per sensor and bias kind, in display units.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseTable {
    /// `values[m][i]` for sensor `m` and `BiasKind::ALL[i]`.
    pub values: Vec<[f64; 5]>,
    pub runs: usize,
    pub failures: usize,
}

impl RmseTable {
    /// Aggregates successful runs in run-index order; failed runs are counted.
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut sorted: Vec<&RunRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.run);
        let errors: Vec<BiasSet> = sorted.iter().filter_map(|r| r.errors()).collect();
        let sensors = records.first().map_or(0, |r| r.truth.num_sensors());
        let mut table = Self::from_errors(&errors, sensors);
        table.failures = records.len() - errors.len();
        table
    }

    /// `√(mean e²)` over the given error sets (meters and radians).
    pub fn from_errors(errors: &[BiasSet], sensors: usize) -> Self {
        let n = errors.len();
        let mut values = vec![[f64::NAN; 5]; sensors];
        if n > 0 {
            for (m, row) in values.iter_mut().enumerate() {
                for (i, kind) in BiasKind::ALL.into_iter().enumerate() {
                    let sum: f64 = errors.iter().map(|e| e.get(kind)[m].powi(2)).sum();
                    row[i] = to_display(kind, (sum / n as f64).sqrt());
                }
            }
        }
        Self {
            values,
            runs: n,
            failures: 0,
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, sensor: usize, kind: BiasKind) -> f64 {
        let i = BiasKind::ALL.iter().position(|k| *k == kind).expect("known kind");
        self.values[sensor][i]
    }

    /// Mean over sensors for one kind.
    pub fn mean(&self, kind: BiasKind) -> f64 {
        let total: f64 = (0..self.num_sensors()).map(|m| self.get(m, kind)).sum();
        total / self.num_sensors() as f64
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub records: Vec<RunRecord>,
    pub rmse: RmseTable,
}

impl MonteCarloResult {
    pub fn all_failed(&self) -> bool {
        self.records.iter().all(|r| !r.succeeded())
    }
}

/// Simulates and estimates one run on its own random stream.
pub fn run_single(scenario: &Scenario, opts: &BcdOptions, base_seed: u64, run: usize) -> RunRecord {
    let start = Instant::now();
    let truth = BiasSet::from_sensors(&scenario.sensors);
    let outcome = (|| -> Result<RunOutcome, SolverError> {
        let mut rng = run_rng(base_seed, run as u64);
        let data = generate_scenario(scenario, &mut rng)
            .map_err(|e| SolverError::Assembly(e.into()))?;
        let problem = Problem::from_dataset(&data)?;
        let report = bcd(&problem, &BiasSet::zeros(problem.num_sensors()), opts)?;
        Ok(RunOutcome {
            admm_iterations: report.admm_iterations.iter().flatten().sum(),
            sweeps: report.sweeps,
            converged: report.termination == Termination::Converged,
            objective: report.final_objective(),
            estimate: report.biases,
        })
    })()
    .map_err(|e| e.to_string());
    if let Err(msg) = &outcome {
        log::warn!("run {run} failed: {msg}");
    }
    RunRecord {
        run,
        seed: base_seed,
        truth,
        outcome,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Runs `settings.runs` independent simulate-and-estimate passes in parallel.
/// Records come back ordered by run index whatever the scheduling.
pub fn run_monte_carlo(
    config: &ScenarioConfig,
    settings: &MonteCarloSettings,
) -> Result<MonteCarloResult, ConfigError> {
    settings.validate()?;
    let scenario = config.to_scenario()?;
    let opts = settings.bcd_options(scenario.motion.q);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| ConfigError::invalid("workers", e.to_string()))?;
    let mut records: Vec<RunRecord> = pool.install(|| {
        (0..settings.runs)
            .into_par_iter()
            .map(|run| run_single(&scenario, &opts, settings.base_seed, run))
            .collect()
    });
    records.sort_by_key(|r| r.run);
    let rmse = RmseTable::from_records(&records);
    Ok(MonteCarloResult { records, rmse })
}

/// The scenario parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Measurement noise; values are `SIGMA_RANGE_M:SIGMA_ANGLE_DEG`, the
    /// angle sigma applying to both azimuth and elevation.
    Noise,
    /// Motion noise density in m²/s³.
    Q,
    /// Multiplier on every configured bias.
    BiasScale,
}

impl SweepParam {
    pub fn label(&self) -> &'static str {
        match self {
            SweepParam::Noise => "noise",
            SweepParam::Q => "q",
            SweepParam::BiasScale => "bias-scale",
        }
    }

    pub fn parse_value(&self, text: &str) -> Result<SweepValue, ConfigError> {
        let field = format!("values ({text})");
        let number = |s: &str| -> Result<f64, ConfigError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| ConfigError::invalid(field.clone(), "expected a finite number >= 0"))
        };
        match self {
            SweepParam::Noise => {
                let (r, a) = text.split_once(':').ok_or_else(|| {
                    ConfigError::invalid(field.clone(), "expected SIGMA_RANGE_M:SIGMA_ANGLE_DEG")
                })?;
                Ok(SweepValue::Noise {
                    sigma_range_m: number(r)?,
                    sigma_angle_deg: number(a)?,
                })
            }
            SweepParam::Q => Ok(SweepValue::Q(number(text)?)),
            SweepParam::BiasScale => {
                let c = number(text)?;
                if c == 0.0 {
                    return Err(ConfigError::invalid(field, "bias scale must be positive"));
                }
                Ok(SweepValue::BiasScale(c))
            }
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(SweepParam::Noise),
            "q" => Ok(SweepParam::Q),
            "bias-scale" => Ok(SweepParam::BiasScale),
            other => Err(format!("unknown sweep parameter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Noise { sigma_range_m: f64, sigma_angle_deg: f64 },
    Q(f64),
    BiasScale(f64),
}

impl SweepValue {
    pub fn apply(&self, config: &ScenarioConfig) -> ScenarioConfig {
        let cfg = config.clone();
        match *self {
            SweepValue::Noise {
                sigma_range_m,
                sigma_angle_deg,
            } => cfg.with_noise(sigma_range_m, sigma_angle_deg),
            SweepValue::Q(q) => cfg.with_q(q),
            SweepValue::BiasScale(c) => cfg.with_bias_scale(c),
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Noise {
                sigma_range_m,
                sigma_angle_deg,
            } => write!(f, "{sigma_range_m}:{sigma_angle_deg}"),
            SweepValue::Q(v) | SweepValue::BiasScale(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: SweepValue,
    pub result: MonteCarloResult,
}

/// One Monte-Carlo batch per value, all with the same seeds.
pub fn sweep(
    config: &ScenarioConfig,
    param: SweepParam,
    values: &[SweepValue],
    settings: &MonteCarloSettings,
) -> Result<Vec<SweepPoint>, ConfigError> {
    if values.is_empty() {
        return Err(ConfigError::invalid("values", "need at least one value"));
    }
    values
        .iter()
        .map(|v| {
            log::info!("sweep {} = {v}", param.label());
            Ok(SweepPoint {
                value: *v,
                result: run_monte_carlo(&v.apply(config), settings)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::AngleKind;

    fn record(run: usize, range_err: f64, yaw_err: f64) -> RunRecord {
        let truth = BiasSet::zeros(1);
        let mut est = truth.clone();
        est.range[0] = range_err;
        est.yaw[0] = yaw_err;
        RunRecord {
            run,
            seed: 0,
            truth,
            outcome: Ok(RunOutcome {
                estimate: est,
                sweeps: 1,
                admm_iterations: 0,
                converged: true,
                objective: 0.0,
            }),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn rmse_of_three_and_four() {
        let table = RmseTable::from_records(&[record(0, 3.0, 0.0), record(1, 4.0, 0.0)]);
        assert_eq!(table.get(0, BiasKind::Range), 12.5f64.sqrt());
        assert_eq!(table.runs, 2);
        assert_eq!(table.failures, 0);
    }

    #[test]
    fn single_run_rmse_is_absolute_error() {
        let table = RmseTable::from_records(&[record(0, -2.5, -0.01)]);
        assert_eq!(table.get(0, BiasKind::Range), 2.5);
        let yaw = table.get(0, BiasKind::Angle(AngleKind::Yaw));
        assert!((yaw - 0.01f64.to_degrees()).abs() < 1e-15);
    }

    #[test]
    fn failed_runs_are_excluded_and_counted() {
        let mut failed = record(1, 100.0, 0.0);
        failed.outcome = Err("rank deficient".into());
        let table = RmseTable::from_records(&[record(0, 3.0, 0.0), failed]);
        assert_eq!(table.get(0, BiasKind::Range), 3.0);
        assert_eq!((table.runs, table.failures), (1, 1));
    }

    #[test]
    fn angle_errors_wrap() {
        let mut r = record(0, 0.0, 0.0);
        r.truth.yaw[0] = 3.1;
        if let Ok(o) = &mut r.outcome {
            o.estimate.yaw[0] = -3.1;
        }
        let e = r.errors().unwrap();
        assert!((e.yaw[0] - (std::f64::consts::TAU - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn record_order_does_not_matter() {
        let records: Vec<RunRecord> = (0..7)
            .map(|i| record(i, 0.1 * i as f64 + 0.37, 1e-3 * (i as f64).sin()))
            .collect();
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(RmseTable::from_records(&records), RmseTable::from_records(&reversed));
    }

    #[test]
    fn sweep_values_parse() {
        assert_eq!(
            SweepParam::Noise.parse_value("0.01:0.02").unwrap(),
            SweepValue::Noise {
                sigma_range_m: 0.01,
                sigma_angle_deg: 0.02
            }
        );
        assert_eq!(SweepParam::Q.parse_value("0.2").unwrap(), SweepValue::Q(0.2));
        assert!(SweepParam::Noise.parse_value("0.01").is_err());
        assert!(SweepParam::BiasScale.parse_value("0").is_err());
        assert!(SweepParam::Q.parse_value("-1").is_err());
        assert!("gain".parse::<SweepParam>().is_err());
    }

    #[test]
    fn bias_scale_sweep_value_scales_truth() {
        let cfg = SweepValue::BiasScale(0.5).apply(&ScenarioConfig::table1());
        let sc = cfg.to_scenario().unwrap();
        assert!((sc.sensors[0].range_bias + 250.0).abs() < 1e-9);
    }

    #[test]
    fn zero_runs_is_a_config_error() {
        let settings = MonteCarloSettings {
            runs: 0,
            ..Default::default()
        };
        assert!(run_monte_carlo(&ScenarioConfig::table1(), &settings).is_err());
    }
}

//! Experiment harness: closed-loop scenario grids over methods and
//! initial tilts, wind-disturbance recovery, summary statistics, and
//! deterministic SVG plots.
//!
//! A "method" is a choice of sensing front end (raw IMU or the trained
//! denoiser) and controller model (mismatched initial parameters or the
//! learned ones). Crossing the two switches gives the four configurations
//! the studies compare.

use crate::dynamics::VehicleParams;
use crate::estimator::{rotation_angle_between, Denoiser};
use crate::math::so3::{self, Mat3};
use crate::sensors::{WindEvent, WindKind};
use crate::sim::{build_closed_loop, EpisodeSetup, RunLog, SimError};
use crate::trainer::Checkpoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// One of the four sensing/model configurations under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Raw IMU into the controller with the mismatched parameters.
    Baseline,
    /// Trained denoiser, still the mismatched parameters.
    DenoiserOnly,
    /// Raw IMU, but the controller runs the learned parameters.
    ModelOnly,
    /// Trained denoiser and learned parameters together.
    Full,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline,
        Method::DenoiserOnly,
        Method::ModelOnly,
        Method::Full,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DenoiserOnly => "denoiser-only",
            Method::ModelOnly => "model-only",
            Method::Full => "full",
        }
    }

    fn index(&self) -> u64 {
        match self {
            Method::Baseline => 0,
            Method::DenoiserOnly => 1,
            Method::ModelOnly => 2,
            Method::Full => 3,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// What training produced: the correction network and the parameters the
/// controller should believe.
#[derive(Clone, Debug)]
pub struct TrainedArtifacts {
    pub denoiser: Denoiser,
    pub params: VehicleParams,
}

impl TrainedArtifacts {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        TrainedArtifacts {
            denoiser: ck.denoiser(),
            params: ck.vehicle_params(),
        }
    }
}

/// Fixed experiment knobs shared by every scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub true_params: VehicleParams,
    /// Mismatched controller parameters are the true ones scaled by this.
    pub mismatch_scale: f64,
    /// Trials per scenario cell.
    pub trials: usize,
    pub base_seed: u64,
    /// Template for every episode; initial attitude and wind are filled
    /// per scenario.
    pub episode: EpisodeSetup,
    /// Width of the settling band around the steady value, degrees.
    pub settle_band_deg: f64,
    /// The steady value is the mean error over this trailing window (s).
    pub steady_window_s: f64,
    /// A wind trial counts as recovered when it settles back to within
    /// this steady error, degrees.
    pub recover_sse_deg: f64,
    /// Trials per probe point in the failure-threshold search.
    pub threshold_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            true_params: VehicleParams::default(),
            mismatch_scale: 1.5,
            trials: 10,
            base_seed: 31_000,
            episode: EpisodeSetup::default(),
            settle_band_deg: 1.5,
            steady_window_s: 0.5,
            recover_sse_deg: 2.0,
            threshold_trials: 3,
        }
    }
}

/// One scenario cell: a method, a starting roll tilt, and optional wind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub method: Method,
    pub initial_roll_deg: f64,
    pub wind: Vec<WindEvent>,
}

/// Per-trial results. Angle metrics are geodesic attitude error against
/// the setpoint, in degrees.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub diverged: bool,
    /// First time after which the error stays inside the settling band
    /// around its steady value; None when it never does or the trial
    /// diverged.
    pub settling_time_s: Option<f64>,
    /// Steady-state error: the steady value itself, desired being zero.
    pub sse_deg: f64,
    /// Root-mean-square error over the whole run.
    pub rmse_deg: f64,
    pub imu_rmse_raw: f64,
    pub imu_rmse_corrected: f64,
    pub median_solve_ms: f64,
}

/// A scenario cell with its trials and their aggregate statistics.
/// Aggregates cover non-diverged trials; settling statistics cover the
/// trials that settled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub trials: Vec<TrialOutcome>,
    pub diverged_trials: usize,
    pub settled_trials: usize,
    pub settling_mean_s: f64,
    pub settling_std_s: f64,
    pub sse_mean_deg: f64,
    pub sse_std_deg: f64,
    pub sse_median_deg: f64,
    pub rmse_mean_deg: f64,
    pub rmse_std_deg: f64,
    pub imu_rmse_raw_mean: f64,
    pub imu_rmse_corrected_mean: f64,
    pub median_solve_ms: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Attitude error against the target at every logged control period,
/// degrees.
fn error_curve_deg(log: &RunLog, target_euler: &[f64; 3]) -> Vec<f64> {
    let target: Mat3<f64> = so3::rot_from_euler(target_euler);
    log.euler_true
        .iter()
        .map(|e| rotation_angle_between(&so3::rot_from_euler(e), &target).to_degrees())
        .collect()
}

/// Steady value, settling time, and RMSE of an error curve sampled at
/// `dt`. The steady value is the mean over the trailing window; settling
/// is the first time after which the curve stays inside the band around
/// it.
fn curve_metrics(
    err_deg: &[f64],
    t: &[f64],
    steady_window_s: f64,
    band_deg: f64,
) -> (f64, Option<f64>, f64) {
    assert_eq!(err_deg.len(), t.len());
    if err_deg.is_empty() {
        return (f64::NAN, None, f64::NAN);
    }
    let t_end = *t.last().unwrap();
    let tail: Vec<f64> = t
        .iter()
        .zip(err_deg)
        .filter(|(ti, _)| **ti >= t_end - steady_window_s)
        .map(|(_, e)| *e)
        .collect();
    let steady = tail.iter().sum::<f64>() / tail.len() as f64;

    let mut settle_idx = None;
    for i in (0..err_deg.len()).rev() {
        if (err_deg[i] - steady).abs() > band_deg {
            break;
        }
        settle_idx = Some(i);
    }
    let settling = settle_idx.map(|i| t[i] - t[0]);
    let rmse = (err_deg.iter().map(|e| e * e).sum::<f64>() / err_deg.len() as f64).sqrt();
    (steady, settling, rmse)
}

/// Splitmix-style fold so every (scenario, trial) pair gets its own
/// reproducible seed regardless of evaluation order.
fn trial_seed(base: u64, scenario: &Scenario, trial: usize) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    let mut fold = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    };
    fold(scenario.method.index());
    fold(scenario.initial_roll_deg.to_bits());
    for w in &scenario.wind {
        fold(w.speed.to_bits());
        fold(w.start.to_bits());
        fold(match w.kind {
            WindKind::Impulse => 1,
            WindKind::Step => 2,
        });
    }
    fold(trial as u64 + 1);
    h
}

fn model_params_for(cfg: &EvalConfig, artifacts: &TrainedArtifacts, method: Method) -> VehicleParams {
    match method {
        Method::Baseline | Method::DenoiserOnly => cfg.true_params.scaled(cfg.mismatch_scale),
        Method::ModelOnly | Method::Full => artifacts.params,
    }
}

fn denoiser_for(artifacts: &TrainedArtifacts, method: Method) -> Denoiser {
    match method {
        Method::Baseline | Method::ModelOnly => Denoiser::identity(),
        Method::DenoiserOnly | Method::Full => artifacts.denoiser.clone(),
    }
}

fn run_trial(
    cfg: &EvalConfig,
    artifacts: &TrainedArtifacts,
    scenario: &Scenario,
    trial: usize,
) -> Result<TrialOutcome, SimError> {
    let seed = trial_seed(cfg.base_seed, scenario, trial);
    let mut setup = cfg.episode.clone();
    setup.initial_euler = [scenario.initial_roll_deg.to_radians(), 0.0, 0.0];
    setup.seed = seed;
    setup.plant.wind = scenario.wind.clone();

    let model_params = model_params_for(cfg, artifacts, scenario.method);
    let denoiser = denoiser_for(artifacts, scenario.method);
    let mut loop_ = build_closed_loop(&setup, &cfg.true_params, &model_params, denoiser)?;
    let log = loop_.run(setup.duration)?;

    let err = error_curve_deg(&log, &setup.target_euler);
    let (sse, settling, rmse) = curve_metrics(
        &err,
        &log.t,
        cfg.steady_window_s,
        cfg.settle_band_deg,
    );
    let mut solves = log.solve_ms.clone();
    Ok(TrialOutcome {
        seed,
        diverged: log.diverged,
        settling_time_s: if log.diverged { None } else { settling },
        sse_deg: sse,
        rmse_deg: rmse,
        imu_rmse_raw: log.imu_rmse_raw(),
        imu_rmse_corrected: log.imu_rmse_corrected(),
        median_solve_ms: median(&mut solves),
    })
}

/// Run all trials of one scenario cell (in parallel) and summarize.
pub fn run_scenario(
    cfg: &EvalConfig,
    artifacts: &TrainedArtifacts,
    scenario: &Scenario,
) -> Result<ScenarioSummary, SimError> {
    let trials: Result<Vec<TrialOutcome>, SimError> = (0..cfg.trials)
        .into_par_iter()
        .map(|k| run_trial(cfg, artifacts, scenario, k))
        .collect();
    let trials = trials?;

    let ok: Vec<&TrialOutcome> = trials.iter().filter(|t| !t.diverged).collect();
    let settled: Vec<f64> = ok.iter().filter_map(|t| t.settling_time_s).collect();
    let sse: Vec<f64> = ok.iter().map(|t| t.sse_deg).collect();
    let rmse: Vec<f64> = ok.iter().map(|t| t.rmse_deg).collect();
    let (settling_mean_s, settling_std_s) = mean_std(&settled);
    let (sse_mean_deg, sse_std_deg) = mean_std(&sse);
    let (rmse_mean_deg, rmse_std_deg) = mean_std(&rmse);
    let (imu_rmse_raw_mean, _) = mean_std(&ok.iter().map(|t| t.imu_rmse_raw).collect::<Vec<_>>());
    let (imu_rmse_corrected_mean, _) =
        mean_std(&ok.iter().map(|t| t.imu_rmse_corrected).collect::<Vec<_>>());
    let mut all_solves: Vec<f64> = trials.iter().map(|t| t.median_solve_ms).collect();

    Ok(ScenarioSummary {
        scenario: scenario.clone(),
        diverged_trials: trials.len() - ok.len(),
        settled_trials: settled.len(),
        settling_mean_s,
        settling_std_s,
        sse_mean_deg,
        sse_std_deg,
        sse_median_deg: median(&mut sse.clone().to_vec()),
        rmse_mean_deg,
        rmse_std_deg,
        imu_rmse_raw_mean,
        imu_rmse_corrected_mean,
        median_solve_ms: median(&mut all_solves),
        trials,
    })
}

/// The initial-condition study: every method crossed with every starting
/// tilt, no wind.
pub fn run_grid(
    cfg: &EvalConfig,
    artifacts: &TrainedArtifacts,
    angles_deg: &[f64],
) -> Result<Vec<ScenarioSummary>, SimError> {
    let mut out = Vec::with_capacity(Method::ALL.len() * angles_deg.len());
    for method in Method::ALL {
        for &angle in angles_deg {
            let scenario = Scenario {
                method,
                initial_roll_deg: angle,
                wind: Vec::new(),
            };
            out.push(run_scenario(cfg, artifacts, &scenario)?);
        }
    }
    Ok(out)
}

/// A single gust of the given kind hitting a hovering vehicle one second
/// in. Step gusts hold until the end of the episode.
pub fn gust(kind: WindKind, speed: f64, episode_duration: f64) -> WindEvent {
    match kind {
        WindKind::Impulse => WindEvent::impulse(1.0, speed),
        WindKind::Step => WindEvent::step(1.0, speed, episode_duration),
    }
}

/// Wind recovery probe: all threshold trials must come back to a steady
/// error inside the recovery band.
pub fn recovers(
    cfg: &EvalConfig,
    artifacts: &TrainedArtifacts,
    method: Method,
    event: WindEvent,
) -> Result<bool, SimError> {
    let scenario = Scenario {
        method,
        initial_roll_deg: 0.0,
        wind: vec![event],
    };
    let trials: Result<Vec<TrialOutcome>, SimError> = (0..cfg.threshold_trials)
        .into_par_iter()
        .map(|k| run_trial(cfg, artifacts, &scenario, k))
        .collect();
    Ok(trials?.iter().all(|t| {
        !t.diverged && t.settling_time_s.is_some() && t.sse_deg <= cfg.recover_sse_deg
    }))
}

/// Largest value in [lo, hi] that still passes, to within `resolution`.
/// Assumes `ok(lo)`, `!ok(hi)`, and monotone failure in between.
pub fn bisect_threshold<E>(
    mut lo: f64,
    mut hi: f64,
    resolution: f64,
    mut ok: impl FnMut(f64) -> Result<bool, E>,
) -> Result<f64, E> {
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Highest gust speed (m/s) of the given kind the method recovers from,
/// found by bisection to 1 m/s.
pub fn find_failure_threshold(
    cfg: &EvalConfig,
    artifacts: &TrainedArtifacts,
    method: Method,
    kind: WindKind,
) -> Result<f64, SimError> {
    let duration = cfg.episode.duration;
    bisect_threshold(0.0, 100.0, 1.0, |speed| {
        recovers(cfg, artifacts, method, gust(kind, speed, duration))
    })
}

/// True attitude error curve of one representative trial, for plotting.
pub fn error_history(
    cfg: &EvalConfig,
    artifacts: &TrainedArtifacts,
    scenario: &Scenario,
    trial: usize,
) -> Result<Series, SimError> {
    let seed = trial_seed(cfg.base_seed, scenario, trial);
    let mut setup = cfg.episode.clone();
    setup.initial_euler = [scenario.initial_roll_deg.to_radians(), 0.0, 0.0];
    setup.seed = seed;
    setup.plant.wind = scenario.wind.clone();
    let model_params = model_params_for(cfg, artifacts, scenario.method);
    let denoiser = denoiser_for(artifacts, scenario.method);
    let mut loop_ = build_closed_loop(&setup, &cfg.true_params, &model_params, denoiser)?;
    let log = loop_.run(setup.duration)?;
    let err = error_curve_deg(&log, &setup.target_euler);
    Ok(Series {
        label: format!("{} {}deg", scenario.method, scenario.initial_roll_deg),
        points: log.t.iter().copied().zip(err).collect(),
    })
}

/// Everything the initial-condition and wind studies produce, in one
/// serializable report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridReport {
    pub config: EvalConfig,
    pub scenarios: Vec<ScenarioSummary>,
}

impl GridReport {
    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(std::io::Error::from)
    }

    pub fn load_json(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(f).map_err(std::io::Error::from)
    }
}

/// One row per trial, plain flat CSV.
pub fn write_trials_csv(path: &Path, summaries: &[ScenarioSummary]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "method,initial_roll_deg,wind,trial,seed,diverged,settling_time_s,sse_deg,rmse_deg,\
         imu_rmse_raw,imu_rmse_corrected,median_solve_ms"
    )?;
    for s in summaries {
        let wind = wind_label(&s.scenario.wind);
        for (k, t) in s.trials.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                s.scenario.method,
                s.scenario.initial_roll_deg,
                wind,
                k,
                t.seed,
                t.diverged,
                t.settling_time_s
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "never".into()),
                t.sse_deg,
                t.rmse_deg,
                t.imu_rmse_raw,
                t.imu_rmse_corrected,
                t.median_solve_ms
            )?;
        }
    }
    f.flush()
}

/// One row per scenario cell with the aggregate statistics.
pub fn write_summary_csv(path: &Path, summaries: &[ScenarioSummary]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "method,initial_roll_deg,wind,trials,diverged,settled,settling_mean_s,settling_std_s,\
         sse_mean_deg,sse_std_deg,sse_median_deg,rmse_mean_deg,rmse_std_deg,\
         imu_rmse_raw_mean,imu_rmse_corrected_mean,median_solve_ms"
    )?;
    for s in summaries {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.scenario.method,
            s.scenario.initial_roll_deg,
            wind_label(&s.scenario.wind),
            s.trials.len(),
            s.diverged_trials,
            s.settled_trials,
            s.settling_mean_s,
            s.settling_std_s,
            s.sse_mean_deg,
            s.sse_std_deg,
            s.sse_median_deg,
            s.rmse_mean_deg,
            s.rmse_std_deg,
            s.imu_rmse_raw_mean,
            s.imu_rmse_corrected_mean,
            s.median_solve_ms
        )?;
    }
    f.flush()
}

fn wind_label(wind: &[WindEvent]) -> String {
    if wind.is_empty() {
        return "none".into();
    }
    wind.iter()
        .map(|w| {
            let kind = match w.kind {
                WindKind::Impulse => "impulse",
                WindKind::Step => "step",
            };
            format!("{kind}@{}m/s", w.speed)
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// A labelled polyline for the SVG plots.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line plot of the given series. Output is deterministic: fixed canvas,
/// fixed palette, coordinates rounded to millipixels.
pub fn write_line_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> std::io::Result<()> {
    let (x0, x1) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (SVG_W - MARGIN_L - MARGIN_R);
    let py = |y: f64| SVG_H - MARGIN_B - (y - y0) / (y1 - y0) * (SVG_H - MARGIN_T - MARGIN_B);

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    )?;
    writeln!(
        f,
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>"
    )?;
    writeln!(
        f,
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        title
    )?;
    // Axes.
    writeln!(
        f,
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        SVG_H - MARGIN_B,
        SVG_W - MARGIN_R,
        SVG_H - MARGIN_B
    )?;
    writeln!(
        f,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>",
        SVG_H - MARGIN_B
    )?;
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(
            f,
            "<text x=\"{:.3}\" y=\"{:.1}\" text-anchor=\"middle\">{:.2}</text>",
            px(fx),
            SVG_H - MARGIN_B + 16.0,
            fx
        )?;
        writeln!(
            f,
            "<text x=\"{:.1}\" y=\"{:.3}\" text-anchor=\"end\">{:.2}</text>",
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fy
        )?;
    }
    writeln!(
        f,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        SVG_H - 8.0,
        x_label
    )?;
    writeln!(
        f,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0,
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0,
        y_label
    )?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.3},{:.3}", px(p.0), py(p.1)))
            .collect();
        writeln!(
            f,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            color,
            pts.join(" ")
        )?;
        writeln!(
            f,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>",
            SVG_W - MARGIN_R - 170.0,
            MARGIN_T + 14.0 * (i as f64 + 1.0),
            color,
            s.label
        )?;
    }
    writeln!(f, "</svg>")?;
    f.flush()
}

/// Bar chart with one bar per label; used for threshold and SSE
/// comparisons.
pub fn write_bar_svg(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> std::io::Result<()> {
    let (_, y1) = axis_range(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let y0 = 0.0;
    let py = |y: f64| SVG_H - MARGIN_B - (y - y0) / (y1 - y0) * (SVG_H - MARGIN_T - MARGIN_B);
    let span = SVG_W - MARGIN_L - MARGIN_R;
    let slot = span / bars.len().max(1) as f64;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    )?;
    writeln!(
        f,
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>"
    )?;
    writeln!(
        f,
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        title
    )?;
    writeln!(
        f,
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        SVG_H - MARGIN_B,
        SVG_W - MARGIN_R,
        SVG_H - MARGIN_B
    )?;
    writeln!(
        f,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0,
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0,
        y_label
    )?;
    for (i, (label, value)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN_L + slot * i as f64 + 0.15 * slot;
        let w = 0.7 * slot;
        let top = py(*value);
        writeln!(
            f,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
            x,
            top,
            w,
            (SVG_H - MARGIN_B - top).max(0.0),
            color
        )?;
        writeln!(
            f,
            "<text x=\"{:.3}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x + w / 2.0,
            SVG_H - MARGIN_B + 16.0,
            label
        )?;
        writeln!(
            f,
            "<text x=\"{:.3}\" y=\"{:.3}\" text-anchor=\"middle\">{:.1}</text>",
            x + w / 2.0,
            top - 5.0,
            value
        )?;
    }
    writeln!(f, "</svg>")?;
    f.flush()
}

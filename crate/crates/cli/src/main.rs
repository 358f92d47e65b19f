//! Command line front end for the attitude control lab.
//!
//! The workflow is `train`, then any of `evaluate`, `sweep`, `threshold`,
//! or `plot` against the artifacts in the output directory. All knobs
//! live in one TOML file (see `--config`); an absent file means stock
//! defaults, and the file that actually ran is echoed into the output
//! directory for the record.
//!
//! Exit codes: 0 on success, 1 when a run fails (missing checkpoint,
//! diverged simulation, unwritable output), 2 for bad invocations
//! (unknown flags, unparsable or invalid configuration).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmpc_core::config::{AppConfig, ConfigError};
use dmpc_core::harness::{
    error_history, find_failure_threshold, gust, run_grid, run_scenario, write_bar_svg,
    write_line_svg, write_summary_csv, write_trials_csv, GridReport, Method, Scenario,
    ScenarioSummary, TrainedArtifacts,
};
use dmpc_core::sensors::WindKind;
use dmpc_core::sim::SimError;
use dmpc_core::trainer::{run_training, write_history_csv, write_validation_csv, Checkpoint};

#[derive(Parser)]
#[command(
    name = "dmpc",
    version,
    about = "Quadrotor attitude control lab: a learned IMU denoiser and vehicle \
             parameters trained through a differentiable MPC, plus the studies \
             that measure what they buy."
)]
struct Cli {
    /// TOML configuration file; stock defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Where to read and write artifacts; overrides the configured
    /// output directory.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Overrides both the training episode base seed and the evaluation
    /// base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and the physical parameters end to end.
    Train,
    /// Initial-condition study: every method crossed with every tilt.
    Evaluate,
    /// Wind study: impulse and step gusts at the configured probe speed.
    Sweep,
    /// Bisect the gust speed at which each method stops recovering.
    Threshold,
    /// Render SVG plots from the saved reports and checkpoint.
    Plot,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("simulation failed")]
    Sim(#[from] SimError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_ctx<'a>(context: &'a str) -> impl Fn(std::io::Error) -> CliError + 'a {
    move |source| CliError::Io {
        context: context.to_string(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (cfg, out) = load_config(cli)?;
    match cli.command {
        Command::Train => train(&cfg, &out),
        Command::Evaluate => evaluate(&cfg, &out),
        Command::Sweep => sweep(&cfg, &out),
        Command::Threshold => threshold(&cfg, &out),
        Command::Plot => plot(&cfg, &out),
    }
}

fn load_config(cli: &Cli) -> Result<(AppConfig, PathBuf), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.training.episode.seed = seed;
        cfg.evaluation.base_seed = seed;
    }
    let out = match &cli.output_dir {
        Some(dir) => dir.clone(),
        None => cfg.effective_output_dir(),
    };
    std::fs::create_dir_all(&out)
        .map_err(io_ctx(&format!("could not create {}", out.display())))?;
    Ok((cfg, out))
}

fn load_artifacts(out: &Path) -> Result<TrainedArtifacts, CliError> {
    let path = out.join("checkpoint.bin");
    let ckpt = Checkpoint::load_binary(&path).map_err(io_ctx(&format!(
        "no checkpoint at {} (run `dmpc train` first)",
        path.display()
    )))?;
    Ok(TrainedArtifacts::from_checkpoint(&ckpt))
}

fn train(cfg: &AppConfig, out: &Path) -> Result<(), CliError> {
    std::fs::write(out.join("config.toml"), cfg.echo_toml()?)
        .map_err(io_ctx("could not write config echo"))?;
    let outcome = run_training(&cfg.training)?;
    outcome
        .fin
        .save_binary(&out.join("checkpoint.bin"))
        .map_err(io_ctx("could not write checkpoint"))?;
    outcome
        .best
        .save_binary(&out.join("checkpoint_best.bin"))
        .map_err(io_ctx("could not write best checkpoint"))?;
    write_history_csv(&out.join("training_history.csv"), &outcome.history)
        .map_err(io_ctx("could not write training history"))?;
    write_validation_csv(&out.join("validation.csv"), &outcome.validations)
        .map_err(io_ctx("could not write validation log"))?;

    let p = outcome.fin.vehicle_params();
    let truth = &cfg.training.true_params;
    println!(
        "trained {} steps; artifacts in {}",
        cfg.training.steps,
        out.display()
    );
    println!(
        "final mass {:.5} kg ({:+.2}% of true), inertia [{:.6}, {:.6}, {:.6}] kg m^2 \
         ({:+.2}%, {:+.2}%, {:+.2}%)",
        p.mass,
        100.0 * (p.mass / truth.mass - 1.0),
        p.inertia[0],
        p.inertia[1],
        p.inertia[2],
        100.0 * (p.inertia[0] / truth.inertia[0] - 1.0),
        100.0 * (p.inertia[1] / truth.inertia[1] - 1.0),
        100.0 * (p.inertia[2] / truth.inertia[2] - 1.0),
    );
    if let Some(v) = outcome.validations.last() {
        println!(
            "held-out IMU rmse: raw {:.6} -> corrected {:.6} rad/s",
            v.imu_rmse_raw, v.imu_rmse_corrected
        );
    }
    Ok(())
}

fn print_summaries(summaries: &[ScenarioSummary]) {
    for s in summaries {
        let wind = if s.scenario.wind.is_empty() {
            "calm".to_string()
        } else {
            let w = &s.scenario.wind[0];
            format!("{:?} {} m/s", w.kind, w.speed)
        };
        let settle = if s.settled_trials > 0 {
            format!("{:5.2} s", s.settling_mean_s)
        } else {
            "never".to_string()
        };
        println!(
            "{:<13} {:>4.0} deg  {:<14} settle {}  sse {:6.3} deg  solve {:5.2} ms  \
             diverged {}/{}",
            s.scenario.method.label(),
            s.scenario.initial_roll_deg,
            wind,
            settle,
            s.sse_median_deg,
            s.median_solve_ms,
            s.diverged_trials,
            s.trials.len(),
        );
    }
}

fn evaluate(cfg: &AppConfig, out: &Path) -> Result<(), CliError> {
    let artifacts = load_artifacts(out)?;
    let scenarios = run_grid(&cfg.evaluation, &artifacts, &cfg.grid_angles_deg)?;
    let report = GridReport {
        config: cfg.evaluation.clone(),
        scenarios,
    };
    report
        .save_json(&out.join("grid_report.json"))
        .map_err(io_ctx("could not write grid report"))?;
    write_trials_csv(&out.join("grid_trials.csv"), &report.scenarios)
        .map_err(io_ctx("could not write per-trial table"))?;
    write_summary_csv(&out.join("grid_summary.csv"), &report.scenarios)
        .map_err(io_ctx("could not write summary table"))?;
    print_summaries(&report.scenarios);
    Ok(())
}

fn sweep(cfg: &AppConfig, out: &Path) -> Result<(), CliError> {
    let artifacts = load_artifacts(out)?;
    let duration = cfg.evaluation.episode.duration;
    let mut scenarios = Vec::new();
    for method in Method::ALL {
        for kind in [WindKind::Impulse, WindKind::Step] {
            let scenario = Scenario {
                method,
                initial_roll_deg: 0.0,
                wind: vec![gust(kind, cfg.wind_probe_speed, duration)],
            };
            scenarios.push(run_scenario(&cfg.evaluation, &artifacts, &scenario)?);
        }
    }
    let report = GridReport {
        config: cfg.evaluation.clone(),
        scenarios,
    };
    report
        .save_json(&out.join("wind_report.json"))
        .map_err(io_ctx("could not write wind report"))?;
    write_trials_csv(&out.join("wind_trials.csv"), &report.scenarios)
        .map_err(io_ctx("could not write per-trial table"))?;
    write_summary_csv(&out.join("wind_summary.csv"), &report.scenarios)
        .map_err(io_ctx("could not write summary table"))?;
    print_summaries(&report.scenarios);
    Ok(())
}

fn threshold(cfg: &AppConfig, out: &Path) -> Result<(), CliError> {
    let artifacts = load_artifacts(out)?;
    let mut entries = Vec::new();
    for method in Method::ALL {
        for (kind, label) in [(WindKind::Impulse, "impulse"), (WindKind::Step, "step")] {
            let speed = find_failure_threshold(&cfg.evaluation, &artifacts, method, kind)?;
            println!("{:<13} {:<7} fails above {:3.0} m/s", method.label(), label, speed);
            entries.push(serde_json::json!({
                "method": method.label(),
                "kind": label,
                "fails_above_m_per_s": speed,
            }));
        }
    }
    let text = serde_json::to_string_pretty(&entries).expect("thresholds serialize");
    std::fs::write(out.join("thresholds.json"), text)
        .map_err(io_ctx("could not write thresholds"))?;
    Ok(())
}

fn plot(cfg: &AppConfig, out: &Path) -> Result<(), CliError> {
    // Bar charts come straight from the saved reports when they exist.
    let grid_path = out.join("grid_report.json");
    if grid_path.exists() {
        let report = GridReport::load_json(&grid_path)
            .map_err(io_ctx("could not read grid report"))?;
        let angle = report
            .scenarios
            .iter()
            .map(|s| s.scenario.initial_roll_deg)
            .fold(0.0, f64::max);
        let cell = |m: Method| {
            report
                .scenarios
                .iter()
                .find(|s| s.scenario.method == m && s.scenario.initial_roll_deg == angle)
        };
        let sse: Vec<(String, f64)> = Method::ALL
            .iter()
            .filter_map(|&m| cell(m).map(|s| (m.label().to_string(), s.sse_median_deg)))
            .collect();
        let settle: Vec<(String, f64)> = Method::ALL
            .iter()
            .filter_map(|&m| {
                cell(m).and_then(|s| {
                    (s.settled_trials > 0).then(|| (m.label().to_string(), s.settling_mean_s))
                })
            })
            .collect();
        write_bar_svg(
            &out.join("grid_sse.svg"),
            &format!("Median steady-state error from {angle} deg"),
            "error (deg)",
            &sse,
        )
        .map_err(io_ctx("could not write grid_sse.svg"))?;
        println!("wrote {}", out.join("grid_sse.svg").display());
        if !settle.is_empty() {
            write_bar_svg(
                &out.join("grid_settling.svg"),
                &format!("Mean settling time from {angle} deg"),
                "time (s)",
                &settle,
            )
            .map_err(io_ctx("could not write grid_settling.svg"))?;
            println!("wrote {}", out.join("grid_settling.svg").display());
        }
    }

    // Response curves are re-simulated from the checkpoint: one
    // representative trial per method at the largest grid tilt.
    let artifacts = load_artifacts(out)?;
    let angle = cfg.grid_angles_deg.iter().copied().fold(0.0, f64::max);
    let mut curves = Vec::new();
    for method in Method::ALL {
        let scenario = Scenario {
            method,
            initial_roll_deg: angle,
            wind: Vec::new(),
        };
        curves.push(error_history(&cfg.evaluation, &artifacts, &scenario, 0)?);
    }
    write_line_svg(
        &out.join("response.svg"),
        &format!("Attitude error from a {angle} deg tilt"),
        "time (s)",
        "error (deg)",
        &curves,
    )
    .map_err(io_ctx("could not write response.svg"))?;
    println!("wrote {}", out.join("response.svg").display());

    if cfg.wind_probe_speed > 0.0 {
        let duration = cfg.evaluation.episode.duration;
        for (kind, label) in [(WindKind::Impulse, "impulse"), (WindKind::Step, "step")] {
            let mut curves = Vec::new();
            for method in [Method::Baseline, Method::Full] {
                let scenario = Scenario {
                    method,
                    initial_roll_deg: 0.0,
                    wind: vec![gust(kind, cfg.wind_probe_speed, duration)],
                };
                curves.push(error_history(&cfg.evaluation, &artifacts, &scenario, 0)?);
            }
            let path = out.join(format!("wind_{label}.svg"));
            write_line_svg(
                &path,
                &format!(
                    "Recovery from a {} m/s {label} gust",
                    cfg.wind_probe_speed
                ),
                "time (s)",
                "error (deg)",
                &curves,
            )
            .map_err(io_ctx("could not write wind plot"))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

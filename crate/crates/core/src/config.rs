//! Run configuration: one TOML file describing training, evaluation, and
//! where the artifacts go.
//!
//! Every table in the file is optional and every missing field falls back
//! to its default, so an empty file is a complete configuration. Unknown
//! keys anywhere in the tree are rejected at parse time; a typo like
//! `inercia_lr` fails loudly instead of silently training with defaults.
//! Value checks run after parsing and report the full dotted path of the
//! offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::EvalConfig;
use crate::sim::EpisodeSetup;
use crate::trainer::TrainerConfig;

/// Environment variable that overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "DMPC_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read config file")]
    Io(#[from] std::io::Error),
    #[error("could not parse config file")]
    Parse(#[from] toml::de::Error),
    #[error("could not render config")]
    Render(#[from] toml::ser::Error),
    #[error("{path}: {why}")]
    Invalid { path: String, why: String },
}

/// Top-level configuration for the whole pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Where checkpoints, reports, and plots are written. The
    /// `DMPC_OUTPUT_DIR` environment variable overrides this at runtime.
    pub output_dir: PathBuf,
    pub training: TrainerConfig,
    pub evaluation: EvalConfig,
    /// Initial tilt magnitudes for the evaluation grid, degrees. Zero is
    /// a pure hover cell and is allowed here.
    pub grid_angles_deg: Vec<f64>,
    /// Gust speed (m/s) used by the wind recovery scenarios.
    pub wind_probe_speed: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            output_dir: PathBuf::from("runs"),
            training: TrainerConfig::default(),
            evaluation: EvalConfig::default(),
            grid_angles_deg: vec![0.0, 10.0, 15.0, 20.0],
            wind_probe_speed: 20.0,
        }
    }
}

impl AppConfig {
    /// Read and validate a TOML file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parse and validate TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration as it will actually run, rendered back to TOML.
    pub fn echo_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// `output_dir`, unless the `DMPC_OUTPUT_DIR` environment variable
    /// names somewhere else.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var(OUTPUT_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Check every value the parser cannot: positivity, ranges, and
    /// cross-field consistency. Reports the first violation found.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.training;
        ensure(t.steps >= 1, "training.steps", "must be at least 1")?;
        ensure(
            !t.initial_angles_deg.is_empty(),
            "training.initial_angles_deg",
            "needs at least one angle",
        )?;
        for (i, &a) in t.initial_angles_deg.iter().enumerate() {
            ensure(
                a > 0.0 && a <= 45.0,
                &format!("training.initial_angles_deg[{i}]"),
                "must be in (0, 45] degrees",
            )?;
        }
        ensure(
            t.initial_param_scale > 0.0,
            "training.initial_param_scale",
            "must be positive",
        )?;
        nonneg(t.mlp_lr, "training.mlp_lr")?;
        nonneg(t.mass_lr, "training.mass_lr")?;
        nonneg(t.inertia_lr, "training.inertia_lr")?;
        ensure(
            t.max_log_step > 0.0,
            "training.max_log_step",
            "must be positive",
        )?;
        nonneg(t.lr_decay_steps, "training.lr_decay_steps")?;
        nonneg(t.anchor_weight, "training.anchor_weight")?;
        nonneg(t.accel_weight, "training.accel_weight")?;
        nonneg(t.correction_reg, "training.correction_reg")?;
        ensure(
            t.validation_angle_deg >= 0.0 && t.validation_angle_deg <= 45.0,
            "training.validation_angle_deg",
            "must be in [0, 45] degrees",
        )?;
        validate_params(&t.true_params, "training.true_params")?;
        validate_episode(&t.episode, "training.episode")?;

        let e = &self.evaluation;
        ensure(
            e.mismatch_scale > 0.0,
            "evaluation.mismatch_scale",
            "must be positive",
        )?;
        ensure(e.trials >= 1, "evaluation.trials", "must be at least 1")?;
        ensure(
            e.threshold_trials >= 1,
            "evaluation.threshold_trials",
            "must be at least 1",
        )?;
        ensure(
            e.settle_band_deg > 0.0,
            "evaluation.settle_band_deg",
            "must be positive",
        )?;
        ensure(
            e.steady_window_s > 0.0 && e.steady_window_s <= e.episode.duration,
            "evaluation.steady_window_s",
            "must be positive and no longer than the episode",
        )?;
        ensure(
            e.recover_sse_deg > 0.0,
            "evaluation.recover_sse_deg",
            "must be positive",
        )?;
        validate_params(&e.true_params, "evaluation.true_params")?;
        validate_episode(&e.episode, "evaluation.episode")?;

        for (i, &a) in self.grid_angles_deg.iter().enumerate() {
            ensure(
                (0.0..=45.0).contains(&a),
                &format!("grid_angles_deg[{i}]"),
                "must be in [0, 45] degrees",
            )?;
        }
        nonneg(self.wind_probe_speed, "wind_probe_speed")?;
        Ok(())
    }
}

fn ensure(cond: bool, path: &str, why: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            path: path.to_string(),
            why: why.to_string(),
        })
    }
}

fn nonneg(value: f64, path: &str) -> Result<(), ConfigError> {
    ensure(value.is_finite() && value >= 0.0, path, "must not be negative")
}

fn validate_params(
    p: &crate::dynamics::VehicleParams,
    path: &str,
) -> Result<(), ConfigError> {
    ensure(p.mass > 0.0, &format!("{path}.mass"), "must be positive")?;
    for (i, &j) in p.inertia.iter().enumerate() {
        ensure(
            j > 0.0,
            &format!("{path}.inertia[{i}]"),
            "must be positive",
        )?;
    }
    ensure(
        p.gravity > 0.0,
        &format!("{path}.gravity"),
        "must be positive",
    )
}

fn validate_episode(ep: &EpisodeSetup, path: &str) -> Result<(), ConfigError> {
    ensure(
        ep.duration > 0.0,
        &format!("{path}.duration"),
        "must be positive",
    )?;
    ensure(
        ep.plant.dt > 0.0,
        &format!("{path}.plant.dt"),
        "must be positive",
    )?;
    ensure(
        ep.imu.rate_hz > 0.0,
        &format!("{path}.imu.rate_hz"),
        "must be positive",
    )?;
    nonneg(ep.anchor_noise_std, &format!("{path}.anchor_noise_std"))?;
    for (i, w) in ep.plant.wind.iter().enumerate() {
        let wp = format!("{path}.plant.wind[{i}]");
        nonneg(w.start, &format!("{wp}.start"))?;
        nonneg(w.speed, &format!("{wp}.speed"))?;
        nonneg(w.duration, &format!("{wp}.duration"))?;
        let norm2: f64 = w.direction.iter().map(|d| d * d).sum();
        ensure(
            norm2 > 0.0,
            &format!("{wp}.direction"),
            "must not be the zero vector",
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_survive_a_toml_round_trip() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        let text = cfg.echo_toml().unwrap();
        let back = AppConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.echo_toml().unwrap(), text);
        assert_eq!(back.training.steps, cfg.training.steps);
        assert_eq!(back.grid_angles_deg, cfg.grid_angles_deg);
    }

    #[test]
    fn an_empty_file_is_a_complete_configuration() {
        let cfg = AppConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
        assert_eq!(cfg.training.steps, 2000);
        assert_eq!(cfg.evaluation.trials, 10);
    }

    #[test]
    fn partial_files_inherit_defaults_for_the_rest() {
        let text = "wind_probe_speed = 12.0\n\n[training]\nsteps = 50\n";
        let cfg = AppConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.wind_probe_speed, 12.0);
        assert_eq!(cfg.training.steps, 50);
        assert_eq!(cfg.training.mlp_seed, TrainerConfig::default().mlp_seed);
        assert_eq!(cfg.evaluation.trials, 10);
    }

    #[test]
    fn unknown_keys_are_rejected_even_deep_in_the_tree() {
        let text = "[training.episode.plant]\nbogus = 1\n";
        let err = AppConfig::from_toml_str(text).unwrap_err();
        let msg = format!("{err:?}");
        assert!(msg.contains("bogus"), "error should name the key: {msg}");

        let err = AppConfig::from_toml_str("output_dri = \"x\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn invalid_values_report_the_full_field_path() {
        let text = "[evaluation]\ntrials = 0\n";
        let err = AppConfig::from_toml_str(text).unwrap_err();
        assert_eq!(err.to_string(), "evaluation.trials: must be at least 1");

        let text = "[training.true_params]\ninertia = [0.01, -0.01, 0.02]\n";
        let err = AppConfig::from_toml_str(text).unwrap_err();
        assert_eq!(
            err.to_string(),
            "training.true_params.inertia[1]: must be positive"
        );

        let text = "[[evaluation.episode.plant.wind]]\nkind = \"step\"\nstart = 1.0\nspeed = 5.0\ndirection = [0.0, 0.0, 0.0]\n";
        let err = AppConfig::from_toml_str(text).unwrap_err();
        assert_eq!(
            err.to_string(),
            "evaluation.episode.plant.wind[0].direction: must not be the zero vector"
        );
    }

    #[test]
    fn a_window_longer_than_the_episode_is_rejected() {
        let text = "[evaluation]\nsteady_window_s = 99.0\n";
        let err = AppConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().starts_with("evaluation.steady_window_s"));
    }

    #[test]
    fn environment_override_wins_for_the_output_dir() {
        let cfg = AppConfig::default();
        // Set and remove within one test; a second test touching the same
        // variable could race under the parallel runner.
        std::env::set_var(OUTPUT_DIR_ENV, "/tmp/elsewhere");
        let dir = cfg.effective_output_dir();
        std::env::remove_var(OUTPUT_DIR_ENV);
        assert_eq!(dir, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(cfg.effective_output_dir(), PathBuf::from("runs"));
    }

    #[test]
    fn wind_events_round_trip_with_defaulted_fields() {
        let text = "[[evaluation.episode.plant.wind]]\nkind = \"impulse\"\nstart = 1.0\nspeed = 8.0\n";
        let cfg = AppConfig::from_toml_str(text).unwrap();
        let w = &cfg.evaluation.episode.plant.wind[0];
        assert_eq!(w.duration, 0.0);
        assert_eq!(w.direction, [1.0, 0.0, 0.0]);
    }
}

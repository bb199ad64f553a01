//! Run configuration: every tunable of the pipeline in one serializable
//! struct. The resolved configuration is written next to each run's outputs
//! so any result can be reproduced from its own artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{DepthNormalization, DepthSource};

/// Where per-edge correspondences come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    /// The recurrent update network (seeded, untrained by default).
    Network,
    /// Renderer ground-truth correspondences; exercises the geometric
    /// backend with no network weights touched.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Frame-graph edge radius: keyframes within this index distance in the
    /// live window are connected both ways.
    pub radius: usize,
    /// Live window capacity; older keyframes are frozen into the trajectory.
    pub window: usize,
    /// Keyframe admission threshold on mean induced flow (feature pixels).
    pub tau_kf: f64,
    /// Update iterations unrolled after each admitted keyframe.
    pub iterations: usize,
    /// Damped Gauss-Newton steps inside each update iteration.
    pub dba_inner: usize,
    /// Motion feature channels produced by the temporal encoder.
    pub d_motion: usize,
    /// Per-keyframe motion state channels.
    pub d_state: usize,
    /// Channels entering spatial activation.
    pub d_input: usize,
    /// GRU hidden state channels.
    pub d_hidden: usize,
    /// Matching feature channels.
    pub d_feature: usize,
    /// Context feature channels.
    pub d_context: usize,
    /// Correlation pyramid levels.
    pub corr_levels: usize,
    /// Correlation lookup radius.
    pub corr_radius: usize,
    pub seed: u64,
    pub flow: FlowSource,
    pub depth: DepthSource,
    pub normalization: DepthNormalization,
    /// Channel-mixing strength of spatial activation on context features.
    pub alpha_context: f64,
    /// Same for matching-derived features.
    pub alpha_feature: f64,
    /// Upper bound on a single SAM allocation, in bytes.
    pub memory_budget: usize,
    /// Process every `stride`-th input frame.
    pub stride: usize,
    /// Timestamp association tolerance (seconds) for depth files and eval.
    pub max_dt: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            radius: 3,
            window: 10,
            tau_kf: 2.4,
            iterations: 15,
            dba_inner: 2,
            d_motion: 128,
            d_state: 64,
            d_input: 64,
            d_hidden: 128,
            d_feature: 128,
            d_context: 128,
            corr_levels: 4,
            corr_radius: 3,
            seed: 0,
            flow: FlowSource::Network,
            depth: DepthSource::Ba,
            normalization: DepthNormalization::Standardized,
            alpha_context: 0.0,
            alpha_feature: 0.0,
            memory_budget: 256 * 1024 * 1024,
            stride: 1,
            max_dt: 0.02,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::BadDimensions("window capacity must be at least 2".into()));
        }
        if self.radius == 0 || self.iterations == 0 || self.dba_inner == 0 || self.stride == 0 {
            return Err(Error::BadDimensions(
                "radius, iterations, dba_inner, and stride must be positive".into(),
            ));
        }
        if self.corr_levels == 0 {
            return Err(Error::BadDimensions("need at least one correlation level".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let config: Config = toml::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config always serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Apply `STVO_*` environment overrides (e.g. `STVO_SEED=7`,
    /// `STVO_FLOW=oracle`). Unknown variables under the prefix are an error;
    /// silent typos would undermine reproducibility.
    pub fn apply_env(&mut self) -> Result<()> {
        let vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with("STVO_"))
            .collect();
        self.apply_overrides(&vars)
    }

    fn apply_overrides(&mut self, vars: &[(String, String)]) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::MalformedFile {
                    path: key.into(),
                    reason: format!("cannot parse override value {value:?}"),
                }
            })
        }
        for (key, value) in vars {
            match key.as_str() {
                "STVO_RADIUS" => self.radius = parse(key, value)?,
                "STVO_WINDOW" => self.window = parse(key, value)?,
                "STVO_TAU_KF" => self.tau_kf = parse(key, value)?,
                "STVO_ITERATIONS" => self.iterations = parse(key, value)?,
                "STVO_DBA_INNER" => self.dba_inner = parse(key, value)?,
                "STVO_D_MOTION" => self.d_motion = parse(key, value)?,
                "STVO_D_STATE" => self.d_state = parse(key, value)?,
                "STVO_D_INPUT" => self.d_input = parse(key, value)?,
                "STVO_D_HIDDEN" => self.d_hidden = parse(key, value)?,
                "STVO_D_FEATURE" => self.d_feature = parse(key, value)?,
                "STVO_D_CONTEXT" => self.d_context = parse(key, value)?,
                "STVO_CORR_LEVELS" => self.corr_levels = parse(key, value)?,
                "STVO_CORR_RADIUS" => self.corr_radius = parse(key, value)?,
                "STVO_SEED" => self.seed = parse(key, value)?,
                "STVO_ALPHA_CONTEXT" => self.alpha_context = parse(key, value)?,
                "STVO_ALPHA_FEATURE" => self.alpha_feature = parse(key, value)?,
                "STVO_MEMORY_BUDGET" => self.memory_budget = parse(key, value)?,
                "STVO_STRIDE" => self.stride = parse(key, value)?,
                "STVO_MAX_DT" => self.max_dt = parse(key, value)?,
                "STVO_FLOW" => {
                    self.flow = match value.as_str() {
                        "network" => FlowSource::Network,
                        "oracle" => FlowSource::Oracle,
                        other => {
                            return Err(Error::MalformedFile {
                                path: key.into(),
                                reason: format!("unknown flow source {other:?}"),
                            })
                        }
                    }
                }
                "STVO_DEPTH" => {
                    self.depth = match value.as_str() {
                        "ba" => DepthSource::Ba,
                        "external" => DepthSource::External,
                        other => {
                            return Err(Error::MalformedFile {
                                path: key.into(),
                                reason: format!("unknown depth source {other:?}"),
                            })
                        }
                    }
                }
                "STVO_NORMALIZATION" => {
                    self.normalization = match value.as_str() {
                        "standardized" => DepthNormalization::Standardized,
                        "raw" => DepthNormalization::Raw,
                        other => {
                            return Err(Error::MalformedFile {
                                path: key.into(),
                                reason: format!("unknown normalization {other:?}"),
                            })
                        }
                    }
                }
                other => {
                    return Err(Error::MalformedFile {
                        path: other.into(),
                        reason: "unknown STVO_ override".into(),
                    })
                }
            }
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut config = Config::default();
        config.seed = 42;
        config.flow = FlowSource::Oracle;
        config.depth = DepthSource::External;
        config.tau_kf = 1.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        config.save(&path).unwrap();
        let loaded = Config::load(&path).unwrap();
        assert_eq!(loaded, config);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "windoww = 5\n").unwrap();
        assert!(matches!(Config::load(&path), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn partial_config_fills_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "seed = 9\nflow = \"oracle\"\n").unwrap();
        let loaded = Config::load(&path).unwrap();
        assert_eq!(loaded.seed, 9);
        assert_eq!(loaded.flow, FlowSource::Oracle);
        assert_eq!(loaded.window, Config::default().window);
    }

    #[test]
    fn env_style_overrides_apply_and_reject_typos() {
        let mut config = Config::default();
        let vars = vec![
            ("STVO_SEED".to_string(), "123".to_string()),
            ("STVO_FLOW".to_string(), "oracle".to_string()),
            ("STVO_TAU_KF".to_string(), "3.5".to_string()),
        ];
        config.apply_overrides(&vars).unwrap();
        assert_eq!(config.seed, 123);
        assert_eq!(config.flow, FlowSource::Oracle);
        assert_eq!(config.tau_kf, 3.5);

        let bad = vec![("STVO_SEEED".to_string(), "1".to_string())];
        assert!(config.apply_overrides(&bad).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut config = Config::default();
        config.stride = 0;
        assert!(config.validate().is_err());
        let mut config = Config::default();
        config.window = 1;
        assert!(config.validate().is_err());
    }
}

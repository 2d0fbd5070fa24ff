//! Twin configuration and scenario files (TOML).
//!
//! Relative paths inside a file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::topics;
use crate::device::{CommandSet, EmulatorMode};
use crate::model::OperatingState;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backing {
    #[default]
    Real,
    Emulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtMode {
    Shadow,
    #[default]
    Twin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Isolation {
    #[default]
    InProcess,
    Processes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topics {
    pub sensor_response: String,
    pub ctl_command: String,
    pub tx_command: String,
    pub ctl_response: String,
}

impl Default for Topics {
    fn default() -> Self {
        Self {
            sensor_response: topics::SENSOR_RESPONSE.into(),
            ctl_command: topics::CTL_COMMAND.into(),
            tx_command: topics::TX_COMMAND.into(),
            ctl_response: topics::CTL_RESPONSE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtConfig {
    /// Serial port the sensor driver opens.
    pub sensor_link: String,
    /// Serial port the (real or emulated) sensor opens.
    pub device_link: String,
    /// Listen address of the transmitter driver.
    pub transmitter_addr: String,
    pub backing: Backing,
    /// Recording file served by the emulator when `backing = "emulated"`.
    pub recording: Option<PathBuf>,
    pub emulator_mode: EmulatorMode,
    /// Where the control logic flushes its data log at shutdown.
    pub log_flush: Option<PathBuf>,
    pub commands: CommandSet,
    pub topics: Topics,
}

impl Default for PtConfig {
    fn default() -> Self {
        Self {
            sensor_link: "ptyB".into(),
            device_link: "ptyA".into(),
            transmitter_addr: "127.0.0.1:0".into(),
            backing: Backing::Real,
            recording: None,
            emulator_mode: EmulatorMode::Oneshot,
            log_flush: None,
            commands: CommandSet::sensor_default(),
            topics: Topics::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtConfig {
    pub mode: DtMode,
    pub twinning_rate_ms: u64,
    pub default_period_ms: i16,
    pub ingest_addr: String,
    pub uplink_addr: String,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            mode: DtMode::Twin,
            twinning_rate_ms: 100,
            default_period_ms: 50,
            ingest_addr: "127.0.0.1:0".into(),
            uplink_addr: "127.0.0.1:0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub isolation: Isolation,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub pt: PtConfig,
    pub dt: DtConfig,
    pub harness: HarnessConfig,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|error| ConfigError::Io { path: path.to_path_buf(), error })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl TwinConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = parse(path, &read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.pt.recording);
        resolve(base, &mut cfg.pt.log_flush);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = parse(Path::new("<inline>"), text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dt.twinning_rate_ms == 0 {
            return Err(ConfigError::Invalid("dt.twinning_rate_ms must be positive".into()));
        }
        if self.pt.sensor_link.is_empty() || self.pt.device_link.is_empty() {
            return Err(ConfigError::Invalid("serial link names must not be empty".into()));
        }
        if self.pt.sensor_link == self.pt.device_link {
            return Err(ConfigError::Invalid("pt.sensor_link and pt.device_link must differ".into()));
        }
        let t = &self.pt.topics;
        if [&t.sensor_response, &t.ctl_command, &t.tx_command, &t.ctl_response].iter().any(|s| s.is_empty()) {
            return Err(ConfigError::Invalid("topic names must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub at: u64,
    pub command: i16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementPoint {
    pub at: u64,
    pub value: i32,
}

/// A change applied directly to the digital model (twin runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInjection {
    pub at: u64,
    pub state: OperatingState,
}

/// Times are milliseconds of scenario time; in lockstep runs one tick is one
/// millisecond.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_ms: u64,
    pub inject: Vec<Injection>,
    pub measure: Vec<MeasurementPoint>,
    pub model: Vec<ModelInjection>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s: Self = parse(path, &read(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let s: Self = parse(Path::new("<inline>"), text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn ordered(name: &str, times: impl Iterator<Item = u64>, end: u64) -> Result<(), ConfigError> {
            let mut prev = 0;
            for t in times {
                if t < prev {
                    return Err(ConfigError::Invalid(format!("{name} times must be non-decreasing")));
                }
                if t > end {
                    return Err(ConfigError::Invalid(format!("{name} at {t} is after duration_ms {end}")));
                }
                prev = t;
            }
            Ok(())
        }
        ordered("inject", self.inject.iter().map(|i| i.at), self.duration_ms)?;
        ordered("measure", self.measure.iter().map(|m| m.at), self.duration_ms)?;
        ordered("model", self.model.iter().map(|m| m.at), self.duration_ms)?;
        Ok(())
    }

    /// Number of scripted events.
    pub fn events(&self) -> usize {
        self.inject.len() + self.measure.len() + self.model.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = TwinConfig::from_toml("[dt]\nmode = \"shadow\"\n").unwrap();
        assert_eq!(cfg.dt.mode, DtMode::Shadow);
        assert_eq!(cfg.dt.twinning_rate_ms, 100);
        assert_eq!(cfg.dt.default_period_ms, 50);
        assert_eq!(cfg.pt.sensor_link, "ptyB");
        assert_eq!(cfg.harness.isolation, Isolation::InProcess);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TwinConfig::from_toml("[pt]\nbogus = 1\n").is_err());
        assert!(TwinConfig::from_toml("[dt]\ntwinning_rate_ms = 0\n").is_err());
        assert!(TwinConfig::from_toml("[harness]\nisolation = \"processes\"\n").is_ok());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = TwinConfig::default();
        assert_eq!(TwinConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn scenario_times_are_ordered() {
        let s = Scenario::from_toml(
            "duration_ms = 1000\n[[inject]]\nat = 0\ncommand = 50\n[[inject]]\nat = 500\ncommand = 0\n[[model]]\nat = 10\nstate = \"OFF\"\n",
        )
        .unwrap();
        assert_eq!(s.events(), 3);
        assert_eq!(s.model[0].state, OperatingState::Off);
        let bad = "duration_ms = 1000\n[[inject]]\nat = 5\ncommand = 1\n[[inject]]\nat = 4\ncommand = 1\n";
        assert!(Scenario::from_toml(bad).is_err());
        assert!(Scenario::from_toml("duration_ms = 10\n[[inject]]\nat = 11\ncommand = 1\n").is_err());
        assert!(Scenario::from_toml("[[inject]]\nat = 0\ncommand = 40000\n").is_err());
    }
}

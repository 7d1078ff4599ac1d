//! JSON configuration of every subcommand. Missing fields take their
//! defaults; unknown fields are rejected so typos surface as config errors.

use std::fs;
use std::path::{Path, PathBuf};

use fglasso::backtest::RdTuning;
use fglasso::estimator::{EstimatorConfig, Method};
use fglasso::panel::{ingest_panel, ForecastPanel, ImputePolicy, IngestReport};
use fglasso::simulation::dgp::FactorErrorDgpSpec;
use fglasso::simulation::monte_carlo::{Design, FarSettings, McConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Monte Carlo config. Fields left out take the defaults of the chosen
/// design, so `{"design": {"kind": "far", "c1": 0}}` already tunes
/// RD-Factor GLASSO by validation MSFE.
pub fn load_mc(path: Option<&Path>) -> Result<McConfig, Failure> {
    let Some(path) = path else {
        return Ok(McConfig::default());
    };
    let bad = |e: &dyn std::fmt::Display| Failure::config(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let user: Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    let design: Design = match user.get("design") {
        Some(d) => serde_json::from_value(d.clone()).map_err(|e| bad(&e))?,
        None => Design::NoBreak,
    };
    let mut merged = serde_json::to_value(McConfig::for_design(design)).map_err(|e| bad(&e))?;
    merge(&mut merged, user);
    serde_json::from_value(merged).map_err(|e| bad(&e))
}

/// Overlays `top` onto `base`, recursing into objects present in both.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Panel input shared by `fit`, `tune` and `backtest`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelInput {
    pub path: PathBuf,
    pub impute: ImputePolicy,
    /// Labels of the first period of each new regime.
    pub breaks: Vec<String>,
}

impl PanelInput {
    /// Reads the panel relative to the config file's directory.
    pub fn read(&self, base: &Path) -> Result<(ForecastPanel, IngestReport), Failure> {
        if self.path.as_os_str().is_empty() {
            return Err(Failure::config("panel.path is required"));
        }
        let path = if self.path.is_absolute() {
            self.path.clone()
        } else {
            base.join(&self.path)
        };
        let file = fs::File::open(&path)
            .map_err(|e| Failure::config(format!("cannot open {}: {e}", path.display())))?;
        ingest_panel(file, self.impute)
            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }

    /// Break rows; every label must name a period after the first.
    pub fn break_rows(&self, panel: &ForecastPanel) -> Result<Vec<usize>, Failure> {
        let mut rows = self
            .breaks
            .iter()
            .map(|label| match panel.period_index(label) {
                Some(0) => Err(Failure::config(format!(
                    "break {label:?} is the first period"
                ))),
                Some(r) => Ok(r),
                None => Err(Failure::config(format!(
                    "break {label:?} is not a period of the panel"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.sort_unstable();
        rows.dedup();
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub design: Design,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: u64,
    pub factor_dgp: FactorErrorDgpSpec,
    pub far: FarSettings,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            design: Design::NoBreak,
            t: 128,
            seed: 1,
            factor_dgp: FactorErrorDgpSpec::default(),
            far: FarSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub panel: PanelInput,
    pub method: Method,
    pub estimator: EstimatorConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            panel: PanelInput::default(),
            method: Method::FactorGlasso,
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub panel: PanelInput,
    pub methods: Vec<Method>,
    pub window: usize,
    pub horizon: usize,
    pub estimator: EstimatorConfig,
    pub rd_tuning: RdTuning,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            panel: PanelInput::default(),
            methods: vec![Method::Ew, Method::Glasso, Method::FactorGlasso],
            window: 40,
            horizon: 1,
            estimator: EstimatorConfig::default(),
            rd_tuning: RdTuning::default(),
        }
    }
}

pub type TuneConfig = FitConfig;

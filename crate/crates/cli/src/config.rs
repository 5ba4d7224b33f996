//! Run configuration: an optional built-in scenario with TOML overrides.

use std::path::Path;

use ddnfl::finetune::FinetuneConfig;
use ddnfl::linalg::{self, Vector};
use ddnfl::plant::{Excitation, PlantModel, StateBox};
use ddnfl::scenario::Scenario;
use ddnfl::sdp::SolverSettings;
use ddnfl::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub t: usize,
    #[serde(default)]
    pub excitation: Excitation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSpec {
    /// 1-based state index pairs for ROA slices.
    pub dims: Vec<[usize; 2]>,
    pub boundary_points: usize,
    pub steps: usize,
    /// Initial state for closed-loop rollouts; sampled in the box when absent.
    pub x0: Option<Vec<f64>>,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self { dims: vec![[1, 3]], boundary_points: 200, steps: 500, x0: None }
    }
}

/// Fully resolved configuration; this is what manifests record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub plant: PlantSpec,
    pub state_box: BoxSpec,
    pub data: DataSpec,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub report: ReportSpec,
}

fn scenario_value(s: &Scenario) -> Result<toml::Table, CliError> {
    let cfg = RunConfig {
        scenario: Some(s.name.clone()),
        seed: 0,
        plant: PlantSpec {
            a: linalg::to_rows(s.plant.a()),
            b: linalg::to_rows(s.plant.b()),
            dt: s.plant.dt(),
        },
        state_box: BoxSpec {
            lower: s.state_box.lower.iter().copied().collect(),
            upper: s.state_box.upper.iter().copied().collect(),
        },
        data: DataSpec { t: s.t, excitation: s.excitation },
        controller: ControllerSpec { layer_sizes: s.layer_sizes.clone() },
        synthesis: s.synthesis.clone(),
        finetune: s.finetune.clone(),
        solver: SolverSettings::default(),
        report: ReportSpec::default(),
    };
    toml::Table::try_from(&cfg).map_err(|e| CliError::Config(format!("cannot encode scenario: {e}")))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parse TOML text: if it names a `scenario`, the preset supplies every
    /// field the text leaves out.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let mut table = match user.get("scenario") {
            Some(toml::Value::String(name)) => scenario_value(&Scenario::by_name(name)?)?,
            Some(_) => return Err(CliError::Config("scenario must be a string".into())),
            None => toml::Table::new(),
        };
        merge(&mut table, user);
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a TOML config, or replay the `config` recorded in a JSON manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            let cfg: RunConfig =
                serde_json::from_value(inner).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }

    /// Preset without overrides.
    pub fn from_scenario(name: &str) -> Result<Self, CliError> {
        Self::from_toml_str(&format!("scenario = {name:?}"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.plant_model()?;
        self.state_box()?;
        self.synthesis.validate()?;
        self.finetune.validate()?;
        if !(self.solver.tol > 0.0) {
            return Err(CliError::Config("solver.tol must be positive".into()));
        }
        Ok(())
    }

    /// Apply `--seed`: the data, initialization and demonstration seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synthesis.seed = seed;
        self
    }

    pub fn plant_model(&self) -> Result<PlantModel, CliError> {
        let n = self.plant.a.len();
        let a = linalg::from_rows(&self.plant.a, n).ok_or_else(|| CliError::Config("plant.a must be square".into()))?;
        let m = self.plant.b.first().map_or(0, Vec::len);
        let b = linalg::from_rows(&self.plant.b, m).ok_or_else(|| CliError::Config("plant.b has ragged rows".into()))?;
        Ok(PlantModel::new(a, b, self.plant.dt)?)
    }

    pub fn state_box(&self) -> Result<StateBox, CliError> {
        Ok(StateBox::new(
            Vector::from_column_slice(&self.state_box.lower),
            Vector::from_column_slice(&self.state_box.upper),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_overrides_merge_deeply() {
        let cfg = RunConfig::from_toml_str(
            "scenario = \"vehicle-lateral\"\nseed = 3\n[synthesis]\neta1 = 1000.0\n[data]\nt = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.synthesis.eta1, 1000.0);
        assert_eq!(cfg.synthesis.rho, 1000.0);
        assert_eq!(cfg.data.t, 20);
        assert_eq!(cfg.controller.layer_sizes, vec![4, 10, 10, 1]);
        assert_eq!(cfg.plant_model().unwrap(), PlantModel::vehicle_lateral());
    }

    #[test]
    fn explicit_plant_without_scenario() {
        let cfg = RunConfig::from_toml_str(
            "[plant]\na = [[0.5]]\nb = [[1.0]]\n[state_box]\nlower = [-1.0]\nupper = [1.0]\n[data]\nt = 10\n[controller]\nlayer_sizes = [1, 3, 1]\n",
        )
        .unwrap();
        assert_eq!(cfg.plant_model().unwrap(), PlantModel::scalar(0.5, 1.0));
        assert_eq!(cfg.synthesis, SynthesisConfig::default());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "scenario = \"mars-rover\"",
            "scenario = 4",
            "[plant]\na = [[1.0, 2.0]]\nb = [[1.0]]",
            "scenario = \"scalar-demo\"\n[synthesis]\nrho = -1.0",
            "scenario = \"scalar-demo\"\n[state_box]\nlower = [0.5]",
            "not toml at all [",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn json_round_trip_replays() {
        let cfg = RunConfig::from_scenario("scalar-demo").unwrap().with_seed(7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, serde_json::json!({ "config": cfg }).to_string()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }
}

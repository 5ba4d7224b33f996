//! Built-in experiment presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::ExpertSpec;
use crate::finetune::FinetuneConfig;
use crate::plant::{Excitation, PlantModel, StateBox};
use crate::synthesis::SynthesisConfig;

pub const VEHICLE_LATERAL: &str = "vehicle-lateral";
pub const SCALAR_DEMO: &str = "scalar-demo";

/// Everything needed to run collect → train → verify → finetune.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantModel,
    pub state_box: StateBox,
    pub layer_sizes: Vec<usize>,
    pub t: usize,
    pub excitation: Excitation,
    pub synthesis: SynthesisConfig,
    pub finetune: FinetuneConfig,
}

impl Scenario {
    pub fn names() -> &'static [&'static str] {
        &[VEHICLE_LATERAL, SCALAR_DEMO]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            VEHICLE_LATERAL => Ok(Self::vehicle_lateral()),
            SCALAR_DEMO => Ok(Self::scalar_demo()),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario {other:?}; known: {}",
                Self::names().join(", ")
            ))),
        }
    }

    /// Lateral vehicle dynamics, two hidden layers of 10, LQR expert with
    /// `Q = diag(30, 1, 30, 1)`, `R = 1`.
    pub fn vehicle_lateral() -> Self {
        Self {
            name: VEHICLE_LATERAL.into(),
            plant: PlantModel::vehicle_lateral(),
            state_box: StateBox::symmetric(&[2.0, 5.0, 1.0, 5.0]).expect("valid box"),
            layer_sizes: vec![4, 10, 10, 1],
            t: 50,
            excitation: Excitation::default(),
            synthesis: SynthesisConfig {
                expert: ExpertSpec::Lqr { q_diag: vec![30.0, 1.0, 30.0, 1.0], r_diag: vec![1.0] },
                ..SynthesisConfig::default()
            },
            finetune: FinetuneConfig::default(),
        }
    }

    /// Open-loop unstable scalar plant `x⁺ = 1.2 x + u`, one hidden layer of 4.
    pub fn scalar_demo() -> Self {
        Self {
            name: SCALAR_DEMO.into(),
            plant: PlantModel::scalar(1.2, 1.0),
            state_box: StateBox::symmetric(&[1.0]).expect("valid box"),
            layer_sizes: vec![1, 4, 1],
            t: 10,
            excitation: Excitation::default(),
            synthesis: SynthesisConfig {
                expert: ExpertSpec::Gain { k: vec![vec![0.9]] },
                demo_count: 200,
                ..SynthesisConfig::default()
            },
            finetune: FinetuneConfig::default(),
        }
    }
}

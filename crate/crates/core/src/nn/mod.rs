//! Dense networks with exact backpropagation, Adam, and JSON model files.

mod adam;
mod array;
mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use array::DenseArray;
pub use mlp::{Activation, ForwardCache, Gradients, Mlp, OutputTransform};

use crate::Result;

/// What a stored network is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Policy,
    Barrier,
    Lyapunov,
}

/// A network file: the network schema plus a `role` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub role: ModelRole,
    /// Action bounds, present for policies only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_bounds: Option<Vec<(f64, f64)>>,
    #[serde(flatten)]
    pub network: Mlp,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

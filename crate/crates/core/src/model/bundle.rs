use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blnn::{Blnn, BlnnConfig};
use crate::convexnet::{IcnnDoc, IcnnParams};
use crate::error::Result;
use crate::lft::SolverConfig;

/// A trained network with the solver settings it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: BlnnConfig,
    pub core: IcnnDoc,
    pub solver_defaults: SolverConfig,
}

impl ModelBundle {
    pub fn new(model: &Blnn, solver: &SolverConfig) -> Self {
        ModelBundle {
            config: model.config.clone(),
            core: IcnnDoc::from(&model.core),
            solver_defaults: *solver,
        }
    }

    pub fn model(&self) -> Result<Blnn> {
        let core = IcnnParams::try_from(&self.core)?;
        self.solver_defaults.validate()?;
        Blnn::new(core, self.config.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bundle: ModelBundle = serde_json::from_str(s)?;
        bundle.model()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

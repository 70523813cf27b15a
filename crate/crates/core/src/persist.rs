//! Versioned JSON model files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mart::Ensemble;
use crate::panel::Covariate;
use crate::spatial::SpatialField;

pub const MODEL_FORMAT: &str = "spatboost-model";
pub const MODEL_VERSION: u32 = 1;

/// Everything needed to predict and to label predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub covariates: Vec<Covariate>,
    pub tracts: Vec<String>,
    pub slot_labels: Vec<i64>,
    pub ensemble: Ensemble,
    /// Absent when no slot was spatially smoothed.
    pub field: Option<SpatialField>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    model: &'a SavedModel,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

#[derive(Deserialize)]
struct FileIn {
    #[serde(flatten)]
    model: SavedModel,
}

impl SavedModel {
    fn check(&self) -> Result<()> {
        let p = self.covariates.len();
        if self.ensemble.n_features != p {
            return Err(Error::Format(format!(
                "ensemble expects {} covariates but {p} are listed",
                self.ensemble.n_features
            )));
        }
        if let Some(t) = self.ensemble.trees.iter().position(|t| t.n_features() != p) {
            return Err(Error::Format(format!("tree {t} does not match the covariate count")));
        }
        if let Some(f) = &self.field {
            if f.n_slots() != self.slot_labels.len() || f.n_tracts() != self.tracts.len() {
                return Err(Error::Format(
                    "spatial field does not match the slot and tract lists".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn to_json(model: &SavedModel) -> Result<String> {
    model.check()?;
    let mut s = serde_json::to_string_pretty(&FileOut {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        model,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<SavedModel> {
    let header: Header =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("unreadable model file: {e}")))?;
    if header.format.as_deref() != Some(MODEL_FORMAT) {
        return Err(Error::Format(format!(
            "not a {MODEL_FORMAT} file (format = {:?})",
            header.format
        )));
    }
    match header.version {
        Some(MODEL_VERSION) => {}
        Some(found) => {
            return Err(Error::VersionMismatch {
                found,
                expected: MODEL_VERSION,
            })
        }
        None => return Err(Error::Format("model file has no version".into())),
    }
    let file: FileIn = serde_json::from_str(text).map_err(|e| Error::Format(format!("invalid model file: {e}")))?;
    file.model.check()?;
    Ok(file.model)
}

/// Writes via a sibling temporary file and a rename, so readers never see a partial model.
pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    let text = to_json(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    from_json(&fs::read_to_string(path)?)
}

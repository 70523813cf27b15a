//! Spatio-temporal panel data: tract-by-slot observations with a response
//! and a covariate vector that may contain missing cells.
//!
//! Raw rows come from an ingestion layer as strings; [`validate_panel`]
//! turns them into an immutable [`Panel`] with a tract registry, a sorted
//! time-slot registry and per-column covariate kinds. Rows are never dropped
//! because of missing covariates.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{Dataset, FeatureKind};

/// Offset and scale of the log-rate response `ln((count + offset) / population * scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTransform {
    pub offset: f64,
    pub scale: f64,
}

impl Default for RateTransform {
    fn default() -> Self {
        Self {
            offset: 1e-4,
            scale: 1000.0,
        }
    }
}

impl RateTransform {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return Err(Error::Domain(format!("rate offset must be > 0, got {}", self.offset)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Domain(format!("rate scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Log event rate per `scale` population units.
pub fn build_response(count: f64, population: f64, t: &RateTransform) -> Result<f64> {
    t.validate()?;
    if !(population > 0.0) || !population.is_finite() {
        return Err(Error::Domain(format!("population must be positive, got {population}")));
    }
    if !(count >= 0.0) || !count.is_finite() {
        return Err(Error::Domain(format!("count must be nonnegative, got {count}")));
    }
    Ok(((count + t.offset) / population * t.scale).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovValue {
    Num(f64),
    Level(u32),
    Missing,
}

impl CovValue {
    /// Encoding used by the tree learner: level index for categorical
    /// values, `NaN` for missing.
    pub fn as_f64(self) -> f64 {
        match self {
            CovValue::Num(v) => v,
            CovValue::Level(l) => l as f64,
            CovValue::Missing => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Quantitative,
    /// Levels are kept sorted; a value's level index is its position here.
    Categorical {
        levels: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn feature_kind(&self) -> FeatureKind {
        match &self.kind {
            CovariateKind::Quantitative => FeatureKind::Quantitative,
            CovariateKind::Categorical { levels } => FeatureKind::Categorical {
                n_levels: levels.len() as u32,
            },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, CovariateKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Index into [`Panel::tracts`].
    pub tract: usize,
    /// Zero-based index into [`Panel::slot_labels`].
    pub slot: usize,
    pub response: f64,
    pub covariates: Vec<CovValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawResponse {
    Value(f64),
    Counts { count: f64, population: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub tract: String,
    pub time: i64,
    pub response: RawResponse,
    /// `None` is a missing cell.
    pub covariates: Vec<Option<String>>,
}

/// Parsed but unvalidated input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawPanel {
    pub covariate_names: Vec<String>,
    /// Columns forced to be categorical even if every value parses as a number.
    pub categorical: Vec<String>,
    pub transform: RateTransform,
    pub rows: Vec<RawRow>,
}

/// Immutable validated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    observations: Vec<Observation>,
    tracts: Vec<String>,
    slot_labels: Vec<i64>,
    covariates: Vec<Covariate>,
}

impl Panel {
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    /// Number of time slots `T`.
    pub fn n_slots(&self) -> usize {
        self.slot_labels.len()
    }

    /// Number of tracts `C`.
    pub fn n_tracts(&self) -> usize {
        self.tracts.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn tracts(&self) -> &[String] {
        &self.tracts
    }

    pub fn slot_labels(&self) -> &[i64] {
        &self.slot_labels
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn tract_index(&self, id: &str) -> Option<usize> {
        self.tracts.iter().position(|t| t == id)
    }

    pub fn responses(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.response).collect()
    }

    /// Column-major covariate matrix for the tree learner.
    pub fn design(&self) -> Dataset {
        let columns = (0..self.p())
            .map(|j| self.observations.iter().map(|o| o.covariates[j].as_f64()).collect())
            .collect();
        let kinds = self.covariates.iter().map(Covariate::feature_kind).collect();
        Dataset::new(columns, kinds).expect("validated panel always yields a consistent dataset")
    }

    /// Observation index for every (slot, tract) cell, slot-major.
    pub fn cell_index(&self) -> Vec<Option<usize>> {
        let c = self.n_tracts();
        let mut cells = vec![None; self.n_slots() * c];
        for (i, o) in self.observations.iter().enumerate() {
            cells[o.slot * c + o.tract] = Some(i);
        }
        cells
    }

    /// Number of observed tracts in each slot.
    pub fn slot_coverage(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_slots()];
        for o in &self.observations {
            counts[o.slot] += 1;
        }
        counts
    }

    /// Fraction of covariate cells that are missing.
    pub fn missing_fraction(&self) -> f64 {
        let cells = self.n() * self.p();
        if cells == 0 {
            return 0.0;
        }
        let missing = self
            .observations
            .iter()
            .flat_map(|o| o.covariates.iter())
            .filter(|v| matches!(v, CovValue::Missing))
            .count();
        missing as f64 / cells as f64
    }

    /// Inverse of [`validate_panel`]: re-validating the result reproduces `self`.
    pub fn to_raw(&self) -> RawPanel {
        let rows = self
            .observations
            .iter()
            .map(|o| RawRow {
                tract: self.tracts[o.tract].clone(),
                time: self.slot_labels[o.slot],
                response: RawResponse::Value(o.response),
                covariates: o
                    .covariates
                    .iter()
                    .zip(&self.covariates)
                    .map(|(v, c)| match (v, &c.kind) {
                        (CovValue::Num(x), _) => Some(format!("{x}")),
                        (CovValue::Level(l), CovariateKind::Categorical { levels }) => {
                            Some(levels[*l as usize].clone())
                        }
                        (CovValue::Level(l), CovariateKind::Quantitative) => Some(format!("{l}")),
                        (CovValue::Missing, _) => None,
                    })
                    .collect(),
            })
            .collect();
        RawPanel {
            covariate_names: self.covariates.iter().map(|c| c.name.clone()).collect(),
            categorical: self
                .covariates
                .iter()
                .filter(|c| c.is_categorical())
                .map(|c| c.name.clone())
                .collect(),
            transform: RateTransform::default(),
            rows,
        }
    }
}

/// Builds a [`Panel`] from parsed rows, collecting every problem found.
pub fn validate_panel(raw: &RawPanel) -> Result<Panel> {
    let p = raw.covariate_names.len();
    let mut problems = Vec::new();

    if raw.rows.is_empty() {
        return Err(Error::EmptyInput("panel has no rows"));
    }
    for name in &raw.categorical {
        if !raw.covariate_names.contains(name) {
            problems.push(format!("categorical column '{name}' is not a covariate"));
        }
    }
    let mut seen_names = BTreeSet::new();
    for name in &raw.covariate_names {
        if !seen_names.insert(name) {
            problems.push(format!("covariate '{name}' listed twice"));
        }
    }

    for (i, row) in raw.rows.iter().enumerate() {
        if row.covariates.len() != p {
            problems.push(format!(
                "row {}: expected {p} covariates, got {}",
                i + 1,
                row.covariates.len()
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    // Tract registry in order of first appearance; slots sorted by time.
    let mut tracts: Vec<String> = Vec::new();
    let mut tract_ids: HashMap<&str, usize> = HashMap::new();
    for row in &raw.rows {
        if !tract_ids.contains_key(row.tract.as_str()) {
            tract_ids.insert(&row.tract, tracts.len());
            tracts.push(row.tract.clone());
        }
    }
    let slot_labels: Vec<i64> = raw
        .rows
        .iter()
        .map(|r| r.time)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut first_seen: HashMap<(&str, i64), usize> = HashMap::new();
    for (i, row) in raw.rows.iter().enumerate() {
        if let Some(prev) = first_seen.insert((&row.tract, row.time), i) {
            problems.push(format!(
                "duplicate (tract, time) = ({}, {}) at rows {} and {}",
                row.tract,
                row.time,
                prev + 1,
                i + 1
            ));
        }
    }

    let mut covariates = Vec::with_capacity(p);
    for (j, name) in raw.covariate_names.iter().enumerate() {
        let present: Vec<&str> = raw.rows.iter().filter_map(|r| r.covariates[j].as_deref()).collect();
        if present.is_empty() {
            problems.push(format!("covariate '{name}' has no non-missing values"));
            covariates.push(Covariate {
                name: name.clone(),
                kind: CovariateKind::Quantitative,
            });
            continue;
        }
        let forced = raw.categorical.contains(name);
        let parsed: Option<Vec<f64>> = if forced {
            None
        } else {
            present.iter().map(|s| s.trim().parse::<f64>().ok()).collect()
        };
        let kind = match parsed {
            Some(values) => {
                if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                    problems.push(format!("covariate '{name}' has non-finite value '{}'", present[bad]));
                }
                CovariateKind::Quantitative
            }
            None => {
                let levels: BTreeSet<&str> = present.iter().copied().collect();
                CovariateKind::Categorical {
                    levels: levels.into_iter().map(str::to_string).collect(),
                }
            }
        };
        covariates.push(Covariate {
            name: name.clone(),
            kind,
        });
    }

    let mut observations = Vec::with_capacity(raw.rows.len());
    for (i, row) in raw.rows.iter().enumerate() {
        let response = match row.response {
            RawResponse::Value(y) => {
                if !y.is_finite() {
                    problems.push(format!("row {}: non-finite response {y}", i + 1));
                }
                y
            }
            RawResponse::Counts { count, population } => match build_response(count, population, &raw.transform) {
                Ok(y) => y,
                Err(e) => {
                    problems.push(format!("row {}: {e}", i + 1));
                    f64::NAN
                }
            },
        };
        let values = row
            .covariates
            .iter()
            .zip(&covariates)
            .map(|(cell, cov)| match (cell, &cov.kind) {
                (None, _) => CovValue::Missing,
                (Some(s), CovariateKind::Quantitative) => CovValue::Num(s.trim().parse::<f64>().unwrap_or(f64::NAN)),
                (Some(s), CovariateKind::Categorical { levels }) => {
                    let idx = levels.binary_search_by(|l| l.as_str().cmp(s.as_str())).unwrap_or(0);
                    CovValue::Level(idx as u32)
                }
            })
            .collect();
        observations.push(Observation {
            tract: tract_ids[row.tract.as_str()],
            slot: slot_labels
                .binary_search(&row.time)
                .expect("slot registry built from rows"),
            response,
            covariates: values,
        });
    }

    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(Panel {
        observations,
        tracts,
        slot_labels,
        covariates,
    })
}

//! Two-stage backfitting of the tree ensemble against the CAR field.
//!
//! Each outer iteration refits the ensemble on `y - phi`, tests the
//! post-ensemble residuals of every slot for spatial correlation, and
//! smooths the residuals of the significant slots. Iteration stops when the
//! relative change of the fitted mean drops below `delta_threshold`, when no
//! slot is significant, or after `max_outer` iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mart::{fit_mart, BoostConfig, Ensemble};
use crate::panel::Panel;
use crate::spatial::{
    morans_i_partial, AdjacencyGraph, CarConfig, CarFit, CarSmoother, MoranMethod, MoranResult, SlotResiduals,
    SpatialField,
};
use crate::tree::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackfitConfig {
    pub delta_threshold: f64,
    pub p_threshold: f64,
    pub max_outer: usize,
    pub boost: BoostConfig,
    pub moran: MoranMethod,
    pub car: CarConfig,
}

impl Default for BackfitConfig {
    fn default() -> Self {
        Self {
            delta_threshold: 1e-7,
            p_threshold: 0.01,
            max_outer: 50,
            boost: BoostConfig::default(),
            moran: MoranMethod::Normal,
            car: CarConfig::default(),
        }
    }
}

impl BackfitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.delta_threshold.is_finite() && self.delta_threshold > 0.0) {
            errs.push(format!(
                "delta_threshold must be positive, got {}",
                self.delta_threshold
            ));
        }
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            errs.push(format!("p_threshold must be in (0, 1), got {}", self.p_threshold));
        }
        if self.max_outer == 0 {
            errs.push("max_outer must be at least 1".into());
        }
        if let MoranMethod::Permutation { n_perm, .. } = self.moran {
            if n_perm == 0 {
                errs.push("moran n_perm must be at least 1".into());
            }
        }
        for r in [self.boost.validate(), self.car.validate()] {
            match r {
                Ok(()) => {}
                Err(Error::Validation(v)) => errs.extend(v),
                Err(e) => errs.push(e.to_string()),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Relative change `sum (b - a)^2 / sum b^2` of the fitted mean.
pub fn delta(mu_prev: &[f64], mu_curr: &[f64]) -> Result<f64> {
    if mu_prev.len() != mu_curr.len() {
        return Err(Error::Arity {
            expected: mu_prev.len(),
            got: mu_curr.len(),
        });
    }
    let den: f64 = mu_curr.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::Domain(
            "delta undefined: current mean is identically zero".into(),
        ));
    }
    let num: f64 = mu_prev.iter().zip(mu_curr).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok(num / den)
}

/// Slot and tract of every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub slot: Vec<usize>,
    pub tract: Vec<usize>,
    pub n_slots: usize,
    pub n_tracts: usize,
}

impl Layout {
    pub fn from_panel(panel: &Panel) -> Self {
        Self {
            slot: panel.observations().iter().map(|o| o.slot).collect(),
            tract: panel.observations().iter().map(|o| o.tract).collect(),
            n_slots: panel.n_slots(),
            n_tracts: panel.n_tracts(),
        }
    }

    pub fn len(&self) -> usize {
        self.slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_empty()
    }

    /// Field values at each observation.
    pub fn gather(&self, field: &SpatialField) -> Vec<f64> {
        self.slot
            .iter()
            .zip(&self.tract)
            .map(|(&t, &j)| field.value(t, j))
            .collect()
    }

    /// Per-tract values of one slot; `None` where the tract is unobserved.
    pub fn slot_values(&self, values: &[f64], slot: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; self.n_tracts];
        for ((&t, &j), &v) in self.slot.iter().zip(&self.tract).zip(values) {
            if t == slot {
                out[j] = Some(v);
            }
        }
        out
    }
}

/// The three pluggable steps of an outer iteration.
pub trait Stages {
    /// Fits the covariate model to `yz`; returns its predictions per observation.
    fn fit_covariates(&mut self, yz: &[f64], iteration: usize) -> Result<Vec<f64>>;
    /// Slots whose residuals `e` show significant spatial correlation, ascending.
    fn gate(&mut self, e: &[f64], iteration: usize) -> Result<Vec<usize>>;
    /// Smooths `e` on slots `s`; the returned field must be zero elsewhere.
    fn smooth(&mut self, e: &[f64], s: &[usize], prev: &SpatialField, iteration: usize) -> Result<SpatialField>;
}

/// Snapshot of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    /// 1-based.
    pub iteration: usize,
    pub yz: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub s: Vec<usize>,
    pub phi: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `delta` fell below the threshold.
    DeltaBelowThreshold,
    /// No slot was significant.
    EmptySlotSet,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    /// Covariate-model predictions from the last iteration.
    pub f: Vec<f64>,
    pub field: SpatialField,
    pub s_history: Vec<Vec<usize>>,
    pub delta_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
}

/// Runs the outer iteration with arbitrary stages, reporting every iteration to `observer`.
///
/// The mean before the first iteration is taken as zero, so the first
/// `delta` is 1 whenever the first fit is not identically zero.
pub fn backfit_loop<S: Stages>(
    y: &[f64],
    layout: &Layout,
    stages: &mut S,
    delta_threshold: f64,
    max_outer: usize,
    mut observer: impl FnMut(&IterationTrace),
) -> Result<LoopOutcome> {
    if y.len() != layout.len() {
        return Err(Error::Arity {
            expected: layout.len(),
            got: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "response",
            index: i,
        });
    }
    let mut field = SpatialField::zeros(layout.n_slots, layout.n_tracts);
    let mut mu_prev = vec![0.0; y.len()];
    let mut s_history = Vec::new();
    let mut delta_history = Vec::new();
    let mut f = Vec::new();
    for q in 1..=max_outer {
        let phi_prev = layout.gather(&field);
        let yz: Vec<f64> = y.iter().zip(&phi_prev).map(|(a, b)| a - b).collect();
        f = stages.fit_covariates(&yz, q)?;
        if f.len() != y.len() {
            return Err(Error::Arity {
                expected: y.len(),
                got: f.len(),
            });
        }
        let e: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let s = stages.gate(&e, q)?;
        field = if s.is_empty() {
            SpatialField::zeros(layout.n_slots, layout.n_tracts)
        } else {
            let mut next = stages.smooth(&e, &s, &field, q)?;
            for t in 0..layout.n_slots {
                if !s.contains(&t) {
                    next.phi[t].iter_mut().for_each(|v| *v = 0.0);
                    next.tau[t] = None;
                }
            }
            next
        };
        let phi = layout.gather(&field);
        let mu: Vec<f64> = f.iter().zip(&phi).map(|(a, b)| a + b).collect();
        let d = delta(&mu_prev, &mu)?;
        observer(&IterationTrace {
            iteration: q,
            yz,
            fitted: f.clone(),
            residuals: e,
            s: s.clone(),
            phi,
            delta: d,
        });
        delta_history.push(d);
        let empty = s.is_empty();
        s_history.push(s);
        let termination = if empty {
            Some(Termination::EmptySlotSet)
        } else if d < delta_threshold {
            Some(Termination::DeltaBelowThreshold)
        } else {
            None
        };
        if let Some(termination) = termination {
            return Ok(LoopOutcome {
                f,
                field,
                s_history,
                delta_history,
                iterations: q,
                converged: true,
                termination,
            });
        }
        mu_prev = mu;
    }
    Ok(LoopOutcome {
        f,
        field,
        s_history,
        delta_history,
        iterations: max_outer,
        converged: false,
        termination: Termination::MaxIterations,
    })
}

/// Moran's I of one slot, or why it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SlotMoran {
    Tested(MoranResult),
    Untestable { reason: String },
}

impl SlotMoran {
    pub fn result(&self) -> Option<&MoranResult> {
        match self {
            SlotMoran::Tested(r) => Some(r),
            SlotMoran::Untestable { .. } => None,
        }
    }

    pub fn significant(&self, p_threshold: f64) -> bool {
        self.result().is_some_and(|r| r.p_value < p_threshold)
    }
}

/// Per-slot spatial correlation of the raw response, the first-iteration
/// ensemble residuals, and the final residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranRow {
    pub slot: usize,
    pub origin: SlotMoran,
    pub res1: SlotMoran,
    pub res2: SlotMoran,
    /// Final residual I more than two standard deviations below its null mean.
    pub overfit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackfitResult {
    pub ensemble: Ensemble,
    pub field: SpatialField,
    pub s_history: Vec<Vec<usize>>,
    pub delta_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub moran_table: Vec<MoranRow>,
    /// `f(x) + phi` per observation.
    pub fitted: Vec<f64>,
    /// `y - f(x) - phi` per observation.
    pub residuals: Vec<f64>,
    /// Diagnostics of the last CAR smoothing, if any slot was smoothed.
    pub last_car: Option<CarFit>,
    pub warnings: Vec<String>,
}

fn slot_tests(layout: &Layout, values: &[f64], method: MoranMethod, g: &AdjacencyGraph) -> Vec<SlotMoran> {
    (0..layout.n_slots)
        .into_par_iter()
        .map(|t| {
            let v = layout.slot_values(values, t);
            let method = match method {
                MoranMethod::Permutation { n_perm, seed } => MoranMethod::Permutation {
                    n_perm,
                    seed: seed.wrapping_add(t as u64),
                },
                m => m,
            };
            match morans_i_partial(&v, g, method) {
                Ok(r) => SlotMoran::Tested(r),
                Err(e) => SlotMoran::Untestable { reason: e.to_string() },
            }
        })
        .collect()
}

struct ModelStages<'a> {
    data: Dataset,
    layout: &'a Layout,
    graph: &'a AdjacencyGraph,
    smoother: CarSmoother<'a>,
    cfg: &'a BackfitConfig,
    ensemble: Option<Ensemble>,
    first_tests: Option<Vec<SlotMoran>>,
    last_car: Option<CarFit>,
    warnings: Vec<String>,
}

impl Stages for ModelStages<'_> {
    fn fit_covariates(&mut self, yz: &[f64], iteration: usize) -> Result<Vec<f64>> {
        let boost = BoostConfig {
            seed: self.cfg.boost.seed.wrapping_add(iteration as u64 - 1),
            ..self.cfg.boost.clone()
        };
        let fit = fit_mart(&self.data, yz, &boost)?;
        let f = fit.ensemble.predict_dataset(&self.data)?;
        self.ensemble = Some(fit.ensemble);
        Ok(f)
    }

    fn gate(&mut self, e: &[f64], _iteration: usize) -> Result<Vec<usize>> {
        let tests = slot_tests(self.layout, e, self.cfg.moran, self.graph);
        let s = (0..tests.len())
            .filter(|&t| tests[t].significant(self.cfg.p_threshold))
            .collect();
        self.first_tests.get_or_insert(tests);
        Ok(s)
    }

    fn smooth(&mut self, e: &[f64], s: &[usize], prev: &SpatialField, iteration: usize) -> Result<SpatialField> {
        let mut residuals = Vec::new();
        for &t in s {
            let v = self.layout.slot_values(e, t);
            if v.iter().all(Option::is_some) {
                residuals.push(SlotResiduals {
                    slot: t,
                    values: v.into_iter().map(Option::unwrap).collect(),
                });
            } else {
                let msg = format!("iteration {iteration}: slot {t} is incomplete and is not smoothed");
                if !self.warnings.contains(&msg) {
                    self.warnings.push(msg);
                }
            }
        }
        if residuals.is_empty() {
            return Ok(SpatialField::zeros(self.layout.n_slots, self.layout.n_tracts));
        }
        let fit = self
            .smoother
            .smooth(&residuals, self.layout.n_slots, Some(prev), &self.cfg.car)?;
        if !fit.converged {
            self.warnings.push(format!(
                "iteration {iteration}: CAR smoother stopped after {} sweeps without converging",
                fit.sweeps
            ));
        }
        if !fit.pinned.is_empty() {
            self.warnings.push(format!(
                "iteration {iteration}: tau pinned at tau_max for slots {:?}",
                fit.pinned
            ));
        }
        let field = fit.field.clone();
        self.last_car = Some(fit);
        Ok(field)
    }
}

/// Fits the two-stage model.
pub fn two_stage_fit(panel: &Panel, g: &AdjacencyGraph, cfg: &BackfitConfig) -> Result<BackfitResult> {
    two_stage_fit_with(panel, g, cfg, |_| {})
}

/// [`two_stage_fit`] with a per-iteration observer.
pub fn two_stage_fit_with(
    panel: &Panel,
    g: &AdjacencyGraph,
    cfg: &BackfitConfig,
    observer: impl FnMut(&IterationTrace),
) -> Result<BackfitResult> {
    cfg.validate()?;
    if panel.tracts() != g.names() {
        return Err(Error::Graph(
            "panel and adjacency graph do not share the same tract registry".into(),
        ));
    }
    let thin: Vec<String> = panel
        .slot_coverage()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < 3)
        .map(|(t, c)| format!("slot {} has {c} observed tracts (need 3)", panel.slot_labels()[t]))
        .collect();
    if !thin.is_empty() {
        return Err(Error::Validation(thin));
    }
    let y = panel.responses();
    let layout = Layout::from_panel(panel);
    let origin = slot_tests(&layout, &y, cfg.moran, g);
    let mut stages = ModelStages {
        data: panel.design(),
        layout: &layout,
        graph: g,
        smoother: CarSmoother::new(g)?,
        cfg,
        ensemble: None,
        first_tests: None,
        last_car: None,
        warnings: Vec::new(),
    };
    let out = backfit_loop(&y, &layout, &mut stages, cfg.delta_threshold, cfg.max_outer, observer)?;

    let phi = layout.gather(&out.field);
    let fitted: Vec<f64> = out.f.iter().zip(&phi).map(|(a, b)| a + b).collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let res2 = slot_tests(&layout, &residuals, cfg.moran, g);
    let res1 = stages.first_tests.take().unwrap_or_default();
    let moran_table: Vec<MoranRow> = origin
        .into_iter()
        .zip(res1)
        .zip(res2)
        .enumerate()
        .map(|(slot, ((origin, res1), res2))| {
            let overfit = res2.result().is_some_and(|r| r.i < r.expected - 2.0 * r.sd);
            MoranRow {
                slot,
                origin,
                res1,
                res2,
                overfit,
            }
        })
        .collect();
    let mut warnings = stages.warnings;
    for row in &moran_table {
        if row.overfit {
            warnings.push(format!(
                "slot {}: final residuals are negatively autocorrelated (spatial effect overfitted)",
                panel.slot_labels()[row.slot]
            ));
        }
    }
    if !out.converged {
        warnings.push(format!("no convergence after {} outer iterations", out.iterations));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(BackfitResult {
        ensemble: stages.ensemble.expect("at least one outer iteration ran"),
        field: out.field,
        s_history: out.s_history,
        delta_history: out.delta_history,
        iterations: out.iterations,
        converged: out.converged,
        termination: out.termination,
        moran_table,
        fitted,
        residuals,
        last_car: stages.last_car,
        warnings,
    })
}

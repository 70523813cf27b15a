//! Gradient boosting with regression-tree base learners (MART).
//!
//! The model is `f(x) = f0 + nu * sum_m tree_m(x)`. Each iteration computes
//! the negative gradient of the loss at the current fit, grows a tree on it,
//! re-estimates every leaf by a line search on the loss, and adds the tree
//! scaled by the shrinkage `nu`. With `bag_fraction < 1` every iteration
//! trains on a fresh subsample drawn without replacement and the held-out
//! rows give an out-of-bag estimate of the improvement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{fit_tree, Dataset, Node, TreeModel, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `L(y, f) = (y - f)^2 / 2`.
    #[default]
    SquaredError,
}

impl Loss {
    pub fn value(self, y: f64, f: f64) -> f64 {
        match self {
            Loss::SquaredError => 0.5 * (y - f) * (y - f),
        }
    }

    /// `-dL/df` at `f`.
    pub fn negative_gradient(self, y: f64, f: f64) -> f64 {
        match self {
            Loss::SquaredError => y - f,
        }
    }

    /// Constant minimising the loss over `y`.
    pub fn initial_estimate(self, y: &[f64]) -> f64 {
        match self {
            Loss::SquaredError => y.iter().sum::<f64>() / y.len() as f64,
        }
    }

    /// Additive leaf correction `gamma` minimising `sum L(y_i, f_i + gamma)` over `rows`.
    pub fn line_search(self, y: &[f64], f: &[f64], rows: &[usize]) -> f64 {
        match self {
            Loss::SquaredError => rows.iter().map(|&i| y[i] - f[i]).sum::<f64>() / rows.len() as f64,
        }
    }
}

/// How the number of trees is chosen after fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MSelection {
    /// Keep all `n_trees`.
    #[default]
    Fixed,
    /// Stop where the smoothed out-of-bag improvement stays non-positive
    /// for `patience` consecutive iterations.
    Oob { patience: usize, window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    /// Shrinkage in (0, 1].
    pub nu: f64,
    pub max_depth: usize,
    /// Iteration cap `M_max`.
    pub n_trees: usize,
    pub bag_fraction: f64,
    pub min_leaf: usize,
    pub loss: Loss,
    pub selection: MSelection,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            nu: 0.001,
            max_depth: 3,
            n_trees: 5000,
            bag_fraction: 0.5,
            min_leaf: 10,
            loss: Loss::SquaredError,
            selection: MSelection::Fixed,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("nu must be in (0, 1], got {}", self.nu)));
        }
        if self.max_depth < 1 {
            return Err(Error::Config("max_depth must be >= 1".into()));
        }
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if !(self.bag_fraction > 0.0 && self.bag_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "bag_fraction must be in (0, 1], got {}",
                self.bag_fraction
            )));
        }
        if self.min_leaf < 1 {
            return Err(Error::Config("min_leaf must be >= 1".into()));
        }
        if let MSelection::Oob { patience, window } = self.selection {
            if self.bag_fraction >= 1.0 {
                return Err(Error::Config("out-of-bag selection needs bag_fraction < 1".into()));
            }
            if patience < 1 || window < 1 {
                return Err(Error::Config("out-of-bag patience and window must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Fitted additive tree expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub f0: f64,
    pub nu: f64,
    pub n_features: usize,
    pub loss: Loss,
    pub bag_fraction: f64,
    pub trees: Vec<TreeModel>,
    /// Out-of-bag loss decrease of each iteration; empty when `bag_fraction == 1`.
    pub oob_improvements: Vec<f64>,
}

impl Ensemble {
    /// Number of trees `M`.
    pub fn m(&self) -> usize {
        self.trees.len()
    }

    pub fn constant(f0: f64, n_features: usize) -> Self {
        Self {
            f0,
            nu: 1.0,
            n_features,
            loss: Loss::SquaredError,
            bag_fraction: 1.0,
            trees: Vec::new(),
            oob_improvements: Vec::new(),
        }
    }

    #[inline]
    pub fn predict_with<F: Fn(usize) -> f64>(&self, get: F) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_with(&get)).sum();
        self.f0 + self.nu * sum
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Arity {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.predict_with(|j| x[j]))
    }

    #[inline]
    pub fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        self.predict_with(|j| data.value(row, j))
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.n_features() != self.n_features {
            return Err(Error::Arity {
                expected: self.n_features,
                got: data.n_features(),
            });
        }
        Ok((0..data.n_rows()).map(|i| self.predict_row(data, i)).collect())
    }

    /// Keeps the first `m` trees.
    pub fn truncate(&mut self, m: usize) {
        self.trees.truncate(m);
        self.oob_improvements.truncate(m);
    }
}

/// Result of [`fit_mart`]: the ensemble plus training-time diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostFit {
    pub ensemble: Ensemble,
    /// Predictions on the training rows accumulated during fitting.
    pub fitted: Vec<f64>,
    /// Mean squared training error; entry `m` is after `m` trees.
    pub train_mse: Vec<f64>,
    /// Trees grown before any out-of-bag truncation.
    pub trees_grown: usize,
}

fn mse(y: &[f64], f: &[f64]) -> f64 {
    y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Boosts regression trees on `(data, y)`.
pub fn fit_mart(data: &Dataset, y: &[f64], cfg: &BoostConfig) -> Result<BoostFit> {
    cfg.validate()?;
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyInput("no training rows"));
    }
    if data.n_rows() != n {
        return Err(Error::Config(format!("{} responses for {} rows", n, data.n_rows())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "response",
            index: i,
        });
    }
    if n < 2 * cfg.min_leaf {
        return Err(Error::Config(format!(
            "need at least 2 * min_leaf = {} rows, got {n}",
            2 * cfg.min_leaf
        )));
    }

    let loss = cfg.loss;
    let params = TreeParams {
        max_depth: cfg.max_depth,
        min_leaf: cfg.min_leaf,
    };
    let f0 = loss.initial_estimate(y);
    let mut f = vec![f0; n];
    let mut train_mse = Vec::with_capacity(cfg.n_trees + 1);
    train_mse.push(mse(y, &f));
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut oob_improvements = Vec::new();

    let bag = cfg.bag_fraction < 1.0;
    let n_bag = ((cfg.bag_fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all_rows: Vec<usize> = (0..n).collect();
    let mut in_bag = vec![true; n];
    let mut pseudo = vec![0.0; n];

    for _ in 0..cfg.n_trees {
        for i in 0..n {
            pseudo[i] = loss.negative_gradient(y[i], f[i]);
        }
        let rows: Vec<usize> = if bag {
            let mut r = rand::seq::index::sample(&mut rng, n, n_bag).into_vec();
            r.sort_unstable();
            in_bag.iter_mut().for_each(|b| *b = false);
            for &i in &r {
                in_bag[i] = true;
            }
            r
        } else {
            all_rows.clone()
        };

        let mut tree = fit_tree(data, &pseudo, None, Some(&rows), &params)?;

        // Line search per terminal region on the in-bag rows.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes().len()];
        for &i in &rows {
            members[tree.leaf_index_row(data, i)].push(i);
        }
        for (node, rows_in_leaf) in members.iter().enumerate() {
            if matches!(tree.nodes()[node], Node::Leaf { .. }) && !rows_in_leaf.is_empty() {
                tree.set_leaf_value(node, loss.line_search(y, &f, rows_in_leaf));
            }
        }

        let mut oob_before = 0.0;
        let mut oob_after = 0.0;
        let mut oob_n = 0usize;
        for i in 0..n {
            let step = cfg.nu * tree.predict_row(data, i);
            if bag && !in_bag[i] {
                oob_before += loss.value(y[i], f[i]);
                oob_after += loss.value(y[i], f[i] + step);
                oob_n += 1;
            }
            f[i] += step;
        }
        if bag {
            oob_improvements.push(if oob_n > 0 {
                (oob_before - oob_after) / oob_n as f64
            } else {
                0.0
            });
        }
        train_mse.push(mse(y, &f));
        trees.push(tree);
    }

    let mut ensemble = Ensemble {
        f0,
        nu: cfg.nu,
        n_features: data.n_features(),
        loss,
        bag_fraction: cfg.bag_fraction,
        trees,
        oob_improvements,
    };
    let trees_grown = ensemble.m();
    if cfg.selection != MSelection::Fixed {
        let m = select_m(&ensemble, &cfg.selection)?;
        ensemble.truncate(m);
        f = ensemble.predict_dataset(data)?;
        train_mse.truncate(m + 1);
    }
    Ok(BoostFit {
        ensemble,
        fitted: f,
        train_mse,
        trees_grown,
    })
}

/// Number of trees to keep under `method`.
///
/// For out-of-bag selection the per-iteration improvements are smoothed by
/// a trailing moving average of width `window`; the result is the smallest
/// `m` such that the smoothed improvements of iterations `m+1 ..= m+patience`
/// are all `<= 0`, or the fitted length when no such run exists.
pub fn select_m(e: &Ensemble, method: &MSelection) -> Result<usize> {
    match *method {
        MSelection::Fixed => Ok(e.m()),
        MSelection::Oob { patience, window } => {
            if e.bag_fraction >= 1.0 || e.oob_improvements.len() != e.m() {
                return Err(Error::Config(
                    "out-of-bag selection requires an ensemble fitted with bag_fraction < 1".into(),
                ));
            }
            if patience < 1 || window < 1 {
                return Err(Error::Config("patience and window must be >= 1".into()));
            }
            let raw = &e.oob_improvements;
            let mut smoothed = Vec::with_capacity(raw.len());
            let mut acc = 0.0;
            for k in 0..raw.len() {
                acc += raw[k];
                if k >= window {
                    acc -= raw[k - window];
                }
                smoothed.push(acc / (k + 1).min(window) as f64);
            }
            let mut run = 0;
            for (k, s) in smoothed.iter().enumerate() {
                if *s <= 0.0 {
                    run += 1;
                    if run == patience {
                        return Ok(k + 1 - patience);
                    }
                } else {
                    run = 0;
                }
            }
            Ok(e.m())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{FeatureKind, SplitRule};
    use rand::Rng;

    fn step_data() -> (Dataset, Vec<f64>) {
        let data = Dataset::from_rows(
            &[vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            vec![FeatureKind::Quantitative],
        )
        .unwrap();
        (data, vec![0.0, 0.0, 1.0, 1.0])
    }

    fn cfg(nu: f64, depth: usize, m: usize) -> BoostConfig {
        BoostConfig {
            nu,
            max_depth: depth,
            n_trees: m,
            bag_fraction: 1.0,
            min_leaf: 1,
            ..Default::default()
        }
    }

    #[test]
    fn one_stump_fits_step_exactly() {
        let (data, y) = step_data();
        let fit = fit_mart(&data, &y, &cfg(1.0, 1, 1)).unwrap();
        assert_eq!(fit.ensemble.f0, 0.5);
        assert_eq!(fit.ensemble.m(), 1);
        match &fit.ensemble.trees[0].nodes()[0] {
            Node::Split { rule, .. } => assert_eq!(*rule, SplitRule::Threshold(2.5)),
            other => panic!("{other:?}"),
        }
        assert_eq!(fit.train_mse, vec![0.25, 0.0]);
        for (i, &yi) in y.iter().enumerate() {
            assert_eq!(fit.ensemble.predict_row(&data, i), yi);
        }
    }

    #[test]
    fn shrinkage_halves_the_step() {
        let (data, y) = step_data();
        let fit = fit_mart(&data, &y, &cfg(0.5, 1, 1)).unwrap();
        assert_eq!(fit.ensemble.predict(&[4.0]).unwrap(), 0.75);
        assert_eq!(fit.ensemble.predict(&[1.0]).unwrap(), 0.25);
    }

    #[test]
    fn constant_response_predicts_constant() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 4) as f64]).collect();
        let data = Dataset::from_rows(&rows, vec![FeatureKind::Quantitative; 2]).unwrap();
        let y = vec![3.25; 30];
        let fit = fit_mart(
            &data,
            &y,
            &BoostConfig {
                n_trees: 20,
                min_leaf: 2,
                ..cfg(0.3, 2, 20)
            },
        )
        .unwrap();
        assert_eq!(fit.ensemble.f0, 3.25);
        for i in 0..30 {
            assert_eq!(fit.ensemble.predict_row(&data, i), 3.25);
        }
        assert!(fit.ensemble.trees.iter().all(|t| t.n_leaves() == 1));
    }

    #[test]
    fn empty_tree_list_predicts_f0() {
        let e = Ensemble::constant(1.5, 3);
        assert_eq!(e.predict(&[0.0, f64::NAN, 2.0]).unwrap(), 1.5);
        assert!(matches!(e.predict(&[0.0]), Err(Error::Arity { expected: 3, got: 1 })));
    }

    #[test]
    fn input_errors() {
        let (data, _) = step_data();
        assert!(matches!(
            fit_mart(&data, &[0.0, f64::NAN, 1.0, 1.0], &cfg(1.0, 1, 1)),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let empty = Dataset::new(vec![vec![]], vec![FeatureKind::Quantitative]).unwrap();
        assert!(matches!(
            fit_mart(&empty, &[], &cfg(1.0, 1, 1)),
            Err(Error::EmptyInput(_))
        ));
        assert!(fit_mart(&data, &[0.0; 4], &cfg(0.0, 1, 1)).is_err());
        assert!(fit_mart(&data, &[0.0; 4], &cfg(1.5, 1, 1)).is_err());
    }

    fn ensemble_with_oob(improvements: Vec<f64>) -> Ensemble {
        let m = improvements.len();
        Ensemble {
            f0: 0.0,
            nu: 0.1,
            n_features: 1,
            loss: Loss::SquaredError,
            bag_fraction: 0.5,
            trees: vec![TreeModel::leaf(0.0, 1, 1); m],
            oob_improvements: improvements,
        }
    }

    #[test]
    fn select_m_rules() {
        let e = ensemble_with_oob(vec![0.3, 0.1, -0.2, -0.1, -0.05]);
        let oob = |patience| MSelection::Oob { patience, window: 1 };
        assert_eq!(select_m(&e, &oob(3)).unwrap(), 2);
        assert_eq!(select_m(&e, &oob(4)).unwrap(), 5);
        assert_eq!(select_m(&e, &MSelection::Fixed).unwrap(), 5);
        let positive = ensemble_with_oob(vec![0.1; 8]);
        assert_eq!(select_m(&positive, &oob(2)).unwrap(), 8);
        let mut full = ensemble_with_oob(vec![]);
        full.bag_fraction = 1.0;
        assert!(select_m(&full, &oob(1)).is_err());
        let big = ensemble_with_oob(vec![0.0; 4780]);
        assert_eq!(select_m(&big, &MSelection::Fixed).unwrap(), 4780);
    }

    #[test]
    fn smoothing_window_delays_the_stop() {
        // trailing means with window 2: 1, 1, 0, -1, -1
        let e = ensemble_with_oob(vec![1.0, 1.0, -1.0, -1.0, -1.0]);
        let m = select_m(&e, &MSelection::Oob { patience: 3, window: 2 }).unwrap();
        assert_eq!(m, 2);
        let m = select_m(
            &e,
            &MSelection::Oob {
                patience: 3,
                window: 50,
            },
        )
        .unwrap();
        assert_eq!(m, 5);
    }

    #[test]
    fn pseudo_response_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let loss = Loss::SquaredError;
        for _ in 0..20 {
            let y: f64 = rng.random_range(-5.0..5.0);
            let f: f64 = rng.random_range(-5.0..5.0);
            let h = 1e-5;
            let fd = (loss.value(y, f + h) - loss.value(y, f - h)) / (2.0 * h);
            assert!((loss.negative_gradient(y, f) + fd).abs() < 1e-6);
            assert_eq!(loss.negative_gradient(y, f), y - f);
        }
    }

    #[test]
    fn oob_truncation_and_reproducibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| (6.0 * r[0]).sin() + rng.random_range(-0.5..0.5))
            .collect();
        let data = Dataset::from_rows(&rows, vec![FeatureKind::Quantitative; 2]).unwrap();
        let c = BoostConfig {
            nu: 0.2,
            max_depth: 2,
            n_trees: 300,
            bag_fraction: 0.5,
            min_leaf: 5,
            selection: MSelection::Oob {
                patience: 20,
                window: 10,
            },
            seed: 9,
            ..Default::default()
        };
        let a = fit_mart(&data, &y, &c).unwrap();
        let b = fit_mart(&data, &y, &c).unwrap();
        assert_eq!(a, b);
        assert!(
            a.ensemble.m() < a.trees_grown,
            "{} of {}",
            a.ensemble.m(),
            a.trees_grown
        );
        assert_eq!(a.ensemble.oob_improvements.len(), a.ensemble.m());
        let other = fit_mart(&data, &y, &BoostConfig { seed: 10, ..c }).unwrap();
        assert_ne!(a.ensemble, other.ensemble);
    }
}

//! Interpretation of a fitted [`Ensemble`]: relative variable importance,
//! partial dependence on one or two covariates, and a screen for
//! interaction effects.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mart::Ensemble;
use crate::tree::{route, tree_importance, Dataset, Direction, FeatureKind, Node, SplitRule};

/// Relative importance per covariate, scaled to sum to 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub values: Vec<f64>,
}

impl ImportanceTable {
    /// Covariate indices from most to least important; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }
}

/// Tree-averaged squared-improvement importance, rescaled so the entries
/// sum to 100 (all zeros when no tree splits).
pub fn importance(e: &Ensemble) -> Result<ImportanceTable> {
    if e.trees.is_empty() {
        return Err(Error::EmptyInput("ensemble has no trees"));
    }
    let mut raw = vec![0.0; e.n_features];
    for t in &e.trees {
        for (acc, g) in raw.iter_mut().zip(tree_importance(t)) {
            *acc += g;
        }
    }
    let m = e.trees.len() as f64;
    raw.iter_mut().for_each(|v| *v /= m);
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter_mut().for_each(|v| *v *= 100.0 / total);
    }
    Ok(ImportanceTable { values: raw })
}

/// Partial dependence of the ensemble on the covariates `features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdCurve {
    pub features: Vec<usize>,
    /// One point per entry, each with `features.len()` coordinates.
    pub grid: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

/// Default evaluation points for one covariate: every level of a
/// categorical covariate, otherwise up to `n_points` quantiles of the
/// observed values (duplicates removed).
pub fn default_grid(data: &Dataset, feature: usize, n_points: usize) -> Result<Vec<f64>> {
    if feature >= data.n_features() {
        return Err(Error::Config(format!("covariate index {feature} out of range")));
    }
    let mut present: Vec<f64> = data.column(feature).iter().copied().filter(|v| !v.is_nan()).collect();
    if present.is_empty() {
        return Err(Error::EmptyInput("covariate has no observed values"));
    }
    present.sort_by(f64::total_cmp);
    present.dedup();
    if let FeatureKind::Categorical { .. } = data.kinds()[feature] {
        return Ok(present);
    }
    if n_points == 0 {
        return Err(Error::Config("grid needs at least one point".into()));
    }
    if present.len() <= n_points {
        return Ok(present);
    }
    let all: Vec<f64> = {
        let mut v: Vec<f64> = data.column(feature).iter().copied().filter(|v| !v.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let mut grid: Vec<f64> = (0..n_points)
        .map(|k| {
            let pos = if n_points == 1 {
                0.5 * (all.len() - 1) as f64
            } else {
                k as f64 * (all.len() - 1) as f64 / (n_points - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            all[lo] + frac * (all[hi] - all[lo])
        })
        .collect();
    grid.dedup();
    Ok(grid)
}

/// Cartesian product of two one-dimensional grids, first coordinate outermost.
pub fn grid_2d(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| vec![x, y])).collect()
}

/// Average prediction over the rows of `data` with the covariates in
/// `features` overridden by each grid point.
pub fn partial_dependence(e: &Ensemble, data: &Dataset, features: &[usize], grid: &[Vec<f64>]) -> Result<PdCurve> {
    if features.is_empty() {
        return Err(Error::Config("partial dependence needs at least one covariate".into()));
    }
    let mut sorted = features.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != features.len() {
        return Err(Error::Config("repeated covariate in partial dependence subset".into()));
    }
    if let Some(&bad) = features.iter().find(|&&f| f >= data.n_features() || f >= e.n_features) {
        return Err(Error::Config(format!("covariate index {bad} out of range")));
    }
    if data.n_features() != e.n_features {
        return Err(Error::Arity {
            expected: e.n_features,
            got: data.n_features(),
        });
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("partial dependence grid"));
    }
    if data.n_rows() == 0 {
        return Err(Error::EmptyInput("no rows to average over"));
    }
    for point in grid {
        if point.len() != features.len() {
            return Err(Error::Arity {
                expected: features.len(),
                got: point.len(),
            });
        }
        for (&f, &v) in features.iter().zip(point) {
            let (lo, hi) = observed_range(data, f);
            if !(v >= lo && v <= hi) {
                return Err(Error::Domain(format!(
                    "grid value {v} for covariate {f} outside observed range [{lo}, {hi}]"
                )));
            }
        }
    }
    let n = data.n_rows();
    // A tree's output depends on the grid point only through how the point
    // routes at the tree's splits on `features`, so each distinct routing
    // pattern needs one pass over the rows.
    let tree_means: Vec<Vec<f64>> = e
        .trees
        .par_iter()
        .map(|tree| {
            let splits: Vec<(&SplitRule, Direction, usize)> = tree
                .nodes()
                .iter()
                .filter_map(|node| match node {
                    Node::Split {
                        feature, rule, missing, ..
                    } => features.iter().position(|f| f == feature).map(|k| (rule, *missing, k)),
                    Node::Leaf { .. } => None,
                })
                .collect();
            let mut patterns: Vec<(Vec<Direction>, f64)> = Vec::new();
            grid.iter()
                .map(|point| {
                    let key: Vec<Direction> = splits
                        .iter()
                        .map(|&(rule, missing, k)| route(point[k], rule, missing))
                        .collect();
                    if let Some((_, m)) = patterns.iter().find(|(p, _)| *p == key) {
                        return *m;
                    }
                    let total: f64 = (0..n)
                        .map(|i| {
                            tree.predict_with(|j| match features.iter().position(|&f| f == j) {
                                Some(k) => point[k],
                                None => data.value(i, j),
                            })
                        })
                        .sum();
                    let m = total / n as f64;
                    patterns.push((key, m));
                    m
                })
                .collect()
        })
        .collect();
    let values = (0..grid.len())
        .map(|g| e.f0 + e.nu * tree_means.iter().map(|t| t[g]).sum::<f64>())
        .collect();
    Ok(PdCurve {
        features: features.to_vec(),
        grid: grid.to_vec(),
        values,
    })
}

fn observed_range(data: &Dataset, f: usize) -> (f64, f64) {
    data.column(f)
        .iter()
        .filter(|v| !v.is_nan())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Outcome of [`interaction_strength`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTest {
    pub feature: usize,
    /// Share of the centred prediction variance not captured by the best
    /// additive split `F_j(x_j) + F_rest(x_rest)`.
    pub statistic: f64,
    pub p_value: f64,
    pub rows_used: usize,
    pub n_perm: usize,
}

/// Description of the statistic, written next to interaction results.
pub const INTERACTION_METHOD: &str = "approximate total-interaction screen: H2_j = sum_i u_i^2 / sum_i fc_i^2 \
with fc = centred prediction and u = fc - (PD_j(x_ij) - mean) - (PD_rest(x_i,rest) - mean), partial dependences \
estimated on the same rows; p-value = share of permutations of u over rows whose between-bin variance of u^2 \
(bins of x_j: 10 quantile bins, categorical levels, missing) reaches the observed one. \
This is an approximation, not the Friedman-Popescu bootstrap null test.";

/// Screens covariate `j` for interactions with the rest of the model.
///
/// Uses at most `max_rows` training rows (a seeded subsample when the data
/// are larger) because the partial dependences cost `O(rows^2)` predictions.
pub fn interaction_strength(
    e: &Ensemble,
    data: &Dataset,
    j: usize,
    n_perm: usize,
    seed: u64,
    max_rows: usize,
) -> Result<InteractionTest> {
    if n_perm < 20 {
        return Err(Error::Config(format!("n_perm must be >= 20, got {n_perm}")));
    }
    if j >= e.n_features || j >= data.n_features() {
        return Err(Error::Config(format!("covariate index {j} out of range")));
    }
    if data.n_features() != e.n_features {
        return Err(Error::Arity {
            expected: e.n_features,
            got: data.n_features(),
        });
    }
    if data.n_rows() < 2 {
        return Err(Error::EmptyInput("need at least two rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = if data.n_rows() > max_rows.max(2) {
        let mut r = rand::seq::index::sample(&mut rng, data.n_rows(), max_rows.max(2)).into_vec();
        r.sort_unstable();
        r
    } else {
        (0..data.n_rows()).collect()
    };
    let m = rows.len();
    let mf = m as f64;

    let f: Vec<f64> = rows.iter().map(|&i| e.predict_row(data, i)).collect();
    // PD_j at x_ij and PD_rest at x_i,rest, both averaged over the same rows.
    let (pd_j, pd_rest): (Vec<f64>, Vec<f64>) = rows
        .par_iter()
        .map(|&i| {
            let xij = data.value(i, j);
            let mut a = 0.0;
            let mut b = 0.0;
            for &k in &rows {
                a += e.predict_with(|c| if c == j { xij } else { data.value(k, c) });
                b += e.predict_with(|c| if c == j { data.value(k, j) } else { data.value(i, c) });
            }
            (a / mf, b / mf)
        })
        .unzip();
    let centre = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / mf;
        v.iter().map(|x| x - mean).collect::<Vec<f64>>()
    };
    let (fc, pj, pr) = (centre(&f), centre(&pd_j), centre(&pd_rest));
    let u: Vec<f64> = (0..m).map(|i| fc[i] - pj[i] - pr[i]).collect();
    let total: f64 = fc.iter().map(|v| v * v).sum();
    let resid: f64 = u.iter().map(|v| v * v).sum();

    if !(total > 0.0) {
        return Ok(InteractionTest {
            feature: j,
            statistic: 0.0,
            p_value: 1.0,
            rows_used: m,
            n_perm,
        });
    }
    let statistic = resid / total;
    // Interaction parts at rounding level carry no association to test.
    if resid <= 1e-24 * total {
        return Ok(InteractionTest {
            feature: j,
            statistic,
            p_value: 1.0,
            rows_used: m,
            n_perm,
        });
    }

    let bins = bin_rows(data, j, &rows);
    let n_bins = bins.iter().copied().max().map_or(0, |b| b + 1);
    let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
    let between = |vals: &[f64]| -> f64 {
        let mut sum = vec![0.0; n_bins];
        let mut cnt = vec![0usize; n_bins];
        for (k, &b) in bins.iter().enumerate() {
            sum[b] += vals[k];
            cnt[b] += 1;
        }
        let grand = vals.iter().sum::<f64>() / mf;
        (0..n_bins)
            .filter(|&b| cnt[b] > 0)
            .map(|b| {
                let d = sum[b] / cnt[b] as f64 - grand;
                cnt[b] as f64 * d * d
            })
            .sum()
    };
    let observed = between(&u2);
    let mut shuffled = u2.clone();
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        if between(&shuffled) >= observed {
            exceed += 1;
        }
    }
    Ok(InteractionTest {
        feature: j,
        statistic,
        p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
        rows_used: m,
        n_perm,
    })
}

/// Bin label per row: categorical level, one of 10 rank bins, or a final
/// bin for missing values.
fn bin_rows(data: &Dataset, j: usize, rows: &[usize]) -> Vec<usize> {
    let col = data.column(j);
    match data.kinds()[j] {
        FeatureKind::Categorical { n_levels } => rows
            .iter()
            .map(|&i| {
                if col[i].is_nan() {
                    n_levels as usize
                } else {
                    col[i] as usize
                }
            })
            .collect(),
        FeatureKind::Quantitative => {
            let mut present: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .filter(|(_, &i)| !col[i].is_nan())
                .map(|(k, &i)| (col[i], k))
                .collect();
            present.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut bins = vec![10; rows.len()];
            let np = present.len();
            for (rank, &(_, k)) in present.iter().enumerate() {
                bins[k] = rank * 10 / np.max(1);
            }
            bins
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mart::{fit_mart, BoostConfig};
    use crate::tree::{fit_tree, TreeModel, TreeParams};
    use rand::Rng;

    fn ensemble_of(trees: Vec<TreeModel>, f0: f64, nu: f64) -> Ensemble {
        let p = trees[0].n_features();
        Ensemble {
            f0,
            nu,
            n_features: p,
            loss: Default::default(),
            bag_fraction: 1.0,
            trees,
            oob_improvements: vec![],
        }
    }

    /// A stump on `feature` with the given gain, built by fitting.
    fn stump(p: usize, feature: usize, scale: f64) -> TreeModel {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..p).map(|j| if j == feature { i as f64 } else { 0.0 }).collect())
            .collect();
        let data = Dataset::from_rows(&rows, vec![FeatureKind::Quantitative; p]).unwrap();
        let y: Vec<f64> = [0.0, 0.0, 1.0, 1.0].iter().map(|v| v * scale).collect();
        fit_tree(
            &data,
            &y,
            None,
            None,
            &TreeParams {
                max_depth: 1,
                min_leaf: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn importance_single_feature_and_averaging() {
        let e = ensemble_of(vec![stump(3, 1, 1.0), stump(3, 1, 2.0)], 0.0, 0.1);
        assert_eq!(importance(&e).unwrap().values, vec![0.0, 100.0, 0.0]);

        // gains: stump(scale s) has gain s^2, so sqrt(3) -> 3.0 and 1 -> 1.0
        let e = ensemble_of(vec![stump(3, 1, 3f64.sqrt()), stump(3, 2, 1.0)], 0.0, 0.1);
        let imp = importance(&e).unwrap().values;
        assert!((imp[1] - 75.0).abs() < 1e-9 && (imp[2] - 25.0).abs() < 1e-9, "{imp:?}");
        assert_eq!(imp[0], 0.0);
        assert_eq!(importance(&e).unwrap().ranking(), vec![1, 2, 0]);

        let empty = Ensemble::constant(1.0, 2);
        assert!(importance(&empty).is_err());
    }

    #[test]
    fn pd_of_single_stump() {
        let rows = vec![vec![1.0, 7.0], vec![2.0, -1.0], vec![3.0, 0.5], vec![4.0, 2.0]];
        let data = Dataset::from_rows(&rows, vec![FeatureKind::Quantitative; 2]).unwrap();
        let t = fit_tree(
            &data,
            &[0.0, 0.0, 1.0, 1.0],
            None,
            None,
            &TreeParams {
                max_depth: 1,
                min_leaf: 1,
            },
        )
        .unwrap();
        let e = ensemble_of(vec![t], 0.5, 1.0);
        let pd = partial_dependence(&e, &data, &[0], &[vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(pd.values, vec![0.5, 1.5]);

        let constant = Ensemble::constant(2.5, 2);
        let flat = partial_dependence(&constant, &data, &[1], &[vec![-1.0], vec![0.0], vec![7.0]]).unwrap();
        assert_eq!(flat.values, vec![2.5; 3]);

        assert!(partial_dependence(&e, &data, &[2], &[vec![1.0]]).is_err());
        assert!(partial_dependence(&e, &data, &[0], &[vec![9.0]]).is_err());
        assert!(partial_dependence(&e, &data, &[0], &[]).is_err());
    }

    fn random_fit(depth: usize, seed: u64) -> (Ensemble, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..150)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        if rng.random_bool(0.05) {
                            f64::NAN
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let a = if r[0].is_nan() { 0.0 } else { r[0] };
                let b = if r[1].is_nan() { 0.0 } else { r[1] };
                (3.0 * a).sin() + a * b * 2.0 + rng.random_range(-0.1..0.1)
            })
            .collect();
        let data = Dataset::from_rows(&rows, vec![FeatureKind::Quantitative; 3]).unwrap();
        let cfg = BoostConfig {
            nu: 0.1,
            max_depth: depth,
            n_trees: 60,
            bag_fraction: 1.0,
            min_leaf: 5,
            ..Default::default()
        };
        (fit_mart(&data, &y, &cfg).unwrap().ensemble, data)
    }

    #[test]
    fn unused_feature_has_flat_pd_at_mean_prediction() {
        let (e, data) = random_fit(1, 4);
        let imp = importance(&e).unwrap();
        let unused: Vec<usize> = (0..3).filter(|&j| imp.values[j] == 0.0).collect();
        let mean_pred = e.predict_dataset(&data).unwrap().iter().sum::<f64>() / data.n_rows() as f64;
        for j in unused {
            let grid: Vec<Vec<f64>> = default_grid(&data, j, 7)
                .unwrap()
                .into_iter()
                .map(|v| vec![v])
                .collect();
            let pd = partial_dependence(&e, &data, &[j], &grid).unwrap();
            for v in pd.values {
                assert!((v - mean_pred).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stump_ensembles_decompose_additively() {
        let (e, data) = random_fit(1, 5);
        let n = data.n_rows();
        let pred = e.predict_dataset(&data).unwrap();
        let mean = pred.iter().sum::<f64>() / n as f64;
        let pds: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let grid: Vec<Vec<f64>> = (0..n).map(|i| vec![data.value(i, j)]).collect();
                // grid points must be observed values; missing cells are evaluated directly
                (0..n)
                    .map(|i| {
                        let x = grid[i][0];
                        let total: f64 = (0..n)
                            .map(|k| e.predict_with(|c| if c == j { x } else { data.value(k, c) }))
                            .sum();
                        total / n as f64
                    })
                    .collect()
            })
            .collect();
        for i in 0..n {
            let recon: f64 = mean + (0..3).map(|j| pds[j][i] - mean).sum::<f64>();
            assert!((recon - pred[i]).abs() < 1e-9, "row {i}: {recon} vs {}", pred[i]);
        }
    }

    #[test]
    fn full_subset_pd_equals_prediction() {
        let (e, data) = random_fit(3, 6);
        for i in (0..data.n_rows()).step_by(17) {
            let x = data.row(i);
            if x.iter().any(|v| v.is_nan()) {
                continue;
            }
            let pd = partial_dependence(&e, &data, &[0, 1, 2], std::slice::from_ref(&x)).unwrap();
            let direct = e.predict(&x).unwrap();
            assert!((pd.values[0] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn two_dimensional_grid() {
        let (e, data) = random_fit(2, 8);
        let g = grid_2d(&[-0.5, 0.5], &[-0.2, 0.0, 0.2]);
        assert_eq!(g.len(), 6);
        let pd = partial_dependence(&e, &data, &[0, 1], &g).unwrap();
        assert_eq!(pd.values.len(), 6);
        assert_eq!(pd.grid[1], vec![-0.5, 0.0]);
    }

    #[test]
    fn quantile_grid_within_range() {
        let (_, data) = random_fit(1, 9);
        let g = default_grid(&data, 0, 50).unwrap();
        assert!(g.len() <= 50 && g.len() > 40);
        let (lo, hi) = observed_range(&data, 0);
        assert_eq!(g[0], lo);
        assert_eq!(*g.last().unwrap(), hi);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let cat = Dataset::new(
            vec![vec![2.0, 0.0, f64::NAN, 2.0]],
            vec![FeatureKind::Categorical { n_levels: 3 }],
        )
        .unwrap();
        assert_eq!(default_grid(&cat, 0, 50).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn interaction_null_and_detection() {
        let (stumps, data) = random_fit(1, 10);
        for j in 0..3 {
            let r = interaction_strength(&stumps, &data, j, 50, 1, 200).unwrap();
            assert!(r.statistic <= 1e-12, "feature {j}: {}", r.statistic);
        }
        let constant = Ensemble::constant(1.0, 3);
        let r = interaction_strength(&constant, &data, 0, 20, 1, 200).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        assert!(interaction_strength(&constant, &data, 0, 19, 1, 200).is_err());

        let (deep, data) = random_fit(3, 10);
        let r0 = interaction_strength(&deep, &data, 0, 99, 2, 150).unwrap();
        let r2 = interaction_strength(&deep, &data, 2, 99, 2, 150).unwrap();
        assert!(r0.statistic > 0.01, "{}", r0.statistic);
        assert!(r0.statistic > r2.statistic);
        assert!(r0.p_value > 0.0 && r0.p_value <= 1.0);
    }
}

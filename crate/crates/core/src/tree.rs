//! Regression tree base learner.
//!
//! Splits minimise the weighted sum of squared errors by exhaustive search:
//! every midpoint between consecutive distinct values of a quantitative
//! feature, and every prefix of the mean-ordered levels of a categorical
//! feature (every level subset when the node has missing values and at most
//! 12 levels). For each candidate both routings of the rows with a missing
//! value are evaluated and the better one is stored as the node's default
//! direction, so every input reaches exactly one leaf.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical features with at most this many observed levels get an
/// exhaustive subset search when the node has missing values.
const EXHAUSTIVE_LEVELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Quantitative,
    /// Values are level indices `0..n_levels` stored as `f64`.
    Categorical {
        n_levels: u32,
    },
}

/// Column-major feature matrix; `NaN` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
    kinds: Vec<FeatureKind>,
    /// Per feature, the non-missing rows sorted by (value, row).
    order: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn new(columns: Vec<Vec<f64>>, kinds: Vec<FeatureKind>) -> Result<Self> {
        if columns.len() != kinds.len() {
            return Err(Error::Config(format!(
                "{} columns but {} feature kinds",
                columns.len(),
                kinds.len()
            )));
        }
        let n_rows = columns.first().map_or(0, Vec::len);
        for (j, (col, kind)) in columns.iter().zip(&kinds).enumerate() {
            if col.len() != n_rows {
                return Err(Error::Config(format!(
                    "column {j} has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            for (i, &v) in col.iter().enumerate() {
                if v.is_nan() {
                    continue;
                }
                let ok = match kind {
                    FeatureKind::Quantitative => v.is_finite(),
                    FeatureKind::Categorical { n_levels } => v >= 0.0 && v.fract() == 0.0 && v < *n_levels as f64,
                };
                if !ok {
                    return Err(Error::Config(format!("column {j} row {i}: invalid value {v}")));
                }
            }
        }
        let order = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n_rows as u32).filter(|&i| !col[i as usize].is_nan()).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(Self {
            n_rows,
            columns,
            kinds,
            order,
        })
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], kinds: Vec<FeatureKind>) -> Result<Self> {
        let p = kinds.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
            return Err(Error::Arity {
                expected: p,
                got: r.len(),
            })
            .map_err(|e| Error::Config(format!("row {i}: {e}")));
        }
        let columns = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self::new(columns, kinds)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 3,
            min_leaf: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Threshold(f64),
    /// Level sets seen at training time; other levels follow the missing direction.
    Levels { left: Vec<u32>, right: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        rule: SplitRule,
        missing: Direction,
        /// Weighted squared-error reduction achieved by this split.
        gain: f64,
        count: usize,
        left: usize,
        right: usize,
    },
}

/// Fitted regression tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRecord", into = "TreeRecord")]
pub struct TreeModel {
    nodes: Vec<Node>,
    n_features: usize,
    depth: usize,
    feature_gains: Vec<f64>,
}

impl TreeModel {
    pub fn leaf(value: f64, count: usize, n_features: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, count }],
            n_features,
            depth: 0,
            feature_gains: vec![0.0; n_features],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Sum of split gains per feature.
    pub fn feature_gains(&self) -> &[f64] {
        &self.feature_gains
    }

    /// Features used by at least one split.
    pub fn split_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Index of the leaf reached by the input whose feature `j` is `get(j)`.
    #[inline]
    pub fn leaf_index_with<F: Fn(usize) -> f64>(&self, get: F) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    rule,
                    missing,
                    left,
                    right,
                    ..
                } => {
                    let dir = route(get(*feature), rule, *missing);
                    at = if dir == Direction::Left { *left } else { *right };
                }
            }
        }
    }

    #[inline]
    pub fn predict_with<F: Fn(usize) -> f64>(&self, get: F) -> f64 {
        match self.nodes[self.leaf_index_with(get)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!("leaf_index_with returns leaves"),
        }
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

    pub(crate) fn leaf_index_row(&self, data: &Dataset, row: usize) -> usize {
        self.leaf_index_with(|j| data.value(row, j))
    }

    pub(crate) fn set_leaf_value(&mut self, node: usize, v: f64) {
        if let Node::Leaf { value, .. } = &mut self.nodes[node] {
            *value = v;
        }
    }
}

#[inline]
pub(crate) fn route(v: f64, rule: &SplitRule, missing: Direction) -> Direction {
    if v.is_nan() {
        return missing;
    }
    match rule {
        SplitRule::Threshold(t) => {
            if v <= *t {
                Direction::Left
            } else {
                Direction::Right
            }
        }
        SplitRule::Levels { left, right } => {
            if v < 0.0 || v.fract() != 0.0 {
                return missing;
            }
            let level = v as u32;
            if left.binary_search(&level).is_ok() {
                Direction::Left
            } else if right.binary_search(&level).is_ok() {
                Direction::Right
            } else {
                missing
            }
        }
    }
}

/// Per-feature importance `I²_j`: summed squared-error improvement of the
/// splits on feature `j`, zero for unused features.
pub fn tree_importance(tree: &TreeModel) -> Vec<f64> {
    tree.feature_gains.clone()
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    w: f64,
    s: f64,
    n: usize,
}

impl Stats {
    #[inline]
    fn add(&mut self, w: f64, y: f64) {
        self.w += w;
        self.s += w * y;
        self.n += 1;
    }

    #[inline]
    fn plus(self, o: Stats) -> Stats {
        Stats {
            w: self.w + o.w,
            s: self.s + o.s,
            n: self.n + o.n,
        }
    }

    #[inline]
    fn minus(self, o: Stats) -> Stats {
        Stats {
            w: self.w - o.w,
            s: self.s - o.s,
            n: self.n - o.n,
        }
    }

    #[inline]
    fn mean(self) -> f64 {
        self.s / self.w
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    feature: usize,
    rule: SplitRule,
    missing: Direction,
    gain: f64,
}

/// Weighted SSE reduction of splitting `total` into `l` and `r`.
#[inline]
fn split_gain(l: Stats, r: Stats) -> f64 {
    let d = l.mean() - r.mean();
    l.w * r.w / (l.w + r.w) * d * d
}

struct Builder<'a> {
    data: &'a Dataset,
    targets: &'a [f64],
    weights: Option<&'a [f64]>,
    params: TreeParams,
    tag: Vec<u32>,
    next_tag: u32,
    nodes: Vec<Node>,
    gains: Vec<f64>,
    depth: usize,
}

impl Builder<'_> {
    #[inline]
    fn weight(&self, row: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[row])
    }

    fn node_stats(&self, rows: &[u32]) -> (Stats, f64) {
        let mut st = Stats::default();
        for &r in rows {
            st.add(self.weight(r as usize), self.targets[r as usize]);
        }
        let mean = st.mean();
        let sse = rows
            .iter()
            .map(|&r| {
                let d = self.targets[r as usize] - mean;
                self.weight(r as usize) * d * d
            })
            .sum::<f64>();
        (st, sse)
    }

    fn build(&mut self, rows: Vec<u32>, depth: usize) -> usize {
        let (total, sse) = self.node_stats(&rows);
        let mean = total.mean();
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: mean,
            count: total.n,
        });
        self.depth = self.depth.max(depth);

        let constant = sse <= total.w * (1e-13 * mean.abs()).powi(2);
        if depth >= self.params.max_depth || total.n < 2 * self.params.min_leaf || constant {
            return idx;
        }

        let tag = self.next_tag;
        self.next_tag += 1;
        for &r in &rows {
            self.tag[r as usize] = tag;
        }

        let best = self.best_split(&rows, tag, total);
        let best = match best {
            Some(c) if c.gain > 1e-12 * sse => c,
            _ => return idx,
        };

        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in &rows {
            match route(self.data.value(r as usize, best.feature), &best.rule, best.missing) {
                Direction::Left => left_rows.push(r),
                Direction::Right => right_rows.push(r),
            }
        }
        // With no missing rows at this node the learned direction is
        // arbitrary; send future missing values to the larger child.
        let missing = if rows.iter().any(|&r| self.data.value(r as usize, best.feature).is_nan()) {
            best.missing
        } else if right_rows.len() > left_rows.len() {
            Direction::Right
        } else {
            Direction::Left
        };
        self.gains[best.feature] += best.gain;

        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[idx] = Node::Split {
            feature: best.feature,
            rule: best.rule,
            missing,
            gain: best.gain,
            count: total.n,
            left,
            right,
        };
        idx
    }

    fn best_split(&self, rows: &[u32], tag: u32, total: Stats) -> Option<Candidate> {
        let per_feature: Vec<Option<Candidate>> = (0..self.data.n_features())
            .into_par_iter()
            .map(|f| match self.data.kinds()[f] {
                FeatureKind::Quantitative => self.best_threshold(f, rows, tag, total),
                FeatureKind::Categorical { n_levels } => self.best_levels(f, n_levels, rows, total),
            })
            .collect();
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
        best
    }

    fn missing_stats(&self, f: usize, rows: &[u32]) -> Stats {
        let mut m = Stats::default();
        for &r in rows {
            if self.data.value(r as usize, f).is_nan() {
                m.add(self.weight(r as usize), self.targets[r as usize]);
            }
        }
        m
    }

    /// Evaluates both missing routings; returns the better (Left wins ties).
    fn evaluate(&self, left: Stats, present: Stats, missing: Stats) -> Option<(Direction, f64)> {
        let right = present.minus(left);
        let min = self.params.min_leaf;
        let mut best: Option<(Direction, f64)> = None;
        for dir in [Direction::Left, Direction::Right] {
            let (l, r) = match dir {
                Direction::Left => (left.plus(missing), right),
                Direction::Right => (left, right.plus(missing)),
            };
            if l.n < min || r.n < min || l.n == 0 || r.n == 0 || !(l.w > 0.0) || !(r.w > 0.0) {
                continue;
            }
            let g = split_gain(l, r);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((dir, g));
            }
        }
        best
    }

    fn best_threshold(&self, f: usize, rows: &[u32], tag: u32, total: Stats) -> Option<Candidate> {
        let missing = self.missing_stats(f, rows);
        let present = total.minus(missing);
        if present.n < 2 {
            return None;
        }
        let col = self.data.column(f);
        let mut left = Stats::default();
        let mut prev = f64::NAN;
        let mut best: Option<Candidate> = None;
        for &r in &self.data.order[f] {
            if self.tag[r as usize] != tag {
                continue;
            }
            let v = col[r as usize];
            if left.n > 0 && v > prev {
                if let Some((dir, gain)) = self.evaluate(left, present, missing) {
                    if best.as_ref().is_none_or(|b| gain > b.gain) {
                        let mut t = prev + (v - prev) / 2.0;
                        if t >= v {
                            t = prev;
                        }
                        best = Some(Candidate {
                            feature: f,
                            rule: SplitRule::Threshold(t),
                            missing: dir,
                            gain,
                        });
                    }
                }
            }
            left.add(self.weight(r as usize), self.targets[r as usize]);
            prev = v;
        }
        best
    }

    fn best_levels(&self, f: usize, n_levels: u32, rows: &[u32], total: Stats) -> Option<Candidate> {
        let mut per_level = vec![Stats::default(); n_levels as usize];
        let mut missing = Stats::default();
        for &r in rows {
            let v = self.data.value(r as usize, f);
            let (w, y) = (self.weight(r as usize), self.targets[r as usize]);
            if v.is_nan() {
                missing.add(w, y);
            } else {
                per_level[v as usize].add(w, y);
            }
        }
        let mut levels: Vec<u32> = (0..n_levels).filter(|&l| per_level[l as usize].n > 0).collect();
        if levels.len() < 2 {
            return None;
        }
        levels.sort_by(|&a, &b| {
            per_level[a as usize]
                .mean()
                .total_cmp(&per_level[b as usize].mean())
                .then(a.cmp(&b))
        });
        let present = total.minus(missing);
        let candidate = |left_levels: Vec<u32>, dir: Direction, gain: f64| {
            let mut l = left_levels;
            let mut r: Vec<u32> = levels.iter().copied().filter(|v| !l.contains(v)).collect();
            l.sort_unstable();
            r.sort_unstable();
            Candidate {
                feature: f,
                rule: SplitRule::Levels { left: l, right: r },
                missing: dir,
                gain,
            }
        };

        // Without missing rows the best partition is a cut in mean order. Missing
        // rows cannot form a child on their own, which breaks that argument, so
        // small level sets are searched exhaustively instead.
        let k = levels.len();
        if missing.n > 0 && k <= EXHAUSTIVE_LEVELS {
            // subset sums by lowest set bit; the last level always stays right
            let n_masks = 1usize << (k - 1);
            let mut sums = vec![Stats::default(); n_masks];
            let mut best: Option<(usize, Direction, f64)> = None;
            for mask in 1..n_masks {
                let low = mask.trailing_zeros() as usize;
                sums[mask] = sums[mask & (mask - 1)].plus(per_level[levels[low] as usize]);
                if let Some((dir, gain)) = self.evaluate(sums[mask], present, missing) {
                    if best.is_none_or(|(_, _, g)| gain > g) {
                        best = Some((mask, dir, gain));
                    }
                }
            }
            return best.map(|(mask, dir, gain)| {
                candidate(
                    (0..k - 1).filter(|b| mask >> b & 1 == 1).map(|b| levels[b]).collect(),
                    dir,
                    gain,
                )
            });
        }

        let mut left = Stats::default();
        let mut best: Option<(usize, Direction, f64)> = None;
        for k in 1..levels.len() {
            left = left.plus(per_level[levels[k - 1] as usize]);
            if let Some((dir, gain)) = self.evaluate(left, present, missing) {
                if best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((k, dir, gain));
                }
            }
        }
        best.map(|(k, dir, gain)| candidate(levels[..k].to_vec(), dir, gain))
    }
}

/// Fits a squared-error regression tree on `rows` (all rows when `None`).
///
/// Leaf values are the weighted mean target of the rows reaching them.
/// Growth stops at `max_depth`, when a child would hold fewer than
/// `min_leaf` rows, or when no split reduces the squared error.
pub fn fit_tree(
    data: &Dataset,
    targets: &[f64],
    weights: Option<&[f64]>,
    rows: Option<&[usize]>,
    params: &TreeParams,
) -> Result<TreeModel> {
    if params.max_depth < 1 {
        return Err(Error::Config("max_depth must be >= 1".into()));
    }
    if params.min_leaf < 1 {
        return Err(Error::Config("min_leaf must be >= 1".into()));
    }
    if targets.len() != data.n_rows() {
        return Err(Error::Config(format!(
            "{} targets for {} rows",
            targets.len(),
            data.n_rows()
        )));
    }
    if let Some(w) = weights {
        if w.len() != data.n_rows() {
            return Err(Error::Config(format!("{} weights for {} rows", w.len(), data.n_rows())));
        }
    }
    let rows: Vec<u32> = match rows {
        Some(r) => r.iter().map(|&i| i as u32).collect(),
        None => (0..data.n_rows() as u32).collect(),
    };
    if rows.is_empty() {
        return Err(Error::EmptyInput("no training rows"));
    }
    for &r in &rows {
        let r = r as usize;
        if r >= data.n_rows() {
            return Err(Error::Config(format!("row index {r} out of range")));
        }
        if !targets[r].is_finite() {
            return Err(Error::NonFinite {
                what: "target",
                index: r,
            });
        }
        if let Some(w) = weights {
            if !(w[r] > 0.0 && w[r].is_finite()) {
                return Err(Error::Domain(format!(
                    "weight at row {r} must be positive, got {}",
                    w[r]
                )));
            }
        }
    }

    let mut b = Builder {
        data,
        targets,
        weights,
        params: *params,
        tag: vec![u32::MAX; data.n_rows()],
        next_tag: 0,
        nodes: Vec::new(),
        gains: vec![0.0; data.n_features()],
        depth: 0,
    };
    b.build(rows, 0);
    Ok(TreeModel {
        nodes: b.nodes,
        n_features: data.n_features(),
        depth: b.depth,
        feature_gains: b.gains,
    })
}

// Nested on-disk form of a tree.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeRecord {
    n_features: usize,
    root: NodeRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NodeRecord {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        left_levels: Option<Vec<u32>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        right_levels: Option<Vec<u32>>,
        missing: Direction,
        gain: f64,
        count: usize,
        left: Box<NodeRecord>,
        right: Box<NodeRecord>,
    },
}

impl From<TreeModel> for TreeRecord {
    fn from(t: TreeModel) -> Self {
        fn nest(nodes: &[Node], at: usize) -> NodeRecord {
            match &nodes[at] {
                Node::Leaf { value, count } => NodeRecord::Leaf {
                    value: *value,
                    count: *count,
                },
                Node::Split {
                    feature,
                    rule,
                    missing,
                    gain,
                    count,
                    left,
                    right,
                } => {
                    let (threshold, left_levels, right_levels) = match rule {
                        SplitRule::Threshold(t) => (Some(*t), None, None),
                        SplitRule::Levels { left, right } => (None, Some(left.clone()), Some(right.clone())),
                    };
                    NodeRecord::Split {
                        feature: *feature,
                        threshold,
                        left_levels,
                        right_levels,
                        missing: *missing,
                        gain: *gain,
                        count: *count,
                        left: Box::new(nest(nodes, *left)),
                        right: Box::new(nest(nodes, *right)),
                    }
                }
            }
        }
        TreeRecord {
            n_features: t.n_features,
            root: nest(&t.nodes, 0),
        }
    }
}

impl TryFrom<TreeRecord> for TreeModel {
    type Error = String;

    fn try_from(rec: TreeRecord) -> std::result::Result<Self, String> {
        fn flatten(
            rec: NodeRecord,
            depth: usize,
            n_features: usize,
            out: &mut TreeModel,
        ) -> std::result::Result<usize, String> {
            let idx = out.nodes.len();
            out.depth = out.depth.max(depth);
            match rec {
                NodeRecord::Leaf { value, count } => {
                    if !value.is_finite() {
                        return Err("non-finite leaf value".into());
                    }
                    out.nodes.push(Node::Leaf { value, count });
                }
                NodeRecord::Split {
                    feature,
                    threshold,
                    left_levels,
                    right_levels,
                    missing,
                    gain,
                    count,
                    left,
                    right,
                } => {
                    if feature >= n_features {
                        return Err(format!("split feature {feature} out of range"));
                    }
                    let rule = match (threshold, left_levels, right_levels) {
                        (Some(t), None, None) if t.is_finite() => SplitRule::Threshold(t),
                        (None, Some(l), Some(r)) => SplitRule::Levels { left: l, right: r },
                        _ => return Err("split needs either a threshold or both level sets".into()),
                    };
                    out.feature_gains[feature] += gain;
                    out.nodes.push(Node::Leaf { value: 0.0, count: 0 });
                    let l = flatten(*left, depth + 1, n_features, out)?;
                    let r = flatten(*right, depth + 1, n_features, out)?;
                    out.nodes[idx] = Node::Split {
                        feature,
                        rule,
                        missing,
                        gain,
                        count,
                        left: l,
                        right: r,
                    };
                }
            }
            Ok(idx)
        }
        let mut t = TreeModel {
            nodes: Vec::new(),
            n_features: rec.n_features,
            depth: 0,
            feature_gains: vec![0.0; rec.n_features],
        };
        flatten(rec.root, 0, rec.n_features, &mut t)?;
        Ok(t)
    }
}

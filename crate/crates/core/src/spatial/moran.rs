use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::AdjacencyGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MoranMethod {
    /// Two-sided normal approximation under randomization.
    #[default]
    Normal,
    /// Two-sided test against `n_perm` random relabellings of the values.
    Permutation {
        n_perm: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub i: f64,
    /// `-1 / (n - 1)`.
    pub expected: f64,
    /// Standard deviation of `I` under the null (analytic or permutation).
    pub sd: f64,
    pub p_value: f64,
    pub method: MoranMethod,
    /// Number of tracts tested.
    pub n: usize,
}

impl MoranResult {
    pub fn z(&self) -> f64 {
        (self.i - self.expected) / self.sd
    }
}

/// Moran's I with binary weights over all tracts of `g`.
pub fn morans_i(values: &[f64], g: &AdjacencyGraph, method: MoranMethod) -> Result<MoranResult> {
    if values.len() != g.n() {
        return Err(Error::Arity {
            expected: g.n(),
            got: values.len(),
        });
    }
    moran_on(values, g.neighbor_lists(), method)
}

/// Moran's I on the subgraph induced by the tracts with a value.
pub fn morans_i_partial(values: &[Option<f64>], g: &AdjacencyGraph, method: MoranMethod) -> Result<MoranResult> {
    if values.len() != g.n() {
        return Err(Error::Arity {
            expected: g.n(),
            got: values.len(),
        });
    }
    if values.iter().all(Option::is_some) {
        let full: Vec<f64> = values.iter().map(|v| v.unwrap()).collect();
        return moran_on(&full, g.neighbor_lists(), method);
    }
    let mut local = vec![usize::MAX; g.n()];
    let mut kept = Vec::new();
    for (j, v) in values.iter().enumerate() {
        if let Some(x) = v {
            local[j] = kept.len();
            kept.push(*x);
        }
    }
    let nbrs: Vec<Vec<usize>> = (0..g.n())
        .filter(|&j| values[j].is_some())
        .map(|j| {
            g.neighbors(j)
                .iter()
                .filter(|&&k| local[k] != usize::MAX)
                .map(|&k| local[k])
                .collect()
        })
        .collect();
    moran_on(&kept, &nbrs, method)
}

fn cross_product(z: &[f64], nbrs: &[Vec<usize>]) -> f64 {
    nbrs.iter()
        .enumerate()
        .map(|(j, nb)| z[j] * nb.iter().map(|&k| z[k]).sum::<f64>())
        .sum()
}

fn moran_on(values: &[f64], nbrs: &[Vec<usize>], method: MoranMethod) -> Result<MoranResult> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Domain(format!("Moran's I needs at least 3 tracts, got {n}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "Moran's I input",
            index: i,
        });
    }
    let s0: f64 = nbrs.iter().map(Vec::len).sum::<usize>() as f64;
    if s0 == 0.0 {
        return Err(Error::Graph("no adjacent pairs among the tested tracts".into()));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let m2: f64 = z.iter().map(|v| v * v).sum();
    if !(m2 > 0.0) || values.iter().all(|&v| v == values[0]) {
        return Err(Error::ZeroVariance("values are constant".into()));
    }
    let scale = nf / s0;
    let i = scale * cross_product(&z, nbrs) / m2;
    let expected = -1.0 / (nf - 1.0);

    match method {
        MoranMethod::Normal => {
            let var = randomization_variance(&z, m2, nbrs, s0);
            let sd = var.max(0.0).sqrt();
            let p_value = if sd > 0.0 {
                let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
                (2.0 * std_normal.cdf(-((i - expected) / sd).abs())).min(1.0)
            } else {
                1.0
            };
            Ok(MoranResult {
                i,
                expected,
                sd,
                p_value,
                method,
                n,
            })
        }
        MoranMethod::Permutation { n_perm, seed } => {
            if n_perm < 1 {
                return Err(Error::Config("permutation test needs n_perm >= 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm = z.clone();
            let obs = (i - expected).abs();
            let mut exceed = 0usize;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n_perm {
                perm.shuffle(&mut rng);
                let ip = scale * cross_product(&perm, nbrs) / m2;
                sum += ip;
                sum_sq += ip * ip;
                // relative slack so permutations equal to the observed layout count
                if (ip - expected).abs() >= obs - 1e-12 * obs.max(1e-300) {
                    exceed += 1;
                }
            }
            let k = n_perm as f64;
            let mean_p = sum / k;
            let sd = ((sum_sq / k - mean_p * mean_p).max(0.0) * k / (k - 1.0).max(1.0)).sqrt();
            Ok(MoranResult {
                i,
                expected,
                sd,
                p_value: (exceed + 1) as f64 / (n_perm + 1) as f64,
                method,
                n,
            })
        }
    }
}

/// Variance of `I` under the randomization null; falls back to the
/// normality-assumption variance when `n < 4`.
fn randomization_variance(z: &[f64], m2: f64, nbrs: &[Vec<usize>], s0: f64) -> f64 {
    let n = z.len() as f64;
    // Binary symmetric weights: S1 = 2 S0, S2 = sum (2 d_j)^2.
    let s1 = 2.0 * s0;
    let s2: f64 = nbrs.iter().map(|nb| 4.0 * (nb.len() * nb.len()) as f64).sum();
    let e = -1.0 / (n - 1.0);
    if n < 4.0 {
        let ei2 = (n * n * s1 - n * s2 + 3.0 * s0 * s0) / ((n * n - 1.0) * s0 * s0);
        return ei2 - e * e;
    }
    let m4: f64 = z.iter().map(|v| v.powi(4)).sum();
    let b2 = n * m4 / (m2 * m2);
    let num = n * ((n * n - 3.0 * n + 3.0) * s1 - n * s2 + 3.0 * s0 * s0)
        - b2 * ((n * n - n) * s1 - 2.0 * n * s2 + 6.0 * s0 * s0);
    let ei2 = num / ((n - 1.0) * (n - 2.0) * (n - 3.0) * s0 * s0);
    ei2 - e * e
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::Rng;

    fn path(n: usize) -> AdjacencyGraph {
        let names = (0..n).map(|i| format!("p{i}")).collect();
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        AdjacencyGraph::from_index_edges(names, &edges).unwrap()
    }

    /// Direct dense evaluation of the definition.
    fn dense_moran(x: &[f64], g: &AdjacencyGraph) -> f64 {
        let n = x.len() as f64;
        let w = g.adjacency_dense();
        let mean = x.iter().sum::<f64>() / n;
        let z = DVector::from_iterator(x.len(), x.iter().map(|v| v - mean));
        let s0 = w.sum();
        (n / s0) * (z.transpose() * &w * &z)[(0, 0)] / z.dot(&z)
    }

    #[test]
    fn checkerboard_is_minus_one() {
        let g = AdjacencyGraph::grid(2, 2).unwrap();
        let r = morans_i(&[1.0, 0.0, 0.0, 1.0], &g, MoranMethod::Normal).unwrap();
        assert_eq!(r.i, -1.0);
        assert_eq!(r.expected, -1.0 / 3.0);
    }

    #[test]
    fn path_of_four() {
        let r = morans_i(&[1.0, 1.0, 0.0, 0.0], &path(4), MoranMethod::Normal).unwrap();
        assert!((r.i - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.i - dense_moran(&[1.0, 1.0, 0.0, 0.0], &path(4))).abs() < 1e-15);
    }

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> AdjacencyGraph {
        let names = (0..n).map(|i| format!("t{i}")).collect();
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
        for _ in 0..n {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.push((a, b));
            }
        }
        AdjacencyGraph::from_index_edges(names, &edges).unwrap()
    }

    #[test]
    fn matches_dense_formula_on_small_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 3..=6 {
            let g = random_graph(n, &mut rng);
            for _ in 0..100 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
                let r = morans_i(&x, &g, MoranMethod::Normal).unwrap();
                assert!((r.i - dense_moran(&x, &g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn location_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = AdjacencyGraph::grid(4, 5).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let b = rng.random_range(-50.0..50.0);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let ix = morans_i(&x, &g, MoranMethod::Normal).unwrap();
            let iy = morans_i(&y, &g, MoranMethod::Normal).unwrap();
            assert!((ix.i - iy.i).abs() < 1e-12, "{} vs {}", ix.i, iy.i);
            assert!((ix.p_value - iy.p_value).abs() < 1e-9);
        }
        // Scaling by a power of two and shifting by a representable offset is bit-exact.
        let x = [0.5, 1.0, 0.25, 2.0, 1.5, 0.75];
        let y: Vec<f64> = x.iter().map(|v| 4.0 * v - 3.0).collect();
        let g = path(6);
        assert_eq!(
            morans_i(&x, &g, MoranMethod::Normal).unwrap().i,
            morans_i(&y, &g, MoranMethod::Normal).unwrap().i
        );
    }

    #[test]
    fn constant_values_error() {
        let err = morans_i(&[2.0; 4], &path(4), MoranMethod::Normal).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance(_)));
        assert!(morans_i(&[1.0, 2.0], &path(2), MoranMethod::Normal).is_err());
    }

    #[test]
    fn variance_matches_permutation_distribution() {
        // Exhaustive enumeration of all 720 relabellings of 6 values on a path.
        let g = path(6);
        let x = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0];
        let mut perms = vec![];
        permute(&mut x.to_vec(), 0, &mut perms);
        let is: Vec<f64> = perms.iter().map(|p| dense_moran(p, &g)).collect();
        let mean = is.iter().sum::<f64>() / is.len() as f64;
        let var = is.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / is.len() as f64;
        let r = morans_i(&x, &g, MoranMethod::Normal).unwrap();
        assert!((mean - r.expected).abs() < 1e-12, "{mean} vs {}", r.expected);
        assert!((var - r.sd * r.sd).abs() < 1e-12, "{var} vs {}", r.sd * r.sd);
    }

    fn permute(v: &mut Vec<f64>, k: usize, out: &mut Vec<Vec<f64>>) {
        if k == v.len() {
            out.push(v.clone());
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, out);
            v.swap(k, i);
        }
    }

    #[test]
    fn strong_autocorrelation_is_significant_both_ways() {
        let g = AdjacencyGraph::grid(8, 8).unwrap();
        let smooth: Vec<f64> = (0..64).map(|i| (i / 8) as f64 + (i % 8) as f64).collect();
        let r = morans_i(&smooth, &g, MoranMethod::Normal).unwrap();
        assert!(r.i > 0.5 && r.p_value < 1e-6, "{r:?}");
        let checker: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect();
        let r = morans_i(&checker, &g, MoranMethod::Normal).unwrap();
        assert_eq!(r.i, -1.0);
        assert!(r.p_value < 1e-6);
        let rp = morans_i(&checker, &g, MoranMethod::Permutation { n_perm: 199, seed: 3 }).unwrap();
        assert_eq!(rp.p_value, 1.0 / 200.0);
    }

    #[test]
    fn permutation_p_value_is_reproducible_and_calibrated() {
        let g = AdjacencyGraph::grid(5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = MoranMethod::Permutation { n_perm: 999, seed: 5 };
        let a = morans_i(&x, &g, m).unwrap();
        let b = morans_i(&x, &g, m).unwrap();
        assert_eq!(a, b);
        let normal = morans_i(&x, &g, MoranMethod::Normal).unwrap();
        assert!(
            (a.p_value - normal.p_value).abs() < 0.1,
            "{} vs {}",
            a.p_value,
            normal.p_value
        );
        assert!((a.sd - normal.sd).abs() < 0.02);
    }

    #[test]
    fn partial_slot_uses_induced_subgraph() {
        let g = path(5);
        let vals = [Some(1.0), Some(1.0), None, Some(0.0), Some(0.0)];
        // remaining edges: 0-1 and 3-4, both joining equal values
        let r = morans_i_partial(&vals, &g, MoranMethod::Normal).unwrap();
        assert!((r.i - 1.0).abs() < 1e-15);
        assert_eq!(r.n, 4);
        let isolated = [Some(1.0), None, Some(2.0), None, Some(3.0)];
        assert!(morans_i_partial(&isolated, &g, MoranMethod::Normal).is_err());
    }
}

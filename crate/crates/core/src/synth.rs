//! Synthetic panels with a known covariate signal and planted CAR fields.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{validate_panel, Panel, RateTransform, RawPanel, RawResponse, RawRow};
use crate::spatial::AdjacencyGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SynthGraph {
    /// Rook lattice; tracts are named `r{row}c{col}`.
    Grid { rows: usize, cols: usize },
    /// Tracts `t0 .. t{n-1}` joined by the given index pairs.
    Edges {
        n_tracts: usize,
        edges: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    /// `2 x1 - x2 + 0.5 x3`.
    Linear,
    /// `2 sin(pi x1) + x2^2 + 1{x3 > 0}`.
    AdditiveNonlinear,
    /// Friedman #1 on `u = (x + 1) / 2`:
    /// `10 sin(pi u1 u2) + 20 (u3 - 0.5)^2 + 10 u4 + 5 u5`.
    Friedman,
}

impl Signal {
    /// Number of leading covariates the signal depends on.
    pub fn arity(self) -> usize {
        match self {
            Signal::Linear | Signal::AdditiveNonlinear => 3,
            Signal::Friedman => 5,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            Signal::Linear => 2.0 * x[0] - x[1] + 0.5 * x[2],
            Signal::AdditiveNonlinear => 2.0 * (PI * x[0]).sin() + x[1] * x[1] + if x[2] > 0.0 { 1.0 } else { 0.0 },
            Signal::Friedman => {
                let u: Vec<f64> = x[..5].iter().map(|v| 0.5 * (v + 1.0)).collect();
                10.0 * (PI * u[0] * u[1]).sin() + 20.0 * (u[2] - 0.5).powi(2) + 10.0 * u[3] + 5.0 * u[4]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub graph: SynthGraph,
    pub n_slots: usize,
    /// Time label of the first slot.
    pub first_time: i64,
    /// Total covariates, signal covariates first.
    pub p: usize,
    /// Trailing covariates that are categorical noise with four levels.
    pub n_categorical: usize,
    pub signal: Signal,
    /// 1-based slots receiving a CAR field; `None` plants every slot.
    pub spatial_slots: Option<Vec<usize>>,
    pub tau_true: f64,
    /// Observation noise variance; zero gives a noiseless panel.
    pub sigma2_true: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            graph: SynthGraph::Grid { rows: 10, cols: 10 },
            n_slots: 10,
            first_time: 1990,
            p: 6,
            n_categorical: 0,
            signal: Signal::AdditiveNonlinear,
            spatial_slots: None,
            tau_true: 1.0,
            sigma2_true: 0.1,
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

/// Generating values, aligned with the panel's observation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub f: Vec<f64>,
    pub noise: Vec<f64>,
    /// Planted field per (0-based slot, tract); all zero off the planted slots.
    pub phi: Vec<Vec<f64>>,
    /// 0-based planted slots.
    pub planted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub panel: Panel,
    pub graph: AdjacencyGraph,
    pub truth: Truth,
}

const LEVELS: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_slots == 0 {
            errs.push("n_slots must be at least 1".to_string());
        }
        if self.n_categorical > self.p || self.p - self.n_categorical < self.signal.arity() {
            errs.push(format!(
                "signal needs {} quantitative covariates but p = {} with {} categorical",
                self.signal.arity(),
                self.p,
                self.n_categorical
            ));
        }
        if !(self.tau_true.is_finite() && self.tau_true > 0.0) {
            errs.push(format!("tau_true must be positive, got {}", self.tau_true));
        }
        if !(self.sigma2_true.is_finite() && self.sigma2_true >= 0.0) {
            errs.push(format!("sigma2_true must be nonnegative, got {}", self.sigma2_true));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            errs.push(format!("missing_rate must be in [0, 1), got {}", self.missing_rate));
        }
        if let Some(slots) = &self.spatial_slots {
            let mut seen = vec![false; self.n_slots + 1];
            for &s in slots {
                if s < 1 || s > self.n_slots {
                    errs.push(format!("spatial slot {s} outside 1..={}", self.n_slots));
                } else if std::mem::replace(&mut seen[s], true) {
                    errs.push(format!("spatial slot {s} listed twice"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn build_graph(&self) -> Result<AdjacencyGraph> {
        let g = match &self.graph {
            SynthGraph::Grid { rows, cols } => AdjacencyGraph::grid(*rows, *cols)?,
            SynthGraph::Edges { n_tracts, edges } => {
                AdjacencyGraph::from_index_edges((0..*n_tracts).map(|i| format!("t{i}")).collect(), edges)?
            }
        };
        if g.n() < 3 {
            return Err(Error::Domain(format!("need at least 3 tracts, got {}", g.n())));
        }
        g.require_connected()?;
        Ok(g)
    }

    fn planted(&self) -> Vec<usize> {
        match &self.spatial_slots {
            None => (0..self.n_slots).collect(),
            Some(s) => {
                let mut v: Vec<usize> = s.iter().map(|t| t - 1).collect();
                v.sort_unstable();
                v
            }
        }
    }
}

/// Draws a sum-zero intrinsic CAR field with precision `tau` on `g`.
pub fn sample_icar(g: &AdjacencyGraph, tau: f64, rng: &mut impl Rng) -> Vec<f64> {
    let eig = SymmetricEigen::new(g.laplacian_dense());
    let mut order: Vec<usize> = (0..g.n()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    sample_from_spectrum(&eig, &order, tau, rng)
}

fn sample_from_spectrum(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    order: &[usize],
    tau: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let n = order.len();
    let mut phi = vec![0.0; n];
    // Skip the constant eigenvector.
    for &k in &order[1..] {
        let z: f64 = StandardNormal.sample(rng);
        let scale = z / (tau * eig.eigenvalues[k]).sqrt();
        for (i, p) in phi.iter_mut().enumerate() {
            *p += scale * eig.eigenvectors[(i, k)];
        }
    }
    let mean = phi.iter().sum::<f64>() / n as f64;
    phi.iter_mut().for_each(|v| *v -= mean);
    phi
}

/// Generates a complete panel (every tract observed in every slot).
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let g = spec.build_graph()?;
    let c = g.n();
    let n = c * spec.n_slots;
    let q = spec.p - spec.n_categorical;

    // Independent streams so e.g. changing missing_rate leaves x, phi and noise intact.
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k);
        r
    };

    let mut rng = stream(1);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let levels: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..spec.n_categorical).map(|_| rng.random_range(0..LEVELS)).collect())
        .collect();

    let planted = spec.planted();
    let mut phi = vec![vec![0.0; c]; spec.n_slots];
    if !planted.is_empty() {
        let mut rng = stream(2);
        let eig = SymmetricEigen::new(g.laplacian_dense());
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        for &t in &planted {
            phi[t] = sample_from_spectrum(&eig, &order, spec.tau_true, &mut rng);
        }
    }

    let mut rng = stream(3);
    let sd = spec.sigma2_true.sqrt();
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if sd > 0.0 {
                sd * z
            } else {
                0.0
            }
        })
        .collect();

    let mut rng = stream(4);
    let mut f = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for (t, phi_t) in phi.iter().enumerate() {
        for (j, &phi_tj) in phi_t.iter().enumerate() {
            let i = t * c + j;
            let fi = spec.signal.eval(&x[i]);
            f.push(fi);
            let mut cov: Vec<Option<String>> = x[i].iter().map(|v| Some(format!("{v}"))).collect();
            cov.extend(levels[i].iter().map(|l| Some(format!("L{l}"))));
            for cell in cov.iter_mut() {
                if spec.missing_rate > 0.0 && rng.random_bool(spec.missing_rate) {
                    *cell = None;
                }
            }
            rows.push(RawRow {
                tract: g.names()[j].clone(),
                time: spec.first_time + t as i64,
                response: RawResponse::Value(fi + phi_tj + noise[i]),
                covariates: cov,
            });
        }
    }
    let names: Vec<String> = (1..=spec.p).map(|k| format!("x{k}")).collect();
    let raw = RawPanel {
        categorical: names[q..].to_vec(),
        covariate_names: names,
        transform: RateTransform::default(),
        rows,
    };
    let panel = validate_panel(&raw)?;
    Ok(Synthetic {
        panel,
        graph: g,
        truth: Truth { f, noise, phi, planted },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovValue;

    fn spec() -> SynthSpec {
        SynthSpec {
            graph: SynthGraph::Grid { rows: 5, cols: 6 },
            n_slots: 4,
            p: 5,
            n_categorical: 1,
            spatial_slots: Some(vec![1, 3]),
            missing_rate: 0.05,
            seed: 42,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn shapes_and_planted_slots() {
        let s = generate(&spec()).unwrap();
        assert_eq!(s.panel.n(), 120);
        assert_eq!((s.panel.n_slots(), s.panel.n_tracts(), s.panel.p()), (4, 30, 5));
        assert_eq!(s.panel.slot_labels(), &[1990, 1991, 1992, 1993]);
        assert_eq!(s.truth.planted, vec![0, 2]);
        for t in 0..4 {
            let sum: f64 = s.truth.phi[t].iter().sum();
            assert!(sum.abs() < 1e-10);
            let zero = s.truth.phi[t].iter().all(|&v| v == 0.0);
            assert_eq!(zero, t == 1 || t == 3);
        }
        assert!(s.panel.covariates()[4].is_categorical());
        assert_eq!(s.panel.tracts(), s.graph.names());
    }

    #[test]
    fn response_decomposes_into_truth() {
        let s = generate(&spec()).unwrap();
        let c = s.graph.n();
        for (i, o) in s.panel.observations().iter().enumerate() {
            assert_eq!((o.slot, o.tract), (i / c, i % c));
            let expect = s.truth.f[i] + s.truth.phi[o.slot][o.tract] + s.truth.noise[i];
            assert_eq!(o.response, expect);
        }
    }

    #[test]
    fn noiseless_linear_is_exact() {
        let sp = SynthSpec {
            signal: Signal::Linear,
            sigma2_true: 0.0,
            spatial_slots: Some(vec![]),
            p: 3,
            ..spec()
        };
        let sp = SynthSpec {
            n_categorical: 0,
            missing_rate: 0.0,
            ..sp
        };
        let s = generate(&sp).unwrap();
        for (o, f) in s.panel.observations().iter().zip(&s.truth.f) {
            assert_eq!(o.response, *f);
            let x: Vec<f64> = o.covariates.iter().map(|v| v.as_f64()).collect();
            assert_eq!(*f, Signal::Linear.eval(&x));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.panel, b.panel);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SynthSpec { seed: 43, ..spec() }).unwrap();
        assert_ne!(a.truth.f, c.truth.f);
        // missingness has its own stream
        let d = generate(&SynthSpec {
            missing_rate: 0.0,
            ..spec()
        })
        .unwrap();
        assert_eq!(a.truth, d.truth);
    }

    #[test]
    fn missing_rate_is_respected() {
        let sp = SynthSpec {
            graph: SynthGraph::Grid { rows: 10, cols: 10 },
            n_slots: 10,
            p: 6,
            n_categorical: 0,
            missing_rate: 0.07,
            seed: 7,
            ..SynthSpec::default()
        };
        let s = generate(&sp).unwrap();
        let frac = s.panel.missing_fraction();
        assert!((frac - 0.07).abs() < 0.01, "{frac}");
        // responses are never missing
        assert!(s.panel.responses().iter().all(|v| v.is_finite()));
        assert!(s
            .panel
            .observations()
            .iter()
            .any(|o| o.covariates.contains(&CovValue::Missing)));
    }

    #[test]
    fn generated_panel_revalidates() {
        let s = generate(&spec()).unwrap();
        let again = validate_panel(&s.panel.to_raw()).unwrap();
        assert_eq!(again, s.panel);
    }

    #[test]
    fn icar_sample_has_requested_precision() {
        // E[phi' L phi] = (C - 1) / tau for the intrinsic CAR.
        let g = AdjacencyGraph::grid(6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau = 2.5;
        let reps = 2000;
        let mean_q: f64 = (0..reps)
            .map(|_| g.laplacian_quad(&sample_icar(&g, tau, &mut rng)))
            .sum::<f64>()
            / reps as f64;
        let expect = 35.0 / tau;
        // sd of the mean is sqrt(2 * 35) / tau / sqrt(reps)
        assert!((mean_q - expect).abs() < 4.0 * (70.0f64).sqrt() / tau / (reps as f64).sqrt());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec {
            missing_rate: 1.0,
            ..spec()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            spatial_slots: Some(vec![5]),
            ..spec()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            tau_true: 0.0,
            ..spec()
        })
        .is_err());
        assert!(generate(&SynthSpec { p: 3, ..spec() }).is_err());
        let split = SynthGraph::Edges {
            n_tracts: 4,
            edges: vec![(0, 1), (2, 3)],
        };
        let err = generate(&SynthSpec { graph: split, ..spec() }).unwrap_err();
        assert!(err.to_string().contains("components"), "{err}");
    }
}

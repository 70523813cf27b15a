use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AdjacencyGraph;
use crate::error::{Error, Result};

/// Estimator for the hyperparameters `(sigma2, tau_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarMethod {
    /// Mode of the posterior of `(sigma2, tau)` with `phi` integrated out
    /// (projected Newton); `phi` is then the conditional mode.
    #[default]
    Marginal,
    /// Coordinate-wise maximization of the joint posterior of `(phi, sigma2, tau)`.
    JointIcm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarConfig {
    pub method: CarMethod,
    pub max_sweeps: usize,
    /// Stop once every parameter changes by less than this, relatively.
    pub tol: f64,
    pub tau_max: f64,
    pub sigma2_floor: f64,
    /// Relative residual for the conjugate-gradient solve.
    pub cg_tol: f64,
}

impl Default for CarConfig {
    fn default() -> Self {
        Self {
            method: CarMethod::Marginal,
            max_sweeps: 100,
            tol: 1e-8,
            tau_max: 1e6,
            sigma2_floor: 1e-12,
            cg_tol: 1e-12,
        }
    }
}

impl CarConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.max_sweeps == 0 {
            errs.push("car.max_sweeps must be at least 1".to_string());
        }
        for (name, v) in [
            ("car.tol", self.tol),
            ("car.tau_max", self.tau_max),
            ("car.sigma2_floor", self.sigma2_floor),
            ("car.cg_tol", self.cg_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Spatial random effects per (slot, tract). Slots outside the smoothed set
/// have `tau = None` and an all-zero `phi` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialField {
    pub phi: Vec<Vec<f64>>,
    pub tau: Vec<Option<f64>>,
    /// `None` when no slot is smoothed.
    pub sigma2: Option<f64>,
}

impl SpatialField {
    pub fn zeros(n_slots: usize, n_tracts: usize) -> Self {
        Self {
            phi: vec![vec![0.0; n_tracts]; n_slots],
            tau: vec![None; n_slots],
            sigma2: None,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.phi.len()
    }

    pub fn n_tracts(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    pub fn in_s(&self, slot: usize) -> bool {
        self.tau[slot].is_some()
    }

    /// Smoothed slots, ascending.
    pub fn slots(&self) -> Vec<usize> {
        (0..self.n_slots()).filter(|&t| self.in_s(t)).collect()
    }

    pub fn value(&self, slot: usize, tract: usize) -> f64 {
        self.phi[slot][tract]
    }

    pub fn is_zero(&self) -> bool {
        self.phi.iter().flatten().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarFit {
    pub field: SpatialField,
    pub sweeps: usize,
    pub converged: bool,
    /// Slots whose `tau` hit `tau_max`.
    pub pinned: Vec<usize>,
    /// Objective before the first sweep and after each sweep.
    pub objective: Vec<f64>,
    /// Starting `tau` per smoothed slot (warm-started or default).
    pub tau_start: Vec<(usize, f64)>,
    pub sigma2_start: f64,
}

/// One slot of residuals to smooth; `values` covers every tract.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotResiduals {
    pub slot: usize,
    pub values: Vec<f64>,
}

/// CAR smoother bound to one graph; caches the Laplacian spectrum.
#[derive(Debug, Clone)]
pub struct CarSmoother<'g> {
    graph: &'g AdjacencyGraph,
    spectrum: Option<(Vec<f64>, DMatrix<f64>)>,
}

impl<'g> CarSmoother<'g> {
    pub fn new(graph: &'g AdjacencyGraph) -> Result<Self> {
        graph.require_connected()?;
        Ok(Self { graph, spectrum: None })
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        self.graph
    }

    /// Eigenpairs of the Laplacian sorted ascending; index 0 is the constant vector.
    fn spectrum(&mut self) -> &(Vec<f64>, DMatrix<f64>) {
        let g = self.graph;
        self.spectrum.get_or_insert_with(|| {
            let eig = SymmetricEigen::new(g.laplacian_dense());
            let mut order: Vec<usize> = (0..g.n()).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let vals = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
            let vecs = DMatrix::from_fn(g.n(), g.n(), |i, k| eig.eigenvectors[(i, order[k])]);
            (vals, vecs)
        })
    }

    /// Smooths residuals on the given slots. `init` warm-starts `tau`, `sigma2`
    /// and (for joint ICM) `phi`.
    pub fn smooth(
        &mut self,
        residuals: &[SlotResiduals],
        n_slots: usize,
        init: Option<&SpatialField>,
        cfg: &CarConfig,
    ) -> Result<CarFit> {
        cfg.validate()?;
        let c = self.graph.n();
        check_input(residuals, n_slots, c)?;
        if let Some(f) = init {
            if f.n_slots() != n_slots || f.n_tracts() != c {
                return Err(Error::Domain(format!(
                    "initial field is {}x{}, expected {n_slots}x{c}",
                    f.n_slots(),
                    f.n_tracts()
                )));
            }
        }
        let n_obs = (residuals.len() * c) as f64;
        let total: f64 = residuals.iter().flat_map(|s| &s.values).map(|v| v * v).sum();
        if total == 0.0 {
            let mut field = SpatialField::zeros(n_slots, c);
            for s in residuals {
                field.tau[s.slot] = Some(cfg.tau_max);
            }
            field.sigma2 = Some(cfg.sigma2_floor);
            return Ok(CarFit {
                field,
                sweeps: 0,
                converged: true,
                pinned: residuals.iter().map(|s| s.slot).collect(),
                objective: vec![],
                tau_start: residuals.iter().map(|s| (s.slot, cfg.tau_max)).collect(),
                sigma2_start: cfg.sigma2_floor,
            });
        }

        let centered_ss: f64 = residuals
            .iter()
            .map(|s| {
                let m = mean(&s.values);
                s.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            })
            .sum();
        let default_sigma2 = (0.5 * centered_ss / n_obs).max(cfg.sigma2_floor);
        let sigma2_start = init
            .and_then(|f| f.sigma2)
            .filter(|s| s.is_finite() && *s > 0.0)
            .unwrap_or(default_sigma2)
            .max(cfg.sigma2_floor);
        let tau_start: Vec<f64> = residuals
            .iter()
            .map(|s| {
                init.and_then(|f| f.tau[s.slot])
                    .filter(|t| t.is_finite() && *t > 0.0)
                    .unwrap_or(1.0 / sigma2_start)
                    .min(cfg.tau_max)
            })
            .collect();

        let run = match cfg.method {
            CarMethod::Marginal => self.run_marginal(residuals, sigma2_start, tau_start.clone(), cfg),
            CarMethod::JointIcm => {
                let phi0: Vec<Vec<f64>> = residuals
                    .iter()
                    .map(|s| init.map_or_else(|| vec![0.0; c], |f| f.phi[s.slot].clone()))
                    .collect();
                run_icm(self.graph, residuals, sigma2_start, tau_start.clone(), phi0, cfg)?
            }
        };

        let mut field = SpatialField::zeros(n_slots, c);
        // Final conditional-mode solve at the estimated hyperparameters.
        let phis: Vec<Vec<f64>> = match run.phi {
            Some(p) => p,
            None => residuals
                .par_iter()
                .zip(run.tau.par_iter())
                .map(|(s, &tau)| solve_centered(self.graph, &s.values, run.sigma2 * tau, cfg.cg_tol))
                .collect::<Result<_>>()?,
        };
        for ((s, phi), &tau) in residuals.iter().zip(phis).zip(&run.tau) {
            field.phi[s.slot] = phi;
            field.tau[s.slot] = Some(tau);
        }
        field.sigma2 = Some(run.sigma2);
        let pinned = residuals
            .iter()
            .zip(&run.tau)
            .filter(|(_, &t)| t >= cfg.tau_max)
            .map(|(s, _)| s.slot)
            .collect();
        Ok(CarFit {
            field,
            sweeps: run.sweeps,
            converged: run.converged,
            pinned,
            objective: run.objective,
            tau_start: residuals.iter().map(|s| s.slot).zip(tau_start).collect(),
            sigma2_start,
        })
    }

    fn run_marginal(&mut self, residuals: &[SlotResiduals], sigma2: f64, tau: Vec<f64>, cfg: &CarConfig) -> Run {
        let (lambda, vecs) = self.spectrum().clone();
        // Coordinates of each slot in the eigenbasis.
        let coords: Vec<Vec<f64>> = residuals
            .iter()
            .map(|s| {
                (vecs.transpose() * DVector::from_column_slice(&s.values))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        // Work in x = (ln sigma2, ln tau_1, ..., ln tau_S).
        let lower: Vec<f64> = std::iter::once(cfg.sigma2_floor.ln())
            .chain(std::iter::repeat_n(LN_TAU_MIN, tau.len()))
            .collect();
        let upper: Vec<f64> = std::iter::once(f64::INFINITY)
            .chain(std::iter::repeat_n(cfg.tau_max.ln(), tau.len()))
            .collect();
        let mut x: Vec<f64> = std::iter::once(sigma2.ln()).chain(tau.iter().map(|t| t.ln())).collect();
        let dim = x.len();
        let (mut f, mut grad, mut hess) = marginal_terms(&coords, &lambda, &x);
        let mut objective = vec![f];
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < cfg.max_sweeps {
            sweeps += 1;
            let free: Vec<usize> = (0..dim)
                .filter(|&i| !((x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0)))
                .collect();
            if free.is_empty() {
                converged = true;
                break;
            }
            let step = newton_step(&hess, &grad, &free);
            let slope: f64 = free.iter().zip(&step).map(|(&i, d)| grad[i] * d).sum();
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-10 {
                let mut trial = x.clone();
                for (&i, d) in free.iter().zip(&step) {
                    trial[i] = (x[i] + alpha * d).clamp(lower[i], upper[i]);
                }
                let terms = marginal_terms(&coords, &lambda, &trial);
                if terms.0 <= f + 1e-4 * alpha * slope.min(0.0) {
                    accepted = Some((trial, terms));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, terms)) = accepted else {
                // No representable decrease left.
                converged = true;
                break;
            };
            let change = x.iter().zip(&trial).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = trial;
            (f, grad, hess) = terms;
            objective.push(f);
            if change < cfg.tol {
                converged = true;
                break;
            }
        }
        Run {
            phi: None,
            sigma2: x[0].exp().max(cfg.sigma2_floor),
            tau: x[1..].iter().map(|u| u.exp().min(cfg.tau_max)).collect(),
            sweeps,
            converged,
            objective,
        }
    }
}

const LN_TAU_MIN: f64 = -46.0;

/// Newton direction on the free coordinates, with Levenberg damping when the
/// Hessian block is not positive definite.
fn newton_step(hess: &DMatrix<f64>, grad: &[f64], free: &[usize]) -> Vec<f64> {
    let m = free.len();
    let h = DMatrix::from_fn(m, m, |a, b| hess[(free[a], free[b])]);
    let g = DVector::from_iterator(m, free.iter().map(|&i| grad[i]));
    let scale = (0..m).map(|i| h[(i, i)].abs()).fold(1e-12, f64::max);
    let mut damping = 0.0;
    for _ in 0..60 {
        let shifted = &h + DMatrix::identity(m, m) * damping;
        if let Some(chol) = shifted.cholesky() {
            let d = chol.solve(&(-&g));
            if d.iter().all(|v| v.is_finite()) {
                return d.as_slice().to_vec();
            }
        }
        damping = if damping == 0.0 { 1e-10 * scale } else { damping * 10.0 };
    }
    g.iter().map(|v| -v).collect()
}

/// Negative log marginal posterior of `(sigma2, tau)` (constants dropped) with
/// its gradient and Hessian in `x = (ln sigma2, ln tau_t...)`.
///
/// In the Laplacian eigenbasis slot coordinate `z_k` has variance
/// `sigma2 + 1 / (tau lambda_k)`, or `sigma2` along the constant vector.
fn marginal_terms(coords: &[Vec<f64>], lambda: &[f64], x: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let dim = x.len();
    let sigma2 = x[0].exp();
    let mut f = 0.0;
    let mut grad = vec![0.0; dim];
    let mut hess = DMatrix::zeros(dim, dim);
    for (t, z) in coords.iter().enumerate() {
        let u = 1 + t;
        let inv_tau = (-x[u]).exp();
        let q0 = z[0] * z[0] / sigma2;
        f += 0.5 * (x[0] + q0);
        grad[0] += 0.5 * (1.0 - q0);
        hess[(0, 0)] += 0.5 * q0;
        for k in 1..z.len() {
            let a = inv_tau / lambda[k];
            let v = sigma2 + a;
            let z2 = z[k] * z[k];
            f += 0.5 * (v.ln() + z2 / v);
            let d1 = 0.5 * (1.0 / v - z2 / (v * v));
            let d2 = 0.5 * (2.0 * z2 / (v * v * v) - 1.0 / (v * v));
            grad[0] += d1 * sigma2;
            grad[u] -= d1 * a;
            hess[(0, 0)] += d2 * sigma2 * sigma2 + d1 * sigma2;
            hess[(u, u)] += d2 * a * a + d1 * a;
            hess[(0, u)] -= d2 * sigma2 * a;
        }
        hess[(u, 0)] = hess[(0, u)];
    }
    (f, grad, hess)
}

struct Run {
    phi: Option<Vec<Vec<f64>>>,
    sigma2: f64,
    tau: Vec<f64>,
    sweeps: usize,
    converged: bool,
    objective: Vec<f64>,
}

/// Convenience wrapper building a one-shot [`CarSmoother`].
pub fn car_smooth(
    residuals: &[SlotResiduals],
    n_slots: usize,
    g: &AdjacencyGraph,
    init: Option<&SpatialField>,
    cfg: &CarConfig,
) -> Result<CarFit> {
    CarSmoother::new(g)?.smooth(residuals, n_slots, init, cfg)
}

fn check_input(residuals: &[SlotResiduals], n_slots: usize, c: usize) -> Result<()> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput("no slots to smooth"));
    }
    let mut seen = vec![false; n_slots];
    for s in residuals {
        if s.slot >= n_slots {
            return Err(Error::Domain(format!(
                "slot {} out of range for {n_slots} slots",
                s.slot
            )));
        }
        if std::mem::replace(&mut seen[s.slot], true) {
            return Err(Error::Domain(format!("slot {} given twice", s.slot)));
        }
        if s.values.len() != c {
            return Err(Error::Arity {
                expected: c,
                got: s.values.len(),
            });
        }
        if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "CAR residual",
                index: i,
            });
        }
    }
    Ok(())
}

/// Negative log joint posterior of `(phi, sigma2, tau)`, constants dropped.
pub fn joint_objective(g: &AdjacencyGraph, r: &[Vec<f64>], phi: &[Vec<f64>], sigma2: f64, tau: &[f64]) -> f64 {
    let rank = (g.n() - 1) as f64;
    let n_obs: usize = r.iter().map(Vec::len).sum();
    let mut v = 0.5 * n_obs as f64 * sigma2.ln();
    for ((rt, pt), &t) in r.iter().zip(phi).zip(tau) {
        let ss: f64 = rt.iter().zip(pt).map(|(a, b)| (a - b) * (a - b)).sum();
        v += 0.5 * ss / sigma2 + 0.5 * t * g.laplacian_quad(pt) - 0.5 * rank * t.ln();
    }
    v
}

fn run_icm(
    g: &AdjacencyGraph,
    residuals: &[SlotResiduals],
    sigma2: f64,
    tau: Vec<f64>,
    phi: Vec<Vec<f64>>,
    cfg: &CarConfig,
) -> Result<Run> {
    let n_obs = (residuals.len() * g.n()) as f64;
    let rank = (g.n() - 1) as f64;
    let r: Vec<Vec<f64>> = residuals.iter().map(|s| s.values.clone()).collect();
    let mut sigma2 = sigma2;
    let mut tau = tau;
    let mut phi = phi;
    let mut objective = vec![joint_objective(g, &r, &phi, sigma2, &tau)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let new_phi: Vec<Vec<f64>> = r
            .par_iter()
            .zip(tau.par_iter())
            .map(|(rt, &t)| solve_centered(g, rt, sigma2 * t, cfg.cg_tol))
            .collect::<Result<_>>()?;
        let ss: f64 = r
            .iter()
            .zip(&new_phi)
            .flat_map(|(rt, pt)| rt.iter().zip(pt).map(|(a, b)| (a - b) * (a - b)))
            .sum();
        let new_sigma2 = (ss / n_obs).max(cfg.sigma2_floor);
        let new_tau: Vec<f64> = new_phi
            .iter()
            .map(|p| {
                let q = g.laplacian_quad(p);
                if q < 1e-12 {
                    cfg.tau_max
                } else {
                    (rank / q).min(cfg.tau_max)
                }
            })
            .collect();
        let phi_change = phi
            .iter()
            .zip(&new_phi)
            .map(|(a, b)| vec_rel_change(a, b))
            .fold(0.0, f64::max);
        let change = phi_change.max(rel_change(sigma2, new_sigma2)).max(
            tau.iter()
                .zip(&new_tau)
                .map(|(a, b)| rel_change(*a, *b))
                .fold(0.0, f64::max),
        );
        phi = new_phi;
        sigma2 = new_sigma2;
        tau = new_tau;
        objective.push(joint_objective(g, &r, &phi, sigma2, &tau));
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Run {
        phi: Some(phi),
        sigma2,
        tau,
        sweeps,
        converged,
        objective,
    })
}

fn rel_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else {
        (new - old).abs() / old.abs().max(new.abs())
    }
}

fn vec_rel_change(old: &[f64], new: &[f64]) -> f64 {
    let diff: f64 = old.iter().zip(new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    let norm = old
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(new.iter().map(|a| a * a).sum::<f64>().sqrt());
    diff / norm
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn solve_centered(g: &AdjacencyGraph, r: &[f64], kappa: f64, tol: f64) -> Result<Vec<f64>> {
    let mut phi = solve_system(g, r, kappa, tol)?;
    let m = mean(&phi);
    phi.iter_mut().for_each(|v| *v -= m);
    Ok(phi)
}

/// Solves `(I / sigma2 + tau L) phi = r / sigma2` without centering.
pub fn solve_phi(g: &AdjacencyGraph, r: &[f64], sigma2: f64, tau: f64, tol: f64) -> Result<Vec<f64>> {
    if r.len() != g.n() {
        return Err(Error::Arity {
            expected: g.n(),
            got: r.len(),
        });
    }
    if !(sigma2 > 0.0 && tau >= 0.0) {
        return Err(Error::Domain(format!(
            "need sigma2 > 0 and tau >= 0, got {sigma2}, {tau}"
        )));
    }
    solve_system(g, r, sigma2 * tau, tol)
}

/// `(I + kappa L) x = b` by Jacobi-preconditioned CG, dense Cholesky if CG stalls.
fn solve_system(g: &AdjacencyGraph, b: &[f64], kappa: f64, tol: f64) -> Result<Vec<f64>> {
    if let Some(x) = conjugate_gradient(g, b, kappa, tol) {
        return Ok(x);
    }
    log::debug!("CG did not reach {tol:e}; using dense Cholesky (kappa = {kappa:e})");
    let a = DMatrix::identity(g.n(), g.n()) + g.laplacian_dense() * kappa;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Solve("smoothing system is not positive definite".into()))?;
    Ok(chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec())
}

fn conjugate_gradient(g: &AdjacencyGraph, b: &[f64], kappa: f64, tol: f64) -> Option<Vec<f64>> {
    let n = b.len();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Some(x);
    }
    let diag: Vec<f64> = (0..n).map(|j| 1.0 + kappa * g.degree(j) as f64).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        g.laplacian_mul(v, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = vi + kappa * *o;
        }
    };
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..(10 * n + 100) {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        // Check the true residual to avoid drift in the recursive one.
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol * b_norm {
            let mut ax = vec![0.0; n];
            apply(&x, &mut ax);
            let true_res = ax.iter().zip(b).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
            if true_res <= tol * b_norm {
                return Some(x);
            }
            r = b.iter().zip(&ax).map(|(c, a)| c - a).collect();
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_nodes() -> AdjacencyGraph {
        AdjacencyGraph::from_index_edges(vec!["a".into(), "b".into()], &[(0, 1)]).unwrap()
    }

    fn random_connected(n: usize, rng: &mut ChaCha8Rng) -> AdjacencyGraph {
        let names = (0..n).map(|i| format!("t{i}")).collect();
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
        for _ in 0..n {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push((a, b));
            }
        }
        AdjacencyGraph::from_index_edges(names, &edges).unwrap()
    }

    #[test]
    fn two_node_hand_example() {
        let g = two_nodes();
        let phi = solve_phi(&g, &[3.0, 0.0], 1.0, 1.0, 1e-14).unwrap();
        assert!((phi[0] - 2.0).abs() < 1e-14 && (phi[1] - 1.0).abs() < 1e-14, "{phi:?}");
        let centered = solve_centered(&g, &[3.0, 0.0], 1.0, 1e-14).unwrap();
        assert!((centered[0] - 0.5).abs() < 1e-14 && (centered[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn dense_inversion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=8 {
            for _ in 0..5 {
                let g = random_connected(n, &mut rng);
                let r: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let sigma2 = rng.random_range(0.05..4.0);
                let tau = rng.random_range(0.01..50.0);
                let phi = solve_phi(&g, &r, sigma2, tau, 1e-12).unwrap();
                let a = DMatrix::identity(n, n) / sigma2 + g.laplacian_dense() * tau;
                let oracle = a.try_inverse().unwrap() * DVector::from_vec(r.clone()) / sigma2;
                for j in 0..n {
                    assert!((phi[j] - oracle[j]).abs() < 1e-10, "n={n} {} vs {}", phi[j], oracle[j]);
                }
            }
        }
    }

    #[test]
    fn zero_residuals_pin_everything() {
        let g = AdjacencyGraph::grid(3, 3).unwrap();
        let r = vec![SlotResiduals {
            slot: 1,
            values: vec![0.0; 9],
        }];
        let fit = car_smooth(&r, 3, &g, None, &CarConfig::default()).unwrap();
        assert!(fit.field.is_zero());
        assert_eq!(fit.field.sigma2, Some(1e-12));
        assert_eq!(fit.pinned, vec![1]);
        assert_eq!(fit.field.tau, vec![None, Some(1e6), None]);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = AdjacencyGraph::from_index_edges((0..4).map(|i| i.to_string()).collect(), &[(0, 1), (2, 3)]).unwrap();
        let r = vec![SlotResiduals {
            slot: 0,
            values: vec![1.0, 0.0, 0.0, 1.0],
        }];
        let err = car_smooth(&r, 1, &g, None, &CarConfig::default()).unwrap_err();
        assert!(err.to_string().contains("components"), "{err}");
    }

    fn random_instance(rng: &mut ChaCha8Rng, slots: usize) -> (AdjacencyGraph, Vec<SlotResiduals>) {
        let rows = rng.random_range(3..7);
        let cols = rng.random_range(3..7);
        let g = AdjacencyGraph::grid(rows, cols).unwrap();
        let c = g.n();
        let res = (0..slots)
            .map(|t| {
                // smooth trend plus noise
                let a = rng.random_range(-2.0..2.0);
                let b = rng.random_range(-2.0..2.0);
                let values = (0..c)
                    .map(|j| a * (j / cols) as f64 + b * (j % cols) as f64 + rng.random_range(-1.0..1.0))
                    .collect();
                SlotResiduals { slot: t, values }
            })
            .collect();
        (g, res)
    }

    #[test]
    fn objective_descends_every_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for method in [CarMethod::Marginal, CarMethod::JointIcm] {
            for _ in 0..20 {
                let (g, res) = random_instance(&mut rng, 3);
                let cfg = CarConfig {
                    method,
                    ..CarConfig::default()
                };
                let fit = car_smooth(&res, 3, &g, None, &cfg).unwrap();
                for w in fit.objective.windows(2) {
                    assert!(w[1] <= w[0] + 1e-10, "{method:?}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn emitted_phi_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g, res) = random_instance(&mut rng, 4);
        let fit = car_smooth(&res, 6, &g, None, &CarConfig::default()).unwrap();
        for t in 0..6 {
            let s: f64 = fit.field.phi[t].iter().sum();
            assert!(s.abs() < 1e-10);
            assert_eq!(fit.field.in_s(t), t < 4);
        }
        assert!(fit.field.phi[5].iter().all(|&v| v == 0.0));
        let sigma2 = fit.field.sigma2.unwrap();
        assert!(sigma2 > 0.0 && fit.field.tau.iter().flatten().all(|&t| t > 0.0 && t <= 1e6));
    }

    #[test]
    fn stronger_precision_shrinks_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, res) = random_instance(&mut rng, 1);
        let norms: Vec<f64> = [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&tau| {
                let p = solve_centered(&g, &res[0].values, 0.7 * tau, 1e-12).unwrap();
                p.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0], "{norms:?}");
        }
    }

    #[test]
    fn marginal_mode_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (g, res) = random_instance(&mut rng, 2);
        let cfg = CarConfig {
            tol: 1e-12,
            ..CarConfig::default()
        };
        let fit = car_smooth(&res, 2, &g, None, &cfg).unwrap();
        assert!(fit.converged);
        let mut sm = CarSmoother::new(&g).unwrap();
        let again = sm.smooth(&res, 2, Some(&fit.field), &cfg).unwrap();
        assert!(again.sweeps <= 2, "{}", again.sweeps);
        let s0 = fit.field.sigma2.unwrap();
        let s1 = again.field.sigma2.unwrap();
        assert!((s0 - s1).abs() <= 1e-9 * s0);
    }

    #[test]
    fn marginal_objective_matches_dense_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_connected(7, &mut rng);
        let r: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (sigma2, tau): (f64, f64) = (0.6, 2.5);
        let mut sm = CarSmoother::new(&g).unwrap();
        let (lambda, vecs) = sm.spectrum().clone();
        let z = (vecs.transpose() * DVector::from_vec(r.clone())).as_slice().to_vec();
        let (f, _, _) = marginal_terms(&[z], &lambda, &[sigma2.ln(), f64::ln(tau)]);

        let pinv = g.laplacian_dense().pseudo_inverse(1e-10).unwrap();
        let cov = DMatrix::identity(7, 7) * sigma2 + pinv / tau;
        let rv = DVector::from_vec(r);
        let quad = (rv.transpose() * cov.clone().try_inverse().unwrap() * &rv)[(0, 0)];
        let dense = 0.5 * (cov.determinant().ln() + quad);
        assert!((f - dense).abs() < 1e-10, "{f} vs {dense}");
    }

    #[test]
    fn marginal_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (g, res) = random_instance(&mut rng, 2);
        let mut sm = CarSmoother::new(&g).unwrap();
        let (lambda, vecs) = sm.spectrum().clone();
        let coords: Vec<Vec<f64>> = res
            .iter()
            .map(|s| {
                (vecs.transpose() * DVector::from_column_slice(&s.values))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let x = [0.3f64.ln(), 1.7f64.ln(), 0.2f64.ln()];
        let (_, grad, hess) = marginal_terms(&coords, &lambda, &x);
        let h = 1e-5;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let (fp, gp, _) = marginal_terms(&coords, &lambda, &xp);
            let (fm, gm, _) = marginal_terms(&coords, &lambda, &xm);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * grad[i].abs().max(1.0),
                "grad {i}: {fd} vs {}",
                grad[i]
            );
            for j in 0..3 {
                let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                assert!(
                    (fd2 - hess[(i, j)]).abs() < 1e-5 * hess[(i, j)].abs().max(1.0),
                    "hess {i}{j}"
                );
            }
        }
    }

    #[test]
    fn warm_start_is_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, res) = random_instance(&mut rng, 2);
        let mut init = SpatialField::zeros(2, g.n());
        init.tau[0] = Some(3.5);
        init.sigma2 = Some(0.25);
        let fit = car_smooth(&res, 2, &g, Some(&init), &CarConfig::default()).unwrap();
        assert_eq!(fit.tau_start[0], (0, 3.5));
        assert_eq!(fit.tau_start[1], (1, 4.0));
        assert_eq!(fit.sigma2_start, 0.25);
    }
}

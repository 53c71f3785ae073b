//! Closed-form contraction rates, radii, approximation bounds, and their
//! empirical counterparts.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::{sup_lp_distance, AtomGrid, ReturnFunction};
use crate::mdp::{policy_l1_distance, Policy, TabularMdp};
use crate::operators::{apply_operator, SolverOptions, TraceSpec};

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid("gamma", format!("must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// Sup-`l_p` contraction rate of the off-policy Q(lambda) operator:
/// `gamma^{1/p} (1 - lambda + lambda eps) / ((1 - lambda)^{(p-1)/p} (1 - lambda gamma)^{1/p})`.
pub fn beta_p(gamma: f64, lambda: f64, epsilon: f64, p: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    if !(0.0..=2.0).contains(&epsilon) {
        return Err(invalid("epsilon", format!("must lie in [0, 2], got {epsilon}")));
    }
    if !(p >= 1.0) {
        return Err(invalid("p", format!("must be at least 1, got {p}")));
    }
    if lambda == 1.0 && p > 1.0 {
        return Err(Error::Domain(format!(
            "beta_p: (1 - lambda)^((p - 1)/p) vanishes at lambda = 1 for p = {p}"
        )));
    }
    Ok(gamma.powf(1.0 / p) * (1.0 - lambda + lambda * epsilon)
        / ((1.0 - lambda).powf((p - 1.0) / p) * (1.0 - lambda * gamma).powf(1.0 / p)))
}

/// Largest `eps` with `beta_1 < 1`: `(1 - gamma) / (lambda gamma)`; `+inf` at `lambda = 0`.
pub fn radius_l1(gamma: f64, lambda: f64) -> Result<f64> {
    check_radius_args(gamma, lambda)?;
    if lambda == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((1.0 - gamma) / (lambda * gamma))
}

/// Largest `eps` with `beta_2 < 1`:
/// `lambda^{-1} (sqrt((1 - lambda)(gamma^{-1} - lambda)) + lambda - 1)`.
pub fn radius_l2(gamma: f64, lambda: f64) -> Result<f64> {
    check_radius_args(gamma, lambda)?;
    if lambda == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(((((1.0 - lambda) * (1.0 / gamma - lambda)).sqrt()) + lambda - 1.0) / lambda)
}

fn check_radius_args(gamma: f64, lambda: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Contraction bound of the alternative operator, `gamma (1 + lambda) / (1 - gamma lambda)`.
pub fn beta_alt(gamma: f64, lambda: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    Ok(gamma * (1.0 + lambda) / (1.0 - gamma * lambda))
}

/// Largest `lambda` with `beta_alt < 1`: `(1 - gamma) / (2 gamma)`.
pub fn radius_alt(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    Ok((1.0 - gamma) / (2.0 * gamma))
}

/// Fixed-point error bound `d_proj / sqrt(1 - beta2^2)`.
pub fn approx_error_bound(d_proj: f64, beta2: f64) -> Result<f64> {
    if !(d_proj >= 0.0) {
        return Err(invalid("d_proj", format!("must be nonnegative, got {d_proj}")));
    }
    if !(0.0..1.0).contains(&beta2) {
        return Err(Error::Domain(format!("approximation bound needs beta_2 in [0, 1), got {beta2}")));
    }
    Ok(d_proj / (1.0 - beta2 * beta2).sqrt())
}

/// Control variant of the bound, `d_proj / sqrt(1 - gamma^2)`.
pub fn control_error_bound(d_proj: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    approx_error_bound(d_proj, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionReport {
    pub gamma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub beta_1: f64,
    pub beta_2: Option<f64>,
    pub radius_l1: f64,
    pub radius_l2: f64,
    pub contractive_l1: bool,
    pub contractive_l2: bool,
    pub beta_alt: f64,
    pub radius_alt: f64,
}

impl ContractionReport {
    /// `beta_2` is left empty at `lambda = 1`, where it is undefined.
    pub fn new(gamma: f64, lambda: f64, epsilon: f64) -> Result<Self> {
        let beta_1 = beta_p(gamma, lambda, epsilon, 1.0)?;
        let beta_2 = if lambda < 1.0 {
            Some(beta_p(gamma, lambda, epsilon, 2.0)?)
        } else {
            None
        };
        Ok(Self {
            gamma,
            lambda,
            epsilon,
            beta_1,
            beta_2,
            radius_l1: radius_l1(gamma, lambda)?,
            radius_l2: radius_l2(gamma, lambda)?,
            contractive_l1: beta_1 < 1.0,
            contractive_l2: beta_2.is_some_and(|b| b < 1.0),
            beta_alt: beta_alt(gamma, lambda)?,
            radius_alt: radius_alt(gamma)?,
        })
    }

    pub fn for_policies(gamma: f64, lambda: f64, pi: &Policy, mu: &Policy) -> Result<Self> {
        let eps = policy_l1_distance(pi, mu)?.min(2.0);
        Self::new(gamma, lambda, eps)
    }
}

/// Random unit-mass signed return function: per entry, `v ~ U(-0.5, 0.5)^m`
/// shifted to `v - mean(v) + 1/m`, so masses stay above `-1`.
pub fn random_signed_return_function<R: RngCore + ?Sized>(
    grid: &Arc<AtomGrid>,
    n_states: usize,
    n_actions: usize,
    rng: &mut R,
) -> ReturnFunction {
    let m = grid.len();
    let mut masses = Vec::with_capacity(n_states * n_actions * m);
    for _ in 0..n_states * n_actions {
        let v: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
        let mean = v.iter().sum::<f64>() / m as f64;
        let start = masses.len();
        masses.extend(v.iter().map(|x| x - mean + 1.0 / m as f64));
        // put the rounding residue on the first atom so the total is 1 to the last bit
        let total: f64 = masses[start..].iter().sum();
        masses[start] += 1.0 - total;
    }
    ReturnFunction::new(Arc::clone(grid), n_states, n_actions, masses).expect("unit mass by construction")
}

/// Random probability-distribution return function (uniform Dirichlet per entry).
pub fn random_distribution_return_function<R: RngCore + ?Sized>(
    grid: &Arc<AtomGrid>,
    n_states: usize,
    n_actions: usize,
    rng: &mut R,
) -> ReturnFunction {
    let m = grid.len();
    let mut masses = Vec::with_capacity(n_states * n_actions * m);
    for _ in 0..n_states * n_actions {
        let v: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = v.iter().sum();
        masses.extend(v.iter().map(|x| x / s));
    }
    ReturnFunction::new(Arc::clone(grid), n_states, n_actions, masses).expect("unit mass by construction")
}

/// Largest observed `sup-l2(O eta1, O eta2) / sup-l2(eta1, eta2)` over random signed pairs.
#[allow(clippy::too_many_arguments)]
pub fn empirical_contraction<R: RngCore + ?Sized>(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    trace: &TraceSpec,
    grid: &Arc<AtomGrid>,
    n_pairs: usize,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<f64> {
    empirical_contraction_p(mdp, pi, mu, trace, grid, n_pairs, 2.0, opts, rng)
}

/// [`empirical_contraction`] under the sup-`l_p` distance.
#[allow(clippy::too_many_arguments)]
pub fn empirical_contraction_p<R: RngCore + ?Sized>(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    trace: &TraceSpec,
    grid: &Arc<AtomGrid>,
    n_pairs: usize,
    p: f64,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(invalid("n_pairs", "need at least one pair"));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n_pairs {
        let a = random_signed_return_function(grid, ns, na, rng);
        let b = random_signed_return_function(grid, ns, na, rng);
        let din = sup_lp_distance(&a, &b, p)?;
        if din == 0.0 {
            continue;
        }
        let oa = apply_operator(mdp, pi, mu, trace, &a, opts)?;
        let ob = apply_operator(mdp, pi, mu, trace, &b, opts)?;
        worst = worst.max(sup_lp_distance(&oa, &ob, p)? / din);
        done += 1;
    }
    Ok(worst)
}

//! Exact application of the distributional evaluation operators, composed
//! with categorical projection.
//!
//! Multi-step operators are realized through their telescoped correction
//! recursion. The recursion runs on a working grid that refines the
//! experiment grid by [`SolverOptions::refine`] cells per cell, with a
//! projection after every pushforward; the result is projected back onto the
//! experiment grid once at the end. With `refine = 1` every projection
//! happens on the experiment grid itself.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{AtomGrid, MeasureTable, ProjectedPushforward, ReturnFunction};
use crate::mdp::{Policy, TabularMdp};

/// Which operator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "param")]
pub enum TraceSpec {
    OneStep,
    NStep(usize),
    OnPolicyLambda(f64),
    OffPolicyLambda(f64),
    Retrace(f64),
    Peng(f64),
    AltLambda(f64),
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TraceSpec::OneStep => Ok(()),
            TraceSpec::NStep(n) if n >= 1 => Ok(()),
            TraceSpec::NStep(_) => Err(invalid("n", "must be at least 1")),
            TraceSpec::Retrace(cbar) if cbar > 0.0 && cbar.is_finite() => Ok(()),
            TraceSpec::Retrace(cbar) => Err(invalid("c_bar", format!("must be positive, got {cbar}"))),
            TraceSpec::OnPolicyLambda(l)
            | TraceSpec::OffPolicyLambda(l)
            | TraceSpec::Peng(l)
            | TraceSpec::AltLambda(l) => {
                if (0.0..=1.0).contains(&l) {
                    Ok(())
                } else {
                    Err(invalid("lambda", format!("must lie in [0, 1], got {l}")))
                }
            }
        }
    }

    /// Short family name used in logs and CSV files.
    pub fn family(&self) -> &'static str {
        match self {
            TraceSpec::OneStep => "one_step",
            TraceSpec::NStep(_) => "n_step",
            TraceSpec::OnPolicyLambda(_) => "on_policy_lambda",
            TraceSpec::OffPolicyLambda(_) => "q_lambda",
            TraceSpec::Retrace(_) => "retrace",
            TraceSpec::Peng(_) => "peng",
            TraceSpec::AltLambda(_) => "alt_lambda",
        }
    }

    /// The numeric hyperparameter, if any.
    pub fn param(&self) -> Option<f64> {
        match *self {
            TraceSpec::OneStep => None,
            TraceSpec::NStep(n) => Some(n as f64),
            TraceSpec::OnPolicyLambda(v)
            | TraceSpec::OffPolicyLambda(v)
            | TraceSpec::Retrace(v)
            | TraceSpec::Peng(v)
            | TraceSpec::AltLambda(v) => Some(v),
        }
    }

    /// Parses `one_step`, `n_step:3`, `q_lambda:0.5`, `retrace:2`, ...
    pub fn parse(text: &str) -> Result<Self> {
        let (name, value) = match text.split_once(':') {
            Some((n, v)) => (n.trim(), Some(v.trim())),
            None => (text.trim(), None),
        };
        let num = |v: Option<&str>| -> Result<f64> {
            v.ok_or_else(|| Error::Parse(format!("`{name}` needs a parameter, e.g. `{name}:0.5`")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad parameter in `{text}`: {e}")))
        };
        let spec = match name {
            "one_step" | "onestep" => TraceSpec::OneStep,
            "n_step" | "nstep" => {
                let v = value.ok_or_else(|| Error::Parse("`n_step` needs a length".into()))?;
                TraceSpec::NStep(v.parse().map_err(|e| Error::Parse(format!("bad n in `{text}`: {e}")))?)
            }
            "on_policy_lambda" => TraceSpec::OnPolicyLambda(num(value)?),
            "q_lambda" | "off_policy_lambda" => TraceSpec::OffPolicyLambda(num(value)?),
            "retrace" => TraceSpec::Retrace(num(value)?),
            "peng" => TraceSpec::Peng(num(value)?),
            "alt_lambda" => TraceSpec::AltLambda(num(value)?),
            other => return Err(Error::Parse(format!("unknown operator `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for TraceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param() {
            None => write!(f, "{}", self.family()),
            Some(v) => write!(f, "{}:{}", self.family(), v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Dense solve for small systems, iteration otherwise.
    #[default]
    Auto,
    Iterate,
    LinearSolve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub mode: SolverMode,
    pub tolerance: f64,
    pub max_depth: usize,
    /// Working-grid cells per experiment-grid cell.
    pub refine: usize,
    /// Truncate the correction series after this many terms.
    pub horizon: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            mode: SolverMode::Auto,
            tolerance: 1e-10,
            max_depth: 10_000,
            refine: 8,
            horizon: None,
        }
    }
}

/// Largest reduced system handed to the dense solver in `Auto` mode.
pub const AUTO_DENSE_LIMIT: usize = 256;

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        if self.refine == 0 {
            return Err(invalid("refine", "must be at least 1"));
        }
        if self.max_depth == 0 {
            return Err(invalid("max_depth", "must be at least 1"));
        }
        if self.horizon == Some(0) {
            return Err(invalid("horizon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: SolverMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_refine(mut self, refine: usize) -> Self {
        self.refine = refine;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = Some(horizon);
        self
    }
}

/// Diagnostics of one operator application.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub linear_solve: bool,
    /// Largest absolute mass pushed past the grid boundary at any pair.
    pub clipped_mass: f64,
}

/// `Pi_c T^pi eta - eta` per `(x, a)`; each entry has zero total mass.
pub fn td_measure(mdp: &TabularMdp, pi: &Policy, eta: &ReturnFunction) -> Result<MeasureTable> {
    check_shapes(mdp, pi, eta)?;
    let backup = OneStepBackup::new(mdp, eta.grid());
    let mut masses = backup.apply_raw(pi, eta.masses()).0;
    for (d, e) in masses.iter_mut().zip(eta.masses()) {
        *d -= e;
    }
    MeasureTable::new(Arc::clone(eta.grid()), mdp.n_states(), mdp.n_actions(), masses)
}

/// Per-step trace coefficient `c(x, b)` of a trace-family operator.
pub fn trace_coefficient(trace: &TraceSpec, pi: &Policy, mu: &Policy, x: usize, b: usize) -> Result<f64> {
    coefficient_from_probs(trace, pi.prob(x, b), mu.prob(x, b))
        .map_err(|e| match e {
            Error::SupportViolation { .. } => Error::SupportViolation { state: x, action: b },
            e => e,
        })
}

// `c` from the two probabilities alone; support errors carry dummy indices.
pub(crate) fn coefficient_from_probs(trace: &TraceSpec, p: f64, m: f64) -> Result<f64> {
    match *trace {
        TraceSpec::OnPolicyLambda(l)
        | TraceSpec::OffPolicyLambda(l)
        | TraceSpec::Peng(l)
        | TraceSpec::AltLambda(l) => Ok(l),
        TraceSpec::Retrace(cbar) => {
            if m == 0.0 {
                if p > 0.0 {
                    return Err(Error::SupportViolation { state: 0, action: 0 });
                }
                return Ok(0.0);
            }
            Ok(cbar.min(p / m))
        }
        TraceSpec::OneStep | TraceSpec::NStep(_) => {
            Err(invalid("trace", format!("{trace} has no trace coefficient")))
        }
    }
}

/// Applies the chosen operator to `eta` and projects onto its grid.
pub fn apply_operator(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    trace: &TraceSpec,
    eta: &ReturnFunction,
    opts: &SolverOptions,
) -> Result<ReturnFunction> {
    apply_operator_with_stats(mdp, pi, mu, trace, eta, opts).map(|(out, _)| out)
}

/// `eta_{k+1} = Pi_c O eta_k`; the projection is part of [`apply_operator`].
pub fn apply_projected_recursion_step(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    trace: &TraceSpec,
    eta: &ReturnFunction,
    opts: &SolverOptions,
) -> Result<ReturnFunction> {
    apply_operator(mdp, pi, mu, trace, eta, opts)
}

pub fn apply_operator_with_stats(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    trace: &TraceSpec,
    eta: &ReturnFunction,
    opts: &SolverOptions,
) -> Result<(ReturnFunction, SolveStats)> {
    trace.validate()?;
    opts.validate()?;
    check_shapes(mdp, pi, eta)?;
    check_policy(mdp, mu)?;
    let grid = eta.grid();
    let (masses, stats) = match *trace {
        TraceSpec::OneStep => {
            let (masses, clipped) = OneStepBackup::new(mdp, grid).apply_raw(pi, eta.masses());
            (
                masses,
                SolveStats {
                    clipped_mass: clipped,
                    ..SolveStats::default()
                },
            )
        }
        TraceSpec::NStep(n) => {
            let work = Realization::new(mdp, grid, opts.refine);
            work.n_step(pi, eta.masses(), n)
        }
        TraceSpec::OnPolicyLambda(_) => {
            let work = Realization::new(mdp, grid, opts.refine);
            work.trace_family(pi, pi, trace, eta.masses(), opts)?
        }
        TraceSpec::OffPolicyLambda(_) | TraceSpec::Retrace(_) => {
            let work = Realization::new(mdp, grid, opts.refine);
            work.trace_family(pi, mu, trace, eta.masses(), opts)?
        }
        TraceSpec::Peng(lambda) => {
            if lambda >= 1.0 {
                return Err(invalid("lambda", "Peng's operator needs lambda < 1"));
            }
            if opts.horizon.is_some() {
                return Err(invalid("horizon", "truncation is only defined for trace-family operators"));
            }
            let work = Realization::new(mdp, grid, opts.refine);
            work.peng(pi, mu, lambda, eta.masses(), opts)?
        }
        TraceSpec::AltLambda(lambda) => {
            if opts.horizon.is_some() {
                return Err(invalid("horizon", "truncation is only defined for trace-family operators"));
            }
            let work = Realization::new(mdp, grid, opts.refine);
            work.alt_lambda(pi, mu, lambda, eta.masses(), opts)?
        }
    };
    let table = MeasureTable::new(Arc::clone(grid), mdp.n_states(), mdp.n_actions(), masses)?;
    let out = ReturnFunction::from_table_unchecked(table);
    let err = out.total_mass_error();
    if err > crate::grid::MASS_TOL {
        return Err(Error::Domain(format!("operator output lost unit mass (error {err:e})")));
    }
    Ok((out, stats))
}

fn check_shapes(mdp: &TabularMdp, pi: &Policy, eta: &ReturnFunction) -> Result<()> {
    check_policy(mdp, pi)?;
    if eta.n_states() != mdp.n_states() || eta.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch(format!(
            "return function {}x{} vs MDP {}x{}",
            eta.n_states(),
            eta.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

fn check_policy(mdp: &TabularMdp, pi: &Policy) -> Result<()> {
    if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch(format!(
            "policy {}x{} vs MDP {}x{}",
            pi.n_states(),
            pi.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `(Pi_c T^pi eta)` on the grid of `eta`, without refinement.
pub(crate) struct OneStepBackup<'a> {
    mdp: &'a TabularMdp,
    grid: Arc<AtomGrid>,
    push: Vec<ProjectedPushforward>,
}

impl<'a> OneStepBackup<'a> {
    pub(crate) fn new(mdp: &'a TabularMdp, grid: &Arc<AtomGrid>) -> Self {
        let push = push_table(mdp, grid);
        Self {
            mdp,
            grid: Arc::clone(grid),
            push,
        }
    }

    pub(crate) fn apply(&self, pi: &Policy, eta: &ReturnFunction) -> ReturnFunction {
        let masses = self.apply_raw(pi, eta.masses()).0;
        let table = MeasureTable::new(Arc::clone(&self.grid), self.mdp.n_states(), self.mdp.n_actions(), masses)
            .expect("backup preserves shape");
        ReturnFunction::from_table_unchecked(table)
    }

    /// Returns the backed-up masses and the largest clipped mass.
    fn apply_raw(&self, pi: &Policy, eta: &[f64]) -> (Vec<f64>, f64) {
        let (ns, na, m) = (self.mdp.n_states(), self.mdp.n_actions(), self.grid.len());
        let mix = policy_mixture(eta, pi, ns, na, m);
        let mut out = vec![0.0; ns * na * m];
        let mut next = vec![0.0; m];
        let mut clipped: f64 = 0.0;
        for x in 0..ns {
            for a in 0..na {
                expect_next(self.mdp.next_probs(x, a), &mix, m, &mut next);
                let k = x * na + a;
                let push = &self.push[k];
                clipped = clipped.max(push.clipped_mass(&next));
                push.apply_add(&next, 1.0, &mut out[k * m..(k + 1) * m]);
            }
        }
        (out, clipped)
    }
}

fn push_table(mdp: &TabularMdp, grid: &AtomGrid) -> Vec<ProjectedPushforward> {
    let mut out = Vec::with_capacity(mdp.n_states() * mdp.n_actions());
    for x in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            out.push(ProjectedPushforward::new(grid, mdp.reward(x, a), mdp.gamma()));
        }
    }
    out
}

/// `sum_b pi(b|x) eta(x, b)` per state.
fn policy_mixture(eta: &[f64], pi: &Policy, ns: usize, na: usize, m: usize) -> Vec<f64> {
    weighted_mixture(eta, ns, na, m, |x, b| pi.prob(x, b))
}

fn weighted_mixture(eta: &[f64], ns: usize, na: usize, m: usize, w: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; ns * m];
    for x in 0..ns {
        let dst = &mut out[x * m..(x + 1) * m];
        for b in 0..na {
            let wb = w(x, b);
            if wb == 0.0 {
                continue;
            }
            let k = x * na + b;
            for (d, s) in dst.iter_mut().zip(&eta[k * m..(k + 1) * m]) {
                *d += wb * s;
            }
        }
    }
    out
}

/// `out = sum_{x'} P(x') per_state[x']`.
#[inline]
fn expect_next(probs: &[f64], per_state: &[f64], m: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (y, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, s) in out.iter_mut().zip(&per_state[y * m..(y + 1) * m]) {
            *o += p * s;
        }
    }
}

/// l2 norm of the CDF of a grid vector.
#[inline]
fn cdf_l2(v: &[f64], dz: f64) -> f64 {
    let mut acc = 0.0;
    let mut f = 0.0;
    for x in &v[..v.len() - 1] {
        f += x;
        acc += f * f;
    }
    (acc * dz).sqrt()
}

/// Working-grid state shared by the multi-step realizations.
struct Realization<'a> {
    mdp: &'a TabularMdp,
    coarse_m: usize,
    fine: Arc<AtomGrid>,
    refine: usize,
    push: Vec<ProjectedPushforward>,
}

/// Linear system `E(y) = A(y) + sum_b w(y,b) M_yb sum_x' P(x'|y,b) E(x')`.
struct Recursion<'r> {
    rhs: Vec<f64>,
    weights: Vec<f64>,
    push: &'r [ProjectedPushforward],
}

impl Recursion<'_> {
    /// Every block of the right-hand side has zero total mass, up to rounding.
    fn zero_mass_rhs(&self, m: usize) -> bool {
        let scale = self.rhs.iter().fold(1.0, |s: f64, v| s.max(v.abs()));
        self.rhs.chunks(m).all(|c| c.iter().sum::<f64>().abs() <= 1e-12 * scale * m as f64)
    }
}

impl<'a> Realization<'a> {
    fn new(mdp: &'a TabularMdp, coarse: &Arc<AtomGrid>, refine: usize) -> Self {
        let fine = Arc::new(coarse.refined(refine));
        let push = push_table(mdp, &fine);
        Self {
            mdp,
            coarse_m: coarse.len(),
            fine,
            refine,
            push,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.mdp.n_states(), self.mdp.n_actions(), self.fine.len())
    }

    fn embed(&self, coarse: &[f64]) -> Vec<f64> {
        if self.refine == 1 {
            return coarse.to_vec();
        }
        let mf = self.fine.len();
        let mut out = vec![0.0; coarse.len() / self.coarse_m * mf];
        for (src, dst) in coarse.chunks(self.coarse_m).zip(out.chunks_mut(mf)) {
            for (i, &p) in src.iter().enumerate() {
                dst[i * self.refine] = p;
            }
        }
        out
    }

    /// Categorical projection from the working grid back to the experiment grid.
    fn coarsen(&self, fine: &[f64]) -> Vec<f64> {
        if self.refine == 1 {
            return fine.to_vec();
        }
        let (mf, mc, k) = (self.fine.len(), self.coarse_m, self.refine);
        let mut out = vec![0.0; fine.len() / mf * mc];
        for (src, dst) in fine.chunks(mf).zip(out.chunks_mut(mc)) {
            for (j, &p) in src.iter().enumerate() {
                let (c, s) = (j / k, j % k);
                if s == 0 {
                    dst[c] += p;
                } else {
                    let hw = s as f64 / k as f64;
                    dst[c] += p * (1.0 - hw);
                    dst[c + 1] += p * hw;
                }
            }
        }
        out
    }

    /// `out[(x,a)] = M_xa sum_x' P(x'|x,a) per_state[x']` for every pair.
    fn backup_all(&self, per_state: &[f64]) -> (Vec<f64>, f64) {
        let (ns, na, m) = self.dims();
        let mut out = vec![0.0; ns * na * m];
        let mut next = vec![0.0; m];
        let mut clipped: f64 = 0.0;
        for x in 0..ns {
            for a in 0..na {
                let k = x * na + a;
                expect_next(self.mdp.next_probs(x, a), per_state, m, &mut next);
                clipped = clipped.max(self.push[k].clipped_mass(&next));
                self.push[k].apply_add(&next, 1.0, &mut out[k * m..(k + 1) * m]);
            }
        }
        (out, clipped)
    }

    fn td(&self, pi: &Policy, eta_f: &[f64]) -> (Vec<f64>, f64) {
        let (ns, na, m) = self.dims();
        let mix = policy_mixture(eta_f, pi, ns, na, m);
        let (mut delta, clipped) = self.backup_all(&mix);
        for (d, e) in delta.iter_mut().zip(eta_f) {
            *d -= e;
        }
        (delta, clipped)
    }

    fn n_step(&self, pi: &Policy, eta: &[f64], n: usize) -> (Vec<f64>, SolveStats) {
        let (ns, na, m) = self.dims();
        let mut cur = self.embed(eta);
        let mut clipped: f64 = 0.0;
        for _ in 0..n {
            let mix = policy_mixture(&cur, pi, ns, na, m);
            let (next, c) = self.backup_all(&mix);
            clipped = clipped.max(c);
            cur = next;
        }
        (
            self.coarsen(&cur),
            SolveStats {
                iterations: n,
                clipped_mass: clipped,
                ..SolveStats::default()
            },
        )
    }

    fn trace_family(
        &self,
        pi: &Policy,
        mu: &Policy,
        trace: &TraceSpec,
        eta: &[f64],
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, SolveStats)> {
        let (ns, na, m) = self.dims();
        let mut weights = vec![0.0; ns * na];
        for y in 0..ns {
            for b in 0..na {
                weights[y * na + b] = mu.prob(y, b) * trace_coefficient(trace, pi, mu, y, b)?;
            }
        }
        let eta_f = self.embed(eta);
        let (delta, clipped) = self.td(pi, &eta_f);
        let rhs = weighted_mixture(&delta, ns, na, m, |y, b| weights[y * na + b]);
        let rec = Recursion {
            rhs,
            weights,
            push: &self.push,
        };
        let (e, mut stats) = match opts.horizon {
            Some(1) => (vec![0.0; rec.rhs.len()], SolveStats::default()),
            Some(h) => (self.iterate_fixed(&rec, h - 2), SolveStats::default()),
            None => self.solve(&rec, opts)?,
        };
        stats.clipped_mass = clipped;
        // D = delta + M P E, output = eta + Pi_c D
        let (mut d, _) = self.backup_all(&e);
        for (v, dl) in d.iter_mut().zip(&delta) {
            *v += dl;
        }
        let mut out = self.coarsen(&d);
        for (o, e) in out.iter_mut().zip(eta) {
            *o += e;
        }
        Ok((out, stats))
    }

    fn peng(
        &self,
        pi: &Policy,
        mu: &Policy,
        lambda: f64,
        eta: &[f64],
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, SolveStats)> {
        let (ns, na, m) = self.dims();
        let eta_f = self.embed(eta);
        let mix = policy_mixture(&eta_f, pi, ns, na, m);
        let (base, clipped) = self.backup_all(&mix);
        let rhs = weighted_mixture(&base, ns, na, m, |y, b| (1.0 - lambda) * mu.prob(y, b));
        let weights: Vec<f64> = mu.probs().iter().map(|p| lambda * p).collect();
        let rec = Recursion {
            rhs,
            weights,
            push: &self.push,
        };
        let (u, mut stats) = self.solve(&rec, opts)?;
        stats.clipped_mass = clipped;
        // P eta = M P [(1 - lambda) eta^pi + lambda U]
        let blend: Vec<f64> = mix.iter().zip(&u).map(|(e, u)| (1.0 - lambda) * e + lambda * u).collect();
        let (out, _) = self.backup_all(&blend);
        Ok((self.coarsen(&out), stats))
    }

    fn alt_lambda(
        &self,
        pi: &Policy,
        mu: &Policy,
        lambda: f64,
        eta: &[f64],
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, SolveStats)> {
        let (ns, na, m) = self.dims();
        let gamma = self.mdp.gamma();
        let eta_f = self.embed(eta);
        let (delta, clipped) = self.td(pi, &eta_f);
        let gl = gamma * lambda;
        let mut stats = SolveStats {
            clipped_mass: clipped,
            ..SolveStats::default()
        };
        if gl == 0.0 {
            return Ok((self.add_coarse(eta, &delta), stats));
        }
        // Depth d pushes by gamma^d r with slope 1; once every shift is far
        // below the snapping threshold the pushforward is the identity.
        let (r_lo, r_hi) = self.mdp.reward_range();
        let r_max = r_lo.abs().max(r_hi.abs());
        let floor = 1e-11 * self.fine.spacing();
        let depth = if r_max <= floor || gamma == 0.0 {
            0
        } else {
            ((floor / r_max).ln() / gamma.ln()).ceil().max(0.0) as usize
        };
        if depth > opts.max_depth {
            return Err(Error::NotConverged {
                iterations: opts.max_depth,
                residual: gamma.powi(opts.max_depth as i32) * r_max,
            });
        }
        // tail: F = delta + gl P mu F with identity pushforwards
        let rhs = weighted_mixture(&delta, ns, na, m, |y, b| mu.prob(y, b));
        let identity: Vec<ProjectedPushforward> = (0..ns * na)
            .map(|_| ProjectedPushforward::new(&self.fine, 0.0, 1.0))
            .collect();
        let weights: Vec<f64> = mu.probs().iter().map(|p| gl * p).collect();
        let rec = Recursion {
            rhs,
            weights,
            push: &identity,
        };
        let (mut e, tail) = self.solve(&rec, opts)?;
        stats.iterations = tail.iterations + depth;
        stats.residual = tail.residual;
        stats.linear_solve = tail.linear_solve;
        let mut f = vec![0.0; ns * na * m];
        let mut next = vec![0.0; m];
        for d in (0..depth).rev() {
            let scale = gamma.powi(d as i32);
            for x in 0..ns {
                for a in 0..na {
                    let k = x * na + a;
                    let slot = &mut f[k * m..(k + 1) * m];
                    slot.copy_from_slice(&delta[k * m..(k + 1) * m]);
                    expect_next(self.mdp.next_probs(x, a), &e, m, &mut next);
                    ProjectedPushforward::new(&self.fine, scale * self.mdp.reward(x, a), 1.0).apply_add(&next, gl, slot);
                }
            }
            e = weighted_mixture(&f, ns, na, m, |y, b| mu.prob(y, b));
        }
        if depth == 0 {
            // no reward shifts at all: F_0 is the tail solution itself
            for x in 0..ns {
                for a in 0..na {
                    let k = x * na + a;
                    let slot = &mut f[k * m..(k + 1) * m];
                    slot.copy_from_slice(&delta[k * m..(k + 1) * m]);
                    expect_next(self.mdp.next_probs(x, a), &e, m, &mut next);
                    for (s, v) in slot.iter_mut().zip(&next) {
                        *s += gl * v;
                    }
                }
            }
        }
        Ok((self.add_coarse(eta, &f), stats))
    }

    fn add_coarse(&self, eta: &[f64], fine_correction: &[f64]) -> Vec<f64> {
        let mut out = self.coarsen(fine_correction);
        for (o, e) in out.iter_mut().zip(eta) {
            *o += e;
        }
        out
    }

    fn solve(&self, rec: &Recursion, opts: &SolverOptions) -> Result<(Vec<f64>, SolveStats)> {
        let (ns, _, m) = self.dims();
        let dense = match opts.mode {
            SolverMode::LinearSolve => true,
            SolverMode::Iterate => false,
            SolverMode::Auto => ns * m <= AUTO_DENSE_LIMIT,
        };
        if dense {
            self.solve_dense(rec)
        } else {
            self.iterate_to_tolerance(rec, opts)
        }
    }

    /// One application `E <- A + K E`.
    fn sweep(&self, rec: &Recursion, e: &[f64], out: &mut [f64]) {
        let (ns, na, m) = self.dims();
        out.copy_from_slice(&rec.rhs);
        let mut next = vec![0.0; m];
        for y in 0..ns {
            for b in 0..na {
                let w = rec.weights[y * na + b];
                if w == 0.0 {
                    continue;
                }
                expect_next(self.mdp.next_probs(y, b), e, m, &mut next);
                rec.push[y * na + b].apply_add(&next, w, &mut out[y * m..(y + 1) * m]);
            }
        }
    }

    /// Exactly `steps` sweeps from `E = A`, i.e. the first `steps + 1` series terms.
    fn iterate_fixed(&self, rec: &Recursion, steps: usize) -> Vec<f64> {
        let mut e = rec.rhs.clone();
        let mut buf = vec![0.0; e.len()];
        for _ in 0..steps {
            self.sweep(rec, &e, &mut buf);
            std::mem::swap(&mut e, &mut buf);
        }
        e
    }

    fn iterate_to_tolerance(&self, rec: &Recursion, opts: &SolverOptions) -> Result<(Vec<f64>, SolveStats)> {
        let (_, _, m) = self.dims();
        let dz = self.fine.spacing();
        let mut e = rec.rhs.clone();
        let mut buf = vec![0.0; e.len()];
        let mut diff = vec![0.0; m];
        let mut residual = f64::INFINITY;
        for it in 1..=opts.max_depth {
            self.sweep(rec, &e, &mut buf);
            residual = 0.0;
            for (new, old) in buf.chunks(m).zip(e.chunks(m)) {
                for ((d, n), o) in diff.iter_mut().zip(new).zip(old) {
                    *d = n - o;
                }
                residual = residual.max(cdf_l2(&diff, dz));
            }
            std::mem::swap(&mut e, &mut buf);
            if residual < opts.tolerance {
                log::trace!("recursion converged after {it} sweeps (residual {residual:e})");
                if !rec.zero_mass_rhs(m) {
                    self.fix_block_masses(rec, &mut e)?;
                }
                return Ok((
                    e,
                    SolveStats {
                        iterations: it,
                        residual,
                        ..SolveStats::default()
                    },
                ));
            }
        }
        Err(Error::NotConverged {
            iterations: opts.max_depth,
            residual,
        })
    }

    /// Block masses solve `u = a + W P u` exactly; iteration leaves a geometric
    /// tail, spread evenly over each block.
    fn fix_block_masses(&self, rec: &Recursion, e: &mut [f64]) -> Result<()> {
        let (ns, na, m) = self.dims();
        let mut mat = DMatrix::<f64>::identity(ns, ns);
        for y in 0..ns {
            for b in 0..na {
                let w = rec.weights[y * na + b];
                for (xn, &p) in self.mdp.next_probs(y, b).iter().enumerate() {
                    mat[(y, xn)] -= w * p;
                }
            }
        }
        let a = DVector::from_iterator(ns, rec.rhs.chunks(m).map(|c| c.iter().sum::<f64>()));
        let u = mat
            .lu()
            .solve(&a)
            .ok_or_else(|| Error::Domain("singular mass system".into()))?;
        for (y, block) in e.chunks_mut(m).enumerate() {
            let d = (u[y] - block.iter().sum::<f64>()) / m as f64;
            for v in block {
                *v += d;
            }
        }
        Ok(())
    }

    fn solve_dense(&self, rec: &Recursion) -> Result<(Vec<f64>, SolveStats)> {
        let (ns, na, m) = self.dims();
        let n = ns * m;
        let mut mat = DMatrix::<f64>::identity(n, n);
        for y in 0..ns {
            for b in 0..na {
                let w = rec.weights[y * na + b];
                if w == 0.0 {
                    continue;
                }
                let push = &rec.push[y * na + b];
                for (xn, &p) in self.mdp.next_probs(y, b).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let c = w * p;
                    for (i, (&lo, &hw)) in push.lo.iter().zip(&push.hi_w).enumerate() {
                        let col = xn * m + i;
                        mat[(y * m + lo, col)] -= c * (1.0 - hw);
                        mat[(y * m + lo + 1, col)] -= c * hw;
                    }
                }
            }
        }
        // With trace weights summing to 1 the system is singular along total
        // mass. A zero-mass right-hand side has a zero-mass solution, so
        // pinning each block's mass to zero leaves it unchanged.
        if rec.zero_mass_rhs(m) {
            for y in 0..ns {
                for j in 0..m {
                    mat[(y * m, y * m + j)] += 1.0;
                }
            }
        }
        let rhs = DVector::from_column_slice(&rec.rhs);
        let sol = mat
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Domain("singular correction system".into()))?;
        Ok((
            sol.as_slice().to_vec(),
            SolveStats {
                iterations: 1,
                residual: 0.0,
                linear_solve: true,
                ..SolveStats::default()
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{lp_distance, pushforward_matrix, sup_lp_distance, SignedMeasure};
    use crate::mdp::{eta_pi_dp, mix_policies, q_values, random_mdp, uniform_policy, Policy, QValues};

    fn grid(v0: f64, v1: f64, m: usize) -> Arc<AtomGrid> {
        Arc::new(AtomGrid::uniform(v0, v1, m).unwrap())
    }

    fn chain(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, gamma, vec![1.0], vec![reward]).unwrap()
    }

    fn random_policy(ns: usize, na: usize, seed: u64) -> Policy {
        use rand::Rng;
        let mut rng = crate::mdp::seeded_rng(seed);
        let mut probs = Vec::new();
        for _ in 0..ns {
            let row: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            probs.extend(row.iter().map(|p| p / s));
        }
        Policy::new(ns, na, probs).unwrap()
    }

    #[test]
    fn td_measure_examples() {
        let mdp = chain(1.0, 0.5);
        let g = grid(0.0, 4.0, 5);
        let eta = ReturnFunction::from_measures(g.clone(), 1, 1, |_, _| SignedMeasure::dirac(g.clone(), 0)).unwrap();
        let d = td_measure(&mdp, &uniform_policy(&mdp), &eta).unwrap();
        assert_eq!(d.entry(0, 0), &[-1.0, 1.0, 0.0, 0.0, 0.0]);

        let zero = TabularMdp::new(2, 2, 0.9, vec![0.2, 0.8, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0], vec![0.0; 4]).unwrap();
        let g = grid(-1.0, 1.0, 3);
        let eta = ReturnFunction::from_measures(g.clone(), 2, 2, |_, _| SignedMeasure::dirac(g.clone(), 1)).unwrap();
        let d = td_measure(&zero, &uniform_policy(&zero), &eta).unwrap();
        assert!(d.masses().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn td_measure_vanishes_at_the_projected_fixed_point() {
        let mdp = random_mdp(4, 3, 2, 0.5, 0.8).unwrap();
        let pi = uniform_policy(&mdp);
        let g = Arc::new(mdp.covering_grid(31).unwrap());
        let eta = eta_pi_dp(&mdp, &pi, &g, 1e-13).unwrap();
        let d = td_measure(&mdp, &pi, &eta).unwrap();
        assert!(d.max_abs_mass() < 1e-10);
        for x in 0..3 {
            for a in 0..2 {
                assert!(d.total_mass(x, a).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn trace_coefficient_examples() {
        let mu = Policy::new(1, 3, vec![0.3, 0.3, 0.4]).unwrap();
        let pi = Policy::new(1, 3, vec![0.9, 0.1, 0.0]).unwrap();
        assert_eq!(trace_coefficient(&TraceSpec::Retrace(2.0), &pi, &mu, 0, 0).unwrap(), 2.0);
        assert!((trace_coefficient(&TraceSpec::Retrace(2.0), &pi, &mu, 0, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(trace_coefficient(&TraceSpec::OffPolicyLambda(0.4), &pi, &mu, 0, 2).unwrap(), 0.4);
        assert_eq!(trace_coefficient(&TraceSpec::Retrace(1.0), &mu, &mu, 0, 1).unwrap(), 1.0);

        let mu0 = Policy::new(1, 2, vec![1.0, 0.0]).unwrap();
        let pi0 = Policy::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            trace_coefficient(&TraceSpec::Retrace(1.0), &pi0, &mu0, 0, 1),
            Err(Error::SupportViolation { state: 0, action: 1 })
        ));
        // 0/0 = 0
        assert_eq!(trace_coefficient(&TraceSpec::Retrace(1.0), &mu0, &mu0, 0, 1).unwrap(), 0.0);
        assert!(trace_coefficient(&TraceSpec::OneStep, &pi0, &mu0, 0, 0).is_err());
    }

    #[test]
    fn trace_spec_parsing_and_validation() {
        assert_eq!(TraceSpec::parse("q_lambda:0.5").unwrap(), TraceSpec::OffPolicyLambda(0.5));
        assert_eq!(TraceSpec::parse("one_step").unwrap(), TraceSpec::OneStep);
        assert_eq!(TraceSpec::parse("n_step:3").unwrap(), TraceSpec::NStep(3));
        assert_eq!(TraceSpec::parse("retrace:2").unwrap(), TraceSpec::Retrace(2.0));
        assert!(TraceSpec::parse("q_lambda:1.5").is_err());
        assert!(TraceSpec::parse("retrace:0").is_err());
        assert!(TraceSpec::parse("n_step:0").is_err());
        assert!(TraceSpec::parse("bogus").is_err());
        let s = TraceSpec::Peng(0.3);
        assert_eq!(TraceSpec::parse(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn lambda_zero_reduces_to_one_step() {
        let mdp = random_mdp(5, 4, 5, 0.3, 0.9).unwrap();
        let pi = random_policy(4, 5, 1);
        let mu = uniform_policy(&mdp);
        let g = Arc::new(mdp.covering_grid(21).unwrap());
        let eta = ReturnFunction::uniform(g, 4, 5);
        let one = apply_operator(&mdp, &pi, &mu, &TraceSpec::OneStep, &eta, &SolverOptions::default()).unwrap();
        for trace in [TraceSpec::OffPolicyLambda(0.0), TraceSpec::AltLambda(0.0), TraceSpec::NStep(1)] {
            for mode in [SolverMode::Iterate, SolverMode::LinearSolve] {
                let opts = SolverOptions::default().with_mode(mode);
                let out = apply_operator(&mdp, &pi, &mu, &trace, &eta, &opts).unwrap();
                for (a, b) in out.masses().iter().zip(one.masses()) {
                    assert!((a - b).abs() < 1e-12, "{trace}: {a} vs {b}");
                }
            }
        }
        let peng = apply_operator(&mdp, &pi, &mu, &TraceSpec::Peng(0.0), &eta, &SolverOptions::default()).unwrap();
        assert!(sup_lp_distance(&peng, &one, 2.0).unwrap() < 1e-12);
    }

    /// Dense Neumann series `D = sum_{t<T} K^t Delta` on the working grid.
    fn brute_force_trace(
        mdp: &TabularMdp,
        pi: &Policy,
        weights: &dyn Fn(usize, usize) -> f64,
        eta: &ReturnFunction,
        refine: usize,
        terms: usize,
    ) -> Vec<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let coarse = eta.grid().clone();
        let fine = coarse.refined(refine);
        let (mc, mf) = (coarse.len(), fine.len());
        let mats: Vec<DMatrix<f64>> = (0..ns * na)
            .map(|k| pushforward_matrix(&fine, mdp.reward(k / na, k % na), mdp.gamma()).unwrap())
            .collect();
        let embed = |v: &[f64]| {
            let mut out = DVector::zeros(mf);
            for (i, p) in v.iter().enumerate() {
                out[i * refine] = *p;
            }
            out
        };
        let eta_f: Vec<DVector<f64>> = (0..ns * na).map(|k| embed(eta.entry(k / na, k % na))).collect();
        let backup = |per_state: &[DVector<f64>], k: usize| {
            let (x, a) = (k / na, k % na);
            let mut acc = DVector::zeros(mf);
            for (y, p) in mdp.next_probs(x, a).iter().enumerate() {
                acc += &per_state[y] * *p;
            }
            &mats[k] * acc
        };
        let eta_pi: Vec<DVector<f64>> = (0..ns)
            .map(|y| (0..na).fold(DVector::zeros(mf), |acc, b| acc + &eta_f[y * na + b] * pi.prob(y, b)))
            .collect();
        let delta: Vec<DVector<f64>> = (0..ns * na).map(|k| backup(&eta_pi, k) - &eta_f[k]).collect();
        let mut term = delta.clone();
        let mut total = delta.clone();
        for _ in 1..terms {
            let e: Vec<DVector<f64>> = (0..ns)
                .map(|y| (0..na).fold(DVector::zeros(mf), |acc, b| acc + &term[y * na + b] * weights(y, b)))
                .collect();
            term = (0..ns * na).map(|k| backup(&e, k)).collect();
            for (t, v) in total.iter_mut().zip(&term) {
                *t += v;
            }
        }
        let proj = |v: &DVector<f64>| {
            let mut out = vec![0.0; mc];
            for (j, p) in v.iter().enumerate() {
                let (c, s) = (j / refine, j % refine);
                let hw = s as f64 / refine as f64;
                out[c] += p * (1.0 - hw);
                if s > 0 {
                    out[c + 1] += p * hw;
                }
            }
            out
        };
        let mut out = Vec::with_capacity(ns * na * mc);
        for k in 0..ns * na {
            let d = proj(&total[k]);
            out.extend(d.iter().zip(eta.entry(k / na, k % na)).map(|(a, b)| a + b));
        }
        out
    }

    #[test]
    fn on_policy_paths_agree_with_brute_force_series() {
        let mdp = random_mdp(6, 2, 3, 0.5, 0.8).unwrap();
        let pi = random_policy(2, 3, 2);
        let g = Arc::new(mdp.covering_grid(11).unwrap());
        let eta = ReturnFunction::uniform(g, 2, 3);
        let lambda: f64 = 0.6;
        let terms = (1e-12f64.ln() / lambda.ln()).ceil() as usize + 1;
        for refine in [1, 4] {
            let opts = SolverOptions::default().with_refine(refine);
            let oracle = brute_force_trace(&mdp, &pi, &|y, b| lambda * pi.prob(y, b), &eta, refine, terms);
            let paths = [
                apply_operator(&mdp, &pi, &pi, &TraceSpec::OffPolicyLambda(lambda), &eta, &opts).unwrap(),
                apply_operator(&mdp, &pi, &uniform_policy(&mdp), &TraceSpec::OnPolicyLambda(lambda), &eta, &opts)
                    .unwrap(),
                apply_operator(&mdp, &pi, &pi, &TraceSpec::Retrace(lambda), &eta, &opts).unwrap(),
            ];
            for out in &paths {
                for (a, b) in out.masses().iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-10, "refine {refine}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn off_policy_retrace_matches_brute_force() {
        let mdp = random_mdp(7, 2, 3, 0.5, 0.7).unwrap();
        let pi = random_policy(2, 3, 3);
        let mu = random_policy(2, 3, 4);
        let g = Arc::new(mdp.covering_grid(9).unwrap());
        let eta = ReturnFunction::uniform(g, 2, 3);
        let cbar: f64 = 1.5;
        let w = |y: usize, b: usize| mu.prob(y, b) * cbar.min(pi.prob(y, b) / mu.prob(y, b));
        let oracle = brute_force_trace(&mdp, &pi, &w, &eta, 2, 200);
        let opts = SolverOptions::default().with_refine(2);
        let out = apply_operator(&mdp, &pi, &mu, &TraceSpec::Retrace(cbar), &eta, &opts).unwrap();
        for (a, b) in out.masses().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        let trunc = apply_operator(&mdp, &pi, &mu, &TraceSpec::Retrace(cbar), &eta, &opts.with_horizon(3)).unwrap();
        let oracle3 = brute_force_trace(&mdp, &pi, &w, &eta, 2, 3);
        for (a, b) in trunc.masses().iter().zip(&oracle3) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_and_iterative_solvers_agree() {
        let mdp = random_mdp(8, 3, 4, 0.2, 0.9).unwrap();
        let pi = random_policy(3, 4, 5);
        let mu = uniform_policy(&mdp);
        let g = Arc::new(mdp.covering_grid(15).unwrap());
        let eta = ReturnFunction::uniform(g, 3, 4);
        for trace in [
            TraceSpec::OffPolicyLambda(0.7),
            TraceSpec::Retrace(1.0),
            TraceSpec::Peng(0.5),
            TraceSpec::AltLambda(0.5),
        ] {
            let it = apply_operator(&mdp, &pi, &mu, &trace, &eta, &SolverOptions::default().with_mode(SolverMode::Iterate))
                .unwrap();
            let lu = apply_operator(
                &mdp,
                &pi,
                &mu,
                &trace,
                &eta,
                &SolverOptions::default().with_mode(SolverMode::LinearSolve),
            )
            .unwrap();
            for (a, b) in it.masses().iter().zip(lu.masses()) {
                assert!((a - b).abs() < 1e-8, "{trace}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_chain_fixed_point_is_preserved() {
        let mdp = chain(1.0, 0.5);
        let pi = uniform_policy(&mdp);
        let g = grid(0.0, 4.0, 401);
        let eta = eta_pi_dp(&mdp, &pi, &g, 1e-13).unwrap();
        let exact = SolverOptions::default().with_refine(1);
        let out = apply_operator(&mdp, &pi, &pi, &TraceSpec::OffPolicyLambda(0.5), &eta, &exact).unwrap();
        assert!(sup_lp_distance(&out, &eta, 2.0).unwrap() < 1e-9);
        let refined = apply_operator(&mdp, &pi, &pi, &TraceSpec::OffPolicyLambda(0.5), &eta, &SolverOptions::default())
            .unwrap();
        assert!(sup_lp_distance(&refined, &eta, 2.0).unwrap() < 10.0 * g.spacing());
        assert!((refined.means()[0] - 2.0).abs() < g.spacing());
    }

    #[test]
    fn single_chain_closed_form() {
        // A delta_0 = delta_0 + sum_t lambda^t (delta_{G_t} - delta_{G_{t-1}}), G_t = 2 - 2^{-t}
        let mdp = chain(1.0, 0.5);
        let pi = uniform_policy(&mdp);
        let g = grid(0.0, 2.0, 3);
        let eta = ReturnFunction::from_measures(g.clone(), 1, 1, |_, _| SignedMeasure::dirac(g.clone(), 0)).unwrap();
        let lambda: f64 = 0.5;
        // all positions G_{0:t} = 2 - 2^{1-t} are dyadic, so a refinement of
        // 2^12 keeps the first 12 terms exact
        let out = apply_operator(
            &mdp,
            &pi,
            &pi,
            &TraceSpec::OffPolicyLambda(lambda),
            &eta,
            &SolverOptions::default().with_refine(1 << 12),
        )
        .unwrap();
        let mut expected = vec![1.0, 0.0, 0.0];
        for t in 0..60 {
            let w = lambda.powi(t);
            let hi = 2.0 - 2f64.powi(-t); // G_{0:t}
            let lo = if t == 0 { 0.0 } else { 2.0 - 2f64.powi(1 - t) };
            for (pos, sign) in [(hi, 1.0), (lo, -1.0)] {
                let (c, frac) = if pos >= 2.0 { (1, 1.0) } else { (pos.floor() as usize, pos.fract()) };
                expected[c] += sign * w * (1.0 - frac);
                expected[c + 1] += sign * w * frac;
            }
        }
        for (a, b) in out.masses().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", out.masses(), expected);
        }
    }

    #[test]
    fn outputs_have_unit_mass_and_can_turn_signed() {
        let mut found_negative = false;
        for seed in 0..20 {
            let mdp = random_mdp(seed, 3, 4, 0.1, 0.9).unwrap();
            let g = Arc::new(mdp.covering_grid(21).unwrap());
            let mu = uniform_policy(&mdp);
            let q = QValues::new(3, 4, mdp.rewards().to_vec()).unwrap();
            let pi = mix_policies(0.9, &crate::mdp::greedy_policy(&q), &mu).unwrap();
            // action-dependent inputs; with identical entries the signed terms cancel
            let m = g.len();
            let eta =
                ReturnFunction::from_measures(g.clone(), 3, 4, |x, a| SignedMeasure::dirac(g.clone(), (7 * (x * 4 + a)) % m))
                    .unwrap();
            for trace in [
                TraceSpec::OffPolicyLambda(0.9),
                TraceSpec::Retrace(2.0),
                TraceSpec::Peng(0.7),
                TraceSpec::AltLambda(0.9),
                TraceSpec::NStep(3),
            ] {
                let out = apply_operator(&mdp, &pi, &mu, &trace, &eta, &SolverOptions::default()).unwrap();
                assert!(out.total_mass_error() < 1e-9);
                if matches!(trace, TraceSpec::OffPolicyLambda(_)) && out.min_mass() < -1e-6 {
                    found_negative = true;
                }
            }
        }
        assert!(found_negative);
    }

    #[test]
    fn one_step_mean_tracks_value_backup() {
        let mdp = random_mdp(9, 4, 3, 0.3, 0.9).unwrap();
        let pi = uniform_policy(&mdp);
        let g = Arc::new(mdp.covering_grid(51).unwrap());
        let eta = eta_pi_dp(&mdp, &pi, &g, 1e-10).unwrap();
        let out = apply_operator(&mdp, &pi, &pi, &TraceSpec::OneStep, &eta, &SolverOptions::default()).unwrap();
        let q = eta.means();
        for x in 0..4 {
            for a in 0..3 {
                let v: f64 = mdp
                    .next_probs(x, a)
                    .iter()
                    .enumerate()
                    .map(|(y, p)| p * (0..3).map(|b| pi.prob(y, b) * q[y * 3 + b]).sum::<f64>())
                    .sum();
                let backup = mdp.reward(x, a) + mdp.gamma() * v;
                assert!((out.means()[x * 3 + a] - backup).abs() <= 2.0 * g.spacing());
            }
        }
        let qpi = q_values(&mdp, &pi).unwrap();
        assert!(qpi.values().iter().zip(&q).all(|(a, b)| (a - b).abs() < 0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mdp = random_mdp(1, 2, 2, 0.5, 0.9).unwrap();
        let g = Arc::new(mdp.covering_grid(5).unwrap());
        let eta = ReturnFunction::uniform(g.clone(), 2, 2);
        let mu = uniform_policy(&mdp);
        let opts = SolverOptions::default();
        assert!(apply_operator(&mdp, &mu, &mu, &TraceSpec::Peng(1.0), &eta, &opts).is_err());
        assert!(apply_operator(&mdp, &mu, &mu, &TraceSpec::Retrace(-1.0), &eta, &opts).is_err());
        let wrong = ReturnFunction::uniform(g, 3, 2);
        assert!(apply_operator(&mdp, &mu, &mu, &TraceSpec::OneStep, &wrong, &opts).is_err());
        let bad_mu = Policy::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            apply_operator(&mdp, &mu, &bad_mu, &TraceSpec::Retrace(1.0), &eta, &opts),
            Err(Error::SupportViolation { .. })
        ));
        let tight = SolverOptions {
            mode: SolverMode::Iterate,
            max_depth: 2,
            ..SolverOptions::default()
        };
        assert!(matches!(
            apply_operator(&mdp, &mu, &mu, &TraceSpec::OffPolicyLambda(0.9), &eta, &tight),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn pointwise_distance_matches_sup_for_single_entry() {
        let g = grid(0.0, 1.0, 2);
        let a = ReturnFunction::from_measures(g.clone(), 1, 1, |_, _| SignedMeasure::dirac(g.clone(), 0)).unwrap();
        let b = ReturnFunction::from_measures(g.clone(), 1, 1, |_, _| SignedMeasure::dirac(g.clone(), 1)).unwrap();
        assert_eq!(
            sup_lp_distance(&a, &b, 2.0).unwrap(),
            lp_distance(&a.measure(0, 0), &b.measure(0, 0), 2.0).unwrap()
        );
    }

    #[test]
    fn unit_traces_solve_densely() {
        // one action and c = 1: weights sum to one at every state
        let mdp = random_mdp(3, 4, 1, 0.5, 0.7).unwrap();
        let pi = uniform_policy(&mdp);
        let g = grid(-5.0, 5.0, 7);
        let eta = crate::analysis::random_signed_return_function(&g, 4, 1, &mut crate::mdp::seeded_rng(1));
        for trace in [TraceSpec::Retrace(1.5), TraceSpec::OffPolicyLambda(1.0)] {
            let opts = SolverOptions::default();
            let lin = apply_operator(&mdp, &pi, &pi, &trace, &eta, &opts.with_mode(SolverMode::LinearSolve)).unwrap();
            let it = apply_operator(&mdp, &pi, &pi, &trace, &eta, &opts.with_mode(SolverMode::Iterate)).unwrap();
            assert!(sup_lp_distance(&lin, &it, 2.0).unwrap() < 1e-8);
        }
    }
}

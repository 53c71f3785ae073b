//! Iterated projected recursions for policy evaluation and control, with
//! per-iteration diagnostics.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{lp_distance, sup_lp_distance, AtomGrid, ReturnFunction};
use crate::mdp::{
    eta_pi_dp, greedy_policy, mc_horizon, mc_return_oracle, mix_policies, policy_l1_distance, stream_rng,
    value_iteration, Policy, QValues, TabularMdp,
};
use crate::operators::{apply_operator_with_stats, SolverOptions, TraceSpec};

pub const LOG_SCHEMA: &str = "# schema: distq.iteration_log v1";
pub const LOG_HEADER: &str = "k,sup_l2,pt_l2,min_mass,mass_err,step_change,policy_eps";

/// Clipped mass per application above which the engine warns.
pub const CLIP_WARN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub k: usize,
    pub sup_l2: f64,
    pub pt_l2: f64,
    pub min_mass: f64,
    pub mass_err: f64,
    pub step_change: f64,
    pub policy_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Evaluate,
    Control,
}

/// Experiment grid: explicit bounds, or the return range of the MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub m: usize,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    /// Accept explicit bounds that do not cover every possible return.
    pub allow_uncovered: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            m: 10,
            v_min: None,
            v_max: None,
            allow_uncovered: false,
        }
    }
}

impl GridSpec {
    pub fn with_atoms(m: usize) -> Self {
        Self { m, ..Self::default() }
    }

    pub fn build(&self, mdp: &TabularMdp) -> Result<Arc<AtomGrid>> {
        let grid = match (self.v_min, self.v_max) {
            (None, None) => mdp.covering_grid(self.m)?,
            (lo, hi) => {
                let (dlo, dhi) = mdp.return_range();
                AtomGrid::uniform(lo.unwrap_or(dlo), hi.unwrap_or(dhi), self.m)?
            }
        };
        let (r_lo, r_hi) = mdp.reward_range();
        if !grid.covers_returns(r_lo, r_hi, mdp.gamma()) {
            if !self.allow_uncovered {
                return Err(Error::InvalidGrid(format!(
                    "{grid} does not cover the return range {:?}; pass allow_uncovered to override",
                    mdp.return_range()
                )));
            }
            log::warn!("grid {grid} does not cover the return range {:?}", mdp.return_range());
        }
        Ok(Arc::new(grid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSpec {
    /// Monte-Carlo trajectories per `(x, a)` for the control oracle.
    pub n_traj: usize,
    /// Truncation tail as a fraction of the grid span.
    pub tail_tol: f64,
    /// Stopping tolerance of the dynamic-programming evaluation oracle.
    pub dp_tol: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            tail_tol: 1e-4,
            dp_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub trace: TraceSpec,
    pub grid: GridSpec,
    pub k_max: usize,
    /// Stop early once the step change falls below this.
    pub stop_tol: Option<f64>,
    /// Target mixing coefficient for control.
    pub alpha: f64,
    pub oracle: OracleSpec,
    pub seed: u64,
    pub solver: SolverOptions,
    pub tracked: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Evaluate,
            trace: TraceSpec::OneStep,
            grid: GridSpec::default(),
            k_max: 100,
            stop_tol: None,
            alpha: 1.0,
            oracle: OracleSpec::default(),
            seed: 0,
            solver: SolverOptions::default(),
            tracked: (0, 0),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        if self.k_max == 0 {
            return Err(invalid("k_max", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if self.tracked.0 >= mdp.n_states() || self.tracked.1 >= mdp.n_actions() {
            return Err(invalid("tracked", format!("pair {:?} out of range", self.tracked)));
        }
        if self.oracle.n_traj == 0 {
            return Err(invalid("n_traj", "need at least one trajectory"));
        }
        self.trace.validate()?;
        self.solver.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub logs: Vec<IterationLog>,
    pub final_eta: ReturnFunction,
    pub oracle: ReturnFunction,
    pub grid: Arc<AtomGrid>,
}

impl RunResult {
    pub fn last(&self) -> &IterationLog {
        self.logs.last().expect("runs log at least one iteration")
    }

    pub fn min_sup_l2(&self) -> f64 {
        self.logs.iter().map(|l| l.sup_l2).fold(f64::INFINITY, f64::min)
    }
}

/// Iterates `eta_{k+1} = Pi_c O^{pi,mu} eta_k` from the uniform measure,
/// logging distances to the projected one-step fixed point of `pi`.
pub fn evaluate(mdp: &TabularMdp, pi: &Policy, mu: &Policy, config: &RunConfig) -> Result<RunResult> {
    config.validate(mdp)?;
    let grid = config.grid.build(mdp)?;
    let oracle = eta_pi_dp(mdp, pi, &grid, config.oracle.dp_tol)?;
    let eta0 = ReturnFunction::uniform(Arc::clone(&grid), mdp.n_states(), mdp.n_actions());
    run_from(mdp, mu, config, eta0, oracle, |_| Ok(pi.clone()))
}

/// Control with target `mix(alpha, greedy(Q_{eta_k}), mu)`, logging distances
/// to a Monte-Carlo estimate of the optimal return distribution.
pub fn control(mdp: &TabularMdp, mu: &Policy, config: &RunConfig) -> Result<RunResult> {
    config.validate(mdp)?;
    let grid = config.grid.build(mdp)?;
    let oracle = optimal_return_oracle(mdp, &grid, &config.oracle, config.seed)?;
    let eta0 = ReturnFunction::uniform(Arc::clone(&grid), mdp.n_states(), mdp.n_actions());
    let alpha = config.alpha;
    run_from(mdp, mu, config, eta0, oracle, |eta| {
        let g = greedy_policy(&QValues::from_return_function(eta));
        mix_policies(alpha, &g, mu)
    })
}

/// MC returns of the value-iteration optimal policy, projected onto `grid`.
pub fn optimal_return_oracle(
    mdp: &TabularMdp,
    grid: &Arc<AtomGrid>,
    spec: &OracleSpec,
    seed: u64,
) -> Result<ReturnFunction> {
    let (_, pi_star) = value_iteration(mdp, 1e-10)?;
    let horizon = mc_horizon(mdp, grid.span(), spec.tail_tol);
    // stream 0 is reserved for the oracle so it never aliases a run's own stream
    let mut rng = stream_rng(seed, 0);
    mc_return_oracle(mdp, &pi_star, grid, spec.n_traj, horizon, &mut rng)
}

fn run_from(
    mdp: &TabularMdp,
    mu: &Policy,
    config: &RunConfig,
    eta0: ReturnFunction,
    oracle: ReturnFunction,
    mut target: impl FnMut(&ReturnFunction) -> Result<Policy>,
) -> Result<RunResult> {
    let (x0, a0) = config.tracked;
    let mut eta = eta0;
    let mut logs = Vec::with_capacity(config.k_max);
    let mut clip_warnings = 0usize;
    for k in 1..=config.k_max {
        let wrap = |e: Error| Error::AtIteration { k, source: Box::new(e) };
        let pi = target(&eta).map_err(wrap)?;
        let (next, stats) =
            apply_operator_with_stats(mdp, &pi, mu, &config.trace, &eta, &config.solver).map_err(wrap)?;
        if stats.clipped_mass > CLIP_WARN {
            if clip_warnings == 0 {
                log::warn!(
                    "iteration {k}: {:.3e} mass clipped at the grid boundary",
                    stats.clipped_mass
                );
            }
            clip_warnings += 1;
        }
        let step_change = sup_lp_distance(&next, &eta, 2.0)?;
        eta = next;
        let log = IterationLog {
            k,
            sup_l2: sup_lp_distance(&eta, &oracle, 2.0)?,
            pt_l2: lp_distance(&eta.measure(x0, a0), &oracle.measure(x0, a0), 2.0)?,
            min_mass: eta.min_mass(),
            mass_err: eta.total_mass_error(),
            step_change,
            policy_eps: policy_l1_distance(&pi, mu)?,
        };
        log::debug!("{log:?}");
        logs.push(log);
        if config.stop_tol.is_some_and(|tol| step_change < tol) {
            break;
        }
    }
    if clip_warnings > 1 {
        log::warn!("boundary clipping above {CLIP_WARN:e} in {clip_warnings} iterations");
    }
    Ok(RunResult {
        logs,
        final_eta: eta,
        grid: Arc::clone(oracle.grid()),
        oracle,
    })
}

/// Iterates the operator from `eta0` until the sup-l2 step change is below `tol`.
pub fn iterate_to_fixed_point(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    trace: &TraceSpec,
    eta0: ReturnFunction,
    opts: &SolverOptions,
    tol: f64,
    max_iter: usize,
) -> Result<(ReturnFunction, usize)> {
    let mut eta = eta0;
    let mut change = f64::INFINITY;
    for k in 1..=max_iter {
        let next = apply_operator_with_stats(mdp, pi, mu, trace, &eta, opts)
            .map_err(|e| Error::AtIteration { k, source: Box::new(e) })?
            .0;
        change = sup_lp_distance(&next, &eta, 2.0)?;
        eta = next;
        if change < tol {
            return Ok((eta, k));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Frame {
    pub k: usize,
    pub masses: Vec<f64>,
    pub min_mass: f64,
    pub total_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Trace {
    pub atoms: Vec<f64>,
    pub tracked: (usize, usize),
    pub frames: Vec<Figure1Frame>,
    /// Projected one-step fixed point of `pi` at the tracked pair.
    pub target: Vec<f64>,
}

impl Figure1Trace {
    pub fn min_over_run(&self) -> f64 {
        self.frames.iter().map(|f| f.min_mass).fold(f64::INFINITY, f64::min)
    }

    pub fn final_frame(&self) -> &Figure1Frame {
        self.frames.last().expect("at least the initial frame")
    }
}

/// Mass vectors of the off-policy Q(lambda) iterate at `tracked`, for `k = 0..=k_max`.
#[allow(clippy::too_many_arguments)]
pub fn figure1_trace(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    lambda: f64,
    grid: &Arc<AtomGrid>,
    k_max: usize,
    tracked: (usize, usize),
    opts: &SolverOptions,
) -> Result<Figure1Trace> {
    let (x0, a0) = tracked;
    if x0 >= mdp.n_states() || a0 >= mdp.n_actions() {
        return Err(invalid("tracked", format!("pair {tracked:?} out of range")));
    }
    let trace = TraceSpec::OffPolicyLambda(lambda);
    let frame = |k: usize, eta: &ReturnFunction| {
        let m = eta.measure(x0, a0);
        Figure1Frame {
            k,
            min_mass: m.min_mass(),
            total_mass: m.total_mass(),
            masses: m.into_masses(),
        }
    };
    let mut eta = ReturnFunction::uniform(Arc::clone(grid), mdp.n_states(), mdp.n_actions());
    let mut frames = vec![frame(0, &eta)];
    for k in 1..=k_max {
        eta = apply_operator_with_stats(mdp, pi, mu, &trace, &eta, opts)
            .map_err(|e| Error::AtIteration { k, source: Box::new(e) })?
            .0;
        frames.push(frame(k, &eta));
    }
    let target = eta_pi_dp(mdp, pi, grid, 1e-10)?.entry(x0, a0).to_vec();
    Ok(Figure1Trace {
        atoms: grid.atoms().to_vec(),
        tracked,
        frames,
        target,
    })
}

/// Writes iteration logs as CSV with a versioned schema comment.
pub fn write_log_csv<W: Write>(out: W, logs: &[IterationLog]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{LOG_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for log in logs {
        w.serialize(log).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

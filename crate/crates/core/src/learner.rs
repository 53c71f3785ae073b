//! Sample-based Q(lambda) with softmax categorical predictions per `(x, a)`,
//! trained from replayed trajectory segments against a slowly tracking target.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{csv_err, GridSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::{AtomGrid, ProjectedPushforward, ReturnFunction, SignedMeasure};
use crate::mdp::{sample_index, stream_rng, value_iteration, QValues, Step, TabularMdp, TrajectorySegment};
use crate::operators::{coefficient_from_probs, TraceSpec};

pub const TRAIN_SCHEMA: &str = "# schema: distq.training_log v1";
pub const TRAIN_HEADER: &str = "step,epsilon,sup_q_error,greedy_accuracy,mean_min_mass_of_targets";

/// Logits `l(x, a, i)`; the prediction at `(x, a)` is `softmax(l(x, a, .))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams {
    grid: Arc<AtomGrid>,
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    atoms: Vec<f64>,
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl LearnerParams {
    /// All-zero logits: uniform predictions.
    pub fn zeros(grid: Arc<AtomGrid>, n_states: usize, n_actions: usize) -> Self {
        let logits = vec![0.0; n_states * n_actions * grid.len()];
        Self {
            grid,
            n_states,
            n_actions,
            logits,
        }
    }

    pub fn from_logits(grid: Arc<AtomGrid>, n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {n_states}x{n_actions}x{}",
                logits.len(),
                grid.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self {
            grid,
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn grid(&self) -> &Arc<AtomGrid> {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_row(&self, x: usize, a: usize) -> &[f64] {
        let m = self.grid.len();
        let i = (x * self.n_actions + a) * m;
        &self.logits[i..i + m]
    }

    fn logits_row_mut(&mut self, x: usize, a: usize) -> &mut [f64] {
        let m = self.grid.len();
        let i = (x * self.n_actions + a) * m;
        &mut self.logits[i..i + m]
    }

    pub fn probs(&self, x: usize, a: usize) -> Vec<f64> {
        softmax(self.logits_row(x, a))
    }

    pub fn predicted(&self) -> ReturnFunction {
        let masses = self.logits.chunks(self.grid.len()).flat_map(softmax).collect();
        ReturnFunction::new(Arc::clone(&self.grid), self.n_states, self.n_actions, masses)
            .expect("softmax rows are distributions")
    }

    pub fn q_values(&self) -> QValues {
        QValues::from_return_function(&self.predicted())
    }

    /// `self <- (1 - tau) self + tau online`.
    pub fn track(&mut self, online: &Self, tau: f64) {
        for (t, o) in self.logits.iter_mut().zip(&online.logits) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ParamsDoc {
            atoms: self.grid.atoms().to_vec(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            logits: self.logits.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc = serde_json::from_str(text)?;
        let grid = Arc::new(AtomGrid::from_atoms(doc.atoms)?);
        Self::from_logits(grid, doc.n_states, doc.n_actions, doc.logits)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// One summand `w * (b_{G, gamma^t})_# eta(X_t, b)` of a sampled back-up.
#[derive(Debug, Clone, PartialEq)]
pub struct BackupTerm {
    pub t: usize,
    pub action: usize,
    pub weight: f64,
    pub measure: SignedMeasure,
}

fn learner_coefficient(trace: &TraceSpec, p: f64, m: f64) -> Result<f64> {
    match trace {
        TraceSpec::OneStep => Ok(0.0),
        TraceSpec::NStep(_) | TraceSpec::Peng(_) | TraceSpec::AltLambda(_) => Err(invalid(
            "trace",
            format!("{trace} has no sampled back-up; use one_step, q_lambda, on_policy_lambda or retrace"),
        )),
        _ => coefficient_from_probs(trace, p, m),
    }
}

/// Signed-weight back-up terms for one segment.
///
/// `pi_rows[t - 1]` is the target policy at `X_t` for `t = 1..=n`; the behavior
/// probabilities come from the segment. Terms with zero weight are dropped.
pub fn backup_terms(
    segment: &TrajectorySegment,
    gamma: f64,
    trace: &TraceSpec,
    pi_rows: &[Vec<f64>],
    target: &ReturnFunction,
) -> Result<Vec<BackupTerm>> {
    learner_coefficient(trace, 1.0, 1.0)?;
    let n = segment.len();
    if n == 0 {
        return Err(invalid("segment", "must hold at least one step"));
    }
    if pi_rows.len() != n {
        return Err(Error::ShapeMismatch(format!("{} target rows for a segment of length {n}", pi_rows.len())));
    }
    let na = target.n_actions();
    let grid = target.grid();
    let mut terms = Vec::new();
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut c_prod = 1.0;
    for t in 1..=n {
        let prev = &segment.steps[t - 1];
        ret += disc * prev.reward;
        disc *= gamma;
        if t > 1 {
            let (p, m) = (pi_rows[t - 2][prev.action], prev.behavior_probs[prev.action]);
            c_prod *= learner_coefficient(trace, p, m).map_err(|e| at_step(e, prev))?;
        }
        let x = segment.state_at(t);
        let row = &pi_rows[t - 1];
        if row.len() != na {
            return Err(Error::ShapeMismatch(format!("target row of length {} for {na} actions", row.len())));
        }
        let push = ProjectedPushforward::new(grid, ret, disc);
        for (b, &p) in row.iter().enumerate() {
            let w = if t < n {
                let mu = segment.steps[t].behavior_probs[b];
                let c = learner_coefficient(trace, p, mu).map_err(|e| at_pair(e, x, b))?;
                c_prod * (p - c * mu)
            } else {
                c_prod * p
            };
            if w == 0.0 {
                continue;
            }
            let mut masses = vec![0.0; grid.len()];
            push.apply_add(target.entry(x, b), 1.0, &mut masses);
            terms.push(BackupTerm {
                t,
                action: b,
                weight: w,
                measure: SignedMeasure::new(Arc::clone(grid), masses)?,
            });
        }
    }
    Ok(terms)
}

fn at_step(e: Error, step: &Step) -> Error {
    at_pair(e, step.state, step.action)
}

fn at_pair(e: Error, state: usize, action: usize) -> Error {
    match e {
        Error::SupportViolation { .. } => Error::SupportViolation { state, action },
        e => e,
    }
}

pub fn weight_sum(terms: &[BackupTerm]) -> f64 {
    terms.iter().map(|t| t.weight).sum()
}

/// `sum_k w_k q_k`, the signed target the terms estimate.
pub fn assemble_target(terms: &[BackupTerm], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for term in terms {
        for (o, q) in out.iter_mut().zip(term.measure.masses()) {
            *o += term.weight * q;
        }
    }
    out
}

/// `sum_k w_k CE(q_k, softmax(logits))` with `CE(q, p) = -sum_i q_i ln p_i`.
pub fn weighted_cross_entropy(logits: &[f64], terms: &[BackupTerm]) -> f64 {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    terms
        .iter()
        .map(|term| {
            let ce: f64 = term.measure.masses().iter().zip(logits).map(|(q, l)| -q * (l - lse)).sum();
            term.weight * ce
        })
        .sum()
}

/// Gradient of [`weighted_cross_entropy`] with respect to the logits:
/// `sum_k w_k (|q_k| p - q_k)`, i.e. `p - q` per unit-mass term.
pub fn gradient(probs: &[f64], terms: &[BackupTerm]) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    for term in terms {
        let mass = term.measure.total_mass();
        for ((gi, p), q) in g.iter_mut().zip(probs).zip(term.measure.masses()) {
            *gi += term.weight * (mass * p - q);
        }
    }
    g
}

/// A replayed segment together with the target policy along it.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub segment: TrajectorySegment,
    pub pi_rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean over the batch of the smallest atom mass of each assembled target.
    pub mean_min_mass: f64,
    pub mean_weight_sum: f64,
}

/// One descent step on the batch-averaged weighted cross-entropy.
pub fn gradient_step(
    params: &mut LearnerParams,
    target: &ReturnFunction,
    batch: &[BatchItem],
    gamma: f64,
    trace: &TraceSpec,
    kappa: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(invalid("batch", "must not be empty"));
    }
    let m = params.grid.len();
    let mut grads: Vec<((usize, usize), Vec<f64>)> = Vec::with_capacity(batch.len());
    let (mut min_sum, mut w_sum) = (0.0, 0.0);
    for item in batch {
        let terms = backup_terms(&item.segment, gamma, trace, &item.pi_rows, target)?;
        let (x, a) = item.segment.start();
        grads.push(((x, a), gradient(&params.probs(x, a), &terms)));
        min_sum += crate::grid::min_mass(&assemble_target(&terms, m));
        w_sum += weight_sum(&terms);
    }
    let scale = kappa / batch.len() as f64;
    for ((x, a), g) in grads {
        for (l, gi) in params.logits_row_mut(x, a).iter_mut().zip(&g) {
            *l -= scale * gi;
        }
    }
    let nb = batch.len() as f64;
    Ok(StepStats {
        mean_min_mass: min_sum / nb,
        mean_weight_sum: w_sum / nb,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub trace: TraceSpec,
    /// Target mixing: `pi = alpha greedy(Q_theta) + (1 - alpha) mu`.
    pub alpha: f64,
    /// Learning rate.
    pub kappa: f64,
    /// Target tracking rate.
    pub tau: f64,
    /// Segment length.
    pub n: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub eps_max: f64,
    pub eps_min: f64,
    /// Steps over which epsilon decays linearly from `eps_max` to `eps_min`.
    pub anneal_steps: usize,
    pub total_steps: usize,
    /// Transitions collected before the first update.
    pub learn_start: usize,
    pub log_every: usize,
    pub eval_eps: f64,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            trace: TraceSpec::OffPolicyLambda(0.4),
            alpha: 0.6,
            kappa: 3.0,
            tau: 0.05,
            n: 3,
            replay_capacity: 10_000,
            batch_size: 8,
            eps_max: 1.0,
            eps_min: 0.01,
            anneal_steps: 20_000,
            total_steps: 40_000,
            learn_start: 200,
            log_every: 500,
            eval_eps: 0.001,
            grid: GridSpec::with_atoms(51),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        learner_coefficient(&self.trace, 1.0, 1.0)?;
        self.trace.validate()?;
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(name, format!("must lie in [0, 1], got {v}")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("tau", self.tau)?;
        unit("eps_max", self.eps_max)?;
        unit("eps_min", self.eps_min)?;
        unit("eval_eps", self.eval_eps)?;
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid("kappa", format!("must be positive, got {}", self.kappa)));
        }
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid("batch_size", "batch_size and log_every must be positive"));
        }
        if self.replay_capacity <= self.n {
            return Err(invalid("replay_capacity", "must exceed the segment length"));
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.eps_min;
        }
        let f = step as f64 / self.anneal_steps as f64;
        self.eps_max + f * (self.eps_min - self.eps_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub epsilon: f64,
    pub sup_q_error: f64,
    /// Probability the evaluation policy picks an optimal action, averaged over states.
    pub greedy_accuracy: f64,
    pub mean_min_mass_of_targets: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: LearnerParams,
    pub logs: Vec<TrainLog>,
    pub q_star: QValues,
}

impl TrainResult {
    pub fn last(&self) -> &TrainLog {
        self.logs.last().expect("training always logs its final step")
    }
}

#[derive(Debug, Clone)]
struct Transition {
    step: Step,
    next_state: usize,
}

fn eps_greedy_row(q: &[f64], eps: f64) -> Vec<f64> {
    let na = q.len();
    let best = argmax(q);
    (0..na)
        .map(|b| eps / na as f64 + if b == best { 1.0 - eps } else { 0.0 })
        .collect()
}

fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (b, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = b;
        }
    }
    best
}

fn q_row(params: &LearnerParams, x: usize) -> Vec<f64> {
    let atoms = params.grid.atoms();
    (0..params.n_actions)
        .map(|a| params.probs(x, a).iter().zip(atoms).map(|(p, z)| p * z).sum())
        .collect()
}

fn evaluate_params(params: &LearnerParams, q_star: &QValues, eval_eps: f64) -> (f64, f64) {
    let q = params.q_values();
    let mut acc = 0.0;
    for x in 0..q.n_states() {
        let best = q_star.row(x).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = eps_greedy_row(q.row(x), eval_eps);
        acc += row
            .iter()
            .zip(q_star.row(x))
            .filter(|(_, &v)| v >= best - 1e-9 * best.abs().max(1.0))
            .map(|(p, _)| p)
            .sum::<f64>();
    }
    (q.sup_abs_diff(q_star), acc / q.n_states() as f64)
}

/// Runs the acting / replay / update loop on one continuing behavior stream.
pub fn train(mdp: &TabularMdp, config: &LearnerConfig) -> Result<TrainResult> {
    config.validate()?;
    let grid = config.grid.build(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (q_star, _) = value_iteration(mdp, 1e-10)?;
    let mut params = LearnerParams::zeros(Arc::clone(&grid), ns, na);
    let mut target = params.clone();
    let mut act_rng = stream_rng(config.seed, 1);
    let mut replay_rng = stream_rng(config.seed, 2);
    let mut replay: VecDeque<Transition> = VecDeque::with_capacity(config.replay_capacity);
    let mut logs = Vec::new();
    let (mut min_acc, mut min_count) = (0.0, 0usize);
    let mut x = act_rng.random_range(0..ns);

    for step in 1..=config.total_steps {
        let eps = config.epsilon(step - 1);
        let mu_row = eps_greedy_row(&q_row(&params, x), eps);
        let a = sample_index(&mu_row, &mut act_rng);
        let next = sample_index(mdp.next_probs(x, a), &mut act_rng);
        if replay.len() == config.replay_capacity {
            replay.pop_front();
        }
        replay.push_back(Transition {
            step: Step {
                state: x,
                action: a,
                reward: mdp.reward(x, a),
                behavior_probs: mu_row,
            },
            next_state: next,
        });
        x = next;

        if step >= config.learn_start && replay.len() > config.n {
            let target_eta = target.predicted();
            let q_online = params.q_values();
            let batch: Vec<BatchItem> = (0..config.batch_size)
                .map(|_| {
                    let i = replay_rng.random_range(0..replay.len() - config.n);
                    replay_item(&replay, i, config.n, &q_online, config.alpha)
                })
                .collect();
            let stats = gradient_step(&mut params, &target_eta, &batch, mdp.gamma(), &config.trace, config.kappa)?;
            target.track(&params, config.tau);
            min_acc += stats.mean_min_mass;
            min_count += 1;
        }

        if step % config.log_every == 0 || step == config.total_steps {
            let (sup_q_error, greedy_accuracy) = evaluate_params(&params, &q_star, config.eval_eps);
            logs.push(TrainLog {
                step,
                epsilon: eps,
                sup_q_error,
                greedy_accuracy,
                mean_min_mass_of_targets: if min_count > 0 { min_acc / min_count as f64 } else { f64::NAN },
            });
            (min_acc, min_count) = (0.0, 0);
        }
    }
    Ok(TrainResult { params, logs, q_star })
}

// Segment of transitions `i..i + n`; the behavior snapshot of transition
// `i + t` supplies `mu_hat` at `X_t` for the target mixture.
fn replay_item(replay: &VecDeque<Transition>, i: usize, n: usize, q: &QValues, alpha: f64) -> BatchItem {
    let steps: Vec<Step> = (i..i + n).map(|j| replay[j].step.clone()).collect();
    let next_state = replay[i + n - 1].next_state;
    let pi_rows = (1..=n)
        .map(|t| {
            let tr = &replay[i + t];
            let best = q.argmax(tr.step.state);
            tr.step
                .behavior_probs
                .iter()
                .enumerate()
                .map(|(b, mu)| alpha * f64::from(u8::from(b == best)) + (1.0 - alpha) * mu)
                .collect()
        })
        .collect();
    BatchItem {
        segment: TrajectorySegment { steps, next_state },
        pi_rows,
    }
}

pub fn write_train_csv<W: Write>(out: W, logs: &[TrainLog]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{TRAIN_SCHEMA}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRAIN_HEADER.split(',')).map_err(csv_err)?;
    for l in logs {
        w.serialize((l.step, l.epsilon, l.sup_q_error, l.greedy_accuracy, l.mean_min_mass_of_targets))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::random_distribution_return_function;
    use crate::mdp::{random_mdp, sample_segment, seeded_rng, Policy};
    use crate::operators::{apply_operator, SolverOptions};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn step(state: usize, action: usize, reward: f64, mu: &[f64]) -> Step {
        Step {
            state,
            action,
            reward,
            behavior_probs: mu.to_vec(),
        }
    }

    fn small_grid() -> Arc<AtomGrid> {
        Arc::new(AtomGrid::uniform(0.0, 4.0, 5).unwrap())
    }

    fn weights_by_t(terms: &[BackupTerm], t: usize, na: usize) -> Vec<f64> {
        let mut w = vec![0.0; na];
        for term in terms.iter().filter(|k| k.t == t) {
            w[term.action] = term.weight;
        }
        w
    }

    #[test]
    fn one_step_segment_is_the_one_step_target() {
        let grid = small_grid();
        let eta = ReturnFunction::uniform(Arc::clone(&grid), 2, 2);
        let seg = TrajectorySegment {
            steps: vec![step(0, 1, 1.0, &[0.5, 0.5])],
            next_state: 1,
        };
        let pi = vec![vec![0.3, 0.7]];
        let terms = backup_terms(&seg, 0.5, &TraceSpec::OffPolicyLambda(0.9), &pi, &eta).unwrap();
        assert_eq!(weights_by_t(&terms, 1, 2), vec![0.3, 0.7]);
        // 1 + 0.5 z maps {0..4} onto {1, 1.5, 2, 2.5, 3}
        let m = terms[0].measure.masses();
        let want = [0.0, 0.3, 0.4, 0.3, 0.0];
        for (a, b) in m.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn two_step_weights_by_hand() {
        let grid = small_grid();
        let eta = ReturnFunction::uniform(Arc::clone(&grid), 2, 2);
        let seg = TrajectorySegment {
            steps: vec![step(0, 0, 0.0, &[0.5, 0.5]), step(1, 1, 0.0, &[0.5, 0.5])],
            next_state: 0,
        };
        let pi = vec![vec![1.0, 0.0], vec![0.2, 0.8]];
        let terms = backup_terms(&seg, 0.9, &TraceSpec::OffPolicyLambda(0.5), &pi, &eta).unwrap();
        assert_eq!(weights_by_t(&terms, 1, 2), vec![0.75, -0.25]);
        assert_eq!(weights_by_t(&terms, 2, 2), vec![0.5 * 0.2, 0.5 * 0.8]);
        assert_eq!(weight_sum(&terms), 1.0);
    }

    #[test]
    fn retrace_uses_sampled_ratio_in_the_product() {
        let grid = small_grid();
        let eta = ReturnFunction::uniform(Arc::clone(&grid), 2, 2);
        let seg = TrajectorySegment {
            steps: vec![step(0, 0, 0.0, &[0.5, 0.5]), step(1, 1, 0.0, &[0.25, 0.75])],
            next_state: 0,
        };
        let pi = vec![vec![0.9, 0.1], vec![1.0, 0.0]];
        let terms = backup_terms(&seg, 0.9, &TraceSpec::Retrace(1.0), &pi, &eta).unwrap();
        // c(X_1, b) mu = min(mu, pi): (0.25, 0.1)
        let w1 = weights_by_t(&terms, 1, 2);
        assert!((w1[0] - 0.65).abs() < 1e-15 && w1[1] == 0.0, "{w1:?}");
        // sampled A_1 = 1 has ratio 0.1 / 0.75
        let w2 = weights_by_t(&terms, 2, 2);
        assert!((w2[0] - 0.1 / 0.75).abs() < 1e-15);
        assert!(terms.iter().all(|t| t.weight >= 0.0));
    }

    #[test]
    fn unsupported_traces_are_rejected() {
        let eta = ReturnFunction::uniform(small_grid(), 1, 1);
        let seg = TrajectorySegment {
            steps: vec![step(0, 0, 0.0, &[1.0])],
            next_state: 0,
        };
        for trace in [TraceSpec::Peng(0.5), TraceSpec::NStep(2), TraceSpec::AltLambda(0.1)] {
            assert!(backup_terms(&seg, 0.5, &trace, &[vec![1.0]], &eta).is_err());
        }
        let cfg = LearnerConfig {
            trace: TraceSpec::Peng(0.5),
            ..LearnerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn random_case(seed: u64, n: usize, lambda_or_cbar: f64, retrace: bool) -> (TabularMdp, Vec<BackupTerm>) {
        let mdp = random_mdp(seed, 3, 4, 0.5, 0.8).unwrap();
        let grid = Arc::new(mdp.covering_grid(11).unwrap());
        let mut rng = seeded_rng(seed);
        let eta = random_distribution_return_function(&grid, 3, 4, &mut rng);
        let mu = Policy::uniform(3, 4);
        let seg = sample_segment(&mdp, &mu, (0, 0), n, &mut rng).unwrap();
        let pi_rows: Vec<Vec<f64>> = (1..=n)
            .map(|t| {
                let mut r = vec![0.0; 4];
                r[(seg.state_at(t) + t) % 4] = 1.0;
                r
            })
            .collect();
        let trace = if retrace {
            TraceSpec::Retrace(lambda_or_cbar)
        } else {
            TraceSpec::OffPolicyLambda(lambda_or_cbar)
        };
        let terms = backup_terms(&seg, mdp.gamma(), &trace, &pi_rows, &eta).unwrap();
        (mdp, terms)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn q_lambda_weights_sum_to_one(seed in 0u64..1000, n in 1usize..6, lambda in 0.0f64..1.0) {
            let (_, terms) = random_case(seed, n, lambda, false);
            prop_assert!((weight_sum(&terms) - 1.0).abs() < 1e-12);
            for t in &terms {
                prop_assert!(t.measure.min_mass() >= -1e-12);
                prop_assert!((t.measure.total_mass() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn retrace_weights_nonnegative(seed in 0u64..1000, n in 1usize..6, cbar in 0.5f64..3.0) {
            let (_, terms) = random_case(seed, n, cbar, true);
            prop_assert!(terms.iter().all(|t| t.weight >= 0.0));
        }

        #[test]
        fn gradient_is_linear_in_terms(seed in 0u64..1000, split in 1usize..5) {
            let (_, terms) = random_case(seed, 4, 0.7, false);
            let split = split.min(terms.len());
            let mut rng = seeded_rng(seed ^ 0xabc);
            let logits: Vec<f64> = (0..11).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = softmax(&logits);
            let whole = gradient(&p, &terms);
            let a = gradient(&p, &terms[..split]);
            let b = gradient(&p, &terms[split..]);
            for i in 0..11 {
                prop_assert!((whole[i] - a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn q_lambda_weights_go_negative() {
        let found = (0..50).any(|s| random_case(s, 3, 0.8, false).1.iter().any(|t| t.weight < 0.0));
        assert!(found);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, terms) = random_case(7, 3, 0.6, false);
        let mut rng = seeded_rng(3);
        let logits: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = gradient(&softmax(&logits), &terms);
        let h = 1e-5;
        for i in 0..logits.len() {
            let (mut up, mut dn) = (logits.clone(), logits.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (weighted_cross_entropy(&up, &terms) - weighted_cross_entropy(&dn, &terms)) / (2.0 * h);
            let scale = g[i].abs().max(1e-3);
            assert!((fd - g[i]).abs() / scale < 1e-6, "atom {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradient_vanishes_when_target_equals_prediction() {
        let grid = small_grid();
        let logits = vec![0.3, -1.0, 0.2, 0.0, 1.1];
        let p = softmax(&logits);
        let term = BackupTerm {
            t: 1,
            action: 0,
            weight: 1.0,
            measure: SignedMeasure::new(grid, p.clone()).unwrap(),
        };
        let g = gradient(&p, &[term.clone()]);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let q = SignedMeasure::dirac(small_grid(), 2);
        let term = BackupTerm { measure: q.clone(), ..term };
        let g = gradient(&p, &[term]);
        for i in 0..5 {
            assert!((g[i] - (p[i] - q.masses()[i])).abs() < 1e-15);
        }
    }

    // Integer rewards, gamma = 1/2 and a unit-spaced grid keep every return
    // of a three-step segment on the refined grid, so the sampled targets
    // and the exact operator share one projection.
    fn dyadic_mdp(seed: u64) -> TabularMdp {
        let base = random_mdp(seed, 3, 2, 1.0, 0.5).unwrap();
        let mut rng = seeded_rng(seed);
        let rewards: Vec<f64> = (0..6).map(|_| rng.random_range(-1i32..=1) as f64).collect();
        let mut trans = Vec::new();
        for x in 0..3 {
            for a in 0..2 {
                trans.extend_from_slice(base.next_probs(x, a));
            }
        }
        TabularMdp::new(3, 2, 0.5, trans, rewards).unwrap()
    }

    #[test]
    fn sampled_targets_average_to_the_operator() {
        let mdp = dyadic_mdp(4);
        let grid = Arc::new(AtomGrid::uniform(-2.0, 2.0, 5).unwrap());
        let mut rng = seeded_rng(11);
        let eta = random_distribution_return_function(&grid, 3, 2, &mut rng);
        let mu = Policy::new(3, 2, vec![0.5, 0.5, 0.3, 0.7, 0.6, 0.4]).unwrap();
        let pi = Policy::new(3, 2, vec![1.0, 0.0, 0.2, 0.8, 0.0, 1.0]).unwrap();
        let n = 3;
        for trace in [TraceSpec::OffPolicyLambda(0.8), TraceSpec::Retrace(1.0)] {
            let opts = SolverOptions::default().with_refine(8).with_horizon(n);
            let exact = apply_operator(&mdp, &pi, &mu, &trace, &eta, &opts).unwrap();
            let n_samples = 20_000;
            let mut mean = vec![0.0; 5];
            let mut sq = vec![0.0; 5];
            for _ in 0..n_samples {
                let seg = sample_segment(&mdp, &mu, (1, 0), n, &mut rng).unwrap();
                let rows: Vec<Vec<f64>> = (1..=n).map(|t| pi.row(seg.state_at(t)).to_vec()).collect();
                let terms = backup_terms(&seg, mdp.gamma(), &trace, &rows, &eta).unwrap();
                let mut cdf = 0.0;
                for (i, v) in assemble_target(&terms, 5).into_iter().enumerate() {
                    cdf += v;
                    mean[i] += cdf;
                    sq[i] += cdf * cdf;
                }
            }
            let nf = n_samples as f64;
            let mut want = vec![0.0; 5];
            let mut cdf = 0.0;
            for (i, v) in exact.entry(1, 0).iter().enumerate() {
                cdf += v;
                want[i] = cdf;
            }
            let mut err2 = 0.0;
            let mut var = 0.0;
            for i in 0..5 {
                let m = mean[i] / nf;
                err2 += (m - want[i]).powi(2);
                var += (sq[i] / nf - m * m) / nf;
            }
            assert!(err2.sqrt() <= 3.0 * var.sqrt(), "{trace}: err {} se {}", err2.sqrt(), var.sqrt());
        }
    }

    #[test]
    fn params_round_trip_json() {
        let grid = small_grid();
        let mut rng = seeded_rng(9);
        let logits: Vec<f64> = (0..2 * 3 * 5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = LearnerParams::from_logits(grid, 2, 3, logits).unwrap();
        let back = LearnerParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn predictions_are_distributions() {
        let mut rng = seeded_rng(2);
        let logits: Vec<f64> = (0..2 * 2 * 5).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = LearnerParams::from_logits(small_grid(), 2, 2, logits).unwrap();
        let eta = p.predicted();
        assert!(eta.min_mass() > 0.0);
        assert!(eta.total_mass_error() < 1e-12);
    }

    #[test]
    fn zero_reward_mdp_learns_zero() {
        let base = random_mdp(1, 4, 2, 0.5, 0.9).unwrap();
        let mut trans = Vec::new();
        for x in 0..4 {
            for a in 0..2 {
                trans.extend_from_slice(base.next_probs(x, a));
            }
        }
        let mdp = TabularMdp::new(4, 2, 0.9, trans, vec![0.0; 8]).unwrap();
        let cfg = LearnerConfig {
            total_steps: 4000,
            anneal_steps: 2000,
            grid: GridSpec {
                m: 21,
                v_min: Some(-5.0),
                v_max: Some(5.0),
                allow_uncovered: false,
            },
            ..LearnerConfig::default()
        };
        let res = train(&mdp, &cfg).unwrap();
        assert!(res.last().sup_q_error < 0.05, "{:?}", res.last());
    }

    #[test]
    fn epsilon_anneals_linearly() {
        let cfg = LearnerConfig {
            anneal_steps: 100,
            eps_max: 1.0,
            eps_min: 0.01,
            ..LearnerConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(50) - 0.505).abs() < 1e-12);
        assert_eq!(cfg.epsilon(100), 0.01);
        assert_eq!(cfg.epsilon(10_000), 0.01);
    }

    #[test]
    fn training_log_csv() {
        let logs = vec![TrainLog {
            step: 10,
            epsilon: 0.5,
            sup_q_error: 1.25,
            greedy_accuracy: 1.0,
            mean_min_mass_of_targets: -0.0625,
        }];
        let mut buf = Vec::new();
        write_train_csv(&mut buf, &logs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![TRAIN_SCHEMA, TRAIN_HEADER, "10,0.5,1.25,1.0,-0.0625"]);
    }
}

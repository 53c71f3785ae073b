//! Policy expressions accepted on the command line.
//!
//! Both policies: `uniform`, `optimal` (alias `greedy-of`), `eps-greedy:<e>`
//! around the optimal policy, `random` (entries `U(0.2, 1.2)`, normalized).
//! Targets only, mixing toward the behavior policy `mu`:
//! `mix:<a>` = a optimal + (1 - a) mu, `random-mix:<a>` with a random
//! deterministic policy instead, and `radius:<f>`, which picks the random-mix
//! weight giving `||pi - mu||_1 = f * r`, `r` the l2 contraction radius.

use distq::analysis::radius_l2;
use distq::mdp::{
    epsilon_greedy, mix_policies, policy_l1_distance, stream_rng, uniform_policy, value_iteration, ExpRng, Policy,
    TabularMdp,
};
use rand::Rng;

use crate::UsageError;

/// What an expression may draw on besides the MDP.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    pub seed: u64,
    /// `lambda` of a Q(lambda) operator, needed by `radius:`.
    pub lambda: Option<f64>,
}

pub fn behavior(expr: &str, mdp: &TabularMdp, ctx: Context) -> anyhow::Result<Policy> {
    resolve(expr, mdp, None, ctx)
}

pub fn target(expr: &str, mdp: &TabularMdp, mu: &Policy, ctx: Context) -> anyhow::Result<Policy> {
    resolve(expr, mdp, Some(mu), ctx)
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn random_policy(rng: &mut ExpRng, ns: usize, na: usize) -> Policy {
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| 0.2 + rng.random::<f64>()).collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / s));
    }
    Policy::new(ns, na, probs).expect("normalized rows")
}

fn random_deterministic(rng: &mut ExpRng, ns: usize, na: usize) -> Policy {
    let actions: Vec<usize> = (0..ns).map(|_| rng.random_range(0..na)).collect();
    Policy::deterministic(na, &actions)
}

fn resolve(expr: &str, mdp: &TabularMdp, mu: Option<&Policy>, ctx: Context) -> anyhow::Result<Policy> {
    let expr = expr.trim();
    let (name, arg) = match expr.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (expr, None),
    };
    let number = || -> anyhow::Result<f64> {
        arg.ok_or_else(|| usage(format!("policy `{name}` needs a parameter")))?
            .parse::<f64>()
            .map_err(|e| usage(format!("bad policy parameter in `{expr}`: {e}")))
    };
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let target_only = || -> anyhow::Result<&Policy> {
        mu.ok_or_else(|| usage(format!("`{name}` mixes toward mu and only applies to the target policy")))
    };
    // separate streams so that mu and pi draws never alias
    let mut rng = stream_rng(ctx.seed, if mu.is_some() { 4 } else { 3 });
    match name {
        "uniform" => Ok(uniform_policy(mdp)),
        "optimal" | "greedy-of" => Ok(value_iteration(mdp, 1e-10)?.1),
        "eps-greedy" => Ok(epsilon_greedy(&value_iteration(mdp, 1e-10)?.0, number()?)?),
        "random" => Ok(random_policy(&mut rng, ns, na)),
        "mix" => {
            let mu = target_only()?;
            Ok(mix_policies(number()?, &value_iteration(mdp, 1e-10)?.1, mu)?)
        }
        "random-mix" => {
            let mu = target_only()?;
            Ok(mix_policies(number()?, &random_deterministic(&mut rng, ns, na), mu)?)
        }
        "radius" => {
            let mu = target_only()?;
            let frac = number()?;
            let lambda = ctx
                .lambda
                .ok_or_else(|| usage("`radius:` needs a Q(lambda) operator to define the radius".into()))?;
            let g = random_deterministic(&mut rng, ns, na);
            let full = policy_l1_distance(&g, mu)?;
            let s = if full > 0.0 {
                (frac * radius_l2(mdp.gamma(), lambda)? / full).min(1.0)
            } else {
                0.0
            };
            Ok(mix_policies(s, &g, mu)?)
        }
        other => Err(usage(format!(
            "unknown policy `{other}`; use uniform, optimal, eps-greedy:<e>, random, mix:<a>, random-mix:<a> or radius:<f>"
        ))),
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use distq::engine::RunConfig;
use distq::learner::LearnerConfig;
use distq::mdp::{random_mdp, TabularMdp};

use crate::UsageError;

pub const OUT_DIR_ENV: &str = "DISTQ_OUT_DIR";

/// Everything a command can take from a JSON file; flags override fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub command: Option<String>,
    pub mdp: MdpSpec,
    pub run: RunConfig,
    pub learner: LearnerConfig,
    pub sweep: SweepAxes,
    pub pi: Option<String>,
    pub mu: Option<String>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("bad spec file {}: {e}", path.display())).into())
    }
}

/// A file, or the parameters of the random generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSpec {
    pub file: Option<PathBuf>,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub dirichlet: f64,
    /// Fixed generator seed; otherwise each run seed draws its own instance.
    pub seed: Option<u64>,
}

impl Default for MdpSpec {
    fn default() -> Self {
        Self {
            file: None,
            states: 5,
            actions: 20,
            gamma: 0.9,
            dirichlet: 0.1,
            seed: None,
        }
    }
}

impl MdpSpec {
    pub fn instance(&self, run_seed: u64) -> anyhow::Result<TabularMdp> {
        match &self.file {
            Some(path) => TabularMdp::load(path).with_context(|| format!("loading MDP {}", path.display())),
            None => Ok(random_mdp(
                self.seed.unwrap_or(run_seed),
                self.states,
                self.actions,
                self.dirichlet,
                self.gamma,
            )?),
        }
    }

    pub fn describe(&self) -> String {
        match &self.file {
            Some(p) => p.display().to_string(),
            None => format!(
                "random |X|={} |A|={} gamma={} dirichlet={}",
                self.states, self.actions, self.gamma, self.dirichlet
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    /// Operator families: one_step, n_step, retrace, q_lambda, on_policy_lambda, peng, alt_lambda.
    pub variants: Vec<String>,
    pub lambdas: Vec<f64>,
    pub c_bars: Vec<f64>,
    pub n_steps: Vec<usize>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            variants: vec!["one_step".into(), "retrace".into(), "q_lambda".into()],
            lambdas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            c_bars: vec![1.0, 2.0, 4.0],
            n_steps: vec![3],
            alphas: vec![1.0],
            seeds: (0..20).collect(),
        }
    }
}

pub fn out_dir(flag: Option<PathBuf>, spec: &ExperimentSpec) -> PathBuf {
    flag.or_else(|| spec.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("distq-out"))
}

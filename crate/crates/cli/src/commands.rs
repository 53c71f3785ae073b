use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use distq::analysis::ContractionReport;
use distq::engine::{self, figure1_trace, IterationLog, RunConfig, RunMode, RunResult};
use distq::io::write_return_function_csv;
use distq::learner::{self, LearnerParams};
use distq::mdp::{Policy, TabularMdp};
use distq::operators::{SolverMode, TraceSpec};

use crate::spec::{out_dir, ExperimentSpec, MdpSpec, SweepAxes};
use crate::svg::{bar_panels, BarPanel, LineChart, Series};
use crate::{
    policy, AnalyzeArgs, Command, CommonArgs, Figure1Args, GenMdpArgs, LearnArgs, MdpArgs, Metric, ModeArg, RunArgs,
    RunOpts, SolverArg, SweepArgs, UsageError,
};

pub const SWEEP_SCHEMA: &str = "# schema: distq.sweep v1";
pub const SWEEP_SUMMARY_SCHEMA: &str = "# schema: distq.sweep_summary v1";
pub const FIGURE1_SCHEMA: &str = "# schema: distq.figure1 v1";

/// `Ok(false)` means outputs were written but some work failed.
pub fn dispatch(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::GenMdp(a) => gen_mdp(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Figure1(a) => figure1(a),
        Command::Analyze(a) => analyze(a),
        Command::Learn(a) => learn(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn load_spec(common: &CommonArgs) -> anyhow::Result<ExperimentSpec> {
    ExperimentSpec::load(common.spec.as_deref())
}

fn apply_mdp_flags(flags: &MdpArgs, spec: &mut MdpSpec) {
    if let Some(p) = &flags.mdp {
        spec.file = Some(p.clone());
    }
    let generated = [flags.states.is_some(), flags.actions.is_some(), flags.dirichlet.is_some()];
    if generated.iter().any(|b| *b) {
        spec.file = None;
    }
    if let Some(v) = flags.states {
        spec.states = v;
    }
    if let Some(v) = flags.actions {
        spec.actions = v;
    }
    if let Some(v) = flags.gamma {
        spec.gamma = v;
    }
    if let Some(v) = flags.dirichlet {
        spec.dirichlet = v;
    }
    if flags.mdp_seed.is_some() {
        spec.seed = flags.mdp_seed;
    }
}

fn parse_pair(text: &str) -> anyhow::Result<(usize, usize)> {
    let (x, a) = text
        .split_once(',')
        .ok_or_else(|| usage(format!("expected `x,a`, got `{text}`")))?;
    let p = |s: &str| s.trim().parse::<usize>().map_err(|e| usage(format!("bad pair `{text}`: {e}")));
    Ok((p(x)?, p(a)?))
}

fn parse_trace(text: &str) -> anyhow::Result<TraceSpec> {
    TraceSpec::parse(text).map_err(|e| usage(e.to_string()))
}

/// `0..20`, `3`, and comma lists of both.
pub fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u64>().map_err(|e| usage(format!("bad seed `{s}`: {e}")));
        match part.split_once("..") {
            Some((a, b)) => out.extend(num(a)?..num(b)?),
            None => out.push(num(part)?),
        }
    }
    Ok(out)
}

fn apply_run_flags(flags: &RunOpts, cfg: &mut RunConfig) -> anyhow::Result<()> {
    if let Some(m) = flags.mode {
        cfg.mode = match m {
            ModeArg::Evaluate => RunMode::Evaluate,
            ModeArg::Control => RunMode::Control,
        };
    }
    if let Some(v) = flags.k_max {
        cfg.k_max = v;
    }
    if let Some(v) = flags.m {
        cfg.grid.m = v;
    }
    if flags.v_min.is_some() {
        cfg.grid.v_min = flags.v_min;
    }
    if flags.v_max.is_some() {
        cfg.grid.v_max = flags.v_max;
    }
    cfg.grid.allow_uncovered |= flags.allow_uncovered;
    if let Some(v) = flags.refine {
        cfg.solver.refine = v;
    }
    if let Some(s) = flags.solver {
        cfg.solver.mode = match s {
            SolverArg::Auto => SolverMode::Auto,
            SolverArg::Iterate => SolverMode::Iterate,
            SolverArg::LinearSolve => SolverMode::LinearSolve,
        };
    }
    if flags.horizon.is_some() {
        cfg.solver.horizon = flags.horizon;
    }
    if let Some(v) = flags.n_traj {
        cfg.oracle.n_traj = v;
    }
    if flags.stop_tol.is_some() {
        cfg.stop_tol = flags.stop_tol;
    }
    if let Some(t) = &flags.tracked {
        cfg.tracked = parse_pair(t)?;
    }
    Ok(())
}

fn default_pi(mode: RunMode) -> &'static str {
    match mode {
        RunMode::Evaluate => "mix:0.1",
        RunMode::Control => "optimal",
    }
}

/// Policies for a run; `pi` is ignored under control.
fn policies(mdp: &TabularMdp, pi: &str, mu: &str, ctx: policy::Context) -> anyhow::Result<(Policy, Policy)> {
    let mu = policy::behavior(mu, mdp, ctx)?;
    let pi = policy::target(pi, mdp, &mu, ctx)?;
    Ok((pi, mu))
}

fn run_context(cfg: &RunConfig) -> policy::Context {
    policy::Context {
        seed: cfg.seed,
        lambda: match cfg.trace {
            TraceSpec::OffPolicyLambda(l) => Some(l),
            _ => None,
        },
    }
}

fn execute(mdp: &TabularMdp, cfg: &RunConfig, pi: &str, mu: &str) -> anyhow::Result<RunResult> {
    let (pi, mu) = policies(mdp, pi, mu, run_context(cfg))?;
    Ok(match cfg.mode {
        RunMode::Evaluate => engine::evaluate(mdp, &pi, &mu, cfg)?,
        RunMode::Control => engine::control(mdp, &mu, cfg)?,
    })
}

fn gen_mdp(args: GenMdpArgs) -> anyhow::Result<bool> {
    let mdp = distq::mdp::random_mdp(args.seed, args.states, args.actions, args.dirichlet, args.gamma)?;
    let path = match args.out {
        Some(p) => p,
        None => {
            let dir = out_dir(args.out_dir, &ExperimentSpec::default());
            dir.join("mdp.json")
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    let mut text = mdp.to_json()?;
    text.push('\n');
    write_text(&path, &text)?;
    let (r_lo, r_hi) = mdp.reward_range();
    let (v_lo, v_hi) = mdp.return_range();
    println!(
        "wrote {}: states={} actions={} gamma={} rewards=[{r_lo:.4}, {r_hi:.4}] returns=[{v_lo:.4}, {v_hi:.4}]",
        path.display(),
        mdp.n_states(),
        mdp.n_actions(),
        mdp.gamma()
    );
    Ok(true)
}

fn run(args: RunArgs) -> anyhow::Result<bool> {
    let mut spec = load_spec(&args.common)?;
    apply_mdp_flags(&args.mdp, &mut spec.mdp);
    let mut cfg = spec.run.clone();
    apply_run_flags(&args.run, &mut cfg)?;
    if let Some(t) = &args.trace {
        cfg.trace = parse_trace(t)?;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let pi = args.run.pi.clone().or(spec.pi.clone()).unwrap_or_else(|| default_pi(cfg.mode).into());
    let mu = args.run.mu.clone().or(spec.mu.clone()).unwrap_or_else(|| "uniform".into());
    let dir = out_dir(args.common.out_dir.clone(), &spec);
    let name = args.common.name.clone().unwrap_or_else(|| "run".into());

    let mdp = spec.mdp.instance(cfg.seed)?;
    let result = execute(&mdp, &cfg, &pi, &mu)?;
    prepare_dir(&dir)?;
    let log_path = dir.join(format!("{name}.csv"));
    engine::write_log_csv(create(&log_path)?, &result.logs)?;
    write_return_function_csv(create(&dir.join(format!("{name}_eta.csv")))?, &result.final_eta)?;
    let last = result.last();
    write_json(
        &dir.join(format!("{name}.json")),
        &json!({
            "mdp": spec.mdp.describe(),
            "pi": if cfg.mode == RunMode::Evaluate { Some(&pi) } else { None },
            "mu": mu,
            "config": cfg,
            "iterations": result.logs.len(),
            "final": last,
            "min_sup_l2": result.min_sup_l2(),
        }),
    )?;
    println!(
        "{} {}: k={} sup_l2={:.6} min_mass={:.3e} -> {}",
        match cfg.mode {
            RunMode::Evaluate => "evaluate",
            RunMode::Control => "control",
        },
        cfg.trace,
        last.k,
        last.sup_l2,
        last.min_mass,
        log_path.display()
    );
    Ok(true)
}

fn apply_sweep_flags(args: &SweepArgs, axes: &mut SweepAxes) -> anyhow::Result<()> {
    if let Some(v) = &args.variants {
        axes.variants = v.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(v) = &args.lambdas {
        axes.lambdas = v.clone();
    }
    if let Some(v) = &args.c_bars {
        axes.c_bars = v.clone();
    }
    if let Some(v) = &args.n_steps {
        axes.n_steps = v.clone();
    }
    if let Some(v) = &args.alphas {
        axes.alphas = v.clone();
    }
    if let Some(s) = &args.seeds {
        axes.seeds = parse_seeds(s)?;
    }
    Ok(())
}

/// Expands the axes into operator instances, rejecting empty axes.
pub fn expand_traces(axes: &SweepAxes) -> anyhow::Result<Vec<TraceSpec>> {
    fn need<T>(axis: &[T], name: &str, family: &str) -> anyhow::Result<()> {
        if axis.is_empty() {
            return Err(usage(format!("sweep axis `{name}` is empty but `{family}` needs it")));
        }
        Ok(())
    }
    if axes.variants.is_empty() {
        return Err(usage("sweep axis `variants` is empty"));
    }
    if axes.seeds.is_empty() {
        return Err(usage("sweep axis `seeds` is empty"));
    }
    if axes.alphas.is_empty() {
        return Err(usage("sweep axis `alphas` is empty"));
    }
    let mut traces = Vec::new();
    for family in &axes.variants {
        let lambdas = |f: fn(f64) -> TraceSpec| -> anyhow::Result<Vec<TraceSpec>> {
            need(&axes.lambdas, "lambdas", family)?;
            Ok(axes.lambdas.iter().map(|&l| f(l)).collect())
        };
        match family.as_str() {
            "one_step" => traces.push(TraceSpec::OneStep),
            "n_step" => {
                need(&axes.n_steps, "n_steps", family)?;
                traces.extend(axes.n_steps.iter().map(|&n| TraceSpec::NStep(n)));
            }
            "retrace" => {
                need(&axes.c_bars, "c_bars", family)?;
                traces.extend(axes.c_bars.iter().map(|&c| TraceSpec::Retrace(c)));
            }
            "q_lambda" => traces.extend(lambdas(TraceSpec::OffPolicyLambda)?),
            "on_policy_lambda" => traces.extend(lambdas(TraceSpec::OnPolicyLambda)?),
            "peng" => traces.extend(lambdas(TraceSpec::Peng)?),
            "alt_lambda" => traces.extend(lambdas(TraceSpec::AltLambda)?),
            other => return Err(usage(format!("unknown operator family `{other}`"))),
        }
    }
    for t in &traces {
        t.validate().map_err(|e| usage(format!("{t}: {e}")))?;
    }
    Ok(traces)
}

struct Cell {
    trace: TraceSpec,
    alpha: f64,
    seed: u64,
}

#[derive(Serialize)]
struct CellSummary {
    variant: &'static str,
    param: Option<f64>,
    alpha: f64,
    seed: u64,
    final_sup_l2: Option<f64>,
    min_sup_l2: Option<f64>,
    final_min_mass: Option<f64>,
    error: Option<String>,
}

fn fmt_param(p: Option<f64>) -> String {
    p.map(|v| v.to_string()).unwrap_or_default()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sweep(args: SweepArgs) -> anyhow::Result<bool> {
    let mut spec = load_spec(&args.common)?;
    apply_mdp_flags(&args.mdp, &mut spec.mdp);
    let mut axes = spec.sweep.clone();
    apply_sweep_flags(&args, &mut axes)?;
    let traces = expand_traces(&axes)?;
    let mut base = spec.run.clone();
    if args.common.spec.is_none() {
        base.mode = RunMode::Control;
    }
    apply_run_flags(&args.run, &mut base)?;
    // the trace is replaced per cell, so only the rest of the config is checked here
    if base.k_max == 0 {
        return Err(usage("k_max must be at least 1"));
    }
    let pi = args.run.pi.clone().or(spec.pi.clone()).unwrap_or_else(|| default_pi(base.mode).into());
    let mu = args.run.mu.clone().or(spec.mu.clone()).unwrap_or_else(|| "uniform".into());
    let dir = out_dir(args.common.out_dir.clone(), &spec);
    let name = args.common.name.clone().unwrap_or_else(|| "sweep".into());
    // fail on a bad MDP source or policy before starting the pool
    let probe = spec.mdp.instance(axes.seeds[0])?;
    let probe_cfg = RunConfig {
        trace: traces[0],
        seed: axes.seeds[0],
        ..base.clone()
    };
    policies(&probe, &pi, &mu, run_context(&probe_cfg))?;

    let mut cells = Vec::new();
    for &trace in &traces {
        for &alpha in &axes.alphas {
            cells.extend(axes.seeds.iter().map(|&seed| Cell { trace, alpha, seed }));
        }
    }
    log::info!("sweep: {} cells on {}", cells.len(), spec.mdp.describe());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let results: Vec<Result<Vec<IterationLog>, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let cfg = RunConfig {
                    trace: cell.trace,
                    alpha: cell.alpha,
                    seed: cell.seed,
                    ..base.clone()
                };
                let out = spec
                    .mdp
                    .instance(cell.seed)
                    .and_then(|mdp| execute(&mdp, &cfg, &pi, &mu))
                    .map(|r| r.logs)
                    .map_err(|e| crate::describe_error(&e));
                if let Err(e) = &out {
                    log::error!("{} alpha={} seed={}: {e}", cell.trace, cell.alpha, cell.seed);
                }
                out
            })
            .collect()
    });

    prepare_dir(&dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let mut raw = create(&csv_path)?;
    writeln!(raw, "{SWEEP_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(raw);
    w.write_record([
        "variant", "param", "alpha", "seed", "k", "sup_l2", "pt_l2", "min_mass", "mass_err", "step_change",
        "policy_eps", "error",
    ])?;
    let mut summaries = Vec::with_capacity(cells.len());
    for (cell, res) in cells.iter().zip(&results) {
        let (variant, param) = (cell.trace.family(), fmt_param(cell.trace.param()));
        let head = [variant.to_string(), param, cell.alpha.to_string(), cell.seed.to_string()];
        match res {
            Ok(logs) => {
                for l in logs {
                    let mut rec = head.to_vec();
                    rec.extend(
                        [l.sup_l2, l.pt_l2, l.min_mass, l.mass_err, l.step_change, l.policy_eps]
                            .iter()
                            .map(|v| v.to_string()),
                    );
                    rec.insert(4, l.k.to_string());
                    rec.push(String::new());
                    w.write_record(&rec)?;
                }
                let last = logs.last();
                summaries.push(CellSummary {
                    variant,
                    param: cell.trace.param(),
                    alpha: cell.alpha,
                    seed: cell.seed,
                    final_sup_l2: last.map(|l| l.sup_l2),
                    min_sup_l2: logs.iter().map(|l| l.sup_l2).reduce(f64::min),
                    final_min_mass: last.map(|l| l.min_mass),
                    error: None,
                });
            }
            Err(e) => {
                let mut rec = head.to_vec();
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(e.clone());
                w.write_record(&rec)?;
                summaries.push(CellSummary {
                    variant,
                    param: cell.trace.param(),
                    alpha: cell.alpha,
                    seed: cell.seed,
                    final_sup_l2: None,
                    min_sup_l2: None,
                    final_min_mass: None,
                    error: Some(e.clone()),
                });
            }
        }
    }
    w.flush()?;
    drop(w);

    // aggregate per (trace, alpha) over the seeds that succeeded
    let mut agg = create(&dir.join(format!("{name}_summary.csv")))?;
    writeln!(agg, "{SWEEP_SUMMARY_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(agg);
    w.write_record([
        "variant", "param", "alpha", "k", "n", "mean_sup_l2", "se_sup_l2", "mean_pt_l2", "se_pt_l2",
    ])?;
    let mut series = Vec::new();
    let per_group = axes.seeds.len();
    for (g, group) in results.chunks(per_group).enumerate() {
        let cell = &cells[g * per_group];
        let ok: Vec<&Vec<IterationLog>> = group.iter().filter_map(|r| r.as_ref().ok()).collect();
        let mut s = Series {
            label: if axes.alphas.len() > 1 {
                format!("{} a={}", cell.trace, cell.alpha)
            } else {
                cell.trace.to_string()
            },
            x: Vec::new(),
            y: Vec::new(),
            band: Vec::new(),
        };
        let k_len = ok.iter().map(|l| l.len()).max().unwrap_or(0);
        for i in 0..k_len {
            let rows: Vec<&IterationLog> = ok.iter().filter_map(|l| l.get(i)).collect();
            let sup: Vec<f64> = rows.iter().map(|l| l.sup_l2).collect();
            let pt: Vec<f64> = rows.iter().map(|l| l.pt_l2).collect();
            let (ms, ss) = mean_se(&sup);
            let (mp, sp) = mean_se(&pt);
            w.write_record([
                cell.trace.family().to_string(),
                fmt_param(cell.trace.param()),
                cell.alpha.to_string(),
                rows[0].k.to_string(),
                rows.len().to_string(),
                ms.to_string(),
                ss.to_string(),
                mp.to_string(),
                sp.to_string(),
            ])?;
            s.x.push(rows[0].k as f64);
            let (y, b) = match args.metric {
                Metric::SupL2 => (ms, ss),
                Metric::PtL2 => (mp, sp),
            };
            s.y.push(y);
            s.band.push(b);
        }
        series.push(s);
    }
    w.flush()?;
    drop(w);

    let mode = match base.mode {
        RunMode::Evaluate => "evaluation",
        RunMode::Control => "control",
    };
    let metric = match args.metric {
        Metric::SupL2 => "sup l2 distance",
        Metric::PtL2 => "l2 distance at the tracked pair",
    };
    let chart = LineChart {
        title: format!("{mode}: {metric} to the oracle ({} seeds, mean +/- SE)", axes.seeds.len()),
        x_label: "iteration k".into(),
        y_label: metric.into(),
        log_y: args.log_y,
        series,
    };
    write_text(&dir.join(format!("{name}.svg")), &chart.render())?;

    let failed = summaries.iter().filter(|s| s.error.is_some()).count();
    write_json(
        &dir.join(format!("{name}.json")),
        &json!({
            "mdp": spec.mdp.describe(),
            "mode": base.mode,
            "pi": if base.mode == RunMode::Evaluate { Some(&pi) } else { None },
            "mu": mu,
            "config": base,
            "axes": axes,
            "cells": summaries,
            "failed": failed,
        }),
    )?;
    println!(
        "sweep: {} cells ({} failed), {} operators x {} alphas x {} seeds -> {}",
        cells.len(),
        failed,
        traces.len(),
        axes.alphas.len(),
        axes.seeds.len(),
        csv_path.display()
    );
    if failed > 0 {
        eprintln!("error: {failed} of {} sweep cells failed; see the error column", cells.len());
    }
    Ok(failed == 0)
}

fn figure1(args: Figure1Args) -> anyhow::Result<bool> {
    let mut spec = load_spec(&args.common)?;
    if args.common.spec.is_none() {
        spec.mdp = MdpSpec {
            states: 3,
            actions: 3,
            dirichlet: 0.3,
            ..MdpSpec::default()
        };
    }
    apply_mdp_flags(&args.mdp, &mut spec.mdp);
    if args.panels.is_empty() {
        return Err(usage("need at least one panel"));
    }
    let k_max = args.k_max.unwrap_or(0).max(*args.panels.iter().max().expect("non-empty"));
    let tracked = parse_pair(&args.tracked)?;
    let pi_expr = args.pi.clone().or(spec.pi.clone()).unwrap_or_else(|| "random-mix:1".into());
    let mu_expr = args.mu.clone().or(spec.mu.clone()).unwrap_or_else(|| "random".into());
    let mut opts = spec.run.solver;
    if let Some(r) = args.refine {
        opts.refine = r;
    }
    let mut grid_spec = spec.run.grid;
    if let Some(m) = args.m {
        grid_spec.m = m;
    } else if args.common.spec.is_none() {
        grid_spec.m = 11;
    }
    let dir = out_dir(args.common.out_dir.clone(), &spec);
    let name = args.common.name.clone().unwrap_or_else(|| "figure1".into());

    let first = spec.mdp.seed.unwrap_or(args.seed);
    let tries = if spec.mdp.file.is_some() { 1 } else { args.search.max(1) };
    let mut chosen = None;
    for seed in first..first + tries {
        let mdp = spec.mdp.instance(seed)?;
        if tracked.0 >= mdp.n_states() || tracked.1 >= mdp.n_actions() {
            return Err(usage(format!(
                "tracked pair {tracked:?} out of range for {} states x {} actions",
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        let ctx = policy::Context {
            seed,
            lambda: Some(args.lambda),
        };
        let (pi, mu) = policies(&mdp, &pi_expr, &mu_expr, ctx)?;
        let grid = grid_spec.build(&mdp)?;
        let trace = figure1_trace(&mdp, &pi, &mu, args.lambda, &grid, k_max, tracked, &opts)?;
        let signed = trace.min_over_run() < -1e-6;
        if signed || seed + 1 == first + tries {
            if args.search > 0 && !signed {
                log::warn!("no instance in {tries} tries produced negative mass; showing seed {seed}");
            }
            chosen = Some((seed, mdp, pi, mu, trace));
            break;
        }
    }
    let (seed, mdp, pi, mu, trace) = chosen.expect("at least one try");

    prepare_dir(&dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let mut out = create(&csv_path)?;
    writeln!(out, "{FIGURE1_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "atom_index", "atom", "mass"])?;
    let frames = trace
        .frames
        .iter()
        .map(|f| (f.k.to_string(), &f.masses))
        .chain(std::iter::once(("target".to_string(), &trace.target)));
    for (label, masses) in frames {
        for (i, (z, p)) in trace.atoms.iter().zip(masses.iter()).enumerate() {
            w.write_record([label.clone(), i.to_string(), z.to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    drop(w);

    let mut panels: Vec<BarPanel> = args
        .panels
        .iter()
        .map(|&k| {
            let f = &trace.frames[k];
            BarPanel {
                title: format!("k = {k} (min {:.2e})", f.min_mass),
                atoms: trace.atoms.clone(),
                masses: f.masses.clone(),
            }
        })
        .collect();
    panels.push(BarPanel {
        title: "one-step fixed point".into(),
        atoms: trace.atoms.clone(),
        masses: trace.target.clone(),
    });
    let eps = distq::mdp::policy_l1_distance(&pi, &mu)?;
    let title = format!(
        "Q(lambda={}) iterates at (x={}, a={}), gamma={}, eps={eps:.3}",
        args.lambda,
        tracked.0,
        tracked.1,
        mdp.gamma()
    );
    write_text(&dir.join(format!("{name}.svg")), &bar_panels(&title, &panels))?;
    write_json(
        &dir.join(format!("{name}.json")),
        &json!({
            "mdp": spec.mdp.describe(),
            "mdp_seed": if spec.mdp.file.is_some() { None } else { Some(seed) },
            "lambda": args.lambda,
            "pi": pi_expr,
            "mu": mu_expr,
            "epsilon": eps,
            "tracked": tracked,
            "min_mass_over_run": trace.min_over_run(),
            "final_min_mass": trace.final_frame().min_mass,
            "final_total_mass": trace.final_frame().total_mass,
        }),
    )?;
    println!(
        "figure1: seed {seed}, min mass over run {:.4}, final {:.3e} -> {}",
        trace.min_over_run(),
        trace.final_frame().min_mass,
        csv_path.display()
    );
    Ok(true)
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<bool> {
    let mut spec = load_spec(&args.common)?;
    let policy_mode = args.mdp.mdp.is_some()
        || args.mdp.states.is_some()
        || args.pi.is_some()
        || args.mu.is_some()
        || spec.mdp.file.is_some();
    let report = match (args.epsilon, policy_mode) {
        (Some(_), true) => {
            return Err(usage("give either --epsilon or an MDP with --pi/--mu, not both"));
        }
        (Some(eps), false) => {
            let gamma = args.mdp.gamma.ok_or_else(|| usage("--epsilon needs --gamma"))?;
            json!({ "report": ContractionReport::new(gamma, args.lambda, eps)? })
        }
        (None, true) => {
            apply_mdp_flags(&args.mdp, &mut spec.mdp);
            let seed = spec.mdp.seed.unwrap_or(args.seed);
            let mdp = spec.mdp.instance(seed)?;
            let pi_expr = args.pi.clone().or(spec.pi.clone()).unwrap_or_else(|| "greedy-of".into());
            let mu_expr = args.mu.clone().or(spec.mu.clone()).unwrap_or_else(|| "uniform".into());
            let ctx = policy::Context {
                seed,
                lambda: Some(args.lambda),
            };
            let (pi, mu) = policies(&mdp, &pi_expr, &mu_expr, ctx)?;
            json!({
                "mdp": spec.mdp.describe(),
                "pi": pi_expr,
                "mu": mu_expr,
                "report": ContractionReport::for_policies(mdp.gamma(), args.lambda, &pi, &mu)?,
            })
        }
        (None, false) => {
            return Err(usage("need --gamma and --epsilon, or an MDP (--mdp or --states ...) with --pi/--mu"));
        }
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if args.save {
        let dir = out_dir(args.common.out_dir.clone(), &spec);
        prepare_dir(&dir)?;
        let name = args.common.name.clone().unwrap_or_else(|| "analyze".into());
        write_text(&dir.join(format!("{name}.json")), &format!("{text}\n"))?;
    }
    Ok(true)
}

fn learn(args: LearnArgs) -> anyhow::Result<bool> {
    let mut spec = load_spec(&args.common)?;
    apply_mdp_flags(&args.mdp, &mut spec.mdp);
    let mut cfg = spec.learner.clone();
    if let Some(t) = &args.trace {
        cfg.trace = parse_trace(t)?;
    }
    if let Some(l) = args.lambda {
        cfg.trace = TraceSpec::OffPolicyLambda(l);
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(alpha => alpha, kappa => kappa, tau => tau, n => n, batch_size => batch_size,
         steps => total_steps, anneal_steps => anneal_steps, learn_start => learn_start,
         log_every => log_every, eps_max => eps_max, eps_min => eps_min,
         replay_capacity => replay_capacity, seed => seed);
    if let Some(m) = args.m {
        cfg.grid.m = m;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = out_dir(args.common.out_dir.clone(), &spec);
    let name = args.common.name.clone().unwrap_or_else(|| "learn".into());

    let mdp = spec.mdp.instance(cfg.seed)?;
    let result = learner::train(&mdp, &cfg)?;
    prepare_dir(&dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    learner::write_train_csv(create(&csv_path)?, &result.logs)?;
    write_params(&dir.join(format!("{name}_params.json")), &result.params)?;
    let last = result.last();
    write_json(
        &dir.join(format!("{name}.json")),
        &json!({
            "mdp": spec.mdp.describe(),
            "config": cfg,
            "final": last,
            "first": result.logs.first(),
        }),
    )?;
    println!(
        "learn {}: step {} sup_q_error={:.4} greedy_accuracy={:.3} -> {}",
        cfg.trace,
        last.step,
        last.sup_q_error,
        last.greedy_accuracy,
        csv_path.display()
    );
    Ok(true)
}

fn write_params(path: &Path, params: &LearnerParams) -> anyhow::Result<()> {
    let mut text = params.to_json()?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_accept_ranges_and_lists() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert_eq!(parse_seeds("").unwrap(), Vec::<u64>::new());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn default_axes_give_the_nine_curve_layout() {
        let traces = expand_traces(&SweepAxes::default()).unwrap();
        let count = |f: &str| traces.iter().filter(|t| t.family() == f).count();
        assert_eq!((count("one_step"), count("retrace"), count("q_lambda")), (1, 3, 5));
    }

    #[test]
    fn empty_axes_are_usage_errors() {
        let axes = SweepAxes {
            lambdas: vec![],
            ..SweepAxes::default()
        };
        let err = expand_traces(&axes).unwrap_err();
        assert!(err.is::<UsageError>());
        // an unused empty axis is fine
        let axes = SweepAxes {
            variants: vec!["one_step".into()],
            lambdas: vec![],
            ..SweepAxes::default()
        };
        assert_eq!(expand_traces(&axes).unwrap().len(), 1);
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        assert_eq!(mean_se(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}

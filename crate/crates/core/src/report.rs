//! Commands composed from the library modules, writing JSON artifacts and
//! returning printable tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StrategySpec};
use crate::costs::{build_cost_vectors, load_measured_costs, CostVectors, HardwareProfile};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::numerics::{allreduce_grad_identity, recompute_elision_equivalence, ToyShardedModel};
use crate::planner::{edge_costs, memory_usage, objective, solve, EdgeCosts, PlanResult, Strategy};
use crate::schedule::{insert_resharding, schedule, Variant};
use crate::sim::{breakdown, export_trace, simulate_with, SimOptions, SimResult};

/// Everything derived from a config before any command runs.
pub struct Context {
    pub config: RunConfig,
    pub profile: HardwareProfile,
    pub graph: ModelGraph,
    pub costs: CostVectors,
    pub edges: EdgeCosts,
    pub budget: f64,
}

impl Context {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let profile = config.hardware.resolve()?;
        let graph = ModelGraph::from_spec(&config.model)?;
        let mut costs = build_cost_vectors(&graph, &config.model, &profile)?;
        if let Some(path) = &config.measured_costs {
            costs = load_measured_costs(path, &costs)?;
        }
        let edges = edge_costs(&costs)?;
        let budget = config.memory_budget.unwrap_or(profile.memory_capacity);
        Ok(Context { config: config.clone(), profile, graph, costs, edges, budget })
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions { comm_slowdown: self.config.comm_slowdown.unwrap_or(1.0) }
    }

    pub fn plan(&self) -> Result<PlanResult> {
        solve(&self.costs, &self.edges, self.budget, self.config.granularity())
    }

    /// The explicit strategy of the config, or `None` when it asks for a plan.
    pub fn explicit_strategy(&self) -> Result<Option<Strategy>> {
        let k = self.graph.len();
        let s = match &self.config.strategy {
            StrategySpec::Keyword(_) => return Ok(None),
            StrategySpec::Explicit(d) => Strategy::new(d.clone()),
            StrategySpec::Uniform { uniform } => Strategy::uniform(*uniform, k),
        };
        if s.len() != k {
            return Err(Error::Config(format!("strategy: expected {k} degrees, got {}", s.len())));
        }
        s.validate(&self.costs)?;
        Ok(Some(s))
    }

    /// Feasible uniform strategy with the lowest predicted time.
    pub fn best_uniform(&self) -> Result<Strategy> {
        let mut best: Option<(f64, Strategy)> = None;
        let mut min_usage = f64::INFINITY;
        for &d in &self.costs.degrees {
            let s = Strategy::uniform(d, self.graph.len());
            let mem = memory_usage(&self.costs, &s)?;
            min_usage = min_usage.min(mem);
            if mem >= self.budget {
                continue;
            }
            let t = objective(&self.costs, &self.edges, &s)?;
            if best.as_ref().is_none_or(|(b, _)| t < *b) {
                best = Some((t, s));
            }
        }
        best.map(|(_, s)| s).ok_or(Error::Infeasible { budget: self.budget, min_usage })
    }

    pub fn simulate(&self, variant: Variant, strategy: &Strategy) -> Result<SimResult> {
        let plan = insert_resharding(&schedule(variant, &self.graph), &strategy.degrees);
        simulate_with(&plan, &self.costs, strategy, &self.sim_options())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub strategy: String,
    pub makespan: f64,
    pub comm_fraction: f64,
    pub compute_fraction: f64,
    pub idle_fraction: f64,
    pub peak_memory: f64,
    pub speedup: f64,
}

fn row(label: String, strategy: &Strategy, r: &SimResult) -> Result<Row> {
    let b = breakdown(r)?;
    Ok(Row {
        label,
        strategy: strategy.to_string(),
        makespan: r.makespan,
        comm_fraction: b.comm_fraction,
        compute_fraction: b.compute_fraction,
        idle_fraction: b.idle_fraction,
        peak_memory: r.peak_memory,
        speedup: 1.0,
    })
}

fn set_speedups(rows: &mut [Row], base: f64) {
    for r in rows {
        r.speedup = base / r.makespan;
    }
}

pub fn render_table(rows: &[Row]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>12} {:>7} {:>8} {:>6} {:>10} {:>8}  strategy",
        "schedule", "makespan(s)", "comm", "compute", "idle", "peak(GiB)", "speedup"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>12.6} {:>6.1}% {:>7.1}% {:>5.1}% {:>10.2} {:>7.2}x  {}",
            r.label,
            r.makespan,
            100.0 * r.comm_fraction,
            100.0 * r.compute_fraction,
            100.0 * r.idle_fraction,
            r.peak_memory / (1u64 << 30) as f64,
            r.speedup,
            r.strategy
        );
    }
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub strategy: Strategy,
    pub rows: Vec<Row>,
}

/// Simulates every requested variant. Writes `<variant>.result.json`,
/// `<variant>.trace.json`, `<variant>.trace.svg` and `simulate.json`, plus
/// `plan.json` when the strategy is planned.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<SimulateReport> {
    let ctx = Context::new(config)?;
    fs::create_dir_all(out)?;
    let strategy = match ctx.explicit_strategy()? {
        Some(s) => s,
        None => {
            let plan = ctx.plan()?;
            write_json(&out.join("plan.json"), &plan)?;
            plan.strategy
        }
    };
    let mut rows = Vec::new();
    for &variant in &config.variants {
        let result = ctx.simulate(variant, &strategy)?;
        write_json(&out.join(format!("{variant}.result.json")), &result)?;
        export_trace(&result, out.join(format!("{variant}.trace.json")))?;
        rows.push(row(variant.to_string(), &strategy, &result)?);
    }
    let base = rows
        .iter()
        .find(|r| r.label == Variant::Default.name())
        .unwrap_or(&rows[0])
        .makespan;
    set_speedups(&mut rows, base);
    let report = SimulateReport { strategy, rows };
    write_json(&out.join("simulate.json"), &report)?;
    Ok(report)
}

/// Runs the planner and writes `plan.json`.
pub fn cmd_plan(config: &RunConfig, out: &Path) -> Result<PlanResult> {
    let ctx = Context::new(config)?;
    fs::create_dir_all(out)?;
    let plan = ctx.plan()?;
    write_json(&out.join("plan.json"), &plan)?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: Strategy,
    pub planned: Strategy,
    pub rows: Vec<Row>,
}

/// One row per requested variant at the baseline strategy, then the Oases
/// schedule at the planned strategy. Speedups are relative to the first row.
/// The baseline is the config's explicit strategy, or else the best
/// feasible uniform one.
pub fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<AblationReport> {
    let ctx = Context::new(config)?;
    fs::create_dir_all(out)?;
    let baseline = match ctx.explicit_strategy()? {
        Some(s) => s,
        None => ctx.best_uniform()?,
    };
    let mut rows = Vec::new();
    for &variant in &config.variants {
        let result = ctx.simulate(variant, &baseline)?;
        rows.push(row(variant.to_string(), &baseline, &result)?);
    }
    let planned = ctx.plan()?.strategy;
    let result = ctx.simulate(Variant::Oases, &planned)?;
    rows.push(row("+Planner".into(), &planned, &result)?);
    let base = rows[0].makespan;
    set_speedups(&mut rows, base);
    let report = AblationReport { baseline, planned, rows };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub workers: usize,
    pub trials: usize,
    pub max_autodiff_deviation: f64,
    pub max_fd_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericsReport {
    pub seed: u64,
    pub identity: Vec<IdentityRow>,
    pub elision_trials: usize,
    pub max_elision_deviation: f64,
    pub passed: bool,
}

pub const IDENTITY_TOLERANCE: f64 = 1e-8;
pub const ELISION_TOLERANCE: f64 = 1e-10;

pub fn verify_numerics(seed: u64, trials: usize) -> NumericsReport {
    let identity: Vec<IdentityRow> = [1usize, 2, 4, 8]
        .iter()
        .map(|&w| {
            let (mut ad, mut fd) = (0.0f64, 0.0f64);
            for t in 0..trials {
                let r = allreduce_grad_identity(w, (8, 8), seed.wrapping_add((w * trials + t) as u64));
                ad = ad.max(r.autodiff_deviation);
                fd = fd.max(r.fd_deviation);
            }
            IdentityRow { workers: w, trials, max_autodiff_deviation: ad, max_fd_deviation: fd }
        })
        .collect();
    let max_elision_deviation = (0..trials)
        .map(|t| {
            let model = ToyShardedModel::random(4, 4, 4, 8, seed.wrapping_add(t as u64));
            recompute_elision_equivalence(&model).max_grad_deviation
        })
        .fold(0.0, f64::max);
    let passed = identity
        .iter()
        .all(|r| r.max_fd_deviation < IDENTITY_TOLERANCE && r.max_autodiff_deviation < IDENTITY_TOLERANCE)
        && max_elision_deviation < ELISION_TOLERANCE;
    NumericsReport { seed, identity, elision_trials: trials, max_elision_deviation, passed }
}

/// Writes `numerics.json`.
pub fn cmd_verify_numerics(seed: u64, out: &Path) -> Result<NumericsReport> {
    fs::create_dir_all(out)?;
    let report = verify_numerics(seed, 100);
    write_json(&out.join("numerics.json"), &report)?;
    Ok(report)
}

pub fn render_numerics(r: &NumericsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>7} {:>7} {:>16} {:>16}", "workers", "trials", "autodiff dev", "fd dev");
    for row in &r.identity {
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>16.3e} {:>16.3e}",
            row.workers, row.trials, row.max_autodiff_deviation, row.max_fd_deviation
        );
    }
    let _ = writeln!(
        s,
        "recompute elision: max gradient deviation {:.3e} over {} models",
        r.max_elision_deviation, r.elision_trials
    );
    let _ = writeln!(s, "{}", if r.passed { "all checks passed" } else { "CHECKS FAILED" });
    s
}

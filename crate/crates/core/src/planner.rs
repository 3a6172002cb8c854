//! Per-block TMP degree selection.
//!
//! The cost model charges each pass the pipelined two-sub-batch time of the
//! chain plus, on every edge whose endpoints use different degrees, a
//! blocking AllGather and the overlap it destroys. The optimizer is an exact
//! chain DP whose labels are bucketed by accumulated memory.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costs::CostVectors;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub degrees: Vec<u32>,
}

impl Strategy {
    pub fn new(degrees: Vec<u32>) -> Self {
        Strategy { degrees }
    }

    pub fn uniform(degree: u32, blocks: usize) -> Self {
        Strategy { degrees: vec![degree; blocks] }
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.degrees.windows(2).all(|w| w[0] == w[1])
    }

    /// Consecutive runs of equal degree as `(degree, count)`.
    pub fn runs(&self) -> Vec<(u32, usize)> {
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &d in &self.degrees {
            match runs.last_mut() {
                Some((deg, n)) if *deg == d => *n += 1,
                _ => runs.push((d, 1)),
            }
        }
        runs
    }

    pub fn validate(&self, costs: &CostVectors) -> Result<()> {
        costs.indices(&self.degrees).map(|_| ())
    }
}

/// Run-length form, e.g. `[[2] * 8 + [4] * 16]`.
impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.runs().iter().map(|(d, n)| format!("[{d}] * {n}")).collect();
        write!(f, "[{}]", parts.join(" + "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostPass {
    Forward,
    Backward,
}

/// Pipelined time of one pass with two sub-batches: the first compute runs
/// alone, then each compute of one sub-batch overlaps a communication of
/// the other, and the last communication runs alone. Backward walks the
/// chain in reverse.
pub fn node_cost(costs: &CostVectors, strategy: &Strategy, pass: CostPass) -> Result<f64> {
    let idx = costs.indices(&strategy.degrees)?;
    let terms: Vec<(f64, f64)> = match pass {
        CostPass::Forward => idx
            .iter()
            .enumerate()
            .map(|(v, &j)| (costs.blocks[v].d_fwd[j], costs.blocks[v].c_fwd[j]))
            .collect(),
        CostPass::Backward => idx
            .iter()
            .enumerate()
            .rev()
            .map(|(v, &j)| (costs.blocks[v].d_bwd[j], costs.blocks[v].c_bwd[j]))
            .collect(),
    };
    let (Some(first), Some(last)) = (terms.first(), terms.last()) else {
        return Ok(0.0);
    };
    let mut total = first.0;
    for t in 1..terms.len() {
        total += terms[t].0.max(terms[t - 1].1);
    }
    for &(d, c) in &terms {
        total += d.max(c);
    }
    Ok(total + last.1)
}

/// `matrices[v][i][j]`: penalty on edge `(v, v + 1)` when block `v` uses
/// degree index `i` and block `v + 1` uses `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCosts {
    pub matrices: Vec<Vec<Vec<f64>>>,
}

pub fn edge_cost_matrix(costs: &CostVectors, v: usize) -> Result<Vec<Vec<f64>>> {
    let u = v + 1;
    if u >= costs.blocks.len() {
        return Err(Error::UnknownBlock(u));
    }
    let p = costs.num_degrees();
    let (bv, bu) = (&costs.blocks[v], &costs.blocks[u]);
    let mut m = vec![vec![0.0; p]; p];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let gather = costs.resharding[v][i][j];
            *cell = match i.cmp(&j) {
                std::cmp::Ordering::Equal => 0.0,
                std::cmp::Ordering::Less => gather + bv.c_fwd[i].min(bu.d_fwd[j]),
                std::cmp::Ordering::Greater => gather + bu.c_bwd[j].min(bv.d_bwd[i]),
            };
        }
    }
    Ok(m)
}

pub fn edge_costs(costs: &CostVectors) -> Result<EdgeCosts> {
    let matrices = (0..costs.blocks.len().saturating_sub(1))
        .map(|v| edge_cost_matrix(costs, v))
        .collect::<Result<_>>()?;
    Ok(EdgeCosts { matrices })
}

pub fn objective(costs: &CostVectors, edges: &EdgeCosts, strategy: &Strategy) -> Result<f64> {
    let idx = costs.indices(&strategy.degrees)?;
    if edges.matrices.len() != idx.len().saturating_sub(1) {
        return Err(Error::LengthMismatch {
            expected: idx.len().saturating_sub(1),
            got: edges.matrices.len(),
        });
    }
    let mut total = node_cost(costs, strategy, CostPass::Forward)? + node_cost(costs, strategy, CostPass::Backward)?;
    for (v, m) in edges.matrices.iter().enumerate() {
        total += m[idx[v]][idx[v + 1]];
    }
    Ok(total)
}

/// Parameter state and saved inputs of every block, plus the largest
/// backward working set among the blocks at their chosen degrees.
pub fn memory_usage(costs: &CostVectors, strategy: &Strategy) -> Result<f64> {
    let idx = costs.indices(&strategy.degrees)?;
    let mut resident = 0.0;
    let mut runtime = 0.0f64;
    for (v, &j) in idx.iter().enumerate() {
        let b = &costs.blocks[v];
        resident += b.m_param[j] + b.m_saved[j];
        runtime = runtime.max(b.m_runtime[j]);
    }
    Ok(resident + runtime)
}

/// Distinct runtime-memory values, ascending. The optimum's working-set
/// peak is one of them.
fn runtime_caps(costs: &CostVectors) -> Vec<f64> {
    let mut caps: Vec<f64> = costs.blocks.iter().flat_map(|b| b.m_runtime.iter().copied()).collect();
    caps.sort_by(f64::total_cmp);
    caps.dedup();
    caps
}

fn min_memory(costs: &CostVectors) -> f64 {
    let resident = |v: usize, j: usize| costs.blocks[v].m_param[j] + costs.blocks[v].m_saved[j];
    let mut best = if costs.blocks.is_empty() { 0.0 } else { f64::INFINITY };
    for cap in runtime_caps(costs) {
        let mut total = cap;
        for (v, b) in costs.blocks.iter().enumerate() {
            let m = (0..costs.num_degrees())
                .filter(|&j| b.m_runtime[j] <= cap)
                .map(|j| resident(v, j))
                .fold(f64::INFINITY, f64::min);
            total += m;
        }
        best = best.min(total);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub strategy: Strategy,
    /// Run-length rendering of `strategy`.
    pub rendered: String,
    pub predicted_time: f64,
    pub predicted_memory: f64,
    pub solve_time_ms: f64,
}

impl PlanResult {
    fn new(costs: &CostVectors, edges: &EdgeCosts, strategy: Strategy, started: Instant) -> Result<Self> {
        let predicted_time = objective(costs, edges, &strategy)?;
        let predicted_memory = memory_usage(costs, &strategy)?;
        Ok(PlanResult {
            rendered: strategy.to_string(),
            strategy,
            predicted_time,
            predicted_memory,
            solve_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

pub const DEFAULT_GRANULARITY: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone)]
struct Label {
    cost: f64,
    mem: f64,
    path: Vec<u8>,
}

impl Label {
    /// Compares a candidate whose path is `prefix` followed by `last`.
    fn better_than_with(&self, other: &Label, prefix: &[u8], last: usize) -> bool {
        if (self.cost, self.mem) != (other.cost, other.mem) {
            return (self.cost, self.mem) < (other.cost, other.mem);
        }
        prefix.iter().copied().chain([last as u8]).lt(other.path.iter().copied())
    }
}

/// Minimizes the objective subject to `memory_usage < budget`.
///
/// The working-set peak is fixed in turn to each candidate value; with the
/// peak fixed the constraint is additive over blocks. Labels at block `t`
/// are keyed by the degree of `t` and the accumulated resident memory
/// divided by `granularity`. Each cell keeps its cheapest label, and labels
/// beaten in both cost and memory by another label of the same degree are
/// dropped.
pub fn solve(costs: &CostVectors, edges: &EdgeCosts, budget: f64, granularity: f64) -> Result<PlanResult> {
    let started = Instant::now();
    if !(granularity > 0.0) {
        return Err(Error::Config(format!("memory granularity must be positive, got {granularity}")));
    }
    let k = costs.blocks.len();
    if k == 0 {
        return PlanResult::new(costs, edges, Strategy::new(Vec::new()), started);
    }
    if edges.matrices.len() != k - 1 {
        return Err(Error::LengthMismatch { expected: k - 1, got: edges.matrices.len() });
    }
    let mut best: Option<(f64, Vec<u8>)> = None;
    for cap in runtime_caps(costs) {
        let Some(path) = chain_dp(costs, edges, budget - cap, granularity, cap) else { continue };
        let strategy = Strategy::new(path.iter().map(|&x| costs.degrees[x as usize]).collect());
        let value = objective(costs, edges, &strategy)?;
        let better = match &best {
            None => true,
            Some((c, p)) => value < *c || (value == *c && path < *p),
        };
        if better {
            best = Some((value, path));
        }
    }
    match best {
        Some((_, path)) => {
            let strategy = Strategy::new(path.iter().map(|&x| costs.degrees[x as usize]).collect());
            PlanResult::new(costs, edges, strategy, started)
        }
        None => Err(Error::Infeasible { budget, min_usage: min_memory(costs) }),
    }
}

/// Cheapest degree-index path with resident memory below `budget`, using
/// only degrees whose runtime memory is at most `cap`.
fn chain_dp(costs: &CostVectors, edges: &EdgeCosts, budget: f64, granularity: f64, cap: f64) -> Option<Vec<u8>> {
    let k = costs.blocks.len();
    let p = costs.num_degrees();
    let b = &costs.blocks;
    let unary = |t: usize, j: usize| {
        let mut u = b[t].d_fwd[j].max(b[t].c_fwd[j]) + b[t].d_bwd[j].max(b[t].c_bwd[j]);
        if t == 0 {
            u += b[t].d_fwd[j] + b[t].c_bwd[j];
        }
        if t == k - 1 {
            u += b[t].c_fwd[j] + b[t].d_bwd[j];
        }
        u
    };
    let pair = |t: usize, i: usize, j: usize| {
        b[t].d_fwd[j].max(b[t - 1].c_fwd[i]) + b[t - 1].d_bwd[i].max(b[t].c_bwd[j]) + edges.matrices[t - 1][i][j]
    };
    let resident = |t: usize, j: usize| b[t].m_param[j] + b[t].m_saved[j];
    let allowed = |t: usize, j: usize| b[t].m_runtime[j] <= cap;
    let bucket = |mem: f64| (mem / granularity).floor() as u64;

    let mut cells: Vec<BTreeMap<u64, Label>> = (0..p)
        .map(|j| {
            let mem = resident(0, j);
            let mut m = BTreeMap::new();
            if allowed(0, j) && mem < budget {
                m.insert(bucket(mem), Label { cost: unary(0, j), mem, path: vec![j as u8] });
            }
            m
        })
        .collect();

    for t in 1..k {
        let mut next: Vec<BTreeMap<u64, Label>> = vec![BTreeMap::new(); p];
        for (i, cell) in cells.iter().enumerate() {
            for label in cell.values() {
                for (j, out) in next.iter_mut().enumerate() {
                    let mem = label.mem + resident(t, j);
                    if !allowed(t, j) || mem >= budget {
                        continue;
                    }
                    let cand = Label { cost: label.cost + pair(t, i, j) + unary(t, j), mem, path: Vec::new() };
                    let slot = bucket(mem);
                    if out.get(&slot).is_none_or(|cur| cand.better_than_with(cur, &label.path, j)) {
                        let mut path = label.path.clone();
                        path.push(j as u8);
                        out.insert(slot, Label { path, ..cand });
                    }
                }
            }
        }
        for cell in &mut next {
            prune_dominated(cell);
        }
        cells = next;
    }

    cells
        .iter()
        .flat_map(|cell| cell.values())
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.path.cmp(&b.path)))
        .map(|l| l.path.clone())
}

/// Drops labels for which another label of the cell has no more memory and
/// strictly lower cost.
fn prune_dominated(cell: &mut BTreeMap<u64, Label>) {
    let mut best_cost = f64::INFINITY;
    cell.retain(|_, label| {
        if label.cost < best_cost {
            best_cost = label.cost;
            true
        } else {
            label.cost == best_cost
        }
    });
}

pub const DEFAULT_BRUTE_FORCE_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub result: PlanResult,
    pub evaluated: u64,
}

/// Exhaustive search in lexicographic order; the first strategy reaching
/// the minimum wins ties.
pub fn brute_force(costs: &CostVectors, edges: &EdgeCosts, budget: f64, cap: u64) -> Result<BruteForce> {
    let started = Instant::now();
    let k = costs.blocks.len();
    let p = costs.num_degrees();
    let count = (p as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(Error::CapExceeded { count, cap });
    }
    let mut idx = vec![0usize; k];
    let mut best: Option<(f64, Strategy)> = None;
    let mut evaluated = 0u64;
    loop {
        let strategy = Strategy::new(idx.iter().map(|&j| costs.degrees[j]).collect());
        evaluated += 1;
        if memory_usage(costs, &strategy)? < budget {
            let value = objective(costs, edges, &strategy)?;
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, strategy));
            }
        }
        // odometer, last position fastest
        let mut pos = k;
        loop {
            if pos == 0 {
                let Some((_, strategy)) = best else {
                    return Err(Error::Infeasible { budget, min_usage: min_memory(costs) });
                };
                let result = PlanResult::new(costs, edges, strategy, started)?;
                return Ok(BruteForce { result, evaluated });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < p {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = rank;
        }
        start = end;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 samples, got {}", a.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("all ranks are equal".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman correlation between the cost model's predictions for
/// `strategies` and the corresponding simulated makespans.
pub fn rank_correlation(
    costs: &CostVectors,
    edges: &EdgeCosts,
    strategies: &[Strategy],
    makespans: &[f64],
) -> Result<f64> {
    let predicted = strategies
        .iter()
        .map(|s| objective(costs, edges, s))
        .collect::<Result<Vec<_>>>()?;
    spearman(&predicted, makespans)
}

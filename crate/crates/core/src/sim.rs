//! Discrete-event execution of a plan on one device with a compute stream
//! and a communication stream.
//!
//! Each stream issues its operators in plan order, like a CUDA stream: an
//! operator starts once its dependencies have finished and its stream
//! predecessor is done. A blocking operator (resharding AllGather) holds
//! both streams.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costs::CostVectors;
use crate::error::{Error, Result};
use crate::model::OpKind;
use crate::planner::Strategy;
use crate::schedule::{insert_resharding, schedule, validate_plan, Pass, SchedulePlan, ScheduledOp, Stream, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub op_id: u32,
    pub name: String,
    pub stream: Stream,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub makespan: f64,
    pub compute_busy_fraction: f64,
    /// Time during which communication runs while the compute stream idles.
    pub comm_exposed: f64,
    pub peak_memory: f64,
    pub trace: Vec<TraceEvent>,
}

impl SimResult {
    pub fn compute_time(&self) -> f64 {
        self.trace
            .iter()
            .filter(|e| e.stream == Stream::Compute)
            .map(|e| e.end - e.start)
            .sum()
    }

    pub fn comm_time(&self) -> f64 {
        self.trace
            .iter()
            .filter(|e| e.stream == Stream::Comm)
            .map(|e| e.end - e.start)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Multiplies the duration of a communication operator that starts while
    /// the compute stream is busy. 1.0 means overlap is free.
    pub comm_slowdown: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { comm_slowdown: 1.0 }
    }
}

pub fn simulate(plan: &SchedulePlan, costs: &CostVectors, strategy: &Strategy) -> Result<SimResult> {
    simulate_with(plan, costs, strategy, &SimOptions::default())
}

/// Schedules `variant`, inserts resharding for `strategy` and simulates it.
pub fn simulate_variant(
    variant: Variant,
    graph: &crate::model::ModelGraph,
    costs: &CostVectors,
    strategy: &Strategy,
    options: &SimOptions,
) -> Result<SimResult> {
    let plan = insert_resharding(&schedule(variant, graph), &strategy.degrees);
    simulate_with(&plan, costs, strategy, options)
}

fn op_name(o: &ScheduledOp) -> String {
    let tag = match (o.op.kind, o.pass) {
        (OpKind::ForwardCompute, _) => "F",
        (OpKind::RecomputeCompute, _) => "R",
        (OpKind::BackwardCompute, _) => "B",
        (OpKind::AllGather, _) => "AG",
        (OpKind::AllReduce, Pass::Forward) => "CF",
        (OpKind::AllReduce, Pass::Recompute) => "CR",
        (OpKind::AllReduce, Pass::Backward) => "CB",
    };
    format!("{tag}{} sb{}", o.block, o.op.sub_batch)
}

fn durations(plan: &SchedulePlan, costs: &CostVectors, idx: &[usize]) -> Result<Vec<f64>> {
    let ops: Vec<&ScheduledOp> = plan.ops().collect();
    // compute operators per block share the block's cost evenly
    let mut per_block: HashMap<usize, std::collections::BTreeSet<u32>> = HashMap::new();
    for o in &ops {
        if o.op.kind == OpKind::ForwardCompute {
            per_block.entry(o.block).or_default().insert(o.op.id);
        }
    }
    let scale = 2.0 / plan.sub_batches.max(1) as f64;
    ops.iter()
        .map(|o| {
            let b = costs.blocks.get(o.block).ok_or(Error::UnknownBlock(o.block))?;
            let j = *idx.get(o.block).ok_or(Error::UnknownBlock(o.block))?;
            let share = per_block.get(&o.block).map_or(1, |s| s.len()).max(1) as f64;
            let (recompute, backward) = costs.backward_split(o.block, j);
            Ok(match o.op.kind {
                OpKind::ForwardCompute => b.d_fwd[j] * scale / share,
                OpKind::RecomputeCompute => recompute * scale / share,
                OpKind::BackwardCompute => backward * scale / share,
                OpKind::AllReduce => match o.pass {
                    Pass::Backward => b.c_bwd[j] * scale,
                    _ => b.c_fwd[j] * scale,
                },
                OpKind::AllGather => {
                    let next = *idx.get(o.block + 1).ok_or(Error::UnknownBlock(o.block + 1))?;
                    costs.resharding[o.block][j][next]
                }
            })
        })
        .collect()
}

pub fn simulate_with(
    plan: &SchedulePlan,
    costs: &CostVectors,
    strategy: &Strategy,
    options: &SimOptions,
) -> Result<SimResult> {
    if plan.recompute != costs.recompute {
        return Err(Error::InvalidPlan(vec![format!(
            "plan recompute={} but costs recompute={}",
            plan.recompute, costs.recompute
        )]));
    }
    let violations = validate_plan(plan);
    if !violations.is_empty() {
        return Err(Error::InvalidPlan(violations.iter().map(|v| v.to_string()).collect()));
    }
    if strategy.len() != costs.blocks.len() {
        return Err(Error::LengthMismatch { expected: costs.blocks.len(), got: strategy.len() });
    }
    let idx = costs.indices(&strategy.degrees)?;
    let ops: Vec<&ScheduledOp> = plan.ops().collect();
    let dur = durations(plan, costs, &idx)?;
    let index: HashMap<u32, usize> = ops.iter().enumerate().map(|(k, o)| (o.id, k)).collect();

    // per-lane issue queues; blocking operators sit in both
    let mut lanes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (k, o) in ops.iter().enumerate() {
        if o.op.blocking || o.stream == Stream::Compute {
            lanes[0].push(k);
        }
        if o.op.blocking || o.stream == Stream::Comm {
            lanes[1].push(k);
        }
    }
    let mut head = [0usize; 2];
    let mut free = [0.0f64; 2];
    let mut end: Vec<Option<f64>> = vec![None; ops.len()];
    let mut start: Vec<f64> = vec![0.0; ops.len()];
    let mut last_compute_end = 0.0f64;

    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for lane in 0..2 {
            let Some(&k) = lanes[lane].get(head[lane]) else { continue };
            let o = ops[k];
            if o.op.blocking && lanes[1 - lane].get(head[1 - lane]) != Some(&k) {
                continue;
            }
            let mut ready = if o.op.blocking { free[0].max(free[1]) } else { free[lane] };
            let mut waiting = false;
            for d in &o.deps {
                match end[index[d]] {
                    Some(t) => ready = ready.max(t),
                    None => waiting = true,
                }
            }
            if waiting {
                continue;
            }
            if pick.is_none_or(|(t, _, _)| ready < t) {
                pick = Some((ready, lane, k));
            }
        }
        let Some((t, lane, k)) = pick else { break };
        let o = ops[k];
        let mut d = dur[k];
        if lane == 1 && !o.op.blocking && t < last_compute_end {
            d *= options.comm_slowdown;
        }
        start[k] = t;
        end[k] = Some(t + d);
        if o.op.blocking {
            free = [t + d; 2];
            head[0] += 1;
            head[1] += 1;
        } else {
            free[lane] = t + d;
            head[lane] += 1;
        }
        if lane == 0 && !o.op.blocking {
            last_compute_end = t + d;
        }
    }
    if head[0] < lanes[0].len() || head[1] < lanes[1].len() {
        return Err(Error::InvalidPlan(vec!["simulation deadlocked".into()]));
    }

    let trace: Vec<TraceEvent> = ops
        .iter()
        .enumerate()
        .map(|(k, o)| TraceEvent {
            op_id: o.id,
            name: op_name(o),
            stream: o.stream,
            start: start[k],
            end: end[k].unwrap_or(start[k]),
        })
        .collect();
    let makespan = trace.iter().map(|e| e.end).fold(0.0, f64::max);
    let compute: Vec<(f64, f64)> = trace
        .iter()
        .filter(|e| e.stream == Stream::Compute)
        .map(|e| (e.start, e.end))
        .collect();
    let comm: Vec<(f64, f64)> = trace
        .iter()
        .filter(|e| e.stream == Stream::Comm)
        .map(|e| (e.start, e.end))
        .collect();
    let busy: f64 = compute.iter().map(|(s, e)| e - s).sum();
    let comm_busy: f64 = comm.iter().map(|(s, e)| e - s).sum();
    let comm_exposed = (comm_busy - overlap(&compute, &comm)).max(0.0);

    Ok(SimResult {
        makespan,
        compute_busy_fraction: if makespan > 0.0 { busy / makespan } else { 0.0 },
        comm_exposed,
        peak_memory: peak_memory(plan, costs, &idx, &ops, &start, &end),
        trace,
    })
}

/// Total intersection of two lists of disjoint intervals, each sorted by
/// start.
fn overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

fn peak_memory(
    plan: &SchedulePlan,
    costs: &CostVectors,
    idx: &[usize],
    ops: &[&ScheduledOp],
    start: &[f64],
    end: &[Option<f64>],
) -> f64 {
    let subs = plan.sub_batches.max(1) as f64;
    let fin = |k: usize| end[k].unwrap_or(start[k]);
    let static_bytes: f64 = idx.iter().enumerate().map(|(v, &j)| costs.blocks[v].m_param[j]).sum();
    let index: HashMap<u32, usize> = ops.iter().enumerate().map(|(k, o)| (o.id, k)).collect();

    // last backward end per (forward op id, sub-batch)
    let mut bwd_end: HashMap<(u32, u8), f64> = HashMap::new();
    // (block, sub-batch) -> first recompute start, first forward start, last backward end
    let mut first_rec: HashMap<(usize, u8), f64> = HashMap::new();
    let mut first_fwd: HashMap<(usize, u8), f64> = HashMap::new();
    let mut last_bwd: HashMap<(usize, u8), f64> = HashMap::new();
    for (k, o) in ops.iter().enumerate() {
        let key = (o.block, o.op.sub_batch);
        match o.op.kind {
            OpKind::ForwardCompute => {
                first_fwd.entry(key).and_modify(|t: &mut f64| *t = t.min(start[k])).or_insert(start[k]);
            }
            OpKind::RecomputeCompute => {
                first_rec.entry(key).and_modify(|t: &mut f64| *t = t.min(start[k])).or_insert(start[k]);
            }
            OpKind::BackwardCompute => {
                let e = fin(k);
                last_bwd.entry(key).and_modify(|t: &mut f64| *t = t.max(e)).or_insert(e);
                bwd_end
                    .entry((o.op.id, o.op.sub_batch))
                    .and_modify(|t: &mut f64| *t = t.max(e))
                    .or_insert(e);
            }
            _ => {}
        }
    }

    // (time, delta); frees sort before allocations at equal times
    let mut events: Vec<(f64, f64)> = Vec::new();
    for seq in &plan.saved_sequences {
        let members: Vec<usize> = seq.iter().filter_map(|id| index.get(id).copied()).collect();
        let Some(&first) = members.first() else { continue };
        let o = ops[first];
        let bytes = costs.blocks[o.block].m_saved[idx[o.block]] / subs;
        let alloc = members.iter().map(|&k| start[k]).fold(f64::INFINITY, f64::min);
        let free = members
            .iter()
            .filter_map(|&k| bwd_end.get(&(ops[k].op.id, ops[k].op.sub_batch)))
            .fold(alloc, |a, &b| a.max(b));
        events.push((alloc, bytes));
        events.push((free, -bytes));
    }
    for (&key, &free) in &last_bwd {
        let (block, _) = key;
        let j = idx[block];
        let b = &costs.blocks[block];
        let (alloc, bytes) = if plan.recompute {
            (first_rec.get(&key).copied(), b.m_runtime[j] / subs)
        } else {
            (first_fwd.get(&key).copied(), (b.m_saved[j] + b.m_runtime[j]) / subs)
        };
        if let Some(alloc) = alloc {
            events.push((alloc, bytes));
            events.push((free, -bytes));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut live = static_bytes;
    let mut peak = live;
    for (_, delta) in events {
        live += delta;
        peak = peak.max(live);
    }
    peak
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// Exposed communication only.
    pub comm_fraction: f64,
    pub compute_fraction: f64,
    pub idle_fraction: f64,
}

pub fn breakdown(result: &SimResult) -> Result<Breakdown> {
    if !(result.makespan > 0.0) {
        return Err(Error::ZeroMakespan);
    }
    let comm_fraction = result.comm_exposed / result.makespan;
    let compute_fraction = result.compute_time() / result.makespan;
    Ok(Breakdown {
        comm_fraction,
        compute_fraction,
        idle_fraction: (1.0 - comm_fraction - compute_fraction).max(0.0),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ChromeArgs {
    op_id: u32,
    start_s: f64,
    end_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChromeEvent {
    name: String,
    cat: String,
    ph: String,
    ts: f64,
    dur: f64,
    pid: u32,
    tid: u32,
    args: ChromeArgs,
}

/// Writes a Chrome trace (JSON array of complete events, microseconds) to
/// `path` and an SVG timeline next to it. Returns the SVG path.
pub fn export_trace(result: &SimResult, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let events: Vec<ChromeEvent> = result
        .trace
        .iter()
        .map(|e| ChromeEvent {
            name: e.name.clone(),
            cat: format!("{:?}", e.stream).to_lowercase(),
            ph: "X".into(),
            ts: e.start * 1e6,
            dur: (e.end - e.start) * 1e6,
            pid: 0,
            tid: match e.stream {
                Stream::Compute => 0,
                Stream::Comm => 1,
            },
            args: ChromeArgs { op_id: e.op_id, start_s: e.start, end_s: e.end },
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&events)?)?;
    let svg_path = path.with_extension("svg");
    fs::write(&svg_path, render_svg(result))?;
    Ok(svg_path)
}

/// Reads back `(op_id, start, end)` triples from an exported Chrome trace.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<(u32, f64, f64)>> {
    let events: Vec<ChromeEvent> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(events.into_iter().map(|e| (e.args.op_id, e.args.start_s, e.args.end_s)).collect())
}

pub fn render_svg(result: &SimResult) -> String {
    let width = 1200.0;
    let lane = 40.0;
    let scale = if result.makespan > 0.0 { width / result.makespan } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="monospace" font-size="10">"#,
        width + 100.0,
        2.0 * lane + 30.0
    );
    let _ = writeln!(s, r#"<text x="0" y="{}">compute</text>"#, lane / 2.0 + 10.0);
    let _ = writeln!(s, r#"<text x="0" y="{}">comm</text>"#, 1.5 * lane + 10.0);
    for e in &result.trace {
        let (y, fill) = match (e.stream, e.name.as_bytes().first()) {
            (Stream::Compute, Some(b'F')) => (10.0, "#4c72b0"),
            (Stream::Compute, Some(b'R')) => (10.0, "#dd8452"),
            (Stream::Compute, _) => (10.0, "#55a868"),
            (Stream::Comm, _) if e.name.starts_with("AG") => (10.0 + lane, "#8172b3"),
            (Stream::Comm, _) => (10.0 + lane, "#c44e52"),
        };
        let _ = writeln!(
            s,
            r#"<rect x="{:.3}" y="{y}" width="{:.3}" height="{}" fill="{fill}" stroke="white" stroke-width="0.5"><title>{} [{:.6}, {:.6}]</title></rect>"#,
            80.0 + e.start * scale,
            (e.end - e.start) * scale,
            lane - 8.0,
            e.name,
            e.start,
            e.end
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="80" y="{}">makespan {:.6} s</text>"#,
        2.0 * lane + 25.0,
        result.makespan
    );
    s.push_str("</svg>\n");
    s
}

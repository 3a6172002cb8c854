//! Schedule variants as dependency-annotated operator programs.
//!
//! A plan lists operators in issue order. Each operator runs on the compute
//! or the communication stream and carries explicit data/barrier
//! dependencies. The simulator executes each stream in plan order.
//!
//! * `Default`: one sub-batch, every operator waits for its predecessor.
//! * `IntraPass`: two sub-batches pipelined inside each pass, with barriers
//!   between the recomputation and backward passes of every layer.
//! * `CrossPass`: same issue order as `IntraPass` without the pass barriers.
//! * `Oases`: recomputation segments start after every forward AllReduce, so
//!   no AllReduce is replayed during recomputation; backward pops the saved
//!   segments in reverse and pipelines the two sub-batches.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ModelGraph, OpKind, Operator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Compute,
    Comm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    Recompute,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Default,
    IntraPass,
    CrossPass,
    Oases,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Default,
        Variant::IntraPass,
        Variant::CrossPass,
        Variant::Oases,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "Default",
            Variant::IntraPass => "IntraPass",
            Variant::CrossPass => "CrossPass",
            Variant::Oases => "Oases",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown variant '{s}' (expected Default, IntraPass, CrossPass or Oases)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledOp {
    pub id: u32,
    pub op: Operator,
    /// Block whose costs this operator consumes. For a resharding AllGather
    /// this is the upstream block of the resharded edge.
    pub block: usize,
    pub stream: Stream,
    pub pass: Pass,
    pub deps: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub variant: Variant,
    /// 1 for `Default` (each operator covers the whole batch), 2 otherwise.
    pub sub_batches: u8,
    pub recompute: bool,
    pub forward_ops: Vec<ScheduledOp>,
    pub backward_ops: Vec<ScheduledOp>,
    /// Forward operator ids whose inputs are checkpointed and replayed
    /// together during backward, in save order.
    pub saved_sequences: Vec<Vec<u32>>,
}

impl SchedulePlan {
    pub fn ops(&self) -> impl Iterator<Item = &ScheduledOp> {
        self.forward_ops.iter().chain(self.backward_ops.iter())
    }

    pub fn len(&self) -> usize {
        self.forward_ops.len() + self.backward_ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// AllReduce operators counted once per logical operator, so that
    /// sub-batch splitting does not change the count.
    pub fn logical_comm_count(&self) -> usize {
        self.ops()
            .filter(|s| s.op.kind == OpKind::AllReduce && s.op.sub_batch == 0)
            .count()
    }

    pub fn comm_count_in(&self, pass: Pass) -> usize {
        self.ops()
            .filter(|s| s.op.kind == OpKind::AllReduce && s.op.sub_batch == 0 && s.pass == pass)
            .count()
    }
}

struct Builder {
    ops: Vec<ScheduledOp>,
}

impl Builder {
    fn push(
        &mut self,
        template: &Operator,
        kind: OpKind,
        sub_batch: u8,
        block: usize,
        pass: Pass,
        deps: impl IntoIterator<Item = u32>,
    ) -> u32 {
        let id = self.ops.len() as u32;
        let mut op = template.clone();
        op.kind = kind;
        op.sub_batch = sub_batch;
        let stream = if kind.is_comm() { Stream::Comm } else { Stream::Compute };
        self.ops.push(ScheduledOp {
            id,
            op,
            block,
            stream,
            pass,
            deps: deps.into_iter().collect(),
        });
        id
    }

    fn last_on(&self, from: usize, stream: Stream) -> Option<u32> {
        self.ops[from..].iter().rev().find(|o| o.stream == stream).map(|o| o.id)
    }

    fn add_dep(&mut self, op: u32, deps: impl IntoIterator<Item = u32>) {
        self.ops[op as usize].deps.extend(deps);
    }
}

/// Operator ids emitted for one block and one sub-batch within a pass.
#[derive(Debug, Clone, Default)]
struct Run {
    compute: Vec<u32>,
    comm: Option<u32>,
}

impl Run {
    fn last(&self) -> u32 {
        self.comm.unwrap_or_else(|| *self.compute.last().expect("blocks have compute ops"))
    }
}

fn sub_batches(variant: Variant) -> Vec<u8> {
    match variant {
        Variant::Default => vec![0],
        _ => vec![0, 1],
    }
}

/// Forward pass: at every communication operator the sub-batch switches, so
/// one sub-batch computes while the other communicates.
fn emit_forward(b: &mut Builder, graph: &ModelGraph, subs: &[u8]) -> Vec<Vec<Run>> {
    let mut runs: Vec<Vec<Run>> = Vec::with_capacity(graph.len());
    for (i, block) in graph.blocks.iter().enumerate() {
        let mut per_sub = Vec::with_capacity(subs.len());
        for (k, &s) in subs.iter().enumerate() {
            let mut prev = if i > 0 { Some(runs[i - 1][k].last()) } else { None };
            let mut run = Run::default();
            for op in &block.compute_ops {
                let id = b.push(op, OpKind::ForwardCompute, s, i, Pass::Forward, prev);
                run.compute.push(id);
                prev = Some(id);
            }
            if let Some(comm) = &block.comm_op {
                run.comm = Some(b.push(comm, comm.kind, s, i, Pass::Forward, prev));
            }
            per_sub.push(run);
        }
        runs.push(per_sub);
    }
    runs
}

/// Groups block indices by transformer layer, keeping chain order.
fn layer_groups(graph: &ModelGraph) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, block) in graph.blocks.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if graph.blocks[g[0]].layer() == block.layer() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn empty_plan(variant: Variant, graph: &ModelGraph) -> SchedulePlan {
    SchedulePlan {
        variant,
        sub_batches: sub_batches(variant).len() as u8,
        recompute: graph.recompute,
        forward_ops: Vec::new(),
        backward_ops: Vec::new(),
        saved_sequences: Vec::new(),
    }
}

fn finish(variant: Variant, graph: &ModelGraph, b: Builder, forward_len: usize, saved: Vec<Vec<u32>>) -> SchedulePlan {
    let mut ops = b.ops;
    let backward_ops = ops.split_off(forward_len);
    SchedulePlan {
        variant,
        sub_batches: sub_batches(variant).len() as u8,
        recompute: graph.recompute,
        forward_ops: ops,
        backward_ops,
        saved_sequences: saved,
    }
}

/// Backward pass at transformer-layer recomputation granularity, shared by
/// `Default`, `IntraPass` and `CrossPass`.
fn layer_granular(variant: Variant, graph: &ModelGraph) -> SchedulePlan {
    if graph.is_empty() {
        return empty_plan(variant, graph);
    }
    let subs = sub_batches(variant);
    let mut b = Builder { ops: Vec::new() };
    let fwd = emit_forward(&mut b, graph, &subs);
    let forward_len = b.ops.len();
    let groups = layer_groups(graph);

    let mut saved = Vec::new();
    if graph.recompute {
        for g in &groups {
            for k in 0..subs.len() {
                let seq = g
                    .iter()
                    .flat_map(|&i| fwd[i][k].compute.iter().copied().chain(fwd[i][k].comm))
                    .collect();
                saved.push(seq);
            }
        }
    }

    let barriers = variant == Variant::IntraPass;
    let loss_barrier = [b.last_on(0, Stream::Compute), b.last_on(0, Stream::Comm)];
    let mut pending_barrier: Vec<u32> = loss_barrier.into_iter().flatten().collect();
    let mut bwd: Vec<Vec<Run>> = vec![vec![Run::default(); subs.len()]; graph.len()];
    let mut first_backward = true;

    for g in groups.iter().rev() {
        let mut replay_done: Vec<Option<u32>> = vec![None; subs.len()];
        let mut rec: HashMap<(usize, usize), Vec<u32>> = HashMap::new();

        if graph.recompute {
            let pass_start = b.ops.len();
            let mut first = true;
            for &i in g {
                let block = &graph.blocks[i];
                for (k, &s) in subs.iter().enumerate() {
                    let mut prev = if i == g[0] {
                        // checkpointed input
                        if i > 0 { Some(fwd[i - 1][k].last()) } else { None }
                    } else {
                        replay_done[k]
                    };
                    let mut ids = Vec::new();
                    for op in &block.compute_ops {
                        let mut deps: Vec<u32> = prev.into_iter().collect();
                        if first {
                            deps.extend(pending_barrier.drain(..));
                            first = false;
                            first_backward = false;
                        }
                        let id = b.push(op, OpKind::RecomputeCompute, s, i, Pass::Recompute, deps);
                        ids.push(id);
                        prev = Some(id);
                    }
                    if let Some(comm) = &block.comm_op {
                        prev = Some(b.push(comm, comm.kind, s, i, Pass::Recompute, prev));
                    }
                    replay_done[k] = prev;
                    rec.insert((i, k), ids);
                }
            }
            if barriers {
                pending_barrier = [b.last_on(pass_start, Stream::Compute), b.last_on(pass_start, Stream::Comm)]
                    .into_iter()
                    .flatten()
                    .collect();
            }
        }

        let pass_start = b.ops.len();
        let mut first = true;
        for &i in g.iter().rev() {
            let block = &graph.blocks[i];
            for (k, &s) in subs.iter().enumerate() {
                let grad = (i + 1 < graph.len()).then(|| bwd[i + 1][k].last());
                let mut run = Run::default();
                let n = block.compute_ops.len();
                for (pos, op) in block.compute_ops.iter().enumerate().rev() {
                    let mut deps: Vec<u32> = Vec::new();
                    match rec.get(&(i, k)) {
                        Some(ids) => deps.push(ids[pos]),
                        None => deps.push(fwd[i][k].compute[pos]),
                    }
                    if pos == n - 1 {
                        deps.extend(grad);
                        deps.extend(replay_done[k]);
                    } else {
                        deps.push(*run.compute.last().unwrap());
                    }
                    if first {
                        if barriers || first_backward {
                            deps.extend(pending_barrier.drain(..));
                        }
                        first = false;
                        first_backward = false;
                    }
                    run.compute.push(b.push(op, OpKind::BackwardCompute, s, i, Pass::Backward, deps));
                }
                if let Some(comm) = &block.comm_op {
                    let last = *run.compute.last().unwrap();
                    run.comm = Some(b.push(comm, comm.kind, s, i, Pass::Backward, [last]));
                }
                bwd[i][k] = run;
            }
        }
        if barriers {
            pending_barrier = [b.last_on(pass_start, Stream::Compute), b.last_on(pass_start, Stream::Comm)]
                .into_iter()
                .flatten()
                .collect();
        } else {
            pending_barrier.clear();
        }
    }

    if variant == Variant::Default {
        for idx in 1..b.ops.len() {
            b.add_dep(idx as u32, [idx as u32 - 1]);
        }
    }
    finish(variant, graph, b, forward_len, saved)
}

/// Fully serialized single-sub-batch schedule.
pub fn schedule_default(graph: &ModelGraph) -> SchedulePlan {
    layer_granular(Variant::Default, graph)
}

/// Sub-batches pipelined within each pass, barriers between passes.
pub fn schedule_intra_pass(graph: &ModelGraph) -> SchedulePlan {
    layer_granular(Variant::IntraPass, graph)
}

/// Recomputation and backward operators interleave without pass barriers.
pub fn schedule_cross_pass(graph: &ModelGraph) -> SchedulePlan {
    layer_granular(Variant::CrossPass, graph)
}

/// Fine-grained recomputation with overlapped communication.
///
/// Forward: each block runs for sub-batch 0 then 1; at every communication
/// operator the sub-batch switches and the compute run preceding it is saved
/// as one recomputation segment. Backward: segments are popped last-first,
/// replayed without their trailing AllReduce, and their backward operators
/// issued; the backward AllReduce of one segment overlaps the replay and
/// backward of the next.
pub fn schedule_oases(graph: &ModelGraph) -> SchedulePlan {
    let variant = Variant::Oases;
    if graph.is_empty() {
        return empty_plan(variant, graph);
    }
    let subs = sub_batches(variant);
    let mut b = Builder { ops: Vec::new() };
    let fwd = emit_forward(&mut b, graph, &subs);
    let forward_len = b.ops.len();

    let mut segments: Vec<(usize, usize)> = Vec::new();
    for i in 0..graph.len() {
        for k in 0..subs.len() {
            segments.push((i, k));
        }
    }
    let saved: Vec<Vec<u32>> = if graph.recompute {
        segments.iter().map(|&(i, k)| fwd[i][k].compute.clone()).collect()
    } else {
        Vec::new()
    };

    let mut pending_barrier: Vec<u32> = [b.last_on(0, Stream::Compute), b.last_on(0, Stream::Comm)]
        .into_iter()
        .flatten()
        .collect();
    let mut bwd: Vec<Vec<Run>> = vec![vec![Run::default(); subs.len()]; graph.len()];

    while let Some((i, k)) = segments.pop() {
        let block = &graph.blocks[i];
        let s = subs[k];
        let mut replayed = Vec::new();
        if graph.recompute {
            let mut prev = if i > 0 { Some(fwd[i - 1][k].last()) } else { None };
            for op in &block.compute_ops {
                let mut deps: Vec<u32> = prev.into_iter().collect();
                deps.append(&mut pending_barrier);
                let id = b.push(op, OpKind::RecomputeCompute, s, i, Pass::Recompute, deps);
                replayed.push(id);
                prev = Some(id);
            }
        }
        let grad = (i + 1 < graph.len()).then(|| bwd[i + 1][k].last());
        let n = block.compute_ops.len();
        let mut run = Run::default();
        for (pos, op) in block.compute_ops.iter().enumerate().rev() {
            let mut deps: Vec<u32> = vec![if graph.recompute {
                replayed[pos]
            } else {
                fwd[i][k].compute[pos]
            }];
            if pos == n - 1 {
                deps.extend(grad);
                deps.extend(replayed.last().copied());
            } else {
                deps.push(*run.compute.last().unwrap());
            }
            deps.append(&mut pending_barrier);
            run.compute.push(b.push(op, OpKind::BackwardCompute, s, i, Pass::Backward, deps));
        }
        if let Some(comm) = &block.comm_op {
            let last = *run.compute.last().unwrap();
            run.comm = Some(b.push(comm, comm.kind, s, i, Pass::Backward, [last]));
        }
        bwd[i][k] = run;
    }

    finish(variant, graph, b, forward_len, saved)
}

pub fn schedule(variant: Variant, graph: &ModelGraph) -> SchedulePlan {
    match variant {
        Variant::Default => schedule_default(graph),
        Variant::IntraPass => schedule_intra_pass(graph),
        Variant::CrossPass => schedule_cross_pass(graph),
        Variant::Oases => schedule_oases(graph),
    }
}

/// Inserts the blocking AllGather needed wherever adjacent blocks run at
/// different degrees.
///
/// Forward and recomputation gather when the degree grows along the chain,
/// backward when it shrinks. One AllGather covers both sub-batches: it waits
/// for the upstream block's last operator of every sub-batch and the
/// downstream block's consuming operators wait for it.
pub fn insert_resharding(plan: &SchedulePlan, degrees: &[u32]) -> SchedulePlan {
    let mut ops: Vec<ScheduledOp> = plan.ops().cloned().collect();
    let mut next_id = ops.iter().map(|o| o.id + 1).max().unwrap_or(0);
    let mut inserts: Vec<(usize, ScheduledOp)> = Vec::new();

    for v in 0..degrees.len().saturating_sub(1) {
        let u = v + 1;
        if degrees[v] == degrees[u] {
            continue;
        }
        let passes: &[Pass] = if degrees[v] < degrees[u] {
            &[Pass::Forward, Pass::Recompute]
        } else {
            &[Pass::Backward]
        };
        for &pass in passes {
            // upstream and downstream in this pass's execution direction
            let (src, dst) = if pass == Pass::Backward { (u, v) } else { (v, u) };
            let is = |o: &ScheduledOp, block: usize| {
                o.pass == pass && o.block == block && o.op.kind != OpKind::AllGather
            };
            let src_ids: BTreeSet<u32> = ops.iter().filter(|o| is(o, src)).map(|o| o.id).collect();
            let Some(last_src) = ops.iter().rposition(|o| is(o, src)) else { continue };
            // only ops of dst that consume src's output in this pass; a
            // replay that restarts from a checkpoint needs no gather
            let consumers: Vec<usize> = (0..ops.len())
                .filter(|&k| is(&ops[k], dst) && ops[k].deps.iter().any(|d| src_ids.contains(d)))
                .collect();
            if consumers.is_empty() {
                continue;
            }
            let pos = (last_src + 1..ops.len())
                .find(|&k| ops[k].block == dst && ops[k].pass == pass)
                .unwrap_or(consumers[0]);
            let mut deps = BTreeSet::new();
            for sub in 0..plan.sub_batches {
                if let Some(k) = ops.iter().rposition(|o| is(o, src) && o.op.sub_batch == sub) {
                    deps.insert(ops[k].id);
                }
            }
            let id = next_id;
            next_id += 1;
            for &k in &consumers {
                ops[k].deps.insert(id);
            }
            let gather = ScheduledOp {
                id,
                op: Operator {
                    kind: OpKind::AllGather,
                    blocking: true,
                    sub_batch: plan.sub_batches - 1,
                    params: 0,
                    ..ops[last_src].op.clone()
                },
                block: v,
                stream: Stream::Comm,
                pass,
                deps,
            };
            inserts.push((pos, gather));
        }
    }

    // apply from the back so positions stay valid
    inserts.sort_by_key(|(p, _)| std::cmp::Reverse(*p));
    let mut forward_len = plan.forward_ops.len();
    for (pos, gather) in inserts {
        if gather.pass == Pass::Forward {
            forward_len += 1;
        }
        ops.insert(pos, gather);
    }
    let backward_ops = ops.split_off(forward_len);
    SchedulePlan {
        variant: plan.variant,
        sub_batches: plan.sub_batches,
        recompute: plan.recompute,
        forward_ops: ops,
        backward_ops,
        saved_sequences: plan.saved_sequences.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    DuplicateId(u32),
    DanglingDependency { op: u32, dep: u32 },
    Cycle { ops: Vec<u32> },
    /// Dependencies are acyclic but contradict per-stream issue order.
    StreamOrderDeadlock { ops: Vec<u32> },
    MissingProducer { op: u32 },
    WrongStream { op: u32 },
    RecomputeCommunication { op: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate op id {id}"),
            Violation::DanglingDependency { op, dep } => write!(f, "op {op} depends on unknown op {dep}"),
            Violation::Cycle { ops } => write!(f, "dependency cycle through ops {ops:?}"),
            Violation::StreamOrderDeadlock { ops } => write!(f, "stream order deadlocks ops {ops:?}"),
            Violation::MissingProducer { op } => write!(f, "backward op {op} has no forward or recompute producer"),
            Violation::WrongStream { op } => write!(f, "op {op} is on the wrong stream"),
            Violation::RecomputeCommunication { op } => {
                write!(f, "op {op} communicates during recomputation")
            }
        }
    }
}

/// Ops that cannot be ordered (non-empty means a cycle) using data deps and
/// optionally the per-stream issue order.
fn unordered(plan: &SchedulePlan, index: &HashMap<u32, usize>, with_streams: bool) -> Vec<u32> {
    let ops: Vec<&ScheduledOp> = plan.ops().collect();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); ops.len()];
    let mut indeg = vec![0usize; ops.len()];
    for (k, o) in ops.iter().enumerate() {
        for d in &o.deps {
            if let Some(&p) = index.get(d) {
                succ[p].push(k);
                indeg[k] += 1;
            }
        }
    }
    if with_streams {
        for (a, b) in stream_order_edges(&ops) {
            succ[a].push(b);
            indeg[b] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..ops.len()).filter(|&k| indeg[k] == 0).collect();
    let mut seen = 0;
    while let Some(k) = queue.pop_front() {
        seen += 1;
        for &n in &succ[k] {
            indeg[n] -= 1;
            if indeg[n] == 0 {
                queue.push_back(n);
            }
        }
    }
    if seen == ops.len() {
        Vec::new()
    } else {
        (0..ops.len()).filter(|&k| indeg[k] > 0).map(|k| ops[k].id).collect()
    }
}

/// Consecutive-issue edges on each stream. A blocking op sits on both.
fn stream_order_edges(ops: &[&ScheduledOp]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut last: [Option<usize>; 2] = [None, None];
    for (k, o) in ops.iter().enumerate() {
        let lanes: &[usize] = if o.op.blocking {
            &[0, 1]
        } else if o.stream == Stream::Compute {
            &[0]
        } else {
            &[1]
        };
        for &lane in lanes {
            if let Some(p) = last[lane] {
                edges.push((p, k));
            }
            last[lane] = Some(k);
        }
    }
    edges
}

/// True when `a` must finish before `b` starts, through data dependencies or
/// per-stream issue order.
pub fn happens_before(plan: &SchedulePlan, a: u32, b: u32) -> bool {
    let ops: Vec<&ScheduledOp> = plan.ops().collect();
    let index: HashMap<u32, usize> = ops.iter().enumerate().map(|(k, o)| (o.id, k)).collect();
    let (Some(&start), Some(&goal)) = (index.get(&a), index.get(&b)) else {
        return false;
    };
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); ops.len()];
    for (k, o) in ops.iter().enumerate() {
        for d in &o.deps {
            if let Some(&p) = index.get(d) {
                succ[p].push(k);
            }
        }
    }
    for (p, k) in stream_order_edges(&ops) {
        succ[p].push(k);
    }
    let mut seen = vec![false; ops.len()];
    let mut stack = vec![start];
    while let Some(k) = stack.pop() {
        for &n in &succ[k] {
            if n == goal {
                return true;
            }
            if !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    false
}

pub fn validate_plan(plan: &SchedulePlan) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut index: HashMap<u32, usize> = HashMap::new();
    let ops: Vec<&ScheduledOp> = plan.ops().collect();
    for (k, o) in ops.iter().enumerate() {
        if index.insert(o.id, k).is_some() {
            violations.push(Violation::DuplicateId(o.id));
        }
    }
    for o in &ops {
        for d in &o.deps {
            if !index.contains_key(d) {
                violations.push(Violation::DanglingDependency { op: o.id, dep: *d });
            }
        }
        let expected = if o.op.is_comm() { Stream::Comm } else { Stream::Compute };
        if o.stream != expected {
            violations.push(Violation::WrongStream { op: o.id });
        }
        if plan.variant == Variant::Oases && o.pass == Pass::Recompute && o.op.is_comm() {
            violations.push(Violation::RecomputeCommunication { op: o.id });
        }
    }

    let cyclic = unordered(plan, &index, false);
    if !cyclic.is_empty() {
        violations.push(Violation::Cycle { ops: cyclic });
    } else {
        let stuck = unordered(plan, &index, true);
        if !stuck.is_empty() {
            violations.push(Violation::StreamOrderDeadlock { ops: stuck });
        }
    }

    // Every backward kernel needs the activations of its forward operator,
    // either kept from forward or replayed.
    let producer_kind = if plan.recompute {
        OpKind::RecomputeCompute
    } else {
        OpKind::ForwardCompute
    };
    for o in ops.iter().filter(|o| o.op.kind == OpKind::BackwardCompute) {
        let mut stack: Vec<u32> = o.deps.iter().copied().collect();
        let mut seen: BTreeSet<u32> = BTreeSet::new();
        let mut found = false;
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let Some(&k) = index.get(&id) else { continue };
            let p = ops[k];
            if p.op.kind == producer_kind && p.op.id == o.op.id && p.op.sub_batch == o.op.sub_batch {
                found = true;
                break;
            }
            stack.extend(p.deps.iter().copied());
        }
        if !found {
            violations.push(Violation::MissingProducer { op: o.id });
        }
    }
    violations
}

//! Per-block, per-degree cost vectors.
//!
//! Times come from an alpha-beta link model (`volume / bandwidth + latency`)
//! and a throughput model for compute. Measured tables can override any entry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_devices: u32,
    /// Device memory in bytes.
    pub memory_capacity: f64,
    /// Sustained FLOP/s of one device.
    pub compute_throughput: f64,
    /// Bytes/second of a collective over a group of N devices.
    pub bandwidth_by_group: BTreeMap<u32, f64>,
    /// Fixed seconds per collective over a group of N devices.
    #[serde(default)]
    pub latency_by_group: BTreeMap<u32, f64>,
    pub candidate_degrees: Vec<u32>,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidProfile(msg));
        if self.num_devices == 0 {
            return bad("num_devices must be positive".into());
        }
        if !(self.compute_throughput > 0.0) {
            return bad("compute_throughput must be positive".into());
        }
        if !(self.memory_capacity > 0.0) {
            return bad("memory_capacity must be positive".into());
        }
        if self.candidate_degrees.is_empty() {
            return bad("candidate_degrees is empty".into());
        }
        for w in self.candidate_degrees.windows(2) {
            if w[0] >= w[1] {
                return bad("candidate_degrees must be strictly increasing".into());
            }
        }
        for &n in &self.candidate_degrees {
            if !n.is_power_of_two() {
                return bad(format!("candidate degree {n} is not a power of two"));
            }
            if n > self.num_devices {
                return bad(format!("candidate degree {n} exceeds num_devices = {}", self.num_devices));
            }
            if n > 1 {
                match self.bandwidth_by_group.get(&n) {
                    Some(bw) if *bw > 0.0 => {}
                    Some(_) => return bad(format!("bandwidth for group size {n} must be positive")),
                    None => return Err(Error::MissingBandwidth(n)),
                }
            }
        }
        if self.latency_by_group.values().any(|l| *l < 0.0) {
            return bad("latencies must be nonnegative".into());
        }
        Ok(())
    }

    pub fn degree_index(&self, degree: u32) -> Result<usize> {
        self.candidate_degrees
            .iter()
            .position(|&d| d == degree)
            .ok_or(Error::UnknownDegree(degree))
    }
}

/// Per-device traffic of a ring AllReduce of `message` bytes over `degree` devices.
pub fn allreduce_volume(message: f64, degree: u32) -> f64 {
    let n = degree as f64;
    2.0 * message * (n - 1.0) / n
}

/// Per-device traffic of a ring AllGather producing `message` bytes.
pub fn allgather_volume(message: f64, degree: u32) -> f64 {
    let n = degree as f64;
    message * (n - 1.0) / n
}

pub fn comm_time(volume: f64, degree: u32, profile: &HardwareProfile) -> Result<f64> {
    if degree <= 1 {
        return Ok(0.0);
    }
    let bandwidth = profile
        .bandwidth_by_group
        .get(&degree)
        .copied()
        .ok_or(Error::MissingBandwidth(degree))?;
    let latency = profile.latency_by_group.get(&degree).copied().unwrap_or(0.0);
    Ok(volume / bandwidth + latency)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostField {
    DFwd,
    DBwd,
    CFwd,
    CBwd,
    MParam,
    MSaved,
    MRuntime,
}

/// Costs of one block, each vector indexed like `CostVectors::degrees`.
/// Times are per sub-batch; memory covers the whole iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCosts {
    pub d_fwd: Vec<f64>,
    /// Backward computation, including recomputation when enabled.
    pub d_bwd: Vec<f64>,
    pub c_fwd: Vec<f64>,
    pub c_bwd: Vec<f64>,
    pub m_param: Vec<f64>,
    pub m_saved: Vec<f64>,
    pub m_runtime: Vec<f64>,
}

impl BlockCosts {
    pub fn zeros(p: usize) -> Self {
        let z = vec![0.0; p];
        BlockCosts {
            d_fwd: z.clone(),
            d_bwd: z.clone(),
            c_fwd: z.clone(),
            c_bwd: z.clone(),
            m_param: z.clone(),
            m_saved: z.clone(),
            m_runtime: z,
        }
    }

    pub fn field(&self, field: CostField) -> &[f64] {
        match field {
            CostField::DFwd => &self.d_fwd,
            CostField::DBwd => &self.d_bwd,
            CostField::CFwd => &self.c_fwd,
            CostField::CBwd => &self.c_bwd,
            CostField::MParam => &self.m_param,
            CostField::MSaved => &self.m_saved,
            CostField::MRuntime => &self.m_runtime,
        }
    }

    pub fn field_mut(&mut self, field: CostField) -> &mut Vec<f64> {
        match field {
            CostField::DFwd => &mut self.d_fwd,
            CostField::DBwd => &mut self.d_bwd,
            CostField::CFwd => &mut self.c_fwd,
            CostField::CBwd => &mut self.c_bwd,
            CostField::MParam => &mut self.m_param,
            CostField::MSaved => &mut self.m_saved,
            CostField::MRuntime => &mut self.m_runtime,
        }
    }

    const FIELDS: [CostField; 7] = [
        CostField::DFwd,
        CostField::DBwd,
        CostField::CFwd,
        CostField::CBwd,
        CostField::MParam,
        CostField::MSaved,
        CostField::MRuntime,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVectors {
    pub degrees: Vec<u32>,
    /// `d_bwd` includes a replay of `d_fwd`.
    pub recompute: bool,
    pub blocks: Vec<BlockCosts>,
    /// `resharding[v][i][j]`: blocking AllGather time on edge `(v, v + 1)`
    /// when block `v` runs at `degrees[i]` and block `v + 1` at `degrees[j]`.
    pub resharding: Vec<Vec<Vec<f64>>>,
}

impl CostVectors {
    pub fn num_degrees(&self) -> usize {
        self.degrees.len()
    }

    pub fn degree_index(&self, degree: u32) -> Result<usize> {
        self.degrees
            .iter()
            .position(|&d| d == degree)
            .ok_or(Error::UnknownDegree(degree))
    }

    /// Degree indices of a per-block degree list.
    pub fn indices(&self, degrees: &[u32]) -> Result<Vec<usize>> {
        if degrees.len() != self.blocks.len() {
            return Err(Error::LengthMismatch {
                expected: self.blocks.len(),
                got: degrees.len(),
            });
        }
        degrees.iter().map(|&d| self.degree_index(d)).collect()
    }

    /// Time of the recompute replay and of the backward kernels for one sub-batch.
    pub fn backward_split(&self, block: usize, j: usize) -> (f64, f64) {
        let b = &self.blocks[block];
        if self.recompute {
            (b.d_fwd[j], (b.d_bwd[j] - b.d_fwd[j]).max(0.0))
        } else {
            (0.0, b.d_bwd[j])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.degrees.len();
        for (i, b) in self.blocks.iter().enumerate() {
            for field in BlockCosts::FIELDS {
                let v = b.field(field);
                if v.len() != p {
                    return Err(Error::LengthMismatch { expected: p, got: v.len() });
                }
                if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
                    return Err(Error::MeasuredCosts(format!(
                        "block {i} {field:?} has invalid entry {x}"
                    )));
                }
            }
            for j in 0..p {
                if b.d_bwd[j] < b.d_fwd[j] {
                    return Err(Error::MeasuredCosts(format!(
                        "block {i} degree {}: d_bwd {} < d_fwd {}",
                        self.degrees[j], b.d_bwd[j], b.d_fwd[j]
                    )));
                }
            }
        }
        let expected_edges = self.blocks.len().saturating_sub(1);
        if self.resharding.len() != expected_edges {
            return Err(Error::LengthMismatch {
                expected: expected_edges,
                got: self.resharding.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostOptions {
    /// Parameter, gradient and optimizer-state bytes per weight element.
    pub optimizer_bytes_per_param: f64,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            optimizer_bytes_per_param: 16.0,
        }
    }
}

pub fn build_cost_vectors(
    graph: &ModelGraph,
    spec: &ModelSpec,
    profile: &HardwareProfile,
) -> Result<CostVectors> {
    build_cost_vectors_with(graph, spec, profile, &CostOptions::default())
}

pub fn build_cost_vectors_with(
    graph: &ModelGraph,
    spec: &ModelSpec,
    profile: &HardwareProfile,
    options: &CostOptions,
) -> Result<CostVectors> {
    spec.validate()?;
    profile.validate()?;
    let degrees = profile.candidate_degrees.clone();
    let p = degrees.len();
    let bytes = spec.bytes_per_element as f64;
    let half_tokens = (spec.half_batch() * spec.seq_len) as f64;
    let full_tokens = (spec.global_batch * spec.seq_len) as f64;
    let bwd_factor = if graph.recompute { 3.0 } else { 2.0 };

    let mut blocks = Vec::with_capacity(graph.len());
    for block in &graph.blocks {
        let flops: f64 = block
            .compute_ops
            .iter()
            .map(|op| spec.flops_per_token(op.sublayer) * half_tokens)
            .sum();
        let internal: f64 = block
            .compute_ops
            .iter()
            .map(|op| spec.internal_activations_per_token(op.sublayer))
            .sum();
        let message = spec.half_batch() as f64 * block.activation_elements as f64 * bytes;

        let mut costs = BlockCosts::zeros(p);
        for (j, &n) in degrees.iter().enumerate() {
            let nf = n as f64;
            let d = flops / (nf * profile.compute_throughput);
            costs.d_fwd[j] = d;
            costs.d_bwd[j] = bwd_factor * d;
            let c = if block.comm_op.is_some() {
                comm_time(allreduce_volume(message, n), n, profile)?
            } else {
                0.0
            };
            costs.c_fwd[j] = c;
            costs.c_bwd[j] = c;
            costs.m_param[j] = block.param_count as f64 / nf * options.optimizer_bytes_per_param;
            costs.m_saved[j] = spec.global_batch as f64 * block.activation_elements as f64 * bytes;
            costs.m_runtime[j] = full_tokens * internal / nf * bytes;
        }
        blocks.push(costs);
    }

    let mut resharding = Vec::with_capacity(graph.len().saturating_sub(1));
    for block in graph.blocks.iter().take(graph.len().saturating_sub(1)) {
        let message = spec.half_batch() as f64 * block.activation_elements as f64 * bytes;
        let mut table = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    let n = degrees[i].max(degrees[j]);
                    table[i][j] = comm_time(allgather_volume(message, n), n, profile)?;
                }
            }
        }
        resharding.push(table);
    }

    Ok(CostVectors {
        degrees,
        recompute: graph.recompute,
        blocks,
        resharding,
    })
}

/// One row of a measured-cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredCost {
    pub block_index: usize,
    pub degree: u32,
    pub field: CostField,
    pub seconds_or_bytes: f64,
}

/// Overrides entries of `base` with measured rows; everything else keeps its
/// analytic value.
pub fn apply_measured_costs(base: &CostVectors, rows: &[MeasuredCost]) -> Result<CostVectors> {
    let mut out = base.clone();
    for row in rows {
        if !(row.seconds_or_bytes >= 0.0) || !row.seconds_or_bytes.is_finite() {
            return Err(Error::MeasuredCosts(format!(
                "negative or non-finite value {} for block {} {:?}",
                row.seconds_or_bytes, row.block_index, row.field
            )));
        }
        let j = out.degree_index(row.degree)?;
        let block = out
            .blocks
            .get_mut(row.block_index)
            .ok_or(Error::UnknownBlock(row.block_index))?;
        block.field_mut(row.field)[j] = row.seconds_or_bytes;
    }
    out.validate()?;
    Ok(out)
}

pub fn load_measured_costs(path: impl AsRef<Path>, base: &CostVectors) -> Result<CostVectors> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<MeasuredCost> = serde_json::from_str(&text)
        .map_err(|e| Error::MeasuredCosts(format!("malformed table: {e}")))?;
    apply_measured_costs(base, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(degrees: Vec<u32>) -> HardwareProfile {
        HardwareProfile {
            name: None,
            num_devices: 8,
            memory_capacity: 24e9,
            compute_throughput: 1e12,
            bandwidth_by_group: [(2, 4e9), (4, 2e9), (8, 1e9)].into_iter().collect(),
            latency_by_group: [(2, 1e-5), (4, 2e-5), (8, 5e-5)].into_iter().collect(),
            candidate_degrees: degrees,
        }
    }

    fn spec(layers: u32) -> ModelSpec {
        ModelSpec {
            hidden_size: 64,
            num_layers: layers,
            seq_len: 16,
            attention_heads: 4,
            global_batch: 4,
            bytes_per_element: 2,
            recompute_enabled: true,
        }
    }

    #[test]
    fn allreduce_volume_examples() {
        assert_eq!(allreduce_volume(4.0, 4), 6.0);
        assert_eq!(allreduce_volume(3.0, 2), 3.0);
        assert_eq!(allreduce_volume(123.0, 1), 0.0);
    }

    #[test]
    fn allgather_volume_examples() {
        assert_eq!(allgather_volume(4.0, 4), 3.0);
        assert_eq!(allgather_volume(8.0, 2), 4.0);
        assert_eq!(allgather_volume(9.0, 1), 0.0);
    }

    #[test]
    fn comm_time_examples() {
        let mut p = profile(vec![1, 2]);
        p.bandwidth_by_group.insert(2, 1e9);
        p.latency_by_group.insert(2, 0.0);
        assert_eq!(comm_time(1e9, 2, &p).unwrap(), 1.0);
        assert_eq!(comm_time(1e9, 1, &p).unwrap(), 0.0);
        p.bandwidth_by_group.insert(2, 3e8);
        p.latency_by_group.insert(2, 1e-3);
        assert!((comm_time(6e8, 2, &p).unwrap() - 2.001).abs() < 1e-12);
        assert!(matches!(comm_time(1.0, 16, &p), Err(Error::MissingBandwidth(16))));
    }

    #[test]
    fn profile_validation() {
        assert!(profile(vec![1, 2, 4]).validate().is_ok());
        assert!(profile(vec![3]).validate().is_err());
        assert!(profile(vec![16]).validate().is_err());
        assert!(profile(vec![4, 2]).validate().is_err());
        let mut p = profile(vec![2, 4]);
        p.bandwidth_by_group.remove(&4);
        assert!(matches!(p.validate(), Err(Error::MissingBandwidth(4))));
    }

    #[test]
    fn doubling_degree_halves_compute_and_degree_one_is_free() {
        let s = spec(2);
        let g = ModelGraph::from_spec(&s).unwrap();
        let c = build_cost_vectors(&g, &s, &profile(vec![1, 2, 4, 8])).unwrap();
        for b in &c.blocks {
            for j in 0..3 {
                assert!((b.d_fwd[j + 1] * 2.0 - b.d_fwd[j]).abs() <= 1e-18 * b.d_fwd[j].max(1.0));
            }
            assert_eq!(b.c_fwd[0], 0.0);
            assert_eq!(b.c_bwd[0], 0.0);
            assert_eq!(b.d_bwd[2], 3.0 * b.d_fwd[2]);
        }
    }

    #[test]
    fn no_recompute_backward_is_twice_forward() {
        let mut s = spec(1);
        s.recompute_enabled = false;
        let g = ModelGraph::from_spec(&s).unwrap();
        let c = build_cost_vectors(&g, &s, &profile(vec![2])).unwrap();
        assert!(!c.recompute);
        assert_eq!(c.blocks[0].d_bwd[0], 2.0 * c.blocks[0].d_fwd[0]);
        assert_eq!(c.backward_split(0, 0), (0.0, c.blocks[0].d_bwd[0]));
    }

    /// Entry-by-entry hand evaluation for a one-layer (two-block) model.
    #[test]
    fn toy_table_matches_hand_evaluation() {
        let s = ModelSpec {
            hidden_size: 8,
            num_layers: 1,
            seq_len: 4,
            attention_heads: 2,
            global_batch: 2,
            bytes_per_element: 2,
            recompute_enabled: true,
        };
        let mut p = profile(vec![1, 2]);
        p.compute_throughput = 1000.0;
        p.bandwidth_by_group = [(2, 64.0)].into_iter().collect();
        p.latency_by_group = [(2, 0.5)].into_iter().collect();
        let g = ModelGraph::from_spec(&s).unwrap();
        let c = build_cost_vectors(&g, &s, &p).unwrap();

        // Half batch = 1 sample = 4 tokens.
        // Attention FLOPs/token = 2*4*64 + 4*4*8 = 512 + 128 = 640 -> 2560 per half batch.
        // FFN FLOPs/token = 2*8*64 = 1024 -> 4096.
        let att = &c.blocks[0];
        let ffn = &c.blocks[1];
        assert_eq!(att.d_fwd, vec![2.56, 1.28]);
        assert_eq!(ffn.d_fwd, vec![4.096, 2.048]);
        assert_eq!(att.d_bwd, vec![3.0 * 2.56, 3.0 * 1.28]);
        // Message = 1 * 32 elements * 2 B = 64 B; AllReduce at N=2 moves 64 B -> 1 s + 0.5 s.
        assert_eq!(att.c_fwd, vec![0.0, 1.5]);
        assert_eq!(ffn.c_bwd, vec![0.0, 1.5]);
        // Params: 4*64 = 256 and 8*64 = 512 elements at 16 B each.
        assert_eq!(att.m_param, vec![4096.0, 2048.0]);
        assert_eq!(ffn.m_param, vec![8192.0, 4096.0]);
        // Saved boundary: 2 samples * 32 elements * 2 B.
        assert_eq!(att.m_saved, vec![128.0, 128.0]);
        // Runtime: 8 tokens * (4*8 + 2*2*4 = 48) * 2 B = 768 at N=1; FFN 8 * 64 * 2 = 1024.
        assert_eq!(att.m_runtime, vec![768.0, 384.0]);
        assert_eq!(ffn.m_runtime, vec![1024.0, 512.0]);
        // AllGather on the edge: 64 B * 1/2 at N=2 -> 0.5 s + 0.5 s.
        assert_eq!(c.resharding, vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]]);
    }

    fn base() -> CostVectors {
        let s = spec(2);
        let g = ModelGraph::from_spec(&s).unwrap();
        build_cost_vectors(&g, &s, &profile(vec![1, 2, 4])).unwrap()
    }

    #[test]
    fn measured_costs_override() {
        let b = base();
        assert_eq!(apply_measured_costs(&b, &[]).unwrap(), b);

        let row = MeasuredCost {
            block_index: 1,
            degree: 2,
            field: CostField::CFwd,
            seconds_or_bytes: 0.25,
        };
        let out = apply_measured_costs(&b, &[row]).unwrap();
        let mut expected = b.clone();
        expected.blocks[1].c_fwd[1] = 0.25;
        assert_eq!(out, expected);
    }

    #[test]
    fn complete_table_ignores_analytic_model() {
        let b1 = base();
        let mut b2 = base();
        for block in &mut b2.blocks {
            for field in BlockCosts::FIELDS {
                for x in block.field_mut(field).iter_mut() {
                    *x *= 7.0;
                }
            }
        }
        let mut rows = Vec::new();
        for (i, block) in b1.blocks.iter().enumerate() {
            for field in BlockCosts::FIELDS {
                for (j, &d) in b1.degrees.iter().enumerate() {
                    rows.push(MeasuredCost {
                        block_index: i,
                        degree: d,
                        field,
                        seconds_or_bytes: block.field(field)[j] + 1.0 + i as f64,
                    });
                }
            }
        }
        let o1 = apply_measured_costs(&b1, &rows).unwrap();
        let o2 = apply_measured_costs(&b2, &rows).unwrap();
        assert_eq!(o1.blocks, o2.blocks);
    }

    #[test]
    fn measured_cost_errors() {
        let b = base();
        let neg = MeasuredCost {
            block_index: 0,
            degree: 1,
            field: CostField::DFwd,
            seconds_or_bytes: -1.0,
        };
        assert!(matches!(apply_measured_costs(&b, &[neg]), Err(Error::MeasuredCosts(_))));
        let unknown = MeasuredCost {
            block_index: 99,
            degree: 1,
            field: CostField::DFwd,
            seconds_or_bytes: 1.0,
        };
        assert!(matches!(apply_measured_costs(&b, &[unknown]), Err(Error::UnknownBlock(99))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_measured_costs(&path, &b), Err(Error::MeasuredCosts(_))));
        std::fs::write(
            &path,
            r#"[{"block_index": 0, "degree": 2, "field": "d_bwd", "seconds_or_bytes": 9.0}]"#,
        )
        .unwrap();
        let out = load_measured_costs(&path, &b).unwrap();
        assert_eq!(out.blocks[0].d_bwd[1], 9.0);
    }

    proptest! {
        #[test]
        fn allreduce_volume_is_monotone_and_bounded(k in 0.0f64..1e12, e in 0u32..10) {
            let n = 1u32 << e;
            let v = allreduce_volume(k, n);
            prop_assert!(v <= 2.0 * k);
            prop_assert!(allreduce_volume(k, n * 2) >= v);
        }

        #[test]
        fn sharding_and_symmetry(layers in 1u32..6, h in 1u64..8) {
            let mut s = spec(layers);
            s.hidden_size = 32 * h;
            let g = ModelGraph::from_spec(&s).unwrap();
            let c = build_cost_vectors(&g, &s, &profile(vec![1, 2, 4, 8])).unwrap();
            for b in &c.blocks {
                let total = b.m_param[0];
                for (j, &n) in c.degrees.iter().enumerate() {
                    prop_assert!((b.m_param[j] * n as f64 - total).abs() <= 1e-9 * total);
                    prop_assert_eq!(b.c_fwd[j], b.c_bwd[j]);
                    prop_assert!(b.d_bwd[j] >= b.d_fwd[j]);
                }
            }
        }
    }
}

//! Transformer operator sequences and the block-chain graph built from them.
//!
//! Every transformer layer contributes two sublayers (attention, FFN). Under
//! tensor model parallelism each sublayer is one fused compute operator
//! followed by an AllReduce of its output. Grouping each run of compute
//! operators with the communication operator that ends it yields a chain of
//! blocks, the unit the planner assigns parallel degrees to.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_size: u64,
    pub num_layers: u32,
    /// Tokens per sample.
    pub seq_len: u64,
    pub attention_heads: u64,
    /// Samples per iteration, split into two equal sub-batches.
    pub global_batch: u64,
    pub bytes_per_element: u64,
    pub recompute_enabled: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("seq_len", self.seq_len),
            ("attention_heads", self.attention_heads),
            ("global_batch", self.global_batch),
            ("bytes_per_element", self.bytes_per_element),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::InvalidSpec {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if !self.hidden_size.is_multiple_of(self.attention_heads) {
            return Err(Error::InvalidSpec {
                field: "hidden_size",
                reason: format!(
                    "{} is not divisible by attention_heads = {}",
                    self.hidden_size, self.attention_heads
                ),
            });
        }
        if !self.global_batch.is_multiple_of(2) {
            return Err(Error::InvalidSpec {
                field: "global_batch",
                reason: format!("{} must be even (two sub-batches)", self.global_batch),
            });
        }
        Ok(())
    }

    pub fn half_batch(&self) -> u64 {
        self.global_batch / 2
    }

    /// Forward FLOPs per token of one sublayer at degree 1.
    pub fn flops_per_token(&self, sublayer: Sublayer) -> f64 {
        let h = self.hidden_size as f64;
        let s = self.seq_len as f64;
        match sublayer {
            // QKV and output projections plus the two score/context GEMMs.
            Sublayer::Attention => 2.0 * 4.0 * h * h + 4.0 * s * h,
            Sublayer::Ffn => 2.0 * 8.0 * h * h,
        }
    }

    /// Activation elements per token kept inside one sublayer for its
    /// backward pass, at degree 1.
    pub fn internal_activations_per_token(&self, sublayer: Sublayer) -> f64 {
        let h = self.hidden_size as f64;
        match sublayer {
            Sublayer::Attention => {
                4.0 * h + 2.0 * self.attention_heads as f64 * self.seq_len as f64
            }
            Sublayer::Ffn => 8.0 * h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    ForwardCompute,
    RecomputeCompute,
    BackwardCompute,
    AllReduce,
    AllGather,
}

impl OpKind {
    pub fn is_comm(self) -> bool {
        matches!(self, OpKind::AllReduce | OpKind::AllGather)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sublayer {
    Attention,
    #[serde(rename = "FFN")]
    Ffn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub id: u32,
    pub kind: OpKind,
    pub layer: u32,
    pub sublayer: Sublayer,
    pub sub_batch: u8,
    pub blocking: bool,
    /// Weight elements owned by a compute operator (zero for communication).
    pub params: u64,
    /// Elements per sample of the tensor this operator produces.
    pub output_elements: u64,
}

impl Operator {
    pub fn is_comm(&self) -> bool {
        self.kind.is_comm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: usize,
    pub compute_ops: Vec<Operator>,
    pub comm_op: Option<Operator>,
    /// Weight elements of the block at degree 1.
    pub param_count: u64,
    /// Elements per sample of the tensor crossing the block's output boundary.
    pub activation_elements: u64,
}

impl Block {
    pub fn layer(&self) -> u32 {
        self.compute_ops[0].layer
    }

    pub fn sublayer(&self) -> Sublayer {
        self.compute_ops[0].sublayer
    }

    pub fn ops(&self) -> impl Iterator<Item = &Operator> {
        self.compute_ops.iter().chain(self.comm_op.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub blocks: Vec<Block>,
    pub edges: Vec<(usize, usize)>,
    /// Whether backward replays forward computation (activation recomputation).
    pub recompute: bool,
}

impl ModelGraph {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let ops = build_operator_sequence(spec)?;
        let mut graph = build_block_graph(&ops)?;
        graph.recompute = spec.recompute_enabled;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn flatten(&self) -> Vec<Operator> {
        self.blocks.iter().flat_map(|b| b.ops().cloned()).collect()
    }
}

/// Emits the forward operator sequence: per layer, attention compute,
/// AllReduce, FFN compute, AllReduce.
pub fn build_operator_sequence(spec: &ModelSpec) -> Result<Vec<Operator>> {
    spec.validate()?;
    let h = spec.hidden_size;
    let boundary = spec.seq_len * h;
    let mut ops = Vec::with_capacity(spec.num_layers as usize * 4);
    let mut next_id = 0u32;
    for layer in 0..spec.num_layers {
        for (sublayer, params) in [(Sublayer::Attention, 4 * h * h), (Sublayer::Ffn, 8 * h * h)] {
            ops.push(Operator {
                id: next_id,
                kind: OpKind::ForwardCompute,
                layer,
                sublayer,
                sub_batch: 0,
                blocking: false,
                params,
                output_elements: boundary,
            });
            ops.push(Operator {
                id: next_id + 1,
                kind: OpKind::AllReduce,
                layer,
                sublayer,
                sub_batch: 0,
                blocking: false,
                params: 0,
                output_elements: boundary,
            });
            next_id += 2;
        }
    }
    Ok(ops)
}

/// Merges the compute operators between adjacent communication operators and
/// groups each run with the communication operator that closes it.
pub fn build_block_graph(ops: &[Operator]) -> Result<ModelGraph> {
    let mut seen = HashSet::with_capacity(ops.len());
    let mut blocks: Vec<Block> = Vec::new();
    let mut pending: Vec<Operator> = Vec::new();

    for (pos, op) in ops.iter().enumerate() {
        if !seen.insert(op.id) {
            return Err(Error::InvalidSequence(format!("duplicate operator id {}", op.id)));
        }
        match op.kind {
            OpKind::ForwardCompute => pending.push(op.clone()),
            OpKind::AllReduce | OpKind::AllGather => {
                if pending.is_empty() {
                    let reason = if pos == 0 {
                        "sequence starts with a communication operator".to_string()
                    } else {
                        format!("adjacent communication operators at position {pos}")
                    };
                    return Err(Error::InvalidSequence(reason));
                }
                let compute_ops = std::mem::take(&mut pending);
                blocks.push(make_block(blocks.len(), compute_ops, Some(op.clone())));
            }
            other => {
                return Err(Error::InvalidSequence(format!(
                    "operator {} has non-forward kind {other:?}",
                    op.id
                )))
            }
        }
    }
    if !pending.is_empty() {
        blocks.push(make_block(blocks.len(), pending, None));
    }

    let edges = (1..blocks.len()).map(|i| (i - 1, i)).collect();
    Ok(ModelGraph {
        blocks,
        edges,
        recompute: true,
    })
}

fn make_block(index: usize, compute_ops: Vec<Operator>, comm_op: Option<Operator>) -> Block {
    let param_count = compute_ops.iter().map(|op| op.params).sum();
    let activation_elements = comm_op
        .as_ref()
        .map(|op| op.output_elements)
        .unwrap_or_else(|| compute_ops.last().map_or(0, |op| op.output_elements));
    Block {
        index,
        compute_ops,
        comm_op,
        param_count,
        activation_elements,
    }
}

//! Bundled hardware profiles.
//!
//! These are synthetic calibrations of an 8-GPU RTX 3090 node, not
//! measurements. Throughput and link bandwidths are chosen so that the
//! fully serialized schedule of a 24-layer GPT with hidden size 2048 or 3072
//! at TMP degree 4 spends roughly 60-70% of its time communicating.

use std::collections::BTreeMap;

use crate::costs::HardwareProfile;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const PRESET_NAMES: [&str; 2] = ["pcie-3090", "nvlink-3090"];

const GIB: f64 = (1u64 << 30) as f64;

fn profile(name: &str, bandwidth: [f64; 3]) -> HardwareProfile {
    HardwareProfile {
        name: Some(format!("{name} (synthetic calibration)")),
        num_devices: 8,
        memory_capacity: 24.0 * GIB,
        compute_throughput: 35e12,
        bandwidth_by_group: BTreeMap::from([(2, bandwidth[0]), (4, bandwidth[1]), (8, bandwidth[2])]),
        latency_by_group: BTreeMap::from([(2, 2e-5), (4, 3e-5), (8, 5e-5)]),
        candidate_degrees: vec![2, 4, 8],
    }
}

/// PCIe-only node.
pub fn pcie_3090() -> HardwareProfile {
    profile("pcie-3090", [8e9, 5.6e9, 3e9])
}

/// Node whose GPUs are bridged pairwise with NVLink, so groups of two talk
/// over the fast link and larger groups fall back to PCIe.
pub fn nvlink_3090() -> HardwareProfile {
    profile("nvlink-3090", [40e9, 5.6e9, 3e9])
}

pub fn preset(name: &str) -> Result<HardwareProfile> {
    match name {
        "pcie-3090" => Ok(pcie_3090()),
        "nvlink-3090" => Ok(nvlink_3090()),
        other => Err(Error::Config(format!(
            "unknown hardware preset '{other}' (expected one of {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// 24-layer GPT used for the breakdown and ablation runs.
pub fn gpt_spec(hidden_size: u64) -> ModelSpec {
    ModelSpec {
        hidden_size,
        num_layers: 24,
        seq_len: 1024,
        attention_heads: hidden_size / 64,
        global_batch: if hidden_size >= 3072 { 4 } else { 16 },
        bytes_per_element: 2,
        recompute_enabled: true,
    }
}

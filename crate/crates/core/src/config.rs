//! JSON run configuration shared by all commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costs::HardwareProfile;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::planner::DEFAULT_GRANULARITY;
use crate::presets::preset;
use crate::schedule::Variant;

/// Either a bundled preset name or an inline profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum HardwareSpec {
    Preset(String),
    Profile(HardwareProfile),
}

// Not derived: untagged enums buffer their input, which loses the integer
// keys of the bandwidth maps and the profile's own error messages.
impl<'de> Deserialize<'de> for HardwareSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(de)? {
            serde_json::Value::String(name) => Ok(HardwareSpec::Preset(name)),
            other => HardwareProfile::deserialize(other).map(HardwareSpec::Profile).map_err(serde::de::Error::custom),
        }
    }
}

impl HardwareSpec {
    pub fn resolve(&self) -> Result<HardwareProfile> {
        let profile = match self {
            HardwareSpec::Preset(name) => preset(name)?,
            HardwareSpec::Profile(p) => p.clone(),
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// `"plan"`, an explicit per-block degree list, or `{"uniform": N}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    Keyword(String),
    Explicit(Vec<u32>),
    Uniform { uniform: u32 },
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec::Keyword("plan".into())
    }
}

impl StrategySpec {
    pub fn is_plan(&self) -> bool {
        matches!(self, StrategySpec::Keyword(k) if k == "plan")
    }
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Bytes per memory bucket of the planner.
    #[serde(default)]
    pub memory_granularity: Option<f64>,
    /// Planner budget; defaults to the profile's memory capacity.
    #[serde(default)]
    pub memory_budget: Option<f64>,
    /// Measured-cost table overriding analytic entries, relative to the
    /// config file.
    #[serde(default)]
    pub measured_costs: Option<PathBuf>,
    #[serde(default)]
    pub comm_slowdown: Option<f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let profile = self.hardware.resolve()?;
        if self.variants.is_empty() {
            return Err(Error::Config("variants: must not be empty".into()));
        }
        match &self.strategy {
            StrategySpec::Keyword(k) if k != "plan" => {
                return Err(Error::Config(format!("strategy: expected \"plan\", a degree list or {{\"uniform\": N}}, got \"{k}\"")));
            }
            StrategySpec::Uniform { uniform } => {
                profile.degree_index(*uniform)?;
            }
            _ => {}
        }
        if let Some(g) = self.memory_granularity {
            if !(g > 0.0) {
                return Err(Error::Config(format!("memory_granularity: must be positive, got {g}")));
            }
        }
        if let Some(s) = self.comm_slowdown {
            if !(s >= 1.0) {
                return Err(Error::Config(format!("comm_slowdown: must be at least 1, got {s}")));
            }
        }
        Ok(())
    }

    pub fn granularity(&self) -> f64 {
        self.memory_granularity.unwrap_or(DEFAULT_GRANULARITY)
    }
}

/// Parses a config, reporting the offending field path and position.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Config(format!("{inner} (field `{}`)", e.path()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file; a relative `measured_costs` path is resolved
/// against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(m) = &cfg.measured_costs {
        if m.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.measured_costs = Some(dir.join(m));
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"hidden_size": 64, "num_layers": 2, "seq_len": 16, "attention_heads": 4,
                  "global_batch": 4, "bytes_per_element": 2, "recompute_enabled": true},
        "hardware": "pcie-3090"
    }"#;

    #[test]
    fn defaults_apply() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.variants, Variant::ALL.to_vec());
        assert!(cfg.strategy.is_plan());
        assert_eq!(cfg.granularity(), DEFAULT_GRANULARITY);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn strategy_forms() {
        for (s, expect) in [
            (r#""plan""#, StrategySpec::Keyword("plan".into())),
            ("[2, 4, 4, 2]", StrategySpec::Explicit(vec![2, 4, 4, 2])),
            (r#"{"uniform": 4}"#, StrategySpec::Uniform { uniform: 4 }),
        ] {
            let text = MINIMAL.replace(r#""hardware": "pcie-3090""#, &format!(r#""hardware": "pcie-3090", "strategy": {s}"#));
            assert_eq!(parse_config(&text).unwrap().strategy, expect);
        }
        let bad = MINIMAL.replace(r#""hardware": "pcie-3090""#, r#""hardware": "pcie-3090", "strategy": "best""#);
        assert!(matches!(parse_config(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn odd_batch_names_the_field() {
        let text = MINIMAL.replace(r#""global_batch": 4"#, r#""global_batch": 3"#);
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("global_batch"), "{err}");
    }

    #[test]
    fn type_errors_carry_path_and_position() {
        let text = MINIMAL.replace(r#""seq_len": 16"#, r#""seq_len": "long""#);
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("model.seq_len"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_fields_and_presets_are_rejected() {
        let text = MINIMAL.replace(r#""hardware": "pcie-3090""#, r#""hardware": "pcie-3090", "sed": 1"#);
        assert!(parse_config(&text).is_err());
        let text = MINIMAL.replace("pcie-3090", "a100");
        assert!(parse_config(&text).unwrap_err().to_string().contains("a100"));
        let text = MINIMAL.replace(r#""hardware": "pcie-3090""#, r#""hardware": "pcie-3090", "variants": []"#);
        assert!(parse_config(&text).is_err());
    }
}

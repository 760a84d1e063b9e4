//! Pipeline configuration: one human-editable TOML document with a section
//! per module drives every stage. All randomness derives from
//! `pipeline.seed`, and the canonical config hash is stamped into every
//! artifact so stages can refuse mismatched inputs.

use crate::downstream::DownstreamConfig;
use crate::error::{Error, Result};
use crate::maml::{ArchConfig, TrainConfig};
use crate::quantify::FuseConfig;
use crate::refine::RefineConfig;
use crate::synth::GeneratorSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Root seed; every stream (data, noise, init, episodes, ...) derives
    /// from it.
    pub seed: u64,
    pub out_dir: String,
    /// Number of meta-models the refinement loop produces (m).
    pub models: usize,
    /// Number of quantified models kept for the downstream task (n).
    pub select: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            seed: 0,
            out_dir: "out".into(),
            models: 5,
            select: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// (m, n) grid cells, evaluated per seed.
    pub pairs: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            pairs: vec![(3, 1), (4, 2), (5, 3), (7, 4)],
            seeds: vec![11, 12, 13, 14, 15],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub generator: GeneratorSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub fuse: FuseConfig,
    pub downstream: DownstreamConfig,
    pub ablate: AblateSection,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, apply `section.key=value` overrides, then the
    /// seed/out-dir flags.
    pub fn load(
        path: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
        out_dir: Option<&str>,
    ) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = crate::fs_util::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?
            }
            None => toml::Table::new(),
        };
        for set in sets {
            apply_set(&mut table, set)?;
        }
        if let Some(seed) = seed {
            apply_set(&mut table, &format!("pipeline.seed={}", seed))?;
        }
        if let Some(out) = out_dir {
            apply_set(&mut table, &format!("pipeline.out_dir=\"{}\"", out))?;
        }
        let cfg: PipelineConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        if self.pipeline.models == 0 {
            return Err(Error::Config("pipeline.models must be at least 1".into()));
        }
        if self.pipeline.select == 0 || self.pipeline.select > self.pipeline.models {
            return Err(Error::Config(format!(
                "pipeline.select must satisfy 1 <= n <= m, got n={} m={}",
                self.pipeline.select, self.pipeline.models
            )));
        }
        if self.generator.context_dim != self.downstream.context_dim {
            return Err(Error::Config(format!(
                "generator.context_dim ({}) and downstream.context_dim ({}) disagree",
                self.generator.context_dim, self.downstream.context_dim
            )));
        }
        if self.generator.image_size != self.arch.image_size {
            return Err(Error::Config(format!(
                "generator.image_size ({}) and arch.image_size ({}) disagree",
                self.generator.image_size, self.arch.image_size
            )));
        }
        if self.ablate.pairs.is_empty() || self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate needs at least one pair and one seed".into()));
        }
        for &(m, n) in &self.ablate.pairs {
            if m == 0 || n == 0 || n > m {
                return Err(Error::Config(format!(
                    "ablate pair (m={}, n={}) must satisfy 1 <= n <= m",
                    m, n
                )));
            }
        }
        Ok(())
    }

    /// Canonical rendering: struct field order is fixed, so any key order
    /// in the input file produces the same text here.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical rendering; stamped into every artifact.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.pipeline.out_dir)
    }
}

/// Apply one `section.key=value` override onto the raw TOML table. The
/// value side is parsed as TOML, falling back to a bare string.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let (path, raw_value) = set.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {:?} must look like section.key=value", set))
    })?;
    let value: toml::Value = match format!("v = {}", raw_value).parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {:?} is malformed", path)));
    }
    let mut cursor = table;
    for key in &keys[..keys.len() - 1] {
        cursor = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override {:?} walks through a non-table", path))
            })?;
    }
    cursor.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_paper_shaped() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.inner_lr, 0.01);
        assert_eq!(cfg.train.meta_lr, 0.001);
        assert_eq!(cfg.fuse.gamma, 0.5);
        assert_eq!(cfg.pipeline.models, 5);
        assert_eq!(cfg.pipeline.select, 3);
        assert_eq!(cfg.arch.image_size, 84);
        assert_eq!(cfg.generator.num_classes, 9);
        assert_eq!(cfg.train.episode.tasks, 5);
        assert_eq!(cfg.train.episode.classes_per_task, 3);
        assert_eq!(cfg.train.episode.images_per_class, 6);
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let a = "
[pipeline]
seed = 7
models = 3
select = 2

[train]
inner_lr = 0.02
meta_lr = 0.001
";
        let b = "
[train]
meta_lr = 0.001
inner_lr = 0.02

[pipeline]
select = 2
models = 3
seed = 7
";
        let ca = PipelineConfig::from_toml_str(a).unwrap();
        let cb = PipelineConfig::from_toml_str(b).unwrap();
        assert_eq!(ca.hash(), cb.hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let mut a = PipelineConfig::default();
        let b = PipelineConfig::default();
        a.pipeline.seed = 99;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_fields_are_field_level_errors() {
        let err = PipelineConfig::from_toml_str("[pipeline]\nsede = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("sede"), "{msg}");
    }

    #[test]
    fn set_overrides_reach_nested_keys() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "train.inner_lr=0.5".into(),
                "pipeline.models=2".into(),
                "pipeline.select=1".into(),
            ],
            Some(123),
            Some("elsewhere"),
        )
        .unwrap();
        assert_eq!(cfg.train.inner_lr, 0.5);
        assert_eq!(cfg.pipeline.models, 2);
        assert_eq!(cfg.pipeline.select, 1);
        assert_eq!(cfg.pipeline.seed, 123);
        assert_eq!(cfg.pipeline.out_dir, "elsewhere");
    }

    #[test]
    fn select_above_models_is_rejected() {
        let err =
            PipelineConfig::load(None, &["pipeline.select=9".into()], None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

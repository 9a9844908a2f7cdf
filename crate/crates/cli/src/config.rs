//! Run configuration: one TOML document with sections mirroring the core
//! config types, plus dotted-path overrides from the command line. The
//! shipped defaults are the desk-scale setup every command falls back to
//! when no file is given.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use samora_core::adapter::AdapterConfig;
use samora_core::baselines::variant_from_id;
use samora_core::data::{TaskKind, TaskSpec};
use samora_core::model::ModelConfig;
use samora_core::train::{PretrainConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub variant: String,
    /// Seeds for sweep commands; single-run commands use train.seed.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub tasks: Vec<TaskSpec>,
}

fn desk_task(name: &str, kind: TaskKind, vocab: usize, id: usize) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        kind,
        vocab,
        seq_len: 8,
        n_train: 2000,
        n_val: 200,
        task_id: id,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/run"),
            variant: "samora".into(),
            seeds: vec![0, 1, 2, 3, 4],
            model: ModelConfig {
                vocab: 16,
                d_model: 32,
                n_blocks: 1,
                max_seq: 16,
                ff_mult: 2,
            },
            adapter: AdapterConfig {
                n_experts: 3,
                rank: 4,
                ..AdapterConfig::default()
            },
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            // modadd works over the lower half of the vocabulary so its
            // token statistics are visibly distinct from the full-range
            // tasks and mod-8 sums stay in its own alphabet.
            tasks: vec![
                desk_task("copy", TaskKind::Copy, 16, 0),
                desk_task("reverse", TaskKind::Reverse, 16, 1),
                desk_task("modadd", TaskKind::ModAdd, 8, 2),
                desk_task("sort", TaskKind::Sort, 16, 3),
            ],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let core = |r: samora_core::Result<()>| r.map_err(CliError::from);
        core(self.model.validate())?;
        core(self.adapter.validate())?;
        core(self.train.validate())?;
        core(variant_from_id(&self.variant).map(|_| ()))?;
        if self.tasks.is_empty() {
            return Err(CliError::Config("config has no tasks".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("config has no seeds".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            core(t.validate())?;
            if t.task_id != i {
                return Err(CliError::Config(format!(
                    "task '{}' has task_id {} but sits at position {i}; ids must be contiguous from 0",
                    t.name, t.task_id
                )));
            }
            if t.vocab > self.model.vocab {
                return Err(CliError::Config(format!(
                    "task '{}' vocab {} exceeds model vocab {}",
                    t.name, t.vocab, self.model.vocab
                )));
            }
            let span = t.seq_len + t.kind.target_len(t.seq_len) - 1;
            if span > self.model.max_seq {
                return Err(CliError::Config(format!(
                    "task '{}' needs {span} positions but model max_seq is {}",
                    t.name, self.model.max_seq
                )));
            }
        }
        Ok(())
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Flag-level overrides every run command shares.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
    pub precision: Option<String>,
    pub set: Vec<String>,
}

pub fn load_config(path: Option<&Path>, over: &Overrides) -> Result<RunConfig, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            text.parse::<toml::Value>()
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
        }
        None => toml::Value::try_from(RunConfig::default())
            .expect("default config converts to toml"),
    };

    for s in &over.set {
        let (key, raw) = s.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects key=value, got {s:?}"))
        })?;
        set_path(&mut value, key.trim(), parse_toml_value(raw.trim()))?;
    }
    if let Some(seed) = over.seed {
        set_path(&mut value, "train.seed", toml::Value::Integer(seed as i64))?;
    }
    if let Some(out) = &over.out {
        set_path(
            &mut value,
            "out",
            toml::Value::String(out.display().to_string()),
        )?;
    }
    if let Some(v) = &over.variant {
        set_path(&mut value, "variant", toml::Value::String(v.clone()))?;
    }
    if let Some(p) = &over.precision {
        if p != "f64" && p != "f32" {
            return Err(CliError::Config(format!(
                "--precision must be f64 or f32, got {p:?}"
            )));
        }
        set_path(&mut value, "train.precision", toml::Value::String(p.clone()))?;
    }

    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| CliError::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Literal TOML value when the text parses as one, bare string otherwise,
/// so `--set variant=lora` works without quoting gymnastics.
fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, dotted: &str, leaf: toml::Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {dotted:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override {dotted:?}: {} is not a table",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), leaf);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.tasks.len(), 4);
        assert_eq!(back.variant, "samora");
    }

    #[test]
    fn test_unknown_key_is_named() {
        let err = load_config(None, &Overrides {
            set: vec!["train.learning_rate=0.1".into()],
            ..Overrides::default()
        })
        .unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn test_set_overrides_typed_values() {
        let cfg = load_config(None, &Overrides {
            set: vec![
                "train.lr=0.01".into(),
                "adapter.n_experts=5".into(),
                "variant=wo_orth".into(),
                "adapter.route_on_scaled=true".into(),
            ],
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.adapter.n_experts, 5);
        assert_eq!(cfg.variant, "wo_orth");
        assert!(cfg.adapter.route_on_scaled);
    }

    #[test]
    fn test_flag_overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, RunConfig::default().to_toml()).unwrap();
        let cfg = load_config(
            Some(&path),
            &Overrides {
                seed: Some(9),
                precision: Some("f32".into()),
                variant: Some("lora".into()),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.variant, "lora");
        assert!(matches!(cfg.train.precision, samora_core::checkpoint::Dtype::F32));
    }

    #[test]
    fn test_bad_variant_and_bad_precision_rejected() {
        let err = load_config(None, &Overrides {
            variant: Some("bogus".into()),
            ..Overrides::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = load_config(None, &Overrides {
            precision: Some("f16".into()),
            ..Overrides::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn test_task_id_contiguity_enforced() {
        let err = load_config(None, &Overrides {
            set: vec!["tasks=0".into()],
            ..Overrides::default()
        });
        assert!(err.is_err());

        let mut cfg = RunConfig::default();
        cfg.tasks[1].task_id = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_sequence_budget_checked() {
        let mut cfg = RunConfig::default();
        cfg.model.max_seq = 10;
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err}").contains("max_seq"));
    }
}

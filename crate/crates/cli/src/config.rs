//! JSON run configuration. Every section and field is optional; relative
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};

use s2s_core::infer::InferConfig;
use s2s_core::model::ModelConfig;
use s2s_core::phoneme::{load_entity_db, load_inventory, EntityDb, PhonemeInventory};
use s2s_core::synth::{default_patterns, load_patterns, synthetic_entities, DatasetConfig, NoiseConfig, QueryPattern};
use s2s_core::training::TrainConfig;
use s2s_core::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InventorySection {
    /// Inventory file; when absent a synthetic inventory of `size` symbols is used.
    pub path: Option<PathBuf>,
    pub size: usize,
}

impl Default for InventorySection {
    fn default() -> Self {
        InventorySection { path: None, size: 60 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntitiesSection {
    /// Entity db file; when absent `count` synthetic entities are drawn.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EntitiesSection {
    fn default() -> Self {
        EntitiesSection {
            path: None,
            count: 1000,
            min_len: 2,
            max_len: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternsSection {
    /// Pattern file; when absent the five built-in carrier shapes are drawn.
    pub path: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    inventory: InventorySection,
    entities: EntitiesSection,
    patterns: PatternsSection,
    data: DatasetConfig,
    noise: NoiseConfig,
    model: Map<String, Value>,
    train: Map<String, Value>,
    infer: InferConfig,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub inventory: InventorySection,
    pub entities: EntitiesSection,
    pub patterns: PatternsSection,
    pub data: DatasetConfig,
    pub noise: NoiseConfig,
    /// Model overrides on top of the chosen preset; `vocab` is filled from the inventory when unset.
    model: Map<String, Value>,
    model_preset: Preset,
    pub train: TrainConfig,
    /// Pretrained knowledge-encoder checkpoint loaded before training.
    pub knowledge_init: Option<PathBuf>,
    pub infer: InferConfig,
}

fn take_preset(map: &mut Map<String, Value>, section: &str) -> Result<Preset> {
    match map.remove("preset") {
        None => Ok(Preset::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("{section}.preset: {e}"))),
    }
}

/// Overlays `overrides` on the serialized `base` and deserializes the result.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(
    base: &T,
    overrides: &Map<String, Value>,
    section: &str,
) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("serializable");
    let obj = v.as_object_mut().expect("struct serializes to an object");
    for (k, x) in overrides {
        if !obj.contains_key(k) {
            return Err(Error::Config(format!("unknown field '{section}.{k}'")));
        }
        obj.insert(k.clone(), x.clone());
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{section}: {e}")))
}

fn resolve(dir: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_absolute() { p } else { dir.join(p) })
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let model_preset = take_preset(&mut raw.model, "model")?;
        let train_preset = take_preset(&mut raw.train, "train")?;
        let knowledge_init = match raw.train.remove("knowledge_init") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(Error::Config("train.knowledge_init must be a path".into())),
        };
        let train_base = match train_preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        };
        let train = overlay(&train_base, &raw.train, "train")?;
        train.validate()?;
        raw.noise.validate()?;
        raw.infer.validate()?;
        let cfg = Config {
            inventory: InventorySection {
                path: resolve(dir, raw.inventory.path),
                ..raw.inventory
            },
            entities: EntitiesSection {
                path: resolve(dir, raw.entities.path),
                ..raw.entities
            },
            patterns: PatternsSection {
                path: resolve(dir, raw.patterns.path),
                ..raw.patterns
            },
            data: raw.data,
            noise: raw.noise,
            model: raw.model,
            model_preset,
            train,
            knowledge_init: resolve(dir, knowledge_init),
            infer: raw.infer,
        };
        // surface model errors at load time
        cfg.model_for_vocab(None)?;
        Ok(cfg)
    }

    fn model_for_vocab(&self, vocab: Option<usize>) -> Result<ModelConfig> {
        let base = match self.model_preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::default(),
        };
        let mut m: ModelConfig = overlay(&base, &self.model, "model")?;
        if let Some(v) = vocab {
            if !self.model.contains_key("vocab") {
                m.vocab = v;
            } else if m.vocab != v {
                return Err(Error::Config(format!(
                    "model.vocab is {} but the inventory has {v} entries",
                    m.vocab
                )));
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Model configuration sized for `inv`.
    pub fn model(&self, inv: &PhonemeInventory) -> Result<ModelConfig> {
        self.model_for_vocab(Some(inv.len()))
    }

    pub fn load_inventory(&self) -> Result<PhonemeInventory> {
        match &self.inventory.path {
            Some(p) => load_inventory(p),
            None => PhonemeInventory::synthetic(self.inventory.size),
        }
    }

    pub fn load_entities(&self, inv: &PhonemeInventory, max_slot_len: usize) -> Result<EntityDb> {
        let e = &self.entities;
        match &e.path {
            Some(p) => load_entity_db(p, inv, max_slot_len),
            None => synthetic_entities(inv, e.count, e.min_len, e.max_len, max_slot_len, e.seed),
        }
    }

    pub fn load_patterns(&self, inv: &PhonemeInventory) -> Result<Vec<QueryPattern>> {
        match &self.patterns.path {
            Some(p) => load_patterns(p, inv),
            None => Ok(default_patterns(inv, self.patterns.seed)),
        }
    }

    /// Applies a master `--seed` to every generation stream.
    pub fn reseed_data(&mut self, seed: u64) {
        self.entities.seed = seed;
        self.patterns.seed = seed;
        self.noise.seed = seed;
    }
}

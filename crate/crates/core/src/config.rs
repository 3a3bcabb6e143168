//! Run configuration: one TOML file with optional `section.key=value`
//! overrides, layered over a named model preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::sampler::GuidanceConfig;
use crate::synth;
use crate::text::{EmbeddingTable, Vocabulary};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Directory of an exported dataset; generated in memory when absent.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Reverse steps; the schedule length selects ancestral sampling.
    pub steps: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the model preset the file was layered on.
    pub preset: String,
    pub model: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    /// Defaults around a named model preset (`desk`, `desk_uvit`, `full`,
    /// `full_uvit`, `mini`).
    pub fn preset(name: &str) -> Result<Self> {
        let model = BackboneConfig::by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown model preset {name:?}")))?;
        let train = if name.starts_with("full") {
            TrainConfig::full()
        } else {
            TrainConfig::desk()
        };
        Ok(Self {
            preset: name.to_string(),
            model,
            schedule: ScheduleConfig::default(),
            train,
            guidance: GuidanceConfig::default(),
            data: DataConfig {
                n_train: 10_000,
                n_test: 1000,
                seed: 0,
                dir: None,
            },
            codec: CodecConfig { epochs: 30, seed: 0 },
            sample: SampleConfig { steps: 50, batch: 25 },
        })
    }

    /// Parses a config document and applies overrides. The document's
    /// `preset` key (default `desk`) picks the base that missing keys fall
    /// back to.
    pub fn from_toml_str(doc: &str, overrides: &[String]) -> Result<Self> {
        let user: Table = doc
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        let mut user = Value::Table(user);
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = user
            .get("preset")
            .and_then(Value::as_str)
            .unwrap_or("desk")
            .to_string();
        let mut base = Value::try_from(Self::preset(&preset)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&doc, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sample.steps must be in 1..={}",
                self.schedule.steps
            )));
        }
        if self.sample.batch == 0 {
            return Err(Error::Config("sample.batch must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved TOML, suitable for echoing into output directories.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Vocabulary and trained text embeddings for the synthetic grammar.
    pub fn build_codec(&self) -> Result<(Vocabulary, EmbeddingTable)> {
        let corpus = synth::all_captions();
        let vocab = Vocabulary::build(&corpus)?;
        if vocab.len() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the caption grammar has {} tokens",
                self.model.vocab_size,
                vocab.len()
            )));
        }
        let table = EmbeddingTable::train(
            &vocab,
            &corpus,
            self.model.word_dim,
            self.model.embed_dim,
            self.codec.epochs,
            self.codec.seed,
        )?;
        Ok((vocab, table))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `section.key=value`; the value is read as TOML, falling back to a
/// bare string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a value")))?;
        cur = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a value")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// TOML rendering of any serializable record.
pub fn to_toml_string<T: Serialize>(v: &T) -> String {
    toml::to_string(v).unwrap_or_default()
}

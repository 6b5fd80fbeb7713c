//! Job files for `train` and `ablate`. Relative paths resolve against the
//! job file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lrmt_core::corpus::{CharTable, Corpus};
use lrmt_core::model::{TrainConfig, TransformerShape};
use lrmt_core::pipeline::{AblationBase, DevSet, Init, RunSpec, Toggle, TrainData};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// `"desk"` starts from the desk profile, anything else from the
    /// published defaults; `config` keys override either.
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub config: serde_json::Map<String, Value>,
    #[serde(default)]
    pub shape: Option<TransformerShape>,
    #[serde(default)]
    pub init: Option<Init>,
    pub corpora: Vec<PathBuf>,
    pub dev: Vec<PathBuf>,
    /// `"default"` or a TSV path; enables czn tone restoration when scoring.
    #[serde(default)]
    pub czn_table: Option<String>,
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationJob {
    pub base: TrainJob,
    pub variants: Vec<Vec<Toggle>>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a corpus JSON file and re-checks its invariants.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let c: Corpus = read_json(path)?;
    Ok(Corpus::from_pairs(c.pair().clone(), c.pairs().to_vec())?)
}

pub fn czn_table(spec: Option<&str>, base: &Path) -> Result<Option<CharTable>> {
    Ok(match spec {
        None => None,
        Some("default") => Some(CharTable::czn_default()),
        Some(p) => Some(CharTable::from_tsv(&base.join(p))?),
    })
}

impl TrainJob {
    pub fn train_config(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let start = match self.profile.as_deref() {
            Some("desk") => {
                let n = self.config.get("max_updates").and_then(Value::as_u64).unwrap_or(1000);
                TrainConfig::desk(n)
            }
            None | Some("published") => TrainConfig::default(),
            Some(other) => bail!("unknown profile {other:?} (expected desk or published)"),
        };
        let mut value = serde_json::to_value(start)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.config {
            if !obj.contains_key(k) {
                bail!("unknown config key {k:?}");
            }
            obj.insert(k.clone(), v.clone());
        }
        if let Some(seed) = seed {
            obj.insert("seed".into(), seed.into());
        }
        let cfg: TrainConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data(&self, base: &Path) -> Result<TrainData> {
        let corpora = self
            .corpora
            .iter()
            .map(|p| read_corpus(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let dev = self
            .dev
            .iter()
            .map(|p| Ok(DevSet::from_corpus(&read_corpus(&base.join(p))?)?))
            .collect::<Result<Vec<_>>>()?;
        let mut data = TrainData::new(corpora, dev)?;
        data.czn_table = czn_table(self.czn_table.as_deref(), base)?;
        Ok(data)
    }

    fn init(&self, config: &TrainConfig, base: &Path) -> Init {
        match &self.init {
            None => Init::Random { seed: config.seed },
            Some(Init::Checkpoint { path }) => Init::Checkpoint { path: base.join(path) },
            Some(other) => other.clone(),
        }
    }

    pub fn run_spec(&self, base: &Path, seed: Option<u64>) -> Result<RunSpec> {
        let config = self.train_config(seed)?;
        let init = match (&self.init, seed) {
            (Some(Init::Random { .. }), Some(s)) => Init::Random { seed: s },
            _ => self.init(&config, base),
        };
        Ok(RunSpec {
            run_id: self.run_id.clone(),
            shape: self.shape.unwrap_or_else(TransformerShape::desk),
            config,
            init,
        })
    }

    pub fn ablation_base(&self, base: &Path, seed: Option<u64>) -> Result<AblationBase> {
        let spec = self.run_spec(base, seed)?;
        Ok(AblationBase {
            config: spec.config,
            shape: spec.shape,
            init: spec.init,
            data: self.data(base)?,
        })
    }
}

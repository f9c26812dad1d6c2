//! Run configuration.
//!
//! Precedence, lowest first: the selected profile's defaults, the TOML run
//! file, then command-line flags. The `paper` profile carries the published
//! hyperparameters; `desk` shrinks training so a full run fits on a laptop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Normalization;
use crate::llm::remote::RemoteConfig;
use crate::retriever::{AblationFlags, RetrieverTrainConfig};
use crate::reward::RewardTrainConfig;
use crate::sparse_index::{Bm25Params, IndexedText};
use crate::synth::SynthConfig;
use crate::text::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(format!("unknown profile {other:?} (expected paper or desk)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Label/lexical-overlap oracle over the pool; scoring only.
    MockPreference,
    /// Copies matching demonstration records; generation only.
    Mimic,
    Uniform { vocab_size: usize },
    Bigram { buckets: u64 },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw candidate pool read by `build-pool`.
    pub pool_source: PathBuf,
    /// Raw test queries read by `build-pool`.
    pub queries_source: PathBuf,
    pub pool: PathBuf,
    pub queries: PathBuf,
    pub bm25: PathBuf,
    pub candidates: PathBuf,
    pub scored: PathBuf,
    pub reward: PathBuf,
    pub retriever: PathBuf,
    pub index: PathBuf,
    pub retrieval: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub report_table: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            pool_source: "data/pool.jsonl".into(),
            queries_source: "data/queries.jsonl".into(),
            pool: "pool.jsonl".into(),
            queries: "queries.jsonl".into(),
            bm25: "bm25.json".into(),
            candidates: "candidates.jsonl".into(),
            scored: "scored.jsonl".into(),
            reward: "reward".into(),
            retriever: "retriever".into(),
            index: "index.bin".into(),
            retrieval: "retrieval.jsonl".into(),
            predictions: "predictions.jsonl".into(),
            report: "report.json".into(),
            report_table: "report.txt".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Reject samples whose spans are not substrings of the input.
    pub strict: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { strict: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
    pub indexed_text: IndexedText,
}

impl Default for Bm25Config {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            k1: p.k1,
            b: p.b,
            indexed_text: IndexedText::Input,
        }
    }
}

impl Bm25Config {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub k_init: usize,
    pub top_k: usize,
    pub last_n: usize,
    pub backend: BackendConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k_init: 100,
            top_k: 3,
            last_n: 16,
            backend: BackendConfig::MockPreference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub k_shot: usize,
    pub prompt_budget: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub backend: BackendConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k_shot: 8,
            prompt_budget: 1792,
            max_new_tokens: 256,
            temperature: 0.0,
            backend: BackendConfig::Mimic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub normalize: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Worker threads for scoring, indexing and inference.
    pub threads: usize,
    /// Relative paths resolve against this directory.
    pub work_dir: PathBuf,
    pub paths: Paths,
    pub pool: PoolConfig,
    pub bm25: Bm25Config,
    pub scoring: ScoringConfig,
    pub reward: RewardTrainConfig,
    pub retriever: RetrieverTrainConfig,
    pub ablation: AblationFlags,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self {
            profile,
            seed: 13,
            threads: 4,
            work_dir: ".".into(),
            paths: Paths::default(),
            pool: PoolConfig::default(),
            bm25: Bm25Config::default(),
            scoring: ScoringConfig::default(),
            reward: RewardTrainConfig::default(),
            retriever: RetrieverTrainConfig::default(),
            ablation: AblationFlags::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        };
        if profile == Profile::Desk {
            cfg.reward.learning_rate = 1e-3;
            cfg.reward.batch_size = 8;
            cfg.reward.steps = 500;
            cfg.retriever.learning_rate = 1e-3;
            cfg.retriever.batch_size = 8;
            cfg.retriever.steps = 300;
        }
        cfg
    }

    /// Profile defaults overlaid with the TOML document `text`. A `profile`
    /// key in the document selects the base unless `profile` is given.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("run config: {e}")))?;
        let profile = match (profile, doc.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| Error::Config("profile must be a string".into()))?
                .parse()
                .map_err(Error::Config)?,
            (None, None) => Profile::Paper,
        };
        let base = Self::for_profile(profile);
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc.clone());
        merged.insert("profile".into(), toml::Value::String(format!("{profile:?}").to_lowercase()));
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("run config: {e}")))?;
        let known = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(key) = unknown_key(&doc, &known, "") {
            return Err(Error::Config(format!("run config: unknown field `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read run config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, profile)?;
        if cfg.work_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.work_dir = parent.join(&cfg.work_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scoring.top_k == 0 || self.scoring.last_n == 0 {
            return bad("scoring.top_k and scoring.last_n must be positive".into());
        }
        if self.scoring.k_init < self.scoring.top_k + self.scoring.last_n {
            return bad(format!(
                "scoring.k_init = {} is smaller than top_k + last_n = {}",
                self.scoring.k_init,
                self.scoring.top_k + self.scoring.last_n
            ));
        }
        if self.inference.k_shot == 0 {
            return bad("inference.k_shot must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        if self.reward.learning_rate <= 0.0 || self.retriever.learning_rate <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        crate::retriever::LossPlan::new(&self.retriever, &self.ablation)?;
        Ok(())
    }

    /// Hash of the effective configuration, recorded in every artifact.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(&o) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// First key of `doc` with no counterpart in `known`, as a dotted path.
fn unknown_key(doc: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    doc.iter().find_map(|(k, v)| match (known.get(k), v) {
        (None, _) => Some(format!("{prefix}{k}")),
        (Some(toml::Value::Table(kt)), toml::Value::Table(dt)) => unknown_key(dt, kt, &format!("{prefix}{k}.")),
        _ => None,
    })
}

/// Backend tables replace rather than merge, so variants never mix fields.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.reward.learning_rate, c.reward.batch_size, c.reward.steps), (1e-5, 64, 3000));
        assert_eq!(
            (c.retriever.learning_rate, c.retriever.batch_size, c.retriever.steps, c.retriever.alpha),
            (3e-5, 128, 3000, 0.2)
        );
        assert_eq!((c.inference.k_shot, c.scoring.k_init, c.scoring.top_k, c.scoring.last_n), (8, 100, 3, 16));
    }

    #[test]
    fn file_overrides_profile() {
        let c = RunConfig::from_toml_str("profile = \"desk\"\nseed = 5\n[retriever]\nsteps = 7\n", None).unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!(c.seed, 5);
        assert_eq!(c.retriever.steps, 7);
        assert_eq!(c.retriever.batch_size, 8);
        assert_eq!(c.reward.steps, 500);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::for_profile(Profile::Desk);
        assert_eq!(RunConfig::from_toml_str(&c.to_toml(), None).unwrap(), c);
    }

    #[test]
    fn backend_table_is_replaced() {
        let c = RunConfig::from_toml_str("[scoring.backend]\nkind = \"uniform\"\nvocab_size = 50\n", None).unwrap();
        assert_eq!(c.scoring.backend, BackendConfig::Uniform { vocab_size: 50 });
    }

    #[test]
    fn bad_values_are_config_errors() {
        for doc in [
            "seed = \"x\"",
            "unknown = 1",
            "[scoring]\nk_init = 5",
            "[ablation]\nno_distill = true\n[retriever]\nalpha = 0.0",
            "profile = \"huge\"",
            "[retriever]\nstpes = 10",
            "[reward]\nhiden = 8",
            "[inference.backend]\nkind = \"mimic\"\nextra = 1",
        ] {
            let e = RunConfig::from_toml_str(doc, None).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{doc}: {e}");
        }
    }
}

//! Staged pipeline over on-disk artifacts.
//!
//! Every artifact `x` gets a sidecar `x.meta.json` recording the config
//! hash, seed, creation time and the sha256 of its inputs and outputs. A
//! stage re-hashes each upstream artifact before use and refuses to run on
//! a mismatch. Outputs are written to temporary paths and renamed into
//! place only after the whole stage has succeeded.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{build_prompt, default_instruction, linearize, parse_output, ScoredDemo};
use crate::config::{BackendConfig, RunConfig};
use crate::corpus::{load_pool, CandidatePool, IESample, LoadOptions};
use crate::error::{Error, Result};
use crate::eval::{micro_f1, Prediction};
use crate::llm::mock::{BigramBackend, MimicBackend, PreferenceBackend, UniformBackend};
use crate::llm::remote::RemoteBackend;
use crate::llm::{Gateway, GenerationParams, LlmBackend, ScoreCache};
use crate::nn::Vocab;
use crate::retriever::{build_index, retrieve, train_retriever, BiEncoder, EncodedIndex, Teacher};
use crate::reward::{render_enhanced, train_reward, CrossScorer};
use crate::scoring::{init_candidates, read_scored, score_all, write_scored, ScoringParams};
use crate::sparse_index::Bm25Index;
use crate::text::sha256_hex;
use crate::ScoredId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthFixtures,
    BuildPool,
    Bm25Init,
    LlmScore,
    TrainReward,
    TrainRetriever,
    Index,
    Retrieve,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::SynthFixtures,
        Stage::BuildPool,
        Stage::Bm25Init,
        Stage::LlmScore,
        Stage::TrainReward,
        Stage::TrainRetriever,
        Stage::Index,
        Stage::Retrieve,
        Stage::Infer,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthFixtures => "synth-fixtures",
            Stage::BuildPool => "build-pool",
            Stage::Bm25Init => "bm25-init",
            Stage::LlmScore => "llm-score",
            Stage::TrainReward => "train-reward",
            Stage::TrainRetriever => "train-retriever",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub created_unix: u64,
    /// Upstream artifact file name to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to sha256; every output of the stage is listed.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

fn file_key(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// sha256 of a file, or of a directory's sorted (name, content hash) list.
pub fn hash_artifact(path: &Path) -> Result<String> {
    let md = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if md.is_file() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut entries: Vec<(String, String)> = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        entries.push((name, hash_artifact(&entry.path())?));
    }
    entries.sort();
    let listing: String = entries.iter().map(|(n, h)| format!("{n}\0{h}\n")).collect();
    Ok(sha256_hex(listing.as_bytes()))
}

pub fn read_meta(artifact: &Path) -> Result<ArtifactMeta> {
    let mp = meta_path(artifact);
    let bytes = std::fs::read(&mp).map_err(|_| {
        Error::Artifact(format!(
            "{} has no metadata sidecar; produce it with the pipeline",
            artifact.display()
        ))
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Artifact(format!("unreadable metadata {}: {e}", mp.display())))
}

/// Re-hash `artifact` and compare with its sidecar. Returns the hash.
pub fn verify_artifact(artifact: &Path) -> Result<String> {
    if !artifact.exists() {
        return Err(Error::Artifact(format!("missing upstream artifact {}", artifact.display())));
    }
    let meta = read_meta(artifact)?;
    let key = file_key(artifact);
    let recorded = meta
        .outputs
        .get(&key)
        .ok_or_else(|| Error::Artifact(format!("metadata of {} does not list it", artifact.display())))?;
    let actual = hash_artifact(artifact)?;
    if *recorded != actual {
        return Err(Error::Artifact(format!(
            "{} was modified after stage {} wrote it (sha256 {actual}, recorded {recorded})",
            artifact.display(),
            meta.stage
        )));
    }
    Ok(actual)
}

/// Outputs staged under temporary names until [`Outputs::commit`].
struct Outputs {
    items: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            items: Vec::new(),
            committed: false,
        }
    }

    fn temp_for(path: &Path) -> PathBuf {
        let mut name = std::ffi::OsString::from(".");
        name.push(path.file_name().unwrap_or_default());
        name.push(format!(".tmp-{}", std::process::id()));
        path.with_file_name(name)
    }

    /// Stage an artifact produced by `write` at the temporary path it is given.
    fn add(&mut self, path: PathBuf, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = Self::temp_for(&path);
        remove_path(&tmp)?;
        self.items.push((path, tmp.clone()));
        write(&tmp)
    }

    fn add_bytes(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        self.add(path, |tmp| std::fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e)))
    }

    fn commit(mut self, meta: ArtifactMeta) -> Result<Vec<PathBuf>> {
        let mut meta = meta;
        for (path, tmp) in &self.items {
            meta.outputs.insert(file_key(path), hash_artifact(tmp)?);
        }
        let meta_bytes = serde_json::to_vec_pretty(&meta)?;
        for (path, _) in &self.items {
            remove_path(&meta_path(path))?;
        }
        for (path, tmp) in &self.items {
            remove_path(path)?;
            std::fs::rename(tmp, path).map_err(|e| Error::io(path, e))?;
        }
        for (path, _) in &self.items {
            let mp = meta_path(path);
            let tmp = Self::temp_for(&mp);
            std::fs::write(&tmp, &meta_bytes).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &mp).map_err(|e| Error::io(&mp, e))?;
        }
        self.committed = true;
        Ok(self.items.iter().map(|(p, _)| p.clone()).collect())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for (_, tmp) in &self.items {
                let _ = remove_path(tmp);
            }
        }
    }
}

fn remove_path(p: &Path) -> Result<()> {
    match std::fs::symlink_metadata(p) {
        Ok(md) if md.is_dir() => std::fs::remove_dir_all(p).map_err(|e| Error::io(p, e)),
        Ok(_) => std::fs::remove_file(p).map_err(|e| Error::io(p, e)),
        Err(_) => Ok(()),
    }
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One line of the candidate-initialization artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub candidates: Vec<String>,
}

/// One line of the retrieval artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: String,
    pub hits: Vec<ScoredId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Vocabulary shared by the pair scorer and the bi-encoder: every rendering
/// of every pool sample either model reads.
pub fn pool_vocab(pool: &CandidatePool) -> Vocab {
    let texts: Vec<String> = pool
        .samples()
        .iter()
        .flat_map(|s| {
            [
                render_enhanced(s, true),
                linearize(s, false).text,
                linearize(s, true).text,
            ]
        })
        .collect();
    Vocab::build(texts.iter().map(String::as_str), 1)
}

pub fn make_backend(cfg: &BackendConfig, pool: &CandidatePool) -> Result<Arc<dyn LlmBackend>> {
    Ok(match cfg {
        BackendConfig::MockPreference => Arc::new(PreferenceBackend::new(pool)),
        BackendConfig::Mimic => Arc::new(MimicBackend),
        BackendConfig::Uniform { vocab_size } => Arc::new(UniformBackend::new(*vocab_size)),
        BackendConfig::Bigram { buckets } => Arc::new(BigramBackend::new(*buckets)),
        BackendConfig::Remote(r) => Arc::new(RemoteBackend::new(r.clone()).map_err(|e| Error::Config(e.to_string()))?),
    })
}

/// What a stage did, for the command-line summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

pub struct Pipeline {
    cfg: RunConfig,
    config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash();
        Ok(Self { cfg, config_hash })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(p)
    }

    fn meta(&self, stage: Stage, inputs: &[(&Path, &str)], details: serde_json::Value) -> ArtifactMeta {
        ArtifactMeta {
            stage: stage.name().into(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: inputs.iter().map(|(p, h)| (file_key(p), h.to_string())).collect(),
            outputs: BTreeMap::new(),
            details,
        }
    }

    fn threads(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn load_verified_pool(&self, path: &Path) -> Result<(CandidatePool, String)> {
        let hash = verify_artifact(path)?;
        let loaded = load_pool(path, LoadOptions { strict: false })?;
        Ok((loaded.pool, hash))
    }

    fn needs_reward(&self) -> bool {
        !self.cfg.ablation.no_distill && !self.cfg.ablation.no_reward
    }

    pub fn run(&self, stage: Stage) -> Result<StageReport> {
        log::info!("stage {} (config {})", stage.name(), &self.config_hash[..12]);
        let (outputs, summary) = match stage {
            Stage::SynthFixtures => self.synth_fixtures()?,
            Stage::BuildPool => self.build_pool()?,
            Stage::Bm25Init => self.bm25_init()?,
            Stage::LlmScore => self.llm_score()?,
            Stage::TrainReward => self.train_reward()?,
            Stage::TrainRetriever => self.train_retriever()?,
            Stage::Index => self.index()?,
            Stage::Retrieve => self.retrieve()?,
            Stage::Infer => self.infer()?,
            Stage::Eval => self.eval()?,
        };
        Ok(StageReport { stage, outputs, summary })
    }

    /// Every stage from `build-pool` to `eval`, optionally preceded by
    /// fixture generation. The pair scorer is skipped when no stage uses it.
    pub fn run_all(&self, synth: bool) -> Result<Vec<StageReport>> {
        let mut reports = Vec::new();
        for stage in Stage::ALL {
            if stage == Stage::SynthFixtures && !synth {
                continue;
            }
            if stage == Stage::TrainReward && !self.needs_reward() {
                log::info!("skipping train-reward: the active ablation does not use it");
                continue;
            }
            reports.push(self.run(stage)?);
        }
        Ok(reports)
    }

    fn synth_fixtures(&self) -> Result<(Vec<PathBuf>, String)> {
        let fx = crate::synth::generate(&self.cfg.synth);
        let pool = CandidatePool::from_samples(fx.pool)?;
        let queries = CandidatePool::from_samples(fx.held_out)?;
        let mut out = Outputs::new();
        out.add(self.path(&self.cfg.paths.pool_source), |t| pool.write_jsonl(t))?;
        out.add(self.path(&self.cfg.paths.queries_source), |t| queries.write_jsonl(t))?;
        let meta = self.meta(
            Stage::SynthFixtures,
            &[],
            serde_json::json!({ "synth": self.cfg.synth }),
        );
        let summary = format!("{} pool samples, {} queries", pool.len(), queries.len());
        Ok((out.commit(meta)?, summary))
    }

    fn build_pool(&self) -> Result<(Vec<PathBuf>, String)> {
        let opts = LoadOptions {
            strict: self.cfg.pool.strict,
        };
        let mut inputs = Vec::new();
        let mut loaded = Vec::new();
        let mut rejected = Vec::new();
        for src in [&self.cfg.paths.pool_source, &self.cfg.paths.queries_source] {
            let src = self.path(src);
            let l = load_pool(&src, opts)?;
            for r in l.rejected.iter() {
                let reasons: Vec<String> = r.violations.iter().map(|v| v.to_string()).collect();
                log::warn!("{}:{}: rejected {}: {}", src.display(), r.line, r.id, reasons.join("; "));
                rejected.push(serde_json::json!({"file": file_key(&src), "line": r.line, "id": r.id, "reasons": reasons}));
            }
            for w in &l.warnings {
                let reasons: Vec<String> = w.violations.iter().map(|v| v.to_string()).collect();
                log::warn!("{}:{}: kept {} with warnings: {}", src.display(), w.line, w.id, reasons.join("; "));
            }
            inputs.push((src.clone(), hash_artifact(&src)?));
            loaded.push(l.pool);
        }
        if loaded[0].is_empty() {
            return Err(Error::Invalid("the candidate pool is empty after validation".into()));
        }
        let mut out = Outputs::new();
        out.add(self.path(&self.cfg.paths.pool), |t| loaded[0].write_jsonl(t))?;
        out.add(self.path(&self.cfg.paths.queries), |t| loaded[1].write_jsonl(t))?;
        let input_refs: Vec<(&Path, &str)> = inputs.iter().map(|(p, h)| (p.as_path(), h.as_str())).collect();
        let summary = format!(
            "{} pool samples, {} queries, {} rejected",
            loaded[0].len(),
            loaded[1].len(),
            rejected.len()
        );
        let meta = self.meta(Stage::BuildPool, &input_refs, serde_json::json!({ "rejected": rejected }));
        Ok((out.commit(meta)?, summary))
    }

    fn bm25_init(&self) -> Result<(Vec<PathBuf>, String)> {
        let pool_path = self.path(&self.cfg.paths.pool);
        let (pool, pool_hash) = self.load_verified_pool(&pool_path)?;
        let index = Bm25Index::build(&pool, self.cfg.bm25.indexed_text, self.cfg.bm25.params())?;
        let k_init = self.cfg.scoring.k_init;
        let seed = self.cfg.seed;
        let lists: Vec<CandidateList> = self.threads()?.install(|| {
            pool.samples()
                .par_iter()
                .map(|q| {
                    Ok(CandidateList {
                        query_id: q.id.clone(),
                        candidates: init_candidates(q, &index, &pool, k_init, seed)?,
                    })
                })
                .collect::<Result<_>>()
        })?;
        let mut out = Outputs::new();
        out.add(self.path(&self.cfg.paths.bm25), |t| index.save(t))?;
        out.add_bytes(self.path(&self.cfg.paths.candidates), &jsonl_bytes(&lists)?)?;
        let meta = self.meta(Stage::Bm25Init, &[(&pool_path, &pool_hash)], serde_json::Value::Null);
        let summary = format!("{} candidate lists of up to {k_init}", lists.len());
        Ok((out.commit(meta)?, summary))
    }

    fn llm_score(&self) -> Result<(Vec<PathBuf>, String)> {
        let pool_path = self.path(&self.cfg.paths.pool);
        let cand_path = self.path(&self.cfg.paths.candidates);
        let (pool, pool_hash) = self.load_verified_pool(&pool_path)?;
        let cand_hash = verify_artifact(&cand_path)?;
        let lists: Vec<CandidateList> = read_jsonl(&cand_path)?;

        let backend = make_backend(&self.cfg.scoring.backend, &pool)?;
        if !backend.capabilities().scoring {
            return Err(Error::Config(format!("backend {} cannot score continuations", backend.name())));
        }
        let mut gateway = Gateway::new(backend.clone());
        if let Some(dir) = &self.cfg.paths.cache_dir {
            gateway = gateway.with_cache(Arc::new(ScoreCache::open(&self.path(dir))?));
        }
        let queries: Vec<(IESample, Vec<String>)> = lists
            .into_iter()
            .map(|l| {
                let q = pool
                    .get(&l.query_id)
                    .ok_or_else(|| Error::Artifact(format!("candidate list for unknown query {}", l.query_id)))?;
                Ok((q.clone(), l.candidates))
            })
            .collect::<Result<_>>()?;
        let params = ScoringParams {
            top_k: self.cfg.scoring.top_k,
            last_n: self.cfg.scoring.last_n,
            parallelism: self.cfg.threads,
        };
        let outcome = score_all(
            &gateway,
            &|q: &IESample| default_instruction(q.task).to_string(),
            &queries,
            &pool,
            &params,
        )?;
        if outcome.sets.is_empty() {
            return Err(Error::Invalid("every query was dropped during scoring".into()));
        }
        let mut out = Outputs::new();
        out.add(self.path(&self.cfg.paths.scored), |t| write_scored(t, &outcome.sets))?;
        let details = serde_json::json!({
            "backend": backend.name(),
            "tokenization": backend.tokenization(),
            "scored": outcome.sets.len(),
            "dropped": outcome.dropped,
        });
        let meta = self.meta(
            Stage::LlmScore,
            &[(&pool_path, &pool_hash), (&cand_path, &cand_hash)],
            details,
        );
        let summary = format!("{} sets kept, {} queries dropped", outcome.sets.len(), outcome.dropped.len());
        Ok((out.commit(meta)?, summary))
    }

    fn train_reward(&self) -> Result<(Vec<PathBuf>, String)> {
        let pool_path = self.path(&self.cfg.paths.pool);
        let scored_path = self.path(&self.cfg.paths.scored);
        let (pool, pool_hash) = self.load_verified_pool(&pool_path)?;
        let scored_hash = verify_artifact(&scored_path)?;
        let sets = read_scored(&scored_path)?;
        let keyword = !self.cfg.ablation.no_keyword;
        let (scorer, log) = train_reward(&sets, &pool, pool_vocab(&pool), &self.cfg.reward, self.cfg.seed, keyword)?;
        let mut out = Outputs::new();
        out.add(self.path(&self.cfg.paths.reward), |t| {
            scorer.save(t)?;
            log.write_csv(&t.join("train_log.csv"))
        })?;
        let last = log.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
        let meta = self.meta(
            Stage::TrainReward,
            &[(&pool_path, &pool_hash), (&scored_path, &scored_hash)],
            serde_json::json!({ "final_loss": last }),
        );
        Ok((out.commit(meta)?, format!("{} steps, final loss {last:.4}", log.losses.len())))
    }

    fn train_retriever(&self) -> Result<(Vec<PathBuf>, String)> {
        let pool_path = self.path(&self.cfg.paths.pool);
        let scored_path = self.path(&self.cfg.paths.scored);
        let reward_path = self.path(&self.cfg.paths.reward);
        let (pool, pool_hash) = self.load_verified_pool(&pool_path)?;
        let scored_hash = verify_artifact(&scored_path)?;
        let sets = read_scored(&scored_path)?;
        let mut inputs = vec![(pool_path.clone(), pool_hash), (scored_path.clone(), scored_hash)];

        let flags = &self.cfg.ablation;
        let scorer;
        let teacher = if flags.no_distill {
            Teacher::None
        } else if flags.no_reward {
            Teacher::LlmScores
        } else {
            inputs.push((reward_path.clone(), verify_artifact(&reward_path)?));
            scorer = CrossScorer::load(&reward_path)?;
            Teacher::Reward(&scorer)
        };
        let (encoder, log) = train_retriever(
            &sets,
            &pool,
            teacher,
            pool_vocab(&pool),
            &self.cfg.retriever,
            flags,
            self.cfg.seed,
        )?;
        let mut out = Outputs::new();
        out.add(self.path(&self.cfg.paths.retriever), |t| {
            encoder.save(t)?;
            log.write_csv(&t.join("train_log.csv"))
        })?;
        let last = log.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
        let input_refs: Vec<(&Path, &str)> = inputs.iter().map(|(p, h)| (p.as_path(), h.as_str())).collect();
        let meta = self.meta(
            Stage::TrainRetriever,
            &input_refs,
            serde_json::json!({ "final_loss": last, "ablation": flags }),
        );
        Ok((out.commit(meta)?, format!("{} steps, final loss {last:.4}", log.losses.len())))
    }

    fn load_encoder(&self) -> Result<(PathBuf, BiEncoder, String)> {
        let p = self.path(&self.cfg.paths.retriever);
        let h = verify_artifact(&p)?;
        Ok((p.clone(), BiEncoder::load(&p)?, h))
    }

    fn index(&self) -> Result<(Vec<PathBuf>, String)> {
        let pool_path = self.path(&self.cfg.paths.pool);
        let (pool, pool_hash) = self.load_verified_pool(&pool_path)?;
        let (enc_path, encoder, enc_hash) = self.load_encoder()?;
        let index = self.threads()?.install(|| build_index(&encoder, &pool));
        let mut out = Outputs::new();
        out.add_bytes(self.path(&self.cfg.paths.index), &index.to_bytes())?;
        let meta = self.meta(
            Stage::Index,
            &[(&pool_path, &pool_hash), (&enc_path, &enc_hash)],
            serde_json::Value::Null,
        );
        Ok((out.commit(meta)?, format!("{} vectors of dimension {}", index.len(), index.dim)))
    }

    /// Verified pool, queries, retriever and index shared by the last stages.
    fn retrieval_inputs(&self) -> Result<(CandidatePool, CandidatePool, BiEncoder, EncodedIndex, Vec<(PathBuf, String)>)> {
        let pool_path = self.path(&self.cfg.paths.pool);
        let query_path = self.path(&self.cfg.paths.queries);
        let index_path = self.path(&self.cfg.paths.index);
        let (pool, pool_hash) = self.load_verified_pool(&pool_path)?;
        let (queries, query_hash) = self.load_verified_pool(&query_path)?;
        let (enc_path, encoder, enc_hash) = self.load_encoder()?;
        let index_hash = verify_artifact(&index_path)?;
        let index = EncodedIndex::load(&index_path)?;
        if index.ids.iter().zip(pool.ids()).any(|(a, b)| a != b) || index.len() != pool.len() {
            return Err(Error::Artifact("index rows do not match the pool".into()));
        }
        let inputs = vec![
            (pool_path, pool_hash),
            (query_path, query_hash),
            (enc_path, enc_hash),
            (index_path, index_hash),
        ];
        Ok((pool, queries, encoder, index, inputs))
    }

    fn retrieve(&self) -> Result<(Vec<PathBuf>, String)> {
        let (_, queries, encoder, index, inputs) = self.retrieval_inputs()?;
        let k = self.cfg.inference.k_shot;
        let records: Vec<RetrievalRecord> = self.threads()?.install(|| {
            queries
                .samples()
                .par_iter()
                .map(|q| {
                    let r = retrieve(&index, &encoder, q, k)?;
                    Ok(RetrievalRecord {
                        query_id: q.id.clone(),
                        hits: r.hits,
                        warning: r.warning,
                    })
                })
                .collect::<Result<_>>()
        })?;
        let mut out = Outputs::new();
        out.add_bytes(self.path(&self.cfg.paths.retrieval), &jsonl_bytes(&records)?)?;
        let input_refs: Vec<(&Path, &str)> = inputs.iter().map(|(p, h)| (p.as_path(), h.as_str())).collect();
        let meta = self.meta(Stage::Retrieve, &input_refs, serde_json::json!({ "k": k }));
        let short = records.iter().filter(|r| r.warning.is_some()).count();
        let mut summary = format!("{} queries, k = {k}", records.len());
        if short > 0 {
            summary.push_str(&format!(", {short} with fewer than k candidates"));
        }
        Ok((out.commit(meta)?, summary))
    }

    fn infer(&self) -> Result<(Vec<PathBuf>, String)> {
        let (pool, queries, encoder, index, inputs) = self.retrieval_inputs()?;
        let inf = &self.cfg.inference;
        let backend = make_backend(&inf.backend, &pool)?;
        if !backend.capabilities().generation {
            return Err(Error::Config(format!("backend {} cannot generate", backend.name())));
        }
        let gateway = Gateway::new(backend.clone());
        let budget = inf.prompt_budget.min(backend.max_input_tokens());
        let params = GenerationParams {
            max_input_tokens: budget,
            max_new_tokens: inf.max_new_tokens,
            temperature: inf.temperature,
        };
        let results: Vec<(Prediction, usize)> = self.threads()?.install(|| {
            queries
                .samples()
                .par_iter()
                .map(|q| {
                    let r = retrieve(&index, &encoder, q, inf.k_shot)?;
                    let demos: Vec<ScoredDemo> = r
                        .hits
                        .iter()
                        .map(|h| {
                            let s = pool.get(&h.id).expect("index ids come from the pool");
                            ScoredDemo {
                                sample: linearize(s, true),
                                score: h.score,
                            }
                        })
                        .collect();
                    let prompt = build_prompt(
                        default_instruction(q.task),
                        &demos,
                        &linearize(q, false),
                        backend.as_ref(),
                        budget,
                    )?;
                    let text = gateway.generate(&prompt.text, &params)?;
                    let parsed = parse_output(&text, q.task, &q.schema);
                    Ok((
                        Prediction::new(q.id.clone(), parsed.extractions).with_diagnostics(&parsed.diagnostics),
                        prompt.dropped,
                    ))
                })
                .collect::<Result<_>>()
        })?;
        let dropped: usize = results.iter().map(|r| r.1).sum();
        let preds: Vec<Prediction> = results.into_iter().map(|r| r.0).collect();
        let mut out = Outputs::new();
        out.add_bytes(self.path(&self.cfg.paths.predictions), &jsonl_bytes(&preds)?)?;
        let input_refs: Vec<(&Path, &str)> = inputs.iter().map(|(p, h)| (p.as_path(), h.as_str())).collect();
        let details = serde_json::json!({
            "backend": backend.name(),
            "k_shot": inf.k_shot,
            "budget": budget,
            "demonstrations_dropped": dropped,
        });
        let meta = self.meta(Stage::Infer, &input_refs, details);
        Ok((out.commit(meta)?, format!("{} predictions", preds.len())))
    }

    fn eval(&self) -> Result<(Vec<PathBuf>, String)> {
        let query_path = self.path(&self.cfg.paths.queries);
        let pred_path = self.path(&self.cfg.paths.predictions);
        let (queries, query_hash) = self.load_verified_pool(&query_path)?;
        let pred_hash = verify_artifact(&pred_path)?;
        let preds: Vec<Prediction> = read_jsonl(&pred_path)?;
        let report = micro_f1(&preds, queries.samples(), self.cfg.eval.normalize)?;
        let table = report.to_table();
        let mut out = Outputs::new();
        out.add_bytes(self.path(&self.cfg.paths.report), report.to_json().as_bytes())?;
        out.add_bytes(self.path(&self.cfg.paths.report_table), table.as_bytes())?;
        let meta = self.meta(
            Stage::Eval,
            &[(&query_path, &query_hash), (&pred_path, &pred_hash)],
            serde_json::Value::Null,
        );
        Ok((out.commit(meta)?, table))
    }
}

/// Read a retrieval artifact written by the `retrieve` stage.
pub fn read_retrieval(path: &Path) -> Result<Vec<RetrievalRecord>> {
    read_jsonl(path)
}

/// Read a prediction artifact written by the `infer` stage.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn meta_path_appends_suffix() {
        assert_eq!(meta_path(Path::new("/a/index.bin")), PathBuf::from("/a/index.bin.meta.json"));
        assert_eq!(meta_path(Path::new("reward")), PathBuf::from("reward.meta.json"));
    }

    #[test]
    fn directory_hash_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("ck");
        std::fs::create_dir(&d).unwrap();
        std::fs::write(d.join("a.json"), "1").unwrap();
        let h1 = hash_artifact(&d).unwrap();
        std::fs::write(d.join("a.json"), "2").unwrap();
        assert_ne!(h1, hash_artifact(&d).unwrap());
    }

    #[test]
    fn failed_stage_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.txt");
        {
            let mut out = Outputs::new();
            out.add_bytes(target.clone(), b"partial").unwrap();
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        assert!(!target.exists());
    }
}

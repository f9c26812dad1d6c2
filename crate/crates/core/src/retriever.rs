//! Shared-weight bi-encoder retriever and the dense demonstration index.
//!
//! Queries and candidates pass through the same encoder; they differ only in
//! rendering. Training mixes KL distillation from a teacher distribution over
//! each query's positive-plus-negatives list with Info-NCE over in-batch
//! positives.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{keyword_enhance, linearize};
use crate::corpus::{CandidatePool, IESample};
use crate::error::{Error, Result};
use crate::nn::{softmax, tokenize, Adam, ConvEncoder, ConvEncoderConfig, Graph, Matrix, ParamId, ParamStore, Var, Vocab};
use crate::reward::{render_enhanced, CrossScorer, TrainLog};
use crate::scoring::ScoredCandidateSet;
use crate::text::sha256_hex;
use crate::{derive_seed, sort_ranked, ScoredId};

pub const MAX_ENCODER_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryRendering {
    /// Task, schema, optional event line, and input.
    #[default]
    TaskSchemaInput,
    /// The bare input text.
    InputOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiEncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub max_len: usize,
    pub query_rendering: QueryRendering,
    /// Candidates are keyword-enhanced before encoding.
    pub keyword: bool,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 1,
            max_len: MAX_ENCODER_TOKENS,
            query_rendering: QueryRendering::TaskSchemaInput,
            keyword: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub config: BiEncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    encoder: ConvEncoder,
    proj: ParamId,
}

/// Token ids of `text`, keeping everything from `tail_from` onward and
/// trimming the earlier part from its end when over `max_len`.
fn truncated_ids(vocab: &Vocab, text: &str, tail_from: Option<usize>, max_len: usize) -> Vec<usize> {
    let (head, tail) = match tail_from {
        Some(p) => (&text[..p], &text[p..]),
        None => (text, ""),
    };
    let mut ids: Vec<usize> = tokenize(head).iter().map(|t| vocab.id(t)).collect();
    let mut tail_ids: Vec<usize> = tokenize(tail).iter().map(|t| vocab.id(t)).collect();
    if ids.len() + tail_ids.len() > max_len {
        tail_ids.truncate(max_len);
        ids.truncate(max_len - tail_ids.len());
    }
    ids.extend(tail_ids);
    if ids.is_empty() {
        ids.push(0);
    }
    ids
}

impl BiEncoder {
    pub fn init(vocab: Vocab, config: BiEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "retriever-init"));
        let mut params = ParamStore::new();
        let encoder = ConvEncoder::init(
            &mut params,
            "bi",
            ConvEncoderConfig {
                vocab_size: vocab.len(),
                dim: config.dim,
                layers: config.layers,
            },
            &mut rng,
        );
        let bound = (3.0 / config.dim as f64).sqrt();
        let proj = params.add("bi.proj", Matrix::uniform(config.dim, config.dim, bound, &mut rng));
        Self {
            config,
            vocab,
            params,
            encoder,
            proj,
        }
    }

    pub fn query_text(&self, sample: &IESample) -> String {
        match self.config.query_rendering {
            QueryRendering::TaskSchemaInput => linearize(sample, false).text,
            QueryRendering::InputOnly => sample.input.clone(),
        }
    }

    pub fn candidate_text(&self, sample: &IESample) -> String {
        if self.config.keyword {
            linearize(&keyword_enhance(sample), true).text
        } else {
            linearize(sample, true).text
        }
    }

    pub fn query_ids(&self, sample: &IESample) -> Vec<usize> {
        truncated_ids(&self.vocab, &self.query_text(sample), None, self.config.max_len)
    }

    /// The output section is kept whole; the input is trimmed first.
    pub fn candidate_ids(&self, sample: &IESample) -> Vec<usize> {
        let text = self.candidate_text(sample);
        let tail = text.rfind("\nOutput: ");
        truncated_ids(&self.vocab, &text, tail, self.config.max_len)
    }

    /// Unit-norm embedding row `[1, dim]`.
    pub fn encode_var(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let states = self.encoder.states(g, ids, None);
        let pooled = g.mean_rows(states);
        let proj = g.param(self.proj);
        let h = g.matmul(pooled, proj);
        g.normalize_rows(h)
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_var(&mut g, ids);
        g.value(v).data.clone()
    }

    pub fn encode_query(&self, sample: &IESample) -> Vec<f64> {
        self.encode_ids(&self.query_ids(sample))
    }

    pub fn encode_candidate(&self, sample: &IESample) -> Vec<f64> {
        self.encode_ids(&self.candidate_ids(sample))
    }

    /// Hash of parameters, vocabulary and config; indexes record it.
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.params).expect("serializable");
        bytes.extend(serde_json::to_vec(self.vocab.tokens()).expect("serializable"));
        bytes.extend(serde_json::to_vec(&self.config).expect("serializable"));
        sha256_hex(&bytes)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("params.json"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, serde_json::to_vec_pretty(&self.config)?).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join("config.json");
        let config: BiEncoderConfig = serde_json::from_slice(&std::fs::read(&cfg).map_err(|e| Error::io(&cfg, e))?)?;
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let params = ParamStore::load(&dir.join("params.json"))?;
        let bad = || Error::Artifact("retriever checkpoint does not match its config".into());
        let encoder = ConvEncoder::bind(
            &params,
            "bi",
            ConvEncoderConfig {
                vocab_size: vocab.len(),
                dim: config.dim,
                layers: config.layers,
            },
        )
        .ok_or_else(bad)?;
        let proj = params.id("bi.proj").ok_or_else(bad)?;
        Ok(Self {
            config,
            vocab,
            params,
            encoder,
            proj,
        })
    }
}

pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean Info-NCE over a batch whose negatives are the other queries' positives.
pub fn contrastive_loss(queries: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if queries.len() < 2 || queries.len() != positives.len() {
        return Err(Error::Invalid(format!(
            "contrastive loss needs a batch of at least 2 aligned pairs, got {} queries and {} positives",
            queries.len(),
            positives.len()
        )));
    }
    let total: f64 = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let logits: Vec<f64> = positives.iter().map(|p| similarity(q, p) / tau).collect();
            crate::nn::log_sum_exp(&logits) - logits[i]
        })
        .sum();
    Ok(total / queries.len() as f64)
}

/// Graph form of [`contrastive_loss`] over row-stacked `[B, d]` matrices.
pub fn contrastive_loss_graph(g: &mut Graph, queries: Var, positives: Var, tau: f64) -> Var {
    let b = g.value(queries).rows;
    let sims = g.matmul_t(queries, positives);
    let logits = g.scale(sims, 1.0 / tau);
    let ls = g.log_softmax_rows(logits);
    let eye = g.constant(Matrix::identity(b));
    let diag = g.mul(ls, eye);
    let total = g.sum(diag);
    g.scale(total, -1.0 / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// KL(teacher ‖ student)
    #[default]
    TeacherStudent,
    /// KL(student ‖ teacher)
    StudentTeacher,
}

const LOG_FLOOR: f64 = 1e-300;

/// KL divergence between the teacher vector and `softmax(sims / tau_r)`.
pub fn distill_loss(sims: &[f64], teacher: &[f64], tau_r: f64, direction: KlDirection) -> f64 {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau_r).collect();
    let student = softmax(&logits);
    let kl = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi.ln() - qi.max(LOG_FLOOR).ln()))
            .sum()
    };
    let v = match direction {
        KlDirection::TeacherStudent => kl(teacher, &student),
        KlDirection::StudentTeacher => kl(&student, teacher),
    };
    v.max(0.0)
}

/// Graph form of [`distill_loss`]; `sims` is a `[1, m]` row.
pub fn distill_loss_graph(g: &mut Graph, sims: Var, teacher: &[f64], tau_r: f64, direction: KlDirection) -> Var {
    let logits = g.scale(sims, 1.0 / tau_r);
    let log_student = g.log_softmax_rows(logits);
    match direction {
        KlDirection::TeacherStudent => {
            let entropy_term: f64 = teacher.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
            let t = g.constant(Matrix::row_vector(teacher.to_vec()));
            let cross = g.mul(t, log_student);
            let cross = g.sum(cross);
            let neg = g.scale(cross, -1.0);
            let c = g.constant(Matrix::scalar(entropy_term));
            g.add(neg, c)
        }
        KlDirection::StudentTeacher => {
            let student = g.softmax_rows(logits);
            let log_t = g.constant(Matrix::row_vector(teacher.iter().map(|p| p.max(LOG_FLOOR).ln()).collect()));
            let diff = g.sub(log_student, log_t);
            let terms = g.mul(student, diff);
            g.sum(terms)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_keyword: bool,
    pub no_reward: bool,
    pub no_distill: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub alpha: f64,
    pub tau: f64,
    pub tau_r: f64,
    pub kl_direction: KlDirection,
    #[serde(flatten)]
    pub model: BiEncoderConfig,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 128,
            steps: 3000,
            alpha: 0.2,
            tau: 0.05,
            tau_r: 0.05,
            kl_direction: KlDirection::TeacherStudent,
            model: BiEncoderConfig::default(),
        }
    }
}

/// Which loss terms a configuration trains, with the weight on the
/// contrastive term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPlan {
    pub distill: bool,
    pub contrastive_weight: f64,
}

impl LossPlan {
    pub fn new(cfg: &RetrieverTrainConfig, flags: &AblationFlags) -> Result<Self> {
        if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a non-negative number, got {}", cfg.alpha)));
        }
        if cfg.tau <= 0.0 || cfg.tau_r <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if flags.no_distill {
            if cfg.alpha == 0.0 {
                return Err(Error::Config(
                    "--no-distill with alpha = 0 leaves no loss term to train".into(),
                ));
            }
            return Ok(Self {
                distill: false,
                contrastive_weight: 1.0,
            });
        }
        Ok(Self {
            distill: true,
            contrastive_weight: cfg.alpha,
        })
    }

    /// `L = distill + weight · contrastive`, with absent terms contributing 0.
    pub fn combine(&self, distill: f64, contrastive: f64) -> f64 {
        let d = if self.distill { distill } else { 0.0 };
        d + self.contrastive_weight * contrastive
    }
}

/// Teacher signal for the distillation term.
pub enum Teacher<'a> {
    Reward(&'a CrossScorer),
    /// Softmax of the scoring-model preferences recorded in the scored sets.
    LlmScores,
    None,
}

struct PreparedQuery {
    query_ids: Vec<usize>,
    positives: Vec<(Vec<usize>, f64)>,
    negatives: Vec<Vec<usize>>,
    negative_scores: Vec<f64>,
}

fn prepare(
    encoder: &BiEncoder,
    sets: &[ScoredCandidateSet],
    pool: &CandidatePool,
    teacher: &Teacher,
    keyword: bool,
) -> Result<Vec<PreparedQuery>> {
    let lookup = |id: &str| {
        pool.get(id)
            .ok_or_else(|| Error::Artifact(format!("scored candidates reference unknown id {id}")))
    };
    sets.par_iter()
        .filter(|s| !s.positives.is_empty())
        .map(|s| {
            let query = lookup(&s.query_id)?;
            let llm_score = |id: &str| {
                s.candidates
                    .iter()
                    .find(|c| c.id == id)
                    .map(|c| c.score)
                    .ok_or_else(|| Error::Artifact(format!("{id} missing from scored list of {}", s.query_id)))
            };
            let query_enh = render_enhanced(query, keyword);
            let teacher_score = |id: &str| -> Result<f64> {
                match teacher {
                    Teacher::Reward(scorer) => Ok(scorer.score(&query_enh, &render_enhanced(lookup(id)?, keyword))),
                    Teacher::LlmScores => llm_score(id),
                    Teacher::None => Ok(0.0),
                }
            };
            Ok(PreparedQuery {
                query_ids: encoder.query_ids(query),
                positives: s
                    .positives
                    .iter()
                    .map(|id| Ok((encoder.candidate_ids(lookup(id)?), teacher_score(id)?)))
                    .collect::<Result<_>>()?,
                negatives: s
                    .negatives
                    .iter()
                    .map(|id| Ok(encoder.candidate_ids(lookup(id)?)))
                    .collect::<Result<_>>()?,
                negative_scores: s.negatives.iter().map(|id| teacher_score(id)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Train a bi-encoder from random initialization.
pub fn train_retriever(
    sets: &[ScoredCandidateSet],
    pool: &CandidatePool,
    teacher: Teacher,
    vocab: Vocab,
    cfg: &RetrieverTrainConfig,
    flags: &AblationFlags,
    seed: u64,
) -> Result<(BiEncoder, TrainLog)> {
    let plan = LossPlan::new(cfg, flags)?;
    if plan.distill && matches!(teacher, Teacher::None) {
        return Err(Error::Config("distillation enabled but no teacher supplied".into()));
    }
    let contrastive = plan.contrastive_weight > 0.0;
    if contrastive && cfg.batch_size < 2 {
        return Err(Error::Config("contrastive training needs batch_size >= 2".into()));
    }
    let mut model_cfg = cfg.model;
    model_cfg.keyword = !flags.no_keyword;
    let mut encoder = BiEncoder::init(vocab, model_cfg, seed);
    let prepared = prepare(&encoder, sets, pool, &teacher, model_cfg.keyword)?;
    if prepared.is_empty() || (contrastive && prepared.len() < 2) {
        return Err(Error::Invalid(format!(
            "retriever training needs at least {} scored queries, found {}",
            if contrastive { 2 } else { 1 },
            prepared.len()
        )));
    }
    let batch_size = cfg.batch_size.min(prepared.len());
    let mut opt = Adam::new(&encoder.params, cfg.learning_rate);
    let mut log = TrainLog::default();

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("retriever-order/{epoch}")));
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            let qi = order[cursor];
            cursor += 1;
            if batch.iter().any(|&(q, _)| q == qi) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("retriever-positive/{epoch}/{qi}")));
            let pi = (0..prepared[qi].positives.len()).collect::<Vec<_>>();
            batch.push((qi, *pi.choose(&mut rng).expect("non-empty")));
        }

        let (loss, grads) = {
            let mut g = Graph::new(&encoder.params);
            let mut qs = Vec::with_capacity(batch.len());
            let mut ps = Vec::with_capacity(batch.len());
            let mut distills = Vec::new();
            for &(qi, pi) in &batch {
                let pq = &prepared[qi];
                let q = encoder.encode_var(&mut g, &pq.query_ids);
                let (pos_ids, pos_score) = &pq.positives[pi];
                let p = encoder.encode_var(&mut g, pos_ids);
                qs.push(q);
                ps.push(p);
                if plan.distill {
                    let mut rows = vec![p];
                    rows.extend(pq.negatives.iter().map(|n| encoder.encode_var(&mut g, n)));
                    let cands = g.stack_rows(&rows);
                    let sims = g.matmul_t(q, cands);
                    let mut scores = vec![*pos_score];
                    scores.extend_from_slice(&pq.negative_scores);
                    distills.push(distill_loss_graph(&mut g, sims, &crate::reward::distribution(&scores), cfg.tau_r, cfg.kl_direction));
                }
            }
            let mut terms = Vec::new();
            if plan.distill {
                let row = g.concat_cols(&distills);
                let total = g.sum(row);
                terms.push(g.scale(total, 1.0 / distills.len() as f64));
            }
            if contrastive {
                let q = g.stack_rows(&qs);
                let p = g.stack_rows(&ps);
                let c = contrastive_loss_graph(&mut g, q, p, cfg.tau);
                terms.push(g.scale(c, plan.contrastive_weight));
            }
            let loss = if terms.len() == 2 { g.add(terms[0], terms[1]) } else { terms[0] };
            (g.value(loss).item(), g.backward(loss))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "retriever training step {step}: loss {loss}, gradient norm {}",
                grads.global_norm()
            )));
        }
        log.losses.push((step, loss));
        if step % 50 == 0 || step == cfg.steps {
            log::info!("retriever step {step}/{}: loss {loss:.6}", cfg.steps);
        }
        opt.step(&mut encoder.params, &grads);
    }
    Ok((encoder, log))
}

const INDEX_MAGIC: &[u8; 4] = b"DSIX";
const INDEX_VERSION: u32 = 1;

/// Unit-normalized candidate embeddings, row-aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedIndex {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `[ids.len(), dim]`.
    pub vectors: Vec<f32>,
    pub fingerprint: String,
}

impl EncodedIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.vectors.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |what: &str| Error::Artifact(format!("index file: {what}"));
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = read_u32(take(4)?);
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = read_u32(take(4)?) as usize;
        let count = read_u32(take(4)?) as usize;
        let fp_len = read_u32(take(4)?) as usize;
        let fingerprint = String::from_utf8(take(fp_len)?.to_vec()).map_err(|_| bad("fingerprint not utf-8"))?;
        let raw = take(dim * count * 4)?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(take(4)?) as usize;
            ids.push(String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("id not utf-8"))?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Encode every pool sample as a candidate, in pool order.
pub fn build_index(encoder: &BiEncoder, pool: &CandidatePool) -> EncodedIndex {
    let rows: Vec<Vec<f64>> = pool.samples().par_iter().map(|s| encoder.encode_candidate(s)).collect();
    EncodedIndex {
        dim: encoder.config.dim,
        ids: pool.ids().map(str::to_string).collect(),
        vectors: rows.into_iter().flatten().map(|v| v as f32).collect(),
        fingerprint: encoder.fingerprint(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<ScoredId>,
    pub warning: Option<String>,
}

/// Exact cosine top-k over the index, descending, ties by ascending id.
pub fn retrieve_vector(index: &EncodedIndex, query: &[f64], k: usize, exclude: Option<&str>) -> Retrieval {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut hits: Vec<ScoredId> = index
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| Some(id.as_str()) != exclude)
        .map(|(row, id)| {
            let v = index.vector(row);
            let dot: f64 = v.iter().zip(query).map(|(a, b)| *a as f64 * b).sum();
            let vn = v.iter().map(|a| (*a as f64) * (*a as f64)).sum::<f64>().sqrt();
            let denom = qn * vn;
            ScoredId::new(id.clone(), if denom > 0.0 { dot / denom } else { 0.0 })
        })
        .collect();
    sort_ranked(&mut hits);
    let warning = (k > hits.len()).then(|| {
        format!(
            "requested k = {k} but only {} candidates are available; returning all of them",
            hits.len()
        )
    });
    hits.truncate(k);
    Retrieval { hits, warning }
}

/// Top-k demonstrations for `query`, excluding the query itself.
pub fn retrieve(index: &EncodedIndex, encoder: &BiEncoder, query: &IESample, k: usize) -> Result<Retrieval> {
    if index.fingerprint != encoder.fingerprint() {
        return Err(Error::Artifact(
            "index fingerprint does not match the retriever checkpoint; rebuild the index".into(),
        ));
    }
    if index.dim != encoder.config.dim {
        return Err(Error::Artifact("index dimension does not match the retriever".into()));
    }
    let r = retrieve_vector(index, &encoder.encode_query(query), k, Some(&query.id));
    if let Some(w) = &r.warning {
        log::warn!("{w}");
    }
    Ok(r)
}

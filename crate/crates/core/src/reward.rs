//! Keyword-enhanced cross-encoder reward model.
//!
//! The scorer reads a packed `[CLS] query [SEP] candidate` sequence (both
//! sides rendered with their gold output and keyword tags), lets candidate
//! tokens attend over query tokens, and maps pooled features to one scalar.
//! It is trained to rank each query's sampled positive above its fixed
//! negatives and then serves as the teacher for retriever distillation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{keyword_enhance, linearize};
use crate::corpus::{CandidatePool, IESample};
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, softmax, Adam, ConvEncoder, ConvEncoderConfig, Graph, Matrix, ParamId, ParamStore, Var, Vocab, CLS, SEP};
use crate::scoring::ScoredCandidateSet;
use crate::derive_seed;

pub const MAX_PAIR_TOKENS: usize = 512;

/// Rendering used on both sides of the pair: input plus gold output, with
/// keyword tags unless disabled.
pub fn render_enhanced(sample: &IESample, keyword: bool) -> String {
    if keyword {
        linearize(&keyword_enhance(sample), true).text
    } else {
        linearize(sample, true).text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardExample {
    pub query_id: String,
    pub query_enh: String,
    pub positive_id: String,
    pub positive_enh: String,
    pub negative_ids: Vec<String>,
    pub negatives_enh: Vec<String>,
}

/// One example per scored query, with the positive drawn uniformly from the
/// query's positives under a per-epoch seed stream.
pub fn build_reward_examples(
    sets: &[ScoredCandidateSet],
    pool: &CandidatePool,
    seed: u64,
    epoch: usize,
    keyword: bool,
) -> Result<Vec<RewardExample>> {
    let lookup = |id: &str| {
        pool.get(id)
            .ok_or_else(|| Error::Artifact(format!("scored candidates reference unknown id {id}")))
    };
    sets.iter()
        .filter(|s| !s.positives.is_empty())
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("reward/{epoch}/{}", s.query_id)));
            let positive_id = s.positives.choose(&mut rng).expect("non-empty").clone();
            Ok(RewardExample {
                query_id: s.query_id.clone(),
                query_enh: render_enhanced(lookup(&s.query_id)?, keyword),
                positive_enh: render_enhanced(lookup(&positive_id)?, keyword),
                positive_id,
                negative_ids: s.negatives.clone(),
                negatives_enh: s
                    .negatives
                    .iter()
                    .map(|id| Ok(render_enhanced(lookup(id)?, keyword)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// `-ln softmax(pos ∪ negs)[pos]`.
pub fn reward_loss(pos: f64, negs: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    (log_sum_exp(&all) - pos).max(0.0)
}

/// Graph form of [`reward_loss`] over scalar score nodes.
pub fn reward_loss_graph(g: &mut Graph, pos: Var, negs: &[Var]) -> Var {
    let mut parts = vec![pos];
    parts.extend_from_slice(negs);
    let row = g.concat_cols(&parts);
    let ls = g.log_softmax_rows(row);
    let p = g.pick(ls, 0, 0);
    g.scale(p, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossScorerConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl Default for CrossScorerConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 1,
            hidden: 32,
            max_len: MAX_PAIR_TOKENS,
        }
    }
}

#[derive(Debug, Clone)]
struct CrossNet {
    encoder: ConvEncoder,
    segment: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Trainable text-pair scorer.
#[derive(Debug, Clone)]
pub struct CrossScorer {
    pub config: CrossScorerConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    net: CrossNet,
}

/// `[CLS] a [SEP] b` token ids and the length of the `a` side, with the `b`
/// side trimmed first.
fn pack(vocab: &Vocab, a: &str, b: &str, max_len: usize) -> (Vec<usize>, usize) {
    let mut ia = vocab.encode(a);
    let mut ib = vocab.encode(b);
    let room = max_len.saturating_sub(2).max(2);
    if ia.len() + ib.len() > room {
        let keep_b = room.saturating_sub(ia.len()).max(1).min(ib.len());
        ib.truncate(keep_b);
        ia.truncate(room - ib.len());
    }
    let mut ids = Vec::with_capacity(ia.len() + ib.len() + 2);
    ids.push(vocab.id(CLS));
    ids.extend(&ia);
    ids.push(vocab.id(SEP));
    ids.extend(&ib);
    (ids, ia.len())
}

impl CrossScorer {
    pub fn init(vocab: Vocab, config: CrossScorerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward-init"));
        let mut params = ParamStore::new();
        let d = config.dim;
        let encoder = ConvEncoder::init(
            &mut params,
            "cross",
            ConvEncoderConfig {
                vocab_size: vocab.len(),
                dim: d,
                layers: config.layers,
            },
            &mut rng,
        );
        let segment = params.add("cross.segment", Matrix::uniform(2, d, 0.5, &mut rng));
        let b1 = (6.0 / (4 * d + config.hidden) as f64).sqrt();
        let w1 = params.add("head.w1", Matrix::uniform(4 * d, config.hidden, b1, &mut rng));
        let bias1 = params.add("head.b1", Matrix::zeros(1, config.hidden));
        let b2 = (6.0 / (config.hidden + 1) as f64).sqrt();
        let w2 = params.add("head.w2", Matrix::uniform(config.hidden, 1, b2, &mut rng));
        let bias2 = params.add("head.b2", Matrix::zeros(1, 1));
        Self {
            config,
            vocab,
            params,
            net: CrossNet {
                encoder,
                segment,
                w1,
                b1: bias1,
                w2,
                b2: bias2,
            },
        }
    }

    fn bind(vocab: Vocab, config: CrossScorerConfig, params: ParamStore) -> Result<Self> {
        let bad = || Error::Artifact("reward checkpoint does not match its config".into());
        let encoder = ConvEncoder::bind(
            &params,
            "cross",
            ConvEncoderConfig {
                vocab_size: vocab.len(),
                dim: config.dim,
                layers: config.layers,
            },
        )
        .ok_or_else(bad)?;
        let id = |n: &str| params.id(n).ok_or_else(bad);
        let net = CrossNet {
            encoder,
            segment: id("cross.segment")?,
            w1: id("head.w1")?,
            b1: id("head.b1")?,
            w2: id("head.w2")?,
            b2: id("head.b2")?,
        };
        Ok(Self {
            config,
            vocab,
            params,
            net,
        })
    }

    /// Scalar score node for the pair `(a, b)`.
    pub fn score_var(&self, g: &mut Graph, a: &str, b: &str) -> Var {
        score_with(&self.net, &self.vocab, &self.config, g, a, b)
    }

    pub fn score(&self, a: &str, b: &str) -> f64 {
        let mut g = Graph::new(&self.params);
        let v = self.score_var(&mut g, a, b);
        g.value(v).item()
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
        let config: CrossScorerConfig =
            serde_json::from_slice(&std::fs::read(&cfg).map_err(|e| Error::io(&cfg, e))?)?;
        Self::bind(
            Vocab::load(&dir.join("vocab.json"))?,
            config,
            ParamStore::load(&dir.join("params.json"))?,
        )
    }
}

fn score_with(net: &CrossNet, vocab: &Vocab, config: &CrossScorerConfig, g: &mut Graph, a: &str, b: &str) -> Var {
    let (ids, a_len) = pack(vocab, a, b, config.max_len);
    let n = ids.len();
    let segments: Vec<usize> = (0..n).map(|i| usize::from(i > a_len + 1)).collect();
    let seg = g.param(net.segment);
    let seg = g.gather(seg, &segments);
    let states = net.encoder.states(g, &ids, Some(seg));

    let qa = g.slice_rows(states, 0, a_len + 1);
    let qb = if n > a_len + 2 {
        g.slice_rows(states, a_len + 2, n)
    } else {
        g.slice_rows(states, a_len + 1, a_len + 2)
    };
    let att = g.matmul_t(qb, qa);
    let att = g.scale(att, 1.0 / (config.dim as f64).sqrt());
    let att = g.softmax_rows(att);
    let ctx = g.matmul(att, qa);

    let abar = g.mean_rows(qa);
    let bbar = g.mean_rows(qb);
    let inter = g.mul(qb, ctx);
    let inter = g.mean_rows(inter);
    let prod = g.mul(abar, bbar);
    let feats = g.concat_cols(&[abar, bbar, inter, prod]);

    let w1 = g.param(net.w1);
    let b1 = g.param(net.b1);
    let w2 = g.param(net.w2);
    let b2 = g.param(net.b2);
    let h = g.matmul(feats, w1);
    let h = g.add_row(h, b1);
    let h = g.tanh(h);
    let s = g.matmul(h, w2);
    g.add_row(s, b2)
}

/// Temperature-1 softmax turning reward scores into a teacher distribution.
pub fn distribution(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

/// [`distribution`] over the scorer's scores for each candidate.
pub fn reward_distribution(scorer: &CrossScorer, query_enh: &str, candidates: &[String]) -> Vec<f64> {
    let scores: Vec<f64> = candidates.iter().map(|c| scorer.score(query_enh, c)).collect();
    distribution(&scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub model: CrossScorerConfig,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 64,
            steps: 3000,
            model: CrossScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.losses {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Mean [`reward_loss`] of `scorer` over `examples`.
pub fn mean_reward_loss(scorer: &CrossScorer, examples: &[RewardExample]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let pos = scorer.score(&ex.query_enh, &ex.positive_enh);
            let negs: Vec<f64> = ex.negatives_enh.iter().map(|n| scorer.score(&ex.query_enh, n)).collect();
            reward_loss(pos, &negs)
        })
        .sum();
    total / examples.len().max(1) as f64
}

/// Train from random initialization over epochs of freshly sampled examples.
pub fn train_reward(
    sets: &[ScoredCandidateSet],
    pool: &CandidatePool,
    vocab: Vocab,
    cfg: &RewardTrainConfig,
    seed: u64,
    keyword: bool,
) -> Result<(CrossScorer, TrainLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("reward batch_size must be positive".into()));
    }
    let first = build_reward_examples(sets, pool, seed, 0, keyword)?;
    if first.is_empty() {
        return Err(Error::Invalid("reward training needs at least one example".into()));
    }
    let mut scorer = CrossScorer::init(vocab, cfg.model, seed);
    let mut opt = Adam::new(&scorer.params, cfg.learning_rate);
    let mut log = TrainLog::default();

    let mut epoch = 0;
    let mut order: Vec<RewardExample> = first;
    let mut cursor = 0;
    let shuffle = |ex: &mut Vec<RewardExample>, epoch: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("reward-order/{epoch}")));
        ex.shuffle(&mut rng);
    };
    shuffle(&mut order, epoch);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(order.len()) {
            if cursor == order.len() {
                epoch += 1;
                order = build_reward_examples(sets, pool, seed, epoch, keyword)?;
                shuffle(&mut order, epoch);
                cursor = 0;
            }
            batch.push(order[cursor].clone());
            cursor += 1;
        }
        let (loss, grads) = {
            let net = &scorer.net;
            let mut g = Graph::new(&scorer.params);
            let mut losses = Vec::with_capacity(batch.len());
            for ex in &batch {
                let pos = score_with(net, &scorer.vocab, &scorer.config, &mut g, &ex.query_enh, &ex.positive_enh);
                let negs: Vec<Var> = ex
                    .negatives_enh
                    .iter()
                    .map(|n| score_with(net, &scorer.vocab, &scorer.config, &mut g, &ex.query_enh, n))
                    .collect();
                losses.push(reward_loss_graph(&mut g, pos, &negs));
            }
            let stacked = g.concat_cols(&losses);
            let total = g.sum(stacked);
            let mean = g.scale(total, 1.0 / losses.len() as f64);
            (g.value(mean).item(), g.backward(mean))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "reward training step {step}: loss {loss}, gradient norm {}",
                grads.global_norm()
            )));
        }
        log.losses.push((step, loss));
        if step % 50 == 0 || step == cfg.steps {
            log::info!("reward step {step}/{}: loss {loss:.6}", cfg.steps);
        }
        opt.step(&mut scorer.params, &grads);
    }
    Ok((scorer, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((reward_loss(0.0, &[0.0, 0.0]) - 3f64.ln()).abs() < 1e-9);
        assert!(reward_loss(30.0, &[0.0, 0.0]) < 1e-12);
        assert!((reward_loss(1.0, &[0.0]) - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn loss_is_shift_invariant() {
        let a = reward_loss(0.3, &[1.2, -0.4]);
        let b = reward_loss(100.3, &[101.2, 99.6]);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn pack_trims_candidate_first() {
        let v = Vocab::build(["a b c d e f"], 1);
        let (ids, a_len) = pack(&v, "a b c", "d e f", 7);
        assert_eq!(a_len, 3);
        assert_eq!(ids.len(), 7);
        assert_eq!(ids[5], v.id("d"));
        let (ids, a_len) = pack(&v, "a b c d e", "f", 5);
        assert_eq!((ids.len(), a_len), (5, 2));
    }

    #[test]
    fn distribution_examples() {
        let v = Vocab::build(["x y"], 1);
        let s = CrossScorer::init(v, CrossScorerConfig { dim: 4, layers: 1, hidden: 4, max_len: 64 }, 1);
        assert_eq!(reward_distribution(&s, "x", &["y".into()]), vec![1.0]);
        let p = reward_distribution(&s, "x", &["y".into(), "y".into()]);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = Vocab::build(["x y z"], 1);
        let s = CrossScorer::init(v, CrossScorerConfig { dim: 4, layers: 2, hidden: 3, max_len: 64 }, 9);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let t = CrossScorer::load(dir.path()).unwrap();
        assert_eq!(s.score("x y", "z"), t.score("x y", "z"));
    }
}

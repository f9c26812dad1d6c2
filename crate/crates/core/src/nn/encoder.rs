use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Matrix, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
}

/// Token embeddings followed by residual width-3 convolution layers.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub config: ConvEncoderConfig,
    embedding: ParamId,
    layers: Vec<(ParamId, ParamId)>,
}

impl ConvEncoder {
    pub fn init(store: &mut ParamStore, prefix: &str, config: ConvEncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let embedding = store.add(
            format!("{prefix}.embedding"),
            Matrix::uniform(config.vocab_size, d, 1.0, rng),
        );
        let bound = (6.0 / (4 * d) as f64).sqrt();
        let layers = (0..config.layers)
            .map(|l| {
                let w = store.add(format!("{prefix}.conv{l}.weight"), Matrix::uniform(3 * d, d, bound, rng));
                let b = store.add(format!("{prefix}.conv{l}.bias"), Matrix::zeros(1, d));
                (w, b)
            })
            .collect();
        Self {
            config,
            embedding,
            layers,
        }
    }

    /// Re-attach to parameters registered by [`ConvEncoder::init`].
    pub fn bind(store: &ParamStore, prefix: &str, config: ConvEncoderConfig) -> Option<Self> {
        let embedding = store.id(&format!("{prefix}.embedding"))?;
        let e = store.get(embedding);
        if e.rows != config.vocab_size || e.cols != config.dim {
            return None;
        }
        let layers = (0..config.layers)
            .map(|l| {
                Some((
                    store.id(&format!("{prefix}.conv{l}.weight"))?,
                    store.id(&format!("{prefix}.conv{l}.bias"))?,
                ))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            config,
            embedding,
            layers,
        })
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Token states `[ids.len(), dim]`. `extra`, when given, is added to the
    /// embeddings before the first layer.
    pub fn states(&self, g: &mut Graph, ids: &[usize], extra: Option<Var>) -> Var {
        assert!(!ids.is_empty(), "encoding an empty token sequence");
        let emb = g.param(self.embedding);
        let mut x = g.gather(emb, ids);
        if let Some(e) = extra {
            x = g.add(x, e);
        }
        for &(w, b) in &self.layers {
            let down = g.shift_down(x);
            let up = g.shift_up(x);
            let window = g.concat_cols(&[down, x, up]);
            let w = g.param(w);
            let b = g.param(b);
            let h = g.matmul(window, w);
            let h = g.add_row(h, b);
            let h = g.tanh(h);
            x = g.add(x, h);
        }
        x
    }
}

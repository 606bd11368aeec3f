//! Prompt encoding and the cross-attention primitive shared by the denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt(String);

impl Prompt {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("prompt must not be empty"));
        }
        Ok(Self(text))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

/// Token embeddings, shape `(tokens, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    values: Tensor,
}

impl TextEmbedding {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [l, d] if *l >= 1 && *d >= 1 => {}
            s => return Err(Error::shape(format!("text embedding must be (L, d), got {s:?}"))),
        }
        if !values.all_finite() {
            return Err(Error::invalid("text embedding has non-finite entries"));
        }
        Ok(Self { values })
    }

    /// The empty-prompt branch for classifier-free guidance: all zeros.
    pub fn unconditional(tokens: usize, dim: usize) -> Self {
        Self {
            values: Tensor::zeros(vec![tokens, dim]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

fn token_vector(token: &str, position: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((position as u64).to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Deterministic desk-scale text encoder.
///
/// Each whitespace token (and its position) seeds a pseudo-random unit
/// vector; the sequence is truncated or padded with a pad token to `tokens`
/// rows.
pub fn embed_prompt(prompt: &Prompt, tokens: usize, dim: usize, seed: u64) -> Result<TextEmbedding> {
    if tokens == 0 || dim == 0 {
        return Err(Error::config("embedding tokens and dim must be >= 1"));
    }
    let words: Vec<&str> = prompt.text().split_whitespace().collect();
    let mut data = Vec::with_capacity(tokens * dim);
    for pos in 0..tokens {
        let word = words.get(pos).copied().unwrap_or(PAD_TOKEN);
        data.extend(token_vector(word, pos, dim, seed));
    }
    TextEmbedding::new(Tensor::new(vec![tokens, dim], data)?)
}

/// Query/key/value projections of one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
}

impl AttentionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let (&[_, dq], &[_, dk], &[_, dv]) = (w_q.shape(), w_k.shape(), w_v.shape()) else {
            return Err(Error::shape("attention projections must be matrices"));
        };
        if dq == 0 || dq != dk || dk != dv {
            return Err(Error::shape(format!(
                "projection output dims must agree and be >= 1: {dq}, {dk}, {dv}"
            )));
        }
        if w_k.shape()[0] != w_v.shape()[0] {
            return Err(Error::shape("W_K and W_V must share the text dimension"));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn random(feature_dim: usize, text_dim: usize, key_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    s * n
                })
                .collect();
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        Self {
            w_q: mat(feature_dim, key_dim),
            w_k: mat(text_dim, key_dim),
            w_v: mat(text_dim, key_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.w_k.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    /// Graph form. Returns `(output, map)` with shapes `(queries, d)` and
    /// `(queries, tokens)`.
    pub fn attend(&self, g: &mut Graph, features: Var, context: Var) -> (Var, Var) {
        let wq = g.constant(self.w_q.clone());
        let wk = g.constant(self.w_k.clone());
        let wv = g.constant(self.w_v.clone());
        let q = g.matmul(features, wq);
        let k = g.matmul(context, wk);
        let v = g.matmul(context, wv);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (self.key_dim() as f64).sqrt());
        let map = g.softmax_rows(scores);
        let out = g.matmul(map, v);
        (out, map)
    }
}

/// `softmax((F W_Q)(C W_K)ᵀ / √d) · (C W_V)`, returning the output and the map.
pub fn cross_attention(
    features: &Tensor,
    context: &TextEmbedding,
    weights: &AttentionWeights,
) -> Result<(Tensor, Tensor)> {
    let [_, fdim] = features.shape() else {
        return Err(Error::shape("features must be (queries, feature_dim)"));
    };
    if *fdim != weights.feature_dim() {
        return Err(Error::shape(format!(
            "feature dim {fdim} vs W_Q rows {}",
            weights.feature_dim()
        )));
    }
    if context.dim() != weights.text_dim() {
        return Err(Error::shape(format!(
            "text dim {} vs W_K rows {}",
            context.dim(),
            weights.text_dim()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let c = g.constant(context.values().clone());
    let (out, map) = weights.attend(&mut g, f, c);
    Ok((g.value(out).clone(), g.value(map).clone()))
}

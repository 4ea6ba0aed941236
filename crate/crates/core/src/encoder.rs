//! Multi-view aggregation: a linear stem embeds K views of one sample, a
//! Transformer encoder fuses them, and the output at a learnt class token is
//! the fused embedding.
//!
//! The view sequence is unordered, so no positional encoding is added; the
//! fused embedding is permutation-invariant in eval mode. Blocks are
//! post-norm (sublayer, residual add, layer norm) with a GELU feed-forward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Layer-norm stabilizer used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Encoder blocks.
    pub num_layers: usize,
    /// Attention heads per block; must divide `model_dim`.
    pub num_heads: usize,
    /// Embedding width d.
    pub model_dim: usize,
    /// Feed-forward hidden width; conventionally 4·d.
    pub ffn_dim: usize,
    /// Dropout rate inside blocks (attention weights and FFN activations).
    pub dropout_p: f64,
    /// Views per sample (K).
    pub num_views: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Desk-scale width; layer/head counts and dropout follow the
        // reference setup this reproduces.
        EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            model_dim: 32,
            ffn_dim: 128,
            dropout_p: 0.1,
            num_views: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive".to_string()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_views == 0 {
            return Err(Error::config("num_views (K) must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Trainable affine map from raw features to model width; the desk-scale
/// stand-in for a convolutional backbone.
pub struct StemParams {
    pub weight: Tensor, // [F, d]
    pub bias: Tensor,   // [d]
}

pub struct EncoderLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

pub struct EncoderParams {
    pub stem: StemParams,
    /// Learnt class token, stored as a 1×d row so it prepends directly.
    pub cls_token: Tensor,
    pub layers: Vec<EncoderLayer>,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    // Box-Muller; two uniforms per draw keeps this dependency-free.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

impl StemParams {
    pub fn init(feature_dim: usize, model_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        StemParams {
            weight: Tensor::param(
                xavier_uniform(rng, feature_dim, model_dim),
                vec![feature_dim, model_dim],
            )
            .expect("stem weight shape"),
            bias: Tensor::param(vec![0.0; model_dim], vec![model_dim]).expect("stem bias shape"),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

impl EncoderLayer {
    fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.model_dim;
        let f = config.ffn_dim;
        let proj = |rng: &mut ChaCha8Rng| {
            Tensor::param(xavier_uniform(rng, d, d), vec![d, d]).expect("projection shape")
        };
        EncoderLayer {
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            wo: proj(rng),
            ffn_w1: Tensor::param(xavier_uniform(rng, d, f), vec![d, f]).expect("ffn w1 shape"),
            ffn_b1: Tensor::param(vec![0.0; f], vec![f]).expect("ffn b1 shape"),
            ffn_w2: Tensor::param(xavier_uniform(rng, f, d), vec![f, d]).expect("ffn w2 shape"),
            ffn_b2: Tensor::param(vec![0.0; d], vec![d]).expect("ffn b2 shape"),
            ln1_gain: Tensor::param(vec![1.0; d], vec![d]).expect("ln shape"),
            ln1_bias: Tensor::param(vec![0.0; d], vec![d]).expect("ln shape"),
            ln2_gain: Tensor::param(vec![1.0; d], vec![d]).expect("ln shape"),
            ln2_bias: Tensor::param(vec![0.0; d], vec![d]).expect("ln shape"),
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.wq"), self.wq.clone()),
            (format!("{prefix}.wk"), self.wk.clone()),
            (format!("{prefix}.wv"), self.wv.clone()),
            (format!("{prefix}.wo"), self.wo.clone()),
            (format!("{prefix}.ffn_w1"), self.ffn_w1.clone()),
            (format!("{prefix}.ffn_b1"), self.ffn_b1.clone()),
            (format!("{prefix}.ffn_w2"), self.ffn_w2.clone()),
            (format!("{prefix}.ffn_b2"), self.ffn_b2.clone()),
            (format!("{prefix}.ln1_gain"), self.ln1_gain.clone()),
            (format!("{prefix}.ln1_bias"), self.ln1_bias.clone()),
            (format!("{prefix}.ln2_gain"), self.ln2_gain.clone()),
            (format!("{prefix}.ln2_bias"), self.ln2_bias.clone()),
        ]
    }
}

impl EncoderParams {
    /// Fresh parameters: Xavier-uniform projections, zero biases, unit
    /// layer-norm gains, N(0, 0.02) class token.
    pub fn init(config: &EncoderConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = StemParams::init(feature_dim, config.model_dim, &mut rng);
        let cls_token = Tensor::param(
            gaussian(&mut rng, config.model_dim, 0.02),
            vec![1, config.model_dim],
        )?;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(config, &mut rng))
            .collect();
        Ok(EncoderParams {
            stem,
            cls_token,
            layers,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.stem.named_params("stem");
        out.push(("cls_token".to_string(), self.cls_token.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named_params(&format!("layer{i}")));
        }
        out
    }
}

/// Embed one raw feature vector: `raw·W + b`.
pub fn stem_embed(tape: &mut Tape, stem: &StemParams, raw: &Tensor) -> Result<Tensor> {
    let projected = tape.matmul(raw, &stem.weight)?;
    tape.add(&projected, &stem.bias)
}

/// Embed all K rows of a `[K,F]` view matrix at once.
pub fn stem_embed_views(tape: &mut Tape, stem: &StemParams, views: &Tensor) -> Result<Tensor> {
    let projected = tape.matmul(views, &stem.weight)?;
    tape.add_row(&projected, &stem.bias)
}

/// Self-attention over the row sequence of `x` (queries = keys = values).
/// Scaled dot-product per head, heads concatenated and output-projected.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: &Tensor,
    layer: &EncoderLayer,
    num_heads: usize,
    dropout_p: f64,
    mode: &mut Mode,
) -> Result<Tensor> {
    Ok(mha_with_probs(tape, x, layer, num_heads, dropout_p, mode)?.0)
}

/// As `multi_head_attention`, additionally returning each head's attention
/// probability matrix (pre-dropout) for inspection.
pub(crate) fn mha_with_probs(
    tape: &mut Tape,
    x: &Tensor,
    layer: &EncoderLayer,
    num_heads: usize,
    dropout_p: f64,
    mode: &mut Mode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let d = x.cols();
    if d % num_heads != 0 {
        return Err(Error::config(format!(
            "model_dim {d} not divisible by num_heads {num_heads}"
        )));
    }
    let head_dim = d / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = tape.matmul(x, &layer.wq)?;
    let k = tape.matmul(x, &layer.wk)?;
    let v = tape.matmul(x, &layer.wv)?;

    let mut contexts = Vec::with_capacity(num_heads);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.col_slice(&q, lo, hi)?;
        let kh = tape.col_slice(&k, lo, hi)?;
        let vh = tape.col_slice(&v, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let attn = tape.softmax(&scaled)?;
        probs.push(attn.clone());
        let attn = tape.dropout(&attn, dropout_p, mode)?;
        contexts.push(tape.matmul(&attn, &vh)?);
    }
    let ctx_refs: Vec<&Tensor> = contexts.iter().collect();
    let merged = tape.concat_cols(&ctx_refs)?;
    let out = tape.matmul(&merged, &layer.wo)?;
    Ok((out, probs))
}

fn encoder_block(
    tape: &mut Tape,
    x: &Tensor,
    layer: &EncoderLayer,
    config: &EncoderConfig,
    mode: &mut Mode,
) -> Result<Tensor> {
    let attn = multi_head_attention(tape, x, layer, config.num_heads, config.dropout_p, mode)?;
    let res1 = tape.add(x, &attn)?;
    let h = tape.layer_norm(&res1, &layer.ln1_gain, &layer.ln1_bias, LN_EPS)?;

    let pre = tape.matmul(&h, &layer.ffn_w1)?;
    let pre = tape.add_row(&pre, &layer.ffn_b1)?;
    let act = tape.gelu(&pre)?;
    let act = tape.dropout(&act, config.dropout_p, mode)?;
    let ffn = tape.matmul(&act, &layer.ffn_w2)?;
    let ffn = tape.add_row(&ffn, &layer.ffn_b2)?;
    let res2 = tape.add(&h, &ffn)?;
    tape.layer_norm(&res2, &layer.ln2_gain, &layer.ln2_bias, LN_EPS)
}

/// Fuse `[K,F]` views into one length-d embedding: stem-embed each view,
/// prepend the class token, run the encoder blocks, and read out row 0.
pub fn encode(
    tape: &mut Tape,
    params: &EncoderParams,
    config: &EncoderConfig,
    views: &Tensor,
    mode: &mut Mode,
) -> Result<Tensor> {
    let shape = views.shape();
    if shape.len() != 2 || shape[0] != config.num_views {
        return Err(Error::contract(format!(
            "encode expects [{}, F] views, got {shape:?}",
            config.num_views
        )));
    }
    let embedded = stem_embed_views(tape, &params.stem, views)?;
    let mut seq = tape.concat_rows(&[&params.cls_token, &embedded])?;
    for layer in &params.layers {
        seq = encoder_block(tape, &seq, layer, config, mode)?;
    }
    tape.row(&seq, 0)
}

/// Encoder-free baseline: the fused embedding is the mean of the K
/// stem-embedded views.
pub fn average_pool_aggregate(tape: &mut Tape, stem: &StemParams, views: &Tensor) -> Result<Tensor> {
    let embedded = stem_embed_views(tape, stem, views)?;
    tape.mean_rows(&embedded)
}

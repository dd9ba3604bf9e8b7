//! Encoder/decoder transformer building blocks.
//!
//! Post-norm wiring throughout: every sublayer computes
//! `LayerNorm(x + Sublayer(x))`. Attention is scaled dot-product per head with
//! heads concatenated and projected; the feed-forward block is two linear
//! layers with exact GELU and dropout between them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorValue};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Architecture hyperparameters. Image height and width are equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: trainable on a CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            n_heads: 4,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            ffn_hidden: 256,
            dropout_rate: 0.1,
            max_seq_len: 24,
        }
    }

    /// Tiny configuration used by the full-model gradient check.
    pub fn gradcheck() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_hidden: 32,
            dropout_rate: 0.0,
            max_seq_len: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::domain(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::domain(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::domain("embed dim must be even for sin/cos pairs"));
        }
        if self.n_heads == 0
            || self.ffn_hidden == 0
            || self.max_seq_len == 0
            || !(0.0..1.0).contains(&self.dropout_rate)
        {
            return Err(Error::domain("all counts must be >= 1 and dropout in [0,1)"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Splits an image into row-major square patches, each flattened row-major.
pub fn patchify(image: &GrayImage, patch_size: usize) -> Result<TensorValue> {
    if image.width != image.height {
        return Err(Error::shape("patchify", "image must be square"));
    }
    if patch_size == 0 || image.width % patch_size != 0 {
        return Err(Error::shape(
            "patchify",
            format!("dims {}x{} not divisible by patch {patch_size}", image.width, image.height),
        ));
    }
    let side = image.width / patch_size;
    let mut data = Vec::with_capacity(image.pixels.len());
    for py in 0..side {
        for px in 0..side {
            for r in 0..patch_size {
                let row = py * patch_size + r;
                let start = row * image.width + px * patch_size;
                data.extend_from_slice(&image.pixels[start..start + patch_size]);
            }
        }
    }
    Ok(TensorValue::new(vec![side * side, patch_size * patch_size], data))
}

/// Standard sinusoidal table: row k, pair j holds
/// `(sin(k w_j), cos(k w_j))` with `w_j = 10000^(-2j/dim)`.
pub fn positional_encoding(length: usize, dim: usize) -> Result<TensorValue> {
    if dim % 2 != 0 {
        return Err(Error::shape("positional-encoding", "dim must be even"));
    }
    let mut data = Vec::with_capacity(length * dim);
    for k in 0..length {
        for j in 0..dim / 2 {
            let freq = 10000f64.powf(-2.0 * j as f64 / dim as f64);
            let angle = k as f64 * freq;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(TensorValue::new(vec![length, dim], data))
}

/// Additive causal mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(len: usize) -> TensorValue {
    let mut data = vec![0.0; len * len];
    for r in 0..len {
        for c in (r + 1)..len {
            data[r * len + c] = f64::NEG_INFINITY;
        }
    }
    TensorValue::new(vec![len, len], data)
}

/// Projection weights for one multi-head attention block.
#[derive(Clone)]
pub struct MhaParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone)]
pub struct EncoderLayerParams {
    pub attn: MhaParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

#[derive(Clone)]
pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub ln1: LayerNormParams,
    pub cross_attn: MhaParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
    pub ln3: LayerNormParams,
}

/// Attention probabilities, one (queries x keys) matrix per head.
pub type AttentionWeights = Vec<TensorValue>;

pub struct MhaOutput {
    pub out: Tensor,
    pub probs: AttentionWeights,
}

/// Scaled dot-product multi-head attention.
///
/// Queries come from `q_in`, keys and values from `kv_in`. The optional
/// additive mask is applied to the logits before the row softmax, so masked
/// positions are exactly zero afterwards.
pub fn mha(
    tape: &Tape,
    q_in: &Tensor,
    kv_in: &Tensor,
    mask: Option<&Tensor>,
    p: &MhaParams,
    n_heads: usize,
) -> Result<MhaOutput> {
    let e = q_in.cols();
    if e % n_heads != 0 {
        return Err(Error::shape("mha", "embed dim not divisible by heads"));
    }
    if let Some(m) = mask {
        if m.shape() != [q_in.rows(), kv_in.rows()] {
            return Err(Error::shape(
                "mha",
                format!(
                    "mask {:?} does not match ({}, {})",
                    m.shape(),
                    q_in.rows(),
                    kv_in.rows()
                ),
            ));
        }
    }
    let d_k = e / n_heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let q = tape.add(&tape.matmul(q_in, &p.wq)?, &p.bq)?;
    let k = tape.add(&tape.matmul(kv_in, &p.wk)?, &p.bk)?;
    let v = tape.add(&tape.matmul(kv_in, &p.wv)?, &p.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * d_k, (h + 1) * d_k);
        let qh = tape.slice(&q, 1, lo, hi)?;
        let kh = tape.slice(&k, 1, lo, hi)?;
        let vh = tape.slice(&v, 1, lo, hi)?;
        let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
        let scores = match mask {
            Some(m) => tape.add(&scores, m)?,
            None => scores,
        };
        let attn = tape.softmax_rows(&scores)?;
        probs.push(attn.value());
        heads.push(tape.matmul(&attn, &vh)?);
    }
    let head_refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat(1, &head_refs)?;
    let out = tape.add(&tape.matmul(&cat, &p.wo)?, &p.bo)?;
    Ok(MhaOutput { out, probs })
}

/// Position-wise feed-forward: `FC2(Dropout(GELU(FC1(x))))`.
pub fn ffn(tape: &Tape, x: &Tensor, p: &FfnParams, dropout_rate: f64) -> Result<Tensor> {
    let h = tape.gelu(&tape.add(&tape.matmul(x, &p.w1)?, &p.b1)?)?;
    let h = tape.dropout(&h, dropout_rate)?;
    tape.add(&tape.matmul(&h, &p.w2)?, &p.b2)
}

/// Post-norm residual wrapper: `LayerNorm(x + f(x))`.
pub fn sublayer<F>(tape: &Tape, x: &Tensor, ln: &LayerNormParams, f: F) -> Result<Tensor>
where
    F: FnOnce(&Tape, &Tensor) -> Result<Tensor>,
{
    let fx = f(tape, x)?;
    if fx.shape() != x.shape() {
        return Err(Error::shape(
            "sublayer",
            format!("sublayer changed shape {:?} -> {:?}", x.shape(), fx.shape()),
        ));
    }
    tape.layernorm(&tape.add(x, &fx)?, &ln.gamma, &ln.beta)
}

pub fn encoder_layer(
    tape: &Tape,
    x: &Tensor,
    p: &EncoderLayerParams,
    n_heads: usize,
    dropout_rate: f64,
) -> Result<(Tensor, AttentionWeights)> {
    let mut probs = Vec::new();
    let x = sublayer(tape, x, &p.ln1, |t, x| {
        let o = mha(t, x, x, None, &p.attn, n_heads)?;
        probs = o.probs;
        Ok(o.out)
    })?;
    let x = sublayer(tape, &x, &p.ln2, |t, x| ffn(t, x, &p.ffn, dropout_rate))?;
    Ok((x, probs))
}

/// Runs the encoder stack; also returns per-layer attention probabilities for
/// the attention-map extractor.
pub fn encoder_forward(
    tape: &Tape,
    mut x: Tensor,
    layers: &[EncoderLayerParams],
    n_heads: usize,
    dropout_rate: f64,
) -> Result<(Tensor, Vec<AttentionWeights>)> {
    let mut all_probs = Vec::with_capacity(layers.len());
    for p in layers {
        let (next, probs) = encoder_layer(tape, &x, p, n_heads, dropout_rate)?;
        x = next;
        all_probs.push(probs);
    }
    Ok((x, all_probs))
}

pub fn decoder_layer(
    tape: &Tape,
    x: &Tensor,
    memory: &Tensor,
    causal: &Tensor,
    p: &DecoderLayerParams,
    n_heads: usize,
    dropout_rate: f64,
) -> Result<Tensor> {
    let x = sublayer(tape, x, &p.ln1, |t, x| {
        Ok(mha(t, x, x, Some(causal), &p.self_attn, n_heads)?.out)
    })?;
    let x = sublayer(tape, &x, &p.ln2, |t, x| {
        Ok(mha(t, x, memory, None, &p.cross_attn, n_heads)?.out)
    })?;
    sublayer(tape, &x, &p.ln3, |t, x| ffn(t, x, &p.ffn, dropout_rate))
}

/// Runs the decoder stack over already-embedded target tokens.
pub fn decoder_forward(
    tape: &Tape,
    mut x: Tensor,
    memory: &Tensor,
    layers: &[DecoderLayerParams],
    n_heads: usize,
    dropout_rate: f64,
) -> Result<Tensor> {
    let causal = Tensor::constant(causal_mask(x.rows()));
    for p in layers {
        x = decoder_layer(tape, &x, memory, &causal, p, n_heads, dropout_rate)?;
    }
    Ok(x)
}

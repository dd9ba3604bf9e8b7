//! The full image-to-spline model.
//!
//! An image is patch-embedded and encoded; a convolutional tip predictor
//! produces the first (control point, knot) token directly from pixels; the
//! decoder then autoregressively emits further tokens, each a (point, knot,
//! end-of-sequence) triple, until the end-of-sequence head fires. Token
//! sequences convert to clamped cubic B-splines via [`to_spline`].
//!
//! Guidewire token order is tip-first: token 0 sits at the distal tip, and a
//! token's knot field carries knot `t_i` of the clamped ground-truth vector
//! (zero for the first `degree+1` tokens, then the interior knots).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::UnfoldSpec;
use crate::autodiff::{Tape, Tensor, TensorValue};
use crate::bspline::{KnotVector, Point2, SplineCurve};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::rng_from;
use crate::transformer::{
    causal_mask, decoder_forward, encoder_forward, mha, patchify, positional_encoding, sublayer,
    DecoderLayerParams, EncoderLayerParams, FfnParams, LayerNormParams, MhaParams, ModelConfig,
};

/// One decoder output: a control point, its knot, and the stop probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineToken {
    pub point: Point2,
    pub knot: f64,
    pub eos_prob: f64,
}

impl SplineToken {
    /// Clamps coordinates and knot into the unit ranges.
    pub fn clamped(x: f64, y: f64, knot: f64, eos_prob: f64) -> Self {
        SplineToken {
            point: Point2::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)),
            knot: knot.clamp(0.0, 1.0),
            eos_prob: eos_prob.clamp(0.0, 1.0),
        }
    }
}

/// Ordered token sequence; `terminated` is true iff generation stopped via the
/// end-of-sequence head rather than the length cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<SplineToken>,
    pub terminated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// (x, y, knot) rows for embedding.
    pub fn to_input_rows(&self) -> Vec<Vec<f64>> {
        self.tokens
            .iter()
            .map(|t| vec![t.point.x, t.point.y, t.knot])
            .collect()
    }
}

/// Patch-salience heatmap upsampled to image resolution; values in [0,1].
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub heat: GrayImage,
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, TensorValue)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: TensorValue) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> &TensorValue {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorValue {
        let idx = self.index[name];
        &mut self.entries[idx].1
    }

    pub fn entries(&self) -> &[(String, TensorValue)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, TensorValue)] {
        &mut self.entries
    }

    pub fn from_entries(entries: Vec<(String, TensorValue)>) -> Self {
        let mut store = ParamStore::default();
        for (n, v) in entries {
            store.push(n, v);
        }
        store
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Parameters bound for one forward pass: leaves on a tape (training) or
/// constants (inference).
pub struct Bound {
    map: HashMap<String, Tensor>,
}

impl Bound {
    /// Binds an explicit name-to-tensor map (used by gradient checks that
    /// manage leaves themselves).
    pub fn from_map(map: HashMap<String, Tensor>) -> Self {
        Bound { map }
    }

    pub fn get(&self, name: &str) -> Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .clone()
    }

    fn mha(&self, prefix: &str) -> MhaParams {
        MhaParams {
            wq: self.get(&format!("{prefix}.wq")),
            bq: self.get(&format!("{prefix}.bq")),
            wk: self.get(&format!("{prefix}.wk")),
            bk: self.get(&format!("{prefix}.bk")),
            wv: self.get(&format!("{prefix}.wv")),
            bv: self.get(&format!("{prefix}.bv")),
            wo: self.get(&format!("{prefix}.wo")),
            bo: self.get(&format!("{prefix}.bo")),
        }
    }

    fn ln(&self, prefix: &str) -> LayerNormParams {
        LayerNormParams {
            gamma: self.get(&format!("{prefix}.g")),
            beta: self.get(&format!("{prefix}.b")),
        }
    }

    fn ffn(&self, prefix: &str) -> FfnParams {
        FfnParams {
            w1: self.get(&format!("{prefix}.w1")),
            b1: self.get(&format!("{prefix}.b1")),
            w2: self.get(&format!("{prefix}.w2")),
            b2: self.get(&format!("{prefix}.b2")),
        }
    }

    fn encoder_layers(&self, n: usize) -> Vec<EncoderLayerParams> {
        (0..n)
            .map(|i| EncoderLayerParams {
                attn: self.mha(&format!("enc{i}.attn")),
                ln1: self.ln(&format!("enc{i}.ln1")),
                ffn: self.ffn(&format!("enc{i}.ffn")),
                ln2: self.ln(&format!("enc{i}.ln2")),
            })
            .collect()
    }

    fn decoder_layers(&self, n: usize) -> Vec<DecoderLayerParams> {
        (0..n)
            .map(|i| DecoderLayerParams {
                self_attn: self.mha(&format!("dec{i}.self")),
                ln1: self.ln(&format!("dec{i}.ln1")),
                cross_attn: self.mha(&format!("dec{i}.cross")),
                ln2: self.ln(&format!("dec{i}.ln2")),
                ffn: self.ffn(&format!("dec{i}.ffn")),
                ln3: self.ln(&format!("dec{i}.ln3")),
            })
            .collect()
    }
}

/// Tip-predictor convolution channel widths.
const TIP_CHANNELS: [usize; 3] = [8, 16, 32];
const TIP_FC_DIM: usize = 64;
const TIP_KERNEL: usize = 3;

/// Tracked tensors produced by a teacher-forced pass: row 0 comes from the tip
/// predictor, later rows from the decoder heads.
pub struct TeacherForcedOutput {
    /// (L, 2) control-point coordinates, raw (unclamped).
    pub points: Tensor,
    /// (L, 1) knot values, raw.
    pub knots: Tensor,
    /// (L, 1) end-of-sequence probabilities; row 0 is fixed to 0.
    pub eos_probs: Tensor,
}

impl TeacherForcedOutput {
    /// Materializes tokens (coordinates and knots clamped to unit ranges).
    pub fn to_token_sequence(&self, terminated: bool) -> TokenSequence {
        let l = self.points.rows();
        let tokens = (0..l)
            .map(|i| {
                SplineToken::clamped(
                    self.points.data()[2 * i],
                    self.points.data()[2 * i + 1],
                    self.knots.data()[i],
                    self.eos_probs.data()[i],
                )
            })
            .collect();
        TokenSequence { tokens, terminated }
    }
}

/// The image-to-spline transformer with its weights.
#[derive(Debug, Clone)]
pub struct SplineTransformer {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl SplineTransformer {
    /// Fresh model with Glorot-uniform weights drawn from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let mut store = ParamStore::default();
        let e = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size;

        let mut linear = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            store.push(format!("{name}.w"), TensorValue::new(vec![rows, cols], w));
            store.push(format!("{name}.b"), TensorValue::zeros(vec![cols]));
        };
        let mha_params = |store: &mut ParamStore, prefix: &str, rng: &mut rand_chacha::ChaCha8Rng| {
            for part in ["q", "k", "v", "o"] {
                let bound = (6.0 / (2 * e) as f64).sqrt();
                let w: Vec<f64> = (0..e * e).map(|_| rng.gen_range(-bound..bound)).collect();
                store.push(format!("{prefix}.w{part}"), TensorValue::new(vec![e, e], w));
                store.push(format!("{prefix}.b{part}"), TensorValue::zeros(vec![e]));
            }
        };
        let ln_params = |store: &mut ParamStore, prefix: &str| {
            store.push(format!("{prefix}.g"), TensorValue::new(vec![e], vec![1.0; e]));
            store.push(format!("{prefix}.b"), TensorValue::zeros(vec![e]));
        };
        let ffn_params = |store: &mut ParamStore, prefix: &str, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = (6.0 / (e + cfg.ffn_hidden) as f64).sqrt();
            let w1: Vec<f64> = (0..e * cfg.ffn_hidden).map(|_| rng.gen_range(-bound..bound)).collect();
            store.push(format!("{prefix}.w1"), TensorValue::new(vec![e, cfg.ffn_hidden], w1));
            store.push(format!("{prefix}.b1"), TensorValue::zeros(vec![cfg.ffn_hidden]));
            let w2: Vec<f64> = (0..cfg.ffn_hidden * e).map(|_| rng.gen_range(-bound..bound)).collect();
            store.push(format!("{prefix}.w2"), TensorValue::new(vec![cfg.ffn_hidden, e], w2));
            store.push(format!("{prefix}.b2"), TensorValue::zeros(vec![e]));
        };

        linear(&mut store, "patch_embed", patch_dim, e, &mut rng);
        for i in 0..cfg.n_encoder_layers {
            mha_params(&mut store, &format!("enc{i}.attn"), &mut rng);
            ln_params(&mut store, &format!("enc{i}.ln1"));
            ffn_params(&mut store, &format!("enc{i}.ffn"), &mut rng);
            ln_params(&mut store, &format!("enc{i}.ln2"));
        }
        for i in 0..cfg.n_decoder_layers {
            mha_params(&mut store, &format!("dec{i}.self"), &mut rng);
            ln_params(&mut store, &format!("dec{i}.ln1"));
            mha_params(&mut store, &format!("dec{i}.cross"), &mut rng);
            ln_params(&mut store, &format!("dec{i}.ln2"));
            ffn_params(&mut store, &format!("dec{i}.ffn"), &mut rng);
            ln_params(&mut store, &format!("dec{i}.ln3"));
        }
        linear(&mut store, "tok_embed", 3, e, &mut rng);
        linear(&mut store, "head.point", e, 2, &mut rng);
        linear(&mut store, "head.knot", e, 1, &mut rng);
        linear(&mut store, "head.eos", e, 1, &mut rng);
        // centre-biased point/knot heads keep early predictions in frame
        store.get_mut("head.point.b").data.fill(0.5);
        store.get_mut("head.knot.b").data.fill(0.5);
        // a negative eos bias keeps early sequences from stopping immediately
        store.get_mut("head.eos.b").data.fill(-2.0);

        // tip predictor: 3 stride-2 conv blocks then two linear layers
        let mut c_in = 1usize;
        for (i, &c_out) in TIP_CHANNELS.iter().enumerate() {
            let rows = TIP_KERNEL * TIP_KERNEL * c_in;
            let bound = (6.0 / (rows + c_out) as f64).sqrt();
            let w: Vec<f64> = (0..rows * c_out).map(|_| rng.gen_range(-bound..bound)).collect();
            store.push(format!("tip.conv{}.w", i + 1), TensorValue::new(vec![rows, c_out], w));
            store.push(format!("tip.conv{}.b", i + 1), TensorValue::zeros(vec![c_out]));
            c_in = c_out;
        }
        let spatial = cfg.image_size / 8; // three stride-2 halvings
        let flat = TIP_CHANNELS[2] * spatial * spatial;
        linear(&mut store, "tip.fc1", flat, TIP_FC_DIM, &mut rng);
        linear(&mut store, "tip.fc2", TIP_FC_DIM, 3, &mut rng);
        store.get_mut("tip.fc2.b").data[0] = 0.5;
        store.get_mut("tip.fc2.b").data[1] = 0.5;

        Ok(SplineTransformer { cfg, params: store })
    }

    /// Binds every parameter as a tape leaf (training) or constant (inference).
    pub fn bind(&self, tape: Option<&Tape>) -> Bound {
        let map = self
            .params
            .entries()
            .iter()
            .map(|(n, v)| {
                let t = match tape {
                    Some(tape) => tape.leaf(v.clone()),
                    None => Tensor::constant(v.clone()),
                };
                (n.clone(), t)
            })
            .collect();
        Bound { map }
    }

    /// Leaf tensors in parameter order, for gradient extraction.
    pub fn leaf_order(&self, bound: &Bound) -> Vec<Tensor> {
        self.params
            .entries()
            .iter()
            .map(|(n, _)| bound.get(n))
            .collect()
    }

    fn check_image(&self, image: &GrayImage) -> Result<()> {
        if image.width != self.cfg.image_size || image.height != self.cfg.image_size {
            return Err(Error::shape(
                "model",
                format!(
                    "image {}x{} does not match configured size {}",
                    image.width, image.height, self.cfg.image_size
                ),
            ));
        }
        Ok(())
    }

    /// Tip predictor forward: (1,3) raw (x, y, knot) from pixels.
    pub fn tip_forward(&self, tape: &Tape, bound: &Bound, image: &GrayImage) -> Result<Tensor> {
        self.check_image(image)?;
        let mut x = Tensor::constant(TensorValue::new(
            vec![1, image.pixels.len()],
            image.pixels.clone(),
        ));
        let mut c_in = 1usize;
        let mut side = self.cfg.image_size;
        for (i, &c_out) in TIP_CHANNELS.iter().enumerate() {
            let spec = UnfoldSpec {
                channels: c_in,
                height: side,
                width: side,
                kernel: TIP_KERNEL,
                stride: 2,
                pad: 1,
            };
            let cols = tape.unfold(&x, spec)?;
            let w = bound.get(&format!("tip.conv{}.w", i + 1));
            let b = bound.get(&format!("tip.conv{}.b", i + 1));
            let h = tape.relu(&tape.add(&tape.matmul(&cols, &w)?, &b)?)?;
            // (positions, c_out) -> (c_out, positions) for the next unfold
            x = tape.transpose(&h)?;
            c_in = c_out;
            side = spec.out_height();
        }
        // flatten position-major (channels fastest): transpose back first
        let pos_major = tape.transpose(&x)?;
        let flat_len = pos_major.rows() * pos_major.cols();
        let flat = tape.reshape(&pos_major, vec![1, flat_len])?;
        let h = tape.relu(&tape.add(
            &tape.matmul(&flat, &bound.get("tip.fc1.w"))?,
            &bound.get("tip.fc1.b"),
        )?)?;
        tape.add(
            &tape.matmul(&h, &bound.get("tip.fc2.w"))?,
            &bound.get("tip.fc2.b"),
        )
    }

    /// Encodes an image to memory; also returns per-layer attention weights.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &Bound,
        image: &GrayImage,
    ) -> Result<(Tensor, Vec<Vec<TensorValue>>)> {
        self.check_image(image)?;
        let patches = Tensor::constant(patchify(image, self.cfg.patch_size)?);
        let embedded = tape.add(
            &tape.matmul(&patches, &bound.get("patch_embed.w"))?,
            &bound.get("patch_embed.b"),
        )?;
        let pos = Tensor::constant(positional_encoding(
            self.cfg.n_patches(),
            self.cfg.embed_dim,
        )?);
        let x = tape.add(&embedded, &pos)?;
        encoder_forward(
            tape,
            x,
            &bound.encoder_layers(self.cfg.n_encoder_layers),
            self.cfg.n_heads,
            self.cfg.dropout_rate,
        )
    }

    /// Embeds (x, y, knot) token rows and runs the decoder; returns raw head
    /// outputs (points, knots, eos logits) for the next position of each row.
    fn decode_rows(
        &self,
        tape: &Tape,
        bound: &Bound,
        rows: &[Vec<f64>],
        memory: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let l = rows.len();
        let inputs = Tensor::from_rows(rows);
        let embedded = tape.add(
            &tape.matmul(&inputs, &bound.get("tok_embed.w"))?,
            &bound.get("tok_embed.b"),
        )?;
        let pos = Tensor::constant(positional_encoding(l, self.cfg.embed_dim)?);
        let x = tape.add(&embedded, &pos)?;
        let out = decoder_forward(
            tape,
            x,
            memory,
            &bound.decoder_layers(self.cfg.n_decoder_layers),
            self.cfg.n_heads,
            self.cfg.dropout_rate,
        )?;
        let points = tape.add(
            &tape.matmul(&out, &bound.get("head.point.w"))?,
            &bound.get("head.point.b"),
        )?;
        let knots = tape.add(
            &tape.matmul(&out, &bound.get("head.knot.w"))?,
            &bound.get("head.knot.b"),
        )?;
        let eos = tape.add(
            &tape.matmul(&out, &bound.get("head.eos.w"))?,
            &bound.get("head.eos.b"),
        )?;
        Ok((points, knots, eos))
    }

    /// One teacher-forced pass: position 0 is the tip prediction, positions
    /// 1..L come from the decoder fed ground-truth prefixes.
    pub fn teacher_forced_forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        image: &GrayImage,
        target: &TokenSequence,
    ) -> Result<TeacherForcedOutput> {
        let l = target.len();
        if l < 2 {
            return Err(Error::domain("teacher forcing needs a target of length >= 2"));
        }
        if l > self.cfg.max_seq_len {
            return Err(Error::shape(
                "teacher_forced_forward",
                format!("target length {l} exceeds max {}", self.cfg.max_seq_len),
            ));
        }
        let tip = self.tip_forward(tape, bound, image)?; // (1,3)
        let (memory, _) = self.encode(tape, bound, image)?;
        let rows = target.to_input_rows();
        let (dec_points, dec_knots, dec_eos) =
            self.decode_rows(tape, bound, &rows[..l - 1], &memory)?;

        let tip_point = tape.slice(&tip, 1, 0, 2)?;
        let tip_knot = tape.slice(&tip, 1, 2, 3)?;
        let zero = Tensor::constant(TensorValue::new(vec![1, 1], vec![0.0]));
        let points = tape.concat(0, &[&tip_point, &dec_points])?;
        let knots = tape.concat(0, &[&tip_knot, &dec_knots])?;
        let eos_probs = tape.concat(0, &[&zero, &tape.sigmoid(&dec_eos)?])?;
        Ok(TeacherForcedOutput {
            points,
            knots,
            eos_probs,
        })
    }

    /// Tip token for an image (eval mode, coordinates clamped to the frame).
    pub fn predict_tip(&self, image: &GrayImage) -> Result<SplineToken> {
        let tape = Tape::new();
        let bound = self.bind(None);
        let tip = self.tip_forward(&tape, &bound, image)?;
        Ok(SplineToken::clamped(
            tip.data()[0],
            tip.data()[1],
            tip.data()[2],
            0.0,
        ))
    }

    /// Autoregressive generation. Encodes once, then decodes until the
    /// end-of-sequence probability reaches `eos_threshold` or `max_len` tokens
    /// exist. The tip token's stop probability is fixed at zero.
    pub fn generate(
        &self,
        image: &GrayImage,
        max_len: usize,
        eos_threshold: f64,
    ) -> Result<TokenSequence> {
        if max_len == 0 || max_len > self.cfg.max_seq_len {
            return Err(Error::domain(format!(
                "max_len {max_len} outside 1..={}",
                self.cfg.max_seq_len
            )));
        }
        let tape = Tape::new();
        let bound = self.bind(None);
        let tip = self.tip_forward(&tape, &bound, image)?;
        let mut tokens = vec![SplineToken::clamped(
            tip.data()[0],
            tip.data()[1],
            tip.data()[2],
            0.0,
        )];
        if tokens[0].eos_prob >= eos_threshold {
            return Ok(TokenSequence {
                tokens,
                terminated: true,
            });
        }
        let (memory, _) = self.encode(&tape, &bound, image)?;
        while tokens.len() < max_len {
            let rows: Vec<Vec<f64>> = tokens
                .iter()
                .map(|t| vec![t.point.x, t.point.y, t.knot])
                .collect();
            let (points, knots, eos) = self.decode_rows(&tape, &bound, &rows, &memory)?;
            let last = rows.len() - 1;
            let eos_prob = sigmoid_scalar(eos.data()[last]);
            let token = SplineToken::clamped(
                points.data()[2 * last],
                points.data()[2 * last + 1],
                knots.data()[last],
                eos_prob,
            );
            tokens.push(token);
            if eos_prob >= eos_threshold {
                return Ok(TokenSequence {
                    tokens,
                    terminated: true,
                });
            }
        }
        Ok(TokenSequence {
            tokens,
            terminated: false,
        })
    }

    /// Maximal head fusion over the final encoder layer: per-patch received
    /// attention (mean over queries), elementwise max across heads, lowest
    /// `discard` fraction zeroed, peak-normalized, nearest-neighbour upsampled.
    pub fn attention_map(&self, image: &GrayImage, discard: f64) -> Result<AttentionMap> {
        if !(0.0..1.0).contains(&discard) {
            return Err(Error::domain(format!("discard {discard} must be in [0,1)")));
        }
        let tape = Tape::new();
        let bound = self.bind(None);
        let (_, attns) = self.encode(&tape, &bound, image)?;
        let last = attns
            .last()
            .ok_or_else(|| Error::domain("encoder has no layers"))?;
        let np = self.cfg.n_patches();
        let mut fused = vec![0.0f64; np];
        for head in last {
            for k in 0..np {
                let mut received = 0.0;
                for q in 0..np {
                    received += head.data[q * np + k];
                }
                received /= np as f64;
                fused[k] = fused[k].max(received);
            }
        }
        // zero the lowest `discard` fraction of patch cells
        let k_discard = ((discard * np as f64).ceil() as usize).min(np);
        let mut order: Vec<usize> = (0..np).collect();
        order.sort_by(|&a, &b| fused[a].partial_cmp(&fused[b]).unwrap().then(a.cmp(&b)));
        for &i in order.iter().take(k_discard) {
            fused[i] = 0.0;
        }
        let peak = fused.iter().cloned().fold(0.0f64, f64::max);
        if peak > 0.0 {
            for v in &mut fused {
                *v /= peak;
            }
        }
        // nearest-neighbour upsample of the patch grid
        let side = self.cfg.patches_per_side();
        let ps = self.cfg.patch_size;
        let mut heat = GrayImage::new(self.cfg.image_size, self.cfg.image_size);
        for r in 0..self.cfg.image_size {
            for c in 0..self.cfg.image_size {
                heat.set(r, c, fused[(r / ps) * side + c / ps]);
            }
        }
        Ok(AttentionMap { heat })
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Assembles a clamped spline from a token sequence: control points are the
/// token points in order; interior knots are the prefix-max-clamped token
/// knots at positions degree+1.., squeezed into (0,1).
pub fn to_spline(seq: &TokenSequence, degree: usize) -> Result<SplineCurve> {
    let l = seq.len();
    if l < degree + 1 {
        return Err(Error::domain(format!(
            "insufficient control points: {l} tokens for degree {degree}"
        )));
    }
    let control: Vec<Point2> = seq.tokens.iter().map(|t| t.point).collect();
    // prefix-max makes the knot candidates monotone
    let mut monotone = Vec::with_capacity(l);
    let mut running = 0.0f64;
    for t in &seq.tokens {
        running = running.max(t.knot);
        monotone.push(running);
    }
    const DELTA: f64 = 1e-6;
    let interior: Vec<f64> = monotone[degree + 1..]
        .iter()
        .map(|&v| v.clamp(DELTA, 1.0 - DELTA))
        .collect();
    let curve = SplineCurve::new(degree, control, KnotVector::clamped(degree, &interior))?;
    debug_assert!(curve.validate().is_ok());
    Ok(curve)
}

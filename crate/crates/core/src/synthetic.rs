// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test fixtures with known ground truth, and independent reference code.
//!
//! The *planted* model is built by hand so that one residual direction `u`
//! controls its first output token:
//!
//! * The unembedding adds `response_gain·⟨h, u⟩` to the step-class logits,
//!   subtracts it from the answer-class logits, and gives the answer class a
//!   constant head start. Unsteered, the model answers.
//! * Bytes that occur only in the default chain-of-thought suffix get a
//!   "marker" feature with positive polarity; bytes only in the direct
//!   suffix get the marker with negative polarity.
//! * The MLP of the planted layer contains a gated pair of neurons that
//!   writes `±u` only where the marker gate is on. Injecting along the
//!   layer-0 difference direction cannot open the gate, so the direction
//!   only becomes causal at the planted layer.
//! * Class tokens carry a stop feature that makes EOS the next token, so
//!   generations are a single class token.
//!
//! Everything is built in a canonical basis and then rotated by a random
//! orthogonal matrix, so `u` is not an axis direction. RMS norm gains are all
//! ones, which makes the rotation exact up to rounding.
//!
//! The oracle functions re-implement the forward pass and the derivation
//! with naive loops. They read weights through the public [`Weights`] type
//! and share no computation code with the engine.

// The oracles index explicitly to mirror the math.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_contrast_pair, ContrastTemplate, Question};
use crate::error::{Error, Result};
use crate::model::tokenizer::{BASE_VOCAB, BOS, EOS, PAD};
use crate::model::{LayerWeights, Model, ModelConfig, TokenId, Weights};
use crate::numerics::Tensor2;

// Canonical-basis slots.
const Z: usize = 0;
const U: usize = 1;
const W: usize = 2;
const G: usize = 3;
const S: usize = 4;
const FIRST_FEATURE: usize = 5;

/// A config big enough to exercise multi-head attention, small enough for
/// exhaustive tests.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: BASE_VOCAB,
        max_seq: 160,
        norm_eps: 1e-5,
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

/// Dense random weights. Special-token unembedding columns are zero so
/// generation rarely stops early.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let s = 1.0 / (d as f32).sqrt();
    let tok_embed = uniform(&mut rng, v, d, 1.0);
    let pos_embed = uniform(&mut rng, cfg.max_seq, d, 0.2);
    let gains = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(0.8..1.2)).collect::<Vec<f32>>();
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            attn_norm: gains(&mut rng),
            wq: uniform(&mut rng, d, d, 2.0 * s),
            wk: uniform(&mut rng, d, d, 2.0 * s),
            wv: uniform(&mut rng, d, d, s),
            wo: uniform(&mut rng, d, d, s),
            mlp_norm: gains(&mut rng),
            w_up: uniform(&mut rng, d, f, s),
            w_down: uniform(&mut rng, f, d, 1.0 / (f as f32).sqrt()),
        })
        .collect();
    let final_norm = gains(&mut rng);
    let mut unembed = uniform(&mut rng, d, v, 1.0);
    for tok in 256..v {
        for r in 0..d {
            unembed.set(r, tok, 0.0);
        }
    }
    Model::new(
        *cfg,
        Weights {
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        },
    )
    .expect("random weights match config")
}

/// Parameters of the planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Layer whose MLP writes the planted direction.
    pub planted_layer: usize,
    /// Unit direction `u`; `None` draws one from the seed.
    pub planted_direction: Option<Vec<f32>>,
    pub step_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    /// Logit change per unit of normalized `⟨h, u⟩`.
    pub response_gain: f32,
    /// Constant answer-class logit per unit of the normalized bias feature.
    pub answer_bias: f32,
    /// Size of the `u` write by the marker neurons.
    pub marker_gain: f32,
    /// Slope of the gated marker neurons.
    pub gate_sharpness: f32,
    /// Scale of the random attention and MLP weights.
    pub noise: f32,
}

impl Default for PlantedModelSpec {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq: 256,
            planted_layer: 1,
            planted_direction: None,
            step_tokens: vec![TokenId::from(b'1')],
            answer_tokens: vec![TokenId::from(b'0')],
            response_gain: 4.0,
            answer_bias: 0.6,
            marker_gain: 10.0,
            gate_sharpness: 4.0,
            noise: 0.05,
        }
    }
}

impl PlantedModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model < FIRST_FEATURE + 2 {
            return bad(format!("planted model needs d_model >= {}", FIRST_FEATURE + 2));
        }
        if self.planted_layer >= self.n_layers {
            return bad(format!(
                "planted layer {} outside 0..{}",
                self.planted_layer, self.n_layers
            ));
        }
        if self.d_ff < 2 {
            return bad("planted model needs d_ff >= 2".into());
        }
        if self.step_tokens.is_empty() || self.answer_tokens.is_empty() {
            return bad("token classes must be non-empty".into());
        }
        if self.step_tokens.iter().any(|t| self.answer_tokens.contains(t)) {
            return bad("step and answer token classes overlap".into());
        }
        if self.step_tokens.iter().chain(&self.answer_tokens).any(|&t| t >= 256) {
            return bad("class tokens must be byte tokens".into());
        }
        if let Some(u) = &self.planted_direction {
            if u.len() != self.d_model {
                return bad(format!("direction has {} elements", u.len()));
            }
            let n: f64 = u.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return bad(format!("direction norm is {n}, must be 1"));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: BASE_VOCAB,
            max_seq: self.max_seq,
            norm_eps: 1e-5,
        }
    }
}

/// Orthonormal rows; row 0 starts from `first` when given.
fn orthonormal_basis(d: usize, first: Option<&[f32]>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    if let Some(f) = first {
        candidates.push(f.iter().map(|&x| x as f64).collect());
    }
    while basis.len() < d {
        let mut v = match candidates.pop() {
            Some(c) => c,
            None => (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Bytes present in `a` but not in `b`.
fn exclusive_bytes(a: &str, b: &str) -> Vec<u8> {
    let mut out: Vec<u8> = a.bytes().filter(|c| !b.as_bytes().contains(c)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Seed of the checked-in planted fixture.
pub const PLANTED_SEED: u64 = 1;

/// The default planted model with [`PLANTED_SEED`].
pub fn planted_fixture() -> (PlantedModelSpec, Model) {
    let spec = PlantedModelSpec::default();
    let model = build_planted_model(&spec, PLANTED_SEED).expect("default spec is valid");
    (spec, model)
}

/// Build the planted model. Deterministic in `(spec, seed)`.
pub fn build_planted_model(spec: &PlantedModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let cfg = spec.config();
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let z_level = (d as f32).sqrt();

    // Canonical embedding.
    let template = ContrastTemplate::default();
    let cot_markers = exclusive_bytes(&template.cot_suffix, &template.direct_suffix);
    let direct_markers = exclusive_bytes(&template.direct_suffix, &template.cot_suffix);
    let mut embed = Tensor2::zeros(v, d);
    for tok in 0..v {
        let row = embed.row_mut(tok);
        row[Z] = z_level;
        if tok < 256 {
            for x in &mut row[FIRST_FEATURE..] {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
        let t = tok as TokenId;
        if tok < 256 && cot_markers.contains(&(tok as u8)) {
            row[W] = 1.0;
            row[G] = 1.0;
        }
        if tok < 256 && direct_markers.contains(&(tok as u8)) {
            row[W] = -1.0;
            row[G] = 1.0;
        }
        if spec.step_tokens.contains(&t) || spec.answer_tokens.contains(&t) {
            row[S] = 2.0;
        }
    }

    let noise = spec.noise;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut w_up = uniform(&mut rng, d, f, noise);
        let mut w_down = uniform(&mut rng, f, d, noise);
        if l == spec.planted_layer {
            // Neuron 0 fires on +marker, neuron 1 on -marker. The threshold
            // comes from the bias feature, whose normalized value is ~1 per
            // unit of weight / z_level.
            let beta = spec.gate_sharpness;
            let theta = beta / z_level;
            for r in 0..d {
                w_up.set(r, 0, 0.0);
                w_up.set(r, 1, 0.0);
                w_down.set(0, r, 0.0);
                w_down.set(1, r, 0.0);
            }
            w_up.set(W, 0, beta);
            w_up.set(G, 0, beta);
            w_up.set(Z, 0, -theta);
            w_up.set(W, 1, -beta);
            w_up.set(G, 1, beta);
            w_up.set(Z, 1, -theta);
            w_down.set(0, U, spec.marker_gain / beta);
            w_down.set(1, U, -spec.marker_gain / beta);
        }
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq: uniform(&mut rng, d, d, 0.5),
            wk: uniform(&mut rng, d, d, 0.5),
            wv: uniform(&mut rng, d, d, noise),
            wo: uniform(&mut rng, d, d, noise),
            mlp_norm: vec![1.0; d],
            w_up,
            w_down,
        });
    }

    let mut unembed = Tensor2::zeros(d, v);
    for tok in 0..v {
        let t = tok as TokenId;
        if spec.step_tokens.contains(&t) {
            unembed.set(U, tok, spec.response_gain);
        } else if spec.answer_tokens.contains(&t) {
            unembed.set(U, tok, -spec.response_gain);
            unembed.set(Z, tok, spec.answer_bias);
        } else if t == EOS {
            unembed.set(S, tok, 10.0);
            unembed.set(Z, tok, -0.5);
        } else {
            unembed.set(Z, tok, -0.5);
            for r in FIRST_FEATURE..d {
                unembed.set(r, tok, rng.gen_range(-0.1..0.1));
            }
        }
    }
    for t in [BOS, PAD] {
        unembed.set(Z, t as usize, -1.0);
    }

    // Rotate the residual space: canonical row x becomes x·R, where row U
    // of R is the planted direction.
    let canonical_u: Option<Vec<f32>> = spec.planted_direction.clone();
    let mut basis = orthonormal_basis(d, canonical_u.as_deref(), &mut rng);
    // basis[0] is `u` when given; move it to slot U.
    basis.swap(0, U);
    let r = Tensor2::from_vec(d, d, basis.iter().flatten().map(|&x| x as f32).collect())?;
    let rt = transpose(&r);
    let mm = crate::numerics::matmul;

    let weights = Weights {
        tok_embed: mm(&embed, &r)?,
        pos_embed: Tensor2::zeros(cfg.max_seq, d),
        layers: layers
            .into_iter()
            .map(|lw| {
                Ok(LayerWeights {
                    wq: mm(&rt, &lw.wq)?,
                    wk: mm(&rt, &lw.wk)?,
                    wv: mm(&rt, &lw.wv)?,
                    wo: mm(&lw.wo, &r)?,
                    w_up: mm(&rt, &lw.w_up)?,
                    w_down: mm(&lw.w_down, &r)?,
                    ..lw
                })
            })
            .collect::<Result<_>>()?,
        final_norm: vec![1.0; d],
        unembed: mm(&rt, &unembed)?,
    };
    Model::new(cfg, weights)
}

fn transpose(t: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(t.cols(), t.rows());
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            out.set(j, i, t.get(i, j));
        }
    }
    out
}

/// The planted direction of a model built by [`build_planted_model`]:
/// what the step-minus-answer unembedding reads, normalized.
pub fn planted_direction(model: &Model, spec: &PlantedModelSpec) -> Vec<f32> {
    let un = &model.weights().unembed;
    let s = spec.step_tokens[0] as usize;
    let col: Vec<f64> = (0..un.rows()).map(|r| un.get(r, s) as f64).collect();
    let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    col.iter().map(|x| (x / n) as f32).collect()
}

/// Largest step-class logit minus largest answer-class logit.
pub fn step_margin(logits: &[f32], spec: &PlantedModelSpec) -> f32 {
    let best = |set: &[TokenId]| {
        set.iter()
            .map(|&t| logits[t as usize])
            .fold(f32::NEG_INFINITY, f32::max)
    };
    best(&spec.step_tokens) - best(&spec.answer_tokens)
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Output of [`oracle_forward`].
#[derive(Debug, Clone)]
pub struct OracleOutput {
    /// `layers[l][t]` is the block-`l` output at position `t`.
    pub layers: Vec<Vec<Vec<f32>>>,
    /// `logits[t]` over the vocabulary.
    pub logits: Vec<Vec<f32>>,
}

fn o_rmsnorm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let mut ss = 0.0f32;
    for i in 0..x.len() {
        ss += x[i] * x[i];
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    let mut out = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        out[i] = x[i] * inv * gain[i];
    }
    out
}

fn o_vecmat(x: &[f32], m: &Tensor2) -> Vec<f32> {
    let mut out = vec![0.0f32; m.cols()];
    for j in 0..m.cols() {
        let mut acc = 0.0f32;
        for k in 0..m.rows() {
            acc += x[k] * m.get(k, j);
        }
        out[j] = acc;
    }
    out
}

/// Full-sequence forward pass without a cache, hooks or shared kernels.
pub fn oracle_forward(model: &Model, tokens: &[TokenId]) -> OracleOutput {
    let cfg = model.config();
    let w = model.weights();
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let n = tokens.len();

    let mut x: Vec<Vec<f32>> = (0..n)
        .map(|t| {
            let mut row = vec![0.0f32; d];
            for i in 0..d {
                row[i] = w.tok_embed.get(tokens[t] as usize, i) + w.pos_embed.get(t, i);
            }
            row
        })
        .collect();

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let normed: Vec<Vec<f32>> = x.iter().map(|r| o_rmsnorm(r, &lw.attn_norm, cfg.norm_eps)).collect();
        let q: Vec<Vec<f32>> = normed.iter().map(|r| o_vecmat(r, &lw.wq)).collect();
        let k: Vec<Vec<f32>> = normed.iter().map(|r| o_vecmat(r, &lw.wk)).collect();
        let v: Vec<Vec<f32>> = normed.iter().map(|r| o_vecmat(r, &lw.wv)).collect();
        let scale = 1.0 / (hd as f32).sqrt();
        for t in 0..n {
            let mut mixed = vec![0.0f32; d];
            for h in 0..nh {
                let mut w_att = vec![0.0f32; t + 1];
                for j in 0..=t {
                    let mut s = 0.0f32;
                    for i in 0..hd {
                        s += q[t][h * hd + i] * k[j][h * hd + i];
                    }
                    w_att[j] = s * scale;
                }
                let mut mx = f32::NEG_INFINITY;
                for &s in &w_att {
                    mx = mx.max(s);
                }
                let mut total = 0.0f32;
                for s in w_att.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                for s in w_att.iter_mut() {
                    *s /= total;
                }
                for j in 0..=t {
                    for i in 0..hd {
                        mixed[h * hd + i] += w_att[j] * v[j][h * hd + i];
                    }
                }
            }
            let attn = o_vecmat(&mixed, &lw.wo);
            for i in 0..d {
                x[t][i] += attn[i];
            }
        }
        for row in x.iter_mut() {
            let normed = o_rmsnorm(row, &lw.mlp_norm, cfg.norm_eps);
            let mut hidden = o_vecmat(&normed, &lw.w_up);
            for hv in hidden.iter_mut() {
                *hv /= 1.0 + (-*hv).exp();
            }
            let out = o_vecmat(&hidden, &lw.w_down);
            for i in 0..d {
                row[i] += out[i];
            }
        }
        layers.push(x.clone());
    }
    let logits = x
        .iter()
        .map(|r| o_vecmat(&o_rmsnorm(r, &w.final_norm, cfg.norm_eps), &w.unembed))
        .collect();
    OracleOutput { layers, logits }
}

/// Greedy continuation by repeated full forwards. Returns the sequence
/// (prompt plus generated tokens, without a terminating EOS).
pub fn oracle_generate(model: &Model, prompt: &[TokenId], max_new_tokens: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    for _ in 0..max_new_tokens {
        let out = oracle_forward(model, &seq);
        let last = &out.logits[seq.len() - 1];
        let mut best = 0usize;
        for i in 1..last.len() {
            if last[i] > last[best] {
                best = i;
            }
        }
        if best as TokenId == EOS {
            break;
        }
        seq.push(best as TokenId);
    }
    seq
}

fn oracle_mean_activation(model: &Model, text: &str, layer: usize, max_new_tokens: usize) -> Vec<f32> {
    let mut prompt = vec![BOS];
    prompt.extend(text.bytes().map(TokenId::from));
    let seq = oracle_generate(model, &prompt, max_new_tokens);
    let out = oracle_forward(model, &seq);
    let d = model.config().d_model;
    let mut sum = vec![0.0f32; d];
    let mut count = 0usize;
    for (t, &tok) in seq.iter().enumerate() {
        if tok >= 256 {
            continue;
        }
        for i in 0..d {
            sum[i] += out.layers[layer][t][i];
        }
        count += 1;
    }
    sum.iter().map(|&s| s / count as f32).collect()
}

/// Sequential reference for corpus-level derivation at one layer
/// (position policy: all non-special positions, prompt and generated).
pub fn oracle_derive(
    model: &Model,
    corpus: &[Question],
    template: &ContrastTemplate,
    layer: usize,
    max_new_tokens: usize,
) -> Vec<f32> {
    let d = model.config().d_model;
    let mut total = vec![0.0f32; d];
    for q in corpus {
        let (cot, direct) = build_contrast_pair(q, template);
        let a = oracle_mean_activation(model, &cot, layer, max_new_tokens);
        let b = oracle_mean_activation(model, &direct, layer, max_new_tokens);
        for i in 0..d {
            total[i] += a[i] - b[i];
        }
    }
    total.iter().map(|&s| s / corpus.len() as f32).collect()
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with a KV cache and greedy decoding.
//!
//! Blocks are pre-norm: `x += attn(rmsnorm(x))`, then `x += mlp(rmsnorm(x))`
//! with a SiLU MLP. After both residual additions the block output is handed
//! to a [`BlockObserver`], which may modify it in place (injection) and
//! record it (capture) before the next block reads it. The final RMS norm
//! and unembedding come after the last observer call.

mod config;
pub mod tokenizer;
mod weights;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use tokenizer::{TokenId, BOS, EOS, PAD};
pub use weights::{LayerWeights, Weights, WEIGHT_MAGIC, WEIGHT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor2};

/// Which forward pass of a generation session is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// The pass over the whole prompt.
    Prefill,
    /// Decode step `k` (1-based): the pass over the `k`-th generated token.
    Decode(usize),
}

impl Phase {
    /// 0 for prefill, `k` for decode step `k`.
    pub fn step(self) -> usize {
        match self {
            Phase::Prefill => 0,
            Phase::Decode(k) => k,
        }
    }
}

/// Receives every block output during a forward pass.
pub trait BlockObserver {
    /// Called once per forward pass, before the first block.
    fn begin_pass(&mut self, _phase: Phase) {}

    /// `states` holds the block output for absolute positions
    /// `start..start + tokens.len()`.
    fn block_output(&mut self, layer: usize, start: usize, tokens: &[TokenId], states: &mut Tensor2) -> Result<()>;
}

/// Observer that does nothing.
pub struct NoObserver;

impl BlockObserver for NoObserver {
    fn block_output(&mut self, _: usize, _: usize, _: &[TokenId], _: &mut Tensor2) -> Result<()> {
        Ok(())
    }
}

/// Audit entry: which positions a hook touched during one pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionEvent {
    /// 0 = prefill, `k` = decode step `k`.
    pub step: usize,
    pub layer: usize,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_tokens: Vec<TokenId>,
    /// Generated ids; a terminating EOS is not included.
    pub generated_tokens: Vec<TokenId>,
    pub stopped_on_eos: bool,
    pub per_step_injections: Vec<InjectionEvent>,
    pub text: String,
}

impl GenerationRecord {
    /// Total position-instances touched by injection hooks.
    pub fn touched_positions(&self) -> usize {
        self.per_step_injections.iter().map(|e| e.positions.len()).sum()
    }
}

/// Per-layer key/value history for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Immutable weights plus config. `model_id` is a hash of the serialized
/// weights, so it changes iff any weight byte changes.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    model_id: String,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        let body = weights::encode_body(&config, &weights);
        let model_id = hex::encode(&Sha256::digest(&body)[..16]);
        Ok(Self {
            config,
            weights,
            model_id,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = weights::read_file(path.as_ref())?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, weights) = weights::decode(bytes)?;
        Self::new(config, weights)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = weights::encode_body(&self.config, &self.weights);
        let sum = weights::checksum8(&body);
        body.extend_from_slice(&sum);
        body
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Run `tokens` through the model, appending to `cache`. Returns logits
    /// `[tokens.len(), vocab]`.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        cache: &mut KvCache,
        observer: &mut dyn BlockObserver,
    ) -> Result<Tensor2> {
        let cfg = &self.config;
        let start = cache.len;
        let needed = start + tokens.len();
        if needed > cfg.max_seq {
            return Err(Error::SequenceOverflow {
                needed,
                max_seq: cfg.max_seq,
            });
        }
        let d = cfg.d_model;
        let mut x = Tensor2::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::UnknownToken(tok));
            }
            let emb = self.weights.tok_embed.row(tok as usize);
            let pos = self.weights.pos_embed.row(start + i);
            for (o, (e, p)) in x.row_mut(i).iter_mut().zip(emb.iter().zip(pos)) {
                *o = e + p;
            }
        }

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let attn = self.attention(l, lw, &x, start, cache)?;
            x.add_assign(&attn)?;
            let normed = numerics::rmsnorm_rows(&x, &lw.mlp_norm, cfg.norm_eps)?;
            let mut hidden = numerics::matmul(&normed, &lw.w_up)?;
            for h in hidden.data_mut() {
                *h = numerics::silu(*h);
            }
            let mlp = numerics::matmul(&hidden, &lw.w_down)?;
            x.add_assign(&mlp)?;
            observer.block_output(l, start, tokens, &mut x)?;
        }
        cache.len = needed;

        let normed = numerics::rmsnorm_rows(&x, &self.weights.final_norm, cfg.norm_eps)?;
        numerics::matmul(&normed, &self.weights.unembed)
    }

    fn attention(
        &self,
        layer: usize,
        lw: &LayerWeights,
        x: &Tensor2,
        start: usize,
        cache: &mut KvCache,
    ) -> Result<Tensor2> {
        let cfg = &self.config;
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let normed = numerics::rmsnorm_rows(x, &lw.attn_norm, cfg.norm_eps)?;
        let q = numerics::matmul(&normed, &lw.wq)?;
        let k = numerics::matmul(&normed, &lw.wk)?;
        let v = numerics::matmul(&normed, &lw.wv)?;
        cache.keys[layer].extend_from_slice(k.data());
        cache.values[layer].extend_from_slice(v.data());
        let keys = &cache.keys[layer];
        let values = &cache.values[layer];

        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = Tensor2::zeros(x.rows(), d);
        for i in 0..x.rows() {
            let p = start + i;
            for h in 0..cfg.n_heads {
                let off = h * hd;
                let qh = &q.row(i)[off..off + hd];
                let mut scores: Vec<f32> = (0..=p)
                    .map(|j| numerics::dot(qh, &keys[j * d + off..j * d + off + hd]) * scale)
                    .collect();
                numerics::softmax_in_place(&mut scores);
                let orow = &mut out.row_mut(i)[off..off + hd];
                for (j, &w) in scores.iter().enumerate() {
                    for (o, &vv) in orow.iter_mut().zip(&values[j * d + off..j * d + off + hd]) {
                        *o += w * vv;
                    }
                }
            }
        }
        numerics::matmul(&out, &lw.wo)
    }

    /// Greedy generation with an observer seeing every pass. Each generated
    /// token is itself run through the model (so its activations exist);
    /// a generated EOS ends the session and is not recorded.
    pub fn generate_observed(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
        observer: &mut dyn BlockObserver,
    ) -> Result<(Vec<TokenId>, bool)> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let needed = prompt.len() + max_new_tokens;
        if needed > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                needed,
                max_seq: self.config.max_seq,
            });
        }
        let mut cache = KvCache::new(&self.config);
        observer.begin_pass(Phase::Prefill);
        let mut logits = self.forward(prompt, &mut cache, observer)?;
        let mut generated = Vec::new();
        let mut stopped = false;
        while generated.len() < max_new_tokens {
            let next = argmax(logits.row(logits.rows() - 1));
            if next == EOS {
                stopped = true;
                break;
            }
            generated.push(next);
            observer.begin_pass(Phase::Decode(generated.len()));
            logits = self.forward(&[next], &mut cache, observer)?;
        }
        Ok((generated, stopped))
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = weights::read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        message: "file is not valid UTF-8".into(),
    })
}

pub(crate) use weights::{checksum8, read_file, verify_envelope, Reader};

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight tensors and the `STWT` weight file format.
//!
//! Layout (all integers `u32` little-endian, floats `f32` little-endian):
//!
//! ```text
//! "STWT" | version=1
//! n_layers | d_model | n_heads | d_ff | vocab_size | max_seq | norm_eps(f32)
//! tensor_count
//! repeated: name_len | name (UTF-8) | ndim | dims... | data
//! checksum: first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub const WEIGHT_MAGIC: &[u8; 4] = b"STWT";
pub const WEIGHT_VERSION: u32 = 1;

/// Activations are row vectors, so projections are `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
    pub wo: Tensor2,
    pub mlp_norm: Vec<f32>,
    /// `[d_model, d_ff]`
    pub w_up: Tensor2,
    /// `[d_ff, d_model]`
    pub w_down: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab, d_model]`
    pub tok_embed: Tensor2,
    /// `[max_seq, d_model]`
    pub pos_embed: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[d_model, vocab]`
    pub unembed: Tensor2,
}

struct NamedTensor<'a> {
    name: String,
    dims: Vec<usize>,
    data: &'a [f32],
}

fn named<'a>(name: impl Into<String>, t: &'a Tensor2) -> NamedTensor<'a> {
    NamedTensor {
        name: name.into(),
        dims: vec![t.rows(), t.cols()],
        data: t.data(),
    }
}

fn named_vec<'a>(name: impl Into<String>, v: &'a [f32]) -> NamedTensor<'a> {
    NamedTensor {
        name: name.into(),
        dims: vec![v.len()],
        data: v,
    }
}

impl Weights {
    /// Tensors in canonical file order.
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = vec![named("tok_embed", &self.tok_embed), named("pos_embed", &self.pos_embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(named_vec(format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push(named(format!("layers.{i}.wq"), &l.wq));
            out.push(named(format!("layers.{i}.wk"), &l.wk));
            out.push(named(format!("layers.{i}.wv"), &l.wv));
            out.push(named(format!("layers.{i}.wo"), &l.wo));
            out.push(named_vec(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push(named(format!("layers.{i}.w_up"), &l.w_up));
            out.push(named(format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(named_vec("final_norm", &self.final_norm));
        out.push(named("unembed", &self.unembed));
        out
    }

    /// Check every tensor against the config.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        if self.layers.len() != cfg.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layer blocks for n_layers={}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            ("tok_embed".into(), vec![v, d]),
            ("pos_embed".into(), vec![cfg.max_seq, d]),
        ];
        for i in 0..cfg.n_layers {
            for (n, s) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm", vec![d]),
                ("w_up", vec![d, f]),
                ("w_down", vec![f, d]),
            ] {
                expected.push((format!("layers.{i}.{n}"), s));
            }
        }
        expected.push(("final_norm".into(), vec![d]));
        expected.push(("unembed".into(), vec![d, v]));

        for (t, (name, dims)) in self.tensors().iter().zip(&expected) {
            debug_assert_eq!(&t.name, name);
            if &t.dims != dims {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has shape {:?}, config requires {dims:?}",
                    t.dims
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::ShapeMismatch(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serialized body (everything except the checksum).
pub(crate) fn encode_body(cfg: &ModelConfig, w: &Weights) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_seq,
    ] {
        put_u32(&mut buf, v);
    }
    buf.extend_from_slice(&cfg.norm_eps.to_le_bytes());
    let tensors = w.tensors();
    put_u32(&mut buf, tensors.len());
    for t in tensors {
        put_u32(&mut buf, t.name.len());
        buf.extend_from_slice(t.name.as_bytes());
        put_u32(&mut buf, t.dims.len());
        for &d in &t.dims {
            put_u32(&mut buf, d);
        }
        for x in t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub(crate) fn checksum8(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Validate magic, version and checksum; return the body without the checksum.
pub(crate) fn verify_envelope<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
    what: &'static str,
) -> Result<&'a [u8]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::CorruptPayload {
            what,
            detail: format!("file is only {} bytes", bytes.len()),
        });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::UnsupportedVersion {
            expected: version,
            found,
        });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if checksum8(body) != sum {
        return Err(Error::CorruptPayload {
            what,
            detail: "checksum mismatch (truncated or modified file)".into(),
        });
    }
    Ok(body)
}

/// Little-endian cursor over a verified body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], pos: usize, what: &'static str) -> Self {
        Self { buf, pos, what }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptPayload {
                what: self.what,
                detail: format!("unexpected end of data at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::CorruptPayload {
            what: self.what,
            detail: "tensor size overflows".into(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    let body = verify_envelope(bytes, WEIGHT_MAGIC, WEIGHT_VERSION, "weight")?;
    let mut r = Reader::new(body, 8, "weight");
    let cfg = ModelConfig {
        n_layers: r.u32()?,
        d_model: r.u32()?,
        n_heads: r.u32()?,
        d_ff: r.u32()?,
        vocab_size: r.u32()?,
        max_seq: r.u32()?,
        norm_eps: r.f32()?,
    };
    cfg.validate()?;

    let count = r.u32()?;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::CorruptPayload {
                what: "weight",
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let data = r.f32s(n)?;
        tensors.insert(name, (dims, data));
    }
    if !r.finished() {
        return Err(Error::CorruptPayload {
            what: "weight",
            detail: "trailing bytes after last tensor".into(),
        });
    }

    let mut table = TensorTable(tensors);
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let tok_embed = table.matrix("tok_embed", v, d)?;
    let pos_embed = table.matrix("pos_embed", cfg.max_seq, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        layers.push(LayerWeights {
            attn_norm: table.vector(&p("attn_norm"), d)?,
            wq: table.matrix(&p("wq"), d, d)?,
            wk: table.matrix(&p("wk"), d, d)?,
            wv: table.matrix(&p("wv"), d, d)?,
            wo: table.matrix(&p("wo"), d, d)?,
            mlp_norm: table.vector(&p("mlp_norm"), d)?,
            w_up: table.matrix(&p("w_up"), d, f)?,
            w_down: table.matrix(&p("w_down"), f, d)?,
        });
    }
    let final_norm = table.vector("final_norm", d)?;
    let unembed = table.matrix("unembed", d, v)?;
    if let Some(extra) = table.0.keys().next() {
        return Err(Error::ShapeMismatch(format!("unexpected tensor {extra}")));
    }
    let weights = Weights {
        tok_embed,
        pos_embed,
        layers,
        final_norm,
        unembed,
    };
    weights.check_shapes(&cfg)?;
    Ok((cfg, weights))
}

struct TensorTable(std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>);

impl TensorTable {
    fn take(&mut self, name: &str, want: &[usize]) -> Result<Vec<f32>> {
        let (dims, data) = self
            .0
            .remove(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
        if dims != want {
            return Err(Error::ShapeMismatch(format!(
                "{name} has shape {dims:?}, config requires {want:?}"
            )));
        }
        Ok(data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor2> {
        Tensor2::from_vec(rows, cols, self.take(name, &[rows, cols])?)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        self.take(name, &[len])
    }
}

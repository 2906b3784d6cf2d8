// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive steering-vector derivation and the `STRV` vector file.
//!
//! For each question the model is run greedily on the chain-of-thought and
//! the direct variant of the prompt. The block outputs at one layer are
//! averaged over token positions (prompt and generated, specials dropped by
//! default) and the direct mean is subtracted from the chain-of-thought
//! mean. The steering vector is the unweighted mean of these per-question
//! differences over the corpus.
//!
//! Captures for different questions may run on several threads; the
//! reduction always runs on one thread in corpus order, so the result is
//! bit-identical for any worker count.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_contrast_pair, corpus_fingerprint, ContrastTemplate, Question};
use crate::error::{Error, Result};
use crate::instrumentation::{capture, ActivationTrace, PositionPolicy, TapSpec};
use crate::model::tokenizer::encode_prompt;
use crate::model::{checksum8, read_file, verify_envelope, Model, Reader};
use crate::numerics;

pub const VECTOR_MAGIC: &[u8; 4] = b"STRV";
pub const VECTOR_VERSION: u32 = 1;
pub const SET_MANIFEST: &str = "set.json";

/// Where a vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    /// Layer count of the source model, for display as `layer/total`.
    pub n_layers: usize,
    pub template: ContrastTemplate,
    pub template_fingerprint: String,
    pub corpus_fingerprint: String,
    pub n_questions: usize,
    pub position_policy: PositionPolicy,
    pub max_new_tokens: usize,
    /// Left empty by [`derive`] so that files are reproducible.
    #[serde(default)]
    pub created: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layer: usize,
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl SteeringVector {
    pub fn norm(&self) -> f32 {
        numerics::l2_norm(&self.values)
    }

    pub fn d_model(&self) -> usize {
        self.values.len()
    }

    /// Check that this vector can be injected into `model`. A model id
    /// mismatch is an error unless `force`, in which case a warning is
    /// returned instead. A width mismatch is always an error.
    pub fn check_compatible(&self, model: &Model, force: bool) -> Result<Option<String>> {
        if self.values.len() != model.config().d_model {
            return Err(Error::DimensionMismatch(format!(
                "vector has d_model {}, model has {}",
                self.values.len(),
                model.config().d_model
            )));
        }
        model.config().check_layer(self.layer)?;
        if self.provenance.model_id != model.model_id() {
            if !force {
                return Err(Error::ModelMismatch {
                    expected: self.provenance.model_id.clone(),
                    found: model.model_id().to_string(),
                });
            }
            return Ok(Some(format!(
                "vector was derived from model {} but is applied to {}",
                self.provenance.model_id,
                model.model_id()
            )));
        }
        Ok(None)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let prov = serde_json::to_vec(&self.provenance).expect("provenance serializes");
        let mut buf = Vec::with_capacity(24 + prov.len() + 4 * self.values.len());
        buf.extend_from_slice(VECTOR_MAGIC);
        buf.extend_from_slice(&VECTOR_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layer as u32).to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(prov.len() as u32).to_le_bytes());
        buf.extend_from_slice(&prov);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum8(&buf);
        buf.extend_from_slice(&sum);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verify_envelope(bytes, VECTOR_MAGIC, VECTOR_VERSION, "vector")?;
        let mut r = Reader::new(body, 8, "vector");
        let layer = r.u32()?;
        let d_model = r.u32()?;
        let prov_len = r.u32()?;
        let provenance: Provenance = serde_json::from_slice(r.bytes(prov_len)?)?;
        let values = r.f32s(d_model)?;
        if !r.finished() {
            return Err(Error::CorruptPayload {
                what: "vector",
                detail: "trailing bytes after payload".into(),
            });
        }
        Ok(Self {
            layer,
            values,
            provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// One vector per layer, sorted by layer, from a single derivation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectorSet {
    pub vectors: Vec<SteeringVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEntry {
    pub layer: usize,
    pub file: String,
    pub norm: f32,
}

/// `set.json` inside a vector-set directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetManifest {
    pub provenance: Provenance,
    pub entries: Vec<SetEntry>,
}

impl SteeringVectorSet {
    pub fn layers(&self) -> Vec<usize> {
        self.vectors.iter().map(|v| v.layer).collect()
    }

    pub fn get(&self, layer: usize) -> Option<&SteeringVector> {
        self.vectors.iter().find(|v| v.layer == layer)
    }

    pub fn file_name(layer: usize) -> String {
        format!("layer_{layer:03}.strv")
    }

    pub fn manifest(&self) -> Result<SetManifest> {
        let first = self
            .vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty vector set".into()))?;
        Ok(SetManifest {
            provenance: first.provenance.clone(),
            entries: self
                .vectors
                .iter()
                .map(|v| SetEntry {
                    layer: v.layer,
                    file: Self::file_name(v.layer),
                    norm: v.norm(),
                })
                .collect(),
        })
    }

    /// Write one `STRV` file per layer plus `set.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for v in &self.vectors {
            v.save(dir.join(Self::file_name(v.layer)))?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest()?)?;
        std::fs::write(dir.join(SET_MANIFEST), manifest + "\n")?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = crate::model::read_text(&dir.join(SET_MANIFEST))?;
        let manifest: SetManifest = serde_json::from_str(&text)?;
        let mut vectors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let v = SteeringVector::load(dir.join(&e.file))?;
            if v.layer != e.layer {
                return Err(Error::InvalidItem(format!(
                    "{} holds layer {}, manifest says {}",
                    e.file, v.layer, e.layer
                )));
            }
            vectors.push(v);
        }
        let layers: Vec<usize> = vectors.iter().map(|v| v.layer).collect();
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidItem("set layers must be distinct and sorted".into()));
        }
        Ok(Self { vectors })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeriveOptions {
    pub max_new_tokens: usize,
    pub position_policy: PositionPolicy,
    /// Worker threads for per-question captures; 0 uses rayon's default.
    pub jobs: usize,
}

impl Default for DeriveOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            position_policy: PositionPolicy::ExcludeSpecial,
            jobs: 1,
        }
    }
}

/// Mean over the trace's positions, summed left to right.
pub fn mean_activation(trace: &ActivationTrace) -> Result<Vec<f32>> {
    let first = trace.vectors.first().ok_or(Error::EmptyTrace(trace.layer))?;
    let mut sum = vec![0.0f32; first.len()];
    for v in &trace.vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = trace.vectors.len() as f32;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Per-layer mean activations for one prompt (BOS is prepended).
fn prompt_means(model: &Model, text: &str, layers: &[usize], opts: &DeriveOptions) -> Result<Vec<Vec<f32>>> {
    let taps: Vec<TapSpec> = layers.iter().map(|&l| TapSpec::new(l, opts.position_policy)).collect();
    let (_, traces) = capture(model, &encode_prompt(text), &taps, opts.max_new_tokens)?;
    layers
        .iter()
        .map(|&l| {
            let merged = ActivationTrace::concat(traces.iter().filter(|t| t.layer == l))?;
            mean_activation(&merged)
        })
        .collect()
}

/// `mean(chain-of-thought) − mean(direct)` at each of `layers`.
pub fn question_vectors(
    model: &Model,
    q: &Question,
    t: &ContrastTemplate,
    layers: &[usize],
    opts: &DeriveOptions,
) -> Result<Vec<Vec<f32>>> {
    for &l in layers {
        model.config().check_layer(l)?;
    }
    let (cot, direct) = build_contrast_pair(q, t);
    let a = prompt_means(model, &cot, layers, opts)?;
    let b = prompt_means(model, &direct, layers, opts)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect())
}

/// The per-question difference vector at a single layer.
pub fn question_vector(
    model: &Model,
    q: &Question,
    t: &ContrastTemplate,
    layer: usize,
    opts: &DeriveOptions,
) -> Result<Vec<f32>> {
    Ok(question_vectors(model, q, t, &[layer], opts)?.remove(0))
}

/// Derive one steering vector per layer from `corpus`.
pub fn derive(
    model: &Model,
    corpus: &[Question],
    template: &ContrastTemplate,
    layers: &[usize],
    opts: &DeriveOptions,
) -> Result<SteeringVectorSet> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers requested".into()));
    }
    for &l in &layers {
        model.config().check_layer(l)?;
    }

    let per_question = |q: &Question| {
        question_vectors(model, q, template, &layers, opts).map_err(|e| Error::Question {
            id: q.id.clone(),
            source: Box::new(e),
        })
    };
    let results: Vec<Result<Vec<Vec<f32>>>> = if opts.jobs == 1 {
        corpus.iter().map(per_question).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| corpus.par_iter().map(per_question).collect())
    };

    let d = model.config().d_model;
    let mut sums = vec![vec![0.0f32; d]; layers.len()];
    for r in results {
        let vs = r?;
        for (sum, v) in sums.iter_mut().zip(&vs) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
    }
    let n = corpus.len() as f32;
    let provenance = Provenance {
        model_id: model.model_id().to_string(),
        n_layers: model.config().n_layers,
        template: template.clone(),
        template_fingerprint: template.fingerprint(),
        corpus_fingerprint: corpus_fingerprint(corpus),
        n_questions: corpus.len(),
        position_policy: opts.position_policy,
        max_new_tokens: opts.max_new_tokens,
        created: None,
    };
    Ok(SteeringVectorSet {
        vectors: layers
            .iter()
            .zip(sums)
            .map(|(&layer, sum)| SteeringVector {
                layer,
                values: sum.into_iter().map(|s| s / n).collect(),
                provenance: provenance.clone(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{demo_corpus, SourceTag};
    use crate::model::Phase;
    use crate::synthetic::{random_model, small_config};

    fn trace(vectors: Vec<Vec<f32>>) -> ActivationTrace {
        ActivationTrace {
            layer: 0,
            positions: (0..vectors.len()).collect(),
            vectors,
            source_model_id: "m".into(),
            phase: Phase::Prefill,
        }
    }

    #[test]
    fn mean_cases() {
        assert_eq!(mean_activation(&trace(vec![vec![1.5, -2.0]])).unwrap(), vec![1.5, -2.0]);
        assert_eq!(
            mean_activation(&trace(vec![vec![1.0, 0.0], vec![3.0, 4.0]])).unwrap(),
            vec![2.0, 2.0]
        );
        assert!(matches!(mean_activation(&trace(vec![])), Err(Error::EmptyTrace(0))));
    }

    #[test]
    fn mean_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let vs: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let got = mean_activation(&trace(vs.clone())).unwrap();
        for i in 0..8 {
            let want: f64 = vs.iter().map(|v| v[i] as f64).sum::<f64>() / 10.0;
            assert!((got[i] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    fn q(id: &str, text: &str) -> Question {
        Question {
            id: id.into(),
            text: text.into(),
            source_tag: SourceTag::Custom,
        }
    }

    fn opts() -> DeriveOptions {
        DeriveOptions {
            max_new_tokens: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_law_and_antisymmetry() {
        let m = random_model(&small_config(), 21);
        let t = ContrastTemplate::default();
        let question = q("a", "Is 9 odd?");
        let v = question_vector(&m, &question, &t, 1, &opts()).unwrap();
        let w = question_vector(&m, &question, &t.swapped(), 1, &opts()).unwrap();
        assert!(v.iter().zip(&w).all(|(a, b)| *a == -*b));

        let same = ContrastTemplate {
            direct_suffix: t.cot_suffix.clone(),
            ..t
        };
        let z = question_vector(&m, &question, &same, 0, &opts()).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_question_and_duplication() {
        let m = random_model(&small_config(), 22);
        let t = ContrastTemplate::default();
        let corpus = vec![q("a", "What is 1+1?"), q("b", "Name a color.")];
        let one = derive(&m, &corpus[..1], &t, &[0, 1], &opts()).unwrap();
        for (l, sv) in one.vectors.iter().enumerate() {
            assert_eq!(sv.values, question_vector(&m, &corpus[0], &t, l, &opts()).unwrap());
        }

        let base = derive(&m, &corpus, &t, &[1], &opts()).unwrap();
        let doubled: Vec<Question> = corpus
            .iter()
            .chain(&corpus)
            .enumerate()
            .map(|(i, x)| q(&format!("{}{i}", x.id), &x.text))
            .collect();
        let dup = derive(&m, &doubled, &t, &[1], &opts()).unwrap();
        for (a, b) in base.vectors[0].values.iter().zip(&dup.vectors[0].values) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn derive_errors() {
        let m = random_model(&small_config(), 23);
        let t = ContrastTemplate::default();
        assert!(derive(&m, &[], &t, &[0], &opts()).is_err());
        assert!(matches!(
            derive(&m, &demo_corpus(), &t, &[5], &opts()),
            Err(Error::InvalidLayer { layer: 5, .. })
        ));
        // A question too long for max_seq names the question.
        let long = q("too-long", &"x".repeat(200));
        match derive(&m, &[long], &t, &[0], &opts()) {
            Err(Error::Question { id, .. }) => assert_eq!(id, "too-long"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jobs_do_not_change_bits() {
        let m = random_model(&small_config(), 24);
        let t = ContrastTemplate::default();
        let corpus = demo_corpus();
        let one = derive(&m, &corpus, &t, &[0, 1], &opts()).unwrap();
        let four = derive(&m, &corpus, &t, &[0, 1], &DeriveOptions { jobs: 4, ..opts() }).unwrap();
        for (a, b) in one.vectors.iter().zip(&four.vectors) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let m = random_model(&small_config(), 25);
        let set = derive(&m, &demo_corpus()[..2], &ContrastTemplate::default(), &[0, 1], &opts()).unwrap();
        let sv = &set.vectors[1];
        let bytes = sv.to_bytes();
        let back = SteeringVector::from_bytes(&bytes).unwrap();
        assert_eq!(&back, sv);
        assert_eq!(back.to_bytes(), bytes);

        let mut flipped = bytes.clone();
        let idx = bytes.len() - 12;
        flipped[idx] ^= 0x40;
        assert!(matches!(
            SteeringVector::from_bytes(&flipped),
            Err(Error::CorruptPayload { what: "vector", .. })
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            SteeringVector::from_bytes(&wrong_version),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let loaded = SteeringVectorSet::load_dir(dir.path()).unwrap();
        assert_eq!(loaded, set);
    }

    #[test]
    fn use_site_checks() {
        let a = random_model(&small_config(), 26);
        let b = random_model(&small_config(), 27);
        let set = derive(&a, &demo_corpus()[..1], &ContrastTemplate::default(), &[0], &opts()).unwrap();
        let sv = &set.vectors[0];
        assert!(sv.check_compatible(&a, false).unwrap().is_none());
        assert!(matches!(
            sv.check_compatible(&b, false),
            Err(Error::ModelMismatch { .. })
        ));
        assert!(sv.check_compatible(&b, true).unwrap().is_some());

        let mut narrow = sv.clone();
        narrow.values.truncate(4);
        assert!(matches!(
            narrow.check_compatible(&a, true),
            Err(Error::DimensionMismatch(_))
        ));
    }
}

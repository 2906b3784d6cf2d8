// SPDX-License-Identifier: MIT OR Apache-2.0

//! Question corpora and contrastive prompt pairs.
//!
//! A corpus is a JSONL file, one question per line:
//!
//! ```json
//! {"id": "q1", "text": "What is 2+2?", "source_tag": "gsm8k"}
//! ```
//!
//! `source_tag` is optional and defaults to `custom`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "bigbench-lite")]
    BigBenchLite,
    #[serde(rename = "mmlu")]
    Mmlu,
    #[serde(rename = "gsm8k")]
    Gsm8k,
    #[default]
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source_tag: SourceTag,
}

pub const DEFAULT_COT_SUFFIX: &str = "Answer the question thinking step by step.";
pub const DEFAULT_DIRECT_SUFFIX: &str = "Answer the question immediately, without any elaboration.";

/// How a question and a suffix are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinFormat {
    /// `question + "\n" + suffix`
    #[default]
    Newline,
    /// `question + " " + suffix`
    Space,
}

impl JoinFormat {
    pub fn join(self, question: &str, suffix: &str) -> String {
        let sep = match self {
            JoinFormat::Newline => "\n",
            JoinFormat::Space => " ",
        };
        format!("{question}{sep}{suffix}")
    }
}

/// The two instructions whose activation difference defines the direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastTemplate {
    pub cot_suffix: String,
    pub direct_suffix: String,
    #[serde(default)]
    pub join_format: JoinFormat,
}

impl Default for ContrastTemplate {
    fn default() -> Self {
        Self {
            cot_suffix: DEFAULT_COT_SUFFIX.into(),
            direct_suffix: DEFAULT_DIRECT_SUFFIX.into(),
            join_format: JoinFormat::Newline,
        }
    }
}

impl ContrastTemplate {
    /// Template with the two suffixes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            cot_suffix: self.direct_suffix.clone(),
            direct_suffix: self.cot_suffix.clone(),
            join_format: self.join_format,
        }
    }

    /// True when the suffixes differ. Identical suffixes are accepted (they
    /// derive an all-zero vector) but are not a useful contrast.
    pub fn is_contrastive(&self) -> bool {
        self.cot_suffix != self.direct_suffix
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("template serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// `(q_cot, q_direct)`: the question text followed by each suffix.
pub fn build_contrast_pair(q: &Question, t: &ContrastTemplate) -> (String, String) {
    (
        t.join_format.join(&q.text, &t.cot_suffix),
        t.join_format.join(&q.text, &t.direct_suffix),
    )
}

/// Hash of the corpus ids in order.
pub fn corpus_fingerprint(corpus: &[Question]) -> String {
    let mut h = Sha256::new();
    for q in corpus {
        h.update(q.id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn parse_corpus(text: &str, file: &str) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if q.text.is_empty() {
            return Err(Error::Parse {
                file: file.to_string(),
                line: line_no,
                message: format!("question {:?} has empty text", q.id),
            });
        }
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

/// Load a JSONL corpus, preserving file order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let text = crate::model::read_text(path)?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn corpus_to_jsonl(corpus: &[Question]) -> String {
    let mut s = String::new();
    for q in corpus {
        s.push_str(&serde_json::to_string(q).expect("question serializes"));
        s.push('\n');
    }
    s
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Question]) -> Result<()> {
    std::fs::write(path, corpus_to_jsonl(corpus))?;
    Ok(())
}

/// One row of a corpus recipe: how many questions come from which source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeEntry {
    pub source_tag: SourceTag,
    pub count: usize,
    pub rule: String,
}

/// Description of how a derivation corpus is assembled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecipe {
    pub name: String,
    pub entries: Vec<RecipeEntry>,
}

impl CorpusRecipe {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let recipe: CorpusRecipe = serde_json::from_str(&crate::model::read_text(path)?)?;
        let mut tags = HashSet::new();
        for e in &recipe.entries {
            if !tags.insert(e.source_tag) {
                return Err(Error::InvalidItem(format!(
                    "recipe lists source {:?} twice",
                    e.source_tag
                )));
            }
        }
        Ok(recipe)
    }

    /// Check that `corpus` has exactly the per-source counts of the recipe.
    pub fn check(&self, corpus: &[Question]) -> Result<()> {
        for e in &self.entries {
            let n = corpus.iter().filter(|q| q.source_tag == e.source_tag).count();
            if n != e.count {
                return Err(Error::InvalidItem(format!(
                    "recipe {:?} wants {} {:?} questions, corpus has {n}",
                    self.name, e.count, e.source_tag
                )));
            }
        }
        if corpus.len() != self.total() {
            return Err(Error::InvalidItem(format!(
                "recipe {:?} totals {}, corpus has {}",
                self.name,
                self.total(),
                corpus.len()
            )));
        }
        Ok(())
    }
}

/// Twenty short arithmetic and logic questions used by tests and demos.
pub fn demo_corpus() -> Vec<Question> {
    const TEXTS: [&str; 20] = [
        "What is 12 plus 7?",
        "What is 9 times 6?",
        "If Tom has 5 apples and eats 2, how many are left?",
        "What is 100 minus 37?",
        "Is 17 a prime number?",
        "What is half of 48?",
        "If all cats are animals and Tom is a cat, is Tom an animal?",
        "What is 3 squared plus 4 squared?",
        "How many minutes are in 3 hours?",
        "What is the next number: 2, 4, 8, 16?",
        "A train travels 60 km in 1 hour. How far in 4 hours?",
        "What is 81 divided by 9?",
        "Which is larger, 0.5 or 0.45?",
        "If today is Monday, what day is it in 3 days?",
        "What is 15 percent of 200?",
        "Sara is older than Ben and Ben is older than Kim. Who is youngest?",
        "What is 7 plus 8 minus 5?",
        "How many legs do 4 dogs have?",
        "What is the sum of the first five odd numbers?",
        "If x plus 3 equals 10, what is x?",
    ];
    TEXTS
        .iter()
        .enumerate()
        .map(|(i, t)| Question {
            id: format!("demo-{:02}", i + 1),
            text: (*t).to_string(),
            source_tag: SourceTag::Custom,
        })
        .collect()
}

/// The composition used for the reference steering corpus: three Big-Bench
/// Lite questions per category, two MMLU dev questions per subject, and 100
/// GSM8K training questions.
pub fn reference_recipe() -> CorpusRecipe {
    CorpusRecipe {
        name: "reference-cot-corpus".into(),
        entries: vec![
            RecipeEntry {
                source_tag: SourceTag::BigBenchLite,
                count: 72,
                rule: "3 questions per Big-Bench Lite category".into(),
            },
            RecipeEntry {
                source_tag: SourceTag::Mmlu,
                count: 125,
                rule: "2 questions per MMLU subject from the dev split".into(),
            },
            RecipeEntry {
                source_tag: SourceTag::Gsm8k,
                count: 100,
                rule: "100 questions from the GSM8K training split".into(),
            },
        ],
    }
}

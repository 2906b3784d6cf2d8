// SPDX-License-Identifier: MIT OR Apache-2.0

//! Benchmark harness: datasets, answer extraction, scoring and tables.
//!
//! Evaluation is zero-shot. Each item is rendered to a prompt, generated
//! greedily under one of four [`Mode`]s, and the last answer-looking span of
//! the output is compared with the gold answer. Accuracies are exact
//! rationals; rounding happens only when rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{JoinFormat, Question, DEFAULT_COT_SUFFIX};
use crate::error::{Error, Result};
use crate::injection::{check_vector, InjectionSpec, Strategy};
use crate::instrumentation::generate;
use crate::model::tokenizer::encode_prompt;
use crate::model::Model;
use crate::steering::SteeringVector;

/// Version tag of the extraction rules, part of every report fingerprint.
pub const EXTRACTION_VERSION: &str = "extract-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    MultipleChoice,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub id: String,
    pub question: String,
    pub kind: ItemKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<Choice>,
    pub gold: String,
}

impl EvalItem {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidItem(format!("item {}: {m}", self.id)));
        if self.id.is_empty() {
            return Err(Error::InvalidItem("item with empty id".into()));
        }
        match self.kind {
            ItemKind::MultipleChoice => {
                if !(2..=8).contains(&self.choices.len()) {
                    return bad(format!("{} choices, expected 2 to 8", self.choices.len()));
                }
                let mut seen = HashSet::new();
                for c in &self.choices {
                    let ok = c.label.len() == 1 && c.label.as_bytes()[0].is_ascii_alphabetic();
                    if !ok {
                        return bad(format!("choice label {:?} is not a single letter", c.label));
                    }
                    if !seen.insert(c.label.to_ascii_uppercase()) {
                        return bad(format!("duplicate choice label {:?}", c.label));
                    }
                }
                if !seen.contains(&self.gold.to_ascii_uppercase()) {
                    return bad(format!("gold label {:?} is not among the choices", self.gold));
                }
            }
            ItemKind::Numeric => {
                if !self.choices.is_empty() {
                    return bad("numeric items take no choices".into());
                }
                if normalize_number(&self.gold).is_none() {
                    return bad(format!("gold {:?} is not a decimal number", self.gold));
                }
            }
        }
        Ok(())
    }

    /// Gold answer in canonical form.
    pub fn canonical_gold(&self) -> String {
        match self.kind {
            ItemKind::MultipleChoice => self.gold.to_ascii_uppercase(),
            ItemKind::Numeric => normalize_number(&self.gold).unwrap_or_default(),
        }
    }

    /// The prompt shown to the model, before any mode-specific suffix.
    pub fn render(&self) -> String {
        let mut s = self.question.clone();
        for c in &self.choices {
            let _ = write!(s, "\n({}) {}", c.label.to_ascii_uppercase(), c.text);
        }
        s
    }
}

/// Parse a JSONL dataset. Blank lines are skipped.
pub fn parse_dataset(text: &str, file: &str) -> Result<Vec<EvalItem>> {
    let mut items: Vec<EvalItem> = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: file.to_string(),
            line: i + 1,
            message,
        };
        let item: EvalItem = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        item.validate().map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(item.id.clone()) {
            return Err(Error::DuplicateId(format!("{} (line {})", item.id, i + 1)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EvalItem>> {
    let path = path.as_ref();
    parse_dataset(&crate::model::read_text(path)?, &path.display().to_string())
}

pub fn dataset_to_jsonl(items: &[EvalItem]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("item serializes") + "\n")
        .collect()
}

pub fn dataset_fingerprint(items: &[EvalItem]) -> String {
    hex::encode(&Sha256::digest(dataset_to_jsonl(items).as_bytes())[..16])
}

/// Twenty one-step arithmetic questions whose answers are 0 or 1.
pub fn demo_dataset() -> Vec<EvalItem> {
    let mut items = Vec::with_capacity(20);
    for i in 0..20u32 {
        let a = 2 + i % 7;
        let (question, gold) = match i % 5 {
            0 => (format!("What is {a} minus {}?", a - 1), 1),
            1 => (format!("What is {a} times 0?"), 0),
            2 => (format!("What is {a} divided by {a}?"), 1),
            3 => (format!("What is {a} minus {a}?"), 0),
            _ => (format!("What is 1 to the power {a}?"), 1),
        };
        items.push(EvalItem {
            id: format!("arith-{:02}", i + 1),
            question,
            kind: ItemKind::Numeric,
            choices: Vec::new(),
            gold: gold.to_string(),
        });
    }
    items
}

fn mc_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\(([a-z])\)|\banswer\s+is\s*:?\s*\(?([a-z])\b").expect("valid regex"))
}

fn number_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|-?\.\d+").expect("valid regex"))
}

/// Canonical decimal form: no commas, no leading zeros in the integer part,
/// no trailing zeros in the fraction, no negative zero.
pub fn normalize_number(s: &str) -> Option<String> {
    let s = s.trim().replace(',', "");
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(&s)),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if body.ends_with('.') {
        return None;
    }
    let int = int.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let mut out = String::new();
    if neg && !(int == "0" && frac.is_empty()) {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

/// The last answer in `text`, in canonical form.
///
/// Multiple choice: the last `(X)` or `answer is X` (case-insensitive),
/// returned upper-case. Numeric: the last number, normalized.
pub fn extract_answer(text: &str, kind: ItemKind) -> Option<String> {
    match kind {
        ItemKind::MultipleChoice => mc_regex()
            .captures_iter(text)
            .last()
            .and_then(|c| c.get(1).or_else(|| c.get(2)).map(|m| m.as_str().to_ascii_uppercase())),
        ItemKind::Numeric => number_regex()
            .find_iter(text)
            .last()
            .and_then(|m| normalize_number(m.as_str())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    CotPrompted,
    Single,
    Continuous,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::CotPrompted, Mode::Single, Mode::Continuous];

    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "Baseline",
            Mode::CotPrompted => "CoT Prompted",
            Mode::Single => "Single Injection",
            Mode::Continuous => "Continuous Injection",
        }
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Mode::Single => Some(Strategy::Single),
            Mode::Continuous => Some(Strategy::Continuous),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::CotPrompted => "cot_prompted",
            Mode::Single => "single",
            Mode::Continuous => "continuous",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected baseline, cot_prompted, single or continuous)"
            ))
        })
    }
}

/// Inputs of [`run_eval`] besides the model and items.
#[derive(Debug, Clone)]
pub struct EvalConfig<'a> {
    pub dataset_id: String,
    pub mode: Mode,
    /// Required for the steered modes, rejected otherwise.
    pub steering: Option<(&'a SteeringVector, InjectionSpec)>,
    /// Instruction appended in `cot_prompted` mode.
    pub cot_prompt: String,
    pub join: JoinFormat,
    pub max_new_tokens: usize,
    pub jobs: usize,
    /// Allow a vector derived from a different model.
    pub force: bool,
}

impl<'a> EvalConfig<'a> {
    pub fn new(dataset_id: impl Into<String>, mode: Mode) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            mode,
            steering: None,
            cot_prompt: DEFAULT_COT_SUFFIX.to_string(),
            join: JoinFormat::Newline,
            max_new_tokens: 64,
            jobs: 1,
            force: false,
        }
    }

    pub fn with_steering(mut self, sv: &'a SteeringVector, spec: InjectionSpec) -> Self {
        self.steering = Some((sv, spec));
        self
    }

    fn prompt(&self, item: &EvalItem) -> String {
        let base = item.render();
        match self.mode {
            Mode::CotPrompted => self.join.join(&base, &self.cot_prompt),
            _ => base,
        }
    }

    /// Hash of everything that determines the outputs.
    pub fn fingerprint(&self, model: &Model, items: &[EvalItem]) -> String {
        let steering = self.steering.map(|(sv, spec)| {
            let mut h = Sha256::new();
            for v in &sv.values {
                h.update(v.to_le_bytes());
            }
            serde_json::json!({
                "vector": hex::encode(&h.finalize()[..16]),
                "spec": spec,
            })
        });
        let doc = serde_json::json!({
            "model_id": model.model_id(),
            "dataset": dataset_fingerprint(items),
            "mode": self.mode,
            "steering": steering,
            "cot_prompt": (self.mode == Mode::CotPrompted).then_some(&self.cot_prompt),
            "join": self.join,
            "max_new_tokens": self.max_new_tokens,
            "extraction": EXTRACTION_VERSION,
        });
        hex::encode(&Sha256::digest(doc.to_string().as_bytes())[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub extracted: Option<String>,
    pub correct: bool,
    /// Generated text.
    pub transcript: String,
    /// Why the item could not be generated, if it failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A percentage held as an exact rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(pub Ratio<i64>);

impl Percent {
    pub fn from_counts(correct: usize, total: usize) -> Self {
        if total == 0 {
            return Percent(Ratio::zero());
        }
        Percent(Ratio::new(100 * correct as i64, total as i64))
    }

    /// Parse an exact decimal such as `79.15`.
    pub fn parse(s: &str) -> Result<Self> {
        let canon =
            normalize_number(s).ok_or_else(|| Error::InvalidArgument(format!("{s:?} is not a decimal number")))?;
        let (neg, body) = match canon.strip_prefix('-') {
            Some(b) => (true, b),
            None => (false, canon.as_str()),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        let digits = format!("{int}{frac}");
        let numer: i64 = digits
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{s:?} is too large")))?;
        let denom = 10i64
            .checked_pow(frac.len() as u32)
            .ok_or_else(|| Error::InvalidArgument(format!("{s:?} has too many decimals")))?;
        Ok(Percent(Ratio::new(if neg { -numer } else { numer }, denom)))
    }

    /// Round half away from zero to `decimals` places.
    pub fn fixed(&self, decimals: u32) -> String {
        let scale = 10i64.pow(decimals);
        let scaled = self.0 * scale;
        let neg = scaled < Ratio::zero();
        let abs = if neg { -scaled } else { scaled };
        let mut units = abs.to_integer();
        if abs - Ratio::from_integer(units) >= Ratio::new(1, 2) {
            units += 1;
        }
        let int = units / scale;
        let frac = units % scale;
        let sign = if neg && units != 0 { "-" } else { "" };
        if decimals == 0 {
            format!("{sign}{int}")
        } else {
            format!("{sign}{int}.{frac:0width$}", width = decimals as usize)
        }
    }

    /// The shortest exact rendering with between `min` and `max` decimals;
    /// rounded to `max` when no exact rendering fits.
    pub fn exact(&self, min: u32, max: u32) -> String {
        for d in min..=max {
            let scaled = self.0 * 10i64.pow(d);
            if scaled.is_integer() {
                return self.fixed(d);
            }
        }
        self.fixed(max)
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl std::fmt::Display for Percent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.fixed(2))
    }
}

#[derive(Serialize, Deserialize)]
struct PercentRepr {
    numer: i64,
    denom: i64,
    display: String,
}

impl Serialize for Percent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PercentRepr {
            numer: *self.0.numer(),
            denom: *self.0.denom(),
            display: self.fixed(2),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PercentRepr::deserialize(d)?;
        if r.denom == 0 {
            return Err(serde::de::Error::custom("zero denominator"));
        }
        Ok(Percent(Ratio::new(r.numer, r.denom)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub dataset_fingerprint: String,
    pub model_id: String,
    pub mode: Mode,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: Percent,
    pub config_fingerprint: String,
    pub extraction_version: String,
    pub per_item: Vec<ItemResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// A report that carries only an accuracy, for rendering published
    /// numbers.
    pub fn from_summary(model_id: &str, dataset_id: &str, mode: Mode, accuracy: &str) -> Result<Self> {
        Ok(Self {
            dataset_id: dataset_id.to_string(),
            dataset_fingerprint: String::new(),
            model_id: model_id.to_string(),
            mode,
            n_items: 0,
            n_correct: 0,
            accuracy: Percent::parse(accuracy)?,
            config_fingerprint: String::new(),
            extraction_version: EXTRACTION_VERSION.to_string(),
            per_item: Vec::new(),
            notes: Vec::new(),
        })
    }

    /// Whether every item has a result.
    pub fn is_complete(&self) -> bool {
        self.per_item.len() == self.n_items
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&crate::model::read_text(path.as_ref())?)?)
    }
}

/// A note for reports whose dataset shares no question text with the
/// steering corpus.
pub fn held_out_note(corpus: &[Question], items: &[EvalItem]) -> Option<String> {
    let texts: HashSet<&str> = corpus.iter().map(|q| q.text.trim()).collect();
    items
        .iter()
        .all(|i| !texts.contains(i.question.trim()))
        .then(|| "held out: no dataset question occurs in the steering corpus".to_string())
}

/// Generate and score every item. Items may run in parallel; results are
/// assembled in dataset order.
pub fn run_eval(model: &Model, items: &[EvalItem], cfg: &EvalConfig) -> Result<EvalReport> {
    let hooks = match (cfg.mode.strategy(), cfg.steering) {
        (Some(strategy), Some((sv, spec))) => {
            if spec.strategy != strategy {
                return Err(Error::InvalidArgument(format!(
                    "mode {} cannot run a {} injection",
                    cfg.mode, spec.strategy
                )));
            }
            check_vector(model, sv, &spec, cfg.force)?;
            vec![spec.hook(sv)]
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!(
                "mode {} needs a steering vector",
                cfg.mode
            )))
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument(format!(
                "mode {} takes no steering vector",
                cfg.mode
            )))
        }
        (None, None) => Vec::new(),
    };
    if cfg.mode == Mode::CotPrompted && cfg.cot_prompt.trim().is_empty() {
        return Err(Error::InvalidArgument("cot_prompted mode needs an instruction".into()));
    }

    let one = |item: &EvalItem| -> ItemResult {
        let gen = generate(model, &encode_prompt(&cfg.prompt(item)), cfg.max_new_tokens, &hooks);
        match gen {
            Ok(rec) => {
                let extracted = extract_answer(&rec.text, item.kind);
                let correct = extracted.as_deref() == Some(item.canonical_gold().as_str());
                ItemResult {
                    id: item.id.clone(),
                    extracted,
                    correct,
                    transcript: rec.text,
                    error: None,
                }
            }
            Err(e) => ItemResult {
                id: item.id.clone(),
                extracted: None,
                correct: false,
                transcript: String::new(),
                error: Some(e.to_string()),
            },
        }
    };
    let per_item: Vec<ItemResult> = if cfg.jobs == 1 {
        items.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| items.par_iter().map(one).collect())
    };
    let n_correct = per_item.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        dataset_id: cfg.dataset_id.clone(),
        dataset_fingerprint: dataset_fingerprint(items),
        model_id: model.model_id().to_string(),
        mode: cfg.mode,
        n_items: items.len(),
        n_correct,
        accuracy: Percent::from_counts(n_correct, items.len()),
        config_fingerprint: cfg.fingerprint(model, items),
        extraction_version: EXTRACTION_VERSION.to_string(),
        per_item,
        notes: Vec::new(),
    })
}

/// One row of a [`Table`].
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub mode: Mode,
    /// One entry per column; `None` where no report was given.
    pub cells: Vec<Option<Percent>>,
    /// Unweighted mean of the present cells.
    pub average: Option<Percent>,
}

/// Modes by datasets, plus an average column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub model_id: String,
    pub datasets: Vec<String>,
    pub rows: Vec<TableRow>,
    /// `best[c][r]`: row `r` holds the best value of column `c`. The last
    /// column is the average.
    pub best: Vec<Vec<bool>>,
}

/// Arrange reports into a table. Rows follow [`Mode`] order, columns the
/// order in which datasets first appear.
pub fn emit_table(reports: &[EvalReport]) -> Result<Table> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to tabulate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.model_id != first.model_id) {
        return Err(Error::ModelMismatch {
            expected: first.model_id.clone(),
            found: r.model_id.clone(),
        });
    }
    let mut datasets: Vec<String> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset_id) {
            datasets.push(r.dataset_id.clone());
        }
    }
    let mut by_mode: BTreeMap<Mode, Vec<Option<Percent>>> = BTreeMap::new();
    for r in reports {
        let col = datasets
            .iter()
            .position(|d| *d == r.dataset_id)
            .expect("collected above");
        let cells = by_mode.entry(r.mode).or_insert_with(|| vec![None; datasets.len()]);
        if cells[col].is_some() {
            return Err(Error::InvalidArgument(format!(
                "two reports for mode {} on dataset {}",
                r.mode, r.dataset_id
            )));
        }
        cells[col] = Some(r.accuracy);
    }
    let rows: Vec<TableRow> = by_mode
        .into_iter()
        .map(|(mode, cells)| {
            let present: Vec<Ratio<i64>> = cells.iter().flatten().map(|p| p.0).collect();
            let average = (!present.is_empty()).then(|| {
                let sum = present.iter().fold(Ratio::zero(), |a, b| a + b);
                Percent(sum / present.len() as i64)
            });
            TableRow { mode, cells, average }
        })
        .collect();

    let n_cols = datasets.len() + 1;
    let value = |row: &TableRow, c: usize| {
        if c < datasets.len() {
            row.cells[c]
        } else {
            row.average
        }
    };
    let best = (0..n_cols)
        .map(|c| {
            if rows.len() < 2 {
                return vec![false; rows.len()];
            }
            let max = rows.iter().filter_map(|r| value(r, c)).max();
            rows.iter().map(|r| max.is_some() && value(r, c) == max).collect()
        })
        .collect();
    Ok(Table {
        model_id: first.model_id.clone(),
        datasets,
        rows,
        best,
    })
}

impl Table {
    fn rendered(&self, row: usize, col: usize) -> String {
        let r = &self.rows[row];
        if col < self.datasets.len() {
            r.cells[col].map_or_else(|| "-".to_string(), |p| p.fixed(2))
        } else {
            r.average.map_or_else(|| "-".to_string(), |p| p.exact(2, 4))
        }
    }

    /// Markdown with the best value per column in bold.
    pub fn markdown(&self) -> String {
        let mut s = String::from("| Mode |");
        for d in &self.datasets {
            let _ = write!(s, " {d} |");
        }
        s.push_str(" Average |\n|---|");
        for _ in 0..=self.datasets.len() {
            s.push_str("---:|");
        }
        s.push('\n');
        for (ri, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "| {} |", row.mode.label());
            for c in 0..=self.datasets.len() {
                let v = self.rendered(ri, c);
                if self.best[c][ri] {
                    let _ = write!(s, " **{v}** |");
                } else {
                    let _ = write!(s, " {v} |");
                }
            }
            s.push('\n');
        }
        s
    }

    /// CSV with a trailing `best` column listing the bold columns by name.
    pub fn csv(&self) -> String {
        let mut s = String::from("mode");
        for d in &self.datasets {
            s.push(',');
            s.push_str(&csv_field(d));
        }
        s.push_str(",average,best\n");
        for (ri, row) in self.rows.iter().enumerate() {
            s.push_str(&row.mode.to_string());
            for c in 0..=self.datasets.len() {
                s.push(',');
                s.push_str(&self.rendered(ri, c));
            }
            let best: Vec<&str> = (0..=self.datasets.len())
                .filter(|&c| self.best[c][ri])
                .map(|c| self.datasets.get(c).map_or("average", String::as_str))
                .collect();
            s.push(',');
            s.push_str(&csv_field(&best.join(";")));
            s.push('\n');
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc(id: &str, labels: &[&str], gold: &str) -> EvalItem {
        EvalItem {
            id: id.into(),
            question: "Pick one.".into(),
            kind: ItemKind::MultipleChoice,
            choices: labels
                .iter()
                .map(|l| Choice {
                    label: (*l).into(),
                    text: format!("option {l}"),
                })
                .collect(),
            gold: gold.into(),
        }
    }

    #[test]
    fn dataset_loading() {
        let text = concat!(
            r#"{"id":"b","question":"2+2?","kind":"numeric","gold":"4"}"#,
            "\n\n",
            r#"{"id":"a","question":"Pick","kind":"multiple_choice","choices":[{"label":"A","text":"x"},{"label":"B","text":"y"}],"gold":"B"}"#,
            "\n"
        );
        let items = parse_dataset(text, "d.jsonl").unwrap();
        assert_eq!(items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);

        let bad_gold = mc("x", &["A", "B", "C", "D"], "E");
        let line = serde_json::to_string(&bad_gold).unwrap();
        match parse_dataset(&line, "d.jsonl") {
            Err(Error::Parse { line: 1, message, .. }) => assert!(message.contains("gold")),
            other => panic!("unexpected {other:?}"),
        }

        let dup = format!("{}\n{}", text.lines().next().unwrap(), text.lines().next().unwrap());
        assert!(matches!(parse_dataset(&dup, "d"), Err(Error::DuplicateId(_))));
        assert!(mc("x", &["A"], "A").validate().is_err());
        assert!(mc("x", &["A", "a"], "A").validate().is_err());
        assert!(mc("x", &["A", "BB"], "A").validate().is_err());
        let bad_num = EvalItem {
            gold: "four".into(),
            kind: ItemKind::Numeric,
            choices: vec![],
            ..mc("n", &[], "")
        };
        assert!(bad_num.validate().is_err());
    }

    #[test]
    fn demo_dataset_self_validates() {
        let items = demo_dataset();
        assert_eq!(items.len(), 20);
        let back = parse_dataset(&dataset_to_jsonl(&items), "demo").unwrap();
        assert_eq!(back, items);
        // Check the stated answers by evaluating the arithmetic directly.
        for item in &items {
            let nums: Vec<u32> = number_regex()
                .find_iter(&item.question)
                .map(|m| m.as_str().parse().unwrap())
                .collect();
            let want = if item.question.contains("minus") {
                nums[0] - nums[1]
            } else if item.question.contains("times") {
                nums[0] * nums[1]
            } else if item.question.contains("divided") {
                nums[0] / nums[1]
            } else {
                nums[0].pow(nums[1])
            };
            assert_eq!(item.gold, want.to_string(), "{}", item.question);
        }
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(
            extract_answer("so the answer is (B).", ItemKind::MultipleChoice).as_deref(),
            Some("B")
        );
        assert_eq!(
            extract_answer("(A) looks wrong, the Answer is c", ItemKind::MultipleChoice).as_deref(),
            Some("C")
        );
        assert_eq!(extract_answer("no idea", ItemKind::MultipleChoice), None);
        assert_eq!(
            extract_answer("The total is 1,234.50", ItemKind::Numeric).as_deref(),
            Some("1234.5")
        );
        assert_eq!(
            extract_answer("from 3 to -7.", ItemKind::Numeric).as_deref(),
            Some("-7")
        );
        assert_eq!(extract_answer("", ItemKind::Numeric), None);
        assert_eq!(normalize_number("007.100").as_deref(), Some("7.1"));
        assert_eq!(normalize_number("-0.0").as_deref(), Some("0"));
        assert_eq!(normalize_number(".5").as_deref(), Some("0.5"));
        assert_eq!(normalize_number("5."), None);
        assert_eq!(normalize_number("1e3"), None);
    }

    #[test]
    fn templated_transcripts_match_hand_labels() {
        // 50 transcripts built from templates, each with a hand-chosen answer.
        let mc_templates = [
            ("Let me think. The answer is ({}).", false),
            ("Option (A) is tempting, but the answer is {}.", false),
            ("I pick ({})", false),
            ("ANSWER IS: {}", false),
            ("Considering (B) and (C), I choose ({}).", false),
        ];
        let labels = ["A", "B", "C", "D", "E"];
        let mut n = 0;
        for (t, _) in mc_templates {
            for l in labels {
                let text = t.replace("{}", &l.to_lowercase());
                assert_eq!(
                    extract_answer(&text, ItemKind::MultipleChoice).as_deref(),
                    Some(l),
                    "{text}"
                );
                n += 1;
            }
        }
        let numeric: [(&str, &str); 25] = [
            ("The answer is 42.", "42"),
            ("3 + 4 = 7", "7"),
            ("It costs $1,250 in total.", "1250"),
            ("We get 0.50 dollars", "0.5"),
            ("First 10, then 20, finally 30", "30"),
            ("-3 degrees", "-3"),
            ("12 apples minus 5 apples leaves 7 apples.", "7"),
            ("Step 1: 6 * 7 = 42. Step 2: 42 / 2 = 21.", "21"),
            ("About 3.14159", "3.14159"),
            ("100.000", "100"),
            ("0", "0"),
            ("x = 2,000,000", "2000000"),
            ("so 15% of 200 is 30", "30"),
            ("answer: 007", "7"),
            ("1/2 of 8 is 4", "4"),
            ("Total 9.90.", "9.9"),
            ("He is 40 years old", "40"),
            ("The result is -0.25", "-0.25"),
            ("In 2024 there were 365 days", "365"),
            ("2 cats and 3 dogs make 5 pets", "5"),
            ("Speed 60 km/h for 4 h gives 240 km", "240"),
            ("It is 12:30 now", "30"),
            ("We need 1,000.5 units", "1000.5"),
            ("81 / 9 = 9", "9"),
            ("Half of 48 is 24!", "24"),
        ];
        for (text, want) in numeric {
            assert_eq!(extract_answer(text, ItemKind::Numeric).as_deref(), Some(want), "{text}");
            n += 1;
        }
        assert_eq!(n, 50);
    }

    #[test]
    fn percent_arithmetic_and_rendering() {
        assert_eq!(Percent::from_counts(2, 4).fixed(2), "50.00");
        assert_eq!(Percent::from_counts(0, 4).fixed(2), "0.00");
        assert_eq!(Percent::from_counts(1, 3).fixed(2), "33.33");
        assert_eq!(Percent::from_counts(2, 3).fixed(2), "66.67");
        assert_eq!(Percent::parse("79.15").unwrap().fixed(2), "79.15");
        assert_eq!(Percent::parse("69.7625").unwrap().exact(2, 4), "69.7625");
        assert_eq!(Percent::parse("71.5").unwrap().exact(2, 4), "71.50");
        assert_eq!(Percent::from_counts(1, 3).exact(2, 4), "33.3333");
        let p = Percent::parse("12.345").unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Percent>(&json).unwrap(), p);
    }

    proptest::proptest! {
        #[test]
        fn accuracy_is_bounded_and_weighted(a in 0usize..50, b in 1usize..50, c in 0usize..50, d in 1usize..50) {
            let (a, c) = (a.min(b), c.min(d));
            let pa = Percent::from_counts(a, b);
            proptest::prop_assert!(pa.0 >= Ratio::zero() && pa.0 <= Ratio::from_integer(100));
            let whole = Percent::from_counts(a + c, b + d);
            let weighted = (pa.0 * b as i64 + Percent::from_counts(c, d).0 * d as i64) / (b + d) as i64;
            proptest::prop_assert_eq!(whole.0, weighted);
        }

        #[test]
        fn extraction_is_idempotent(text in "[ -~]{0,40}") {
            for kind in [ItemKind::Numeric, ItemKind::MultipleChoice] {
                if let Some(x) = extract_answer(&text, kind) {
                    let again = match kind {
                        ItemKind::Numeric => extract_answer(&x, kind),
                        ItemKind::MultipleChoice => extract_answer(&format!("({x})"), kind),
                    };
                    proptest::prop_assert_eq!(again, Some(x));
                }
            }
        }

        #[test]
        fn best_marking_matches_brute_force(cells in proptest::collection::vec(0u32..10000, 12)) {
            let modes = [Mode::CotPrompted, Mode::Single, Mode::Continuous];
            let mut reports = Vec::new();
            for (i, v) in cells.iter().enumerate() {
                let mode = modes[i / 4];
                let acc = format!("{}.{:02}", v / 100, v % 100);
                reports.push(EvalReport::from_summary("m", &format!("d{}", i % 4), mode, &acc).unwrap());
            }
            let t = emit_table(&reports).unwrap();
            for c in 0..4 {
                let col: Vec<u32> = (0..3).map(|r| cells[r * 4 + c]).collect();
                let max = *col.iter().max().unwrap();
                for (r, &v) in col.iter().enumerate() {
                    proptest::prop_assert_eq!(t.best[c][r], v == max);
                }
            }
        }
    }

    #[test]
    fn table_shape_and_errors() {
        let one = vec![EvalReport::from_summary("m", "d", Mode::Single, "50").unwrap()];
        let t = emit_table(&one).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.best.iter().all(|c| c.iter().all(|b| !b)));

        let mixed = vec![
            EvalReport::from_summary("m", "d", Mode::Single, "50").unwrap(),
            EvalReport::from_summary("n", "d", Mode::Baseline, "40").unwrap(),
        ];
        assert!(matches!(emit_table(&mixed), Err(Error::ModelMismatch { .. })));
        assert!(emit_table(&[]).is_err());
    }

    #[test]
    fn held_out_detection() {
        let items = demo_dataset();
        assert!(held_out_note(&crate::corpus::demo_corpus(), &items).is_some());
        let overlap = vec![Question {
            id: "q".into(),
            text: items[0].question.clone(),
            source_tag: Default::default(),
        }];
        assert!(held_out_note(&overlap, &items).is_none());
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("steered".parse::<Mode>().is_err());
    }
}

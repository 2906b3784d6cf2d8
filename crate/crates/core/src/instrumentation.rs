// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream taps and injection hooks.
//!
//! Both attach to block outputs. At a given layer hooks run first and taps
//! second, so a tap at the hooked layer records `h + c·v` and downstream
//! layers see exactly what was captured.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::{self, TokenId};
use crate::model::{BlockObserver, GenerationRecord, InjectionEvent, Model, Phase};
use crate::numerics::Tensor2;

/// Which positions a tap keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    All,
    /// Drop BOS/EOS/PAD positions.
    #[default]
    ExcludeSpecial,
    /// Only the last position of each pass.
    LastOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub layer: usize,
    pub position_policy: PositionPolicy,
}

impl TapSpec {
    pub fn new(layer: usize, position_policy: PositionPolicy) -> Self {
        Self { layer, position_policy }
    }
}

/// Block outputs recorded by one tap during one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub vectors: Vec<Vec<f32>>,
    pub source_model_id: String,
    /// For a trace built with [`ActivationTrace::concat`], the phase of its
    /// first segment.
    pub phase: Phase,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Join per-pass traces of one layer in order.
    pub fn concat<'a>(segments: impl IntoIterator<Item = &'a ActivationTrace>) -> Result<Self> {
        let mut it = segments.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("no trace segments to concatenate".into()))?;
        let mut out = first.clone();
        for seg in it {
            if seg.layer != out.layer || seg.source_model_id != out.source_model_id {
                return Err(Error::InvalidArgument(format!(
                    "cannot join layer {} trace onto layer {} trace",
                    seg.layer, out.layer
                )));
            }
            out.positions.extend_from_slice(&seg.positions);
            out.vectors.extend(seg.vectors.iter().cloned());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Apply during the prompt pass only.
    PrefillOnly,
    /// Apply during the prompt pass and at every decode step.
    EveryStep,
}

/// Which prompt positions a hook touches during prefill. Decode passes only
/// ever contain the one new position, so the scope does not matter there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScope {
    #[default]
    AllCurrent,
    /// Only the last prompt position.
    NewOnly,
}

/// Adds `coefficient · vector` to the output of `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionHook {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub coefficient: f32,
    pub schedule: Schedule,
    pub position_scope: PositionScope,
}

impl InjectionHook {
    pub fn new(layer: usize, vector: Vec<f32>, coefficient: f32, schedule: Schedule) -> Self {
        Self {
            layer,
            vector,
            coefficient,
            schedule,
            position_scope: PositionScope::AllCurrent,
        }
    }

    /// Row indices (within the current pass) this hook applies to.
    pub fn rows_in_scope(&self, phase: Phase, n_rows: usize) -> std::ops::Range<usize> {
        match (phase, self.schedule) {
            (Phase::Decode(_), Schedule::PrefillOnly) => 0..0,
            (Phase::Decode(_), Schedule::EveryStep) => 0..n_rows,
            (Phase::Prefill, _) => match self.position_scope {
                PositionScope::AllCurrent => 0..n_rows,
                PositionScope::NewOnly => n_rows.saturating_sub(1)..n_rows,
            },
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        model.config().check_layer(self.layer)?;
        if self.vector.len() != model.config().d_model {
            return Err(Error::DimensionMismatch(format!(
                "hook vector has {} elements, model d_model is {}",
                self.vector.len(),
                model.config().d_model
            )));
        }
        if !self.coefficient.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "coefficient {} is not finite",
                self.coefficient
            )));
        }
        Ok(())
    }
}

/// Apply `hook` to the in-scope rows of `states` (a pass starting at absolute
/// position `start`). Returns the absolute positions touched.
///
/// Each in-scope element becomes `h + c·v`. A zero product is skipped, so a
/// zero coefficient or zero vector leaves `states` bit-identical (including
/// the sign of zeros).
pub fn inject(states: &mut Tensor2, hook: &InjectionHook, phase: Phase, start: usize) -> Result<Vec<usize>> {
    if hook.vector.len() != states.cols() {
        return Err(Error::DimensionMismatch(format!(
            "hook vector has {} elements, hidden states have {}",
            hook.vector.len(),
            states.cols()
        )));
    }
    let rows = hook.rows_in_scope(phase, states.rows());
    let mut touched = Vec::with_capacity(rows.len());
    for r in rows {
        for (h, &v) in states.row_mut(r).iter_mut().zip(&hook.vector) {
            let delta = hook.coefficient * v;
            if delta != 0.0 {
                *h += delta;
            }
        }
        touched.push(start + r);
    }
    Ok(touched)
}

/// Observer that applies hooks, records taps and keeps the audit trail.
pub struct Session<'a> {
    hooks: &'a [InjectionHook],
    taps: &'a [TapSpec],
    model_id: &'a str,
    phase: Phase,
    audit: Vec<InjectionEvent>,
    traces: Vec<ActivationTrace>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Model, hooks: &'a [InjectionHook], taps: &'a [TapSpec]) -> Result<Self> {
        for h in hooks {
            h.validate(model)?;
        }
        for t in taps {
            model.config().check_layer(t.layer)?;
        }
        Ok(Self {
            hooks,
            taps,
            model_id: model.model_id(),
            phase: Phase::Prefill,
            audit: Vec::new(),
            traces: Vec::new(),
        })
    }

    pub fn into_parts(self) -> (Vec<InjectionEvent>, Vec<ActivationTrace>) {
        (self.audit, self.traces)
    }
}

impl BlockObserver for Session<'_> {
    fn begin_pass(&mut self, phase: Phase) {
        self.phase = phase;
    }

    fn block_output(&mut self, layer: usize, start: usize, tokens: &[TokenId], states: &mut Tensor2) -> Result<()> {
        for hook in self.hooks.iter().filter(|h| h.layer == layer) {
            let positions = inject(states, hook, self.phase, start)?;
            if !positions.is_empty() {
                self.audit.push(InjectionEvent {
                    step: self.phase.step(),
                    layer,
                    positions,
                });
            }
        }
        for tap in self.taps.iter().filter(|t| t.layer == layer) {
            let rows: Vec<usize> = match tap.position_policy {
                PositionPolicy::All => (0..tokens.len()).collect(),
                PositionPolicy::ExcludeSpecial => (0..tokens.len())
                    .filter(|&i| !tokenizer::is_special(tokens[i]))
                    .collect(),
                PositionPolicy::LastOnly => tokens.len().checked_sub(1).into_iter().collect(),
            };
            self.traces.push(ActivationTrace {
                layer,
                positions: rows.iter().map(|r| start + r).collect(),
                vectors: rows.iter().map(|&r| states.row(r).to_vec()).collect(),
                source_model_id: self.model_id.to_string(),
                phase: self.phase,
            });
        }
        Ok(())
    }
}

fn run(
    model: &Model,
    prompt: &[TokenId],
    max_new_tokens: usize,
    hooks: &[InjectionHook],
    taps: &[TapSpec],
) -> Result<(GenerationRecord, Vec<ActivationTrace>)> {
    let mut session = Session::new(model, hooks, taps)?;
    let (generated, stopped_on_eos) = model.generate_observed(prompt, max_new_tokens, &mut session)?;
    let (audit, traces) = session.into_parts();
    let text = tokenizer::detokenize(&generated)?;
    Ok((
        GenerationRecord {
            prompt_tokens: prompt.to_vec(),
            generated_tokens: generated,
            stopped_on_eos,
            per_step_injections: audit,
            text,
        },
        traces,
    ))
}

/// Greedy generation with injection hooks.
pub fn generate(
    model: &Model,
    prompt: &[TokenId],
    max_new_tokens: usize,
    hooks: &[InjectionHook],
) -> Result<GenerationRecord> {
    run(model, prompt, max_new_tokens, hooks, &[]).map(|(r, _)| r)
}

/// Greedy generation that records block outputs. Traces come out one per
/// (tap, pass), in pass order then tap order.
pub fn capture(
    model: &Model,
    prompt: &[TokenId],
    taps: &[TapSpec],
    max_new_tokens: usize,
) -> Result<(GenerationRecord, Vec<ActivationTrace>)> {
    run(model, prompt, max_new_tokens, &[], taps)
}

/// [`capture`] with hooks active as well.
pub fn capture_with_hooks(
    model: &Model,
    prompt: &[TokenId],
    taps: &[TapSpec],
    hooks: &[InjectionHook],
    max_new_tokens: usize,
) -> Result<(GenerationRecord, Vec<ActivationTrace>)> {
    run(model, prompt, max_new_tokens, hooks, taps)
}

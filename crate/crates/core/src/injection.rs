// SPDX-License-Identifier: MIT OR Apache-2.0

//! The two steering strategies as generation modes.
//!
//! * [`Strategy::Single`] adds `c·v` once, to the layer output of every
//!   prompt position during prefill. Later tokens see the perturbation only
//!   through the cached keys and values it produced.
//! * [`Strategy::Continuous`] adds `c·v` during prefill and again to the new
//!   position at every decode step. Small coefficients are the norm here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrumentation::{generate, InjectionHook, PositionScope, Schedule};
use crate::model::tokenizer::encode_prompt;
use crate::model::{GenerationRecord, Model};
use crate::steering::SteeringVector;

/// Coefficient above which a continuous run is flagged as likely to
/// over-steer.
pub const CONTINUOUS_WARN_COEFFICIENT: f32 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Single,
    Continuous,
}

impl Strategy {
    pub fn schedule(self) -> Schedule {
        match self {
            Strategy::Single => Schedule::PrefillOnly,
            Strategy::Continuous => Schedule::EveryStep,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::Continuous => "continuous",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "continuous" => Ok(Strategy::Continuous),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected single or continuous)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub layer: usize,
    pub coefficient: f32,
    pub strategy: Strategy,
    /// Prompt positions touched during prefill.
    #[serde(default)]
    pub scope: PositionScope,
}

impl InjectionSpec {
    pub fn new(layer: usize, coefficient: f32, strategy: Strategy) -> Self {
        Self {
            layer,
            coefficient,
            strategy,
            scope: PositionScope::AllCurrent,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        model.config().check_layer(self.layer)?;
        if !self.coefficient.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "coefficient {} is not finite",
                self.coefficient
            )));
        }
        Ok(())
    }

    /// A warning for continuous runs with a large coefficient.
    pub fn oversteer_warning(&self, threshold: f32) -> Option<String> {
        (self.strategy == Strategy::Continuous && self.coefficient.abs() > threshold).then(|| {
            format!(
                "continuous injection with |c| = {} exceeds {threshold}; repeated application may over-steer",
                self.coefficient.abs()
            )
        })
    }

    pub fn hook(&self, sv: &SteeringVector) -> InjectionHook {
        InjectionHook {
            layer: self.layer,
            vector: sv.values.clone(),
            coefficient: self.coefficient,
            schedule: self.strategy.schedule(),
            position_scope: self.scope,
        }
    }
}

/// Check `sv` against `model` and `spec`. Returns a warning when a model
/// mismatch was overridden by `force`.
pub fn check_vector(model: &Model, sv: &SteeringVector, spec: &InjectionSpec, force: bool) -> Result<Option<String>> {
    spec.validate(model)?;
    if sv.layer != spec.layer {
        return Err(Error::LayerMismatch {
            vector: sv.layer,
            requested: spec.layer,
        });
    }
    sv.check_compatible(model, force)
}

/// Greedy generation from `prompt` with `sv` injected per `spec`.
pub fn steered_generate(
    model: &Model,
    prompt: &str,
    sv: &SteeringVector,
    spec: &InjectionSpec,
    max_new_tokens: usize,
    force: bool,
) -> Result<GenerationRecord> {
    check_vector(model, sv, spec, force)?;
    generate(model, &encode_prompt(prompt), max_new_tokens, &[spec.hook(sv)])
}

/// Unsteered and steered generations with identical decode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub unsteered: GenerationRecord,
    pub steered: GenerationRecord,
}

impl Comparison {
    /// Index of the first generated token that differs, if any.
    pub fn first_divergence(&self) -> Option<usize> {
        let (a, b) = (&self.unsteered.generated_tokens, &self.steered.generated_tokens);
        (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i))
    }
}

pub fn compare_generations(
    model: &Model,
    prompt: &str,
    sv: &SteeringVector,
    spec: &InjectionSpec,
    max_new_tokens: usize,
    force: bool,
) -> Result<Comparison> {
    check_vector(model, sv, spec, force)?;
    let tokens = encode_prompt(prompt);
    Ok(Comparison {
        unsteered: generate(model, &tokens, max_new_tokens, &[])?,
        steered: generate(model, &tokens, max_new_tokens, &[spec.hook(sv)])?,
    })
}

/// A steering run saved as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vector_path: PathBuf,
    pub layer: usize,
    pub coefficient: f32,
    pub strategy: Strategy,
    pub max_new_tokens: usize,
}

impl RunConfig {
    pub fn spec(&self) -> InjectionSpec {
        InjectionSpec::new(self.layer, self.coefficient, self.strategy)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::model::read_text(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Published settings for two 7-8B instruct models, keyed by name.
pub fn reference_configs() -> Vec<(&'static str, RunConfig)> {
    let cfg = |model: &str, strategy, layer, coefficient| RunConfig {
        vector_path: PathBuf::from(format!("vectors/{model}/layer_{layer:03}.strv")),
        layer,
        coefficient,
        strategy,
        max_new_tokens: 512,
    };
    vec![
        ("llama3-single", cfg("llama3", Strategy::Single, 16, 20.0)),
        ("llama3-continuous", cfg("llama3", Strategy::Continuous, 13, 1.0)),
        ("mistral-single", cfg("mistral", Strategy::Single, 15, 10.0)),
        ("mistral-continuous", cfg("mistral", Strategy::Continuous, 10, 0.5)),
    ]
}

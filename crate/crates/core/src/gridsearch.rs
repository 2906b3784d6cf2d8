// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exhaustive search over `(layer, coefficient)` for one strategy.
//!
//! Every cell is a full [`run_eval`] on the dev items. The best cell has the
//! highest accuracy; ties go to the smaller `|c|`, then the smaller layer.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{run_eval, EvalConfig, EvalItem, Mode, Percent};
use crate::injection::{InjectionSpec, Strategy};
use crate::model::Model;
use crate::steering::SteeringVectorSet;

/// Coefficients tried when none are given.
pub const DEFAULT_COEFFICIENTS: [f32; 6] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0];

pub const TIE_BREAK_RULE: &str = "highest accuracy; ties go to smaller |c|, then smaller layer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub layers: Vec<usize>,
    pub coefficients: Vec<f32>,
    pub strategy: Strategy,
    pub dev_dataset_id: String,
    pub max_new_tokens: usize,
}

impl GridSpec {
    /// All layers of `model` and the default coefficients.
    pub fn full(model: &Model, strategy: Strategy, dev_dataset_id: impl Into<String>) -> Self {
        Self {
            layers: (0..model.config().n_layers).collect(),
            coefficients: DEFAULT_COEFFICIENTS.to_vec(),
            strategy,
            dev_dataset_id: dev_dataset_id.into(),
            max_new_tokens: 64,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.layers.is_empty() || self.coefficients.is_empty() {
            return Err(Error::InvalidArgument(
                "grid needs at least one layer and one coefficient".into(),
            ));
        }
        for &l in &self.layers {
            model.config().check_layer(l)?;
        }
        if let Some(c) = self.coefficients.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("coefficient {c} is not finite")));
        }
        Ok(())
    }

    /// Sorted, de-duplicated axes.
    fn axes(&self) -> (Vec<usize>, Vec<f32>) {
        let mut layers = self.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        let mut coefs = self.coefficients.clone();
        coefs.sort_by(f32::total_cmp);
        coefs.dedup_by(|a, b| a.to_bits() == b.to_bits());
        (layers, coefs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub layer: usize,
    pub coefficient: f32,
    pub accuracy: Percent,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub spec: GridSpec,
    pub model_id: String,
    /// Sorted by `(layer, coefficient)`.
    pub cells: Vec<GridCell>,
    pub best: (usize, f32),
    pub best_accuracy: Percent,
    pub tie_break_note: String,
}

/// `Less` when `a` is the better cell.
fn rank(a: &GridCell, b: &GridCell) -> Ordering {
    b.accuracy
        .cmp(&a.accuracy)
        .then(a.coefficient.abs().total_cmp(&b.coefficient.abs()))
        .then(a.layer.cmp(&b.layer))
        .then(a.coefficient.total_cmp(&b.coefficient))
}

/// Evaluate every cell of `grid` on `dev`. `jobs` bounds the number of
/// cells evaluated at once; 1 runs them in order.
pub fn grid_search(
    model: &Model,
    svset: &SteeringVectorSet,
    grid: &GridSpec,
    dev: &[EvalItem],
    jobs: usize,
) -> Result<GridResult> {
    grid.validate(model)?;
    let (layers, coefs) = grid.axes();
    let missing: Vec<usize> = layers.iter().copied().filter(|&l| svset.get(l).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "vector set has no vector for layer(s) {missing:?} (available: {:?})",
            svset.layers()
        )));
    }
    for &l in &layers {
        svset.get(l).expect("checked above").check_compatible(model, false)?;
    }
    let mode = match grid.strategy {
        Strategy::Single => Mode::Single,
        Strategy::Continuous => Mode::Continuous,
    };
    let pairs: Vec<(usize, f32)> = layers
        .iter()
        .flat_map(|&l| coefs.iter().map(move |&c| (l, c)))
        .collect();
    let cell = |&(layer, coefficient): &(usize, f32)| -> Result<GridCell> {
        let sv = svset.get(layer).expect("checked above");
        let mut cfg = EvalConfig::new(grid.dev_dataset_id.clone(), mode)
            .with_steering(sv, InjectionSpec::new(layer, coefficient, grid.strategy));
        cfg.max_new_tokens = grid.max_new_tokens;
        let report = run_eval(model, dev, &cfg)?;
        Ok(GridCell {
            layer,
            coefficient,
            accuracy: report.accuracy,
            config_fingerprint: report.config_fingerprint,
        })
    };
    let cells: Vec<GridCell> = if jobs == 1 {
        pairs.iter().map(cell).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(cell).collect::<Result<_>>())?
    };

    let best = cells.iter().min_by(|a, b| rank(a, b)).expect("grid is non-empty");
    let tied = cells.iter().filter(|c| c.accuracy == best.accuracy).count();
    let tie_break_note = if tied > 1 {
        format!(
            "{tied} cells reached {}%; picked by rule: {TIE_BREAK_RULE}",
            best.accuracy
        )
    } else {
        format!("unique best; rule: {TIE_BREAK_RULE}")
    };
    Ok(GridResult {
        spec: grid.clone(),
        model_id: model.model_id().to_string(),
        best: (best.layer, best.coefficient),
        best_accuracy: best.accuracy,
        tie_break_note,
        cells,
    })
}

impl GridResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid result serializes") + "\n"
    }

    pub fn cell(&self, layer: usize, coefficient: f32) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.coefficient.to_bits() == coefficient.to_bits())
    }

    /// Accuracy grid with one row per layer and one column per coefficient.
    pub fn heatmap_csv(&self) -> String {
        let (layers, coefs) = self.spec.axes();
        let mut s = String::from("layer");
        for c in &coefs {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for l in layers {
            let _ = write!(s, "{l}");
            for &c in &coefs {
                let v = self.cell(l, c).map_or_else(String::new, |x| x.accuracy.fixed(2));
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = format!(
            "Best: layer {}, c = {} ({}%)\n\n| layer | c | accuracy |\n|---:|---:|---:|\n",
            self.best.0, self.best.1, self.best_accuracy
        );
        for c in &self.cells {
            let _ = writeln!(s, "| {} | {} | {} |", c.layer, c.coefficient, c.accuracy);
        }
        let _ = writeln!(s, "\n{}", self.tie_break_note);
        s
    }
}

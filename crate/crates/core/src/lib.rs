// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chain-of-thought steering vectors for decoder-only transformers.
//!
//! The crate contains a small instrumented inference engine and the tools
//! around it:
//!
//! * [`model`]: weights, byte tokenizer, KV-cached forward pass, greedy decoding.
//! * [`instrumentation`]: taps that record block outputs and hooks that add
//!   `c·v` to them.
//! * [`corpus`] and [`steering`]: contrastive prompt pairs and the derivation
//!   of a steering vector as the corpus mean of per-question activation
//!   differences.
//! * [`injection`]: single and continuous steering during generation.
//! * [`evaluation`] and [`gridsearch`]: benchmark scoring, report tables and
//!   the `(layer, coefficient)` search.
//! * [`synthetic`]: a hand-built model with a known steering direction, plus
//!   reference implementations used as test oracles.
//!
//! ```
//! use cotsteer::corpus::{demo_corpus, ContrastTemplate};
//! use cotsteer::steering::{derive, DeriveOptions};
//! use cotsteer::synthetic::{build_planted_model, PlantedModelSpec};
//!
//! let model = build_planted_model(&PlantedModelSpec::default(), 1).unwrap();
//! let set = derive(&model, &demo_corpus(), &ContrastTemplate::default(), &[1],
//!                  &DeriveOptions::default()).unwrap();
//! assert_eq!(set.vectors[0].values.len(), 16);
//! ```

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gridsearch;
pub mod injection;
pub mod instrumentation;
pub mod model;
pub mod numerics;
pub mod steering;
pub mod synthetic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/instrumentation.md")]
    mod instrumentation {}
    #[doc = include_str!("../../../book/src/derivation.md")]
    mod derivation {}
    #[doc = include_str!("../../../book/src/injection.md")]
    mod injection {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/grid-search.md")]
    mod grid_search {}
    #[doc = include_str!("../../../book/src/planted-model.md")]
    mod planted_model {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Derive vectors on a planted model and report direction recovery, flip
//! rates and the step margin as the coefficient grows.
//!
//! ```text
//! cargo run --release --example planted_sweep -- [seed]
//! ```

use cotsteer::corpus::{demo_corpus, ContrastTemplate};
use cotsteer::injection::{steered_generate, InjectionSpec, Strategy};
use cotsteer::instrumentation::{InjectionHook, Schedule, Session};
use cotsteer::model::tokenizer::encode_prompt;
use cotsteer::model::KvCache;
use cotsteer::numerics::cosine;
use cotsteer::steering::{derive, DeriveOptions};
use cotsteer::synthetic::{build_planted_model, planted_direction, step_margin, PlantedModelSpec, PLANTED_SEED};

fn main() -> cotsteer::Result<()> {
    let seed = match std::env::args().nth(1) {
        Some(s) => s.parse().expect("seed must be an integer"),
        None => PLANTED_SEED,
    };
    let spec = PlantedModelSpec::default();
    let model = build_planted_model(&spec, seed)?;
    let u = planted_direction(&model, &spec);
    let corpus = demo_corpus();
    let layers: Vec<usize> = (0..model.config().n_layers).collect();
    let set = derive(
        &model,
        &corpus,
        &ContrastTemplate::default(),
        &layers,
        &DeriveOptions::default(),
    )?;

    println!("seed {seed}, model {}", model.model_id());
    for v in &set.vectors {
        println!(
            "layer {}: cos(v, u) = {:.4}, |v| = {:.3}",
            v.layer,
            cosine(&v.values, &u),
            v.norm()
        );
    }

    println!("\nprompts whose first token is a step token:");
    let runs = [
        (Strategy::Single, 1, 0.5),
        (Strategy::Single, 1, 4.0),
        (Strategy::Continuous, 1, 0.5),
        (Strategy::Continuous, 1, 1.0),
        (Strategy::Single, 0, 4.0),
        (Strategy::Single, 0, 20.0),
    ];
    for (strategy, layer, c) in runs {
        let sv = set.get(layer).expect("all layers derived");
        let mut flips = 0;
        for q in &corpus {
            let rec = steered_generate(&model, &q.text, sv, &InjectionSpec::new(layer, c, strategy), 4, false)?;
            if rec
                .generated_tokens
                .first()
                .is_some_and(|t| spec.step_tokens.contains(t))
            {
                flips += 1;
            }
        }
        println!(
            "  {:<10} layer {layer} c {c:>4}: {flips}/{}",
            strategy.to_string(),
            corpus.len()
        );
    }

    println!(
        "\nstep margin at the last prompt position, layer {}:",
        spec.planted_layer
    );
    let sv = set.get(spec.planted_layer).expect("planted layer derived");
    let prompt = encode_prompt(&corpus[0].text);
    for c in 0..=8 {
        let hook = InjectionHook::new(sv.layer, sv.values.clone(), c as f32, Schedule::PrefillOnly);
        let mut session = Session::new(&model, std::slice::from_ref(&hook), &[])?;
        let logits = model.forward(&prompt, &mut KvCache::new(model.config()), &mut session)?;
        println!("  c = {c}: {:.3}", step_margin(logits.row(prompt.len() - 1), &spec));
    }
    Ok(())
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails or exceeds its time budget.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cotsteer::corpus::{demo_corpus, ContrastTemplate};
use cotsteer::evaluation::{demo_dataset, emit_table, extract_answer, EvalReport, Mode, Percent};
use cotsteer::gridsearch::{grid_search, GridSpec};
use cotsteer::injection::{steered_generate, InjectionSpec, Strategy};
use cotsteer::instrumentation::{generate, inject, InjectionHook, Schedule, Session};
use cotsteer::model::tokenizer::encode_prompt;
use cotsteer::model::{argmax, KvCache, Model, NoObserver, Phase, TokenId};
use cotsteer::numerics::{cosine, Tensor2};
use cotsteer::steering::{derive, DeriveOptions, SteeringVector, SteeringVectorSet};
use cotsteer::synthetic::{
    oracle_derive, oracle_forward, planted_direction, planted_fixture, random_model, small_config, PlantedModelSpec,
};
use cotsteer::Error;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_prompt(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(b' '..=b'~') as char).collect()
}

struct Planted {
    spec: PlantedModelSpec,
    model: Model,
    set: SteeringVectorSet,
}

fn planted() -> Planted {
    let (spec, model) = planted_fixture();
    let layers: Vec<usize> = (0..model.config().n_layers).collect();
    let set = derive(
        &model,
        &demo_corpus(),
        &ContrastTemplate::default(),
        &layers,
        &DeriveOptions::default(),
    )
    .expect("derivation on the planted model");
    Planted { spec, model, set }
}

fn c1_zero_identity(p: &Planted) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut compared = 0;
    for _ in 0..20 {
        let text = random_prompt(&mut rng, 4, 40);
        let tokens = encode_prompt(&text);
        let plain = generate(&p.model, &tokens, 16, &[]).map_err(|e| e.to_string())?;
        let plain_logits = p
            .model
            .forward(&tokens, &mut KvCache::new(p.model.config()), &mut NoObserver)
            .map_err(|e| e.to_string())?;
        for sv in &p.set.vectors {
            for strategy in [Strategy::Single, Strategy::Continuous] {
                let spec = InjectionSpec::new(sv.layer, 0.0, strategy);
                let steered = steered_generate(&p.model, &text, sv, &spec, 16, false).map_err(|e| e.to_string())?;
                ensure(
                    steered.generated_tokens == plain.generated_tokens
                        && steered.text == plain.text
                        && steered.stopped_on_eos == plain.stopped_on_eos,
                    || format!("{strategy} l={} diverged on {text:?}", sv.layer),
                )?;
                let hook = spec.hook(sv);
                let mut session =
                    Session::new(&p.model, std::slice::from_ref(&hook), &[]).map_err(|e| e.to_string())?;
                let logits = p
                    .model
                    .forward(&tokens, &mut KvCache::new(p.model.config()), &mut session)
                    .map_err(|e| e.to_string())?;
                let same_bits = logits
                    .data()
                    .iter()
                    .zip(plain_logits.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same_bits, || format!("prefill logits differ bitwise on {text:?}"))?;
                compared += 1;
            }
        }
    }
    Ok(format!(
        "{compared} steered runs bit-identical to unsteered (20 prompts x 2 layers x 2 strategies)"
    ))
}

fn c2_injection_arithmetic() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut worst_comp) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.gen_range(1..=64);
        let h: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let c: f32 = rng.gen_range(-1.0..=1.0);
        let mut states = Tensor2::from_vec(1, d, h.clone()).map_err(|e| e.to_string())?;
        let hook = InjectionHook::new(0, v.clone(), c, Schedule::EveryStep);
        inject(&mut states, &hook, Phase::Prefill, 0).map_err(|e| e.to_string())?;
        for i in 0..d {
            let want = h[i] as f64 + c as f64 * v[i] as f64;
            worst = worst.max((states.get(0, i) as f64 - want).abs());
        }

        let (c1, c2): (f32, f32) = (rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5));
        let mut twice = Tensor2::from_vec(1, d, h.clone()).map_err(|e| e.to_string())?;
        for c in [c1, c2] {
            let hk = InjectionHook::new(0, v.clone(), c, Schedule::EveryStep);
            inject(&mut twice, &hk, Phase::Prefill, 0).map_err(|e| e.to_string())?;
        }
        let mut once = Tensor2::from_vec(1, d, h).map_err(|e| e.to_string())?;
        let hk = InjectionHook::new(0, v, c1 + c2, Schedule::EveryStep);
        inject(&mut once, &hk, Phase::Prefill, 0).map_err(|e| e.to_string())?;
        for i in 0..d {
            worst_comp = worst_comp.max((twice.get(0, i) as f64 - once.get(0, i) as f64).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max |h' - (h + c v)| = {worst:e}"))?;
    ensure(worst_comp <= 1e-6, || format!("max composition error = {worst_comp:e}"))?;
    Ok(format!(
        "1000 cases: max error {worst:.2e}, composition {worst_comp:.2e}"
    ))
}

fn c3_oracle_equivalence(p: &Planted) -> Check {
    let corpus = demo_corpus();
    let template = ContrastTemplate::default();
    let mut worst = 0.0f64;
    for sv in &p.set.vectors {
        let oracle = oracle_derive(
            &p.model,
            &corpus,
            &template,
            sv.layer,
            DeriveOptions::default().max_new_tokens,
        );
        for (i, (&a, &b)) in sv.values.iter().zip(&oracle).enumerate() {
            let err = (a as f64 - b as f64).abs();
            ensure(err <= 1e-6 * (b as f64).abs(), || {
                format!("layer {} component {i}: derive {a:e}, oracle {b:e}", sv.layer)
            })?;
            if b != 0.0 {
                worst = worst.max(err / (b as f64).abs());
            }
        }
    }
    let layers = p.set.layers();
    let eight = derive(
        &p.model,
        &corpus,
        &template,
        &layers,
        &DeriveOptions {
            jobs: 8,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    for (a, b) in p.set.vectors.iter().zip(&eight.vectors) {
        ensure(a.to_bytes() == b.to_bytes(), || {
            format!("layer {}: jobs=1 and jobs=8 files differ", a.layer)
        })?;
    }
    Ok(format!(
        "{} layers, max relative error {worst:.1e}; jobs 1 vs 8 byte-identical",
        layers.len()
    ))
}

fn c4_antisymmetry(p: &Planted) -> Check {
    let corpus = demo_corpus();
    let t = ContrastTemplate::default();
    let layers = p.set.layers();
    let swapped =
        derive(&p.model, &corpus, &t.swapped(), &layers, &DeriveOptions::default()).map_err(|e| e.to_string())?;
    for (a, b) in p.set.vectors.iter().zip(&swapped.vectors) {
        ensure(a.values.iter().zip(&b.values).all(|(x, y)| *x == -*y), || {
            format!("layer {}: swapped template is not the exact negation", a.layer)
        })?;
    }
    let same = ContrastTemplate {
        direct_suffix: t.cot_suffix.clone(),
        ..t
    };
    let zero = derive(&p.model, &corpus, &same, &layers, &DeriveOptions::default()).map_err(|e| e.to_string())?;
    for v in &zero.vectors {
        ensure(v.values.iter().all(|&x| x == 0.0), || {
            format!("layer {}: identical templates gave a non-zero vector", v.layer)
        })?;
    }
    Ok(format!(
        "{} layers negate exactly; identical templates give exact zeros",
        layers.len()
    ))
}

fn c5_direction_recovery(p: &Planted) -> Check {
    let u = planted_direction(&p.model, &p.spec);
    let mut parts = Vec::new();
    for sv in &p.set.vectors {
        let cos = cosine(&sv.values, &u);
        parts.push(format!("cos(v{}, u) = {cos:.4}", sv.layer));
        if sv.layer == p.spec.planted_layer {
            ensure(cos >= 0.95, || {
                format!("planted layer {}: cos {cos:.4} < 0.95", sv.layer)
            })?;
        } else {
            ensure(cos < 0.5, || format!("layer {}: cos {cos:.4} >= 0.5", sv.layer))?;
        }
    }
    Ok(parts.join(", "))
}

fn flip_count(p: &Planted, strategy: Strategy, c: f32) -> Result<usize, String> {
    let l = p.spec.planted_layer;
    let sv = p.set.get(l).ok_or("missing planted-layer vector")?;
    let mut flips = 0;
    for q in demo_corpus() {
        let plain = generate(&p.model, &encode_prompt(&q.text), 4, &[]).map_err(|e| e.to_string())?;
        let steered = steered_generate(&p.model, &q.text, sv, &InjectionSpec::new(l, c, strategy), 4, false)
            .map_err(|e| e.to_string())?;
        let first = |t: &[TokenId]| t.first().copied();
        let was_answer = first(&plain.generated_tokens).is_some_and(|t| p.spec.answer_tokens.contains(&t));
        let is_step = first(&steered.generated_tokens).is_some_and(|t| p.spec.step_tokens.contains(&t));
        if was_answer && is_step {
            flips += 1;
        }
    }
    Ok(flips)
}

fn c6_behavior_flip(p: &Planted) -> Check {
    let single = flip_count(p, Strategy::Single, 4.0)?;
    let continuous = flip_count(p, Strategy::Continuous, 1.0)?;
    let norm = p.set.get(p.spec.planted_layer).map_or(0.0, SteeringVector::norm);
    ensure(single * 100 >= 95 * 20, || format!("single c=4 flipped {single}/20"))?;
    ensure(continuous * 100 >= 95 * 20, || {
        format!("continuous c=1 flipped {continuous}/20")
    })?;
    Ok(format!(
        "single c=4: {single}/20, continuous c=1: {continuous}/20 (|c v| {:.3} and {:.3})",
        4.0 * norm,
        1.0 * norm
    ))
}

fn c7_touch_counts() -> Check {
    let model = random_model(&small_config(), 707);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let prompt = encode_prompt("abcdef");
    ensure(prompt.len() == 7, || format!("prompt has {} tokens", prompt.len()))?;
    let mut counts = Vec::new();
    for schedule in [Schedule::PrefillOnly, Schedule::EveryStep] {
        let hook = InjectionHook::new(1, v.clone(), 0.5, schedule);
        let rec = generate(&model, &prompt, 5, &[hook]).map_err(|e| e.to_string())?;
        ensure(rec.generated_tokens.len() == 5, || {
            format!("generated {} tokens instead of 5", rec.generated_tokens.len())
        })?;
        counts.push(rec.touched_positions());
    }
    ensure(counts == [7, 12], || format!("touched {counts:?}, expected [7, 12]"))?;
    Ok("single touched 7, continuous touched 12 (P=7, N=5)".into())
}

fn c8_grid(p: &Planted) -> Check {
    let dev = demo_dataset();
    let grid = GridSpec {
        layers: vec![0, 1],
        coefficients: vec![0.0, 2.0, 4.0],
        strategy: Strategy::Single,
        dev_dataset_id: "demo".into(),
        max_new_tokens: 8,
    };
    let r = grid_search(&p.model, &p.set, &grid, &dev, 1).map_err(|e| e.to_string())?;
    ensure(r.cells.len() == 6, || format!("{} cells", r.cells.len()))?;
    ensure(r.best.0 == p.spec.planted_layer && r.best.1 > 0.0, || {
        format!("best cell is {:?}", r.best)
    })?;

    // Independent per-cell scoring.
    for cell in &r.cells {
        let sv = p.set.get(cell.layer).ok_or("missing layer")?;
        let spec = InjectionSpec::new(cell.layer, cell.coefficient, Strategy::Single);
        let mut correct = 0;
        for item in &dev {
            let rec = steered_generate(&p.model, &item.render(), sv, &spec, 8, false).map_err(|e| e.to_string())?;
            if extract_answer(&rec.text, item.kind).as_deref() == Some(item.canonical_gold().as_str()) {
                correct += 1;
            }
        }
        let want = Percent::from_counts(correct, dev.len());
        ensure(cell.accuracy == want, || {
            format!(
                "cell ({}, {}): grid {} vs oracle {want}",
                cell.layer, cell.coefficient, cell.accuracy
            )
        })?;
    }

    let shuffled = GridSpec {
        layers: vec![1, 0],
        coefficients: vec![4.0, 0.0, 2.0],
        ..grid
    };
    let r2 = grid_search(&p.model, &p.set, &shuffled, &dev, 4).map_err(|e| e.to_string())?;
    ensure(r2.cells == r.cells && r2.best == r.best, || {
        "axis order changed the result".into()
    })?;
    Ok(format!(
        "6 cells, best (l={}, c={}) at {}%; permutation-invariant",
        r.best.0, r.best.1, r.best_accuracy
    ))
}

fn c9_table() -> Check {
    let rows = [
        (Mode::CotPrompted, ["73.90", "65.60", "80.46", "59.09"]),
        (Mode::Single, ["79.15", "64.20", "81.23", "61.40"]),
        (Mode::Continuous, ["78.32", "64.50", "80.46", "62.72"]),
    ];
    let datasets = ["GSM8K", "MMLU", "ARC-AI2", "AGI-Eval"];
    let mut reports = Vec::new();
    for (mode, cells) in rows {
        for (d, acc) in datasets.iter().zip(cells) {
            reports.push(EvalReport::from_summary("llama3-8b-instruct", d, mode, acc).map_err(|e| e.to_string())?);
        }
    }
    let t = emit_table(&reports).map_err(|e| e.to_string())?;
    let averages: Vec<String> = t
        .rows
        .iter()
        .map(|r| r.average.map_or_else(String::new, |a| a.exact(2, 4)))
        .collect();
    ensure(averages == ["69.7625", "71.495", "71.50"], || {
        format!("averages {averages:?}")
    })?;
    for (row, want) in t.rows.iter().zip(["69.7625", "71.495", "71.5"]) {
        ensure(
            row.average == Some(Percent::parse(want).map_err(|e| e.to_string())?),
            || format!("average of {} is not exactly {want}", row.mode),
        )?;
    }
    // Bold cells in the published table: Single on GSM8K and ARC-AI2,
    // CoT on MMLU, Continuous on AGI-Eval and the average.
    let expected_best_row = [1usize, 0, 1, 2, 2];
    for (c, &r) in expected_best_row.iter().enumerate() {
        let marked: Vec<usize> = (0..3).filter(|&i| t.best[c][i]).collect();
        ensure(marked == [r], || {
            format!("column {c}: marked rows {marked:?}, expected [{r}]")
        })?;
    }
    Ok(format!("averages {}, bold cells match", averages.join(" / ")))
}

fn c10_engine(p: &Planted) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let random = random_model(&small_config(), 1011);
    let mut worst = 0.0f32;
    let mut tokens_checked = 0;
    for k in 0..50 {
        let model = if k % 2 == 0 { &random } else { &p.model };
        let prompt = encode_prompt(&random_prompt(&mut rng, 1, 30));
        let rec = generate(model, &prompt, 10, &[]).map_err(|e| e.to_string())?;

        // Full re-forward at every step.
        let mut seq = prompt.clone();
        let mut full = Vec::new();
        for _ in 0..10 {
            let logits = model
                .forward(&seq, &mut KvCache::new(model.config()), &mut NoObserver)
                .map_err(|e| e.to_string())?;
            let next = argmax(logits.row(seq.len() - 1));
            if next == cotsteer::model::EOS {
                break;
            }
            full.push(next);
            seq.push(next);
        }
        ensure(full == rec.generated_tokens, || {
            format!("prompt {k}: cached {:?} vs full {:?}", rec.generated_tokens, full)
        })?;
        tokens_checked += full.len();

        let o = oracle_forward(model, &seq);
        let e = model
            .forward(&seq, &mut KvCache::new(model.config()), &mut NoObserver)
            .map_err(|e| e.to_string())?;
        for t in 0..seq.len() {
            for (a, b) in o.logits[t].iter().zip(e.row(t)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("engine vs oracle max |diff| {worst:e}"))?;
    Ok(format!(
        "50 prompts, {tokens_checked} decoded tokens identical; oracle max |diff| {worst:.1e}"
    ))
}

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn c11_persistence(p: &Planted) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let stwt = std::fs::read(fixture_path("planted.stwt")).map_err(|e| e.to_string())?;
    let loaded = Model::from_bytes(&stwt).map_err(|e| e.to_string())?;
    ensure(loaded.to_bytes() == stwt, || "STWT re-encode differs".into())?;
    let path = dir.path().join("m.stwt");
    loaded.save(&path).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == stwt, || {
        "STWT save differs".into()
    })?;

    let sv = p.set.get(1).ok_or("missing vector")?;
    let vpath = dir.path().join("v.strv");
    sv.save(&vpath).map_err(|e| e.to_string())?;
    let vbytes = std::fs::read(&vpath).map_err(|e| e.to_string())?;
    let back = SteeringVector::load(&vpath).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == vbytes && &back == sv, || {
        "STRV round trip differs".into()
    })?;

    let mut bad = stwt.clone();
    let n = bad.len();
    bad[n - 1] ^= 0x01;
    ensure(
        matches!(
            Model::from_bytes(&bad),
            Err(Error::CorruptPayload { what: "weight", .. })
        ),
        || "corrupted STWT checksum not rejected as CorruptPayload".into(),
    )?;
    let mut bad = vbytes.clone();
    let n = bad.len();
    bad[n - 3] ^= 0x80;
    ensure(
        matches!(
            SteeringVector::from_bytes(&bad),
            Err(Error::CorruptPayload { what: "vector", .. })
        ),
        || "corrupted STRV checksum not rejected as CorruptPayload".into(),
    )?;

    let other = random_model(&small_config(), 1111);
    let spec = InjectionSpec::new(1, 1.0, Strategy::Single);
    ensure(
        matches!(
            steered_generate(&other, "hi", sv, &spec, 2, false),
            Err(Error::ModelMismatch { .. })
        ),
        || "cross-model vector use not rejected as ModelMismatch".into(),
    )?;
    Ok("STWT and STRV byte-exact; checksum and model mismatches rejected".into())
}

fn main() {
    let setup = Instant::now();
    let p = planted();
    println!("setup: planted fixture and derivation in {:.2?}", setup.elapsed());

    type Criterion<'a> = (u8, &'a str, u64, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "zero-coefficient identity", 10, Box::new(|| c1_zero_identity(&p))),
        (2, "injection arithmetic", 1, Box::new(c2_injection_arithmetic)),
        (
            3,
            "derivation oracle equivalence",
            60,
            Box::new(|| c3_oracle_equivalence(&p)),
        ),
        (4, "antisymmetry and zero law", 60, Box::new(|| c4_antisymmetry(&p))),
        (
            5,
            "planted-direction recovery",
            60,
            Box::new(|| c5_direction_recovery(&p)),
        ),
        (6, "behavior flip", 30, Box::new(|| c6_behavior_flip(&p))),
        (7, "touch-count law", 5, Box::new(c7_touch_counts)),
        (8, "grid search correctness", 120, Box::new(|| c8_grid(&p))),
        (9, "table reproduction", 1, Box::new(c9_table)),
        (10, "engine correctness", 60, Box::new(|| c10_engine(&p))),
        (11, "persistence", 5, Box::new(|| c11_persistence(&p))),
    ];

    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed < Duration::from_secs(budget);
        let (ok, detail) = match outcome {
            Ok(d) if in_time => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {id:>2} {name} ({:.2?} / {budget}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end scenarios on the planted model and published-table fixtures.

use cotsteer::corpus::{demo_corpus, ContrastTemplate};
use cotsteer::evaluation::{
    demo_dataset, emit_table, extract_answer, held_out_note, run_eval, EvalConfig, EvalItem, EvalReport, ItemKind, Mode,
};
use cotsteer::injection::{compare_generations, InjectionSpec, Strategy};
use cotsteer::instrumentation::generate;
use cotsteer::model::tokenizer::{detokenize, encode_prompt};
use cotsteer::steering::{derive, DeriveOptions};
use cotsteer::synthetic::{oracle_generate, planted_fixture};

#[test]
fn four_item_eval_scores_half() {
    let (_, m) = planted_fixture();
    // Golds chosen from the reference decoder: two items get its answer,
    // two get a different number.
    let items: Vec<EvalItem> = [
        "What is 1 times 1?",
        "What is 2 minus 1?",
        "What is 3 minus 3?",
        "What is 5 minus 4?",
    ]
    .iter()
    .enumerate()
    .map(|(i, q)| {
        let p = encode_prompt(q);
        let out = oracle_generate(&m, &p, 64);
        let text = detokenize(&out[p.len()..]).unwrap();
        let said = extract_answer(&text, ItemKind::Numeric).expect("planted model emits a digit");
        let gold = if i % 2 == 0 { said } else { format!("{}7", said) };
        EvalItem {
            id: format!("q{i}"),
            question: q.to_string(),
            kind: ItemKind::Numeric,
            choices: Vec::new(),
            gold,
        }
    })
    .collect();
    let report = run_eval(&m, &items, &EvalConfig::new("four", Mode::Baseline)).unwrap();
    assert_eq!(report.accuracy.fixed(2), "50.00");
    assert_eq!(report.n_correct, 2);
}

#[test]
fn no_tokens_means_no_answers() {
    let (_, m) = planted_fixture();
    let mut cfg = EvalConfig::new("demo", Mode::Baseline);
    cfg.max_new_tokens = 0;
    let report = run_eval(&m, &demo_dataset(), &cfg).unwrap();
    assert_eq!(report.accuracy.fixed(2), "0.00");
    assert!(report.per_item.iter().all(|r| r.extracted.is_none()));
}

#[test]
fn planted_comparison_diverges_at_first_token() {
    let (spec, m) = planted_fixture();
    let set = derive(
        &m,
        &demo_corpus(),
        &ContrastTemplate::default(),
        &[1],
        &DeriveOptions::default(),
    )
    .unwrap();
    let sv = &set.vectors[0];
    let prompt = "What is 12 plus 7?";
    let cmp = compare_generations(&m, prompt, sv, &InjectionSpec::new(1, 4.0, Strategy::Single), 8, false).unwrap();
    assert_eq!(cmp.first_divergence(), Some(0));
    assert!(spec.answer_tokens.contains(&cmp.unsteered.generated_tokens[0]));
    assert!(spec.step_tokens.contains(&cmp.steered.generated_tokens[0]));
    assert!(cmp.unsteered.per_step_injections.is_empty());

    let same = compare_generations(
        &m,
        prompt,
        sv,
        &InjectionSpec::new(1, 0.0, Strategy::Continuous),
        8,
        false,
    )
    .unwrap();
    assert_eq!(same.first_divergence(), None);
    assert_eq!(same.unsteered.text, same.steered.text);
    assert_eq!(
        same.unsteered.text,
        generate(&m, &encode_prompt(prompt), 8, &[]).unwrap().text
    );
}

#[test]
fn steered_modes_beat_baseline_on_demo() {
    let (_, m) = planted_fixture();
    let set = derive(
        &m,
        &demo_corpus(),
        &ContrastTemplate::default(),
        &[1],
        &DeriveOptions::default(),
    )
    .unwrap();
    let sv = &set.vectors[0];
    let dev = demo_dataset();
    let acc = |mode: Mode, c: f32| {
        let mut cfg = EvalConfig::new("demo", mode);
        if let Some(s) = mode.strategy() {
            cfg = cfg.with_steering(sv, InjectionSpec::new(1, c, s));
        }
        run_eval(&m, &dev, &cfg).unwrap().accuracy
    };
    let base = acc(Mode::Baseline, 0.0);
    assert!(acc(Mode::Single, 4.0) > base);
    assert!(acc(Mode::Continuous, 1.0) > base);
    // The demo dataset shares no question with the steering corpus.
    assert!(held_out_note(&demo_corpus(), &dev).is_some());
}

fn published(model: &str, rows: [(Mode, [&str; 4]); 3]) -> Vec<EvalReport> {
    let datasets = ["GSM8K", "MMLU", "ARC-AI2", "AGI-Eval"];
    rows.iter()
        .flat_map(|(mode, cells)| {
            datasets
                .iter()
                .zip(cells)
                .map(move |(d, a)| EvalReport::from_summary(model, d, *mode, a).unwrap())
        })
        .collect()
}

#[test]
fn mistral_table_reproduces() {
    let reports = published(
        "mistral-7b-instruct-v0.2",
        [
            (Mode::CotPrompted, ["50.72", "48.95", "60.75", "40.00"]),
            (Mode::Single, ["51.40", "48.20", "66.64", "38.70"]),
            (Mode::Continuous, ["48.20", "52.30", "62.70", "42.30"]),
        ],
    );
    let t = emit_table(&reports).unwrap();
    let avgs: Vec<String> = t.rows.iter().map(|r| r.average.unwrap().exact(2, 4)).collect();
    assert_eq!(avgs, ["50.105", "51.235", "51.375"]);
    // Best row per column, average last.
    for (c, r) in [1, 2, 1, 2, 2].into_iter().enumerate() {
        let marked: Vec<usize> = (0..3).filter(|&i| t.best[c][i]).collect();
        assert_eq!(marked, [r], "column {c}");
    }
    let md = t.markdown();
    assert!(
        md.contains("| Continuous Injection | 48.20 | **52.30** | 62.70 | **42.30** | **51.375** |"),
        "{md}"
    );
}

#[test]
fn llama_table_markdown() {
    let reports = published(
        "llama3-8b-instruct",
        [
            (Mode::CotPrompted, ["73.90", "65.60", "80.46", "59.09"]),
            (Mode::Single, ["79.15", "64.20", "81.23", "61.40"]),
            (Mode::Continuous, ["78.32", "64.50", "80.46", "62.72"]),
        ],
    );
    let md = emit_table(&reports).unwrap().markdown();
    let expected = "\
| Mode | GSM8K | MMLU | ARC-AI2 | AGI-Eval | Average |
|---|---:|---:|---:|---:|---:|
| CoT Prompted | 73.90 | **65.60** | 80.46 | 59.09 | 69.7625 |
| Single Injection | **79.15** | 64.20 | **81.23** | 61.40 | 71.495 |
| Continuous Injection | 78.32 | 64.50 | 80.46 | **62.72** | **71.50** |
";
    assert_eq!(md, expected);
}

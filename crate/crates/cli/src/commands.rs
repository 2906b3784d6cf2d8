// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use cotsteer::corpus::{
    corpus_fingerprint, demo_corpus, load_corpus, reference_recipe, save_corpus, ContrastTemplate, JoinFormat,
    DEFAULT_COT_SUFFIX, DEFAULT_DIRECT_SUFFIX,
};
use cotsteer::evaluation::{
    dataset_fingerprint, dataset_to_jsonl, demo_dataset, emit_table, held_out_note, load_dataset, run_eval, EvalConfig,
    EvalReport, Mode,
};
use cotsteer::gridsearch::{grid_search, GridSpec, DEFAULT_COEFFICIENTS};
use cotsteer::injection::{
    check_vector, compare_generations, reference_configs, steered_generate, InjectionSpec, RunConfig, Strategy,
    CONTINUOUS_WARN_COEFFICIENT,
};
use cotsteer::instrumentation::{PositionPolicy, PositionScope};
use cotsteer::model::tokenizer::{TokenId, BOS, EOS, PAD};
use cotsteer::model::{GenerationRecord, Model};
use cotsteer::steering::{derive as derive_set, DeriveOptions, SteeringVector, SteeringVectorSet};
use cotsteer::synthetic::build_planted_model;

use crate::config::{create_dir, invalid, require, resolve, write, CliError, CliResult, RunManifest};
use crate::{DeriveArgs, EvalArgs, FixtureArgs, GenerateArgs, GridArgs, InspectArgs, TableArgs};

pub const FIXTURE_SEED: u64 = cotsteer::synthetic::PLANTED_SEED;

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn checksum_hex(bytes: &[u8]) -> String {
    bytes[bytes.len().saturating_sub(8)..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            invalid(format!("file not found: {}", path.display()))
        } else {
            CliError::Runtime(format!("cannot read {}: {e}", path.display()))
        }
    })
}

fn load_vector(path: &Path) -> CliResult<(SteeringVector, String)> {
    let bytes = read_bytes(path)?;
    let sv = SteeringVector::from_bytes(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((sv, checksum_hex(&bytes)))
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(path).map_err(|e| with_path(e, path))
}

fn with_path(e: cotsteer::Error, path: &Path) -> CliError {
    match CliError::from(e) {
        CliError::Validation(m) => invalid(format!("{}: {m}", path.display())),
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
    }
}

fn token_repr(t: TokenId) -> String {
    match t {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        PAD => "<pad>".into(),
        b if b < 256 => format!("{:?}", char::from(b as u8)),
        other => format!("<{other}>"),
    }
}

// ---------------------------------------------------------------------------
// derive
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DeriveSettings {
    model: Option<PathBuf>,
    corpus: Option<PathBuf>,
    layers: Option<Vec<usize>>,
    cot_suffix: String,
    direct_suffix: String,
    join: JoinFormat,
    max_new_tokens: usize,
    position_policy: PositionPolicy,
    out: Option<PathBuf>,
}

impl Default for DeriveSettings {
    fn default() -> Self {
        Self {
            model: None,
            corpus: None,
            layers: None,
            cot_suffix: DEFAULT_COT_SUFFIX.into(),
            direct_suffix: DEFAULT_DIRECT_SUFFIX.into(),
            join: JoinFormat::Newline,
            max_new_tokens: DeriveOptions::default().max_new_tokens,
            position_policy: PositionPolicy::ExcludeSpecial,
            out: None,
        }
    }
}

pub fn derive(args: DeriveArgs, jobs: usize) -> CliResult<()> {
    let s: DeriveSettings = resolve(&args, args.config.as_deref())?;
    let model_path = require(&s.model, "--model")?;
    let corpus_path = require(&s.corpus, "--corpus")?;
    let out = require(&s.out, "--out")?;
    let model = load_model(model_path)?;
    let corpus = load_corpus(corpus_path).map_err(|e| with_path(e, corpus_path))?;
    let layers = s
        .layers
        .clone()
        .unwrap_or_else(|| (0..model.config().n_layers).collect());
    for &l in &layers {
        model
            .config()
            .check_layer(l)
            .map_err(|e| invalid(format!("--layers: {e}")))?;
    }
    let template = ContrastTemplate {
        cot_suffix: s.cot_suffix.clone(),
        direct_suffix: s.direct_suffix.clone(),
        join_format: s.join,
    };
    if !template.is_contrastive() {
        warn("the two suffixes are identical; every vector will be zero");
    }
    let opts = DeriveOptions {
        max_new_tokens: s.max_new_tokens,
        position_policy: s.position_policy,
        jobs,
    };
    let set = derive_set(&model, &corpus, &template, &layers, &opts)?;
    set.save_dir(out).map_err(|e| with_path(e, out))?;
    RunManifest::new("derive", &s)
        .input("model_id", model.model_id())
        .input("corpus", corpus_fingerprint(&corpus))
        .input("template", template.fingerprint())
        .write(out)?;

    println!("{:<10} {:>12}", "layer", "norm");
    for v in &set.vectors {
        println!(
            "{:<10} {:>12.6}",
            format!("{}/{}", v.layer, model.config().n_layers),
            v.norm()
        );
    }
    println!(
        "wrote {} vector(s) from {} questions to {}",
        set.vectors.len(),
        corpus.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate / compare
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateSettings {
    model: Option<PathBuf>,
    vector_path: Option<PathBuf>,
    layer: Option<usize>,
    coefficient: Option<f32>,
    strategy: Strategy,
    scope: PositionScope,
    prompt: Option<String>,
    max_new_tokens: usize,
    force: bool,
    warn_coefficient: f32,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            model: None,
            vector_path: None,
            layer: None,
            coefficient: None,
            strategy: Strategy::Single,
            scope: PositionScope::AllCurrent,
            prompt: None,
            max_new_tokens: 64,
            force: false,
            warn_coefficient: CONTINUOUS_WARN_COEFFICIENT,
        }
    }
}

fn print_record(label: &str, r: &GenerationRecord) {
    println!("== {label} ==");
    println!("{}", r.text);
    println!(
        "[prompt {} tokens, generated {}{}, injected positions {}]",
        r.prompt_tokens.len(),
        r.generated_tokens.len(),
        if r.stopped_on_eos { " + <eos>" } else { "" },
        r.touched_positions()
    );
}

enum DiffLine {
    Same(TokenId),
    Removed(TokenId),
    Added(TokenId),
}

/// Longest-common-subsequence diff of two token sequences.
fn token_diff(a: &[TokenId], b: &[TokenId]) -> Vec<DiffLine> {
    let (n, m) = (a.len(), b.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] {
            out.push(DiffLine::Same(a[i]));
            i += 1;
            j += 1;
        } else if i < n && (j == m || lcs[i + 1][j] >= lcs[i][j + 1]) {
            out.push(DiffLine::Removed(a[i]));
            i += 1;
        } else {
            out.push(DiffLine::Added(b[j]));
            j += 1;
        }
    }
    out
}

pub fn generate(args: GenerateArgs, compare: bool) -> CliResult<()> {
    let s: GenerateSettings = resolve(&args, args.config.as_deref())?;
    let vector_path = require(&s.vector_path, "--vector")?;
    let coefficient = *require(&s.coefficient, "--coef")?;

    if args.print_config {
        let layer = match s.layer {
            Some(l) => l,
            None => load_vector(vector_path)?.0.layer,
        };
        let rc = RunConfig {
            vector_path: vector_path.clone(),
            layer,
            coefficient,
            strategy: s.strategy,
            max_new_tokens: s.max_new_tokens,
        };
        print!("{}", rc.to_json());
        return Ok(());
    }

    let (sv, _) = load_vector(vector_path)?;
    let layer = s.layer.unwrap_or(sv.layer);
    let model = load_model(require(&s.model, "--model")?)?;
    let prompt = require(&s.prompt, "--prompt")?;
    let spec = InjectionSpec {
        scope: s.scope,
        ..InjectionSpec::new(layer, coefficient, s.strategy)
    };
    if let Some(w) = spec.oversteer_warning(s.warn_coefficient) {
        warn(&w);
    }
    if let Some(w) = check_vector(&model, &sv, &spec, s.force)? {
        warn(&format!("--force: {w}"));
    }

    if !compare {
        let rec = steered_generate(&model, prompt, &sv, &spec, s.max_new_tokens, s.force)?;
        print_record(
            &format!("steered ({} l={} c={})", spec.strategy, layer, coefficient),
            &rec,
        );
        return Ok(());
    }

    let cmp = compare_generations(&model, prompt, &sv, &spec, s.max_new_tokens, s.force)?;
    print_record("unsteered", &cmp.unsteered);
    print_record(
        &format!("steered ({} l={} c={})", spec.strategy, layer, coefficient),
        &cmp.steered,
    );

    let (a, b) = (&cmp.unsteered.generated_tokens, &cmp.steered.generated_tokens);
    println!();
    println!("{:>5}  {:<14} {:<14}", "step", "unsteered", "steered");
    for i in 0..a.len().max(b.len()) {
        let cell = |t: Option<&TokenId>| t.map_or_else(String::new, |&t| format!("{t:>3} {}", token_repr(t)));
        let mark = if a.get(i) == b.get(i) { ' ' } else { '*' };
        println!("{:>5}{mark} {:<14} {:<14}", i + 1, cell(a.get(i)), cell(b.get(i)));
    }
    println!();
    match cmp.first_divergence() {
        None => println!("token diff: no differences"),
        Some(k) => {
            println!("--- unsteered");
            println!("+++ steered");
            println!("@@ generated tokens, first difference at step {} @@", k + 1);
            for line in token_diff(a, b) {
                match line {
                    DiffLine::Same(t) => println!(" {t} {}", token_repr(t)),
                    DiffLine::Removed(t) => println!("-{t} {}", token_repr(t)),
                    DiffLine::Added(t) => println!("+{t} {}", token_repr(t)),
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / table
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    model: Option<PathBuf>,
    dataset: Option<PathBuf>,
    dataset_id: Option<String>,
    modes: Vec<String>,
    vector_path: Option<PathBuf>,
    layer: Option<usize>,
    coefficient: Option<f32>,
    continuous_coefficient: Option<f32>,
    cot_prompt: String,
    max_new_tokens: usize,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    force: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            model: None,
            dataset: None,
            dataset_id: None,
            modes: vec!["baseline".into()],
            vector_path: None,
            layer: None,
            coefficient: None,
            continuous_coefficient: None,
            cot_prompt: DEFAULT_COT_SUFFIX.into(),
            max_new_tokens: 64,
            corpus: None,
            out: None,
            force: false,
        }
    }
}

fn parse_modes(raw: &[String]) -> CliResult<Vec<Mode>> {
    let mut modes = Vec::new();
    for m in raw {
        let parsed: Vec<Mode> = if m == "all" {
            Mode::ALL.to_vec()
        } else {
            vec![m.parse::<Mode>().map_err(|e| invalid(format!("--mode: {e}")))?]
        };
        for p in parsed {
            if !modes.contains(&p) {
                modes.push(p);
            }
        }
    }
    if modes.is_empty() {
        return Err(invalid("--mode: no modes given"));
    }
    Ok(modes)
}

pub fn eval(args: EvalArgs, jobs: usize) -> CliResult<()> {
    let s: EvalSettings = resolve(&args, args.config.as_deref())?;
    let modes = parse_modes(&s.modes)?;
    let steered = modes.iter().any(|m| m.strategy().is_some());
    match (steered, &s.vector_path) {
        (true, None) => {
            return Err(invalid("steered modes (single, continuous) need --vector"));
        }
        (false, Some(_)) => {
            return Err(invalid("--vector is only used by the single and continuous modes"));
        }
        _ => {}
    }
    if !steered && (s.coefficient.is_some() || s.layer.is_some()) {
        return Err(invalid("--coef and --layer are only used by steered modes"));
    }
    let model = load_model(require(&s.model, "--model")?)?;
    let dataset_path = require(&s.dataset, "--dataset")?;
    let out = require(&s.out, "--out")?;
    let items = load_dataset(dataset_path).map_err(|e| with_path(e, dataset_path))?;
    let dataset_id = s.dataset_id.clone().unwrap_or_else(|| {
        dataset_path
            .file_stem()
            .map_or_else(|| "dataset".into(), |x| x.to_string_lossy().into_owned())
    });
    let note = match &s.corpus {
        Some(p) => held_out_note(&load_corpus(p).map_err(|e| with_path(e, p))?, &items),
        None => None,
    };

    let vector = match &s.vector_path {
        Some(p) => Some(load_vector(p)?),
        None => None,
    };
    let mut manifest = RunManifest::new("eval", &s)
        .input("model_id", model.model_id())
        .input("dataset", dataset_fingerprint(&items));
    if let Some((sv, sum)) = &vector {
        manifest = manifest.input("vector", sum.clone());
        if let Some(w) = sv.check_compatible(&model, s.force)? {
            warn(&format!("--force: {w}"));
        }
    }

    create_dir(out)?;
    let mut reports = Vec::new();
    for mode in modes {
        let mut cfg = EvalConfig::new(dataset_id.clone(), mode);
        cfg.cot_prompt = s.cot_prompt.clone();
        cfg.max_new_tokens = s.max_new_tokens;
        cfg.jobs = jobs;
        cfg.force = s.force;
        if let (Some(strategy), Some((sv, _))) = (mode.strategy(), &vector) {
            let c = *require(&s.coefficient, "--coef")?;
            let c = match strategy {
                Strategy::Continuous => s.continuous_coefficient.unwrap_or(c),
                Strategy::Single => c,
            };
            let spec = InjectionSpec::new(s.layer.unwrap_or(sv.layer), c, strategy);
            if let Some(w) = spec.oversteer_warning(CONTINUOUS_WARN_COEFFICIENT) {
                warn(&w);
            }
            cfg = cfg.with_steering(sv, spec);
        }
        let mut report = run_eval(&model, &items, &cfg)?;
        report.notes.extend(note.clone());
        println!(
            "{:<22} {:>7}%  ({}/{})",
            mode.label(),
            report.accuracy,
            report.n_correct,
            report.n_items
        );
        write(&out.join(format!("report_{dataset_id}_{mode}.json")), report.to_json())?;
        reports.push(report);
    }
    let table = emit_table(&reports)?;
    write(&out.join("table.md"), table.markdown())?;
    write(&out.join("table.csv"), table.csv())?;
    manifest.write(out)?;
    println!();
    print!("{}", table.markdown());
    if let Some(n) = note {
        println!("\nnote: {n}");
    }
    Ok(())
}

pub fn table(args: TableArgs) -> CliResult<()> {
    let mut reports = Vec::new();
    for p in &args.reports {
        reports.push(EvalReport::load(p).map_err(|e| with_path(e, p))?);
    }
    let t = emit_table(&reports)?;
    print!("{}", t.markdown());
    if let Some(p) = &args.markdown {
        write(p, t.markdown())?;
    }
    if let Some(p) = &args.csv {
        write(p, t.csv())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridSettings {
    model: Option<PathBuf>,
    vectors: Option<PathBuf>,
    layers: Option<Vec<usize>>,
    coefficients: Vec<f32>,
    strategy: Strategy,
    dev: Option<PathBuf>,
    max_new_tokens: usize,
    out: Option<PathBuf>,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            model: None,
            vectors: None,
            layers: None,
            coefficients: DEFAULT_COEFFICIENTS.to_vec(),
            strategy: Strategy::Single,
            dev: None,
            max_new_tokens: 64,
            out: None,
        }
    }
}

pub fn grid(args: GridArgs, jobs: usize) -> CliResult<()> {
    let s: GridSettings = resolve(&args, args.config.as_deref())?;
    let model = load_model(require(&s.model, "--model")?)?;
    let dir = require(&s.vectors, "--vectors")?;
    let svset = SteeringVectorSet::load_dir(dir).map_err(|e| with_path(e, dir))?;
    let dev_path = require(&s.dev, "--dev")?;
    let dev = load_dataset(dev_path).map_err(|e| with_path(e, dev_path))?;
    let out = require(&s.out, "--out")?;
    let spec = GridSpec {
        layers: s.layers.clone().unwrap_or_else(|| svset.layers()),
        coefficients: s.coefficients.clone(),
        strategy: s.strategy,
        dev_dataset_id: dev_path
            .file_stem()
            .map_or_else(|| "dev".into(), |x| x.to_string_lossy().into_owned()),
        max_new_tokens: s.max_new_tokens,
    };
    let result = grid_search(&model, &svset, &spec, &dev, jobs)?;
    create_dir(out)?;
    write(&out.join("grid.json"), result.to_json())?;
    write(&out.join("grid.md"), result.markdown())?;
    write(&out.join("heatmap.csv"), result.heatmap_csv())?;
    RunManifest::new("grid", &s)
        .input("model_id", model.model_id())
        .input("dataset", dataset_fingerprint(&dev))
        .write(out)?;
    print!("{}", result.markdown());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn vector_info(sv: &SteeringVector, checksum: &str) -> serde_json::Value {
    let p = &sv.provenance;
    json!({
        "kind": "vector",
        "layer": sv.layer,
        "n_layers": p.n_layers,
        "d_model": sv.d_model(),
        "norm": sv.norm(),
        "model_id": p.model_id,
        "n_questions": p.n_questions,
        "corpus_fingerprint": p.corpus_fingerprint,
        "template_fingerprint": p.template_fingerprint,
        "cot_suffix": p.template.cot_suffix,
        "direct_suffix": p.template.direct_suffix,
        "position_policy": p.position_policy,
        "max_new_tokens": p.max_new_tokens,
        "checksum": checksum,
    })
}

fn print_vector(info: &serde_json::Value) {
    println!("steering vector");
    println!("  layer          {}/{}", info["layer"], info["n_layers"]);
    println!("  d_model        {}", info["d_model"]);
    println!("  norm           {:.6}", info["norm"].as_f64().unwrap_or(f64::NAN));
    println!("  model_id       {}", info["model_id"].as_str().unwrap_or(""));
    println!("  n_questions    {}", info["n_questions"]);
    println!("  corpus         {}", info["corpus_fingerprint"].as_str().unwrap_or(""));
    println!(
        "  template       {}",
        info["template_fingerprint"].as_str().unwrap_or("")
    );
    println!("  cot suffix     {}", info["cot_suffix"]);
    println!("  direct suffix  {}", info["direct_suffix"]);
    println!("  positions      {}", info["position_policy"].as_str().unwrap_or(""));
    println!("  checksum       {}", info["checksum"].as_str().unwrap_or(""));
}

pub fn inspect(args: InspectArgs) -> CliResult<()> {
    let info = if let Some(p) = &args.vector {
        let (sv, sum) = load_vector(p)?;
        vector_info(&sv, &sum)
    } else if let Some(dir) = &args.vectors {
        let set = SteeringVectorSet::load_dir(dir).map_err(|e| with_path(e, dir))?;
        let mut vectors = Vec::new();
        for v in &set.vectors {
            let path = dir.join(SteeringVectorSet::file_name(v.layer));
            let (_, sum) = load_vector(&path)?;
            vectors.push(vector_info(v, &sum));
        }
        json!({ "kind": "vector_set", "vectors": vectors })
    } else {
        let p = args.model.as_ref().expect("clap enforces one target");
        let bytes = read_bytes(p)?;
        let model = Model::from_bytes(&bytes).map_err(|e| with_path(e, p))?;
        let w = model.weights();
        let n_params: usize = w.tok_embed.data().len()
            + w.pos_embed.data().len()
            + w.final_norm.len()
            + w.unembed.data().len()
            + w.layers
                .iter()
                .map(|l| {
                    l.attn_norm.len()
                        + l.mlp_norm.len()
                        + [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down]
                            .iter()
                            .map(|t| t.data().len())
                            .sum::<usize>()
                })
                .sum::<usize>();
        json!({
            "kind": "model",
            "model_id": model.model_id(),
            "config": model.config(),
            "n_parameters": n_params,
            "file_bytes": bytes.len(),
            "checksum": checksum_hex(&bytes),
        })
    };

    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&info).expect("json value serializes")
        );
        return Ok(());
    }
    match info["kind"].as_str() {
        Some("vector") => print_vector(&info),
        Some("vector_set") => {
            for v in info["vectors"].as_array().into_iter().flatten() {
                print_vector(v);
            }
        }
        _ => {
            println!("model");
            println!("  model_id       {}", info["model_id"].as_str().unwrap_or(""));
            let c = &info["config"];
            println!(
                "  shape          {} layers, d_model {}, {} heads, d_ff {}",
                c["n_layers"], c["d_model"], c["n_heads"], c["d_ff"]
            );
            println!("  vocab          {}, max_seq {}", c["vocab_size"], c["max_seq"]);
            println!("  parameters     {}", info["n_parameters"]);
            println!("  checksum       {}", info["checksum"].as_str().unwrap_or(""));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fixture
// ---------------------------------------------------------------------------

pub fn fixture(args: FixtureArgs) -> CliResult<()> {
    let out = &args.out;
    create_dir(&out.join("configs"))?;
    let spec = cotsteer::synthetic::PlantedModelSpec::default();
    let model = build_planted_model(&spec, args.seed)?;
    model
        .save(out.join("planted.stwt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let spec_json = json!({ "seed": args.seed, "spec": spec });
    write(
        &out.join("planted_spec.json"),
        serde_json::to_string_pretty(&spec_json).expect("spec serializes") + "\n",
    )?;
    save_corpus(out.join("demo_corpus.jsonl"), &demo_corpus()).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&out.join("demo_dataset.jsonl"), dataset_to_jsonl(&demo_dataset()))?;
    write(
        &out.join("reference_recipe.json"),
        serde_json::to_string_pretty(&reference_recipe()).expect("recipe serializes") + "\n",
    )?;
    for (name, cfg) in reference_configs() {
        write(&out.join("configs").join(format!("{name}.json")), cfg.to_json())?;
    }
    println!("model_id {}", model.model_id());
    println!("wrote fixtures to {}", out.display());
    Ok(())
}

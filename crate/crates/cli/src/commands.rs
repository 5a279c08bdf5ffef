use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use laffi_annotate::{create_session, AppState, Store};
use laffi_core::attention::{self, ExportFormat};
use laffi_core::corpus::{
    self, make_synthetic_corpus, FeedbackRecord, FeedbackSource, MixSpec, PredictedAnswerRecord, PromptTemplate,
    QAExample,
};
use laffi_core::eval::{self, Prediction};
use laffi_core::io::{content_hash, derive_seed, file_content_hash, write_atomic};
use laffi_core::lora::{self, LoraAdapter, LoraConfig};
use laffi_core::model::{GenerationConfig, Preset, TransformerWeights};
use laffi_core::pipeline::{
    self, build_laffi_pairs, build_sft_pairs, pretrain_documents, pretrain_toy, ExperimentInputs, ExperimentSpec,
    PretrainConfig, TrainConfig, TrainMode,
};
use serde::Serialize;

use crate::config::Settings;
use crate::{Cli, Command, Failure, OrFail};

type R<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> R {
    let section = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Ingest(_) => "ingest",
        Command::Templates(_) => "templates",
        Command::Init(_) => "init",
        Command::Predict(_) => "predict",
        Command::AnnotateAi(_) => "annotate-ai",
        Command::AnnotateReference(_) => "annotate-reference",
        Command::Serve(_) => "serve",
        Command::Export(_) => "export",
        Command::Mix(_) => "mix",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Attention(_) => "attention",
        Command::Experiment(_) => "experiment",
    };
    let s = Settings::load(cli.config.as_deref(), section, cli.data_dir.clone())?;
    let seed = s.or(cli.seed, "seed", 0u64)?;
    match cli.command {
        Command::Synth(a) => synth(&s, seed, a),
        Command::Ingest(a) => ingest(&s, seed, a),
        Command::Templates(a) => templates(&s, a),
        Command::Init(a) => init(&s, seed, a),
        Command::Predict(a) => predict(&s, a),
        Command::AnnotateAi(a) => annotate_ai(&s, a),
        Command::AnnotateReference(a) => annotate_reference(&s, a),
        Command::Serve(a) => serve(&s, seed, a),
        Command::Export(a) => export(&s, a),
        Command::Mix(a) => mix(&s, seed, a),
        Command::Train(a) => train(&s, seed, a),
        Command::Eval(a) => evaluate(&s, a),
        Command::Attention(a) => attention(&s, a),
        Command::Experiment(a) => experiment(&s, cli.seed, a),
    }
}

fn examples(path: &Path) -> R<Vec<QAExample>> {
    let xs: Vec<QAExample> = corpus::read_jsonl(path).invalid(&format!("reading dataset {}", path.display()))?;
    corpus::index_by_id(&xs).invalid(&format!("dataset {}", path.display()))?;
    Ok(xs)
}

fn records<T: corpus::JsonlRecord>(path: &Path, what: &str) -> R<Vec<T>> {
    corpus::read_jsonl(path).invalid(&format!("reading {what} {}", path.display()))
}

fn template(path: Option<PathBuf>, default: fn() -> PromptTemplate) -> R<PromptTemplate> {
    match path {
        Some(p) => PromptTemplate::load(&p).invalid(&format!("template {}", p.display())),
        None => Ok(default()),
    }
}

fn model(path: &Path) -> R<TransformerWeights> {
    TransformerWeights::load(path).invalid(&format!("model checkpoint {}", path.display()))
}

fn adapters_for(weights: &TransformerWeights, path: &Path) -> R<Vec<LoraAdapter>> {
    let (config, adapters) = lora::load_adapters(path).invalid(&format!("adapter checkpoint {}", path.display()))?;
    if config != weights.config {
        return Err(Failure::invalid(format!(
            "adapters {} were trained for a different model configuration",
            path.display()
        )));
    }
    Ok(adapters)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> R {
    let mut text = serde_json::to_string_pretty(value).runtime("serializing")?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).runtime(&format!("writing {}", path.display()))
}

fn write_records<T: corpus::JsonlRecord>(path: &Path, xs: &[T]) -> R {
    corpus::write_jsonl(path, xs).runtime(&format!("writing {}", path.display()))
}

fn generation(max_new_tokens: usize) -> GenerationConfig {
    GenerationConfig { max_new_tokens, ..GenerationConfig::default() }
}

fn synth(s: &Settings, seed: u64, a: crate::SynthArgs) -> R {
    let n = s.or(a.n, "n", 200usize)?;
    let out = s.need_path(a.out, "out")?;
    if n == 0 {
        return Err(Failure::invalid("--n must be at least 1"));
    }
    let xs = make_synthetic_corpus(n, seed);
    write_records(&out, &xs)?;
    println!("wrote {n} synthetic examples to {}", out.display());
    Ok(())
}

fn ingest(s: &Settings, seed: u64, a: crate::IngestArgs) -> R {
    let squad = s.need_path(a.squad, "squad")?;
    let out = s.need_path(a.out, "out")?;
    let limit = s.opt(a.limit, "limit")?;
    let mut xs = corpus::load_squad(&squad).invalid(&format!("reading {}", squad.display()))?;
    if let Some(n) = limit {
        xs = corpus::sample_subset(&xs, n, derive_seed(seed, "ingest")).invalid("--limit")?;
    }
    write_records(&out, &xs)?;
    let unanswerable = xs.iter().filter(|x| !x.is_answerable).count();
    println!("wrote {} examples ({unanswerable} unanswerable) to {}", xs.len(), out.display());
    Ok(())
}

fn templates(s: &Settings, a: crate::TemplatesArgs) -> R {
    let dir = s.need_path(a.out_dir, "out_dir")?;
    for (name, text) in [
        ("answer.txt", corpus::template::DEFAULT_ANSWER),
        ("feedback_annotation.txt", corpus::template::DEFAULT_FEEDBACK_ANNOTATION),
        ("feedback_prediction.txt", corpus::template::DEFAULT_FEEDBACK_PREDICTION),
    ] {
        write_atomic(&dir.join(name), text.as_bytes()).runtime("writing templates")?;
    }
    println!("wrote templates to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct InitMeta {
    preset: Preset,
    pretrain: PretrainConfig,
    corpus_hash: String,
    checksum: String,
    losses: Vec<f32>,
}

fn init(s: &Settings, seed: u64, a: crate::InitArgs) -> R {
    let preset: Preset = s.or(a.preset, "preset", "nano".to_string())?.parse().invalid("--preset")?;
    let out = s.need_path(a.out, "out")?;
    let defaults = PretrainConfig::default();
    let pc = PretrainConfig {
        steps: s.or(a.steps, "steps", defaults.steps)?,
        batch_size: s.or(a.batch_size, "batch_size", defaults.batch_size)?,
        lr: s.or(a.lr, "lr", defaults.lr)?,
        seed: derive_seed(seed, "pretrain"),
    };
    let docs_src = match s.opt_path(a.corpus, "corpus")? {
        Some(p) => examples(&p)?,
        None => make_synthetic_corpus(s.or(a.corpus_size, "corpus_size", 400usize)?, derive_seed(seed, "corpus")),
    };
    let docs = pretrain_documents(&docs_src);
    let config = preset.config(derive_seed(seed, "init"));
    let corpus_hash = content_hash(docs.concat().as_bytes());
    let outcome = pretrain_toy(&config, &docs, &pc).runtime("pre-training")?;
    outcome.weights.save(&out).runtime(&format!("writing {}", out.display()))?;
    let first = outcome.losses.first().copied().unwrap_or(f32::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f32::NAN);
    let checksum = format!("{:016x}", outcome.weights.checksum());
    write_json(
        &sidecar(&out),
        &InitMeta { preset, pretrain: pc, corpus_hash, checksum: checksum.clone(), losses: outcome.losses },
    )?;
    println!(
        "pre-trained {preset} ({} params): loss {first:.3} -> {last:.3}, checksum {checksum}",
        outcome.weights.param_count()
    );
    Ok(())
}

/// `x.ckpt` → `x.meta.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn predict(s: &Settings, a: crate::PredictArgs) -> R {
    let weights = model(&s.need_path(a.model, "model")?)?;
    let adapters = match s.opt_path(a.adapters, "adapters")? {
        Some(p) => adapters_for(&weights, &p)?,
        None => Vec::new(),
    };
    let data = examples(&s.need_path(a.dataset, "dataset")?)?;
    let tpl = template(s.opt_path(a.template, "template")?, PromptTemplate::default_answer)?;
    tpl.validate_answer_template().invalid("answer template")?;
    let gen = generation(s.or(a.max_new_tokens, "max_new_tokens", 28usize)?);
    let out = s.need_path(a.out, "out")?;
    let existing: Vec<PredictedAnswerRecord> =
        if out.exists() { records(&out, "existing predictions")? } else { Vec::new() };
    let model_id = format!(
        "{:016x}{}",
        weights.checksum(),
        if adapters.is_empty() {
            String::new()
        } else {
            format!(
                "+{}",
                content_hash(
                    &lora::adapters_to_container(&weights.config, &adapters).encode().runtime("encoding adapters")?
                )
            )
        }
    );
    let result = pipeline::stage1_predict(&weights, &adapters, &data, &tpl, &gen, &model_id, &existing)
        .runtime("predicting answers")?;
    write_records(&out, &result.records)?;
    for skip in &result.skips {
        eprintln!("skipped {}: {}", skip.example_id, skip.reason);
    }
    println!("predicted {} answers ({} skipped) to {}", result.records.len(), result.skips.len(), out.display());
    Ok(())
}

fn annotate_ai(s: &Settings, a: crate::AnnotateAiArgs) -> R {
    let weights = model(&s.need_path(a.model, "model")?)?;
    let adapters = match s.opt_path(a.adapters, "adapters")? {
        Some(p) => adapters_for(&weights, &p)?,
        None => Vec::new(),
    };
    let predicted: Vec<PredictedAnswerRecord> = records(&s.need_path(a.predicted, "predicted")?, "predicted answers")?;
    let data = examples(&s.need_path(a.dataset, "dataset")?)?;
    let tpl = template(s.opt_path(a.template, "template")?, PromptTemplate::default_feedback_annotation)?;
    let gen = generation(s.or(a.max_new_tokens, "max_new_tokens", 48usize)?);
    let out = s.need_path(a.out, "out")?;
    let ai = pipeline::stage2_ai_annotate(&weights, &adapters, &predicted, &data, &tpl, &gen)
        .runtime("generating AI feedback")?;
    write_records(&out, &ai)?;
    let fallbacks = ai.iter().filter(|r| r.fallback).count();
    println!("wrote {} AI feedback records ({fallbacks} fallbacks) to {}", ai.len(), out.display());
    Ok(())
}

fn annotate_reference(s: &Settings, a: crate::AnnotateReferenceArgs) -> R {
    let predicted: Vec<PredictedAnswerRecord> = records(&s.need_path(a.predicted, "predicted")?, "predicted answers")?;
    let data = examples(&s.need_path(a.dataset, "dataset")?)?;
    let out = s.need_path(a.out, "out")?;
    let human = pipeline::simulate_human_feedback(&predicted, &data).invalid("predicted answers")?;
    write_records(&out, &human)?;
    println!("wrote {} reference feedback records to {}", human.len(), out.display());
    Ok(())
}

fn serve(s: &Settings, seed: u64, a: crate::ServeArgs) -> R {
    let dir = s.need_path(a.session_dir, "session_dir")?;
    let host = s.or(a.host, "host", "127.0.0.1".to_string())?;
    let port = s.or(a.port, "port", 8080u16)?;
    let addr: SocketAddr = format!("{host}:{port}").parse().invalid("--host/--port")?;
    let static_dir = s.opt_path(a.static_dir, "static_dir")?;
    if let Some(d) = &static_dir {
        if !d.is_dir() {
            return Err(Failure::invalid(format!("static dir {} does not exist", d.display())));
        }
    }
    let predicted = s.opt_path(a.predicted, "predicted")?;
    let store = match predicted {
        None if dir.join(laffi_annotate::store::SESSION_FILE).exists() => {
            Store::open(&dir).invalid(&format!("session {}", dir.display()))?
        }
        None => return Err(Failure::invalid("missing required flag --predicted (no session to resume)")),
        Some(p) => {
            let predicted: Vec<PredictedAnswerRecord> = records(&p, "predicted answers")?;
            let ai: Vec<FeedbackRecord> = records(&s.need_path(a.ai_feedback, "ai_feedback")?, "AI feedback")?;
            let data = examples(&s.need_path(a.dataset, "dataset")?)?;
            let roster: Vec<String> = s
                .need(a.annotators, "annotators")?
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect();
            let state = create_session(&predicted, &ai, &data, &roster, seed).invalid("creating session")?;
            Store::create(&dir, state).invalid(&format!("session {}", dir.display()))?
        }
    };
    let p = store.state().progress();
    println!(
        "session {}: {}/{} tasks done, {} annotators",
        store.state().session_id,
        p.done,
        p.total,
        p.annotators.len()
    );
    let rt = tokio::runtime::Runtime::new().runtime("starting runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.runtime(&format!("binding {addr}"))?;
        // Port 0 picks a free port; say which one.
        println!("listening on http://{}", listener.local_addr().runtime("local address")?);
        laffi_annotate::serve_on(listener, AppState::new(store), static_dir).await.runtime("annotation service")
    })
}

fn export(s: &Settings, a: crate::ExportArgs) -> R {
    let dir = s.need_path(a.session_dir, "session_dir")?;
    let out = s.need_path(a.out, "out")?;
    let store = Store::open(&dir).invalid(&format!("session {}", dir.display()))?;
    let recs = store.state().export();
    write_records(&out, &recs)?;
    println!("exported {} human feedback records to {}", recs.len(), out.display());
    Ok(())
}

fn mix(s: &Settings, seed: u64, a: crate::MixArgs) -> R {
    let human: Vec<FeedbackRecord> = records(&s.need_path(a.human, "human")?, "human feedback")?;
    let ai: Vec<FeedbackRecord> = records(&s.need_path(a.ai, "ai")?, "AI feedback")?;
    let spec = MixSpec {
        total_n: s.need(a.total, "total")?,
        human_fraction: s.need(a.fraction, "fraction")?,
        seed: derive_seed(seed, "mix"),
    };
    let out = s.need_path(a.out, "out")?;
    let mixed = corpus::mix(&human, &ai, &spec).invalid("mixing feedback")?;
    write_records(&out, &mixed)?;
    let n_human = mixed.iter().filter(|r| r.source == FeedbackSource::Human).count();
    println!("wrote {} records ({n_human} human, {} AI) to {}", mixed.len(), mixed.len() - n_human, out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainMeta {
    config: TrainConfig,
    base_checksum: String,
    inputs: Vec<(String, String)>,
    pairs: usize,
    skipped: Vec<pipeline::Skip>,
    trainable_fraction: f64,
    losses: Vec<f32>,
}

fn train(s: &Settings, seed: u64, a: crate::TrainArgs) -> R {
    let mode: TrainMode = s.or(a.mode, "mode", "laffi".to_string())?.parse().map_err(Failure::invalid)?;
    let model_path = s.need_path(a.model, "model")?;
    let base = model(&model_path)?;
    let dataset_path = s.need_path(a.dataset, "dataset")?;
    let data = examples(&dataset_path)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        mode,
        epochs: s.or(a.epochs, "epochs", defaults.epochs)?,
        batch_size: s.or(a.batch_size, "batch_size", defaults.batch_size)?,
        lr: s.or(a.lr, "lr", defaults.lr)?,
        lora: LoraConfig {
            rank: s.or(a.rank, "rank", defaults.lora.rank)?,
            alpha: s.or(a.alpha, "alpha", defaults.lora.alpha)?,
            ..defaults.lora.clone()
        },
        max_seq_len: base.config.max_seq_len,
        seed: derive_seed(seed, "train"),
        ..defaults
    };
    config.validate().invalid("training config")?;
    let max_len = base.config.max_seq_len + 1;
    let mut inputs = vec![
        ("model".to_string(), file_content_hash(&model_path).invalid("hashing model")?),
        ("dataset".to_string(), file_content_hash(&dataset_path).invalid("hashing dataset")?),
    ];
    let (pairs, skipped) = match mode {
        TrainMode::Laffi => {
            let fb_path = s.need_path(a.feedback, "feedback")?;
            let feedback: Vec<FeedbackRecord> = records(&fb_path, "feedback")?;
            inputs.push(("feedback".into(), file_content_hash(&fb_path).invalid("hashing feedback")?));
            let tpl = template(s.opt_path(a.template, "template")?, PromptTemplate::default_feedback_prediction)?;
            build_laffi_pairs(&feedback, &data, &tpl, max_len).invalid("building feedback pairs")?
        }
        TrainMode::Sft => {
            let tpl = template(s.opt_path(a.template, "template")?, PromptTemplate::default_answer)?;
            build_sft_pairs(&data, &tpl, max_len).invalid("building answer pairs")?
        }
    };
    if pairs.is_empty() {
        return Err(Failure::invalid("no training pairs fit the model"));
    }
    let out = s.need_path(a.out, "out")?;
    let mut frozen = base.clone();
    let mut adapters = lora::attach(&mut frozen, &config.lora, derive_seed(seed, "lora")).invalid("LoRA config")?;
    let fraction = lora::trainable_fraction(&frozen, &adapters);
    let outcome = pipeline::train(&frozen, &mut adapters, &pairs, &config).runtime("training")?;
    if frozen.checksum() != base.checksum() {
        return Err(Failure::Runtime(anyhow::anyhow!("base weights changed during training")));
    }
    lora::save_adapters(&out, &frozen.config, &adapters).runtime(&format!("writing {}", out.display()))?;
    let first = outcome.initial_loss().unwrap_or(f32::NAN);
    let last = outcome.final_loss().unwrap_or(f32::NAN);
    let n_pairs = pairs.len();
    write_json(
        &sidecar(&out),
        &TrainMeta {
            config,
            base_checksum: format!("{:016x}", base.checksum()),
            inputs,
            pairs: n_pairs,
            skipped,
            trainable_fraction: fraction,
            losses: outcome.losses,
        },
    )?;
    println!(
        "trained {mode} adapters on {n_pairs} pairs ({:.4}% trainable): loss {first:.3} -> {last:.3}",
        fraction * 100.0
    );
    Ok(())
}

fn evaluate(s: &Settings, a: crate::EvalArgs) -> R {
    let pred_path = s.need_path(a.predictions, "predictions")?;
    let preds: Vec<Prediction> =
        eval::read_predictions(&pred_path).invalid(&format!("reading predictions {}", pred_path.display()))?;
    let data = examples(&s.need_path(a.dataset, "dataset")?)?;
    let out = s.need_path(a.out, "out")?;
    let scores = s.opt_path(a.scores, "scores")?;
    let report = eval::evaluate(&preds, &data).invalid("scoring")?;
    eval::write_report_json(&out, &report).runtime(&format!("writing {}", out.display()))?;
    if let Some(p) = scores {
        eval::write_scores_csv(&p, &report.scores).runtime(&format!("writing {}", p.display()))?;
    }
    println!(
        "n={} accuracy={:.2} f1={:.2} precision={:.2} recall={:.2} missing={}",
        report.n, report.accuracy, report.f1, report.precision, report.recall, report.missing
    );
    Ok(())
}

fn attention(s: &Settings, a: crate::AttentionArgs) -> R {
    let weights = model(&s.need_path(a.model, "model")?)?;
    let prompt = match (a.prompt, s.opt_path(a.prompt_file, "prompt_file")?) {
        (Some(p), _) => p,
        (None, Some(f)) => std::fs::read_to_string(&f).invalid(&format!("reading {}", f.display()))?,
        (None, None) => s.need(None, "prompt")?,
    };
    let format: ExportFormat = s.or(a.format, "format", "csv".to_string())?.parse().map_err(Failure::invalid)?;
    let layer = s.opt(a.layer, "layer")?;
    let out_dir = s.need_path(a.out_dir, "out_dir")?;
    let specs = if a.runs.is_empty() { vec!["base=-".to_string()] } else { a.runs };
    let mut runs: Vec<(String, Vec<LoraAdapter>)> = Vec::new();
    for spec in &specs {
        let (name, path) =
            spec.split_once('=').ok_or_else(|| Failure::invalid(format!("--run {spec:?} is not NAME=PATH")))?;
        if name.is_empty() || name.contains(['/', '\\']) || runs.iter().any(|(n, _)| n == name) {
            return Err(Failure::invalid(format!("bad or repeated run name {name:?}")));
        }
        let adapters = if path == "-" { Vec::new() } else { adapters_for(&weights, &s.path(PathBuf::from(path)))? };
        runs.push((name.to_string(), adapters));
    }
    let models: Vec<(&str, &TransformerWeights, &[LoraAdapter])> =
        runs.iter().map(|(n, ad)| (n.as_str(), &weights, ad.as_slice())).collect();
    let maps = attention::compare_runs(&prompt, &models, layer).invalid("attention")?;
    let ext = match format {
        ExportFormat::Csv => "csv",
        ExportFormat::Pgm => "pgm",
    };
    for (name, m) in &maps {
        let path = out_dir.join(format!("{name}.{ext}"));
        attention::export(m, &path, format).runtime(&format!("writing {}", path.display()))?;
        println!("{name}: {}x{} map -> {}", m.len(), m.len(), path.display());
    }
    Ok(())
}

fn experiment(s: &Settings, seed_flag: Option<u64>, a: crate::ExperimentArgs) -> R {
    let mut spec: ExperimentSpec = match s.opt_path(a.spec, "spec")? {
        Some(p) => {
            let text = std::fs::read_to_string(&p).invalid(&format!("reading {}", p.display()))?;
            toml::from_str(&text).invalid(&format!("grid spec {}", p.display()))?
        }
        None => match s.section_table() {
            Some(t) => {
                let mut t = t.clone();
                for k in ["spec", "pool", "eval", "out_dir"] {
                    t.remove(k);
                }
                toml::Value::Table(t).try_into().invalid("[experiment] config")?
            }
            None => ExperimentSpec::default(),
        },
    };
    if let Some(seed) = seed_flag {
        spec.seed = seed;
    }
    spec.validate().invalid("grid spec")?;
    let mut inputs = ExperimentInputs::synthetic(&spec);
    if let Some(p) = s.opt_path(a.pool, "pool")? {
        inputs.pool = examples(&p)?;
    }
    if let Some(p) = s.opt_path(a.eval, "eval")? {
        inputs.eval = examples(&p)?;
    }
    let out = s.need_path(a.out_dir, "out_dir")?;
    let report = pipeline::run_experiment(&spec, &inputs, Some(&out)).runtime("experiment")?;
    print!("{}", pipeline::report_csv(&report.rows));
    let failed: Vec<&str> = report.cells.iter().filter(|c| c.error.is_some()).map(|c| c.key.as_str()).collect();
    if !failed.is_empty() {
        eprintln!("{} cell(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

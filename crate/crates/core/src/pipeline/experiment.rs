//! Grid runner over arms (baseline / SFT / LaFFi), model presets, human
//! feedback fractions and training-set sizes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    build_laffi_pairs, build_sft_pairs, pretrain_documents, pretrain_toy, simulate_human_feedback, stage1_predict,
    stage2_ai_annotate, train, PipelineError, PretrainConfig, Result, TrainConfig, TrainMode,
};
use crate::corpus::{
    self, make_synthetic_corpus, FeedbackRecord, MixSpec, PredictedAnswerRecord, PromptTemplate, QAExample,
};
use crate::eval::{self, EvalReport, Prediction};
use crate::io::{content_hash, derive_seed, write_atomic};
use crate::lora::{self, LoraAdapter};
use crate::model::{GenerationConfig, Preset, TransformerWeights};

pub const CSV_COLUMNS: [&str; 10] = [
    "mode",
    "preset",
    "human_fraction",
    "dataset_size",
    "accuracy",
    "f1",
    "precision",
    "recall",
    "seed",
    "wall_clock_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Sft,
    Laffi,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::Sft, Arm::Laffi];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::Sft => "sft",
            Arm::Laffi => "laffi",
        })
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Arm::Baseline),
            "sft" => Ok(Arm::Sft),
            "laffi" => Ok(Arm::Laffi),
            _ => Err(format!("unknown arm {s:?} (expected baseline, sft or laffi)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub arms: Vec<Arm>,
    pub presets: Vec<Preset>,
    /// LaFFi cells only.
    pub human_fractions: Vec<f64>,
    /// Training rows per SFT / LaFFi cell.
    pub dataset_sizes: Vec<usize>,
    /// Synthetic training-pool size when no pool is supplied.
    pub pool_size: usize,
    pub eval_size: usize,
    pub pretrain_docs: usize,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub answer_gen: GenerationConfig,
    pub feedback_gen: GenerationConfig,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            presets: vec![Preset::Nano],
            human_fractions: vec![1.0],
            dataset_sizes: vec![200],
            pool_size: 200,
            eval_size: 40,
            pretrain_docs: 400,
            pretrain: PretrainConfig::default(),
            // Desk-scale pilots: a lower rate or fewer epochs left the
            // feedback loss visibly higher.
            train: TrainConfig { epochs: 8, lr: 1e-2, ..TrainConfig::default() },
            answer_gen: GenerationConfig { max_new_tokens: 28, ..GenerationConfig::default() },
            feedback_gen: GenerationConfig { max_new_tokens: 48, ..GenerationConfig::default() },
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.arms.is_empty() || self.presets.is_empty() {
            return bad("experiment needs at least one arm and one preset".into());
        }
        let trains = self.arms.iter().any(|a| *a != Arm::Baseline);
        if trains && self.dataset_sizes.is_empty() {
            return bad("training arms need at least one dataset size".into());
        }
        if self.arms.contains(&Arm::Laffi) && self.human_fractions.is_empty() {
            return bad("the laffi arm needs at least one human fraction".into());
        }
        if let Some(f) = self.human_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad(format!("human fraction {f} outside [0, 1]"));
        }
        if let Some(0) = self.dataset_sizes.iter().min() {
            return bad("dataset sizes must be positive".into());
        }
        if self.eval_size == 0 {
            return bad("eval_size must be positive".into());
        }
        if trains {
            self.train.validate()?;
        }
        Ok(())
    }
}

/// Everything a grid run reads.
#[derive(Clone, Debug)]
pub struct ExperimentInputs {
    pub pool: Vec<QAExample>,
    pub eval: Vec<QAExample>,
    pub pretrain_docs: Vec<String>,
    pub answer_template: PromptTemplate,
    pub annotation_template: PromptTemplate,
    pub prediction_template: PromptTemplate,
}

impl ExperimentInputs {
    /// Synthetic pool, evaluation set and pre-training text from disjoint
    /// seeds, with the bundled templates.
    pub fn synthetic(spec: &ExperimentSpec) -> Self {
        let docs = make_synthetic_corpus(spec.pretrain_docs, derive_seed(spec.seed, "data.pretrain"));
        Self {
            pool: make_synthetic_corpus(spec.pool_size, derive_seed(spec.seed, "data.pool")),
            eval: make_synthetic_corpus(spec.eval_size, derive_seed(spec.seed, "data.eval")),
            pretrain_docs: pretrain_documents(&docs),
            answer_template: PromptTemplate::default_answer(),
            annotation_template: PromptTemplate::default_feedback_annotation(),
            prediction_template: PromptTemplate::default_feedback_prediction(),
        }
    }
}

/// One CSV row. Fields that do not apply to the arm are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub mode: Arm,
    pub preset: Preset,
    pub human_fraction: Option<f64>,
    pub dataset_size: Option<usize>,
    pub metrics: Option<Metrics>,
    pub seed: u64,
    /// The only field that differs between identical runs.
    pub wall_clock_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Self { accuracy: r.accuracy, f1: r.f1, precision: r.precision, recall: r.recall }
    }
}

/// Per-cell detail for the metadata sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub seed: u64,
    pub error: Option<String>,
    pub metrics: Option<Metrics>,
    pub pairs: usize,
    pub skipped_pairs: usize,
    pub trainable_fraction: Option<f64>,
    pub losses: Vec<f32>,
    pub adapter_checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetRecord {
    pub preset: Preset,
    pub pretrain_losses: Vec<f32>,
    pub base_checksum: String,
    pub stage1_skips: usize,
    pub ai_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub cells: Vec<CellRecord>,
    pub presets: Vec<PresetRecord>,
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(rows: &[ExperimentRow]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let m = r.metrics;
        let fields = [
            r.mode.to_string(),
            r.preset.to_string(),
            opt(r.human_fraction),
            opt(r.dataset_size),
            opt(m.map(|m| m.accuracy)),
            opt(m.map(|m| m.f1)),
            opt(m.map(|m| m.precision)),
            opt(m.map(|m| m.recall)),
            r.seed.to_string(),
            format!("{:.3}", r.wall_clock_s),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_report_csv(path: &Path, rows: &[ExperimentRow]) -> Result<()> {
    write_atomic(path, report_csv(rows).as_bytes())?;
    Ok(())
}

struct PresetData {
    weights: TransformerWeights,
    human: Vec<FeedbackRecord>,
    ai: Vec<FeedbackRecord>,
}

fn evaluate_model(
    weights: &TransformerWeights,
    adapters: &[LoraAdapter],
    inputs: &ExperimentInputs,
    spec: &ExperimentSpec,
    model_id: &str,
) -> Result<(EvalReport, Vec<PredictedAnswerRecord>)> {
    let out =
        stage1_predict(weights, adapters, &inputs.eval, &inputs.answer_template, &spec.answer_gen, model_id, &[])?;
    let preds: Vec<Prediction> = out
        .records
        .iter()
        .map(|r| Prediction { example_id: r.example_id.clone(), prediction: r.predicted_answer.clone() })
        .collect();
    Ok((eval::evaluate(&preds, &inputs.eval)?, out.records))
}

fn cell_dir(out: Option<&Path>, key: &str) -> Option<PathBuf> {
    out.map(|o| o.join("cells").join(key.replace(['/', '='], "_")))
}

struct Cell {
    arm: Arm,
    preset: Preset,
    fraction: Option<f64>,
    size: Option<usize>,
}

impl Cell {
    fn key(&self) -> String {
        match self.arm {
            Arm::Baseline => format!("baseline/{}", self.preset),
            Arm::Sft => format!("sft/{}/n={}", self.preset, opt(self.size)),
            Arm::Laffi => format!("laffi/{}/f={}/n={}", self.preset, opt(self.fraction), opt(self.size)),
        }
    }
}

fn run_cell(
    cell: &Cell,
    seed: u64,
    data: &PresetData,
    inputs: &ExperimentInputs,
    spec: &ExperimentSpec,
    out: Option<&Path>,
    record: &mut CellRecord,
) -> Result<Metrics> {
    let key = cell.key();
    let dir = cell_dir(out, &key);
    let max_len = data.weights.config.max_seq_len + 1;
    let mut adapters: Vec<LoraAdapter> = Vec::new();
    if cell.arm != Arm::Baseline {
        let size = cell.size.expect("training cells carry a size");
        let (pairs, skips) = match cell.arm {
            Arm::Sft => {
                let subset = corpus::sample_subset(&inputs.pool, size, derive_seed(seed, "subset"))?;
                build_sft_pairs(&subset, &inputs.answer_template, max_len)?
            }
            _ => {
                let mixed = corpus::mix(
                    &data.human,
                    &data.ai,
                    &MixSpec {
                        total_n: size,
                        human_fraction: cell.fraction.expect("laffi cells carry a fraction"),
                        seed: derive_seed(seed, "mix"),
                    },
                )?;
                build_laffi_pairs(&mixed, &inputs.pool, &inputs.prediction_template, max_len)?
            }
        };
        record.pairs = pairs.len();
        record.skipped_pairs = skips.len();
        let mut frozen = data.weights.clone();
        adapters = lora::attach(&mut frozen, &spec.train.lora, derive_seed(seed, "lora"))?;
        let fraction = lora::trainable_fraction(&frozen, &adapters);
        log::info!("{key}: {} pairs, trainable fraction {:.6}%", pairs.len(), fraction * 100.0);
        let config = TrainConfig {
            mode: if cell.arm == Arm::Sft { TrainMode::Sft } else { TrainMode::Laffi },
            seed: derive_seed(seed, "train"),
            ..spec.train.clone()
        };
        let outcome = train(&frozen, &mut adapters, &pairs, &config)?;
        let after = lora::trainable_fraction(&frozen, &adapters);
        if after != fraction {
            return Err(PipelineError::Data(format!("{key}: trainable fraction moved from {fraction} to {after}")));
        }
        record.trainable_fraction = Some(fraction);
        record.losses = outcome.losses;
        let container = lora::adapters_to_container(&frozen.config, &adapters);
        let bytes = container.encode()?;
        record.adapter_checksum = Some(content_hash(&bytes));
        if let Some(d) = &dir {
            write_atomic(&d.join("adapters.ckpt"), &bytes)?;
        }
    }
    let (report, preds) = evaluate_model(&data.weights, &adapters, inputs, spec, &key)?;
    if let Some(d) = &dir {
        corpus::write_jsonl(&d.join("predictions.jsonl"), &preds)?;
        eval::write_report_json(&d.join("eval.json"), &report)?;
    }
    Ok(Metrics::from(&report))
}

fn prepare_preset(
    preset: Preset,
    spec: &ExperimentSpec,
    inputs: &ExperimentInputs,
    out: Option<&Path>,
) -> Result<(PresetData, PresetRecord)> {
    let config = preset.config(derive_seed(spec.seed, &format!("init.{preset}")));
    let pc = PretrainConfig { seed: derive_seed(spec.seed, &format!("pretrain.{preset}")), ..spec.pretrain.clone() };
    log::info!("{preset}: pre-training for {} steps", pc.steps);
    let pre = pretrain_toy(&config, &inputs.pretrain_docs, &pc)?;
    let weights = pre.weights;
    let dir = out.map(|o| o.join(preset.name()));
    if let Some(d) = &dir {
        weights.save(&d.join("base.ckpt"))?;
    }
    let mut human = Vec::new();
    let mut ai = Vec::new();
    let mut stage1_skips = 0;
    if spec.arms.contains(&Arm::Laffi) {
        let model_id = format!("{preset}-base");
        let s1 =
            stage1_predict(&weights, &[], &inputs.pool, &inputs.answer_template, &spec.answer_gen, &model_id, &[])?;
        stage1_skips = s1.skips.len();
        ai = stage2_ai_annotate(
            &weights,
            &[],
            &s1.records,
            &inputs.pool,
            &inputs.annotation_template,
            &spec.feedback_gen,
        )?;
        human = simulate_human_feedback(&s1.records, &inputs.pool)?;
        if let Some(d) = &dir {
            corpus::write_jsonl(&d.join("predicted_answers.jsonl"), &s1.records)?;
            corpus::write_jsonl(&d.join("ai_feedback.jsonl"), &ai)?;
            corpus::write_jsonl(&d.join("human_feedback.jsonl"), &human)?;
        }
    }
    let record = PresetRecord {
        preset,
        pretrain_losses: pre.losses,
        base_checksum: format!("{:016x}", weights.checksum()),
        stage1_skips,
        ai_fallbacks: ai.iter().filter(|r| r.fallback).count(),
    };
    Ok((PresetData { weights, human, ai }, record))
}

/// Runs every cell of the grid. A failing cell is recorded (empty metrics,
/// error text in its [`CellRecord`]) and the run continues. With `out`,
/// per-preset and per-cell artifacts plus `report.csv` and
/// `report.meta.json` are written there.
pub fn run_experiment(
    spec: &ExperimentSpec,
    inputs: &ExperimentInputs,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut presets = Vec::new();
    for &preset in &spec.presets {
        let (data, prec) = prepare_preset(preset, spec, inputs, out)?;
        presets.push(prec);
        let mut grid = Vec::new();
        for &arm in &spec.arms {
            match arm {
                Arm::Baseline => grid.push(Cell { arm, preset, fraction: None, size: None }),
                Arm::Sft => {
                    grid.extend(spec.dataset_sizes.iter().map(|&n| Cell { arm, preset, fraction: None, size: Some(n) }))
                }
                Arm::Laffi => {
                    for &f in &spec.human_fractions {
                        grid.extend(spec.dataset_sizes.iter().map(|&n| Cell {
                            arm,
                            preset,
                            fraction: Some(f),
                            size: Some(n),
                        }));
                    }
                }
            }
        }
        for cell in grid {
            let key = cell.key();
            let seed = derive_seed(spec.seed, &key);
            let mut record = CellRecord { key: key.clone(), seed, ..Default::default() };
            let started = Instant::now();
            let metrics = match run_cell(&cell, seed, &data, inputs, spec, out, &mut record) {
                Ok(m) => Some(m),
                Err(e) => {
                    log::error!("{key}: {e}");
                    record.error = Some(e.to_string());
                    None
                }
            };
            record.metrics = metrics;
            rows.push(ExperimentRow {
                mode: cell.arm,
                preset,
                human_fraction: cell.fraction,
                dataset_size: cell.size,
                metrics,
                seed,
                wall_clock_s: started.elapsed().as_secs_f64(),
            });
            cells.push(record);
        }
    }
    let report = ExperimentReport { rows, cells, presets };
    if let Some(o) = out {
        write_report_csv(&o.join("report.csv"), &report.rows)?;
        write_sidecar(&o.join("report.meta.json"), spec, inputs, &report)?;
    }
    Ok(report)
}

fn write_sidecar(
    path: &Path,
    spec: &ExperimentSpec,
    inputs: &ExperimentInputs,
    report: &ExperimentReport,
) -> Result<()> {
    let hash_jsonl = |xs: &[QAExample]| -> Result<String> { Ok(content_hash(corpus::to_jsonl(xs)?.as_bytes())) };
    let template_text = |t: &PromptTemplate| {
        let mut parts: Vec<&str> = t.header.iter().map(String::as_str).collect();
        parts.extend(t.exemplars.iter().map(String::as_str));
        parts.push(&t.body);
        content_hash(parts.join("\n###\n").as_bytes())
    };
    let meta = serde_json::json!({
        "config": spec,
        "inputs": {
            "pool": hash_jsonl(&inputs.pool)?,
            "eval": hash_jsonl(&inputs.eval)?,
            "pretrain_docs": content_hash(inputs.pretrain_docs.concat().as_bytes()),
            "answer_template": template_text(&inputs.answer_template),
            "annotation_template": template_text(&inputs.annotation_template),
            "prediction_template": template_text(&inputs.prediction_template),
        },
        "columns": CSV_COLUMNS,
        "presets": report.presets,
        "cells": report.cells,
    });
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| PipelineError::Data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

use laffi_core::corpus::{make_synthetic_corpus, FeedbackRecord, FeedbackSource, PromptTemplate};
use laffi_core::io::derive_seed;
use laffi_core::lora::{self, LoraConfig};
use laffi_core::model::{init_model, GenerationConfig, Preset};
use laffi_core::pipeline::*;

fn tiny_pairs(n: usize) -> Vec<TrainingPair> {
    (0..n).map(|i| TrainingPair::new(&format!("ctx {i}"), &format!("out {i}"), 64).unwrap()).collect()
}

/// Memorization to near-zero loss is the acceptance run's job (on a
/// pre-trained base). On a fresh model rank-8 Q/K/V adapters move slowly,
/// so this only pins direction and the frozen base.
#[test]
fn adapters_reduce_single_pair_loss() {
    let weights = init_model(&Preset::Nano.config(7)).unwrap();
    let pair = TrainingPair::new("Q: Where was Ada born?\nFeedback:", " Lisbon is correct.", 64).unwrap();
    let before = weights.checksum();
    let mut frozen = weights.clone();
    let mut adapters = lora::attach(&mut frozen, &LoraConfig::default(), 1).unwrap();
    let config = TrainConfig { epochs: 300, batch_size: 1, lr: 1e-2, ..TrainConfig::default() };
    let out = train(&frozen, &mut adapters, &[pair], &config).unwrap();
    let first = out.initial_loss().unwrap();
    let last = out.final_loss().unwrap();
    assert!(last < 0.95 * first, "{first} -> {last}");
    assert_eq!(frozen.checksum(), before);
}

#[test]
fn loss_curve_length() {
    let weights = init_model(&Preset::Nano.config(2)).unwrap();
    for (n, bs, epochs) in [(5, 2, 2), (4, 4, 1), (7, 3, 3)] {
        let mut frozen = weights.clone();
        let mut adapters = lora::attach(&mut frozen, &LoraConfig::default(), 0).unwrap();
        let config = TrainConfig { epochs, batch_size: bs, ..TrainConfig::default() };
        let out = train(&frozen, &mut adapters, &tiny_pairs(n), &config).unwrap();
        assert_eq!(out.losses.len(), epochs * n.div_ceil(bs));
    }
}

#[test]
fn training_is_deterministic_and_base_untouched() {
    let weights = init_model(&Preset::Nano.config(3)).unwrap();
    let run = || {
        let mut frozen = weights.clone();
        let mut adapters = lora::attach(&mut frozen, &LoraConfig::default(), 9).unwrap();
        let out = train(&frozen, &mut adapters, &tiny_pairs(6), &TrainConfig::default()).unwrap();
        assert_eq!(frozen.checksum(), weights.checksum());
        (out.losses, adapters)
    };
    let (l1, a1) = run();
    let (l2, a2) = run();
    assert_eq!(l1, l2);
    assert_eq!(a1, a2);
    assert!(a1.iter().any(|a| a.b.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn train_rejects_bad_input() {
    let weights = init_model(&Preset::Nano.config(3)).unwrap();
    let mut frozen = weights.clone();
    let mut adapters = lora::attach(&mut frozen, &LoraConfig::default(), 9).unwrap();
    let cfg = TrainConfig::default();
    assert!(matches!(train(&frozen, &mut adapters, &[], &cfg), Err(PipelineError::Config(_))));
    assert!(matches!(train(&frozen, &mut [], &tiny_pairs(1), &cfg), Err(PipelineError::Config(_))));
    let long = TrainingPair::new(&"x".repeat(900), "y", 1000).unwrap();
    assert!(matches!(train(&frozen, &mut adapters, &[long], &cfg), Err(PipelineError::Length(_))));
    let zero = TrainConfig { epochs: 0, ..cfg };
    assert!(train(&frozen, &mut adapters, &tiny_pairs(1), &zero).is_err());
}

#[test]
fn stage1_resumes_and_fingerprints() {
    let weights = init_model(&Preset::Nano.config(4)).unwrap();
    let examples = make_synthetic_corpus(4, 4);
    let template = PromptTemplate::default_answer();
    let gen = GenerationConfig { max_new_tokens: 6, ..GenerationConfig::default() };
    let a = stage1_predict(&weights, &[], &examples, &template, &gen, "m", &[]).unwrap();
    assert_eq!(a.records.len(), 4);
    assert!(a.skips.is_empty());
    let b = stage1_predict(&weights, &[], &examples, &template, &gen, "m", &[]).unwrap();
    assert_eq!(a, b);
    for (r, ex) in a.records.iter().zip(&examples) {
        let prompt = answer_prompt(&template, ex).unwrap();
        assert_eq!(r.prompt_fingerprint, laffi_core::io::sha256_hex(prompt.as_bytes()));
        assert_eq!(r.example_id, ex.id);
    }
    // a matching record is reused verbatim; a stale one is regenerated
    let mut existing = a.records.clone();
    existing[0].predicted_answer = "kept".into();
    existing[1].predicted_answer = "stale".into();
    existing[1].prompt_fingerprint = "0".into();
    let c = stage1_predict(&weights, &[], &examples, &template, &gen, "m", &existing).unwrap();
    assert_eq!(c.records[0].predicted_answer, "kept");
    assert_eq!(c.records[1], a.records[1]);
    let d = stage1_predict(&weights, &[], &examples, &template, &gen, "other", &existing).unwrap();
    assert_eq!(d.records[0].predicted_answer, a.records[0].predicted_answer);
}

#[test]
fn stage1_skips_overlong_prompts() {
    let mut examples = make_synthetic_corpus(2, 4);
    examples[1].passage = format!("{} {}", examples[1].passage, "filler ".repeat(40));
    let gen = GenerationConfig { max_new_tokens: 4, ..GenerationConfig::default() };
    // Room for the first prompt (plus BOS and the budget), not the padded one.
    let first = answer_prompt(&PromptTemplate::default_answer(), &examples[0]).unwrap().len();
    let mut config = Preset::Nano.config(4);
    config.max_seq_len = first + 1 + gen.max_new_tokens + 20;
    let weights = init_model(&config).unwrap();
    let out = stage1_predict(&weights, &[], &examples, &PromptTemplate::default_answer(), &gen, "m", &[]).unwrap();
    assert_eq!(out.records.len() + out.skips.len(), 2);
    assert_eq!(out.skips.len(), 1);
    assert_eq!(out.skips[0].example_id, examples[1].id);
}

#[test]
fn stage2_contract() {
    let weights = init_model(&Preset::Nano.config(5)).unwrap();
    let examples = make_synthetic_corpus(3, 5);
    let gen = GenerationConfig { max_new_tokens: 4, ..GenerationConfig::default() };
    let s1 = stage1_predict(&weights, &[], &examples, &PromptTemplate::default_answer(), &gen, "m", &[]).unwrap();
    let ai =
        stage2_ai_annotate(&weights, &[], &s1.records, &examples, &PromptTemplate::default_feedback_annotation(), &gen)
            .unwrap();
    assert_eq!(ai.len(), 3);
    for (f, r) in ai.iter().zip(&s1.records) {
        assert_eq!(f.source, FeedbackSource::Ai);
        assert_eq!(f.example_id, r.example_id);
        assert_eq!(f.predicted_answer, r.predicted_answer);
        assert!(!f.feedback_text.is_empty());
        assert!(f.annotator_id.is_none() && f.accepted_ai.is_none());
    }
    let human = simulate_human_feedback(&s1.records, &examples).unwrap();
    assert!(human
        .iter()
        .all(|h| h.source == FeedbackSource::Human && h.annotator_id.as_deref() == Some(REFERENCE_ANNOTATOR)));
    let mut bad = s1.records.clone();
    bad[0].example_id = "nope".into();
    assert!(matches!(
        stage2_ai_annotate(&weights, &[], &bad, &examples, &PromptTemplate::default_feedback_annotation(), &gen),
        Err(PipelineError::Data(_))
    ));
}

#[test]
fn pretraining_reduces_loss() {
    let docs = pretrain_documents(&make_synthetic_corpus(50, 6));
    let config = Preset::Nano.config(6);
    let pc = PretrainConfig { steps: 150, seed: derive_seed(6, "pretrain"), ..PretrainConfig::default() };
    let out = pretrain_toy(&config, &docs, &pc).unwrap();
    let first = out.losses[0];
    let tail: f32 = out.losses[140..].iter().sum::<f32>() / 10.0;
    assert!((first - 259f32.ln()).abs() < 0.1 * 259f32.ln(), "{first}");
    assert!(tail < 0.5 * first, "{first} -> {tail}");
    let again = pretrain_toy(&config, &docs, &pc).unwrap();
    assert_eq!(again.losses, out.losses);
    assert_eq!(again.weights.checksum(), out.weights.checksum());
}

#[test]
fn experiment_grid_shape() {
    let spec = ExperimentSpec {
        human_fractions: vec![0.0, 1.0],
        dataset_sizes: vec![4, 1000],
        pool_size: 6,
        eval_size: 3,
        pretrain_docs: 10,
        pretrain: PretrainConfig { steps: 2, ..PretrainConfig::default() },
        train: TrainConfig { epochs: 1, ..TrainConfig::default() },
        answer_gen: GenerationConfig { max_new_tokens: 3, ..GenerationConfig::default() },
        feedback_gen: GenerationConfig { max_new_tokens: 3, ..GenerationConfig::default() },
        ..ExperimentSpec::default()
    };
    let inputs = ExperimentInputs::synthetic(&spec);
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&spec, &inputs, Some(dir.path())).unwrap();
    // 1 baseline + 2 sft + 2x2 laffi
    assert_eq!(report.rows.len(), 7);
    let failed: Vec<_> = report.cells.iter().filter(|c| c.error.is_some()).map(|c| c.key.as_str()).collect();
    assert_eq!(failed, ["sft/nano/n=1000", "laffi/nano/f=0/n=1000", "laffi/nano/f=1/n=1000"]);
    for (row, cell) in report.rows.iter().zip(&report.cells) {
        assert_eq!(row.metrics.is_some(), cell.error.is_none());
        assert_eq!(row.seed, derive_seed(spec.seed, &cell.key));
        if let Some(f) = cell.trainable_fraction {
            assert!(f > 0.0 && f < 1.0);
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    let baseline: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(baseline[..4], ["baseline", "nano", "", ""]);
    assert!(baseline[4..8].iter().all(|v| v.parse::<f64>().is_ok()));
    assert_eq!(csv.lines().count(), 8);
    assert!(dir.path().join("nano/base.ckpt").exists());
    assert!(dir.path().join("nano/ai_feedback.jsonl").exists());
    assert!(dir.path().join("cells/laffi_nano_f_1_n_4/adapters.ckpt").exists());

    let meta = std::fs::read(dir.path().join("report.meta.json")).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let again = run_experiment(&spec, &inputs, Some(dir2.path())).unwrap();
    assert_eq!(std::fs::read(dir2.path().join("report.meta.json")).unwrap(), meta);
    let strip = |r: &ExperimentReport| r.rows.iter().map(|r| (r.metrics, r.seed)).collect::<Vec<_>>();
    assert_eq!(strip(&again), strip(&report));
}

#[test]
fn experiment_spec_validation() {
    let ok = ExperimentSpec::default();
    assert!(ok.validate().is_ok());
    for bad in [
        ExperimentSpec { arms: vec![], ..ok.clone() },
        ExperimentSpec { human_fractions: vec![1.5], ..ok.clone() },
        ExperimentSpec { dataset_sizes: vec![0], ..ok.clone() },
        ExperimentSpec { eval_size: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
    }
    assert_eq!("LaFFi".parse::<Arm>().unwrap(), Arm::Laffi);
    assert!("x".parse::<Arm>().is_err());
}

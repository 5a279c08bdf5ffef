use laffi_core::attention::*;
use laffi_core::lora::{self, LoraConfig};
use laffi_core::model::{forward, init_model, AttentionTrace, Preset};
use proptest::prelude::*;

fn hand_trace() -> AttentionTrace {
    AttentionTrace { seq_len: 2, layers: vec![vec![vec![1.0, 0.0, 0.5, 0.5], vec![1.0, 0.0, 0.1, 0.9]]] }
}

fn hand_mean() -> MeanAttention {
    mean_attention(&hand_trace(), None, vec!["a".into(), "b".into()]).unwrap()
}

fn check_invariants(m: &MeanAttention) {
    let t = m.len();
    for r in 0..t {
        let row = m.row(r);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-5, "row {r} sums to {sum}");
        for (c, &v) in row.iter().enumerate() {
            assert!((0.0..=1.0).contains(&v));
            if c > r {
                assert_eq!(v, 0.0, "({r},{c}) above the diagonal");
            }
        }
    }
}

#[test]
fn hand_example() {
    let m = hand_mean();
    let want = [1.0, 0.0, 0.3, 0.7];
    for (a, b) in m.matrix.iter().zip(want) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
    assert_eq!(to_pgm(&m), "P2\n2 2\n255\n255 0\n77 179\n");
    let (w, h, max, px) = parse_pgm(&to_pgm(&m)).unwrap();
    assert_eq!((w, h, max, px), (2, 2, 255, vec![255, 0, 77, 179]));
}

#[test]
fn single_head_is_identity() {
    let trace = AttentionTrace { seq_len: 2, layers: vec![vec![vec![1.0, 0.0, 0.25, 0.75]]] };
    let m = mean_attention(&trace, Some(0), vec!["a".into(), "b".into()]).unwrap();
    assert_eq!(m.matrix, [1.0, 0.0, 0.25, 0.75]);
    assert!(matches!(mean_attention(&trace, Some(1), vec!["a".into(), "b".into()]), Err(AttentionError::Index(_))));
    assert!(mean_attention(&trace, None, vec!["a".into()]).is_err());
}

#[test]
fn invariants_on_models() {
    for preset in [Preset::Nano, Preset::Small] {
        let w = init_model(&preset.config(17)).unwrap();
        let tokens: Vec<u32> = std::iter::once(256)
            .chain(b"P: Ada was born in Lisbon.\nQ: Where?\nA:".iter().map(|&b| b as u32))
            .collect();
        let (_, trace) = forward(&w, &tokens, &[], true).unwrap();
        let trace = trace.unwrap();
        for layer in 0..trace.n_layers() {
            check_invariants(&mean_attention(&trace, Some(layer), token_labels(&tokens)).unwrap());
        }
    }
}

#[test]
fn compare_runs_shares_labels() {
    let base = init_model(&Preset::Nano.config(3)).unwrap();
    let mut frozen = base.clone();
    let zero = lora::attach(&mut frozen, &LoraConfig::default(), 5).unwrap();
    let mut trained = zero.clone();
    for a in &mut trained {
        for v in a.b.data_mut() {
            *v = 0.05;
        }
    }
    let models = [("baseline", &base, &[][..]), ("sft", &frozen, &zero[..]), ("laffi", &frozen, &trained[..])];
    let out = compare_runs("Where was Ada born?", &models, None).unwrap();
    assert_eq!(out.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["baseline", "sft", "laffi"]);
    assert!(out.iter().all(|(_, m)| m.tokens == out[0].1.tokens));
    assert_eq!(out[0].1.matrix, out[1].1.matrix);
    assert_ne!(out[0].1.matrix, out[2].1.matrix);
    out.iter().for_each(|(_, m)| check_invariants(m));
    let long = "x".repeat(600);
    assert!(compare_runs(&long, &models, None).is_err());
}

#[test]
fn export_files() {
    let m = hand_mean();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("m.csv");
    export(&m, &csv_path, ExportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text, "a,b\n1.000000,0.000000\n0.300000,0.700000\n");
    export(&m, &dir.path().join("again.csv"), ExportFormat::Csv).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.csv")).unwrap(), text.as_bytes());
    export(&m, &dir.path().join("m.pgm"), ExportFormat::Pgm).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("m.pgm")).unwrap(), to_pgm(&m));
    assert_eq!("PGM".parse::<ExportFormat>().unwrap(), ExportFormat::Pgm);
    assert!("png".parse::<ExportFormat>().is_err());
}

#[test]
fn hostile_pgm_is_rejected() {
    for bad in [
        "",
        "P5\n1 1\n255\n0",
        "P2\n99999999 99999999\n255\n1",
        "P2\n1 1\n255\n300",
        "P2\n1 1\n0\n0",
        "P2\n1 1\n255\n1 2",
    ] {
        assert!(parse_pgm(bad).is_err(), "{bad:?}");
    }
}

/// Random lower-triangular row-stochastic heads.
fn heads_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f32>>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(t, h)| {
        prop::collection::vec(prop::collection::vec(0.01f32..1.0, t * t), h).prop_map(move |raw| {
            let heads = raw
                .into_iter()
                .map(|mut m| {
                    for r in 0..t {
                        for c in r + 1..t {
                            m[r * t + c] = 0.0;
                        }
                        let s: f32 = m[r * t..(r + 1) * t].iter().sum();
                        m[r * t..(r + 1) * t].iter_mut().for_each(|v| *v /= s);
                    }
                    m
                })
                .collect();
            (t, heads)
        })
    })
}

proptest! {
    #[test]
    fn mean_commutes_with_head_order((t, heads) in heads_strategy()) {
        let labels: Vec<String> = (0..t).map(|i| i.to_string()).collect();
        let a = mean_attention(&AttentionTrace { seq_len: t, layers: vec![heads.clone()] }, None, labels.clone()).unwrap();
        let mut rev = heads;
        rev.reverse();
        let b = mean_attention(&AttentionTrace { seq_len: t, layers: vec![rev] }, None, labels).unwrap();
        prop_assert_eq!(&a.matrix, &b.matrix);
        check_invariants(&a);
    }

    #[test]
    fn round_trips((t, heads) in heads_strategy()) {
        let labels: Vec<String> = (0..t).map(|i| format!("t{i}")).collect();
        let m = mean_attention(&AttentionTrace { seq_len: t, layers: vec![heads] }, None, labels).unwrap();
        let back = parse_csv(&to_csv(&m).unwrap()).unwrap();
        prop_assert_eq!(&back.tokens, &m.tokens);
        for (a, b) in back.matrix.iter().zip(&m.matrix) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        let (_, _, max, px) = parse_pgm(&to_pgm(&m)).unwrap();
        for (p, v) in px.iter().zip(&m.matrix) {
            prop_assert!((f64::from(*p) / f64::from(max) - v).abs() <= 1.0 / 255.0);
        }
    }
}

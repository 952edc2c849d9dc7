use std::io::Write;

use cgpo_core::metrics::{accuracy_all, brier, ece, reliability_curve, EvalRecord};
use cgpo_core::policy::{ContextFeatures, FeatureConfig, Matrix, PolicyCheckpoint, PromptLibrary, SoftmaxPolicy};
use cgpo_core::{load_dataset, InvalidReason, Prediction, SplitLabel};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = EvalRecord> {
    (
        prop_oneof![
            4 => (0usize..4, 0.0f64..=1.0).prop_map(|(a, c)| Prediction::Valid { answer_index: a, confidence: c }),
            1 => (0usize..4).prop_map(|a| Prediction::Valid { answer_index: a, confidence: a as f64 / 4.0 }),
            1 => Just(Prediction::Invalid { raw_text: "?".into(), reason: InvalidReason::MissingConfidence }),
        ],
        0usize..4,
    )
        .prop_map(|(p, t)| EvalRecord::new("r", p, t))
}

fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec(record(), 1..300).prop_filter("needs a valid record", |r| r.iter().any(|x| x.prediction.is_valid()))
}

proptest! {
    #[test]
    fn single_bin_ece_is_the_global_gap(rs in records()) {
        let valid: Vec<&EvalRecord> = rs.iter().filter(|r| r.prediction.is_valid()).collect();
        let n = valid.len() as f64;
        let acc = valid.iter().filter(|r| r.is_correct()).count() as f64 / n;
        let conf = valid.iter().map(|r| r.prediction.confidence().unwrap()).sum::<f64>() / n;
        prop_assert_eq!(ece(&rs, 1).unwrap(), (acc - conf).abs());
    }

    #[test]
    fn metrics_are_bounded_and_order_free(rs in records(), rot in 0usize..300) {
        let mut shuffled = rs.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        for bins in [5, 10, 15] {
            let e = ece(&rs, bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!((e - ece(&shuffled, bins).unwrap()).abs() < 1e-12);
        }
        let b = brier(&rs).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((b - brier(&shuffled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bins_partition_the_valid_records(rs in records(), bins in 1usize..25) {
        let curve = reliability_curve(&rs, bins).unwrap();
        prop_assert_eq!(curve.len(), bins);
        prop_assert_eq!(curve.iter().map(|b| b.count).sum::<usize>(), rs.iter().filter(|r| r.prediction.is_valid()).count());
    }

    #[test]
    fn invalid_records_never_count_as_correct(rs in records(), extra in 0usize..10) {
        let forced: Vec<EvalRecord> = rs
            .iter()
            .map(|r| EvalRecord::new("r", Prediction::Invalid { raw_text: String::new(), reason: InvalidReason::Unparseable }, r.truth_index))
            .collect();
        prop_assert_eq!(accuracy_all(&forced, extra).unwrap(), 0.0);
        let valid_correct = rs.iter().filter(|r| r.prediction.is_valid() && r.is_correct()).count();
        prop_assert_eq!(accuracy_all(&rs, extra).unwrap(), valid_correct as f64 / (rs.len() + extra) as f64);
    }

    #[test]
    fn policy_distribution_is_always_valid(ws in prop::collection::vec(-1e6f64..1e6, 8 * 3), x in prop::collection::vec(-100.0f64..100.0, 2)) {
        let cfg = FeatureConfig { option_count: true, length_buckets: vec![10], ..FeatureConfig::bias_only() };
        let rows = ws.chunks(3).map(|c| c.to_vec()).collect();
        let policy = SoftmaxPolicy::uniform(PromptLibrary::default(), cfg, 256).with_weights(Matrix::from_rows(rows).unwrap()).unwrap();
        let features = ContextFeatures(vec![1.0, x[0], x[1]]);
        for t in [1.0, 0.6, 0.01] {
            let p = policy.probabilities(&features, t);
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(policy.kl_features(&features) >= 0.0);
    }

    #[test]
    fn checkpoints_restore_bit_identical_behaviour(ws in prop::collection::vec(-5.0f64..5.0, 8 * 2), seed in any::<u64>()) {
        let cfg = FeatureConfig { option_count: true, ..FeatureConfig::bias_only() };
        let rows = ws.chunks(2).map(|c| c.to_vec()).collect();
        let policy = SoftmaxPolicy::uniform(PromptLibrary::default(), cfg.clone(), 256).with_weights(Matrix::from_rows(rows).unwrap()).unwrap();
        let json = policy.to_checkpoint().to_json();
        let ckpt: PolicyCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = SoftmaxPolicy::from_checkpoint(&ckpt, PromptLibrary::default(), cfg, 256).unwrap();
        prop_assert_eq!(restored.weights(), policy.weights());
        let x = ContextFeatures(vec![1.0, 0.37]);
        prop_assert_eq!(restored.sample_action(&x, 0.6, seed), policy.sample_action(&x, 0.6, seed));
        prop_assert_eq!(restored.to_checkpoint().to_json(), json);
    }
}

fn mutate(line: &str, seed: u64) -> String {
    let mut bytes = line.as_bytes().to_vec();
    let mut s = seed;
    let mut next = || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        s
    };
    for _ in 0..(next() % 4 + 1) {
        if bytes.is_empty() {
            break;
        }
        let i = (next() as usize) % bytes.len();
        match next() % 3 {
            0 => {
                bytes.remove(i);
            }
            1 => bytes.insert(i, b"{}[]\",:0aB -"[(next() % 12) as usize]),
            _ => bytes[i] = b"{}[]\",:0aB -"[(next() % 12) as usize],
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn malformed_lines_never_yield_invalid_queries() {
    let seeds = [
        r#"{"id":"q1","question":"What modality?","options":["CT","MRI","X-ray","PET"],"answer":"B"}"#,
        r#"{"id":"q2","question":"Which side?","options":["left","right"],"answer":1,"image":"img/2.png"}"#,
        r#"{"id":"q3","question":"Stage?","options":["I","II","III"],"answer":2}"#,
    ];
    let mut accepted = 0;
    for i in 0..3000u64 {
        let line = mutate(seeds[(i % 3) as usize], i.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{line}").unwrap();
        if let Ok(ds) = load_dataset(f.path(), SplitLabel::Train) {
            accepted += 1;
            for q in ds.iter() {
                q.validate().unwrap();
                assert!(q.truth_index < q.options.len());
            }
        }
    }
    // some mutations are harmless (e.g. inside a string), most are not
    assert!(accepted > 0 && accepted < 3000);
}

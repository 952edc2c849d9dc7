use cgpo_core::backends::{Backend, Downstream, FeatureEffect, GenerationParams, RetryPolicy, Simulator, SimulatorProfile};
use cgpo_core::{compute_reward, Cgp, InstructionTemplate, Query, RewardConfig};

fn query() -> Query {
    Query::new("q1", "Which structure is enlarged?", vec!["heart".into(), "liver".into(), "spleen".into(), "kidney".into()], 2).unwrap()
}

fn trigger_profile() -> SimulatorProfile {
    SimulatorProfile {
        base_accuracy: 0.4,
        feature_effects: vec![FeatureEffect { trigger_phrase: "calibrate carefully".into(), accuracy_delta: 0.3, conf_delta: -0.2 }],
        ..Default::default()
    }
}

fn accuracy(sim: &Simulator, cgp: Option<&Cgp>, seeds: std::ops::Range<u64>) -> f64 {
    let q = query();
    let template = InstructionTemplate::default();
    let d = Downstream::new(sim, &template, RetryPolicy::none());
    let n = seeds.end - seeds.start;
    let correct = seeds
        .filter(|&s| d.answer_query(&q, cgp, &GenerationParams::default().with_seed(s)).unwrap().is_correct(q.truth_index))
        .count();
    correct as f64 / n as f64
}

#[test]
fn trigger_shifts_accuracy_by_its_delta() {
    let sim = Simulator::new(trigger_profile()).unwrap().with_answer_key([&query()]);
    let with = accuracy(&sim, Some(&Cgp::fixed("Please calibrate carefully.")), 0..10_000);
    let without = accuracy(&sim, None, 0..10_000);
    assert!(((with - without) - 0.3).abs() < 0.02, "with {with} without {without}");
}

#[test]
fn cgp_changes_the_answer_distribution() {
    let sim = Simulator::new(trigger_profile()).unwrap().with_answer_key([&query()]);
    let q = query();
    let template = InstructionTemplate::default();
    let d = Downstream::new(&sim, &template, RetryPolicy::none());
    let mut hist = [[0usize; 4]; 2];
    let cgp = Cgp::fixed("calibrate carefully");
    for s in 0..1000 {
        let p = GenerationParams::default().with_seed(s);
        hist[0][d.answer_query(&q, None, &p).unwrap().answer().unwrap()] += 1;
        hist[1][d.answer_query(&q, Some(&cgp), &p).unwrap().answer().unwrap()] += 1;
    }
    // truth share moves from about 400 to about 700 per 1000
    assert!(hist[1][2] as i64 - hist[0][2] as i64 > 200, "{hist:?}");
}

#[test]
fn reward_ordering_is_stable_across_seed_ranges() {
    let sim = Simulator::new(trigger_profile()).unwrap().with_answer_key([&query()]);
    let q = query();
    let template = InstructionTemplate::default();
    let d = Downstream::new(&sim, &template, RetryPolicy::none());
    let cfg = RewardConfig::default();
    let cgp = Cgp::fixed("calibrate carefully");
    let mean_reward = |cgp: Option<&Cgp>, range: std::ops::Range<u64>| {
        let n = (range.end - range.start) as f64;
        range
            .map(|s| compute_reward(&d.answer_query(&q, cgp, &GenerationParams::default().with_seed(s)).unwrap(), q.truth_index, &cfg))
            .sum::<f64>()
            / n
    };
    for block in 0..4u64 {
        let range = block * 2000..(block + 1) * 2000;
        assert!(mean_reward(Some(&cgp), range.clone()) > mean_reward(None, range));
    }
}

#[test]
fn outputs_are_a_pure_function_of_inputs() {
    let a = Simulator::new(trigger_profile()).unwrap();
    let b = Simulator::new(trigger_profile()).unwrap();
    let p = GenerationParams::default().with_seed(42);
    let prompt = "Question: x?\nOptions:\nA. a\nB. b\n";
    let first = a.generate(prompt, None, &p).unwrap();
    for _ in 0..5 {
        assert_eq!(a.generate(prompt, None, &p).unwrap(), first);
        assert_eq!(b.generate(prompt, None, &p).unwrap(), first);
    }
    let different = (0..50).any(|s| a.generate(prompt, None, &GenerationParams::default().with_seed(s)).unwrap() != first);
    assert!(different);
}

#[test]
fn perfect_profile_is_always_correct() {
    let sim = Simulator::new(SimulatorProfile { base_accuracy: 1.0, ..Default::default() }).unwrap().with_answer_key([&query()]);
    assert_eq!(accuracy(&sim, None, 0..500), 1.0);
}

#[test]
fn effects_are_clamped() {
    let profile = SimulatorProfile {
        base_accuracy: 0.9,
        base_conf_mean: 0.95,
        feature_effects: vec![FeatureEffect { trigger_phrase: "boost".into(), accuracy_delta: 0.5, conf_delta: 0.5 }],
        ..Default::default()
    };
    assert_eq!(profile.effective("boost"), (1.0, 1.0));
    let sim = Simulator::new(profile).unwrap().with_answer_key([&query()]);
    assert_eq!(accuracy(&sim, Some(&Cgp::fixed("boost")), 0..500), 1.0);
}

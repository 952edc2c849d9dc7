use cgpo_core::backends::{Downstream, FeatureEffect, GenerationParams, RetryPolicy, Simulator, SimulatorProfile};
use cgpo_core::grpo::{train, GrpoConfig, StepRecord, TrainObserver, TrainingSetup};
use cgpo_core::metrics::MetricSettings;
use cgpo_core::policy::{ContextFeatures, FeatureConfig, PromptLibrary, SoftmaxPolicy};
use cgpo_core::{Dataset, InstructionTemplate, Query, RewardConfig, SplitLabel};

fn queries(n: usize) -> Vec<Query> {
    (0..n)
        .map(|i| Query::new(format!("b{i:03}"), format!("Bandit question {i}?"), vec!["yes".into(), "no".into(), "maybe".into()], i % 3).unwrap())
        .collect()
}

/// Always correct; template 1 states full confidence (reward 0), template 0
/// states e^-2 (reward -2).
fn bandit_simulator(qs: &[Query]) -> Simulator {
    let low = (-2.0f64).exp();
    Simulator::new(SimulatorProfile {
        base_accuracy: 1.0,
        base_conf_mean: low,
        base_conf_spread: 0.0,
        feature_effects: vec![FeatureEffect { trigger_phrase: "ARM-ONE".into(), accuracy_delta: 0.0, conf_delta: 1.0 - low }],
        deterministic: true,
        confidence_decimals: 12,
        ..Default::default()
    })
    .unwrap()
    .with_answer_key(qs)
}

struct Trace(Vec<f64>);

impl TrainObserver for Trace {
    fn on_step(&mut self, _: &StepRecord, policy: &SoftmaxPolicy) {
        self.0.push(policy.probabilities(&ContextFeatures(vec![1.0]), 1.0)[1]);
    }
}

#[test]
fn bandit_converges_to_the_better_arm() {
    let qs = queries(16);
    let ds = Dataset::new(qs.clone(), SplitLabel::Train).unwrap();
    let sim = bandit_simulator(&qs);
    let template = InstructionTemplate::default();
    let library = PromptLibrary::new(vec!["ARM-ZERO".into(), "ARM-ONE".into()]).unwrap();
    for seed in [1, 2, 3] {
        let setup = TrainingSetup {
            train: &ds,
            val: None,
            downstream: Downstream::new(&sim, &template, RetryPolicy::none()),
            params: GenerationParams::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig { max_steps: 200, seed, ..Default::default() },
            metrics: MetricSettings::default(),
        };
        let mut trace = Trace(Vec::new());
        let out = train(SoftmaxPolicy::uniform(library.clone(), FeatureConfig::bias_only(), 64), &setup, &mut trace).unwrap();
        let first = trace.0.iter().position(|&p| p >= 0.9);
        assert!(first.is_some(), "seed {seed}: final p = {:?}", trace.0.last());

        let curve: Vec<f64> = out.reward_curve.iter().map(|r| r.mean_reward).collect();
        assert!(curve.iter().all(|&r| (-2.0 - 1e-9..=1e-12).contains(&r)));
        assert!(out.reward_curve.iter().all(|r| r.mean_kl >= 0.0));
        assert_eq!(out.reward_curve[0].mean_kl, 0.0);
        // windowed means climb while the better arm is below 0.9; past that the
        // per-window sampling noise (about 0.015) is larger than the expected gain
        let windows: Vec<f64> = curve.chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for pair in windows.windows(2).take_while(|p| p[0] < -0.2) {
            assert!(pair[1] > pair[0], "seed {seed}: {windows:?}");
        }
    }
}

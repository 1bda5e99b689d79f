//! Runs alone in its binary so no other test touches the simulator counter.

use hemosens::agent::{build_transitions, train, TrainConfig};
use hemosens::cohort::{simulate_cohort, simulator_calls, SimParams};
use hemosens::discretize::{featurize, prepare, rebin, Anchoring, FeatureSpec};
use hemosens::reward::RewardSpec;

#[test]
fn training_never_queries_the_simulator() {
    let logs = simulate_cohort(&SimParams {
        n_patients: 20,
        ..SimParams::default()
    })
    .unwrap();
    let before = simulator_calls();
    assert!(before > 0);
    let trajs: Vec<_> = logs.iter().map(|l| rebin(l, 4.0, Anchoring::Reanchor).unwrap()).collect();
    let prep = prepare(&trajs, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    let eps: Vec<_> = trajs.iter().map(|t| featurize(t, &prep).unwrap()).collect();
    let states: Vec<Vec<Vec<f64>>> = eps.iter().map(|e| e.features.clone()).collect();
    let actions: Vec<Vec<usize>> = eps.iter().map(|e| e.actions.clone()).collect();
    let rewards: Vec<Vec<f64>> = eps.iter().map(|e| vec![0.1; e.len()]).collect();
    let tr = build_transitions(&states, &actions, &rewards).unwrap();
    let cfg = TrainConfig {
        steps: 100,
        hidden: 16,
        ..TrainConfig::default()
    };
    train(tr, &cfg, "", RewardSpec::ShortTerm).unwrap();
    assert_eq!(simulator_calls(), before);
}

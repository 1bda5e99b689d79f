mod common;

use hemosens::cohort::{simulate_cohort, Outcome, SimParams};
use hemosens::discretize::{featurize, prepare, rebin, split_dataset, Anchoring, FeatureEpisode, FeatureSpec};
use hemosens::embed::*;
use hemosens::nnkit::CellKind;
use rand::Rng;

fn episode(id: &str, rows: Vec<Vec<f64>>) -> FeatureEpisode {
    let n = rows.len();
    FeatureEpisode {
        patient_id: id.into(),
        bins: (0..n).map(|i| (i as f64, i as f64 + 1.0)).collect(),
        features: rows,
        actions: vec![0; n],
        sofa: vec![None; n],
        outcome: Outcome::new(9000.0, 1),
    }
}

fn random_episodes(rng: &mut common::TestRng, n: usize, dim: usize) -> Vec<FeatureEpisode> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..15);
            episode(&format!("p{i}"), (0..len).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
        })
        .collect()
}

#[test]
fn embedding_is_causal() {
    let mut rng = common::rng(1);
    for arch in [CellKind::Lstm, CellKind::Gru] {
        let m = EmbedModel::new(arch, 3, 6, 2).unwrap();
        for ep in random_episodes(&mut rng, 10, 3) {
            for t in 0..ep.len().saturating_sub(1) {
                let before = embed_history(&m, &ep, t).unwrap();
                let mut perturbed = ep.clone();
                for row in &mut perturbed.features[t + 1..] {
                    row.iter_mut().for_each(|x| *x += 10.0);
                }
                assert_eq!(embed_history(&m, &perturbed, t).unwrap().values, before.values);
            }
        }
    }
}

#[test]
fn whole_episode_embedding_matches_prefixes_and_is_bounded() {
    let mut rng = common::rng(2);
    let eps = random_episodes(&mut rng, 8, 4);
    for arch in [CellKind::Lstm, CellKind::Gru] {
        let m = EmbedModel::new(arch, 4, 5, 3).unwrap();
        for ep in &eps {
            let all = m.embed_episode(ep).unwrap();
            assert_eq!(all.len(), ep.len());
            let mut online = OnlineEncoder::new(&m);
            for (t, h) in all.iter().enumerate() {
                assert_eq!(&embed_history(&m, ep, t).unwrap().values, h);
                assert_eq!(&online.push(&ep.features[t]).unwrap(), h);
                // Hidden units are products of gates and tanh outputs.
                assert!(h.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
                assert!(h.iter().map(|v| v * v).sum::<f64>().sqrt() <= 5.0);
            }
        }
        let twin = episode("twin", eps[0].features.clone());
        assert_eq!(m.embed_episode(&twin).unwrap(), m.embed_episode(&eps[0]).unwrap());
        assert!(matches!(embed_history(&m, &eps[0], eps[0].len()), Err(EmbedError::OutOfRange { .. })));
    }
}

#[test]
fn constant_sequences_are_learned() {
    let mut rng = common::rng(3);
    let make = |rng: &mut common::TestRng, n: usize| -> Vec<FeatureEpisode> {
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                episode(&format!("c{i}"), vec![v; rng.random_range(2..8)])
            })
            .collect()
    };
    let train = make(&mut rng, 200);
    let val = make(&mut rng, 50);
    let cfg = EmbedConfig {
        hidden: 16,
        batch: 32,
        epochs: 200,
        ..EmbedConfig::default()
    };
    let (_, curve) = train_autoencoder(&train, &val, &cfg, &[], "h").unwrap();
    let best = curve.val_mse[curve.best_epoch];
    assert!(best < 1e-3, "validation MSE {best}");
}

#[test]
fn simulator_reconstruction_halves_and_is_deterministic() {
    let logs = simulate_cohort(&SimParams {
        n_patients: 80,
        ..SimParams::default()
    })
    .unwrap();
    let trajs: Vec<_> = logs.iter().map(|l| rebin(l, 4.0, Anchoring::Reanchor).unwrap()).collect();
    let (train, val) = split_dataset(trajs, 0.8, 0).unwrap();
    let prep = prepare(&train, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    let train: Vec<_> = train.iter().map(|t| featurize(t, &prep).unwrap()).collect();
    let val: Vec<_> = val.iter().map(|t| featurize(t, &prep).unwrap()).collect();
    for arch in [CellKind::Lstm, CellKind::Gru] {
        let cfg = EmbedConfig {
            arch,
            epochs: 40,
            ..EmbedConfig::default()
        };
        let (m, curve) = train_autoencoder(&train, &val, &cfg, &prep.feature_names, &prep.hash()).unwrap();
        let (first, best) = (curve.val_mse[0], curve.val_mse[curve.best_epoch]);
        assert!(best <= 0.5 * first, "{arch:?}: {first} -> {best}");
        let (again, _) = train_autoencoder(&train, &val, &cfg, &prep.feature_names, &prep.hash()).unwrap();
        assert_eq!(again.embed_episode(&val[0]).unwrap(), m.embed_episode(&val[0]).unwrap());
        assert_eq!(m.embed_episode(&val[0]).unwrap()[0].len(), cfg.hidden);
    }
}

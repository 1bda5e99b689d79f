mod common;

use std::collections::BTreeMap;

use hemosens::cohort::{rollout, simulate_cohort, BinObservation, EpisodeAgent, EventLog, SimParams};
use hemosens::discretize::{
    decode_action, encode_action, featurize, fit_action_bins, load_dataset, prepare, raw_features, rebin,
    save_dataset, split_dataset, ActionBinning, Anchoring, BinnedTrajectory, Dataset, FeatureSpec, OnlineFeaturizer,
    Treatment, TreatmentBins,
};
use hemosens::DOSE_BINS;
use proptest::prelude::*;

fn cohort(n: usize, seed: u64) -> Vec<EventLog> {
    simulate_cohort(&SimParams {
        n_patients: n,
        seed,
        ..SimParams::default()
    })
    .unwrap()
}

fn binned(logs: &[EventLog], h: f64) -> Vec<BinnedTrajectory> {
    logs.iter().map(|l| rebin(l, h, Anchoring::Reanchor).unwrap()).collect()
}

#[test]
fn rebin_matches_oracle_on_random_logs() {
    let mut rng = common::rng(11);
    for i in 0..200 {
        let log = common::random_log(&mut rng, i);
        for h in [1.0, 4.0] {
            let got = rebin(&log, h, Anchoring::Reanchor).unwrap();
            let bad = common::rebin_discrepancies(&log, h, &got);
            assert!(bad.is_empty(), "{bad:?}");
        }
    }
}

#[test]
fn rebin_matches_oracle_on_simulated_logs() {
    for log in cohort(20, 2) {
        let got = rebin(&log, 1.0, Anchoring::Reanchor).unwrap();
        assert!(common::rebin_discrepancies(&log, 1.0, &got).is_empty());
        assert!(got.bins.iter().all(|b| b.duration() <= 1.0 + 1e-12 && b.duration() > 0.0));
    }
}

#[test]
fn quartiles_of_one_to_four() {
    let traj = BinnedTrajectory {
        patient_id: "x".into(),
        statics: BTreeMap::new(),
        bin_hours: 1.0,
        bins: [0.0, 1.0, 2.0, 3.0, 4.0, 0.0]
            .iter()
            .enumerate()
            .map(|(k, &r)| hemosens::discretize::Bin {
                start: k as f64,
                end: k as f64 + 1.0,
                measurements: vec![],
                rates: (r, r),
            })
            .collect(),
        outcome: hemosens::cohort::Outcome::new(9000.0, 1),
    };
    let b = fit_action_bins(&[traj], Treatment::Vasopressor).unwrap();
    assert_eq!(b.cuts, [1.75, 2.5, 3.25]);
    assert!(!b.degenerate);
}

#[test]
fn all_zero_treatment_is_an_error() {
    let traj = binned(&cohort(1, 3), 1.0).pop().unwrap();
    let mut z = traj.clone();
    z.bins.iter_mut().for_each(|b| b.rates = (0.0, 0.0));
    assert!(fit_action_bins(&[z], Treatment::IvFluid).is_err());
}

#[test]
fn physician_marginals_are_quartiles() {
    let trajs = binned(&cohort(150, 4), 1.0);
    let prep = prepare(&trajs, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    for t in Treatment::ALL {
        let mut counts = [0usize; DOSE_BINS];
        for tr in &trajs {
            for a in featurize(tr, &prep).unwrap().actions {
                counts[t.pick(decode_action(a).unwrap())] += 1;
            }
        }
        let treated: usize = counts[1..].iter().sum();
        for (k, &c) in counts.iter().enumerate().skip(1) {
            let share = c as f64 / treated as f64;
            assert!((share - 0.25).abs() <= 0.02, "{t:?} bin {k}: {share}");
        }
    }
}

#[test]
fn representatives_encode_to_their_bin() {
    let trajs = binned(&cohort(60, 5), 4.0);
    let prep = prepare(&trajs, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    for a in 0..25 {
        let (iv, vp) = prep.binning.rates(a).unwrap();
        assert_eq!(encode_action(iv, vp, &prep.binning).unwrap(), a);
    }
}

proptest! {
    #[test]
    fn encode_matches_decision_table(
        c in proptest::collection::vec(0.01f64..10.0, 3),
        rate in prop_oneof![Just(0.0), 0.0f64..12.0],
        pick in 0usize..4,
    ) {
        let mut cuts = [c[0], c[1], c[2]];
        cuts.sort_by(f64::total_cmp);
        // Half of the cases probe a rate sitting exactly on a cut.
        let rate = if pick < 3 && rate > 6.0 { cuts[pick] } else { rate };
        let tb = TreatmentBins { cuts, representatives: [0.0; DOSE_BINS], degenerate: false };
        let binning = ActionBinning { iv: tb.clone(), vaso: tb };
        let want = common::dose_bin_oracle(rate, cuts);
        prop_assert_eq!(encode_action(rate, rate, &binning).unwrap(), want * DOSE_BINS + want);
    }
}

#[test]
fn standardized_train_columns() {
    let trajs = binned(&cohort(40, 6), 1.0);
    let prep = prepare(&trajs, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    let eps: Vec<_> = trajs.iter().map(|t| featurize(t, &prep).unwrap()).collect();
    let raw: Vec<_> = trajs.iter().map(|t| raw_features(t, &prep.spec).unwrap()).collect();
    for j in 0..prep.dim() {
        let mut distinct: Vec<u64> = raw.iter().flat_map(|r| r.rows.iter().filter_map(|row| row[j].map(f64::to_bits))).collect();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < 2 {
            continue;
        }
        let col: Vec<f64> = eps.iter().flat_map(|e| e.features.iter().map(|f| f[j])).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9, "{}: mean {m} sd {}", prep.feature_names[j], v.sqrt());
    }
}

#[test]
fn history_is_zero_at_first_bin_and_grows() {
    let trajs = binned(&cohort(10, 7), 1.0);
    let spec = FeatureSpec::default();
    for t in &trajs {
        let raw = raw_features(t, &spec).unwrap();
        let d = spec.dim();
        assert_eq!(&raw.rows[0][d - 2..], &[Some(0.0), Some(0.0)]);
        for w in raw.rows.windows(2) {
            assert!(w[1][d - 1].unwrap() >= w[0][d - 1].unwrap());
        }
    }
    let no_hist = FeatureSpec {
        include_history: false,
        ..FeatureSpec::default()
    };
    assert_eq!(no_hist.dim() + 2, spec.dim());
}

#[test]
fn split_is_by_patient_and_deterministic() {
    let logs = cohort(10, 8);
    let (a, b) = split_dataset(logs.clone(), 0.8, 1).unwrap();
    assert_eq!((a.len(), b.len()), (8, 2));
    let (a2, _) = split_dataset(logs, 0.8, 1).unwrap();
    assert_eq!(a, a2);
    assert!(a.iter().all(|x| b.iter().all(|y| y.patient_id != x.patient_id)));
}

#[test]
fn dataset_round_trip() {
    let trajs = binned(&cohort(8, 9), 4.0);
    let prep = prepare(&trajs, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    let ds = Dataset {
        episodes: trajs.iter().map(|t| featurize(t, &prep).unwrap()).collect(),
        prep,
    };
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn online_featurizer_matches_batch() {
    let trajs = binned(&cohort(30, 10), 4.0);
    let prep = prepare(&trajs, &FeatureSpec::default(), Anchoring::Reanchor).unwrap();
    struct Rec<'a> {
        f: OnlineFeaturizer<'a>,
        rows: Vec<Vec<f64>>,
    }
    impl EpisodeAgent for Rec<'_> {
        fn bin_hours(&self) -> Option<f64> {
            Some(4.0)
        }
        fn act(&mut self, o: &BinObservation<'_>) -> hemosens::cohort::Result<(f64, f64)> {
            let d = o.end - o.start;
            let row = self
                .f
                .push(o.patient_id, o.statics, o.measurements, (o.rates.0 * d, o.rates.1 * d))
                .unwrap();
            self.rows.push(row);
            Ok((50.0 * (o.bin % 3) as f64, 0.1 * (o.bin % 2) as f64))
        }
        fn rewards(&mut self, _: &EventLog) -> hemosens::cohort::Result<Vec<f64>> {
            Ok(vec![])
        }
    }
    let p = SimParams::default();
    for i in 0..5 {
        let mut rec = Rec {
            f: OnlineFeaturizer::new(&prep),
            rows: vec![],
        };
        let log = rollout(&p, i, &mut rec).unwrap();
        let ep = featurize(&rebin(&log, 4.0, Anchoring::Reanchor).unwrap(), &prep).unwrap();
        assert!(rec.rows.len() <= ep.len());
        for (k, row) in rec.rows.iter().enumerate() {
            assert_eq!(row, &ep.features[k], "rollout {i} bin {k}");
        }
    }
}

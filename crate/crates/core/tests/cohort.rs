use std::fs;

use hemosens::cohort::{
    ground_truth_value, ingest_events, read_logs, rollout, simulate_cohort, write_logs, CohortError, ConstantDose,
    EpisodeAgent, EventKind, EventLog, Physician, SimParams,
};

fn params(seed: u64, n: usize) -> SimParams {
    SimParams {
        n_patients: n,
        seed,
        ..SimParams::default()
    }
}

fn survival(log: &EventLog) -> hemosens::cohort::Result<Vec<f64>> {
    Ok(vec![if log.outcome.survived_1yr { 1.0 } else { 0.0 }])
}

fn constant(iv: f64, vaso: f64) -> impl Fn(usize) -> ConstantDose<fn(&EventLog) -> hemosens::cohort::Result<Vec<f64>>> + Sync {
    move |_| ConstantDose {
        iv,
        vaso,
        bin_hours: 1.0,
        reward: survival,
    }
}

#[test]
fn seed_seven_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_logs(&a, &simulate_cohort(&params(7, 20)).unwrap()).unwrap();
    write_logs(&b, &simulate_cohort(&params(7, 20)).unwrap()).unwrap();
    for f in ["events.jsonl", "static.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn write_then_ingest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let logs = simulate_cohort(&params(3, 15)).unwrap();
    write_logs(dir.path(), &logs).unwrap();
    let back = read_logs(dir.path()).unwrap();
    assert!(back.warnings.is_empty());
    assert_eq!(back.logs, logs);
}

#[test]
fn no_toxicity_max_vasopressor_not_worse_than_never() {
    let p = SimParams {
        toxicity_gain: 0.0,
        ..params(21, 1)
    };
    let max = ground_truth_value(&p, 2000, 1.0, constant(0.0, 1.0)).unwrap();
    let never = ground_truth_value(&p, 2000, 1.0, constant(0.0, 0.0)).unwrap();
    assert!(max.mean >= never.mean, "max {max:?} never {never:?}");
}

#[test]
fn high_toxicity_max_vasopressor_worse_than_physician() {
    let p = SimParams {
        toxicity_gain: 0.1,
        ..params(22, 1)
    };
    let max = ground_truth_value(&p, 2000, 1.0, constant(0.0, 1.0)).unwrap();
    let doc = ground_truth_value(&p, 2000, 1.0, |_| Physician(survival)).unwrap();
    assert!(max.mean < doc.mean, "max {max:?} physician {doc:?}");
}

#[test]
fn physician_beats_never_treat_by_two_se() {
    let p = params(23, 1);
    let doc = ground_truth_value(&p, 2000, 0.99, |_| Physician(survival)).unwrap();
    let never = ground_truth_value(&p, 2000, 0.99, constant(0.0, 0.0)).unwrap();
    let se = (doc.se.powi(2) + never.se.powi(2)).sqrt();
    assert!(doc.mean - never.mean > 2.0 * se, "physician {doc:?} never {never:?}");
}

#[test]
fn ground_truth_is_deterministic() {
    let p = params(5, 1);
    let a = ground_truth_value(&p, 50, 0.9, constant(100.0, 0.2)).unwrap();
    let b = ground_truth_value(&p, 50, 0.9, constant(100.0, 0.2)).unwrap();
    assert_eq!(a, b);
}

/// Mean MAP over measurements in (1, 2] hours after switching to a fixed dose.
fn next_hour_map(vaso: f64) -> f64 {
    struct Probe(f64);
    impl EpisodeAgent for Probe {
        fn bin_hours(&self) -> Option<f64> {
            Some(1.0)
        }
        fn act(&mut self, _: &hemosens::cohort::BinObservation<'_>) -> hemosens::cohort::Result<(f64, f64)> {
            Ok((0.0, self.0))
        }
        fn rewards(&mut self, _: &EventLog) -> hemosens::cohort::Result<Vec<f64>> {
            Ok(vec![])
        }
    }
    let p = params(9, 1);
    let maps: Vec<f64> = (0..600)
        .flat_map(|i| {
            rollout(&p, i, &mut Probe(vaso))
                .unwrap()
                .events
                .into_iter()
                .filter(|e| e.name == "map" && e.time > 1.0 && e.time <= 2.0)
                .map(|e| e.value)
        })
        .collect();
    maps.iter().sum::<f64>() / maps.len() as f64
}

#[test]
fn vasopressor_raises_next_hour_bp() {
    assert!(next_hour_map(0.5) > next_hour_map(0.0) + 2.0);
}

#[test]
fn cumulative_vasopressor_raises_mortality_with_toxicity() {
    let died = |tox: f64| {
        let p = SimParams {
            toxicity_gain: tox,
            ..params(31, 1)
        };
        1.0 - ground_truth_value(&p, 1500, 1.0, constant(0.0, 0.6)).unwrap().mean
    };
    assert!(died(0.08) > died(0.0));
}

const FIXTURE: &str = r#"{"patient_id":"a","time":0.0,"kind":"measurement","name":"map","value":70.0}
{"patient_id":"a","time":1.5,"kind":"treatment","name":"vasopressor_rate","value":0.2}
{"patient_id":"a","time":72.0,"kind":"outcome","name":"hours_survived","value":9000.0}
{"patient_id":"a","time":72.0,"kind":"outcome","name":"survived_1yr","value":1.0}
{"patient_id":"a","time":72.0,"kind":"outcome","name":"final_sofa","value":3.0}
{"patient_id":"b","time":0.5,"kind":"measurement","name":"lactate","value":2.5}
{"patient_id":"b","time":10.0,"kind":"outcome","name":"hours_survived","value":10.0}
{"patient_id":"b","time":10.0,"kind":"outcome","name":"survived_1yr","value":0.0}
{"patient_id":"b","time":10.0,"kind":"outcome","name":"final_sofa","value":12.0}
"#;

fn ingest_str(body: &str, statics: Option<&str>) -> hemosens::cohort::Result<hemosens::cohort::Ingested> {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("events.jsonl");
    fs::write(&ev, body).unwrap();
    let st = statics.map(|s| {
        let p = dir.path().join("static.csv");
        fs::write(&p, s).unwrap();
        p
    });
    ingest_events(&ev, st.as_deref())
}

#[test]
fn two_patient_fixture_loads() {
    let got = ingest_str(FIXTURE, Some("patient_id,age,weight\na,70,80\nb,50,\n")).unwrap();
    assert_eq!(got.logs.len(), 2);
    assert_eq!(got.logs[0].statics["age"], 70.0);
    assert!(!got.logs[1].statics.contains_key("weight"));
    assert!(got.logs[0].outcome.survived_1yr);
    assert_eq!(got.logs[1].outcome.final_sofa, 12);
    assert_eq!(got.logs[0].events[1].kind, EventKind::Treatment);
}

#[test]
fn negative_time_rejected_with_line() {
    let body = FIXTURE.replacen("\"time\":0.5", "\"time\":-1.0", 1);
    match ingest_str(&body, None) {
        Err(CohortError::OutOfRange { line, .. }) => assert_eq!(line, 6),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unsorted_accepted_with_warning() {
    let extra = r#"{"patient_id":"a","time":0.7,"kind":"measurement","name":"map","value":71.0}"#;
    let body = format!("{FIXTURE}{extra}\n");
    let got = ingest_str(&body, None).unwrap();
    assert_eq!(got.warnings.len(), 1);
    let times: Vec<f64> = got.logs[0].events.iter().map(|e| e.time).collect();
    assert_eq!(times, vec![0.0, 0.7, 1.5]);
}

#[test]
fn duplicate_rejected() {
    let line = FIXTURE.lines().next().unwrap();
    let body = format!("{FIXTURE}{line}\n");
    assert!(matches!(ingest_str(&body, None), Err(CohortError::Duplicate { line: 10, .. })));
}

#[test]
fn malformed_and_inconsistent_rows_rejected() {
    let bad_kind = FIXTURE.replacen("\"measurement\"", "\"note\"", 1);
    assert!(matches!(ingest_str(&bad_kind, None), Err(CohortError::Parse { line: 1, .. })));
    let no_outcome: String = FIXTURE.lines().filter(|l| !l.contains("final_sofa")).map(|l| format!("{l}\n")).collect();
    assert!(matches!(ingest_str(&no_outcome, None), Err(CohortError::MissingOutcome(_))));
    let inconsistent = FIXTURE.replacen("\"value\":9000.0", "\"value\":100.0", 1);
    assert!(matches!(ingest_str(&inconsistent, None), Err(CohortError::InvalidOutcome { .. })));
    let neg_rate = FIXTURE.replacen("\"value\":0.2", "\"value\":-0.2", 1);
    assert!(matches!(ingest_str(&neg_rate, None), Err(CohortError::Parse { line: 2, .. })));
}

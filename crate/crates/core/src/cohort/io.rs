use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CohortError, Event, EventKind, EventLog, Outcome, Result, FINAL_SOFA, HOURS_SURVIVED, MAX_HOURS, SURVIVED_1YR,
    TREATMENTS, WORST_SOFA,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    patient_id: String,
    time: f64,
    kind: EventKind,
    name: String,
    value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub logs: Vec<EventLog>,
    pub warnings: Vec<String>,
}

/// Writes `events.jsonl`; each patient's outcome becomes three `outcome`
/// records stamped at the end of the stay.
pub fn write_events(path: &Path, logs: &[EventLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for log in logs {
        let mut line = |time: f64, kind: EventKind, name: &str, value: f64| -> Result<()> {
            let rec = Record {
                patient_id: log.patient_id.clone(),
                time,
                kind,
                name: name.to_string(),
                value,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| CohortError::Io(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        for e in &log.events {
            line(e.time, e.kind, &e.name, e.value)?;
        }
        let end = log.end_time();
        let o = &log.outcome;
        line(end, EventKind::Outcome, HOURS_SURVIVED, o.hours_survived)?;
        line(end, EventKind::Outcome, SURVIVED_1YR, if o.survived_1yr { 1.0 } else { 0.0 })?;
        line(end, EventKind::Outcome, FINAL_SOFA, o.final_sofa as f64)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `static.csv` with a `patient_id` column followed by the union of
/// static covariate names (missing values left empty).
pub fn write_statics(path: &Path, logs: &[EventLog]) -> Result<()> {
    let cols: Vec<String> = logs
        .iter()
        .flat_map(|l| l.statics.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| CohortError::Io(e.to_string()))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(|e| CohortError::Io(e.to_string()))?;
    for log in logs {
        let mut row = vec![log.patient_id.clone()];
        row.extend(cols.iter().map(|c| log.statics.get(c).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| CohortError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes both files into `dir`.
pub fn write_logs(dir: &Path, logs: &[EventLog]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_events(&dir.join("events.jsonl"), logs)?;
    write_statics(&dir.join("static.csv"), logs)
}

/// Reads `events.jsonl` and `static.csv` from `dir`.
pub fn read_logs(dir: &Path) -> Result<Ingested> {
    let statics = dir.join("static.csv");
    ingest_events(&dir.join("events.jsonl"), statics.exists().then_some(statics.as_path()))
}

fn read_statics(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| CohortError::Io(format!("{file}: {e}")))?;
    let header = r.headers().map_err(|e| CohortError::Parse { file: file.clone(), line: 1, msg: e.to_string() })?.clone();
    if header.get(0) != Some("patient_id") {
        return Err(CohortError::Parse {
            file,
            line: 1,
            msg: "first column must be patient_id".into(),
        });
    }
    let mut out = BTreeMap::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CohortError::Parse { file: file.clone(), line, msg: e.to_string() })?;
        let id = row.get(0).unwrap_or_default().to_string();
        let mut vals = BTreeMap::new();
        for (name, cell) in header.iter().zip(row.iter()).skip(1) {
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| CohortError::Parse {
                file: file.clone(),
                line,
                msg: format!("column {name}: not a number: {cell:?}"),
            })?;
            vals.insert(name.to_string(), v);
        }
        if out.insert(id.clone(), vals).is_some() {
            return Err(CohortError::Parse {
                file,
                line,
                msg: format!("duplicate patient {id}"),
            });
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Partial {
    events: Vec<Event>,
    hours: Option<f64>,
    survived: Option<bool>,
    sofa: Option<u32>,
}

/// Loads and validates user-supplied logs.
///
/// Rows are schema-checked, duplicate `(patient, time, name)` records are
/// rejected and out-of-order events are sorted with a warning.
pub fn ingest_events(events: &Path, statics: Option<&Path>) -> Result<Ingested> {
    let file = events.display().to_string();
    let reader = BufReader::new(File::open(events).map_err(|e| CohortError::Io(format!("{file}: {e}")))?);
    let mut patients: BTreeMap<String, Partial> = BTreeMap::new();
    let mut seen: HashSet<(String, u64, String)> = HashSet::new();
    let mut warnings = Vec::new();
    let mut unsorted: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| CohortError::Parse {
            file: file.clone(),
            line: lineno,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if !rec.time.is_finite() || !rec.value.is_finite() {
            return Err(parse("non-finite time or value".into()));
        }
        if !(0.0..=MAX_HOURS).contains(&rec.time) {
            return Err(CohortError::OutOfRange {
                file: file.clone(),
                line: lineno,
                time: rec.time,
            });
        }
        if !seen.insert((rec.patient_id.clone(), rec.time.to_bits(), rec.name.clone())) {
            return Err(CohortError::Duplicate {
                file: file.clone(),
                line: lineno,
                patient: rec.patient_id,
                time: rec.time,
                name: rec.name,
            });
        }
        let entry = patients.entry(rec.patient_id.clone()).or_default();
        match rec.kind {
            EventKind::Outcome => match rec.name.as_str() {
                HOURS_SURVIVED => dup_outcome(&mut entry.hours, rec.value, &parse)?,
                SURVIVED_1YR => {
                    let b = match rec.value {
                        v if v == 0.0 => false,
                        v if v == 1.0 => true,
                        v => return Err(parse(format!("{SURVIVED_1YR} must be 0 or 1, got {v}"))),
                    };
                    dup_outcome(&mut entry.survived, b, &parse)?
                }
                FINAL_SOFA => {
                    let v = rec.value;
                    if v.fract() != 0.0 || v < 0.0 || v > WORST_SOFA as f64 {
                        return Err(parse(format!("{FINAL_SOFA} must be an integer in 0..={WORST_SOFA}, got {v}")));
                    }
                    dup_outcome(&mut entry.sofa, v as u32, &parse)?
                }
                other => return Err(parse(format!("unknown outcome name {other:?}"))),
            },
            EventKind::Treatment => {
                if !TREATMENTS.contains(&rec.name.as_str()) {
                    return Err(parse(format!("unknown treatment {:?}", rec.name)));
                }
                if rec.value < 0.0 {
                    return Err(parse(format!("negative treatment rate {}", rec.value)));
                }
                push_event(entry, &rec, &mut unsorted);
            }
            EventKind::Measurement => push_event(entry, &rec, &mut unsorted),
        }
    }
    let mut statics = match statics {
        Some(p) => read_statics(p)?,
        None => BTreeMap::new(),
    };
    let mut logs = Vec::with_capacity(patients.len());
    for (id, mut part) in patients {
        if unsorted.contains(&id) {
            let msg = format!("patient {id}: events out of time order; sorted");
            log::warn!("{msg}");
            warnings.push(msg);
            part.events.sort_by(|a, b| a.time.total_cmp(&b.time));
        }
        let (Some(h), Some(s), Some(y)) = (part.hours, part.survived, part.sofa) else {
            return Err(CohortError::MissingOutcome(id));
        };
        let outcome = Outcome {
            hours_survived: h,
            survived_1yr: s,
            final_sofa: y,
        };
        outcome.validate(&id)?;
        if let Some(last) = part.events.last() {
            if last.time > outcome.hours_survived {
                return Err(CohortError::InvalidOutcome {
                    patient: id,
                    msg: format!("event at {} after death at {}", last.time, outcome.hours_survived),
                });
            }
        }
        logs.push(EventLog {
            statics: statics.remove(&id).unwrap_or_default(),
            patient_id: id,
            events: part.events,
            outcome,
        });
    }
    Ok(Ingested { logs, warnings })
}

fn dup_outcome<T>(slot: &mut Option<T>, v: T, parse: &dyn Fn(String) -> CohortError) -> Result<()> {
    if slot.is_some() {
        return Err(parse("second outcome record of the same name".into()));
    }
    *slot = Some(v);
    Ok(())
}

fn push_event(entry: &mut Partial, rec: &Record, unsorted: &mut HashSet<String>) {
    if entry.events.last().is_some_and(|e| e.time > rec.time) {
        unsorted.insert(rec.patient_id.clone());
    }
    entry.events.push(Event {
        time: rec.time,
        kind: rec.kind,
        name: rec.name.clone(),
        value: rec.value,
    });
}

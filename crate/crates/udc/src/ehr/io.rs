//! Dataset persistence: JSONL patient records plus JSON vocabulary sidecars.
//!
//! Loading is strict — unknown fields, out-of-range ids, duplicate or
//! unsorted id arrays, and empty visit lists are all rejected with the
//! 1-based line number of the offending record, since these files may come
//! from outside the crate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{Dataset, EntityClass, EntityVocab, PatientRecord, Visit, VocabSet};
use crate::error::{Result, UdcError};

/// Raw schema for one JSONL line, validated before becoming a record.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    patient_id: String,
    visits: Vec<RawVisit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    d: Vec<usize>,
    p: Vec<usize>,
    m: Vec<usize>,
}

fn check_id_array(ids: &[usize], class: EntityClass, size: usize) -> std::result::Result<(), String> {
    for pair in ids.windows(2) {
        if pair[0] >= pair[1] {
            return Err(format!(
                "{} ids must be strictly increasing, saw {} then {}",
                class.name(),
                pair[0],
                pair[1]
            ));
        }
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
        return Err(format!("{} id {} out of range (vocab size {})", class.name(), bad, size));
    }
    Ok(())
}

/// Parse a dataset from JSONL, one patient per line, validating every id
/// against the vocabularies.
pub fn load_records(path: &Path, vocab: &VocabSet) -> Result<Vec<PatientRecord>> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| UdcError::io(&shown, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| UdcError::io(&shown, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| UdcError::Parse {
            path: shown.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let parse_err = |msg: String| UdcError::Parse { path: shown.clone(), line: lineno, msg };
        if raw.patient_id.is_empty() {
            return Err(parse_err("empty patient_id".into()));
        }
        if raw.visits.is_empty() {
            return Err(parse_err(format!("patient '{}' has no visits", raw.patient_id)));
        }
        let mut visits = Vec::with_capacity(raw.visits.len());
        for rv in raw.visits {
            check_id_array(&rv.d, EntityClass::Diagnosis, vocab.diagnosis.size).map_err(&parse_err)?;
            check_id_array(&rv.p, EntityClass::Procedure, vocab.procedure.size).map_err(&parse_err)?;
            check_id_array(&rv.m, EntityClass::Medication, vocab.medication.size).map_err(&parse_err)?;
            visits.push(Visit { d: rv.d, p: rv.p, m: rv.m });
        }
        records.push(PatientRecord { patient_id: raw.patient_id, visits });
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(|e| UdcError::io(&shown, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(w, "{}", line).map_err(|e| UdcError::io(&shown, e))?;
    }
    w.flush().map_err(|e| UdcError::io(&shown, e))
}

/// Parse one vocabulary sidecar, checking text keys stay in range.
pub fn load_vocab(path: &Path) -> Result<EntityVocab> {
    let shown = path.display().to_string();
    let body = std::fs::read_to_string(path).map_err(|e| UdcError::io(&shown, e))?;
    let vocab: EntityVocab = serde_json::from_str(&body).map_err(|e| UdcError::Parse {
        path: shown.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    if vocab.size == 0 {
        return Err(UdcError::Parse { path: shown, line: 0, msg: "vocab size must be positive".into() });
    }
    if let Some(text) = &vocab.text {
        if let Some((&bad, _)) = text.iter().find(|(&id, _)| id >= vocab.size) {
            return Err(UdcError::Parse {
                path: shown,
                line: 0,
                msg: format!("text key {} out of range (vocab size {})", bad, vocab.size),
            });
        }
    }
    Ok(vocab)
}

pub fn save_vocab(path: &Path, vocab: &EntityVocab) -> Result<()> {
    let shown = path.display().to_string();
    let body = serde_json::to_string_pretty(vocab).expect("vocab serializes");
    std::fs::write(path, body).map_err(|e| UdcError::io(&shown, e))
}

fn vocab_file(dir: &Path, class: EntityClass) -> std::path::PathBuf {
    dir.join(format!("vocab_{}.json", class.name()))
}

/// Load `patients.jsonl` plus the three vocab sidecars from one directory.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let diagnosis = load_vocab(&vocab_file(dir, EntityClass::Diagnosis))?;
    let procedure = load_vocab(&vocab_file(dir, EntityClass::Procedure))?;
    let medication = load_vocab(&vocab_file(dir, EntityClass::Medication))?;
    for (vocab, class) in [
        (&diagnosis, EntityClass::Diagnosis),
        (&procedure, EntityClass::Procedure),
        (&medication, EntityClass::Medication),
    ] {
        if vocab.class != class {
            return Err(UdcError::Parse {
                path: vocab_file(dir, class).display().to_string(),
                line: 0,
                msg: format!("expected class {}, file says {}", class.name(), vocab.class.name()),
            });
        }
    }
    let vocab = VocabSet { diagnosis, procedure, medication };
    let records = load_records(&dir.join("patients.jsonl"), &vocab)?;
    Ok(Dataset { records, vocab })
}

pub fn save_dataset_dir(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UdcError::io(dir.display().to_string(), e))?;
    save_vocab(&vocab_file(dir, EntityClass::Diagnosis), &dataset.vocab.diagnosis)?;
    save_vocab(&vocab_file(dir, EntityClass::Procedure), &dataset.vocab.procedure)?;
    save_vocab(&vocab_file(dir, EntityClass::Medication), &dataset.vocab.medication)?;
    save_records(&dir.join("patients.jsonl"), &dataset.records)
}

//! EHR data model: patients as ordered visits of diagnosis / procedure /
//! medication id sets, plus the splits and target extraction the training
//! stages consume.

pub mod io;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdcError};
use crate::rng::sub_rng;
use rand::seq::SliceRandom;

/// The three entity classes a visit records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityClass {
    Diagnosis,
    Procedure,
    Medication,
}

impl EntityClass {
    pub fn name(&self) -> &'static str {
        match self {
            EntityClass::Diagnosis => "diagnosis",
            EntityClass::Procedure => "procedure",
            EntityClass::Medication => "medication",
        }
    }
}

/// Dense id space for one entity class, optionally with display text per id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityVocab {
    pub class: EntityClass,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<std::collections::BTreeMap<usize, String>>,
}

impl EntityVocab {
    pub fn new(class: EntityClass, size: usize) -> Self {
        EntityVocab { class, size, text: None }
    }
}

/// Vocabularies for all three classes of one corpus.
#[derive(Debug, Clone)]
pub struct VocabSet {
    pub diagnosis: EntityVocab,
    pub procedure: EntityVocab,
    pub medication: EntityVocab,
}

impl VocabSet {
    pub fn sized(n_diseases: usize, n_procedures: usize, n_medications: usize) -> Self {
        VocabSet {
            diagnosis: EntityVocab::new(EntityClass::Diagnosis, n_diseases),
            procedure: EntityVocab::new(EntityClass::Procedure, n_procedures),
            medication: EntityVocab::new(EntityClass::Medication, n_medications),
        }
    }

    pub fn size_of(&self, class: EntityClass) -> usize {
        match class {
            EntityClass::Diagnosis => self.diagnosis.size,
            EntityClass::Procedure => self.procedure.size,
            EntityClass::Medication => self.medication.size,
        }
    }
}

/// One hospital visit: three id sets, each stored sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub d: Vec<usize>,
    pub p: Vec<usize>,
    pub m: Vec<usize>,
}

impl Visit {
    pub fn new(mut d: Vec<usize>, mut p: Vec<usize>, mut m: Vec<usize>) -> Self {
        for set in [&mut d, &mut p, &mut m] {
            set.sort_unstable();
            set.dedup();
        }
        Visit { d, p, m }
    }

    pub fn ids(&self, class: EntityClass) -> &[usize] {
        match class {
            EntityClass::Diagnosis => &self.d,
            EntityClass::Procedure => &self.p,
            EntityClass::Medication => &self.m,
        }
    }
}

/// A patient's full longitudinal record, visits in temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

/// A corpus: records plus the id spaces they live in.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub vocab: VocabSet,
}

/// Which prediction task targets are being extracted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    DiagPred,
    MedRec,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::DiagPred => "diag_pred",
            Task::MedRec => "med_rec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diag_pred" => Ok(Task::DiagPred),
            "med_rec" => Ok(Task::MedRec),
            other => Err(UdcError::Config(format!("unknown task '{}'", other))),
        }
    }

    /// Entity class the task predicts.
    pub fn target_class(&self) -> EntityClass {
        match self {
            Task::DiagPred => EntityClass::Diagnosis,
            Task::MedRec => EntityClass::Medication,
        }
    }
}

/// How diseases are partitioned into common and rare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RarityMode {
    /// Top-η fraction of diseases by occurrence rank are common (default).
    TopFraction,
    /// Diseases appearing in at least an η fraction of patients are common.
    CaseFraction,
}

/// Common / rare disease partition with the counts that produced it.
#[derive(Debug, Clone)]
pub struct RaritySplit {
    pub common: Vec<usize>,
    pub rare: Vec<usize>,
    pub eta: f64,
    /// Occurrence count per disease id over the records the split saw.
    pub counts: Vec<usize>,
    common_mask: Vec<bool>,
}

impl RaritySplit {
    pub fn is_common(&self, disease: usize) -> bool {
        self.common_mask.get(disease).copied().unwrap_or(false)
    }

    pub fn is_rare(&self, disease: usize) -> bool {
        !self.is_common(disease)
    }
}

/// Total diagnosis occurrences per disease id (each visit counts once).
pub fn disease_occurrences(records: &[PatientRecord], n_diseases: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_diseases];
    for rec in records {
        for visit in &rec.visits {
            for &d in &visit.d {
                if d < n_diseases {
                    counts[d] += 1;
                }
            }
        }
    }
    counts
}

/// Partition diseases into common and rare by occurrence rank: the top
/// `ceil(eta * |D|)` diseases by count are common, ties going to the lower id.
pub fn split_rarity(records: &[PatientRecord], n_diseases: usize, eta: f64) -> Result<RaritySplit> {
    split_rarity_mode(records, n_diseases, eta, RarityMode::TopFraction)
}

pub fn split_rarity_mode(
    records: &[PatientRecord],
    n_diseases: usize,
    eta: f64,
    mode: RarityMode,
) -> Result<RaritySplit> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(UdcError::Config(format!("rarity threshold must be in (0,1), got {}", eta)));
    }
    if n_diseases == 0 {
        return Err(UdcError::Config("empty disease vocabulary".into()));
    }
    let counts = disease_occurrences(records, n_diseases);
    if counts.iter().all(|&c| c == 0) {
        return Err(UdcError::Contract("no diagnosis occurrences to rank for the rarity split".into()));
    }
    let mut common_mask = vec![false; n_diseases];
    match mode {
        RarityMode::TopFraction => {
            let n_common = ((eta * n_diseases as f64).ceil() as usize).clamp(1, n_diseases);
            let mut order: Vec<usize> = (0..n_diseases).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            for &d in order.iter().take(n_common) {
                common_mask[d] = true;
            }
        }
        RarityMode::CaseFraction => {
            // A "case" is a patient; a disease is common when it appears in
            // at least an eta fraction of them.
            let mut patient_counts = vec![0usize; n_diseases];
            for rec in records {
                let mut seen = vec![false; n_diseases];
                for visit in &rec.visits {
                    for &d in &visit.d {
                        if d < n_diseases && !seen[d] {
                            seen[d] = true;
                            patient_counts[d] += 1;
                        }
                    }
                }
            }
            let threshold = eta * records.len() as f64;
            for d in 0..n_diseases {
                common_mask[d] = patient_counts[d] as f64 >= threshold;
            }
        }
    }
    let common: Vec<usize> = (0..n_diseases).filter(|&d| common_mask[d]).collect();
    let rare: Vec<usize> = (0..n_diseases).filter(|&d| !common_mask[d]).collect();
    Ok(RaritySplit { common, rare, eta, counts, common_mask })
}

/// Seed-deterministic patient-level split into train / validation / test.
pub fn split_patients(
    records: &[PatientRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>)> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(UdcError::Config(format!("split ratios must be nonnegative and sum to 1, got {:?}", ratios)));
    }
    let parts = [a, b, c].iter().filter(|&&r| r > 0.0).count();
    if records.len() < parts {
        return Err(UdcError::Contract(format!(
            "{} patients cannot fill {} partitions",
            records.len(),
            parts
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = sub_rng(seed, "patient-split");
    order.shuffle(&mut rng);
    // Cumulative rounding keeps every part within one patient of its ratio.
    let n = records.len() as f64;
    let cut1 = (a * n).round() as usize;
    let cut2 = ((a + b) * n).round() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((take(&order[..cut1]), take(&order[cut1..cut2]), take(&order[cut2..])))
}

/// Target id set for predicting visit `t+1` from the first `t` visits.
///
/// `t` counts visits from 1, so valid prefixes are `1..=T-1`.
pub fn extract_targets(record: &PatientRecord, t: usize, task: Task) -> Result<Vec<usize>> {
    if t == 0 || t >= record.visits.len() {
        return Err(UdcError::Contract(format!(
            "prefix length {} invalid for a record with {} visits",
            t,
            record.visits.len()
        )));
    }
    let next = &record.visits[t];
    Ok(match task {
        Task::DiagPred => next.d.clone(),
        Task::MedRec => next.m.clone(),
    })
}

/// Procedure / medication sets of every visit containing `disease`, in
/// corpus order. Empty when the disease never occurs.
pub fn cooccurrence_context(records: &[PatientRecord], disease: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for rec in records {
        for visit in &rec.visits {
            if visit.d.binary_search(&disease).is_ok() {
                out.push((visit.p.clone(), visit.m.clone()));
            }
        }
    }
    out
}

/// Multi-hot indicator over `0..n` for an id set.
pub fn multi_hot(ids: &[usize], n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &i in ids {
        if i < n {
            v[i] = 1.0;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, visits: Vec<Visit>) -> PatientRecord {
        PatientRecord { patient_id: id.to_string(), visits }
    }

    fn corpus_with_counts(counts: &[usize]) -> Vec<PatientRecord> {
        // One single-visit patient per occurrence.
        let mut records = Vec::new();
        for (d, &c) in counts.iter().enumerate() {
            for k in 0..c {
                records.push(record(
                    &format!("d{}-{}", d, k),
                    vec![Visit::new(vec![d], vec![], vec![])],
                ));
            }
        }
        records
    }

    #[test]
    fn rarity_top_fraction_takes_highest_counts() {
        let counts: Vec<usize> = (1..=10).rev().collect(); // disease 0 has 10, ... disease 9 has 1
        let records = corpus_with_counts(&counts);
        let split = split_rarity(&records, 10, 0.2).unwrap();
        assert_eq!(split.common, vec![0, 1]);
        assert_eq!(split.rare, (2..10).collect::<Vec<_>>());
        assert!(split.is_common(0) && !split.is_common(5));
    }

    #[test]
    fn rarity_ties_go_to_lower_ids() {
        let records = corpus_with_counts(&[3; 10]);
        let split = split_rarity(&records, 10, 0.2).unwrap();
        assert_eq!(split.common, vec![0, 1]);
    }

    #[test]
    fn rarity_common_counts_dominate_rare_counts() {
        let counts = [7, 1, 9, 4, 4, 2, 6, 1, 3, 5, 2, 8];
        let records = corpus_with_counts(&counts);
        let split = split_rarity(&records, 12, 0.25).unwrap();
        let min_common = split.common.iter().map(|&d| split.counts[d]).min().unwrap();
        let max_rare = split.rare.iter().map(|&d| split.counts[d]).max().unwrap();
        assert!(min_common >= max_rare);
        assert_eq!(split.common.len(), 3); // ceil(0.25 * 12)
    }

    #[test]
    fn rarity_requires_occurrences_and_valid_eta() {
        let empty = vec![record("a", vec![Visit::new(vec![], vec![0], vec![])])];
        assert!(split_rarity(&empty, 5, 0.2).is_err());
        let records = corpus_with_counts(&[1, 1]);
        assert!(split_rarity(&records, 2, 0.0).is_err());
        assert!(split_rarity(&records, 2, 1.0).is_err());
    }

    #[test]
    fn rarity_case_fraction_uses_patient_share() {
        // disease 0 in 3/4 patients, disease 1 in 1/4
        let records = vec![
            record("a", vec![Visit::new(vec![0], vec![], vec![])]),
            record("b", vec![Visit::new(vec![0], vec![], vec![]), Visit::new(vec![0], vec![], vec![])]),
            record("c", vec![Visit::new(vec![0, 1], vec![], vec![])]),
            record("d", vec![Visit::new(vec![], vec![0], vec![])]),
        ];
        let split = split_rarity_mode(&records, 2, 0.5, RarityMode::CaseFraction).unwrap();
        assert_eq!(split.common, vec![0]);
        assert_eq!(split.rare, vec![1]);
    }

    #[test]
    fn patient_split_matches_ratio_and_partitions() {
        let records: Vec<PatientRecord> =
            (0..10).map(|i| record(&format!("p{}", i), vec![Visit::new(vec![0], vec![], vec![])])).collect();
        let (tr, va, te) = split_patients(&records, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        let mut all: Vec<String> = tr.iter().chain(&va).chain(&te).map(|r| r.patient_id.clone()).collect();
        all.sort();
        let mut expect: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);

        let (tr2, va2, te2) = split_patients(&records, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(tr.iter().map(|r| &r.patient_id).collect::<Vec<_>>(), tr2.iter().map(|r| &r.patient_id).collect::<Vec<_>>());
        assert_eq!(va.len(), va2.len());
        assert_eq!(te.len(), te2.len());
    }

    #[test]
    fn patient_split_rejects_underfilled_partitions() {
        let records = vec![record("a", vec![Visit::new(vec![0], vec![], vec![])])];
        assert!(split_patients(&records, (0.6, 0.2, 0.2), 1).is_err());
        assert!(split_patients(&records, (0.5, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn targets_come_from_the_following_visit() {
        let rec = record(
            "a",
            vec![
                Visit::new(vec![1], vec![2], vec![3]),
                Visit::new(vec![4, 5], vec![6], vec![7, 8]),
            ],
        );
        assert_eq!(extract_targets(&rec, 1, Task::DiagPred).unwrap(), vec![4, 5]);
        assert_eq!(extract_targets(&rec, 1, Task::MedRec).unwrap(), vec![7, 8]);
        assert!(extract_targets(&rec, 0, Task::DiagPred).is_err());
        assert!(extract_targets(&rec, 2, Task::DiagPred).is_err());
    }

    #[test]
    fn multi_hot_matches_id_set() {
        // ids are 0-based: set {0, 2} over four slots
        assert_eq!(multi_hot(&[0, 2], 4), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(multi_hot(&[], 3), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn cooccurrence_context_lists_containing_visits_in_order() {
        let records = vec![
            record("a", vec![Visit::new(vec![9], vec![3], vec![7])]),
            record("b", vec![Visit::new(vec![1], vec![4], vec![5]), Visit::new(vec![9, 1], vec![2], vec![])]),
        ];
        let ctx = cooccurrence_context(&records, 9);
        assert_eq!(ctx, vec![(vec![3], vec![7]), (vec![2], vec![])]);
        assert!(cooccurrence_context(&records, 0).is_empty());
    }

    #[test]
    fn cooccurrence_counts_match_occurrence_counts() {
        let records = vec![
            record("a", vec![Visit::new(vec![0, 1], vec![], vec![]), Visit::new(vec![1], vec![], vec![])]),
            record("b", vec![Visit::new(vec![1, 2], vec![], vec![])]),
        ];
        let counts = disease_occurrences(&records, 3);
        for d in 0..3 {
            assert_eq!(cooccurrence_context(&records, d).len(), counts[d]);
        }
    }

    #[test]
    fn visit_constructor_sorts_and_dedups() {
        let v = Visit::new(vec![3, 1, 3, 2], vec![5, 5], vec![]);
        assert_eq!(v.d, vec![1, 2, 3]);
        assert_eq!(v.p, vec![5]);
        assert!(v.m.is_empty());
    }
}

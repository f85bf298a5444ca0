//! Task metrics, rarity-group analysis, and codebook/alignment diagnostics.
//!
//! Definitions that the numbers depend on:
//! - acc@K = hits / min(K, |truth|) — top-K recall; hits counted against the
//!   top K scores with ties broken toward the lower label id.
//! - pres@K = hits / K.
//! - Jaccard and F1 are macro-averaged per sample; AUROC/AUPRC are
//!   micro-averaged over the pooled (sample, label) scores.
//! - Set predictions threshold probabilities at 0.5.

use std::collections::{BTreeMap, HashSet};

use crate::drl::{quantize_residual, DrlData, DrlModel};
use crate::ehr::{EntityClass, Task};
use crate::error::{Result, UdcError};
use crate::numerics::cosine;
use crate::numerics::graph::Graph;

/// One evaluation case: probability scores over the target vocabulary, the
/// true target set, and the patient's disease context (used only for
/// rarity-group attribution in medication recommendation).
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub scores: Vec<f64>,
    pub truth: Vec<usize>,
    pub context_diseases: Vec<usize>,
}

/// Aggregate metrics over one evaluation set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    /// Total samples offered.
    pub samples: usize,
    /// Samples with an empty truth set, excluded from top-K averages.
    pub excluded_topk: usize,
    /// Samples with empty truth AND empty prediction, excluded from set averages.
    pub excluded_set: usize,
    pub acc_at_k: BTreeMap<usize, f64>,
    pub pres_at_k: BTreeMap<usize, f64>,
    /// Absent when the pooled labels are single-class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub jaccard: f64,
    pub f1: f64,
}

/// Ids of the top-`k` scores, ties going to the lower id. Total order, so
/// the selection is unique; partial selection keeps it O(n) for small k.
fn top_k_ids(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| {
        scores[b].partial_cmp(&scores[a]).expect("scores must be comparable").then(a.cmp(&b))
    };
    if k < ids.len() {
        ids.select_nth_unstable_by(k, by_rank);
        ids.truncate(k);
    }
    ids
}

/// acc@K and pres@K for one sample, or `None` when the truth set is empty
/// (the sample is excluded from averaging but still counted by the caller).
pub fn topk_metrics(scores: &[f64], truth: &[usize], k: usize) -> Result<Option<(f64, f64)>> {
    if k == 0 {
        return Err(UdcError::Contract("top-K metrics need K >= 1".into()));
    }
    for &t in truth {
        if t >= scores.len() {
            return Err(UdcError::Contract(format!(
                "truth id {} outside the {}-label score vector",
                t,
                scores.len()
            )));
        }
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(UdcError::NonFinite("top-K metrics over non-finite scores".into()));
    }
    if truth.is_empty() {
        return Ok(None);
    }
    let truth_set: HashSet<usize> = truth.iter().copied().collect();
    let hits = top_k_ids(scores, k).iter().filter(|id| truth_set.contains(id)).count();
    let acc = hits as f64 / truth_set.len().min(k) as f64;
    let pres = hits as f64 / k as f64;
    Ok(Some((acc, pres)))
}

/// Label ids whose probability reaches the threshold.
pub fn threshold_set(scores: &[f64], threshold: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] >= threshold).collect()
}

/// Jaccard and F1 between two id sets, or `None` when both are empty.
pub fn set_metrics(predicted: &[usize], truth: &[usize]) -> Option<(f64, f64)> {
    if predicted.is_empty() && truth.is_empty() {
        return None;
    }
    let p: HashSet<usize> = predicted.iter().copied().collect();
    let t: HashSet<usize> = truth.iter().copied().collect();
    let tp = p.intersection(&t).count() as f64;
    let fp = (p.len() as f64) - tp;
    let fn_ = (t.len() as f64) - tp;
    let jaccard = tp / (tp + fp + fn_);
    let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
    Some((jaccard, f1))
}

/// Micro AUROC (rank / Mann–Whitney form, ties at half credit) and AUPRC
/// (precision–recall step integration) over a pooled score/label list.
/// Single-class pools have no defined curve and come back as `None`.
pub fn ranking_curves(scores: &[f64], positives: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    if scores.len() != positives.len() {
        return Err(UdcError::Contract(format!(
            "{} scores against {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(UdcError::NonFinite("ranking curves over non-finite scores".into()));
    }
    let p = positives.iter().filter(|&&x| x).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Ok((None, None));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must be comparable"));

    // AUROC: midranks over ascending scores; AUROC = (R+ - P(P+1)/2)/(PN).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j average to (i + j + 1) / 2.
        let midrank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positives[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let auroc = (rank_sum_pos - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64);

    // AUPRC: walk thresholds from the highest score down, tied scores as one
    // block, and integrate precision over recall steps.
    let mut area = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && scores[order[j - 1]] == scores[order[i - 1]] {
            j -= 1;
        }
        for &idx in &order[j..i] {
            if positives[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / p as f64;
        let precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok((Some(auroc), Some(area)))
}

/// Evaluates a full sample set: top-K metrics at each requested K, set
/// metrics at threshold 0.5, and micro ranking curves over the pooled
/// scores (every sample contributes its negatives to the pool).
pub fn evaluate(samples: &[EvalSample], task: Task, ks: &[usize]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(UdcError::Contract("evaluation over an empty sample set".into()));
    }
    if ks.is_empty() {
        return Err(UdcError::Contract("evaluation needs at least one K".into()));
    }
    let n_labels = samples[0].scores.len();
    if n_labels == 0 {
        return Err(UdcError::Contract("evaluation over an empty label space".into()));
    }

    let mut acc_sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut pres_sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut excluded_topk = 0usize;
    let mut excluded_set = 0usize;
    let mut jaccard_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut pool_scores = Vec::with_capacity(samples.len() * n_labels);
    let mut pool_labels = Vec::with_capacity(samples.len() * n_labels);

    for sample in samples {
        if sample.scores.len() != n_labels {
            return Err(UdcError::Contract(format!(
                "sample has {} scores, expected {}",
                sample.scores.len(),
                n_labels
            )));
        }
        let mut truth_mask = vec![false; n_labels];
        for &t in &sample.truth {
            if t >= n_labels {
                return Err(UdcError::Contract(format!("truth id {} outside the {}-label space", t, n_labels)));
            }
            truth_mask[t] = true;
        }
        pool_scores.extend_from_slice(&sample.scores);
        pool_labels.extend_from_slice(&truth_mask);

        if sample.truth.is_empty() {
            excluded_topk += 1;
        } else {
            for &k in ks {
                let (acc, pres) = topk_metrics(&sample.scores, &sample.truth, k)?
                    .expect("nonempty truth always yields top-K metrics");
                *acc_sums.get_mut(&k).unwrap() += acc;
                *pres_sums.get_mut(&k).unwrap() += pres;
            }
        }

        let predicted = threshold_set(&sample.scores, 0.5);
        match set_metrics(&predicted, &sample.truth) {
            Some((j, f)) => {
                jaccard_sum += j;
                f1_sum += f;
            }
            None => excluded_set += 1,
        }
    }

    let n_topk = samples.len() - excluded_topk;
    let n_set = samples.len() - excluded_set;
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let (auroc, auprc) = ranking_curves(&pool_scores, &pool_labels)?;
    Ok(MetricsReport {
        task,
        samples: samples.len(),
        excluded_topk,
        excluded_set,
        acc_at_k: acc_sums.into_iter().map(|(k, s)| (k, mean(s, n_topk))).collect(),
        pres_at_k: pres_sums.into_iter().map(|(k, s)| (k, mean(s, n_topk))).collect(),
        auroc,
        auprc,
        jaccard: mean(jaccard_sum, n_set),
        f1: mean(f1_sum, n_set),
    })
}

/// Prevalence quintile per disease id: diseases are ranked by occurrence
/// count ascending (ties to the lower id), and the ranking is cut into five
/// equal spans. Group 0 holds the rarest fifth, group 4 the commonest.
pub fn prevalence_quintiles(counts: &[usize]) -> Vec<usize> {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));
    let mut group = vec![0usize; n];
    for (rank, &d) in order.iter().enumerate() {
        group[d] = (rank * 5 / n).min(4);
    }
    group
}

/// One rarity group's aggregate.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupStat {
    /// Diagnosis task: truth occurrences attributed here. Medication task:
    /// evaluated patients whose rarest disease falls here.
    pub support: usize,
    pub values: BTreeMap<String, f64>,
}

/// Metrics per prevalence group G1 (rarest) .. G5 (commonest).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupReport {
    pub task: Task,
    pub groups: Vec<GroupStat>,
    /// Medication samples with no disease context, unattributable to a group.
    pub ungrouped: usize,
}

/// Rarity-group breakdown. Diagnosis prediction buckets every truth
/// occurrence by its disease's prevalence quintile and scores the top-K hit
/// rate within each bucket; medication recommendation buckets each patient
/// by the quintile of their rarest context disease and averages the
/// per-patient set metrics.
pub fn group_analysis(samples: &[EvalSample], counts: &[usize], task: Task, k: usize) -> Result<GroupReport> {
    if samples.is_empty() {
        return Err(UdcError::Contract("group analysis over an empty sample set".into()));
    }
    if k == 0 {
        return Err(UdcError::Contract("group analysis needs K >= 1".into()));
    }
    if counts.is_empty() {
        return Err(UdcError::Contract("group analysis needs per-disease occurrence counts".into()));
    }
    let quintile = prevalence_quintiles(counts);
    let mut support = [0usize; 5];
    let mut ungrouped = 0usize;

    let groups: Vec<GroupStat> = match task {
        Task::DiagPred => {
            let mut hits = [0usize; 5];
            for sample in samples {
                if sample.truth.is_empty() {
                    continue;
                }
                let top: HashSet<usize> = top_k_ids(&sample.scores, k).into_iter().collect();
                for &d in &sample.truth {
                    if d >= quintile.len() {
                        return Err(UdcError::Contract(format!(
                            "truth disease {} outside the {}-disease count table",
                            d,
                            quintile.len()
                        )));
                    }
                    let g = quintile[d];
                    support[g] += 1;
                    if top.contains(&d) {
                        hits[g] += 1;
                    }
                }
            }
            (0..5)
                .map(|g| {
                    let rate = if support[g] == 0 { 0.0 } else { hits[g] as f64 / support[g] as f64 };
                    GroupStat {
                        support: support[g],
                        values: BTreeMap::from([(format!("acc_at_{}", k), rate)]),
                    }
                })
                .collect()
        }
        Task::MedRec => {
            let mut jaccard = [0.0f64; 5];
            let mut f1 = [0.0f64; 5];
            for sample in samples {
                let predicted = threshold_set(&sample.scores, 0.5);
                let Some((j, f)) = set_metrics(&predicted, &sample.truth) else {
                    continue;
                };
                let rarest = sample
                    .context_diseases
                    .iter()
                    .filter(|&&d| d < quintile.len())
                    .min_by_key(|&&d| (counts[d], d));
                let Some(&rarest) = rarest else {
                    ungrouped += 1;
                    continue;
                };
                let g = quintile[rarest];
                support[g] += 1;
                jaccard[g] += j;
                f1[g] += f;
            }
            (0..5)
                .map(|g| {
                    let mean = |s: f64| if support[g] == 0 { 0.0 } else { s / support[g] as f64 };
                    GroupStat {
                        support: support[g],
                        values: BTreeMap::from([
                            ("jaccard".to_string(), mean(jaccard[g])),
                            ("f1".to_string(), mean(f1[g])),
                        ]),
                    }
                })
                .collect()
        }
    };
    Ok(GroupReport { task, groups, ungrouped })
}

/// Per-level codebook health over one evaluation pass.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LevelDiagnostics {
    /// Fraction of codes assigned at least once, both branches pooled.
    pub utilization: f64,
    /// Shannon entropy (nats) of the pooled assignment distribution.
    pub entropy: f64,
    /// Fraction of diseases whose two branches picked the same code.
    pub agreement: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodebookReport {
    pub levels: Vec<LevelDiagnostics>,
    /// Mean cosine between the two branches' quantized vectors.
    pub mean_cosine: f64,
    pub diseases: usize,
}

/// Runs every requested disease through both encoder branches and the
/// shared codebook, reporting utilization, usage entropy, cross-branch
/// agreement per level, and the mean cross-branch cosine.
pub fn codebook_diagnostics(model: &DrlModel, data: &DrlData, diseases: &[usize]) -> Result<CodebookReport> {
    if diseases.is_empty() {
        return Err(UdcError::Contract("codebook diagnostics over an empty disease list".into()));
    }
    let text_d = data.text.table(EntityClass::Diagnosis);
    let levels = model.codebook.n_levels();
    let codes = model.codebook.codes_per_level();
    let mut usage = vec![vec![0usize; codes]; levels];
    let mut agree = vec![0usize; levels];
    let mut cos_sum = 0.0;

    for &d in diseases {
        if d >= data.e_d.rows() || d >= text_d.rows() {
            return Err(UdcError::Contract(format!(
                "disease id {} outside the embedding tables ({} collaborative, {} text rows)",
                d,
                data.e_d.rows(),
                text_d.rows()
            )));
        }
        let mut g = Graph::new();
        let e_row = g.leaf_row(data.e_d.row(d));
        let t_row = g.leaf_row(text_d.row(d));
        let enc_co = model.phi_co.forward(&mut g, e_row)?;
        let enc_te = model.phi_te.forward(&mut g, t_row)?;
        let q_co = quantize_residual(g.data(enc_co), &model.codebook)?;
        let q_te = quantize_residual(g.data(enc_te), &model.codebook)?;
        for l in 0..levels {
            usage[l][q_co.indices[l]] += 1;
            usage[l][q_te.indices[l]] += 1;
            if q_co.indices[l] == q_te.indices[l] {
                agree[l] += 1;
            }
        }
        cos_sum += cosine(&q_co.z, &q_te.z);
    }

    let total = (2 * diseases.len()) as f64;
    let level_reports = (0..levels)
        .map(|l| {
            let used = usage[l].iter().filter(|&&c| c > 0).count();
            let entropy = -usage[l]
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total;
                    p * p.ln()
                })
                .sum::<f64>();
            LevelDiagnostics {
                utilization: used as f64 / codes as f64,
                entropy,
                agreement: agree[l] as f64 / diseases.len() as f64,
            }
        })
        .collect();
    Ok(CodebookReport { levels: level_reports, mean_cosine: cos_sum / diseases.len() as f64, diseases: diseases.len() })
}

/// Flat CSV form of a metrics report: one `metric,value` row per number.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in &report.acc_at_k {
        out.push_str(&format!("acc_at_{},{}\n", k, v));
    }
    for (k, v) in &report.pres_at_k {
        out.push_str(&format!("pres_at_{},{}\n", k, v));
    }
    if let Some(v) = report.auroc {
        out.push_str(&format!("auroc,{}\n", v));
    }
    if let Some(v) = report.auprc {
        out.push_str(&format!("auprc,{}\n", v));
    }
    out.push_str(&format!("jaccard,{}\n", report.jaccard));
    out.push_str(&format!("f1,{}\n", report.f1));
    out.push_str(&format!("samples,{}\n", report.samples));
    out
}

/// Flat CSV form of a group report: one row per group and metric.
pub fn group_csv(report: &GroupReport) -> String {
    let mut out = String::from("group,metric,value,support\n");
    for (i, stat) in report.groups.iter().enumerate() {
        for (name, value) in &stat.values {
            out.push_str(&format!("G{},{},{},{}\n", i + 1, name, value, stat.support));
        }
    }
    out
}

//! Synthetic EHR corpus with controlled rarity.
//!
//! Disease frequencies follow a Zipf law over ids (id 0 most common), so a
//! rarity split over the output has a genuine long tail. Every entity also
//! carries a latent factor; visits are assembled by similarity in that latent
//! space — procedures and medications lean toward the visit's diseases, and
//! next-visit diagnoses mix persistence with latent neighborhoods. The same
//! latents later drive the synthetic text embeddings, so the collaborative
//! signal a sequence model can learn and the text signal share structure by
//! construction, which is the premise substitution relies on.

use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, PatientRecord, Visit, VocabSet};
use crate::error::{Result, UdcError};
use crate::numerics::Tensor;
use crate::rng::sub_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub n_diseases: usize,
    pub n_procedures: usize,
    pub n_medications: usize,
    pub latent_dim: usize,
    pub zipf_exponent: f64,
    /// Mean visits per patient; extra visits beyond `min_visits` are
    /// geometric, truncated at `max_visits`.
    pub mean_visits: f64,
    pub min_visits: usize,
    pub max_visits: usize,
    /// Central entity counts per visit; actual counts jitter around these.
    pub diseases_per_visit: usize,
    pub procedures_per_visit: usize,
    pub medications_per_visit: usize,
    /// Sharpness of latent-similarity sampling for procedures and
    /// medications; 0 disables the structure.
    pub tau: f64,
    /// Sharpness of latent-similarity sampling for diagnosis draws. Kept
    /// gentler than `tau`: disease draws start from a Zipf base, and a strong
    /// tilt washes the long tail out of the marginal.
    pub tau_disease: f64,
    /// Probability each diagnosis carries over to the next visit.
    pub persistence: f64,
    /// Gaussian noise mixed into the patient context between visits.
    pub context_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            // Large enough that tail-disease counts are statistically stable;
            // pipeline presets override this downward for speed.
            n_patients: 8000,
            n_diseases: 200,
            n_procedures: 80,
            n_medications: 120,
            latent_dim: 16,
            zipf_exponent: 1.2,
            mean_visits: 2.5,
            min_visits: 2,
            max_visits: 8,
            diseases_per_visit: 3,
            procedures_per_visit: 2,
            medications_per_visit: 3,
            tau: 4.0,
            tau_disease: 1.5,
            persistence: 0.5,
            context_noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_patients", self.n_patients),
            ("n_diseases", self.n_diseases),
            ("n_procedures", self.n_procedures),
            ("n_medications", self.n_medications),
            ("latent_dim", self.latent_dim),
            ("min_visits", self.min_visits),
            ("diseases_per_visit", self.diseases_per_visit),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(UdcError::Config(format!("{} must be positive", name)));
            }
        }
        if self.zipf_exponent <= 0.0 {
            return Err(UdcError::Config("zipf_exponent must be positive".into()));
        }
        if self.max_visits < self.min_visits {
            return Err(UdcError::Config("max_visits below min_visits".into()));
        }
        if self.mean_visits < self.min_visits as f64 {
            return Err(UdcError::Config("mean_visits below min_visits".into()));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(UdcError::Config("persistence must be in [0,1]".into()));
        }
        if self.tau < 0.0 || self.tau_disease < 0.0 || self.context_noise < 0.0 {
            return Err(UdcError::Config("tau, tau_disease, and context_noise must be nonnegative".into()));
        }
        // Jittered per-visit counts can exceed the central value by half
        // (rounded up, as the cap must be conservative).
        let caps = [
            ("diseases_per_visit", self.diseases_per_visit, self.n_diseases),
            ("procedures_per_visit", self.procedures_per_visit, self.n_procedures),
            ("medications_per_visit", self.medications_per_visit, self.n_medications),
        ];
        for (name, per_visit, vocab) in caps {
            if per_visit + per_visit.div_ceil(2) > vocab {
                return Err(UdcError::Config(format!(
                    "{} = {} does not fit a vocabulary of {}",
                    name, per_visit, vocab
                )));
            }
        }
        Ok(())
    }
}

/// Unit latent factors per entity, one row per id. Returned to the caller so
/// the text-embedding generator can share them.
#[derive(Debug, Clone)]
pub struct Latents {
    pub diseases: Tensor,
    pub procedures: Tensor,
    pub medications: Tensor,
}

fn unit_rows(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(n, dim);
    for i in 0..n {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for (j, x) in row.iter().enumerate() {
                    t.data_mut()[i * dim + j] = x / norm;
                }
                break;
            }
        }
    }
    t
}

/// Draw `k` distinct indices with probability proportional to `weights`,
/// zeroing each pick before the next draw.
fn sample_distinct(rng: &mut impl Rng, k: usize, weights: &[f64]) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random_range(0.0..total);
        let mut chosen = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if u < wi {
                chosen = i;
                break;
            }
            u -= wi;
        }
        picks.push(chosen);
        w[chosen] = 0.0;
    }
    picks
}

/// Count jitter: uniform in `[k - k/2, k + k/2]`, floored at 1.
fn jittered(rng: &mut impl Rng, k: usize) -> usize {
    let lo = k - k / 2;
    let hi = k + k / 2;
    rng.random_range(lo..=hi).max(1)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-9 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

fn mean_latent(latents: &Tensor, ids: &[usize]) -> Vec<f64> {
    let dim = latents.cols();
    let mut acc = vec![0.0; dim];
    for &id in ids {
        for j in 0..dim {
            acc[j] += latents.at(id, j);
        }
    }
    if !ids.is_empty() {
        for x in acc.iter_mut() {
            *x /= ids.len() as f64;
        }
    }
    normalize(acc)
}

fn tilted_weights(base: &[f64], latents: &Tensor, context: &[f64], tau: f64) -> Vec<f64> {
    let dim = latents.cols();
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let mut dot = 0.0;
            for j in 0..dim {
                dot += context[j] * latents.at(i, j);
            }
            b * (tau * dot).exp()
        })
        .collect()
}

/// Generate a corpus plus the latent factors that shaped it.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Latents)> {
    cfg.validate()?;
    let mut latent_rng = sub_rng(cfg.seed, "synthetic/latents");
    let latents = Latents {
        diseases: unit_rows(&mut latent_rng, cfg.n_diseases, cfg.latent_dim),
        procedures: unit_rows(&mut latent_rng, cfg.n_procedures, cfg.latent_dim),
        medications: unit_rows(&mut latent_rng, cfg.n_medications, cfg.latent_dim),
    };
    // Disease id doubles as Zipf rank: id 0 is the most common disease.
    let zipf: Vec<f64> = (0..cfg.n_diseases).map(|d| ((d + 1) as f64).powf(-cfg.zipf_exponent)).collect();
    let flat_p = vec![1.0; cfg.n_procedures];
    let flat_m = vec![1.0; cfg.n_medications];
    let extra_mean = cfg.mean_visits - cfg.min_visits as f64;
    let geo_p = 1.0 / (1.0 + extra_mean);

    let mut records = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut rng = sub_rng(cfg.seed, &format!("synthetic/patient/{}", i));
        let extra = if extra_mean > 0.0 {
            Geometric::new(geo_p).expect("valid geometric p").sample(&mut rng) as usize
        } else {
            0
        };
        let n_visits = (cfg.min_visits + extra).min(cfg.max_visits);
        let patient_latent: Vec<f64> =
            normalize((0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect());

        let mut visits: Vec<Visit> = Vec::with_capacity(n_visits);
        let mut context = patient_latent.clone();
        for t in 0..n_visits {
            let k_d = jittered(&mut rng, cfg.diseases_per_visit).min(cfg.n_diseases);
            let mut diseases: Vec<usize> = Vec::new();
            if t > 0 {
                for &d in &visits[t - 1].d {
                    if rng.random_range(0.0..1.0) < cfg.persistence && diseases.len() < k_d {
                        diseases.push(d);
                    }
                }
            }
            if diseases.len() < k_d {
                let mut weights = tilted_weights(&zipf, &latents.diseases, &context, cfg.tau_disease);
                for &d in &diseases {
                    weights[d] = 0.0;
                }
                diseases.extend(sample_distinct(&mut rng, k_d - diseases.len(), &weights));
            }
            let visit_latent = mean_latent(&latents.diseases, &diseases);
            let k_p = jittered(&mut rng, cfg.procedures_per_visit).min(cfg.n_procedures);
            let wp = tilted_weights(&flat_p, &latents.procedures, &visit_latent, cfg.tau);
            let procedures = sample_distinct(&mut rng, k_p, &wp);
            let k_m = jittered(&mut rng, cfg.medications_per_visit).min(cfg.n_medications);
            let wm = tilted_weights(&flat_m, &latents.medications, &visit_latent, cfg.tau);
            let medications = sample_distinct(&mut rng, k_m, &wm);
            visits.push(Visit::new(diseases, procedures, medications));

            // Drift the context toward what this visit showed, with noise so
            // trajectories do not collapse onto one latent direction.
            let mut next = visit_latent;
            for x in next.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += cfg.context_noise * n;
            }
            context = normalize(next);
        }
        records.push(PatientRecord { patient_id: format!("p{:05}", i), visits });
    }
    let vocab = VocabSet::sized(cfg.n_diseases, cfg.n_procedures, cfg.n_medications);
    Ok((Dataset { records, vocab }, latents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::disease_occurrences;

    #[test]
    fn same_seed_generates_identical_corpora() {
        let cfg = SyntheticConfig { n_patients: 40, seed: 11, ..Default::default() };
        let (a, _) = generate_synthetic(&cfg).unwrap();
        let (b, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn single_patient_single_visit_stays_in_range() {
        let cfg = SyntheticConfig {
            n_patients: 1,
            mean_visits: 1.0,
            min_visits: 1,
            max_visits: 1,
            seed: 3,
            ..Default::default()
        };
        let (data, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.records.len(), 1);
        let rec = &data.records[0];
        assert_eq!(rec.visits.len(), 1);
        let v = &rec.visits[0];
        assert!(!v.d.is_empty());
        assert!(v.d.iter().all(|&d| d < cfg.n_diseases));
        assert!(v.p.iter().all(|&p| p < cfg.n_procedures));
        assert!(v.m.iter().all(|&m| m < cfg.n_medications));
    }

    #[test]
    fn visit_counts_respect_bounds() {
        let cfg = SyntheticConfig { n_patients: 200, seed: 5, ..Default::default() };
        let (data, _) = generate_synthetic(&cfg).unwrap();
        for rec in &data.records {
            assert!(rec.visits.len() >= cfg.min_visits);
            assert!(rec.visits.len() <= cfg.max_visits);
        }
        let mean =
            data.records.iter().map(|r| r.visits.len()).sum::<usize>() as f64 / data.records.len() as f64;
        assert!((mean - cfg.mean_visits).abs() < 0.5, "mean visits {}", mean);
    }

    #[test]
    fn top_fifth_of_diseases_covers_most_occurrences() {
        let cfg = SyntheticConfig { n_patients: 800, seed: 7, ..Default::default() };
        let (data, _) = generate_synthetic(&cfg).unwrap();
        let counts = disease_occurrences(&data.records, cfg.n_diseases);
        let total: usize = counts.iter().sum();
        let mut sorted = counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let head: usize = sorted.iter().take(cfg.n_diseases / 5).sum();
        assert!(
            head as f64 >= 0.8 * total as f64,
            "top 20% of diseases cover only {}/{} occurrences",
            head,
            total
        );
    }

    #[test]
    fn empirical_frequency_follows_zipf_rank() {
        let cfg = SyntheticConfig { seed: 9, ..Default::default() };
        let (data, _) = generate_synthetic(&cfg).unwrap();
        let counts = disease_occurrences(&data.records, cfg.n_diseases);
        let rho = spearman(&counts);
        assert!(rho >= 0.95, "spearman between id rank and count rank = {}", rho);
    }

    /// Spearman correlation between ids in order (the intended rank) and
    /// descending occurrence counts, with average ranks on ties.
    fn spearman(counts: &[usize]) -> f64 {
        let n = counts.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && counts[order[j + 1]] == counts[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                ranks[order[k]] = avg;
            }
            i = j + 1;
        }
        let ids: Vec<f64> = (0..n).map(|d| d as f64).collect();
        pearson(&ids, &ranks)
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (a, b) in x.iter().zip(y) {
            cov += (a - mx) * (b - my);
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
        }
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let base = SyntheticConfig::default();
        let too_many = SyntheticConfig { diseases_per_visit: 190, ..base.clone() };
        assert!(generate_synthetic(&too_many).is_err());
        let bad_zipf = SyntheticConfig { zipf_exponent: 0.0, ..base.clone() };
        assert!(generate_synthetic(&bad_zipf).is_err());
        let bad_visits = SyntheticConfig { mean_visits: 1.0, min_visits: 2, ..base };
        assert!(generate_synthetic(&bad_visits).is_err());
    }
}

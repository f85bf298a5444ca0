//! Frozen textual-embedding provider.
//!
//! Stands in for a pretrained language model: either loads precomputed
//! per-entity vectors from whitespace text files, or synthesizes them from
//! the generator's latent factors through a fixed orthonormal linear map
//! plus Gaussian noise. Tables are plain tensors, never parameters, so no
//! gradient can reach them by construction; the text dimension is
//! independent of the model dimension and only projected inside the
//! alignment encoders.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};

use crate::ehr::synthetic::Latents;
use crate::ehr::{EntityClass, VocabSet};
use crate::error::{Result, UdcError};
use crate::numerics::Tensor;
use crate::rng::sub_rng;

/// Where a set of text embeddings came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextSource {
    File,
    Synthetic,
}

/// Immutable text-embedding tables for all three entity classes, all sharing
/// one dimension.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    diseases: Tensor,
    procedures: Tensor,
    medications: Tensor,
    pub dim: usize,
    pub source: TextSource,
}

impl TextEmbeddings {
    pub fn from_tables(
        diseases: Tensor,
        procedures: Tensor,
        medications: Tensor,
        source: TextSource,
    ) -> Result<Self> {
        let dim = diseases.cols();
        if procedures.cols() != dim || medications.cols() != dim {
            return Err(UdcError::Dimension {
                op: "TextEmbeddings::from_tables",
                detail: format!(
                    "classes disagree on width: diagnosis {}, procedure {}, medication {}",
                    dim,
                    procedures.cols(),
                    medications.cols()
                ),
            });
        }
        Ok(TextEmbeddings { diseases, procedures, medications, dim, source })
    }

    pub fn table(&self, class: EntityClass) -> &Tensor {
        match class {
            EntityClass::Diagnosis => &self.diseases,
            EntityClass::Procedure => &self.procedures,
            EntityClass::Medication => &self.medications,
        }
    }

    pub fn row(&self, class: EntityClass, id: usize) -> &[f64] {
        self.table(class).row(id)
    }

    /// Gathered rows as a fresh tensor (one row per id, in the given order).
    pub fn gather(&self, class: EntityClass, ids: &[usize]) -> Tensor {
        let table = self.table(class);
        let mut out = Tensor::zeros(ids.len(), self.dim);
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * self.dim..(r + 1) * self.dim].copy_from_slice(table.row(id));
        }
        out
    }
}

fn class_file(dir: &Path, class: EntityClass) -> PathBuf {
    dir.join(format!("text_{}.txt", class.name()))
}

/// Hard caps against absurd headers in untrusted files.
const MAX_ROWS: usize = 1 << 22;
const MAX_DIM: usize = 1 << 16;

/// Parse one class file: header `class dim count`, then `id v1 .. vdim` rows.
pub fn load_class_embeddings(path: &Path, class: EntityClass, expected_rows: usize) -> Result<Tensor> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| UdcError::io(&shown, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| UdcError::Parse { path: shown.clone(), line, msg };

    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file, expected header".into()))?;
    let header = header.map_err(|e| UdcError::io(&shown, e))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(1, format!("header must be 'class dim count', got '{}'", header)));
    }
    if parts[0] != class.name() {
        return Err(parse_err(1, format!("expected class {}, file says {}", class.name(), parts[0])));
    }
    let dim: usize = parts[1].parse().map_err(|_| parse_err(1, format!("bad dim '{}'", parts[1])))?;
    let count: usize = parts[2].parse().map_err(|_| parse_err(1, format!("bad count '{}'", parts[2])))?;
    if dim == 0 || dim > MAX_DIM || count > MAX_ROWS {
        return Err(parse_err(1, format!("unreasonable header dims {}x{}", count, dim)));
    }
    if count != expected_rows {
        return Err(parse_err(
            1,
            format!("{} vocabulary has {} entities, file declares {}", class.name(), expected_rows, count),
        ));
    }

    let mut rows: Vec<Option<Vec<f64>>> = vec![None; expected_rows];
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| UdcError::io(&shown, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: usize = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad id in '{}'", line)))?;
        if id >= expected_rows {
            return Err(parse_err(lineno, format!("entity id {} out of range ({} entities)", id, expected_rows)));
        }
        if rows[id].is_some() {
            return Err(parse_err(lineno, format!("duplicate row for entity {}", id)));
        }
        let vals: Vec<f64> = it
            .map(|tok| tok.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad value '{}'", tok))))
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(parse_err(lineno, format!("entity {} has {} values, header says {}", id, vals.len(), dim)));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, format!("entity {} has a non-finite value", id)));
        }
        rows[id] = Some(vals);
    }
    if let Some(missing) = rows.iter().position(|r| r.is_none()) {
        return Err(parse_err(0, format!("entity {} has no embedding", missing)));
    }
    let data: Vec<f64> = rows.into_iter().flat_map(|r| r.unwrap()).collect();
    Tensor::matrix(expected_rows, dim, data)
}

/// Load all three class files from one directory, requiring a shared width.
pub fn load_text_embeddings(dir: &Path, vocab: &VocabSet) -> Result<TextEmbeddings> {
    let d = load_class_embeddings(&class_file(dir, EntityClass::Diagnosis), EntityClass::Diagnosis, vocab.diagnosis.size)?;
    let p = load_class_embeddings(&class_file(dir, EntityClass::Procedure), EntityClass::Procedure, vocab.procedure.size)?;
    let m = load_class_embeddings(&class_file(dir, EntityClass::Medication), EntityClass::Medication, vocab.medication.size)?;
    TextEmbeddings::from_tables(d, p, m, TextSource::File)
}

fn save_class_embeddings(path: &Path, class: EntityClass, table: &Tensor) -> Result<()> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(|e| UdcError::io(&shown, e))?;
    let mut w = BufWriter::new(file);
    // f64 Display is shortest-round-trip, so save -> load is lossless.
    writeln!(w, "{} {} {}", class.name(), table.cols(), table.rows()).map_err(|e| UdcError::io(&shown, e))?;
    for id in 0..table.rows() {
        let vals: Vec<String> = table.row(id).iter().map(|v| format!("{}", v)).collect();
        writeln!(w, "{} {}", id, vals.join(" ")).map_err(|e| UdcError::io(&shown, e))?;
    }
    w.flush().map_err(|e| UdcError::io(&shown, e))
}

pub fn save_text_embeddings(dir: &Path, emb: &TextEmbeddings) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UdcError::io(dir.display().to_string(), e))?;
    save_class_embeddings(&class_file(dir, EntityClass::Diagnosis), EntityClass::Diagnosis, emb.table(EntityClass::Diagnosis))?;
    save_class_embeddings(&class_file(dir, EntityClass::Procedure), EntityClass::Procedure, emb.table(EntityClass::Procedure))?;
    save_class_embeddings(&class_file(dir, EntityClass::Medication), EntityClass::Medication, emb.table(EntityClass::Medication))
}

/// Rows of a `k x dim` matrix orthonormalized by modified Gram-Schmidt, so
/// the induced linear map preserves inner products of the latents exactly.
fn orthonormal_map(rng: &mut impl rand::Rng, k: usize, dim: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut cand: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for prev in &rows {
            let dot: f64 = cand.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in cand.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            rows.push(cand);
        }
    }
    Tensor::matrix(k, dim, rows.into_iter().flatten().collect()).expect("sized rows")
}

/// Build text embeddings from generator latents: one fixed orthonormal map
/// shared by all classes (so cross-class geometry carries over), plus
/// per-entity Gaussian noise.
///
/// `noise_level` is relative to the (unit) latent norm regardless of `dim`:
/// the per-component noise std is `noise_level / sqrt(dim)`, so 0.1 perturbs
/// each embedding by roughly 10% of its length.
pub fn synthesize_text_embeddings(
    latents: &Latents,
    noise_level: f64,
    seed: u64,
    dim: usize,
) -> Result<TextEmbeddings> {
    let latent_dim = latents.diseases.cols();
    if dim < latent_dim {
        return Err(UdcError::Config(format!(
            "text dim {} below latent dim {}; the orthonormal map needs dim >= latent dim",
            dim, latent_dim
        )));
    }
    if noise_level < 0.0 {
        return Err(UdcError::Config("noise_level must be nonnegative".into()));
    }
    let mut map_rng = sub_rng(seed, "textemb/map");
    let map = orthonormal_map(&mut map_rng, latent_dim, dim);
    let component_std = noise_level / (dim as f64).sqrt();
    let project = |table: &Tensor, label: &str| -> Tensor {
        let mut rng = sub_rng(seed, &format!("textemb/noise/{}", label));
        let n = table.rows();
        let mut out = Tensor::zeros(n, dim);
        for i in 0..n {
            for j in 0..dim {
                let mut s = 0.0;
                for l in 0..latent_dim {
                    s += table.at(i, l) * map.at(l, j);
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                out.data_mut()[i * dim + j] = s + component_std * noise;
            }
        }
        out
    };
    let d = project(&latents.diseases, "diagnosis");
    let p = project(&latents.procedures, "procedure");
    let m = project(&latents.medications, "medication");
    TextEmbeddings::from_tables(d, p, m, TextSource::Synthetic)
}

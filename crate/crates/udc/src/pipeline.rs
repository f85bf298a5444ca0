//! Run orchestration: a single TOML config drives data preparation, the
//! three training stages, evaluation, ablation grids, hyperparameter sweeps,
//! and embedding dumps, all rooted in one run directory.
//!
//! Everything lives in the library so tests can drive full runs in-process;
//! the `udc` binary is a thin argument-parsing shell over these functions.
//!
//! A run directory is laid out as
//!
//! ```text
//! <root>/config.toml            exact resolved configuration (provenance)
//! <root>/data/                  corpus (generated here unless external)
//! <root>/textemb/               text embedding tables
//! <root>/checkpoints/*.ck       stage1 / drl / finetune parameters
//! <root>/logs/*.json            per-stage training trajectories
//! <root>/reports/               metrics.json, metrics.csv, groups.csv, codebook.json
//! ```
//!
//! Stages are resumable: an existing artifact is loaded instead of retrained,
//! and its file is never rewritten, so resumed runs leave earlier checkpoints
//! byte-identical. A stage whose upstream checkpoint is absent (and out of
//! scope for the invocation) fails with an error naming the missing file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{entries_to_params, file_checksum, load_checkpoint, params_to_entries, save_checkpoint};
use crate::drl::{
    load_drl, quantize_residual, save_drl, substituted_table, train_drl, DrlConfig, DrlData, DrlModel, DrlTrainLog,
};
use crate::ehr::io::{load_dataset_dir, save_dataset_dir};
use crate::ehr::synthetic::{generate_synthetic, SyntheticConfig};
use crate::ehr::{
    disease_occurrences, extract_targets, split_patients, split_rarity, Dataset, EntityClass, PatientRecord, Task,
};
use crate::error::{Result, UdcError};
use crate::eval::{
    codebook_diagnostics, evaluate, group_analysis, group_csv, metrics_csv, CodebookReport, EvalSample, GroupReport,
    MetricsReport,
};
use crate::numerics::Tensor;
use crate::pcm::{finetune, pretrain, DiseaseSource, PcmModel, TrainLog, TrainSettings};
use crate::rng::sub_rng;
use crate::textemb::{load_text_embeddings, save_text_embeddings, synthesize_text_embeddings, TextEmbeddings};

/// Corpus source and split controls.
///
/// With `dir` unset the corpus is generated from `synthetic` into the run
/// directory on first use and reloaded from there afterwards. With `dir` set,
/// records and vocabularies are read from that directory and `text_dir` must
/// point at matching text embedding tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// External pre-tokenized dataset directory (optional).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// External text embedding directory; required with `dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_dir: Option<PathBuf>,
    /// Generator settings used when no external directory is given.
    pub synthetic: SyntheticConfig,
    /// Noise level of synthesized text embeddings, relative to unit signal.
    pub text_noise: f64,
    /// Width of synthesized text embeddings; 0 means "same as model dim".
    pub text_dim: usize,
    /// Patient-level train/validation/test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            text_dir: None,
            synthetic: SyntheticConfig::default(),
            text_noise: 0.25,
            text_dim: 0,
            split: [0.6, 0.2, 0.2],
        }
    }
}

/// Backbone (stage 1/3) hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Longest visit sequence a forward pass accepts. The corpus must fit;
    /// medication recommendation needs one extra slot for the current visit.
    pub max_len: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Stage-1 learning rate; unset means the task default (1e-3 diagnosis,
    /// 2e-4 medication).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub weight_decay: f64,
    /// Stage-3 epochs; unset means "same as `epochs`".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_epochs: Option<usize>,
    /// Stage-3 learning rate; unset means "same as the resolved `lr`".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_lr: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            blocks: 2,
            max_len: 32,
            epochs: 50,
            batch: 16,
            lr: None,
            weight_decay: 0.0,
            finetune_epochs: None,
            finetune_lr: None,
        }
    }
}

/// Evaluation cutoffs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Top-K cutoffs to report.
    pub ks: Vec<usize>,
    /// Cutoff used for rarity-group analysis and summary lines.
    pub k_primary: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![5, 10, 20, 40], k_primary: 20 }
    }
}

/// Complete description of one run. Parsed from TOML with unknown keys
/// rejected; [`RunConfig::resolved`] fills every optional value and
/// validates, so the provenance copy written into the run directory is
/// fully concrete.
///
/// One master `seed` governs the whole run: it is propagated into the data
/// generator and the alignment stage, overriding their own seed fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `diag` / `diag_pred` or `med` / `med_rec`.
    pub task: String,
    pub seed: u64,
    /// Run directory; usually supplied by the caller and recorded here so
    /// the provenance file is self-contained.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Skip stage-3 tuning: substitute embeddings at inference time only.
    pub no_finetune: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub drl: DrlConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "diag_pred".into(),
            seed: 0,
            out_dir: None,
            no_finetune: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            drl: DrlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "diag" | "diag_pred" => Ok(Task::DiagPred),
        "med" | "med_rec" => Ok(Task::MedRec),
        other => Err(UdcError::Config(format!("unknown task '{}'; expected diag or med", other))),
    }
}

impl RunConfig {
    /// The configured task, accepting short and long spellings.
    pub fn task(&self) -> Result<Task> {
        parse_task(&self.task)
    }

    /// Small preset that runs the full pipeline in minutes on one desk
    /// machine: a 2000-patient corpus over 200 diseases with 32-wide
    /// embeddings, keeping the 4-level 64-code codebook, α = 0.25 and
    /// η = 0.2 of the full-scale configuration.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic.n_patients = 2000;
        cfg.data.synthetic.n_diseases = 200;
        cfg.data.text_noise = 0.1;
        cfg.data.text_dim = 32;
        cfg.model.dim = 32;
        cfg.model.max_len = 16;
        cfg.model.epochs = 8;
        cfg.model.finetune_epochs = Some(4);
        cfg.drl.dim = 32;
        cfg.drl.epochs = 40;
        cfg.drl.kappa = 0.9;
        cfg
    }

    /// Parse a TOML document. Unknown keys anywhere are rejected.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| UdcError::Parse {
            path: "<config>".into(),
            line: 0,
            msg: e.to_string(),
        })
    }

    /// The TOML rendering written into run directories as provenance.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| UdcError::Config(format!("configuration not representable as TOML: {}", e)))
    }

    /// Fill every optional value, propagate the master seed, canonicalize
    /// the task name, and validate. The result is what actually runs and
    /// what gets written as provenance.
    pub fn resolved(&self) -> Result<RunConfig> {
        let task = self.task()?;
        let mut out = self.clone();
        out.task = task.name().into();
        out.data.synthetic.seed = self.seed;
        out.drl.seed = self.seed;
        if out.model.lr.is_none() {
            out.model.lr = Some(match task {
                Task::DiagPred => 1e-3,
                Task::MedRec => 2e-4,
            });
        }
        if out.model.finetune_epochs.is_none() {
            out.model.finetune_epochs = Some(out.model.epochs);
        }
        if out.model.finetune_lr.is_none() {
            out.model.finetune_lr = out.model.lr;
        }
        if out.data.text_dim == 0 {
            out.data.text_dim = out.model.dim;
        }
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim == 0 || m.blocks == 0 || m.batch == 0 {
            return Err(UdcError::Config("model dim, blocks, and batch must be positive".into()));
        }
        if m.heads == 0 || m.dim % m.heads != 0 {
            return Err(UdcError::Config(format!(
                "model dim {} is not divisible by {} attention heads",
                m.dim, m.heads
            )));
        }
        if m.max_len < 2 {
            return Err(UdcError::Config("max_len below 2 leaves no room for a history and a target".into()));
        }
        let lr = m.lr.unwrap_or(1.0);
        let ft_lr = m.finetune_lr.unwrap_or(1.0);
        if !(lr.is_finite() && lr > 0.0 && ft_lr.is_finite() && ft_lr > 0.0) {
            return Err(UdcError::Config("learning rates must be positive".into()));
        }
        if !(m.weight_decay.is_finite() && m.weight_decay >= 0.0) {
            return Err(UdcError::Config("weight decay must be nonnegative".into()));
        }
        let d = &self.data;
        let sum: f64 = d.split.iter().sum();
        if d.split.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(UdcError::Config(format!(
                "data split fractions must be nonnegative and sum to 1, got {:?}",
                d.split
            )));
        }
        if d.dir.is_some() && d.text_dir.is_none() {
            return Err(UdcError::Config(
                "file-backed data needs data.text_dir pointing at text embedding tables".into(),
            ));
        }
        if !(d.text_noise.is_finite() && d.text_noise >= 0.0) {
            return Err(UdcError::Config("text_noise must be nonnegative".into()));
        }
        if d.dir.is_none() {
            d.synthetic.validate()?;
            if d.text_dim < d.synthetic.latent_dim {
                return Err(UdcError::Config(format!(
                    "text_dim {} below the generator's latent_dim {}",
                    d.text_dim, d.synthetic.latent_dim
                )));
            }
        }
        self.drl.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(UdcError::Config("eval.ks must be nonempty positive cutoffs".into()));
        }
        if self.eval.k_primary == 0 {
            return Err(UdcError::Config("eval.k_primary must be positive".into()));
        }
        Ok(())
    }
}

/// Where `config.out_dir` wins over the environment default but loses to an
/// explicit caller path. `kind` names the artifact family ("run", "ablate",
/// "sweep-alpha", ...) used for the fallback directory name.
pub fn resolve_out_dir(config: &RunConfig, cli: Option<&Path>, env_root: Option<&Path>, kind: &str) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = &config.out_dir {
        return p.clone();
    }
    let name = format!("{}-{}-seed{}", kind, config.task, config.seed);
    match env_root {
        Some(root) => root.join(name),
        None => PathBuf::from("runs").join(name),
    }
}

/// Concrete file layout of one run directory. Ablations and sweeps repoint
/// the data and stage-1 entries at a shared sibling so variants reuse them.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
    pub config_file: PathBuf,
    pub data_dir: PathBuf,
    pub text_dir: PathBuf,
    pub stage1: PathBuf,
    pub drl: PathBuf,
    pub finetune: PathBuf,
    pub stage1_log: PathBuf,
    pub drl_log: PathBuf,
    pub finetune_log: PathBuf,
    pub reports: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths {
            root: root.to_path_buf(),
            config_file: root.join("config.toml"),
            data_dir: root.join("data"),
            text_dir: root.join("textemb"),
            stage1: root.join("checkpoints").join("stage1.ck"),
            drl: root.join("checkpoints").join("drl.ck"),
            finetune: root.join("checkpoints").join("finetune.ck"),
            stage1_log: root.join("logs").join("stage1.json"),
            drl_log: root.join("logs").join("drl.json"),
            finetune_log: root.join("logs").join("finetune.json"),
            reports: root.join("reports"),
        }
    }

    fn metrics_json(&self) -> PathBuf {
        self.reports.join("metrics.json")
    }
    fn metrics_csv_path(&self) -> PathBuf {
        self.reports.join("metrics.csv")
    }
    fn groups_csv_path(&self) -> PathBuf {
        self.reports.join("groups.csv")
    }
    fn codebook_json(&self) -> PathBuf {
        self.reports.join("codebook.json")
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Pretrain,
    TrainDrl,
    Finetune,
    Eval,
}

impl Stage {
    fn label(&self) -> &'static str {
        match self {
            Stage::Data => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::TrainDrl => "train-drl",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }
}

/// Loaded corpus plus the patient-level split every stage shares.
pub struct World {
    pub dataset: Dataset,
    pub text: TextEmbeddings,
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Corpus shape for summaries and logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub patients: usize,
    pub diseases: usize,
    pub procedures: usize,
    pub medications: usize,
    pub train_patients: usize,
    pub val_patients: usize,
    pub test_patients: usize,
}

/// Evaluation reports of one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReports {
    pub metrics: MetricsReport,
    pub groups: GroupReport,
}

/// Contents of `reports/metrics.json`: the substituted model next to the
/// untouched stage-1 baseline, evaluated on the same test samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub task: Task,
    pub seed: u64,
    pub baseline: ModelReports,
    pub udc: ModelReports,
}

/// Everything stage 4 writes.
#[derive(Debug, Clone)]
pub struct RunReports {
    pub bundle: MetricsBundle,
    pub codebook: CodebookReport,
}

/// What one invocation produced or reloaded. Training logs are `Some` only
/// for work done in this invocation; resumed stages leave them `None` (their
/// JSON files are still in `logs/`). Checksums cover whatever checkpoint
/// files exist when the invocation returns.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub root: PathBuf,
    pub target: Stage,
    pub corpus: CorpusSummary,
    pub stage1_checksum: Option<String>,
    pub drl_checksum: Option<String>,
    pub finetune_checksum: Option<String>,
    pub stage1_log: Option<TrainLog>,
    pub drl_log: Option<DrlTrainLog>,
    pub finetune_log: Option<TrainLog>,
    pub reports: Option<RunReports>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| UdcError::io(parent.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| UdcError::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| UdcError::Config(format!("not serializable to JSON: {}", e)))?;
    write_text(path, &format!("{}\n", body))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| UdcError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| UdcError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Load the corpus and text embeddings, generating and saving them on first
/// use in synthetic mode, then split patients. Also checks the corpus fits
/// the configured `max_len`.
fn ensure_data(cfg: &RunConfig, paths: &RunPaths, task: Task) -> Result<World> {
    let (dataset, text) = if let Some(dir) = &cfg.data.dir {
        let dataset = load_dataset_dir(dir)?;
        let text_dir = cfg.data.text_dir.as_ref().expect("validated: file-backed data carries text_dir");
        let text = load_text_embeddings(text_dir, &dataset.vocab)?;
        (dataset, text)
    } else if paths.data_dir.join("patients.jsonl").exists() {
        let dataset = load_dataset_dir(&paths.data_dir)?;
        let text = load_text_embeddings(&paths.text_dir, &dataset.vocab)?;
        (dataset, text)
    } else {
        let (dataset, latents) = generate_synthetic(&cfg.data.synthetic)?;
        let text = synthesize_text_embeddings(&latents, cfg.data.text_noise, cfg.seed, cfg.data.text_dim)?;
        save_dataset_dir(&paths.data_dir, &dataset)?;
        save_text_embeddings(&paths.text_dir, &text)?;
        (dataset, text)
    };

    let longest = dataset.records.iter().map(|r| r.visits.len()).max().unwrap_or(0);
    let needed = longest.saturating_sub(1) + usize::from(task == Task::MedRec);
    if needed > cfg.model.max_len {
        return Err(UdcError::Config(format!(
            "max_len {} cannot hold a {}-visit record{}; raise model.max_len to at least {}",
            cfg.model.max_len,
            longest,
            if task == Task::MedRec { " plus the current visit" } else { "" },
            needed
        )));
    }

    let split = (cfg.data.split[0], cfg.data.split[1], cfg.data.split[2]);
    let (train, val, test) = split_patients(&dataset.records, split, cfg.seed)?;
    Ok(World { dataset, text, train, val, test })
}

fn build_backbone(cfg: &RunConfig, world: &World) -> Result<PcmModel> {
    let m = &cfg.model;
    let mut rng = sub_rng(cfg.seed, "pipeline/backbone");
    PcmModel::new(&world.dataset.vocab, m.dim, m.heads, m.blocks, m.max_len, &mut rng)
}

fn load_params_from(path: &Path, model: &PcmModel) -> Result<()> {
    let entries = load_checkpoint(path)?;
    entries_to_params(path, &entries, &model.params())
}

fn corpus_summary(world: &World) -> CorpusSummary {
    CorpusSummary {
        patients: world.dataset.records.len(),
        diseases: world.dataset.vocab.diagnosis.size,
        procedures: world.dataset.vocab.procedure.size,
        medications: world.dataset.vocab.medication.size,
        train_patients: world.train.len(),
        val_patients: world.val.len(),
        test_patients: world.test.len(),
    }
}

/// Per-prefix evaluation samples over `records`, scoring with `model` and
/// either its own disease table or a fixed substituted one.
fn eval_samples(
    model: &PcmModel,
    substituted: Option<&Tensor>,
    records: &[PatientRecord],
    task: Task,
) -> Result<Vec<EvalSample>> {
    let mut out = Vec::new();
    for rec in records {
        for t in 1..rec.visits.len() {
            let history = &rec.visits[..t];
            let truth = extract_targets(rec, t, task)?;
            let extra = match task {
                Task::DiagPred => None,
                Task::MedRec => Some((&rec.visits[t].d[..], &rec.visits[t].p[..])),
            };
            let source = match substituted {
                Some(table) => DiseaseSource::Fixed(table),
                None => DiseaseSource::Learned,
            };
            let scores = model.predict(history, task, extra, source)?.probabilities;
            let mut context: Vec<usize> = history.iter().flat_map(|v| v.d.iter().copied()).collect();
            context.sort_unstable();
            context.dedup();
            out.push(EvalSample { scores, truth, context_diseases: context });
        }
    }
    Ok(out)
}

fn model_reports(samples: &[EvalSample], counts: &[usize], task: Task, eval_cfg: &EvalConfig) -> Result<ModelReports> {
    Ok(ModelReports {
        metrics: evaluate(samples, task, &eval_cfg.ks)?,
        groups: group_analysis(samples, counts, task, eval_cfg.k_primary)?,
    })
}

/// Run stages `Data..=target` rooted at `paths`. A stage whose artifact
/// already exists is loaded as-is. A missing artifact is built when the
/// stage is at or past `ensure_from`, and reported as a missing dependency
/// otherwise; data is exempt and always prepared.
pub fn run_stages_at(
    config: &RunConfig,
    paths: &RunPaths,
    target: Stage,
    ensure_from: Stage,
) -> Result<PipelineOutcome> {
    let mut cfg = config.resolved()?;
    cfg.out_dir = Some(paths.root.clone());
    let task = cfg.task()?;

    // Checkpoint parents may differ when a grid repoints stage 1 at a
    // shared sibling run.
    for file in [&paths.stage1, &paths.drl, &paths.finetune] {
        let parent = file.parent().expect("checkpoint files live under a run root");
        fs::create_dir_all(parent).map_err(|e| UdcError::io(parent.display().to_string(), e))?;
    }
    let rendered = cfg.to_toml()?;
    match fs::read_to_string(&paths.config_file) {
        Ok(prior) if prior != rendered => {
            return Err(UdcError::Config(format!(
                "run directory {} was produced by a different configuration; use a fresh directory or the original config",
                paths.root.display()
            )));
        }
        Ok(_) => {}
        Err(_) => write_text(&paths.config_file, &rendered)?,
    }

    let world = ensure_data(&cfg, paths, task)?;
    let corpus = corpus_summary(&world);
    let mut outcome = PipelineOutcome {
        root: paths.root.clone(),
        target,
        corpus,
        stage1_checksum: None,
        drl_checksum: None,
        finetune_checksum: None,
        stage1_log: None,
        drl_log: None,
        finetune_log: None,
        reports: None,
    };
    if target == Stage::Data {
        return Ok(outcome);
    }

    // Stage 1: collaborative backbone. The `backbone` model keeps the
    // pretrained parameters for the rest of the run; stage 3 tunes a copy.
    let backbone = build_backbone(&cfg, &world)?;
    if paths.stage1.exists() {
        load_params_from(&paths.stage1, &backbone)?;
    } else if ensure_from <= Stage::Pretrain {
        let lr = cfg.model.lr.expect("resolved");
        let settings = TrainSettings {
            epochs: cfg.model.epochs,
            batch: cfg.model.batch,
            lr,
            weight_decay: cfg.model.weight_decay,
            seed: cfg.seed,
        };
        let log = pretrain(&backbone, &world.train, &world.val, task, &settings)?;
        save_checkpoint(&paths.stage1, &params_to_entries(&backbone.params()))?;
        write_json(&paths.stage1_log, &log)?;
        outcome.stage1_log = Some(log);
    } else {
        return Err(UdcError::MissingStage { stage: target.label(), path: paths.stage1.clone() });
    }
    outcome.stage1_checksum = Some(file_checksum(&paths.stage1)?);
    if target == Stage::Pretrain {
        return Ok(outcome);
    }

    // Stage 2: discrete alignment over the common diseases of the training
    // split, against the frozen stage-1 tables and the text tables.
    let n_diseases = world.dataset.vocab.diagnosis.size;
    let split = split_rarity(&world.train, n_diseases, cfg.drl.eta)?;
    let e_d = backbone.emb.e_d.value();
    let e_p = backbone.emb.e_p.value();
    let e_m = backbone.emb.e_m.value();
    let data = DrlData {
        e_d: &e_d,
        e_p: &e_p,
        e_m: &e_m,
        text: &world.text,
        records: &world.train,
        split: &split,
        task,
    };
    let mut drl = DrlModel::new(cfg.model.dim, world.text.dim, cfg.drl.clone())?;
    if paths.drl.exists() {
        load_drl(&paths.drl, &mut drl)?;
    } else if ensure_from <= Stage::TrainDrl {
        let log = train_drl(&mut drl, &data)?;
        save_drl(&paths.drl, &drl)?;
        write_json(&paths.drl_log, &log)?;
        outcome.drl_log = Some(log);
    } else {
        return Err(UdcError::MissingStage { stage: target.label(), path: paths.drl.clone() });
    }
    outcome.drl_checksum = Some(file_checksum(&paths.drl)?);
    if target == Stage::TrainDrl {
        return Ok(outcome);
    }

    // Stage 3: substitute every disease embedding through the code space
    // (text route for rare diseases) and tune the rest of the backbone
    // against the fixed table. `no_finetune` keeps the parameters untouched.
    let substituted = substituted_table(&drl, &data)?;
    let tuned = build_backbone(&cfg, &world)?;
    if paths.finetune.exists() {
        load_params_from(&paths.finetune, &tuned)?;
    } else if ensure_from <= Stage::Finetune {
        load_params_from(&paths.stage1, &tuned)?;
        let settings = TrainSettings {
            epochs: if cfg.no_finetune { 0 } else { cfg.model.finetune_epochs.expect("resolved") },
            batch: cfg.model.batch,
            lr: cfg.model.finetune_lr.expect("resolved"),
            weight_decay: cfg.model.weight_decay,
            seed: cfg.seed,
        };
        let log = finetune(&tuned, &substituted, &world.train, &world.val, task, &settings)?;
        save_checkpoint(&paths.finetune, &params_to_entries(&tuned.params()))?;
        write_json(&paths.finetune_log, &log)?;
        outcome.finetune_log = Some(log);
    } else {
        return Err(UdcError::MissingStage { stage: target.label(), path: paths.finetune.clone() });
    }
    outcome.finetune_checksum = Some(file_checksum(&paths.finetune)?);
    if target == Stage::Finetune {
        return Ok(outcome);
    }

    // Stage 4: evaluate the substituted model and the stage-1 baseline on
    // the same test samples, plus codebook health over common diseases.
    let have_reports = [
        paths.metrics_json(),
        paths.metrics_csv_path(),
        paths.groups_csv_path(),
        paths.codebook_json(),
    ]
    .iter()
    .all(|p| p.exists());
    let reports = if have_reports {
        RunReports { bundle: read_json(&paths.metrics_json())?, codebook: read_json(&paths.codebook_json())? }
    } else {
        let counts = disease_occurrences(&world.train, n_diseases);
        let baseline_samples = eval_samples(&backbone, None, &world.test, task)?;
        let udc_samples = eval_samples(&tuned, Some(&substituted), &world.test, task)?;
        let bundle = MetricsBundle {
            task,
            seed: cfg.seed,
            baseline: model_reports(&baseline_samples, &counts, task, &cfg.eval)?,
            udc: model_reports(&udc_samples, &counts, task, &cfg.eval)?,
        };
        let codebook = codebook_diagnostics(&drl, &data, &split.common)?;
        write_json(&paths.metrics_json(), &bundle)?;
        write_json(&paths.codebook_json(), &codebook)?;
        write_text(&paths.metrics_csv_path(), &metrics_csv(&bundle.udc.metrics))?;
        write_text(&paths.groups_csv_path(), &group_csv(&bundle.udc.groups))?;
        RunReports { bundle, codebook }
    };
    outcome.reports = Some(reports);
    Ok(outcome)
}

/// Everything, end to end: data, three training stages, evaluation. Missing
/// artifacts are built; existing ones are reused untouched.
pub fn run_pipeline(config: &RunConfig, root: &Path) -> Result<PipelineOutcome> {
    run_stages_at(config, &RunPaths::new(root), Stage::Eval, Stage::Data)
}

/// One stage on an existing run directory: the stage's own artifact is
/// built (or reused), data is prepared as needed, and any other missing
/// upstream checkpoint is an error naming the file.
pub fn run_stage(config: &RunConfig, root: &Path, target: Stage) -> Result<PipelineOutcome> {
    run_stages_at(config, &RunPaths::new(root), target, target)
}

/// The six ablation variants in report order.
pub const ABLATION_VARIANTS: [&str; 6] = ["UDC", "NCO", "NT", "NM", "NS", "NCD"];

fn variant_flags(name: &str) -> crate::drl::AblationFlags {
    let mut flags = crate::drl::AblationFlags::default();
    match name {
        "UDC" => {}
        "NCO" => flags.nco = true,
        "NT" => flags.nt = true,
        "NM" => flags.nm = true,
        "NS" => flags.ns = true,
        "NCD" => flags.ncd = true,
        other => unreachable!("unknown ablation variant {}", other),
    }
    flags
}

/// One ablation row: either reports or an error message.
#[derive(Debug, Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_values: Option<GroupReport>,
    /// Stage-2 trajectory, for flag-contract checks (NT keeps the
    /// contrastive parts at zero; NCO never calibrates).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drl_log: Option<DrlTrainLog>,
    pub stage1_checksum: String,
}

/// Ablation grid over one shared corpus and stage-1 checkpoint.
#[derive(Debug)]
pub struct AblationOutcome {
    pub root: PathBuf,
    pub stage1_checksum: String,
    pub rows: Vec<VariantOutcome>,
    pub csv_path: PathBuf,
}

fn metric_columns(report: Option<&MetricsReport>, k_primary: usize) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    match report {
        None => ",,,,,".into(),
        Some(m) => format!(
            "{},{},{},{},{},{}",
            fmt(m.acc_at_k.get(&k_primary).copied()),
            fmt(m.pres_at_k.get(&k_primary).copied()),
            fmt(m.auroc),
            fmt(m.auprc),
            m.jaccard,
            m.f1
        ),
    }
}

/// Run all six variants against one shared corpus and stage-1 checkpoint,
/// with identical seeds, and write a variant-by-metric CSV. A failing
/// variant is marked in its row; the others still run.
pub fn run_ablation(config: &RunConfig, root: &Path) -> Result<AblationOutcome> {
    let cfg = config.resolved()?;
    let base_paths = RunPaths::new(&root.join("base"));
    let base = run_stages_at(&cfg, &base_paths, Stage::Pretrain, Stage::Data)?;
    let stage1_checksum = base.stage1_checksum.clone().expect("stage 1 just ran");

    let mut rows = Vec::new();
    for name in ABLATION_VARIANTS {
        let mut vcfg = cfg.clone();
        vcfg.drl.flags = variant_flags(name);
        vcfg.out_dir = None;
        let mut vpaths = RunPaths::new(&root.join(name.to_lowercase()));
        vpaths.data_dir = base_paths.data_dir.clone();
        vpaths.text_dir = base_paths.text_dir.clone();
        vpaths.stage1 = base_paths.stage1.clone();
        let row = match run_stages_at(&vcfg, &vpaths, Stage::Eval, Stage::TrainDrl) {
            Ok(outcome) => {
                let reports = outcome.reports.expect("eval target fills reports");
                let drl_log = match outcome.drl_log {
                    Some(log) => Some(log),
                    None if vpaths.drl_log.exists() => Some(read_json(&vpaths.drl_log)?),
                    None => None,
                };
                VariantOutcome {
                    variant: name.into(),
                    failed: None,
                    metrics: Some(reports.bundle.udc.metrics),
                    group_values: Some(reports.bundle.udc.groups),
                    drl_log,
                    stage1_checksum: outcome.stage1_checksum.expect("stage 1 present"),
                }
            }
            Err(e) => VariantOutcome {
                variant: name.into(),
                failed: Some(e.to_string()),
                metrics: None,
                group_values: None,
                drl_log: None,
                stage1_checksum: stage1_checksum.clone(),
            },
        };
        rows.push(row);
    }

    let k = cfg.eval.k_primary;
    let mut csv = format!("variant,status,acc_at_{},pres_at_{},auroc,auprc,jaccard,f1\n", k, k);
    for row in &rows {
        let status = if row.failed.is_some() { "failed" } else { "ok" };
        csv.push_str(&format!("{},{},{}\n", row.variant, status, metric_columns(row.metrics.as_ref(), k)));
    }
    let csv_path = root.join("ablation.csv");
    write_text(&csv_path, &csv)?;
    write_json(&root.join("ablation.json"), &rows)?;
    Ok(AblationOutcome { root: root.to_path_buf(), stage1_checksum, rows, csv_path })
}

/// Hyperparameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    K,
    CodebookSize,
    Alpha,
    Eta,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(SweepParam::K),
            "codebook_size" | "codebook" => Ok(SweepParam::CodebookSize),
            "alpha" => Ok(SweepParam::Alpha),
            "eta" => Ok(SweepParam::Eta),
            other => Err(UdcError::Config(format!(
                "unknown sweep parameter '{}'; expected k, codebook_size, alpha, or eta",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::CodebookSize => "codebook_size",
            SweepParam::Alpha => "alpha",
            SweepParam::Eta => "eta",
        }
    }
}

/// One sweep value's result. `status` is `ok`, `skipped` (invalid value), or
/// `failed` (run error); `note` carries the reason for the latter two.
#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub root: PathBuf,
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
    /// How many full training runs the sweep cost (K re-evaluates one run).
    pub trained_runs: usize,
    pub csv_path: PathBuf,
}

fn sweep_csv(rows: &[SweepRow], param: SweepParam, k_primary: usize) -> String {
    let mut out = format!(
        "{},status,acc_at_{},pres_at_{},auroc,auprc,jaccard,f1\n",
        param.name(),
        k_primary,
        k_primary
    );
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.value, row.status, metric_columns(row.metrics.as_ref(), k_primary)));
    }
    out
}

/// Sweep one hyperparameter. The K sweep trains once and re-reads the
/// cutoffs from that single evaluation; the other parameters retrain stages
/// 2–3 per value against a shared corpus and stage-1 checkpoint. Invalid
/// values are skipped with a warning; failing runs mark their row.
pub fn run_sweep(config: &RunConfig, root: &Path, param: SweepParam, values: &[String]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(UdcError::Config("sweep needs at least one value".into()));
    }
    let cfg = config.resolved()?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut trained_runs = 0usize;

    if param == SweepParam::K {
        let parsed: Vec<Option<usize>> = values
            .iter()
            .map(|v| match v.parse::<usize>() {
                Ok(k) if k > 0 => Some(k),
                _ => {
                    warnings.push(format!("skipping k '{}': not a positive integer", v));
                    None
                }
            })
            .collect();
        let valid: Vec<usize> = parsed.iter().flatten().copied().collect();
        let metrics = if valid.is_empty() {
            None
        } else {
            let mut vcfg = cfg.clone();
            vcfg.out_dir = None;
            let mut ks = valid.clone();
            ks.push(vcfg.eval.k_primary);
            ks.sort_unstable();
            ks.dedup();
            vcfg.eval.ks = ks;
            let outcome = run_pipeline(&vcfg, &root.join("run"))?;
            trained_runs = 1;
            Some(outcome.reports.expect("eval target fills reports").bundle.udc.metrics)
        };
        for (text, k) in values.iter().zip(parsed) {
            let row = match (k, &metrics) {
                (Some(k), Some(metrics)) => {
                    // Per-cutoff view: the row keeps the shared curve/set
                    // metrics and narrows the top-K pair to this K.
                    let mut narrowed = metrics.clone();
                    narrowed.acc_at_k =
                        metrics.acc_at_k.iter().filter(|(&kk, _)| kk == k).map(|(&kk, &v)| (kk, v)).collect();
                    narrowed.pres_at_k =
                        metrics.pres_at_k.iter().filter(|(&kk, _)| kk == k).map(|(&kk, &v)| (kk, v)).collect();
                    SweepRow { value: text.clone(), status: "ok".into(), note: None, metrics: Some(narrowed) }
                }
                _ => SweepRow {
                    value: text.clone(),
                    status: "skipped".into(),
                    note: Some("not a positive integer".into()),
                    metrics: None,
                },
            };
            rows.push(row);
        }
        let csv = k_sweep_csv(&rows);
        let csv_path = root.join("sweep.csv");
        write_text(&csv_path, &csv)?;
        write_json(&root.join("sweep.json"), &rows)?;
        return Ok(SweepOutcome { root: root.to_path_buf(), parameter: param, rows, warnings, trained_runs, csv_path });
    }

    let base_paths = RunPaths::new(&root.join("base"));
    run_stages_at(&cfg, &base_paths, Stage::Pretrain, Stage::Data)?;
    for v in values {
        let mut vcfg = cfg.clone();
        vcfg.out_dir = None;
        let parsed: std::result::Result<(), String> = match param {
            SweepParam::CodebookSize => match v.parse::<usize>() {
                Ok(c) if c > 0 => {
                    vcfg.drl.codes_per_level = c;
                    Ok(())
                }
                _ => Err("not a positive integer".into()),
            },
            SweepParam::Alpha => match v.parse::<f64>() {
                Ok(a) if a.is_finite() && a > 0.0 => {
                    vcfg.drl.alpha = a;
                    Ok(())
                }
                _ => Err("not a positive number".into()),
            },
            SweepParam::Eta => match v.parse::<f64>() {
                Ok(e) if e > 0.0 && e < 1.0 => {
                    vcfg.drl.eta = e;
                    Ok(())
                }
                _ => Err("not in (0,1)".into()),
            },
            SweepParam::K => unreachable!("handled above"),
        };
        if let Err(reason) = parsed {
            warnings.push(format!("skipping {} '{}': {}", param.name(), v, reason));
            rows.push(SweepRow { value: v.clone(), status: "skipped".into(), note: Some(reason), metrics: None });
            continue;
        }
        let mut vpaths = RunPaths::new(&root.join(format!("{}_{}", param.name(), v)));
        vpaths.data_dir = base_paths.data_dir.clone();
        vpaths.text_dir = base_paths.text_dir.clone();
        vpaths.stage1 = base_paths.stage1.clone();
        match run_stages_at(&vcfg, &vpaths, Stage::Eval, Stage::TrainDrl) {
            Ok(outcome) => {
                trained_runs += 1;
                let metrics = outcome.reports.expect("eval target fills reports").bundle.udc.metrics;
                rows.push(SweepRow { value: v.clone(), status: "ok".into(), note: None, metrics: Some(metrics) });
            }
            Err(e) => {
                rows.push(SweepRow { value: v.clone(), status: "failed".into(), note: Some(e.to_string()), metrics: None });
            }
        }
    }
    let csv = sweep_csv(&rows, param, cfg.eval.k_primary);
    let csv_path = root.join("sweep.csv");
    write_text(&csv_path, &csv)?;
    write_json(&root.join("sweep.json"), &rows)?;
    Ok(SweepOutcome { root: root.to_path_buf(), parameter: param, rows, warnings, trained_runs, csv_path })
}

fn k_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,status,acc_at_k,pres_at_k\n");
    for row in rows {
        let (acc, pres) = match &row.metrics {
            Some(m) => {
                let one = |map: &std::collections::BTreeMap<usize, f64>| {
                    map.values().next().map(|v| v.to_string()).unwrap_or_default()
                };
                (one(&m.acc_at_k), one(&m.pres_at_k))
            }
            None => (String::new(), String::new()),
        };
        out.push_str(&format!("{},{},{},{}\n", row.value, row.status, acc, pres));
    }
    out
}

/// Which disease table to dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    /// Stage-1 collaborative embeddings, as trained.
    Original,
    /// The table stage 3 trains and serves from: codebook round trip for
    /// common diseases, text route for rare ones.
    Substituted,
    /// Raw code sums straight off the quantizer, before calibration.
    Quantized,
}

impl DumpKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(DumpKind::Original),
            "substituted" => Ok(DumpKind::Substituted),
            "quantized" => Ok(DumpKind::Quantized),
            other => Err(UdcError::Config(format!(
                "unknown dump table '{}'; expected original, substituted, or quantized",
                other
            ))),
        }
    }

    fn file_name(&self) -> &'static str {
        match self {
            DumpKind::Original => "embeddings_original.csv",
            DumpKind::Substituted => "embeddings_substituted.csv",
            DumpKind::Quantized => "embeddings_quantized.csv",
        }
    }
}

/// Write one row per disease (id, rarity class, vector) from an existing
/// run directory; re-dumping is byte-identical. Stage-1 parameters are
/// required; the substituted and quantized tables additionally need the
/// alignment checkpoint.
pub fn dump_embeddings(config: &RunConfig, root: &Path, kind: DumpKind) -> Result<PathBuf> {
    let cfg = config.resolved()?;
    let task = cfg.task()?;
    let paths = RunPaths::new(root);
    let world = ensure_data(&cfg, &paths, task)?;
    if !paths.stage1.exists() {
        return Err(UdcError::MissingStage { stage: "dump", path: paths.stage1.clone() });
    }
    let backbone = build_backbone(&cfg, &world)?;
    load_params_from(&paths.stage1, &backbone)?;

    let n_diseases = world.dataset.vocab.diagnosis.size;
    let split = split_rarity(&world.train, n_diseases, cfg.drl.eta)?;
    let e_d = backbone.emb.e_d.value();

    let table: Tensor = match kind {
        DumpKind::Original => e_d.clone(),
        DumpKind::Substituted | DumpKind::Quantized => {
            if !paths.drl.exists() {
                return Err(UdcError::MissingStage { stage: "dump", path: paths.drl.clone() });
            }
            let e_p = backbone.emb.e_p.value();
            let e_m = backbone.emb.e_m.value();
            let data = DrlData {
                e_d: &e_d,
                e_p: &e_p,
                e_m: &e_m,
                text: &world.text,
                records: &world.train,
                split: &split,
                task,
            };
            let mut drl = DrlModel::new(cfg.model.dim, world.text.dim, cfg.drl.clone())?;
            load_drl(&paths.drl, &mut drl)?;
            match kind {
                DumpKind::Substituted => substituted_table(&drl, &data)?,
                DumpKind::Quantized => {
                    let text_d = world.text.table(EntityClass::Diagnosis);
                    let mut out = Tensor::zeros(n_diseases, cfg.drl.dim);
                    for d in 0..n_diseases {
                        let mut g = crate::numerics::graph::Graph::new();
                        let row = if split.is_common(d) {
                            g.leaf_row(e_d.row(d))
                        } else {
                            g.leaf_row(text_d.row(d))
                        };
                        let enc = if split.is_common(d) {
                            drl.phi_co.forward(&mut g, row)?
                        } else {
                            drl.phi_te.forward(&mut g, row)?
                        };
                        let q = quantize_residual(g.data(enc), &drl.codebook)?;
                        out.set_row(d, &q.z);
                    }
                    out
                }
                DumpKind::Original => unreachable!(),
            }
        }
    };

    let mut csv = String::from("id,rarity");
    for j in 0..table.cols() {
        csv.push_str(&format!(",v{}", j));
    }
    csv.push('\n');
    for d in 0..n_diseases {
        csv.push_str(&format!("{},{}", d, if split.is_common(d) { "common" } else { "rare" }));
        for &x in table.row(d) {
            csv.push_str(&format!(",{}", x));
        }
        csv.push('\n');
    }
    let path = paths.reports.join(kind.file_name());
    write_text(&path, &csv)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.task = "diag_pred".into();
        cfg.seed = seed;
        cfg.data.synthetic.n_patients = 48;
        cfg.data.synthetic.n_diseases = 12;
        cfg.data.synthetic.n_procedures = 8;
        cfg.data.synthetic.n_medications = 10;
        cfg.data.synthetic.latent_dim = 4;
        cfg.data.synthetic.max_visits = 4;
        cfg.data.text_dim = 8;
        cfg.data.text_noise = 0.1;
        cfg.model.dim = 8;
        cfg.model.heads = 2;
        cfg.model.blocks = 1;
        cfg.model.max_len = 8;
        cfg.model.epochs = 2;
        cfg.model.batch = 8;
        cfg.model.finetune_epochs = Some(1);
        cfg.drl.dim = 8;
        cfg.drl.levels = 2;
        cfg.drl.codes_per_level = 8;
        cfg.drl.epochs = 3;
        cfg.drl.batch = 4;
        cfg.drl.heads = 2;
        cfg.drl.eta = 0.3;
        cfg.eval.ks = vec![1, 3, 5];
        cfg.eval.k_primary = 3;
        cfg
    }

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn empty_toml_yields_the_paper_defaults() {
        let cfg = RunConfig::from_toml_str("").expect("empty config");
        assert_eq!(cfg.task, "diag_pred");
        assert_eq!(cfg.model.dim, 128);
        assert_eq!(cfg.model.batch, 16);
        assert_eq!(cfg.drl.levels, 4);
        assert_eq!(cfg.drl.codes_per_level, 64);
        assert_eq!(cfg.drl.alpha, 0.25);
        assert_eq!(cfg.drl.eta, 0.2);
        assert_eq!(cfg.eval.ks, vec![5, 10, 20, 40]);
        assert_eq!(cfg.eval.k_primary, 20);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(RunConfig::from_toml_str("banana = 1").is_err());
        assert!(RunConfig::from_toml_str("[model]\nbanana = 1").is_err());
        assert!(RunConfig::from_toml_str("[data.synthetic]\nbanana = 1").is_err());
        assert!(RunConfig::from_toml_str("[drl]\nbanana = 1").is_err());
    }

    #[test]
    fn task_aliases_and_learning_rate_defaults() {
        let diag = RunConfig::from_toml_str("task = \"diag\"").unwrap().resolved().unwrap();
        assert_eq!(diag.task, "diag_pred");
        assert_eq!(diag.model.lr, Some(1e-3));
        let med = RunConfig::from_toml_str("task = \"med\"").unwrap().resolved().unwrap();
        assert_eq!(med.task, "med_rec");
        assert_eq!(med.model.lr, Some(2e-4));
        assert!(RunConfig::from_toml_str("task = \"surgery\"").unwrap().resolved().is_err());
    }

    #[test]
    fn resolution_fills_optionals_and_propagates_the_seed() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.data.synthetic.seed = 1;
        cfg.drl.seed = 2;
        let r = cfg.resolved().unwrap();
        assert_eq!(r.data.synthetic.seed, 99);
        assert_eq!(r.drl.seed, 99);
        assert_eq!(r.model.finetune_epochs, Some(r.model.epochs));
        assert_eq!(r.model.finetune_lr, r.model.lr);
        assert_eq!(r.data.text_dim, r.model.dim);
    }

    #[test]
    fn desk_preset_keeps_the_pinned_hyperparameters() {
        let cfg = RunConfig::desk().resolved().unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.data.synthetic.n_patients, 2000);
        assert_eq!(cfg.data.synthetic.n_diseases, 200);
        assert_eq!(cfg.drl.levels, 4);
        assert_eq!(cfg.drl.codes_per_level, 64);
        assert_eq!(cfg.drl.alpha, 0.25);
        assert_eq!(cfg.drl.eta, 0.2);
        assert_eq!(cfg.eval.k_primary, 20);
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let mut bad_split = tiny_config(0);
        bad_split.data.split = [0.5, 0.5, 0.5];
        assert!(matches!(bad_split.resolved(), Err(UdcError::Config(_))));

        let mut text_too_narrow = tiny_config(0);
        text_too_narrow.data.text_dim = 2; // latent_dim is 4
        assert!(text_too_narrow.resolved().is_err());

        let mut no_text_dir = tiny_config(0);
        no_text_dir.data.dir = Some(PathBuf::from("somewhere"));
        assert!(no_text_dir.resolved().is_err());

        let mut no_ks = tiny_config(0);
        no_ks.eval.ks.clear();
        assert!(no_ks.resolved().is_err());

        let mut indivisible = tiny_config(0);
        indivisible.model.heads = 3;
        assert!(indivisible.resolved().is_err());
    }

    #[test]
    fn resolved_config_toml_round_trips() {
        let cfg = tiny_config(7).resolved().unwrap();
        let rendered = cfg.to_toml().unwrap();
        let again = RunConfig::from_toml_str(&rendered).unwrap().resolved().unwrap();
        assert_eq!(rendered, again.to_toml().unwrap());
    }

    #[test]
    fn out_dir_resolution_prefers_cli_then_config_then_env() {
        let mut cfg = RunConfig::default();
        let cli = PathBuf::from("/explicit");
        let env = PathBuf::from("/envroot");
        assert_eq!(resolve_out_dir(&cfg, Some(&cli), Some(&env), "run"), cli);
        cfg.out_dir = Some(PathBuf::from("/fromcfg"));
        assert_eq!(resolve_out_dir(&cfg, None, Some(&env), "run"), PathBuf::from("/fromcfg"));
        cfg.out_dir = None;
        assert_eq!(
            resolve_out_dir(&cfg, None, Some(&env), "run"),
            PathBuf::from("/envroot/run-diag_pred-seed0")
        );
        assert_eq!(resolve_out_dir(&cfg, None, None, "run"), PathBuf::from("runs/run-diag_pred-seed0"));
    }

    #[test]
    fn pipeline_writes_reports_checkpoints_and_provenance() {
        let dir = tmp();
        let outcome = run_pipeline(&tiny_config(3), dir.path()).expect("pipeline");
        let paths = RunPaths::new(dir.path());
        for p in [&paths.config_file, &paths.stage1, &paths.drl, &paths.finetune] {
            assert!(p.exists(), "missing {}", p.display());
        }
        for p in [
            paths.metrics_json(),
            paths.metrics_csv_path(),
            paths.groups_csv_path(),
            paths.codebook_json(),
        ] {
            assert!(p.exists(), "missing report {}", p.display());
        }
        let reports = outcome.reports.expect("eval reports");
        assert!(reports.bundle.udc.metrics.samples > 0);
        assert_eq!(reports.bundle.task, Task::DiagPred);
        assert!(outcome.stage1_log.is_some() && outcome.drl_log.is_some() && outcome.finetune_log.is_some());
        // Provenance is the exact resolved config.
        let prov = fs::read_to_string(&paths.config_file).unwrap();
        let mut expect = tiny_config(3).resolved().unwrap();
        expect.out_dir = Some(dir.path().to_path_buf());
        assert_eq!(prov, expect.to_toml().unwrap());
    }

    #[test]
    fn two_runs_with_one_seed_emit_identical_metrics() {
        let (a, b) = (tmp(), tmp());
        run_pipeline(&tiny_config(11), a.path()).expect("first run");
        run_pipeline(&tiny_config(11), b.path()).expect("second run");
        let read = |d: &Path| fs::read_to_string(RunPaths::new(d).metrics_json()).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn resume_leaves_finished_checkpoints_untouched() {
        let dir = tmp();
        let cfg = tiny_config(5);
        let first = run_pipeline(&cfg, dir.path()).expect("first run");
        let paths = RunPaths::new(dir.path());
        let metrics_before = fs::read_to_string(paths.metrics_json()).unwrap();
        fs::remove_file(&paths.finetune).unwrap();
        fs::remove_dir_all(&paths.reports).unwrap();
        let second = run_pipeline(&cfg, dir.path()).expect("resumed run");
        assert_eq!(first.stage1_checksum, second.stage1_checksum);
        assert_eq!(first.drl_checksum, second.drl_checksum);
        // Stages 1–2 were reloaded, not retrained.
        assert!(second.stage1_log.is_none() && second.drl_log.is_none());
        assert!(second.finetune_log.is_some());
        // The rebuilt stage 3 + evaluation land on the same numbers.
        assert_eq!(metrics_before, fs::read_to_string(paths.metrics_json()).unwrap());
    }

    #[test]
    fn missing_dependency_names_the_checkpoint() {
        let dir = tmp();
        let err = match run_stage(&tiny_config(0), dir.path(), Stage::TrainDrl) {
            Ok(_) => panic!("train-drl must fail without a stage-1 checkpoint"),
            Err(e) => e,
        };
        match &err {
            UdcError::MissingStage { stage, path } => {
                assert_eq!(*stage, "train-drl");
                assert!(path.ends_with("checkpoints/stage1.ck"), "got {}", path.display());
            }
            other => panic!("expected MissingStage, got {}", other),
        }
        assert_eq!(err.kind(), "missing_stage");
    }

    #[test]
    fn stages_chain_one_subcommand_at_a_time() {
        let dir = tmp();
        let cfg = tiny_config(8);
        run_stage(&cfg, dir.path(), Stage::Data).expect("gen-data");
        run_stage(&cfg, dir.path(), Stage::Pretrain).expect("pretrain");
        run_stage(&cfg, dir.path(), Stage::TrainDrl).expect("train-drl");
        run_stage(&cfg, dir.path(), Stage::Finetune).expect("finetune");
        let outcome = run_stage(&cfg, dir.path(), Stage::Eval).expect("eval");
        assert!(outcome.reports.is_some());
    }

    #[test]
    fn config_mismatch_on_an_existing_run_directory_is_an_error() {
        let dir = tmp();
        let cfg = tiny_config(2);
        run_stage(&cfg, dir.path(), Stage::Data).expect("gen-data");
        let mut other = cfg.clone();
        other.seed = 3;
        let err = run_stage(&other, dir.path(), Stage::Data).unwrap_err();
        assert!(err.to_string().contains("different configuration"), "got: {}", err);
    }

    #[test]
    fn no_finetune_keeps_every_backbone_parameter() {
        let dir = tmp();
        let mut cfg = tiny_config(4);
        cfg.no_finetune = true;
        let outcome = run_pipeline(&cfg, dir.path()).expect("pipeline");
        assert!(outcome.reports.is_some());
        let paths = RunPaths::new(dir.path());
        let stage1 = load_checkpoint(&paths.stage1).unwrap();
        let tuned = load_checkpoint(&paths.finetune).unwrap();
        assert_eq!(stage1.len(), tuned.len());
        for (name, t) in &stage1 {
            assert_eq!(t.data(), tuned[name].data(), "parameter {} moved without fine-tuning", name);
        }
    }

    #[test]
    fn ablation_grid_covers_six_variants_over_one_backbone() {
        let dir = tmp();
        let outcome = run_ablation(&tiny_config(6), dir.path()).expect("ablation");
        assert_eq!(outcome.rows.len(), 6);
        let names: Vec<&str> = outcome.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ABLATION_VARIANTS.to_vec());
        for row in &outcome.rows {
            assert!(row.failed.is_none(), "variant {} failed: {:?}", row.variant, row.failed);
            assert_eq!(row.stage1_checksum, outcome.stage1_checksum, "variant {} retrained stage 1", row.variant);
        }
        let nt = &outcome.rows[2];
        let log = nt.drl_log.as_ref().expect("NT trained in this invocation");
        for epoch in &log.epochs {
            let con = epoch.con_intra_co + epoch.con_inter_co + epoch.con_intra_te + epoch.con_inter_te;
            assert_eq!(con, 0.0, "NT epoch {} has a contrastive term", epoch.epoch);
        }
        let nco = &outcome.rows[1];
        assert_eq!(nco.drl_log.as_ref().unwrap().calibrations, 0, "NCO must never calibrate");
        let csv = fs::read_to_string(&outcome.csv_path).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("variant,status,acc_at_3"));
    }

    #[test]
    fn k_sweep_trains_once_and_reports_per_cutoff() {
        let dir = tmp();
        let values = vec!["5".to_string(), "3".to_string(), "banana".to_string()];
        let outcome = run_sweep(&tiny_config(9), dir.path(), SweepParam::K, &values).expect("sweep");
        assert_eq!(outcome.trained_runs, 1);
        assert_eq!(outcome.rows.len(), 3);
        assert_eq!(outcome.warnings.len(), 1);
        let ok: Vec<&SweepRow> = outcome.rows.iter().filter(|r| r.status == "ok").collect();
        assert_eq!(ok.len(), 2);
        for row in ok {
            let k: usize = row.value.parse().unwrap();
            let m = row.metrics.as_ref().unwrap();
            assert_eq!(m.acc_at_k.keys().copied().collect::<Vec<_>>(), vec![k]);
        }
        assert!(outcome.rows[2].status == "skipped");
        assert!(outcome.csv_path.exists());
    }

    #[test]
    fn alpha_sweep_skips_invalid_values_and_shares_the_backbone() {
        let dir = tmp();
        let values = vec!["0.25".to_string(), "-1".to_string()];
        let outcome = run_sweep(&tiny_config(10), dir.path(), SweepParam::Alpha, &values).expect("sweep");
        assert_eq!(outcome.trained_runs, 1);
        assert_eq!(outcome.rows[0].status, "ok");
        assert_eq!(outcome.rows[1].status, "skipped");
        assert!(dir.path().join("base/checkpoints/stage1.ck").exists());
        assert!(dir.path().join("alpha_0.25/checkpoints/drl.ck").exists());
        assert!(!dir.path().join("alpha_0.25/checkpoints/stage1.ck").exists());
    }

    #[test]
    fn dumps_cover_every_disease_and_match_the_substitution_rule() {
        let dir = tmp();
        let cfg = tiny_config(12);
        run_pipeline(&cfg, dir.path()).expect("pipeline");
        let original = dump_embeddings(&cfg, dir.path(), DumpKind::Original).expect("original");
        let substituted = dump_embeddings(&cfg, dir.path(), DumpKind::Substituted).expect("substituted");
        let quantized = dump_embeddings(&cfg, dir.path(), DumpKind::Quantized).expect("quantized");

        let n = cfg.data.synthetic.n_diseases;
        for p in [&original, &substituted, &quantized] {
            let text = fs::read_to_string(p).unwrap();
            assert_eq!(text.lines().count(), n + 1, "{} rows", p.display());
        }
        // Re-dump is byte-identical.
        let before = fs::read_to_string(&substituted).unwrap();
        dump_embeddings(&cfg, dir.path(), DumpKind::Substituted).expect("re-dump");
        assert_eq!(before, fs::read_to_string(&substituted).unwrap());

        // Rows agree with the per-disease substitution rule.
        let resolved = cfg.resolved().unwrap();
        let paths = RunPaths::new(dir.path());
        let world = ensure_data(&resolved, &paths, Task::DiagPred).unwrap();
        let backbone = build_backbone(&resolved, &world).unwrap();
        load_params_from(&paths.stage1, &backbone).unwrap();
        let split = split_rarity(&world.train, n, resolved.drl.eta).unwrap();
        let e_d = backbone.emb.e_d.value();
        let e_p = backbone.emb.e_p.value();
        let e_m = backbone.emb.e_m.value();
        let data = DrlData {
            e_d: &e_d,
            e_p: &e_p,
            e_m: &e_m,
            text: &world.text,
            records: &world.train,
            split: &split,
            task: Task::DiagPred,
        };
        let mut drl = DrlModel::new(resolved.model.dim, world.text.dim, resolved.drl.clone()).unwrap();
        load_drl(&paths.drl, &mut drl).unwrap();
        for (i, line) in before.lines().skip(1).enumerate() {
            let mut parts = line.split(',');
            let id: usize = parts.next().unwrap().parse().unwrap();
            assert_eq!(id, i);
            let rarity = parts.next().unwrap();
            assert_eq!(rarity == "common", split.is_common(id));
            let row: Vec<f64> = parts.map(|s| s.parse().unwrap()).collect();
            let expect = crate::drl::substitute_embedding(&drl, &data, id).unwrap();
            assert_eq!(row, expect, "disease {}", id);
        }
    }

    #[test]
    fn dump_without_checkpoints_names_the_missing_file() {
        let dir = tmp();
        let cfg = tiny_config(13);
        run_stage(&cfg, dir.path(), Stage::Pretrain).expect("pretrain");
        let err = dump_embeddings(&cfg, dir.path(), DumpKind::Substituted).unwrap_err();
        assert_eq!(err.kind(), "missing_stage");
        assert!(err.to_string().contains("drl.ck"), "got: {}", err);
    }
}

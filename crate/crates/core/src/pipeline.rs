//! Staged, file-backed runs. Every stage reads the artifacts of the stages
//! before it from the output directory and writes its own; all randomness
//! flows from the [`RunConfig`] seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::AttributionConfig;
use crate::baselines::{run_method, BaselineConfig, Method, UnlearnContext};
use crate::datagen::{
    generate_corpus, read_corpus_jsonl, split, write_corpus_jsonl, CorpusConfig, Example, Split, SplitSpec,
    FORGET_RATIO_PRESETS,
};
use crate::editor::UnlearnConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate, logit_mae, residual_heatmap, separability_probe, smallest_k_reaching, sweep_csv, topk_sweep,
    EvalReport, LayerRanking, ProbeConfig, ResidualMatrix, SweepPoint,
};
use crate::model::{train, Branch, ModelConfig, ModelParams, TrainConfig};
use crate::pathfinder::{aggregate, locate_all, ExamplePaths, PruneSet};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const PATHS_FILE: &str = "paths.json";
pub const UNLEARNED_FILE: &str = "model_unlearned.json";
pub const REPORT_FILE: &str = "report.json";
pub const BASELINES_FILE: &str = "baselines.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const CURVES_DIR: &str = "curves";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Retain examples (evenly strided) used to build both rankings.
    pub rank_examples: usize,
    /// Swept `k`; `None` means every value in `0..=hidden_dim`.
    #[serde(default)]
    pub k_values: Option<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rank_examples: 24,
            k_values: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub unlearn: UnlearnConfig,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Not part of the configuration hash.
    #[serde(default)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            unlearn: UnlearnConfig::default(),
            baseline: None,
            probe: ProbeConfig::default(),
            sweep: SweepConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Point every model-side seed at `seed`. The probe seed stays independent.
    pub fn reseed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.unlearn.rng_seed = seed;
        if let Some(b) = &mut self.baseline {
            b.seed = seed;
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let mut b = self.baseline.clone().unwrap_or_default();
        if self.baseline.is_none() {
            b.seed = self.unlearn.rng_seed;
        }
        b
    }

    /// The method `unlearn` runs when none is given explicitly.
    pub fn default_method(&self) -> Method {
        self.baseline.as_ref().map_or(Method::MipEditor, |b| b.method)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !FORGET_RATIO_PRESETS.iter().any(|r| (r - self.split.forget_ratio).abs() < 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "forget ratio {} is not one of {:?}",
                self.split.forget_ratio, FORGET_RATIO_PRESETS
            )));
        }
        if self.unlearn.top_k == 0 || self.unlearn.top_k > self.model.hidden_dim {
            return Err(Error::InvalidConfig(format!(
                "top_k must lie in 1..={}, got {}",
                self.model.hidden_dim, self.unlearn.top_k
            )));
        }
        if self.attribution.steps == 0 {
            return Err(Error::InvalidConfig("attribution steps must be at least 1".into()));
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Versioned JSON envelope around every artifact except the corpus and
/// checkpoints, which carry the same fields natively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub format_version: u32,
    pub config_hash: String,
    pub data: T,
}

fn write_artifact<T: Serialize>(path: &Path, cfg: &RunConfig, data: T) -> Result<()> {
    let doc = Artifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        config_hash: cfg.hash(),
        data,
    };
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let doc: Artifact<T> = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if doc.format_version != ARTIFACT_FORMAT_VERSION {
        return Err(Error::MalformedArtifact {
            path: path.display().to_string(),
            detail: format!("unsupported format_version {}", doc.format_version),
        });
    }
    Ok(doc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsArtifact {
    pub paths: Vec<ExamplePaths>,
    pub prune_set: PruneSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnedMeta {
    pub method: Method,
    pub pruned: Vec<crate::model::NeuronRef>,
}

/// The unlearned checkpoint plus which method produced it.
#[derive(Serialize, Deserialize)]
struct UnlearnedFile {
    format_version: u32,
    config_hash: String,
    meta: UnlearnedMeta,
    checkpoint: Box<serde_json::value::RawValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub report: EvalReport,
    /// Held-out accuracy of the forget/retain probe on the unlearned model.
    pub probe_accuracy: f64,
    /// Per forget example, relative change of the gold-answer probability.
    pub logit_mae: Vec<f64>,
    /// Activation residuals on the forget split.
    pub residual: ResidualMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepArtifact {
    pub full_retain_accuracy: f64,
    pub path: Vec<SweepPoint>,
    pub pointwise: Vec<SweepPoint>,
    pub path_k90: Option<usize>,
    pub pointwise_k90: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: Method,
    pub report: EvalReport,
    pub probe_accuracy: f64,
}

/// Path of a file inside the output directory.
pub fn artifact(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn curves_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(CURVES_DIR);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn warn_hash(path: &Path, found: Option<&str>, cfg: &RunConfig) {
    if let Some(h) = found {
        if h != cfg.hash() {
            eprintln!("warning: {} was produced by a different configuration", path.display());
        }
    }
}

/// Entity-major order, matching generation order.
fn all_examples(split: &Split) -> Vec<Example> {
    let mut all: Vec<Example> = split.forget.iter().chain(&split.retain).cloned().collect();
    all.sort_by_key(|e| e.id);
    all
}

pub fn load_split(cfg: &RunConfig) -> Result<Split> {
    let path = artifact(cfg, CORPUS_FILE);
    let (header, split) = read_corpus_jsonl(&path)?;
    warn_hash(&path, Some(&header.config_hash), cfg);
    Ok(split)
}

fn load_checkpoint(cfg: &RunConfig, name: &str) -> Result<ModelParams> {
    ModelParams::load(&artifact(cfg, name))
}

pub fn load_model(cfg: &RunConfig) -> Result<ModelParams> {
    load_checkpoint(cfg, MODEL_FILE)
}

pub fn load_unlearned(cfg: &RunConfig) -> Result<(UnlearnedMeta, ModelParams)> {
    let path = artifact(cfg, UNLEARNED_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let doc: UnlearnedFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if doc.format_version != ARTIFACT_FORMAT_VERSION {
        return Err(Error::MalformedArtifact {
            path: path.display().to_string(),
            detail: format!("unsupported format_version {}", doc.format_version),
        });
    }
    warn_hash(&path, Some(&doc.config_hash), cfg);
    Ok((doc.meta, ModelParams::from_checkpoint_json(doc.checkpoint.get())?))
}

pub fn load_paths(cfg: &RunConfig) -> Result<PathsArtifact> {
    let path = artifact(cfg, PATHS_FILE);
    let doc: Artifact<PathsArtifact> = read_artifact(&path)?;
    warn_hash(&path, Some(&doc.config_hash), cfg);
    Ok(doc.data)
}

/// Generate the corpus and split; writes `corpus.jsonl`.
pub fn gen(cfg: &RunConfig) -> Result<Split> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let corpus = generate_corpus(&cfg.corpus, &cfg.model)?;
    let s = split(&corpus, &cfg.split)?;
    write_corpus_jsonl(&artifact(cfg, CORPUS_FILE), &corpus, &cfg.split, &s, &cfg.hash())?;
    Ok(s)
}

/// Train on the whole corpus; writes `model.json` and the loss curve.
pub fn train_stage(cfg: &RunConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let s = load_split(cfg)?;
    let init = ModelParams::init(&cfg.model)?;
    let outcome = train(&init, &all_examples(&s), &cfg.train)?;
    outcome.params.save(&artifact(cfg, MODEL_FILE), Some(&cfg.hash()))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    fs::write(curves_dir(cfg)?.join("train_loss.csv"), csv)?;
    Ok(outcome.params)
}

/// Locate influential paths on the forget split; writes `paths.json`.
pub fn locate(cfg: &RunConfig) -> Result<PathsArtifact> {
    cfg.validate()?;
    let s = load_split(cfg)?;
    let model = load_model(cfg)?;
    let paths = locate_all(&model, &s.forget, &cfg.attribution)?;
    let prune_set = aggregate(&paths, cfg.unlearn.top_k)?;
    let out = PathsArtifact { paths, prune_set };
    write_artifact(&artifact(cfg, PATHS_FILE), cfg, &out)?;
    Ok(out)
}

fn unlearn_with(cfg: &RunConfig, method: Method, model: &ModelParams, s: &Split) -> Result<crate::baselines::MethodOutcome> {
    let paths = if method.needs_paths() {
        load_paths(cfg)?.paths
    } else {
        Vec::new()
    };
    let baseline = cfg.baseline_config();
    let ctx = UnlearnContext {
        frozen: model,
        forget: &s.forget,
        retain: &s.retain,
        paths: &paths,
        unlearn: &cfg.unlearn,
        baseline: &baseline,
        reference_train: &cfg.train,
    };
    run_method(method, &ctx)
}

/// Run one method; writes `model_unlearned.json` and its loss curve.
pub fn unlearn(cfg: &RunConfig, method: Method) -> Result<(UnlearnedMeta, ModelParams)> {
    cfg.validate()?;
    let s = load_split(cfg)?;
    let model = load_model(cfg)?;
    let outcome = unlearn_with(cfg, method, &model, &s)?;
    let meta = UnlearnedMeta {
        method,
        pruned: crate::baselines::masked_neurons(&outcome).into_iter().collect(),
    };
    let doc = UnlearnedFile {
        format_version: ARTIFACT_FORMAT_VERSION,
        config_hash: cfg.hash(),
        meta: meta.clone(),
        checkpoint: serde_json::value::RawValue::from_string(outcome.params.to_checkpoint_json(Some(&cfg.hash()))?)?,
    };
    fs::write(artifact(cfg, UNLEARNED_FILE), serde_json::to_string(&doc)?)?;
    let mut csv = String::from("step,epoch,loss\n");
    for p in &outcome.curve {
        let _ = writeln!(csv, "{},{},{}", p.step, p.epoch, p.loss);
    }
    fs::write(curves_dir(cfg)?.join(format!("unlearn_{method}.csv")), csv)?;
    Ok((meta, outcome.params))
}

/// Evaluate the unlearned model against the trained one; writes
/// `report.json` and the residual heatmaps.
pub fn eval(cfg: &RunConfig) -> Result<FullReport> {
    cfg.validate()?;
    let s = load_split(cfg)?;
    let model = load_model(cfg)?;
    let (meta, unlearned) = load_unlearned(cfg)?;
    let t = Instant::now();
    let before = evaluate(&model, &s)?;
    let after = evaluate(&unlearned, &s)?;
    let report = EvalReport::new(meta.method.name(), before, after, t.elapsed().as_secs_f64());
    let full = FullReport {
        report,
        probe_accuracy: separability_probe(&unlearned, &s.forget, &s.retain, &cfg.probe)?,
        logit_mae: logit_mae(&model, &unlearned, &s.forget)?,
        residual: residual_heatmap(&model, &unlearned, &s.forget)?,
    };
    let dir = curves_dir(cfg)?;
    for b in [Branch::Visual, Branch::Textual] {
        fs::write(dir.join(format!("residual_{b}.csv")), full.residual.to_csv(b))?;
    }
    write_artifact(&artifact(cfg, REPORT_FILE), cfg, &full)?;
    Ok(full)
}

/// Run and evaluate every method on the shared split and seeds; writes
/// `baselines.json`.
pub fn baseline(cfg: &RunConfig, methods: &[Method]) -> Result<Vec<BaselineRow>> {
    cfg.validate()?;
    let s = load_split(cfg)?;
    let model = load_model(cfg)?;
    let before = evaluate(&model, &s)?;
    let mut rows = Vec::new();
    for &m in methods {
        let t = Instant::now();
        let outcome = unlearn_with(cfg, m, &model, &s)?;
        let after = evaluate(&outcome.params, &s)?;
        rows.push(BaselineRow {
            method: m,
            report: EvalReport::new(m.name(), before.clone(), after, t.elapsed().as_secs_f64()),
            probe_accuracy: separability_probe(&outcome.params, &s.forget, &s.retain, &cfg.probe)?,
        });
    }
    write_artifact(&artifact(cfg, BASELINES_FILE), cfg, &rows)?;
    Ok(rows)
}

/// Evenly strided subset used to build the sweep rankings.
pub fn ranking_sample(examples: &[Example], count: usize) -> Vec<Example> {
    if count == 0 || examples.is_empty() {
        return Vec::new();
    }
    let stride = (examples.len() / count).max(1);
    examples.iter().step_by(stride).take(count).cloned().collect()
}

/// Path vs pointwise top-k sweep; writes `sweep.json` and its CSV.
pub fn sweep(cfg: &RunConfig) -> Result<SweepArtifact> {
    cfg.validate()?;
    let s = load_split(cfg)?;
    let model = load_model(cfg)?;
    let sample = ranking_sample(&s.retain, cfg.sweep.rank_examples);
    let path_rank = LayerRanking::from_paths(&locate_all(&model, &sample, &cfg.attribution)?)?;
    let point_rank = LayerRanking::pointwise(&model, &sample)?;
    let ks = cfg
        .sweep
        .k_values
        .clone()
        .unwrap_or_else(|| (0..=cfg.model.hidden_dim).collect());
    let full = crate::evalkit::metrics(&model, &s.retain)?.accuracy;
    let path = topk_sweep(&model, &path_rank, &ks, &s)?;
    let pointwise = topk_sweep(&model, &point_rank, &ks, &s)?;
    let out = SweepArtifact {
        full_retain_accuracy: full,
        path_k90: smallest_k_reaching(&path, full, 0.9),
        pointwise_k90: smallest_k_reaching(&pointwise, full, 0.9),
        path,
        pointwise,
    };
    fs::write(curves_dir(cfg)?.join("topk_sweep.csv"), sweep_csv(&out.path, &out.pointwise))?;
    write_artifact(&artifact(cfg, SWEEP_FILE), cfg, &out)?;
    Ok(out)
}

/// Human-readable summary of whatever reports exist. `report.json` is required.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let full: FullReport = read_artifact(&artifact(cfg, REPORT_FILE))?.data;
    let r = &full.report;
    let mut out = String::new();
    let _ = writeln!(out, "method: {}", r.method);
    for (name, b, a) in [
        ("forget", &r.before.forget, &r.after.forget),
        ("retain", &r.before.retain, &r.after.retain),
    ] {
        for (modality, mb, ma) in [("multimodal", &b.multimodal, &a.multimodal), ("text-only", &b.text_only, &a.text_only)] {
            let _ = writeln!(
                out,
                "  {name:6} {modality:10} acc {:.3} -> {:.3}  f1 {:.3} -> {:.3}  (n={})",
                mb.accuracy, ma.accuracy, mb.token_f1, ma.token_f1, ma.count
            );
        }
    }
    let _ = writeln!(
        out,
        "  forgetting rate   mm {:.3}  text {:.3}",
        r.forgetting_rate.multimodal, r.forgetting_rate.text_only
    );
    let _ = writeln!(
        out,
        "  retention ratio   mm {:.3}  text {:.3}",
        r.retention_ratio.multimodal, r.retention_ratio.text_only
    );
    let _ = writeln!(out, "  probe accuracy    {:.3}", full.probe_accuracy);
    if let Some(m) = crate::evalkit::median(&full.logit_mae) {
        let _ = writeln!(out, "  median logit MAE  {m:.4}");
    }
    if let Ok(doc) = read_artifact::<Vec<BaselineRow>>(&artifact(cfg, BASELINES_FILE)) {
        let _ = writeln!(out, "methods:");
        for row in doc.data {
            let _ = writeln!(
                out,
                "  {:26} forget {:.3}/{:.3}  retain {:.3}/{:.3}  probe {:.3}",
                row.method.name(),
                row.report.forgetting_rate.multimodal,
                row.report.forgetting_rate.text_only,
                row.report.retention_ratio.multimodal,
                row.report.retention_ratio.text_only,
                row.probe_accuracy
            );
        }
    }
    if let Ok(doc) = read_artifact::<SweepArtifact>(&artifact(cfg, SWEEP_FILE)) {
        let _ = writeln!(
            out,
            "sweep: k reaching 90% of retain accuracy  path {:?}  pointwise {:?}",
            doc.data.path_k90, doc.data.pointwise_k90
        );
    }
    Ok(out)
}

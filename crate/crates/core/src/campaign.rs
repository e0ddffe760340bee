//! Campaigns: one configured attack run over a set of images.
//!
//! A campaign loads a JSON config, builds the victim, attacks every usable
//! image with its own derived seed and writes per-image artifacts plus a
//! JSON/CSV report. Images the victim already gets wrong (classification) or
//! in which it finds nothing (detection) are skipped and do not count
//! towards the success rate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    run_attack, run_random_baseline as random_search, AttackConfig, AttackError, AttackResult,
    Environment, RemovalTarget, RewardSpec, Victim,
};
use crate::image::{load_image, save_image, Image, ImageError};
use crate::metrics::{
    ata, l0_elements, l0_pixels, AttackKind, CampaignReport, DetectionSummary, ImageRow,
    SkippedImage,
};
use crate::victims::{
    detected_objects, predicted_class, query_classifier, query_detector, Classifier, Detection,
    Detector, GridDetector, LinearSoftmax, QueryCounter, RemoteVictim, TinyCnn, VictimError,
};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
/// Subdirectory of the output directory that holds baseline artifacts.
pub const BASELINE_DIR: &str = "baseline";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("victim: {0}")]
    Victim(#[from] VictimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Detect,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Detect => "detect",
        }
    }
}

fn default_cell_size() -> usize {
    8
}

fn default_channel_threshold() -> f64 {
    0.5
}

fn default_gain() -> f64 {
    crate::victims::DEFAULT_GAIN
}

fn default_retries() -> usize {
    2
}

/// Which victim to attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VictimSpec {
    LinearSoftmax {
        weights: PathBuf,
    },
    TinyCnn {
        weights: PathBuf,
    },
    GridDetector {
        #[serde(default = "default_cell_size")]
        cell_size: usize,
        #[serde(default = "default_channel_threshold")]
        channel_threshold: f64,
        #[serde(default = "default_gain")]
        gain: f64,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_retries")]
        retries: usize,
    },
}

/// A directory (every `.png` / `.raw` file, sorted by name) or an explicit
/// file list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSpec {
    Dir(PathBuf),
    Files(Vec<PathBuf>),
}

/// The config file as written. Every field except `task`, `victim` and
/// `input` is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: Task,
    victim: VictimSpec,
    input: InputSpec,
    labels: Option<PathBuf>,
    output: Option<PathBuf>,
    alpha: Option<f64>,
    eta: Option<f64>,
    #[serde(alias = "T")]
    convergence_epochs: Option<usize>,
    max_cycles: Option<usize>,
    max_epochs_per_cycle: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    use_memory: Option<bool>,
    use_initialization: Option<bool>,
    removal_target: Option<RemovalTarget>,
    baseline: Option<bool>,
    baseline_query_budget: Option<u64>,
    workers: Option<usize>,
    save_images: Option<bool>,
}

/// A validated campaign configuration with all paths absolute or relative
/// to the working directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub task: Task,
    pub victim: VictimSpec,
    pub input: InputSpec,
    /// JSON object mapping file name to class index (classification only).
    pub labels: Option<PathBuf>,
    pub output: PathBuf,
    pub attack: AttackConfig,
    /// Also run the random baseline.
    pub baseline: bool,
    /// Fixed baseline query budget per image; when absent the baseline gets
    /// exactly the queries RFPAR spent on the same image.
    pub baseline_query_budget: Option<u64>,
    pub workers: usize,
    /// Write `<stem>_adv` and `<stem>_delta` images.
    pub save_images: bool,
}

/// Reads and validates a config file. Relative paths inside it resolve
/// against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<CampaignConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config(&text, base)
}

/// Parses config JSON; relative paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<CampaignConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let mut attack = match raw.task {
        Task::Classify => AttackConfig::classification(),
        Task::Detect => AttackConfig::detection(),
    };
    if let Some(v) = raw.alpha {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid("alpha", "must be a positive number"));
        }
        attack.alpha = v;
    }
    if let Some(v) = raw.eta {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid("eta", "must be a positive number"));
        }
        attack.eta = v;
    }
    if let Some(v) = raw.convergence_epochs {
        if v == 0 {
            return Err(invalid("convergence_epochs", "must be at least 1"));
        }
        attack.convergence_epochs = v;
    }
    if let Some(v) = raw.max_cycles {
        if v == 0 {
            return Err(invalid("max_cycles", "must be at least 1"));
        }
        attack.max_cycles = v;
    }
    if let Some(v) = raw.max_epochs_per_cycle {
        if v == 0 {
            return Err(invalid("max_epochs_per_cycle", "must be at least 1"));
        }
        attack.max_epochs_per_cycle = v;
    }
    if let Some(v) = raw.learning_rate {
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid("learning_rate", "must be finite and non-negative"));
        }
        attack.learning_rate = v;
    }
    if let Some(v) = raw.batch_size {
        if v == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        attack.batch_size = v;
    }
    if let Some(v) = raw.removal_target {
        if let RemovalTarget::Fraction(f) = v {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid("removal_target", "fraction must be in (0, 1]"));
            }
        }
        attack.removal_target = v;
    }
    attack.seed = raw.seed.unwrap_or(0);
    attack.use_memory = raw.use_memory.unwrap_or(true);
    attack.use_initialization = raw.use_initialization.unwrap_or(true);

    let victim = match raw.victim {
        VictimSpec::LinearSoftmax { weights } => {
            if raw.task != Task::Classify {
                return Err(invalid("victim", "linear_softmax is a classifier"));
            }
            VictimSpec::LinearSoftmax {
                weights: resolve(weights),
            }
        }
        VictimSpec::TinyCnn { weights } => {
            if raw.task != Task::Classify {
                return Err(invalid("victim", "tiny_cnn is a classifier"));
            }
            VictimSpec::TinyCnn {
                weights: resolve(weights),
            }
        }
        spec @ VictimSpec::GridDetector { .. } => {
            if raw.task != Task::Detect {
                return Err(invalid("victim", "grid_detector is a detector"));
            }
            spec
        }
        spec @ VictimSpec::Remote { .. } => spec,
    };

    let input = match raw.input {
        InputSpec::Dir(d) => InputSpec::Dir(resolve(d)),
        InputSpec::Files(fs) => InputSpec::Files(fs.into_iter().map(resolve).collect()),
    };
    let labels = raw.labels.map(resolve);
    if raw.task == Task::Classify && labels.is_none() {
        return Err(invalid("labels", "required for classification"));
    }
    let workers = raw.workers.unwrap_or(1);
    if workers == 0 {
        return Err(invalid("workers", "must be at least 1"));
    }
    if raw.baseline_query_budget == Some(0) {
        return Err(invalid("baseline_query_budget", "must be at least 1"));
    }

    Ok(CampaignConfig {
        task: raw.task,
        victim,
        input,
        labels,
        output: resolve(raw.output.unwrap_or_else(|| PathBuf::from("out"))),
        attack,
        baseline: raw.baseline.unwrap_or(false),
        baseline_query_budget: raw.baseline_query_budget,
        workers,
        save_images: raw.save_images.unwrap_or(true),
    })
}

/// Per-image seed: `splitmix64(campaign_seed ^ splitmix64(index))`, where
/// `index` is the image's position in the input list.
pub fn image_seed(campaign_seed: u64, index: u64) -> u64 {
    splitmix64(campaign_seed ^ splitmix64(index))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A constructed victim, ready for concurrent queries.
pub enum LoadedVictim {
    Classifier(Box<dyn Classifier>),
    Detector(Box<dyn Detector>),
}

pub fn build_victim(task: Task, spec: &VictimSpec) -> Result<LoadedVictim, CampaignError> {
    Ok(match (task, spec) {
        (Task::Classify, VictimSpec::LinearSoftmax { weights }) => {
            LoadedVictim::Classifier(Box::new(LinearSoftmax::load(weights)?))
        }
        (Task::Classify, VictimSpec::TinyCnn { weights }) => {
            LoadedVictim::Classifier(Box::new(TinyCnn::load(weights)?))
        }
        (
            Task::Detect,
            VictimSpec::GridDetector {
                cell_size,
                channel_threshold,
                gain,
            },
        ) => LoadedVictim::Detector(Box::new(GridDetector::with_gain(
            *cell_size,
            *channel_threshold,
            *gain,
        )?)),
        (task, VictimSpec::Remote { endpoint, retries }) => {
            let v = RemoteVictim::new(endpoint.clone()).with_retries(*retries);
            match task {
                Task::Classify => LoadedVictim::Classifier(Box::new(v)),
                Task::Detect => LoadedVictim::Detector(Box::new(v)),
            }
        }
        _ => return Err(invalid("victim", format!("not usable for task {}", task.name())).into()),
    })
}

/// Per-image query budgets for the random baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryBudget {
    /// The same number of attack queries for every image.
    Fixed(u64),
    /// Attack queries per file name; files without an entry are not run.
    PerImage(BTreeMap<String, u64>),
}

impl QueryBudget {
    /// The attack queries RFPAR spent per image (the clean reference query
    /// excluded), so both attacks see the victim equally often.
    pub fn matching(report: &CampaignReport) -> Self {
        QueryBudget::PerImage(
            report
                .images
                .iter()
                .map(|r| (r.file.clone(), r.queries.saturating_sub(1)))
                .collect(),
        )
    }

    fn for_file(&self, file: &str) -> Option<u64> {
        match self {
            QueryBudget::Fixed(n) => Some(*n),
            QueryBudget::PerImage(map) => map.get(file).copied(),
        }
    }
}

/// Lists the campaign's input files in attack order.
pub fn input_files(input: &InputSpec) -> Result<Vec<PathBuf>, CampaignError> {
    match input {
        InputSpec::Files(files) => Ok(files.clone()),
        InputSpec::Dir(dir) => {
            let io_err = |source| CampaignError::Io {
                path: dir.display().to_string(),
                source,
            };
            let mut files = Vec::new();
            for entry in fs::read_dir(dir).map_err(io_err)? {
                let path = entry.map_err(io_err)?.path();
                let ext = path
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase);
                if path.is_file() && matches!(ext.as_deref(), Some("png" | "raw")) {
                    files.push(path);
                }
            }
            files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
            Ok(files)
        }
    }
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>, CampaignError> {
    let text = fs::read_to_string(path).map_err(|source| CampaignError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| invalid("labels", format!("{}: {e}", path.display())).into())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Clone, Copy)]
enum Mode<'a> {
    Rfpar,
    Baseline(&'a QueryBudget),
}

enum ImageOutcome {
    Attacked {
        row: ImageRow,
        clean: Vec<Detection>,
        adv: Vec<Detection>,
    },
    Skipped(SkippedImage),
    Failed(SkippedImage),
}

/// Runs RFPAR on every input image and writes the report and artifacts to
/// `cfg.output`.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, CampaignError> {
    let victim = build_victim(cfg.task, &cfg.victim)?;
    run_with(cfg, &victim, Mode::Rfpar, &cfg.output)
}

/// Runs the uniform random baseline with the given budgets and writes the
/// report and artifacts to `cfg.output/baseline`.
pub fn run_random_baseline(cfg: &CampaignConfig, budget: &QueryBudget) -> Result<CampaignReport, CampaignError> {
    let victim = build_victim(cfg.task, &cfg.victim)?;
    run_with(cfg, &victim, Mode::Baseline(budget), &cfg.output.join(BASELINE_DIR))
}

/// [`run_campaign`] against an already constructed victim.
pub fn run_campaign_with(cfg: &CampaignConfig, victim: &LoadedVictim) -> Result<CampaignReport, CampaignError> {
    run_with(cfg, victim, Mode::Rfpar, &cfg.output)
}

/// [`run_random_baseline`] against an already constructed victim.
pub fn run_random_baseline_with(
    cfg: &CampaignConfig,
    victim: &LoadedVictim,
    budget: &QueryBudget,
) -> Result<CampaignReport, CampaignError> {
    run_with(cfg, victim, Mode::Baseline(budget), &cfg.output.join(BASELINE_DIR))
}

fn run_with(
    cfg: &CampaignConfig,
    victim: &LoadedVictim,
    mode: Mode<'_>,
    out_dir: &Path,
) -> Result<CampaignReport, CampaignError> {
    cfg.attack
        .validate()
        .map_err(|e| invalid("attack", e.to_string()))?;
    let files = input_files(&cfg.input)?;
    if files.is_empty() {
        warn!("no input images found");
    }
    let labels = match (cfg.task, &cfg.labels) {
        (Task::Classify, Some(p)) => read_labels(p)?,
        (Task::Classify, None) => return Err(invalid("labels", "required for classification").into()),
        _ => BTreeMap::new(),
    };
    fs::create_dir_all(out_dir).map_err(|source| CampaignError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    let outcomes: Vec<ImageOutcome> = pool.install(|| {
        files
            .par_iter()
            .enumerate()
            .map(|(index, path)| {
                let file = file_name(path);
                let seed = image_seed(cfg.attack.seed, index as u64);
                match attack_one(cfg, victim, mode, path, &file, seed, &labels, out_dir) {
                    Ok(outcome) => outcome,
                    Err(e) => {
                        warn!("{file}: {e}");
                        ImageOutcome::Failed(SkippedImage {
                            file,
                            reason: e.to_string(),
                        })
                    }
                }
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut detections = Vec::new();
    let mut skipped = Vec::new();
    let mut failed = Vec::new();
    for outcome in outcomes {
        match outcome {
            ImageOutcome::Attacked { row, clean, adv } => {
                detections.push((row.file.clone(), clean, adv));
                rows.push(row);
            }
            ImageOutcome::Skipped(s) => skipped.push(s),
            ImageOutcome::Failed(s) => failed.push(s),
        }
    }
    let summary = (cfg.task == Task::Detect).then(|| {
        detections.sort_by(|a, b| a.0.cmp(&b.0));
        let (clean, adv): (Vec<_>, Vec<_>) = detections.into_iter().map(|(_, c, a)| (c, a)).unzip();
        DetectionSummary::compute(&clean, &adv)
    });
    let kind = match mode {
        Mode::Rfpar => AttackKind::Rfpar,
        Mode::Baseline(_) => AttackKind::RandomBaseline,
    };
    let report = CampaignReport::new(cfg.task.name(), kind, rows, skipped, failed, summary);
    write_report(&report, out_dir)?;
    info!(
        "{:?}: {} attacked, success rate {:.3}, {} skipped, {} failed",
        kind,
        report.attacked,
        report.success_rate,
        report.skipped.len(),
        report.failed.len()
    );
    Ok(report)
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &CampaignReport, dir: &Path) -> Result<(), CampaignError> {
    let write = |name: &str, body: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| CampaignError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(REPORT_JSON, report.to_json().as_bytes())?;
    let csv = report
        .to_csv()
        .map_err(|e| CampaignError::Report(e.to_string()))?;
    write(REPORT_CSV, csv.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn attack_one(
    cfg: &CampaignConfig,
    victim: &LoadedVictim,
    mode: Mode<'_>,
    path: &Path,
    file: &str,
    seed: u64,
    labels: &BTreeMap<String, usize>,
    out_dir: &Path,
) -> Result<ImageOutcome, CampaignError> {
    let x = load_image(path)?;
    let counter = QueryCounter::new();
    let skip = |reason: String| {
        Ok(ImageOutcome::Skipped(SkippedImage {
            file: file.to_string(),
            reason,
        }))
    };
    let env = match victim {
        LoadedVictim::Classifier(v) => {
            let Some(&label) = labels.get(file) else {
                return Ok(ImageOutcome::Failed(SkippedImage {
                    file: file.to_string(),
                    reason: "no label".into(),
                }));
            };
            let clean = query_classifier(v.as_ref(), &counter, &x)?;
            let pred = predicted_class(&clean);
            if pred != label {
                return skip(format!("misclassified as {pred} (label {label})"));
            }
            Environment::new(
                Victim::Classifier(v.as_ref()),
                counter.clone(),
                RewardSpec::Classification { label, clean },
            )
        }
        LoadedVictim::Detector(v) => {
            let clean = detected_objects(&query_detector(v.as_ref(), &counter, &x)?);
            if clean.is_empty() {
                return skip("no objects detected".into());
            }
            Environment::new(
                Victim::Detector(v.as_ref()),
                counter.clone(),
                RewardSpec::Detection {
                    clean,
                    target: cfg.attack.removal_target,
                },
            )
        }
    }
    .map_err(|e| attack_failure(file, e))?;

    let attack_cfg = AttackConfig {
        seed,
        ..cfg.attack.clone()
    };
    let result = match mode {
        Mode::Rfpar => run_attack(&x, &env, &attack_cfg),
        Mode::Baseline(budget) => {
            let Some(queries) = budget.for_file(file) else {
                return skip("no baseline budget".into());
            };
            random_search(&x, &env, attack_cfg.pixels_for(&x), queries, seed)
        }
    }
    .map_err(|e| attack_failure(file, e))?;

    if cfg.save_images {
        save_artifacts(&x, &result, path, out_dir)?;
    }
    Ok(image_outcome(file, seed, &env, &result, counter.get()))
}

fn attack_failure(file: &str, e: AttackError) -> CampaignError {
    match e {
        AttackError::Victim(v) => CampaignError::Victim(v),
        AttackError::Image(i) => CampaignError::Image(i),
        other => CampaignError::Report(format!("{file}: {other}")),
    }
}

fn image_outcome(file: &str, seed: u64, env: &Environment<'_>, result: &AttackResult, queries: u64) -> ImageOutcome {
    let delta = &result.delta;
    let mut row = ImageRow {
        file: file.to_string(),
        seed,
        success: result.success,
        l0: l0_elements(delta),
        l0_pixels: l0_pixels(delta),
        ata: ata(delta),
        queries,
        cycles_used: result.cycles_used,
        best_reward: result.final_reward,
        label: None,
        adv_class: None,
        clean_objects: None,
        adv_objects: None,
    };
    match env.spec() {
        RewardSpec::Classification { label, .. } => {
            row.label = Some(*label);
            row.adv_class = Some(result.final_evaluation.outcome);
            ImageOutcome::Attacked {
                row,
                clean: Vec::new(),
                adv: Vec::new(),
            }
        }
        RewardSpec::Detection { clean, .. } => {
            row.clean_objects = Some(clean.len());
            row.adv_objects = Some(result.final_evaluation.detections.len());
            ImageOutcome::Attacked {
                row,
                clean: clean.clone(),
                adv: result.final_evaluation.detections.clone(),
            }
        }
    }
}

/// `<stem>_adv.png` and `<stem>_delta.png` (`|x̄ − x|` per element). Images
/// with a channel count PNG cannot hold are written as `.raw`.
fn save_artifacts(x: &Image, result: &AttackResult, path: &Path, out_dir: &Path) -> Result<(), CampaignError> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let ext = if matches!(x.channels(), 1 | 3) { "png" } else { "raw" };
    let delta = Image::new(
        x.dims(),
        x.data()
            .iter()
            .zip(result.adversarial.data())
            .map(|(a, b)| (b - a).abs())
            .collect(),
    )?;
    save_image(&result.adversarial, out_dir.join(format!("{stem}_adv.{ext}")))?;
    save_image(&delta, out_dir.join(format!("{stem}_delta.{ext}")))?;
    Ok(())
}

//! End-to-end runs: manifest → classifier → prompt → LLM → parse, persisted
//! as one JSON line per image in image_id order.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/<run_id>/
//!   config.snapshot   resolved config the run was started with
//!   records.jsonl     one PipelineRecord per manifest entry
//!   errors.jsonl      misclassified images left out of the SEP error set
//!   summary.json      counts, timings, cache hit rate of the last invocation
//!   report.md, report.json, confusion.csv, tables/*.csv
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{round_ms, Gateway, GenerateError, Generation, PromptTemplate, ProviderConfig, ResponseCache};
use crate::metrics::text::{load_references, ReferenceCorpus};
use crate::model::{FoodClass, Latency, ParseOutcome, PipelineRecord, PredictionRecord, TrueClassGeneration};
use crate::report::{self, FieldSelector, ReportMeta, RunReport};
use crate::sep::{embedder_from_spec, sep_aggregate, EmbeddingProvider, ErrorPair, DEFAULT_CASE_THRESHOLD};
use crate::vision::{
    load_predictions, stub_classify, ClassList, ConfusionSpec, DatasetManifest, EndpointConfig, ManifestEntry,
    RemoteClassifier,
};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 config/validation, 2 backend/transport, 3 data/schema.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Io { .. } => 1,
            PipelineError::Backend(_) => 2,
            PipelineError::Data(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Stub {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        confusion: Option<PathBuf>,
        /// Overrides the seed in the confusion file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Predictions {
        path: PathBuf,
    },
    Remote(EndpointConfig),
}

/// A provider config file, or the config inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProviderRef {
    Path(PathBuf),
    Inline(ProviderConfig),
}

fn default_template() -> String {
    crate::gateway::prompt::DEFAULT_TEMPLATE_VERSION.to_owned()
}
fn default_embedder() -> String {
    "stub".to_owned()
}
fn default_parallel() -> usize {
    4
}
fn default_threshold() -> f64 {
    DEFAULT_CASE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub class_list: PathBuf,
    pub manifest: PathBuf,
    pub backend: BackendConfig,
    pub provider: ProviderRef,
    #[serde(default = "default_template")]
    pub template_version: String,
    /// `stub`, `file:PATH` or `remote:PATH`.
    #[serde(default = "default_embedder")]
    pub embedder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub sep_threshold: f64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub max_parallel: Option<usize>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub embedder: Option<String>,
    pub template_version: Option<String>,
}

impl RunConfig {
    /// Reads a JSON config and resolves every relative path against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() {
            Path::new(".")
        } else {
            base
        };
        cfg.resolved(base)
    }

    pub fn resolved(mut self, base: &Path) -> Result<Self, PipelineError> {
        self.class_list = resolve(base, &self.class_list);
        self.manifest = resolve(base, &self.manifest);
        self.output_dir = resolve(base, &self.output_dir);
        self.references = self.references.map(|p| resolve(base, &p));
        self.cache_dir = self.cache_dir.map(|p| resolve(base, &p));
        match &mut self.backend {
            BackendConfig::Stub { confusion, .. } => *confusion = confusion.take().map(|p| resolve(base, &p)),
            BackendConfig::Predictions { path } => *path = resolve(base, path),
            BackendConfig::Remote(_) => {}
        }
        self.provider = match self.provider {
            ProviderRef::Path(p) => ProviderRef::Inline(ProviderConfig::load(&resolve(base, &p)).map_err(config_err)?),
            ProviderRef::Inline(mut c) => {
                c.fixtures = c.fixtures.map(|f| resolve(base, &f));
                ProviderRef::Inline(c)
            }
        };
        for prefix in ["file:", "remote:"] {
            if let Some(rest) = self.embedder.strip_prefix(prefix) {
                self.embedder = format!("{prefix}{}", resolve(base, Path::new(rest)).display());
            }
        }
        Ok(self)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.run_id {
            self.run_id = v.clone();
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.max_parallel {
            self.max_parallel = v;
        }
        if let Some(v) = &o.cache_dir {
            self.cache_dir = Some(v.clone());
        }
        if let Some(v) = &o.embedder {
            self.embedder = v.clone();
        }
        if let Some(v) = &o.template_version {
            self.template_version = v.clone();
        }
        if let (Some(s), BackendConfig::Stub { seed, .. }) = (o.seed, &mut self.backend) {
            *seed = Some(s);
        }
    }

    pub fn provider_config(&self) -> Result<&ProviderConfig, PipelineError> {
        match &self.provider {
            ProviderRef::Inline(c) => Ok(c),
            ProviderRef::Path(p) => Err(PipelineError::Config(format!(
                "provider {} was not resolved; load the config with RunConfig::load",
                p.display()
            ))),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !crate::gateway::provider::is_safe_name(&self.run_id) {
            return Err(PipelineError::Config(format!(
                "run_id {:?} is not filesystem-safe ([A-Za-z0-9._-], not starting with '.')",
                self.run_id
            )));
        }
        if self.max_parallel == 0 {
            return Err(PipelineError::Config("max_parallel must be >= 1".into()));
        }
        if !self.sep_threshold.is_finite() || !(0.0..=2.0).contains(&self.sep_threshold) {
            return Err(PipelineError::Config("sep_threshold must be within [0, 2]".into()));
        }
        self.provider_config()?.validate().map_err(config_err)
    }

    fn snapshot_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after persisting this many new records, as if killed.
    pub stop_after: Option<usize>,
    /// Discard any existing records instead of resuming.
    pub fresh: bool,
}

/// Misclassified image left out of the SEP error set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub image_id: String,
    pub true_class: FoodClass,
    pub predicted_class: FoodClass,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorSet {
    pub pairs: Vec<ErrorPair>,
    pub exclusions: Vec<Exclusion>,
}

fn outcome_problem(o: &ParseOutcome) -> String {
    match o {
        ParseOutcome::Knowledge(_) => String::new(),
        ParseOutcome::Error(e) => format!("parse failed ({:?})", e.kind),
        ParseOutcome::GenerationFailed { kind, .. } => format!("generation failed ({kind})"),
    }
}

/// Pairs of (predicted-class, true-class) knowledge for every misclassified
/// record where both generations parsed.
pub fn collect_error_set(records: &[PipelineRecord]) -> ErrorSet {
    let mut set = ErrorSet::default();
    for r in records.iter().filter(|r| !r.prediction.is_correct()) {
        let p = &r.prediction;
        let exclude = |reason: String| Exclusion {
            image_id: r.image_id.clone(),
            true_class: p.true_class.clone(),
            predicted_class: p.predicted_class.clone(),
            reason,
        };
        let Some(pred_k) = r.parse_outcome.knowledge() else {
            set.exclusions.push(exclude(format!(
                "predicted class: {}",
                outcome_problem(&r.parse_outcome)
            )));
            continue;
        };
        let Some(tg) = &r.true_class_generation else {
            set.exclusions.push(exclude("true class: not generated".into()));
            continue;
        };
        let Some(true_k) = tg.parse_outcome.knowledge() else {
            set.exclusions
                .push(exclude(format!("true class: {}", outcome_problem(&tg.parse_outcome))));
            continue;
        };
        set.pairs.push(ErrorPair {
            image_id: r.image_id.clone(),
            predicted_class: p.predicted_class.clone(),
            true_class: p.true_class.clone(),
            predicted_knowledge: pred_k.clone(),
            true_knowledge: true_k.clone(),
        });
    }
    set
}

/// Reads persisted records. An unterminated last line (a write cut short)
/// is ignored; the returned length is where the valid prefix ends.
pub fn read_records_prefix(path: &Path) -> Result<(Vec<PipelineRecord>, u64), PipelineError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    let mut end = 0usize;
    for (i, line) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
        if !line.ends_with(b"\n") {
            break;
        }
        let record: PipelineRecord = serde_json::from_slice(line)
            .map_err(|e| PipelineError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(record);
        end += line.len();
    }
    Ok((records, end as u64))
}

pub fn load_records(run_dir: &Path) -> Result<Vec<PipelineRecord>, PipelineError> {
    Ok(read_records_prefix(&run_dir.join(RECORDS_FILE))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub manifest_entries: usize,
    pub records: usize,
    pub complete: bool,
    pub resumed_with: usize,
    pub written: usize,
    pub correct: usize,
    pub misclassified: usize,
    pub error_pairs: usize,
    pub excluded: usize,
    pub parse_valid: usize,
    pub parse_attempts: usize,
    pub generation_failed: usize,
    /// Generations requested by this invocation, primary and true-class.
    pub generations: usize,
    pub cache_hits: usize,
    pub cache_hit_rate: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub report: Option<RunReport>,
}

struct Prepared {
    classes: ClassList,
    manifest: DatasetManifest,
    gateway: Gateway,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    cfg.validate()?;
    let classes = ClassList::load(&cfg.class_list).map_err(config_err)?;
    if classes.is_empty() {
        return Err(PipelineError::Config("class list is empty".into()));
    }
    let manifest = DatasetManifest::load(&cfg.manifest, &classes).map_err(config_err)?;
    if manifest.entries.is_empty() {
        return Err(PipelineError::Config("manifest has no entries".into()));
    }
    let template = PromptTemplate::by_version(&cfg.template_version).map_err(config_err)?;
    if let Some(r) = &cfg.references {
        load_references(r).map_err(config_err)?;
    }
    embedder_from_spec(&cfg.embedder).map_err(config_err)?;
    if let BackendConfig::Stub {
        confusion: Some(path), ..
    } = &cfg.backend
    {
        ConfusionSpec::load(path)
            .map_err(config_err)?
            .validate(&classes)
            .map_err(config_err)?;
    }
    let cache = ResponseCache::new(cfg.cache_dir.clone().unwrap_or_else(ResponseCache::default_root));
    let gateway = Gateway::from_config(cfg.provider_config()?, template, cache).map_err(config_err)?;
    Ok(Prepared {
        classes,
        manifest,
        gateway,
    })
}

/// Predictions for `pending`, in the same order, with per-image classify
/// latency in milliseconds.
fn classify(
    cfg: &RunConfig,
    p: &Prepared,
    pending: &[&ManifestEntry],
) -> Result<Vec<(PredictionRecord, f64)>, PipelineError> {
    match &cfg.backend {
        BackendConfig::Stub { confusion, seed } => {
            let mut spec = match confusion {
                Some(path) => ConfusionSpec::load(path).map_err(config_err)?,
                None => ConfusionSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = *s;
            }
            // Always classify the whole manifest so resumed runs draw the
            // same random stream.
            let all = stub_classify(&p.manifest.entries, &spec, &p.classes).map_err(config_err)?;
            let mut by_id: HashMap<String, PredictionRecord> =
                all.into_iter().map(|r| (r.image_id.clone(), r)).collect();
            Ok(pending
                .iter()
                .map(|e| (by_id.remove(&e.image_id).expect("stub covers the manifest"), 0.0))
                .collect())
        }
        BackendConfig::Predictions { path } => {
            let recs = load_predictions(path, Some(&p.classes)).map_err(config_err)?;
            let mut by_id: HashMap<String, PredictionRecord> =
                recs.into_iter().map(|r| (r.image_id.clone(), r)).collect();
            pending
                .iter()
                .map(|e| {
                    let r = by_id
                        .remove(&e.image_id)
                        .ok_or_else(|| PipelineError::Config(format!("no prediction for image {}", e.image_id)))?;
                    if r.true_class != e.true_class {
                        return Err(PipelineError::Config(format!(
                            "image {}: prediction file says true class {}, manifest says {}",
                            e.image_id, r.true_class, e.true_class
                        )));
                    }
                    Ok((r, 0.0))
                })
                .collect()
        }
        BackendConfig::Remote(endpoint) => {
            let client = RemoteClassifier::new(endpoint.clone());
            let next = AtomicUsize::new(0);
            let workers = endpoint.max_in_flight.clamp(1, pending.len().max(1));
            let mut results: Vec<Option<Result<(PredictionRecord, f64), PipelineError>>> =
                (0..pending.len()).map(|_| None).collect();
            let slots: Vec<std::sync::Mutex<&mut Option<_>>> = results.iter_mut().map(std::sync::Mutex::new).collect();
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(entry) = pending.get(i) else { break };
                        let started = Instant::now();
                        let r = client
                            .classify(entry, &p.manifest.base_dir, &p.classes)
                            .map(|rec| (rec, round_ms(started.elapsed())))
                            .map_err(|e| PipelineError::Backend(format!("image {}: {e}", entry.image_id)));
                        **slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                    });
                }
            });
            drop(slots);
            results.into_iter().map(|r| r.expect("every slot filled")).collect()
        }
    }
}

fn failed(gw: &Gateway, c: &FoodClass, e: &GenerateError) -> (String, String, ParseOutcome) {
    (
        gw.cache_key(c),
        String::new(),
        ParseOutcome::GenerationFailed {
            kind: e.kind().to_owned(),
            message: e.to_string(),
        },
    )
}

struct Generated {
    record: PipelineRecord,
    requests: usize,
    hits: usize,
}

fn generate_one(gw: &Gateway, pred: PredictionRecord, classify_ms: f64) -> Generated {
    let mut requests = 0;
    let mut hits = 0;
    let mut run = |c: &FoodClass| -> (String, String, ParseOutcome, f64) {
        requests += 1;
        let started = Instant::now();
        match gw.generate(c) {
            Ok(Generation {
                raw,
                outcome,
                from_cache,
                prompt_hash,
                latency_ms,
            }) => {
                hits += usize::from(from_cache);
                (prompt_hash, raw, outcome.into(), latency_ms)
            }
            Err(e) => {
                let (h, raw, o) = failed(gw, c, &e);
                (h, raw, o, round_ms(started.elapsed()))
            }
        }
    };
    let (prompt_hash, raw_response, parse_outcome, gen_ms) = run(&pred.predicted_class);
    let true_class_generation = (!pred.is_correct()).then(|| {
        let (prompt_hash, raw_response, parse_outcome, latency_ms) = run(&pred.true_class);
        TrueClassGeneration {
            prompt_hash,
            raw_response,
            parse_outcome,
            latency_ms,
        }
    });
    Generated {
        record: PipelineRecord {
            image_id: pred.image_id.clone(),
            prediction: pred,
            prompt_hash,
            raw_response,
            parse_outcome,
            latency_ms: Latency {
                classify: classify_ms,
                generate: gen_ms,
            },
            true_class_generation,
        },
        requests,
        hits,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn check_snapshot(run_dir: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
    let path = run_dir.join(SNAPSHOT_FILE);
    let Ok(old) = std::fs::read_to_string(&path) else {
        return Ok(());
    };
    let strip = |s: &str| {
        serde_json::from_str::<serde_json::Value>(s).ok().map(|mut v| {
            if let Some(o) = v.as_object_mut() {
                o.remove("max_parallel");
            }
            v
        })
    };
    if strip(&old) != strip(&cfg.snapshot_json()) {
        return Err(PipelineError::Config(format!(
            "{} was started with a different config; use another run_id or output_dir, or run fresh",
            run_dir.display()
        )));
    }
    Ok(())
}

/// Runs (or resumes) the pipeline for `cfg`. Everything is validated before
/// the run directory is touched.
pub fn run_pipeline(cfg: &RunConfig, opts: RunOptions) -> Result<RunOutcome, PipelineError> {
    let started = Instant::now();
    let prepared = prepare(cfg)?;
    let run_dir = cfg.run_dir();
    let records_path = run_dir.join(RECORDS_FILE);

    let (existing, valid_len) = if opts.fresh {
        (Vec::new(), 0)
    } else {
        check_snapshot(&run_dir, cfg)?;
        read_records_prefix(&records_path)?
    };
    let done: HashSet<&str> = existing.iter().map(|r| r.image_id.as_str()).collect();
    let mut pending: Vec<&ManifestEntry> = prepared
        .manifest
        .entries
        .iter()
        .filter(|e| !done.contains(e.image_id.as_str()))
        .collect();
    pending.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let predictions = classify(cfg, &prepared, &pending)?;

    std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    write_text(&run_dir.join(SNAPSHOT_FILE), &cfg.snapshot_json())?;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(opts.fresh)
        .open(&records_path)
        .map_err(io_err(&records_path))?;
    file.set_len(valid_len).map_err(io_err(&records_path))?;
    let mut writer = std::io::BufWriter::new(file);
    use std::io::Seek;
    writer.seek(std::io::SeekFrom::End(0)).map_err(io_err(&records_path))?;

    let limit = opts.stop_after.unwrap_or(usize::MAX).min(predictions.len());
    let stop = AtomicBool::new(false);
    let next = AtomicUsize::new(0);
    let gw = &prepared.gateway;
    let mut written = 0usize;
    let (mut requests, mut hits) = (0usize, 0usize);
    let (tx, rx) = mpsc::channel::<(usize, Generated)>();
    let write_result: Result<(), PipelineError> = std::thread::scope(|s| {
        let preds = &predictions;
        for _ in 0..cfg.max_parallel.min(limit.max(1)) {
            let tx = tx.clone();
            let (stop, next) = (&stop, &next);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= limit {
                    break;
                }
                let (pred, ms) = preds[i].clone();
                if tx.send((i, generate_one(gw, pred, ms))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single writer: reorder completions back into image_id order.
        let mut buffer: BTreeMap<usize, Generated> = BTreeMap::new();
        for (i, g) in rx {
            buffer.insert(i, g);
            while let Some(g) = buffer.remove(&written) {
                let mut line = serde_json::to_string(&g.record).expect("record serializes");
                line.push('\n');
                writer.write_all(line.as_bytes()).map_err(io_err(&records_path))?;
                writer.flush().map_err(io_err(&records_path))?;
                requests += g.requests;
                hits += g.hits;
                written += 1;
                if written >= limit {
                    stop.store(true, Ordering::SeqCst);
                }
            }
        }
        Ok(())
    });
    write_result?;
    drop(writer);

    let records = load_records(&run_dir)?;
    let complete = records.len() == prepared.manifest.entries.len();
    let set = collect_error_set(&records);
    let (parse_valid, parse_attempts) = report::parse_reliability(&records);
    let correct = records.iter().filter(|r| r.prediction.is_correct()).count();
    let summary = RunSummary {
        run_id: cfg.run_id.clone(),
        manifest_entries: prepared.manifest.entries.len(),
        records: records.len(),
        complete,
        resumed_with: existing.len(),
        written,
        correct,
        misclassified: records.len() - correct,
        error_pairs: set.pairs.len(),
        excluded: set.exclusions.len(),
        parse_valid,
        parse_attempts,
        generation_failed: records.len() - parse_attempts,
        generations: requests,
        cache_hits: hits,
        cache_hit_rate: (requests > 0).then(|| hits as f64 / requests as f64),
        wall_ms: round_ms(started.elapsed()),
    };
    let mut summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    summary_json.push('\n');
    write_text(&run_dir.join(SUMMARY_FILE), &summary_json)?;
    if !complete {
        return Ok(RunOutcome {
            run_dir,
            summary,
            report: None,
        });
    }
    let report = render_run_report(&run_dir, None)?;
    Ok(RunOutcome {
        run_dir,
        summary,
        report: Some(report),
    })
}

fn write_errors(run_dir: &Path, exclusions: &[Exclusion]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for e in exclusions {
        out.push_str(&serde_json::to_string(e).expect("exclusion serializes"));
        out.push('\n');
    }
    write_text(&run_dir.join(ERRORS_FILE), &out)
}

/// SEP over the run's error set, or a note saying why there is none.
pub fn sep_for_records(
    records: &[PipelineRecord],
    embedder: &dyn EmbeddingProvider,
    threshold: f64,
) -> (ErrorSet, Result<crate::sep::SepResult, String>) {
    let set = collect_error_set(records);
    let result = if set.pairs.is_empty() {
        Err("No misclassified image has both generations parsed; SEP is undefined on an empty set.".to_owned())
    } else {
        sep_aggregate(&set.pairs, embedder, threshold).map_err(|e| format!("SEP not computed: {e}"))
    };
    (set, result)
}

/// Re-renders `report.md`, `report.json`, `errors.jsonl` and the tables
/// from a run directory's snapshot and records.
pub fn render_run_report(run_dir: &Path, ratings: Option<&Path>) -> Result<RunReport, PipelineError> {
    let snap_path = run_dir.join(SNAPSHOT_FILE);
    let text = std::fs::read_to_string(&snap_path).map_err(|e| config_err(format!("{}: {e}", snap_path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", snap_path.display())))?;
    let provider = cfg.provider_config()?;
    let records_bytes = std::fs::read(run_dir.join(RECORDS_FILE)).map_err(io_err(&run_dir.join(RECORDS_FILE)))?;
    let records = load_records(run_dir)?;
    if records.is_empty() {
        return Err(PipelineError::Data("run has no records".into()));
    }

    let predictions: Vec<PredictionRecord> = records.iter().map(|r| r.prediction.clone()).collect();
    let classification =
        report::classification_report(&predictions, None, &[1, 5]).map_err(|e| PipelineError::Data(e.to_string()))?;

    let qualitative = match ratings {
        Some(p) => report::ingest_ratings(p).map_err(|e| PipelineError::Data(e.to_string()))?,
        None => Vec::new(),
    };
    let generation = match &cfg.references {
        Some(path) => {
            let refs: ReferenceCorpus = load_references(path).map_err(config_err)?;
            Some(
                report::generation_report(
                    &[(provider.provider_id.clone(), records.clone())],
                    &refs,
                    FieldSelector::Steps,
                    qualitative,
                )
                .map_err(|e| PipelineError::Data(e.to_string()))?,
            )
        }
        None if !qualitative.is_empty() => Some(report::GenerationReport {
            field: FieldSelector::Steps,
            rows: Vec::new(),
            qualitative,
        }),
        None => None,
    };

    let embedder = embedder_from_spec(&cfg.embedder).map_err(config_err)?;
    let (set, sep) = sep_for_records(&records, embedder.as_ref(), cfg.sep_threshold);
    write_errors(run_dir, &set.exclusions)?;
    let (sep, sep_note) = match sep {
        Ok(r) => (Some(report::sep_report(&r)), None),
        Err(note) => (None, Some(note)),
    };

    let report = RunReport {
        meta: ReportMeta {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            run_id: cfg.run_id.clone(),
            provider_id: provider.provider_id.clone(),
            model: provider.model.clone(),
            template_version: cfg.template_version.clone(),
            embedder: embedder.provider_id().to_owned(),
            records_sha256: hex::encode(Sha256::digest(&records_bytes)),
            generated_at_unix: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()),
        },
        classification,
        generation,
        sep,
        sep_note,
        error_set: set.pairs.len(),
        excluded: set.exclusions.len(),
        latency: report::latency_report(&records),
    };
    report.write(run_dir).map_err(|e| match e {
        report::ReportError::Io { path, source } => PipelineError::Io {
            path: path.into(),
            source,
        },
        other => PipelineError::Data(other.to_string()),
    })?;
    Ok(report)
}

//! Sources of classifier predictions: prediction files, a remote inference
//! endpoint, and a seeded error-injecting stub.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http;
use crate::limit::InFlightLimit;
use crate::math::{softmax, top_k, LogitVector};
use crate::model::{FoodClass, PredictionRecord};

/// Confidence the stub assigns to a correct prediction.
pub const STUB_CORRECT_CONFIDENCE: f64 = 0.9;
/// Confidence the stub assigns to an injected error.
pub const STUB_ERROR_CONFIDENCE: f64 = 0.6;
/// Ranked entries kept when a top-k list is derived locally.
pub const DEFAULT_TOP_K: usize = 5;
/// Allowed gap between supplied and recomputed probabilities.
pub const LOGIT_TOLERANCE: f64 = 1e-6;
/// Request header carrying [`ClassList::version`].
pub const CLASS_LIST_HEADER: &str = "X-Class-List-Version";

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateId { line: usize, image_id: String },
    #[error("line {line}: class {class:?} is not in the class list")]
    UnknownClass { line: usize, class: String },
    #[error("bad confusion spec: {0}")]
    BadSpec(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    BadResponse(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VisionError + '_ {
    move |source| VisionError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Ordered class vocabulary; index positions align with logit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassList {
    classes: Vec<FoodClass>,
    index: HashMap<FoodClass, usize>,
}

impl ClassList {
    pub fn new(classes: Vec<FoodClass>) -> Result<Self, VisionError> {
        let mut index = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(VisionError::Schema {
                    line: i + 1,
                    message: format!("duplicate class {c}"),
                });
            }
        }
        Ok(Self { classes, index })
    }

    /// One class id per line; blank lines and `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self, VisionError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut classes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            classes.push(FoodClass::new(line).map_err(|e| VisionError::Schema {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(classes)
    }

    pub fn classes(&self) -> &[FoodClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, c: &FoodClass) -> bool {
        self.index.contains_key(c)
    }

    pub fn index_of(&self, c: &FoodClass) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// First 16 hex digits of SHA-256 over the newline-joined ids.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.classes {
            h.update(c.id().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())[..16].to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub true_class: FoodClass,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative `image_ref` paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Loads line-delimited entries, rejecting duplicate ids and classes
    /// outside `classes`.
    pub fn load(path: &Path, classes: &ClassList) -> Result<Self, VisionError> {
        Self::load_with(path, Some(classes))
    }

    /// As [`DatasetManifest::load`]; `None` accepts any well-formed class.
    pub fn load_with(path: &Path, classes: Option<&ClassList>) -> Result<Self, VisionError> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| VisionError::Schema {
                line: n,
                message: e.to_string(),
            })?;
            if entry.image_id.is_empty() {
                return Err(VisionError::Schema {
                    line: n,
                    message: "empty image_id".into(),
                });
            }
            if classes.is_some_and(|c| !c.contains(&entry.true_class)) {
                return Err(VisionError::UnknownClass {
                    line: n,
                    class: entry.true_class.to_string(),
                });
            }
            if !seen.insert(entry.image_id.clone()) {
                return Err(VisionError::DuplicateId {
                    line: n,
                    image_id: entry.image_id,
                });
            }
            entries.push(entry);
        }
        Ok(Self {
            entries,
            base_dir: path.parent().map(Path::to_owned).unwrap_or_default(),
        })
    }

    /// Sorted distinct true classes.
    pub fn classes(&self) -> Vec<FoodClass> {
        let mut v: Vec<FoodClass> = self.entries.iter().map(|e| e.true_class.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.split).or_default() += 1;
        }
        counts
    }

    pub fn split_proportions(&self) -> BTreeMap<Split, f64> {
        let total = self.entries.len().max(1) as f64;
        self.split_counts()
            .into_iter()
            .map(|(s, n)| (s, n as f64 / total))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct PredictionLine {
    image_id: String,
    true_class: FoodClass,
    predicted_class: FoodClass,
    confidence: f64,
    #[serde(default)]
    top_k: Option<Vec<(FoodClass, f64)>>,
    #[serde(default)]
    logits: Option<Vec<f64>>,
    #[serde(default)]
    source: Option<String>,
}

fn ranked_from_logits(logits: Vec<f64>, classes: &ClassList, k: usize) -> Result<Vec<(FoodClass, f64)>, String> {
    if logits.len() != classes.len() {
        return Err(format!("{} logits for {} classes", logits.len(), classes.len()));
    }
    let probs = softmax(&LogitVector::new(logits).map_err(|e| e.to_string())?);
    let ranked = top_k(&probs, k.min(classes.len())).map_err(|e| e.to_string())?;
    Ok(ranked
        .into_iter()
        .map(|(i, p)| (classes.classes()[i].clone(), p))
        .collect())
}

fn check_against_logits(rec: &mut PredictionRecord, logits: Vec<f64>, classes: &ClassList) -> Result<(), String> {
    let supplied = rec.top_k.take();
    let k = supplied.as_ref().map_or(DEFAULT_TOP_K, Vec::len);
    let ranked = ranked_from_logits(logits, classes, k)?;
    let (head, p_head) = &ranked[0];
    if head != &rec.predicted_class {
        return Err(format!("logits rank {head} first, record says {}", rec.predicted_class));
    }
    if (p_head - rec.confidence).abs() > LOGIT_TOLERANCE {
        return Err(format!("confidence {} differs from softmax {p_head}", rec.confidence));
    }
    if let Some(supplied) = &supplied {
        for ((sc, sp), (rc, rp)) in supplied.iter().zip(&ranked) {
            if sc != rc || (sp - rp).abs() > LOGIT_TOLERANCE {
                return Err(format!("top_k entry ({sc}, {sp}) differs from recomputed ({rc}, {rp})"));
            }
        }
    }
    rec.top_k = Some(supplied.unwrap_or(ranked));
    Ok(())
}

/// Reads a prediction file. Lines carrying `logits` need `classes` to map
/// indices to ids; softmax and top-k are recomputed and must agree with the
/// supplied fields.
pub fn load_predictions(path: &Path, classes: Option<&ClassList>) -> Result<Vec<PredictionRecord>, VisionError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| VisionError::Schema { line: n, message };
        let raw: PredictionLine = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        let mut rec = PredictionRecord {
            image_id: raw.image_id,
            true_class: raw.true_class,
            predicted_class: raw.predicted_class,
            confidence: raw.confidence,
            top_k: raw.top_k,
            source: raw.source,
        };
        rec.validate().map_err(|e| schema(e.to_string()))?;
        if let Some(classes) = classes {
            for c in [&rec.true_class, &rec.predicted_class] {
                if !classes.contains(c) {
                    return Err(VisionError::UnknownClass {
                        line: n,
                        class: c.to_string(),
                    });
                }
            }
        }
        if let Some(logits) = raw.logits {
            let classes = classes.ok_or_else(|| schema("logits present but no class list given".into()))?;
            check_against_logits(&mut rec, logits, classes).map_err(schema)?;
        }
        if !seen.insert(rec.image_id.clone()) {
            return Err(VisionError::DuplicateId {
                line: n,
                image_id: rec.image_id,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), VisionError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_predictions(records, std::io::BufWriter::new(file)).map_err(io_err(path))
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_in_flight() -> usize {
    4
}
fn default_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub endpoint_id: String,
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_k")]
    pub top_k: usize,
}

/// Client for an inference service that takes raw image bytes and answers
/// with `{"logits": [..]}` or `{"top_k": [[class, p], ..]}`.
pub struct RemoteClassifier {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl RemoteClassifier {
    pub fn new(cfg: EndpointConfig) -> Self {
        Self {
            agent: http::agent(Duration::from_millis(cfg.timeout_ms)),
            limit: InFlightLimit::new(cfg.max_in_flight),
            cfg,
        }
    }

    pub fn endpoint_id(&self) -> &str {
        &self.cfg.endpoint_id
    }

    fn image_bytes(&self, entry: &ManifestEntry, base_dir: &Path) -> Result<Vec<u8>, VisionError> {
        let reference = entry
            .image_ref
            .as_deref()
            .ok_or_else(|| VisionError::Transport(format!("{} has no image_ref", entry.image_id)))?;
        if reference.starts_with("http://") || reference.starts_with("https://") {
            return http::get_bytes(&self.agent, reference).map_err(|e| VisionError::Transport(e.to_string()));
        }
        let path = base_dir.join(reference);
        std::fs::read(&path).map_err(io_err(&path))
    }

    pub fn classify(
        &self,
        entry: &ManifestEntry,
        base_dir: &Path,
        classes: &ClassList,
    ) -> Result<PredictionRecord, VisionError> {
        let image = self.image_bytes(entry, base_dir)?;
        let headers = [(CLASS_LIST_HEADER, classes.version())];
        let body = {
            let _permit = self.limit.acquire();
            http::post_bytes(&self.agent, &self.cfg.url, &headers, &image)
        }
        .map_err(|e| VisionError::Transport(e.to_string()))?;
        let ranked = parse_endpoint_response(&body, classes, self.cfg.top_k)?;
        let rec = PredictionRecord {
            image_id: entry.image_id.clone(),
            true_class: entry.true_class.clone(),
            predicted_class: ranked[0].0.clone(),
            confidence: ranked[0].1,
            top_k: Some(ranked),
            source: Some(self.cfg.endpoint_id.clone()),
        };
        rec.validate().map_err(|e| VisionError::BadResponse(e.to_string()))?;
        Ok(rec)
    }
}

/// Ranked (class, probability) pairs from an endpoint body.
pub fn parse_endpoint_response(
    body: &str,
    classes: &ClassList,
    k: usize,
) -> Result<Vec<(FoodClass, f64)>, VisionError> {
    let bad = VisionError::BadResponse;
    let v: Value = serde_json::from_str(body).map_err(|e| bad(format!("not JSON: {e}")))?;
    if let Some(logits) = v.get("logits") {
        let logits: Vec<f64> = serde_json::from_value(logits.clone()).map_err(|e| bad(e.to_string()))?;
        return ranked_from_logits(logits, classes, k.max(1)).map_err(bad);
    }
    if let Some(list) = v.get("top_k") {
        let ranked: Vec<(FoodClass, f64)> = serde_json::from_value(list.clone()).map_err(|e| bad(e.to_string()))?;
        if ranked.is_empty() {
            return Err(bad("empty top_k".into()));
        }
        if let Some((c, _)) = ranked.iter().find(|(c, _)| !classes.contains(c)) {
            return Err(bad(format!("unknown class {c}")));
        }
        return Ok(ranked);
    }
    Err(bad("response has neither logits nor top_k".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRule {
    pub from: FoodClass,
    pub to: FoodClass,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionSpec {
    #[serde(default)]
    pub rules: Vec<ConfusionRule>,
    #[serde(default)]
    pub seed: u64,
}

impl ConfusionSpec {
    pub fn load(path: &Path) -> Result<Self, VisionError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| VisionError::BadSpec(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self, classes: &ClassList) -> Result<(), VisionError> {
        let mut totals: HashMap<&FoodClass, f64> = HashMap::new();
        for r in &self.rules {
            for c in [&r.from, &r.to] {
                if !classes.contains(c) {
                    return Err(VisionError::BadSpec(format!("class {c} is not in the class list")));
                }
            }
            if r.from == r.to {
                return Err(VisionError::BadSpec(format!("rule maps {} to itself", r.from)));
            }
            if !(0.0..=1.0).contains(&r.rate) {
                return Err(VisionError::BadSpec(format!("rate {} outside [0, 1]", r.rate)));
            }
            *totals.entry(&r.from).or_default() += r.rate;
        }
        if let Some((c, t)) = totals.iter().find(|(_, t)| **t > 1.0 + 1e-12) {
            return Err(VisionError::BadSpec(format!("rates from {c} sum to {t}")));
        }
        Ok(())
    }
}

fn stub_ranking(predicted: &FoodClass, truth: &FoodClass, classes: &ClassList) -> Vec<(FoodClass, f64)> {
    let mut ranked = Vec::new();
    if predicted == truth {
        ranked.push((predicted.clone(), STUB_CORRECT_CONFIDENCE));
    } else {
        ranked.push((predicted.clone(), STUB_ERROR_CONFIDENCE));
        let p_true = if classes.len() == 2 {
            1.0 - STUB_ERROR_CONFIDENCE
        } else {
            0.3
        };
        ranked.push((truth.clone(), p_true));
    }
    let rest: Vec<&FoodClass> = classes
        .classes()
        .iter()
        .filter(|c| *c != predicted && *c != truth)
        .collect();
    if !rest.is_empty() {
        let mass = (1.0 - ranked.iter().map(|(_, p)| p).sum::<f64>()).max(0.0) / rest.len() as f64;
        ranked.extend(rest.into_iter().map(|c| (c.clone(), mass)));
    }
    ranked.truncate(DEFAULT_TOP_K);
    ranked
}

/// Predicts every entry correctly except where a rule fires: per entry, in
/// image_id order, one uniform draw is compared against the cumulative rates
/// of the rules leaving its true class.
pub fn stub_classify(
    entries: &[ManifestEntry],
    spec: &ConfusionSpec,
    classes: &ClassList,
) -> Result<Vec<PredictionRecord>, VisionError> {
    spec.validate(classes)?;
    let mut by_from: HashMap<&FoodClass, Vec<&ConfusionRule>> = HashMap::new();
    for r in &spec.rules {
        by_from.entry(&r.from).or_default().push(r);
    }
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(sorted.len());
    for e in sorted {
        let u: f64 = rng.random();
        let mut predicted = &e.true_class;
        let mut cumulative = 0.0;
        for r in by_from.get(&e.true_class).into_iter().flatten() {
            cumulative += r.rate;
            if u < cumulative {
                predicted = &r.to;
                break;
            }
        }
        let ranked = stub_ranking(predicted, &e.true_class, classes);
        out.push(PredictionRecord {
            image_id: e.image_id.clone(),
            true_class: e.true_class.clone(),
            predicted_class: predicted.clone(),
            confidence: ranked[0].1,
            top_k: Some(ranked),
            source: Some("stub".into()),
        });
    }
    Ok(out)
}

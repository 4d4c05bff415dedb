//! Evaluation tables rendered as Markdown, CSV and JSON. Every number comes
//! straight from the metric functions; nothing here recomputes a metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::classification::{
    all_per_class, best_worst_classes, build_confusion, class_rankings, macro_average, map_over_classes,
    top_k_accuracy, ApMode, ClassificationError, ConfusionMatrix, MacroAverage, PerClassScore,
};
use crate::metrics::text::{corpus_bleu, rouge_l_multi, tokenize, ReferenceCorpus, Smoothing, TextMetricError};
use crate::model::{FoodClass, GeneratedKnowledge, PipelineRecord, PredictionRecord};
use crate::sep::{serialize_for_embedding, ErrorKind, SepPair, SepResult};

pub const BEST_WORST_N: usize = 5;
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;
pub const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to report on")]
    EmptyRecords,
    #[error("no reference text for classes: {}", .0.join(", "))]
    MissingReferences(Vec<String>),
    #[error("ratings line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("ratings line {line}: score {score} outside [1, 10]")]
    Range { line: usize, score: f64 },
    #[error(transparent)]
    Classification(#[from] ClassificationError),
    #[error(transparent)]
    Text(#[from] TextMetricError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub k: usize,
    /// `None` when the records carry no ranking deep enough for this `k`.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub records: usize,
    pub top_k: Vec<TopKRow>,
    pub macro_average: MacroAverage,
    pub map_standard: f64,
    pub map_literal: f64,
    pub per_class: Vec<PerClassScore>,
    pub best: Vec<PerClassScore>,
    pub worst: Vec<PerClassScore>,
    #[serde(skip)]
    pub confusion: Option<ConfusionMatrix>,
}

/// `classes` fixes the matrix axes; without it the classes seen in the
/// records are used.
pub fn classification_report(
    records: &[PredictionRecord],
    classes: Option<&[FoodClass]>,
    k_values: &[usize],
) -> Result<ClassificationReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyRecords);
    }
    let axis = match classes {
        Some(c) => c.to_vec(),
        None => crate::metrics::classification::classes_in(records),
    };
    let cm = build_confusion(&axis, records)?;
    let per_class = all_per_class(&cm);
    let (best, worst) = best_worst_classes(&per_class, BEST_WORST_N.min(per_class.len()))?;
    let mut top_k = Vec::new();
    for &k in k_values {
        let accuracy = match top_k_accuracy(records, k) {
            Ok(a) => Some(a),
            Err(ClassificationError::MissingTopK { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        top_k.push(TopKRow { k, accuracy });
    }
    let rankings = class_rankings(&axis, records);
    Ok(ClassificationReport {
        records: records.len(),
        top_k,
        macro_average: macro_average(&per_class),
        map_standard: map_over_classes(&rankings, ApMode::Standard)?,
        map_literal: map_over_classes(&rankings, ApMode::PaperLiteral)?,
        per_class,
        best,
        worst,
        confusion: Some(cm),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldSelector {
    /// Recipe steps joined by spaces.
    #[default]
    Steps,
    /// Name, ingredients, steps and nutrition, as embedded for SEP.
    Full,
}

impl FieldSelector {
    pub fn text(self, k: &GeneratedKnowledge) -> String {
        match self {
            FieldSelector::Steps => k.recipe.steps.join(" "),
            FieldSelector::Full => serialize_for_embedding(k),
        }
    }
}

impl std::str::FromStr for FieldSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steps" => Ok(FieldSelector::Steps),
            "full" => Ok(FieldSelector::Full),
            other => Err(format!("unknown field {other:?}; expected steps or full")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub provider: String,
    pub candidates: usize,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub parse_valid: usize,
    pub parse_attempts: usize,
    pub parse_reliability: Option<f64>,
    pub generation_failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingDimension {
    Relevance,
    FactualAccuracy,
    Coherence,
}

impl RatingDimension {
    pub fn label(self) -> &'static str {
        match self {
            RatingDimension::Relevance => "Relevance",
            RatingDimension::FactualAccuracy => "Factual Accuracy",
            RatingDimension::Coherence => "Coherence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub provider: String,
    pub dimension: RatingDimension,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub field: FieldSelector,
    pub rows: Vec<GenerationRow>,
    pub qualitative: Vec<RatingRow>,
}

/// Parse reliability of the primary generations: valid parses over
/// responses actually received.
pub fn parse_reliability(records: &[PipelineRecord]) -> (usize, usize) {
    let attempts = records.iter().filter(|r| r.parse_outcome.has_response()).count();
    let valid = records.iter().filter(|r| r.parse_outcome.is_knowledge()).count();
    (valid, attempts)
}

/// Scores each provider's primary generations against the references for
/// the class it was asked about. BLEU-4 is corpus-level; ROUGE-L is the mean
/// of the best F over each class's references.
pub fn generation_report(
    runs: &[(String, Vec<PipelineRecord>)],
    references: &ReferenceCorpus,
    field: FieldSelector,
    qualitative: Vec<RatingRow>,
) -> Result<GenerationReport, ReportError> {
    let mut missing: Vec<String> = runs
        .iter()
        .flat_map(|(_, recs)| recs.iter())
        .filter(|r| r.parse_outcome.is_knowledge())
        .map(|r| &r.prediction.predicted_class)
        .filter(|c| references.get(*c).is_none_or(Vec::is_empty))
        .map(|c| c.id().to_owned())
        .collect();
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(ReportError::MissingReferences(missing));
    }

    let mut rows = Vec::new();
    for (provider, records) in runs {
        let mut segments = Vec::new();
        for r in records {
            if let Some(k) = r.parse_outcome.knowledge() {
                let refs = references[&r.prediction.predicted_class]
                    .iter()
                    .map(|t| tokenize(t))
                    .collect();
                segments.push((tokenize(&field.text(k)), refs));
            }
        }
        let (bleu4, rouge) = if segments.is_empty() {
            (None, None)
        } else {
            let bleu = corpus_bleu(&segments, 4, Smoothing::None)?;
            let mut total = 0.0;
            for (c, refs) in &segments {
                total += rouge_l_multi(c, refs, 1.0)?.f;
            }
            (Some(bleu), Some(total / segments.len() as f64))
        };
        let (valid, attempts) = parse_reliability(records);
        rows.push(GenerationRow {
            provider: provider.clone(),
            candidates: segments.len(),
            bleu4,
            rouge_l: rouge,
            parse_valid: valid,
            parse_attempts: attempts,
            parse_reliability: (attempts > 0).then(|| valid as f64 / attempts as f64),
            generation_failed: records.len() - attempts,
        });
    }
    Ok(GenerationReport {
        field,
        rows,
        qualitative,
    })
}

#[derive(Debug, Deserialize)]
struct RatingLine {
    provider: String,
    dimension: String,
    score: f64,
}

/// Reads `provider,dimension,score` rows and averages per (provider,
/// dimension). An empty file yields no rows.
pub fn ingest_ratings(path: &Path) -> Result<Vec<RatingRow>, ReportError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| ReportError::Schema {
        line: 1,
        message: e.to_string(),
    })?;
    if header != vec!["provider", "dimension", "score"] {
        return Err(ReportError::Schema {
            line: 1,
            message: "header must be provider,dimension,score".into(),
        });
    }
    let mut sums: BTreeMap<(String, RatingDimension), (f64, usize)> = BTreeMap::new();
    for (i, row) in reader.deserialize::<RatingLine>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| ReportError::Schema {
            line,
            message: e.to_string(),
        })?;
        let dimension: RatingDimension = serde_json::from_value(serde_json::Value::String(row.dimension.clone()))
            .map_err(|_| ReportError::Schema {
                line,
                message: format!("unknown dimension {:?}", row.dimension),
            })?;
        if !(1.0..=10.0).contains(&row.score) {
            return Err(ReportError::Range { line, score: row.score });
        }
        let e = sums.entry((row.provider, dimension)).or_default();
        e.0 += row.score;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|((provider, dimension), (sum, n))| RatingRow {
            provider,
            dimension,
            mean: sum / n as f64,
            n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepRow {
    pub case: ErrorKind,
    pub label: String,
    /// Most frequent confusion in this case, as display names.
    pub example: Option<String>,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepReport {
    pub provider_id: String,
    pub threshold: f64,
    pub pairs: usize,
    pub mean_overall: f64,
    pub rows: Vec<SepRow>,
    pub per_pair: Vec<SepPair>,
    pub histogram: Vec<HistogramBin>,
}

pub fn histogram(values: impl IntoIterator<Item = f64>) -> Vec<HistogramBin> {
    let mut counts = [0usize; HISTOGRAM_BINS];
    for v in values {
        let i = ((v / HISTOGRAM_BIN_WIDTH).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[i] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            lo: i as f64 * HISTOGRAM_BIN_WIDTH,
            hi: (i + 1) as f64 * HISTOGRAM_BIN_WIDTH,
            count,
        })
        .collect()
}

pub fn sep_report(sep: &SepResult) -> SepReport {
    let mut rows = Vec::new();
    for (&case, &mean) in &sep.mean_by_case {
        let in_case: Vec<&SepPair> = sep.per_pair.iter().filter(|p| p.case == case).collect();
        let mut freq: BTreeMap<(&FoodClass, &FoodClass), usize> = BTreeMap::new();
        for p in &in_case {
            *freq.entry((&p.true_class, &p.predicted_class)).or_default() += 1;
        }
        // Highest count wins; BTreeMap order breaks ties.
        let example = freq
            .iter()
            .fold(None::<(&(&FoodClass, &FoodClass), usize)>, |best, (k, &n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((k, n)),
            })
            .map(|((t, p), _)| format!("{} → {}", t.display_name(), p.display_name()));
        rows.push(SepRow {
            case,
            label: case.label().to_owned(),
            example,
            count: in_case.len(),
            mean,
        });
    }
    SepReport {
        provider_id: sep.provider_id.clone(),
        threshold: sep.threshold,
        pairs: sep.per_pair.len(),
        mean_overall: sep.mean_overall,
        rows,
        per_pair: sep.per_pair.clone(),
        histogram: histogram(sep.per_pair.iter().map(|p| p.d_sem)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentiles; `None` for an empty sample.
pub fn percentiles(values: &[f64]) -> Option<Percentiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    Some(Percentiles {
        p50: rank(0.5),
        p90: rank(0.9),
        p99: rank(0.99),
        max: v[v.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub classify_ms: Option<Percentiles>,
    pub generate_ms: Option<Percentiles>,
}

pub fn latency_report(records: &[PipelineRecord]) -> LatencyReport {
    let classify: Vec<f64> = records.iter().map(|r| r.latency_ms.classify).collect();
    let generate: Vec<f64> = records.iter().map(|r| r.latency_ms.generate).collect();
    LatencyReport {
        classify_ms: percentiles(&classify),
        generate_ms: percentiles(&generate),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool_version: String,
    pub run_id: String,
    pub provider_id: String,
    pub model: String,
    pub template_version: String,
    pub embedder: String,
    /// SHA-256 of `records.jsonl`.
    pub records_sha256: String,
    /// Only set when `SOURCE_DATE_EPOCH` is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
}

/// Everything rendered for one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub classification: ClassificationReport,
    pub generation: Option<GenerationReport>,
    pub sep: Option<SepReport>,
    /// Why the SEP section is absent, when it is.
    pub sep_note: Option<String>,
    pub error_set: usize,
    pub excluded: usize,
    pub latency: LatencyReport,
}

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map_or_else(|| "n/a".to_owned(), f)
}

pub fn render_classification_md(c: &ClassificationReport, out: &mut String) {
    let _ = writeln!(out, "## Classification\n");
    let _ = writeln!(out, "Records: {}\n", c.records);
    let _ = writeln!(out, "| Metric | Value |\n|---|---|");
    for row in &c.top_k {
        let _ = writeln!(out, "| Top-{} accuracy | {} |", row.k, opt(row.accuracy, pct));
    }
    let m = &c.macro_average;
    let _ = writeln!(out, "| Macro precision | {} |", num(m.precision));
    let _ = writeln!(out, "| Macro recall | {} |", num(m.recall));
    let _ = writeln!(out, "| Macro F1 | {} |", num(m.f1));
    let _ = writeln!(out, "| mAP | {} |", num(c.map_standard));
    let _ = writeln!(out, "| mAP (unnormalized AP sum) | {} |\n", num(c.map_literal));

    let _ = writeln!(out, "### Worst and best classes by F1\n");
    let _ = writeln!(out, "| Worst class | F1 | Best class | F1 |\n|---|---|---|---|");
    for i in 0..c.best.len().max(c.worst.len()) {
        let cell = |v: Option<&PerClassScore>| {
            v.map_or((String::new(), String::new()), |s| (s.class.display_name(), num(s.f1)))
        };
        let (wn, wf) = cell(c.worst.get(i));
        let (bn, bf) = cell(c.best.get(i));
        let _ = writeln!(out, "| {wn} | {wf} | {bn} | {bf} |");
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "### Per-class scores\n");
    let _ = writeln!(
        out,
        "| Class | Precision | Recall | F1 | Support |\n|---|---|---|---|---|"
    );
    for s in &c.per_class {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            s.class.id(),
            num(s.precision),
            num(s.recall),
            num(s.f1),
            s.support
        );
    }
    let _ = writeln!(out);
}

pub fn render_generation_md(g: &GenerationReport, out: &mut String) {
    let field = match g.field {
        FieldSelector::Steps => "recipe steps",
        FieldSelector::Full => "full knowledge text",
    };
    let _ = writeln!(out, "## Generation quality\n");
    let _ = writeln!(out, "Scored field: {field}.\n");
    let _ = writeln!(
        out,
        "| Provider | Candidates | BLEU-4 | ROUGE-L | Parse reliability | Generation failures |\n|---|---|---|---|---|---|"
    );
    for r in &g.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} ({}/{}) | {} |",
            r.provider,
            r.candidates,
            opt(r.bleu4, num),
            opt(r.rouge_l, num),
            opt(r.parse_reliability, pct),
            r.parse_valid,
            r.parse_attempts,
            r.generation_failed
        );
    }
    let _ = writeln!(out);
    if !g.qualitative.is_empty() {
        let _ = writeln!(out, "### Human ratings (1-10)\n");
        let _ = writeln!(out, "| Provider | Dimension | Mean | Ratings |\n|---|---|---|---|");
        for r in &g.qualitative {
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} | {} |",
                r.provider,
                r.dimension.label(),
                r.mean,
                r.n
            );
        }
        let _ = writeln!(out);
    }
}

pub fn render_sep_md(s: &SepReport, out: &mut String) {
    let _ = writeln!(out, "## Semantic error propagation\n");
    let _ = writeln!(
        out,
        "Embedder: {}. Pairs: {}. Case threshold: {}.\n",
        s.provider_id, s.pairs, s.threshold
    );
    let _ = writeln!(
        out,
        "| Classification error type | Pairs | Average SEP |\n|---|---|---|"
    );
    for r in &s.rows {
        let _ = writeln!(out, "| {} | {} | {} |", r.label, r.count, num(r.mean));
        if let Some(e) = &r.example {
            let _ = writeln!(out, "| (e.g., {e}) | | |");
        }
    }
    let _ = writeln!(out, "| Overall | {} | {} |\n", s.pairs, num(s.mean_overall));
    let _ = writeln!(out, "### Pairs\n");
    let _ = writeln!(
        out,
        "| Image | True | Predicted | d_sem | Case |\n|---|---|---|---|---|"
    );
    for p in &s.per_pair {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:?} |",
            p.image_id,
            p.true_class.id(),
            p.predicted_class.id(),
            num(p.d_sem),
            p.case
        );
    }
    let _ = writeln!(out);
}

fn render_latency_md(l: &LatencyReport, out: &mut String) {
    let _ = writeln!(out, "## Latency\n");
    let _ = writeln!(
        out,
        "Observed on this machine and backend configuration; environment-specific, not comparable across setups. Cached generations replay the latency of the original request.\n"
    );
    let _ = writeln!(
        out,
        "| Stage | p50 ms | p90 ms | p99 ms | max ms |\n|---|---|---|---|---|"
    );
    for (name, p) in [("classify", &l.classify_ms), ("generate", &l.generate_ms)] {
        if let Some(p) = p {
            let _ = writeln!(
                out,
                "| {name} | {:.3} | {:.3} | {:.3} | {:.3} |",
                p.p50, p.p90, p.p99, p.max
            );
        }
    }
    let _ = writeln!(out);
}

impl RunReport {
    pub fn to_markdown(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "# Run report: {}\n", m.run_id);
        let _ = writeln!(out, "- tool version: {}", m.tool_version);
        let _ = writeln!(out, "- provider: {} (model {})", m.provider_id, m.model);
        let _ = writeln!(out, "- template version: {}", m.template_version);
        let _ = writeln!(out, "- embedder: {}", m.embedder);
        let _ = writeln!(out, "- records sha256: {}", m.records_sha256);
        if let Some(t) = m.generated_at_unix {
            let _ = writeln!(out, "- generated at (unix): {t}");
        }
        let _ = writeln!(out);
        render_classification_md(&self.classification, &mut out);
        if let Some(g) = &self.generation {
            render_generation_md(g, &mut out);
        }
        let _ = writeln!(
            out,
            "Misclassified images with both generations parsed: {} (excluded: {}).\n",
            self.error_set, self.excluded
        );
        match (&self.sep, &self.sep_note) {
            (Some(s), _) => render_sep_md(s, &mut out),
            (None, Some(note)) => {
                let _ = writeln!(out, "## Semantic error propagation\n\n{note}\n");
            }
            (None, None) => {}
        }
        render_latency_md(&self.latency, &mut out);
        out
    }

    /// Writes `report.md`, `report.json`, `confusion.csv` and `tables/*.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        let tables = dir.join("tables");
        std::fs::create_dir_all(&tables).map_err(io_err(&tables))?;
        write_file(&dir.join("report.md"), self.to_markdown().as_bytes())?;
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        write_file(&dir.join("report.json"), json.as_bytes())?;

        if let Some(cm) = &self.classification.confusion {
            write_csv(&dir.join("confusion.csv"), |w| cm.write_csv(w, true))?;
            write_csv(&tables.join("confusion_counts.csv"), |w| cm.write_csv(w, false))?;
        }
        write_csv(&tables.join("per_class.csv"), |w| {
            crate::metrics::classification::write_per_class_csv(&self.classification.per_class, w)
        })?;
        self.write_tables(&tables)
    }

    fn write_tables(&self, tables: &Path) -> Result<(), ReportError> {
        let f6 = |v: f64| format!("{v:.6}");
        let o6 = |v: Option<f64>| v.map(f6).unwrap_or_default();
        let c = &self.classification;
        let mut rows = vec![vec!["metric".to_owned(), "value".to_owned()]];
        for r in &c.top_k {
            rows.push(vec![format!("top{}_accuracy", r.k), o6(r.accuracy)]);
        }
        rows.push(vec!["macro_precision".into(), f6(c.macro_average.precision)]);
        rows.push(vec!["macro_recall".into(), f6(c.macro_average.recall)]);
        rows.push(vec!["macro_f1".into(), f6(c.macro_average.f1)]);
        rows.push(vec!["map".into(), f6(c.map_standard)]);
        rows.push(vec!["map_unnormalized".into(), f6(c.map_literal)]);
        write_rows(&tables.join("classification.csv"), &rows)?;

        let mut rows = vec![vec![
            "rank".to_owned(),
            "worst_class".into(),
            "worst_f1".into(),
            "best_class".into(),
            "best_f1".into(),
        ]];
        for i in 0..c.best.len().max(c.worst.len()) {
            let w = c.worst.get(i);
            let b = c.best.get(i);
            rows.push(vec![
                (i + 1).to_string(),
                w.map(|s| s.class.id().to_owned()).unwrap_or_default(),
                w.map(|s| f6(s.f1)).unwrap_or_default(),
                b.map(|s| s.class.id().to_owned()).unwrap_or_default(),
                b.map(|s| f6(s.f1)).unwrap_or_default(),
            ]);
        }
        write_rows(&tables.join("best_worst.csv"), &rows)?;

        if let Some(g) = &self.generation {
            let mut rows = vec![[
                "provider",
                "candidates",
                "bleu4",
                "rouge_l",
                "parse_valid",
                "parse_attempts",
                "parse_reliability",
                "generation_failed",
            ]
            .map(String::from)
            .to_vec()];
            for r in &g.rows {
                rows.push(vec![
                    r.provider.clone(),
                    r.candidates.to_string(),
                    o6(r.bleu4),
                    o6(r.rouge_l),
                    r.parse_valid.to_string(),
                    r.parse_attempts.to_string(),
                    o6(r.parse_reliability),
                    r.generation_failed.to_string(),
                ]);
            }
            write_rows(&tables.join("generation.csv"), &rows)?;
            let mut rows = vec![["provider", "dimension", "mean", "n"].map(String::from).to_vec()];
            for r in &g.qualitative {
                let dim = serde_json::to_value(r.dimension).expect("enum serializes");
                rows.push(vec![
                    r.provider.clone(),
                    dim.as_str().unwrap_or_default().to_owned(),
                    f6(r.mean),
                    r.n.to_string(),
                ]);
            }
            write_rows(&tables.join("qualitative.csv"), &rows)?;
        }

        if let Some(s) = &self.sep {
            let mut rows = vec![["case", "label", "example", "pairs", "mean_sep"]
                .map(String::from)
                .to_vec()];
            for r in &s.rows {
                rows.push(vec![
                    format!("{:?}", r.case),
                    r.label.clone(),
                    r.example.clone().unwrap_or_default(),
                    r.count.to_string(),
                    f6(r.mean),
                ]);
            }
            rows.push(vec![
                "Overall".into(),
                "Overall".into(),
                String::new(),
                s.pairs.to_string(),
                f6(s.mean_overall),
            ]);
            write_rows(&tables.join("sep_summary.csv"), &rows)?;
            let mut rows = vec![["image_id", "true_class", "predicted_class", "d_sem", "case"]
                .map(String::from)
                .to_vec()];
            for p in &s.per_pair {
                rows.push(vec![
                    p.image_id.clone(),
                    p.true_class.id().to_owned(),
                    p.predicted_class.id().to_owned(),
                    f6(p.d_sem),
                    format!("{:?}", p.case),
                ]);
            }
            write_rows(&tables.join("sep_pairs.csv"), &rows)?;
            let mut rows = vec![["bin_lo", "bin_hi", "count"].map(String::from).to_vec()];
            for b in &s.histogram {
                rows.push(vec![
                    format!("{:.2}", b.lo),
                    format!("{:.2}", b.hi),
                    b.count.to_string(),
                ]);
            }
            write_rows(&tables.join("sep_histogram.csv"), &rows)?;
        }

        let mut rows = vec![["stage", "p50_ms", "p90_ms", "p99_ms", "max_ms"]
            .map(String::from)
            .to_vec()];
        for (name, p) in [
            ("classify", &self.latency.classify_ms),
            ("generate", &self.latency.generate_ms),
        ] {
            if let Some(p) = p {
                rows.push(vec![name.to_owned(), f6(p.p50), f6(p.p90), f6(p.p99), f6(p.max)]);
            }
        }
        write_rows(&tables.join("latency.csv"), &rows)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<(), ReportError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    write_file(path, &buf)
}

fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<(), ReportError> {
    write_csv(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

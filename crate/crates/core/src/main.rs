use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use plateline::gateway::ResponseCache;
use plateline::metrics::text::{load_references, TextMetricError};
use plateline::pipeline::{self, Overrides, PipelineError, RunConfig, RunOptions};
use plateline::report::{self, FieldSelector, ReportError};
use plateline::sep::{self, SepError};
use plateline::vision::{self, ClassList, ConfusionSpec, DatasetManifest, VisionError};

#[derive(Parser)]
#[command(
    name = "plateline",
    version,
    about = "Decoupled food recognition pipeline and evaluation toolkit"
)]
struct Cli {
    /// Print machine-readable JSON on stdout; diagnostics go to stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a manifest, generate knowledge per image and write reports.
    Run(RunArgs),
    /// Evaluate existing predictions or records.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write a prediction file from a manifest with seeded error injection.
    StubClassify(StubArgs),
    /// Re-render the reports of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Human ratings CSV (provider,dimension,score).
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Inspect or clear cached provider responses.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Seed for the stub classifier.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    template_version: Option<String>,
    /// Discard existing records instead of resuming.
    #[arg(long)]
    fresh: bool,
    /// Stop after persisting this many new records.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Classification metrics from a prediction file.
    Cls {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        /// Class list; required when the file carries logits.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Also write confusion.csv and tables here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BLEU-4, ROUGE-L and parse reliability of one or more runs.
    Gen {
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value = "steps")]
        field: FieldSelector,
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Semantic error propagation over a run's misclassified images.
    Sep {
        #[arg(long)]
        records: PathBuf,
        /// stub, file:PATH or remote:PATH (a remote embedder config file).
        #[arg(long, default_value = "stub")]
        embedder: String,
        #[arg(long, default_value_t = sep::DEFAULT_CASE_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Args)]
struct StubArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    confusion: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Class list; defaults to the classes named by the manifest and rules.
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CacheAction {
    Ls {
        #[arg(long)]
        provider: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    Clear {
        #[arg(long)]
        provider: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

const CONFIG: u8 = 1;
const BACKEND: u8 = 2;
const DATA: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::new(e.exit_code() as u8, e)
    }
}

impl From<VisionError> for Failure {
    fn from(e: VisionError) -> Self {
        let code = match e {
            VisionError::Io { .. } | VisionError::BadSpec(_) => CONFIG,
            VisionError::Transport(_) | VisionError::BadResponse(_) => BACKEND,
            VisionError::Schema { .. } | VisionError::DuplicateId { .. } | VisionError::UnknownClass { .. } => DATA,
        };
        Failure::new(code, e)
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let code = match e {
            ReportError::Io { .. } => CONFIG,
            _ => DATA,
        };
        Failure::new(code, e)
    }
}

impl From<TextMetricError> for Failure {
    fn from(e: TextMetricError) -> Self {
        let code = match e {
            TextMetricError::Io { .. } => CONFIG,
            _ => DATA,
        };
        Failure::new(code, e)
    }
}

impl From<SepError> for Failure {
    fn from(e: SepError) -> Self {
        let code = match e {
            SepError::ProviderUnavailable(_) | SepError::QuotaExceeded(_) => BACKEND,
            _ => DATA,
        };
        Failure::new(code, e)
    }
}

/// What a command hands back: JSON for `--json`, text otherwise.
struct Output {
    json: serde_json::Value,
    text: String,
}

impl Output {
    fn new(value: &impl Serialize, text: String) -> Self {
        Self {
            json: serde_json::to_value(value).expect("output serializes"),
            text,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(out) => {
            // A closed pipe (`| head`) is not an error worth reporting.
            let mut stdout = std::io::stdout().lock();
            let _ = if cli.json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&out.json).expect("json"))
            } else {
                write!(stdout, "{}", out.text)
            };
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            if cli.json {
                let _ = writeln!(
                    std::io::stdout(),
                    "{}",
                    json!({"error": {"code": f.code, "message": f.message}})
                );
            }
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<Output, Failure> {
    match command {
        Command::Run(args) => run(args),
        Command::Eval(EvalCommand::Cls {
            predictions,
            k,
            classes,
            out,
        }) => eval_cls(predictions, k, classes, out),
        Command::Eval(EvalCommand::Gen {
            records,
            references,
            field,
            ratings,
        }) => eval_gen(records, references, field, ratings),
        Command::Eval(EvalCommand::Sep {
            records,
            embedder,
            threshold,
        }) => eval_sep(records, embedder, threshold),
        Command::StubClassify(args) => stub_classify(args),
        Command::Report { run, ratings } => {
            let report = pipeline::render_run_report(&run, ratings.as_deref())?;
            let text = format!("{}\nReports written to {}\n", report.to_markdown(), run.display());
            Ok(Output::new(&report, text))
        }
        Command::Cache { action } => cache(action),
    }
}

fn run(args: RunArgs) -> Result<Output, Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        run_id: args.run_id,
        output_dir: args.output_dir,
        max_parallel: args.max_parallel,
        seed: args.seed,
        cache_dir: args.cache_dir,
        embedder: args.embedder,
        template_version: args.template_version,
    });
    let out = pipeline::run_pipeline(
        &cfg,
        RunOptions {
            stop_after: args.stop_after,
            fresh: args.fresh,
        },
    )?;
    let s = &out.summary;
    let mut text = format!(
        "run {}: {}/{} records ({} new), {} misclassified, {} SEP pairs, {} excluded\n",
        s.run_id, s.records, s.manifest_entries, s.written, s.misclassified, s.error_pairs, s.excluded
    );
    text.push_str(&format!(
        "parse reliability: {}/{}; generation failures: {}; cache hits: {}/{}\n",
        s.parse_valid, s.parse_attempts, s.generation_failed, s.cache_hits, s.generations
    ));
    if !s.complete {
        text.push_str("run stopped early; rerun to resume\n");
    }
    text.push_str(&format!("output: {}\n", out.run_dir.display()));
    Ok(Output::new(
        &json!({"run_dir": out.run_dir, "summary": out.summary}),
        text,
    ))
}

fn eval_cls(
    predictions: PathBuf,
    k: Vec<usize>,
    classes: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<Output, Failure> {
    if k.contains(&0) {
        return Err(Failure::new(CONFIG, "--k values must be >= 1"));
    }
    let classes = classes.map(|p| ClassList::load(&p)).transpose()?;
    let records = vision::load_predictions(&predictions, classes.as_ref())?;
    let rep = report::classification_report(&records, None, &k)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("tables")).map_err(|e| Failure::new(CONFIG, e))?;
        let cm = rep.confusion.as_ref().expect("report carries its matrix");
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> csv::Result<()>| {
            let mut buf = Vec::new();
            f(&mut buf).map_err(|e| Failure::new(CONFIG, e))?;
            std::fs::write(dir.join(name), buf).map_err(|e| Failure::new(CONFIG, e))
        };
        write("confusion.csv", &|w| cm.write_csv(w, true))?;
        write("tables/confusion_counts.csv", &|w| cm.write_csv(w, false))?;
        write("tables/per_class.csv", &|w| {
            plateline::metrics::classification::write_per_class_csv(&rep.per_class, w)
        })?;
    }
    let mut text = String::new();
    report::render_classification_md(&rep, &mut text);
    Ok(Output::new(&rep, text))
}

fn eval_gen(
    dirs: Vec<PathBuf>,
    references: PathBuf,
    field: FieldSelector,
    ratings: Option<PathBuf>,
) -> Result<Output, Failure> {
    let refs = load_references(&references)?;
    let mut runs = Vec::new();
    for dir in dirs {
        let records = pipeline::load_records(&dir)?;
        if records.is_empty() {
            return Err(Failure::new(DATA, format!("{}: no records", dir.display())));
        }
        runs.push((provider_label(&dir), records));
    }
    let qualitative = ratings
        .map(|p| report::ingest_ratings(&p))
        .transpose()?
        .unwrap_or_default();
    let rep = report::generation_report(&runs, &refs, field, qualitative)?;
    let mut text = String::new();
    report::render_generation_md(&rep, &mut text);
    Ok(Output::new(&rep, text))
}

/// Provider id from the run snapshot, else the directory name.
fn provider_label(dir: &std::path::Path) -> String {
    std::fs::read_to_string(dir.join(pipeline::SNAPSHOT_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<RunConfig>(&s).ok())
        .and_then(|c| c.provider_config().ok().map(|p| p.provider_id.clone()))
        .unwrap_or_else(|| dir.file_name().unwrap_or_default().to_string_lossy().into_owned())
}

fn eval_sep(dir: PathBuf, embedder: String, threshold: f64) -> Result<Output, Failure> {
    if !(0.0..=2.0).contains(&threshold) {
        return Err(Failure::new(CONFIG, "--threshold must be within [0, 2]"));
    }
    let records = pipeline::load_records(&dir)?;
    let provider = sep::embedder_from_spec(&embedder)?;
    let set = pipeline::collect_error_set(&records);
    for e in &set.exclusions {
        eprintln!("excluded {}: {}", e.image_id, e.reason);
    }
    let result = sep::sep_aggregate(&set.pairs, provider.as_ref(), threshold)?;
    let rep = report::sep_report(&result);
    let mut text = String::new();
    report::render_sep_md(&rep, &mut text);
    text.push_str(&format!("Excluded misclassified images: {}\n", set.exclusions.len()));
    Ok(Output::new(
        &json!({"sep": rep, "by_confusion": result.by_confusion, "exclusions": set.exclusions}),
        text,
    ))
}

fn stub_classify(args: StubArgs) -> Result<Output, Failure> {
    let mut spec = match &args.confusion {
        Some(p) => ConfusionSpec::load(p)?,
        None => ConfusionSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (manifest, classes) = match &args.classes {
        Some(p) => {
            let classes = ClassList::load(p)?;
            (DatasetManifest::load(&args.manifest, &classes)?, classes)
        }
        None => {
            let manifest = DatasetManifest::load_with(&args.manifest, None)?;
            let mut all = manifest.classes();
            all.extend(spec.rules.iter().flat_map(|r| [r.from.clone(), r.to.clone()]));
            all.sort();
            all.dedup();
            (manifest, ClassList::new(all)?)
        }
    };
    let records = vision::stub_classify(&manifest.entries, &spec, &classes)?;
    vision::save_predictions(&args.out, &records)?;
    let wrong = records.iter().filter(|r| !r.is_correct()).count();
    let text = format!(
        "wrote {} predictions ({} injected errors, seed {}) to {}\n",
        records.len(),
        wrong,
        spec.seed,
        args.out.display()
    );
    Ok(Output::new(
        &json!({"out": args.out, "records": records.len(), "injected_errors": wrong, "seed": spec.seed}),
        text,
    ))
}

fn cache(action: CacheAction) -> Result<Output, Failure> {
    let open = |dir: Option<PathBuf>| ResponseCache::new(dir.unwrap_or_else(ResponseCache::default_root));
    let io = |e: std::io::Error| Failure::new(CONFIG, e);
    match action {
        CacheAction::Ls { provider, cache_dir } => {
            let cache = open(cache_dir);
            let metas = cache.list(&provider).map_err(io)?;
            let mut text = String::new();
            for m in &metas {
                text.push_str(&format!(
                    "{}  {}  {}  {}  {:.3} ms\n",
                    m.key, m.class_id, m.model, m.template_version, m.latency_ms
                ));
            }
            text.push_str(&format!(
                "{} entries under {}\n",
                metas.len(),
                cache.root().join(&provider).display()
            ));
            Ok(Output::new(&metas, text))
        }
        CacheAction::Clear { provider, cache_dir } => {
            let removed = open(cache_dir).clear(&provider).map_err(io)?;
            Ok(Output::new(
                &json!({"provider": provider, "removed": removed}),
                format!("removed {removed} entries for {provider}\n"),
            ))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use invoicegrid::corpus::{
    cmd_generate, cmd_gridify, cmd_targets, cmd_validate, with_workers, Corpus, CorpusConfig,
    EmbeddingSource, RunReport, Split, LEXICON_DIR_ENV, TEMPLATE_DIR_ENV,
};
use invoicegrid::evaluate::{eval_predictions, oracle_eval, EvalOptions, EvalReport};
use invoicegrid::render::WordSource;
use invoicegrid::targets::InputKind;
use invoicegrid::tensorio::write_atomic;

#[derive(Parser)]
#[command(
    name = "invoicegrid",
    version,
    about = "Synthetic invoice corpora, grid tensors and field-level evaluation"
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads. Output bytes do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render PDFs and annotations and write the manifest.
    Generate(GenerateArgs),
    /// Write the model-input grid for every document.
    Gridify(GridifyArgs),
    /// Write semantic, box-mask and box-delta targets for every document.
    Targets(CorpusArg),
    /// Score ground-truth masks.
    OracleEval(EvalArgs),
    /// Score predicted class masks read from `--pred-dir`.
    Eval(PredArgs),
    /// Check annotations, PDFs and manifest consistency.
    Validate(CorpusArg),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = TEMPLATE_DIR_ENV)]
    template_dir: Option<PathBuf>,
    #[arg(long, env = LEXICON_DIR_ENV)]
    lexicon_dir: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// chargrid or wordgrid; recorded for the later `gridify` step.
    #[arg(long)]
    input_kind: Option<InputKind>,
    /// Embedding sidecar file for wordgrid input instead of hashed vectors.
    #[arg(long)]
    embedding_sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory; defaults to the config's `out_dir`.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct GridifyArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    /// Overrides the manifest's input kind.
    #[arg(long)]
    kind: Option<InputKind>,
    #[arg(long)]
    embedding_sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    /// exact or ocr.
    #[arg(long, default_value = "exact")]
    word_source: WordSource,
    /// A word belongs to a region when strictly more than this fraction of
    /// its area lies inside.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Components smaller than this many cells are ignored.
    #[arg(long, default_value_t = 4)]
    min_area: usize,
    /// Only evaluate one split.
    #[arg(long)]
    split: Option<Split>,
    /// Where to write the JSON report; defaults to a file in the corpus.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Directory holding `{id}.sem.t` class masks.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Row label in the printed table.
    #[arg(long, default_value = "Prediction")]
    name: String,
}

fn load_config(path: Option<&Path>) -> Result<CorpusConfig> {
    match path {
        Some(p) => CorpusConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(CorpusConfig::default()),
    }
}

fn corpus_dir(arg: &CorpusArg, config: &CorpusConfig) -> PathBuf {
    arg.corpus.clone().unwrap_or_else(|| config.out_dir.clone())
}

fn summarize(what: &str, report: &RunReport) -> ExitCode {
    for e in &report.errors {
        eprintln!("{}: {}", e.doc_id, e.message);
    }
    println!(
        "{what}: {} documents ok, {} errors",
        report.processed,
        report.errors.len()
    );
    if report.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn finish_eval(report: &EvalReport, row_name: &str, path: &Path) -> Result<ExitCode> {
    write_atomic(path, report.to_json().as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    for e in &report.errors {
        eprintln!("{}: {}", e.doc_id, e.message);
    }
    print!("{}", report.table(row_name));
    Ok(if report.errors.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn eval_options(a: &EvalArgs) -> Result<EvalOptions> {
    if !(a.threshold > 0.0 && a.threshold <= 1.0) {
        bail!("--threshold must be in (0, 1], got {}", a.threshold);
    }
    Ok(EvalOptions {
        word_source: a.word_source,
        threshold: a.threshold,
        min_area: a.min_area,
        split: a.split,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    let workers = config.workers;
    match cli.command {
        Command::Generate(a) => {
            if let Some(v) = a.out {
                config.out_dir = v;
            }
            if a.template_dir.is_some() {
                config.template_dir = a.template_dir;
            }
            if a.lexicon_dir.is_some() {
                config.lexicon_dir = a.lexicon_dir;
            }
            if let Some(v) = a.train {
                config.counts.train = v;
            }
            if let Some(v) = a.val {
                config.counts.val = v;
            }
            if let Some(v) = a.test {
                config.counts.test = v;
            }
            if let Some(v) = a.seed {
                config.seed = v;
            }
            if let Some(v) = a.input_kind {
                config.input_kind = v;
            }
            if let Some(path) = a.embedding_sidecar {
                config.embedding = EmbeddingSource::Sidecar { path };
            }
            let corpus = cmd_generate(&config)?;
            let m = &corpus.manifest;
            println!(
                "generated {} documents in {} (train {}, val {}, test {}; {} templates)",
                m.documents.len(),
                corpus.dir.display(),
                m.counts.train,
                m.counts.val,
                m.counts.test,
                m.templates.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gridify(a) => {
            let dir = corpus_dir(&a.corpus, &config);
            let embedding = a
                .embedding_sidecar
                .map(|path| EmbeddingSource::Sidecar { path });
            let report = cmd_gridify(&dir, a.kind, embedding, workers)?;
            Ok(summarize("gridify", &report))
        }
        Command::Targets(a) => {
            let report = cmd_targets(&corpus_dir(&a, &config), workers)?;
            Ok(summarize("targets", &report))
        }
        Command::Validate(a) => {
            let report = cmd_validate(&corpus_dir(&a, &config), workers)?;
            Ok(summarize("validate", &report))
        }
        Command::OracleEval(a) => {
            let opts = eval_options(&a)?;
            let corpus = Corpus::open(&corpus_dir(&a.corpus, &config))?;
            let report = with_workers(workers, || oracle_eval(&corpus, &opts))?;
            let path = a
                .report
                .unwrap_or_else(|| corpus.dir.join("report-oracle.json"));
            finish_eval(&report, "Ground Truth Mask", &path)
        }
        Command::Eval(p) => {
            let opts = eval_options(&p.eval)?;
            let corpus = Corpus::open(&corpus_dir(&p.eval.corpus, &config))?;
            let report = with_workers(workers, || eval_predictions(&corpus, &p.pred_dir, &opts))?;
            let path = p
                .eval
                .report
                .unwrap_or_else(|| corpus.dir.join("report-eval.json"));
            finish_eval(&report, &p.name, &path)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

//! Corpus-level commands: generation, tensor export, validation, plus the
//! manifest that records how a corpus was made.
//!
//! A corpus is a flat directory:
//!
//! ```text
//! manifest.json
//! {id}.pdf  {id}.json                      generate
//! {id}.chargrid.t | {id}.wordgrid.t        gridify
//! {id}.sem.t  {id}.boxmask.t  {id}.boxdelta.t   targets
//! {id}.ocr.tsv  {id}.dpi                   supplied by an external OCR run
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::docmodel::{validate_annotation, DocumentAnnotation, FieldLabel};
use crate::gridify::{
    vocab_digest, EmbeddingError, EmbeddingProvider, GridConfig, HashedEmbedding, SidecarEmbedding,
    BACKGROUND, OOV, VOCAB_SIZE,
};
use crate::layout::{instantiate, list_templates, Template, TemplateError};
use crate::recordgen::{synth_record, LexiconError, Lexicons};
use crate::render::emit_pdf;
use crate::targets::{
    build_input, build_targets, AnchorSet, FieldSchema, InputKind, InputSpec, BOX_DELTA_SUFFIX,
    BOX_MASK_SUFFIX, SEMANTIC_SUFFIX,
};
use crate::tensorio::{write_atomic, write_tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const TEMPLATE_DIR_ENV: &str = "INVOICEGRID_TEMPLATE_DIR";
pub const LEXICON_DIR_ENV: &str = "INVOICEGRID_LEXICON_DIR";

/// Documents handed to the worker pool at a time. Results of a chunk are
/// written in index order before the next chunk starts.
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("document {doc_id}: {message}")]
    Document { doc_id: String, message: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            train: 8000,
            val: 1000,
            test: 3000,
        }
    }
}

impl Counts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Splits are contiguous index ranges: train first, then val, then test.
    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingSource {
    #[default]
    Hashed,
    Sidecar {
        path: PathBuf,
    },
}

impl EmbeddingSource {
    pub fn load(&self, dim: usize) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
        match self {
            EmbeddingSource::Hashed => Ok(Box::new(HashedEmbedding { dim })),
            EmbeddingSource::Sidecar { path } => {
                let s = SidecarEmbedding::load(path)?;
                if s.dim() != dim {
                    return Err(EmbeddingError::DimMismatch {
                        provider: s.dim(),
                        grid: dim,
                    });
                }
                Ok(Box::new(s))
            }
        }
    }

    fn describe(&self, dim: usize) -> Result<EmbeddingInfo, CorpusError> {
        Ok(match self {
            EmbeddingSource::Hashed => EmbeddingInfo {
                source: "hashed".into(),
                dim,
                digest: None,
            },
            EmbeddingSource::Sidecar { path } => {
                let bytes = fs::read(path).map_err(io_err(path))?;
                EmbeddingInfo {
                    source: "sidecar".into(),
                    dim,
                    digest: Some(hex::encode(Sha256::digest(&bytes))),
                }
            }
        })
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Everything `generate` needs. Loadable from JSON; absent keys take the
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    /// `None` uses the built-in templates.
    pub template_dir: Option<PathBuf>,
    /// `None` uses the built-in lexicons.
    pub lexicon_dir: Option<PathBuf>,
    pub counts: Counts,
    pub seed: u64,
    pub grid: GridConfig,
    pub anchors: AnchorSet,
    pub input_kind: InputKind,
    pub embedding: EmbeddingSource,
    pub workers: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            out_dir: PathBuf::from("corpus"),
            template_dir: None,
            lexicon_dir: None,
            counts: Counts::default(),
            seed: 0,
            grid: GridConfig::default(),
            anchors: AnchorSet::default(),
            input_kind: InputKind::Chargrid,
            embedding: EmbeddingSource::Hashed,
            workers: default_workers(),
        }
    }
}

impl CorpusConfig {
    pub fn from_json(text: &str) -> Result<CorpusConfig, CorpusError> {
        serde_json::from_str(text).map_err(|e| CorpusError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<CorpusConfig, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        CorpusConfig::from_json(&text)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.anchors.problems();
        if self.grid.height == 0 || self.grid.width == 0 {
            p.push("grid height and width must be positive".into());
        }
        if self.input_kind == InputKind::Wordgrid && self.grid.embed_dim == 0 {
            p.push("embed_dim must be positive for wordgrid input".into());
        }
        if self.workers == 0 {
            p.push("workers must be at least 1".into());
        }
        p
    }

    pub fn templates(&self) -> Result<Vec<Template>, CorpusError> {
        match &self.template_dir {
            Some(dir) => Ok(list_templates(dir)?),
            None => Ok(Template::builtin()),
        }
    }

    pub fn lexicons(&self) -> Result<Lexicons, CorpusError> {
        match &self.lexicon_dir {
            Some(dir) => Ok(Lexicons::load_dir(dir)?),
            None => Ok(Lexicons::builtin()),
        }
    }
}

/// Seed of document `index`: the `index + 1`-th output of a splitmix64
/// stream started at `corpus_seed`.
pub fn document_seed(corpus_seed: u64, index: u64) -> u64 {
    const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
    SplitMix64::seed_from_u64(corpus_seed.wrapping_add(index.wrapping_mul(GAMMA))).next_u64()
}

pub fn document_id(index: usize) -> String {
    format!("inv{index:05}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub id: String,
    pub split: Split,
    pub template_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRef {
    pub id: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub size: usize,
    pub background: u8,
    pub oov: u8,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingInfo {
    pub source: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputInfo {
    pub kind: InputKind,
    pub file_suffix: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub file_suffix: String,
    pub dtype: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetsInfo {
    pub semantic: TensorInfo,
    pub box_mask: TensorInfo,
    pub box_deltas: TensorInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub counts: Counts,
    pub templates: Vec<TemplateRef>,
    pub template_set_digest: String,
    pub lexicon_digest: String,
    pub grid: GridConfig,
    pub vocab: VocabInfo,
    /// Semantic channel order; the background class is `fields.len()`.
    pub fields: Vec<FieldLabel>,
    pub background_class: u8,
    pub anchors: AnchorSet,
    pub input_kind: InputKind,
    pub embedding: EmbeddingSource,
    pub documents: Vec<DocEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<TargetsInfo>,
}

impl Manifest {
    pub fn schema(&self) -> FieldSchema {
        FieldSchema {
            labels: self.fields.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DocEntry> {
        self.documents.iter().filter(move |d| d.split == split)
    }
}

fn template_set_digest(templates: &[Template]) -> String {
    let mut h = Sha256::new();
    for t in templates {
        h.update(t.template_id.as_bytes());
        h.update([0]);
        h.update(t.digest().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// An existing corpus directory and its manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Corpus, CorpusError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CorpusError::Manifest {
                path,
                reason: format!("unsupported version {}", manifest.version),
            });
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, doc_id: &str, suffix: &str) -> PathBuf {
        self.dir.join(format!("{doc_id}.{suffix}"))
    }

    pub fn annotation(&self, doc_id: &str) -> Result<DocumentAnnotation, String> {
        let path = self.path(doc_id, "json");
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        DocumentAnnotation::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn save_manifest(&self) -> Result<(), CorpusError> {
        let path = self.dir.join(MANIFEST_FILE);
        write_atomic(&path, self.manifest.to_json().as_bytes()).map_err(io_err(&path))
    }

    /// Manifest entries, optionally restricted to one split.
    pub fn entries(&self, split: Option<Split>) -> Vec<&DocEntry> {
        self.manifest
            .documents
            .iter()
            .filter(|d| split.is_none_or(|s| d.split == s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocError {
    pub doc_id: String,
    pub message: String,
}

/// Outcome of a per-document command. Commands succeed overall only when
/// `errors` is empty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunReport {
    pub processed: usize,
    pub errors: Vec<DocError>,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CorpusError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CorpusError::Pool(e.to_string()))
}

/// Runs `f` with rayon's parallel iterators limited to `workers` threads.
pub fn with_workers<R: Send>(
    workers: usize,
    f: impl FnOnce() -> R + Send,
) -> Result<R, CorpusError> {
    Ok(pool(workers)?.install(f))
}

/// Maps `f` over `items` on `workers` threads and hands each result to
/// `sink` in input order. Output order, and therefore every byte written by
/// `sink`, is independent of the worker count.
pub fn run_ordered<I, T, E>(
    workers: usize,
    items: &[I],
    f: impl Fn(&I) -> T + Sync,
    mut sink: impl FnMut(&I, T) -> Result<(), E>,
) -> Result<(), E>
where
    I: Sync,
    T: Send,
    E: From<CorpusError>,
{
    let pool = pool(workers)?;
    for chunk in items.chunks(CHUNK) {
        let results: Vec<T> = pool.install(|| chunk.par_iter().map(&f).collect());
        for (item, r) in chunk.iter().zip(results) {
            sink(item, r)?;
        }
    }
    Ok(())
}

/// Manifest entries for a corpus: ids in index order, splits by index
/// range, templates round-robin in the given order.
pub fn plan_documents(seed: u64, counts: &Counts, templates: &[Template]) -> Vec<DocEntry> {
    (0..counts.total())
        .map(|i| DocEntry {
            id: document_id(i),
            split: counts.split_of(i),
            template_id: templates[i % templates.len()].template_id.clone(),
            seed: document_seed(seed, i as u64),
        })
        .collect()
}

struct GeneratedDoc {
    pdf: Vec<u8>,
    json: String,
}

fn generate_one(
    entry: &DocEntry,
    template: &Template,
    lexicons: &Lexicons,
) -> Result<GeneratedDoc, String> {
    let record = synth_record(entry.seed, lexicons).map_err(|e| e.to_string())?;
    let layout = instantiate(&record, template, entry.seed).map_err(|e| e.to_string())?;
    let (pdf, ann) = emit_pdf(&layout, &entry.id).map_err(|e| e.to_string())?;
    let violations = validate_annotation(&ann);
    if let Some(v) = violations.first() {
        return Err(format!("generated annotation is invalid: {v}"));
    }
    Ok(GeneratedDoc {
        pdf,
        json: ann.to_json(),
    })
}

/// Writes PDFs, annotations and the manifest. Any document failure aborts.
pub fn cmd_generate(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(CorpusError::Config(problems.join("; ")));
    }
    let templates = config.templates()?;
    let mut ids: Vec<&str> = templates.iter().map(|t| t.template_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CorpusError::Config(format!(
            "duplicate template id `{}`",
            w[0]
        )));
    }
    let lexicons = config.lexicons()?;
    lexicons.validate()?;

    let documents = plan_documents(config.seed, &config.counts, &templates);

    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let by_id = |id: &str| templates.iter().find(|t| t.template_id == id).unwrap();
    run_ordered(
        config.workers,
        &documents,
        |e| generate_one(e, by_id(&e.template_id), &lexicons),
        |e, r| -> Result<(), CorpusError> {
            let doc = r.map_err(|message| CorpusError::Document {
                doc_id: e.id.clone(),
                message,
            })?;
            let pdf_path = dir.join(format!("{}.pdf", e.id));
            write_atomic(&pdf_path, &doc.pdf).map_err(io_err(&pdf_path))?;
            let json_path = dir.join(format!("{}.json", e.id));
            write_atomic(&json_path, doc.json.as_bytes()).map_err(io_err(&json_path))?;
            Ok(())
        },
    )?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        counts: config.counts,
        templates: templates
            .iter()
            .map(|t| TemplateRef {
                id: t.template_id.clone(),
                digest: t.digest(),
            })
            .collect(),
        template_set_digest: template_set_digest(&templates),
        lexicon_digest: lexicons.digest(),
        grid: config.grid,
        vocab: VocabInfo {
            size: VOCAB_SIZE,
            background: BACKGROUND,
            oov: OOV,
            digest: vocab_digest(),
        },
        fields: FieldLabel::ALL.to_vec(),
        background_class: FieldLabel::ALL.len() as u8,
        anchors: config.anchors.clone(),
        input_kind: config.input_kind,
        embedding: config.embedding.clone(),
        documents,
        input: None,
        targets: None,
    };
    let corpus = Corpus {
        dir: dir.clone(),
        manifest,
    };
    corpus.save_manifest()?;
    Ok(corpus)
}

/// Writes one model-input grid per document. `kind` and `embedding` default
/// to the manifest's values.
pub fn cmd_gridify(
    dir: &Path,
    kind: Option<InputKind>,
    embedding: Option<EmbeddingSource>,
    workers: usize,
) -> Result<RunReport, CorpusError> {
    let mut corpus = Corpus::open(dir)?;
    let kind = kind.unwrap_or(corpus.manifest.input_kind);
    let embedding = embedding.unwrap_or_else(|| corpus.manifest.embedding.clone());
    let cfg = corpus.manifest.grid;
    let provider = match kind {
        InputKind::Wordgrid => Some(embedding.load(cfg.embed_dim)?),
        InputKind::Chargrid => None,
    };
    let spec = match &provider {
        Some(p) => InputSpec::Wordgrid(p.as_ref()),
        None => InputSpec::Chargrid,
    };

    let mut report = RunReport::default();
    let entries: Vec<DocEntry> = corpus.manifest.documents.clone();
    run_ordered(
        workers,
        &entries,
        |e| {
            let ann = corpus.annotation(&e.id)?;
            build_input(&ann, &cfg, spec).map_err(|err| err.to_string())
        },
        |e, r| -> Result<(), CorpusError> {
            let result = r.and_then(|g| {
                write_tensor(&corpus.path(&e.id, kind.suffix()), &g).map_err(|err| err.to_string())
            });
            match result {
                Ok(()) => report.processed += 1,
                Err(message) => report.errors.push(DocError {
                    doc_id: e.id.clone(),
                    message,
                }),
            }
            Ok(())
        },
    )?;

    let (dims, embedding_info) = match kind {
        InputKind::Chargrid => (vec![cfg.height, cfg.width], None),
        InputKind::Wordgrid => (
            vec![cfg.height, cfg.width, cfg.embed_dim],
            Some(embedding.describe(cfg.embed_dim)?),
        ),
    };
    corpus.manifest.input_kind = kind;
    corpus.manifest.embedding = embedding;
    corpus.manifest.input = Some(InputInfo {
        kind,
        file_suffix: kind.suffix().into(),
        dtype: match kind {
            InputKind::Chargrid => "u8".into(),
            InputKind::Wordgrid => "f32".into(),
        },
        dims,
        embedding: embedding_info,
    });
    corpus.save_manifest()?;
    Ok(report)
}

/// Writes the semantic mask, box mask and box deltas for every document.
pub fn cmd_targets(dir: &Path, workers: usize) -> Result<RunReport, CorpusError> {
    let mut corpus = Corpus::open(dir)?;
    let cfg = corpus.manifest.grid;
    let schema = corpus.manifest.schema();
    let anchors = corpus.manifest.anchors.clone();
    let problems = anchors.problems();
    if !problems.is_empty() {
        return Err(CorpusError::Config(problems.join("; ")));
    }

    let mut report = RunReport::default();
    let entries: Vec<DocEntry> = corpus.manifest.documents.clone();
    run_ordered(
        workers,
        &entries,
        |e| {
            let ann = corpus.annotation(&e.id)?;
            Ok(build_targets(&ann, &cfg, &schema, &anchors))
        },
        |e, r: Result<_, String>| -> Result<(), CorpusError> {
            let result = r.and_then(|(sem, t)| {
                let put = |suffix: &str, g| {
                    write_tensor(&corpus.path(&e.id, suffix), g).map_err(|err| err.to_string())
                };
                put(SEMANTIC_SUFFIX, &sem)?;
                put(BOX_MASK_SUFFIX, &t.box_mask)?;
                put(BOX_DELTA_SUFFIX, &t.box_deltas)
            });
            match result {
                Ok(()) => report.processed += 1,
                Err(message) => report.errors.push(DocError {
                    doc_id: e.id.clone(),
                    message,
                }),
            }
            Ok(())
        },
    )?;

    let n = anchors.n();
    let hw = [cfg.height, cfg.width];
    let info = |suffix: &str, dtype: &str, extra: Option<usize>| TensorInfo {
        file_suffix: suffix.into(),
        dtype: dtype.into(),
        dims: hw.iter().copied().chain(extra).collect(),
    };
    corpus.manifest.targets = Some(TargetsInfo {
        semantic: info(SEMANTIC_SUFFIX, "u8", None),
        box_mask: info(BOX_MASK_SUFFIX, "u8", Some(2 * n)),
        box_deltas: info(BOX_DELTA_SUFFIX, "f32", Some(4 * n)),
    });
    corpus.save_manifest()?;
    Ok(report)
}

/// Checks every annotation against the document-model rules and the
/// manifest, and that each PDF exists.
pub fn cmd_validate(dir: &Path, workers: usize) -> Result<RunReport, CorpusError> {
    let corpus = Corpus::open(dir)?;
    let mut report = RunReport::default();
    let entries: Vec<DocEntry> = corpus.manifest.documents.clone();
    run_ordered(
        workers,
        &entries,
        |e| validate_one(&corpus, e),
        |e, problems: Vec<String>| -> Result<(), CorpusError> {
            report.processed += 1;
            report
                .errors
                .extend(problems.into_iter().map(|message| DocError {
                    doc_id: e.id.clone(),
                    message,
                }));
            Ok(())
        },
    )?;
    Ok(report)
}

fn validate_one(corpus: &Corpus, e: &DocEntry) -> Vec<String> {
    let mut problems = Vec::new();
    match fs::read(corpus.path(&e.id, "pdf")) {
        Ok(b) if b.starts_with(b"%PDF-") => {}
        Ok(_) => problems.push("PDF has no %PDF- header".to_string()),
        Err(err) => problems.push(format!("PDF: {err}")),
    }
    let ann = match corpus.annotation(&e.id) {
        Ok(a) => a,
        Err(m) => {
            problems.push(m);
            return problems;
        }
    };
    if ann.doc_id != e.id {
        problems.push(format!("annotation doc_id {:?} != manifest id", ann.doc_id));
    }
    if ann.template_id != e.template_id || ann.seed != e.seed {
        problems.push("annotation template_id/seed disagree with manifest".to_string());
    }
    problems.extend(validate_annotation(&ann).iter().map(|v| v.to_string()));
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path, train: usize, val: usize, test: usize) -> CorpusConfig {
        CorpusConfig {
            out_dir: dir.to_path_buf(),
            counts: Counts { train, val, test },
            seed: 7,
            workers: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn splits_are_index_ranges() {
        let c = Counts {
            train: 2,
            val: 1,
            test: 2,
        };
        let s: Vec<Split> = (0..5).map(|i| c.split_of(i)).collect();
        assert_eq!(
            s,
            [
                Split::Train,
                Split::Train,
                Split::Val,
                Split::Test,
                Split::Test
            ]
        );
        assert_eq!(Counts::default().total(), 12_000);
    }

    #[test]
    fn document_seed_is_splitmix_stream() {
        // the stream from state 0: outputs 1 and 2
        assert_eq!(document_seed(0, 0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(document_seed(0, 1), 0x6e78_9e6a_a1b9_65f4);
        assert_ne!(document_seed(1, 0), document_seed(0, 0));
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let c =
            CorpusConfig::from_json(r#"{"seed": 3, "counts": {"train": 1, "val": 0, "test": 0}}"#)
                .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.grid, GridConfig::default());
        assert!(CorpusConfig::from_json(r#"{"sed": 3}"#).is_err());
        let c = CorpusConfig::from_json(r#"{"embedding": {"kind": "sidecar", "path": "e.bin"}}"#)
            .unwrap();
        assert_eq!(
            c.embedding,
            EmbeddingSource::Sidecar {
                path: "e.bin".into()
            }
        );
    }

    #[test]
    fn generate_small_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = cmd_generate(&small(dir.path(), 3, 1, 1)).unwrap();
        let m = &corpus.manifest;
        assert_eq!(m.documents.len(), 5);
        assert_eq!(m.split(Split::Train).count(), 3);
        assert_eq!(m.documents[1].template_id, m.templates[1].id);
        for e in &m.documents {
            assert!(corpus.path(&e.id, "pdf").exists());
            let ann = corpus.annotation(&e.id).unwrap();
            assert_eq!(ann.seed, e.seed);
        }
        let reopened = Corpus::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest, *m);
        assert!(cmd_validate(dir.path(), 1).unwrap().ok());
    }

    #[test]
    fn missing_annotation_is_a_per_document_error() {
        let dir = tempfile::tempdir().unwrap();
        cmd_generate(&small(dir.path(), 3, 0, 0)).unwrap();
        fs::remove_file(dir.path().join("inv00001.json")).unwrap();
        let r = cmd_gridify(dir.path(), None, None, 2).unwrap();
        assert_eq!(r.processed, 2);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].doc_id, "inv00001");
        assert!(dir.path().join("inv00002.chargrid.t").exists());
        let r = cmd_targets(dir.path(), 2).unwrap();
        assert_eq!((r.processed, r.errors.len()), (2, 1));
    }

    #[test]
    fn bad_config_is_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(&dir.path().join("out"), 1, 0, 0);
        c.anchors.fg_iou = 0.0;
        assert!(matches!(cmd_generate(&c), Err(CorpusError::Config(_))));
        assert!(!dir.path().join("out").exists());
    }
}

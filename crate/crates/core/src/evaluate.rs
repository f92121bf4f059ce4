//! Field-level scoring of class-index masks: connected components become
//! regions, words covered by a region become the extracted text, and
//! extracted text is compared with the annotation.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocEntry, DocError, Split};
use crate::docmodel::{
    iou, overlap_fraction, BBox, DocumentAnnotation, FieldLabel, PageSize, Word,
};
use crate::gridify::{CellRect, Grid, GridConfig};
use crate::render::{words_for, WordSource};
use crate::targets::{rasterize_semantic, FieldSchema};
use crate::tensorio::read_tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_AREA: usize = 4;

/// Header columns in the order they are reported.
pub const HEADER_TABLE: [FieldLabel; 5] = [
    FieldLabel::CompanyName,
    FieldLabel::InvoiceNumber,
    FieldLabel::InvoiceDate,
    FieldLabel::InvoiceAmount,
    FieldLabel::CompanyAddress,
];

pub const ITEM_TABLE: [FieldLabel; 3] = [
    FieldLabel::ItemName,
    FieldLabel::ItemQuantity,
    FieldLabel::ItemAmount,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub rect: CellRect,
    pub cells: usize,
}

/// 4-connected components of cells equal to `class`, dropping those with
/// fewer than `min_area` cells, sorted by (top row, left column).
pub fn components(mask: &Grid, class: u8, min_area: usize) -> Vec<Component> {
    let dims = mask.dims();
    assert_eq!(dims.len(), 2, "class mask must be H x W");
    let (h, w) = (dims[0], dims[1]);
    let data = mask.as_u8().expect("class mask must be u8");
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start] != class {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut cells = 0;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            cells += 1;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
            let mut visit = |j: usize| {
                if !seen[j] && data[j] == class {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if cells >= min_area {
            out.push(Component {
                rect: CellRect { r0, c0, r1, c1 },
                cells,
            });
        }
    }
    out.sort_by_key(|c| (c.rect.r0, c.rect.c0));
    out
}

/// Grid-coordinate box (x = column) to page points.
pub fn grid_to_page(b: &BBox, page: PageSize, cfg: &GridConfig) -> BBox {
    let sx = page.width / cfg.width as f64;
    let sy = page.height / cfg.height as f64;
    BBox::new_unchecked(b.x0() * sx, b.y0() * sy, b.x1() * sx, b.y1() * sy)
}

/// Indices of words whose area lies in `region` by strictly more than
/// `threshold`, in reading order.
pub fn assigned_words(region: &BBox, words: &[Word], threshold: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..words.len())
        .filter(|&i| overlap_fraction(&words[i].bbox, region) > threshold)
        .collect();
    idx.sort_by_key(|&i| words[i].reading_order);
    idx
}

pub fn assign_words(region: &BBox, words: &[Word], threshold: f64) -> String {
    join_words(words, &assigned_words(region, words, threshold))
}

fn join_words(words: &[Word], idx: &[usize]) -> String {
    idx.iter()
        .map(|&i| words[i].text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub label: FieldLabel,
    /// Page coordinates, one per extracted instance.
    pub instance_boxes: Vec<BBox>,
    pub texts: Vec<String>,
}

/// Regions and texts for every label in `schema` from a class mask.
///
/// A header field is a single instance: all its components are pooled, the
/// text is every word assigned to any of them and the box is their hull.
/// Each line-item component is its own instance.
pub fn extract_fields(
    mask: &Grid,
    page: PageSize,
    cfg: &GridConfig,
    schema: &FieldSchema,
    words: &[Word],
    threshold: f64,
    min_area: usize,
) -> Vec<Extraction> {
    schema
        .labels
        .iter()
        .enumerate()
        .map(|(class, &label)| {
            let regions: Vec<BBox> = components(mask, class as u8, min_area)
                .iter()
                .map(|c| grid_to_page(&c.rect.to_grid_box(), page, cfg))
                .collect();
            let mut ex = Extraction {
                label,
                instance_boxes: Vec::new(),
                texts: Vec::new(),
            };
            if label.is_line_item() {
                for r in regions {
                    ex.texts.push(assign_words(&r, words, threshold));
                    ex.instance_boxes.push(r);
                }
            } else if let Some(hull) = BBox::hull(&regions) {
                let picked: BTreeSet<usize> = regions
                    .iter()
                    .flat_map(|r| assigned_words(r, words, threshold))
                    .collect();
                let mut picked: Vec<usize> = picked.into_iter().collect();
                picked.sort_by_key(|&i| words[i].reading_order);
                ex.texts.push(join_words(words, &picked));
                ex.instance_boxes.push(hull);
            }
            ex
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldScore {
    pub label: FieldLabel,
    pub positives: usize,
    pub occurrences: usize,
}

impl FieldScore {
    pub fn accuracy(&self) -> f64 {
        if self.occurrences == 0 {
            0.0
        } else {
            self.positives as f64 / self.occurrences as f64
        }
    }
}

/// Trim and collapse runs of whitespace; case is kept.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Scores each extraction against the annotated instances of its label.
/// Predictions and ground truth are paired greedily by descending IoU
/// (ties by ground-truth then prediction order); pairs need IoU > 0.
pub fn score_document(extractions: &[Extraction], ann: &DocumentAnnotation) -> Vec<FieldScore> {
    extractions
        .iter()
        .map(|ex| {
            let gt: Vec<(BBox, String)> = ann
                .fields
                .iter()
                .filter(|f| f.label == ex.label)
                .filter_map(|f| BBox::hull(&f.boxes).map(|b| (b, normalize(&f.value))))
                .collect();
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (g, (gb, _)) in gt.iter().enumerate() {
                for (p, pb) in ex.instance_boxes.iter().enumerate() {
                    let v = iou(gb, pb);
                    if v > 0.0 {
                        pairs.push((v, g, p));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut gt_used = vec![false; gt.len()];
            let mut pred_used = vec![false; ex.instance_boxes.len()];
            let mut positives = 0;
            for (_, g, p) in pairs {
                if gt_used[g] || pred_used[p] {
                    continue;
                }
                gt_used[g] = true;
                pred_used[p] = true;
                if normalize(&ex.texts[p]) == gt[g].1 {
                    positives += 1;
                }
            }
            FieldScore {
                label: ex.label,
                positives,
                occurrences: gt.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub word_source: WordSource,
    pub threshold: f64,
    pub min_area: usize,
    pub split: Option<Split>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            word_source: WordSource::Exact,
            threshold: DEFAULT_THRESHOLD,
            min_area: DEFAULT_MIN_AREA,
            split: None,
        }
    }
}

/// Full pipeline for one document and one class mask.
pub fn evaluate_document(
    ann: &DocumentAnnotation,
    mask: &Grid,
    words: &[Word],
    cfg: &GridConfig,
    schema: &FieldSchema,
    opts: &EvalOptions,
) -> Vec<FieldScore> {
    let ex = extract_fields(
        mask,
        ann.page,
        cfg,
        schema,
        words,
        opts.threshold,
        opts.min_area,
    );
    score_document(&ex, ann)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub label: FieldLabel,
    pub positives: usize,
    pub occurrences: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub word_source: WordSource,
    pub threshold: f64,
    pub fields: Vec<FieldRow>,
    /// Documents that were scored; failed ones are listed in `errors`.
    pub documents: usize,
    #[serde(default)]
    pub errors: Vec<DocError>,
}

impl EvalReport {
    pub fn field(&self, label: FieldLabel) -> Option<&FieldRow> {
        self.fields.iter().find(|f| f.label == label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Two aligned tables, header fields then line items, with `row_name`
    /// labelling the single result row.
    pub fn table(&self, row_name: &str) -> String {
        let mut out = String::new();
        for (title, labels) in [
            ("header fields", &HEADER_TABLE[..]),
            ("line-item fields", &ITEM_TABLE[..]),
        ] {
            let mut head = vec![title.to_string()];
            let mut row = vec![row_name.to_string()];
            for l in labels {
                head.push(l.to_string());
                row.push(match self.field(*l) {
                    Some(f) if f.occurrences > 0 => format!("{:.1}%", 100.0 * f.accuracy),
                    _ => "n/a".to_string(),
                });
            }
            let widths: Vec<usize> = head
                .iter()
                .zip(&row)
                .map(|(a, b)| a.chars().count().max(b.chars().count()))
                .collect();
            for cells in [&head, &row] {
                let mut line = String::new();
                for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                    if i == 0 {
                        let _ = write!(line, "{cell:<w$}");
                    } else {
                        let _ = write!(line, "  {cell:>w$}");
                    }
                }
                out.push_str(line.trim_end());
                out.push('\n');
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{} documents, {} words, threshold {}",
            self.documents, self.word_source, self.threshold
        );
        if !self.errors.is_empty() {
            let _ = writeln!(out, "{} documents failed", self.errors.len());
        }
        out
    }
}

fn aggregate(
    corpus_name: String,
    schema: &FieldSchema,
    opts: &EvalOptions,
    per_doc: Vec<(&DocEntry, Result<Vec<FieldScore>, String>)>,
) -> EvalReport {
    let mut totals: Vec<FieldScore> = schema
        .labels
        .iter()
        .map(|&label| FieldScore {
            label,
            positives: 0,
            occurrences: 0,
        })
        .collect();
    let mut documents = 0;
    let mut errors = Vec::new();
    for (entry, r) in per_doc {
        match r {
            Ok(scores) => {
                documents += 1;
                for (t, s) in totals.iter_mut().zip(scores) {
                    t.positives += s.positives;
                    t.occurrences += s.occurrences;
                }
            }
            Err(message) => errors.push(DocError {
                doc_id: entry.id.clone(),
                message,
            }),
        }
    }
    EvalReport {
        corpus: corpus_name,
        word_source: opts.word_source,
        threshold: opts.threshold,
        fields: totals
            .iter()
            .map(|t| FieldRow {
                label: t.label,
                positives: t.positives,
                occurrences: t.occurrences,
                accuracy: t.accuracy(),
            })
            .collect(),
        documents,
        errors,
    }
}

fn run(
    corpus: &Corpus,
    opts: &EvalOptions,
    mask_for: impl Fn(&DocEntry, &DocumentAnnotation) -> Result<Grid, String> + Sync,
) -> EvalReport {
    let schema = corpus.manifest.schema();
    let cfg = corpus.manifest.grid;
    let entries = corpus.entries(opts.split);
    let per_doc: Vec<_> = entries
        .par_iter()
        .map(|&e| {
            let r = (|| {
                let ann = corpus.annotation(&e.id)?;
                let words = words_for(&ann, opts.word_source, &corpus.dir)
                    .map_err(|err| err.to_string())?;
                let mask = mask_for(e, &ann)?;
                Ok(evaluate_document(&ann, &mask, &words, &cfg, &schema, opts))
            })();
            (e, r)
        })
        .collect();
    aggregate(corpus.dir.display().to_string(), &schema, opts, per_doc)
}

/// Scores ground-truth masks, built from the annotations.
pub fn oracle_eval(corpus: &Corpus, opts: &EvalOptions) -> EvalReport {
    let schema = corpus.manifest.schema();
    let cfg = corpus.manifest.grid;
    run(corpus, opts, |_, ann| {
        Ok(rasterize_semantic(&ann.fields, ann.page, &cfg, &schema))
    })
}

/// Scores `{id}.sem.t` class masks from `pred_dir`.
pub fn eval_predictions(corpus: &Corpus, pred_dir: &Path, opts: &EvalOptions) -> EvalReport {
    let cfg = corpus.manifest.grid;
    let want = [cfg.height, cfg.width];
    run(corpus, opts, |e, _| {
        let path = pred_dir.join(format!("{}.sem.t", e.id));
        let g = read_tensor(&path).map_err(|err| err.to_string())?;
        if g.dims() != want {
            return Err(format!(
                "{}: mask dims {:?} do not match manifest grid {:?}",
                path.display(),
                g.dims(),
                want
            ));
        }
        if g.as_u8().is_none() {
            return Err(format!("{}: mask must be u8 class indices", path.display()));
        }
        Ok(g)
    })
}

//! Dynamic templates: nominal element regions plus per-document random
//! offsets.
//!
//! A template lists one element per header field, one table element for the
//! line items and any number of decoy elements (static text that is printed
//! but never extracted). [`instantiate`] shifts every element by a uniform
//! integer offset within its jitter bounds and fills in the record's text.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::docmodel::{BBox, FieldLabel, PageSize};
use crate::recordgen::{record_to_field_values, InvoiceRecord};
use crate::render::{self, FontMetric, COURIER};

/// Baseline-to-baseline distance of multi-line text, in ems.
pub const LINE_PITCH_EM: f64 = 1.2;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing template {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("template `{template_id}` is invalid:\n  {}", problems.join("\n  "))]
    Invalid {
        template_id: String,
        problems: Vec<String>,
    },
    #[error("no templates found in {0}")]
    Empty(PathBuf),
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("{items} line items exceed table capacity of {capacity} rows")]
    Overflow { items: usize, capacity: usize },
    #[error("elements {a} and {b} collide after jitter")]
    Collision { a: usize, b: usize },
    #[error("text {text:?} does not fit element {element}")]
    TextOverflow { element: usize, text: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jitter {
    pub dx_max: u32,
    pub dy_max: u32,
}

/// Horizontal extent of a table column, in page points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ColumnSpan {
    pub x0: f64,
    pub x1: f64,
}

impl From<[f64; 2]> for ColumnSpan {
    fn from(v: [f64; 2]) -> Self {
        ColumnSpan { x0: v[0], x1: v[1] }
    }
}

impl From<ColumnSpan> for [f64; 2] {
    fn from(c: ColumnSpan) -> Self {
        [c.x0, c.x1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TableColumns {
    pub item_name: ColumnSpan,
    pub item_quantity: ColumnSpan,
    pub item_amount: ColumnSpan,
}

impl TableColumns {
    fn iter(&self) -> [(FieldLabel, ColumnSpan); 3] {
        [
            (FieldLabel::ItemName, self.item_name),
            (FieldLabel::ItemQuantity, self.item_quantity),
            (FieldLabel::ItemAmount, self.item_amount),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ElementKind {
    Field {
        label: FieldLabel,
    },
    Decoy {
        static_text: String,
    },
    Table {
        row_height: f64,
        columns: TableColumns,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateElement {
    #[serde(flatten)]
    pub kind: ElementKind,
    pub anchor: BBox,
    #[serde(default)]
    pub jitter: Jitter,
    pub font_size: f64,
}

impl TemplateElement {
    /// Region the element may occupy under any jitter.
    pub fn reach(&self) -> BBox {
        self.anchor
            .expand(f64::from(self.jitter.dx_max), f64::from(self.jitter.dy_max))
    }

    pub fn table_capacity(&self) -> Option<usize> {
        match self.kind {
            ElementKind::Table { row_height, .. } if row_height > 0.0 => {
                Some((self.anchor.height() / row_height + 1e-9).floor() as usize)
            }
            _ => None,
        }
    }
}

fn a4_width() -> f64 {
    PageSize::A4.width
}

fn a4_height() -> f64 {
    PageSize::A4.height
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub template_id: String,
    #[serde(default = "a4_width")]
    pub page_width: f64,
    #[serde(default = "a4_height")]
    pub page_height: f64,
    pub elements: Vec<TemplateElement>,
}

const BUILTIN_TEMPLATES: [&str; 10] = [
    include_str!("../templates/t01.json"),
    include_str!("../templates/t02.json"),
    include_str!("../templates/t03.json"),
    include_str!("../templates/t04.json"),
    include_str!("../templates/t05.json"),
    include_str!("../templates/t06.json"),
    include_str!("../templates/t07.json"),
    include_str!("../templates/t08.json"),
    include_str!("../templates/t09.json"),
    include_str!("../templates/t10.json"),
];

impl Template {
    pub fn page(&self) -> PageSize {
        PageSize {
            width: self.page_width,
            height: self.page_height,
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Template, TemplateError> {
        let t: Template = serde_json::from_str(text).map_err(|source| TemplateError::Parse {
            path: origin.to_path_buf(),
            source,
        })?;
        let problems = t.problems();
        if problems.is_empty() {
            Ok(t)
        } else {
            Err(TemplateError::Invalid {
                template_id: t.template_id,
                problems,
            })
        }
    }

    /// The ten templates shipped with the crate, sorted by id.
    pub fn builtin() -> Vec<Template> {
        BUILTIN_TEMPLATES
            .iter()
            .enumerate()
            .map(|(i, src)| {
                let name = format!("<builtin t{:02}>", i + 1);
                Template::from_json(src, Path::new(&name)).expect("shipped templates are valid")
            })
            .collect()
    }

    pub fn table(&self) -> Option<(usize, &TemplateElement)> {
        self.elements
            .iter()
            .enumerate()
            .find(|(_, e)| matches!(e.kind, ElementKind::Table { .. }))
    }

    /// Field-level diagnostics; empty when the template is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.template_id.trim().is_empty() {
            p.push("template_id: empty".to_string());
        }
        let page = self.page();
        if !(page.width.is_finite()
            && page.height.is_finite()
            && page.width > 0.0
            && page.height > 0.0)
        {
            p.push(format!(
                "page: invalid size {} x {}",
                page.width, page.height
            ));
            return p;
        }
        let page_box = page.bbox();
        let mut header_counts = [0usize; FieldLabel::COUNT];
        let mut tables = 0;
        for (i, el) in self.elements.iter().enumerate() {
            let at = format!("elements[{i}]");
            if let Err(e) = el.anchor.check() {
                p.push(format!("{at}.anchor: {e}"));
                continue;
            }
            if !page_box.contains(&el.reach()) {
                p.push(format!(
                    "{at}.anchor: {} plus jitter ({}, {}) leaves the page",
                    el.anchor, el.jitter.dx_max, el.jitter.dy_max
                ));
            }
            if !(el.font_size.is_finite() && el.font_size > 0.0) {
                p.push(format!("{at}.font_size: must be positive"));
                continue;
            }
            match &el.kind {
                ElementKind::Field { label } => {
                    if label.is_line_item() {
                        p.push(format!(
                            "{at}.label: {label} is a line-item label; use a table element"
                        ));
                    } else {
                        header_counts[label.index()] += 1;
                    }
                }
                ElementKind::Decoy { static_text } => {
                    if let Err(e) = check_static_text(static_text) {
                        p.push(format!("{at}.static_text: {e}"));
                    } else {
                        let (w, h) = text_extent(static_text, el.font_size, &COURIER);
                        if w > el.anchor.width() + 1e-9 || h > el.anchor.height() + 1e-9 {
                            p.push(format!("{at}.static_text: does not fit the anchor"));
                        }
                    }
                }
                ElementKind::Table {
                    row_height,
                    columns,
                } => {
                    tables += 1;
                    let text_h = COURIER.text_height(el.font_size);
                    if !(row_height.is_finite() && *row_height >= text_h) {
                        p.push(format!(
                            "{at}.row_height: {row_height} is smaller than text height {text_h}"
                        ));
                    } else if el.table_capacity() == Some(0) {
                        p.push(format!("{at}.row_height: table anchor holds no row"));
                    }
                    let cols = columns.iter();
                    for (label, span) in cols {
                        if !(span.x0 < span.x1
                            && span.x0 >= el.anchor.x0()
                            && span.x1 <= el.anchor.x1())
                        {
                            p.push(format!(
                                "{at}.columns.{label}: [{}, {}] not inside the anchor",
                                span.x0, span.x1
                            ));
                        }
                    }
                    for a in 0..3 {
                        for b in a + 1..3 {
                            let (la, sa) = cols[a];
                            let (lb, sb) = cols[b];
                            if sa.x0 < sb.x1 && sb.x0 < sa.x1 {
                                p.push(format!("{at}.columns: {la} overlaps {lb}"));
                            }
                        }
                    }
                }
            }
        }
        for label in FieldLabel::ALL.iter().filter(|l| !l.is_line_item()) {
            match header_counts[label.index()] {
                1 => {}
                n => p.push(format!(
                    "elements: {n} elements for field {label}, need exactly 1"
                )),
            }
        }
        if tables != 1 {
            p.push(format!("elements: {tables} table elements, need exactly 1"));
        }
        for a in 0..self.elements.len() {
            for b in a + 1..self.elements.len() {
                if self.elements[a].reach().overlaps(&self.elements[b].reach()) {
                    p.push(format!(
                        "elements[{a}] and elements[{b}]: jitter ranges overlap"
                    ));
                }
            }
        }
        p
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("template serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn check_static_text(text: &str) -> Result<(), String> {
    if text.trim().is_empty() {
        return Err("empty".into());
    }
    for line in text.split('\n') {
        if line.is_empty() || line.starts_with(' ') || line.ends_with(' ') || line.contains("  ") {
            return Err(format!("line {line:?} has stray spaces"));
        }
        if let Some(c) = line.chars().find(|c| render::winansi_byte(*c).is_none()) {
            return Err(format!("unprintable character U+{:04X}", c as u32));
        }
    }
    Ok(())
}

pub fn load_template(path: &Path) -> Result<Template, TemplateError> {
    let text = fs::read_to_string(path).map_err(|source| TemplateError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Template::from_json(&text, path)
}

/// Loads every `*.json` template in `dir`, sorted by file name.
pub fn list_templates(dir: &Path) -> Result<Vec<Template>, TemplateError> {
    let entries = fs::read_dir(dir).map_err(|source| TemplateError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(TemplateError::Empty(dir.to_path_buf()));
    }
    paths.iter().map(|p| load_template(p)).collect()
}

/// Width and height of (possibly multi-line) text set in `metric`.
pub fn text_extent(text: &str, font_size: f64, metric: &FontMetric) -> (f64, f64) {
    let lines: Vec<&str> = text.split('\n').collect();
    let longest = lines.iter().map(|l| l.chars().count()).max().unwrap_or(0);
    let width = longest as f64 * metric.advance * font_size;
    let height =
        (lines.len() - 1) as f64 * LINE_PITCH_EM * font_size + metric.text_height(font_size);
    (width, height)
}

/// One text run placed on the page. `text` may hold several lines separated
/// by `\n`; they are set top-down from the box's top-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedText {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<FieldLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<u32>,
    pub font_size: f64,
    /// Index of the template element this run came from.
    pub element: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub template_id: String,
    pub seed: u64,
    pub page: PageSize,
    pub placed: Vec<PlacedText>,
}

impl LayoutDocument {
    pub fn empty(template_id: &str, seed: u64, page: PageSize) -> Self {
        LayoutDocument {
            template_id: template_id.to_string(),
            seed,
            page,
            placed: Vec::new(),
        }
    }
}

fn draw_offset(rng: &mut ChaCha8Rng, max: u32) -> f64 {
    let m = i64::from(max);
    rng.random_range(-m..=m) as f64
}

fn fits(text: &str, bbox: &BBox, font_size: f64) -> bool {
    let (w, h) = text_extent(text, font_size, &COURIER);
    w <= bbox.width() + 1e-9 && h <= bbox.height() + 1e-9
}

/// Places `record` on `template`. Deterministic in all three inputs.
pub fn instantiate(
    record: &InvoiceRecord,
    template: &Template,
    seed: u64,
) -> Result<LayoutDocument, LayoutError> {
    let problems = template.problems();
    if !problems.is_empty() {
        return Err(TemplateError::Invalid {
            template_id: template.template_id.clone(),
            problems,
        }
        .into());
    }
    if let Some((_, table)) = template.table() {
        let capacity = table.table_capacity().unwrap_or(0);
        if record.line_items.len() > capacity {
            return Err(LayoutError::Overflow {
                items: record.line_items.len(),
                capacity,
            });
        }
    }

    let values = record_to_field_values(record);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // separate stream from the one synth_record consumes for the same seed
    rng.set_stream(1);

    let mut placed = Vec::new();
    for (i, el) in template.elements.iter().enumerate() {
        let dx = draw_offset(&mut rng, el.jitter.dx_max);
        let dy = draw_offset(&mut rng, el.jitter.dy_max);
        let region = el.anchor.translate(dx, dy);
        let mut put = |text: String, bbox: BBox, label, row| -> Result<(), LayoutError> {
            if !fits(&text, &bbox, el.font_size) {
                return Err(LayoutError::TextOverflow { element: i, text });
            }
            placed.push(PlacedText {
                text,
                bbox,
                label,
                row,
                font_size: el.font_size,
                element: i,
            });
            Ok(())
        };
        match &el.kind {
            ElementKind::Field { label } => {
                let text = if *label == FieldLabel::CompanyAddress {
                    record.company_address.join("\n")
                } else {
                    values[label][0].clone()
                };
                put(text, region, Some(*label), None)?;
            }
            ElementKind::Decoy { static_text } => {
                put(static_text.clone(), region, None, None)?;
            }
            ElementKind::Table {
                row_height,
                columns,
            } =>
            {
                #[allow(clippy::needless_range_loop)]
                for r in 0..record.line_items.len() {
                    let top = region.y0() + r as f64 * row_height;
                    for (label, span) in columns.iter() {
                        let cell =
                            BBox::new_unchecked(span.x0 + dx, top, span.x1 + dx, top + row_height);
                        put(values[&label][r].clone(), cell, Some(label), Some(r as u32))?;
                    }
                }
            }
        }
    }

    for a in 0..placed.len() {
        for b in a + 1..placed.len() {
            if placed[a].element != placed[b].element && placed[a].bbox.overlaps(&placed[b].bbox) {
                return Err(LayoutError::Collision {
                    a: placed[a].element,
                    b: placed[b].element,
                });
            }
        }
    }

    Ok(LayoutDocument {
        template_id: template.template_id.clone(),
        seed,
        page: template.page(),
        placed,
    })
}

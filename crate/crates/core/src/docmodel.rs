//! Geometry and annotation types shared across the pipeline.
//!
//! Coordinates are PDF points with the origin at the top-left corner of the
//! page and y growing downward. The annotation JSON written next to every
//! generated PDF is the serde form of [`DocumentAnnotation`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate in box [{0}, {1}, {2}, {3}]")]
    NonFinite(f64, f64, f64, f64),
    #[error("degenerate box [{0}, {1}, {2}, {3}]: need x0 < x1 and y0 < y1")]
    Degenerate(f64, f64, f64, f64),
}

/// Axis-aligned rectangle.
///
/// [`BBox::new`] rejects degenerate and non-finite boxes. Deserialization is
/// permissive so that a malformed annotation file can still be loaded and
/// reported on by [`validate_annotation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new_unchecked(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let b = BBox::new_unchecked(x0, y0, x1, y1);
        b.check()?;
        Ok(b)
    }

    /// Builds a box without checking its invariants. Only for fixtures and
    /// for data that will go through [`validate_annotation`] afterwards.
    pub const fn new_unchecked(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn check(&self) -> Result<(), GeometryError> {
        let BBox { x0, y0, x1, y1 } = *self;
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(GeometryError::NonFinite(x0, y0, x1, y1));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(GeometryError::Degenerate(x0, y0, x1, y1));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// True when the interiors of the two boxes intersect. Touching edges do
    /// not count.
    pub fn overlaps(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0.0
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new_unchecked(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn expand(&self, dx: f64, dy: f64) -> BBox {
        BBox::new_unchecked(self.x0 - dx, self.y0 - dy, self.x1 + dx, self.y1 + dy)
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new_unchecked(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    /// Hull of a non-empty sequence of boxes.
    pub fn hull<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        boxes.into_iter().fold(None, |acc: Option<BBox>, b| {
            Some(match acc {
                None => *b,
                Some(a) => a.union(b),
            })
        })
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Intersection over union; 0 when the boxes are disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of `word_box` covered by `region`.
pub fn overlap_fraction(word_box: &BBox, region: &BBox) -> f64 {
    let area = word_box.area();
    if area <= 0.0 {
        return 0.0;
    }
    if region.contains(word_box) {
        return 1.0;
    }
    (word_box.intersection_area(region) / area).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "order")]
    pub reading_order: u32,
}

/// The eight extractable fields, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldLabel {
    CompanyName,
    CompanyAddress,
    InvoiceNumber,
    InvoiceAmount,
    InvoiceDate,
    ItemName,
    ItemQuantity,
    ItemAmount,
}

impl FieldLabel {
    pub const COUNT: usize = 8;

    pub const ALL: [FieldLabel; FieldLabel::COUNT] = [
        FieldLabel::CompanyName,
        FieldLabel::CompanyAddress,
        FieldLabel::InvoiceNumber,
        FieldLabel::InvoiceAmount,
        FieldLabel::InvoiceDate,
        FieldLabel::ItemName,
        FieldLabel::ItemQuantity,
        FieldLabel::ItemAmount,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<FieldLabel> {
        FieldLabel::ALL.get(i).copied()
    }

    pub fn is_line_item(self) -> bool {
        matches!(
            self,
            FieldLabel::ItemName | FieldLabel::ItemQuantity | FieldLabel::ItemAmount
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FieldLabel::CompanyName => "company-name",
            FieldLabel::CompanyAddress => "company-address",
            FieldLabel::InvoiceNumber => "invoice-number",
            FieldLabel::InvoiceAmount => "invoice-amount",
            FieldLabel::InvoiceDate => "invoice-date",
            FieldLabel::ItemName => "item-name",
            FieldLabel::ItemQuantity => "item-quantity",
            FieldLabel::ItemAmount => "item-amount",
        }
    }
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FieldLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown field label `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldInstance {
    pub label: FieldLabel,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<u32>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageSize {
    pub width: f64,
    pub height: f64,
}

impl PageSize {
    pub const A4: PageSize = PageSize {
        width: 595.0,
        height: 842.0,
    };

    pub fn bbox(&self) -> BBox {
        BBox::new_unchecked(0.0, 0.0, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAnnotation {
    pub doc_id: String,
    pub page: PageSize,
    pub template_id: String,
    pub seed: u64,
    pub words: Vec<Word>,
    pub fields: Vec<FieldInstance>,
}

impl DocumentAnnotation {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("annotation serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Words whose boxes lie inside any of `boxes`, in reading order.
    pub fn words_inside<'a>(&'a self, boxes: &[BBox]) -> Vec<&'a Word> {
        let mut inside: Vec<&Word> = self
            .words
            .iter()
            .filter(|w| boxes.iter().any(|b| b.contains(&w.bbox)))
            .collect();
        inside.sort_by_key(|w| w.reading_order);
        inside
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    InvalidBox,
    OutsidePage,
    EmptyWord,
    NewlineInWord,
    DuplicateReadingOrder,
    RowPresence,
    NoBoxes,
    OverlappingFieldBoxes,
    ValueMismatch,
    InvalidPage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    /// Offending element, e.g. `words[3]` or `fields[1].boxes[0]`.
    pub at: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.rule, self.at, self.detail)
    }
}

/// Checks every annotation invariant; an empty result means the document is
/// consistent.
pub fn validate_annotation(doc: &DocumentAnnotation) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |rule, at: String, detail: String| out.push(Violation { rule, at, detail });

    let page = doc.page;
    if !(page.width.is_finite() && page.height.is_finite() && page.width > 0.0 && page.height > 0.0)
    {
        push(
            Rule::InvalidPage,
            "page".into(),
            format!("{} x {}", page.width, page.height),
        );
    }
    let page_box = page.bbox();
    let check_box = |b: &BBox, at: String, push: &mut dyn FnMut(Rule, String, String)| {
        if let Err(e) = b.check() {
            push(Rule::InvalidBox, at, e.to_string());
            false
        } else if !page_box.contains(b) {
            push(Rule::OutsidePage, at, format!("{b} not within page"));
            false
        } else {
            true
        }
    };

    let mut seen_orders = HashSet::new();
    for (i, w) in doc.words.iter().enumerate() {
        let at = format!("words[{i}]");
        if w.text.is_empty() {
            push(Rule::EmptyWord, at.clone(), String::new());
        }
        if w.text.contains(['\n', '\r']) {
            push(Rule::NewlineInWord, at.clone(), format!("{:?}", w.text));
        }
        if !seen_orders.insert(w.reading_order) {
            push(
                Rule::DuplicateReadingOrder,
                at.clone(),
                format!("order {} used twice", w.reading_order),
            );
        }
        check_box(&w.bbox, format!("{at}.box"), &mut push);
    }

    for (i, f) in doc.fields.iter().enumerate() {
        let at = format!("fields[{i}]");
        match (f.label.is_line_item(), f.row) {
            (true, None) => push(
                Rule::RowPresence,
                at.clone(),
                format!("line-item field {} has no row", f.label),
            ),
            (false, Some(r)) => push(
                Rule::RowPresence,
                at.clone(),
                format!("header field {} has row {r}", f.label),
            ),
            _ => {}
        }
        if f.boxes.is_empty() {
            push(Rule::NoBoxes, at.clone(), f.label.to_string());
            continue;
        }
        let mut boxes_ok = true;
        for (j, b) in f.boxes.iter().enumerate() {
            boxes_ok &= check_box(b, format!("{at}.boxes[{j}]"), &mut push);
        }
        for j in 0..f.boxes.len() {
            for k in j + 1..f.boxes.len() {
                if f.boxes[j].overlaps(&f.boxes[k]) {
                    push(
                        Rule::OverlappingFieldBoxes,
                        format!("{at}.boxes[{j}]"),
                        format!("overlaps boxes[{k}]"),
                    );
                }
            }
        }
        if boxes_ok {
            let observed = doc
                .words_inside(&f.boxes)
                .iter()
                .map(|w| w.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            if observed != f.value {
                push(
                    Rule::ValueMismatch,
                    at,
                    format!("value {:?} but words read {:?}", f.value, observed),
                );
            }
        }
    }
    out
}

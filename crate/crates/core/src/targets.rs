//! Training targets for the three decoder heads: a semantic class-index mask,
//! a per-anchor foreground/background mask (2N channels) and per-anchor box
//! deltas (4N channels), plus the inverse decoding with non-maximum
//! suppression.
//!
//! Box geometry here is in grid coordinates: x runs over columns, y over
//! rows, one unit per cell.

use std::path::{Path, PathBuf};

use fnv::FnvHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{iou, BBox, DocumentAnnotation, FieldInstance, FieldLabel, PageSize};
use crate::gridify::{
    build_chargrid, build_wordgrid, to_cell, EmbeddingError, EmbeddingProvider, Grid, GridConfig,
};
use crate::tensorio::{write_tensor, TensorError};

/// Ordered extractable labels. Channel `i < F` is `labels[i]`; index `F` is
/// background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub labels: Vec<FieldLabel>,
}

impl Default for FieldSchema {
    fn default() -> Self {
        FieldSchema {
            labels: FieldLabel::ALL.to_vec(),
        }
    }
}

impl FieldSchema {
    pub fn num_fields(&self) -> usize {
        self.labels.len()
    }

    pub fn background(&self) -> u8 {
        self.labels.len() as u8
    }

    pub fn index_of(&self, label: FieldLabel) -> Option<u8> {
        self.labels
            .iter()
            .position(|l| *l == label)
            .map(|i| i as u8)
    }
}

/// Class-index mask: background everywhere except the cell rectangles of
/// each field's boxes. Later fields overwrite earlier ones.
pub fn rasterize_semantic(
    fields: &[FieldInstance],
    page: PageSize,
    cfg: &GridConfig,
    schema: &FieldSchema,
) -> Grid {
    let mut grid = Grid::filled_u8(vec![cfg.height, cfg.width], schema.background());
    let data = grid.as_u8_mut().unwrap();
    for f in fields {
        let Some(class) = schema.index_of(f.label) else {
            continue;
        };
        for b in &f.boxes {
            let rect = to_cell(b, page, cfg);
            for r in rect.r0..rect.r1 {
                data[r * cfg.width + rect.c0..r * cfg.width + rect.c1].fill(class);
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub height: f64,
    pub width: f64,
}

/// N anchor shapes replicated at the centre of every grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub shapes: Vec<AnchorShape>,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            shapes: [4.0, 8.0, 16.0, 32.0]
                .into_iter()
                .map(|width| AnchorShape { height: 4.0, width })
                .collect(),
            fg_iou: 0.5,
            bg_iou: 0.2,
        }
    }
}

impl AnchorSet {
    pub fn n(&self) -> usize {
        self.shapes.len()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.shapes.is_empty() {
            p.push("anchor set has no shapes".to_string());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !(s.height > 0.0 && s.width > 0.0 && s.height.is_finite() && s.width.is_finite()) {
                p.push(format!("anchor shape {i} is not positive"));
            }
        }
        if self.fg_iou.is_nan() || self.bg_iou.is_nan() || self.fg_iou <= self.bg_iou {
            p.push(format!(
                "fg_iou {} must exceed bg_iou {}",
                self.fg_iou, self.bg_iou
            ));
        }
        p
    }

    /// Anchor `n` at cell (`row`, `col`).
    pub fn anchor(&self, row: usize, col: usize, n: usize) -> BBox {
        let s = self.shapes[n];
        let (xc, yc) = (col as f64 + 0.5, row as f64 + 0.5);
        BBox::new_unchecked(
            xc - s.width / 2.0,
            yc - s.height / 2.0,
            xc + s.width / 2.0,
            yc + s.height / 2.0,
        )
    }
}

/// `(tx, ty, tw, th)` taking `anchor` to `gt`: centre offsets normalized by
/// the anchor size, log size ratios.
pub fn encode_delta(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (xa, ya) = anchor.center();
    let (xc, yc) = gt.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    [
        (xc - xa) / wa,
        (yc - ya) / ha,
        (gt.width() / wa).ln(),
        (gt.height() / ha).ln(),
    ]
}

/// Inverse of [`encode_delta`]; the result may be degenerate or non-finite
/// for arbitrary inputs.
pub fn apply_delta(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (xa, ya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let xc = xa + d[0] * wa;
    let yc = ya + d[1] * ha;
    let w = wa * d[2].exp();
    let h = ha * d[3].exp();
    BBox::new_unchecked(xc - w / 2.0, yc - h / 2.0, xc + w / 2.0, yc + h / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxTargets {
    /// u8, H x W x 2N: channel 2n is foreground, 2n+1 background; both zero
    /// means ignore.
    pub box_mask: Grid,
    /// f32, H x W x 4N: channels 4n..4n+4 hold (tx, ty, tw, th).
    pub box_deltas: Grid,
}

/// Inclusive range of cell indices whose centre lies strictly within
/// `(lo, hi)`, clamped to `0..cells`.
fn centre_range(lo: f64, hi: f64, cells: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).floor() + 1.0;
    let last = (hi - 0.5).ceil() - 1.0;
    let first = first.max(0.0);
    let last = last.min(cells as f64 - 1.0);
    if first > last {
        None
    } else {
        Some((first as usize, last as usize))
    }
}

/// Labels every anchor against `gt_boxes` (grid coordinates) and computes
/// deltas for the foreground ones.
///
/// An anchor is foreground when its best IoU reaches `fg_iou` or when it is
/// the best anchor of some ground-truth box (so no box goes unmatched);
/// background when its best IoU is below `bg_iou`; ignored otherwise.
pub fn encode_boxes(
    gt_boxes: &[BBox],
    anchors: &AnchorSet,
    height: usize,
    width: usize,
) -> BoxTargets {
    let n = anchors.n();
    // only anchors overlapping some box can be anything but background;
    // anchor index -> (best iou, gt index)
    let mut best: FnvHashMap<usize, (f64, usize)> = FnvHashMap::default();
    let mut forced: Vec<(usize, usize)> = Vec::new();

    for (g, gt) in gt_boxes.iter().enumerate() {
        // (iou, anchor index); ties keep the lowest (row, col, n)
        let mut argmax: Option<(f64, usize)> = None;
        for (k, shape) in anchors.shapes.iter().enumerate() {
            let rows = centre_range(
                gt.y0() - shape.height / 2.0,
                gt.y1() + shape.height / 2.0,
                height,
            );
            let cols = centre_range(
                gt.x0() - shape.width / 2.0,
                gt.x1() + shape.width / 2.0,
                width,
            );
            let (Some((r0, r1)), Some((c0, c1))) = (rows, cols) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let v = iou(&anchors.anchor(r, c, k), gt);
                    if v <= 0.0 {
                        continue;
                    }
                    let a = (r * width + c) * n + k;
                    let e = best.entry(a).or_insert((0.0, g));
                    if v > e.0 {
                        *e = (v, g);
                    }
                    let better = match argmax {
                        None => true,
                        Some((bv, ba)) => v > bv || (v == bv && a < ba),
                    };
                    if better {
                        argmax = Some((v, a));
                    }
                }
            }
        }
        if let Some((_, a)) = argmax {
            forced.push((a, g));
        }
    }
    for &(a, g) in &forced {
        best.insert(a, (f64::INFINITY, g));
    }

    let total = height * width * n;
    let mut mask = Grid::filled_u8(vec![height, width, 2 * n], 0);
    let mut deltas = Grid::zeros_f32(vec![height, width, 4 * n]);
    let m = mask.as_u8_mut().unwrap();
    let d = deltas.as_f32_mut().unwrap();
    for a in 0..total {
        m[2 * a + 1] = 1;
    }
    for (&a, &(v, g)) in &best {
        if v >= anchors.fg_iou {
            m[2 * a] = 1;
            m[2 * a + 1] = 0;
            let cell = a / n;
            let (r, c, k) = (cell / width, cell % width, a % n);
            let t = encode_delta(&anchors.anchor(r, c, k), &gt_boxes[g]);
            for (i, v) in t.iter().enumerate() {
                d[4 * a + i] = *v as f32;
            }
        } else if v >= anchors.bg_iou {
            m[2 * a + 1] = 0;
        }
    }
    BoxTargets {
        box_mask: mask,
        box_deltas: deltas,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("{what} has dims {dims:?}, expected [H, W, {expected_channels}]")]
    Channels {
        what: &'static str,
        dims: Vec<usize>,
        expected_channels: usize,
    },
    #[error("score grid is {score:?} but delta grid is {delta:?}")]
    SpatialMismatch {
        score: Vec<usize>,
        delta: Vec<usize>,
    },
    #[error("{0} must be an f32 grid")]
    Dtype(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

/// Greedy NMS. Sorts by descending score, ties by (row, col, anchor), and
/// drops any box whose IoU with an already kept box exceeds `nms_iou`.
pub fn non_max_suppression(mut dets: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.row, a.col, a.anchor).cmp(&(b.row, b.col, b.anchor)))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= nms_iou) {
            kept.push(d);
        }
    }
    kept
}

/// Turns raw box-mask logits and deltas back into scored boxes.
pub fn decode_boxes(
    box_mask_scores: &Grid,
    box_deltas: &Grid,
    anchors: &AnchorSet,
    score_threshold: f32,
    nms_iou: f32,
) -> Result<Vec<Detection>, ShapeError> {
    let n = anchors.n();
    let sd = box_mask_scores.dims();
    let dd = box_deltas.dims();
    if sd.len() != 3 || sd[2] != 2 * n {
        return Err(ShapeError::Channels {
            what: "box mask scores",
            dims: sd.to_vec(),
            expected_channels: 2 * n,
        });
    }
    if dd.len() != 3 || dd[2] != 4 * n {
        return Err(ShapeError::Channels {
            what: "box deltas",
            dims: dd.to_vec(),
            expected_channels: 4 * n,
        });
    }
    if sd[..2] != dd[..2] {
        return Err(ShapeError::SpatialMismatch {
            score: sd.to_vec(),
            delta: dd.to_vec(),
        });
    }
    let scores = box_mask_scores
        .as_f32()
        .ok_or(ShapeError::Dtype("box mask scores"))?;
    let deltas = box_deltas.as_f32().ok_or(ShapeError::Dtype("box deltas"))?;
    let (height, width) = (sd[0], sd[1]);

    // p = sigmoid(fg - bg) >= t  <=>  fg - bg >= logit(t); the cheap test
    // prefilters with a little slack and the exact test decides
    let t = f64::from(score_threshold);
    let min_margin = if t <= 0.0 {
        f64::NEG_INFINITY
    } else if t >= 1.0 {
        f64::INFINITY
    } else {
        (t / (1.0 - t)).ln() - 1e-6
    };
    let grid_box = BBox::new_unchecked(0.0, 0.0, width as f64, height as f64);
    let mut dets = Vec::new();
    for a in 0..height * width * n {
        let (fg, bg) = (f64::from(scores[2 * a]), f64::from(scores[2 * a + 1]));
        let margin = fg - bg;
        if margin.is_nan() || margin < min_margin {
            continue;
        }
        let p = 1.0 / (1.0 + (bg - fg).exp());
        if p < t {
            continue;
        }
        let cell = a / n;
        let (r, c, k) = (cell / width, cell % width, a % n);
        let t4 = [0, 1, 2, 3].map(|i| f64::from(deltas[4 * a + i]));
        let b = apply_delta(&anchors.anchor(r, c, k), t4);
        let clipped = BBox::new(
            b.x0().max(grid_box.x0()),
            b.y0().max(grid_box.y0()),
            b.x1().min(grid_box.x1()),
            b.y1().min(grid_box.y1()),
        );
        if let Ok(bbox) = clipped {
            dets.push(Detection {
                bbox,
                score: p as f32,
                row: r,
                col: c,
                anchor: k,
            });
        }
    }
    Ok(non_max_suppression(dets, f64::from(nms_iou)))
}

/// Box mask as f32 logits (fg, bg) equal to the 0/1 target values, i.e.
/// what a perfectly trained box-mask head would emit before softmax.
pub fn mask_as_scores(box_mask: &Grid) -> Grid {
    let v: Vec<f32> = box_mask
        .as_u8()
        .expect("box mask is u8")
        .iter()
        .map(|&x| f32::from(x))
        .collect();
    Grid::from_parts(box_mask.dims().to_vec(), crate::gridify::GridData::F32(v)).unwrap()
}

/// Page box scaled into grid coordinates.
pub fn page_to_grid_box(b: &BBox, page: PageSize, cfg: &GridConfig) -> BBox {
    let sx = cfg.width as f64 / page.width;
    let sy = cfg.height as f64 / page.height;
    BBox::new_unchecked(b.x0() * sx, b.y0() * sy, b.x1() * sx, b.y1() * sy)
}

/// Ground-truth boxes for the box heads: one per line-item field instance,
/// class-agnostic, in grid coordinates.
pub fn box_targets_gt(doc: &DocumentAnnotation, cfg: &GridConfig) -> Vec<BBox> {
    doc.fields
        .iter()
        .filter(|f| f.label.is_line_item())
        .filter_map(|f| BBox::hull(&f.boxes))
        .map(|b| page_to_grid_box(&b, doc.page, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Chargrid,
    Wordgrid,
}

impl InputKind {
    pub fn suffix(self) -> &'static str {
        match self {
            InputKind::Chargrid => "chargrid.t",
            InputKind::Wordgrid => "wordgrid.t",
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chargrid" => Ok(InputKind::Chargrid),
            "wordgrid" => Ok(InputKind::Wordgrid),
            _ => Err(format!(
                "unknown input kind `{s}` (expected chargrid or wordgrid)"
            )),
        }
    }
}

pub const SEMANTIC_SUFFIX: &str = "sem.t";
pub const BOX_MASK_SUFFIX: &str = "boxmask.t";
pub const BOX_DELTA_SUFFIX: &str = "boxdelta.t";

/// Which model input to build alongside the targets.
#[derive(Clone, Copy)]
pub enum InputSpec<'a> {
    Chargrid,
    Wordgrid(&'a dyn EmbeddingProvider),
}

impl InputSpec<'_> {
    pub fn kind(&self) -> InputKind {
        match self {
            InputSpec::Chargrid => InputKind::Chargrid,
            InputSpec::Wordgrid(_) => InputKind::Wordgrid,
        }
    }
}

pub fn build_input(
    doc: &DocumentAnnotation,
    cfg: &GridConfig,
    input: InputSpec<'_>,
) -> Result<Grid, EmbeddingError> {
    match input {
        InputSpec::Chargrid => Ok(build_chargrid(&doc.words, doc.page, cfg)),
        InputSpec::Wordgrid(p) => build_wordgrid(&doc.words, doc.page, cfg, p),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub input: Option<(InputKind, Grid)>,
    pub semantic: Grid,
    pub targets: BoxTargets,
}

pub fn build_targets(
    doc: &DocumentAnnotation,
    cfg: &GridConfig,
    schema: &FieldSchema,
    anchors: &AnchorSet,
) -> (Grid, BoxTargets) {
    let semantic = rasterize_semantic(&doc.fields, doc.page, cfg, schema);
    let gt = box_targets_gt(doc, cfg);
    (semantic, encode_boxes(&gt, anchors, cfg.height, cfg.width))
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TargetBundle {
    pub fn build(
        doc: &DocumentAnnotation,
        cfg: &GridConfig,
        schema: &FieldSchema,
        anchors: &AnchorSet,
        input: Option<InputSpec<'_>>,
    ) -> Result<TargetBundle, EmbeddingError> {
        let input = match input {
            Some(spec) => Some((spec.kind(), build_input(doc, cfg, spec)?)),
            None => None,
        };
        let (semantic, targets) = build_targets(doc, cfg, schema, anchors);
        Ok(TargetBundle {
            input,
            semantic,
            targets,
        })
    }

    /// Writes `{id}.{chargrid|wordgrid}.t`, `{id}.sem.t`, `{id}.boxmask.t`
    /// and `{id}.boxdelta.t` into `dir`.
    pub fn write(&self, dir: &Path, doc_id: &str) -> Result<Vec<PathBuf>, TensorError> {
        let mut written = Vec::new();
        let mut put = |suffix: &str, g: &Grid| -> Result<(), TensorError> {
            let p = dir.join(format!("{doc_id}.{suffix}"));
            write_tensor(&p, g)?;
            written.push(p);
            Ok(())
        };
        if let Some((kind, g)) = &self.input {
            put(kind.suffix(), g)?;
        }
        put(SEMANTIC_SUFFIX, &self.semantic)?;
        put(BOX_MASK_SUFFIX, &self.targets.box_mask)?;
        put(BOX_DELTA_SUFFIX, &self.targets.box_deltas)?;
        Ok(written)
    }
}

/// Builds and writes the full tensor bundle for one document.
pub fn export_targets(
    doc: &DocumentAnnotation,
    cfg: &GridConfig,
    schema: &FieldSchema,
    anchors: &AnchorSet,
    input: InputSpec<'_>,
    dir: &Path,
) -> Result<Vec<PathBuf>, ExportError> {
    let bundle = TargetBundle::build(doc, cfg, schema, anchors, Some(input))?;
    Ok(bundle.write(dir, &doc.doc_id)?)
}

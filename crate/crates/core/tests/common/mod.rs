#![allow(dead_code)]

use std::path::{Path, PathBuf};

use invoicegrid::corpus::{
    Counts, DocEntry, EmbeddingSource, Manifest, Split, VocabInfo, MANIFEST_VERSION,
};
use invoicegrid::docmodel::{BBox, DocumentAnnotation, FieldLabel, PageSize};
use invoicegrid::gridify::{vocab_digest, Grid, GridConfig, GridData, BACKGROUND, OOV, VOCAB_SIZE};
use invoicegrid::layout::{instantiate, LayoutDocument, PlacedText, Template};
use invoicegrid::recordgen::{synth_record, Lexicons};
use invoicegrid::render::emit_pdf;
use invoicegrid::targets::{rasterize_semantic, AnchorSet, FieldSchema, InputKind};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn golden(name: &str) -> PathBuf {
    repo_root().join("golden").join(name)
}

pub fn currency_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/currency_clip")
}

pub fn doc_42() -> (Vec<u8>, DocumentAnnotation) {
    let record = synth_record(42, &Lexicons::builtin()).unwrap();
    let t01 = Template::builtin()
        .into_iter()
        .find(|t| t.template_id == "t01")
        .unwrap();
    emit_pdf(&instantiate(&record, &t01, 42).unwrap(), "doc_42").unwrap()
}

/// 2 x 3 x 4 f32 tensor with values -1.5, -1.25, ... in row-major order.
pub fn conformance_grid() -> Grid {
    let v: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 1.5).collect();
    Grid::from_parts(vec![2, 3, 4], GridData::F32(v)).unwrap()
}

/// Page whose grid cells are exactly 0.6 pt square, so a 10 pt Courier
/// glyph (6 pt wide) spans ten columns.
pub const CURRENCY_PAGE: PageSize = PageSize {
    width: 153.6,
    height: 218.4,
};

pub const CURRENCY_DOC: &str = "inv00000";

/// Columns of the currency glyph kept in the clipped prediction: 4 of 10.
pub const KEPT_GLYPH_COLUMNS: usize = 4;

fn run(
    text: &str,
    x: f64,
    y: f64,
    label: FieldLabel,
    row: Option<u32>,
    element: usize,
) -> PlacedText {
    let lines = text.split('\n').count() as f64;
    let width = text.split('\n').map(|l| l.chars().count()).max().unwrap() as f64 * 6.0;
    PlacedText {
        text: text.into(),
        bbox: BBox::new(x, y, x + width, y + 12.0 * lines).unwrap(),
        label: Some(label),
        row,
        font_size: 10.0,
        element,
    }
}

pub fn currency_layout() -> LayoutDocument {
    use FieldLabel::*;
    LayoutDocument {
        template_id: "currency-clip".into(),
        seed: 0,
        page: CURRENCY_PAGE,
        placed: vec![
            run("ACME GmbH", 6.0, 6.0, CompanyName, None, 0),
            run("Main St 1\n12345 Kiel", 6.0, 18.0, CompanyAddress, None, 1),
            run("INV-000042", 6.0, 48.0, InvoiceNumber, None, 2),
            run("07.03.2021", 6.0, 60.0, InvoiceDate, None, 3),
            run("Desk Lamp", 6.0, 90.0, ItemName, Some(0), 4),
            run("7", 72.0, 90.0, ItemQuantity, Some(0), 5),
            run("12,50 €", 90.0, 90.0, ItemAmount, Some(0), 6),
            run("12,50 €", 90.0, 120.0, InvoiceAmount, None, 7),
        ],
    }
}

pub fn currency_annotation() -> (Vec<u8>, DocumentAnnotation) {
    emit_pdf(&currency_layout(), CURRENCY_DOC).unwrap()
}

/// Ground-truth mask with every "€" of the two amount fields cut back to
/// its first [`KEPT_GLYPH_COLUMNS`] columns.
pub fn clipped_prediction(ann: &DocumentAnnotation, cfg: &GridConfig) -> Grid {
    let schema = FieldSchema::default();
    let sem = rasterize_semantic(&ann.fields, ann.page, cfg, &schema);
    let mut data = sem.as_u8().unwrap().to_vec();
    for w in ann.words.iter().filter(|w| w.text == "€") {
        let rect = invoicegrid::gridify::to_cell(&w.bbox, ann.page, cfg);
        assert_eq!(rect.c1 - rect.c0, 10, "glyph must span ten columns");
        for r in rect.r0..rect.r1 {
            for c in rect.c0 + KEPT_GLYPH_COLUMNS..rect.c1 {
                data[r * cfg.width + c] = schema.background();
            }
        }
    }
    Grid::from_parts(sem.dims().to_vec(), GridData::U8(data)).unwrap()
}

pub fn currency_manifest(ann: &DocumentAnnotation) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        seed: 0,
        counts: Counts {
            train: 0,
            val: 0,
            test: 1,
        },
        templates: vec![],
        template_set_digest: String::new(),
        lexicon_digest: String::new(),
        grid: GridConfig::default(),
        vocab: VocabInfo {
            size: VOCAB_SIZE,
            background: BACKGROUND,
            oov: OOV,
            digest: vocab_digest(),
        },
        fields: FieldLabel::ALL.to_vec(),
        background_class: FieldLabel::ALL.len() as u8,
        anchors: AnchorSet::default(),
        input_kind: InputKind::Chargrid,
        embedding: EmbeddingSource::Hashed,
        documents: vec![DocEntry {
            id: ann.doc_id.clone(),
            split: Split::Test,
            template_id: ann.template_id.clone(),
            seed: ann.seed,
        }],
        input: None,
        targets: None,
    }
}

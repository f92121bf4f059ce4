//! Single-page PDF output with analytically exact word boxes, and OCR TSV
//! ingestion as an alternative word source.
//!
//! All text is set in Courier, one of the PDF base-14 fonts, so every glyph
//! advances by exactly 600/1000 em and word boxes follow from character
//! counts alone. Layout coordinates are top-left based; the flip to PDF's
//! bottom-left origin happens only when the content stream is written.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::docmodel::{BBox, DocumentAnnotation, FieldInstance, PageSize, Word};
use crate::layout::{LayoutDocument, LINE_PITCH_EM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FontMetric {
    pub name: &'static str,
    /// Glyph advance in ems; identical for every glyph.
    pub advance: f64,
    pub ascent: f64,
    /// Negative, below the baseline.
    pub descent: f64,
}

/// Courier AFM metrics: width 600, ascender 629, descender -157.
pub const COURIER: FontMetric = FontMetric {
    name: "Courier",
    advance: 0.6,
    ascent: 0.629,
    descent: -0.157,
};

impl FontMetric {
    pub fn text_height(&self, font_size: f64) -> f64 {
        (self.ascent + self.descent.abs()) * font_size
    }

    pub fn text_width(&self, chars: usize, font_size: f64) -> f64 {
        chars as f64 * self.advance * font_size
    }

    pub fn is_valid(&self) -> bool {
        self.advance > 0.0 && self.ascent + self.descent.abs() <= 1.2
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("unprintable character U+{:04X} in {text:?}", *.code_point as u32)]
    Unprintable { code_point: char, text: String },
    #[error("word {text:?} has an invalid box: {source}")]
    Geometry {
        text: String,
        source: crate::docmodel::GeometryError,
    },
}

/// WinAnsiEncoding byte for `c`, or `None` when the base font cannot show it.
///
/// Covers printable ASCII, the euro sign and the Latin-1 range U+00A1..U+00FF.
pub fn winansi_byte(c: char) -> Option<u8> {
    match c {
        ' '..='~' => Some(c as u8),
        '€' => Some(0x80),
        '\u{A1}'..='\u{FF}' => Some(c as u32 as u8),
        _ => None,
    }
}

fn fmt_num(v: f64) -> String {
    let mut s = format!("{v:.4}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn pdf_string(text: &str) -> Result<String, RenderError> {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('(');
    for c in text.chars() {
        let b = winansi_byte(c).ok_or_else(|| RenderError::Unprintable {
            code_point: c,
            text: text.to_string(),
        })?;
        match b {
            b'(' | b')' | b'\\' => {
                out.push('\\');
                out.push(b as char);
            }
            0x20..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\{b:03o}");
            }
        }
    }
    out.push(')');
    Ok(out)
}

struct Line<'a> {
    placed: usize,
    text: &'a str,
    left: f64,
    top: f64,
    font_size: f64,
}

/// Renders `layout` to PDF bytes plus the matching ground-truth annotation.
///
/// Output bytes depend only on the inputs: objects are written in a fixed
/// order, there are no timestamps and the trailer `/ID` is a digest of the
/// content stream.
pub fn emit_pdf(
    layout: &LayoutDocument,
    doc_id: &str,
) -> Result<(Vec<u8>, DocumentAnnotation), RenderError> {
    let metric = COURIER;
    let mut lines: Vec<Line> = Vec::new();
    for (pi, p) in layout.placed.iter().enumerate() {
        for (li, text) in p.text.split('\n').enumerate() {
            lines.push(Line {
                placed: pi,
                text,
                left: p.bbox.x0(),
                top: p.bbox.y0() + li as f64 * LINE_PITCH_EM * p.font_size,
                font_size: p.font_size,
            });
        }
    }
    // reading order: top to bottom, then left to right
    lines.sort_by(|a, b| a.top.total_cmp(&b.top).then(a.left.total_cmp(&b.left)));

    let mut content = String::new();
    let mut words = Vec::new();
    // per placed run: (line top, word indices) in line order
    let mut run_lines: Vec<Vec<(f64, Vec<usize>)>> = vec![Vec::new(); layout.placed.len()];
    for line in &lines {
        if line.text.is_empty() {
            continue;
        }
        let baseline = layout.page.height - (line.top + metric.ascent * line.font_size);
        let _ = write!(
            content,
            "BT\n/F1 {} Tf\n{} {} Td\n{} Tj\nET\n",
            fmt_num(line.font_size),
            fmt_num(line.left),
            fmt_num(baseline),
            pdf_string(line.text)?
        );

        let mut idx = Vec::new();
        let mut offset = 0usize;
        for token in line.text.split(' ') {
            let n = token.chars().count();
            if n > 0 {
                let x0 = line.left + metric.text_width(offset, line.font_size);
                let x1 = x0 + metric.text_width(n, line.font_size);
                let y1 = line.top + metric.text_height(line.font_size);
                let bbox =
                    BBox::new(x0, line.top, x1, y1).map_err(|source| RenderError::Geometry {
                        text: token.to_string(),
                        source,
                    })?;
                idx.push(words.len());
                words.push(Word {
                    text: token.to_string(),
                    bbox,
                    reading_order: words.len() as u32,
                });
            }
            offset += n + 1;
        }
        run_lines[line.placed].push((line.top, idx));
    }

    let mut fields = Vec::new();
    for (pi, p) in layout.placed.iter().enumerate() {
        let Some(label) = p.label else { continue };
        let mut per_line = run_lines[pi].clone();
        per_line.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut boxes = Vec::new();
        let mut texts = Vec::new();
        for (_, idx) in &per_line {
            if let Some(hull) = BBox::hull(idx.iter().map(|&i| &words[i].bbox)) {
                boxes.push(hull);
                texts.extend(idx.iter().map(|&i| words[i].text.as_str()));
            }
        }
        if boxes.is_empty() {
            continue;
        }
        fields.push(FieldInstance {
            label,
            value: texts.join(" "),
            row: p.row,
            boxes,
        });
    }

    let pdf = assemble_pdf(layout.page, content.as_bytes());
    let annotation = DocumentAnnotation {
        doc_id: doc_id.to_string(),
        page: layout.page,
        template_id: layout.template_id.clone(),
        seed: layout.seed,
        words,
        fields,
    };
    Ok((pdf, annotation))
}

fn assemble_pdf(page: PageSize, content: &[u8]) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::with_capacity(content.len() + 1024);
    out.extend_from_slice(b"%PDF-1.4\n%\xE2\xE3\xCF\xD3\n");
    let mut offsets = Vec::with_capacity(5);
    let objects = [
        "<< /Type /Catalog /Pages 2 0 R >>".to_string(),
        "<< /Type /Pages /Kids [3 0 R] /Count 1 >>".to_string(),
        format!(
            "<< /Type /Page /Parent 2 0 R /MediaBox [0 0 {} {}] /Resources << /Font << /F1 4 0 R >> >> /Contents 5 0 R >>",
            fmt_num(page.width),
            fmt_num(page.height)
        ),
        "<< /Type /Font /Subtype /Type1 /BaseFont /Courier /Encoding /WinAnsiEncoding >>"
            .to_string(),
    ];
    for (i, body) in objects.iter().enumerate() {
        offsets.push(out.len());
        out.extend_from_slice(format!("{} 0 obj\n{body}\nendobj\n", i + 1).as_bytes());
    }
    offsets.push(out.len());
    out.extend_from_slice(format!("5 0 obj\n<< /Length {} >>\nstream\n", content.len()).as_bytes());
    out.extend_from_slice(content);
    out.extend_from_slice(b"\nendstream\nendobj\n");

    let xref_at = out.len();
    out.extend_from_slice(b"xref\n0 6\n0000000000 65535 f \n");
    for off in &offsets {
        out.extend_from_slice(format!("{off:010} 00000 n \n").as_bytes());
    }
    let id = hex::encode_upper(&Sha256::digest(content)[..16]);
    out.extend_from_slice(
        format!(
            "trailer\n<< /Size 6 /Root 1 0 R /ID [<{id}> <{id}>] >>\nstartxref\n{xref_at}\n%%EOF\n"
        )
        .as_bytes(),
    );
    out
}

/// Where evaluation takes its words from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordSource {
    /// Words recorded in the annotation at render time.
    Exact,
    /// Words from an ingested `{id}.ocr.tsv` with its `{id}.dpi` sidecar.
    Ocr,
}

impl FromStr for WordSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(WordSource::Exact),
            "ocr" => Ok(WordSource::Ocr),
            _ => Err(format!("unknown word source `{s}` (expected exact or ocr)")),
        }
    }
}

impl std::fmt::Display for WordSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WordSource::Exact => "exact",
            WordSource::Ocr => "ocr",
        })
    }
}

#[derive(Debug, Error)]
pub enum OcrError {
    #[error("TSV line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("OCR TSV is not UTF-8")]
    Encoding,
    #[error("missing DPI sidecar {0}")]
    MissingDpi(String),
    #[error("bad DPI sidecar {path}: {reason}")]
    BadDpi { path: String, reason: String },
    #[error("no OCR TSV for document {0}")]
    MissingTsv(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub const TSV_HEADER: &str =
    "level\tpage_num\tblock_num\tpar_num\tline_num\tword_num\tleft\ttop\twidth\theight\tconf\ttext";
const TSV_WORD_LEVEL: u32 = 5;

/// Parses Tesseract-style TSV into words in page points.
///
/// Only level-5 rows with non-negative confidence and non-empty text become
/// words. Pixel coordinates are scaled by `72 / dpi` and clipped to the page.
pub fn ingest_ocr_tsv(tsv: &[u8], page: PageSize, dpi: f64) -> Result<Vec<Word>, OcrError> {
    let text = std::str::from_utf8(tsv).map_err(|_| OcrError::Encoding)?;
    let scale = 72.0 / dpi;
    let mut rows: Vec<([u32; 5], BBox, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if i == 0 && line.starts_with("level") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(11..=12).contains(&cols.len()) {
            return Err(OcrError::Parse {
                line: line_no,
                reason: format!("expected 12 columns, found {}", cols.len()),
            });
        }
        let int = |k: usize| -> Result<i64, OcrError> {
            cols[k].trim().parse::<i64>().map_err(|_| OcrError::Parse {
                line: line_no,
                reason: format!("column {} is not an integer: {:?}", k + 1, cols[k]),
            })
        };
        let level = int(0)?;
        let keys = [int(1)?, int(2)?, int(3)?, int(4)?, int(5)?];
        let (left, top, width, height) = (int(6)?, int(7)?, int(8)?, int(9)?);
        let conf: f64 = cols[10].trim().parse().map_err(|_| OcrError::Parse {
            line: line_no,
            reason: format!("confidence is not a number: {:?}", cols[10]),
        })?;
        let word = cols.get(11).map(|s| s.trim()).unwrap_or("");
        if level != i64::from(TSV_WORD_LEVEL) || conf < 0.0 || word.is_empty() {
            continue;
        }
        if keys.iter().any(|k| *k < 0) || left < 0 || top < 0 || width <= 0 || height <= 0 {
            return Err(OcrError::Parse {
                line: line_no,
                reason: "negative index or empty box".into(),
            });
        }
        let x0 = (left as f64 * scale).min(page.width);
        let y0 = (top as f64 * scale).min(page.height);
        let x1 = ((left + width) as f64 * scale).min(page.width);
        let y1 = ((top + height) as f64 * scale).min(page.height);
        let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| OcrError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        rows.push((keys.map(|k| k as u32), bbox, word.to_string()));
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, (_, bbox, text))| Word {
            text,
            bbox,
            reading_order: i as u32,
        })
        .collect())
}

/// Writes words as TSV at `dpi`, one line per word. Useful for building OCR
/// fixtures; rounding to whole pixels loses at most half a pixel per edge.
pub fn words_to_tsv(words: &[Word], dpi: f64) -> String {
    let scale = dpi / 72.0;
    let mut ordered: Vec<&Word> = words.iter().collect();
    ordered.sort_by_key(|w| w.reading_order);
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    let _ = writeln!(out, "1\t1\t0\t0\t0\t0\t0\t0\t0\t0\t-1\t");
    for (i, w) in ordered.iter().enumerate() {
        let l = (w.bbox.x0() * scale).round() as i64;
        let t = (w.bbox.y0() * scale).round() as i64;
        let r = (w.bbox.x1() * scale).round() as i64;
        let b = (w.bbox.y1() * scale).round() as i64;
        let _ = writeln!(
            out,
            "5\t1\t1\t1\t1\t{}\t{l}\t{t}\t{}\t{}\t95.000000\t{}",
            i + 1,
            (r - l).max(1),
            (b - t).max(1),
            w.text
        );
    }
    out
}

pub fn read_dpi_sidecar(path: &Path) -> Result<f64, OcrError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            OcrError::MissingDpi(path.display().to_string())
        } else {
            OcrError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })?;
    let dpi: f64 = text.trim().parse().map_err(|_| OcrError::BadDpi {
        path: path.display().to_string(),
        reason: format!("{:?} is not a number", text.trim()),
    })?;
    if !(dpi.is_finite() && dpi > 0.0) {
        return Err(OcrError::BadDpi {
            path: path.display().to_string(),
            reason: "must be positive".into(),
        });
    }
    Ok(dpi)
}

/// Reads `{id}.ocr.tsv` and `{id}.dpi` from `dir`.
pub fn load_ocr_words(dir: &Path, doc_id: &str, page: PageSize) -> Result<Vec<Word>, OcrError> {
    let tsv_path = dir.join(format!("{doc_id}.ocr.tsv"));
    let tsv = match fs::read(&tsv_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(OcrError::MissingTsv(doc_id.to_string()))
        }
        Err(source) => {
            return Err(OcrError::Io {
                path: tsv_path.display().to_string(),
                source,
            })
        }
    };
    let dpi = read_dpi_sidecar(&dir.join(format!("{doc_id}.dpi")))?;
    ingest_ocr_tsv(&tsv, page, dpi)
}

/// Words for `doc` from the requested source. OCR files are looked up in
/// `dir`.
pub fn words_for(
    doc: &DocumentAnnotation,
    source: WordSource,
    dir: &Path,
) -> Result<Vec<Word>, OcrError> {
    match source {
        WordSource::Exact => Ok(doc.words.clone()),
        WordSource::Ocr => load_ocr_words(dir, &doc.doc_id, doc.page),
    }
}

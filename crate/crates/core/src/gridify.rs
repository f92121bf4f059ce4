//! Page-to-grid rasterization of words: chargrid (character indices) and
//! wordgrid (word embedding vectors).

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::docmodel::{BBox, PageSize, Word};

pub const BACKGROUND: u8 = 0;
/// Index for characters outside printable ASCII.
pub const OOV: u8 = 96;
pub const VOCAB_SIZE: usize = 97;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Rows.
    pub height: usize,
    /// Columns.
    pub width: usize,
    pub embed_dim: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            height: 364,
            width: 256,
            embed_dim: 96,
        }
    }
}

/// Vocabulary index of `c`: 1..=95 for U+0020..U+007E, [`OOV`] otherwise.
pub fn char_index(c: char) -> u8 {
    match c {
        ' '..='~' => (c as u8) - 0x1f,
        _ => OOV,
    }
}

/// Digest identifying the character vocabulary, recorded in manifests.
pub fn vocab_digest() -> String {
    let mut h = Sha256::new();
    h.update(b"bg=0;");
    for b in 0x20u8..=0x7e {
        h.update([b, char_index(b as char)]);
    }
    h.update(format!(";oov={OOV};size={VOCAB_SIZE}").as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("data length {actual} does not match dims {dims:?} (expected {expected})")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl GridData {
    pub fn len(&self) -> usize {
        match self {
            GridData::U8(v) => v.len(),
            GridData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major tensor, last dimension fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    data: GridData,
}

impl Grid {
    pub fn from_parts(dims: Vec<usize>, data: GridData) -> Result<Grid, GridError> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(GridError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let GridData::F32(v) = &data {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(GridError::NonFinite(i));
            }
        }
        Ok(Grid { dims, data })
    }

    pub fn filled_u8(dims: Vec<usize>, value: u8) -> Grid {
        let n = dims.iter().product();
        Grid {
            dims,
            data: GridData::U8(vec![value; n]),
        }
    }

    pub fn zeros_f32(dims: Vec<usize>) -> Grid {
        let n = dims.iter().product();
        Grid {
            dims,
            data: GridData::F32(vec![0.0; n]),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &GridData {
        &self.data
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            GridData::U8(v) => Some(v),
            GridData::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            GridData::F32(v) => Some(v),
            GridData::U8(_) => None,
        }
    }

    pub(crate) fn as_u8_mut(&mut self) -> Option<&mut [u8]> {
        match &mut self.data {
            GridData::U8(v) => Some(v),
            GridData::F32(_) => None,
        }
    }

    pub(crate) fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            GridData::F32(v) => Some(v),
            GridData::U8(_) => None,
        }
    }

    /// Treats a 2-D u8 grid of indices as an `H x W x depth` one-hot tensor
    /// without materializing it.
    pub fn one_hot(&self, depth: usize) -> Option<OneHotView<'_>> {
        match (&self.data, self.dims.as_slice()) {
            (GridData::U8(v), [h, w]) => Some(OneHotView {
                data: v,
                height: *h,
                width: *w,
                depth,
            }),
            _ => None,
        }
    }
}

pub struct OneHotView<'a> {
    data: &'a [u8],
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl OneHotView<'_> {
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        assert!(row < self.height && col < self.width && channel < self.depth);
        u8::from(self.data[row * self.width + col] as usize == channel)
    }
}

/// Half-open cell rectangle: rows `r0..r1`, columns `c0..c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CellRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl CellRect {
    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }

    /// The rectangle as a box in grid coordinates (x = column, y = row).
    pub fn to_grid_box(&self) -> BBox {
        BBox::new_unchecked(
            self.c0 as f64,
            self.r0 as f64,
            self.c1 as f64,
            self.r1 as f64,
        )
    }
}

fn span(lo: f64, hi: f64, page_extent: f64, cells: usize) -> (usize, usize) {
    let scale = cells as f64 / page_extent;
    let a = ((lo * scale).floor().max(0.0) as usize).min(cells - 1);
    let b = ((hi * scale).ceil().max(0.0) as usize).min(cells);
    if b <= a {
        (a, a + 1)
    } else {
        (a, b)
    }
}

/// Cells covered by a page box: lower bounds floored, upper bounds
/// ceiled, every box covering at least one cell.
pub fn to_cell(bbox: &BBox, page: PageSize, cfg: &GridConfig) -> CellRect {
    let (r0, r1) = span(bbox.y0(), bbox.y1(), page.height, cfg.height);
    let (c0, c1) = span(bbox.x0(), bbox.x1(), page.width, cfg.width);
    CellRect { r0, c0, r1, c1 }
}

fn in_reading_order(words: &[Word]) -> Vec<&Word> {
    let mut v: Vec<&Word> = words.iter().collect();
    v.sort_by_key(|w| w.reading_order);
    v
}

/// H x W grid of character indices. Each word's cell rectangle is split into
/// equal column spans, one per character; later words overwrite earlier ones.
pub fn build_chargrid(words: &[Word], page: PageSize, cfg: &GridConfig) -> Grid {
    let mut grid = Grid::filled_u8(vec![cfg.height, cfg.width], BACKGROUND);
    let data = grid.as_u8_mut().unwrap();
    for w in in_reading_order(words) {
        let rect = to_cell(&w.bbox, page, cfg);
        let chars: Vec<char> = w.text.chars().collect();
        let n = chars.len();
        if n == 0 {
            continue;
        }
        let width = rect.c1 - rect.c0;
        for (i, ch) in chars.iter().enumerate() {
            let a = rect.c0 + i * width / n;
            let b = rect.c0 + (i + 1) * width / n;
            let idx = char_index(*ch);
            for r in rect.r0..rect.r1 {
                data[r * cfg.width + a..r * cfg.width + b].fill(idx);
            }
        }
    }
    grid
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no embedding for word {0:?}")]
    UnknownWord(String),
    #[error("embedding for {word:?} has {actual} components, expected {expected}")]
    WrongDim {
        word: String,
        expected: usize,
        actual: usize,
    },
    #[error("provider dimension {provider} does not match grid embed_dim {grid}")]
    DimMismatch { provider: usize, grid: usize },
    #[error("embedding sidecar: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Maps a word to a fixed-size vector.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn lookup(&self, word: &str) -> Result<Vec<f32>, EmbeddingError>;
}

/// FNV-1a 64 of the UTF-8 bytes seeds a splitmix64 stream; each draw maps to
/// [-1, 1] through its top 53 bits; the result is L2-normalized.
pub fn hashed_embedding(word: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut h = FnvHasher::default();
    h.write(word.as_bytes());
    let mut rng = SplitMix64::seed_from_u64(h.finish());
    let raw: Vec<f64> = (0..dim)
        .map(|_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0)
        .collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|x| (x / norm) as f32).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedding {
    pub dim: usize,
}

impl EmbeddingProvider for HashedEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, word: &str) -> Result<Vec<f32>, EmbeddingError> {
        Ok(hashed_embedding(word, self.dim))
    }
}

const SIDECAR_MAGIC: &[u8; 4] = b"EMBD";
const SIDECAR_VERSION: u32 = 1;

/// Vectors read from an `EMBD` sidecar written by an external NLP tool.
///
/// File layout (little-endian): `EMBD`, u32 version = 1, u32 D, then until
/// end of file records of u16 byte length, UTF-8 word, D f32 values.
#[derive(Debug, Clone)]
pub struct SidecarEmbedding {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl SidecarEmbedding {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let fmt = |m: &str| EmbeddingError::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(fmt("missing EMBD header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SIDECAR_VERSION {
            return Err(EmbeddingError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fmt("zero dimension"));
        }
        let mut table = HashMap::new();
        let mut at = 12;
        while at < bytes.len() {
            if at + 2 > bytes.len() {
                return Err(fmt("truncated record length"));
            }
            let len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
            at += 2;
            let end = at + len + 4 * dim;
            if end > bytes.len() {
                return Err(fmt("truncated record"));
            }
            let word = std::str::from_utf8(&bytes[at..at + len])
                .map_err(|_| fmt("word is not UTF-8"))?
                .to_string();
            at += len;
            let v: Vec<f32> = bytes[at..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::Format(format!(
                    "non-finite vector for {word:?}"
                )));
            }
            at = end;
            table.insert(word, v);
        }
        Ok(SidecarEmbedding { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let bytes = fs::read(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Serializes `entries` in the sidecar format. Entries are written in the
/// given order.
pub fn encode_sidecar<'a>(
    dim: usize,
    entries: impl IntoIterator<Item = (&'a str, &'a [f32])>,
) -> Result<Vec<u8>, EmbeddingError> {
    let mut out = Vec::new();
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (word, v) in entries {
        if v.len() != dim {
            return Err(EmbeddingError::WrongDim {
                word: word.to_string(),
                expected: dim,
                actual: v.len(),
            });
        }
        let len = u16::try_from(word.len())
            .map_err(|_| EmbeddingError::Format(format!("word too long: {} bytes", word.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(word.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

impl EmbeddingProvider for SidecarEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, word: &str) -> Result<Vec<f32>, EmbeddingError> {
        self.table
            .get(word)
            .cloned()
            .ok_or_else(|| EmbeddingError::UnknownWord(word.to_string()))
    }
}

/// H x W x D grid holding each word's embedding over its full cell
/// rectangle; background stays zero.
pub fn build_wordgrid(
    words: &[Word],
    page: PageSize,
    cfg: &GridConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Grid, EmbeddingError> {
    let d = cfg.embed_dim;
    if provider.dim() != d {
        return Err(EmbeddingError::DimMismatch {
            provider: provider.dim(),
            grid: d,
        });
    }
    let mut grid = Grid::zeros_f32(vec![cfg.height, cfg.width, d]);
    let data = grid.as_f32_mut().unwrap();
    for w in in_reading_order(words) {
        let v = provider.lookup(&w.text)?;
        if v.len() != d || v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::WrongDim {
                word: w.text.clone(),
                expected: d,
                actual: v.len(),
            });
        }
        let rect = to_cell(&w.bbox, page, cfg);
        for r in rect.r0..rect.r1 {
            for c in rect.c0..rect.c1 {
                let at = (r * cfg.width + c) * d;
                data[at..at + d].copy_from_slice(&v);
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A4: PageSize = PageSize::A4;

    fn word(text: &str, b: BBox, order: u32) -> Word {
        Word {
            text: text.into(),
            bbox: b,
            reading_order: order,
        }
    }

    #[test]
    fn vocab_layout() {
        assert_eq!(char_index(' '), 1);
        assert_eq!(char_index('~'), 95);
        assert_eq!(char_index('A'), 34);
        assert_eq!(char_index('€'), OOV);
        assert_eq!(char_index('\t'), OOV);
    }

    #[test]
    fn to_cell_examples() {
        let cfg = GridConfig::default();
        assert_eq!(
            to_cell(&A4.bbox(), A4, &cfg),
            CellRect {
                r0: 0,
                c0: 0,
                r1: 364,
                c1: 256
            }
        );
        let r = to_cell(&BBox::new(0.0, 0.0, 59.5, 84.2).unwrap(), A4, &cfg);
        assert_eq!((r.c0, r.c1, r.r0, r.r1), (0, 26, 0, 37));
        // 0.1pt wide, inside one column
        let r = to_cell(&BBox::new(100.0, 100.0, 100.1, 110.0).unwrap(), A4, &cfg);
        assert_eq!(r.c1 - r.c0, 1);
        // degenerate span exactly on a cell boundary is widened too
        let x = 595.0 * 10.0 / 256.0;
        let r = to_cell(&BBox::new_unchecked(x, 1.0, x, 2.0), A4, &cfg);
        assert_eq!(r.c1 - r.c0, 1);
    }

    #[test]
    fn chargrid_equal_split() {
        // page = grid size so that box coordinates are cell coordinates
        let page = PageSize {
            width: 256.0,
            height: 364.0,
        };
        let cfg = GridConfig::default();
        let g = build_chargrid(
            &[word("AB", BBox::new(10.0, 5.0, 14.0, 7.0).unwrap(), 0)],
            page,
            &cfg,
        );
        let d = g.as_u8().unwrap();
        for r in 5..7 {
            assert_eq!(&d[r * 256 + 10..r * 256 + 12], &[char_index('A'); 2]);
            assert_eq!(&d[r * 256 + 12..r * 256 + 14], &[char_index('B'); 2]);
        }
        assert_eq!(d.iter().filter(|&&v| v != 0).count(), 8);
    }

    #[test]
    fn chargrid_empty_and_oov() {
        let cfg = GridConfig::default();
        let g = build_chargrid(&[], A4, &cfg);
        assert_eq!(g.dims(), &[364, 256]);
        assert!(g.as_u8().unwrap().iter().all(|&v| v == 0));
        let g = build_chargrid(
            &[word("€", BBox::new(10.0, 10.0, 16.0, 18.0).unwrap(), 0)],
            A4,
            &cfg,
        );
        assert!(g.as_u8().unwrap().iter().all(|&v| v == 0 || v == OOV));
        assert!(g.as_u8().unwrap().contains(&OOV));
    }

    #[test]
    fn chargrid_later_word_wins() {
        let page = PageSize {
            width: 256.0,
            height: 364.0,
        };
        let cfg = GridConfig::default();
        let b = BBox::new(0.0, 0.0, 4.0, 1.0).unwrap();
        let g = build_chargrid(&[word("ZZZZ", b, 1), word("AAAA", b, 0)], page, &cfg);
        assert_eq!(&g.as_u8().unwrap()[..4], &[char_index('Z'); 4]);
    }

    #[test]
    fn one_hot_view() {
        let g = Grid::from_parts(vec![1, 2], GridData::U8(vec![0, 3])).unwrap();
        let v = g.one_hot(VOCAB_SIZE).unwrap();
        assert_eq!(v.get(0, 0, 0), 1);
        assert_eq!(v.get(0, 1, 3), 1);
        assert_eq!(v.get(0, 1, 0), 0);
    }

    #[test]
    fn hashed_embedding_properties() {
        let a = hashed_embedding("Invoice", 96);
        assert_eq!(a, hashed_embedding("Invoice", 96));
        assert_ne!(a, hashed_embedding("invoice", 96));
        let n: f64 = a
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(hashed_embedding("x", 1).len(), 1);
    }

    #[test]
    fn wordgrid_fill_and_background() {
        let cfg = GridConfig {
            embed_dim: 8,
            ..GridConfig::default()
        };
        let p = HashedEmbedding { dim: 8 };
        let g = build_wordgrid(&[], A4, &cfg, &p).unwrap();
        assert!(g.as_f32().unwrap().iter().all(|&x| x == 0.0));

        let b = BBox::new(100.0, 200.0, 130.0, 208.0).unwrap();
        let g = build_wordgrid(&[word("Total", b, 0)], A4, &cfg, &p).unwrap();
        let want = hashed_embedding("Total", 8);
        let rect = to_cell(&b, A4, &cfg);
        let data = g.as_f32().unwrap();
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let cell = &data[(r * cfg.width + c) * 8..(r * cfg.width + c + 1) * 8];
                if rect.contains(r, c) {
                    assert_eq!(cell, want.as_slice());
                } else {
                    assert!(cell.iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn wordgrid_dimension_mismatch() {
        let cfg = GridConfig::default();
        assert!(matches!(
            build_wordgrid(&[], A4, &cfg, &HashedEmbedding { dim: 4 }),
            Err(EmbeddingError::DimMismatch {
                provider: 4,
                grid: 96
            })
        ));
    }

    #[test]
    fn sidecar_round_trip_and_unknown_word() {
        let v1 = [0.5f32, -0.5];
        let v2 = [1.0f32, 0.0];
        let bytes = encode_sidecar(2, [("Total", &v1[..]), ("€", &v2[..])]).unwrap();
        assert_eq!(&bytes[..4], b"EMBD");
        let s = SidecarEmbedding::from_bytes(&bytes).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.lookup("€").unwrap(), v2);
        assert!(matches!(s.lookup("nope"), Err(EmbeddingError::UnknownWord(w)) if w == "nope"));
        assert!(SidecarEmbedding::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let cfg = GridConfig {
            embed_dim: 2,
            ..GridConfig::default()
        };
        let w = word("Missing", BBox::new(1.0, 1.0, 5.0, 5.0).unwrap(), 0);
        let err = build_wordgrid(&[w], A4, &cfg, &s).unwrap_err();
        assert!(err.to_string().contains("Missing"));
    }

    #[test]
    fn grid_rejects_bad_parts() {
        assert!(matches!(
            Grid::from_parts(vec![2, 2], GridData::U8(vec![0; 3])),
            Err(GridError::LengthMismatch { .. })
        ));
        assert_eq!(
            Grid::from_parts(vec![2], GridData::F32(vec![0.0, f32::NAN])),
            Err(GridError::NonFinite(1))
        );
    }
}

//! On-disk formats and validation.
//!
//! All integers and reals are little-endian. Datasets, text tables and
//! relevance matrices store reals as `f32`; checkpoints store parameters and
//! optimizer moments as `f64` so a reload continues training bit-exactly.
//!
//! ```text
//! dataset     "DEDS" | version u32 = 1 | n u64 | clip_dim u32 | style_dim u32
//!             | digest u64 | images n·clip_dim f32 | styles n·style_dim f32
//! text table  "DETT" | count u32 | per entry: name_len u16 | utf-8 name | clip_dim f32
//! relevance   "DERM" | version u32 = 1 | style_dim u32 | clip_dim u32 | probe f64
//!             | samples u32 | rows style_dim·clip_dim f32
//! checkpoint  "DMAP" | version u32 = 1 | layout 5×u32 | clip_dim u32 | slope f64
//!             | mode u8 | seed u64 | config digest u64
//!             | 9 stacks (style c/m/f, condition c/m/f, fusion c/m/f)
//!             | trainer flag u8 [| step u64 | lr, β1, β2, ε f64 | moments f64]
//!             | digest u64 over everything before it
//! ```
//!
//! The dataset digest is 64-bit FNV-1a over the two payloads.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::mapper::{ConditionMode, MapperArch, MapperParams, StyleLayout};
use crate::numerics::{AdamConfig, AdamState, Linear, LinearStack, Parameters};
use crate::relevance::RelevanceMatrix;

pub const DATASET_MAGIC: [u8; 4] = *b"DEDS";
pub const TEXT_MAGIC: [u8; 4] = *b"DETT";
pub const RELEVANCE_MAGIC: [u8; 4] = *b"DERM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMAP";
pub const FORMAT_VERSION: u32 = 1;

/// Allowed deviation of an embedding's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

const DATASET_HEADER: usize = 4 + 4 + 8 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{extra} unexpected trailing bytes after offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("digest mismatch: header says {stored:#018x}, payload hashes to {computed:#018x}")]
    Digest { stored: u64, computed: u64 },
    #[error("non-finite value in {matrix}[{row}][{col}] at byte offset {offset}")]
    NonFinite {
        matrix: &'static str,
        row: usize,
        col: usize,
        offset: u64,
    },
    #[error("{matrix} row {row} has norm {norm}, outside 1 ± {NORM_TOLERANCE} (byte offset {offset})")]
    NormViolation {
        matrix: &'static str,
        row: usize,
        norm: f64,
        offset: u64,
    },
    #[error("invalid utf-8 name at byte offset {offset}")]
    BadName { offset: u64 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("refusing to write invalid data:\n{0}")]
    Invalid(ValidationReport),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Streaming 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv64::default();
    h.update(bytes);
    h.finish()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingKind {
    NonFiniteImage,
    NonFiniteStyle,
    NormViolation,
    InsufficientRecords,
    RowCountMismatch,
    DuplicateName,
    DimensionMismatch,
}

impl FindingKind {
    fn describe(&self) -> &'static str {
        match self {
            FindingKind::NonFiniteImage => "non-finite value in images",
            FindingKind::NonFiniteStyle => "non-finite value in styles",
            FindingKind::NormViolation => "embedding norm outside 1 ± 1e-3",
            FindingKind::InsufficientRecords => "insufficient records for pair sampling",
            FindingKind::RowCountMismatch => "images and styles have different record counts",
            FindingKind::DuplicateName => "duplicate entry name",
            FindingKind::DimensionMismatch => "vector dimension differs from the table's",
        }
    }
}

/// One violated invariant with the number of offending items and the first
/// offending `(row, column)`; the column is 0 for row-level findings.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub kind: FindingKind,
    pub count: usize,
    pub first: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn find(&self, kind: FindingKind) -> Option<&Finding> {
        self.findings.iter().find(|f| f.kind == kind)
    }

    pub(crate) fn record(&mut self, kind: FindingKind, at: (usize, usize)) {
        match self.findings.iter_mut().find(|f| f.kind == kind) {
            Some(f) => f.count += 1,
            None => self.findings.push(Finding {
                kind,
                count: 1,
                first: Some(at),
            }),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return write!(f, "no findings");
        }
        for (k, finding) in self.findings.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {} occurrence(s)", finding.kind.describe(), finding.count)?;
            if let Some((r, c)) = finding.first {
                write!(f, ", first at ({r},{c})")?;
            }
        }
        Ok(())
    }
}

fn check_rows(report: &mut ValidationReport, m: &Array2<f32>, nonfinite: FindingKind, unit: bool) {
    for (r, row) in m.rows().into_iter().enumerate() {
        let mut finite = true;
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() {
                report.record(nonfinite, (r, c));
                finite = false;
            }
        }
        if unit && finite {
            let n = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                report.record(FindingKind::NormViolation, (r, 0));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset

/// Paired image embeddings and style codes. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    images: Array2<f32>,
    styles: Array2<f32>,
}

impl EmbeddingDataset {
    /// Wrap two matrices without validating them; see [`validate`](Self::validate).
    pub fn new(images: Array2<f32>, styles: Array2<f32>) -> Self {
        Self {
            images: images.as_standard_layout().into_owned(),
            styles: styles.as_standard_layout().into_owned(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clip_dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn style_dim(&self) -> usize {
        self.styles.ncols()
    }

    pub fn images(&self) -> &Array2<f32> {
        &self.images
    }

    pub fn styles(&self) -> &Array2<f32> {
        &self.styles
    }

    pub fn image(&self, r: usize) -> Vec<f64> {
        self.images.row(r).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn style(&self, r: usize) -> Vec<f64> {
        self.styles.row(r).iter().map(|&v| f64::from(v)).collect()
    }

    /// Records of `self` followed by those of `other`.
    pub fn concat(&self, other: &EmbeddingDataset) -> Option<EmbeddingDataset> {
        Some(Self::new(
            ndarray::concatenate(ndarray::Axis(0), &[self.images.view(), other.images.view()]).ok()?,
            ndarray::concatenate(ndarray::Axis(0), &[self.styles.view(), other.styles.view()]).ok()?,
        ))
    }

    /// Every invariant violation; empty iff the dataset is fit for training.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.images.nrows() != self.styles.nrows() {
            report.record(FindingKind::RowCountMismatch, (self.images.nrows().min(self.styles.nrows()), 0));
        }
        check_rows(&mut report, &self.images, FindingKind::NonFiniteImage, true);
        check_rows(&mut report, &self.styles, FindingKind::NonFiniteStyle, false);
        if self.len() < 2 {
            report.record(FindingKind::InsufficientRecords, (self.len(), 0));
        }
        report
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.images.len() + self.styles.len()));
        for v in self.images.iter().chain(self.styles.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub fn encode_dataset(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let report = dataset.validate();
    if !report.is_empty() {
        return Err(StoreError::Invalid(report));
    }
    Ok(encode_dataset_unchecked(dataset))
}

#[doc(hidden)]
pub fn encode_dataset_unchecked(dataset: &EmbeddingDataset) -> Vec<u8> {
    let payload = dataset.payload();
    let mut out = Vec::with_capacity(DATASET_HEADER + payload.len());
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.clip_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.style_dim() as u32).to_le_bytes());
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let n = r.u64()?;
    let clip = r.u32()? as u64;
    let style = r.u32()? as u64;
    let stored = r.u64()?;

    let expected = (DATASET_HEADER as u64)
        .checked_add(n.checked_mul(clip + style).and_then(|x| x.checked_mul(4)).unwrap_or(u64::MAX))
        .unwrap_or(u64::MAX);
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(StoreError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(StoreError::TrailingBytes {
            offset: expected,
            extra: actual - expected,
        });
    }
    let computed = fnv1a64(&bytes[DATASET_HEADER..]);
    if computed != stored {
        return Err(StoreError::Digest { stored, computed });
    }

    let (n, clip, style) = (n as usize, clip as usize, style as usize);
    let images_at = r.offset();
    let images = Array2::from_shape_vec((n, clip), r.f32s(n * clip)?).expect("image shape");
    let styles_at = r.offset();
    let styles = Array2::from_shape_vec((n, style), r.f32s(n * style)?).expect("style shape");

    let at = |base: u64, row: usize, col: usize, width: usize| base + 4 * (row * width + col) as u64;
    for ((row, col), v) in images.indexed_iter() {
        if !v.is_finite() {
            return Err(StoreError::NonFinite {
                matrix: "images",
                row,
                col,
                offset: at(images_at, row, col, clip),
            });
        }
    }
    for ((row, col), v) in styles.indexed_iter() {
        if !v.is_finite() {
            return Err(StoreError::NonFinite {
                matrix: "styles",
                row,
                col,
                offset: at(styles_at, row, col, style),
            });
        }
    }
    for (row, values) in images.rows().into_iter().enumerate() {
        let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(StoreError::NormViolation {
                matrix: "images",
                row,
                norm,
                offset: at(images_at, row, 0, clip),
            });
        }
    }
    Ok(EmbeddingDataset { images, styles })
}

pub fn write_dataset(path: &Path, dataset: &EmbeddingDataset) -> Result<()> {
    write_atomic(path, &encode_dataset(dataset)?)
}

pub fn read_dataset(path: &Path) -> Result<EmbeddingDataset> {
    decode_dataset(&read_file(path)?)
}

/// Header fields of a dataset file, read without decoding the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n: u64,
    pub clip_dim: u32,
    pub style_dim: u32,
    pub digest: u64,
}

pub fn dataset_header(bytes: &[u8]) -> Result<DatasetHeader> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    Ok(DatasetHeader {
        n: r.u64()?,
        clip_dim: r.u32()?,
        style_dim: r.u32()?,
        digest: r.u64()?,
    })
}

// ---------------------------------------------------------------------------
// Text table

/// Whole-prompt text embeddings keyed by prompt string.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextTable {
    pub entries: Vec<(String, Vec<f32>)>,
}

impl TextTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, embedding: &[f64]) {
        self.entries
            .push((name.into(), embedding.iter().map(|&v| v as f32).collect()));
    }

    pub fn get(&self, name: &str) -> Option<Vec<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn clip_dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, v)| v.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let dim = self.clip_dim().unwrap_or(0);
        for (r, (name, v)) in self.entries.iter().enumerate() {
            if self.entries[..r].iter().any(|(other, _)| other == name) {
                report.record(FindingKind::DuplicateName, (r, 0));
            }
            if v.len() != dim {
                report.record(FindingKind::DimensionMismatch, (r, 0));
                continue;
            }
            if let Some(c) = v.iter().position(|x| !x.is_finite()) {
                report.record(FindingKind::NonFiniteImage, (r, c));
                continue;
            }
            let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                report.record(FindingKind::NormViolation, (r, 0));
            }
        }
        report
    }
}

pub fn encode_text_table(table: &TextTable) -> Result<Vec<u8>> {
    let report = table.validate();
    if !report.is_empty() {
        return Err(StoreError::Invalid(report));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&TEXT_MAGIC);
    out.extend_from_slice(&(table.entries.len() as u32).to_le_bytes());
    for (name, v) in &table.entries {
        let len = u16::try_from(name.len())
            .map_err(|_| StoreError::Malformed(format!("entry name of {} bytes exceeds u16", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decode a text table. The format does not record the embedding width, so
/// it is either supplied or inferred as the unique width for which the
/// entries tile the file exactly.
pub fn decode_text_table(bytes: &[u8], clip_dim: Option<usize>) -> Result<TextTable> {
    if let Some(d) = clip_dim {
        return decode_text_table_with(bytes, d);
    }
    let mut r = Reader::new(bytes);
    r.magic(TEXT_MAGIC)?;
    let count = r.u32()? as usize;
    if count == 0 {
        return decode_text_table_with(bytes, 0);
    }
    let budget = bytes.len().saturating_sub(8) / (4 * count);
    let mut found = None;
    for d in 1..=budget {
        if let Ok(t) = decode_text_table_with(bytes, d) {
            if found.is_some() {
                return Err(StoreError::Malformed(
                    "embedding width is ambiguous; pass it explicitly".into(),
                ));
            }
            found = Some(t);
        }
    }
    found.ok_or_else(|| StoreError::Malformed("no embedding width tiles the file".into()))
}

fn decode_text_table_with(bytes: &[u8], dim: usize) -> Result<TextTable> {
    let mut r = Reader::new(bytes);
    r.magic(TEXT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| StoreError::BadName { offset: at })?
            .to_string();
        let v = r.f32s(dim)?;
        entries.push((name, v));
    }
    r.finish()?;
    let table = TextTable { entries };
    let report = table.validate();
    if let Some(f) = report.findings.first() {
        return Err(match f.kind {
            FindingKind::NormViolation | FindingKind::NonFiniteImage => {
                let (row, col) = f.first.unwrap_or((0, 0));
                let v = &table.entries[row].1;
                if f.kind == FindingKind::NormViolation {
                    StoreError::NormViolation {
                        matrix: "text embeddings",
                        row,
                        norm: v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt(),
                        offset: 0,
                    }
                } else {
                    StoreError::NonFinite {
                        matrix: "text embeddings",
                        row,
                        col,
                        offset: 0,
                    }
                }
            }
            _ => StoreError::Invalid(report),
        });
    }
    Ok(table)
}

pub fn write_text_table(path: &Path, table: &TextTable) -> Result<()> {
    write_atomic(path, &encode_text_table(table)?)
}

pub fn read_text_table(path: &Path, clip_dim: Option<usize>) -> Result<TextTable> {
    decode_text_table(&read_file(path)?, clip_dim)
}

// ---------------------------------------------------------------------------
// Relevance matrix

pub fn encode_relevance(rs: &RelevanceMatrix) -> Result<Vec<u8>> {
    let report = rs.validate();
    if !report.is_empty() {
        return Err(StoreError::Invalid(report));
    }
    let mut out = Vec::with_capacity(32 + 4 * rs.rows.len());
    out.extend_from_slice(&RELEVANCE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rs.style_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(rs.clip_dim() as u32).to_le_bytes());
    out.extend_from_slice(&rs.probe.to_le_bytes());
    out.extend_from_slice(&rs.samples.to_le_bytes());
    for v in rs.rows.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_relevance(bytes: &[u8]) -> Result<RelevanceMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(RELEVANCE_MAGIC)?;
    r.version()?;
    let style = r.u32()? as usize;
    let clip = r.u32()? as usize;
    let probe = r.f64()?;
    let samples = r.u32()?;
    let expected = r.offset() + 4 * (style as u64) * (clip as u64);
    if (bytes.len() as u64) < expected {
        return Err(StoreError::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let rows_at = r.offset();
    let rows = Array2::from_shape_vec((style, clip), r.f32s(style * clip)?).expect("relevance shape");
    r.finish()?;
    for ((row, col), v) in rows.indexed_iter() {
        if !v.is_finite() {
            return Err(StoreError::NonFinite {
                matrix: "relevance",
                row,
                col,
                offset: rows_at + 4 * (row * clip + col) as u64,
            });
        }
    }
    let rs = RelevanceMatrix { rows, probe, samples };
    let report = rs.validate();
    if let Some(f) = report.find(FindingKind::NormViolation) {
        let row = f.first.map_or(0, |x| x.0);
        return Err(StoreError::NormViolation {
            matrix: "relevance",
            row,
            norm: rs.row_norm(row),
            offset: rows_at + 4 * (row * clip) as u64,
        });
    }
    Ok(rs)
}

pub fn write_relevance(path: &Path, rs: &RelevanceMatrix) -> Result<()> {
    write_atomic(path, &encode_relevance(rs)?)
}

pub fn read_relevance(path: &Path) -> Result<RelevanceMatrix> {
    decode_relevance(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoint

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MapperParams,
    pub mode: ConditionMode,
    pub seed: u64,
    pub config_digest: u64,
    /// Optimizer state; present when training can be resumed.
    pub trainer: Option<AdamState>,
}

impl Checkpoint {
    pub fn arch(&self) -> MapperArch {
        self.params.arch
    }

    pub fn step(&self) -> u64 {
        self.trainer.as_ref().map_or(0, |a| a.step)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f64>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let arch = ck.params.arch;
    let l = arch.layout;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [l.coarse_layers, l.coarse_dim, l.medium_layers, l.medium_dim, l.fine_dim, arch.clip_dim] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&arch.slope.to_le_bytes());
    out.push(match ck.mode {
        ConditionMode::Delta => 0,
        ConditionMode::Naive => 1,
    });
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.config_digest.to_le_bytes());
    for stack in ck.params.stacks() {
        put_u32(&mut out, stack.layers.len());
        for layer in &stack.layers {
            put_u32(&mut out, layer.out_dim());
            put_u32(&mut out, layer.in_dim());
            out.push(u8::from(layer.activation));
            put_f64s(&mut out, layer.weight.iter());
            put_f64s(&mut out, layer.bias.iter());
        }
    }
    match &ck.trainer {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.step.to_le_bytes());
            let c = adam.config;
            put_f64s(&mut out, &[c.lr, c.beta1, c.beta2, c.eps]);
            for m in adam.first.iter().chain(&adam.second) {
                put_f64s(&mut out, m);
            }
        }
    }
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(StoreError::Truncated {
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    if bytes.len() < 16 {
        return Err(StoreError::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(StoreError::Digest { stored, computed });
    }
    let mut r = Reader::new(body);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let layout = StyleLayout {
        coarse_layers: dims[0],
        coarse_dim: dims[1],
        medium_layers: dims[2],
        medium_dim: dims[3],
        fine_dim: dims[4],
    };
    let slope = r.f64()?;
    let arch = MapperArch {
        layout,
        clip_dim: dims[5],
        slope,
    };
    let mode = match r.u8()? {
        0 => ConditionMode::Delta,
        1 => ConditionMode::Naive,
        other => return Err(StoreError::Malformed(format!("unknown condition mode tag {other}"))),
    };
    let seed = r.u64()?;
    let config_digest = r.u64()?;
    let mut stacks = Vec::with_capacity(9);
    for _ in 0..9 {
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let out_dim = r.u32()? as usize;
            let in_dim = r.u32()? as usize;
            let activation = r.u8()? != 0;
            let weight = Array2::from_shape_vec((out_dim, in_dim), r.f64s(out_dim * in_dim)?).expect("weight shape");
            let bias = Array1::from(r.f64s(out_dim)?);
            layers.push(Linear {
                weight,
                bias,
                activation,
            });
        }
        stacks.push(LinearStack::from_layers(layers, slope).map_err(|e| StoreError::Malformed(e.to_string()))?);
    }
    let params = MapperParams::from_stacks(arch, stacks).map_err(|e| StoreError::Malformed(e.to_string()))?;
    let trainer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let hp = r.f64s(4)?;
            let config = AdamConfig {
                lr: hp[0],
                beta1: hp[1],
                beta2: hp[2],
                eps: hp[3],
            };
            let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
            let mut first = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                first.push(r.f64s(n)?);
            }
            let mut second = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                second.push(r.f64s(n)?);
            }
            Some(AdamState {
                config,
                step,
                first,
                second,
            })
        }
        other => return Err(StoreError::Malformed(format!("unknown trainer-state flag {other}"))),
    };
    r.finish()?;
    Ok(Checkpoint {
        params,
        mode,
        seed,
        config_digest,
        trainer,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Plumbing

/// Which format a file is, from its magic bytes.
pub fn sniff(bytes: &[u8]) -> Option<&'static str> {
    match bytes.get(..4)? {
        b"DEDS" => Some("dataset"),
        b"DETT" => Some("text table"),
        b"DERM" => Some("relevance matrix"),
        b"DMAP" => Some("checkpoint"),
        _ => None,
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write through a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(StoreError::Truncated {
                expected: self.pos as u64 + n as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        if self.bytes.len() < 4 {
            return Err(StoreError::Truncated {
                expected: 4,
                actual: self.bytes.len() as u64,
            });
        }
        let found = self.array::<4>()?;
        if found != expected {
            return Err(StoreError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(StoreError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).unwrap_or(usize::MAX))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).unwrap_or(usize::MAX))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(StoreError::TrailingBytes {
                offset: self.pos as u64,
                extra: (self.bytes.len() - self.pos) as u64,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_records() -> EmbeddingDataset {
        EmbeddingDataset::new(
            array![[0.6f32, 0.8, 0.0], [0.0, 0.0, 1.0]],
            array![[1.5f32, -2.25], [0.125, 3.0]],
        )
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let d = two_records();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
        assert_eq!(encode_dataset(&d).unwrap(), bytes);
    }

    #[test]
    fn write_refuses_norm_violation() {
        let d = EmbeddingDataset::new(array![[0.5f32, 0.0], [0.0, 1.0]], array![[0.0f32], [1.0]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.deds");
        match write_dataset(&path, &d) {
            Err(StoreError::Invalid(r)) => {
                let f = r.find(FindingKind::NormViolation).unwrap();
                assert_eq!(f.first, Some((0, 0)));
            }
            other => panic!("{other:?}"),
        }
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_dataset(&two_records()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(StoreError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_dataset(&two_records()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_dataset(&bytes), Err(StoreError::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn truncation_names_byte_counts() {
        let bytes = encode_dataset(&two_records()).unwrap();
        let full = bytes.len() as u64;
        match decode_dataset(&bytes[..bytes.len() - 5]) {
            Err(StoreError::Truncated { expected, actual }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_digest() {
        let mut bytes = encode_dataset(&two_records()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_dataset(&bytes), Err(StoreError::Digest { .. })));
    }

    #[test]
    fn non_finite_and_norm_errors_carry_offsets() {
        let mut d = two_records();
        d.styles[[1, 1]] = f32::INFINITY;
        match decode_dataset(&encode_dataset_unchecked(&d)) {
            Err(StoreError::NonFinite { matrix, row, col, offset }) => {
                assert_eq!((matrix, row, col), ("styles", 1, 1));
                assert_eq!(offset, (DATASET_HEADER + 4 * 6 + 4 * 3) as u64);
            }
            other => panic!("{other:?}"),
        }
        let mut d = two_records();
        d.images[[1, 2]] = 0.9;
        match decode_dataset(&encode_dataset_unchecked(&d)) {
            Err(StoreError::NormViolation { row, offset, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(offset, (DATASET_HEADER + 12) as u64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validate_reports_planted_nan_and_small_datasets() {
        assert!(two_records().validate().is_empty());
        let mut styles = Array2::<f32>::zeros((5, 10));
        styles[[3, 7]] = f32::NAN;
        let mut images = Array2::<f32>::zeros((5, 2));
        images.column_mut(0).fill(1.0);
        let r = EmbeddingDataset::new(images, styles).validate();
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].kind, FindingKind::NonFiniteStyle);
        assert_eq!(r.findings[0].first, Some((3, 7)));

        let one = EmbeddingDataset::new(array![[1.0f32, 0.0]], array![[0.0f32]]);
        let r = one.validate();
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].kind, FindingKind::InsufficientRecords);
        assert!(r.to_string().contains("insufficient records for pair sampling"));
    }

    #[test]
    fn validate_flags_each_invariant_in_isolation() {
        let mut d = two_records();
        d.images[[0, 1]] = f32::NAN;
        let r = d.validate();
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].kind, FindingKind::NonFiniteImage);

        let d = EmbeddingDataset::new(array![[1.0f32, 0.0], [0.0, 1.0]], array![[0.0f32]]);
        assert_eq!(d.validate().findings[0].kind, FindingKind::RowCountMismatch);
    }

    #[test]
    fn text_table_round_trip_with_inferred_width() {
        let mut t = TextTable::new();
        t.push("face", &[0.6, 0.8, 0.0, 0.0]);
        t.push("face with smile", &[0.0, 0.0, 0.8, 0.6]);
        let bytes = encode_text_table(&t).unwrap();
        assert_eq!(decode_text_table(&bytes, Some(4)).unwrap(), t);
        assert_eq!(decode_text_table(&bytes, None).unwrap(), t);
    }

    #[test]
    fn text_table_rejects_duplicates() {
        let mut t = TextTable::new();
        t.push("face", &[1.0, 0.0]);
        t.push("face", &[0.0, 1.0]);
        assert!(matches!(encode_text_table(&t), Err(StoreError::Invalid(_))));
    }

    #[test]
    fn relevance_round_trip() {
        let rs = RelevanceMatrix {
            rows: array![[0.6f32, 0.8], [0.0, 0.0], [0.0, 1.0]],
            probe: 0.125,
            samples: 16,
        };
        let bytes = encode_relevance(&rs).unwrap();
        assert_eq!(decode_relevance(&bytes).unwrap(), rs);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"DERX");
        assert!(matches!(decode_relevance(&bad), Err(StoreError::BadMagic { .. })));
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_and_state() {
        use crate::mapper::mapper_forward;
        use crate::numerics::Init;
        use rand::Rng;

        let arch = MapperArch::new(
            StyleLayout {
                coarse_layers: 2,
                coarse_dim: 3,
                medium_layers: 1,
                medium_dim: 4,
                fine_dim: 5,
            },
            6,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MapperParams::new(arch, Init::KaimingUniform, &mut rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::desk(), &params);
        adam.step = 17;
        adam.first[3][1] = 0.25;
        adam.second[5][0] = 1e-9;
        let ck = Checkpoint {
            params,
            mode: ConditionMode::Naive,
            seed: 99,
            config_digest: 0xdead_beef,
            trainer: Some(adam),
        };
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);

        let s: Vec<f64> = (0..arch.style_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let i: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let before = mapper_forward(&ck.params, &s, &i, &i).unwrap().0;
        let after = mapper_forward(&back.params, &s, &i, &i).unwrap().0;
        assert_eq!(before, after);

        let mut corrupt = bytes;
        corrupt[40] ^= 1;
        assert!(matches!(decode_checkpoint(&corrupt), Err(StoreError::Digest { .. })));
    }

    #[test]
    fn sniff_identifies_formats() {
        assert_eq!(sniff(b"DEDS...."), Some("dataset"));
        assert_eq!(sniff(b"DMAP"), Some("checkpoint"));
        assert_eq!(sniff(b"nope"), None);
    }
}

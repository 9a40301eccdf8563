//! Embedding datasets: the label model, the `MMEB` binary file format,
//! validation, per-split label statistics and a seeded synthetic generator.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! header  "MMEB" | version u32 | token_dim u32 | image_dim u32 | n_labels u32
//!         | n_labels × (name_len u32 | UTF-8 name) | record_count u64
//! record  id_len u32 | UTF-8 id | T u32 | T × token_dim f32 | image_dim f32
//!         | label byte | CRC-32 of every preceding byte of the record
//! ```
//!
//! Label bit `k` of the label byte is label `k` in [`Label::ALL`] order.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::kernels::Tensor2;
use crate::seed::{self, Stream};

pub const MAGIC: [u8; 4] = *b"MMEB";
pub const VERSION: u32 = 1;
/// Width of CLIP ViT-L/14 text-token and image embeddings.
pub const CLIP_DIM: usize = 768;
/// CLIP text context length.
pub const T_MAX: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Misogynous = 0,
    Shaming = 1,
    Stereotype = 2,
    Objectification = 3,
    Violence = 4,
}

impl Label {
    /// Canonical order used by files, model outputs and reports.
    pub const ALL: [Label; 5] = [
        Label::Misogynous,
        Label::Shaming,
        Label::Stereotype,
        Label::Objectification,
        Label::Violence,
    ];
    pub const SUBCLASSES: [Label; 4] = [Label::Shaming, Label::Stereotype, Label::Objectification, Label::Violence];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Misogynous => "misogynous",
            Label::Shaming => "shaming",
            Label::Stereotype => "stereotype",
            Label::Objectification => "objectification",
            Label::Violence => "violence",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Five label bits in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(u8);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);
    const MASK: u8 = 0b1_1111;

    pub fn from_byte(b: u8) -> Option<Self> {
        (b & !Self::MASK == 0).then_some(Self(b))
    }

    pub fn from_bools(bits: [bool; 5]) -> Self {
        let mut s = Self::EMPTY;
        for (l, b) in Label::ALL.into_iter().zip(bits) {
            s.set(l, b);
        }
        s
    }

    pub fn byte(self) -> u8 {
        self.0
    }

    pub fn get(self, l: Label) -> bool {
        self.0 >> l.index() & 1 == 1
    }

    pub fn set(&mut self, l: Label, on: bool) {
        if on {
            self.0 |= 1 << l.index();
        } else {
            self.0 &= !(1 << l.index());
        }
    }

    pub fn misogynous(self) -> bool {
        self.get(Label::Misogynous)
    }

    pub fn bools(self) -> [bool; 5] {
        Label::ALL.map(|l| self.get(l))
    }

    /// Sub-class bits may only be set on misogynous samples.
    pub fn is_consistent(self) -> bool {
        self.misogynous() || self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One meme: per-token text embeddings, an image embedding and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `T × token_dim`, one row per token.
    pub tokens: Tensor2<f32>,
    pub image: Vec<f32>,
    pub labels: LabelSet,
}

/// Samples share one split; the file format stores one split per file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub token_dim: usize,
    pub image_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(split: Split, token_dim: usize, image_dim: usize) -> Self {
        Self {
            split,
            token_dim,
            image_dim,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same header, a chosen subset of samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            split: self.split,
            token_dim: self.token_dim,
            image_dim: self.image_dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.token_dim as u32);
        put_u32(&mut out, self.image_dim as u32);
        put_u32(&mut out, Label::ALL.len() as u32);
        for l in Label::ALL {
            put_u32(&mut out, l.name().len() as u32);
            out.extend_from_slice(l.name().as_bytes());
        }
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());

        for (i, s) in self.samples.iter().enumerate() {
            if s.tokens.cols() != self.token_dim || s.image.len() != self.image_dim {
                return Err(Error::Dims(format!(
                    "record {i} ({:?}): tokens {} / image [{}] vs header {}/{}",
                    s.id,
                    s.tokens,
                    s.image.len(),
                    self.token_dim,
                    self.image_dim
                )));
            }
            let start = out.len();
            put_u32(&mut out, s.id.len() as u32);
            out.extend_from_slice(s.id.as_bytes());
            put_u32(&mut out, s.tokens.rows() as u32);
            for &v in s.tokens.data().iter().chain(&s.image) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(s.labels.byte());
            let crc = crc32fast::hash(&out[start..]);
            put_u32(&mut out, crc);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let rest = self.buf.len() - self.pos;
        if n > rest {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub token_dim: usize,
    pub image_dim: usize,
    pub record_count: u64,
}

fn read_header(cur: &mut Cursor<'_>) -> std::result::Result<Header, FormatError> {
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION,
            found: version,
        });
    }
    let token_dim = cur.u32()? as usize;
    let image_dim = cur.u32()? as usize;
    if token_dim == 0 || image_dim == 0 {
        return Err(FormatError::Header(format!("zero embedding dimension ({token_dim}/{image_dim})")));
    }
    let n_labels = cur.u32()? as usize;
    if n_labels != Label::ALL.len() {
        return Err(FormatError::Header(format!("expected {} labels, found {n_labels}", Label::ALL.len())));
    }
    for l in Label::ALL {
        let len = cur.u32()? as usize;
        let name = cur.take(len)?;
        if name != l.name().as_bytes() {
            return Err(FormatError::Header(format!(
                "label table entry {} is {:?}, expected {:?}",
                l.index(),
                String::from_utf8_lossy(name),
                l.name()
            )));
        }
    }
    let record_count = cur.u64()?;
    Ok(Header {
        version,
        token_dim,
        image_dim,
        record_count,
    })
}

/// A content problem with one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    Checksum { stored: u32, computed: u32 },
    InvalidUtf8Id,
    TokenCount { count: usize, max: usize },
    NonFinite { field: &'static str, position: usize },
    LabelBits(u8),
    Inconsistent(LabelSet),
    DuplicateId,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::Checksum { stored, computed } => {
                write!(f, "checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")
            }
            Issue::InvalidUtf8Id => f.write_str("id is not valid UTF-8"),
            Issue::TokenCount { count, max } => write!(f, "token count {count} outside 1..={max}"),
            Issue::NonFinite { field, position } => write!(f, "non-finite {field} value at position {position}"),
            Issue::LabelBits(b) => write!(f, "label byte {b:#04x} has bits outside the 5 declared labels"),
            Issue::Inconsistent(l) => write!(f, "sub-class bits set on a non-misogynous sample (labels {:?})", l.bools()),
            Issue::DuplicateId => f.write_str("duplicate id"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    /// `None` for header-level problems.
    pub record: Option<usize>,
    pub id: Option<String>,
    pub message: String,
    pub issue: Option<Issue>,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.record, &self.id) {
            (Some(r), Some(id)) => write!(f, "record {r} ({id}): {}", self.message),
            (Some(r), None) => write!(f, "record {r}: {}", self.message),
            _ => write!(f, "header: {}", self.message),
        }
    }
}

impl Finding {
    fn record(record: usize, id: Option<&str>, issue: Issue) -> Self {
        Finding {
            record: Some(record),
            id: id.map(str::to_owned),
            message: issue.to_string(),
            issue: Some(issue),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub t_max: usize,
    /// Downgrade the sub-class ⇒ misogynous rule to a warning.
    pub permissive_labels: bool,
    pub split: Split,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            t_max: T_MAX,
            permissive_labels: false,
            split: Split::Train,
        }
    }
}

/// Outcome of reading one framed record.
struct Parsed {
    sample: Option<Sample>,
    id: Option<String>,
    issues: Vec<Issue>,
}

/// Reads one record's framing and payload. Framing failures are fatal for
/// the rest of the file; content problems are reported as issues.
fn parse_record(
    cur: &mut Cursor<'_>,
    header: &Header,
    t_max: usize,
) -> std::result::Result<Parsed, FormatError> {
    let start = cur.pos;
    let id_len = cur.u32()? as usize;
    let id_bytes = cur.take(id_len)?;
    let t = cur.u32()? as usize;
    let n_floats = t
        .checked_mul(header.token_dim)
        .and_then(|n| n.checked_add(header.image_dim))
        .ok_or_else(|| FormatError::Header(format!("token count {t} overflows")))?;
    let floats = cur.take(n_floats.checked_mul(4).ok_or_else(|| FormatError::Header("record too large".into()))?)?;
    let label_byte = cur.take(1)?[0];
    let computed = crc32fast::hash(&cur.buf[start..cur.pos]);
    let stored = cur.u32()?;

    let mut issues = Vec::new();
    if stored != computed {
        issues.push(Issue::Checksum { stored, computed });
    }
    let id = match std::str::from_utf8(id_bytes) {
        Ok(s) => Some(s.to_owned()),
        Err(_) => {
            issues.push(Issue::InvalidUtf8Id);
            None
        }
    };
    if t == 0 || t > t_max {
        issues.push(Issue::TokenCount { count: t, max: t_max });
    }
    let values: Vec<f32> = floats
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let token_len = t * header.token_dim;
    if let Some(p) = values[..token_len].iter().position(|v| !v.is_finite()) {
        issues.push(Issue::NonFinite { field: "token", position: p });
    }
    if let Some(p) = values[token_len..].iter().position(|v| !v.is_finite()) {
        issues.push(Issue::NonFinite { field: "image", position: p });
    }
    let labels = match LabelSet::from_byte(label_byte) {
        Some(l) => {
            if !l.is_consistent() {
                issues.push(Issue::Inconsistent(l));
            }
            Some(l)
        }
        None => {
            issues.push(Issue::LabelBits(label_byte));
            None
        }
    };

    let sample = match (&id, labels) {
        (Some(id), Some(labels)) => {
            let mut values = values;
            let image = values.split_off(token_len);
            Some(Sample {
                id: id.clone(),
                tokens: Tensor2::from_vec(t, header.token_dim, values).expect("sized by header"),
                image,
                labels,
            })
        }
        _ => None,
    };
    Ok(Parsed { sample, id, issues })
}

/// Result of a permissive load: the dataset plus any downgraded findings.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<Finding>,
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(load_with(path, &LoadOptions::default())?.dataset)
}

pub fn load_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Loaded> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, opts)
}

pub fn from_bytes(bytes: &[u8], opts: &LoadOptions) -> Result<Loaded> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = read_header(&mut cur).map_err(|e| Error::format(None, e))?;
    let mut ds = Dataset::new(opts.split, header.token_dim, header.image_dim);
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..header.record_count as usize {
        let parsed = parse_record(&mut cur, &header, opts.t_max).map_err(|e| Error::format(Some(i), e))?;
        for issue in parsed.issues {
            match issue {
                Issue::Checksum { stored, computed } => {
                    return Err(Error::format(Some(i), FormatError::Checksum { stored, computed }));
                }
                Issue::Inconsistent(_) if opts.permissive_labels => {
                    warnings.push(Finding::record(i, parsed.id.as_deref(), issue));
                }
                other => {
                    return Err(Error::data(parsed.id.as_deref(), format!("record {i}: {other}")));
                }
            }
        }
        let sample = parsed.sample.expect("no issues means a complete sample");
        if !seen.insert(sample.id.clone()) {
            return Err(Error::data(Some(&sample.id), format!("record {i}: {}", Issue::DuplicateId)));
        }
        ds.samples.push(sample);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(None, FormatError::TrailingBytes(bytes.len() - cur.pos)));
    }
    Ok(Loaded { dataset: ds, warnings })
}

/// Every invariant violation found in a file.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub header: Option<Header>,
    pub records_checked: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Scans a whole file and lists every violation instead of stopping at the
/// first one. Only an unreadable file is an error.
pub fn validate(path: impl AsRef<Path>, t_max: usize) -> Result<ValidationReport> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(validate_bytes(&bytes, t_max))
}

pub fn validate_bytes(bytes: &[u8], t_max: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = match read_header(&mut cur) {
        Ok(h) => h,
        Err(e) => {
            report.findings.push(Finding {
                record: None,
                id: None,
                message: e.to_string(),
                issue: None,
            });
            return report;
        }
    };
    let mut seen = HashSet::new();
    for i in 0..header.record_count as usize {
        match parse_record(&mut cur, &header, t_max) {
            Ok(parsed) => {
                report.records_checked += 1;
                let id = parsed.id.as_deref();
                for issue in parsed.issues {
                    report.findings.push(Finding::record(i, id, issue));
                }
                if let Some(id) = id {
                    if !seen.insert(id.to_owned()) {
                        report.findings.push(Finding::record(i, Some(id), Issue::DuplicateId));
                    }
                }
            }
            Err(e) => {
                report.findings.push(Finding {
                    record: Some(i),
                    id: None,
                    message: e.to_string(),
                    issue: None,
                });
                report.header = Some(header);
                return report;
            }
        }
    }
    if cur.pos != bytes.len() {
        report.findings.push(Finding {
            record: None,
            id: None,
            message: FormatError::TrailingBytes(bytes.len() - cur.pos).to_string(),
            issue: None,
        });
    }
    report.header = Some(header);
    report
}

/// Per-split label counts in the shape of the challenge's distribution table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub split: Split,
    pub total: usize,
    pub misogynous: usize,
    pub not_misogynous: usize,
    /// Positives per sub-class, in [`Label::SUBCLASSES`] order.
    pub subclass: [usize; 4],
}

impl DatasetStats {
    pub fn count(&self, l: Label) -> usize {
        match l {
            Label::Misogynous => self.misogynous,
            other => self.subclass[other.index() - 1],
        }
    }

    fn record(&mut self, labels: LabelSet) {
        self.total += 1;
        if labels.misogynous() {
            self.misogynous += 1;
        } else {
            self.not_misogynous += 1;
        }
        for (k, l) in Label::SUBCLASSES.into_iter().enumerate() {
            self.subclass[k] += labels.get(l) as usize;
        }
    }
}

pub fn stats(ds: &Dataset) -> DatasetStats {
    let mut s = DatasetStats {
        split: ds.split,
        ..Default::default()
    };
    for sample in &ds.samples {
        s.record(sample.labels);
    }
    s
}

/// Renders stats as the challenge's distribution table: Task-A columns, then
/// the Task-B columns in the table's own order, then the total.
pub fn render_stats_table(rows: &[DatasetStats]) -> String {
    let cols = [
        "Misogynous",
        "NOT",
        "Shaming",
        "Objectification",
        "Violence",
        "Stereotype",
        "Total",
    ];
    let mut out = format!("{:<8}", "Split");
    for c in cols {
        out.push_str(&format!(" {c:>15}"));
    }
    out.push('\n');
    for s in rows {
        let split = match s.split {
            Split::Train => "Train",
            Split::Test => "Test",
        };
        out.push_str(&format!("{split:<8}"));
        for v in [
            s.misogynous,
            s.not_misogynous,
            s.count(Label::Shaming),
            s.count(Label::Objectification),
            s.count(Label::Violence),
            s.count(Label::Stereotype),
            s.total,
        ] {
            out.push_str(&format!(" {v:>15}"));
        }
        out.push('\n');
    }
    out
}

/// Parameters of the synthetic generator.
///
/// Proportions are fractions of the whole dataset. Every sample's image and
/// tokens are `noise · N(0, I) + margin · Σ_l s_l · u_l`, with one random
/// unit direction `u_l` per label and space and `s_l = ±1` by label bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub misogynous: f64,
    /// Sub-class proportions in [`Label::SUBCLASSES`] order.
    pub subclass: [f64; 4],
    pub margin: f64,
    pub noise: f64,
    pub token_dim: usize,
    pub image_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub split: Split,
}

impl SynthSpec {
    /// Label proportions of the challenge training split (10000 samples).
    pub fn challenge_train() -> Self {
        Self {
            misogynous: 0.5,
            subclass: [0.1274, 0.2810, 0.2202, 0.0953],
            margin: 4.0,
            noise: 1.0,
            token_dim: CLIP_DIM,
            image_dim: CLIP_DIM,
            min_tokens: 4,
            max_tokens: 16,
            split: Split::Train,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if n < 2 {
            return bad(format!("synthetic dataset needs at least 2 samples, got {n}"));
        }
        if !(0.0..=1.0).contains(&self.misogynous) {
            return bad(format!("misogynous proportion {} outside [0, 1]", self.misogynous));
        }
        for (l, &p) in Label::SUBCLASSES.iter().zip(&self.subclass) {
            if !(0.0..=self.misogynous).contains(&p) {
                return bad(format!("{l} proportion {p} outside [0, {}]", self.misogynous));
            }
        }
        if !(self.margin.is_finite() && self.margin >= 0.0 && self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("margin {} and noise {} must be finite and >= 0", self.margin, self.noise));
        }
        if self.token_dim == 0 || self.image_dim == 0 {
            return bad("embedding dimensions must be positive".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens || self.max_tokens > T_MAX {
            return bad(format!(
                "token range {}..={} must lie within 1..={T_MAX}",
                self.min_tokens, self.max_tokens
            ));
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::challenge_train()
    }
}

/// A generated dataset together with the label counts tallied while
/// drawing.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub draws: DatasetStats,
}

fn unit_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Draws `n` label-consistent samples. Label counts are fixed quotas
/// (`round(n · p)`) assigned to randomly chosen samples, so the proportions
/// hold exactly up to rounding; embeddings are Gaussian around per-label
/// directions scaled by `margin`.
pub fn gen_synthetic(n: usize, seed: u64, spec: &SynthSpec) -> Result<Synthetic> {
    spec.check(n)?;
    let mut rng = seed::rng(seed, Stream::Synthetic, &[]);

    let image_dirs: Vec<Vec<f64>> = Label::ALL.iter().map(|_| unit_direction(&mut rng, spec.image_dim)).collect();
    let token_dirs: Vec<Vec<f64>> = Label::ALL.iter().map(|_| unit_direction(&mut rng, spec.token_dim)).collect();

    let quota = |p: f64| ((n as f64 * p).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_mis = quota(spec.misogynous);
    let mut labels = vec![LabelSet::EMPTY; n];
    for &i in &order[..n_mis] {
        labels[i].set(Label::Misogynous, true);
    }
    let mut mis_idx = order[..n_mis].to_vec();
    for (l, &p) in Label::SUBCLASSES.iter().zip(&spec.subclass) {
        mis_idx.shuffle(&mut rng);
        for &i in mis_idx.iter().take(quota(p).min(n_mis)) {
            labels[i].set(*l, true);
        }
    }

    let mut draws = DatasetStats {
        split: spec.split,
        ..Default::default()
    };
    let mut ds = Dataset::new(spec.split, spec.token_dim, spec.image_dim);
    let embed = |rng: &mut crate::seed::Rng, dirs: &[Vec<f64>], labels: LabelSet, dim: usize| -> Vec<f32> {
        let mut v: Vec<f64> = (0..dim).map(|_| spec.noise * rng.sample::<f64, _>(StandardNormal)).collect();
        for (l, dir) in Label::ALL.iter().zip(dirs) {
            let s = if labels.get(*l) { spec.margin } else { -spec.margin };
            for (x, d) in v.iter_mut().zip(dir) {
                *x += s * d;
            }
        }
        v.into_iter().map(|x| x as f32).collect()
    };
    for (i, &lab) in labels.iter().enumerate() {
        let t = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut tok = Vec::with_capacity(t * spec.token_dim);
        for _ in 0..t {
            tok.extend(embed(&mut rng, &token_dirs, lab, spec.token_dim));
        }
        let image = embed(&mut rng, &image_dirs, lab, spec.image_dim);
        draws.record(lab);
        ds.samples.push(Sample {
            id: format!("synth-{i:06}"),
            tokens: Tensor2::from_vec(t, spec.token_dim, tok)?,
            image,
            labels: lab,
        });
    }
    Ok(Synthetic { dataset: ds, draws })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            token_dim: 6,
            image_dim: 5,
            min_tokens: 1,
            max_tokens: 4,
            ..SynthSpec::challenge_train()
        }
    }

    fn tiny(n: usize, seed: u64) -> Dataset {
        gen_synthetic(n, seed, &tiny_spec()).unwrap().dataset
    }

    /// Byte offset of record `i` in a serialized dataset.
    fn record_offset(ds: &Dataset, i: usize) -> usize {
        let header = ds.subset(&[]).to_bytes().unwrap().len();
        header
            + ds.samples[..i]
                .iter()
                .map(|s| 4 + s.id.len() + 4 + 4 * (s.tokens.data().len() + s.image.len()) + 1 + 4)
                .sum::<usize>()
    }

    #[test]
    fn label_set_bits() {
        let l = LabelSet::from_bools([true, false, true, false, true]);
        assert_eq!(l.byte(), 0b10101);
        assert!(l.get(Label::Stereotype) && !l.get(Label::Shaming));
        assert!(l.is_consistent());
        assert!(!LabelSet::from_bools([false, false, false, false, true]).is_consistent());
        assert!(LabelSet::from_byte(0b10_0000).is_none());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = tiny(20, 1);
        let bytes = ds.to_bytes().unwrap();
        let back = from_bytes(&bytes, &LoadOptions::default()).unwrap().dataset;
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_round_trips_and_has_zero_stats() {
        let ds = Dataset::new(Split::Test, 3, 3);
        let back = from_bytes(&ds.to_bytes().unwrap(), &LoadOptions { split: Split::Test, ..Default::default() })
            .unwrap()
            .dataset;
        assert_eq!(back, ds);
        let s = stats(&back);
        assert_eq!((s.total, s.misogynous, s.not_misogynous, s.subclass), (0, 0, 0, [0; 4]));
    }

    #[test]
    fn truncation_reports_failing_record() {
        let ds = tiny(5, 2);
        let bytes = ds.to_bytes().unwrap();
        let cut = record_offset(&ds, 3) + 7;
        let err = from_bytes(&bytes[..cut], &LoadOptions::default()).unwrap_err();
        assert!(
            matches!(err, Error::Format { record: Some(3), source: FormatError::Truncated { .. } }),
            "{err}"
        );
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = tiny(3, 3).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            from_bytes(&bad, &LoadOptions::default()),
            Err(Error::Format { source: FormatError::BadMagic { .. }, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            from_bytes(&bad, &LoadOptions::default()),
            Err(Error::Format { source: FormatError::Version { found: 2, .. }, .. })
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            from_bytes(&bad, &LoadOptions::default()),
            Err(Error::Format { source: FormatError::TrailingBytes(1), .. })
        ));
    }

    fn with_labels(mut ds: Dataset, i: usize, labels: LabelSet) -> Dataset {
        ds.samples[i].labels = labels;
        ds
    }

    #[test]
    fn inconsistent_labels_rejected_unless_permissive() {
        let bad = LabelSet::from_bools([false, false, false, false, true]);
        let ds = with_labels(tiny(4, 4), 2, bad);
        let bytes = ds.to_bytes().unwrap();
        let err = from_bytes(&bytes, &LoadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("record 2") && err.contains("non-misogynous"), "{err}");

        let loaded = from_bytes(
            &bytes,
            &LoadOptions {
                permissive_labels: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(loaded.warnings[0].record, Some(2));
    }

    #[test]
    fn single_byte_corruption_caught_by_crc() {
        let ds = tiny(3, 5);
        let bytes = ds.to_bytes().unwrap();
        let pos = record_offset(&ds, 1) + 10;
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        let err = from_bytes(&bad, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Format { record: Some(1), source: FormatError::Checksum { .. } }), "{err}");
    }

    #[test]
    fn overlong_sequences_rejected() {
        let mut ds = tiny(2, 6);
        ds.samples[0].tokens = Tensor2::zeros(T_MAX + 1, 6);
        let err = from_bytes(&ds.to_bytes().unwrap(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("token count 78"), "{err}");
    }

    #[test]
    fn validate_clean_nan_and_duplicates() {
        let ds = tiny(6, 7);
        assert!(validate_bytes(&ds.to_bytes().unwrap(), T_MAX).is_clean());

        let mut nan = ds.clone();
        nan.samples[4].image[2] = f32::NAN;
        let r = validate_bytes(&nan.to_bytes().unwrap(), T_MAX);
        assert_eq!(r.findings.len(), 1, "{:?}", r.findings);
        assert_eq!(r.findings[0].record, Some(4));
        assert!(matches!(r.findings[0].issue, Some(Issue::NonFinite { field: "image", position: 2 })));

        let mut dup = ds.clone();
        dup.samples[5].id = dup.samples[1].id.clone();
        let r = validate_bytes(&dup.to_bytes().unwrap(), T_MAX);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].issue, Some(Issue::DuplicateId));
        assert!(from_bytes(&dup.to_bytes().unwrap(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn validate_keeps_going_past_bad_records() {
        let mut ds = tiny(5, 8);
        ds.samples[1].tokens.data_mut()[0] = f32::INFINITY;
        ds.samples[3].labels = LabelSet::from_bools([false, true, false, false, false]);
        let r = validate_bytes(&ds.to_bytes().unwrap(), T_MAX);
        assert_eq!(r.records_checked, 5);
        let recs: Vec<_> = r.findings.iter().map(|f| f.record).collect();
        assert_eq!(recs, vec![Some(1), Some(3)]);
    }

    #[test]
    fn generator_is_deterministic_and_self_reporting() {
        let a = gen_synthetic(1000, 9, &tiny_spec()).unwrap();
        let b = gen_synthetic(1000, 9, &tiny_spec()).unwrap();
        assert_eq!(a.dataset.to_bytes().unwrap(), b.dataset.to_bytes().unwrap());
        assert_eq!(stats(&a.dataset), a.draws);
        assert!(a.dataset.samples.iter().all(|s| s.labels.is_consistent()));
        let c = gen_synthetic(1000, 10, &tiny_spec()).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn generator_quotas_follow_proportions() {
        let s = gen_synthetic(10_000, 11, &tiny_spec()).unwrap().draws;
        assert_eq!((s.misogynous, s.not_misogynous), (5000, 5000));
        assert_eq!(s.subclass, [1274, 2810, 2202, 953]);
    }

    #[test]
    fn generator_rejects_bad_specs() {
        assert!(matches!(gen_synthetic(0, 1, &tiny_spec()), Err(Error::Config(_))));
        assert!(gen_synthetic(1, 1, &tiny_spec()).is_err());
        let mut s = tiny_spec();
        s.subclass[0] = 0.6;
        assert!(gen_synthetic(10, 1, &s).is_err());
        let mut s = tiny_spec();
        s.misogynous = 1.5;
        assert!(gen_synthetic(10, 1, &s).is_err());
        let mut s = tiny_spec();
        s.max_tokens = 100;
        assert!(gen_synthetic(10, 1, &s).is_err());
    }

    #[test]
    fn stats_table_layout() {
        let s = DatasetStats {
            split: Split::Train,
            total: 10000,
            misogynous: 5000,
            not_misogynous: 5000,
            subclass: [1274, 2810, 2202, 953],
        };
        let t = render_stats_table(&[s]);
        let lines: Vec<&str> = t.lines().collect();
        let head: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(
            head,
            ["Split", "Misogynous", "NOT", "Shaming", "Objectification", "Violence", "Stereotype", "Total"]
        );
        let row: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(row, ["Train", "5000", "5000", "1274", "2202", "953", "2810", "10000"]);
    }
}

//! Dataset manifests: image records, captions and augmentation provenance,
//! stored as line-delimited JSON.
//!
//! File layout (UTF-8, LF endings):
//!
//! ```text
//! {"schema":"t2i-forge/1","seed":7,"created_by":"t2i-forge 0.1.0"}
//! {"t":"img","id":"disk-0000","path":"images/disk-0000.png",...}
//! {"t":"cap","image_id":"disk-0000","text":"An image of disk",...}
//! ```
//!
//! Records come first sorted by id, then captions sorted by
//! `(image_id, kind, text)`. Equal manifests serialize to equal bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::aio_caption;
use crate::cutmix::{CutMixPattern, Placement};
use crate::error::{Error, Result};

pub const SCHEMA: &str = "t2i-forge/1";

pub fn tool_version() -> String {
    format!("t2i-forge {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Original,
    Cutmix,
    Crop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaptionKind {
    #[serde(rename = "AIO")]
    Aio,
    #[serde(rename = "TA")]
    Ta,
    #[serde(rename = "CUTMIX_TA")]
    CutmixTa,
    #[serde(rename = "CROP_TA")]
    CropTa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationProvenance {
    pub base_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_id: Option<String>,
    /// Class label of the donor, kept so captions can name both concepts
    /// without a second lookup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<CutMixPattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    pub source: ImageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<AugmentationProvenance>,
}

impl ImageRecord {
    pub fn original(id: impl Into<String>, path: impl Into<String>, width: u32, height: u32, class_label: Option<String>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            width,
            height,
            class_label,
            source: ImageSource::Original,
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub kind: CaptionKind,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub seed: u64,
    pub created_by: String,
}

impl DatasetManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            records: Vec::new(),
            captions: Vec::new(),
            seed,
            created_by: tool_version(),
        }
    }

    /// Sorts records and captions into canonical order.
    pub fn canonicalize(&mut self) {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
        self.captions
            .sort_by(|a, b| (&a.image_id, a.kind, &a.text).cmp(&(&b.image_id, b.kind, &b.text)));
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn captions_for<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a CaptionRecord> + 'a {
        self.captions.iter().filter(move |c| c.image_id == id)
    }

    /// Distinct class labels among original records, sorted.
    pub fn classes(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self
            .records
            .iter()
            .filter(|r| r.source == ImageSource::Original)
            .filter_map(|r| r.class_label.as_ref())
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn write_to_path(&self, path: &Path) -> Result<usize> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let n = write_manifest(self, &mut w)?;
        w.flush()?;
        Ok(n)
    }

    pub fn read_from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        read_manifest(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    DuplicateId,
    EmptyId,
    ZeroDimension,
    CutmixWithoutPattern,
    PatternOnNonCutmix,
    PatternWithoutDonorOrPlacement,
    PatternAllOnRecord,
    PlacementOutOfBounds,
    DanglingCaption,
    AioTemplateMismatch,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateId => "id must be unique",
            Rule::EmptyId => "id must be non-empty",
            Rule::ZeroDimension => "width and height must be positive",
            Rule::CutmixWithoutPattern => "cutmix record requires provenance with a pattern",
            Rule::PatternOnNonCutmix => "only cutmix records may carry a pattern",
            Rule::PatternWithoutDonorOrPlacement => "pattern requires donor_id and placement",
            Rule::PatternAllOnRecord => "pattern `all` is a curation setting, not a record pattern",
            Rule::PlacementOutOfBounds => "placement must lie inside the image",
            Rule::DanglingCaption => "caption refers to a missing image",
            Rule::AioTemplateMismatch => "AIO caption must be `An image of <class_label>`",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Record id (or caption image_id) the rule failed on.
    pub subject: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.subject, self.rule)
    }
}

pub fn validate_manifest(m: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: &str, rule| {
        out.push(Violation {
            subject: subject.to_string(),
            rule,
        })
    };
    let mut seen = HashSet::new();
    let mut by_id: HashMap<&str, &ImageRecord> = HashMap::new();
    for r in &m.records {
        if r.id.is_empty() {
            push(&r.id, Rule::EmptyId);
        }
        if !seen.insert(r.id.as_str()) {
            push(&r.id, Rule::DuplicateId);
        }
        by_id.entry(r.id.as_str()).or_insert(r);
        if r.width == 0 || r.height == 0 {
            push(&r.id, Rule::ZeroDimension);
        }
        let pattern = r.provenance.as_ref().and_then(|p| p.pattern);
        match (r.source, pattern) {
            (ImageSource::Cutmix, None) => push(&r.id, Rule::CutmixWithoutPattern),
            (ImageSource::Original | ImageSource::Crop, Some(_)) => push(&r.id, Rule::PatternOnNonCutmix),
            _ => {}
        }
        if let (Some(p), Some(pattern)) = (&r.provenance, pattern) {
            if pattern == CutMixPattern::All {
                push(&r.id, Rule::PatternAllOnRecord);
            }
            if p.donor_id.is_none() || p.placement.is_none() {
                push(&r.id, Rule::PatternWithoutDonorOrPlacement);
            }
        }
        if let Some(pl) = r.provenance.as_ref().and_then(|p| p.placement.as_ref()) {
            if !pl.fits(r.width as usize, r.height as usize) {
                push(&r.id, Rule::PlacementOutOfBounds);
            }
        }
    }
    for c in &m.captions {
        match by_id.get(c.image_id.as_str()) {
            None => push(&c.image_id, Rule::DanglingCaption),
            Some(r) if c.kind == CaptionKind::Aio => {
                let ok = r
                    .class_label
                    .as_deref()
                    .and_then(|l| aio_caption(l).ok())
                    .is_some_and(|t| t == c.text);
                if !ok {
                    push(&c.image_id, Rule::AioTemplateMismatch);
                }
            }
            Some(_) => {}
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    seed: u64,
    #[serde(default)]
    created_by: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "t")]
enum Line {
    #[serde(rename = "img")]
    Img(ImageRecord),
    #[serde(rename = "cap")]
    Cap(CaptionRecord),
}

/// Writes the canonical form of `m`; returns the number of bytes written.
pub fn write_manifest<W: Write>(m: &DatasetManifest, mut sink: W) -> Result<usize> {
    let violations = validate_manifest(m);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut m = m.clone();
    m.canonicalize();

    let mut buf = Vec::new();
    let header = Header {
        schema: SCHEMA.to_string(),
        seed: m.seed,
        created_by: m.created_by.clone(),
    };
    json_line(&mut buf, &header)?;
    for r in m.records {
        json_line(&mut buf, &Line::Img(r))?;
    }
    for c in m.captions {
        json_line(&mut buf, &Line::Cap(c))?;
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

fn json_line<T: Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *buf, value)?;
    buf.push(b'\n');
    Ok(())
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub fn read_manifest<R: BufRead>(source: R) -> Result<DatasetManifest> {
    let mut lines = source.lines().enumerate();
    let header: Header = match lines.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header line".into(),
            })
        }
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?,
    };
    if header.schema != SCHEMA {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported schema `{}`", header.schema),
        });
    }
    let mut m = DatasetManifest {
        records: Vec::new(),
        captions: Vec::new(),
        seed: header.seed,
        created_by: header.created_by,
    };
    for (i, line) in lines {
        let line = line?;
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            Line::Img(r) => m.records.push(r),
            Line::Cap(c) => m.captions.push(c),
        }
    }
    let violations = validate_manifest(&m);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(m)
}

/// Number of cutmix records per pattern.
pub fn pattern_counts(m: &DatasetManifest) -> BTreeMap<CutMixPattern, usize> {
    let mut out = BTreeMap::new();
    for r in m.records.iter().filter(|r| r.source == ImageSource::Cutmix) {
        if let Some(p) = r.provenance.as_ref().and_then(|p| p.pattern) {
            *out.entry(p).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: &str) -> ImageRecord {
        ImageRecord::original(id, format!("images/{id}.png"), 8, 8, Some(label.into()))
    }

    fn cap(id: &str, text: &str, kind: CaptionKind) -> CaptionRecord {
        CaptionRecord {
            image_id: id.into(),
            text: text.into(),
            kind,
            generator: "stub".into(),
        }
    }

    fn cutmix_rec(id: &str, placement: Option<Placement>) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            path: format!("cutmix/{id}.png"),
            width: 16,
            height: 16,
            class_label: Some("dog".into()),
            source: ImageSource::Cutmix,
            provenance: Some(AugmentationProvenance {
                base_id: "a".into(),
                donor_id: Some("b".into()),
                donor_label: Some("car".into()),
                pattern: Some(CutMixPattern::Quarter),
                placement,
                seed: 1,
            }),
        }
    }

    fn write_string(m: &DatasetManifest) -> String {
        let mut out = Vec::new();
        write_manifest(m, &mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn empty_manifest_is_header_only() {
        let mut m = DatasetManifest::new(9);
        m.created_by = "t".into();
        let s = write_string(&m);
        assert_eq!(s, "{\"schema\":\"t2i-forge/1\",\"seed\":9,\"created_by\":\"t\"}\n");
    }

    #[test]
    fn line_count_is_one_plus_records_plus_captions() {
        let mut m = DatasetManifest::new(1);
        m.records = vec![rec("b", "dog"), rec("a", "car")];
        m.captions = vec![
            cap("a", "An image of car", CaptionKind::Aio),
            cap("b", "A red dog", CaptionKind::Ta),
        ];
        let s = write_string(&m);
        assert_eq!(s.lines().count(), 5);
        assert!(s.ends_with('\n'));
        let second = s.lines().nth(1).unwrap();
        assert!(second.starts_with("{\"t\":\"img\",\"id\":\"a\""), "{second}");
        let back = read_manifest(s.as_bytes()).unwrap();
        assert_eq!(write_string(&back), s);
    }

    #[test]
    fn missing_id_names_line() {
        let text = "{\"schema\":\"t2i-forge/1\",\"seed\":0}\n{\"t\":\"img\",\"path\":\"x\",\"width\":1,\"height\":1,\"source\":\"original\"}\n";
        match read_manifest(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("id"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_caption_is_validation_error() {
        let text = "{\"schema\":\"t2i-forge/1\",\"seed\":0}\n{\"t\":\"cap\",\"image_id\":\"ghost\",\"text\":\"x\",\"kind\":\"TA\",\"generator\":\"stub\"}\n";
        match read_manifest(text.as_bytes()) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].rule, Rule::DanglingCaption);
                assert_eq!(v[0].subject, "ghost");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_rejected() {
        let text = "{\"schema\":\"other/2\",\"seed\":0}\n";
        assert!(matches!(read_manifest(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_rules() {
        let mut m = DatasetManifest::new(0);
        m.records = vec![rec("a", "dog"), rec("b", "car")];
        m.captions = vec![cap("a", "An image of dog", CaptionKind::Aio)];
        assert!(validate_manifest(&m).is_empty());

        let mut dup = m.clone();
        dup.records.push(rec("a", "cat"));
        let v = validate_manifest(&dup);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DuplicateId);

        let mut cm = m.clone();
        cm.records.push(cutmix_rec("c", None));
        let v = validate_manifest(&cm);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0], Violation { subject: "c".into(), rule: Rule::PatternWithoutDonorOrPlacement });

        let mut aio = m.clone();
        aio.captions.push(cap("b", "An image of cat", CaptionKind::Aio));
        assert_eq!(validate_manifest(&aio)[0].rule, Rule::AioTemplateMismatch);

        let mut oob = m.clone();
        oob.records.push(cutmix_rec("d", Some(Placement { x: 8, y: 8, w: 9, h: 8 })));
        assert_eq!(validate_manifest(&oob)[0].rule, Rule::PlacementOutOfBounds);

        let mut zero = m.clone();
        zero.records[0].width = 0;
        assert_eq!(validate_manifest(&zero)[0].rule, Rule::ZeroDimension);

        let mut bare = m.clone();
        let mut r = cutmix_rec("e", None);
        r.provenance = None;
        bare.records.push(r);
        assert_eq!(validate_manifest(&bare)[0].rule, Rule::CutmixWithoutPattern);

        let mut all = m.clone();
        let mut r = cutmix_rec("f", Some(Placement { x: 0, y: 0, w: 8, h: 8 }));
        r.provenance.as_mut().unwrap().pattern = Some(CutMixPattern::All);
        all.records.push(r);
        assert_eq!(validate_manifest(&all)[0].rule, Rule::PatternAllOnRecord);

        let mut orig = m.clone();
        let mut r = cutmix_rec("g", Some(Placement { x: 0, y: 0, w: 8, h: 8 }));
        r.source = ImageSource::Original;
        orig.records.push(r);
        assert_eq!(validate_manifest(&orig)[0].rule, Rule::PatternOnNonCutmix);
    }

    #[test]
    fn write_rejects_invalid() {
        let mut m = DatasetManifest::new(0);
        m.captions.push(cap("nope", "x", CaptionKind::Ta));
        assert!(matches!(write_manifest(&m, Vec::new()), Err(Error::Validation(_))));
    }

    #[test]
    fn pattern_counts_empty_without_cutmix() {
        let mut m = DatasetManifest::new(0);
        m.records = vec![rec("a", "dog")];
        assert!(pattern_counts(&m).is_empty());
        m.records.push(cutmix_rec("c", Some(Placement { x: 0, y: 0, w: 8, h: 8 })));
        assert_eq!(pattern_counts(&m).get(&CutMixPattern::Quarter), Some(&1));
    }
}

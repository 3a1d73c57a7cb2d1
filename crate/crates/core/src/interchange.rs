//! Data model and on-disk formats.
//!
//! Record files are JSON Lines: one JSON object per line, numbers written in
//! shortest round-trip decimal form. Blank lines are ignored.
//!
//! Detections:
//!
//! ```text
//! {"image_id":"img-0","box":[10.0,12.0,48.0,60.0],"class_logits":[2.1,-0.3],"embedding":[0.5,1.25,-3.0],"detector_score":0.93}
//! ```
//!
//! Ground truth:
//!
//! ```text
//! {"image_id":"img-0","box":[11.0,12.5,47.0,61.0],"class_name":"airplane"}
//! ```
//!
//! The vocabulary file lists one ID class name per line; line `c` names logit
//! index `c`. A ground-truth class that is absent from the vocabulary is OOD.
//!
//! Models are pretty-printed JSON documents wrapped in an envelope carrying
//! `format` and `version`, see [`write_model`] and [`read_model`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterchangeError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: `{field}` has length {found}, expected {expected} (fixed by the first record)")]
    DimensionMismatch {
        line: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: `{field}` must not be empty")]
    EmptyVector { line: usize, field: &'static str },
    #[error("line {line}: non-finite value in `{field}`")]
    NonFinite { line: usize, field: &'static str },
    #[error("line {line}: degenerate box {bbox:?} (need x_min < x_max and y_min < y_max)")]
    DegenerateBox { line: usize, bbox: [f64; 4] },
    #[error("line {line}: empty class_name")]
    EmptyClassName { line: usize },
    #[error("line {line}: detector_score {value} outside [0, 1]")]
    ScoreOutOfRange { line: usize, value: f64 },
    #[error("vocabulary line {line}: duplicate class name `{name}`")]
    DuplicateClass { line: usize, name: String },
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("detection for image `{image_id}` has {found} logits but the vocabulary has {expected} classes")]
    VocabularyMismatch {
        image_id: String,
        expected: usize,
        found: usize,
    },
    #[error("image `{0}` is not in the declared image list")]
    UndeclaredImage(String),
    #[error("unknown split tag `{0}`")]
    UnknownSplit(String),
    #[error("expected a `{expected}` file, found `{found}`")]
    WrongFormat { expected: &'static str, found: String },
    #[error("unsupported `{format}` version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        format: &'static str,
        found: String,
        supported: u32,
    },
    #[error("model file: {0}")]
    ModelParse(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = InterchangeError> = std::result::Result<T, E>;

/// Axis-aligned box in corner form, absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Finite with strictly positive width and height.
    pub fn is_well_formed(&self) -> bool {
        self.is_finite() && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_logits: Vec<f64>,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_score: Option<f64>,
}

impl DetectionRecord {
    /// Checks the per-record invariants; `line` is only used for messages.
    pub fn validate(&self, line: usize) -> Result<()> {
        if !self.bbox.is_finite() {
            return Err(InterchangeError::NonFinite { line, field: "box" });
        }
        if !self.bbox.is_well_formed() {
            return Err(InterchangeError::DegenerateBox {
                line,
                bbox: self.bbox.to_array(),
            });
        }
        check_vector(line, "class_logits", &self.class_logits)?;
        check_vector(line, "embedding", &self.embedding)?;
        if let Some(s) = self.detector_score {
            if !s.is_finite() {
                return Err(InterchangeError::NonFinite {
                    line,
                    field: "detector_score",
                });
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(InterchangeError::ScoreOutOfRange { line, value: s });
            }
        }
        Ok(())
    }
}

fn check_vector(line: usize, field: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(InterchangeError::EmptyVector { line, field });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(InterchangeError::NonFinite { line, field });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_name: String,
}

impl GroundTruthObject {
    pub fn validate(&self, line: usize) -> Result<()> {
        if !self.bbox.is_finite() {
            return Err(InterchangeError::NonFinite { line, field: "box" });
        }
        if !self.bbox.is_well_formed() {
            return Err(InterchangeError::DegenerateBox {
                line,
                bbox: self.bbox.to_array(),
            });
        }
        if self.class_name.is_empty() {
            return Err(InterchangeError::EmptyClassName { line });
        }
        Ok(())
    }
}

/// Ordered list of in-distribution class names; position `c` is logit `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocabulary {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for ClassVocabulary {
    type Error = InterchangeError;

    fn try_from(classes: Vec<String>) -> Result<Self> {
        ClassVocabulary::new(classes)
    }
}

impl From<ClassVocabulary> for Vec<String> {
    fn from(v: ClassVocabulary) -> Self {
        v.classes
    }
}

impl ClassVocabulary {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(InterchangeError::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, name) in classes.iter().enumerate() {
            if name.is_empty() {
                return Err(InterchangeError::EmptyClassName { line: i + 1 });
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(InterchangeError::DuplicateClass {
                    line: i + 1,
                    name: name.clone(),
                });
            }
        }
        Ok(ClassVocabulary { classes, index })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Logit index of `name`, or `None` when the class is OOD.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_id(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut classes = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let name = line.trim();
            if name.is_empty() {
                continue;
            }
            classes.push(name.to_string());
        }
        ClassVocabulary::new(classes)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for c in &self.classes {
            writeln!(writer, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    DetectorTrain,
    Calibration,
    OodTest,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::DetectorTrain => "detector-train",
            SplitTag::Calibration => "calibration",
            SplitTag::OodTest => "ood-test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = InterchangeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "detector-train" => Ok(SplitTag::DetectorTrain),
            "calibration" => Ok(SplitTag::Calibration),
            "ood-test" => Ok(SplitTag::OodTest),
            other => Err(InterchangeError::UnknownSplit(other.to_string())),
        }
    }
}

/// Detections, ground truth and vocabulary for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub images: Vec<String>,
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub vocabulary: ClassVocabulary,
    pub split_tag: SplitTag,
}

impl DatasetBundle {
    /// Checks image declarations and logit/vocabulary alignment.
    pub fn validate(&self) -> Result<()> {
        let declared: HashSet<&str> = self.images.iter().map(String::as_str).collect();
        for d in &self.detections {
            if !declared.contains(d.image_id.as_str()) {
                return Err(InterchangeError::UndeclaredImage(d.image_id.clone()));
            }
        }
        for g in &self.ground_truth {
            if !declared.contains(g.image_id.as_str()) {
                return Err(InterchangeError::UndeclaredImage(g.image_id.clone()));
            }
        }
        check_vocabulary_alignment(&self.detections, &self.vocabulary)
    }

    /// Writes `detections.jsonl`, `ground_truth.jsonl`, `vocabulary.txt`,
    /// `images.txt` and `split.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| file_error(dir, e))?;
        write_jsonl_file(&dir.join(DETECTIONS_FILE), &self.detections)?;
        write_jsonl_file(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        let mut vocab = create_file(&dir.join(VOCABULARY_FILE))?;
        self.vocabulary.write(&mut vocab)?;
        vocab.flush()?;
        let mut images = create_file(&dir.join(IMAGES_FILE))?;
        for id in &self.images {
            writeln!(images, "{id}")?;
        }
        images.flush()?;
        std::fs::write(dir.join(SPLIT_FILE), format!("{}\n", self.split_tag.as_str()))
            .map_err(|e| file_error(&dir.join(SPLIT_FILE), e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let detections = parse_detections(open_file(&dir.join(DETECTIONS_FILE))?)?;
        let ground_truth = parse_ground_truth(open_file(&dir.join(GROUND_TRUTH_FILE))?)?;
        let vocabulary = ClassVocabulary::parse(open_file(&dir.join(VOCABULARY_FILE))?)?;
        let images_path = dir.join(IMAGES_FILE);
        let images = if images_path.exists() {
            open_file(&images_path)?
                .lines()
                .filter_map(|l| match l {
                    Ok(l) if l.trim().is_empty() => None,
                    Ok(l) => Some(Ok(l.trim().to_string())),
                    Err(e) => Some(Err(e)),
                })
                .collect::<std::io::Result<Vec<_>>>()?
        } else {
            derive_image_list(&detections, &ground_truth)
        };
        let split_path = dir.join(SPLIT_FILE);
        let split_tag = std::fs::read_to_string(&split_path)
            .map_err(|e| file_error(&split_path, e))?
            .parse()?;
        let bundle = DatasetBundle {
            images,
            detections,
            ground_truth,
            vocabulary,
            split_tag,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const VOCABULARY_FILE: &str = "vocabulary.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const SPLIT_FILE: &str = "split.txt";

/// Sorted union of image ids referenced by detections and ground truth.
pub fn derive_image_list(
    detections: &[DetectionRecord],
    ground_truth: &[GroundTruthObject],
) -> Vec<String> {
    let set: BTreeSet<&str> = detections
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(ground_truth.iter().map(|g| g.image_id.as_str()))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

pub fn check_vocabulary_alignment(
    detections: &[DetectionRecord],
    vocabulary: &ClassVocabulary,
) -> Result<()> {
    for d in detections {
        if d.class_logits.len() != vocabulary.len() {
            return Err(InterchangeError::VocabularyMismatch {
                image_id: d.image_id.clone(),
                expected: vocabulary.len(),
                found: d.class_logits.len(),
            });
        }
    }
    Ok(())
}

/// A type that can be read one JSON line at a time with per-line validation.
pub trait LineRecord: DeserializeOwned {
    fn validate_line(&self, line: usize) -> Result<()>;

    /// Vector lengths that must stay constant across a file.
    fn dimensions(&self) -> Vec<(&'static str, usize)> {
        Vec::new()
    }
}

impl LineRecord for DetectionRecord {
    fn validate_line(&self, line: usize) -> Result<()> {
        self.validate(line)
    }

    fn dimensions(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("class_logits", self.class_logits.len()),
            ("embedding", self.embedding.len()),
        ]
    }
}

impl LineRecord for GroundTruthObject {
    fn validate_line(&self, line: usize) -> Result<()> {
        self.validate(line)
    }
}

/// Streaming reader: memory use is bounded by the longest line.
pub struct RecordReader<R, T> {
    reader: R,
    line: usize,
    buf: String,
    dims: Option<Vec<(&'static str, usize)>>,
    failed: bool,
    _marker: PhantomData<T>,
}

impl<R: BufRead, T: LineRecord> RecordReader<R, T> {
    pub fn new(reader: R) -> Self {
        RecordReader {
            reader,
            line: 0,
            buf: String::new(),
            dims: None,
            failed: false,
            _marker: PhantomData,
        }
    }

    fn parse_current(&mut self) -> Result<T> {
        let line = self.line;
        let record: T =
            serde_json::from_str(self.buf.trim()).map_err(|e| InterchangeError::Malformed {
                line,
                message: e.to_string(),
            })?;
        record.validate_line(line)?;
        let dims = record.dimensions();
        match &self.dims {
            None => self.dims = Some(dims),
            Some(expected) => {
                for ((field, want), (_, got)) in expected.iter().zip(&dims) {
                    if want != got {
                        return Err(InterchangeError::DimensionMismatch {
                            line,
                            field,
                            expected: *want,
                            found: *got,
                        });
                    }
                }
            }
        }
        Ok(record)
    }
}

impl<R: BufRead, T: LineRecord> Iterator for RecordReader<R, T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            self.line += 1;
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) if self.buf.trim().is_empty() => continue,
                Ok(_) => {
                    let item = self.parse_current();
                    self.failed = item.is_err();
                    return Some(item);
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            }
        }
    }
}

pub fn parse_detections<R: BufRead>(reader: R) -> Result<Vec<DetectionRecord>> {
    RecordReader::new(reader).collect()
}

pub fn parse_ground_truth<R: BufRead>(reader: R) -> Result<Vec<GroundTruthObject>> {
    RecordReader::new(reader).collect()
}

/// Generic JSON Lines reader without schema checks beyond deserialization.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| InterchangeError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(create_file(path)?, items)
}

pub fn open_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| file_error(path, e))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| file_error(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| file_error(path, e))
}

pub(crate) fn file_error(path: &Path, source: std::io::Error) -> InterchangeError {
    InterchangeError::File {
        path: path.display().to_string(),
        source,
    }
}

/// A type persisted through the versioned model envelope.
pub trait ModelFormat: Serialize + DeserializeOwned {
    /// Value of the envelope's `format` field.
    const FORMAT: &'static str;
    const VERSION: u32;

    /// Internal consistency checks run before writing and after reading.
    fn check(&self) -> std::result::Result<(), String>;
}

#[derive(Serialize)]
struct EnvelopeRef<'a, M> {
    format: &'static str,
    version: u32,
    model: &'a M,
}

pub fn write_model<M: ModelFormat, W: Write>(model: &M, mut writer: W) -> Result<()> {
    model.check().map_err(InterchangeError::InvalidModel)?;
    let env = EnvelopeRef {
        format: M::FORMAT,
        version: M::VERSION,
        model,
    };
    serde_json::to_writer_pretty(&mut writer, &env).map_err(std::io::Error::other)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Parses a model envelope; nothing is returned unless the whole stream parses
/// and the model passes its consistency check.
pub fn read_model<M: ModelFormat, R: Read>(mut reader: R) -> Result<M> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| InterchangeError::ModelParse(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| InterchangeError::ModelParse("expected a JSON object".into()))?;
    let format = obj
        .get("format")
        .and_then(|v| v.as_str())
        .ok_or_else(|| InterchangeError::ModelParse("missing `format`".into()))?;
    if format != M::FORMAT {
        return Err(InterchangeError::WrongFormat {
            expected: M::FORMAT,
            found: format.to_string(),
        });
    }
    let version = obj
        .get("version")
        .ok_or_else(|| InterchangeError::ModelParse("missing `version`".into()))?;
    if version.as_u64() != Some(u64::from(M::VERSION)) {
        let found = match version {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        return Err(InterchangeError::UnsupportedVersion {
            format: M::FORMAT,
            found,
            supported: M::VERSION,
        });
    }
    let model = obj
        .remove("model")
        .ok_or_else(|| InterchangeError::ModelParse("missing `model`".into()))?;
    let model: M =
        serde_json::from_value(model).map_err(|e| InterchangeError::ModelParse(e.to_string()))?;
    model.check().map_err(InterchangeError::InvalidModel)?;
    Ok(model)
}

pub fn write_model_file<M: ModelFormat>(model: &M, path: &Path) -> Result<()> {
    write_model(model, create_file(path)?)
}

pub fn read_model_file<M: ModelFormat>(path: &Path) -> Result<M> {
    read_model(open_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det_line(logits: &str, emb: &str) -> String {
        format!(r#"{{"image_id":"a","box":[0,0,10,10],"class_logits":[{logits}],"embedding":[{emb}]}}"#)
    }

    #[test]
    fn parses_well_formed_detection() {
        let text = det_line("1,2,3", "0.5,0.25,-1,4");
        let recs = parse_detections(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].class_logits.len(), 3);
        assert_eq!(recs[0].embedding.len(), 4);
        assert_eq!(recs[0].detector_score, None);
    }

    #[test]
    fn missing_embedding_names_field_and_line() {
        let text = format!(
            "{}\n{}\n",
            det_line("1,2,3", "1"),
            r#"{"image_id":"a","box":[0,0,1,1],"class_logits":[1,2,3]}"#
        );
        let err = parse_detections(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, InterchangeError::Malformed { line: 2, .. }), "{msg}");
        assert!(msg.contains("embedding"), "{msg}");
    }

    #[test]
    fn dimension_mismatch_against_first_record() {
        let text = format!("{}\n{}\n", det_line("1,2,3", "1,1"), det_line("1,2,3,4", "1,1"));
        match parse_detections(text.as_bytes()).unwrap_err() {
            InterchangeError::DimensionMismatch {
                line,
                field,
                expected,
                found,
            } => {
                assert_eq!((line, field, expected, found), (2, "class_logits", 3, 4));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn out_of_range_numbers_are_rejected() {
        // serde_json refuses to produce an infinity from an overflowing literal.
        let text = det_line("1e400", "1");
        assert!(parse_detections(text.as_bytes()).is_err());
        let text = r#"{"image_id":"a","box":[0,0,1,1],"class_logits":[1],"embedding":[1],"detector_score":1.5}"#;
        assert!(matches!(
            parse_detections(text.as_bytes()).unwrap_err(),
            InterchangeError::ScoreOutOfRange { line: 1, .. }
        ));
    }

    #[test]
    fn ground_truth_rules() {
        let ok = r#"{"image_id":"a","box":[0,0,2,2],"class_name":"kite"}"#;
        let gt = parse_ground_truth(ok.as_bytes()).unwrap();
        assert_eq!(gt[0].class_name, "kite");
        // Not in any vocabulary: still accepted, it is simply OOD.
        let vocab = ClassVocabulary::new(vec!["plane".into()]).unwrap();
        assert!(!vocab.is_id(&gt[0].class_name));

        let degenerate = r#"{"image_id":"a","box":[3,0,3,2],"class_name":"kite"}"#;
        assert!(matches!(
            parse_ground_truth(degenerate.as_bytes()).unwrap_err(),
            InterchangeError::DegenerateBox { line: 1, .. }
        ));
        let empty = r#"{"image_id":"a","box":[0,0,2,2],"class_name":""}"#;
        assert!(matches!(
            parse_ground_truth(empty.as_bytes()).unwrap_err(),
            InterchangeError::EmptyClassName { line: 1 }
        ));
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let err = ClassVocabulary::parse("a\nb\na\n".as_bytes()).unwrap_err();
        assert!(matches!(err, InterchangeError::DuplicateClass { line: 3, .. }));
        let v = ClassVocabulary::parse("x\n\ny\n".as_bytes()).unwrap();
        assert_eq!(v.classes(), &["x".to_string(), "y".to_string()]);
        assert_eq!(v.index_of("y"), Some(1));
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Toy {
        values: Vec<f64>,
    }

    impl ModelFormat for Toy {
        const FORMAT: &'static str = "toy";
        const VERSION: u32 = 1;
        fn check(&self) -> std::result::Result<(), String> {
            Ok(())
        }
    }

    #[test]
    fn model_envelope_versioning() {
        let m = Toy {
            values: vec![0.1, 1.0 / 3.0, -2.5e-300],
        };
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back: Toy = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let bumped = String::from_utf8(buf.clone())
            .unwrap()
            .replace("\"version\": 1", "\"version\": \"99\"");
        match read_model::<Toy, _>(bumped.as_bytes()).unwrap_err() {
            InterchangeError::UnsupportedVersion { found, .. } => assert_eq!(found, "99"),
            e => panic!("unexpected {e}"),
        }

        let truncated = &buf[..buf.len() / 2];
        assert!(matches!(
            read_model::<Toy, _>(truncated).unwrap_err(),
            InterchangeError::ModelParse(_)
        ));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn detection_round_trip_is_exact(
            logits in prop::collection::vec(finite(), 1..6),
            emb in prop::collection::vec(finite(), 1..6),
            x in -1e6f64..1e6, w in 1e-3f64..1e4,
            score in prop::option::of(0.0f64..=1.0),
        ) {
            let rec = DetectionRecord {
                image_id: "img \"q\"".into(),
                bbox: BBox::new(x, x, x + w, x + 2.0 * w),
                class_logits: logits,
                embedding: emb,
                detector_score: score,
            };
            prop_assume!(rec.bbox.is_well_formed());
            let mut buf = Vec::new();
            write_jsonl(&mut buf, std::slice::from_ref(&rec)).unwrap();
            let back = parse_detections(buf.as_slice()).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }
    }
}

//! Dataset files, score files, run manifests.
//!
//! A dataset is a JSONL file with one record per line,
//! `{"id", "features"?, "weak_probs", "labels", "truth"?}`, plus a sidecar
//! `<file>.header.json` declaring the class count.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{LabelDistribution, SnapshotExample};

pub const DATASET_MAGIC: &str = "hoc-router-dataset";
pub const MANIFEST_MAGIC: &str = "hoc-router-manifest";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of `weak_probs` from summing to one.
pub const INGEST_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl DatasetHeader {
    pub fn new(num_classes: usize, class_names: Option<Vec<String>>) -> Self {
        DatasetHeader {
            magic: DATASET_MAGIC.to_string(),
            version: FORMAT_VERSION,
            num_classes,
            class_names,
        }
    }

    fn check(&self) -> Result<()> {
        if self.magic != DATASET_MAGIC {
            return Err(Error::Format(format!("not a dataset header (magic `{}`)", self.magic)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", self.version)));
        }
        if self.num_classes < 2 {
            return Err(Error::Format("dataset header needs num_classes >= 2".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::Format("class_names length differs from num_classes".into()));
            }
        }
        Ok(())
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<&'a [f64]>,
    weak_probs: &'a [f64],
    labels: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<&'a [f64]>,
}

pub fn record_line(e: &SnapshotExample) -> Result<String> {
    Ok(serde_json::to_string(&RecordOut {
        id: &e.id,
        features: e.features.as_deref(),
        weak_probs: e.weak_pred.probs(),
        labels: &e.labels,
        truth: e.truth.as_ref().map(|t| t.probs()),
    })?)
}

pub fn write_dataset(
    path: &Path,
    examples: &[SnapshotExample],
    class_names: Option<Vec<String>>,
) -> Result<()> {
    let num_classes = examples
        .first()
        .map(SnapshotExample::num_classes)
        .ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        writeln!(w, "{}", record_line(e)?)?;
    }
    w.flush()?;
    let header = DatasetHeader::new(num_classes, class_names);
    fs::write(header_path(path), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Option<DatasetHeader>> {
    let hp = header_path(path);
    if !hp.exists() {
        return Ok(None);
    }
    let header: DatasetHeader = serde_json::from_slice(&fs::read(&hp)?)?;
    header.check()?;
    Ok(Some(header))
}

fn field_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Record {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn number_array(obj: &Map<String, Value>, line: usize, field: &str) -> Result<Option<Vec<f64>>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| field_err(line, field, format!("`{v}` is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(_) => Err(field_err(line, field, "expected an array of numbers")),
    }
}

fn distribution(
    obj: &Map<String, Value>,
    line: usize,
    field: &str,
    num_classes: usize,
) -> Result<Option<LabelDistribution>> {
    let Some(probs) = number_array(obj, line, field)? else {
        return Ok(None);
    };
    if probs.len() != num_classes {
        return Err(field_err(
            line,
            field,
            format!("has {} entries, expected {num_classes}", probs.len()),
        ));
    }
    LabelDistribution::with_tolerance(probs, INGEST_TOLERANCE)
        .map(Some)
        .map_err(|e| field_err(line, field, e.to_string()))
}

/// Parses one JSONL record. `line` is 1-based and used only for error messages. When
/// `num_classes` is `None` it is taken from the length of `weak_probs`.
pub fn parse_record(text: &str, line: usize, num_classes: Option<usize>) -> Result<SnapshotExample> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| field_err(line, "<record>", format!("invalid JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(field_err(line, "<record>", "expected a JSON object"));
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(field_err(line, "id", "expected a string")),
        None => return Err(field_err(line, "id", "missing")),
    };
    let num_classes = match num_classes {
        Some(n) => n,
        None => match obj.get("weak_probs") {
            Some(Value::Array(a)) => a.len(),
            _ => return Err(field_err(line, "weak_probs", "missing")),
        },
    };
    let features = number_array(&obj, line, "features")?;
    let weak_pred = distribution(&obj, line, "weak_probs", num_classes)?
        .ok_or_else(|| field_err(line, "weak_probs", "missing"))?;
    let labels = match obj.get("labels") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                let c = v
                    .as_u64()
                    .ok_or_else(|| field_err(line, "labels", format!("`{v}` is not a class index")))?;
                if c as usize >= num_classes {
                    return Err(field_err(
                        line,
                        "labels",
                        format!("class {c} out of range for {num_classes} classes"),
                    ));
                }
                Ok(c as usize)
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(field_err(line, "labels", "expected an array of class indices")),
        None => return Err(field_err(line, "labels", "missing")),
    };
    if labels.is_empty() {
        return Err(field_err(line, "labels", "must not be empty"));
    }
    let truth = distribution(&obj, line, "truth", num_classes)?;
    let example = SnapshotExample::new(id, features, weak_pred, labels)
        .map_err(|e| field_err(line, "labels", e.to_string()))?;
    match truth {
        Some(t) => example.with_truth(t),
        None => Ok(example),
    }
}

/// Reads all records from `reader`; blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R, num_classes: Option<usize>) -> Result<Vec<SnapshotExample>> {
    let mut out = Vec::new();
    let mut classes = num_classes;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = parse_record(&line, i + 1, classes)?;
        classes.get_or_insert(e.num_classes());
        out.push(e);
    }
    Ok(out)
}

/// Reads a dataset file in order, validating every record.
pub fn ingest(path: &Path) -> Result<Vec<SnapshotExample>> {
    let header = read_header(path)?;
    if header.is_none() {
        warn!(
            "{} has no header sidecar; inferring the class count from the first record",
            path.display()
        );
    }
    let file = File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
    let examples = parse_records(BufReader::new(file), header.map(|h| h.num_classes))?;
    if examples.is_empty() {
        return Err(Error::invalid(format!("{} contains no records", path.display())));
    }
    Ok(examples)
}

/// `id,score` CSV; a header line whose score column is not numeric is skipped.
pub fn read_scores_csv(path: &Path) -> Result<HashMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line
            .rsplit_once(',')
            .ok_or_else(|| field_err(i + 1, "score", "expected `id,score`"))?;
        match score.trim().parse::<f64>() {
            Ok(s) if s.is_finite() => {
                out.insert(id.trim().to_string(), s);
            }
            _ if i == 0 => continue,
            _ => return Err(field_err(i + 1, "score", format!("`{score}` is not a finite number"))),
        }
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to reproduce a CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub magic: String,
    pub version: u32,
    pub command: String,
    pub config: Value,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Whether this run fitted a partition or built calibration mixtures.
    pub calibration_executed: bool,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, calibration_executed: bool) -> Self {
        RunManifest {
            magic: MANIFEST_MAGIC.to_string(),
            version: FORMAT_VERSION,
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            calibration_executed,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.magic != MANIFEST_MAGIC {
            return Err(Error::Format(format!("not a run manifest (magic `{}`)", m.magic)));
        }
        Ok(m)
    }
}

/// `<path>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

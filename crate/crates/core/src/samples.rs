//! Evaluation sample manifests: ground-truth labels and detected objects.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::scoring::SampleConcepts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Id,
    Ood,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Id => "id",
            Label::Ood => "ood",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Label::Id),
            "ood" => Ok(Label::Ood),
            other => Err(Error::InvalidData(format!("unknown label `{other}`"))),
        }
    }
}

/// One line of the labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: Read>(reader: R, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{what} line {}", i + 1), e))?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut writer: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels<R: Read>(reader: R) -> Result<Vec<LabeledSample>> {
    let labels: Vec<LabeledSample> = read_jsonl(reader, "labels")?;
    let mut seen = BTreeSet::new();
    for l in &labels {
        if !seen.insert(l.image_id.as_str()) {
            return Err(Error::DuplicateId(l.image_id.clone()));
        }
    }
    Ok(labels)
}

pub fn write_labels<W: Write>(labels: &[LabeledSample], writer: W) -> Result<()> {
    write_jsonl(labels, writer)
}

/// Detections file: one `{"image_id":..,"objects":[..]}` per line. Object
/// names are deduplicated per image on load.
pub fn read_detections<R: Read>(reader: R) -> Result<Vec<SampleConcepts>> {
    let raw: Vec<SampleConcepts> = read_jsonl(reader, "detections")?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        if !seen.insert(r.image_id.clone()) {
            return Err(Error::DuplicateId(r.image_id));
        }
        out.push(SampleConcepts::new(r.image_id, r.objects));
    }
    Ok(out)
}

pub fn write_detections<W: Write>(detections: &[SampleConcepts], writer: W) -> Result<()> {
    write_jsonl(detections, writer)
}

/// Detections keyed by image id, checked against the image table.
#[derive(Debug, Clone, Default)]
pub struct DetectionIndex {
    by_image: HashMap<String, SampleConcepts>,
}

impl DetectionIndex {
    pub fn new(detections: Vec<SampleConcepts>, images: &EmbeddingTable) -> Result<Self> {
        let mut by_image = HashMap::with_capacity(detections.len());
        for d in detections {
            if !images.contains(&d.image_id) {
                return Err(Error::UnknownId(d.image_id));
            }
            by_image.insert(d.image_id.clone(), d);
        }
        Ok(Self { by_image })
    }

    /// Images absent from the detections file have no objects.
    pub fn concepts(&self, image_id: &str) -> SampleConcepts {
        self.by_image
            .get(image_id)
            .cloned()
            .unwrap_or_else(|| SampleConcepts::empty(image_id))
    }

    pub fn all_objects(&self) -> BTreeSet<&str> {
        self.by_image
            .values()
            .flat_map(|c| c.objects.iter().map(String::as_str))
            .collect()
    }
}

//! Score report CSV: `image_id,label,s_max,argmax_class,decision,<class...>`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::evaluation::LabeledScores;
use crate::samples::Label;
use crate::scoring::DetectionResult;

const FIXED_COLUMNS: [&str; 5] = ["image_id", "label", "s_max", "argmax_class", "decision"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub image_id: String,
    pub label: Label,
    pub s_max: f64,
    pub argmax_class: String,
    pub decision: Option<bool>,
    pub class_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub classes: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    /// Pairs detection results with labels; class columns are sorted by name.
    pub fn from_results(results: &[DetectionResult], labels: &[Label]) -> Result<Self> {
        if results.len() != labels.len() {
            return Err(Error::InvalidData(format!(
                "{} results but {} labels",
                results.len(),
                labels.len()
            )));
        }
        let classes: Vec<String> = results
            .first()
            .map(|r| r.per_class_scores.keys().cloned().collect())
            .unwrap_or_default();
        let rows = results
            .iter()
            .zip(labels)
            .map(|(r, &label)| ScoreRow {
                image_id: r.image_id.clone(),
                label,
                s_max: r.s_max,
                argmax_class: r.argmax_class.clone(),
                decision: r.decision,
                class_scores: classes.iter().map(|c| r.per_class_scores[c]).collect(),
            })
            .collect();
        Ok(Self { classes, rows })
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let header: Vec<&str> = FIXED_COLUMNS
            .iter()
            .copied()
            .chain(self.classes.iter().map(String::as_str))
            .collect();
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.image_id.clone(),
                row.label.to_string(),
                row.s_max.to_string(),
                row.argmax_class.clone(),
                match row.decision {
                    Some(true) => "1".into(),
                    Some(false) => "0".into(),
                    None => String::new(),
                },
            ];
            rec.extend(row.class_scores.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < FIXED_COLUMNS.len()
            || header.iter().take(FIXED_COLUMNS.len()).ne(FIXED_COLUMNS.iter().copied())
        {
            return Err(Error::parse("score report header", "unexpected columns"));
        }
        let classes: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let loc = format!("score report row {}", i + 2);
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(loc.clone(), e));
            let decision = match &rec[4] {
                "1" => Some(true),
                "0" => Some(false),
                "" => None,
                other => return Err(Error::parse(loc, format!("bad decision `{other}`"))),
            };
            rows.push(ScoreRow {
                image_id: rec[0].to_string(),
                label: rec[1].parse().map_err(|e| Error::parse(loc.clone(), e))?,
                s_max: num(&rec[2])?,
                argmax_class: rec[3].to_string(),
                decision,
                class_scores: rec.iter().skip(FIXED_COLUMNS.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(Self { classes, rows })
    }

    pub fn labeled_scores(&self) -> LabeledScores {
        let mut out = LabeledScores::default();
        for row in &self.rows {
            match row.label {
                Label::Id => out.id_scores.push(row.s_max),
                Label::Ood => out.ood_scores.push(row.s_max),
            }
        }
        out
    }
}

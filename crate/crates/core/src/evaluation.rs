//! FPR at 95% TPR and AUROC for an ID-vs-OOD score.
//!
//! Higher scores mean "more in-distribution". Both the TPR threshold and the
//! FPR count a score equal to the threshold as positive, matching the
//! detector's `s_max >= lambda` rule.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricsReport {
    pub fn to_writer<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

fn check(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite score {s} in {what}")));
    }
    Ok(())
}

/// Smallest count `r` with `r / n >= tpr`.
fn required_positives(n: usize, tpr: f64) -> usize {
    let nf = n as f64;
    let mut r = ((tpr * nf).ceil() as usize).min(n);
    while r > 0 && (r - 1) as f64 / nf >= tpr {
        r -= 1;
    }
    while r < n && (r as f64) / nf < tpr {
        r += 1;
    }
    r
}

/// The largest threshold keeping at least a `tpr` fraction of ID scores at or
/// above it. No interpolation: the result is always one of the scores.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    check(id_scores, "ID scores")?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Parameter(format!("tpr = {tpr} must be in (0, 1]")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let r = required_positives(n, tpr);
    Ok(sorted[n - r])
}

/// Fraction of OOD scores at or above `lambda`.
pub fn fpr_at(ood_scores: &[f64], lambda: f64) -> Result<f64> {
    check(ood_scores, "OOD scores")?;
    let hits = ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok(hits as f64 / ood_scores.len() as f64)
}

/// Mann-Whitney AUROC with half credit for ties, via one sort.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, "ID scores")?;
    check(ood_scores, "OOD scores")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the number of correctly ordered pairs, ties counting 1
    let mut twice_correct: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut ids, mut oods) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                ids += 1;
            } else {
                oods += 1;
            }
            j += 1;
        }
        twice_correct += 2 * ids * ood_below + ids * oods;
        ood_below += oods;
        i = j;
    }
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(twice_correct as f64 / pairs as f64)
}

/// FPR95 and AUROC at the 95%-TPR threshold.
pub fn evaluate(scores: &LabeledScores) -> Result<MetricsReport> {
    let threshold = threshold_at_tpr(&scores.id_scores, DEFAULT_TPR)?;
    Ok(MetricsReport {
        fpr95: fpr_at(&scores.ood_scores, threshold)?,
        auroc: auroc(&scores.id_scores, &scores.ood_scores)?,
        threshold,
        n_id: scores.id_scores.len(),
        n_ood: scores.ood_scores.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Equal-width bins spanning the observed score range; the top edge falls in
/// the last bin.
pub fn histogram(scores: &LabeledScores, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let all = || scores.id_scores.iter().chain(&scores.ood_scores);
    if all().next().is_none() {
        return Err(Error::EmptyInput("scores"));
    }
    let lo = all().copied().fold(f64::INFINITY, f64::min);
    let hi = all().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + width * b as f64,
            hi: if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    let bin_of = |s: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((s - lo) / width) as usize).min(bins - 1)
        }
    };
    for &s in &scores.id_scores {
        out[bin_of(s)].id_count += 1;
    }
    for &s in &scores.ood_scores {
        out[bin_of(s)].ood_count += 1;
    }
    Ok(out)
}

pub fn write_histogram<W: Write>(bins: &[HistogramBin], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(["bin_lo", "bin_hi", "id_count", "ood_count"])?;
    for b in bins {
        w.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.id_count.to_string(),
            b.ood_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

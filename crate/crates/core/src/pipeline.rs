//! End-to-end helpers shared by the CLI and the integration tests.

use crate::calibration::{calibrate_bank, Calibration, ConsistencyConfig};
use crate::descriptors::DescriptorBank;
use crate::embed::EmbeddingTable;
use crate::error::Result;
use crate::evaluation::{evaluate, MetricsReport};
use crate::report::ScoreReport;
use crate::retrieval::UnlabeledPool;
use crate::samples::{DetectionIndex, LabeledSample};
use crate::scoring::{features_for_variant, run_pipeline, ScoringConfig};
use crate::synth::WorldBundle;

/// Scores every labeled sample; row order follows `labels`.
pub fn score_samples(
    images: &EmbeddingTable,
    texts: &EmbeddingTable,
    labels: &[LabeledSample],
    detections: &DetectionIndex,
    bank: &DescriptorBank,
    calibration: Option<&Calibration>,
    gamma: f64,
    cfg: &ScoringConfig,
) -> Result<ScoreReport> {
    let features = features_for_variant(bank, calibration, gamma, cfg.variant)?;
    let samples = labels
        .iter()
        .map(|l| Ok((images.get(&l.image_id)?, detections.concepts(&l.image_id))))
        .collect::<Result<Vec<_>>>()?;
    let results = run_pipeline(&samples, &features, texts, cfg)?;
    let label_list: Vec<_> = labels.iter().map(|l| l.label).collect();
    ScoreReport::from_results(&results, &label_list)
}

/// Calibration over a generated world's own pool.
pub fn calibrate_world(world: &WorldBundle, cfg: &ConsistencyConfig) -> Result<Calibration> {
    let pool = UnlabeledPool::new(world.pool.image_ids.clone(), &world.images)?;
    calibrate_bank(&world.bank, &pool, &world.texts, cfg)
}

/// Scores a generated world under one variant and evaluates it.
pub fn evaluate_world(
    world: &WorldBundle,
    calibration: Option<&Calibration>,
    gamma: f64,
    cfg: &ScoringConfig,
) -> Result<(ScoreReport, MetricsReport)> {
    let detections = DetectionIndex::new(world.detections.clone(), &world.images)?;
    let report = score_samples(
        &world.images,
        &world.texts,
        &world.labels,
        &detections,
        &world.bank,
        calibration,
        gamma,
        cfg,
    )?;
    let metrics = evaluate(&report.labeled_scores())?;
    Ok((report, metrics))
}

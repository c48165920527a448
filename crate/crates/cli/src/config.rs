//! Run configuration: JSON file keys and command-line flags share one struct.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use oodcal_core::calibration::{ConsistencyConfig, DEFAULT_ETA, DEFAULT_ETA_TEXT, DEFAULT_GAMMA, DEFAULT_K};
use oodcal_core::retrieval::RetrievalTextForm;
use oodcal_core::scoring::{ScoringConfig, Variant, Weights};
use oodcal_core::synth::WorldSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_ENV: &str = "OODCAL_CONFIG";
pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_BINS: usize = 20;
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Every key is optional. A flag named `--foo-bar` sets key `foo_bar`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Image embedding table (.jsonl or EMB1 binary)
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Text embedding table
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<PathBuf>,
    /// Descriptor bank JSON
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    /// Pool manifest JSON
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    /// Detected objects JSONL
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    /// Ground-truth labels JSONL; selects and orders the rows `detect` scores
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Calibration JSON (default: <out>/calibration.json)
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Retrieval depth
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Subsample the pool to this many images (seeded)
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Retrieval overlap threshold
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Mean text embedding cosine threshold
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_text: Option<f64>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_text_constraint: Option<bool>,
    /// Confidence needed to augment a class
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Detection threshold on s_max
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_img: Option<f64>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_obj: Option<f64>,
    /// Comma list of no_objects, no_calibration, no_knowledge, class_sim (or full)
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// rendered or raw
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_text_form: Option<String>,
    /// Worker threads; 1 runs everything serially
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Also write a score histogram CSV
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<bool>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,

    /// Embedding dimension of a generated world
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<usize>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    /// Descriptor sets per class of a generated world
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_rate: Option<f64>,
    #[arg(long, global = true)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($field:ident),*) => {
        RunConfig { $($field: $hi.$field.or($lo.$field)),* }
    };
}

impl RunConfig {
    /// Reads a config file; relative paths are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.paths_mut() {
            if let Some(p) = p.as_mut() {
                if p.as_os_str() == "." && !base.as_os_str().is_empty() {
                    *p = base.to_path_buf();
                } else if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.images,
            &mut self.texts,
            &mut self.bank,
            &mut self.pool,
            &mut self.detections,
            &mut self.labels,
            &mut self.calibration,
            &mut self.out,
        ]
    }

    /// Fields set in `self` win over `lower`.
    pub fn overlay(&self, lower: &RunConfig) -> RunConfig {
        let hi = self.clone();
        let lo = lower.clone();
        overlay!(
            hi, lo, images, texts, bank, pool, detections, labels, calibration, out, seed, k, m, eta,
            eta_text, use_text_constraint, gamma, lambda, temperature, w_img, w_obj, variant,
            retrieval_text_form, threads, histogram, bins, dim, classes, samples_per_class, ood,
            pool_size, n, hallucination_rate, noise_sigma
        )
    }

    /// CLI flags over the config file (explicit path, else `OODCAL_CONFIG`).
    pub fn resolve(cli: &RunConfig, config_path: Option<&Path>) -> Result<RunConfig, CliError> {
        let env_path = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        match config_path.map(Path::to_path_buf).or(env_path) {
            Some(p) => Ok(cli.overlay(&RunConfig::from_file(&p)?)),
            None => Ok(cli.clone()),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.calibration
            .clone()
            .unwrap_or_else(|| self.out_dir().join(CALIBRATION_FILE))
    }

    pub fn require(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        value
            .clone()
            .ok_or_else(|| CliError::Usage(format!("missing `{key}` (flag --{} or config key)", key.replace('_', "-"))))
    }

    pub fn parallel(&self) -> bool {
        self.threads != Some(1)
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        Ok(self.variant.as_deref().unwrap_or("full").parse()?)
    }

    pub fn consistency(&self) -> Result<ConsistencyConfig, CliError> {
        let form: RetrievalTextForm = match &self.retrieval_text_form {
            Some(s) => s.parse()?,
            None => RetrievalTextForm::default(),
        };
        let cfg = ConsistencyConfig {
            eta: self.eta.unwrap_or(DEFAULT_ETA),
            eta_text: self.eta_text.unwrap_or(DEFAULT_ETA_TEXT),
            use_text_constraint: self.use_text_constraint.unwrap_or(true),
            k: self.k.unwrap_or(DEFAULT_K),
            gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            retrieval_text_form: form,
            parallel: self.parallel(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scoring(&self) -> Result<ScoringConfig, CliError> {
        let weights = Weights {
            image: self.w_img.unwrap_or(1.0),
            object: self.w_obj.unwrap_or(1.0),
        };
        if !weights.image.is_finite() || !weights.object.is_finite() {
            return Err(CliError::Usage("weights must be finite".into()));
        }
        let temperature = self.temperature.unwrap_or(1.0);
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CliError::Usage(format!("temperature = {temperature} must be positive")));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() {
                return Err(CliError::Usage("lambda must be finite".into()));
            }
        }
        Ok(ScoringConfig {
            weights,
            temperature,
            lambda: self.lambda,
            variant: self.variant()?,
            parallel: self.parallel(),
        })
    }

    pub fn world_spec(&self) -> Result<WorldSpec, CliError> {
        let dim = self
            .dim
            .ok_or_else(|| CliError::Usage("synth needs an embedding dimension (--dim)".into()))?;
        let d = WorldSpec::default();
        let spec = WorldSpec {
            seed: self.seed.unwrap_or(d.seed),
            dim,
            n_classes: self.classes.unwrap_or(d.n_classes),
            samples_per_class: self.samples_per_class.unwrap_or(d.samples_per_class),
            n_ood: self.ood.unwrap_or(d.n_ood),
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            n_sets: self.n.unwrap_or(d.n_sets),
            hallucination_rate: self.hallucination_rate.unwrap_or(d.hallucination_rate),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            ..d
        };
        spec.validate()?;
        Ok(spec)
    }
}

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use oodcal_core::calibration::{calibrate_bank, Calibration};
use oodcal_core::descriptors::{required_texts, DescriptorBank};
use oodcal_core::embed::{read_table_file, EmbeddingKind, EmbeddingTable};
use oodcal_core::evaluation::{evaluate, histogram, write_histogram, LabeledScores};
use oodcal_core::pipeline::score_samples;
use oodcal_core::report::ScoreReport;
use oodcal_core::retrieval::{PoolManifest, RetrievalTextForm, UnlabeledPool};
use oodcal_core::samples::{read_detections, read_labels, DetectionIndex};
use oodcal_core::synth::{self, generate};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    RunConfig, CONFIG_FILE, DEFAULT_BINS, HISTOGRAM_FILE, METRICS_FILE, SCORES_FILE,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: oodcal_core::Result<T>) -> Result<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_table(cfg: &RunConfig, which: &Option<PathBuf>, key: &str) -> Result<EmbeddingTable> {
    let path = cfg.require(which, key)?;
    with_path(&path, read_table_file(&path))
}

fn load_bank(cfg: &RunConfig) -> Result<DescriptorBank> {
    let path = cfg.require(&cfg.bank, "bank")?;
    with_path(&path, DescriptorBank::from_reader(open(&path)?))
}

/// Pool ids, optionally reduced to `m` by seeded sampling without replacement.
/// The kept ids stay in manifest order.
fn load_pool_ids(cfg: &RunConfig) -> Result<Vec<String>> {
    let path = cfg.require(&cfg.pool, "pool")?;
    let ids = with_path(&path, PoolManifest::from_reader(open(&path)?))?.image_ids;
    match cfg.m {
        None => Ok(ids),
        Some(0) => Err(CliError::Usage("m must be positive".into())),
        Some(m) if m > ids.len() => Err(CliError::Data(format!(
            "m = {m} exceeds the pool size {}",
            ids.len()
        ))),
        Some(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
            let mut keep = sample(&mut rng, ids.len(), m).into_vec();
            keep.sort_unstable();
            Ok(keep.into_iter().map(|i| ids[i].clone()).collect())
        }
    }
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.world_spec()?;
    let world = generate(&spec)?;
    let out = cfg.out_dir();
    for (name, bytes) in world.files()? {
        write_atomic(&out.join(name), &bytes)?;
    }
    let run = RunConfig {
        images: Some(synth::IMAGES_FILE.into()),
        texts: Some(synth::TEXTS_FILE.into()),
        bank: Some(synth::BANK_FILE.into()),
        pool: Some(synth::POOL_FILE.into()),
        detections: Some(synth::DETECTIONS_FILE.into()),
        labels: Some(synth::LABELS_FILE.into()),
        out: Some(".".into()),
        seed: Some(spec.seed),
        ..Default::default()
    };
    let mut bytes = serde_json::to_vec_pretty(&run).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(&out.join(CONFIG_FILE), &bytes)?;
    eprintln!(
        "wrote {} classes, {} ID + {} OOD samples, pool of {} to {}",
        spec.n_classes,
        spec.n_classes * spec.samples_per_class,
        spec.n_ood,
        spec.pool_size,
        out.display()
    );
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    let ccfg = cfg.consistency()?;
    let images = load_table(cfg, &cfg.images, "images")?;
    let texts = load_table(cfg, &cfg.texts, "texts")?;
    let bank = load_bank(cfg)?;
    let pool = UnlabeledPool::new(load_pool_ids(cfg)?, &images)?;
    let cal = calibrate_bank(&bank, &pool, &texts, &ccfg)?;
    let mut buf = Vec::new();
    cal.to_writer(&mut buf)?;
    let path = cfg.calibration_path();
    write_atomic(&path, &buf)?;

    let width = cal.classes.keys().map(String::len).max().unwrap_or(5).max(5);
    println!("{:<width$}  p(c)    groups  chosen  augmented", "class");
    for (name, c) in &cal.classes {
        println!(
            "{name:<width$}  {:<6.4}  {:<6}  {:<6}  {}",
            c.confidence,
            c.groups.len(),
            c.chosen_set,
            if c.augmented { "yes" } else { "no" }
        );
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn detect(cfg: &RunConfig) -> Result<()> {
    let mut scfg = cfg.scoring()?;
    if scfg.lambda.is_none() {
        return Err(CliError::Usage("detect needs a threshold (--lambda)".into()));
    }
    let images = load_table(cfg, &cfg.images, "images")?;
    let texts = load_table(cfg, &cfg.texts, "texts")?;
    let bank = load_bank(cfg)?;
    let labels_path = cfg.require(&cfg.labels, "labels")?;
    let labels = with_path(&labels_path, read_labels(open(&labels_path)?))?;
    let detections = match &cfg.detections {
        Some(p) => with_path(p, read_detections(open(p)?))?,
        None => Vec::new(),
    };
    let detections = DetectionIndex::new(detections, &images)
        .map_err(|e| CliError::Data(format!("detections: {e}")))?;
    let calibration = if scfg.variant.needs_calibration() {
        let p = cfg.calibration_path();
        Some(with_path(&p, Calibration::from_reader(open(&p)?))?)
    } else {
        None
    };
    let gamma = cfg
        .gamma
        .or(calibration.as_ref().map(|c| c.config.gamma))
        .unwrap_or(oodcal_core::calibration::DEFAULT_GAMMA);
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CliError::Usage(format!("gamma = {gamma} must be in [0, 1]")));
    }
    scfg.parallel = cfg.parallel();
    let report = score_samples(
        &images,
        &texts,
        &labels,
        &detections,
        &bank,
        calibration.as_ref(),
        gamma,
        &scfg,
    )?;
    let mut buf = Vec::new();
    report.to_writer(&mut buf)?;
    let path = cfg.out_dir().join(SCORES_FILE);
    write_atomic(&path, &buf)?;
    eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, csvs: &[PathBuf]) -> Result<()> {
    if csvs.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one score CSV".into()));
    }
    let mut scores = LabeledScores::default();
    for p in csvs {
        let report = with_path(p, ScoreReport::from_reader(open(p)?))?;
        if report.rows.is_empty() {
            return Err(CliError::Data(format!("{}: no score rows", p.display())));
        }
        let s = report.labeled_scores();
        scores.id_scores.extend(s.id_scores);
        scores.ood_scores.extend(s.ood_scores);
    }
    if scores.id_scores.is_empty() || scores.ood_scores.is_empty() {
        return Err(CliError::Data(format!(
            "need both ID and OOD rows, got {} ID and {} OOD",
            scores.id_scores.len(),
            scores.ood_scores.len()
        )));
    }
    let metrics = evaluate(&scores)?;
    let mut buf = Vec::new();
    metrics.to_writer(&mut buf)?;
    let out = cfg.out_dir();
    write_atomic(&out.join(METRICS_FILE), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    if cfg.histogram.unwrap_or(false) {
        let bins = histogram(&scores, cfg.bins.unwrap_or(DEFAULT_BINS))?;
        let mut buf = Vec::new();
        write_histogram(&bins, &mut buf)?;
        write_atomic(&out.join(HISTOGRAM_FILE), &buf)?;
    }
    Ok(())
}

/// Loads everything the config names and reports every referential problem.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let mut problems: Vec<String> = Vec::new();
    let mut load = |p: &Option<PathBuf>, key: &str| -> Option<EmbeddingTable> {
        let p = p.as_ref()?;
        match read_table_file(p) {
            Ok(t) => Some(t),
            Err(e) => {
                problems.push(format!("{key} {}: {e}", p.display()));
                None
            }
        }
    };
    let images = load(&cfg.images, "images");
    let texts = load(&cfg.texts, "texts");
    let mut report = |m: String| problems.push(m);

    if let (Some(i), Some(t)) = (&images, &texts) {
        if i.dim() != t.dim() {
            report(format!("dimension mismatch: images have {} but texts have {}", i.dim(), t.dim()));
        }
    }
    for (table, want, key) in [
        (&images, EmbeddingKind::Image, "images"),
        (&texts, EmbeddingKind::Text, "texts"),
    ] {
        if let Some(t) = table {
            if let Some(e) = t.iter().find(|e| e.kind != want) {
                report(format!("{key}: `{}` has the wrong kind", e.id));
            }
        }
    }

    let bank = cfg.bank.as_ref().and_then(|p| {
        match File::open(p).map_err(oodcal_core::Error::from).and_then(DescriptorBank::from_reader) {
            Ok(b) => Some(b),
            Err(e) => {
                report(format!("bank {}: {e}", p.display()));
                None
            }
        }
    });
    let detections = cfg.detections.as_ref().and_then(|p| {
        match File::open(p).map_err(oodcal_core::Error::from).and_then(read_detections) {
            Ok(d) => Some(d),
            Err(e) => {
                report(format!("detections {}: {e}", p.display()));
                None
            }
        }
    });
    let mut image_refs: Vec<(String, &str)> = Vec::new();
    if let Some(p) = &cfg.pool {
        match File::open(p).map_err(oodcal_core::Error::from).and_then(PoolManifest::from_reader) {
            Ok(pool) => image_refs.extend(pool.image_ids.into_iter().map(|i| (i, "pool"))),
            Err(e) => report(format!("pool {}: {e}", p.display())),
        }
    }
    if let Some(p) = &cfg.labels {
        match File::open(p).map_err(oodcal_core::Error::from).and_then(read_labels) {
            Ok(l) => image_refs.extend(l.into_iter().map(|l| (l.image_id, "labels"))),
            Err(e) => report(format!("labels {}: {e}", p.display())),
        }
    }
    if let Some(d) = &detections {
        image_refs.extend(d.iter().map(|d| (d.image_id.clone(), "detections")));
    }
    if let Some(i) = &images {
        for (id, from) in &image_refs {
            if !i.contains(id) {
                report(format!("image `{id}` referenced by {from} has no embedding"));
            }
        }
    }

    if let (Some(b), Some(t)) = (&bank, &texts) {
        let classes: Vec<&str> = b.class_names().collect();
        let objects: Vec<String> = detections
            .iter()
            .flatten()
            .flat_map(|d| d.objects.iter().cloned())
            .collect();
        let mut needed = required_texts(b, &classes, &objects);
        let form = cfg.retrieval_text_form.as_deref().map(str::parse::<RetrievalTextForm>);
        if let Some(Ok(RetrievalTextForm::Raw)) = form {
            for (_, sets) in b.iter() {
                needed.extend(sets.iter().flat_map(|s| s.descriptors.iter().cloned()));
            }
            needed.sort();
            needed.dedup();
        }
        for text in needed {
            if !t.contains(&text) {
                report(format!("missing text embedding `{text}`"));
            }
        }
    }

    for p in &problems {
        println!("{p}");
    }
    if problems.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Invalid(problems.len()))
    }
}

//! Seeded synthetic embedding worlds with known geometry.
//!
//! Class and OOD cluster centers are well-separated random unit vectors.
//! Images, class names, descriptors and object names are noisy copies of the
//! center they belong to. A `hallucination_rate` fraction of each class's
//! descriptor sets instead describe some other center (another class or an
//! OOD cluster), which is the failure mode calibration has to catch.
//!
//! Randomness comes only from a `ChaCha8Rng` seeded with `WorldSpec::seed`,
//! consumed in a fixed order; Gaussian draws use Box-Muller.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::{render_descriptor_text, DescriptorBank};
use crate::embed::{save_table, Embedding, EmbeddingTable, TableFormat};
use crate::error::{Error, Result};
use crate::retrieval::PoolManifest;
use crate::samples::{write_detections, write_labels, Label, LabeledSample};
use crate::scoring::SampleConcepts;

pub const IMAGES_FILE: &str = "images.emb";
pub const TEXTS_FILE: &str = "texts.jsonl";
pub const BANK_FILE: &str = "bank.json";
pub const POOL_FILE: &str = "pool.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const WORLD_FILE: &str = "world.json";

const CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub dim: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub n_ood: usize,
    /// Unlabeled pool size `m`.
    pub pool_size: usize,
    /// Descriptor sets per class.
    pub n_sets: usize,
    pub hallucination_rate: f64,
    /// Norm of the Gaussian offset added to image embeddings.
    pub noise_sigma: f64,
    pub ood_clusters: usize,
    pub descriptor_vocab: usize,
    pub descriptors_per_set: usize,
    pub descriptor_noise: f64,
    pub name_noise: f64,
    pub object_vocab: usize,
    pub objects_per_sample: usize,
    pub object_noise: f64,
    /// Largest allowed |cosine| between any two centers.
    pub max_center_cosine: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            n_classes: 10,
            samples_per_class: 20,
            n_ood: 100,
            pool_size: 1000,
            n_sets: 10,
            hallucination_rate: 0.0,
            noise_sigma: 1.5,
            ood_clusters: 5,
            descriptor_vocab: 8,
            descriptors_per_set: 4,
            descriptor_noise: 0.03,
            name_noise: 0.25,
            object_vocab: 6,
            objects_per_sample: 2,
            object_noise: 0.4,
            max_center_cosine: 0.5,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("n_classes", self.n_classes),
            ("samples_per_class", self.samples_per_class),
            ("n_ood", self.n_ood),
            ("pool_size", self.pool_size),
            ("n_sets", self.n_sets),
            ("ood_clusters", self.ood_clusters),
            ("descriptor_vocab", self.descriptor_vocab),
            ("descriptors_per_set", self.descriptors_per_set),
            ("object_vocab", self.object_vocab),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        if self.dim < 2 {
            return Err(Error::Parameter("dim must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.hallucination_rate) {
            return Err(Error::Parameter("hallucination_rate must be in [0, 1]".into()));
        }
        if self.descriptors_per_set > self.descriptor_vocab {
            return Err(Error::Parameter("descriptors_per_set exceeds descriptor_vocab".into()));
        }
        if self.objects_per_sample > self.object_vocab {
            return Err(Error::Parameter("objects_per_sample exceeds object_vocab".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("descriptor_noise", self.descriptor_noise),
            ("name_noise", self.name_noise),
            ("object_noise", self.object_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.max_center_cosine > 0.0 && self.max_center_cosine <= 1.0) {
            return Err(Error::Parameter("max_center_cosine must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Number of hallucinated sets per class.
    pub fn hallucinated_sets(&self) -> usize {
        (self.hallucination_rate * self.n_sets as f64).round() as usize
    }
}

pub fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

/// Ground truth recorded next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub spec: WorldSpec,
    /// Hallucinated set indices per class.
    pub hallucinated: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct WorldBundle {
    pub images: EmbeddingTable,
    pub texts: EmbeddingTable,
    pub bank: DescriptorBank,
    pub pool: PoolManifest,
    pub detections: Vec<SampleConcepts>,
    pub labels: Vec<LabeledSample>,
    pub truth: WorldTruth,
}

struct Sampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Standard normal via Box-Muller; the sine branch is cached for the next call.
    fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare = Some(r * (TAU * u2).sin());
        r * (TAU * u2).cos()
    }

    fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// `k` distinct indices from `0..n` by partial Fisher-Yates.
    fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.gaussian()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    /// `center + sigma * g / sqrt(dim)`, so the offset has norm close to `sigma`.
    fn perturb(&mut self, center: &[f64], sigma: f64) -> Vec<f32> {
        let scale = sigma / (center.len() as f64).sqrt();
        center
            .iter()
            .map(|&c| (c + scale * self.gaussian()) as f32)
            .collect()
    }
}

fn draw_centers(s: &mut Sampler, count: usize, dim: usize, max_cos: f64) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let v = s.unit_vector(dim);
            let ok = centers.iter().all(|c| {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                d.abs() <= max_cos
            });
            if ok {
                centers.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {} of {count} in dim {dim} with |cos| <= {max_cos}",
                i + 1
            )));
        }
    }
    Ok(centers)
}

pub fn generate(spec: &WorldSpec) -> Result<WorldBundle> {
    spec.validate()?;
    let mut s = Sampler::new(spec.seed);
    let n_centers = spec.n_classes + spec.ood_clusters;
    let centers = draw_centers(&mut s, n_centers, spec.dim, spec.max_center_cosine)?;
    let class_centers = &centers[..spec.n_classes];

    let mut images = EmbeddingTable::new(spec.dim)?;
    let mut texts = EmbeddingTable::new(spec.dim)?;
    images.set_meta("encoder", "synthworld");
    texts.set_meta("encoder", "synthworld");
    images.set_meta("seed", spec.seed.to_string());
    texts.set_meta("seed", spec.seed.to_string());

    let classes: Vec<String> = (0..spec.n_classes).map(class_name).collect();

    for (c, name) in classes.iter().enumerate() {
        let v = s.perturb(&class_centers[c], spec.name_noise);
        texts.insert(Embedding::text(name, v)?)?;
    }

    // Object vocabularies: classes first, then OOD clusters.
    let mut object_names: Vec<Vec<String>> = Vec::with_capacity(n_centers);
    for (i, center) in centers.iter().enumerate() {
        let owner = if i < spec.n_classes {
            classes[i].clone()
        } else {
            format!("ood_{}", i - spec.n_classes)
        };
        let mut names = Vec::with_capacity(spec.object_vocab);
        for o in 0..spec.object_vocab {
            let name = format!("object {o} of {owner}");
            let v = s.perturb(center, spec.object_noise);
            texts.insert(Embedding::text(&name, v)?)?;
            names.push(name);
        }
        object_names.push(names);
    }

    let n_halluc = spec.hallucinated_sets();
    let mut bank_sets: Vec<(String, Vec<Vec<String>>)> = Vec::with_capacity(spec.n_classes);
    let mut hallucinated = BTreeMap::new();
    for (c, name) in classes.iter().enumerate() {
        let mut vocab = Vec::with_capacity(spec.descriptor_vocab);
        for d in 0..spec.descriptor_vocab {
            let raw = format!("trait {d} of {name}");
            let v = s.perturb(&class_centers[c], spec.descriptor_noise);
            vocab.push((raw, v));
        }
        let mut bad = s.choose(spec.n_sets, n_halluc);
        bad.sort_unstable();
        // hallucination targets: any center except this class, distinct while possible
        let candidates: Vec<usize> = (0..n_centers).filter(|&i| i != c).collect();
        let mut targets = Vec::with_capacity(bad.len());
        while targets.len() < bad.len() {
            let take = (bad.len() - targets.len()).min(candidates.len());
            targets.extend(s.choose(candidates.len(), take).into_iter().map(|i| candidates[i]));
        }
        let mut sets: Vec<Vec<String>> = Vec::with_capacity(spec.n_sets);
        for set_idx in 0..spec.n_sets {
            let picked = s.choose(spec.descriptor_vocab, spec.descriptors_per_set);
            if let Some(pos) = bad.iter().position(|&b| b == set_idx) {
                let target = &centers[targets[pos]];
                let mut set = Vec::with_capacity(spec.descriptors_per_set);
                for d in 0..spec.descriptors_per_set {
                    let raw = format!("phantom {d} in sample {set_idx} of {name}");
                    let v = s.perturb(target, spec.descriptor_noise);
                    texts.insert(Embedding::text(render_descriptor_text(name, &raw)?, v.clone())?)?;
                    texts.insert(Embedding::text(&raw, v)?)?;
                    set.push(raw);
                }
                sets.push(set);
            } else {
                sets.push(picked.iter().map(|&i| vocab[i].0.clone()).collect());
            }
        }
        for (raw, v) in vocab {
            texts.insert(Embedding::text(render_descriptor_text(name, &raw)?, v.clone())?)?;
            texts.insert(Embedding::text(raw, v)?)?;
        }
        hallucinated.insert(name.clone(), bad);
        bank_sets.push((name.clone(), sets));
    }
    let bank = DescriptorBank::new(spec.n_sets, bank_sets)?;

    let mut labels = Vec::new();
    let mut detections = Vec::new();
    let mut add_sample = |s: &mut Sampler,
                          images: &mut EmbeddingTable,
                          id: String,
                          center: usize,
                          label: Label|
     -> Result<()> {
        let v = s.perturb(&centers[center], spec.noise_sigma);
        images.insert(Embedding::image(&id, v)?)?;
        let objects: Vec<String> = s
            .choose(spec.object_vocab, spec.objects_per_sample)
            .into_iter()
            .map(|o| object_names[center][o].clone())
            .collect();
        detections.push(SampleConcepts::new(&id, objects));
        labels.push(LabeledSample {
            image_id: id,
            label,
            class: (label == Label::Id).then(|| classes[center].clone()),
        });
        Ok(())
    };
    for c in 0..spec.n_classes {
        for i in 0..spec.samples_per_class {
            add_sample(&mut s, &mut images, format!("id_{c:02}_{i:04}"), c, Label::Id)?;
        }
    }
    for i in 0..spec.n_ood {
        let cluster = spec.n_classes + i % spec.ood_clusters;
        add_sample(&mut s, &mut images, format!("ood_{i:05}"), cluster, Label::Ood)?;
    }

    let mut pool_ids = Vec::with_capacity(spec.pool_size);
    for j in 0..spec.pool_size {
        let id = format!("pool_{j:06}");
        let v = s.perturb(&class_centers[j % spec.n_classes], spec.noise_sigma);
        images.insert(Embedding::image(&id, v)?)?;
        pool_ids.push(id);
    }

    Ok(WorldBundle {
        images,
        texts,
        bank,
        pool: PoolManifest::new(pool_ids),
        detections,
        labels,
        truth: WorldTruth {
            spec: spec.clone(),
            hallucinated,
        },
    })
}

impl WorldBundle {
    /// File name to bytes for every file of the bundle.
    pub fn files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        save_table(&self.images, &mut buf, TableFormat::Binary)?;
        out.push((IMAGES_FILE, std::mem::take(&mut buf)));
        save_table(&self.texts, &mut buf, TableFormat::Jsonl)?;
        out.push((TEXTS_FILE, std::mem::take(&mut buf)));
        self.bank.to_writer(&mut buf)?;
        out.push((BANK_FILE, std::mem::take(&mut buf)));
        self.pool.to_writer(&mut buf)?;
        out.push((POOL_FILE, std::mem::take(&mut buf)));
        write_detections(&self.detections, &mut buf)?;
        out.push((DETECTIONS_FILE, std::mem::take(&mut buf)));
        write_labels(&self.labels, &mut buf)?;
        out.push((LABELS_FILE, std::mem::take(&mut buf)));
        serde_json::to_writer_pretty(&mut buf, &self.truth)?;
        buf.push(b'\n');
        out.push((WORLD_FILE, buf));
        Ok(out)
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in self.files()? {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    /// All detected object names, sorted and deduplicated.
    pub fn object_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .detections
            .iter()
            .flat_map(|d| d.objects.iter().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn class_names(&self) -> Vec<String> {
        self.bank.class_names().map(str::to_string).collect()
    }
}

//! Brute-force top-k retrieval over the unlabeled image pool.
//!
//! A descriptor set scores every pool image by the mean cosine between the
//! image embedding and the embeddings of its descriptor texts; the `k` best
//! images form a k-hot [`RetrievalVector`]. Ties at the cut prefer the lower
//! pool index.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorSet;
use crate::embed::{cosine_with_norms, Embedding, EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};

pub const POOL_VERSION: u32 = 1;

/// Which string form of a descriptor is embedded for retrieval and the text
/// consistency check.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalTextForm {
    /// `"{c} which has {d}"`, the same form used for scoring.
    #[default]
    Rendered,
    /// The bare descriptor string.
    Raw,
}

impl std::str::FromStr for RetrievalTextForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rendered" => Ok(Self::Rendered),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Parameter(format!("unknown retrieval text form `{other}`"))),
        }
    }
}

impl RetrievalTextForm {
    pub fn texts(self, set: &DescriptorSet) -> Vec<String> {
        match self {
            Self::Rendered => set.rendered(),
            Self::Raw => set.descriptors.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub version: u32,
    pub image_ids: Vec<String>,
}

impl PoolManifest {
    pub fn new(image_ids: Vec<String>) -> Self {
        Self {
            version: POOL_VERSION,
            image_ids,
        }
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let manifest: Self = serde_json::from_reader(reader)?;
        if manifest.version != POOL_VERSION {
            return Err(Error::parse(
                "pool manifest",
                format!("unsupported version {}", manifest.version),
            ));
        }
        Ok(manifest)
    }

    pub fn to_writer<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

/// The unlabeled image set `M`; index `j` of every retrieval vector refers to
/// `image_ids()[j]`.
#[derive(Debug, Clone)]
pub struct UnlabeledPool<'a> {
    image_ids: Vec<String>,
    images: Vec<&'a Embedding>,
    norms: Vec<f64>,
}

impl<'a> UnlabeledPool<'a> {
    pub fn new(image_ids: Vec<String>, table: &'a EmbeddingTable) -> Result<Self> {
        if image_ids.is_empty() {
            return Err(Error::EmptyInput("unlabeled pool"));
        }
        let mut images = Vec::with_capacity(image_ids.len());
        let mut norms = Vec::with_capacity(image_ids.len());
        for id in &image_ids {
            let e = table.get(id)?;
            if e.kind != EmbeddingKind::Image {
                return Err(Error::InvalidData(format!("pool entry `{id}` is not an image")));
            }
            let norm = e.norm();
            if norm == 0.0 {
                return Err(Error::DegenerateVector(id.clone()));
            }
            images.push(e);
            norms.push(norm);
        }
        Ok(Self {
            image_ids,
            images,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn dim(&self) -> usize {
        self.images[0].dim()
    }

    /// Mean cosine of every pool image against `texts`.
    ///
    /// Texts are summed in sorted-id order so the result does not depend on
    /// the order descriptors were listed in.
    pub fn mean_scores(&self, texts: &[&Embedding], parallel: bool) -> Result<Vec<f64>> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("descriptor texts"));
        }
        let mut texts: Vec<&Embedding> = texts.to_vec();
        texts.sort_by(|a, b| a.id.cmp(&b.id));
        let mut text_norms = Vec::with_capacity(texts.len());
        for t in &texts {
            if t.dim() != self.dim() {
                return Err(Error::Dimension {
                    expected: self.dim(),
                    actual: t.dim(),
                });
            }
            let n = t.norm();
            if n == 0.0 {
                return Err(Error::DegenerateVector(t.id.clone()));
            }
            text_norms.push(n);
        }
        let count = texts.len() as f64;
        let score = |j: usize| -> f64 {
            let img = &self.images[j].vec;
            let sum: f64 = texts
                .iter()
                .zip(&text_norms)
                .map(|(t, &tn)| cosine_with_norms(img, self.norms[j], &t.vec, tn))
                .sum();
            sum / count
        };
        let scores = if parallel {
            (0..self.len()).into_par_iter().map(score).collect()
        } else {
            (0..self.len()).map(score).collect()
        };
        Ok(scores)
    }
}

/// k-hot membership vector over the pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RetrievalVector {
    words: Vec<u64>,
    len: usize,
    k: usize,
}

impl RetrievalVector {
    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut words = vec![0u64; len.div_ceil(64)];
        let mut k = 0;
        for j in indices {
            if j >= len {
                return Err(Error::Parameter(format!("index {j} outside pool of {len}")));
            }
            let (w, b) = (j / 64, j % 64);
            if words[w] & (1 << b) == 0 {
                words[w] |= 1 << b;
                k += 1;
            }
        }
        Ok(Self { words, len, k })
    }

    /// Pool size `m`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of set entries.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn contains(&self, j: usize) -> bool {
        j < self.len && self.words[j / 64] & (1 << (j % 64)) != 0
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&j| self.contains(j))
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len).map(|j| self.contains(j)).collect()
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }
}

/// Order used to rank pool images: higher score first, then lower index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` best scores, in rank order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let m = scores.len();
    if k == 0 || k > m {
        return Err(Error::Parameter(format!("k = {k} must be in 1..={m}")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    if k < m {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Retriever {
    pub k: usize,
    pub text_form: RetrievalTextForm,
    pub parallel: bool,
}

impl Retriever {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            text_form: RetrievalTextForm::Rendered,
            parallel: true,
        }
    }

    pub fn retrieve(
        &self,
        pool: &UnlabeledPool<'_>,
        set: &DescriptorSet,
        text_table: &EmbeddingTable,
    ) -> Result<RetrievalVector> {
        if self.k == 0 || self.k > pool.len() {
            return Err(Error::Parameter(format!(
                "k = {} must be in 1..={}",
                self.k,
                pool.len()
            )));
        }
        let names = self.text_form.texts(set);
        let texts = names
            .iter()
            .map(|t| text_table.text(t))
            .collect::<Result<Vec<_>>>()?;
        let scores = pool.mean_scores(&texts, self.parallel)?;
        RetrievalVector::from_indices(pool.len(), top_k_indices(&scores, self.k)?)
    }
}

/// Retrieves the top-`k` pool images for a descriptor set using the rendered
/// descriptor texts.
pub fn retrieve(
    pool: &UnlabeledPool<'_>,
    set: &DescriptorSet,
    text_table: &EmbeddingTable,
    k: usize,
) -> Result<RetrievalVector> {
    Retriever::new(k).retrieve(pool, set, text_table)
}

/// `|a ∩ b| / k`, the cosine of two k-hot vectors with the same `k`.
pub fn retrieval_overlap(a: &RetrievalVector, b: &RetrievalVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.k() != b.k() {
        return Err(Error::Parameter(format!(
            "retrieval vectors built with different k ({} vs {})",
            a.k(),
            b.k()
        )));
    }
    if a.k() == 0 {
        return Err(Error::DegenerateVector("empty retrieval vector".into()));
    }
    Ok(a.intersection_count(b) as f64 / a.k() as f64)
}

//! Consistency-based confidence for sampled descriptor sets.
//!
//! For one class, each of the `n` descriptor sets retrieves its top-`k` pool
//! images. Two sets are consistent when their retrieval vectors overlap by at
//! least `eta` and (optionally) their mean text embeddings have cosine at least
//! `eta_text`. Sets are grouped into connected components of that relation and
//! the class confidence is the size of the largest component over `n`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorBank, DescriptorSet};
use crate::embed::{cosine, mean_embedding, Embedding, EmbeddingTable};
use crate::error::{Error, Result};
use crate::retrieval::{retrieval_overlap, RetrievalTextForm, RetrievalVector, Retriever, UnlabeledPool};

pub const CALIBRATION_VERSION: u32 = 1;

pub const DEFAULT_ETA: f64 = 0.9;
pub const DEFAULT_ETA_TEXT: f64 = 0.99;
pub const DEFAULT_K: usize = 50;
pub const DEFAULT_GAMMA: f64 = 0.5;

/// How pairwise-consistent sets are clustered into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingRule {
    /// Transitive closure of the consistency relation.
    ConnectedComponents,
}

/// The grouping rule used by [`group_sets`].
pub const GROUPING: GroupingRule = GroupingRule::ConnectedComponents;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub eta: f64,
    pub eta_text: f64,
    pub use_text_constraint: bool,
    pub k: usize,
    /// Confidence at or above which a class is augmented with its descriptors.
    pub gamma: f64,
    #[serde(default)]
    pub retrieval_text_form: RetrievalTextForm,
    #[serde(skip, default = "default_true")]
    pub parallel: bool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            eta_text: DEFAULT_ETA_TEXT,
            use_text_constraint: true,
            k: DEFAULT_K,
            gamma: DEFAULT_GAMMA,
            retrieval_text_form: RetrievalTextForm::Rendered,
            parallel: true,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.eta) {
            return Err(Error::Parameter(format!("eta = {} must be in (0, 1]", self.eta)));
        }
        if !in_unit(self.eta_text) {
            return Err(Error::Parameter(format!(
                "eta_text = {} must be in (0, 1]",
                self.eta_text
            )));
        }
        if self.k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma = {} must be in [0, 1]", self.gamma)));
        }
        Ok(())
    }

    fn retriever(&self) -> Retriever {
        Retriever {
            k: self.k,
            text_form: self.retrieval_text_form,
            parallel: self.parallel,
        }
    }
}

fn mean_text_embedding(
    set: &DescriptorSet,
    text_table: &EmbeddingTable,
    form: RetrievalTextForm,
) -> Result<Embedding> {
    let names = form.texts(set);
    let texts = names
        .iter()
        .map(|t| text_table.text(t))
        .collect::<Result<Vec<_>>>()?;
    mean_embedding(&texts)
}

fn consistent_with_means(
    ra: &RetrievalVector,
    rb: &RetrievalVector,
    means: Option<(&Embedding, &Embedding)>,
    cfg: &ConsistencyConfig,
) -> Result<bool> {
    if retrieval_overlap(ra, rb)? < cfg.eta {
        return Ok(false);
    }
    match means {
        Some((ma, mb)) if cfg.use_text_constraint => Ok(cosine(ma, mb)? >= cfg.eta_text),
        _ => Ok(true),
    }
}

/// Whether two descriptor sets agree: retrieval overlap `>= eta` and, when
/// enabled, mean-text cosine `>= eta_text`.
pub fn consistent(
    a: &DescriptorSet,
    b: &DescriptorSet,
    ra: &RetrievalVector,
    rb: &RetrievalVector,
    text_table: &EmbeddingTable,
    cfg: &ConsistencyConfig,
) -> Result<bool> {
    if !cfg.use_text_constraint {
        return consistent_with_means(ra, rb, None, cfg);
    }
    let ma = mean_text_embedding(a, text_table, cfg.retrieval_text_form)?;
    let mb = mean_text_embedding(b, text_table, cfg.retrieval_text_form)?;
    consistent_with_means(ra, rb, Some((&ma, &mb)), cfg)
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so roots are component minima
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of a symmetric consistency matrix.
///
/// Components are ordered by their smallest member and members are ascending.
/// The diagonal is treated as true whatever its stored value.
pub fn group_sets(pairwise: &[Vec<bool>]) -> Result<Vec<Vec<usize>>> {
    let n = pairwise.len();
    if n == 0 {
        return Err(Error::EmptyInput("consistency matrix"));
    }
    for (i, row) in pairwise.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidMatrix(format!(
                "row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
    }
    let mut sets = DisjointSets::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if pairwise[i][j] != pairwise[j][i] {
                return Err(Error::InvalidMatrix(format!("entry ({i}, {j}) is not symmetric")));
            }
            if pairwise[i][j] {
                sets.union(i, j);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        let root = sets.find(v);
        by_root.entry(root).or_default().push(v);
    }
    Ok(by_root.into_values().collect())
}

/// Index of the largest group; ties go to the earliest group, which is the one
/// holding the smallest sample index.
fn largest_group(groups: &[Vec<usize>]) -> usize {
    let mut best = 0;
    for (i, g) in groups.iter().enumerate() {
        if g.len() > groups[best].len() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedClass {
    #[serde(skip)]
    pub class_name: String,
    pub confidence: f64,
    pub groups: Vec<Vec<usize>>,
    pub chosen_set: usize,
    pub augmented: bool,
}

impl CalibratedClass {
    /// Builds the record from a partition of `0..n`.
    pub fn from_groups(class_name: impl Into<String>, groups: Vec<Vec<usize>>, gamma: f64) -> Self {
        let n: usize = groups.iter().map(Vec::len).sum();
        let best = &groups[largest_group(&groups)];
        let confidence = best.len() as f64 / n as f64;
        let chosen_set = *best.iter().min().expect("groups are non-empty");
        Self {
            class_name: class_name.into(),
            confidence,
            chosen_set,
            augmented: confidence >= gamma,
            groups,
        }
    }
}

/// Pairwise consistency matrix for a list of sets with their retrieval vectors.
pub fn consistency_matrix(
    sets: &[DescriptorSet],
    retrievals: &[RetrievalVector],
    text_table: &EmbeddingTable,
    cfg: &ConsistencyConfig,
) -> Result<Vec<Vec<bool>>> {
    let n = sets.len();
    let means = if cfg.use_text_constraint {
        Some(
            sets.iter()
                .map(|s| mean_text_embedding(s, text_table, cfg.retrieval_text_form))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mut matrix = vec![vec![false; n]; n];
    for i in 0..n {
        matrix[i][i] = true;
        for j in (i + 1)..n {
            let pair = means.as_ref().map(|m| (&m[i], &m[j]));
            let edge = consistent_with_means(&retrievals[i], &retrievals[j], pair, cfg)?;
            matrix[i][j] = edge;
            matrix[j][i] = edge;
        }
    }
    Ok(matrix)
}

pub fn calibrate_class(
    bank: &DescriptorBank,
    class_name: &str,
    pool: &UnlabeledPool<'_>,
    text_table: &EmbeddingTable,
    cfg: &ConsistencyConfig,
) -> Result<CalibratedClass> {
    cfg.validate()?;
    let sets = bank.sets(class_name)?;
    let retriever = cfg.retriever();
    let retrievals = if cfg.parallel {
        sets.par_iter()
            .map(|s| retriever.retrieve(pool, s, text_table))
            .collect::<Result<Vec<_>>>()?
    } else {
        sets.iter()
            .map(|s| retriever.retrieve(pool, s, text_table))
            .collect::<Result<Vec<_>>>()?
    };
    let matrix = consistency_matrix(sets, &retrievals, text_table, cfg)?;
    let groups = group_sets(&matrix)?;
    Ok(CalibratedClass::from_groups(class_name, groups, cfg.gamma))
}

/// Calibration results for a whole bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub config: ConsistencyConfig,
    pub classes: BTreeMap<String, CalibratedClass>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    version: u32,
    config: ConsistencyConfig,
    classes: BTreeMap<String, CalibratedClass>,
}

impl Calibration {
    pub fn get(&self, class_name: &str) -> Result<&CalibratedClass> {
        self.classes
            .get(class_name)
            .ok_or_else(|| Error::UnknownId(class_name.to_string()))
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_reader(reader)?;
        if file.version != CALIBRATION_VERSION {
            return Err(Error::parse(
                "calibration",
                format!("unsupported version {}", file.version),
            ));
        }
        let classes = file
            .classes
            .into_iter()
            .map(|(name, mut c)| {
                c.class_name = name.clone();
                (name, c)
            })
            .collect();
        Ok(Self {
            config: file.config,
            classes,
        })
    }

    pub fn to_writer<W: Write>(&self, mut writer: W) -> Result<()> {
        let file = CalibrationFile {
            version: CALIBRATION_VERSION,
            config: self.config,
            classes: self.classes.clone(),
        };
        serde_json::to_writer_pretty(&mut writer, &file)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

/// Calibrates every class in the bank.
pub fn calibrate_bank(
    bank: &DescriptorBank,
    pool: &UnlabeledPool<'_>,
    text_table: &EmbeddingTable,
    cfg: &ConsistencyConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    let names: Vec<&str> = bank.class_names().collect();
    let results = if cfg.parallel {
        names
            .par_iter()
            .map(|c| calibrate_class(bank, c, pool, text_table, cfg))
            .collect::<Result<Vec<_>>>()?
    } else {
        names
            .iter()
            .map(|c| calibrate_class(bank, c, pool, text_table, cfg))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Calibration {
        config: *cfg,
        classes: results
            .into_iter()
            .map(|c| (c.class_name.clone(), c))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Embedding;
    use proptest::prelude::*;

    fn matrix_from_edges(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
        let mut m = vec![vec![false; n]; n];
        for i in 0..n {
            m[i][i] = true;
        }
        for &(a, b) in edges {
            m[a][b] = true;
            m[b][a] = true;
        }
        m
    }

    #[test]
    fn grouping_examples() {
        assert_eq!(group_sets(&vec![vec![true; 4]; 4]).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert_eq!(
            group_sets(&matrix_from_edges(3, &[])).unwrap(),
            vec![vec![0], vec![1], vec![2]]
        );
        assert_eq!(
            group_sets(&matrix_from_edges(4, &[(0, 1), (1, 2)])).unwrap(),
            vec![vec![0, 1, 2], vec![3]]
        );
        assert_eq!(
            group_sets(&matrix_from_edges(4, &[(3, 1)])).unwrap(),
            vec![vec![0], vec![1, 3], vec![2]]
        );
        assert_eq!(GROUPING, GroupingRule::ConnectedComponents);
    }

    #[test]
    fn grouping_rejects_bad_matrices() {
        let mut m = matrix_from_edges(3, &[]);
        m[0][2] = true;
        assert!(matches!(group_sets(&m), Err(Error::InvalidMatrix(_))));
        let ragged = vec![vec![true, false], vec![false]];
        assert!(matches!(group_sets(&ragged), Err(Error::InvalidMatrix(_))));
        assert!(group_sets(&[]).is_err());
    }

    #[test]
    fn partition_arithmetic() {
        let c = CalibratedClass::from_groups("x", vec![vec![0]], 0.5);
        assert_eq!(c.confidence, 1.0);
        let c = CalibratedClass::from_groups("x", vec![vec![0], vec![1, 2, 3]], 0.5);
        assert_eq!(c.confidence, 0.75);
        assert_eq!(c.chosen_set, 1);
        assert!(c.augmented);
        let tie = CalibratedClass::from_groups("x", vec![vec![0, 3], vec![1, 2]], 0.5);
        assert_eq!(tie.chosen_set, 0);
        assert_eq!(tie.confidence, 0.5);
        let low = CalibratedClass::from_groups("x", vec![vec![0], vec![1], vec![2]], 0.5);
        assert!(!low.augmented);
    }

    fn k_hot(m: usize, idx: impl IntoIterator<Item = usize>) -> RetrievalVector {
        RetrievalVector::from_indices(m, idx).unwrap()
    }

    /// Text table where `cat which has a` is e0 and `cat which has b` is
    /// `cos_b * e0 + sin * e1`.
    fn text_pair(cos_b: f64) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2).unwrap();
        t.insert(Embedding::text("cat which has a", vec![1.0, 0.0]).unwrap()).unwrap();
        let sin = (1.0 - cos_b * cos_b).sqrt();
        t.insert(Embedding::text("cat which has b", vec![cos_b as f32, sin as f32]).unwrap())
            .unwrap();
        t
    }

    #[test]
    fn consistency_examples() {
        let cfg = ConsistencyConfig::default();
        let texts = text_pair(0.995);
        let a = DescriptorSet::new("cat", 0, ["a"]).unwrap();
        let b = DescriptorSet::new("cat", 1, ["b"]).unwrap();
        let r = k_hot(100, 0..50);
        assert!(consistent(&a, &a, &r, &r, &texts, &cfg).unwrap());

        let r44 = k_hot(100, (0..44).chain(50..56));
        assert!(!consistent(&a, &a, &r, &r44, &texts, &cfg).unwrap());

        let r46 = k_hot(100, (0..46).chain(50..54));
        assert!(consistent(&a, &b, &r, &r46, &texts, &cfg).unwrap());

        let far = text_pair(0.98);
        assert!(!consistent(&a, &b, &r, &r46, &far, &cfg).unwrap());
        let retrieval_only = ConsistencyConfig {
            use_text_constraint: false,
            ..cfg
        };
        assert!(consistent(&a, &b, &r, &r46, &far, &retrieval_only).unwrap());

        let r45 = k_hot(100, (0..45).chain(50..55));
        assert!(consistent(&a, &a, &r, &r45, &texts, &cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(ConsistencyConfig::default().validate().is_ok());
        let bad = ConsistencyConfig {
            eta: 1.0 + 1e-9,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        let zero = ConsistencyConfig {
            eta_text: 0.0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    /// Pool of 6 axis-aligned images in 6-d: sets 0 and 1 point at images
    /// 0..2, set 2 at images 3..5.
    #[test]
    fn calibrate_three_sets() {
        let dim = 6;
        let axis = |i: usize| {
            let mut v = vec![0.0f32; dim];
            v[i] = 1.0;
            v
        };
        let mut images = EmbeddingTable::new(dim).unwrap();
        for i in 0..dim {
            images.insert(Embedding::image(format!("img{i}"), axis(i)).unwrap()).unwrap();
        }
        let mut texts = EmbeddingTable::new(dim).unwrap();
        let toward = |idx: &[usize]| {
            let mut v = vec![0.0f32; dim];
            for &i in idx {
                v[i] = 1.0;
            }
            v
        };
        texts.insert(Embedding::text("owl which has p", toward(&[0, 1, 2])).unwrap()).unwrap();
        texts.insert(Embedding::text("owl which has q", toward(&[0, 1, 2])).unwrap()).unwrap();
        texts.insert(Embedding::text("owl which has r", toward(&[3, 4, 5])).unwrap()).unwrap();
        let bank = DescriptorBank::new(
            3,
            [("owl".to_string(), vec![vec!["p"], vec!["q"], vec!["r"]])],
        )
        .unwrap();
        let pool = UnlabeledPool::new((0..dim).map(|i| format!("img{i}")).collect(), &images).unwrap();
        let cfg = ConsistencyConfig {
            k: 3,
            ..Default::default()
        };
        let c = calibrate_class(&bank, "owl", &pool, &texts, &cfg).unwrap();
        assert_eq!(c.groups, vec![vec![0, 1], vec![2]]);
        assert!((c.confidence - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.chosen_set, 0);

        let serial = ConsistencyConfig { parallel: false, ..cfg };
        assert_eq!(calibrate_class(&bank, "owl", &pool, &texts, &serial).unwrap(), c);

        let all = calibrate_bank(&bank, &pool, &texts, &cfg).unwrap();
        let mut buf = Vec::new();
        all.to_writer(&mut buf).unwrap();
        let back = Calibration::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back.get("owl").unwrap(), &c);
    }

    #[test]
    fn single_set_is_fully_confident() {
        let mut images = EmbeddingTable::new(2).unwrap();
        images.insert(Embedding::image("i", vec![1.0, 0.0]).unwrap()).unwrap();
        let mut texts = EmbeddingTable::new(2).unwrap();
        texts.insert(Embedding::text("c which has d", vec![1.0, 1.0]).unwrap()).unwrap();
        let bank = DescriptorBank::new(1, [("c".to_string(), vec![vec!["d"]])]).unwrap();
        let pool = UnlabeledPool::new(vec!["i".into()], &images).unwrap();
        let cfg = ConsistencyConfig { k: 1, ..Default::default() };
        let c = calibrate_class(&bank, "c", &pool, &texts, &cfg).unwrap();
        assert_eq!(c.confidence, 1.0);
    }

    fn bfs_components(m: &[Vec<bool>]) -> Vec<Vec<usize>> {
        let n = m.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut head = 0;
            while head < comp.len() {
                let v = comp[head];
                head += 1;
                for w in 0..n {
                    if m[v][w] && !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    fn symmetric_matrix(n: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
        proptest::collection::vec(any::<bool>(), n * n).prop_map(move |bits| {
            let mut m = vec![vec![false; n]; n];
            for i in 0..n {
                m[i][i] = true;
                for j in (i + 1)..n {
                    m[i][j] = bits[i * n + j];
                    m[j][i] = bits[i * n + j];
                }
            }
            m
        })
    }

    proptest! {
        #[test]
        fn grouping_matches_bfs(m in (1usize..9).prop_flat_map(symmetric_matrix)) {
            let groups = group_sets(&m).unwrap();
            prop_assert_eq!(&groups, &bfs_components(&m));
            let c = CalibratedClass::from_groups("x", groups.clone(), 0.5);
            let n = m.len();
            prop_assert!((c.confidence * n as f64 - (c.confidence * n as f64).round()).abs() < 1e-9);
            prop_assert_eq!(c.confidence == 1.0, groups.len() == 1);
        }

        #[test]
        fn grouping_is_permutation_equivariant(
            (m, perm) in (1usize..9).prop_flat_map(|n| (symmetric_matrix(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
        ) {
            let n = m.len();
            let mut pm = vec![vec![false; n]; n];
            for i in 0..n {
                for j in 0..n {
                    pm[perm[i]][perm[j]] = m[i][j];
                }
            }
            let original = group_sets(&m).unwrap();
            let permuted = group_sets(&pm).unwrap();
            let mut mapped: Vec<Vec<usize>> = original
                .iter()
                .map(|g| {
                    let mut g: Vec<usize> = g.iter().map(|&i| perm[i]).collect();
                    g.sort_unstable();
                    g
                })
                .collect();
            mapped.sort();
            prop_assert_eq!(mapped, permuted.clone());
            prop_assert_eq!(
                CalibratedClass::from_groups("x", original, 0.5).confidence,
                CalibratedClass::from_groups("x", permuted, 0.5).confidence
            );
        }

        #[test]
        fn removing_edges_never_raises_confidence(
            (m, mask) in (1usize..9).prop_flat_map(|n| (symmetric_matrix(n), symmetric_matrix(n)))
        ) {
            let n = m.len();
            let mut sparser = m.clone();
            for i in 0..n {
                for j in 0..n {
                    sparser[i][j] = m[i][j] && mask[i][j];
                }
            }
            let dense = CalibratedClass::from_groups("x", group_sets(&m).unwrap(), 0.5);
            let sparse = CalibratedClass::from_groups("x", group_sets(&sparser).unwrap(), 0.5);
            prop_assert!(sparse.confidence <= dense.confidence);
        }
    }
}

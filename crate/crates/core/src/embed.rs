//! Vector primitives and the embedding store.
//!
//! Every encoder output (image embeddings `I(x)`, text embeddings `T(t)`) enters
//! the pipeline through an [`EmbeddingTable`]. Vectors are stored exactly as the
//! encoder produced them; [`cosine`] normalizes on the fly.
//!
//! Two on-disk forms are supported:
//!
//! * JSONL: a header line `{"format":"emb-jsonl","version":1,"dim":D}` followed
//!   by one `{"id":..,"kind":"image"|"text","vec":[..]}` object per line.
//! * Binary: magic `EMB1`, little-endian `u32` dim and count, then per record a
//!   `u16` kind (0 image, 1 text), `u16` id length, the UTF-8 id and `dim` f32s.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JSONL_FORMAT: &str = "emb-jsonl";
pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

impl EmbeddingKind {
    fn code(self) -> u16 {
        match self {
            EmbeddingKind::Image => 0,
            EmbeddingKind::Text => 1,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(EmbeddingKind::Image),
            1 => Some(EmbeddingKind::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub id: String,
    pub kind: EmbeddingKind,
    pub vec: Vec<f32>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, kind: EmbeddingKind, vec: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if let Some(bad) = vec.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "embedding `{id}` has non-finite component {bad}"
            )));
        }
        Ok(Self { id, kind, vec })
    }

    pub fn image(id: impl Into<String>, vec: Vec<f32>) -> Result<Self> {
        Self::new(id, EmbeddingKind::Image, vec)
    }

    pub fn text(id: impl Into<String>, vec: Vec<f32>) -> Result<Self> {
        Self::new(id, EmbeddingKind::Text, vec)
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vec)
    }
}

/// Euclidean norm accumulated in f64.
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Cosine similarity from precomputed norms.
///
/// Bit-identical to [`cosine`] when the norms come from [`l2_norm`].
#[inline]
pub fn cosine_with_norms(a: &[f32], norm_a: f64, b: &[f32], norm_b: f64) -> f64 {
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Cosine similarity of two embeddings, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let norm_a = a.norm();
    if norm_a == 0.0 {
        return Err(Error::DegenerateVector(a.id.clone()));
    }
    let norm_b = b.norm();
    if norm_b == 0.0 {
        return Err(Error::DegenerateVector(b.id.clone()));
    }
    Ok(cosine_with_norms(&a.vec, norm_a, &b.vec, norm_b))
}

/// Component-wise arithmetic mean of a non-empty list of embeddings.
pub fn mean_embedding(vs: &[&Embedding]) -> Result<Embedding> {
    let first = vs.first().ok_or(Error::EmptyInput("mean of zero embeddings"))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for e in vs {
        if e.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: e.dim(),
            });
        }
        if e.kind != first.kind {
            return Err(Error::MixedKind);
        }
        for (slot, &x) in acc.iter_mut().zip(&e.vec) {
            *slot += f64::from(x);
        }
    }
    let count = vs.len() as f64;
    let vec = acc.into_iter().map(|s| (s / count) as f32).collect();
    Ok(Embedding {
        id: format!("mean({})", vs.len()),
        kind: first.kind,
        vec,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Jsonl,
    Binary,
}

impl TableFormat {
    /// Binary tables start with the `EMB1` magic; anything else is read as JSONL.
    pub fn sniff(prefix: &[u8]) -> Self {
        if prefix.starts_with(BINARY_MAGIC) {
            TableFormat::Binary
        } else {
            TableFormat::Jsonl
        }
    }

    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => TableFormat::Jsonl,
            _ => TableFormat::Binary,
        }
    }
}

/// An id-keyed store of embeddings sharing one dimension.
///
/// Insertion order is kept so that saving a loaded table reproduces it.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: Vec<Embedding>,
    index: HashMap<String, usize>,
    meta: BTreeMap<String, String>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            ..Default::default()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn insert(&mut self, embedding: Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: embedding.dim(),
            });
        }
        if self.index.contains_key(&embedding.id) {
            return Err(Error::DuplicateId(embedding.id));
        }
        self.index.insert(embedding.id.clone(), self.entries.len());
        self.entries.push(embedding);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&Embedding> {
        self.index
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Lookup for text strings; a miss names the text rather than an id.
    pub fn text(&self, text: &str) -> Result<&Embedding> {
        self.index
            .get(text)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingEmbedding(text.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.iter()
    }

    pub fn remove(&mut self, id: &str) -> Option<Embedding> {
        let pos = self.index.remove(id)?;
        let removed = self.entries.remove(pos);
        for slot in self.index.values_mut() {
            if *slot > pos {
                *slot -= 1;
            }
        }
        Some(removed)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: u32,
    dim: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct JsonlRecordRef<'a> {
    id: &'a str,
    kind: EmbeddingKind,
    vec: &'a [f32],
}

pub fn load_table<R: Read>(source: R, format: TableFormat) -> Result<EmbeddingTable> {
    match format {
        TableFormat::Jsonl => load_jsonl(BufReader::new(source)),
        TableFormat::Binary => load_binary(source),
    }
}

pub fn save_table<W: Write>(table: &EmbeddingTable, mut sink: W, format: TableFormat) -> Result<()> {
    match format {
        TableFormat::Jsonl => save_jsonl(table, &mut sink)?,
        TableFormat::Binary => save_binary(table, &mut sink)?,
    }
    sink.flush()?;
    Ok(())
}

/// Reads a table from disk, detecting the format from its first bytes.
pub fn read_table_file(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path)?;
    load_table(bytes.as_slice(), TableFormat::sniff(&bytes))
}

fn load_jsonl<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut lines = reader.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::parse("line 1", "missing header")),
        }
    };
    let header: JsonlHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::parse("line 1", e))?;
    if header.format != JSONL_FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::parse(
            "line 1",
            format!("unsupported header {}/{}", header.format, header.version),
        ));
    }
    let mut table = EmbeddingTable::new(header.dim).map_err(|e| Error::parse("line 1", e))?;
    table.meta = header.meta;
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", i + 1);
        let record: Embedding =
            serde_json::from_str(&line).map_err(|e| Error::parse(location.clone(), e))?;
        let record = Embedding::new(record.id, record.kind, record.vec)
            .map_err(|e| Error::parse(location.clone(), e))?;
        table.insert(record)?;
    }
    Ok(table)
}

fn save_jsonl<W: Write>(table: &EmbeddingTable, sink: &mut W) -> Result<()> {
    let header = JsonlHeader {
        format: JSONL_FORMAT.to_string(),
        version: FORMAT_VERSION,
        dim: table.dim,
        meta: table.meta.clone(),
    };
    serde_json::to_writer(&mut *sink, &header)?;
    sink.write_all(b"\n")?;
    for e in &table.entries {
        let record = JsonlRecordRef {
            id: &e.id,
            kind: e.kind,
            vec: &e.vec,
        };
        serde_json::to_writer(&mut *sink, &record)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

struct ByteCursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteCursor<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::parse(format!("offset {}", self.offset), format!("truncated {what}"))
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

fn load_binary<R: Read>(source: R) -> Result<EmbeddingTable> {
    let mut cur = ByteCursor {
        inner: source,
        offset: 0,
    };
    let magic: [u8; 4] = cur.take("magic")?;
    if &magic != BINARY_MAGIC {
        return Err(Error::parse("offset 0", "bad magic, expected EMB1"));
    }
    let dim = u32::from_le_bytes(cur.take("dim")?) as usize;
    let count = u32::from_le_bytes(cur.take("count")?);
    let mut table = EmbeddingTable::new(dim).map_err(|e| Error::parse("offset 4", e))?;
    let mut raw = vec![0u8; dim * 4];
    for _ in 0..count {
        let record_start = cur.offset;
        let kind_code = u16::from_le_bytes(cur.take("kind")?);
        let kind = EmbeddingKind::from_code(kind_code).ok_or_else(|| {
            Error::parse(format!("offset {record_start}"), format!("unknown kind {kind_code}"))
        })?;
        let id_len = u16::from_le_bytes(cur.take("id length")?) as usize;
        let mut id_bytes = vec![0u8; id_len];
        cur.fill(&mut id_bytes, "id")?;
        let id = String::from_utf8(id_bytes)
            .map_err(|e| Error::parse(format!("offset {record_start}"), e))?;
        cur.fill(&mut raw, "vector")?;
        let vec = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let embedding = Embedding::new(id, kind, vec)
            .map_err(|e| Error::parse(format!("offset {record_start}"), e))?;
        table.insert(embedding)?;
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing)? != 0 {
        return Err(Error::parse(
            format!("offset {}", cur.offset),
            "trailing bytes after last record",
        ));
    }
    Ok(table)
}

fn save_binary<W: Write>(table: &EmbeddingTable, sink: &mut W) -> Result<()> {
    let dim = u32::try_from(table.dim).map_err(|_| Error::Parameter("dim exceeds u32".into()))?;
    let count =
        u32::try_from(table.len()).map_err(|_| Error::Parameter("count exceeds u32".into()))?;
    sink.write_all(BINARY_MAGIC)?;
    sink.write_all(&dim.to_le_bytes())?;
    sink.write_all(&count.to_le_bytes())?;
    for e in &table.entries {
        let id_len = u16::try_from(e.id.len())
            .map_err(|_| Error::Parameter(format!("id `{}` longer than 65535 bytes", e.id)))?;
        sink.write_all(&e.kind.code().to_le_bytes())?;
        sink.write_all(&id_len.to_le_bytes())?;
        sink.write_all(e.id.as_bytes())?;
        for x in &e.vec {
            sink.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn text(id: &str, v: &[f32]) -> Embedding {
        Embedding::text(id, v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = text("a", &[1.0, 0.0, 0.0]);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        let x = text("x", &[1.0, 0.0]);
        let y = text("y", &[0.0, 1.0]);
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        let d = text("d", &[1.0, 1.0]);
        assert!((cosine(&d, &x).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        let a = text("a", &[1.0, 0.0]);
        let b = text("b", &[1.0, 0.0, 0.0]);
        assert!(matches!(cosine(&a, &b), Err(Error::Dimension { .. })));
        let z = text("z", &[0.0, 0.0]);
        assert!(matches!(cosine(&a, &z), Err(Error::DegenerateVector(id)) if id == "z"));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = text("a", &[0.1, 0.2, 0.3]);
        let c = cosine(&a, &a).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn mean_examples() {
        let a = text("a", &[1.0, 0.0]);
        let b = text("b", &[0.0, 1.0]);
        assert_eq!(mean_embedding(&[&a]).unwrap().vec, vec![1.0, 0.0]);
        assert_eq!(mean_embedding(&[&a, &b]).unwrap().vec, vec![0.5, 0.5]);
        let p = text("p", &[2.0, 0.0]);
        let q = text("q", &[0.0, 2.0]);
        let r = text("r", &[2.0, 2.0]);
        let m = mean_embedding(&[&p, &q, &r]).unwrap();
        for x in m.vec {
            assert!((f64::from(x) - 4.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_errors() {
        assert!(matches!(mean_embedding(&[]), Err(Error::EmptyInput(_))));
        let a = text("a", &[1.0, 0.0]);
        let b = text("b", &[1.0]);
        assert!(matches!(mean_embedding(&[&a, &b]), Err(Error::Dimension { .. })));
        let i = Embedding::image("i", vec![1.0, 0.0]).unwrap();
        assert!(matches!(mean_embedding(&[&a, &i]), Err(Error::MixedKind)));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Embedding::text("n", vec![f32::NAN]).is_err());
        assert!(Embedding::text("i", vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn empty_jsonl_table() {
        let src = "{\"format\":\"emb-jsonl\",\"version\":1,\"dim\":4}\n";
        let t = load_table(src.as_bytes(), TableFormat::Jsonl).unwrap();
        assert_eq!(t.dim(), 4);
        assert!(t.is_empty());
    }

    #[test]
    fn two_record_jsonl() {
        let src = concat!(
            "{\"format\":\"emb-jsonl\",\"version\":1,\"dim\":3}\n",
            "{\"id\":\"cat\",\"kind\":\"text\",\"vec\":[1,0,0]}\n",
            "{\"id\":\"img0\",\"kind\":\"image\",\"vec\":[0.5,0.25,-1.5]}\n",
        );
        let t = load_table(src.as_bytes(), TableFormat::Jsonl).unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("img0").unwrap().kind, EmbeddingKind::Image);
        assert!(matches!(t.get("dog"), Err(Error::UnknownId(_))));
        assert!(matches!(t.text("dog"), Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn jsonl_errors() {
        let dup = concat!(
            "{\"format\":\"emb-jsonl\",\"version\":1,\"dim\":1}\n",
            "{\"id\":\"a\",\"kind\":\"text\",\"vec\":[1]}\n",
            "{\"id\":\"a\",\"kind\":\"text\",\"vec\":[2]}\n",
        );
        assert!(matches!(
            load_table(dup.as_bytes(), TableFormat::Jsonl),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
        let wrong_dim = concat!(
            "{\"format\":\"emb-jsonl\",\"version\":1,\"dim\":2}\n",
            "{\"id\":\"a\",\"kind\":\"text\",\"vec\":[1]}\n",
        );
        assert!(matches!(
            load_table(wrong_dim.as_bytes(), TableFormat::Jsonl),
            Err(Error::Dimension { expected: 2, actual: 1 })
        ));
        let garbage = concat!(
            "{\"format\":\"emb-jsonl\",\"version\":1,\"dim\":2}\n",
            "{\"id\":\"a\",\"kind\":\"text\",\"vec\":[1,2]}\n",
            "not json\n",
        );
        match load_table(garbage.as_bytes(), TableFormat::Jsonl) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_table("".as_bytes(), TableFormat::Jsonl),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn binary_errors() {
        assert!(matches!(
            load_table(&b"EMB2\0\0\0\0"[..], TableFormat::Binary),
            Err(Error::Parse { .. })
        ));
        let mut t = EmbeddingTable::new(2).unwrap();
        t.insert(text("a", &[1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        save_table(&t, &mut buf, TableFormat::Binary).unwrap();
        buf.truncate(buf.len() - 2);
        match load_table(buf.as_slice(), TableFormat::Binary) {
            Err(Error::Parse { location, message }) => {
                assert_eq!(location, "offset 17");
                assert!(message.contains("vector"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_layout_is_exact() {
        let mut t = EmbeddingTable::new(1).unwrap();
        t.insert(Embedding::image("ab", vec![1.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        save_table(&t, &mut buf, TableFormat::Binary).unwrap();
        let mut expected = b"EMB1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(0u16.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1.0f32.to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(TableFormat::sniff(&buf), TableFormat::Binary);
    }

    #[test]
    fn remove_keeps_index_consistent() {
        let mut t = EmbeddingTable::new(1).unwrap();
        for id in ["a", "b", "c"] {
            t.insert(text(id, &[1.0])).unwrap();
        }
        assert!(t.remove("a").is_some());
        assert_eq!(t.get("c").unwrap().id, "c");
        assert_eq!(t.len(), 2);
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |x| x.is_finite())
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-100.0f32..100.0, dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn jsonl_binary_jsonl_round_trip_is_bit_exact(
            rows in proptest::collection::vec(proptest::collection::vec(finite_f32(), 5), 0..20)
        ) {
            let mut t = EmbeddingTable::new(5).unwrap();
            for (i, r) in rows.iter().enumerate() {
                t.insert(Embedding::image(format!("img{i}"), r.clone()).unwrap()).unwrap();
            }
            let mut jsonl = Vec::new();
            save_table(&t, &mut jsonl, TableFormat::Jsonl).unwrap();
            let from_jsonl = load_table(jsonl.as_slice(), TableFormat::Jsonl).unwrap();
            let mut bin = Vec::new();
            save_table(&from_jsonl, &mut bin, TableFormat::Binary).unwrap();
            let from_bin = load_table(bin.as_slice(), TableFormat::Binary).unwrap();
            let mut jsonl2 = Vec::new();
            save_table(&from_bin, &mut jsonl2, TableFormat::Jsonl).unwrap();
            prop_assert_eq!(&jsonl, &jsonl2);
            for (orig, back) in t.iter().zip(from_bin.iter()) {
                let a: Vec<u32> = orig.vec.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = back.vec.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn cosine_symmetric_and_self_one(a in nonzero_vec(6), b in nonzero_vec(6)) {
            let ea = text("a", &a);
            let eb = text("b", &b);
            prop_assert_eq!(cosine(&ea, &eb).unwrap(), cosine(&eb, &ea).unwrap());
            prop_assert!((cosine(&ea, &ea).unwrap() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), lambda in 0.01f32..100.0) {
            let ea = text("a", &a);
            let scaled = text("s", &a.iter().map(|x| x * lambda).collect::<Vec<_>>());
            let eb = text("b", &b);
            prop_assert!((cosine(&ea, &eb).unwrap() - cosine(&scaled, &eb).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn mean_of_copies_is_exact(v in proptest::collection::vec(-1e6f32..1e6, 4), copies in 1usize..50) {
            let e = text("v", &v);
            let refs = vec![&e; copies];
            prop_assert_eq!(mean_embedding(&refs).unwrap().vec, v);
        }
    }
}

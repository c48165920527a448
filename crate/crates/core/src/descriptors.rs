//! Per-class descriptor sets sampled from a language model.
//!
//! A class `c` owns `n` independently sampled [`DescriptorSet`]s. Each descriptor
//! is embedded in its rendered form `"{c} which has {d}"`, so the bank is also
//! the source of truth for which text strings need embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const BANK_VERSION: u32 = 1;
pub const DEFAULT_SETS_PER_CLASS: usize = 10;

/// Joins a class name and one descriptor into the text that gets embedded.
pub fn render_descriptor_text(class_name: &str, descriptor: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::EmptyInput("class name"));
    }
    if descriptor.is_empty() {
        return Err(Error::EmptyInput("descriptor"));
    }
    Ok(format!("{class_name} which has {descriptor}"))
}

fn strip_bullet(line: &str) -> &str {
    line.trim_start_matches(|c: char| c == '-' || c == '*' || c.is_whitespace())
        .trim_end()
}

/// Splits a bulleted-list completion into descriptors.
///
/// The prompt ends with a trailing `-`, so the first item usually arrives
/// without its bullet.
pub fn parse_llm_output(raw: &str) -> Result<Vec<String>> {
    let items: Vec<String> = raw
        .lines()
        .map(strip_bullet)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if items.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorSet {
    pub class_name: String,
    pub sample_index: usize,
    pub descriptors: Vec<String>,
}

impl DescriptorSet {
    /// Cleans bullets and whitespace, drops repeated descriptors (first wins).
    pub fn new(
        class_name: impl Into<String>,
        sample_index: usize,
        descriptors: impl IntoIterator<Item = impl AsRef<str>>,
    ) -> Result<Self> {
        let class_name = class_name.into();
        let mut seen = BTreeSet::new();
        let mut cleaned = Vec::new();
        for d in descriptors {
            let d = strip_bullet(d.as_ref());
            if d.is_empty() {
                return Err(Error::InvalidData(format!(
                    "class `{class_name}` set {sample_index}: empty descriptor"
                )));
            }
            if seen.insert(d.to_string()) {
                cleaned.push(d.to_string());
            }
        }
        if cleaned.is_empty() {
            return Err(Error::InvalidData(format!(
                "class `{class_name}` set {sample_index}: no descriptors"
            )));
        }
        Ok(Self {
            class_name,
            sample_index,
            descriptors: cleaned,
        })
    }

    pub fn rendered(&self) -> Vec<String> {
        self.descriptors
            .iter()
            .map(|d| format!("{} which has {}", self.class_name, d))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorBank {
    n: usize,
    classes: BTreeMap<String, Vec<DescriptorSet>>,
}

impl DescriptorBank {
    pub fn new<S: AsRef<str>>(
        n: usize,
        classes: impl IntoIterator<Item = (String, Vec<Vec<S>>)>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("descriptor sets per class must be >= 1".into()));
        }
        let mut out = BTreeMap::new();
        for (name, sets) in classes {
            if name.trim().is_empty() {
                return Err(Error::InvalidData("empty class name".into()));
            }
            if sets.len() != n {
                return Err(Error::InvalidData(format!(
                    "class `{name}` has {} descriptor sets, expected {n}",
                    sets.len()
                )));
            }
            let sets = sets
                .into_iter()
                .enumerate()
                .map(|(i, d)| DescriptorSet::new(name.clone(), i, d))
                .collect::<Result<Vec<_>>>()?;
            if out.insert(name.clone(), sets).is_some() {
                return Err(Error::DuplicateId(name));
            }
        }
        Ok(Self { n, classes: out })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn sets(&self, class_name: &str) -> Result<&[DescriptorSet]> {
        self.classes
            .get(class_name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId(class_name.to_string()))
    }

    pub fn set(&self, class_name: &str, sample_index: usize) -> Result<&DescriptorSet> {
        self.sets(class_name)?.get(sample_index).ok_or_else(|| {
            Error::Parameter(format!(
                "class `{class_name}` has no descriptor set {sample_index}"
            ))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[DescriptorSet])> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let file: BankFile = serde_json::from_reader(reader)?;
        if file.version != BANK_VERSION {
            return Err(Error::parse(
                "descriptor bank",
                format!("unsupported version {}", file.version),
            ));
        }
        Self::new(file.n, file.classes.0)
    }

    pub fn to_writer<W: Write>(&self, mut writer: W) -> Result<()> {
        let classes: BTreeMap<&str, Vec<&Vec<String>>> = self
            .classes
            .iter()
            .map(|(k, sets)| (k.as_str(), sets.iter().map(|s| &s.descriptors).collect()))
            .collect();
        let file = BankFileRef {
            version: BANK_VERSION,
            n: self.n,
            classes,
        };
        serde_json::to_writer_pretty(&mut writer, &file)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Serialize)]
struct BankFileRef<'a> {
    version: u32,
    n: usize,
    classes: BTreeMap<&'a str, Vec<&'a Vec<String>>>,
}

#[derive(Deserialize)]
struct BankFile {
    version: u32,
    n: usize,
    classes: OrderedEntries,
}

/// JSON object entries in document order; duplicate keys are kept so the
/// bank constructor can reject them.
struct OrderedEntries(Vec<(String, Vec<Vec<String>>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping class names to descriptor sets")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry()? {
                    out.push(entry);
                }
                Ok(OrderedEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// Every text string the encoder must embed: bare class names, every rendered
/// descriptor of every sampled set, and every detected object name. Sorted and
/// deduplicated.
pub fn required_texts<S: AsRef<str>, O: AsRef<str>>(
    bank: &DescriptorBank,
    class_names: &[S],
    detected_objects: &[O],
) -> Vec<String> {
    let mut out: BTreeSet<String> = BTreeSet::new();
    out.extend(class_names.iter().map(|c| c.as_ref().to_string()));
    for (_, sets) in bank.iter() {
        for set in sets {
            out.extend(set.rendered());
        }
    }
    out.extend(detected_objects.iter().map(|o| o.as_ref().to_string()));
    out.into_iter().collect()
}

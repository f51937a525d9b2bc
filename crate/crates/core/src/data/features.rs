//! Per-modality feature stores and their two on-disk encodings.
//!
//! Text (TSV):
//!
//! ```text
//! #features v1 modality=item_text dim=3
//! m1<TAB>0.1,0.2,0.3
//! ```
//!
//! Binary: magic `FTv1`, little-endian `u32` dim, `u64` count, then `count`
//! entries of `u16` id length, UTF-8 id bytes and `dim` little-endian `f32`.
//! The binary encoding carries no modality tag; the caller supplies it.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use super::Modality;
use crate::error::{Error, Result};
use crate::numerics::DenseVector;

const BINARY_MAGIC: &[u8; 4] = b"FTv1";
const TEXT_MAGIC: &str = "#features";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureEncoding {
    Text,
    Binary,
}

impl FromStr for FeatureEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" | "text" => Ok(FeatureEncoding::Text),
            "bin" | "binary" => Ok(FeatureEncoding::Binary),
            other => Err(Error::InvalidArgument(format!("unknown feature encoding {other:?}"))),
        }
    }
}

/// Entity id → fixed-width vector for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    modality: Modality,
    dim: usize,
    vectors: BTreeMap<String, DenseVector>,
}

impl FeatureStore {
    pub fn new(modality: Modality, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::FeatureFormat("dim must be at least 1".into()));
        }
        Ok(FeatureStore {
            modality,
            dim,
            vectors: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, entity: &str, vector: DenseVector) -> Result<()> {
        let entity_err = |message: String| Error::FeatureEntity {
            entity: entity.to_owned(),
            message,
        };
        if entity.is_empty() {
            return Err(entity_err("empty entity id".into()));
        }
        if entity.len() > u16::MAX as usize {
            return Err(entity_err("entity id longer than 65535 bytes".into()));
        }
        if vector.len() != self.dim {
            return Err(entity_err(format!("expected {} values, found {}", self.dim, vector.len())));
        }
        if !vector.is_finite() {
            return Err(entity_err("non-finite value".into()));
        }
        if self.vectors.contains_key(entity) {
            return Err(entity_err("duplicate entity id".into()));
        }
        self.vectors.insert(entity.to_owned(), vector);
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, entity: &str) -> Option<&DenseVector> {
        self.vectors.get(entity)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Entries in ascending entity-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseVector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write<W: Write>(&self, encoding: FeatureEncoding, out: W) -> Result<()> {
        match encoding {
            FeatureEncoding::Text => self.write_text(out),
            FeatureEncoding::Binary => self.write_binary(out),
        }
    }

    fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<feature stream>", e);
        writeln!(out, "{TEXT_MAGIC} v1 modality={} dim={}", self.modality, self.dim).map_err(io)?;
        for (id, v) in &self.vectors {
            let values: Vec<String> = v.as_slice().iter().map(|x| x.to_string()).collect();
            writeln!(out, "{id}\t{}", values.join(",")).map_err(io)?;
        }
        Ok(())
    }

    /// Values are narrowed to `f32`; a value outside `f32` range is an error.
    fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.vectors.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(BINARY_MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.vectors.len() as u64).to_le_bytes());
        for (id, v) in &self.vectors {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for &x in v.as_slice() {
                let narrowed = x as f32;
                if !narrowed.is_finite() {
                    return Err(Error::FeatureEntity {
                        entity: id.clone(),
                        message: format!("value {x} does not fit in f32"),
                    });
                }
                buf.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(|e| Error::io("<feature stream>", e))
    }
}

/// Parses either encoding; binary is recognized by its magic bytes.
pub fn parse_feature_file<R: Read>(mut source: R, expected_modality: Modality) -> Result<FeatureStore> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<feature stream>", e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes, expected_modality)
    } else {
        parse_text(&bytes, expected_modality)
    }
}

fn parse_text(bytes: &[u8], expected: Modality) -> Result<FeatureStore> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::FeatureFormat("invalid UTF-8".into()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::FeatureFormat("empty file, expected header".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(TEXT_MAGIC) || tokens.next() != Some("v1") {
        return Err(Error::FeatureFormat(format!(
            "line 1: expected header '{TEXT_MAGIC} v1 modality=<tag> dim=<d>', found {header:?}"
        )));
    }
    let mut modality = None;
    let mut dim = None;
    for token in tokens {
        match token.split_once('=') {
            Some(("modality", tag)) => modality = Some(tag.parse::<Modality>()?),
            Some(("dim", d)) => {
                dim = Some(
                    d.parse::<usize>()
                        .map_err(|_| Error::FeatureFormat(format!("line 1: bad dim {d:?}")))?,
                )
            }
            _ => return Err(Error::FeatureFormat(format!("line 1: unexpected header token {token:?}"))),
        }
    }
    let modality = modality.ok_or_else(|| Error::FeatureFormat("line 1: header lacks modality=".into()))?;
    let dim = dim.ok_or_else(|| Error::FeatureFormat("line 1: header lacks dim=".into()))?;
    if modality != expected {
        return Err(Error::FeatureFormat(format!(
            "file holds {modality} features, expected {expected}"
        )));
    }

    let mut store = FeatureStore::new(modality, dim)?;
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, values) = line.split_once('\t').ok_or_else(|| {
            Error::FeatureFormat(format!("line {}: expected <entity_id>\\t<values>", i + 1))
        })?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::FeatureEntity {
                entity: id.to_owned(),
                message: format!("line {}: unparseable value", i + 1),
            })?;
        store.insert(id, DenseVector::new(values))?;
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::FeatureFormat(format!(
                "truncated binary file while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn parse_binary(bytes: &[u8], modality: Modality) -> Result<FeatureStore> {
    let mut cur = Cursor { bytes, pos: 4 };
    let dim = u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(cur.take(8, "count")?.try_into().unwrap());
    let mut store = FeatureStore::new(modality, dim)?;
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2, "id length")?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(cur.take(len, "id")?)
            .map_err(|_| Error::FeatureFormat("entity id is not UTF-8".into()))?;
        let raw = cur.take(dim * 4, "vector")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.insert(id, DenseVector::new(values))?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::FeatureFormat(format!(
            "{} trailing bytes after {count} entries",
            bytes.len() - cur.pos
        )));
    }
    Ok(store)
}

/// The feature stores available to a model, at most one per modality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub user_profile: Option<FeatureStore>,
    pub item_text: Option<FeatureStore>,
    pub item_image: Option<FeatureStore>,
}

impl FeatureSet {
    pub fn store(&self, modality: Modality) -> Option<&FeatureStore> {
        match modality {
            Modality::UserProfile => self.user_profile.as_ref(),
            Modality::ItemText => self.item_text.as_ref(),
            Modality::ItemImage => self.item_image.as_ref(),
        }
    }

    pub fn set(&mut self, store: FeatureStore) {
        match store.modality() {
            Modality::UserProfile => self.user_profile = Some(store),
            Modality::ItemText => self.item_text = Some(store),
            Modality::ItemImage => self.item_image = Some(store),
        }
    }

    pub fn vector(&self, modality: Modality, entity: &str) -> Option<&DenseVector> {
        self.store(modality).and_then(|s| s.get(entity))
    }
}

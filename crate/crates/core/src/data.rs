//! Image-feature files (MMFT), caption files (JSON Lines) and the aligned
//! training dataset built from them.
//!
//! MMFT layout, all integers little-endian:
//!
//! ```text
//! "MMFT" | u32 version = 1 | u32 record_count | u32 dim
//! record_count × ( u16 id_len | id bytes (UTF-8) | dim × f32 )
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::vocab::{normalize_text, Vocabulary};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMFT";
pub const FEATURE_VERSION: u32 = 1;

/// Output width of the last fully connected layer of VGG-16.
pub const DEFAULT_FEATURE_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dim: usize,
    pub features: BTreeMap<String, Vector>,
}

impl FeatureMap {
    pub fn new(dim: usize) -> Self {
        FeatureMap {
            dim,
            features: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Vector> {
        self.features.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vector) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("feature insert", self.dim, v.len()));
        }
        let id = id.into();
        if self.features.contains_key(&id) {
            return Err(Error::Data(format!("duplicate image id {id:?}")));
        }
        self.features.insert(id, v);
        Ok(())
    }
}

/// Writes an MMFT file. Values are narrowed to `f32`; records are written in
/// id order.
pub fn write_features(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features_to(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn write_features_to<W: Write>(w: &mut W, map: &FeatureMap) -> Result<()> {
    let count = u32::try_from(map.len()).map_err(|_| Error::Format("too many records".into()))?;
    let dim = u32::try_from(map.dim).map_err(|_| Error::Format("dim too large".into()))?;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for (id, v) in &map.features {
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Format(format!("image id too long: {id:?}")))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for &x in v.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut r = BufReader::new(File::open(path)?);
    read_features_from(&mut r)
}

pub fn read_features_from<R: Read>(r: &mut R) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature-file magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature-file version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let mut map = FeatureMap::new(dim);
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::Format("image id is not valid UTF-8".into()))?;
        r.read_exact(&mut buf)?;
        let v: Vector = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value for {id:?}")));
        }
        map.insert(id, v)?;
    }
    Ok(map)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// One line of a caption file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct CaptionEntry {
    pub id: String,
    pub captions: Vec<String>,
}

/// Reads a caption JSON Lines file without joining it to features. Blank
/// lines are skipped; duplicate ids are rejected.
pub fn read_caption_file(path: impl AsRef<Path>) -> Result<Vec<CaptionEntry>> {
    let r = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CaptionEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Data(format!(
                "image id {:?} repeated at line {}",
                entry.id,
                i + 1
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub feature: Vector,
    /// Encoded captions, each `<start> … <stop>`.
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDataset {
    pub records: Vec<CaptionRecord>,
    pub vocab: Vocabulary,
    pub feature_dim: usize,
}

impl CaptionDataset {
    /// Joins caption entries with their features and encodes them.
    pub fn from_entries(
        entries: &[CaptionEntry],
        vocab: &Vocabulary,
        features: &FeatureMap,
    ) -> Result<Self> {
        let mut records = Vec::with_capacity(entries.len());
        for e in entries {
            let feature = features.get(&e.id).ok_or_else(|| {
                Error::Data(format!("no image feature for caption id {:?}", e.id))
            })?;
            if e.captions.is_empty() {
                return Err(Error::Data(format!("image {:?} has no captions", e.id)));
            }
            let captions = e
                .captions
                .iter()
                .map(|c| vocab.encode(&normalize_text(c)))
                .collect();
            records.push(CaptionRecord {
                image_id: e.id.clone(),
                feature: feature.clone(),
                captions,
            });
        }
        let ds = CaptionDataset {
            records,
            vocab: vocab.clone(),
            feature_dim: features.dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vocab.len();
        for r in &self.records {
            if r.feature.len() != self.feature_dim {
                return Err(Error::shape("dataset feature", self.feature_dim, r.feature.len()));
            }
            for c in &r.captions {
                validate_caption(c, n)?;
            }
        }
        Ok(())
    }

    /// Total number of (image, caption) pairs.
    pub fn pair_count(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A caption must be `<start>`, words, `<stop>` with every index in range.
pub fn validate_caption(caption: &[usize], vocab_size: usize) -> Result<()> {
    if caption.len() < 2 {
        return Err(Error::Data(format!(
            "caption of length {} lacks start/stop markers",
            caption.len()
        )));
    }
    if caption[0] != Vocabulary::START_ID || caption[caption.len() - 1] != Vocabulary::STOP_ID {
        return Err(Error::Data("caption must begin with <start> and end with <stop>".into()));
    }
    if let Some(&bad) = caption.iter().find(|&&i| i >= vocab_size) {
        return Err(Error::Index {
            index: bad,
            size: vocab_size,
        });
    }
    Ok(())
}

/// Reads a caption file and joins it with `features`.
pub fn load_captions(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    features: &FeatureMap,
) -> Result<CaptionDataset> {
    let entries = read_caption_file(path)?;
    CaptionDataset::from_entries(&entries, vocab, features)
}

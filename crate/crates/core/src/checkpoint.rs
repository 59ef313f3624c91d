//! Versioned binary container for parameters, optimiser state and metadata.
//!
//! Layout (little-endian): magic `EGCK`, version u32, section count u32, then
//! per section a tag, a JSON metadata blob and named `f64` arrays; a CRC32 of
//! everything before it closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use egic_tensor::{Array, ParamStore};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"EGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: BTreeMap<String, Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: &str, meta: &impl Serialize, params: ParamStore) -> Result<()> {
        self.sections.insert(
            tag.to_owned(),
            Section {
                meta: serde_json::to_value(meta)?,
                params,
            },
        );
        Ok(())
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.sections.contains_key(tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = &String> {
        self.sections.keys()
    }

    pub fn section(&self, tag: &str) -> Result<&Section> {
        self.sections
            .get(tag)
            .ok_or_else(|| Error::MissingPrerequisite(format!("checkpoint has no `{tag}` section")))
    }

    pub fn params(&self, tag: &str) -> Result<&ParamStore> {
        Ok(&self.section(tag)?.params)
    }

    pub fn meta<T: DeserializeOwned>(&self, tag: &str) -> Result<T> {
        Ok(serde_json::from_value(self.section(tag)?.meta.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, section) in &self.sections {
            put_bytes(&mut out, tag.as_bytes());
            let meta = serde_json::to_vec(&section.meta).expect("JSON values always serialise");
            put_bytes(&mut out, &meta);
            out.extend_from_slice(&(section.params.len() as u32).to_le_bytes());
            for (name, value) in section.params.iter() {
                put_bytes(&mut out, name.as_bytes());
                out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
                for &d in value.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Corrupt(format!("checkpoint: {what}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { data: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let mut sections = BTreeMap::new();
        for _ in 0..r.u32()? {
            let tag = r.string()?;
            let meta = serde_json::from_slice(r.bytes()?)?;
            let mut params = ParamStore::new();
            for _ in 0..r.u32()? {
                let name = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("array too large"))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                params.insert(name, Array::new(shape, data));
            }
            sections.insert(tag, Section { meta, params });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { sections })
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Corrupt("checkpoint: truncated".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Corrupt("checkpoint: invalid UTF-8 name".into()))
    }
}

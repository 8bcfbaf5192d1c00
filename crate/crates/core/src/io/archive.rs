//! Named-tensor archives (`.ntar`).
//!
//! ```text
//! "NTAR" | version u16 | entry count u32
//! | per entry: name (u16 len, UTF-8) | dtype u8 | flags u8 | ndim u8
//! |            dims u64 x ndim | row-major little-endian payload
//! | metadata: u32 len | JSON object of string pairs
//! ```
//!
//! Entries are kept sorted by name, so equal archives serialize to equal
//! bytes. Writes go to a temporary sibling file that is renamed into place.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bitstream::reader::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTAR";
pub const VERSION: u16 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Role flags of an archived tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TensorFlags {
    pub frozen: bool,
    pub trainable: bool,
    pub transmitted: bool,
}

impl TensorFlags {
    pub const FROZEN: Self = Self {
        frozen: true,
        trainable: false,
        transmitted: false,
    };
    pub const TRAINABLE: Self = Self {
        frozen: false,
        trainable: true,
        transmitted: false,
    };
    pub const TRANSMITTED: Self = Self {
        frozen: false,
        trainable: true,
        transmitted: true,
    };

    fn bits(self) -> u8 {
        self.frozen as u8 | (self.trainable as u8) << 1 | (self.transmitted as u8) << 2
    }

    fn from_bits(b: u8) -> Self {
        Self {
            frozen: b & 1 != 0,
            trainable: b & 2 != 0,
            transmitted: b & 4 != 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub dtype: DType,
    pub flags: TensorFlags,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorArchive {
    pub entries: BTreeMap<String, ArchiveEntry>,
    pub meta: BTreeMap<String, String>,
}

/// One manifest line: name, shape, and flags.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ManifestRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub trainable: bool,
    pub transmitted: bool,
}

impl NamedTensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, flags: TensorFlags) {
        self.entries.insert(
            name.into(),
            ArchiveEntry {
                dtype: DType::F64,
                flags,
                tensor,
            },
        );
    }

    pub fn insert_all(
        &mut self,
        prefix: &str,
        tensors: &BTreeMap<String, Tensor>,
        flags: TensorFlags,
    ) {
        for (k, t) in tensors {
            self.insert(format!("{prefix}{k}"), t.clone(), flags);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .filter_map(|(k, e)| {
                k.strip_prefix(prefix)
                    .map(|s| (s.to_string(), e.tensor.clone()))
            })
            .collect()
    }

    pub fn manifest(&self) -> Vec<ManifestRow> {
        self.entries
            .iter()
            .map(|(name, e)| ManifestRow {
                name: name.clone(),
                shape: e.tensor.shape().to_vec(),
                frozen: e.flags.frozen,
                trainable: e.flags.trainable,
                transmitted: e.flags.transmitted,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.entries.len() as u32);
        for (name, e) in &self.entries {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(e.dtype as u8);
            w.u8(e.flags.bits());
            w.u8(e.tensor.ndim() as u8);
            for &d in e.tensor.shape() {
                w.u64(d as u64);
            }
            match e.dtype {
                DType::F32 => e.tensor.data().iter().for_each(|&v| w.f32(v as f32)),
                DType::F64 => e.tensor.data().iter().for_each(|&v| w.f64(v)),
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("string map serializes");
        w.blob(&meta);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Load(format!("archive: {m}"));
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut r = ByteReader::new(&bytes[4..]);
        let parse = |e: crate::bitstream::ContainerError| bad(e.to_string());
        let version = r.u16("version").map_err(parse)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32("entry count").map_err(parse)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16("name").map_err(parse)? as usize;
            let name = String::from_utf8(r.bytes(n, "name").map_err(parse)?.to_vec())
                .map_err(|_| bad("name is not UTF-8".into()))?;
            let dtype = match r.u8("dtype").map_err(parse)? {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(bad(format!("unknown dtype {d} for {name}"))),
            };
            let flags = TensorFlags::from_bits(r.u8("flags").map_err(parse)?);
            let ndim = r.u8("ndim").map_err(parse)? as usize;
            if ndim > MAX_NDIM {
                return Err(bad(format!("{name} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: u64 = 1;
            for _ in 0..ndim {
                let d = r.u64("dims").map_err(parse)?;
                numel = numel.saturating_mul(d);
                shape.push(d as usize);
            }
            let width = if dtype == DType::F32 { 4 } else { 8 };
            if numel.saturating_mul(width) > r.remaining() as u64 {
                return Err(bad(format!("{name} payload exceeds archive size")));
            }
            let raw = r
                .bytes(numel as usize * width as usize, "payload")
                .map_err(parse)?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if entries
                .insert(
                    name.clone(),
                    ArchiveEntry {
                        dtype,
                        flags,
                        tensor: Tensor::new(&shape, data),
                    },
                )
                .is_some()
            {
                return Err(bad(format!("duplicate entry {name}")));
            }
        }
        let meta_raw = r.blob("metadata").map_err(parse)?;
        let meta: BTreeMap<String, String> =
            serde_json::from_slice(meta_raw).map_err(|e| bad(format!("metadata: {e}")))?;
        if !r.is_empty() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self { entries, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to `path.tmp` and renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

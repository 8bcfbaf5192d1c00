//! The `.nrfc` container.
//!
//! ```text
//! "NRFC" | version u16 | backbone digest [32] | plane count u8
//! | per plane (channels, height, width) u16 x3
//! | latent channels u16 | hyper channels u16 | appearance dim u16
//! | substream count u8 | substreams: (id u8, length u32, bytes)
//! ```
//!
//! Substreams appear in ascending id order, each at most once.

use super::reader::{ByteReader, ByteWriter};
use super::ContainerError;

pub const MAGIC: &[u8; 4] = b"NRFC";
pub const VERSION: u16 = 1;
pub const MAX_PLANES: usize = 6;
/// Framing bytes per substream: id and length.
pub const SUBSTREAM_OVERHEAD: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubstreamId {
    LatentY(u8),
    LatentZ(u8),
    DecoderHead,
    Mlp,
    ResidualVectors,
    AxisVectors,
    Priors,
    SideInfo,
}

impl SubstreamId {
    pub fn code(self) -> u8 {
        match self {
            SubstreamId::LatentY(k) => 0x10 + k,
            SubstreamId::LatentZ(k) => 0x20 + k,
            SubstreamId::DecoderHead => 0x30,
            SubstreamId::Mlp => 0x31,
            SubstreamId::ResidualVectors => 0x32,
            SubstreamId::AxisVectors => 0x33,
            SubstreamId::Priors => 0x34,
            SubstreamId::SideInfo => 0x35,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        let k = code & 0x0F;
        match code {
            0x10..=0x15 => Some(SubstreamId::LatentY(k)),
            0x20..=0x25 => Some(SubstreamId::LatentZ(k)),
            0x30 => Some(SubstreamId::DecoderHead),
            0x31 => Some(SubstreamId::Mlp),
            0x32 => Some(SubstreamId::ResidualVectors),
            0x33 => Some(SubstreamId::AxisVectors),
            0x34 => Some(SubstreamId::Priors),
            0x35 => Some(SubstreamId::SideInfo),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            SubstreamId::LatentY(k) => format!("latent_y[{k}]"),
            SubstreamId::LatentZ(k) => format!("latent_z[{k}]"),
            SubstreamId::DecoderHead => "decoder_head".into(),
            SubstreamId::Mlp => "mlp".into(),
            SubstreamId::ResidualVectors => "residual_vectors".into(),
            SubstreamId::AxisVectors => "axis_vectors".into(),
            SubstreamId::Priors => "priors".into(),
            SubstreamId::SideInfo => "side_info".into(),
        }
    }

    /// Full substream set for a scene with `planes` planes, in order.
    pub fn scene_set(planes: usize) -> Vec<Self> {
        let mut ids: Vec<Self> = (0..planes as u8).map(SubstreamId::LatentY).collect();
        ids.extend((0..planes as u8).map(SubstreamId::LatentZ));
        ids.extend([
            SubstreamId::DecoderHead,
            SubstreamId::Mlp,
            SubstreamId::ResidualVectors,
            SubstreamId::AxisVectors,
            SubstreamId::Priors,
            SubstreamId::SideInfo,
        ]);
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlaneShape {
    pub channels: u16,
    pub height: u16,
    pub width: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u16,
    pub digest: [u8; 32],
    pub planes: Vec<PlaneShape>,
    pub latent_channels: u16,
    pub hyper_channels: u16,
    pub appearance_dim: u16,
}

impl ContainerHeader {
    /// Serialized size including the substream count byte.
    pub fn encoded_len(&self) -> usize {
        4 + 2 + 32 + 1 + 6 * self.planes.len() + 6 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Substream {
    pub id: SubstreamId,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneContainer {
    pub header: ContainerHeader,
    pub substreams: Vec<Substream>,
}

impl SceneContainer {
    pub fn get(&self, id: SubstreamId) -> Option<&[u8]> {
        self.substreams
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.bytes.as_slice())
    }

    pub fn require(&self, id: SubstreamId) -> Result<&[u8], ContainerError> {
        self.get(id)
            .ok_or_else(|| ContainerError::MissingSubstream(id.name()))
    }

    pub fn encoded_len(&self) -> usize {
        self.header.encoded_len()
            + self
                .substreams
                .iter()
                .map(|s| SUBSTREAM_OVERHEAD + s.bytes.len())
                .sum::<usize>()
    }

    /// Multiplexes header and substreams; substreams must already be in
    /// normative order.
    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let h = &self.header;
        if h.planes.len() > MAX_PLANES {
            return Err(ContainerError::InvalidHeader(format!(
                "{} planes",
                h.planes.len()
            )));
        }
        if self.substreams.len() > u8::MAX as usize {
            return Err(ContainerError::InvalidHeader("too many substreams".into()));
        }
        check_order(self.substreams.iter().map(|s| s.id))?;
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(h.version);
        w.bytes(&h.digest);
        w.u8(h.planes.len() as u8);
        for p in &h.planes {
            w.u16(p.channels);
            w.u16(p.height);
            w.u16(p.width);
        }
        w.u16(h.latent_channels);
        w.u16(h.hyper_channels);
        w.u16(h.appearance_dim);
        w.u8(self.substreams.len() as u8);
        for s in &self.substreams {
            let len = u32::try_from(s.bytes.len()).map_err(|_| {
                ContainerError::InvalidHeader(format!("{} exceeds 4 GiB", s.id.name()))
            })?;
            w.u8(s.id.code());
            w.u32(len);
            w.bytes(&s.bytes);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = ByteReader::new(bytes);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        r.bytes(4, "magic")?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.bytes(32, "digest")?);
        let n_planes = r.u8("plane count")? as usize;
        if n_planes > MAX_PLANES {
            return Err(ContainerError::InvalidHeader(format!("{n_planes} planes")));
        }
        let mut planes = Vec::with_capacity(n_planes);
        for _ in 0..n_planes {
            let channels = r.u16("plane shape")?;
            let height = r.u16("plane shape")?;
            let width = r.u16("plane shape")?;
            if channels == 0 || height < 2 || width < 2 {
                return Err(ContainerError::InvalidHeader(format!(
                    "plane shape {channels}x{height}x{width}"
                )));
            }
            planes.push(PlaneShape {
                channels,
                height,
                width,
            });
        }
        let latent_channels = r.u16("latent channels")?;
        let hyper_channels = r.u16("hyper channels")?;
        let appearance_dim = r.u16("appearance dim")?;
        let count = r.u8("substream count")? as usize;
        let mut substreams = Vec::with_capacity(count);
        let mut last: Option<SubstreamId> = None;
        for _ in 0..count {
            let offset = r.position();
            let code = r.u8("substream id")?;
            let id = SubstreamId::from_code(code)
                .ok_or(ContainerError::UnknownSubstream { id: code, offset })?;
            let len = r.u32("substream length")? as usize;
            if len > r.remaining() {
                return Err(ContainerError::LengthOverrun {
                    id: code,
                    declared: len,
                    available: r.remaining(),
                });
            }
            if let Some(prev) = last {
                if prev == id {
                    return Err(ContainerError::Duplicate { id: code });
                }
                if prev > id {
                    return Err(ContainerError::OutOfOrder { id: code });
                }
            }
            last = Some(id);
            substreams.push(Substream {
                id,
                bytes: r.bytes(len, "substream payload")?.to_vec(),
            });
        }
        if !r.is_empty() {
            return Err(ContainerError::TrailingBytes {
                count: r.remaining(),
            });
        }
        let header = ContainerHeader {
            version,
            digest,
            planes,
            latent_channels,
            hyper_channels,
            appearance_dim,
        };
        Ok(Self { header, substreams })
    }
}

fn check_order(ids: impl Iterator<Item = SubstreamId>) -> Result<(), ContainerError> {
    let mut last: Option<SubstreamId> = None;
    for id in ids {
        if let Some(prev) = last {
            if prev == id {
                return Err(ContainerError::Duplicate { id: id.code() });
            }
            if prev > id {
                return Err(ContainerError::OutOfOrder { id: id.code() });
            }
        }
        last = Some(id);
    }
    Ok(())
}

//! Memory accounting of a container by substream and component group.

use serde::Serialize;

use super::container::{SceneContainer, SubstreamId, SUBSTREAM_OVERHEAD};

/// Uncompressed float32 sizes that each group replaces.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct UncompressedSizes {
    pub planes: u64,
    pub decoder_head: u64,
    pub mlp: u64,
    pub residual: u64,
    pub side_info: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BreakdownRow {
    pub substream: String,
    pub group: &'static str,
    /// Payload plus the 5 framing bytes.
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupRow {
    pub group: &'static str,
    pub bytes: u64,
    pub original_bytes: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryBreakdown {
    pub container_bytes: u64,
    pub header_bytes: u64,
    pub rows: Vec<BreakdownRow>,
    pub groups: Vec<GroupRow>,
    /// Raw float32 plane bytes over latent (y and z) bytes.
    pub plane_ratio: f64,
}

pub fn group_of(id: SubstreamId) -> &'static str {
    match id {
        SubstreamId::LatentY(_) | SubstreamId::LatentZ(_) => "planes",
        SubstreamId::DecoderHead => "decoder_head",
        SubstreamId::Mlp => "mlp",
        SubstreamId::ResidualVectors => "residual",
        SubstreamId::AxisVectors | SubstreamId::Priors | SubstreamId::SideInfo => "side_info",
    }
}

fn ratio(original: u64, coded: u64) -> f64 {
    if coded == 0 {
        0.0
    } else {
        original as f64 / coded as f64
    }
}

pub fn memory_breakdown(container: &SceneContainer, sizes: &UncompressedSizes) -> MemoryBreakdown {
    let rows: Vec<BreakdownRow> = container
        .substreams
        .iter()
        .map(|s| BreakdownRow {
            substream: s.id.name(),
            group: group_of(s.id),
            bytes: (SUBSTREAM_OVERHEAD + s.bytes.len()) as u64,
        })
        .collect();
    let originals = [
        ("planes", sizes.planes),
        ("decoder_head", sizes.decoder_head),
        ("mlp", sizes.mlp),
        ("residual", sizes.residual),
        ("side_info", sizes.side_info),
    ];
    let groups: Vec<GroupRow> = originals
        .iter()
        .map(|&(group, original_bytes)| {
            let bytes = rows
                .iter()
                .filter(|r| r.group == group)
                .map(|r| r.bytes)
                .sum();
            GroupRow {
                group,
                bytes,
                original_bytes,
                ratio: ratio(original_bytes, bytes),
            }
        })
        .collect();
    let latent_bytes: u64 = container
        .substreams
        .iter()
        .filter(|s| matches!(s.id, SubstreamId::LatentY(_) | SubstreamId::LatentZ(_)))
        .map(|s| s.bytes.len() as u64)
        .sum();
    MemoryBreakdown {
        container_bytes: container.encoded_len() as u64,
        header_bytes: container.header.encoded_len() as u64,
        rows,
        groups,
        plane_ratio: ratio(sizes.planes, latent_bytes),
    }
}

/// Raw float32 bytes of planes with `(channels, height, width)` shapes.
pub fn raw_plane_bytes(shapes: impl IntoIterator<Item = (usize, usize, usize)>) -> u64 {
    shapes
        .into_iter()
        .map(|(c, h, w)| (c * h * w * 4) as u64)
        .sum()
}

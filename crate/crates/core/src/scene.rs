//! Whole-scene compression: a trained field plus its codecs, to and from a
//! `.nrfc` container.
//!
//! Encoding runs in two steps. [`analyze`] evaluates the encoders and
//! produces a [`ScenePayload`]: integer latent symbols plus quantized
//! parameter records. [`pack`] entropy codes the payload. Decoding mirrors
//! that with [`unpack`] and [`reconstruct`]. Because the payload is what the
//! container carries, `pack(unpack(c)) == c` byte for byte.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::bitstream::breakdown::{
    memory_breakdown, raw_plane_bytes, MemoryBreakdown, UncompressedSizes,
};
use crate::bitstream::container::{
    ContainerHeader, PlaneShape, SceneContainer, Substream, SubstreamId, VERSION,
};
use crate::bitstream::range_coder::{decode_symbols, encode_symbols};
use crate::bitstream::reader::{ByteReader, ByteWriter};
use crate::bitstream::weights::{
    dequantize_weights, quantize_weights, read_records, write_records, QuantizedTensorRecord,
};
use crate::bitstream::ContainerError;
use crate::codec::backbone::{frozen_digest, BackboneCheckpoint};
use crate::codec::entropy::{
    gaussian_contexts, hyper_contexts, hyper_symbols, latent_symbols, prior_tables,
};
use crate::codec::{
    self, bind_constants, hyper_shape, latent_shape, padded_size, CodecArch, CodecParams,
    ParamGroup, QuantMode,
};
use crate::error::{Error, Result};
use crate::plane_field::{plane_slot, Aabb, Attribute, PlaneFieldParams, ResidualCompensation};
use crate::renderer::RenderSettings;
use crate::tensor::Tensor;

pub const DEFAULT_WEIGHT_BITS: u8 = 8;
pub const PLANE_COUNT: usize = 6;

/// Everything the sender holds after training.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub field: PlaneFieldParams,
    pub compensation: ResidualCompensation,
    /// Full codec parameters, density group first.
    pub codecs: [CodecParams; 2],
    /// Free latents per plane slot when trained as an auto-decoder.
    pub latents: Option<Vec<Tensor>>,
    pub render: RenderSettings,
}

impl SceneModel {
    pub fn codec(&self, attr: Attribute) -> &CodecParams {
        &self.codecs[attr as usize]
    }

    pub fn plane_shapes(&self) -> Vec<PlaneShape> {
        self.field
            .all_planes()
            .iter()
            .map(|p| PlaneShape {
                channels: p.channels() as u16,
                height: p.height() as u16,
                width: p.width() as u16,
            })
            .collect()
    }
}

/// Name of every transmitted tensor, grouped by the substream carrying it.
pub fn transmitted_tensors(model: &SceneModel) -> BTreeMap<SubstreamId, BTreeMap<String, Tensor>> {
    let mut out: BTreeMap<SubstreamId, BTreeMap<String, Tensor>> = BTreeMap::new();
    for attr in Attribute::ALL {
        for (k, t) in model.codec(attr) {
            let id = match ParamGroup::of(k) {
                Some(ParamGroup::DecoderHead) => SubstreamId::DecoderHead,
                Some(ParamGroup::Prior) => SubstreamId::Priors,
                _ => continue,
            };
            out.entry(id)
                .or_default()
                .insert(format!("{}.{k}", attr.name()), t.clone());
        }
    }
    for (k, t) in model.field.to_tensors() {
        let id = if k.starts_with("mlp.") || k == "appearance.basis" {
            SubstreamId::Mlp
        } else if k.contains(".vector.") {
            SubstreamId::AxisVectors
        } else {
            continue;
        };
        out.entry(id).or_default().insert(k, t);
    }
    let residual = out.entry(SubstreamId::ResidualVectors).or_default();
    for (k, (vi, vj)) in model.compensation.pairs.iter().enumerate() {
        residual.insert(format!("residual.{k}.rows"), vi.clone());
        residual.insert(format!("residual.{k}.cols"), vj.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideInfo {
    pub bbox: Aabb,
    pub n_samples: u32,
    pub background: [f64; 3],
}

impl SideInfo {
    fn write(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.bbox
            .min
            .iter()
            .chain(&self.bbox.max)
            .for_each(|&v| w.f64(v));
        w.u32(self.n_samples);
        self.background.iter().for_each(|&v| w.f64(v));
        w.into_inner()
    }

    fn read(bytes: &[u8]) -> std::result::Result<Self, ContainerError> {
        let mut r = ByteReader::new(bytes);
        let mut v = [0.0; 6];
        for x in v.iter_mut() {
            *x = r.f64("bbox")?;
        }
        let n_samples = r.u32("sample count")?;
        let mut background = [0.0; 3];
        for x in background.iter_mut() {
            *x = r.f64("background")?;
        }
        r.finish("side info")?;
        let bbox = Aabb {
            min: [v[0], v[1], v[2]],
            max: [v[3], v[4], v[5]],
        };
        let valid = (0..3).all(|k| bbox.min[k] < bbox.max[k])
            && v.iter().chain(&background).all(|x| x.is_finite());
        if !valid || n_samples < 2 {
            return Err(ContainerError::Malformed {
                what: "side info".into(),
                detail: "invalid box or sample count".into(),
            });
        }
        Ok(Self {
            bbox,
            n_samples,
            background,
        })
    }
}

/// Contents of a container before entropy coding of the latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePayload {
    pub header: ContainerHeader,
    pub side: SideInfo,
    /// `round(y - mu)` per plane slot.
    pub y_symbols: Vec<Vec<i32>>,
    /// `round(z)` per plane slot.
    pub z_symbols: Vec<Vec<i32>>,
    pub records: BTreeMap<SubstreamId, Vec<QuantizedTensorRecord>>,
}

/// Rate-model estimate for one plane, in bits.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct PlaneEstimate {
    pub bits_y: f64,
    pub bits_z: f64,
}

fn check_frozen(
    arch: &CodecArch,
    params: &CodecParams,
    backbone: &BackboneCheckpoint,
) -> Result<()> {
    let actual = frozen_digest(arch, params);
    let expected = backbone.digest();
    if actual != expected {
        return Err(Error::DigestMismatch {
            expected: hex::encode(expected),
            actual: hex::encode(actual),
        });
    }
    Ok(())
}

fn codec_arch(backbone: &BackboneCheckpoint, params: &CodecParams) -> Result<CodecArch> {
    let w = params
        .get("dec.3.weight")
        .ok_or_else(|| Error::Config("codec lacks a decoder head".into()))?;
    Ok(backbone.arch.with_channels(w.shape()[1]))
}

/// Runs the encoders and quantizes everything the container carries.
pub fn analyze(
    model: &SceneModel,
    backbone: &BackboneCheckpoint,
    weight_bits: u8,
) -> Result<(ScenePayload, Vec<PlaneEstimate>)> {
    model.field.validate()?;
    model.render.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut y_symbols = Vec::with_capacity(PLANE_COUNT);
    let mut z_symbols = Vec::with_capacity(PLANE_COUNT);
    let mut estimates = Vec::with_capacity(PLANE_COUNT);
    for attr in Attribute::ALL {
        let arch = codec_arch(backbone, model.codec(attr))?;
        check_frozen(&arch, model.codec(attr), backbone)?;
    }
    for (k, plane) in model.field.all_planes().into_iter().enumerate() {
        let (attr, _) = plane_slot(k);
        let params = model.codec(attr);
        let mut g = Graph::no_grad();
        let p = bind_constants(&mut g, params);
        let (h, w) = (plane.height(), plane.width());
        let code = match &model.latents {
            Some(lat) => {
                let y = g.constant(lat[k].clone());
                codec::code_latent(&mut g, &p, y, (h, w), QuantMode::MeanRound, &mut rng)
            }
            None => {
                let x = g.constant(plane.values.clone());
                codec::code_plane(&mut g, &p, x, QuantMode::MeanRound, &mut rng)
            }
        };
        y_symbols.push(latent_symbols(g.value(code.y), g.value(code.means)));
        z_symbols.push(hyper_symbols(g.value(code.z)));
        estimates.push(PlaneEstimate {
            bits_y: g.value(code.bits_y).data()[0],
            bits_z: g.value(code.bits_z).data()[0],
        });
    }
    let mut records = BTreeMap::new();
    for (id, tensors) in transmitted_tensors(model) {
        let recs = tensors
            .iter()
            .map(|(name, t)| quantize_weights(name, t, weight_bits))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        records.insert(id, recs);
    }
    let header = ContainerHeader {
        version: VERSION,
        digest: backbone.digest(),
        planes: model.plane_shapes(),
        latent_channels: backbone.arch.m as u16,
        hyper_channels: backbone.arch.nz as u16,
        appearance_dim: model.field.appearance_dim() as u16,
    };
    let side = SideInfo {
        bbox: model.field.bbox,
        n_samples: model.render.n_samples as u32,
        background: model.render.background,
    };
    Ok((
        ScenePayload {
            header,
            side,
            y_symbols,
            z_symbols,
            records,
        },
        estimates,
    ))
}

/// Dequantized records of one attribute group from a substream, with the
/// group prefix stripped.
fn group_tensors(records: &[QuantizedTensorRecord], attr: Attribute) -> Result<CodecParams> {
    let prefix = format!("{}.", attr.name());
    let mut out = CodecParams::new();
    for r in records {
        if let Some(name) = r.name.strip_prefix(&prefix) {
            out.insert(name.to_string(), dequantize_weights(r)?);
        }
    }
    Ok(out)
}

fn records_of(payload: &ScenePayload, id: SubstreamId) -> Result<&[QuantizedTensorRecord]> {
    payload
        .records
        .get(&id)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Container(ContainerError::MissingSubstream(id.name())))
}

/// Latent means and scales for a quantized hyper-latent.
fn hyper_decode(backbone: &BackboneCheckpoint, z_hat: Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::no_grad();
    let hyper: CodecParams = backbone
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("hdec."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let p = bind_constants(&mut g, &hyper);
    let z = g.constant(z_hat);
    let (mu, sigma) = codec::hyper_synthesis(&mut g, &p, z);
    (g.value(mu).clone(), g.value(sigma).clone())
}

fn symbols_tensor(symbols: &[i32], shape: &[usize]) -> Tensor {
    Tensor::new(shape, symbols.iter().map(|&s| s as f64).collect())
}

fn check_header(header: &ContainerHeader, backbone: &BackboneCheckpoint) -> Result<()> {
    let expected = backbone.digest();
    if header.digest != expected {
        return Err(Error::DigestMismatch {
            expected: hex::encode(expected),
            actual: hex::encode(header.digest),
        });
    }
    if header.planes.len() != PLANE_COUNT {
        return Err(Error::Container(ContainerError::InvalidHeader(format!(
            "{} planes, expected 6",
            header.planes.len()
        ))));
    }
    if header.latent_channels as usize != backbone.arch.m
        || header.hyper_channels as usize != backbone.arch.nz
    {
        return Err(Error::Container(ContainerError::InvalidHeader(format!(
            "latent sizes {}/{} do not match the backbone ({}/{})",
            header.latent_channels, header.hyper_channels, backbone.arch.m, backbone.arch.nz
        ))));
    }
    for p in &header.planes {
        if p.channels == 0 || p.height < 2 || p.width < 2 {
            return Err(Error::Container(ContainerError::InvalidHeader(format!(
                "degenerate plane {p:?}"
            ))));
        }
    }
    // Every axis resolution shows up in four planes and channels repeat
    // within an attribute, so a corrupted shape never goes unnoticed.
    fn agree(slot: &mut Option<u16>, value: u16) -> bool {
        *slot.get_or_insert(value) == value
    }
    let mut res = [None; 3];
    let mut channels = [None; 2];
    for (k, p) in header.planes.iter().enumerate() {
        let (attr, axes) = plane_slot(k);
        let (u, v) = axes.axes();
        if !(agree(&mut res[u.index()], p.width)
            && agree(&mut res[v.index()], p.height)
            && agree(&mut channels[attr as usize], p.channels))
        {
            return Err(Error::Container(ContainerError::InvalidHeader(
                "plane shapes disagree on a shared axis or channel count".into(),
            )));
        }
    }
    Ok(())
}

/// Entropy codes a payload into a container.
pub fn pack(payload: &ScenePayload, backbone: &BackboneCheckpoint) -> Result<SceneContainer> {
    check_header(&payload.header, backbone)?;
    let arch = backbone.arch;
    let priors = records_of(payload, SubstreamId::Priors)?;
    let mut substreams = Vec::new();
    let mut z_streams = Vec::new();
    for (k, shape) in payload.header.planes.iter().enumerate() {
        let (attr, _) = plane_slot(k);
        let (h, w) = (shape.height as usize, shape.width as usize);
        let zs = hyper_shape(&arch, h, w);
        let tables = prior_tables(&group_tensors(priors, attr)?, arch.nz)?;
        let z_sym = &payload.z_symbols[k];
        z_streams.push(encode_symbols(z_sym, &tables, &hyper_contexts(&zs))?);
        let (_, sigma) = hyper_decode(backbone, symbols_tensor(z_sym, &zs));
        let (ytables, ctx) = gaussian_contexts(&sigma)?;
        substreams.push(Substream {
            id: SubstreamId::LatentY(k as u8),
            bytes: encode_symbols(&payload.y_symbols[k], &ytables, &ctx)?,
        });
    }
    for (k, bytes) in z_streams.into_iter().enumerate() {
        substreams.push(Substream {
            id: SubstreamId::LatentZ(k as u8),
            bytes,
        });
    }
    for id in [
        SubstreamId::DecoderHead,
        SubstreamId::Mlp,
        SubstreamId::ResidualVectors,
        SubstreamId::AxisVectors,
        SubstreamId::Priors,
    ] {
        substreams.push(Substream {
            id,
            bytes: write_records(records_of(payload, id)?),
        });
    }
    substreams.push(Substream {
        id: SubstreamId::SideInfo,
        bytes: payload.side.write(),
    });
    substreams.sort_by_key(|s| s.id);
    Ok(SceneContainer {
        header: payload.header.clone(),
        substreams,
    })
}

/// Entropy decodes a container. Refuses containers made for another
/// backbone before touching any substream.
pub fn unpack(container: &SceneContainer, backbone: &BackboneCheckpoint) -> Result<ScenePayload> {
    let header = &container.header;
    check_header(header, backbone)?;
    let arch = backbone.arch;
    let mut records = BTreeMap::new();
    for id in [
        SubstreamId::DecoderHead,
        SubstreamId::Mlp,
        SubstreamId::ResidualVectors,
        SubstreamId::AxisVectors,
        SubstreamId::Priors,
    ] {
        records.insert(id, read_records(container.require(id)?)?);
    }
    let side = SideInfo::read(container.require(SubstreamId::SideInfo)?)?;
    let priors = &records[&SubstreamId::Priors];
    let mut y_symbols = Vec::new();
    let mut z_symbols = Vec::new();
    for (k, shape) in header.planes.iter().enumerate() {
        let (attr, _) = plane_slot(k);
        let (h, w) = (shape.height as usize, shape.width as usize);
        let zs = hyper_shape(&arch, h, w);
        let prior = group_tensors(priors, attr)?;
        check_prior_shapes(&prior, &arch, attr)?;
        let tables = prior_tables(&prior, arch.nz)?;
        let z_sym = decode_symbols(
            container.require(SubstreamId::LatentZ(k as u8))?,
            &tables,
            &hyper_contexts(&zs),
        )?;
        let (_, sigma) = hyper_decode(backbone, symbols_tensor(&z_sym, &zs));
        let (ytables, ctx) = gaussian_contexts(&sigma)?;
        y_symbols.push(decode_symbols(
            container.require(SubstreamId::LatentY(k as u8))?,
            &ytables,
            &ctx,
        )?);
        z_symbols.push(z_sym);
    }
    Ok(ScenePayload {
        header: header.clone(),
        side,
        y_symbols,
        z_symbols,
        records,
    })
}

fn check_prior_shapes(prior: &CodecParams, arch: &CodecArch, attr: Attribute) -> Result<()> {
    for (name, shape) in arch
        .param_shapes()
        .into_iter()
        .filter(|(n, _)| n.starts_with("prior."))
    {
        match prior.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            _ => {
                return Err(Error::Container(ContainerError::Malformed {
                    what: "priors".into(),
                    detail: format!("{}.{name} missing or misshapen", attr.name()),
                }))
            }
        }
    }
    Ok(())
}

/// What a receiver ends up with.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedScene {
    pub field: PlaneFieldParams,
    pub compensation: ResidualCompensation,
    pub render: RenderSettings,
    /// Decoded planes before compensation, slot order.
    pub planes: Vec<Tensor>,
}

/// Decoder-side parameters of one group: frozen backbone plus the
/// transmitted head.
fn decoder_params(backbone: &BackboneCheckpoint, heads: CodecParams) -> CodecParams {
    let mut p: CodecParams = backbone
        .params
        .iter()
        .filter(|(k, _)| ParamGroup::of(k) == Some(ParamGroup::DecoderBackbone))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    p.extend(heads);
    p
}

/// Synthesizes planes and assembles the field.
pub fn reconstruct(payload: &ScenePayload, backbone: &BackboneCheckpoint) -> Result<DecodedScene> {
    check_header(&payload.header, backbone)?;
    let arch = backbone.arch;
    let heads = records_of(payload, SubstreamId::DecoderHead)?;
    let mut planes = Vec::with_capacity(PLANE_COUNT);
    for (k, shape) in payload.header.planes.iter().enumerate() {
        let (attr, _) = plane_slot(k);
        let (c, h, w) = (
            shape.channels as usize,
            shape.height as usize,
            shape.width as usize,
        );
        let head = group_tensors(heads, attr)?;
        let expect = [
            ("dec.3.weight", vec![arch.n, c, 5, 5]),
            ("dec.3.bias", vec![c]),
        ];
        for (name, s) in &expect {
            if head.get(*name).map(|t| t.shape()) != Some(s.as_slice()) {
                return Err(Error::Container(ContainerError::Malformed {
                    what: "decoder head".into(),
                    detail: format!("{}.{name} missing or misshapen", attr.name()),
                }));
            }
        }
        let params = decoder_params(backbone, head);
        let zs = hyper_shape(&arch, h, w);
        let (mu, _) = hyper_decode(backbone, symbols_tensor(&payload.z_symbols[k], &zs));
        let ys = latent_shape(&arch, h, w);
        let y_hat = symbols_tensor(&payload.y_symbols[k], &ys).zip_map(&mu, |s, m| s + m);
        let mut g = Graph::no_grad();
        let p = bind_constants(&mut g, &params);
        let y = g.constant(y_hat);
        let full = codec::synthesis(&mut g, &p, y);
        debug_assert_eq!(g.shape(full)[1], padded_size(h));
        let x = g.crop(full, h, w);
        planes.push(g.value(x).clone());
    }
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for id in [SubstreamId::Mlp, SubstreamId::AxisVectors] {
        for r in records_of(payload, id)? {
            tensors.insert(r.name.clone(), dequantize_weights(r)?);
        }
    }
    for (k, plane) in planes.iter().enumerate() {
        let (attr, axes) = plane_slot(k);
        tensors.insert(
            format!("{}.plane.{}", attr.name(), axes.name()),
            plane.clone(),
        );
    }
    let b = &payload.side.bbox;
    tensors.insert(
        "bbox".into(),
        Tensor::new(&[2, 3], b.min.iter().chain(&b.max).copied().collect()),
    );
    let field = PlaneFieldParams::from_tensors(&tensors)?;
    let residual: BTreeMap<String, Tensor> = records_of(payload, SubstreamId::ResidualVectors)?
        .iter()
        .map(|r| Ok((r.name.clone(), dequantize_weights(r)?)))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(PLANE_COUNT);
    for (k, plane) in planes.iter().enumerate() {
        let vi = residual.get(&format!("residual.{k}.rows"));
        let vj = residual.get(&format!("residual.{k}.cols"));
        let (c, h, w) = (plane.shape()[0], plane.shape()[1], plane.shape()[2]);
        match (vi, vj) {
            (Some(a), Some(b)) if a.shape() == [c, h] && b.shape() == [c, w] => {
                pairs.push((a.clone(), b.clone()))
            }
            _ => {
                return Err(Error::Container(ContainerError::Malformed {
                    what: "residual vectors".into(),
                    detail: format!("slot {k} missing or misshapen"),
                }))
            }
        }
    }
    let render = RenderSettings {
        n_samples: payload.side.n_samples as usize,
        background: payload.side.background,
        ..RenderSettings::default()
    };
    Ok(DecodedScene {
        field,
        compensation: ResidualCompensation { pairs },
        render,
        planes,
    })
}

pub fn encode_scene(
    model: &SceneModel,
    backbone: &BackboneCheckpoint,
    weight_bits: u8,
) -> Result<(SceneContainer, Vec<PlaneEstimate>)> {
    let (payload, est) = analyze(model, backbone, weight_bits)?;
    Ok((pack(&payload, backbone)?, est))
}

pub fn decode_scene(
    container: &SceneContainer,
    backbone: &BackboneCheckpoint,
) -> Result<DecodedScene> {
    reconstruct(&unpack(container, backbone)?, backbone)
}

/// Planes the training loop sees at test time: mean-rounded latents with
/// unquantized parameters, no bitstream involved.
pub fn simulate_planes(model: &SceneModel) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(PLANE_COUNT);
    for (k, plane) in model.field.all_planes().into_iter().enumerate() {
        let (attr, _) = plane_slot(k);
        let mut g = Graph::no_grad();
        let p = bind_constants(&mut g, model.codec(attr));
        let (h, w) = (plane.height(), plane.width());
        let code = match &model.latents {
            Some(lat) => {
                let y = g.constant(lat[k].clone());
                codec::code_latent(&mut g, &p, y, (h, w), QuantMode::MeanRound, &mut rng)
            }
            None => {
                let x = g.constant(plane.values.clone());
                codec::code_plane(&mut g, &p, x, QuantMode::MeanRound, &mut rng)
            }
        };
        out.push(g.value(code.x_hat).clone());
    }
    Ok(out)
}

/// The field with its planes replaced by `planes` (slot order).
pub fn with_planes(field: &PlaneFieldParams, planes: &[Tensor]) -> Result<PlaneFieldParams> {
    let mut out = field.clone();
    for (k, t) in planes.iter().enumerate() {
        let (attr, axes) = plane_slot(k);
        out.planes_mut(attr)[k % 3] = crate::plane_field::FeaturePlane::new(axes, t.clone())?;
    }
    out.validate()?;
    Ok(out)
}

/// Float32 sizes of what each container group encodes.
pub fn uncompressed_sizes(payload: &ScenePayload) -> UncompressedSizes {
    let floats = |ids: &[SubstreamId]| -> u64 {
        ids.iter()
            .filter_map(|id| payload.records.get(id))
            .flatten()
            .map(|r| 4 * r.shape.iter().product::<usize>() as u64)
            .sum()
    };
    UncompressedSizes {
        planes: raw_plane_bytes(
            payload
                .header
                .planes
                .iter()
                .map(|p| (p.channels as usize, p.height as usize, p.width as usize)),
        ),
        decoder_head: floats(&[SubstreamId::DecoderHead]),
        mlp: floats(&[SubstreamId::Mlp]),
        residual: floats(&[SubstreamId::ResidualVectors]),
        side_info: floats(&[SubstreamId::AxisVectors, SubstreamId::Priors])
            + payload.side.write().len() as u64,
    }
}

/// Per-substream and per-group byte accounting of a container.
pub fn scene_breakdown(
    container: &SceneContainer,
    backbone: &BackboneCheckpoint,
) -> Result<MemoryBreakdown> {
    let payload = unpack(container, backbone)?;
    Ok(memory_breakdown(container, &uncompressed_sizes(&payload)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::codec::swap_heads;
    use crate::plane_field::FieldShape;

    pub(crate) fn small_model(seed: u64) -> (SceneModel, BackboneCheckpoint) {
        let backbone = BackboneCheckpoint::random(8, 12, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = FieldShape {
            resolution: 20,
            density_channels: 2,
            appearance_channels: 3,
            appearance_dim: 5,
            mlp_hidden: 8,
            mlp_layers: 2,
            init_std: 0.5,
        };
        let field = PlaneFieldParams::random(&shape, Aabb::default(), &mut rng);
        let (_, dens) = swap_heads(&backbone, 2, &mut rng);
        let (_, app) = swap_heads(&backbone, 3, &mut rng);
        let mut compensation = ResidualCompensation::for_field(&field);
        compensation.pairs[1].0.data_mut()[3] = 0.25;
        let model = SceneModel {
            field,
            compensation,
            codecs: [dens, app],
            latents: None,
            render: RenderSettings::default(),
        };
        (model, backbone)
    }

    #[test]
    fn container_roundtrip_is_byte_identical() {
        let (model, backbone) = small_model(1);
        let (container, est) = encode_scene(&model, &backbone, 8).unwrap();
        assert_eq!(est.len(), 6);
        let bytes = container.to_bytes().unwrap();
        assert_eq!(bytes.len(), container.encoded_len());
        let parsed = SceneContainer::from_bytes(&bytes).unwrap();
        let payload = unpack(&parsed, &backbone).unwrap();
        let again = pack(&payload, &backbone).unwrap().to_bytes().unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn decoded_planes_match_simulation() {
        let (model, backbone) = small_model(2);
        let (container, _) = encode_scene(&model, &backbone, 8).unwrap();
        let decoded = decode_scene(&container, &backbone).unwrap();
        let sim = simulate_planes(&model).unwrap();
        for (a, b) in decoded.planes.iter().zip(&sim) {
            assert_eq!(a.shape(), b.shape());
            // only the 8-bit head differs
            assert!(a.max_abs_diff(b) < 0.2, "{}", a.max_abs_diff(b));
        }
        assert_eq!(decoded.field.mlp.layers.len(), 2);
        assert!((decoded.compensation.pairs[1].0.data()[3] - 0.25).abs() < 0.01);
        assert_eq!(decoded.render.n_samples, model.render.n_samples);
    }

    #[test]
    fn wrong_backbone_is_refused() {
        let (model, backbone) = small_model(3);
        let (container, _) = encode_scene(&model, &backbone, 8).unwrap();
        let other = BackboneCheckpoint::random(8, 12, 6, 4);
        assert!(matches!(
            decode_scene(&container, &other),
            Err(Error::DigestMismatch { .. })
        ));
        let mut tampered = model.clone();
        tampered.codecs[0]
            .get_mut("hdec.0.weight")
            .unwrap()
            .data_mut()[0] += 1.0;
        assert!(matches!(
            encode_scene(&tampered, &backbone, 8),
            Err(Error::DigestMismatch { .. })
        ));
    }

    #[test]
    fn auto_decoder_latents_share_the_schema() {
        let (mut model, backbone) = small_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = backbone.arch;
        let lat: Vec<Tensor> = model
            .field
            .all_planes()
            .iter()
            .map(|p| codec::random_latent(&arch, p.height(), p.width(), &mut rng))
            .collect();
        let (plain, _) = encode_scene(&model, &backbone, 8).unwrap();
        model.latents = Some(lat);
        let (auto, _) = encode_scene(&model, &backbone, 8).unwrap();
        let ids = |c: &SceneContainer| c.substreams.iter().map(|s| s.id).collect::<Vec<_>>();
        assert_eq!(ids(&plain), ids(&auto));
        assert_eq!(plain.header, auto.header);
        decode_scene(&auto, &backbone).unwrap();
    }
}

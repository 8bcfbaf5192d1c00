//! Flat parameter names over a [`SceneModel`], trainability roles, and
//! placement of a model on a graph.
//!
//! Names are `field.<tensor>` for the radiance field, `residual.<k>.rows`
//! and `.cols` for compensation vectors, `codec.<attr>.<tensor>` for the
//! two codecs, and `latent.<k>` for auto-decoder latents.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::bitstream::weights::{dequantize_weights, quantize_weights, QuantGrid};
use crate::codec::{self, Bound, ParamGroup, PlaneCode, QuantMode};
use crate::error::Result;
use crate::plane_field::{compensate_var, plane_slot, Attribute, FieldVars, PlaneFieldParams};
use crate::scene::SceneModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ParamKind {
    FieldPlane,
    AxisVector,
    /// Color MLP and appearance basis.
    Mlp,
    Residual,
    Latent,
    Codec(ParamGroup),
}

pub fn kind_of(name: &str) -> Option<ParamKind> {
    if let Some(rest) = name.strip_prefix("field.") {
        return Some(if rest.contains(".plane.") {
            ParamKind::FieldPlane
        } else if rest.contains(".vector.") {
            ParamKind::AxisVector
        } else {
            ParamKind::Mlp
        });
    }
    if name.starts_with("residual.") {
        return Some(ParamKind::Residual);
    }
    if name.starts_with("latent.") {
        return Some(ParamKind::Latent);
    }
    let rest = name.strip_prefix("codec.")?;
    let (_, inner) = rest.split_once('.')?;
    ParamGroup::of(inner).map(ParamKind::Codec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Optimized on the sender, never sent.
    Trainable,
    /// Held by both sides, never updated.
    Frozen,
    /// Optimized and written into the container.
    Transmitted,
}

impl ParamKind {
    pub fn role(self) -> Role {
        match self {
            ParamKind::AxisVector | ParamKind::Mlp | ParamKind::Residual => Role::Transmitted,
            ParamKind::FieldPlane | ParamKind::Latent => Role::Trainable,
            ParamKind::Codec(g) if g.is_frozen() => Role::Frozen,
            ParamKind::Codec(g) if g.is_transmitted() => Role::Transmitted,
            ParamKind::Codec(_) => Role::Trainable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Warmup,
    Joint,
    Qat,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Qat => "qat",
        }
    }
}

/// Which parameters a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainabilityMask {
    pub stage: Stage,
    pub auto_decoder: bool,
    /// Lets warmup leave the decoder head at its initialization.
    pub freeze_decoder_head: bool,
}

impl TrainabilityMask {
    pub fn new(stage: Stage, auto_decoder: bool) -> Self {
        Self {
            stage,
            auto_decoder,
            freeze_decoder_head: false,
        }
    }

    pub fn updates(&self, kind: ParamKind) -> bool {
        use ParamGroup::*;
        if kind.role() == Role::Frozen {
            return false;
        }
        let encoder = matches!(kind, ParamKind::Codec(EncoderHead | EncoderBackbone));
        if self.auto_decoder && (encoder || kind == ParamKind::FieldPlane) {
            return false;
        }
        if !self.auto_decoder && kind == ParamKind::Latent {
            return false;
        }
        match self.stage {
            Stage::Pretrain => matches!(
                kind,
                ParamKind::FieldPlane | ParamKind::AxisVector | ParamKind::Mlp
            ),
            Stage::Warmup => match kind {
                ParamKind::Codec(DecoderHead) => !self.freeze_decoder_head,
                ParamKind::Latent => true,
                _ => encoder,
            },
            Stage::Joint | Stage::Qat => true,
        }
    }
}

fn field_tensors_mut(field: &mut PlaneFieldParams) -> Vec<(String, &mut Tensor)> {
    let mut out: Vec<(String, &mut Tensor)> = Vec::new();
    for (attr, planes, vectors) in [
        (
            Attribute::Density,
            &mut field.density_planes,
            &mut field.density_vectors,
        ),
        (
            Attribute::Appearance,
            &mut field.appearance_planes,
            &mut field.appearance_vectors,
        ),
    ] {
        for p in planes.iter_mut() {
            out.push((
                format!("field.{}.plane.{}", attr.name(), p.axes.name()),
                &mut p.values,
            ));
        }
        for v in vectors.iter_mut() {
            out.push((
                format!("field.{}.vector.{}", attr.name(), v.axis.name()),
                &mut v.values,
            ));
        }
    }
    out.push(("field.appearance.basis".into(), &mut field.appearance_basis));
    for (k, l) in field.mlp.layers.iter_mut().enumerate() {
        out.push((format!("field.mlp.{k}.weight"), &mut l.weight));
        out.push((format!("field.mlp.{k}.bias"), &mut l.bias));
    }
    out
}

/// Every tensor of the model under its flat name.
pub fn tensors_mut(model: &mut SceneModel) -> Vec<(String, &mut Tensor)> {
    let mut out = field_tensors_mut(&mut model.field);
    for (k, (vi, vj)) in model.compensation.pairs.iter_mut().enumerate() {
        out.push((format!("residual.{k}.rows"), vi));
        out.push((format!("residual.{k}.cols"), vj));
    }
    for (attr, codec) in Attribute::ALL.iter().zip(model.codecs.iter_mut()) {
        for (name, t) in codec.iter_mut() {
            out.push((format!("codec.{}.{name}", attr.name()), t));
        }
    }
    if let Some(lat) = model.latents.as_mut() {
        for (k, t) in lat.iter_mut().enumerate() {
            out.push((format!("latent.{k}"), t));
        }
    }
    out
}

pub fn named_tensors(model: &SceneModel) -> BTreeMap<String, Tensor> {
    let mut m = model.clone();
    tensors_mut(&mut m)
        .into_iter()
        .map(|(k, t)| (k, t.clone()))
        .collect()
}

/// `dequantize(quantize(t))` with a grid fitted to `t`. Applying it twice
/// changes nothing.
pub fn snap_to_grid(name: &str, t: &Tensor, bits: u8) -> Result<Tensor> {
    Ok(dequantize_weights(&quantize_weights(name, t, bits)?)?)
}

/// The model with every transmitted tensor hard-quantized.
pub fn hard_quantized(model: &SceneModel, bits: u8) -> Result<SceneModel> {
    let mut out = model.clone();
    for (name, t) in tensors_mut(&mut out) {
        if kind_of(&name).is_some_and(|k| k.role() == Role::Transmitted) {
            *t = snap_to_grid(&name, t, bits)?;
        }
    }
    Ok(out)
}

/// A model placed on a graph.
pub struct BoundModel {
    /// Leaves that receive gradients, by name.
    pub leaves: Vec<(String, Var)>,
    pub field: FieldVars,
    /// One per plane slot when the codec is in the loop.
    pub codes: Vec<PlaneCode>,
    /// Uncoded plane values per slot.
    pub planes: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BindOptions {
    pub mask: TrainabilityMask,
    /// Quantization of latents; `None` keeps the codec out of the graph.
    pub quant: Option<QuantMode>,
    /// Straight-through fake quantization of transmitted tensors.
    pub fake_quant_bits: Option<u8>,
    /// Apply compensation residuals to decoded planes.
    pub compensate: bool,
}

struct Binder<'a> {
    g: &'a mut Graph,
    opts: BindOptions,
    leaves: Vec<(String, Var)>,
}

impl Binder<'_> {
    fn bind(&mut self, name: &str, t: &Tensor) -> Var {
        let kind = kind_of(name);
        let train = kind.is_some_and(|k| self.opts.mask.updates(k));
        let v = self.g.leaf(t.clone(), train);
        if train {
            self.leaves.push((name.to_string(), v));
        }
        match (self.opts.fake_quant_bits, kind) {
            (Some(bits), Some(k)) if k.role() == Role::Transmitted => {
                let grid = QuantGrid::fit(t.data(), bits);
                self.g
                    .fake_quant(v, grid.scale, grid.zero_point, grid.qmax())
            }
            _ => v,
        }
    }
}

pub fn bind_model(
    g: &mut Graph,
    model: &SceneModel,
    opts: BindOptions,
    rng: &mut ChaCha8Rng,
) -> BoundModel {
    let mut b = Binder {
        g,
        opts,
        leaves: Vec::new(),
    };
    let f = &model.field;
    let vec_name = |attr: Attribute, k: usize, fv: &PlaneFieldParams| {
        format!(
            "field.{}.vector.{}",
            attr.name(),
            fv.vectors(attr)[k].axis.name()
        )
    };
    let density_vectors = std::array::from_fn(|k| {
        b.bind(
            &vec_name(Attribute::Density, k, f),
            &f.density_vectors[k].values,
        )
    });
    let appearance_vectors = std::array::from_fn(|k| {
        b.bind(
            &vec_name(Attribute::Appearance, k, f),
            &f.appearance_vectors[k].values,
        )
    });
    let appearance_basis = b.bind("field.appearance.basis", &f.appearance_basis);
    let mlp = f
        .mlp
        .layers
        .iter()
        .enumerate()
        .map(|(k, l)| {
            (
                b.bind(&format!("field.mlp.{k}.weight"), &l.weight),
                b.bind(&format!("field.mlp.{k}.bias"), &l.bias),
            )
        })
        .collect();
    let planes: Vec<Var> = f
        .all_planes()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let (attr, axes) = plane_slot(k);
            b.bind(
                &format!("field.{}.plane.{}", attr.name(), axes.name()),
                &p.values,
            )
        })
        .collect();
    let mut codes = Vec::new();
    let mut used = planes.clone();
    if let Some(mode) = opts.quant {
        let bound: Vec<Bound> = Attribute::ALL
            .iter()
            .map(|attr| {
                model
                    .codec(*attr)
                    .iter()
                    .map(|(k, t)| (k.clone(), b.bind(&format!("codec.{}.{k}", attr.name()), t)))
                    .collect()
            })
            .collect();
        for (k, plane) in f.all_planes().iter().enumerate() {
            let (attr, _) = plane_slot(k);
            let p = &bound[attr as usize];
            let code = match &model.latents {
                Some(lat) => {
                    let y = b.bind(&format!("latent.{k}"), &lat[k]);
                    codec::code_latent(b.g, p, y, (plane.height(), plane.width()), mode, rng)
                }
                None => codec::code_plane(b.g, p, planes[k], mode, rng),
            };
            used[k] = code.x_hat;
            if opts.compensate {
                let (vi, vj) = &model.compensation.pairs[k];
                let vi = b.bind(&format!("residual.{k}.rows"), vi);
                let vj = b.bind(&format!("residual.{k}.cols"), vj);
                used[k] = compensate_var(b.g, code.x_hat, vi, vj);
            }
            codes.push(code);
        }
    }
    let field = FieldVars {
        bbox: f.bbox,
        density_planes: [used[0], used[1], used[2]],
        density_vectors,
        appearance_planes: [used[3], used[4], used[5]],
        appearance_vectors,
        appearance_basis,
        mlp,
    };
    BoundModel {
        leaves: b.leaves,
        field,
        codes,
        planes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::small_model;

    #[test]
    fn every_name_has_a_kind_and_frozen_means_backbone() {
        let (model, _) = small_model(1);
        let names = named_tensors(&model);
        assert!(
            names.keys().all(|k| kind_of(k).is_some()),
            "{:?}",
            names.keys().find(|k| kind_of(k).is_none())
        );
        for (k, _) in names {
            let frozen = kind_of(&k).unwrap().role() == Role::Frozen;
            assert_eq!(
                frozen,
                k.contains(".dec.") && !k.contains(".dec.3.") || k.contains(".hdec."),
                "{k}"
            );
        }
    }

    #[test]
    fn masks_follow_the_schedule() {
        use ParamGroup::*;
        let all = [
            ParamKind::FieldPlane,
            ParamKind::AxisVector,
            ParamKind::Mlp,
            ParamKind::Residual,
            ParamKind::Latent,
            ParamKind::Codec(EncoderHead),
            ParamKind::Codec(EncoderBackbone),
            ParamKind::Codec(HyperEncoder),
            ParamKind::Codec(DecoderHead),
            ParamKind::Codec(DecoderBackbone),
            ParamKind::Codec(HyperDecoder),
            ParamKind::Codec(Prior),
        ];
        for stage in [Stage::Pretrain, Stage::Warmup, Stage::Joint, Stage::Qat] {
            for ad in [false, true] {
                let m = TrainabilityMask::new(stage, ad);
                assert!(!m.updates(ParamKind::Codec(DecoderBackbone)));
                assert!(!m.updates(ParamKind::Codec(HyperDecoder)));
                if ad {
                    assert!(!m.updates(ParamKind::Codec(EncoderHead)));
                    assert!(!m.updates(ParamKind::Codec(EncoderBackbone)));
                }
            }
        }
        let joint = TrainabilityMask::new(Stage::Joint, false);
        let n = all.iter().filter(|&&k| joint.updates(k)).count();
        assert_eq!(n, all.len() - 3);
        let pre = TrainabilityMask::new(Stage::Pretrain, false);
        assert!(all.iter().filter(|&&k| pre.updates(k)).all(|k| matches!(
            k,
            ParamKind::FieldPlane | ParamKind::AxisVector | ParamKind::Mlp
        )));
    }

    #[test]
    fn snapping_is_a_fixed_point() {
        let (model, _) = small_model(2);
        let q = hard_quantized(&model, 8).unwrap();
        assert_eq!(hard_quantized(&q, 8).unwrap(), q);
        assert_ne!(q, model);
        let a = named_tensors(&model);
        let b = named_tensors(&q);
        for (k, t) in &a {
            if kind_of(k).unwrap().role() != Role::Transmitted {
                assert_eq!(t, &b[k], "{k}");
            }
        }
    }
}

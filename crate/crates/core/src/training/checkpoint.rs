//! Field and scene-model checkpoints as named-tensor archives.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{kind_of, named_tensors, Role};
use super::stages::simulated_field;
use crate::bitstream::SceneContainer;
use crate::codec::BackboneCheckpoint;
use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::io::archive::{NamedTensorArchive, TensorFlags};
use crate::io::dataset::{Dataset, DatasetView, Split};
use crate::plane_field::{Aabb, Attribute, PlaneFieldParams, ResidualCompensation};
use crate::renderer::{psnr, render_rays, ssim, Camera, Image, RenderSettings};
use crate::scene::{decode_scene, DecodedScene, SceneModel};
use crate::tensor::Tensor;

const KIND_KEY: &str = "kind";
const FIELD_KIND: &str = "field";
const MODEL_KIND: &str = "scene-model";
const DECODED_KIND: &str = "decoded-scene";

fn flags_for(name: &str) -> TensorFlags {
    match kind_of(name).map(|k| k.role()) {
        Some(Role::Frozen) => TensorFlags::FROZEN,
        Some(Role::Transmitted) => TensorFlags::TRANSMITTED,
        _ => TensorFlags::TRAINABLE,
    }
}

fn bbox_meta(b: &Aabb) -> String {
    serde_json::to_string(b).expect("box serializes")
}

fn field_from(a: &NamedTensorArchive) -> Result<PlaneFieldParams> {
    let mut t: BTreeMap<String, Tensor> = a.with_prefix("field.");
    let bbox: Aabb = serde_json::from_str(
        a.meta
            .get("bbox")
            .ok_or_else(|| Error::Load("archive lacks a bbox".into()))?,
    )
    .map_err(|e| Error::Load(format!("bbox: {e}")))?;
    t.insert(
        "bbox".into(),
        Tensor::new(&[2, 3], bbox.min.iter().chain(&bbox.max).copied().collect()),
    );
    PlaneFieldParams::from_tensors(&t)
}

fn check_kind(a: &NamedTensorArchive, want: &str) -> Result<()> {
    match a.meta.get(KIND_KEY).map(String::as_str) {
        Some(k) if k == want => Ok(()),
        other => Err(Error::Load(format!(
            "expected a {want} checkpoint, found {}",
            other.unwrap_or("an untagged archive")
        ))),
    }
}

pub fn field_archive(field: &PlaneFieldParams) -> NamedTensorArchive {
    let mut a = NamedTensorArchive::new();
    for (k, t) in field.to_tensors() {
        if k != "bbox" {
            a.insert(format!("field.{k}"), t, TensorFlags::TRAINABLE);
        }
    }
    a.meta.insert(KIND_KEY.into(), FIELD_KIND.into());
    a.meta.insert("bbox".into(), bbox_meta(&field.bbox));
    a
}

pub fn save_field(field: &PlaneFieldParams, path: &Path) -> Result<()> {
    field_archive(field).save(path)
}

pub fn load_field(path: &Path) -> Result<PlaneFieldParams> {
    let a = NamedTensorArchive::load(path)?;
    check_kind(&a, FIELD_KIND)?;
    field_from(&a)
}

pub fn model_archive(model: &SceneModel) -> NamedTensorArchive {
    let mut a = NamedTensorArchive::new();
    for (k, t) in named_tensors(model) {
        let flags = flags_for(&k);
        a.insert(k, t, flags);
    }
    a.meta.insert(KIND_KEY.into(), MODEL_KIND.into());
    a.meta.insert("bbox".into(), bbox_meta(&model.field.bbox));
    a.meta.insert(
        "render".into(),
        serde_json::to_string(&model.render).expect("settings serialize"),
    );
    a
}

pub fn model_from_archive(a: &NamedTensorArchive) -> Result<SceneModel> {
    check_kind(a, MODEL_KIND)?;
    let field = field_from(a)?;
    let compensation = residual_pairs(a)?;
    let codecs: [CodecParams; 2] =
        Attribute::ALL.map(|attr| a.with_prefix(&format!("codec.{}.", attr.name())));
    let lat = a.with_prefix("latent.");
    let latents = if lat.is_empty() {
        None
    } else {
        Some(
            (0..6)
                .map(|k| {
                    lat.get(&k.to_string())
                        .cloned()
                        .ok_or_else(|| Error::Load(format!("missing latent.{k}")))
                })
                .collect::<Result<_>>()?,
        )
    };
    let render = render_meta(a)?;
    Ok(SceneModel {
        field,
        compensation,
        codecs,
        latents,
        render,
    })
}

pub fn save_model(model: &SceneModel, path: &Path) -> Result<()> {
    model_archive(model).save(path)
}

pub fn load_model(path: &Path) -> Result<SceneModel> {
    model_from_archive(&NamedTensorArchive::load(path)?)
}

fn render_meta(a: &NamedTensorArchive) -> Result<RenderSettings> {
    match a.meta.get("render") {
        Some(s) => {
            serde_json::from_str(s).map_err(|e| Error::Load(format!("render settings: {e}")))
        }
        None => Ok(RenderSettings::default()),
    }
}

fn residual_pairs(a: &NamedTensorArchive) -> Result<ResidualCompensation> {
    let residual = a.with_prefix("residual.");
    let mut pairs = Vec::new();
    while let (Some(vi), Some(vj)) = (
        residual.get(&format!("{}.rows", pairs.len())),
        residual.get(&format!("{}.cols", pairs.len())),
    ) {
        pairs.push((vi.clone(), vj.clone()));
    }
    if pairs.len() != 6 {
        return Err(Error::Load(format!(
            "expected 6 residual pairs, found {}",
            pairs.len()
        )));
    }
    Ok(ResidualCompensation { pairs })
}

/// A decoded container as an archive, so rendering needs no backbone.
pub fn decoded_archive(d: &DecodedScene) -> NamedTensorArchive {
    let mut a = field_archive(&d.field);
    for (k, (vi, vj)) in d.compensation.pairs.iter().enumerate() {
        a.insert(
            format!("residual.{k}.rows"),
            vi.clone(),
            TensorFlags::TRANSMITTED,
        );
        a.insert(
            format!("residual.{k}.cols"),
            vj.clone(),
            TensorFlags::TRANSMITTED,
        );
    }
    a.meta.insert(KIND_KEY.into(), DECODED_KIND.into());
    a.meta.insert(
        "render".into(),
        serde_json::to_string(&d.render).expect("settings serialize"),
    );
    a
}

pub fn save_decoded(d: &DecodedScene, path: &Path) -> Result<()> {
    decoded_archive(d).save(path)
}

/// Anything that can be rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderableScene {
    pub field: PlaneFieldParams,
    pub compensation: Option<ResidualCompensation>,
    pub render: RenderSettings,
}

impl RenderableScene {
    /// A trained model as its receiver would render it without a bitstream.
    pub fn simulated(model: &SceneModel) -> Result<Self> {
        Ok(Self {
            field: simulated_field(model)?,
            compensation: Some(model.compensation.clone()),
            render: model.render.clone(),
        })
    }

    pub fn decoded(d: DecodedScene) -> Self {
        Self {
            field: d.field,
            compensation: Some(d.compensation),
            render: d.render,
        }
    }

    /// Opens a `.nrfc` container (which needs the backbone) or any
    /// checkpoint archive this crate writes.
    pub fn open(path: &Path, backbone: Option<&BackboneCheckpoint>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(crate::bitstream::container::MAGIC) {
            let c = SceneContainer::from_bytes(&bytes)?;
            let bb = backbone
                .ok_or_else(|| Error::Config("decoding a container needs a backbone".into()))?;
            return Ok(Self::decoded(decode_scene(&c, bb)?));
        }
        let a = NamedTensorArchive::from_bytes(&bytes)?;
        match a.meta.get(KIND_KEY).map(String::as_str) {
            Some(FIELD_KIND) => Ok(Self {
                field: field_from(&a)?,
                compensation: None,
                render: RenderSettings::default(),
            }),
            Some(MODEL_KIND) => Self::simulated(&model_from_archive(&a)?),
            Some(DECODED_KIND) => Ok(Self {
                field: field_from(&a)?,
                compensation: Some(residual_pairs(&a)?),
                render: render_meta(&a)?,
            }),
            other => Err(Error::Load(format!(
                "{} is not renderable (kind {other:?})",
                path.display()
            ))),
        }
    }

    pub fn render_view(&self, camera: &Camera, near: f64, far: f64) -> Result<Image> {
        let out = render_rays(
            &self.field,
            self.compensation.as_ref(),
            &camera.rays(near, far),
            &self.render,
        )?;
        Ok(Image::from_pixels(camera.width, camera.height, &out.rgb))
    }

    /// Mean PSNR and SSIM over the test views (training views when there
    /// are none).
    pub fn evaluate(&self, data: &Dataset) -> Result<ViewMetrics> {
        let mut views: Vec<&DatasetView> = data.views(Split::Test).collect();
        if views.is_empty() {
            views = data.views(Split::Train).collect();
        }
        if views.is_empty() {
            return Err(Error::Dataset("dataset has no views".into()));
        }
        let (mut p, mut s) = (0.0, 0.0);
        for v in &views {
            let img = self.render_view(&v.camera, data.near, data.far)?;
            p += psnr(&img, &v.image)?;
            s += ssim(&img, &v.image)?;
        }
        let n = views.len() as f64;
        Ok(ViewMetrics {
            psnr: p / n,
            ssim: s / n,
            views: views.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub views: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::small_model;

    #[test]
    fn model_roundtrip_keeps_every_tensor() {
        let (model, _) = small_model(7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ntar");
        save_model(&model, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model);
        let a = NamedTensorArchive::load(&p).unwrap();
        let frozen: Vec<_> = a
            .manifest()
            .into_iter()
            .filter(|r| r.frozen)
            .map(|r| r.name)
            .collect();
        assert!(
            !frozen.is_empty()
                && frozen
                    .iter()
                    .all(|n| n.contains(".hdec.") || n.contains(".dec.") && !n.contains(".dec.3."))
        );
        assert!(matches!(load_field(&p), Err(Error::Load(_))));
    }

    #[test]
    fn field_roundtrip() {
        let (model, _) = small_model(8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ntar");
        save_field(&model.field, &p).unwrap();
        assert_eq!(load_field(&p).unwrap(), model.field);
    }
}

//! Multi-view datasets in the blender convention.
//!
//! A scene directory holds `transforms_train.json` and `transforms_test.json`
//! with `camera_angle_x` and a `frames` list of `{file_path, transform_matrix}`;
//! each `file_path` names a PNG without its extension. Optional `near`, `far`,
//! and `aabb` keys override the defaults of 2, 6, and the 1.5 cube.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_png, write_png};
use crate::error::{Error, Result};
use crate::plane_field::Aabb;
use crate::renderer::{Camera, Image, Ray};

pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView {
    pub image: Image,
    pub camera: Camera,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: Vec<DatasetView>,
    pub near: f64,
    pub far: f64,
    pub bbox: Aabb,
}

/// Rays with their target colors, flattened over views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
}

impl Dataset {
    pub fn views(&self, split: Split) -> impl Iterator<Item = &DatasetView> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn rays(&self, split: Split) -> RaySet {
        let mut out = RaySet::default();
        for v in self.views(split) {
            out.rays.extend(v.camera.rays(self.near, self.far));
            out.colors.extend(v.image.pixels());
        }
        out
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut views = Vec::new();
        let mut bounds: Option<(f64, f64, Aabb)> = None;
        for split in [Split::Train, Split::Test] {
            let (v, b) = load_split(dir, split)?;
            views.extend(v);
            bounds.get_or_insert(b);
        }
        let (near, far, bbox) = bounds.expect("two splits were read");
        Ok(Self {
            views,
            near,
            far,
            bbox,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let mut frames = Vec::new();
            let mut angle = None;
            for (k, v) in self.views(split).enumerate() {
                let rel = format!("./{}/r_{k}", split.name());
                write_png(&dir.join(format!("{rel}.png")), &v.image)?;
                angle.get_or_insert(2.0 * (0.5 * v.camera.width as f64 / v.camera.focal).atan());
                frames.push(Frame {
                    file_path: rel,
                    transform_matrix: v.camera.c2w.iter().map(|r| r.to_vec()).collect(),
                });
            }
            let doc = Transforms {
                camera_angle_x: angle.unwrap_or(0.6911),
                frames,
                near: Some(self.near),
                far: Some(self.far),
                aabb: Some([self.bbox.min.to_vec(), self.bbox.max.to_vec()]),
            };
            let path = dir.join(format!("transforms_{}.json", split.name()));
            let text = serde_json::to_string_pretty(&doc)?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Transforms {
    camera_angle_x: f64,
    frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aabb: Option<[Vec<f64>; 2]>,
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path.trim_start_matches("./"));
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        p
    } else {
        let mut s = p.into_os_string();
        s.push(".png");
        PathBuf::from(s)
    }
}

/// Camera-to-world from a 4x4 JSON matrix, checking the rotation block.
pub fn parse_transform(m: &[Vec<f64>]) -> Result<[[f64; 4]; 4]> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) || m.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(Error::Dataset(
            "transform_matrix must be a finite 4x4 matrix".into(),
        ));
    }
    let mut out = [[0.0; 4]; 4];
    for (r, row) in m.iter().enumerate() {
        out[r].copy_from_slice(row);
    }
    for a in 0..3 {
        for b in 0..3 {
            let d: f64 = (0..3).map(|k| out[k][a] * out[k][b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (d - want).abs() > 1e-4 {
                return Err(Error::Dataset(format!(
                    "rotation block is not orthonormal (column dot {a},{b} = {d})"
                )));
            }
        }
    }
    Ok(out)
}

fn load_split(dir: &Path, split: Split) -> Result<(Vec<DatasetView>, (f64, f64, Aabb))> {
    let path = dir.join(format!("transforms_{}.json", split.name()));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: Transforms = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if !(doc.camera_angle_x > 0.0 && doc.camera_angle_x < std::f64::consts::PI) {
        return Err(Error::Dataset(format!(
            "{}: camera_angle_x out of range",
            path.display()
        )));
    }
    let near = doc.near.unwrap_or(DEFAULT_NEAR);
    let far = doc.far.unwrap_or(DEFAULT_FAR);
    if !(near >= 0.0 && far > near) {
        return Err(Error::Dataset(format!(
            "{}: invalid near/far {near}/{far}",
            path.display()
        )));
    }
    let bbox = match &doc.aabb {
        Some([lo, hi]) if lo.len() == 3 && hi.len() == 3 && (0..3).all(|k| lo[k] < hi[k]) => Aabb {
            min: [lo[0], lo[1], lo[2]],
            max: [hi[0], hi[1], hi[2]],
        },
        Some(_) => {
            return Err(Error::Dataset(format!(
                "{}: malformed aabb",
                path.display()
            )))
        }
        None => Aabb::default(),
    };
    let mut views = Vec::with_capacity(doc.frames.len());
    for f in &doc.frames {
        let image = read_png(&image_path(dir, &f.file_path))?;
        let c2w = parse_transform(&f.transform_matrix)?;
        let focal = 0.5 * image.width as f64 / (0.5 * doc.camera_angle_x).tan();
        let camera = Camera {
            c2w,
            focal,
            cx: image.width as f64 / 2.0,
            cy: image.height as f64 / 2.0,
            width: image.width,
            height: image.height,
        };
        views.push(DatasetView {
            image,
            camera,
            split,
        });
    }
    Ok((views, (near, far, bbox)))
}

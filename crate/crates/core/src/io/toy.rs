//! Procedural toy scene: a translucent textured slab under an opaque
//! striped sphere, rendered with the crate's own compositor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetView, Split, DEFAULT_FAR, DEFAULT_NEAR};
use crate::error::Result;
use crate::plane_field::Aabb;
use crate::renderer::{composite, sample_along_ray, Camera, Image, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Solid {
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
        color: [f64; 3],
    },
    Slab {
        min: [f64; 3],
        max: [f64; 3],
        density: f64,
        color: [f64; 3],
    },
}

impl Solid {
    fn inside(&self, p: [f64; 3]) -> bool {
        match *self {
            Solid::Sphere { center, radius, .. } => {
                (0..3).map(|k| (p[k] - center[k]).powi(2)).sum::<f64>() <= radius * radius
            }
            Solid::Slab { min, max, .. } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
        }
    }

    fn density(&self) -> f64 {
        match *self {
            Solid::Sphere { density, .. } | Solid::Slab { density, .. } => density,
        }
    }

    /// Smooth texture on top of the base color.
    fn color(&self, p: [f64; 3]) -> [f64; 3] {
        match *self {
            Solid::Sphere {
                center,
                radius,
                color,
                ..
            } => {
                let s =
                    0.75 + 0.25 * (3.0 * std::f64::consts::PI * (p[2] - center[2]) / radius).sin();
                color.map(|c| (c * s).clamp(0.0, 1.0))
            }
            Solid::Slab { color, .. } => {
                let s = 0.8 + 0.2 * (4.0 * p[0]).cos() * (4.0 * p[1]).cos();
                color.map(|c| (c * s).clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub solids: Vec<Solid>,
    pub background: [f64; 3],
}

impl ToyScene {
    /// Slab and sphere with seed-dependent tints.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70f);
        let mut tint =
            |base: [f64; 3]| base.map(|c: f64| (c + rng.random_range(-0.1..0.1)).clamp(0.05, 0.95));
        let slab_color = tint([0.85, 0.45, 0.25]);
        let sphere_color = tint([0.25, 0.5, 0.9]);
        Self {
            solids: vec![
                Solid::Slab {
                    min: [-0.9, -0.9, -0.6],
                    max: [0.9, 0.9, -0.35],
                    density: 6.0,
                    color: slab_color,
                },
                Solid::Sphere {
                    center: [0.15, -0.1, 0.25],
                    radius: 0.5,
                    density: 60.0,
                    color: sphere_color,
                },
            ],
            background: [1.0; 3],
        }
    }

    /// Summed density and density-weighted color.
    pub fn query(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for s in self.solids.iter().filter(|s| s.inside(p)) {
            let d = s.density();
            let c = s.color(p);
            sigma += d;
            (0..3).for_each(|k| acc[k] += d * c[k]);
        }
        if sigma > 0.0 {
            acc.iter_mut().for_each(|v| *v /= sigma);
        }
        (sigma, acc)
    }

    /// Color and opacity of one ray with `n` evenly spaced samples.
    pub fn render_ray(&self, ray: &Ray, n: usize) -> Result<([f64; 3], f64)> {
        let (ts, deltas) = sample_along_ray(ray, n, None);
        let (sig, col): (Vec<f64>, Vec<[f64; 3]>) =
            ts.iter().map(|&t| self.query(ray.at(t))).unzip();
        let c = composite(&sig, &col, &deltas, &ts, self.background)?;
        Ok((c.rgb, c.opacity))
    }

    pub fn render(
        &self,
        camera: &Camera,
        near: f64,
        far: f64,
        n: usize,
    ) -> Result<(Image, Vec<f64>)> {
        let mut px = Vec::with_capacity(camera.width * camera.height);
        let mut alpha = Vec::with_capacity(px.capacity());
        for ray in camera.rays(near, far) {
            let (c, a) = self.render_ray(&ray, n)?;
            px.push(c);
            alpha.push(a);
        }
        Ok((Image::from_pixels(camera.width, camera.height, &px), alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub views: usize,
    pub size: usize,
    pub samples: usize,
    pub radius: f64,
    pub fov_x: f64,
    /// Every `test_every`-th view is held out.
    pub test_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            views: 32,
            size: 128,
            samples: 512,
            radius: 4.0,
            fov_x: 0.6911,
            test_every: 4,
        }
    }
}

/// Cameras on a ring of jittered elevations around the origin.
pub fn toy_cameras(cfg: &ToyConfig, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.views)
        .map(|k| {
            let az =
                std::f64::consts::TAU * k as f64 / cfg.views as f64 + rng.random_range(-0.05..0.05);
            let el: f64 = rng.random_range(0.25..0.9);
            let eye = [
                cfg.radius * el.cos() * az.cos(),
                cfg.radius * el.cos() * az.sin(),
                cfg.radius * el.sin(),
            ];
            Camera::look_at(
                eye,
                [0.0; 3],
                [0.0, 0.0, 1.0],
                cfg.size,
                cfg.size,
                cfg.fov_x,
            )
        })
        .collect()
}

pub fn generate_toy_scene(seed: u64, cfg: &ToyConfig) -> Result<Dataset> {
    let scene = ToyScene::new(seed);
    let views = toy_cameras(cfg, seed)
        .into_iter()
        .enumerate()
        .map(|(k, camera)| {
            let (image, _) = scene.render(&camera, DEFAULT_NEAR, DEFAULT_FAR, cfg.samples)?;
            let split = if cfg.test_every > 0 && k % cfg.test_every == cfg.test_every - 1 {
                Split::Test
            } else {
                Split::Train
            };
            Ok(DatasetView {
                image,
                camera,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        views,
        near: DEFAULT_NEAR,
        far: DEFAULT_FAR,
        bbox: Aabb::default(),
    })
}

//! Rays, stratified sampling, emission-absorption compositing, and image
//! metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::plane_field::{
    appearance_var, apply_compensation, color_var, density_var, FieldVars, PlaneFieldParams,
    PointCoords, ResidualCompensation,
};
use crate::tensor::Tensor;

pub const DEPTH_EPS: f64 = 1e-8;
pub const PSNR_CAP: f64 = 99.0;
/// Rays per evaluation chunk when rendering outside training.
pub const RENDER_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], near: f64, far: f64) -> Result<Self> {
        let n = norm(direction);
        if !(near < far) || (n - 1.0).abs() > 1e-4 || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!(
                "invalid ray: |d| = {n}, near {near}, far {far}"
            )));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|k| self.origin[k] + t * self.direction[k])
    }
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub background: [f64; 3],
    pub jitter: bool,
    pub rng_seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_samples: 256,
            background: [1.0; 3],
            jitter: false,
            rng_seed: 0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderOutput {
    pub rgb: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Pinhole camera in the Blender convention: looks down `-z`, `y` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Camera-to-world, row-major.
    pub c2w: [[f64; 4]; 4],
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Ray through pixel column `i`, row `j`; the pixel at `(cx, cy)` looks
    /// exactly along `-z`.
    pub fn ray(&self, i: usize, j: usize, near: f64, far: f64) -> Ray {
        let d = [
            (i as f64 - self.cx) / self.focal,
            -(j as f64 - self.cy) / self.focal,
            -1.0,
        ];
        let m = &self.c2w;
        let world = std::array::from_fn(|r| m[r][0] * d[0] + m[r][1] * d[1] + m[r][2] * d[2]);
        Ray {
            origin: [m[0][3], m[1][3], m[2][3]],
            direction: normalize(world),
            near,
            far,
        }
    }

    /// Row-major rays for every pixel.
    pub fn rays(&self, near: f64, far: f64) -> Vec<Ray> {
        (0..self.height)
            .flat_map(|j| (0..self.width).map(move |i| (i, j)))
            .map(|(i, j)| self.ray(i, j, near, far))
            .collect()
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_x: f64,
    ) -> Self {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let mut c2w = [[0.0; 4]; 4];
        for r in 0..3 {
            c2w[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        c2w[3] = [0.0, 0.0, 0.0, 1.0];
        let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            c2w,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Stratified distances: bin `i` of `N` equal bins over `[near, far]`
/// contributes `near + (i + u) / N * (far - near)` with `u = 1/2` without
/// jitter. Segment lengths are gaps to the next sample, the last one
/// reaching `far`.
pub fn sample_along_ray(
    ray: &Ray,
    n: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Vec<f64>) {
    let len = ray.far - ray.near;
    let t: Vec<f64> = match jitter {
        Some(rng) => (0..n)
            .map(|i| ray.near + (i as f64 + rng.random::<f64>()) / n as f64 * len)
            .collect(),
        None => (0..n)
            .map(|i| ray.near + (i as f64 + 0.5) / n as f64 * len)
            .collect(),
    };
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(ray.far - t[n - 1]);
    (t, delta)
}

/// Single-ray compositing result with the per-sample transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct Composited {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    /// `T_1 ..= T_{N+1}`.
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`,
/// `rgb = sum T_i alpha_i c_i + T_{N+1} background`.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    ts: &[f64],
    background: [f64; 3],
) -> Result<Composited> {
    let n = sigmas.len();
    if colors.len() != n || deltas.len() != n || ts.len() != n {
        return Err(Error::Shape("composite inputs differ in length".into()));
    }
    if sigmas.iter().any(|&s| !(s >= 0.0)) || deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Input(
            "composite needs sigma >= 0 and delta > 0".into(),
        ));
    }
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut alpha = Vec::with_capacity(n);
    let (mut rgb, mut opacity, mut depth, mut t) = ([0.0; 3], 0.0, 0.0, 1.0);
    for i in 0..n {
        transmittance.push(t);
        let a = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = t * a;
        for k in 0..3 {
            rgb[k] += w * colors[i][k];
        }
        opacity += w;
        depth += w * ts[i];
        alpha.push(a);
        t *= 1.0 - a;
    }
    transmittance.push(t);
    for k in 0..3 {
        rgb[k] += t * background[k];
    }
    // the running sum can exceed 1 by an ulp
    let opacity = opacity.min(1.0);
    Ok(Composited {
        rgb,
        opacity,
        depth: depth / opacity.max(DEPTH_EPS),
        transmittance,
        alpha,
    })
}

impl Graph {
    /// Compositing over `B x N` densities and `B x N x 3` colors; returns
    /// the `B x 3` pixel colors.
    pub fn composite(
        &mut self,
        sigma: Var,
        color: Var,
        deltas: &Tensor,
        background: [f64; 3],
    ) -> Var {
        let (b, n) = (deltas.shape()[0], deltas.shape()[1]);
        assert_eq!(self.shape(sigma), [b, n]);
        assert_eq!(self.shape(color), [b, n, 3]);
        let delta = deltas.data().to_vec();
        let (s, c) = (self.value(sigma).data(), self.value(color).data());
        let mut out = vec![0.0; b * 3];
        for r in 0..b {
            let mut t = 1.0;
            for i in 0..n {
                let a = 1.0 - (-s[r * n + i] * delta[r * n + i]).exp();
                let w = t * a;
                for k in 0..3 {
                    out[r * 3 + k] += w * c[(r * n + i) * 3 + k];
                }
                t *= 1.0 - a;
            }
            for k in 0..3 {
                out[r * 3 + k] += t * background[k];
            }
        }
        self.push(Tensor::new(&[b, 3], out), &[sigma, color], move |args| {
            let (s, c, rgb, g) = (
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.output.data(),
                args.grad.data(),
            );
            let mut gs = vec![0.0; b * n];
            let mut gc = vec![0.0; b * n * 3];
            for r in 0..b {
                let go = [g[r * 3], g[r * 3 + 1], g[r * 3 + 2]];
                // rest = rgb - sum_{j <= i} w_j c_j, the light arriving from behind sample i
                let mut rest = [rgb[r * 3], rgb[r * 3 + 1], rgb[r * 3 + 2]];
                let mut t = 1.0;
                for i in 0..n {
                    let d = delta[r * n + i];
                    let a = 1.0 - (-s[r * n + i] * d).exp();
                    let w = t * a;
                    let ci = &c[(r * n + i) * 3..(r * n + i) * 3 + 3];
                    let t_next = t * (1.0 - a);
                    let mut acc = 0.0;
                    for k in 0..3 {
                        rest[k] -= w * ci[k];
                        gc[(r * n + i) * 3 + k] = w * go[k];
                        acc += (t_next * ci[k] - rest[k]) * go[k];
                    }
                    gs[r * n + i] = d * acc;
                    t = t_next;
                }
            }
            vec![
                Some(Tensor::new(&[b, n], gs)),
                Some(Tensor::new(&[b, n, 3], gc)),
            ]
        })
    }
}

/// Graph outputs of a rendered ray batch.
pub struct RenderVars {
    pub rgb: Var,
    pub sigma: Var,
    pub t: Tensor,
    pub deltas: Tensor,
}

/// Full differentiable render of `rays` through `field`. With `jitter`,
/// bin offsets are drawn from `rng`.
pub fn render_rays_var(
    g: &mut Graph,
    field: &FieldVars,
    rays: &[Ray],
    settings: &RenderSettings,
    rng: Option<&mut ChaCha8Rng>,
) -> RenderVars {
    let mut rng = rng;
    let samples: Vec<_> = rays
        .iter()
        .map(|ray| {
            sample_along_ray(
                ray,
                settings.n_samples,
                if settings.jitter {
                    rng.as_deref_mut()
                } else {
                    None
                },
            )
        })
        .collect();
    render_with_samples(g, field, rays, &samples, settings)
}

/// Field with compensation residuals folded into its planes.
pub fn compensated_field(
    field: &PlaneFieldParams,
    comp: &ResidualCompensation,
) -> Result<PlaneFieldParams> {
    if comp.pairs.len() != 6 {
        return Err(Error::Config(format!(
            "compensation has {} pairs, expected 6",
            comp.pairs.len()
        )));
    }
    let mut out = field.clone();
    for (k, (vi, vj)) in comp.pairs.iter().enumerate() {
        let plane = if k < 3 {
            &mut out.density_planes[k]
        } else {
            &mut out.appearance_planes[k - 3]
        };
        *plane = apply_compensation(plane, vi, vj)?;
    }
    Ok(out)
}

/// Renders rays in fixed-size chunks. Each ray's arithmetic does not depend
/// on the chunking. Jittered sampling draws from a per-ray stream of
/// `rng_seed`, so results stay independent of batching.
pub fn render_rays(
    field: &PlaneFieldParams,
    comp: Option<&ResidualCompensation>,
    rays: &[Ray],
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    settings.validate()?;
    for r in rays {
        Ray::new(r.origin, r.direction, r.near, r.far)?;
    }
    let owned;
    let field = match comp {
        Some(c) => {
            owned = compensated_field(field, c)?;
            &owned
        }
        None => field,
    };
    render_chunks(field, rays, settings, 0)
}

fn render_chunks(
    field: &PlaneFieldParams,
    rays: &[Ray],
    settings: &RenderSettings,
    first: usize,
) -> Result<RenderOutput> {
    let mut out = RenderOutput::default();
    for (ci, chunk) in rays.chunks(RENDER_CHUNK).enumerate() {
        let mut g = Graph::no_grad();
        let vars = FieldVars::constants(&mut g, field);
        let n = settings.n_samples;
        // one jitter stream per ray keeps results independent of chunking
        let samples: Vec<_> = chunk
            .iter()
            .enumerate()
            .map(|(k, ray)| {
                if settings.jitter {
                    let mut rng = ChaCha8Rng::seed_from_u64(settings.rng_seed);
                    rng.set_stream((first + ci * RENDER_CHUNK + k) as u64);
                    sample_along_ray(ray, n, Some(&mut rng))
                } else {
                    sample_along_ray(ray, n, None)
                }
            })
            .collect();
        let rv = render_with_samples(&mut g, &vars, chunk, &samples, settings);
        let rgb = g.value(rv.rgb).data();
        let sig = g.value(rv.sigma).data();
        for r in 0..chunk.len() {
            out.rgb.push([rgb[r * 3], rgb[r * 3 + 1], rgb[r * 3 + 2]]);
            let mut t = 1.0;
            let (mut opacity, mut depth) = (0.0, 0.0);
            for i in 0..n {
                let a = 1.0 - (-sig[r * n + i] * rv.deltas.data()[r * n + i]).exp();
                opacity += t * a;
                depth += t * a * rv.t.data()[r * n + i];
                t *= 1.0 - a;
            }
            out.opacity.push(opacity.min(1.0));
            out.depth.push(depth / opacity.max(DEPTH_EPS));
        }
    }
    Ok(out)
}

/// Render with precomputed `(t, delta)` per ray.
pub fn render_with_samples(
    g: &mut Graph,
    field: &FieldVars,
    rays: &[Ray],
    samples: &[(Vec<f64>, Vec<f64>)],
    settings: &RenderSettings,
) -> RenderVars {
    let (b, n) = (rays.len(), settings.n_samples);
    let mut points = Vec::with_capacity(b * n);
    let mut dirs = Vec::with_capacity(b * n);
    let (mut ts, mut ds) = (Vec::with_capacity(b * n), Vec::with_capacity(b * n));
    for (ray, (t, d)) in rays.iter().zip(samples) {
        for &ti in t {
            points.push(ray.at(ti));
            dirs.push(ray.direction);
        }
        ts.extend_from_slice(t);
        ds.extend_from_slice(d);
    }
    let coords = PointCoords::new(&field.bbox, &points);
    let sigma = density_var(g, field, &coords);
    let feats = appearance_var(g, field, &coords);
    let color = color_var(g, &field.mlp, feats, &dirs);
    let sigma = g.reshape(sigma, &[b, n]);
    let color = g.reshape(color, &[b, n, 3]);
    let deltas = Tensor::new(&[b, n], ds);
    let rgb = g.composite(sigma, color, &deltas, settings.background);
    RenderVars {
        rgb,
        sigma,
        t: Tensor::new(&[b, n], ts),
        deltas,
    }
}

/// Mean over rays of the squared color error.
pub fn reconstruction_loss(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Graph version of [`reconstruction_loss`] for a `B x 3` prediction.
pub fn reconstruction_loss_var(g: &mut Graph, pred: Var, gt: &Tensor) -> Var {
    let b = g.shape(pred)[0].max(1);
    let target = g.constant(gt.clone());
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    g.mul_scalar(s, 1.0 / b as f64)
}

/// RGB image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_pixels(width: usize, height: usize, px: &[[f64; 3]]) -> Self {
        Self::new(width, height, px.iter().flatten().copied().collect())
    }

    pub fn pixels(&self) -> Vec<[f64; 3]> {
        self.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(3).copied().collect()
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "images {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64)
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` map.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    for ch in 0..3 {
        let (x, y) = (a.channel(ch), b.channel(ch));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::plane_field::{Aabb, FieldShape};
    use proptest::prelude::*;
    use rand::Rng;

    fn ray01() -> Ray {
        Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap()
    }

    #[test]
    fn midpoints_without_jitter() {
        let (t, d) = sample_along_ray(&ray01(), 4, None);
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(d.iter().all(|&x| x > 0.0));
        assert!(d.iter().sum::<f64>() <= 1.0);
    }

    #[test]
    fn jitter_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_along_ray(&ray01(), 16, Some(&mut rng))
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.0.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn transparent_and_half_alpha() {
        let c = composite(
            &[0.0; 5],
            &[[0.3; 3]; 5],
            &[0.1; 5],
            &[0.0, 0.1, 0.2, 0.3, 0.4],
            [0.2, 0.4, 0.6],
        )
        .unwrap();
        assert_eq!(c.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(c.opacity, 0.0);
        assert_eq!(*c.transmittance.last().unwrap(), 1.0);
        let c = composite(&[2f64.ln()], &[[1.0; 3]], &[1.0], &[0.5], [0.0; 3]).unwrap();
        assert!((c.alpha[0] - 0.5).abs() < 1e-15);
        assert!(composite(&[-1.0], &[[0.0; 3]], &[1.0], &[0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn constant_medium_matches_closed_form() {
        let (sigma, len, n) = (1.3, 2.0, 4096);
        let ray = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 0.0, len).unwrap();
        let (t, d) = sample_along_ray(&ray, n, None);
        let c = composite(&vec![sigma; n], &vec![[0.8, 0.1, 0.4]; n], &d, &t, [1.0; 3]).unwrap();
        let e = (-sigma * len).exp();
        for k in 0..3 {
            let expect = [0.8, 0.1, 0.4][k] * (1.0 - e) + e;
            assert!((c.rgb[k] - expect).abs() < 1e-3);
        }
    }

    #[test]
    fn composite_gradients() {
        let sig = Tensor::new(&[1, 3], vec![0.7, 2.0, 0.1]);
        let col = Tensor::new(
            &[1, 3, 3],
            vec![0.1, 0.5, 0.9, 0.3, 0.3, 0.2, 0.8, 0.6, 0.4],
        );
        let deltas = Tensor::new(&[1, 3], vec![0.3, 0.5, 0.2]);
        let err = gradcheck::check(&[sig, col], |g, v| {
            let rgb = g.composite(v[0], v[1], &deltas, [1.0, 0.5, 0.0]);
            let target = g.constant(Tensor::new(&[1, 3], vec![0.2, 0.7, 0.1]));
            let d = g.sub(rgb, target);
            let s = g.square(d);
            g.sum_all(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn graph_composite_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, n) = (5, 9);
        let s: Vec<f64> = (0..b * n).map(|_| rng.random::<f64>() * 3.0).collect();
        let c: Vec<f64> = (0..b * n * 3).map(|_| rng.random()).collect();
        let d: Vec<f64> = (0..b * n)
            .map(|_| 0.05 + rng.random::<f64>() * 0.1)
            .collect();
        let mut g = Graph::no_grad();
        let sv = g.constant(Tensor::new(&[b, n], s.clone()));
        let cv = g.constant(Tensor::new(&[b, n, 3], c.clone()));
        let out = g.composite(sv, cv, &Tensor::new(&[b, n], d.clone()), [1.0; 3]);
        for r in 0..b {
            let cols: Vec<[f64; 3]> = (0..n)
                .map(|i| {
                    [
                        c[(r * n + i) * 3],
                        c[(r * n + i) * 3 + 1],
                        c[(r * n + i) * 3 + 2],
                    ]
                })
                .collect();
            let reference = composite(
                &s[r * n..(r + 1) * n],
                &cols,
                &d[r * n..(r + 1) * n],
                &vec![0.0; n],
                [1.0; 3],
            )
            .unwrap();
            for k in 0..3 {
                assert!((g.value(out).at(&[r, k]) - reference.rgb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_field_renders_background_and_batches_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = FieldShape {
            resolution: 8,
            density_channels: 2,
            appearance_channels: 2,
            appearance_dim: 4,
            mlp_hidden: 8,
            ..Default::default()
        };
        let mut field = PlaneFieldParams::random(&shape, Aabb::default(), &mut rng);
        let settings = RenderSettings {
            n_samples: 16,
            ..Default::default()
        };
        let rays: Vec<Ray> = (0..64)
            .map(|_| {
                let d = normalize([rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, -1.0]);
                Ray::new([0.0, 0.0, 4.0], d, 2.0, 6.0).unwrap()
            })
            .collect();
        let whole = render_rays(&field, None, &rays, &settings).unwrap();
        let mut split = render_rays(&field, None, &rays[..17], &settings).unwrap();
        let rest = render_rays(&field, None, &rays[17..], &settings).unwrap();
        split.rgb.extend(rest.rgb);
        for (a, b) in whole.rgb.iter().zip(&split.rgb) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
        for p in field.density_planes.iter_mut() {
            p.values = Tensor::zeros(p.values.shape());
        }
        for v in field.density_vectors.iter_mut() {
            v.values = Tensor::zeros(v.values.shape());
        }
        let out = render_rays(&field, None, &rays, &settings).unwrap();
        // softplus(-10) leaves a whisper of density; the pixel is background to ~1e-3
        assert!(out
            .rgb
            .iter()
            .all(|p| p.iter().all(|&v| (v - 1.0).abs() < 2e-3)));
    }

    #[test]
    fn loss_and_metrics() {
        let a = vec![[0.5, 0.2, 0.1]; 10];
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect();
        assert!((reconstruction_loss(&b, &a).unwrap() - 0.01).abs() < 1e-12);
        let img = Image::new(16, 16, (0..768).map(|i| (i % 7) as f64 / 7.0).collect());
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let shifted = Image::new(16, 16, img.data.iter().map(|v| v + 0.1).collect());
        assert!((psnr(&img, &shifted).unwrap() - 20.0).abs() < 1e-9);
    }

    /// Direct windowed statistics without separable filtering.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let k = gaussian_window(11, 1.5);
        let mut total = 0.0;
        for ch in 0..3 {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..=a.height - 11 {
                for x0 in 0..=a.width - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let w = k[i] * k[j];
                            let idx = ((y0 + i) * a.width + x0 + j) * 3 + ch;
                            let (p, q) = (a.data[idx], b.data[idx]);
                            mx += w * p;
                            my += w * q;
                            sxx += w * p * p;
                            syy += w * q * q;
                            sxy += w * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_checkerboard_matches_oracle() {
        let board: Vec<f64> = (0..256)
            .flat_map(|i| std::iter::repeat_n(((i / 16 + i % 16) % 2) as f64, 3))
            .collect();
        let a = Image::new(16, 16, board.clone());
        let b = Image::new(16, 16, board.iter().map(|v| 1.0 - v).collect());
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-10);
        assert!(s < 0.0 + 1e-3 || s < 0.5);
    }

    proptest! {
        #[test]
        fn transmittance_partition(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let d: Vec<f64> = (0..n).map(|_| 1e-3 + rng.random::<f64>()).collect();
            let c = composite(&s, &vec![[0.5; 3]; n], &d, &vec![0.0; n], [0.0; 3]).unwrap();
            prop_assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!((0.0..=1.0).contains(&c.opacity));
            prop_assert!((c.opacity + c.transmittance[n] - 1.0).abs() < 1e-6);
            let mut t = 1.0;
            for i in 0..n {
                prop_assert!((c.transmittance[i] - t).abs() < 1e-7);
                t *= 1.0 - c.alpha[i];
            }
        }

        #[test]
        fn psnr_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Image::new(12, 12, (0..432).map(|_| rng.random()).collect());
            let b = Image::new(12, 12, (0..432).map(|_| rng.random()).collect());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}

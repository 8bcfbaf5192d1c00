//! Hyperprior image codec applied to feature planes.
//!
//! Each attribute group (density, appearance) owns one codec. Parameters
//! live in a flat name map so the training masks, the backbone checkpoint,
//! and the container can all address them by group:
//!
//! | prefix     | group             | role                      |
//! |------------|-------------------|---------------------------|
//! | `enc.0.`   | encoder head      | trained, never sent       |
//! | `enc.`     | encoder backbone  | trained, never sent       |
//! | `henc.`    | hyper encoder     | trained, never sent       |
//! | `dec.3.`   | decoder head      | trained and transmitted   |
//! | `dec.`     | decoder backbone  | frozen                    |
//! | `hdec.`    | hyper decoder     | frozen                    |
//! | `prior.`   | factorized prior  | trained and transmitted   |
//!
//! Tensors are single images `(C, H, W)`; a plane is coded on its own.

pub mod backbone;
pub mod entropy;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backbone::{swap_heads, BackboneCheckpoint};
pub use entropy::{QuantMode, LIKELIHOOD_FLOOR, SCALE_LOWER_BOUND};

/// Total downsampling of the analysis transform times the hyper path.
pub const PAD_MULTIPLE: usize = 64;
pub const PRIOR_FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const PRIOR_INIT_SCALE: f64 = 10.0;
const LEAKY_SLOPE: f64 = 0.01;
const GDN_BETA_MIN: f64 = 1e-6;

pub type CodecParams = BTreeMap<String, Tensor>;
/// Parameters placed on a graph, by name.
pub type Bound = BTreeMap<String, Var>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecArch {
    /// Channels of the coded plane (the head width).
    pub channels: usize,
    pub n: usize,
    pub m: usize,
    pub nz: usize,
}

impl CodecArch {
    pub fn backbone(channels: usize) -> Self {
        Self {
            channels,
            n: 128,
            m: 192,
            nz: 128,
        }
    }

    pub fn small(channels: usize) -> Self {
        Self {
            channels,
            n: 64,
            m: 96,
            nz: 64,
        }
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.n == 0
            || self.m == 0
            || self.nz == 0
            || !self.m.is_multiple_of(2)
        {
            return Err(Error::Config(format!("invalid codec sizes {self:?}")));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, n, m, nz) = (self.channels, self.n, self.m, self.nz);
        let h = 3 * m / 2;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut layer = |name: &str, w: Vec<usize>, b: usize| {
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), vec![b]));
        };
        layer("enc.0", vec![n, c, 5, 5], n);
        layer("enc.1", vec![n, n, 5, 5], n);
        layer("enc.2", vec![n, n, 5, 5], n);
        layer("enc.3", vec![m, n, 5, 5], m);
        layer("dec.0", vec![m, n, 5, 5], n);
        layer("dec.1", vec![n, n, 5, 5], n);
        layer("dec.2", vec![n, n, 5, 5], n);
        layer("dec.3", vec![n, c, 5, 5], c);
        layer("henc.0", vec![n, m, 3, 3], n);
        layer("henc.1", vec![n, n, 5, 5], n);
        layer("henc.2", vec![nz, n, 5, 5], nz);
        layer("hdec.0", vec![nz, m, 5, 5], m);
        layer("hdec.1", vec![m, h, 5, 5], h);
        layer("hdec.2", vec![2 * m, h, 3, 3], 2 * m);
        for (prefix, k) in [("enc.gdn", 3), ("dec.igdn", 3)] {
            for i in 0..k {
                out.push((format!("{prefix}{i}.beta"), vec![n]));
                out.push((format!("{prefix}{i}.gamma"), vec![n, n]));
            }
        }
        for i in 0..4 {
            let (fi, fo) = (PRIOR_FILTERS[i], PRIOR_FILTERS[i + 1]);
            out.push((format!("prior.matrix.{i}"), vec![nz, fo, fi]));
            out.push((format!("prior.bias.{i}"), vec![nz, fo, 1]));
            if i < 3 {
                out.push((format!("prior.factor.{i}"), vec![nz, fo, 1]));
            }
        }
        out.sort();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    EncoderHead,
    EncoderBackbone,
    HyperEncoder,
    DecoderHead,
    DecoderBackbone,
    HyperDecoder,
    Prior,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        Some(if name.starts_with("enc.0.") {
            Self::EncoderHead
        } else if name.starts_with("enc.") {
            Self::EncoderBackbone
        } else if name.starts_with("henc.") {
            Self::HyperEncoder
        } else if name.starts_with("dec.3.") {
            Self::DecoderHead
        } else if name.starts_with("dec.") {
            Self::DecoderBackbone
        } else if name.starts_with("hdec.") {
            Self::HyperDecoder
        } else if name.starts_with("prior.") {
            Self::Prior
        } else {
            return None;
        })
    }

    /// Parts the receiver holds from the checkpoint and nobody updates.
    pub fn is_frozen(self) -> bool {
        matches!(self, Self::DecoderBackbone | Self::HyperDecoder)
    }

    /// Parts written into the container.
    pub fn is_transmitted(self) -> bool {
        matches!(self, Self::DecoderHead | Self::Prior)
    }

    pub fn is_encoder_side(self) -> bool {
        matches!(
            self,
            Self::EncoderHead | Self::EncoderBackbone | Self::HyperEncoder
        )
    }
}

fn uniform_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in.max(1) as f64).sqrt()
}

/// Seeded random parameters for every codec tensor.
pub fn random_params(arch: &CodecArch, rng: &mut ChaCha8Rng) -> CodecParams {
    let mut out = CodecParams::new();
    for (name, shape) in arch.param_shapes() {
        let t = if name.ends_with(".bias") && !name.starts_with("prior.") {
            let mut b = Tensor::zeros(&shape);
            if name == "hdec.2.bias" {
                // scale half starts around 1 so the lower bound is not hit everywhere
                b.data_mut()[..arch.m].iter_mut().for_each(|v| *v = 1.0);
            }
            b
        } else if name.ends_with(".weight") {
            Tensor::uniform(&shape, uniform_bound(weight_fan_in(&name, &shape)), rng)
        } else if name.ends_with(".beta") {
            Tensor::ones(&shape)
        } else if name.ends_with(".gamma") {
            let c = shape[0];
            Tensor::from_fn(&shape, |i| if i / c == i % c { 0.1 } else { 0.0 })
        } else {
            prior_init(&name, &shape)
        };
        out.insert(name, t);
    }
    out
}

/// Fresh random head weights for a plane with `channels` channels.
pub fn random_heads(arch: &CodecArch, rng: &mut ChaCha8Rng) -> CodecParams {
    let shapes = arch.param_shapes();
    let mut out = CodecParams::new();
    for (name, shape) in shapes
        .into_iter()
        .filter(|(n, _)| n.starts_with("enc.0.") || n.starts_with("dec.3."))
    {
        let t = if name.ends_with(".weight") {
            Tensor::uniform(&shape, uniform_bound(weight_fan_in(&name, &shape)), rng)
        } else {
            Tensor::zeros(&shape)
        };
        out.insert(name, t);
    }
    out
}

fn is_transposed(name: &str) -> bool {
    (name.starts_with("dec.") || name.starts_with("hdec.0") || name.starts_with("hdec.1"))
        && !name.contains("gdn")
}

/// Inputs feeding one output value; a stride-2 transposed conv sees a
/// quarter of its kernel per output.
fn weight_fan_in(name: &str, shape: &[usize]) -> usize {
    let k2 = shape[2] * shape[3];
    if is_transposed(name) {
        (shape[0] * k2 / 4).max(1)
    } else {
        shape[1] * k2
    }
}

fn prior_init(name: &str, shape: &[usize]) -> Tensor {
    let stages = PRIOR_FILTERS.len() - 1;
    let scale = PRIOR_INIT_SCALE.powf(1.0 / stages as f64);
    if let Some(index) = name.strip_prefix("prior.matrix.") {
        let i: usize = index.parse().expect("prior index");
        let init = (1.0 / scale / PRIOR_FILTERS[i + 1] as f64).exp_m1().ln();
        Tensor::full(shape, init)
    } else {
        Tensor::zeros(shape)
    }
}

/// Places parameters on a graph; `trainable` picks the leaves that need
/// gradients.
pub fn bind(g: &mut Graph, params: &CodecParams, trainable: impl Fn(&str) -> bool) -> Bound {
    params
        .iter()
        .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable(k))))
        .collect()
}

pub fn bind_constants(g: &mut Graph, params: &CodecParams) -> Bound {
    bind(g, params, |_| false)
}

fn get(p: &Bound, name: &str) -> Var {
    *p.get(name)
        .unwrap_or_else(|| panic!("codec parameter {name} is not bound"))
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Var {
    let w = get(p, &format!("{name}.weight"));
    let b = get(p, &format!("{name}.bias"));
    let k = g.shape(w)[2];
    g.conv2d(x, w, b, stride, k / 2)
}

fn deconv(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = get(p, &format!("{name}.weight"));
    let b = get(p, &format!("{name}.bias"));
    let k = g.shape(w)[2];
    g.conv_transpose2d(x, w, b, 2, k / 2, 1)
}

/// `x / sqrt(beta + gamma x^2)`, or `x * sqrt(..)` when inverse.
pub fn gdn(g: &mut Graph, p: &Bound, name: &str, x: Var, inverse: bool) -> Var {
    let beta = g.lower_bound(get(p, &format!("{name}.beta")), GDN_BETA_MIN);
    let gamma = g.lower_bound(get(p, &format!("{name}.gamma")), 0.0);
    let shape = g.shape(x).to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let sq = g.square(x);
    let flat = g.reshape(sq, &[c, hw]);
    let mixed = g.matmul(gamma, flat);
    let beta = g.reshape(beta, &[c, 1]);
    let norm = g.add(mixed, beta);
    let norm = g.sqrt(norm);
    let norm = g.reshape(norm, &shape);
    if inverse {
        g.mul(x, norm)
    } else {
        g.div(x, norm)
    }
}

/// Plane to latent `y`, downsampling by 16.
pub fn analysis(g: &mut Graph, p: &Bound, x: Var) -> Var {
    let mut h = x;
    for i in 0..3 {
        h = conv(g, p, &format!("enc.{i}"), h, 2);
        h = gdn(g, p, &format!("enc.gdn{i}"), h, false);
    }
    conv(g, p, "enc.3", h, 2)
}

/// Frozen part of the decoder: latent to backbone features.
pub fn synthesis_backbone(g: &mut Graph, p: &Bound, y_hat: Var) -> Var {
    let mut h = y_hat;
    for i in 0..3 {
        h = deconv(g, p, &format!("dec.{i}"), h);
        h = gdn(g, p, &format!("dec.igdn{i}"), h, true);
    }
    h
}

/// Transmitted part of the decoder: features to plane channels.
pub fn synthesis_head(g: &mut Graph, p: &Bound, features: Var) -> Var {
    deconv(g, p, "dec.3", features)
}

pub fn synthesis(g: &mut Graph, p: &Bound, y_hat: Var) -> Var {
    let f = synthesis_backbone(g, p, y_hat);
    synthesis_head(g, p, f)
}

pub fn hyper_analysis(g: &mut Graph, p: &Bound, y: Var) -> Var {
    let h = conv(g, p, "henc.0", y, 1);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = conv(g, p, "henc.1", h, 2);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    conv(g, p, "henc.2", h, 2)
}

/// Quantized hyper-latent to `(means, scales)` of the latent, scales
/// already lower-bounded.
pub fn hyper_synthesis(g: &mut Graph, p: &Bound, z_hat: Var) -> (Var, Var) {
    let h = deconv(g, p, "hdec.0", z_hat);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = deconv(g, p, "hdec.1", h);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let out = conv(g, p, "hdec.2", h, 1);
    let m = g.shape(out)[0] / 2;
    let scales = g.slice(out, 0, 0, m);
    let means = g.slice(out, 0, m, 2 * m);
    let scales = g.lower_bound(scales, SCALE_LOWER_BOUND);
    (means, scales)
}

pub fn padded_size(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

/// Graph nodes of one coded plane.
#[derive(Clone, Copy, Debug)]
pub struct PlaneCode {
    pub x_hat: Var,
    pub y: Var,
    pub y_hat: Var,
    pub z: Var,
    pub z_hat: Var,
    pub means: Var,
    pub scales: Var,
    pub bits_y: Var,
    pub bits_z: Var,
}

/// Runs a plane through the full codec, padding to the transform grid
/// and cropping the reconstruction back.
pub fn code_plane(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> PlaneCode {
    let shape = g.shape(x).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let padded = g.mirror_pad(x, padded_size(h) - h, padded_size(w) - w);
    let y = analysis(g, p, padded);
    code_latent(g, p, y, (h, w), mode, rng)
}

/// Codes a latent directly; the auto-decoder path starts here.
pub fn code_latent(
    g: &mut Graph,
    p: &Bound,
    y: Var,
    out_hw: (usize, usize),
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> PlaneCode {
    let z = hyper_analysis(g, p, y);
    let z_hat = entropy::quantize(g, z, None, mode.hyper(), rng);
    let (means, scales) = hyper_synthesis(g, p, z_hat);
    let (y_rate, y_dec) = entropy::quantize_pair(g, y, means, mode, rng);
    let lik_y = entropy::gaussian_likelihood(g, y_rate, means, scales);
    let bits_y = entropy::bits(g, lik_y);
    let lik_z = entropy::prior_likelihood(g, p, z_hat);
    let bits_z = entropy::bits(g, lik_z);
    let full = synthesis(g, p, y_dec);
    let x_hat = g.crop(full, out_hw.0, out_hw.1);
    PlaneCode {
        x_hat,
        y,
        y_hat: y_dec,
        z,
        z_hat,
        means,
        scales,
        bits_y,
        bits_z,
    }
}

/// Latent shape `(M, H/16, W/16)` of a plane after padding.
pub fn latent_shape(arch: &CodecArch, h: usize, w: usize) -> [usize; 3] {
    [arch.m, padded_size(h) / 16, padded_size(w) / 16]
}

pub fn hyper_shape(arch: &CodecArch, h: usize, w: usize) -> [usize; 3] {
    [arch.nz, padded_size(h) / 64, padded_size(w) / 64]
}

/// Random latent initialization for auto-decoder training.
pub fn random_latent(arch: &CodecArch, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(&latent_shape(arch, h, w), 1.0, rng)
}

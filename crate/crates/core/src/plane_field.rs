//! Plane-factorized radiance field.
//!
//! Density and appearance are each stored as three axis-aligned feature
//! planes, every plane paired with a line vector along the remaining axis:
//! XY with Z, XZ with Y, YZ with X. A point's density is the sum over pairs
//! and channels of `plane(u, v) * line(t)`, passed through a shifted
//! softplus. Appearance concatenates the per-pair channel products and
//! projects them with a bias-free basis; a small MLP maps those features
//! together with an encoding of the view direction to RGB.
//!
//! Coordinates are normalized to `[0, 1]` inside the bounding box. A plane
//! of width `W` has its nodes at `u = i / (W - 1)`; coordinates outside
//! the unit range are clamped to the border.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shift applied to the raw density before the softplus.
pub const DENSITY_SHIFT: f64 = -10.0;
/// Octaves in the view-direction encoding.
pub const VIEW_OCTAVES: usize = 2;
/// Width of the view-direction encoding: the direction and a sine/cosine
/// pair per octave and component.
pub const VIEW_ENCODING_DIM: usize = 3 + 3 * 2 * VIEW_OCTAVES;
pub const MAX_MLP_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["x", "y", "z"][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaneAxes {
    XY,
    XZ,
    YZ,
}

impl PlaneAxes {
    pub const ALL: [PlaneAxes; 3] = [PlaneAxes::XY, PlaneAxes::XZ, PlaneAxes::YZ];

    /// `(u, v)` axes: `u` runs along the width, `v` along the height.
    pub fn axes(self) -> (Axis, Axis) {
        match self {
            PlaneAxes::XY => (Axis::X, Axis::Y),
            PlaneAxes::XZ => (Axis::X, Axis::Z),
            PlaneAxes::YZ => (Axis::Y, Axis::Z),
        }
    }

    /// The axis orthogonal to the plane, carried by the paired vector.
    pub fn complement(self) -> Axis {
        match self {
            PlaneAxes::XY => Axis::Z,
            PlaneAxes::XZ => Axis::Y,
            PlaneAxes::YZ => Axis::X,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneAxes::XY => "xy",
            PlaneAxes::XZ => "xz",
            PlaneAxes::YZ => "yz",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| (p[k] - self.min[k]) / (self.max[k] - self.min[k]))
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Self::cube(1.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlane {
    pub axes: PlaneAxes,
    /// `C x H x W`.
    pub values: Tensor,
}

impl FeaturePlane {
    pub fn new(axes: PlaneAxes, values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Shape(format!(
                "feature plane needs C x H x W with H, W >= 2, got {s:?}"
            )));
        }
        if !values.all_finite() {
            return Err(Error::Input("feature plane has non-finite values".into()));
        }
        Ok(Self { axes, values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxisVector {
    pub axis: Axis,
    /// `C x L`.
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`, so a batch maps as `x W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Hidden layers use ReLU, the output layer a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub layers: Vec<Linear>,
}

impl MlpWeights {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() || layers.len() > MAX_MLP_LAYERS {
            return Err(Error::Config(format!(
                "mlp needs 1..={MAX_MLP_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        for (k, l) in layers.iter().enumerate() {
            let w = l.weight.shape();
            if w.len() != 2 || l.bias.shape() != [w[1]] {
                return Err(Error::Shape(format!(
                    "mlp layer {k}: weight {w:?}, bias {:?}",
                    l.bias.shape()
                )));
            }
            if k > 0 && layers[k - 1].weight.shape()[1] != w[0] {
                return Err(Error::Shape(format!(
                    "mlp layer {k} input {} does not chain",
                    w[0]
                )));
            }
        }
        if layers.last().unwrap().weight.shape()[1] != 3 {
            return Err(Error::Shape("mlp must end in 3 outputs".into()));
        }
        Ok(Self { layers })
    }

    /// Uniform init with bound `sqrt(6 / fan_in)` on hidden layers and a
    /// narrower output layer.
    pub fn random(input: usize, hidden: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        assert!((1..=MAX_MLP_LAYERS).contains(&n_layers));
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, n_layers - 1));
        dims.push(3);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let last = k == n_layers - 1;
                let bound = if last {
                    (1.0 / d[0] as f64).sqrt()
                } else {
                    (6.0 / d[0] as f64).sqrt()
                };
                Linear {
                    weight: Tensor::uniform(&[d[0], d[1]], bound, rng),
                    bias: Tensor::zeros(&[d[1]]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFieldParams {
    pub bbox: Aabb,
    pub density_planes: [FeaturePlane; 3],
    pub density_vectors: [AxisVector; 3],
    pub appearance_planes: [FeaturePlane; 3],
    pub appearance_vectors: [AxisVector; 3],
    /// `3 C_app x appearance_dim` projection, no bias.
    pub appearance_basis: Tensor,
    pub mlp: MlpWeights,
}

/// Sizes of a freshly initialized field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldShape {
    pub resolution: usize,
    pub density_channels: usize,
    pub appearance_channels: usize,
    pub appearance_dim: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub init_std: f64,
}

impl Default for FieldShape {
    fn default() -> Self {
        Self {
            resolution: 128,
            density_channels: 8,
            appearance_channels: 24,
            appearance_dim: 27,
            mlp_hidden: 64,
            mlp_layers: 3,
            init_std: 0.1,
        }
    }
}

/// Attribute group a plane belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    Density,
    Appearance,
}

impl Attribute {
    pub const ALL: [Attribute; 2] = [Attribute::Density, Attribute::Appearance];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Density => "density",
            Attribute::Appearance => "appearance",
        }
    }
}

/// Plane slot `k` in container order: three density planes, then three
/// appearance planes, each in XY, XZ, YZ order.
pub fn plane_slot(k: usize) -> (Attribute, PlaneAxes) {
    (Attribute::ALL[k / 3], PlaneAxes::ALL[k % 3])
}

impl PlaneFieldParams {
    pub fn random(shape: &FieldShape, bbox: Aabb, rng: &mut impl Rng) -> Self {
        let r = shape.resolution;
        let plane = |axes, c, rng: &mut _| FeaturePlane {
            axes,
            values: Tensor::randn(&[c, r, r], shape.init_std, rng),
        };
        let vector = |axis, c, rng: &mut _| AxisVector {
            axis,
            values: Tensor::randn(&[c, r], shape.init_std, rng),
        };
        let (cd, ca) = (shape.density_channels, shape.appearance_channels);
        let density_planes = PlaneAxes::ALL.map(|a| plane(a, cd, rng));
        let density_vectors = PlaneAxes::ALL.map(|a| vector(a.complement(), cd, rng));
        let appearance_planes = PlaneAxes::ALL.map(|a| plane(a, ca, rng));
        let appearance_vectors = PlaneAxes::ALL.map(|a| vector(a.complement(), ca, rng));
        let basis_bound = (3.0 / (3 * ca) as f64).sqrt();
        let appearance_basis = Tensor::uniform(&[3 * ca, shape.appearance_dim], basis_bound, rng);
        let mlp = MlpWeights::random(
            shape.appearance_dim + VIEW_ENCODING_DIM,
            shape.mlp_hidden,
            shape.mlp_layers,
            rng,
        );
        Self {
            bbox,
            density_planes,
            density_vectors,
            appearance_planes,
            appearance_vectors,
            appearance_basis,
            mlp,
        }
    }

    pub fn appearance_dim(&self) -> usize {
        self.appearance_basis.shape()[1]
    }

    pub fn planes(&self, attr: Attribute) -> &[FeaturePlane; 3] {
        match attr {
            Attribute::Density => &self.density_planes,
            Attribute::Appearance => &self.appearance_planes,
        }
    }

    pub fn planes_mut(&mut self, attr: Attribute) -> &mut [FeaturePlane; 3] {
        match attr {
            Attribute::Density => &mut self.density_planes,
            Attribute::Appearance => &mut self.appearance_planes,
        }
    }

    pub fn vectors(&self, attr: Attribute) -> &[AxisVector; 3] {
        match attr {
            Attribute::Density => &self.density_vectors,
            Attribute::Appearance => &self.appearance_vectors,
        }
    }

    /// The six planes in container slot order.
    pub fn all_planes(&self) -> Vec<&FeaturePlane> {
        self.density_planes
            .iter()
            .chain(&self.appearance_planes)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for attr in Attribute::ALL {
            let c = self.planes(attr)[0].channels();
            for (p, v) in self.planes(attr).iter().zip(self.vectors(attr)) {
                FeaturePlane::new(p.axes, p.values.clone())?;
                let vs = v.values.shape();
                if p.channels() != c || vs.len() != 2 || vs[0] != c || vs[1] < 2 {
                    return Err(Error::Shape(format!(
                        "{} {} pair has inconsistent channels",
                        attr.name(),
                        p.axes.name()
                    )));
                }
                if p.axes.complement() != v.axis {
                    return Err(Error::Config(format!(
                        "plane {} paired with axis {}",
                        p.axes.name(),
                        v.axis.name()
                    )));
                }
            }
        }
        let ca = self.appearance_planes[0].channels();
        if self.appearance_basis.shape() != [3 * ca, self.appearance_dim()] {
            return Err(Error::Shape(
                "appearance basis does not match appearance channels".into(),
            ));
        }
        if self.mlp.input_dim() != self.appearance_dim() + VIEW_ENCODING_DIM {
            return Err(Error::Shape(
                "mlp input does not match appearance features".into(),
            ));
        }
        Ok(())
    }

    /// Flat name → tensor view, the layout used by archives.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for attr in Attribute::ALL {
            for (p, v) in self.planes(attr).iter().zip(self.vectors(attr)) {
                out.insert(
                    format!("{}.plane.{}", attr.name(), p.axes.name()),
                    p.values.clone(),
                );
                out.insert(
                    format!("{}.vector.{}", attr.name(), v.axis.name()),
                    v.values.clone(),
                );
            }
        }
        out.insert("appearance.basis".into(), self.appearance_basis.clone());
        for (k, l) in self.mlp.layers.iter().enumerate() {
            out.insert(format!("mlp.{k}.weight"), l.weight.clone());
            out.insert(format!("mlp.{k}.bias"), l.bias.clone());
        }
        let b = &self.bbox;
        out.insert(
            "bbox".into(),
            Tensor::new(&[2, 3], b.min.iter().chain(&b.max).copied().collect()),
        );
        out
    }

    pub fn from_tensors(t: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| {
            t.get(name)
                .cloned()
                .ok_or_else(|| Error::Load(format!("missing tensor {name}")))
        };
        let planes = |attr: Attribute| -> Result<[FeaturePlane; 3]> {
            let v: Vec<FeaturePlane> = PlaneAxes::ALL
                .iter()
                .map(|&a| {
                    FeaturePlane::new(a, get(&format!("{}.plane.{}", attr.name(), a.name()))?)
                })
                .collect::<Result<_>>()?;
            Ok(v.try_into().unwrap())
        };
        let vectors = |attr: Attribute| -> Result<[AxisVector; 3]> {
            let v: Vec<AxisVector> = PlaneAxes::ALL
                .iter()
                .map(|&a| {
                    let axis = a.complement();
                    Ok(AxisVector {
                        axis,
                        values: get(&format!("{}.vector.{}", attr.name(), axis.name()))?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(v.try_into().unwrap())
        };
        let mut layers = Vec::new();
        while t.contains_key(&format!("mlp.{}.weight", layers.len())) {
            let k = layers.len();
            layers.push(Linear {
                weight: get(&format!("mlp.{k}.weight"))?,
                bias: get(&format!("mlp.{k}.bias"))?,
            });
        }
        let bbox_t = get("bbox")?;
        if bbox_t.numel() != 6 {
            return Err(Error::Load("bbox must have 6 entries".into()));
        }
        let d = bbox_t.data();
        let params = Self {
            bbox: Aabb {
                min: [d[0], d[1], d[2]],
                max: [d[3], d[4], d[5]],
            },
            density_planes: planes(Attribute::Density)?,
            density_vectors: vectors(Attribute::Density)?,
            appearance_planes: planes(Attribute::Appearance)?,
            appearance_vectors: vectors(Attribute::Appearance)?,
            appearance_basis: get("appearance.basis")?,
            mlp: MlpWeights::new(layers)?,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Rank-1 per-channel residuals added to reconstructed planes, one pair of
/// vectors per plane slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCompensation {
    /// `(v_i: C x H, v_j: C x W)` per plane slot.
    pub pairs: Vec<(Tensor, Tensor)>,
}

impl ResidualCompensation {
    /// `v_i = 0` so every residual starts at exactly zero; `v_j = 1` so the
    /// first gradient step can move `v_i`.
    pub fn new(shapes: &[(usize, usize, usize)]) -> Self {
        Self {
            pairs: shapes
                .iter()
                .map(|&(c, h, w)| (Tensor::zeros(&[c, h]), Tensor::ones(&[c, w])))
                .collect(),
        }
    }

    pub fn for_field(field: &PlaneFieldParams) -> Self {
        let shapes: Vec<_> = field
            .all_planes()
            .iter()
            .map(|p| (p.channels(), p.height(), p.width()))
            .collect();
        Self::new(&shapes)
    }
}

/// `x[c, h, w] + v_i[c, h] * v_j[c, w]`.
pub fn apply_compensation(
    plane: &FeaturePlane,
    v_i: &Tensor,
    v_j: &Tensor,
) -> Result<FeaturePlane> {
    let (c, h, w) = (plane.channels(), plane.height(), plane.width());
    if v_i.shape() != [c, h] || v_j.shape() != [c, w] {
        return Err(Error::Config(format!(
            "compensation vectors {:?}, {:?} do not match plane {c}x{h}x{w}",
            v_i.shape(),
            v_j.shape()
        )));
    }
    let mut out = plane.values.clone();
    let (a, b) = (v_i.data(), v_j.data());
    for ch in 0..c {
        for y in 0..h {
            let s = a[ch * h + y];
            if s == 0.0 {
                continue;
            }
            let row = &mut out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, r) in row.iter_mut().enumerate() {
                *r += s * b[ch * w + x];
            }
        }
    }
    Ok(FeaturePlane {
        axes: plane.axes,
        values: out,
    })
}

/// Graph form of [`apply_compensation`].
pub fn compensate_var(g: &mut Graph, plane: Var, v_i: Var, v_j: Var) -> Var {
    let (c, h) = (g.shape(v_i)[0], g.shape(v_i)[1]);
    let w = g.shape(v_j)[1];
    let a = g.reshape(v_i, &[c, h, 1]);
    let b = g.reshape(v_j, &[c, 1, w]);
    let m = g.mul(a, b);
    g.add(plane, m)
}

/// Interpolation cell and weights for one normalized coordinate.
#[derive(Clone, Copy, Debug)]
struct LinearTap {
    i0: usize,
    f: f64,
}

fn tap(u: f64, n: usize) -> LinearTap {
    let x = u.clamp(0.0, 1.0) * (n - 1) as f64;
    let i0 = (x.floor() as usize).min(n - 2);
    LinearTap {
        i0,
        f: x - i0 as f64,
    }
}

pub fn bilinear_sample(plane: &FeaturePlane, uv: [f64; 2]) -> Result<Vec<f64>> {
    if !uv.iter().all(|v| v.is_finite()) {
        return Err(Error::Input(format!("non-finite plane coordinate {uv:?}")));
    }
    let (c, h, w) = (plane.channels(), plane.height(), plane.width());
    let (tu, tv) = (tap(uv[0], w), tap(uv[1], h));
    let d = plane.values.data();
    Ok((0..c)
        .map(|ch| {
            let at = |y: usize, x: usize| d[(ch * h + y) * w + x];
            let top = at(tv.i0, tu.i0) * (1.0 - tu.f) + at(tv.i0, tu.i0 + 1) * tu.f;
            let bottom = at(tv.i0 + 1, tu.i0) * (1.0 - tu.f) + at(tv.i0 + 1, tu.i0 + 1) * tu.f;
            top * (1.0 - tv.f) + bottom * tv.f
        })
        .collect())
}

impl Graph {
    /// Bilinear samples of a `C x H x W` plane at `uv` points, as `B x C`.
    pub fn sample_plane(&mut self, plane: Var, uv: &[[f64; 2]]) -> Var {
        let s = self.shape(plane).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let taps: Vec<(LinearTap, LinearTap)> =
            uv.iter().map(|p| (tap(p[0], w), tap(p[1], h))).collect();
        let b = taps.len();
        let d = self.value(plane).data();
        let mut out = vec![0.0; b * c];
        for (n, (tu, tv)) in taps.iter().enumerate() {
            let base = tv.i0 * w + tu.i0;
            let (w00, w01) = ((1.0 - tv.f) * (1.0 - tu.f), (1.0 - tv.f) * tu.f);
            let (w10, w11) = (tv.f * (1.0 - tu.f), tv.f * tu.f);
            for ch in 0..c {
                let o = ch * h * w + base;
                out[n * c + ch] = w00 * d[o] + w01 * d[o + 1] + w10 * d[o + w] + w11 * d[o + w + 1];
            }
        }
        self.push(Tensor::new(&[b, c], out), &[plane], move |args| {
            let g = args.grad.data();
            let mut gp = vec![0.0; c * h * w];
            for (n, (tu, tv)) in taps.iter().enumerate() {
                let base = tv.i0 * w + tu.i0;
                let (w00, w01) = ((1.0 - tv.f) * (1.0 - tu.f), (1.0 - tv.f) * tu.f);
                let (w10, w11) = (tv.f * (1.0 - tu.f), tv.f * tu.f);
                for ch in 0..c {
                    let o = ch * h * w + base;
                    let gv = g[n * c + ch];
                    gp[o] += w00 * gv;
                    gp[o + 1] += w01 * gv;
                    gp[o + w] += w10 * gv;
                    gp[o + w + 1] += w11 * gv;
                }
            }
            vec![Some(Tensor::new(&[c, h, w], gp))]
        })
    }

    /// Linear samples of a `C x L` vector at normalized positions, as `B x C`.
    pub fn sample_line(&mut self, line: Var, t: &[f64]) -> Var {
        let s = self.shape(line).to_vec();
        let (c, l) = (s[0], s[1]);
        let taps: Vec<LinearTap> = t.iter().map(|&x| tap(x, l)).collect();
        let b = taps.len();
        let d = self.value(line).data();
        let mut out = vec![0.0; b * c];
        for (n, tp) in taps.iter().enumerate() {
            for ch in 0..c {
                let o = ch * l + tp.i0;
                out[n * c + ch] = d[o] * (1.0 - tp.f) + d[o + 1] * tp.f;
            }
        }
        self.push(Tensor::new(&[b, c], out), &[line], move |args| {
            let g = args.grad.data();
            let mut gl = vec![0.0; c * l];
            for (n, tp) in taps.iter().enumerate() {
                for ch in 0..c {
                    let o = ch * l + tp.i0;
                    gl[o] += (1.0 - tp.f) * g[n * c + ch];
                    gl[o + 1] += tp.f * g[n * c + ch];
                }
            }
            vec![Some(Tensor::new(&[c, l], gl))]
        })
    }
}

/// Direction followed by `sin(2^k pi d)`, `cos(2^k pi d)` per octave.
pub fn encode_view(d: [f64; 3]) -> [f64; VIEW_ENCODING_DIM] {
    let mut out = [0.0; VIEW_ENCODING_DIM];
    out[..3].copy_from_slice(&d);
    let mut i = 3;
    for k in 0..VIEW_OCTAVES {
        let f = (1u32 << k) as f64 * std::f64::consts::PI;
        for &x in &d {
            out[i] = (f * x).sin();
            out[i + 1] = (f * x).cos();
            i += 2;
        }
    }
    out
}

/// A field's parameters as graph nodes. The planes may be leaves, constants,
/// or outputs of the codec.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub bbox: Aabb,
    pub density_planes: [Var; 3],
    pub density_vectors: [Var; 3],
    pub appearance_planes: [Var; 3],
    pub appearance_vectors: [Var; 3],
    pub appearance_basis: Var,
    pub mlp: Vec<(Var, Var)>,
}

impl FieldVars {
    /// Binds every tensor of `params` as a constant.
    pub fn constants(g: &mut Graph, params: &PlaneFieldParams) -> Self {
        Self {
            bbox: params.bbox,
            density_planes: params
                .density_planes
                .each_ref()
                .map(|p| g.constant(p.values.clone())),
            density_vectors: params
                .density_vectors
                .each_ref()
                .map(|v| g.constant(v.values.clone())),
            appearance_planes: params
                .appearance_planes
                .each_ref()
                .map(|p| g.constant(p.values.clone())),
            appearance_vectors: params
                .appearance_vectors
                .each_ref()
                .map(|v| g.constant(v.values.clone())),
            appearance_basis: g.constant(params.appearance_basis.clone()),
            mlp: params
                .mlp
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }
}

/// Per-pair coordinates of a point batch, already normalized and clamped
/// to the box.
pub struct PointCoords {
    pub plane_uv: [Vec<[f64; 2]>; 3],
    pub line_t: [Vec<f64>; 3],
    /// 1 inside the box, 0 outside.
    pub inside: Vec<f64>,
}

impl PointCoords {
    pub fn new(bbox: &Aabb, points: &[[f64; 3]]) -> Self {
        let mut plane_uv: [Vec<[f64; 2]>; 3] = Default::default();
        let mut line_t: [Vec<f64>; 3] = Default::default();
        let mut inside = Vec::with_capacity(points.len());
        for &p in points {
            let n = bbox.normalize(p);
            for (k, axes) in PlaneAxes::ALL.iter().enumerate() {
                let (a, b) = axes.axes();
                plane_uv[k].push([n[a.index()], n[b.index()]]);
                line_t[k].push(n[axes.complement().index()]);
            }
            inside.push(if bbox.contains(p) { 1.0 } else { 0.0 });
        }
        Self {
            plane_uv,
            line_t,
            inside,
        }
    }

    pub fn len(&self) -> usize {
        self.inside.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inside.is_empty()
    }
}

/// Per-pair `B x C` products `plane(u, v) * line(t)`.
fn pair_products(
    g: &mut Graph,
    planes: &[Var; 3],
    vectors: &[Var; 3],
    coords: &PointCoords,
) -> [Var; 3] {
    std::array::from_fn(|k| {
        let p = g.sample_plane(planes[k], &coords.plane_uv[k]);
        let l = g.sample_line(vectors[k], &coords.line_t[k]);
        g.mul(p, l)
    })
}

/// Raw density before the activation, `B`.
pub fn raw_density_var(g: &mut Graph, f: &FieldVars, coords: &PointCoords) -> Var {
    let prods = pair_products(g, &f.density_planes, &f.density_vectors, coords);
    let all = g.concat(&prods, 1);
    g.sum_axis(all, 1)
}

/// `softplus(raw + shift)` inside the box, zero outside; `B`.
pub fn density_var(g: &mut Graph, f: &FieldVars, coords: &PointCoords) -> Var {
    let raw = raw_density_var(g, f, coords);
    let shifted = g.add_scalar(raw, DENSITY_SHIFT);
    let sigma = g.softplus(shifted);
    let mask = g.constant(Tensor::new(&[coords.len()], coords.inside.clone()));
    g.mul(sigma, mask)
}

/// Projected appearance features, `B x appearance_dim`.
pub fn appearance_var(g: &mut Graph, f: &FieldVars, coords: &PointCoords) -> Var {
    let prods = pair_products(g, &f.appearance_planes, &f.appearance_vectors, coords);
    let feats = g.concat(&prods, 1);
    g.matmul(feats, f.appearance_basis)
}

/// MLP color regression from features `B x F` and unit directions.
pub fn color_var(g: &mut Graph, mlp: &[(Var, Var)], features: Var, dirs: &[[f64; 3]]) -> Var {
    let b = dirs.len();
    let enc: Vec<f64> = dirs.iter().flat_map(|&d| encode_view(d)).collect();
    let enc = g.constant(Tensor::new(&[b, VIEW_ENCODING_DIM], enc));
    let mut h = g.concat(&[features, enc], 1);
    for (k, &(w, bias)) in mlp.iter().enumerate() {
        let z = g.matmul(h, w);
        let z = g.add(z, bias);
        h = if k + 1 == mlp.len() {
            g.sigmoid(z)
        } else {
            g.relu(z)
        };
    }
    h
}

fn check_points(points: &[[f64; 3]]) -> Result<()> {
    if points.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input("non-finite query point".into()))
    }
}

pub fn query_density(params: &PlaneFieldParams, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    check_points(points)?;
    let mut g = Graph::no_grad();
    let f = FieldVars::constants(&mut g, params);
    let coords = PointCoords::new(&params.bbox, points);
    let s = density_var(&mut g, &f, &coords);
    Ok(g.value(s).data().to_vec())
}

/// Raw (pre-activation) density; useful for checking the factorization.
pub fn query_raw_density(params: &PlaneFieldParams, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    check_points(points)?;
    let mut g = Graph::no_grad();
    let f = FieldVars::constants(&mut g, params);
    let coords = PointCoords::new(&params.bbox, points);
    let s = raw_density_var(&mut g, &f, &coords);
    Ok(g.value(s).data().to_vec())
}

/// `B x appearance_dim` features.
pub fn query_appearance_features(params: &PlaneFieldParams, points: &[[f64; 3]]) -> Result<Tensor> {
    check_points(points)?;
    let mut g = Graph::no_grad();
    let f = FieldVars::constants(&mut g, params);
    let coords = PointCoords::new(&params.bbox, points);
    let a = appearance_var(&mut g, &f, &coords);
    Ok(g.value(a).clone())
}

pub fn check_unit(d: [f64; 3]) -> Result<()> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (n - 1.0).abs() > 1e-4 || !n.is_finite() {
        return Err(Error::Input(format!(
            "view direction {d:?} is not unit length"
        )));
    }
    Ok(())
}

/// RGB for each row of `features` (`B x F`) seen along `dirs`.
pub fn regress_color(
    mlp: &MlpWeights,
    features: &Tensor,
    dirs: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    for &d in dirs {
        check_unit(d)?;
    }
    if features.ndim() != 2 || features.shape()[0] != dirs.len() {
        return Err(Error::Shape(format!(
            "features {:?} for {} directions",
            features.shape(),
            dirs.len()
        )));
    }
    if features.shape()[1] + VIEW_ENCODING_DIM != mlp.input_dim() {
        return Err(Error::Shape("feature width does not match the mlp".into()));
    }
    let mut g = Graph::no_grad();
    let vars: Vec<(Var, Var)> = mlp
        .layers
        .iter()
        .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
        .collect();
    let f = g.constant(features.clone());
    let c = color_var(&mut g, &vars, f, dirs);
    Ok(g.value(c)
        .data()
        .chunks(3)
        .map(|x| [x[0], x[1], x[2]])
        .collect())
}

/// Scalar density activation, for callers outside a graph.
pub fn activate_density(raw: f64) -> f64 {
    softplus(raw + DENSITY_SHIFT)
}

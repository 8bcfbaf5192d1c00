//! The four training stages and the measurements they report.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::log::{LogRecord, TrainLog};
use super::optim::{cosine_lr, Adam};
use super::params::{
    bind_model, hard_quantized, kind_of, tensors_mut, BindOptions, ParamKind, Stage,
    TrainabilityMask,
};
use crate::autograd::{Graph, Var};
use crate::codec::{self, backbone::frozen_digest, swap_heads, BackboneCheckpoint, QuantMode};
use crate::error::{Error, Result};
use crate::io::dataset::{Dataset, RaySet, Split};
use crate::plane_field::{Aabb, FieldShape, PlaneFieldParams, ResidualCompensation};
use crate::renderer::{
    psnr_from_mse, reconstruction_loss, reconstruction_loss_var, render_rays, render_rays_var, Ray,
    RenderSettings,
};
use crate::scene::{simulate_planes, with_planes, SceneModel};
use crate::tensor::Tensor;

const EVAL_SUBSET_SEED: u64 = 0x5eed;

/// Training rays and a fixed held-out subset for evaluation.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: RaySet,
    pub eval: RaySet,
    pub background: [f64; 3],
    pub bbox: Aabb,
}

impl TrainData {
    /// `eval` is a seeded random subset of `eval_rays` test rays, or of
    /// the training rays when there are no test views.
    pub fn new(data: &Dataset, eval_rays: usize) -> Result<Self> {
        let train = data.rays(Split::Train);
        if train.rays.is_empty() {
            return Err(Error::Dataset("dataset has no training views".into()));
        }
        let test = data.rays(Split::Test);
        let src = if test.rays.is_empty() { &train } else { &test };
        let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SUBSET_SEED);
        let mut idx =
            rand::seq::index::sample(&mut rng, src.rays.len(), eval_rays.min(src.rays.len()))
                .into_vec();
        idx.sort_unstable();
        let eval = RaySet {
            rays: idx.iter().map(|&i| src.rays[i]).collect(),
            colors: idx.iter().map(|&i| src.colors[i]).collect(),
        };
        Ok(Self {
            train,
            eval,
            background: [1.0; 3],
            bbox: data.bbox,
        })
    }
}

pub fn psnr_from_recon(recon: f64) -> f64 {
    psnr_from_mse(recon / 3.0)
}

/// Held-out PSNR of a field as rendered.
pub fn field_psnr(
    field: &PlaneFieldParams,
    comp: Option<&ResidualCompensation>,
    rays: &RaySet,
    settings: &RenderSettings,
) -> Result<f64> {
    let out = render_rays(field, comp, &rays.rays, settings)?;
    Ok(psnr_from_recon(reconstruction_loss(
        &out.rgb,
        &rays.colors,
    )?))
}

/// The field a receiver would see, without the bitstream: mean-rounded
/// latents through the current codecs.
pub fn simulated_field(model: &SceneModel) -> Result<PlaneFieldParams> {
    with_planes(&model.field, &simulate_planes(model)?)
}

pub fn model_psnr(model: &SceneModel, rays: &RaySet) -> Result<f64> {
    field_psnr(
        &simulated_field(model)?,
        Some(&model.compensation),
        rays,
        &model.render,
    )
}

/// Mean over planes of the plane-wise mean squared reconstruction error.
pub fn plane_mse(model: &SceneModel) -> Result<f64> {
    let sim = simulate_planes(model)?;
    let planes = model.field.all_planes();
    let total: f64 = sim
        .iter()
        .zip(&planes)
        .map(|(s, p)| s.zip_map(&p.values, |a, b| (a - b).powi(2)).mean())
        .sum();
    Ok(total / planes.len() as f64)
}

pub fn init_field(shape: &FieldShape, bbox: Aabb, seed: u64) -> PlaneFieldParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PlaneFieldParams::random(shape, bbox, &mut rng)
}

/// Puts re-headed codecs next to a pretrained field.
pub fn init_scene_model(
    field: PlaneFieldParams,
    backbone: &BackboneCheckpoint,
    cfg: &TrainConfig,
) -> SceneModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0dec);
    let (_, dens) = swap_heads(backbone, field.density_planes[0].channels(), &mut rng);
    let (_, app) = swap_heads(backbone, field.appearance_planes[0].channels(), &mut rng);
    let latents = cfg.auto_decoder.then(|| {
        field
            .all_planes()
            .iter()
            .map(|p| codec::random_latent(&backbone.arch, p.height(), p.width(), &mut rng))
            .collect()
    });
    let compensation = ResidualCompensation::for_field(&field);
    let render = RenderSettings {
        n_samples: cfg.eval_samples,
        ..RenderSettings::default()
    };
    SceneModel {
        field,
        compensation,
        codecs: [dens, app],
        latents,
        render,
    }
}

/// Digest of each codec's frozen part.
pub fn frozen_digests(model: &SceneModel, backbone: &BackboneCheckpoint) -> Vec<[u8; 32]> {
    model
        .codecs
        .iter()
        .map(|c| frozen_digest(&backbone.arch, c))
        .collect()
}

struct StepLosses {
    total: Var,
    recon: Var,
    bits: Option<(Var, Var)>,
}

fn lr_for(kind: ParamKind, cfg: &TrainConfig) -> f64 {
    match kind {
        ParamKind::FieldPlane | ParamKind::AxisVector => cfg.lr.field,
        ParamKind::Mlp => cfg.lr.mlp,
        ParamKind::Residual => cfg.lr.residual,
        ParamKind::Latent => cfg.lr.latent,
        ParamKind::Codec(_) => cfg.lr.codec,
    }
}

/// How each stage places the model on the graph.
fn stage_options(
    stage: Stage,
    model: &SceneModel,
    cfg: &TrainConfig,
    freeze_decoder_head: bool,
) -> BindOptions {
    let mut mask = TrainabilityMask::new(stage, model.latents.is_some());
    mask.freeze_decoder_head = freeze_decoder_head;
    let (quant, fake_quant_bits, compensate) = match stage {
        Stage::Pretrain => (None, None, false),
        Stage::Warmup => (Some(QuantMode::Noise), None, false),
        Stage::Joint => (Some(cfg.joint_quant.mode()), None, true),
        Stage::Qat => (Some(cfg.joint_quant.mode()), Some(cfg.weight_bits), true),
    };
    BindOptions {
        mask,
        quant,
        fake_quant_bits,
        compensate,
    }
}

/// Names of the tensors the optimizer updates in `stage`.
pub fn optimized_parameters(model: &SceneModel, stage: Stage, cfg: &TrainConfig) -> Vec<String> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    bind_model(
        &mut g,
        model,
        stage_options(stage, model, cfg, false),
        &mut rng,
    )
    .leaves
    .into_iter()
    .map(|(n, _)| n)
    .collect()
}

/// QAT picks up at the step size joint training ended on.
fn peak_scale(stage: Stage, cfg: &TrainConfig) -> f64 {
    match stage {
        Stage::Qat => cfg.lr.final_ratio,
        _ => 1.0,
    }
}

fn sample_batch(rays: &RaySet, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Ray>, Tensor) {
    let idx: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..rays.rays.len()))
        .collect();
    let batch = idx.iter().map(|&i| rays.rays[i]).collect();
    let gt = Tensor::new(&[n, 3], idx.iter().flat_map(|&i| rays.colors[i]).collect());
    (batch, gt)
}

fn stage_seed(cfg: &TrainConfig, stage: Stage) -> u64 {
    cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (stage as u64 + 1)
}

/// Shared optimization loop. `build` places the model on the graph and
/// returns its trainable leaves with the losses; `eval` gives held-out
/// PSNR for the log.
fn run_stage(
    model: &mut SceneModel,
    cfg: &TrainConfig,
    stage: Stage,
    iters: usize,
    log: &mut TrainLog,
    mut build: impl FnMut(&mut Graph, &SceneModel, &mut ChaCha8Rng) -> (Vec<(String, Var)>, StepLosses),
    eval: impl Fn(&SceneModel) -> Result<f64>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg, stage));
    let mut adam = Adam::new();
    for it in 0..iters {
        let mut g = Graph::new();
        let (leaves, losses) = build(&mut g, model, &mut rng);
        let scalar = |v: Var| g.value(v).data()[0];
        let (bits_y, bits_z) = losses
            .bits
            .map(|(y, z)| (scalar(y), scalar(z)))
            .unwrap_or((0.0, 0.0));
        let (recon, total) = (scalar(losses.recon), scalar(losses.total));
        if !total.is_finite() {
            return Err(Error::Divergence {
                stage: stage.name().into(),
                iter: it,
                detail: format!("loss {total} (recon {recon}, bits {bits_y} + {bits_z})"),
            });
        }
        let grads = g.backward(losses.total);
        let mut params: BTreeMap<String, &mut Tensor> = tensors_mut(model).into_iter().collect();
        for (name, v) in &leaves {
            let Some(grad) = grads.get(*v) else { continue };
            if !grad.all_finite() {
                return Err(Error::Divergence {
                    stage: stage.name().into(),
                    iter: it,
                    detail: format!("non-finite gradient for {name}"),
                });
            }
            let kind = kind_of(name).expect("bound names have kinds");
            let lr = cosine_lr(
                lr_for(kind, cfg) * peak_scale(stage, cfg),
                cfg.lr.final_ratio,
                it,
                iters,
            );
            let p = params.get_mut(name).expect("bound names exist");
            adam.step(name, p, grad, lr);
        }
        let last = it + 1 == iters;
        let psnr_val = if cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || last) {
            Some(eval(model)?)
        } else {
            None
        };
        log.push(LogRecord {
            iter: it,
            stage: stage.name().into(),
            l_recon: recon,
            bits_y,
            bits_z,
            l_total: total,
            psnr_val,
        })?;
    }
    Ok(())
}

fn train_settings(cfg: &TrainConfig, background: [f64; 3], seed: u64) -> RenderSettings {
    RenderSettings {
        n_samples: cfg.train_samples,
        background,
        jitter: true,
        rng_seed: seed,
    }
}

fn render_loss(
    g: &mut Graph,
    bound: &super::params::BoundModel,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Var {
    let (rays, gt) = sample_batch(&data.train, cfg.ray_batch, rng);
    let settings = train_settings(cfg, data.background, 0);
    let rv = render_rays_var(g, &bound.field, &rays, &settings, Some(rng));
    reconstruction_loss_var(g, rv.rgb, &gt)
}

/// Optimizes the uncompressed field on the reconstruction loss alone.
pub fn pretrain_field(
    field: &mut PlaneFieldParams,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    field.validate()?;
    let mut model = SceneModel {
        field: field.clone(),
        compensation: ResidualCompensation::for_field(field),
        codecs: Default::default(),
        latents: None,
        render: RenderSettings {
            n_samples: cfg.eval_samples,
            background: data.background,
            ..RenderSettings::default()
        },
    };
    let opts = stage_options(Stage::Pretrain, &model, cfg, false);
    run_stage(
        &mut model,
        cfg,
        Stage::Pretrain,
        cfg.iters.pretrain,
        log,
        |g, m, rng| {
            let bound = bind_model(g, m, opts, rng);
            let recon = render_loss(g, &bound, data, cfg, rng);
            (
                bound.leaves,
                StepLosses {
                    total: recon,
                    recon,
                    bits: None,
                },
            )
        },
        |m| field_psnr(&m.field, None, &data.eval, &m.render),
    )?;
    *field = model.field;
    Ok(())
}

/// Mean over planes of the mean squared error between each
/// reconstruction and its target.
pub fn plane_reconstruction_loss(g: &mut Graph, pairs: &[(Var, Var)]) -> Var {
    let terms: Vec<Var> = pairs
        .iter()
        .map(|&(x_hat, x)| {
            let d = g.sub(x_hat, x);
            let sq = g.square(d);
            g.mean_all(sq)
        })
        .collect();
    let sum = terms[1..].iter().fold(terms[0], |acc, &t| g.add(acc, t));
    g.mul_scalar(sum, 1.0 / terms.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WarmupReport {
    pub plane_mse_before: f64,
    pub plane_mse_after: f64,
}

/// Fits the codec to reproduce the pretrained planes. The rate is not
/// part of the loss.
pub fn warmup_codec(
    model: &mut SceneModel,
    cfg: &TrainConfig,
    freeze_decoder_head: bool,
    log: &mut TrainLog,
) -> Result<WarmupReport> {
    let before = plane_mse(model)?;
    let opts = stage_options(Stage::Warmup, model, cfg, freeze_decoder_head);
    run_stage(
        model,
        cfg,
        Stage::Warmup,
        cfg.iters.warmup,
        log,
        |g, m, rng| {
            let bound = bind_model(g, m, opts, rng);
            let pairs: Vec<(Var, Var)> = bound
                .codes
                .iter()
                .map(|c| c.x_hat)
                .zip(bound.planes.iter().copied())
                .collect();
            let recon = plane_reconstruction_loss(g, &pairs);
            let bits = total_bits(g, &bound);
            (
                bound.leaves,
                StepLosses {
                    total: recon,
                    recon,
                    bits: Some(bits),
                },
            )
        },
        |m| plane_mse(m).map(psnr_from_mse),
    )?;
    Ok(WarmupReport {
        plane_mse_before: before,
        plane_mse_after: plane_mse(model)?,
    })
}

fn total_bits(g: &mut Graph, bound: &super::params::BoundModel) -> (Var, Var) {
    let mut by = bound.codes[0].bits_y;
    let mut bz = bound.codes[0].bits_z;
    for c in &bound.codes[1..] {
        by = g.add(by, c.bits_y);
        bz = g.add(bz, c.bits_z);
    }
    (by, bz)
}

fn rd_step(
    g: &mut Graph,
    m: &SceneModel,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: BindOptions,
    rng: &mut ChaCha8Rng,
) -> (Vec<(String, Var)>, StepLosses) {
    let bound = bind_model(g, m, opts, rng);
    let recon = render_loss(g, &bound, data, cfg, rng);
    let (by, bz) = total_bits(g, &bound);
    let bits = g.add(by, bz);
    let rate = g.mul_scalar(bits, cfg.lambda);
    let total = g.add(recon, rate);
    (
        bound.leaves,
        StepLosses {
            total,
            recon,
            bits: Some((by, bz)),
        },
    )
}

/// Rate-distortion training of codecs, field, and residuals together.
pub fn joint_train(
    model: &mut SceneModel,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let opts = stage_options(Stage::Joint, model, cfg, false);
    run_stage(
        model,
        cfg,
        Stage::Joint,
        cfg.iters.joint,
        log,
        |g, m, rng| rd_step(g, m, data, cfg, opts, rng),
        |m| model_psnr(m, &data.eval),
    )
}

/// PSNR of the simulated decode with float and with hard-quantized
/// transmitted tensors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantDrop {
    pub psnr_float: f64,
    pub psnr_quantized: f64,
}

impl QuantDrop {
    pub fn measure(model: &SceneModel, data: &TrainData, bits: u8) -> Result<Self> {
        Ok(Self {
            psnr_float: model_psnr(model, &data.eval)?,
            psnr_quantized: model_psnr(&hard_quantized(model, bits)?, &data.eval)?,
        })
    }

    pub fn drop(&self) -> f64 {
        self.psnr_float - self.psnr_quantized
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QatReport {
    pub before: QuantDrop,
    /// Measured on the trained values just before the final projection.
    pub after: QuantDrop,
}

/// Rate-distortion training with transmitted tensors seen through 8-bit
/// fake quantization, then a projection of those tensors onto their grids.
pub fn qat_stage(
    model: &mut SceneModel,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<QatReport> {
    let before = QuantDrop::measure(model, data, cfg.weight_bits)?;
    let opts = stage_options(Stage::Qat, model, cfg, false);
    run_stage(
        model,
        cfg,
        Stage::Qat,
        cfg.iters.qat,
        log,
        |g, m, rng| rd_step(g, m, data, cfg, opts, rng),
        |m| model_psnr(&hard_quantized(m, cfg.weight_bits)?, &data.eval),
    )?;
    let after = QuantDrop::measure(model, data, cfg.weight_bits)?;
    *model = hard_quantized(model, cfg.weight_bits)?;
    Ok(QatReport { before, after })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompressReport {
    pub warmup: WarmupReport,
    pub qat: QatReport,
    pub psnr_pretrained: f64,
    pub psnr_final: f64,
}

/// Warmup, joint training, and QAT on a pretrained field. Fails if any
/// frozen tensor moved.
pub fn compress(
    field: PlaneFieldParams,
    backbone: &BackboneCheckpoint,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(SceneModel, CompressReport)> {
    let mut model = init_scene_model(field, backbone, cfg);
    model.render.background = data.background;
    let psnr_pretrained = field_psnr(&model.field, None, &data.eval, &model.render)?;
    let warmup = warmup_codec(&mut model, cfg, false, log)?;
    joint_train(&mut model, data, cfg, log)?;
    let qat = qat_stage(&mut model, data, cfg, log)?;
    if frozen_digests(&model, backbone)
        .iter()
        .any(|d| *d != backbone.digest())
    {
        return Err(Error::Config(
            "a frozen codec tensor changed during training".into(),
        ));
    }
    let psnr_final = model_psnr(&model, &data.eval)?;
    Ok((
        model,
        CompressReport {
            warmup,
            qat,
            psnr_pretrained,
            psnr_final,
        },
    ))
}

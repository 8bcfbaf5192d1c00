//! Experiment harnesses built from the training stages: rate points,
//! decoder-head tuning spectra, and the auto-decoder comparison.

use serde::Serialize;

use super::config::TrainConfig;
use super::log::TrainLog;
use super::stages::{
    compress, field_psnr, init_scene_model, warmup_codec, CompressReport, TrainData, WarmupReport,
};
use crate::bitstream::container::SceneContainer;
use crate::codec::BackboneCheckpoint;
use crate::error::{Error, Result};
use crate::io::report::RatePoint;
use crate::io::spectrum::{spectrum_analysis, SpectrumReport};
use crate::plane_field::PlaneFieldParams;
use crate::scene::{decode_scene, encode_scene, scene_breakdown, simulate_planes, SceneModel};
use crate::tensor::Tensor;

/// One compressed rate point with everything measured on the receiver side.
pub struct RateRun {
    pub model: SceneModel,
    pub report: CompressReport,
    pub container: Vec<u8>,
    /// Held-out PSNR of the decoded container.
    pub psnr_decoded: f64,
    pub point: RatePoint,
}

/// Compresses, encodes, decodes, and measures.
pub fn rate_point(
    field: &PlaneFieldParams,
    backbone: &BackboneCheckpoint,
    data: &TrainData,
    cfg: &TrainConfig,
    label: &str,
    log: &mut TrainLog,
) -> Result<RateRun> {
    let (model, report) = compress(field.clone(), backbone, data, cfg, log)?;
    let (container, _) = encode_scene(&model, backbone, cfg.weight_bits)?;
    let bytes = container.to_bytes()?;
    let decoded = decode_scene(&SceneContainer::from_bytes(&bytes)?, backbone)?;
    let psnr_decoded = field_psnr(
        &decoded.field,
        Some(&decoded.compensation),
        &data.eval,
        &decoded.render,
    )?;
    let point = RatePoint {
        label: label.into(),
        lambda: cfg.lambda,
        appearance_channels: field.appearance_planes[0].channels(),
        psnr: psnr_decoded,
        breakdown: scene_breakdown(&container, backbone)?,
    };
    Ok(RateRun {
        model,
        report,
        container: bytes,
        psnr_decoded,
        point,
    })
}

/// Rate and quality of one pipeline mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeResult {
    pub mode: &'static str,
    pub container_bytes: u64,
    pub latent_bytes: u64,
    pub psnr: f64,
}

/// The same scene through the encoder pipeline and the auto-decoder
/// pipeline.
pub fn auto_decoder_comparison(
    field: &PlaneFieldParams,
    backbone: &BackboneCheckpoint,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<[ModeResult; 2]> {
    let run = |mode: &'static str, auto_decoder: bool, log: &mut TrainLog| -> Result<ModeResult> {
        let cfg = TrainConfig {
            auto_decoder,
            ..cfg.clone()
        };
        let r = rate_point(field, backbone, data, &cfg, mode, log)?;
        let latent_bytes = r
            .point
            .breakdown
            .groups
            .iter()
            .find(|g| g.group == "planes")
            .map_or(0, |g| g.bytes);
        Ok(ModeResult {
            mode,
            container_bytes: r.container.len() as u64,
            latent_bytes,
            psnr: r.psnr_decoded,
        })
    };
    Ok([run("encoder", false, log)?, run("auto_decoder", true, log)?])
}

/// Simulated planes after a warmup with the decoder head frozen and after
/// one with it trained, next to the pretrained planes.
pub struct HeadTuningPlanes {
    pub original: Vec<Tensor>,
    pub frozen: Vec<Tensor>,
    pub head_tuned: Vec<Tensor>,
    pub frozen_warmup: WarmupReport,
    pub tuned_warmup: WarmupReport,
}

impl HeadTuningPlanes {
    /// Radial spectra of plane slot `k` for the three versions.
    pub fn spectrum(&self, k: usize) -> Result<SpectrumReport> {
        if k >= self.original.len() {
            return Err(Error::Input(format!("plane slot {k} out of range")));
        }
        spectrum_analysis(
            &self.original[k],
            &[
                ("frozen", &self.frozen[k]),
                ("head_tuned", &self.head_tuned[k]),
            ],
        )
    }
}

/// Runs both warmups from the same initialization.
pub fn head_tuning_planes(
    field: &PlaneFieldParams,
    backbone: &BackboneCheckpoint,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<HeadTuningPlanes> {
    let mut frozen = init_scene_model(field.clone(), backbone, cfg);
    let mut tuned = frozen.clone();
    let frozen_warmup = warmup_codec(&mut frozen, cfg, true, log)?;
    let tuned_warmup = warmup_codec(&mut tuned, cfg, false, log)?;
    Ok(HeadTuningPlanes {
        original: field
            .all_planes()
            .iter()
            .map(|p| p.values.clone())
            .collect(),
        frozen: simulate_planes(&frozen)?,
        head_tuned: simulate_planes(&tuned)?,
        frozen_warmup,
        tuned_warmup,
    })
}

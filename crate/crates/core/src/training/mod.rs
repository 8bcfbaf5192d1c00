//! Per-scene optimization: pretraining the field, warming up the codec on
//! the pretrained planes, joint rate-distortion training, and
//! quantization-aware fine-tuning of everything the container carries.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod log;
pub mod optim;
pub mod params;
pub mod stages;

pub use config::{CodecSize, JointQuant, LearningRates, StageIters, TrainConfig};
pub use experiments::{
    auto_decoder_comparison, head_tuning_planes, rate_point, HeadTuningPlanes, ModeResult, RateRun,
};
pub use log::{LogRecord, TrainLog};
pub use params::{ParamKind, Role, Stage, TrainabilityMask};
pub use stages::{
    compress, field_psnr, init_field, init_scene_model, joint_train, model_psnr,
    optimized_parameters, plane_mse, plane_reconstruction_loss, pretrain_field, qat_stage,
    simulated_field, warmup_codec, CompressReport, QatReport, QuantDrop, TrainData, WarmupReport,
};

//! Training configuration and its named profiles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::QuantMode;
use crate::error::{Error, Result};
use crate::plane_field::FieldShape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageIters {
    pub pretrain: usize,
    pub warmup: usize,
    pub joint: usize,
    pub qat: usize,
}

/// Peak Adam step sizes; every stage decays them with a half cosine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    /// Feature planes and axis vectors.
    pub field: f64,
    /// Color MLP and the appearance basis.
    pub mlp: f64,
    /// Every trainable codec group.
    pub codec: f64,
    pub residual: f64,
    /// Free latents in auto-decoder mode.
    pub latent: f64,
    /// Final fraction of the peak reached at the end of a stage.
    pub final_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecSize {
    /// 128 / 192 / 128 filters.
    Full,
    /// 64 / 96 / 64 filters.
    Small,
    /// 32 / 48 / 32 filters, for tests.
    Tiny,
}

impl CodecSize {
    /// `(n, m, nz)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            CodecSize::Full => (128, 192, 128),
            CodecSize::Small => (64, 96, 64),
            CodecSize::Tiny => (32, 48, 32),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecSize::Full => "full",
            CodecSize::Small => "small",
            CodecSize::Tiny => "tiny",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointQuant {
    Noise,
    Mixed,
}

impl JointQuant {
    pub fn mode(self) -> QuantMode {
        match self {
            JointQuant::Noise => QuantMode::Noise,
            JointQuant::Mixed => QuantMode::Mixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: String,
    pub iters: StageIters,
    pub lr: LearningRates,
    /// Weight of the latent bit count against the per-ray mean squared error.
    pub lambda: f64,
    pub ray_batch: usize,
    /// Samples per ray while training.
    pub train_samples: usize,
    /// Samples per ray for evaluation and the transmitted render settings.
    pub eval_samples: usize,
    pub field: FieldShape,
    pub codec: CodecSize,
    pub joint_quant: JointQuant,
    /// Latents become free tensors and the encoders are dropped.
    pub auto_decoder: bool,
    pub weight_bits: u8,
    pub seed: u64,
    /// Held-out PSNR is logged every this many iterations (0 disables).
    pub eval_every: usize,
    /// Held-out rays used by the periodic evaluation.
    pub eval_rays: usize,
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            iters: StageIters {
                pretrain: 30_000,
                warmup: 1_000,
                joint: 100_000,
                qat: 10_000,
            },
            lr: LearningRates {
                field: 2e-2,
                mlp: 1e-3,
                codec: 1e-4,
                residual: 1e-3,
                latent: 1e-2,
                final_ratio: 0.1,
            },
            lambda: 1e-8,
            ray_batch: 4096,
            train_samples: 256,
            eval_samples: 256,
            field: FieldShape {
                resolution: 300,
                appearance_channels: 48,
                ..FieldShape::default()
            },
            codec: CodecSize::Full,
            joint_quant: JointQuant::Noise,
            auto_decoder: false,
            weight_bits: 8,
            seed: 0,
            eval_every: 5_000,
            eval_rays: 4096,
        }
    }

    /// Desk-scale schedule on a workstation.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            iters: StageIters {
                pretrain: 2_000,
                warmup: 1_000,
                joint: 8_000,
                qat: 1_000,
            },
            ray_batch: 1024,
            train_samples: 128,
            eval_samples: 128,
            lambda: 1e-7,
            field: FieldShape {
                resolution: 128,
                appearance_channels: 24,
                ..FieldShape::default()
            },
            codec: CodecSize::Small,
            eval_every: 1_000,
            eval_rays: 2048,
            ..Self::paper()
        }
        .named("desk")
    }

    /// Minutes on one CPU core; used by the tests.
    pub fn tiny() -> Self {
        Self {
            iters: StageIters {
                pretrain: 600,
                warmup: 200,
                joint: 300,
                qat: 100,
            },
            lr: LearningRates {
                codec: 1e-3,
                ..Self::paper().lr
            },
            ray_batch: 256,
            train_samples: 48,
            eval_samples: 96,
            field: FieldShape {
                resolution: 96,
                density_channels: 4,
                appearance_channels: 8,
                appearance_dim: 12,
                mlp_hidden: 32,
                mlp_layers: 2,
                init_std: 0.1,
            },
            codec: CodecSize::Tiny,
            eval_every: 0,
            eval_rays: 1024,
            ..Self::desk()
        }
        .named("tiny")
    }

    fn named(mut self, name: &str) -> Self {
        self.profile = name.into();
        self
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected paper, desk, or tiny)"
            ))),
        }
    }

    /// Reads a TOML file. A `profile` key picks the base and any other key
    /// overrides it, so a file may hold just the values it changes.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let base_name = over
            .get("profile")
            .and_then(|v| v.as_str())
            .unwrap_or("desk");
        let base = Self::profile(base_name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, over);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            ));
        }
        let lr = &self.lr;
        if [lr.field, lr.mlp, lr.codec, lr.residual, lr.latent]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("learning rates must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&lr.final_ratio) {
            return bad("final_ratio must lie in [0, 1]".into());
        }
        if self.ray_batch == 0 || self.train_samples < 2 || self.eval_samples < 2 {
            return bad("ray_batch must be > 0 and sample counts >= 2".into());
        }
        let f = &self.field;
        if f.resolution < 2
            || f.density_channels == 0
            || f.appearance_channels == 0
            || f.appearance_dim == 0
        {
            return bad(format!("degenerate field shape {f:?}"));
        }
        if !(1..=crate::plane_field::MAX_MLP_LAYERS).contains(&f.mlp_layers) {
            return bad(format!(
                "mlp_layers must be 1..={}",
                crate::plane_field::MAX_MLP_LAYERS
            ));
        }
        if !(2..=16).contains(&self.weight_bits) {
            return bad(format!(
                "weight_bits must be 2..=16, got {}",
                self.weight_bits
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

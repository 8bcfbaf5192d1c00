//! Backbone checkpoints and head swapping.
//!
//! A checkpoint holds a full three-channel image codec. Adapting it to a
//! feature plane keeps every tensor except the two heads, which are
//! re-initialized at the plane's channel count. The digest covers only the
//! frozen tensors plus the sizes, so any receiver holding the same backbone
//! computes the same 32 bytes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{random_heads, random_params, CodecArch, CodecParams, ParamGroup};
use crate::error::{Error, Result};
use crate::io::archive::{NamedTensorArchive, TensorFlags};

pub const IMAGE_CHANNELS: usize = 3;
const DIGEST_TAG: &[u8] = b"nrfc-backbone-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneCheckpoint {
    pub arch: CodecArch,
    pub params: CodecParams,
}

impl BackboneCheckpoint {
    /// Deterministic stand-in used when no trained backbone is available.
    pub fn random(n: usize, m: usize, nz: usize, seed: u64) -> Self {
        let arch = CodecArch {
            channels: IMAGE_CHANNELS,
            n,
            m,
            nz,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            arch,
            params: random_params(&arch, &mut rng),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        frozen_digest(&self.arch, &self.params)
    }

    pub fn to_archive(&self) -> NamedTensorArchive {
        let mut a = NamedTensorArchive::new();
        for (k, t) in &self.params {
            let frozen = ParamGroup::of(k).is_some_and(ParamGroup::is_frozen);
            a.insert(
                k.clone(),
                t.clone(),
                if frozen {
                    TensorFlags::FROZEN
                } else {
                    TensorFlags::TRAINABLE
                },
            );
        }
        for (key, v) in [
            ("codec.n", self.arch.n),
            ("codec.m", self.arch.m),
            ("codec.nz", self.arch.nz),
        ] {
            a.meta.insert(key.into(), v.to_string());
        }
        a.meta.insert("digest".into(), hex::encode(self.digest()));
        a
    }

    pub fn from_archive(a: &NamedTensorArchive) -> Result<Self> {
        let size = |key: &str| -> Result<usize> {
            a.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Load(format!("checkpoint metadata lacks {key}")))
        };
        let arch = CodecArch {
            channels: IMAGE_CHANNELS,
            n: size("codec.n")?,
            m: size("codec.m")?,
            nz: size("codec.nz")?,
        };
        arch.validate()?;
        let mut params = CodecParams::new();
        for (name, shape) in arch.param_shapes() {
            let t = a
                .get(&name)
                .ok_or_else(|| Error::Load(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t.clone());
        }
        let ck = Self { arch, params };
        if let Some(stored) = a.meta.get("digest") {
            let actual = hex::encode(ck.digest());
            if *stored != actual {
                return Err(Error::DigestMismatch {
                    expected: stored.clone(),
                    actual,
                });
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&NamedTensorArchive::load(path)?)
    }

    /// Loads `path` when given; otherwise falls back to the seeded random
    /// backbone and says so in the returned warning.
    pub fn load_or_random(
        path: Option<&Path>,
        n: usize,
        m: usize,
        nz: usize,
        seed: u64,
    ) -> Result<(Self, Option<String>)> {
        match path {
            Some(p) => {
                let ck = Self::load(p)?;
                if (ck.arch.n, ck.arch.m, ck.arch.nz) != (n, m, nz) {
                    return Err(Error::Config(format!(
                        "checkpoint sizes ({}, {}, {}) differ from profile ({n}, {m}, {nz})",
                        ck.arch.n, ck.arch.m, ck.arch.nz
                    )));
                }
                Ok((ck, None))
            }
            None => Ok((
                Self::random(n, m, nz, seed),
                Some(format!(
                    "no backbone checkpoint given; using random backbone with seed {seed}"
                )),
            )),
        }
    }
}

/// SHA-256 over the sizes and every frozen tensor in name order.
pub fn frozen_digest(arch: &CodecArch, params: &CodecParams) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(DIGEST_TAG);
    for v in [arch.n, arch.m, arch.nz] {
        h.update((v as u32).to_le_bytes());
    }
    for (name, t) in params
        .iter()
        .filter(|(k, _)| ParamGroup::of(k).is_some_and(ParamGroup::is_frozen))
    {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    h.finalize().into()
}

/// Codec for a plane with `channels` channels: the checkpoint with both
/// heads replaced by fresh random ones.
pub fn swap_heads(
    ckpt: &BackboneCheckpoint,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> (CodecArch, CodecParams) {
    let arch = ckpt.arch.with_channels(channels);
    let mut params: CodecParams = ckpt
        .params
        .iter()
        .filter(|(k, _)| {
            !matches!(
                ParamGroup::of(k),
                Some(ParamGroup::EncoderHead | ParamGroup::DecoderHead)
            )
        })
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    params.extend(random_heads(&arch, rng));
    (arch, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swapped_codec_keeps_frozen_tensors() {
        let ck = BackboneCheckpoint::random(8, 12, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (arch, params) = swap_heads(&ck, 5, &mut rng);
        assert_eq!(params["enc.0.weight"].shape(), &[8, 5, 5, 5]);
        assert_eq!(params["dec.3.weight"].shape(), &[8, 5, 5, 5]);
        assert_eq!(params.len(), arch.param_shapes().len());
        assert_eq!(frozen_digest(&arch, &params), ck.digest());
        assert_eq!(params["hdec.1.weight"], ck.params["hdec.1.weight"]);
    }

    #[test]
    fn digest_changes_with_frozen_tensors_only() {
        let ck = BackboneCheckpoint::random(8, 12, 6, 7);
        let mut other = ck.clone();
        other.params.get_mut("prior.bias.0").unwrap().data_mut()[0] += 1.0;
        other.params.get_mut("enc.1.weight").unwrap().data_mut()[0] += 1.0;
        assert_eq!(other.digest(), ck.digest());
        other.params.get_mut("dec.igdn1.gamma").unwrap().data_mut()[3] += 1e-12;
        assert_ne!(other.digest(), ck.digest());
        assert_ne!(
            BackboneCheckpoint::random(8, 12, 6, 8).digest(),
            ck.digest()
        );
    }

    #[test]
    fn archive_roundtrip_and_tamper_detection() {
        let ck = BackboneCheckpoint::random(4, 6, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.ntar");
        ck.save(&path).unwrap();
        assert_eq!(BackboneCheckpoint::load(&path).unwrap(), ck);
        let mut a = ck.to_archive();
        a.entries
            .get_mut("hdec.0.weight")
            .unwrap()
            .tensor
            .data_mut()[0] = 9.0;
        assert!(matches!(
            BackboneCheckpoint::from_archive(&a),
            Err(Error::DigestMismatch { .. })
        ));
        let (fallback, warn) = BackboneCheckpoint::load_or_random(None, 4, 6, 4, 1).unwrap();
        assert_eq!(fallback, ck);
        assert!(warn.is_some());
        assert!(BackboneCheckpoint::load_or_random(Some(&path), 8, 6, 4, 1).is_err());
    }
}

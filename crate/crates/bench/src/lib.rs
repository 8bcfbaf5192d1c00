//! Seeded fixtures shared by the benchmarks.

use nrfc::bitstream::golden::{random_stream, random_tables, SymbolStream};
use nrfc::bitstream::CdfTable;
use nrfc::codec::{random_params, CodecArch, CodecParams};
use nrfc::plane_field::{Aabb, PlaneFieldParams};
use nrfc::renderer::{Camera, Ray};
use nrfc::tensor::Tensor;
use nrfc::training::{init_field, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn symbol_stream(len: usize) -> (Vec<CdfTable>, SymbolStream) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tables = random_tables(&mut rng, 8, 256);
    let stream = random_stream(&mut rng, &tables, len);
    (tables, stream)
}

/// Tiny-profile codec sized for a plane with `channels` channels.
pub fn codec(channels: usize) -> CodecParams {
    let (n, m, nz) = TrainConfig::tiny().codec.dims();
    let arch = CodecArch { channels, n, m, nz };
    random_params(&arch, &mut ChaCha8Rng::seed_from_u64(2))
}

pub fn plane(channels: usize, side: usize) -> Tensor {
    Tensor::randn(
        &[channels, side, side],
        0.3,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
}

pub fn field() -> PlaneFieldParams {
    init_field(&TrainConfig::tiny().field, Aabb::default(), 4)
}

/// The top `rows` rows of a 128 pixel view of the origin.
pub fn rays(rows: usize) -> Vec<Ray> {
    let cam = Camera::look_at([3.0, 2.0, 2.0], [0.0; 3], [0.0, 0.0, 1.0], 128, 128, 0.7);
    let mut rays = cam.rays(2.0, 6.0);
    rays.truncate(rows * 128);
    rays
}

//! Affine 8-bit quantization records for transmitted parameters.
//!
//! `q = clamp(round(v / scale + zero_point), 0, 2^bits - 1)` and
//! `v' = scale * (q - zero_point)`. Symbols are range coded against their
//! own histogram, which is stored sparsely next to the payload.

use super::cdf::{quantize_probabilities, CdfTable};
use super::reader::{ByteReader, ByteWriter};
use super::{decode_symbols, encode_symbols, CoderError, ContainerError};
use crate::tensor::Tensor;

pub const DEFAULT_BITS: u8 = 8;
/// Upper bound on decoded tensor sizes, guarding against hostile headers.
pub const MAX_RECORD_ELEMENTS: usize = 1 << 26;
const MAX_NDIM: usize = 6;

/// Rounds `v` onto the grid `scale * (q - zero_point)`, `q in [0, qmax]`.
pub fn snap(v: f64, scale: f64, zero_point: i32, qmax: u32) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    (grid_index(v, scale, zero_point, qmax) - zero_point as i64) as f64 * scale
}

/// Low mantissa bits cleared from fitted scales. With 22 significant bits
/// left, `(q - zero_point) * scale` is exact for offsets below 2^31.
const SCALE_DROP_BITS: u32 = 30;

/// Rounds a positive scale up to 22 significant bits, so that snapped
/// values are exact multiples of it and refitting them finds it again.
fn coarse_scale(scale: f64) -> f64 {
    let mask = (1u64 << SCALE_DROP_BITS) - 1;
    f64::from_bits((scale.to_bits() + mask) & !mask)
}

fn grid_index(v: f64, scale: f64, zero_point: i32, qmax: u32) -> i64 {
    let q = (v / scale + zero_point as f64).round();
    if q.is_nan() {
        return zero_point.clamp(0, qmax as i32) as i64;
    }
    q.clamp(0.0, qmax as f64) as i64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantGrid {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantGrid {
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Grid spanning `[min, max]` of the data.
    pub fn fit(data: &[f64], bits: u8) -> Self {
        assert!((1..=16).contains(&bits));
        let qmax = (1u32 << bits) - 1;
        let (min, max) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if data.is_empty() || max == min {
            let c = if data.is_empty() { 0.0 } else { min };
            return if c == 0.0 {
                Self {
                    scale: 0.0,
                    zero_point: 0,
                    bits,
                }
            } else {
                Self {
                    scale: c.abs(),
                    zero_point: if c > 0.0 { 0 } else { 1 },
                    bits,
                }
            };
        }
        let mut scale = (max - min) / qmax as f64;
        // a spread that is tiny next to the magnitude would need an enormous
        // zero point; widen the step until the offset fits comfortably
        let limit = (1u64 << 30) as f64;
        if (min / scale).abs() > limit {
            scale = min.abs().max(max.abs()) / limit;
        }
        let scale = coarse_scale(scale);
        let zero_point = (-min / scale).round() as i32;
        Self {
            scale,
            zero_point,
            bits,
        }
    }

    pub fn snap(&self, v: f64) -> f64 {
        snap(v, self.scale, self.zero_point, self.qmax())
    }

    pub fn index(&self, v: f64) -> u32 {
        if self.scale == 0.0 {
            return 0;
        }
        grid_index(v, self.scale, self.zero_point, self.qmax()) as u32
    }

    pub fn value(&self, q: u32) -> f64 {
        (q as i64 - self.zero_point as i64) as f64 * self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub grid: QuantGrid,
    /// Smallest coded index; the histogram covers `q_lo..q_lo + freqs.len()`.
    pub q_lo: u32,
    pub freqs: Vec<u32>,
    pub payload: Vec<u8>,
}

/// Quantizes with a grid fitted to the tensor's range.
pub fn quantize_weights(
    name: &str,
    tensor: &Tensor,
    bits: u8,
) -> Result<QuantizedTensorRecord, CoderError> {
    quantize_with_grid(name, tensor, QuantGrid::fit(tensor.data(), bits))
}

/// Quantizes with a given grid. Values already on the grid are unchanged by
/// a quantize/dequantize round trip, which makes re-encoding idempotent.
pub fn quantize_with_grid(
    name: &str,
    tensor: &Tensor,
    grid: QuantGrid,
) -> Result<QuantizedTensorRecord, CoderError> {
    if !tensor.all_finite() {
        return Err(CoderError::InvalidTable(format!(
            "tensor {name} has non-finite values"
        )));
    }
    let q: Vec<u32> = tensor.data().iter().map(|&v| grid.index(v)).collect();
    let (q_lo, q_hi) = match (q.iter().min(), q.iter().max()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, 0),
    };
    let mut counts = vec![0u64; (q_hi - q_lo + 1) as usize];
    for &v in &q {
        counts[(v - q_lo) as usize] += 1;
    }
    let n = q.len().max(1) as f64;
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let freqs = quantize_probabilities(&probs)?;
    let payload = if freqs.len() == 1 {
        Vec::new()
    } else {
        let table = CdfTable::from_frequencies(&freqs, q_lo as i32, false)?;
        let symbols: Vec<i32> = q.iter().map(|&v| v as i32).collect();
        encode_symbols(&symbols, &[table], &vec![0; symbols.len()])?
    };
    Ok(QuantizedTensorRecord {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
        grid,
        q_lo,
        freqs,
        payload,
    })
}

pub fn dequantize_weights(record: &QuantizedTensorRecord) -> Result<Tensor, CoderError> {
    let numel: usize = record.shape.iter().product();
    let indices: Vec<i32> = if record.freqs.len() == 1 {
        vec![record.q_lo as i32; numel]
    } else {
        let table = CdfTable::from_frequencies(&record.freqs, record.q_lo as i32, false)?;
        decode_symbols(&record.payload, &[table], &vec![0; numel])?
    };
    let data = indices
        .into_iter()
        .map(|q| record.grid.value(q as u32))
        .collect();
    Ok(Tensor::new(&record.shape, data))
}

impl QuantizedTensorRecord {
    pub fn write(&self, w: &mut ByteWriter) {
        w.short_string(&self.name);
        w.u8(self.shape.len() as u8);
        for &d in &self.shape {
            w.u32(d as u32);
        }
        w.u8(self.grid.bits);
        w.f64(self.grid.scale);
        w.i32(self.grid.zero_point);
        w.u16(self.q_lo as u16);
        w.u16((self.freqs.len() - 1) as u16);
        if self.freqs.len() > 1 {
            for &f in &self.freqs {
                w.u16((f - 1) as u16);
            }
        }
        w.blob(&self.payload);
    }

    pub fn read(r: &mut ByteReader) -> Result<Self, ContainerError> {
        let bad = |detail: String| ContainerError::Malformed {
            what: "weight record".into(),
            detail,
        };
        let name = r.short_string("record name")?;
        let ndim = r.u8("record rank")? as usize;
        if ndim > MAX_NDIM {
            return Err(bad(format!("rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = r.u32("record dims")? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel > MAX_RECORD_ELEMENTS {
            return Err(bad(format!("{numel} elements")));
        }
        let bits = r.u8("record bits")?;
        if !(1..=16).contains(&bits) {
            return Err(bad(format!("{bits} bits")));
        }
        let scale = r.f64("record scale")?;
        if !scale.is_finite() || scale < 0.0 {
            return Err(bad(format!("scale {scale}")));
        }
        let zero_point = r.i32("record zero point")?;
        let q_lo = r.u16("record histogram")? as u32;
        let entries = r.u16("record histogram")? as usize + 1;
        let qmax = (1u32 << bits) - 1;
        if q_lo as usize + entries - 1 > qmax as usize {
            return Err(bad("histogram exceeds grid".into()));
        }
        let freqs = if entries == 1 {
            vec![1 << 16]
        } else {
            let mut f = Vec::with_capacity(entries);
            for _ in 0..entries {
                f.push(r.u16("record histogram")? as u32 + 1);
            }
            f
        };
        if freqs.iter().map(|&f| f as u64).sum::<u64>() != 1 << 16 {
            return Err(bad("histogram does not sum to 2^16".into()));
        }
        let payload = r.blob("record payload")?.to_vec();
        Ok(Self {
            name,
            shape,
            grid: QuantGrid {
                scale,
                zero_point,
                bits,
            },
            q_lo,
            freqs,
            payload,
        })
    }
}

/// A named group of records, serialized as a u16 count followed by records.
pub fn write_records(records: &[QuantizedTensorRecord]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u16(records.len() as u16);
    for r in records {
        r.write(&mut w);
    }
    w.into_inner()
}

pub fn read_records(bytes: &[u8]) -> Result<Vec<QuantizedTensorRecord>, ContainerError> {
    let mut r = ByteReader::new(bytes);
    let n = r.u16("record count")? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        out.push(QuantizedTensorRecord::read(&mut r)?);
    }
    r.finish("weight records")?;
    Ok(out)
}

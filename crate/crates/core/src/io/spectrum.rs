//! Radially averaged Fourier spectra of feature planes.
//!
//! Frequencies are in cycles per sample, so the Nyquist limit is 0.5. The
//! 32 bins split `[0, 0.5]` evenly; diagonal frequencies beyond 0.5 fall in
//! the last bin. The high band is everything above 0.25.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPECTRUM_BINS: usize = 32;
pub const NYQUIST: f64 = 0.5;
pub const HIGH_BAND_START: f64 = 0.25;
const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSpectrum {
    pub name: String,
    /// Mean of `log10 |F|` over the coefficients of each bin.
    pub mean_log_magnitude: Vec<f64>,
    /// Sum of `|F|^2 / (H W)` per bin.
    pub energy: Vec<f64>,
    pub total_energy: f64,
    pub high_band_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    /// Bin edges, `SPECTRUM_BINS + 1` values from 0 to Nyquist.
    pub bin_edges: Vec<f64>,
    pub variants: Vec<VariantSpectrum>,
}

impl SpectrumReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSpectrum> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    let k = if k > n / 2 {
        k as f64 - n as f64
    } else {
        k as f64
    };
    k / n as f64
}

/// `|F|^2` of every channel's 2D DFT, laid out like the input.
pub fn power_spectrum(plane: &Tensor) -> Result<Tensor> {
    if plane.ndim() != 3 {
        return Err(Error::Shape(format!(
            "spectrum needs a C x H x W plane, got {:?}",
            plane.shape()
        )));
    }
    let (c, h, w) = (plane.shape()[0], plane.shape()[1], plane.shape()[2]);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for ch in 0..c {
        let src = &plane.data()[ch * h * w..(ch + 1) * h * w];
        let mut buf: Vec<Complex<f64>> = src.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (d, v) in dst.iter_mut().zip(&buf) {
            *d = v.norm_sqr();
        }
    }
    Ok(out)
}

fn analyze_one(name: &str, plane: &Tensor) -> Result<VariantSpectrum> {
    let power = power_spectrum(plane)?;
    let (c, h, w) = (plane.shape()[0], plane.shape()[1], plane.shape()[2]);
    let norm = (h * w) as f64;
    let mut energy = vec![0.0; SPECTRUM_BINS];
    let mut log_sum = vec![0.0; SPECTRUM_BINS];
    let mut count = vec![0usize; SPECTRUM_BINS];
    let mut high = 0.0;
    for ch in 0..c {
        for y in 0..h {
            let fy = signed_freq(y, h);
            for x in 0..w {
                let fx = signed_freq(x, w);
                let r = (fx * fx + fy * fy).sqrt();
                let bin = ((r / NYQUIST * SPECTRUM_BINS as f64) as usize).min(SPECTRUM_BINS - 1);
                let p = power.data()[(ch * h + y) * w + x];
                energy[bin] += p / norm;
                log_sum[bin] += (p.sqrt() + LOG_EPS).log10();
                count[bin] += 1;
                if r > HIGH_BAND_START {
                    high += p / norm;
                }
            }
        }
    }
    let total: f64 = energy.iter().sum();
    let mean_log_magnitude = log_sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| {
            if n == 0 {
                LOG_EPS.log10()
            } else {
                s / n as f64
            }
        })
        .collect();
    Ok(VariantSpectrum {
        name: name.to_string(),
        mean_log_magnitude,
        energy,
        total_energy: total,
        high_band_ratio: if total > 0.0 { high / total } else { 0.0 },
    })
}

/// Spectrum of `original` followed by each named variant.
pub fn spectrum_analysis(
    original: &Tensor,
    variants: &[(&str, &Tensor)],
) -> Result<SpectrumReport> {
    let mut out = vec![analyze_one("original", original)?];
    for (name, v) in variants {
        if v.shape() != original.shape() {
            return Err(Error::Shape(format!(
                "variant {name} has shape {:?}, original {:?}",
                v.shape(),
                original.shape()
            )));
        }
        out.push(analyze_one(name, v)?);
    }
    let bin_edges = (0..=SPECTRUM_BINS)
        .map(|i| NYQUIST * i as f64 / SPECTRUM_BINS as f64)
        .collect();
    Ok(SpectrumReport {
        bin_edges,
        variants: out,
    })
}

/// 3x3 box blur per channel with edge clamping.
pub fn box_blur(plane: &Tensor) -> Tensor {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let src = plane.data();
    Tensor::from_fn(plane.shape(), |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut s = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                s += src[(ch * h + yy) * w + xx];
            }
        }
        s / 9.0
    })
}

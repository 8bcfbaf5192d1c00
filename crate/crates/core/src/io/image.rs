//! PNG reading and writing.
//!
//! Sources with alpha are composited over a white background on load, so
//! every image handed to training is plain RGB in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::renderer::Image;

pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let bad = |e: png::DecodingError| Error::Dataset(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Dataset(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Dataset(format!(
                "{}: indexed PNGs are not supported",
                path.display()
            )))
        }
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        d => {
            return Err(Error::Dataset(format!(
                "{}: unsupported bit depth {d:?}",
                path.display()
            )))
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in samples.chunks_exact(channels).take(w * h) {
        let (rgb, a) = match channels {
            1 => ([px[0]; 3], 1.0),
            2 => ([px[0]; 3], px[1]),
            3 => ([px[0], px[1], px[2]], 1.0),
            _ => ([px[0], px[1], px[2]], px[3]),
        };
        data.extend(rgb.iter().map(|&c| c * a + (1.0 - a)));
    }
    if data.len() != w * h * 3 {
        return Err(Error::Dataset(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    Ok(Image::new(w, h, data))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(bad)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}

/// Image after an 8-bit round trip.
pub fn quantize_8bit(img: &Image) -> Image {
    Image::new(
        img.width,
        img.height,
        img.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
    )
}

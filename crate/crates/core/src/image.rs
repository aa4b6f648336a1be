//! Image input: binary PPM (P6, maxval 255) and the raw `YLTI` tensor
//! format, plus aspect-preserving letterboxing to the network input.
//!
//! `YLTI` layout, little-endian: magic `b"YLTI"`, `u32` height, `u32` width,
//! `u32` channels (must be 3), then `h * w * c` `f32` values in
//! height-width-channel order, already scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::detect::{BBox, Detection};
use crate::tensor::{Shape, Tensor};

pub const RAW_MAGIC: &[u8; 4] = b"YLTI";
/// Neutral gray used for letterbox padding.
pub const PAD_VALUE: f32 = 127.5 / 255.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

fn bad(msg: impl Into<String>) -> ImageError {
    ImageError::Format(msg.into())
}

/// RGB image with values in `[0, 1]`, stored height-width-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    #[inline]
    fn px(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("unexpected end of PPM header"));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("invalid PPM {what}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let width = ppm_number(bytes, &mut pos, "width")?;
    let height = ppm_number(bytes, &mut pos, "height")?;
    let maxval = ppm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width * height * 3;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| bad(format!("raster truncated: need {len} bytes")))?;
    Ok(Image {
        width,
        height,
        data: raster.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("not a YLTI raw tensor"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (height, width, channels) = (word(0), word(1), word(2));
    if channels != 3 {
        return Err(bad(format!("expected 3 channels, got {channels}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    let count = height * width * channels;
    let body = &bytes[16..];
    if body.len() != count * 4 {
        return Err(bad(format!("expected {} data bytes, got {}", count * 4, body.len())));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite pixel value"));
    }
    Ok(Image { width, height, data })
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    for v in [img.height as u32, img.width as u32, 3u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a PPM or YLTI file, chosen by its magic bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        Err(bad("unrecognized image format (expected P6 PPM or YLTI)"))
    }
}

/// A letterboxed network input and the transform back to image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Letterbox {
    pub tensor: Tensor,
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    /// Maps a box from network input pixels to original image pixels.
    pub fn unmap(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.pad_x as f64) / self.scale_x,
            (b.cy - self.pad_y as f64) / self.scale_y,
            b.w / self.scale_x,
            b.h / self.scale_y,
        )
    }

    pub fn unmap_detection(&self, d: &Detection) -> Detection {
        Detection {
            bbox: self.unmap(&d.bbox),
            ..*d
        }
    }
}

/// Resizes with bilinear sampling (pixel-center aligned) to fit inside a
/// `size x size` canvas, centered, padding with [`PAD_VALUE`]. An image that
/// already has the target size is copied unchanged.
pub fn letterbox(img: &Image, size: usize) -> Letterbox {
    let scale = (size as f64 / img.width as f64).min(size as f64 / img.height as f64);
    let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, size);
    let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, size);
    let (pad_x, pad_y) = ((size - new_w) / 2, (size - new_h) / 2);
    let (sx, sy) = (img.width as f64 / new_w as f64, img.height as f64 / new_h as f64);

    let sample_axis = |dst: usize, ratio: f64, len: usize| -> (usize, usize, f32) {
        let src = ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };

    let plane = size * size;
    let mut data = vec![PAD_VALUE; 3 * plane];
    for y in 0..new_h {
        let (y0, y1, fy) = sample_axis(y, sy, img.height);
        for x in 0..new_w {
            let (x0, x1, fx) = sample_axis(x, sx, img.width);
            for c in 0..3 {
                let v = if fx == 0.0 && fy == 0.0 {
                    img.px(x0, y0, c)
                } else {
                    let top = img.px(x0, y0, c) * (1.0 - fx) + img.px(x1, y0, c) * fx;
                    let bottom = img.px(x0, y1, c) * (1.0 - fx) + img.px(x1, y1, c) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                data[c * plane + (y + pad_y) * size + x + pad_x] = v;
            }
        }
    }
    Letterbox {
        tensor: Tensor::new(Shape::new(1, 3, size, size), data).expect("finite pixels"),
        scale_x: new_w as f64 / img.width as f64,
        scale_y: new_h as f64 / img.height as f64,
        pad_x,
        pad_y,
    }
}

//! Image decoding and the two kNN feature representations (flattened raw
//! pixels and a joint HSV histogram), plus the CNN input tensor.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

/// Side length every image is resized to before raw-pixel flattening.
pub const RAW_SIDE: usize = 32;
pub const RAW_DIMS: usize = RAW_SIDE * RAW_SIDE * 3;
pub const DEFAULT_HIST_BINS: usize = 8;
pub const DEFAULT_TENSOR_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("malformed PNG: {detail}")]
    Decode { detail: String },
    #[error("unsupported PNG format: {0}")]
    Unsupported(String),
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Decoded RGB raster with channel values in `[0, 1]`, row-major
/// `(row, column, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Invalid(format!("empty extent {width}x{height}")));
        }
        if values.len() != width * height * 3 {
            return Err(ImagingError::Invalid(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::Invalid(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    /// Builds an image from a per-pixel `(x, y) -> [r, g, b]` function.
    /// Values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image extent must be positive");
        let mut values = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                values.extend(f(x, y).iter().map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    /// Quantizes to 8 bits per channel, row-major RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

/// HSV raster; hue is a fraction of the full circle in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsvImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl HsvImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Interleaved `(h, s, v)` triples.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    RawPixel,
    HsvHistogram,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::RawPixel => "raw",
            FeatureKind::HsvHistogram => "hist",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dims(&self) -> usize {
        self.values.len()
    }
}

/// Decodes an 8-bit RGB or RGBA PNG. Alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<PixelImage, ImagingError> {
    let fail = |e: png::DecodingError| match e {
        png::DecodingError::Format(_) | png::DecodingError::IoError(_) => {
            let location = locate_fault(bytes).unwrap_or_else(|| "no structural fault found".into());
            ImagingError::Decode { detail: format!("{e} ({location})") }
        }
        other => ImagingError::Decode { detail: other.to_string() },
    };

    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fail)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(ImagingError::Unsupported(format!("bit depth {depth:?}, only 8-bit is supported")));
    }
    let stride = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ImagingError::Unsupported(format!("color type {other:?}, expected RGB or RGBA"))),
    };
    let size = reader.output_buffer_size().ok_or_else(|| ImagingError::Unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut values = Vec::with_capacity(w * h * 3);
    for row in buf[..frame.buffer_size()].chunks_exact(frame.line_size) {
        for px in row[..w * stride].chunks_exact(stride) {
            values.extend(px[..3].iter().map(|&c| f64::from(c) / 255.0));
        }
    }
    PixelImage::new(w, h, values)
}

/// Walks the chunk framing of a PNG stream and names the first chunk that
/// does not fit in the buffer.
fn locate_fault(bytes: &[u8]) -> Option<String> {
    const SIGNATURE: [u8; 8] = [137, 80, 78, 71, 13, 10, 26, 10];
    if bytes.len() < 8 || bytes[..8] != SIGNATURE {
        return Some("bad signature at offset 0".into());
    }
    let mut offset = 8;
    while offset < bytes.len() {
        if offset + 8 > bytes.len() {
            return Some(format!("truncated chunk header at offset {offset}"));
        }
        let len = u32::from_be_bytes(bytes[offset..offset + 4].try_into().ok()?) as usize;
        let name = String::from_utf8_lossy(&bytes[offset + 4..offset + 8]).into_owned();
        let end = offset + 12 + len;
        if end > bytes.len() {
            return Some(format!(
                "chunk {name} at offset {offset} declares {len} bytes but the stream ends at {}",
                bytes.len()
            ));
        }
        if name == "IEND" {
            return None;
        }
        offset = end;
    }
    Some(format!("missing IEND chunk, stream ends at offset {}", bytes.len()))
}

/// Encodes an image as an 8-bit RGB PNG.
pub fn encode_png(img: &PixelImage) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let enc_err = |e: png::EncodingError| ImagingError::Invalid(format!("png encode: {e}"));
        let mut writer = encoder.write_header().map_err(enc_err)?;
        writer.write_image_data(&img.to_rgb8()).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers: the source coordinate of output
/// index `d` is `(d + 0.5) * src / dst - 0.5`, clamped to the image.
pub fn resize_bilinear(img: &PixelImage, out_w: usize, out_h: usize) -> PixelImage {
    assert!(out_w >= 1 && out_h >= 1, "output extent must be positive");
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let xs = axis_taps(img.width, out_w);
    let ys = axis_taps(img.height, out_h);
    let mut values = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = img.pixel(x0, y0);
            let p01 = img.pixel(x1, y0);
            let p10 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bottom = p10[c] + (p11[c] - p10[c]) * fx;
                values.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    PixelImage { width: out_w, height: out_h, values }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Hexcone RGB to HSV for one pixel.
pub fn rgb_to_hsv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    if s == 0.0 {
        return [0.0, 0.0, max];
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = sector / 6.0;
    if !(0.0..1.0).contains(&h) {
        h = h.rem_euclid(1.0);
        if h >= 1.0 {
            h = 0.0;
        }
    }
    [h, s, max]
}

pub fn rgb_to_hsv(img: &PixelImage) -> HsvImage {
    let mut values = Vec::with_capacity(img.values.len());
    for px in img.values.chunks_exact(3) {
        values.extend(rgb_to_hsv_pixel([px[0], px[1], px[2]]));
    }
    HsvImage { width: img.width, height: img.height, values }
}

/// Resizes to 32x32 and flattens the channel values row-major.
pub fn extract_raw_features(img: &PixelImage) -> FeatureVector {
    let small = resize_bilinear(img, RAW_SIDE, RAW_SIDE);
    FeatureVector { kind: FeatureKind::RawPixel, values: small.values }
}

#[inline]
fn bin_of(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Joint `bins^3` HSV histogram, flattened in `(h, s, v)` order and
/// L1-normalized.
pub fn extract_histogram_features(img: &PixelImage, bins_per_channel: usize) -> FeatureVector {
    assert!(bins_per_channel >= 1, "histogram needs at least one bin per channel");
    let b = bins_per_channel;
    let hsv = rgb_to_hsv(img);
    let mut counts = vec![0u64; b * b * b];
    for px in hsv.values.chunks_exact(3) {
        let idx = (bin_of(px[0], b) * b + bin_of(px[1], b)) * b + bin_of(px[2], b);
        counts[idx] += 1;
    }
    let total = (img.width * img.height) as f64;
    FeatureVector { kind: FeatureKind::HsvHistogram, values: counts.into_iter().map(|c| c as f64 / total).collect() }
}

/// Resizes to `side x side` and lays the result out as an `[side, side, 3]`
/// tensor.
pub fn image_to_tensor(img: &PixelImage, side: usize) -> Tensor<f32> {
    let resized = resize_bilinear(img, side, side);
    let data = resized.values.iter().map(|&v| v as f32).collect();
    Tensor::from_vec(&[side, side, 3], data).expect("resize yields side*side*3 values")
}

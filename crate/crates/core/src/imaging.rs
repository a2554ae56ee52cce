//! Grayscale rasters, file I/O and the preprocessing chain.
//!
//! Everything here is a pure function of its inputs. Borders are handled by
//! edge replication throughout so no artificial dark frame appears around an
//! image (which would otherwise seed spurious FAST corners).

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

/// Smallest pyramid level side length.
pub const MIN_LEVEL_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("image too small for a pyramid: {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Owned row-major 8-bit intensity raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageGray {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageGray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageGray({}x{})", self.width, self.height)
    }
}

impl ImageGray {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut img = Self::filled(width, height, 0);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel with coordinates clamped into the image (edge replicate).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a real-valued position; coordinates are clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        top + (bottom - top) * fy
    }

    /// Rotates by 90 degrees clockwise: pixel (x, y) moves to (h-1-y, x).
    pub fn rotate90(&self) -> ImageGray {
        let (w, h) = (self.width, self.height);
        ImageGray::from_fn(h, w, |x, y| self.get(y, h - 1 - x))
    }
}

/// ITU-R BT.601 luma, rounded and clamped.
pub fn to_gray(r: u8, g: u8, b: u8) -> u8 {
    let v = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    v.round().clamp(0.0, 255.0) as u8
}

/// Loads a binary PGM (P5, maxval 255) or an 8-bit PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGray, ImagingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ImagingError::FileNotFound(path.display().to_string()),
        _ => ImagingError::Io(e),
    })?;
    decode_image(&bytes)
}

/// Decodes PGM or PNG bytes, sniffing the format from the magic number.
pub fn decode_image(bytes: &[u8]) -> Result<ImageGray, ImagingError> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(ImagingError::UnsupportedFormat(
            "expected P5 PGM or PNG magic".into(),
        ))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<ImageGray, ImagingError> {
    // header: magic, width, height, maxval separated by whitespace, '#' comments
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImagingError::CorruptImage("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(ImagingError::CorruptImage("malformed PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImagingError::CorruptImage("PGM header value out of range".into()))?;
    }
    // exactly one whitespace byte precedes the raster
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImagingError::CorruptImage(
                "missing raster separator".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImagingError::UnsupportedFormat(format!(
            "PGM maxval {maxval} (only 255 supported)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(ImagingError::InvalidDimensions { width, height });
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| ImagingError::CorruptImage("PGM dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(ImagingError::CorruptImage(format!(
            "PGM payload has {} bytes, header declares {n}",
            payload.len()
        )));
    }
    ImageGray::new(width, height, payload[..n].to_vec())
}

fn decode_png(bytes: &[u8]) -> Result<ImageGray, ImagingError> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImagingError::CorruptImage(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| to_gray(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| to_gray(p[0], p[1], p[2])).collect(),
        other => {
            return Err(ImagingError::UnsupportedFormat(format!(
                "PNG color type {:?} is not 8-bit",
                other.color()
            )))
        }
    };
    ImageGray::new(w, h, data)
}

/// Writes `img` as PNG or binary PGM depending on the file extension.
pub fn save_image(img: &ImageGray, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pgm") => {
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.data);
            fs::write(path, out)?;
            Ok(())
        }
        Some("png") => image::save_buffer(
            path,
            &img.data,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => ImagingError::Io(io),
            other => ImagingError::UnsupportedFormat(other.to_string()),
        }),
        _ => Err(ImagingError::UnsupportedFormat(format!(
            "cannot infer output format from {}",
            path.display()
        ))),
    }
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication. `sigma == 0` copies.
pub fn gaussian_blur(img: &ImageGray, sigma: f64) -> ImageGray {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);

    let mut horiz = vec![0.0f64; w * h];
    par::for_each_row(&mut horiz, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * img.get_clamped(x as isize + i as isize - r, y as isize) as f64;
            }
            *out = acc;
        }
    });

    let mut data = vec![0u8; w * h];
    par::for_each_row(&mut data, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * horiz[yy * w + x];
            }
            *out = acc.round().clamp(0.0, 255.0) as u8;
        }
    });
    ImageGray {
        width: w,
        height: h,
        data,
    }
}

/// Global histogram equalization; constant images come back unchanged.
pub fn hist_equalize(img: &ImageGray) -> ImageGray {
    let mut hist = [0usize; 256];
    for &v in &img.data {
        hist[v as usize] += 1;
    }
    let n = img.data.len();
    let mut cdf = [0usize; 256];
    let mut running = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        running += h;
        *c = running;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if cdf_min == n {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let lut: Vec<u8> = cdf
        .iter()
        .map(|&c| {
            let v = (c.saturating_sub(cdf_min)) as f64 / denom * 255.0;
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    ImageGray {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| lut[v as usize]).collect(),
    }
}

/// Bilinear resize using pixel-center alignment:
/// `sx = (x + 0.5) * width / out_w - 0.5`, clamped into the source.
pub fn resize_bilinear(
    img: &ImageGray,
    out_w: usize,
    out_h: usize,
) -> Result<ImageGray, ImagingError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::InvalidDimensions {
            width: out_w,
            height: out_h,
        });
    }
    let sx_scale = img.width as f64 / out_w as f64;
    let sy_scale = img.height as f64 / out_h as f64;
    let mut data = vec![0u8; out_w * out_h];
    par::for_each_row(&mut data, out_w, |y, row| {
        let sy = (y as f64 + 0.5) * sy_scale - 0.5;
        for (x, out) in row.iter_mut().enumerate() {
            let sx = (x as f64 + 0.5) * sx_scale - 0.5;
            *out = img.sample_bilinear(sx, sy).round().clamp(0.0, 255.0) as u8;
        }
    });
    Ok(ImageGray {
        width: out_w,
        height: out_h,
        data,
    })
}

/// Multi-scale stack; `levels[0]` is the source.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<ImageGray>,
    pub scale_factor: f64,
}

impl Pyramid {
    pub fn level_scale(&self, k: usize) -> f64 {
        self.scale_factor.powi(k as i32)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

fn level_dim(src: usize, scale: f64) -> usize {
    // guard against 479.99999 style results for exact ratios
    (src as f64 / scale + 1e-9).floor() as usize
}

/// Builds `max_levels` levels (fewer when a side would drop under 16 px).
pub fn build_pyramid(
    img: &ImageGray,
    scale_factor: f64,
    max_levels: usize,
) -> Result<Pyramid, ImagingError> {
    if img.width < MIN_LEVEL_DIM || img.height < MIN_LEVEL_DIM {
        return Err(ImagingError::ImageTooSmall {
            width: img.width,
            height: img.height,
        });
    }
    assert!(scale_factor > 1.0, "pyramid scale factor must exceed 1");
    let mut levels = vec![img.clone()];
    for k in 1..max_levels.max(1) {
        let s = scale_factor.powi(k as i32);
        let (w, h) = (level_dim(img.width, s), level_dim(img.height, s));
        if w < MIN_LEVEL_DIM || h < MIN_LEVEL_DIM {
            break;
        }
        levels.push(resize_bilinear(img, w, h)?);
    }
    Ok(Pyramid {
        levels,
        scale_factor,
    })
}

/// Ingest preprocessing settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ImagingConfig {
    pub target_w: usize,
    pub target_h: usize,
    pub blur_sigma: f64,
    pub equalize: bool,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            target_w: 640,
            target_h: 480,
            blur_sigma: 1.0,
            equalize: true,
        }
    }
}

impl ImagingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_w < MIN_LEVEL_DIM || self.target_h < MIN_LEVEL_DIM {
            return Err(format!(
                "imaging target {}x{} below {MIN_LEVEL_DIM} px",
                self.target_w, self.target_h
            ));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma <= 20.0) {
            return Err(format!("blurSigma {} outside [0, 20]", self.blur_sigma));
        }
        Ok(())
    }
}

/// Brings a frame to the working resolution. Compositing uses this image.
pub fn to_working_resolution(img: &ImageGray, cfg: &ImagingConfig) -> ImageGray {
    if img.width == cfg.target_w && img.height == cfg.target_h {
        img.clone()
    } else {
        resize_bilinear(img, cfg.target_w, cfg.target_h).expect("validated target size")
    }
}

/// Denoise then equalize a working-resolution frame for feature detection.
pub fn enhance(img: &ImageGray, cfg: &ImagingConfig) -> ImageGray {
    let blurred = gaussian_blur(img, cfg.blur_sigma);
    if cfg.equalize {
        hist_equalize(&blurred)
    } else {
        blurred
    }
}

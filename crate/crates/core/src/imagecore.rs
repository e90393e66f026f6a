//! Raster types, file I/O, grayscale conversion and resizing.
//!
//! All intensities live in [0, 1] as `f64`; 8-bit values only appear at file
//! boundaries.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param("image dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::Param(format!(
                "rgb data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param("rgb channel value outside [0,1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// Single-channel raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param("image dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::Param(format!(
                "gray data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param("gray value outside [0,1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image without the range check. Callers guarantee `data`
    /// holds `width * height` values in [0, 1].
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Evaluates `f(x, y)` on every pixel and clamps into [0, 1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::from_raw(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Returns a copy with `f` applied per pixel, clamped into [0, 1].
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Bilinear sample of a row-major raster with clamp-to-edge addressing.
#[inline]
pub(crate) fn sample_clamped(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (x0, x1, fx) = axis_taps(x, w);
    let (y0, y1, fy) = axis_taps(y, h);
    let top = lerp(data[y0 * w + x0], data[y0 * w + x1], fx);
    let bottom = lerp(data[y1 * w + x0], data[y1 * w + x1], fx);
    lerp(top, bottom, fy)
}

/// `a + (b - a) t`: exact on equal endpoints and at `t = 0`.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Neighbour indices (clamped) and fractional weight along one axis.
/// The fraction is taken from the unclamped coordinate so that
/// out-of-range samples collapse onto the edge value.
#[inline]
pub(crate) fn axis_taps(c: f64, n: usize) -> (usize, usize, f64) {
    let fl = c.floor();
    let frac = c - fl;
    let last = (n - 1) as i64;
    let i0 = fl as i64;
    let a = i0.clamp(0, last) as usize;
    let b = (i0 + 1).clamp(0, last) as usize;
    (a, b, frac)
}

/// Reads an 8-bit RGB or RGBA PNG; alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
    )?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<[f64; 3]> = match decoded {
        image::DynamicImage::ImageRgb8(buf) => buf
            .pixels()
            .map(|p| [p[0], p[1], p[2]].map(|c| c as f64 / 255.0))
            .collect(),
        image::DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| [p[0], p[1], p[2]].map(|c| c as f64 / 255.0))
            .collect(),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("unsupported color type {:?}", other.color()),
            })
        }
    };
    RgbImage::new(w, h, data)
}

/// Writes an 8-bit RGB PNG. Used for fixtures and overlay dumps.
pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .flat_map(|p| p.map(to_byte))
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Param("rgb buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5), maxval 255.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let payload = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated payload"))?;
    let data = payload
        .iter()
        .map(|&b| (b as f64 / maxval as f64).min(1.0))
        .collect();
    GrayImage::new(w, h, data)
}

/// Loads a grayscale image from PGM directly, or from PNG via `convert`.
pub fn load_gray(path: impl AsRef<Path>, convert: GrayConversion) -> Result<GrayImage> {
    let path = path.as_ref();
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        load_pgm(path)
    } else {
        convert.apply(&load_png(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GrayConversion {
    Weighted([f64; 3]),
    Saturation,
}

impl GrayConversion {
    pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

    pub fn apply(&self, img: &RgbImage) -> Result<GrayImage> {
        match self {
            GrayConversion::Weighted(w) => to_gray_weighted(img, *w),
            GrayConversion::Saturation => Ok(to_gray_saturation(img)),
        }
    }
}

impl Default for GrayConversion {
    fn default() -> Self {
        GrayConversion::Weighted(Self::LUMA)
    }
}

pub fn to_gray_weighted(img: &RgbImage, weights: [f64; 3]) -> Result<GrayImage> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Param(format!("negative gray weight in {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "gray weights must sum to 1, got {sum}"
        )));
    }
    let data = img
        .data
        .iter()
        .map(|p| (weights[0] * p[0] + weights[1] * p[1] + weights[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    Ok(GrayImage::from_raw(img.width, img.height, data))
}

/// HSV saturation, zero on black pixels.
pub fn to_gray_saturation(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .iter()
        .map(|p| {
            let max = p[0].max(p[1]).max(p[2]);
            let min = p[0].min(p[1]).min(p[2]);
            if max > 0.0 {
                (max - min) / max
            } else {
                0.0
            }
        })
        .collect();
    GrayImage::from_raw(img.width, img.height, data)
}

/// Source coordinate for target index `i` under align-corners mapping.
#[inline]
pub(crate) fn align_corners(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src - 1) as f64 / 2.0
    } else {
        (i * (src - 1)) as f64 / (dst - 1) as f64
    }
}

/// Align-corners bilinear resize of a raw raster.
pub(crate) fn resize_raw(data: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xs: Vec<f64> = (0..out_w).map(|i| align_corners(i, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let sy = align_corners(j, h, out_h);
        for &sx in &xs {
            out.push(sample_clamped(data, w, h, sx, sy));
        }
    }
    out
}

pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Param("resize target dimensions must be positive".into()));
    }
    let data = resize_raw(&img.data, img.width, img.height, out_w, out_h)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(GrayImage::from_raw(out_w, out_h, data))
}

//! Dense displacement fields and the bilinear spatial transformer.
//!
//! Displacements are in absolute pixel units. Warping samples the moving
//! image at `p + φ(p)` with clamp-to-edge addressing, so
//! `warp(M, φ)(p) = M(p + φ(p))`.

use std::fs;
use std::path::Path;

use crate::error::{ensure_dims, Error, Result};
use crate::imagecore::{axis_taps, lerp, resize_raw, sample_clamped, GrayImage};

pub const DDF_MAGIC: &[u8; 4] = b"DDF1";

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param("field dimensions must be positive".into()));
        }
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::Param(format!(
                "field rasters ({}, {}) do not match {}x{}",
                dx.len(),
                dy.len(),
                width,
                height
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::Param("field contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, vec![dx; n], vec![dy; n])
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
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    /// Largest absolute component over both rasters.
    pub fn max_abs(&self) -> f64 {
        self.dx
            .iter()
            .chain(&self.dy)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Per-pixel Euclidean displacement length.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| x.hypot(*y))
            .collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.magnitudes().iter().sum::<f64>() / self.len() as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            dx: self.dx.iter().map(|v| v * s).collect(),
            dy: self.dy.iter().map(|v| v * s).collect(),
        }
    }

    /// Accumulates `s * other` into `self`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.dx.iter_mut().zip(&other.dx) {
            *a += s * b;
        }
        for (a, b) in self.dy.iter_mut().zip(&other.dy) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    pub fn write_ddf(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ddf_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ddf(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ddf_bytes(&bytes)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
    }

    /// `DDF1`, width and height as u32 LE, then dx and dy rasters as f32 LE.
    pub fn to_ddf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.len());
        out.extend_from_slice(DDF_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in self.dx.iter().chain(&self.dy) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_ddf_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DDF_MAGIC {
            return Err(Error::Corrupt("missing DDF1 magic".into()));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = w
            .checked_mul(h)
            .ok_or_else(|| Error::Corrupt("DDF dimensions overflow".into()))?;
        let payload = &bytes[12..];
        if payload.len() != 8 * n {
            return Err(Error::Corrupt(format!(
                "DDF payload has {} bytes, expected {}",
                payload.len(),
                8 * n
            )));
        }
        let vals: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let (dx, dy) = vals.split_at(n);
        Self::new(w, h, dx.to_vec(), dy.to_vec())
    }
}

pub fn identity_field(w: usize, h: usize) -> Result<DisplacementField> {
    DisplacementField::constant(w, h, 0.0, 0.0)
}

pub fn warp_bilinear(img: &GrayImage, phi: &DisplacementField) -> Result<GrayImage> {
    ensure_dims("warp_bilinear", img.dims(), phi.dims())?;
    let (w, h) = img.dims();
    let src = img.data();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = sample_clamped(src, w, h, x as f64 + phi.dx[i], y as f64 + phi.dy[i]);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage::from_raw(w, h, out))
}

/// Reverse-mode gradient of [`warp_bilinear`] with respect to the field.
///
/// Uses the right-sided derivative where a sample lands on an integer
/// coordinate; clamped taps contribute zero slope.
pub fn warp_backward(
    img: &GrayImage,
    phi: &DisplacementField,
    upstream: &[f64],
) -> Result<DisplacementField> {
    ensure_dims("warp_backward", img.dims(), phi.dims())?;
    if upstream.len() != img.len() {
        return Err(Error::Param(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            img.len()
        )));
    }
    let (w, h) = img.dims();
    let src = img.data();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = upstream[i];
            if g == 0.0 {
                continue;
            }
            let (x0, x1, fx) = axis_taps(x as f64 + phi.dx[i], w);
            let (y0, y1, fy) = axis_taps(y as f64 + phi.dy[i], h);
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let d_fx = lerp(v01 - v00, v11 - v10, fy);
            let d_fy = lerp(v00, v01, fx) - lerp(v10, v11, fx);
            gx[i] = g * d_fx;
            gy[i] = -g * d_fy;
        }
    }
    Ok(DisplacementField {
        width: w,
        height: h,
        dx: gx,
        dy: gy,
    })
}

/// Align-corners bilinear resize of both components, rescaled so that
/// displacements stay in the target grid's pixel units.
pub fn upsample_field(phi: &DisplacementField, out_w: usize, out_h: usize) -> Result<DisplacementField> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Param("upsample target dimensions must be positive".into()));
    }
    let (w, h) = phi.dims();
    if (w, h) == (out_w, out_h) {
        return Ok(phi.clone());
    }
    let sx = grid_scale(w, out_w);
    let sy = grid_scale(h, out_h);
    let dx = resize_raw(&phi.dx, w, h, out_w, out_h)
        .into_iter()
        .map(|v| v * sx)
        .collect();
    let dy = resize_raw(&phi.dy, w, h, out_w, out_h)
        .into_iter()
        .map(|v| v * sy)
        .collect();
    DisplacementField::new(out_w, out_h, dx, dy)
}

fn grid_scale(src: usize, dst: usize) -> f64 {
    if src > 1 && dst > 1 {
        (dst - 1) as f64 / (src - 1) as f64
    } else {
        dst as f64 / src as f64
    }
}

/// `out(p) = inner(p) + outer(p + inner(p))`, so warping by `out` matches
/// warping by `outer` and then by `inner`.
pub fn compose_fields(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    ensure_dims("compose_fields", outer.dims(), inner.dims())?;
    let (w, h) = outer.dims();
    let mut dx = Vec::with_capacity(w * h);
    let mut dy = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = x as f64 + inner.dx[i];
            let py = y as f64 + inner.dy[i];
            dx.push(inner.dx[i] + sample_clamped(&outer.dx, w, h, px, py));
            dy.push(inner.dy[i] + sample_clamped(&outer.dy, w, h, px, py));
        }
    }
    DisplacementField::new(w, h, dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{prng, uniform_in};
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = prng(seed);
        GrayImage::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn random_field(w: usize, h: usize, amp: f64, seed: u64) -> DisplacementField {
        let mut rng = prng(seed);
        let n = w * h;
        let dx = (0..n).map(|_| uniform_in(&mut rng, -amp, amp)).collect();
        let dy = (0..n).map(|_| uniform_in(&mut rng, -amp, amp)).collect();
        DisplacementField::new(w, h, dx, dy).unwrap()
    }

    #[test]
    fn identity_examples() {
        let f = identity_field(3, 2).unwrap();
        assert_eq!(f.len(), 6);
        assert!(f.dx.iter().chain(&f.dy).all(|&v| v == 0.0));
        let img = random_image(5, 4, 1);
        let id = identity_field(5, 4).unwrap();
        assert_eq!(warp_bilinear(&img, &id).unwrap(), img);
    }

    #[test]
    fn warp_shift_with_border_clamp() {
        let img = GrayImage::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let phi = DisplacementField::constant(3, 1, 1.0, 0.0).unwrap();
        assert_eq!(warp_bilinear(&img, &phi).unwrap().data(), &[0.5, 1.0, 1.0]);
    }

    #[test]
    fn warp_half_pixel_averages_neighbourhood() {
        let img = GrayImage::new(2, 2, vec![0.1, 0.3, 0.6, 0.8]).unwrap();
        let phi = DisplacementField::constant(2, 2, 0.5, 0.5).unwrap();
        let out = warp_bilinear(&img, &phi).unwrap();
        // (0,0) sees the full 2x2 block; others see clamped copies
        let expect = [
            (0.1 + 0.3 + 0.6 + 0.8) / 4.0,
            (0.3 + 0.3 + 0.8 + 0.8) / 4.0,
            (0.6 + 0.8 + 0.6 + 0.8) / 4.0,
            0.8,
        ];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn warp_dimension_mismatch() {
        let img = random_image(4, 4, 2);
        let phi = identity_field(4, 3).unwrap();
        assert!(matches!(
            warp_bilinear(&img, &phi),
            Err(Error::DimMismatch { .. })
        ));
        assert!(warp_backward(&img, &phi, &[0.0; 16]).is_err());
    }

    #[test]
    fn warp_backward_trivial_cases() {
        let img = random_image(6, 5, 3);
        let phi = random_field(6, 5, 2.0, 4);
        let g = warp_backward(&img, &phi, &[0.0; 30]).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let c = GrayImage::constant(6, 5, 0.4).unwrap();
        let g = warp_backward(&c, &phi, &[1.0; 30]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn warp_backward_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..10u64 {
            let img = random_image(8, 8, 100 + seed);
            let phi = random_field(8, 8, 2.5, 200 + seed);
            let mut rng = prng(300 + seed);
            let up: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() - 0.5).collect();
            let grad = warp_backward(&img, &phi, &up).unwrap();
            let objective = |f: &DisplacementField| -> f64 {
                warp_bilinear(&img, f)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            for i in 0..64 {
                for comp in 0..2 {
                    let mut plus = phi.clone();
                    let mut minus = phi.clone();
                    let analytic = if comp == 0 {
                        plus.dx[i] += h;
                        minus.dx[i] -= h;
                        grad.dx[i]
                    } else {
                        plus.dy[i] += h;
                        minus.dy[i] -= h;
                        grad.dy[i]
                    };
                    let f0 = objective(&phi);
                    let fp = objective(&plus);
                    let fm = objective(&minus);
                    let right = (fp - f0) / h;
                    let left = (f0 - fm) / h;
                    if (right - left).abs() > 1e-6 * (1.0 + right.abs()) {
                        continue; // kink: one-sided slopes disagree
                    }
                    let central = (fp - fm) / (2.0 * h);
                    let rel = (central - analytic).abs() / central.abs().max(analytic.abs()).max(1e-8);
                    assert!(rel < 1e-4, "seed {seed} i {i} comp {comp}: {analytic} vs {central}");
                }
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let f = random_field(5, 4, 1.0, 9);
        assert_eq!(upsample_field(&f, 5, 4).unwrap(), f);
        let z = identity_field(3, 3).unwrap();
        assert_eq!(upsample_field(&z, 7, 5).unwrap().max_abs(), 0.0);
        let one = DisplacementField::constant(2, 2, 1.0, 0.0).unwrap();
        let up = upsample_field(&one, 4, 4).unwrap();
        assert!(up.dx.iter().all(|&v| (v - 3.0).abs() < 1e-15));
        assert!(up.dy.iter().all(|&v| v == 0.0));
        assert!(upsample_field(&one, 0, 4).is_err());
    }

    #[test]
    fn compose_examples() {
        let f = random_field(6, 6, 1.5, 11);
        let z = identity_field(6, 6).unwrap();
        assert_eq!(compose_fields(&z, &f).unwrap(), f);
        assert_eq!(compose_fields(&f, &z).unwrap(), f);

        let a = DisplacementField::constant(20, 20, 1.0, 0.0).unwrap();
        let b = DisplacementField::constant(20, 20, 2.0, 0.0).unwrap();
        let c = compose_fields(&a, &b).unwrap();
        for y in 4..16 {
            for x in 4..16 {
                assert_eq!(c.dx[y * 20 + x], 3.0);
                assert_eq!(c.dy[y * 20 + x], 0.0);
            }
        }
    }

    #[test]
    fn compose_approximates_sequential_warp() {
        let (w, h) = (24, 20);
        let img = GrayImage::from_fn(w, h, |x, y| {
            0.5 + 0.4 * ((x as f64 / 5.0).sin() * (y as f64 / 4.0).cos())
        });
        let outer = DisplacementField::constant(w, h, 0.7, -0.4).unwrap();
        let inner = DisplacementField::constant(w, h, -0.3, 0.9).unwrap();
        let composed = compose_fields(&outer, &inner).unwrap();
        let once = warp_bilinear(&img, &composed).unwrap();
        let twice = warp_bilinear(&warp_bilinear(&img, &outer).unwrap(), &inner).unwrap();
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                assert!((once.get(x, y) - twice.get(x, y)).abs() < 0.03);
            }
        }
    }

    #[test]
    fn ddf_round_trip_and_rejection() {
        let f = random_field(5, 3, 4.0, 12);
        let bytes = f.to_ddf_bytes();
        assert_eq!(&bytes[..4], b"DDF1");
        assert_eq!(bytes.len(), 12 + 8 * 15);
        let back = DisplacementField::from_ddf_bytes(&bytes).unwrap();
        for (a, b) in f.dx.iter().chain(&f.dy).zip(back.dx.iter().chain(&back.dy)) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(DisplacementField::from_ddf_bytes(&wrong).is_err());
        assert!(DisplacementField::from_ddf_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn warp_range_and_linearity() {
        for seed in 0..20u64 {
            let a = random_image(7, 6, seed);
            let b = random_image(7, 6, seed + 50);
            let phi = random_field(7, 6, 3.0, seed + 100);
            let wa = warp_bilinear(&a, &phi).unwrap();
            let (lo, hi) = a.min_max();
            assert!(wa.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));

            let (s, t) = (0.3, 0.6);
            let mix = GrayImage::new(
                7,
                6,
                a.data().iter().zip(b.data()).map(|(x, y)| s * x + t * y).collect(),
            )
            .unwrap();
            let wm = warp_bilinear(&mix, &phi).unwrap();
            let wb = warp_bilinear(&b, &phi).unwrap();
            for i in 0..wm.len() {
                assert!((wm.data()[i] - (s * wa.data()[i] + t * wb.data()[i])).abs() < 1e-12);
            }
        }
    }
}

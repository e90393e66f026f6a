//! Synthetic two-modality phantoms with known deformations.
//!
//! A phantom is a few Gaussian "tissue" blobs on a dark background with a
//! band-limited texture. Modality B remaps A's intensities monotonically and
//! adds its own texture. The fixed image is A under an elastic deformation,
//! optionally damaged by tears or holes; the moving image is B undeformed.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{convolve_separable, elastic_deform, gaussian_kernel_1d, sample_deform_params, DeformParams, Level, LevelMix, LevelTable};
use crate::error::{ensure_dims, Error, Result};
use crate::evalstats::{quantile, BinaryMask};
use crate::field::DisplacementField;
use crate::imagecore::GrayImage;
use crate::pipeline::PairRecord;
use crate::rng::{derive_seed, prng, uniform_in, uniform_pm1, Prng};

pub const MIN_SIDE: usize = 32;

/// Darkest value of a phantom before artifacts, so only artifacts reach 0.
pub const BACKGROUND_FLOOR: f64 = 0.05;
/// Texture amplitude relative to the unit blob contrast.
pub const TEXTURE_AMPLITUDE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Artifact {
    None,
    Tears { count: usize, width: f64 },
    Holes { count: usize, radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub blob_count: usize,
    /// Wavelength of the texture in pixels.
    pub texture_scale: f64,
    /// Knots `(input, output)` of the piecewise-linear A → B remap.
    pub modality_map: Vec<(f64, f64)>,
    /// Amplitude of B's own texture.
    pub modality_texture: f64,
    pub artifact: Artifact,
    pub deform: DeformParams,
    pub seed: u64,
}

pub fn identity_map() -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (1.0, 1.0)]
}

pub fn default_map() -> Vec<(f64, f64)> {
    vec![(0.0, 0.05), (0.5, 0.7), (1.0, 0.95)]
}

impl PhantomParams {
    pub fn new(width: usize, height: usize, deform: DeformParams, seed: u64) -> Self {
        Self {
            width,
            height,
            blob_count: 8,
            texture_scale: 6.0,
            modality_map: default_map(),
            modality_texture: 0.03,
            artifact: Artifact::None,
            deform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::Param(format!(
                "phantom must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.width, self.height
            )));
        }
        if self.blob_count == 0 {
            return Err(Error::Param("blob_count must be >= 1".into()));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return Err(Error::Param("texture_scale must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_texture) {
            return Err(Error::Param("modality_texture must lie in [0, 1]".into()));
        }
        let k = &self.modality_map;
        let ok = k.len() >= 2
            && k.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1)
            && k[0].0 <= 0.0
            && k[k.len() - 1].0 >= 1.0
            && k.iter().all(|&(x, y)| x.is_finite() && (0.0..=1.0).contains(&y));
        if !ok {
            return Err(Error::Param(
                "modality_map knots must span [0, 1] with strictly increasing inputs and nondecreasing outputs in [0, 1]".into(),
            ));
        }
        match self.artifact {
            Artifact::Tears { width, .. } if !(width > 0.0) => {
                return Err(Error::Param("tear width must be > 0".into()))
            }
            Artifact::Holes { radius, .. } if !(radius > 0.0) => {
                return Err(Error::Param("hole radius must be > 0".into()))
            }
            _ => {}
        }
        self.deform.validate()
    }
}

fn remap(v: f64, knots: &[(f64, f64)]) -> f64 {
    let i = knots.partition_point(|k| k.0 <= v).clamp(1, knots.len() - 1);
    let ((x0, y0), (x1, y1)) = (knots[i - 1], knots[i]);
    let t = ((v - x0) / (x1 - x0)).clamp(0.0, 1.0);
    y0 + (y1 - y0) * t
}

/// Gaussian-filtered white noise with correlation length near `scale`,
/// rescaled to [-1, 1].
fn texture(w: usize, h: usize, scale: f64, rng: &mut Prng) -> Vec<f64> {
    let sigma = scale / 4.0;
    let size = 2 * (3.0 * sigma).ceil() as usize + 1;
    let noise: Vec<f64> = (0..w * h).map(|_| uniform_pm1(rng)).collect();
    let smooth = convolve_separable(&noise, w, h, &gaussian_kernel_1d(size, sigma));
    let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    smooth.into_iter().map(|v| v / peak).collect()
}

/// Soft tissue occupancy in [0, 1] from thresholded Gaussian bumps.
fn occupancy(p: &PhantomParams, rng: &mut Prng) -> Vec<f64> {
    let (w, h) = (p.width as f64, p.height as f64);
    let side = w.min(h);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..p.blob_count)
        .map(|_| {
            (
                uniform_in(rng, 0.15 * w, 0.85 * w),
                uniform_in(rng, 0.15 * h, 0.85 * h),
                uniform_in(rng, 0.07 * side, 0.14 * side),
                uniform_in(rng, 0.6, 1.0),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(p.width * p.height);
    for y in 0..p.height {
        for x in 0..p.width {
            let s: f64 = blobs
                .iter()
                .map(|&(cx, cy, r, a)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    a * (-d2 / (2.0 * r * r)).exp()
                })
                .sum();
            out.push(1.0 / (1.0 + (-(s - 0.45) * 14.0).exp()));
        }
    }
    out
}

/// Modality A in `[BACKGROUND_FLOOR, 1]`.
fn modality_a(p: &PhantomParams) -> Vec<f64> {
    let mut rng = prng(derive_seed(p.seed, 0));
    let occ = occupancy(p, &mut rng);
    let tex = texture(p.width, p.height, p.texture_scale, &mut rng);
    let raw: Vec<f64> = occ
        .iter()
        .zip(&tex)
        .map(|(&o, &t)| o + TEXTURE_AMPLITUDE * t)
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let base = raw
        .iter()
        .map(|&v| BACKGROUND_FLOOR + (1.0 - BACKGROUND_FLOOR) * (v - lo) / span)
        .collect();
    base
}

/// Pixels an artifact zeroes, drawn from the artifact stream of `seed`.
pub fn artifact_mask(w: usize, h: usize, artifact: &Artifact, seed: u64) -> BinaryMask {
    let mut rng = prng(derive_seed(seed, 2));
    let mut data = vec![false; w * h];
    match *artifact {
        Artifact::None => {}
        Artifact::Tears { count, width } => {
            let len = 0.3 * w.max(h) as f64;
            for _ in 0..count {
                let mut pts = vec![(uniform_in(&mut rng, 0.0, w as f64), uniform_in(&mut rng, 0.0, h as f64))];
                let mut heading = uniform_in(&mut rng, 0.0, 2.0 * PI);
                for _ in 0..3 {
                    heading += uniform_in(&mut rng, -0.5, 0.5);
                    let (x, y) = *pts.last().unwrap();
                    pts.push((x + len * heading.cos(), y + len * heading.sin()));
                }
                for seg in pts.windows(2) {
                    mark_segment(&mut data, w, h, seg[0], seg[1], width / 2.0);
                }
            }
        }
        Artifact::Holes { count, radius } => {
            for _ in 0..count {
                let cx = uniform_in(&mut rng, 0.0, w as f64);
                let cy = uniform_in(&mut rng, 0.0, h as f64);
                for y in 0..h {
                    for x in 0..w {
                        if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius * radius {
                            data[y * w + x] = true;
                        }
                    }
                }
            }
        }
    }
    BinaryMask::new(w, h, data).expect("mask sized from dims")
}

fn mark_segment(data: &mut [bool], w: usize, h: usize, a: (f64, f64), b: (f64, f64), half: f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ex, ey) = (px - t * dx, py - t * dy);
            if ex * ex + ey * ey <= half * half {
                data[y * w + x] = true;
            }
        }
    }
}

/// One phantom record. The label is the clean deformed modality A, i.e.
/// the fixed image before artifacts.
pub fn generate_phantom_pair(p: &PhantomParams, id: &str) -> Result<PairRecord> {
    p.validate()?;
    let (w, h) = (p.width, p.height);
    let a = modality_a(p);
    let mut rng = prng(derive_seed(p.seed, 1));
    let tex_b = texture(w, h, p.texture_scale, &mut rng);
    let b: Vec<f64> = a
        .iter()
        .zip(&tex_b)
        .map(|(&v, &t)| (remap(v, &p.modality_map) + p.modality_texture * t).clamp(0.0, 1.0))
        .collect();
    let a = GrayImage::new(w, h, a)?;
    let (clean, truth) = elastic_deform(&a, &p.deform)?;
    let mask = artifact_mask(w, h, &p.artifact, p.seed);
    let fixed_data = clean
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &hit)| if hit { 0.0 } else { v })
        .collect();
    Ok(PairRecord {
        id: id.to_string(),
        source: id.to_string(),
        fixed: GrayImage::new(w, h, fixed_data)?,
        moving: GrayImage::new(w, h, b)?,
        label: Some(clean),
        truth_field: Some(truth),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointError {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Statistics of `|pred - truth|` over the mask (all pixels by default).
pub fn endpoint_error(
    pred: &DisplacementField,
    truth: &DisplacementField,
    mask: Option<&BinaryMask>,
) -> Result<EndpointError> {
    ensure_dims("endpoint_error", truth.dims(), pred.dims())?;
    if let Some(m) = mask {
        ensure_dims("endpoint_error mask", truth.dims(), m.dims())?;
    }
    let errs: Vec<f64> = (0..pred.len())
        .filter(|&i| mask.map_or(true, |m| m.data()[i]))
        .map(|i| (pred.dx[i] - truth.dx[i]).hypot(pred.dy[i] - truth.dy[i]))
        .collect();
    if errs.is_empty() {
        return Err(Error::Param("endpoint error over an empty mask".into()));
    }
    Ok(EndpointError {
        mean: errs.iter().sum::<f64>() / errs.len() as f64,
        median: quantile(&errs, 0.5),
        p95: quantile(&errs, 0.95),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub mix: LevelMix,
    pub levels: LevelTable,
    pub artifact: Artifact,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n: 40,
            width: 128,
            height: 96,
            mix: LevelMix::default(),
            levels: LevelTable::default(),
            artifact: Artifact::None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomEntry {
    pub record: PairRecord,
    pub level: Level,
    pub params: PhantomParams,
}

/// `n` phantoms; record `r` is generated from `derive_seed(seed, r)`.
pub fn generate_benchmark_set(cfg: &BenchmarkConfig) -> Result<Vec<PhantomEntry>> {
    if cfg.n == 0 {
        return Err(Error::Param("benchmark needs n >= 1".into()));
    }
    cfg.levels.validate()?;
    let levels = cfg.mix.assign(cfg.n, derive_seed(cfg.seed, u64::MAX));
    levels
        .par_iter()
        .enumerate()
        .map(|(r, &level)| {
            let seed = derive_seed(cfg.seed, r as u64);
            let deform = sample_deform_params(cfg.levels.get(level), derive_seed(seed, 10))?;
            let mut params = PhantomParams::new(cfg.width, cfg.height, deform, seed);
            params.artifact = cfg.artifact;
            let record = generate_phantom_pair(&params, &format!("phantom_{r:03}"))?;
            Ok(PhantomEntry {
                record,
                level,
                params,
            })
        })
        .collect()
}

/// A smooth image and its copy translated by `(shift, 0)` pixels:
/// `moving(x) = fixed(x - shift)`, so the aligning field is `(shift, 0)`.
pub fn translated_pair(w: usize, h: usize, shift: f64, seed: u64) -> Result<PairRecord> {
    let mut rng = prng(seed);
    let blobs: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                uniform_in(&mut rng, 0.2, 0.8) * w as f64,
                uniform_in(&mut rng, 0.2, 0.8) * h as f64,
                uniform_in(&mut rng, 0.08, 0.16) * w.min(h) as f64,
            )
        })
        .collect();
    let amp: Vec<f64> = (0..5).map(|_| rng.gen_range(0.4..0.8)).collect();
    let render = |dx: f64| {
        GrayImage::from_fn(w, h, |x, y| {
            let v: f64 = blobs
                .iter()
                .zip(&amp)
                .map(|(&(cx, cy, r), &a)| {
                    let d2 = (x as f64 - dx - cx).powi(2) + (y as f64 - cy).powi(2);
                    a * (-d2 / (2.0 * r * r)).exp()
                })
                .sum();
            0.1 + 0.8 * v.min(1.0)
        })
    };
    let fixed = render(0.0);
    let moving = render(shift);
    let id = format!("shift_{seed}");
    Ok(PairRecord {
        id: id.clone(),
        source: id,
        fixed,
        moving,
        label: None,
        truth_field: Some(DisplacementField::constant(w, h, shift, 0.0)?),
    })
}

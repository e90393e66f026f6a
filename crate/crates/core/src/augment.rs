//! Elastic deformation augmentation.
//!
//! A deformation is built from i.i.d. uniform noise on [-1, 1] per pixel and
//! axis, smoothed with a truncated Gaussian of width `filter_size` and
//! standard deviation `sigma`, then scaled by `alpha`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_bilinear, DisplacementField};
use crate::imagecore::GrayImage;
use crate::pipeline::PairRecord;
use crate::rng::{derive_seed, prng, uniform_in, uniform_pm1};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformParams {
    pub sigma: f64,
    pub alpha: f64,
    pub filter_size: usize,
    pub seed: u64,
}

impl DeformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Param(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Param(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.filter_size % 2 == 0 {
            return Err(Error::Param(format!(
                "filter size must be odd, got {}",
                self.filter_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];
}

/// Sampling ranges for one deformation intensity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityLevel {
    pub level: Level,
    pub sigma_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub filter_choices: Vec<usize>,
}

impl IntensityLevel {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.sigma_range;
        let (a0, a1) = self.alpha_range;
        if !(s0 > 0.0 && s0 <= s1) || !(a0 >= 0.0 && a0 <= a1) {
            return Err(Error::Param(format!("bad ranges for {:?}", self.level)));
        }
        if self.filter_choices.is_empty() || self.filter_choices.iter().any(|f| f % 2 == 0) {
            return Err(Error::Param(format!(
                "filter choices for {:?} must be nonempty and odd",
                self.level
            )));
        }
        Ok(())
    }
}

/// The three intensity levels in increasing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub low: IntensityLevel,
    pub medium: IntensityLevel,
    pub high: IntensityLevel,
}

impl Default for LevelTable {
    fn default() -> Self {
        Self {
            low: IntensityLevel {
                level: Level::Low,
                sigma_range: (8.0, 12.0),
                alpha_range: (30.0, 60.0),
                filter_choices: vec![21],
            },
            medium: IntensityLevel {
                level: Level::Medium,
                sigma_range: (6.0, 10.0),
                alpha_range: (60.0, 110.0),
                filter_choices: vec![21, 31],
            },
            high: IntensityLevel {
                level: Level::High,
                sigma_range: (5.0, 8.0),
                alpha_range: (100.0, 150.0),
                filter_choices: vec![31, 41],
            },
        }
    }
}

impl LevelTable {
    pub fn get(&self, level: Level) -> &IntensityLevel {
        match level {
            Level::Low => &self.low,
            Level::Medium => &self.medium,
            Level::High => &self.high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in Level::ALL {
            self.get(l).validate()?;
        }
        Ok(())
    }

    /// Checks that alpha upper bounds strictly increase from low to high.
    pub fn check_ordering(&self) -> Result<()> {
        if !(self.low.alpha_range.1 < self.medium.alpha_range.1
            && self.medium.alpha_range.1 < self.high.alpha_range.1)
        {
            return Err(Error::Param(
                "alpha upper bounds must increase from low to high".into(),
            ));
        }
        Ok(())
    }

    /// Same table with a level whose alpha is pinned to zero everywhere.
    pub fn zero_alpha() -> Self {
        let mut t = Self::default();
        for l in [&mut t.low, &mut t.medium, &mut t.high] {
            l.alpha_range = (0.0, 0.0);
        }
        t
    }
}

/// Relative weights of low / medium / high records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMix {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Default for LevelMix {
    fn default() -> Self {
        Self {
            low: 0.4,
            medium: 0.4,
            high: 0.2,
        }
    }
}

impl LevelMix {
    pub fn only(level: Level) -> Self {
        let mut m = Self {
            low: 0.0,
            medium: 0.0,
            high: 0.0,
        };
        match level {
            Level::Low => m.low = 1.0,
            Level::Medium => m.medium = 1.0,
            Level::High => m.high = 1.0,
        }
        m
    }

    /// Parses `low:med:high` weights such as `40:40:20`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Param(format!("bad level mix {s:?}")))?;
        if parts.len() != 3 || parts.iter().any(|v| !(*v >= 0.0)) || parts.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Param(format!("bad level mix {s:?}")));
        }
        Ok(Self {
            low: parts[0],
            medium: parts[1],
            high: parts[2],
        })
    }

    /// Assigns a level to each of `n` records: largest-remainder quotas,
    /// then a seeded shuffle.
    pub fn assign(&self, n: usize, seed: u64) -> Vec<Level> {
        let weights = [self.low, self.medium, self.high];
        let total: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut short = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if short == 0 {
                break;
            }
            if weights[i] > 0.0 {
                counts[i] += 1;
                short -= 1;
            }
        }
        let mut out: Vec<Level> = Level::ALL
            .iter()
            .zip(&counts)
            .flat_map(|(l, &c)| std::iter::repeat(*l).take(c))
            .collect();
        out.shuffle(&mut prng(seed));
        out
    }
}

/// I.i.d. uniform [-1, 1] displacements; all of dx first, then dy.
pub fn random_unit_field(w: usize, h: usize, seed: u64) -> Result<DisplacementField> {
    let mut rng = prng(seed);
    let n = w * h;
    let dx = (0..n).map(|_| uniform_pm1(&mut rng)).collect();
    let dy = (0..n).map(|_| uniform_pm1(&mut rng)).collect();
    DisplacementField::new(w, h, dx, dy)
}

/// Normalised 1D Gaussian taps of odd width `size`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index into `0..n` (edge sample repeated: -1 -> 0, n -> n-1).
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub(crate) fn convolve_separable(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as i64 + j as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (j, &kv) in k.iter().enumerate() {
            let sy = reflect(y as i64 + j as i64 - r, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Separable truncated-Gaussian smoothing of both field components with
/// mirrored borders.
pub fn gaussian_smooth_field(
    phi: &DisplacementField,
    params: &DeformParams,
) -> Result<DisplacementField> {
    params.validate()?;
    if params.filter_size == 1 {
        return Ok(phi.clone());
    }
    let k = gaussian_kernel_1d(params.filter_size, params.sigma);
    let (w, h) = phi.dims();
    DisplacementField::new(
        w,
        h,
        convolve_separable(&phi.dx, w, h, &k),
        convolve_separable(&phi.dy, w, h, &k),
    )
}

/// The field `alpha * smooth(noise(seed))` for an image of the given size.
pub fn elastic_field(w: usize, h: usize, params: &DeformParams) -> Result<DisplacementField> {
    params.validate()?;
    let noise = random_unit_field(w, h, params.seed)?;
    Ok(gaussian_smooth_field(&noise, params)?.scaled(params.alpha))
}

pub fn elastic_deform(
    img: &GrayImage,
    params: &DeformParams,
) -> Result<(GrayImage, DisplacementField)> {
    let field = elastic_field(img.width(), img.height(), params)?;
    Ok((warp_bilinear(img, &field)?, field))
}

/// Draws sigma, alpha and filter size (in that order) from the level's
/// ranges; the field seed is the next raw output.
pub fn sample_deform_params(level: &IntensityLevel, seed: u64) -> Result<DeformParams> {
    level.validate()?;
    let mut rng = prng(seed);
    let sigma = uniform_in(&mut rng, level.sigma_range.0, level.sigma_range.1);
    let alpha = uniform_in(&mut rng, level.alpha_range.0, level.alpha_range.1);
    let filter_size = level.filter_choices[rng.gen_range(0..level.filter_choices.len())];
    let seed = rng.next_u64();
    Ok(DeformParams {
        sigma,
        alpha,
        filter_size,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Deform the histology-like fixed image; the moving image is untouched.
    Unsupervised,
    /// Deform the moving image and keep its original as the label.
    Supervised,
}

/// Per-record generation output, kept for manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentInfo {
    pub level: Level,
    pub params: DeformParams,
}

/// Expands each input pair into `per_pair` deformed records.
///
/// Input pairs are taken as aligned (fixed, moving). Record `r` uses seed
/// `derive_seed(seed, r)`, so the output does not depend on evaluation order.
pub fn build_augmented_set(
    pairs: &[PairRecord],
    per_pair: usize,
    mode: AugmentMode,
    levels: &LevelTable,
    mix: &LevelMix,
    seed: u64,
) -> Result<Vec<(PairRecord, AugmentInfo)>> {
    if pairs.is_empty() {
        return Err(Error::Param("augmentation input is empty".into()));
    }
    if per_pair == 0 {
        return Err(Error::Param("per_pair must be at least 1".into()));
    }
    levels.validate()?;
    let total = pairs.len() * per_pair;
    let assigned = mix.assign(total, derive_seed(seed, u64::MAX));
    let mut out = Vec::with_capacity(total);
    for (pi, pair) in pairs.iter().enumerate() {
        for k in 0..per_pair {
            let r = pi * per_pair + k;
            let level = assigned[r];
            let params = sample_deform_params(levels.get(level), derive_seed(seed, r as u64))?;
            let id = format!("{}_aug{:03}", pair.id, k);
            let record = match mode {
                AugmentMode::Unsupervised => {
                    let (fixed, field) = elastic_deform(&pair.fixed, &params)?;
                    PairRecord {
                        id,
                        source: pair.source.clone(),
                        fixed,
                        moving: pair.moving.clone(),
                        label: None,
                        truth_field: Some(field),
                    }
                }
                AugmentMode::Supervised => {
                    let (moving, field) = elastic_deform(&pair.moving, &params)?;
                    PairRecord {
                        id,
                        source: pair.source.clone(),
                        fixed: pair.fixed.clone(),
                        moving,
                        label: Some(pair.moving.clone()),
                        truth_field: Some(field),
                    }
                }
            };
            out.push((record, AugmentInfo { level, params }));
        }
    }
    Ok(out)
}

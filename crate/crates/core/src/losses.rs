//! Similarity and regularisation terms.
//!
//! Hard-binned mutual information is used for reporting; the Parzen-window
//! form is the differentiable surrogate used during optimisation. The
//! training objective is `-MI(F, M∘φ) + λ·smooth(φ)` (unsupervised) or
//! `MSE(γ, M∘φ) + λ·smooth(φ)` (supervised).

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::field::{warp_backward, warp_bilinear, DisplacementField};
use crate::imagecore::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub bins: usize,
    /// Parzen kernel standard deviation, in bins.
    pub parzen_width: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            bins: 32,
            parzen_width: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.bins < 2 {
            return Err(Error::Param(format!("bins must be >= 2, got {}", self.bins)));
        }
        if !(self.parzen_width > 0.0) {
            return Err(Error::Param(format!(
                "parzen width must be > 0, got {}",
                self.parzen_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_field: Option<DisplacementField>,
    /// Gradient with respect to the second (predicted) image.
    pub grad_image: Option<Vec<f64>>,
}

/// `bins × bins` joint counts, rows indexed by the first image.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<f64>,
}

impl JointHistogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.bins + j]
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        self.counts
            .chunks_exact(self.bins)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for row in self.counts.chunks_exact(self.bins) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }

    /// Natural-log mutual information of the normalised histogram.
    pub fn mutual_information(&self) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let mi = plogp_sum(&self.counts, total)
            - (plogp_sum(&self.marginal_a(), total) + plogp_sum(&self.marginal_b(), total));
        mi.max(0.0)
    }
}

/// `Σ p ln p` over `counts / total`, skipping empty cells. Terms are summed
/// in sorted order so the result does not depend on cell layout.
fn plogp_sum(counts: &[f64], total: f64) -> f64 {
    let mut terms: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            p * p.ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

#[inline]
pub(crate) fn hard_bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn joint_histogram_hard(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<JointHistogram> {
    ensure_dims("joint_histogram_hard", a.dims(), b.dims())?;
    if bins < 2 {
        return Err(Error::Param(format!("bins must be >= 2, got {bins}")));
    }
    let mut counts = vec![0.0; bins * bins];
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        counts[hard_bin(va, bins) * bins + hard_bin(vb, bins)] += 1.0;
    }
    Ok(JointHistogram { bins, counts })
}

pub fn hmi_hard(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<f64> {
    Ok(joint_histogram_hard(a, b, bins)?.mutual_information())
}

/// Shannon entropy (nats) of the hard intensity histogram.
pub fn entropy_hard(img: &GrayImage, bins: usize) -> f64 {
    let mut counts = vec![0.0; bins];
    for &v in img.data() {
        counts[hard_bin(v, bins)] += 1.0;
    }
    -plogp_sum(&counts, img.len() as f64)
}

/// Sparse Parzen weights of one intensity: bins `start..start+len`.
struct Parzen {
    start: usize,
    len: usize,
    w: [f64; MAX_TAPS],
    dw: [f64; MAX_TAPS],
}

const MAX_TAPS: usize = 16;

struct ParzenKernel {
    bins: usize,
    sigma: f64,
    reach: f64,
}

impl ParzenKernel {
    fn new(bins: usize, sigma: f64) -> Result<Self> {
        let reach = 3.0 * sigma;
        if 2.0 * reach.floor() + 1.0 > MAX_TAPS as f64 {
            return Err(Error::Param(format!(
                "parzen width {sigma} too wide for {MAX_TAPS} taps"
            )));
        }
        Ok(Self { bins, sigma, reach })
    }

    /// Normalised weights and their derivatives with respect to the intensity.
    fn eval(&self, v: f64) -> Parzen {
        let b = self.bins as f64;
        let raw = v * b - 0.5;
        let last = b - 1.0;
        let (u, du) = if raw < 0.0 {
            (0.0, 0.0)
        } else if raw > last {
            (last, 0.0)
        } else {
            (raw, b)
        };
        let lo = (u - self.reach).ceil().max(0.0) as usize;
        let hi = ((u + self.reach).floor() as usize).min(self.bins - 1);
        let mut p = Parzen {
            start: lo,
            len: 0,
            w: [0.0; MAX_TAPS],
            dw: [0.0; MAX_TAPS],
        };
        if lo > hi {
            // no centre within reach: all mass on the nearest bin
            p.start = (u.round() as usize).min(self.bins - 1);
            p.len = 1;
            p.w[0] = 1.0;
            return p;
        }
        p.len = hi - lo + 1;
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let mut sum = 0.0;
        let mut dsum = 0.0;
        for t in 0..p.len {
            let d = u - (lo + t) as f64;
            let g = (-0.5 * d * d * inv_s2).exp();
            p.w[t] = g;
            p.dw[t] = -d * inv_s2 * g;
            sum += g;
            dsum += p.dw[t];
        }
        for t in 0..p.len {
            let w = p.w[t] / sum;
            p.dw[t] = du * (p.dw[t] - w * dsum) / sum;
            p.w[t] = w;
        }
        p
    }
}

/// Parzen-window mutual information and its gradient with respect to `b`.
pub fn hmi_soft(a: &GrayImage, b: &GrayImage, cfg: &LossConfig) -> Result<LossValue> {
    ensure_dims("hmi_soft", a.dims(), b.dims())?;
    cfg.validate()?;
    let bins = cfg.bins;
    let kernel = ParzenKernel::new(bins, cfg.parzen_width)?;
    let n = a.len() as f64;
    let wa: Vec<Parzen> = a.data().iter().map(|&v| kernel.eval(v)).collect();
    let wb: Vec<Parzen> = b.data().iter().map(|&v| kernel.eval(v)).collect();

    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for (pa_i, pb_i) in wa.iter().zip(&wb) {
        for s in 0..pa_i.len {
            let k = pa_i.start + s;
            pa[k] += pa_i.w[s];
            let row = &mut joint[k * bins..(k + 1) * bins];
            for t in 0..pb_i.len {
                row[pb_i.start + t] += pa_i.w[s] * pb_i.w[t];
            }
        }
        for t in 0..pb_i.len {
            pb[pb_i.start + t] += pb_i.w[t];
        }
    }
    let value = (plogp_sum(&joint, n) - plogp_sum(&pa, n) - plogp_sum(&pb, n)).max(0.0);

    let safe_ln = |c: f64| if c > 0.0 { (c / n).ln() } else { 0.0 };
    let log_joint: Vec<f64> = joint.iter().map(|&c| safe_ln(c)).collect();
    let log_pb: Vec<f64> = pb.iter().map(|&c| safe_ln(c)).collect();

    let grad: Vec<f64> = wa
        .iter()
        .zip(&wb)
        .map(|(pa_i, pb_i)| {
            let mut g = 0.0;
            for t in 0..pb_i.len {
                let dw = pb_i.dw[t];
                if dw == 0.0 {
                    continue;
                }
                let l = pb_i.start + t;
                let mut inner = -log_pb[l];
                for s in 0..pa_i.len {
                    inner += pa_i.w[s] * log_joint[(pa_i.start + s) * bins + l];
                }
                g += dw * inner;
            }
            g / n
        })
        .collect();

    Ok(LossValue {
        value,
        grad_field: None,
        grad_image: Some(grad),
    })
}

pub fn mse(gamma: &GrayImage, pred: &GrayImage) -> Result<LossValue> {
    ensure_dims("mse", gamma.dims(), pred.dims())?;
    let n = gamma.len() as f64;
    let mut value = 0.0;
    let grad = gamma
        .data()
        .iter()
        .zip(pred.data())
        .map(|(g, p)| {
            let d = p - g;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad_field: None,
        grad_image: Some(grad),
    })
}

/// Diffusion regulariser: squared forward differences of both components in
/// x and y, summed and divided by `2 · pixels`.
pub fn smoothness(phi: &DisplacementField) -> LossValue {
    let (w, h) = phi.dims();
    let norm = 2.0 * (w * h) as f64;
    let mut value = 0.0;
    let mut gdx = vec![0.0; w * h];
    let mut gdy = vec![0.0; w * h];
    for (src, grad) in [(&phi.dx, &mut gdx), (&phi.dy, &mut gdy)] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = src[i + 1] - src[i];
                    value += d * d;
                    let g = 2.0 * d / norm;
                    grad[i + 1] += g;
                    grad[i] -= g;
                }
                if y + 1 < h {
                    let d = src[i + w] - src[i];
                    value += d * d;
                    let g = 2.0 * d / norm;
                    grad[i + w] += g;
                    grad[i] -= g;
                }
            }
        }
    }
    LossValue {
        value: value / norm,
        grad_field: Some(
            DisplacementField::new(w, h, gdx, gdy).expect("gradient of a valid field is finite"),
        ),
        grad_image: None,
    }
}

fn combine(
    sim_value: f64,
    sim_grad_image: Vec<f64>,
    moving: &GrayImage,
    phi: &DisplacementField,
    lambda: f64,
) -> Result<LossValue> {
    let mut grad = warp_backward(moving, phi, &sim_grad_image)?;
    let mut value = sim_value;
    if lambda > 0.0 {
        let reg = smoothness(phi);
        value += lambda * reg.value;
        grad.add_scaled(reg.grad_field.as_ref().unwrap(), lambda);
    }
    Ok(LossValue {
        value,
        grad_field: Some(grad),
        grad_image: None,
    })
}

/// `-MI(F, M∘φ) + λ·smooth(φ)` with its field gradient.
pub fn total_loss_unsupervised(
    fixed: &GrayImage,
    moving: &GrayImage,
    phi: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossValue> {
    ensure_dims("total_loss_unsupervised", fixed.dims(), moving.dims())?;
    let warped = warp_bilinear(moving, phi)?;
    let mi = hmi_soft(fixed, &warped, cfg)?;
    let neg: Vec<f64> = mi.grad_image.unwrap().into_iter().map(|g| -g).collect();
    combine(-mi.value, neg, moving, phi, cfg.lambda)
}

/// `MSE(γ, M∘φ) + λ·smooth(φ)` with its field gradient.
pub fn total_loss_supervised(
    gamma: &GrayImage,
    moving: &GrayImage,
    phi: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossValue> {
    ensure_dims("total_loss_supervised", gamma.dims(), moving.dims())?;
    cfg.validate()?;
    let warped = warp_bilinear(moving, phi)?;
    let m = mse(gamma, &warped)?;
    combine(m.value, m.grad_image.unwrap(), moving, phi, cfg.lambda)
}

//! The registration network: a two-level encoder-decoder with skip
//! connections mapping a `[F, M]` input to a displacement field in pixels.

pub mod checkpoint;
pub mod layers;

use std::hash::{Hash, Hasher};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_dims, Error, Result};
use crate::field::DisplacementField;
use crate::imagecore::GrayImage;
use crate::rng::prng;
use layers::{
    add_into, avg_pool2, avg_pool2_backward, concat, concat_backward, conv_backward, conv_forward,
    leaky_relu, leaky_relu_backward, upsample2, upsample2_backward, Conv, Scalar, Tensor, KSIZE,
};

/// `(name, in channels, out channels)` in forward order.
pub const LAYER_TABLE: [(&str, usize, usize); 8] = [
    ("enc1a", 2, 16),
    ("enc1b", 16, 16),
    ("enc2a", 16, 32),
    ("enc2b", 32, 32),
    ("bottleneck", 32, 32),
    ("dec1", 64, 32),
    ("dec2", 48, 16),
    ("flow", 16, 2),
];

const ENC1A: usize = 0;
const ENC1B: usize = 1;
const ENC2A: usize = 2;
const ENC2B: usize = 3;
const BOTTLENECK: usize = 4;
const DEC1: usize = 5;
const DEC2: usize = 6;
const FLOW: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    pub layers: Vec<Conv<T>>,
}

impl<T: Scalar> NetParams<T> {
    pub fn zeros() -> Self {
        Self {
            layers: LAYER_TABLE
                .iter()
                .map(|&(name, cin, cout)| Conv::zeros(name, cin, cout))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Every scalar in layer order, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| Conv {
                    name: l.name.clone(),
                    cin: l.cin,
                    cout: l.cout,
                    weight: l.weight.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Checks block names and shapes against [`LAYER_TABLE`].
    pub fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != LAYER_TABLE.len() {
            return Err(Error::Param(format!(
                "expected {} layers, got {}",
                LAYER_TABLE.len(),
                self.layers.len()
            )));
        }
        for (l, &(name, cin, cout)) in self.layers.iter().zip(&LAYER_TABLE) {
            let ok = l.name == name
                && l.cin == cin
                && l.cout == cout
                && l.weight.len() == cout * cin * KSIZE * KSIZE
                && l.bias.len() == cout;
            if !ok {
                return Err(Error::Param(format!(
                    "layer {:?} does not match {name} {cin}->{cout}",
                    l.name
                )));
            }
        }
        Ok(())
    }

    /// Elementwise sum, used to reduce per-pair gradients.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.values_mut() {
            *v *= s;
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.values() {
            v.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// He-normal kernels, zero biases, and an all-zero flow layer.
pub fn init_params<T: Scalar>(seed: u64) -> NetParams<T> {
    let mut rng = prng(seed);
    let mut params = NetParams::zeros();
    for layer in params.layers.iter_mut().take(FLOW) {
        let std = (2.0 / (layer.cin * KSIZE * KSIZE) as f64).sqrt();
        for w in &mut layer.weight {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = T::from_f64(std * z);
        }
    }
    params
}

/// Activations of one forward pass, consumed by [`backward`].
#[derive(Debug)]
pub struct Tape<T> {
    fingerprint: u64,
    dims: (usize, usize),
    input: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    p1: Tensor<T>,
    a3: Tensor<T>,
    a4: Tensor<T>,
    p2: Tensor<T>,
    a5: Tensor<T>,
    c1: Tensor<T>,
    a6: Tensor<T>,
    c2: Tensor<T>,
    a7: Tensor<T>,
}

impl<T> Tape<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }
}

fn check_input(fixed: &GrayImage, moving: &GrayImage) -> Result<()> {
    ensure_dims("network input", fixed.dims(), moving.dims())?;
    let (w, h) = fixed.dims();
    if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
        return Err(Error::Param(format!(
            "network input {w}x{h} must have both sides a positive multiple of 4; pad the images first"
        )));
    }
    Ok(())
}

/// Runs the network on `[F, M]` and returns φ with its tape.
pub fn forward<T: Scalar>(
    params: &NetParams<T>,
    fixed: &GrayImage,
    moving: &GrayImage,
) -> Result<(DisplacementField, Tape<T>)> {
    check_input(fixed, moving)?;
    params.check_shapes()?;
    let (w, h) = fixed.dims();
    let data = fixed
        .data()
        .iter()
        .chain(moving.data())
        .map(|&v| T::from_f64(v))
        .collect();
    let input = Tensor::from_vec(2, h, w, data);
    let l = &params.layers;

    let a1 = leaky_relu(conv_forward(&l[ENC1A], &input));
    let a2 = leaky_relu(conv_forward(&l[ENC1B], &a1));
    let p1 = avg_pool2(&a2);
    let a3 = leaky_relu(conv_forward(&l[ENC2A], &p1));
    let a4 = leaky_relu(conv_forward(&l[ENC2B], &a3));
    let p2 = avg_pool2(&a4);
    let a5 = leaky_relu(conv_forward(&l[BOTTLENECK], &p2));
    let c1 = concat(&upsample2(&a5), &a4);
    let a6 = leaky_relu(conv_forward(&l[DEC1], &c1));
    let c2 = concat(&upsample2(&a6), &a2);
    let a7 = leaky_relu(conv_forward(&l[DEC2], &c2));
    let out = conv_forward(&l[FLOW], &a7);

    let as_f64 = |s: &[T]| s.iter().map(|v| v.as_f64()).collect();
    let phi = DisplacementField::new(w, h, as_f64(out.channel(0)), as_f64(out.channel(1)))?;
    let tape = Tape {
        fingerprint: params.fingerprint(),
        dims: (w, h),
        input,
        a1,
        a2,
        p1,
        a3,
        a4,
        p2,
        a5,
        c1,
        a6,
        c2,
        a7,
    };
    Ok((phi, tape))
}

/// Forward pass without keeping activations.
pub fn predict<T: Scalar>(
    params: &NetParams<T>,
    fixed: &GrayImage,
    moving: &GrayImage,
) -> Result<DisplacementField> {
    forward(params, fixed, moving).map(|(phi, _)| phi)
}

/// Parameter gradients of `<grad_field, φ>` for the pass recorded in `tape`.
pub fn backward<T: Scalar>(
    params: &NetParams<T>,
    tape: Tape<T>,
    grad_field: &DisplacementField,
) -> Result<NetParams<T>> {
    if tape.fingerprint != params.fingerprint() {
        return Err(Error::StaleTape(
            "parameters changed since the forward pass".into(),
        ));
    }
    if grad_field.dims() != tape.dims {
        return Err(Error::StaleTape(format!(
            "tape recorded {:?}, gradient field is {:?}",
            tape.dims,
            grad_field.dims()
        )));
    }
    let Tape {
        input,
        a1,
        a2,
        p1,
        a3,
        a4,
        p2,
        a5,
        c1,
        a6,
        c2,
        a7,
        ..
    } = tape;
    let (w, h) = grad_field.dims();
    let l = &params.layers;
    let mut g = NetParams::zeros();
    let gl = &mut g.layers;

    let gdata = grad_field
        .dx
        .iter()
        .chain(&grad_field.dy)
        .map(|&v| T::from_f64(v))
        .collect();
    let gout = Tensor::from_vec(2, h, w, gdata);

    let g7 = conv_backward(&l[FLOW], &a7, &gout, &mut gl[FLOW], true).unwrap();
    let g7 = leaky_relu_backward(&a7, g7);
    let gc2 = conv_backward(&l[DEC2], &c2, &g7, &mut gl[DEC2], true).unwrap();
    let (gu2, gskip2) = concat_backward(&gc2, a6.c);
    let g6 = leaky_relu_backward(&a6, upsample2_backward(&gu2));
    let gc1 = conv_backward(&l[DEC1], &c1, &g6, &mut gl[DEC1], true).unwrap();
    let (gu1, gskip1) = concat_backward(&gc1, a5.c);
    let g5 = leaky_relu_backward(&a5, upsample2_backward(&gu1));
    let gp2 = conv_backward(&l[BOTTLENECK], &p2, &g5, &mut gl[BOTTLENECK], true).unwrap();
    let mut g4 = avg_pool2_backward(&gp2, a4.h, a4.w);
    add_into(&mut g4, &gskip1);
    let g4 = leaky_relu_backward(&a4, g4);
    let g3 = conv_backward(&l[ENC2B], &a3, &g4, &mut gl[ENC2B], true).unwrap();
    let g3 = leaky_relu_backward(&a3, g3);
    let gp1 = conv_backward(&l[ENC2A], &p1, &g3, &mut gl[ENC2A], true).unwrap();
    let mut g2 = avg_pool2_backward(&gp1, a2.h, a2.w);
    add_into(&mut g2, &gskip2);
    let g2 = leaky_relu_backward(&a2, g2);
    let g1 = conv_backward(&l[ENC1B], &a1, &g2, &mut gl[ENC1B], true).unwrap();
    let g1 = leaky_relu_backward(&a1, g1);
    conv_backward(&l[ENC1A], &input, &g1, &mut gl[ENC1A], false);
    Ok(g)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: NetParams<T>,
    pub v: NetParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: NetParams::zeros(),
            v: NetParams::zeros(),
        }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut NetParams<T>,
    grads: &NetParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    params.check_shapes()?;
    grads.check_shapes()?;
    state.m.check_shapes()?;
    state.v.check_shapes()?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Param(format!("learning rate {lr} must be finite and >= 0")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let m_iter = state.m.values_mut();
    let v_iter = state.v.values_mut();
    for (((p, g), m), v) in params.values_mut().zip(grads.values()).zip(m_iter).zip(v_iter) {
        let g = g.as_f64();
        let mn = ADAM_BETA1 * m.as_f64() + (1.0 - ADAM_BETA1) * g;
        let vn = ADAM_BETA2 * v.as_f64() + (1.0 - ADAM_BETA2) * g * g;
        *m = T::from_f64(mn);
        *v = T::from_f64(vn);
        let step = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
        *p = T::from_f64(p.as_f64() - step);
    }
    Ok(())
}

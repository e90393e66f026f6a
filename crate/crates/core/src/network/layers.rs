//! Tensor primitives with hand-written reverse passes.
//!
//! Every op works on channel-major `C×H×W` tensors. Convolutions are 3×3
//! with zero "same" padding, lowered to GEMM through an im2col buffer.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point type the network can run in: `f32` for training, `f64`
/// for gradient checks.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` for row-major operands given as
    /// (rows, cols, row stride, col stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the asserted lengths cover every index reachable with
                // the dense row-major strides used by callers in this module.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// A 3×3 convolution block: `weight[cout][cin][3][3]`, `bias[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE;

impl<T: Scalar> Conv<T> {
    pub fn zeros(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            name: name.to_string(),
            cin,
            cout,
            weight: vec![T::zero(); cout * cin * TAPS],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `col[(ci·9 + ky·3 + kx), y·w + x] = x[ci, y+ky-1, x+kx-1]`, zero outside.
fn im2col<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let plane = h * w;
    let mut col = vec![T::zero(); x.c * TAPS * plane];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = ci * TAPS + ky * KSIZE + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let x_off = kx as isize - 1;
                // output columns whose source x + x_off is in range
                let out_lo = if x_off < 0 { 1 } else { 0 };
                let out_hi = if x_off > 0 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for ox in out_lo..out_hi {
                        drow[ox] = srow[(ox as isize + x_off) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adds the columns back onto an input-shaped gradient.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * plane..(ci + 1) * plane];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = ci * TAPS + ky * KSIZE + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let x_off = kx as isize - 1;
                let out_lo = if x_off < 0 { 1 } else { 0 };
                let out_hi = if x_off > 0 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for ox in out_lo..out_hi {
                        dst[sy * w + (ox as isize + x_off) as usize] += src[y * w + ox];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_forward<T: Scalar>(layer: &Conv<T>, x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.c, layer.cin, "conv {} input channels", layer.name);
    let plane = x.plane();
    let col = im2col(x);
    let mut out = Tensor::zeros(layer.cout, x.h, x.w);
    for (co, b) in layer.bias.iter().enumerate() {
        out.data[co * plane..(co + 1) * plane].fill(*b);
    }
    let k = layer.cin * TAPS;
    T::gemm(
        layer.cout,
        k,
        plane,
        T::one(),
        &layer.weight,
        k as isize,
        1,
        &col,
        plane as isize,
        1,
        T::one(),
        &mut out.data,
        plane as isize,
        1,
    );
    out
}

/// Reverse pass of [`conv_forward`]. Returns the input gradient when
/// `need_input` is set, and accumulates parameter gradients into `grad`.
pub fn conv_backward<T: Scalar>(
    layer: &Conv<T>,
    x: &Tensor<T>,
    gout: &Tensor<T>,
    grad: &mut Conv<T>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let plane = x.plane();
    let k = layer.cin * TAPS;
    let col = im2col(x);
    // dW += gout · colᵀ
    T::gemm(
        layer.cout,
        plane,
        k,
        T::one(),
        &gout.data,
        plane as isize,
        1,
        &col,
        1,
        plane as isize,
        T::one(),
        &mut grad.weight,
        k as isize,
        1,
    );
    for (co, gb) in grad.bias.iter_mut().enumerate() {
        let mut s = T::zero();
        for v in &gout.data[co * plane..(co + 1) * plane] {
            s += *v;
        }
        *gb += s;
    }
    if !need_input {
        return None;
    }
    // dcol = Wᵀ · gout
    let mut dcol = vec![T::zero(); k * plane];
    T::gemm(
        k,
        layer.cout,
        plane,
        T::one(),
        &layer.weight,
        1,
        k as isize,
        &gout.data,
        plane as isize,
        1,
        T::zero(),
        &mut dcol,
        plane as isize,
        1,
    );
    Some(col2im(&dcol, x.c, x.h, x.w))
}

pub fn leaky_relu<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
    x
}

/// Multiplies `g` by the activation slope, read from the activation output.
pub fn leaky_relu_backward<T: Scalar>(act: &Tensor<T>, mut g: Tensor<T>) -> Tensor<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    for (gv, a) in g.data.iter_mut().zip(&act.data) {
        if *a <= T::zero() {
            *gv *= slope;
        }
    }
    g
}

/// 2×2 average pooling with stride 2. Height and width must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                let s = src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1];
                out.data[(c * h2 + y) * w2 + xx] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = g.data[(c * g.h + y / 2) * g.w + x / 2] * quarter;
            }
        }
    }
    out
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (g.h / 2, g.w / 2);
    let mut out = Tensor::zeros(g.c, h2, w2);
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                out.data[(c * h2 + y / 2) * w2 + x / 2] += g.data[(c * g.h + y) * g.w + x];
            }
        }
    }
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

pub fn concat_backward<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let split = ca * g.plane();
    (
        Tensor::from_vec(ca, g.h, g.w, g.data[..split].to_vec()),
        Tensor::from_vec(g.c - ca, g.h, g.w, g.data[split..].to_vec()),
    )
}

pub(crate) fn add_into<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    acc.add_assign(other);
}

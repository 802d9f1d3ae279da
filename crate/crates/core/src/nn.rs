//! Minimal dense and convolutional layers with hand-written backward passes.
//!
//! Everything is `f64` and single-sample for convolutions (`C×H×W`), batched
//! for dense layers (`B×F`).

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Named, flat access to trainable parameters.
///
/// Visiting order is fixed per type, so two values of the same shape can be
/// zipped by position (parameters with their gradients, optimizer moments).
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count(p: &dyn Params) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

pub fn flatten(p: &dyn Params) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// Overwrite parameters from a flat vector laid out as by [`flatten`].
pub fn unflatten(p: &mut dyn Params, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, v| {
        let n = v.len();
        v.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len(), "parameter layout mismatch");
}

/// `dst += src`, element by element in visiting order.
pub fn accumulate(dst: &mut dyn Params, src: &dyn Params) {
    let flat = flatten(src);
    let mut offset = 0;
    dst.visit_mut("", &mut |_, v| {
        let n = v.len();
        for (d, s) in v.iter_mut().zip(&flat[offset..offset + n]) {
            *d += s;
        }
        offset += n;
    });
}

pub fn all_finite(p: &dyn Params) -> bool {
    let mut ok = true;
    p.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
    ok
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer, `weight` is `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for both weight and bias.
    pub fn uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || dist.sample(rng)),
            bias: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_features(), self.out_features())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`, returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn backward_vec(&self, x: &Array1<f64>, dy: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (o, &g) in dy.iter().enumerate() {
            grad.weight.row_mut(o).scaled_add(g, x);
        }
        grad.bias += dy;
        self.weight.t().dot(dy)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), self.weight.shape(), slice_of(&self.weight));
        f(&join(prefix, "bias"), self.bias.shape(), slice_of(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), slice_of_mut(&mut self.weight));
        f(&join(prefix, "bias"), slice_of_mut(&mut self.bias));
    }
}

/// 2-D convolution over a single `C×H×W` map, lowered to a matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out×in×k×k`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn zeros(input: usize, output: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Array4::zeros((output, input, kernel, kernel)),
            bias: Array1::zeros(output),
            stride,
            padding,
        }
    }

    /// Kaiming-uniform style initialization, `±1/sqrt(fan_in)`.
    pub fn uniform<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (input * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Self {
            weight: Array4::from_shape_simple_fn((output, input, kernel, kernel), || dist.sample(rng)),
            bias: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels(), self.out_channels(), self.kernel(), self.stride, self.padding)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return None;
        }
        Some(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    /// Unfolds `x` into `(C·k·k) × (oh·ow)` patch columns.
    pub fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let (oh, ow) = self.output_size(h, w).expect("input smaller than kernel");
        let (stride, pad) = (self.stride as isize, self.padding as isize);
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        let out = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            let plane = x.slice(s![ci, .., ..]);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = plane[[iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = shape;
        let k = self.kernel();
        let (oh, ow) = self.output_size(h, w).expect("input smaller than kernel");
        let (stride, pad) = (self.stride as isize, self.padding as isize);
        let mut x = Array3::<f64>::zeros(shape);
        let src = cols.as_slice().expect("contiguous columns");
        for ci in 0..c {
            let mut plane = x.slice_mut(s![ci, .., ..]);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[[iy as usize, ix as usize]] += col[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        self.forward_with_cols(x).0
    }

    pub fn forward_with_cols(&self, x: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w).expect("input smaller than kernel");
        let cols = self.im2col(x);
        let mut y = self.weight_matrix().dot(&cols);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("output reshape");
        (y, cols)
    }

    pub fn backward_input(&self, dy: ArrayView3<f64>, input_shape: (usize, usize, usize)) -> Array3<f64> {
        let (o, oh, ow) = dy.dim();
        let dy = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, oh * ow))
            .expect("gradient reshape");
        let dcols = self.weight_matrix().t().dot(&dy);
        self.col2im(&dcols, input_shape)
    }

    pub fn backward_params(&self, cols: &Array2<f64>, dy: ArrayView3<f64>, grad: &mut Conv2d) {
        let (o, oh, ow) = dy.dim();
        let dy = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, oh * ow))
            .expect("gradient reshape");
        let dw = dy.dot(&cols.t());
        let (_, i, k, _) = grad.weight.dim();
        grad.weight += &dw.into_shape_with_order((o, i, k, k)).expect("weight reshape");
        grad.bias += &dy.sum_axis(Axis(1));
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), self.weight.shape(), slice_of(&self.weight));
        f(&join(prefix, "bias"), self.bias.shape(), slice_of(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), slice_of_mut(&mut self.weight));
        f(&join(prefix, "bias"), slice_of_mut(&mut self.bias));
    }
}

/// Max pooling without padding; remembers the winning input offset per output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w).expect("input smaller than pooling window");
        let mut y = Array3::<f64>::zeros((c, oh, ow));
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let (iy, ix) = (oy * self.stride + ky, ox * self.stride + kx);
                            let v = x[[ci, iy, ix]];
                            if v > best {
                                best = v;
                                at = iy * w + ix;
                            }
                        }
                    }
                    y[[ci, oy, ox]] = best;
                    argmax.push(at);
                }
            }
        }
        (y, argmax)
    }

    pub fn backward(&self, dy: ArrayView3<f64>, argmax: &[usize], input_shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = input_shape;
        let mut dx = Array3::<f64>::zeros((c, h, w));
        let plane = dy.shape()[1] * dy.shape()[2];
        for ((idx, &g), &at) in dy.iter().enumerate().zip(argmax) {
            let ci = idx / plane;
            dx[[ci, at / w, at % w]] += g;
        }
        dx
    }
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the rectified output was not positive.
pub fn relu_backward_inplace(grad: &mut Array3<f64>, output: &Array3<f64>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Per-channel spatial mean of a `C×H×W` map.
pub fn global_average_pool(x: ArrayView3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w))
        .expect("reshape")
        .mean_axis(Axis(1))
        .expect("non-empty spatial extent")
}

//! Small convolutional building blocks with explicit backward passes.
//!
//! Tensors are single images in channel-major `C × H × W` layout. Convolutions
//! are 3×3 with zero padding of one pixel and are lowered to a matrix product
//! through an im2col buffer that the backward pass reuses.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;

const K: usize = 3;
const KK: usize = K * K;

/// 3×3 convolution, padding 1. `weight` is `(out, in·9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * KK) as f32;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Array2::from_shape_simple_fn((out_ch, in_ch * KK), || rng.random_range(-bound..=bound)),
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / KK
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Returns the output and the im2col buffer.
    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels());
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(x, self.stride, oh, ow);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("standard layout");
        (out, cols)
    }

    /// Given `dL/dout`, accumulates parameter gradients into `grads` (if any)
    /// and returns `dL/dx` for an input of spatial size `input`.
    pub fn backward(
        &self,
        cols: &Array2<f32>,
        input: (usize, usize),
        d_out: &Array3<f32>,
        grads: Option<&mut Conv2d>,
    ) -> Array3<f32> {
        let (oc, oh, ow) = d_out.dim();
        let d2 = d_out
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("standard layout");
        if let Some(g) = grads {
            g.weight += &d2.dot(&cols.t());
            g.bias += &d2.sum_axis(Axis(1));
        }
        let d_cols = self.weight.t().dot(&d2);
        col2im(&d_cols, self.in_channels(), input, self.stride, (oh, ow))
    }
}

fn im2col(x: &Array3<f32>, stride: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f32>::zeros((c * KK, oh * ow));
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = (ch * KK + ky * K + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *o = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, c: usize, (h, w): (usize, usize), stride: usize, (oh, ow): (usize, usize)) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((c, h, w));
    let dst = x.as_slice_mut().expect("standard layout");
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ch * KK + ky * K + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    let col = &src[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in col.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(grad: &mut Array3<f32>, output: &Array3<f32>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Leaky ReLU with slope `slope` below zero.
pub fn leaky_relu_inplace(x: &mut Array3<f32>, slope: f32) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
}

/// Backward of [`leaky_relu_inplace`] given its output. Requires `slope > 0`
/// so the sign of the output matches the sign of the input.
pub fn leaky_relu_backward(grad: &mut Array3<f32>, output: &Array3<f32>, slope: f32) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g *= slope;
        }
    });
}

pub fn global_avg_pool(x: &Array3<f32>) -> Array1<f32> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .expect("standard layout")
        .mean_axis(Axis(1))
        .expect("non-empty")
}

pub fn global_avg_pool_backward(d: ArrayView1<f32>, (h, w): (usize, usize)) -> Array3<f32> {
    let scale = 1.0 / (h * w) as f32;
    let c = d.len();
    Array3::from_shape_fn((c, h, w), |(ch, _, _)| d[ch] * scale)
}

/// Affine map `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView1<f32>) -> Array1<f32> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(&self, x: ArrayView1<f32>, d_out: ArrayView1<f32>, grads: Option<&mut Linear>) -> Array1<f32> {
        if let Some(g) = grads {
            let outer = d_out
                .insert_axis(Axis(1))
                .dot(&x.insert_axis(Axis(0)));
            g.weight += &outer;
            g.bias += &d_out;
        }
        self.weight.t().dot(&d_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        Array3::from_shape_fn((conv.out_channels(), oh, ow), |(o, oy, ox)| {
            let mut acc = conv.bias[o] as f64;
            for ch in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * conv.stride + ky) as isize - 1;
                        let ix = (ox * conv.stride + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[o, ch * 9 + ky * 3 + kx]] as f64
                                * x[[ch, iy as usize, ix as usize]] as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stride in [1, 2] {
            let conv = Conv2d::init(3, 5, stride, &mut rng);
            let x = Array3::from_shape_simple_fn((3, 9, 7), || rng.random_range(-1.0..1.0));
            let (y, _) = conv.forward(&x);
            let expected = naive_conv(&conv, &x);
            assert_eq!(y.dim(), expected.dim());
            for (a, b) in y.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // For a bias-free conv, <conv(x), g> == <x, conv^T(g)> and the weight
        // gradient satisfies <conv_W(x), g> == <W, dW>.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let mut conv = Conv2d::init(4, 3, stride, &mut rng);
            conv.bias.fill(0.0);
            let x = Array3::from_shape_simple_fn((4, 11, 8), || rng.random_range(-1.0..1.0));
            let (y, cols) = conv.forward(&x);
            let g = Array3::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
            let mut grads = conv.zeros_like();
            let dx = conv.backward(&cols, (11, 8), &g, Some(&mut grads));
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| (a * b) as f64).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
            let rhs_w: f64 = conv.weight.iter().zip(&grads.weight).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3, "{lhs} {rhs}");
            assert!((lhs - rhs_w).abs() < 1e-3, "{lhs} {rhs_w}");
            let total: f32 = g.sum_axis(Axis(2)).sum_axis(Axis(1)).sum();
            assert!((grads.bias.sum() - total).abs() < 1e-3);
        }
    }

    #[test]
    fn pooling_backward_spreads_evenly() {
        let x = Array3::from_shape_fn((2, 2, 3), |(c, i, j)| (c * 6 + i * 3 + j) as f32);
        let p = global_avg_pool(&x);
        assert_eq!(p.to_vec(), vec![2.5, 8.5]);
        let d = global_avg_pool_backward(ndarray::arr1(&[6.0, 12.0]).view(), (2, 3));
        assert!(d.slice(ndarray::s![0, .., ..]).iter().all(|&v| v == 1.0));
        assert!(d.slice(ndarray::s![1, .., ..]).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::init(4, 2, &mut rng);
        let x = ndarray::arr1(&[1.0, -2.0, 0.5, 3.0]);
        let d = ndarray::arr1(&[1.0, 0.0]);
        let mut g = lin.zeros_like();
        let dx = lin.backward(x.view(), d.view(), Some(&mut g));
        assert_eq!(dx, lin.weight.row(0));
        assert_eq!(g.weight.row(0), x);
        assert!(g.weight.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(g.bias.to_vec(), vec![1.0, 0.0]);
    }
}

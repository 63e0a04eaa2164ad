use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 17;

/// Filters and biases of one convolution layer.
///
/// `weights` is laid out `out_channels × in_channels × kernel × kernel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients of one convolution layer, laid out like [`ConvParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrads {
    pub fn zeros_like(params: &ConvParams) -> Self {
        ConvGrads { weights: vec![0.0; params.weights.len()], bias: vec![0.0; params.bias.len()] }
    }

    pub fn add_assign(&mut self, other: &ConvGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&v| v == 0.0)
    }
}

impl ConvParams {
    /// Zero-initialised parameters with explicit geometry.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv geometry must be positive: out={out_channels} in={in_channels} k={kernel} s={stride}"
            )));
        }
        Ok(ConvParams {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    /// Stride-1 parameters padded by `kernel / 2`, which preserves `H × W`.
    pub fn same(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("same padding needs an odd kernel, got {kernel}")));
        }
        Self::zeros(out_channels, in_channels, kernel, 1, kernel / 2)
    }

    pub fn from_parts(
        weights: Vec<f64>,
        bias: Vec<f64>,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mut p = Self::zeros(bias.len(), in_channels, kernel, stride, padding)?;
        if weights.len() != p.weights.len() {
            return Err(Error::shape(format!(
                "expected {} weights for {} filters of {}x{}x{}, got {}",
                p.weights.len(),
                p.out_channels,
                in_channels,
                kernel,
                kernel,
                weights.len()
            )));
        }
        p.weights = weights;
        p.bias = bias;
        Ok(p)
    }

    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn filter(&self, out: usize) -> &[f64] {
        let n = self.filter_len();
        &self.weights[out * n..(out + 1) * n]
    }

    pub fn filter_mut(&mut self, out: usize) -> &mut [f64] {
        let n = self.filter_len();
        &mut self.weights[out * n..(out + 1) * n]
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((out * self.in_channels + inp) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let span_h = height + 2 * self.padding;
        let span_w = width + 2 * self.padding;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::shape(format!(
                "{height}x{width} input with padding {} is smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok(((span_h - self.kernel) / self.stride + 1, (span_w - self.kernel) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        self.output_dims(input.height(), input.width())
    }
}

/// `C = A·B + beta·C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: A view out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: B view out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Column range `[lo, hi)` of output positions whose input tap `ox*stride + kx - pad`
/// lands inside `0..width`.
#[inline]
fn valid_span(out_w: usize, width: usize, kx: usize, pad: usize, stride: usize) -> (usize, usize) {
    // ox*stride + kx >= pad  and  ox*stride + kx < width + pad
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if width + pad > kx { (width + pad - kx).div_ceil(stride).min(out_w) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold output rows `oy0..oy1` into a `(in_channels·k·k) × (rows·out_w)` matrix.
fn im2col(input: &Tensor, p: &ConvParams, oy0: usize, oy1: usize, out_w: usize, col: &mut [f64]) {
    let (h, w) = (input.height(), input.width());
    let (k, s, pad) = (p.kernel, p.stride, p.padding);
    let n = (oy1 - oy0) * out_w;
    for c in 0..p.in_channels {
        let plane = input.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(out_w, w, kx, pad, s);
                for (r, oy) in (oy0..oy1).enumerate() {
                    let d = &mut dst[r * out_w..(r + 1) * out_w];
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    if s == 1 {
                        let start = lo + kx - pad;
                        d[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im(col: &[f64], p: &ConvParams, oy0: usize, oy1: usize, out_w: usize, grad: &mut Tensor) {
    let (h, w) = (grad.height(), grad.width());
    let (k, s, pad) = (p.kernel, p.stride, p.padding);
    let n = (oy1 - oy0) * out_w;
    for c in 0..p.in_channels {
        let plane = grad.channel_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(out_w, w, kx, pad, s);
                if lo >= hi {
                    continue;
                }
                for (r, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let g = &src[r * out_w..(r + 1) * out_w];
                    for ox in lo..hi {
                        dst[ox * s + kx - pad] += g[ox];
                    }
                }
            }
        }
    }
}

fn rows_per_chunk(filter_len: usize, out_h: usize, out_w: usize) -> usize {
    (COL_BUDGET / (filter_len * out_w).max(1)).clamp(1, out_h)
}

/// Windowed dot product of every filter with the zero-padded input, plus bias.
///
/// Spatial correlation: the kernel is not flipped.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let (oh, ow) = params.check_input(input)?;
    let mut out = Tensor::zeros(Shape::new(params.out_channels, oh, ow));
    let plane = oh * ow;
    let kdim = params.filter_len();
    if params.is_pointwise() {
        gemm(
            params.out_channels,
            kdim,
            plane,
            &params.weights,
            (kdim, 1),
            input.data(),
            (plane, 1),
            0.0,
            out.data_mut(),
            (plane, 1),
        );
    } else {
        let rows = rows_per_chunk(kdim, oh, ow);
        let mut col = vec![0.0; kdim * rows * ow];
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + rows).min(oh);
            let n = (oy1 - oy0) * ow;
            im2col(input, params, oy0, oy1, ow, &mut col[..kdim * n]);
            gemm(
                params.out_channels,
                kdim,
                n,
                &params.weights,
                (kdim, 1),
                &col[..kdim * n],
                (n, 1),
                0.0,
                &mut out.data_mut()[oy0 * ow..],
                (plane, 1),
            );
            oy0 = oy1;
        }
    }
    for (o, &b) in params.bias.iter().enumerate() {
        out.channel_mut(o).iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and parameters.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, ConvGrads)> {
    let (gi, gp) = conv2d_backward_impl(input, params, grad_out, true, true)?;
    Ok((gi.expect("input gradient requested"), gp))
}

/// Parameter gradients only; skips the input-gradient products.
pub fn conv2d_backward_params(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, params, grad_out, false, true).map(|(_, g)| g)
}

pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> Result<(Option<Tensor>, ConvGrads)> {
    let (oh, ow) = params.check_input(input)?;
    let expected = Shape::new(params.out_channels, oh, ow);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad_out is {}, forward output is {expected}",
            grad_out.shape()
        )));
    }
    let plane = oh * ow;
    let kdim = params.filter_len();
    let cout = params.out_channels;
    let mut grads = ConvGrads::zeros_like(params);
    if need_params {
        for (o, gb) in grads.bias.iter_mut().enumerate() {
            *gb = grad_out.channel(o).iter().sum();
        }
    }
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));

    if params.is_pointwise() {
        // dW = dY · Xᵀ, dX = Wᵀ · dY
        if need_params {
            gemm(cout, plane, kdim, grad_out.data(), (plane, 1), input.data(), (1, plane), 0.0, &mut grads.weights, (kdim, 1));
        }
        if let Some(gi) = grad_in.as_mut() {
            gemm(kdim, cout, plane, &params.weights, (1, kdim), grad_out.data(), (plane, 1), 0.0, gi.data_mut(), (plane, 1));
        }
        return Ok((grad_in, grads));
    }

    let rows = rows_per_chunk(kdim, oh, ow);
    let mut col = vec![0.0; kdim * rows * ow];
    let mut gcol = if need_input { vec![0.0; kdim * rows * ow] } else { Vec::new() };
    let mut oy0 = 0;
    while oy0 < oh {
        let oy1 = (oy0 + rows).min(oh);
        let n = (oy1 - oy0) * ow;
        let go = &grad_out.data()[oy0 * ow..];
        im2col(input, params, oy0, oy1, ow, &mut col[..kdim * n]);
        if need_params {
            gemm(cout, n, kdim, go, (plane, 1), &col[..kdim * n], (1, n), 1.0, &mut grads.weights, (kdim, 1));
        }
        if let Some(gi) = grad_in.as_mut() {
            gemm(kdim, cout, n, &params.weights, (1, kdim), go, (plane, 1), 0.0, &mut gcol[..kdim * n], (n, 1));
            col2im(&gcol[..kdim * n], params, oy0, oy1, ow, gi);
        }
        oy0 = oy1;
    }
    Ok((grad_in, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_params(out: usize, inp: usize, k: usize, s: usize, pad: usize, rng: &mut ChaCha8Rng) -> ConvParams {
        let mut p = ConvParams::zeros(out, inp, k, s, pad).unwrap();
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        p
    }

    /// Direct nested-loop correlation, independent of the im2col path.
    fn naive_conv(input: &Tensor, p: &ConvParams) -> Tensor {
        let (oh, ow) = p.output_dims(input.height(), input.width()).unwrap();
        Tensor::from_fn(Shape::new(p.out_channels, oh, ow), |o, y, x| {
            let mut acc = p.bias[o];
            for c in 0..p.in_channels {
                for ky in 0..p.kernel {
                    for kx in 0..p.kernel {
                        let iy = (y * p.stride + ky) as isize - p.padding as isize;
                        let ix = (x * p.stride + kx) as isize - p.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < input.height() && (ix as usize) < input.width() {
                            acc += p.weight(o, c, ky, kx) * input.get(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn zero_input_isolates_bias() {
        let mut p = ConvParams::same(1, 1, 3).unwrap();
        p.weights.iter_mut().for_each(|w| *w = 0.3);
        p.bias[0] = 0.5;
        let out = conv2d_forward(&Tensor::zeros(Shape::new(1, 3, 3)), &p).unwrap();
        assert_eq!(out, Tensor::filled(Shape::new(1, 3, 3), 0.5));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(Shape::new(1, 5, 7), &mut rng);
        let p = ConvParams::from_parts(vec![1.0], vec![0.0], 1, 1, 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_valid_conv_sums_window() {
        let x = Tensor::from_vec(Shape::new(1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let p = ConvParams::from_parts(vec![1.0; 9], vec![0.0], 1, 3, 1, 0).unwrap();
        let out = conv2d_forward(&x, &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 45.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, k, s, pad, h, w) in &[
            (2, 3, 3, 1, 1, 6, 5),
            (3, 2, 7, 1, 3, 9, 11),
            (1, 4, 5, 2, 2, 10, 9),
            (2, 2, 3, 3, 0, 10, 8),
            (4, 3, 1, 1, 0, 4, 4),
            (2, 1, 2, 2, 1, 5, 5),
        ] {
            let x = random_tensor(Shape::new(cin, h, w), &mut rng);
            let p = random_params(cout, cin, k, s, pad, &mut rng);
            let fast = conv2d_forward(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn large_input_spans_several_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(Shape::new(8, 70, 66), &mut rng);
        let p = random_params(4, 8, 7, 1, 3, &mut rng);
        assert!(rows_per_chunk(p.filter_len(), 70, 66) < 70);
        let d = conv2d_forward(&x, &p).unwrap().max_abs_diff(&naive_conv(&x, &p));
        assert!(d < 1e-11, "{d}");
    }

    #[test]
    fn channel_mismatch_is_error() {
        let p = ConvParams::same(2, 3, 3).unwrap();
        let err = conv2d_forward(&Tensor::zeros(Shape::new(2, 4, 4)), &p).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn kernel_larger_than_input_is_error() {
        let p = ConvParams::zeros(1, 1, 5, 1, 0).unwrap();
        assert!(conv2d_forward(&Tensor::zeros(Shape::new(1, 3, 3)), &p).is_err());
    }

    #[test]
    fn same_padding_needs_odd_kernel() {
        assert!(ConvParams::same(1, 1, 4).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(Shape::new(2, 4, 4), &mut rng);
        let p = random_params(3, 2, 3, 1, 1, &mut rng);
        let (gi, gp) = conv2d_backward(&x, &p, &Tensor::zeros(Shape::new(3, 4, 4))).unwrap();
        assert_eq!(gi.sum(), 0.0);
        assert!(gp.is_zero());
    }

    #[test]
    fn unit_kernel_backward_passes_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(Shape::new(1, 3, 4), &mut rng);
        let g = random_tensor(Shape::new(1, 3, 4), &mut rng);
        let p = ConvParams::from_parts(vec![1.0], vec![0.0], 1, 1, 1, 0).unwrap();
        let (gi, _) = conv2d_backward(&x, &p, &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let p = ConvParams::same(3, 2, 3).unwrap();
        let x = Tensor::zeros(Shape::new(2, 4, 4));
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(Shape::new(3, 4, 5))).is_err());
    }

    #[test]
    fn params_only_backward_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(Shape::new(3, 9, 7), &mut rng);
        let p = random_params(2, 3, 3, 2, 1, &mut rng);
        let (oh, ow) = p.output_dims(9, 7).unwrap();
        let g = random_tensor(Shape::new(2, oh, ow), &mut rng);
        let (_, full) = conv2d_backward(&x, &p, &g).unwrap();
        assert_eq!(conv2d_backward_params(&x, &p, &g).unwrap(), full);
    }

    #[test]
    fn conv_is_linear_in_input_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = random_params(2, 2, 3, 1, 1, &mut rng);
        p.bias.fill(0.0);
        let x = random_tensor(Shape::new(2, 5, 5), &mut rng);
        let y = random_tensor(Shape::new(2, 5, 5), &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let fx = conv2d_forward(&x, &p).unwrap();
        let fy = conv2d_forward(&y, &p).unwrap();
        let fm = conv2d_forward(&mix, &p).unwrap();
        for i in 0..fm.data().len() {
            assert!((fm.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-12);
        }
    }
}

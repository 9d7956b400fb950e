//! Dense real tensors and 2-D convolution kernels.
//!
//! This is the whole numeric substrate: a channels-first `f64` array type, a
//! padding-free strided convolution with both backward passes, and nothing
//! else. Every gradient in the crate bottoms out in these three kernels, so
//! they are checked against finite differences in the test suite.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// A C×H×W array of 64-bit reals, row-major.
///
/// Used for images in both pixel ([0,255]) and generator ([-1,1]) coordinates,
/// and for convolution feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Euclidean distance to another tensor of the same shape.
    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a padding-free strided convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
            return Err(Error::config(
                "convolution spec dimensions must all be positive",
            ));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
        })
    }

    /// Output spatial dims: floor((in - kernel)/stride) + 1. Errors if not strictly positive.
    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if in_h < self.kernel_h || in_w < self.kernel_w {
            return Err(Error::config(format!(
                "input {}x{} smaller than kernel {}x{}",
                in_h, in_w, self.kernel_h, self.kernel_w
            )));
        }
        let oh = (in_h - self.kernel_h) / self.stride + 1;
        let ow = (in_w - self.kernel_w) / self.stride + 1;
        Ok((oh, ow))
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    fn check_input(&self, input: &ImageTensor) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels {
            return Err(Error::config(format!(
                "input has {} channels, spec expects {}",
                input.channels(),
                self.in_channels
            )));
        }
        self.output_dims(input.height(), input.width())
    }

    fn check_weights(&self, weights: &[f64], bias: &[f64]) -> Result<()> {
        if weights.len() != self.weight_len() {
            return Err(Error::config(format!(
                "weights length {} does not match spec ({} expected)",
                weights.len(),
                self.weight_len()
            )));
        }
        if bias.len() != self.out_channels {
            return Err(Error::config(format!(
                "bias length {} does not match out_channels {}",
                bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators so the f64 additions do not
/// form one serial dependency chain (lets the optimizer keep the FPU busy).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Forward convolution. Weights are laid out (K, C, r_h, r_w) row-major.
pub fn conv2d_forward(
    input: &ImageTensor,
    weights: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> Result<ImageTensor> {
    let (oh, ow) = spec.check_input(input)?;
    spec.check_weights(weights, bias)?;
    let (c_in, in_h, in_w) = input.shape();
    let (rh, rw, stride) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let mut out = ImageTensor::zeros(spec.out_channels, oh, ow);
    let idata = input.data();
    let odata = out.data_mut();
    for k in 0..spec.out_channels {
        let wk = &weights[k * c_in * rh * rw..(k + 1) * c_in * rh * rw];
        let b = bias[k];
        for oy in 0..oh {
            let iy0 = oy * stride;
            for ox in 0..ow {
                let ix0 = ox * stride;
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..rh {
                        let irow = &idata[(c * in_h + iy0 + ky) * in_w + ix0..][..rw];
                        let wrow = &wk[(c * rh + ky) * rw..][..rw];
                        acc += dot(irow, wrow);
                    }
                }
                odata[(k * oh + oy) * ow + ox] = acc + b;
            }
        }
    }
    Ok(out)
}

/// Gradient of the forward pass with respect to the input: a transpose
/// convolution that scatter-adds `upstream` back through the strided windows.
pub fn conv2d_input_grad(
    upstream: &ImageTensor,
    weights: &[f64],
    spec: &ConvSpec,
    input_h: usize,
    input_w: usize,
) -> Result<ImageTensor> {
    let (oh, ow) = spec.output_dims(input_h, input_w)?;
    if upstream.shape() != (spec.out_channels, oh, ow) {
        return Err(Error::config(format!(
            "upstream shape {:?} does not match expected ({}, {}, {})",
            upstream.shape(),
            spec.out_channels,
            oh,
            ow
        )));
    }
    if weights.len() != spec.weight_len() {
        return Err(Error::config(format!(
            "weights length {} does not match spec ({} expected)",
            weights.len(),
            spec.weight_len()
        )));
    }
    let c_in = spec.in_channels;
    let (rh, rw, stride) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let mut grad = ImageTensor::zeros(c_in, input_h, input_w);
    let gdata = grad.data_mut();
    let udata = upstream.data();
    for k in 0..spec.out_channels {
        let wk = &weights[k * c_in * rh * rw..(k + 1) * c_in * rh * rw];
        for oy in 0..oh {
            let iy0 = oy * stride;
            for ox in 0..ow {
                let ix0 = ox * stride;
                let u = udata[(k * oh + oy) * ow + ox];
                if u == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for ky in 0..rh {
                        let grow = &mut gdata[(c * input_h + iy0 + ky) * input_w + ix0..][..rw];
                        let wrow = &wk[(c * rh + ky) * rw..][..rw];
                        for j in 0..rw {
                            grow[j] += u * wrow[j];
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Gradients of the forward pass with respect to weights and bias.
/// Bias gradient is the per-channel sum of `upstream`.
pub fn conv2d_param_grad(
    input: &ImageTensor,
    upstream: &ImageTensor,
    spec: &ConvSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (oh, ow) = spec.check_input(input)?;
    if upstream.shape() != (spec.out_channels, oh, ow) {
        return Err(Error::config(format!(
            "upstream shape {:?} does not match expected ({}, {}, {})",
            upstream.shape(),
            spec.out_channels,
            oh,
            ow
        )));
    }
    let (c_in, in_h, in_w) = input.shape();
    let (rh, rw, stride) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let mut wgrad = vec![0.0; spec.weight_len()];
    let mut bgrad = vec![0.0; spec.out_channels];
    let idata = input.data();
    let udata = upstream.data();
    for k in 0..spec.out_channels {
        let wgk = &mut wgrad[k * c_in * rh * rw..(k + 1) * c_in * rh * rw];
        let mut bsum = 0.0;
        for oy in 0..oh {
            let iy0 = oy * stride;
            for ox in 0..ow {
                let ix0 = ox * stride;
                let u = udata[(k * oh + oy) * ow + ox];
                bsum += u;
                if u == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for ky in 0..rh {
                        let irow = &idata[(c * in_h + iy0 + ky) * in_w + ix0..][..rw];
                        let grow = &mut wgk[(c * rh + ky) * rw..][..rw];
                        for j in 0..rw {
                            grow[j] += u * irow[j];
                        }
                    }
                }
            }
        }
        bgrad[k] = bsum;
    }
    Ok((wgrad, bgrad))
}

/// Draw a tensor of i.i.d. N(0,1) entries.
pub fn gaussian_sample(rng: &mut SeededRng, channels: usize, height: usize, width: usize) -> ImageTensor {
    let data = rng.normal_vec(channels * height * width);
    ImageTensor {
        channels,
        height,
        width,
        data,
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Brute-force convolution written as independent scalar loops; the oracle
    /// for conv2d_forward and the base for finite-difference checks.
    pub fn conv_oracle(
        input: &ImageTensor,
        weights: &[f64],
        bias: &[f64],
        spec: &ConvSpec,
    ) -> ImageTensor {
        let (oh, ow) = spec.output_dims(input.height(), input.width()).unwrap();
        let mut out = ImageTensor::zeros(spec.out_channels, oh, ow);
        for k in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[k];
                    for c in 0..spec.in_channels {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iv = input.get(c, oy * spec.stride + ky, ox * spec.stride + kx);
                                let wv = weights[((k * spec.in_channels + c) * spec.kernel_h + ky)
                                    * spec.kernel_w
                                    + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out.set(k, oy, ox, acc);
                }
            }
        }
        out
    }

    pub fn random_tensor(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> ImageTensor {
        gaussian_sample(rng, c, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = SeededRng::new(3);
        let input = random_tensor(&mut rng, 1, 4, 5);
        let spec = ConvSpec::new(1, 1, 1, 1, 1).unwrap();
        let out = conv2d_forward(&input, &[1.0], &[0.0], &spec).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_input_yields_bias() {
        let input = ImageTensor::zeros(2, 6, 6);
        let spec = ConvSpec::new(2, 3, 3, 3, 1).unwrap();
        let weights: Vec<f64> = (0..spec.weight_len()).map(|i| i as f64 * 0.1).collect();
        let bias = vec![1.5, -2.0, 0.25];
        let out = conv2d_forward(&input, &weights, &bias, &spec).unwrap();
        for k in 0..3 {
            for y in 0..out.height() {
                for x in 0..out.width() {
                    assert_eq!(out.get(k, y, x), bias[k]);
                }
            }
        }
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let mut rng = SeededRng::new(11);
        let input = random_tensor(&mut rng, 1, 6, 6);
        let spec = ConvSpec::new(1, 1, 3, 3, 3).unwrap();
        let weights = rng.normal_vec(9);
        let bias = vec![0.3];
        let out = conv2d_forward(&input, &weights, &bias, &spec).unwrap();
        assert_eq!(out.shape(), (1, 2, 2));
        let expect = conv_oracle(&input, &weights, &bias, &spec);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!(rel_err(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let input = ImageTensor::zeros(2, 4, 4);
        let spec = ConvSpec::new(3, 1, 3, 3, 1).unwrap();
        let err = conv2d_forward(&input, &vec![0.0; spec.weight_len()], &[0.0], &spec).unwrap_err();
        assert!(err.to_string().contains("channels"));
        let tiny = ImageTensor::zeros(3, 2, 2);
        let err = conv2d_forward(&tiny, &vec![0.0; spec.weight_len()], &[0.0], &spec).unwrap_err();
        assert!(err.to_string().contains("smaller than kernel"));
    }

    #[test]
    fn input_grad_trivial_cases() {
        let spec = ConvSpec::new(1, 1, 1, 1, 1).unwrap();
        let upstream = ImageTensor::zeros(1, 3, 3);
        let g = conv2d_input_grad(&upstream, &[1.0], &spec, 3, 3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let mut rng = SeededRng::new(5);
        let upstream = random_tensor(&mut rng, 1, 3, 3);
        let g = conv2d_input_grad(&upstream, &[1.0], &spec, 3, 3).unwrap();
        assert_eq!(g, upstream);
    }

    #[test]
    fn param_grad_trivial_cases() {
        let mut rng = SeededRng::new(6);
        let input = random_tensor(&mut rng, 2, 5, 5);
        let spec = ConvSpec::new(2, 2, 2, 2, 1).unwrap();
        let zeros = ImageTensor::zeros(2, 4, 4);
        let (wg, bg) = conv2d_param_grad(&input, &zeros, &spec).unwrap();
        assert!(wg.iter().all(|&v| v == 0.0));
        assert!(bg.iter().all(|&v| v == 0.0));

        let ones = ImageTensor::from_vec(2, 4, 4, vec![1.0; 32]).unwrap();
        let (_, bg) = conv2d_param_grad(&input, &ones, &spec).unwrap();
        // bias gradient = H'*W' per channel for an all-ones upstream
        assert_eq!(bg, vec![16.0, 16.0]);
    }

    /// Central finite differences of conv2d_forward with respect to the input.
    fn fd_input_grad(
        input: &ImageTensor,
        upstream: &ImageTensor,
        weights: &[f64],
        bias: &[f64],
        spec: &ConvSpec,
        h: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fp: f64 = conv2d_forward(&plus, weights, bias, spec)
                .unwrap()
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum();
            let fm: f64 = conv2d_forward(&minus, weights, bias, spec)
                .unwrap()
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum();
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let spec = ConvSpec::new(2, 3, 3, 3, 2).unwrap();
        let input = random_tensor(&mut rng, 2, 7, 7);
        let weights = rng.normal_vec(spec.weight_len());
        let bias = rng.normal_vec(3);
        let upstream = random_tensor(&mut rng, 3, 3, 3);
        let analytic = conv2d_input_grad(&upstream, &weights, &spec, 7, 7).unwrap();
        let numeric = fd_input_grad(&input, &upstream, &weights, &bias, &spec, 1e-5);
        for (a, b) in analytic.data().iter().zip(&numeric) {
            assert!(rel_err(*a, *b) < 1e-6, "analytic {a} numeric {b}");
        }
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let mut rng = SeededRng::new(22);
        let spec = ConvSpec::new(2, 2, 3, 3, 2).unwrap();
        let input = random_tensor(&mut rng, 2, 7, 7);
        let weights = rng.normal_vec(spec.weight_len());
        let bias = rng.normal_vec(2);
        let upstream = random_tensor(&mut rng, 2, 3, 3);
        let (wg, bg) = conv2d_param_grad(&input, &upstream, &spec).unwrap();
        let h = 1e-5;
        let proj = |w: &[f64], b: &[f64]| -> f64 {
            conv2d_forward(&input, w, b, &spec)
                .unwrap()
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(a, u)| a * u)
                .sum()
        };
        for i in 0..weights.len() {
            let mut wp = weights.clone();
            wp[i] += h;
            let mut wm = weights.clone();
            wm[i] -= h;
            let num = (proj(&wp, &bias) - proj(&wm, &bias)) / (2.0 * h);
            assert!(rel_err(wg[i], num) < 1e-8, "w[{i}]: {} vs {num}", wg[i]);
        }
        for i in 0..bias.len() {
            let mut bp = bias.clone();
            bp[i] += h;
            let mut bm = bias.clone();
            bm[i] -= h;
            let num = (proj(&weights, &bp) - proj(&weights, &bm)) / (2.0 * h);
            assert!(rel_err(bg[i], num) < 1e-8);
        }
    }

    #[test]
    fn gaussian_sample_trivia() {
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        let ta = gaussian_sample(&mut a, 2, 3, 4);
        let tb = gaussian_sample(&mut b, 2, 3, 4);
        assert_eq!(ta, tb);
        let mut c = SeededRng::new(10);
        let tc = gaussian_sample(&mut c, 2, 3, 4);
        assert_ne!(ta, tc);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// conv2d_forward is linear in the input (bias fixed at zero).
        #[test]
        fn forward_linear_in_input(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = SeededRng::new(seed);
            let spec = ConvSpec::new(2, 2, 3, 3, 2).unwrap();
            let x = random_tensor(&mut rng, 2, 7, 7);
            let y = random_tensor(&mut rng, 2, 7, 7);
            let w = rng.normal_vec(spec.weight_len());
            let zb = vec![0.0; 2];
            let mut combo = x.clone();
            for (v, (xv, yv)) in combo.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
                *v = a * xv + b * yv;
            }
            let fc = conv2d_forward(&combo, &w, &zb, &spec).unwrap();
            let fx = conv2d_forward(&x, &w, &zb, &spec).unwrap();
            let fy = conv2d_forward(&y, &w, &zb, &spec).unwrap();
            for ((c, xv), yv) in fc.data().iter().zip(fx.data()).zip(fy.data()) {
                prop_assert!((c - (a * xv + b * yv)).abs() < 1e-12);
            }
        }

        /// Forward kernel agrees with the scalar-loop oracle on random geometry.
        #[test]
        fn forward_matches_oracle_random(seed in 0u64..1000, stride in 1usize..4) {
            let mut rng = SeededRng::new(seed);
            let spec = ConvSpec::new(3, 2, 3, 3, stride).unwrap();
            let input = random_tensor(&mut rng, 3, 9, 9);
            let w = rng.normal_vec(spec.weight_len());
            let b = rng.normal_vec(2);
            let fast = conv2d_forward(&input, &w, &b, &spec).unwrap();
            let slow = conv_oracle(&input, &w, &b, &spec);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

//! The energy network F(I, θ): convolution → ReLU → dense-to-scalar.
//!
//! F approximates the negative energy of an image distribution. The image
//! update of the defense ascends ∂F/∂I; the network update ascends the
//! likelihood gradient ∂F/∂θ contrast between the reference and the
//! synthesized image. Both gradients here are exact (ReLU subgradient at the
//! kink is 0) and are validated against finite differences in the tests.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{conv2d_forward, conv2d_input_grad, conv2d_param_grad, ConvSpec, ImageTensor};

/// Architecture of the generator: one conv bank and one dense readout.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorArch {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Std-dev of the N(0, σ²) initialization of W and V.
    pub sigma_init: f64,
}

impl GeneratorArch {
    pub fn conv_spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(
            self.input_channels,
            self.filters,
            self.kernel,
            self.kernel,
            self.stride,
        )
    }

    /// Feature-map dims (H', W'); errors if not strictly positive.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        self.conv_spec()?
            .output_dims(self.input_height, self.input_width)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_dims().map(|_| ())
    }
}

/// θ of the generator. Shapes follow the [`GeneratorArch`] that created them:
/// conv weights (K, C, r, r), conv bias (K), dense weights (K, H', W'),
/// dense bias scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub conv_weights: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub dense_weights: Vec<f64>,
    pub dense_bias: f64,
}

impl GeneratorParams {
    pub fn zeros(arch: &GeneratorArch) -> Result<Self> {
        let spec = arch.conv_spec()?;
        let (fh, fw) = arch.feature_dims()?;
        Ok(GeneratorParams {
            conv_weights: vec![0.0; spec.weight_len()],
            conv_bias: vec![0.0; arch.filters],
            dense_weights: vec![0.0; arch.filters * fh * fw],
            dense_bias: 0.0,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.conv_weights.iter().all(|v| v.is_finite())
            && self.conv_bias.iter().all(|v| v.is_finite())
            && self.dense_weights.iter().all(|v| v.is_finite())
            && self.dense_bias.is_finite()
    }

    /// Sum of squares over every parameter, for abort diagnostics.
    pub fn squared_norm(&self) -> f64 {
        self.conv_weights.iter().map(|v| v * v).sum::<f64>()
            + self.conv_bias.iter().map(|v| v * v).sum::<f64>()
            + self.dense_weights.iter().map(|v| v * v).sum::<f64>()
            + self.dense_bias * self.dense_bias
    }

    /// self += scale * other, element-wise across all parameter groups.
    pub fn add_scaled(&mut self, other: &GeneratorParams, scale: f64) {
        for (a, b) in self.conv_weights.iter_mut().zip(&other.conv_weights) {
            *a += scale * b;
        }
        for (a, b) in self.conv_bias.iter_mut().zip(&other.conv_bias) {
            *a += scale * b;
        }
        for (a, b) in self.dense_weights.iter_mut().zip(&other.dense_weights) {
            *a += scale * b;
        }
        self.dense_bias += scale * other.dense_bias;
    }

    /// Flatten into a single vector (conv W, conv B, dense V, dense c).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.conv_weights.len() + self.conv_bias.len() + self.dense_weights.len() + 1,
        );
        v.extend_from_slice(&self.conv_weights);
        v.extend_from_slice(&self.conv_bias);
        v.extend_from_slice(&self.dense_weights);
        v.push(self.dense_bias);
        v
    }

    pub fn from_flat(arch: &GeneratorArch, flat: &[f64]) -> Result<Self> {
        let mut p = GeneratorParams::zeros(arch)?;
        let expect =
            p.conv_weights.len() + p.conv_bias.len() + p.dense_weights.len() + 1;
        if flat.len() != expect {
            return Err(Error::config(format!(
                "flat parameter vector length {} does not match arch ({expect} expected)",
                flat.len()
            )));
        }
        let (w, rest) = flat.split_at(p.conv_weights.len());
        let (b, rest) = rest.split_at(p.conv_bias.len());
        let (v, c) = rest.split_at(p.dense_weights.len());
        p.conv_weights.copy_from_slice(w);
        p.conv_bias.copy_from_slice(b);
        p.dense_weights.copy_from_slice(v);
        p.dense_bias = c[0];
        Ok(p)
    }
}

/// Random initialization: W, V ~ N(0, σ_init²); biases zero.
pub fn init_params(rng: &mut SeededRng, arch: &GeneratorArch) -> Result<GeneratorParams> {
    let mut p = GeneratorParams::zeros(arch)?;
    for v in p.conv_weights.iter_mut() {
        *v = arch.sigma_init * rng.normal();
    }
    for v in p.dense_weights.iter_mut() {
        *v = arch.sigma_init * rng.normal();
    }
    Ok(p)
}

fn check_input(arch: &GeneratorArch, image: &ImageTensor) -> Result<()> {
    let expect = (arch.input_channels, arch.input_height, arch.input_width);
    if image.shape() != expect {
        return Err(Error::config(format!(
            "image shape {:?} does not match generator input {:?}",
            image.shape(),
            expect
        )));
    }
    Ok(())
}

/// Conv pre-activations cached between the forward value and the backward passes.
struct ForwardCache {
    pre_activations: ImageTensor,
}

fn forward_cache(
    image: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
) -> Result<ForwardCache> {
    check_input(arch, image)?;
    let spec = arch.conv_spec()?;
    let pre = conv2d_forward(image, &params.conv_weights, &params.conv_bias, &spec)?;
    Ok(ForwardCache {
        pre_activations: pre,
    })
}

/// F(I, θ) = c + Σ_{k,y,x} V[k,y,x] · ReLU(conv(I, W, B)[k,y,x]).
pub fn energy_forward(
    image: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
) -> Result<f64> {
    let cache = forward_cache(image, params, arch)?;
    let mut f = params.dense_bias;
    for (z, v) in cache.pre_activations.data().iter().zip(&params.dense_weights) {
        if *z > 0.0 {
            f += v * z;
        }
    }
    Ok(f)
}

/// Upstream signal into the conv layer: V masked by the ReLU activation
/// pattern (subgradient 0 at the kink, i.e. strict z > 0).
fn masked_dense(cache: &ForwardCache, params: &GeneratorParams) -> ImageTensor {
    let mut upstream = cache.pre_activations.clone();
    for (z, v) in upstream.data_mut().iter_mut().zip(&params.dense_weights) {
        *z = if *z > 0.0 { *v } else { 0.0 };
    }
    upstream
}

/// ∂F/∂I, exact up to the ReLU subgradient convention.
pub fn grad_wrt_image(
    image: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
) -> Result<ImageTensor> {
    let cache = forward_cache(image, params, arch)?;
    let upstream = masked_dense(&cache, params);
    let spec = arch.conv_spec()?;
    conv2d_input_grad(
        &upstream,
        &params.conv_weights,
        &spec,
        arch.input_height,
        arch.input_width,
    )
}

/// ∂F/∂θ for all parameter groups; ∂F/∂c = 1 always.
pub fn grad_wrt_params(
    image: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
) -> Result<GeneratorParams> {
    let cache = forward_cache(image, params, arch)?;
    let upstream = masked_dense(&cache, params);
    let spec = arch.conv_spec()?;
    let (wgrad, bgrad) = conv2d_param_grad(image, &upstream, &spec)?;
    let dense_grad: Vec<f64> = cache
        .pre_activations
        .data()
        .iter()
        .map(|&z| if z > 0.0 { z } else { 0.0 })
        .collect();
    Ok(GeneratorParams {
        conv_weights: wgrad,
        conv_bias: bgrad,
        dense_weights: dense_grad,
        dense_bias: 1.0,
    })
}

/// Both gradients from one conv forward pass; the hot path of the pipeline
/// evaluates F's image gradient T_I times per outer step, so the shared
/// pre-activation pass matters.
pub fn grad_pair(
    image: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
) -> Result<(f64, ImageTensor)> {
    let cache = forward_cache(image, params, arch)?;
    let mut f = params.dense_bias;
    for (z, v) in cache.pre_activations.data().iter().zip(&params.dense_weights) {
        if *z > 0.0 {
            f += v * z;
        }
    }
    let upstream = masked_dense(&cache, params);
    let spec = arch.conv_spec()?;
    let g = conv2d_input_grad(
        &upstream,
        &params.conv_weights,
        &spec,
        arch.input_height,
        arch.input_width,
    )?;
    Ok((f, g))
}

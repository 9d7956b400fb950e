//! Online auto-encoder baseline: same online, per-image training budget as
//! the alternate generator, but a one-step reconstruction objective.
//!
//! Shape: conv → dense (feature map to scalar) → ReLU → dense (scalar back to
//! feature map) → transpose convolution. The encoder mirrors the generator's
//! conv bank. Trained by gradient descent on the reconstruction error against
//! the input itself, then evaluated once on that input.

use crate::error::{Error, Result};
use crate::generator::GeneratorArch;
use crate::rng::SeededRng;
use crate::tensor::{
    conv2d_forward, conv2d_input_grad, conv2d_param_grad, ConvSpec, ImageTensor,
};

#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    /// Encoder conv weights (K, C, r, r) and bias (K).
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// Encode-to-scalar dense weights (K, H', W') and bias.
    pub fc1_w: Vec<f64>,
    pub fc1_b: f64,
    /// Decode-from-scalar dense weights (K, H', W') and per-unit bias.
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
    /// Decoder transpose-conv weights (K, C, r, r) and per-channel bias (C).
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
}

impl AutoencoderParams {
    pub fn init(rng: &mut SeededRng, arch: &GeneratorArch) -> Result<Self> {
        let spec = arch.conv_spec()?;
        let (fh, fw) = arch.feature_dims()?;
        let feat = arch.filters * fh * fw;
        let sigma = arch.sigma_init;
        Ok(AutoencoderParams {
            enc_w: (0..spec.weight_len()).map(|_| sigma * rng.normal()).collect(),
            enc_b: vec![0.0; arch.filters],
            fc1_w: (0..feat).map(|_| sigma * rng.normal()).collect(),
            fc1_b: 0.0,
            fc2_w: (0..feat).map(|_| sigma * rng.normal()).collect(),
            fc2_b: vec![0.0; feat],
            dec_w: (0..spec.weight_len()).map(|_| sigma * rng.normal()).collect(),
            dec_b: vec![0.0; arch.input_channels],
        })
    }

    pub fn all_finite(&self) -> bool {
        self.enc_w.iter().all(|v| v.is_finite())
            && self.enc_b.iter().all(|v| v.is_finite())
            && self.fc1_w.iter().all(|v| v.is_finite())
            && self.fc1_b.is_finite()
            && self.fc2_w.iter().all(|v| v.is_finite())
            && self.fc2_b.iter().all(|v| v.is_finite())
            && self.dec_w.iter().all(|v| v.is_finite())
            && self.dec_b.iter().all(|v| v.is_finite())
    }
}

struct Forward {
    feat_enc: ImageTensor,
    scalar_pre: f64,
    scalar_act: f64,
    feat_dec: ImageTensor,
    output: ImageTensor,
}

fn forward(
    params: &AutoencoderParams,
    arch: &GeneratorArch,
    spec: &ConvSpec,
    input: &ImageTensor,
) -> Result<Forward> {
    let feat_enc = conv2d_forward(input, &params.enc_w, &params.enc_b, spec)?;
    let mut scalar_pre = params.fc1_b;
    for (f, w) in feat_enc.data().iter().zip(&params.fc1_w) {
        scalar_pre += f * w;
    }
    let scalar_act = scalar_pre.max(0.0);
    let (fh, fw) = arch.feature_dims()?;
    let mut feat_dec = ImageTensor::zeros(arch.filters, fh, fw);
    for ((d, w), b) in feat_dec
        .data_mut()
        .iter_mut()
        .zip(&params.fc2_w)
        .zip(&params.fc2_b)
    {
        *d = w * scalar_act + b;
    }
    // Transpose convolution scatters the decoded feature map back to image
    // geometry, plus a per-channel bias.
    let mut output = conv2d_input_grad(
        &feat_dec,
        &params.dec_w,
        spec,
        arch.input_height,
        arch.input_width,
    )?;
    let (c, h, w) = output.shape();
    for ch in 0..c {
        let b = params.dec_b[ch];
        let base = ch * h * w;
        for v in &mut output.data_mut()[base..base + h * w] {
            *v += b;
        }
    }
    Ok(Forward {
        feat_enc,
        scalar_pre,
        scalar_act,
        feat_dec,
        output,
    })
}

/// One full-gradient descent step on mean squared reconstruction error.
fn train_step(
    params: &mut AutoencoderParams,
    arch: &GeneratorArch,
    spec: &ConvSpec,
    target: &ImageTensor,
    lr: f64,
) -> Result<f64> {
    let pass = forward(params, arch, spec, target)?;
    let n = target.len() as f64;
    let mut d_out = pass.output.clone();
    let mut loss = 0.0;
    for (d, t) in d_out.data_mut().iter_mut().zip(target.data()) {
        let e = *d - t;
        loss += e * e;
        *d = 2.0 * e / n;
    }
    loss /= n;

    // Decoder bias: channel sums of d_out.
    let (c, h, w) = d_out.shape();
    let mut d_dec_b = vec![0.0; c];
    for ch in 0..c {
        let base = ch * h * w;
        d_dec_b[ch] = d_out.data()[base..base + h * w].iter().sum();
    }
    // Transpose-conv weight grad: conv2d_param_grad with d_out as the "input"
    // image and the decoded features as the "upstream" signal.
    let (d_dec_w, _) = conv2d_param_grad(&d_out, &pass.feat_dec, spec)?;
    // Gradient into the decoded features: adjoint of the scatter = forward conv.
    let d_feat_dec = conv2d_forward(&d_out, &params.dec_w, &vec![0.0; arch.filters], spec)?;

    // fc2: feat_dec = fc2_w * scalar + fc2_b
    let mut d_fc2_w = vec![0.0; params.fc2_w.len()];
    let mut d_scalar_act = 0.0;
    for ((g, d), w) in d_fc2_w
        .iter_mut()
        .zip(d_feat_dec.data())
        .zip(&params.fc2_w)
    {
        *g = d * pass.scalar_act;
        d_scalar_act += d * w;
    }
    let d_fc2_b: Vec<f64> = d_feat_dec.data().to_vec();

    // ReLU on the scalar (subgradient 0 at the kink).
    let d_scalar_pre = if pass.scalar_pre > 0.0 {
        d_scalar_act
    } else {
        0.0
    };

    // fc1: scalar_pre = dot(fc1_w, feat_enc) + fc1_b
    let mut d_fc1_w = vec![0.0; params.fc1_w.len()];
    let mut d_feat_enc = pass.feat_enc.clone();
    for ((g, f), (d, w)) in d_fc1_w.iter_mut().zip(pass.feat_enc.data()).zip(
        d_feat_enc
            .data_mut()
            .iter_mut()
            .zip(&params.fc1_w),
    ) {
        *g = d_scalar_pre * f;
        *d = d_scalar_pre * w;
    }
    let (d_enc_w, d_enc_b) = conv2d_param_grad(target, &d_feat_enc, spec)?;

    // Plain descent.
    for (p, g) in params.enc_w.iter_mut().zip(&d_enc_w) {
        *p -= lr * g;
    }
    for (p, g) in params.enc_b.iter_mut().zip(&d_enc_b) {
        *p -= lr * g;
    }
    for (p, g) in params.fc1_w.iter_mut().zip(&d_fc1_w) {
        *p -= lr * g;
    }
    params.fc1_b -= lr * d_scalar_pre;
    for (p, g) in params.fc2_w.iter_mut().zip(&d_fc2_w) {
        *p -= lr * g;
    }
    for (p, g) in params.fc2_b.iter_mut().zip(&d_fc2_b) {
        *p -= lr * g;
    }
    for (p, g) in params.dec_w.iter_mut().zip(&d_dec_w) {
        *p -= lr * g;
    }
    for (p, g) in params.dec_b.iter_mut().zip(&d_dec_b) {
        *p -= lr * g;
    }
    Ok(loss)
}

pub const DEFAULT_AE_LEARNING_RATE: f64 = 0.05;

/// Online auto-encoder defense: `steps` training updates against the input
/// itself, then one reconstruction pass. Input and output are in generator
/// coordinates; the output is clamped to [-1,1] at emission.
pub fn online_autoencoder_defense(
    reference: &ImageTensor,
    steps: usize,
    arch: &GeneratorArch,
    seed: u64,
    learning_rate: f64,
) -> Result<ImageTensor> {
    arch.validate()?;
    if reference.shape()
        != (
            arch.input_channels,
            arch.input_height,
            arch.input_width,
        )
    {
        return Err(Error::config(format!(
            "reference shape {:?} does not match autoencoder input",
            reference.shape()
        )));
    }
    let spec = arch.conv_spec()?;
    let mut rng = SeededRng::new(seed);
    let mut params = AutoencoderParams::init(&mut rng, arch)?;
    for step in 0..steps {
        let loss = train_step(&mut params, arch, &spec, reference, learning_rate)?;
        if !loss.is_finite() || !params.all_finite() {
            return Err(Error::NumericAbort {
                context: format!("autoencoder training (step {step})"),
                detail: format!("loss = {loss}"),
            });
        }
    }
    let pass = forward(&params, arch, &spec, reference)?;
    Ok(pass.output.clamp(-1.0, 1.0))
}

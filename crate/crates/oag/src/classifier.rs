//! The gray-box target: a small convolutional classifier trained from scratch
//! with exact analytic backpropagation.
//!
//! Stack: conv(3→8, 5×5) → ReLU → 2×2 average pool → conv(8→16, 5×5) → ReLU →
//! 2×2 average pool → dense → softmax. Average pooling keeps gradients dense,
//! which keeps the finite-difference checks clean. Attacks read this model's
//! input gradients; the defense never sees it.

use crate::attacks::{softmax, ClassifierHandle};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{
    conv2d_forward, conv2d_input_grad, conv2d_param_grad, ConvSpec, ImageTensor,
};

const C1_OUT: usize = 8;
const C2_OUT: usize = 16;
const KERNEL: usize = 5;
/// Inputs are [0,255]; the network sees them scaled to [0,1].
const INPUT_SCALE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub n_classes: usize,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// Dense weights, (n_classes, feature_len) row-major.
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::config(
                "epochs, batch_size and learning_rate must be positive",
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 7,
        }
    }
}

/// Accuracy per epoch on train and (when provided) validation data.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
}

struct Dims {
    spec1: ConvSpec,
    spec2: ConvSpec,
    a1_h: usize,
    a1_w: usize,
    p1_h: usize,
    p1_w: usize,
    a2_h: usize,
    a2_w: usize,
    p2_h: usize,
    p2_w: usize,
    feature_len: usize,
}

impl ClassifierModel {
    fn dims(&self) -> Result<Dims> {
        let spec1 = ConvSpec::new(self.input_channels, C1_OUT, KERNEL, KERNEL, 1)?;
        let (a1_h, a1_w) = spec1.output_dims(self.input_height, self.input_width)?;
        if a1_h % 2 != 0 || a1_w % 2 != 0 {
            return Err(Error::config(format!(
                "first feature map {a1_h}x{a1_w} not divisible by the 2x2 pool"
            )));
        }
        let (p1_h, p1_w) = (a1_h / 2, a1_w / 2);
        let spec2 = ConvSpec::new(C1_OUT, C2_OUT, KERNEL, KERNEL, 1)?;
        let (a2_h, a2_w) = spec2.output_dims(p1_h, p1_w)?;
        if a2_h % 2 != 0 || a2_w % 2 != 0 {
            return Err(Error::config(format!(
                "second feature map {a2_h}x{a2_w} not divisible by the 2x2 pool"
            )));
        }
        let (p2_h, p2_w) = (a2_h / 2, a2_w / 2);
        Ok(Dims {
            spec1,
            spec2,
            a1_h,
            a1_w,
            p1_h,
            p1_w,
            a2_h,
            a2_w,
            p2_h,
            p2_w,
            feature_len: C2_OUT * p2_h * p2_w,
        })
    }

    pub fn new_random(
        input_channels: usize,
        input_height: usize,
        input_width: usize,
        n_classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        let mut model = ClassifierModel {
            input_channels,
            input_height,
            input_width,
            n_classes,
            conv1_w: Vec::new(),
            conv1_b: vec![0.0; C1_OUT],
            conv2_w: Vec::new(),
            conv2_b: vec![0.0; C2_OUT],
            dense_w: Vec::new(),
            dense_b: vec![0.0; n_classes],
        };
        let dims = model.dims()?;
        let fan1 = (input_channels * KERNEL * KERNEL) as f64;
        let fan2 = (C1_OUT * KERNEL * KERNEL) as f64;
        let fan3 = dims.feature_len as f64;
        model.conv1_w = (0..dims.spec1.weight_len())
            .map(|_| rng.normal() * (2.0 / fan1).sqrt())
            .collect();
        model.conv2_w = (0..dims.spec2.weight_len())
            .map(|_| rng.normal() * (2.0 / fan2).sqrt())
            .collect();
        model.dense_w = (0..n_classes * dims.feature_len)
            .map(|_| rng.normal() * (1.0 / fan3).sqrt())
            .collect();
        Ok(model)
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let expect = (self.input_channels, self.input_height, self.input_width);
        if image.shape() != expect {
            return Err(Error::config(format!(
                "image shape {:?} does not match classifier input {:?}",
                image.shape(),
                expect
            )));
        }
        Ok(())
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.conv1_w);
        v.extend_from_slice(&self.conv1_b);
        v.extend_from_slice(&self.conv2_w);
        v.extend_from_slice(&self.conv2_b);
        v.extend_from_slice(&self.dense_w);
        v.extend_from_slice(&self.dense_b);
        v
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.conv1_w.len()
            + self.conv1_b.len()
            + self.conv2_w.len()
            + self.conv2_b.len()
            + self.dense_w.len()
            + self.dense_b.len();
        if flat.len() != total {
            return Err(Error::config(format!(
                "flat parameter vector length {} does not match model ({total} expected)",
                flat.len()
            )));
        }
        let mut rest = flat;
        for group in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense_w,
            &mut self.dense_b,
        ] {
            let (head, tail) = rest.split_at(group.len());
            group.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }
}

fn relu_inplace(t: &mut ImageTensor) -> ImageTensor {
    // Returns the pre-activation mask carrier (the original values).
    let pre = t.clone();
    for v in t.data_mut().iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    pre
}

fn avg_pool2(input: &ImageTensor) -> ImageTensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = ImageTensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let s = input.get(ch, 2 * y, 2 * x)
                    + input.get(ch, 2 * y, 2 * x + 1)
                    + input.get(ch, 2 * y + 1, 2 * x)
                    + input.get(ch, 2 * y + 1, 2 * x + 1);
                out.set(ch, y, x, s * 0.25);
            }
        }
    }
    out
}

fn avg_unpool2(upstream: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (c, h, w) = upstream.shape();
    let mut out = ImageTensor::zeros(c, out_h, out_w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = upstream.get(ch, y, x) * 0.25;
                out.set(ch, 2 * y, 2 * x, v);
                out.set(ch, 2 * y, 2 * x + 1, v);
                out.set(ch, 2 * y + 1, 2 * x, v);
                out.set(ch, 2 * y + 1, 2 * x + 1, v);
            }
        }
    }
    out
}

struct ForwardPass {
    scaled: ImageTensor,
    pre1: ImageTensor,
    pooled1: ImageTensor,
    pre2: ImageTensor,
    pooled2: ImageTensor,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(model: &ClassifierModel, image: &ImageTensor) -> Result<ForwardPass> {
    model.check_input(image)?;
    let dims = model.dims()?;
    let scaled = image.map(|v| v * INPUT_SCALE);
    let mut a1 = conv2d_forward(&scaled, &model.conv1_w, &model.conv1_b, &dims.spec1)?;
    let pre1 = relu_inplace(&mut a1);
    let pooled1 = avg_pool2(&a1);
    let mut a2 = conv2d_forward(&pooled1, &model.conv2_w, &model.conv2_b, &dims.spec2)?;
    let pre2 = relu_inplace(&mut a2);
    let pooled2 = avg_pool2(&a2);
    let feat = pooled2.data();
    let mut logits = vec![0.0; model.n_classes];
    for (i, logit) in logits.iter_mut().enumerate() {
        let row = &model.dense_w[i * dims.feature_len..(i + 1) * dims.feature_len];
        let mut acc = model.dense_b[i];
        for (f, w) in feat.iter().zip(row) {
            acc += f * w;
        }
        *logit = acc;
    }
    let probs = softmax(&logits);
    Ok(ForwardPass {
        scaled,
        pre1,
        pooled1,
        pre2,
        pooled2,
        logits,
        probs,
    })
}

struct ParamGrads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
}

/// Backprop of the cross-entropy loss at `label`. Returns parameter gradients
/// and (optionally skippable by the caller) the input gradient in 0-255 units.
fn backward(
    model: &ClassifierModel,
    pass: &ForwardPass,
    label: usize,
    want_input_grad: bool,
) -> Result<(ParamGrads, Option<ImageTensor>)> {
    let dims = model.dims()?;
    // d loss / d logits = probs - onehot
    let mut dlogits = pass.probs.clone();
    dlogits[label] -= 1.0;

    let feat = pass.pooled2.data();
    let mut dense_w = vec![0.0; model.dense_w.len()];
    for (i, d) in dlogits.iter().enumerate() {
        let row = &mut dense_w[i * dims.feature_len..(i + 1) * dims.feature_len];
        for (g, f) in row.iter_mut().zip(feat) {
            *g = d * f;
        }
    }
    let dense_b = dlogits.clone();

    // into pooled2
    let mut dfeat = ImageTensor::zeros(C2_OUT, dims.p2_h, dims.p2_w);
    {
        let dd = dfeat.data_mut();
        for (i, d) in dlogits.iter().enumerate() {
            let row = &model.dense_w[i * dims.feature_len..(i + 1) * dims.feature_len];
            for (g, w) in dd.iter_mut().zip(row) {
                *g += d * w;
            }
        }
    }
    // through pool2 and ReLU2
    let mut da2 = avg_unpool2(&dfeat, dims.a2_h, dims.a2_w);
    for (g, z) in da2.data_mut().iter_mut().zip(pass.pre2.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let (conv2_w, conv2_b) = conv2d_param_grad(&pass.pooled1, &da2, &dims.spec2)?;
    let dpooled1 = conv2d_input_grad(&da2, &model.conv2_w, &dims.spec2, dims.p1_h, dims.p1_w)?;
    // through pool1 and ReLU1
    let mut da1 = avg_unpool2(&dpooled1, dims.a1_h, dims.a1_w);
    for (g, z) in da1.data_mut().iter_mut().zip(pass.pre1.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let (conv1_w, conv1_b) = conv2d_param_grad(&pass.scaled, &da1, &dims.spec1)?;

    let input_grad = if want_input_grad {
        let g = conv2d_input_grad(
            &da1,
            &model.conv1_w,
            &dims.spec1,
            model.input_height,
            model.input_width,
        )?;
        Some(g.map(|v| v * INPUT_SCALE))
    } else {
        None
    };

    Ok((
        ParamGrads {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            dense_w,
            dense_b,
        },
        input_grad,
    ))
}

impl ClassifierHandle for ClassifierModel {
    fn logits(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(forward(self, image)?.logits)
    }

    fn loss(&self, image: &ImageTensor, label: usize) -> Result<f64> {
        if label >= self.n_classes {
            return Err(Error::config(format!(
                "label {label} out of range for {} classes",
                self.n_classes
            )));
        }
        let pass = forward(self, image)?;
        Ok(-pass.probs[label].max(1e-300).ln())
    }

    fn loss_grad_wrt_input(&self, image: &ImageTensor, label: usize) -> Result<ImageTensor> {
        if label >= self.n_classes {
            return Err(Error::config(format!(
                "label {label} out of range for {} classes",
                self.n_classes
            )));
        }
        let pass = forward(self, image)?;
        let (_, input_grad) = backward(self, &pass, label, true)?;
        Ok(input_grad.expect("requested"))
    }

    fn predict_probs(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(forward(self, image)?.probs)
    }
}

/// Cross-entropy gradient with respect to every parameter, flattened in the
/// same order as [`ClassifierModel::flatten_params`].
pub fn loss_param_grad(
    model: &ClassifierModel,
    image: &ImageTensor,
    label: usize,
) -> Result<Vec<f64>> {
    let pass = forward(model, image)?;
    if label >= model.n_classes {
        return Err(Error::config(format!(
            "label {label} out of range for {} classes",
            model.n_classes
        )));
    }
    let (g, _) = backward(model, &pass, label, false)?;
    let mut flat = Vec::new();
    flat.extend_from_slice(&g.conv1_w);
    flat.extend_from_slice(&g.conv1_b);
    flat.extend_from_slice(&g.conv2_w);
    flat.extend_from_slice(&g.conv2_b);
    flat.extend_from_slice(&g.dense_w);
    flat.extend_from_slice(&g.dense_b);
    Ok(flat)
}

fn scale_grads(g: &mut ParamGrads, factor: f64) {
    for buf in [
        &mut g.conv1_w,
        &mut g.conv1_b,
        &mut g.conv2_w,
        &mut g.conv2_b,
        &mut g.dense_w,
        &mut g.dense_b,
    ] {
        for v in buf.iter_mut() {
            *v *= factor;
        }
    }
}

/// v <- momentum * v + (1 - momentum) * g
fn blend_velocity(v: &mut ParamGrads, g: &ParamGrads, momentum: f64) {
    for (dst, src) in [
        (&mut v.conv1_w, &g.conv1_w),
        (&mut v.conv1_b, &g.conv1_b),
        (&mut v.conv2_w, &g.conv2_w),
        (&mut v.conv2_b, &g.conv2_b),
        (&mut v.dense_w, &g.dense_w),
        (&mut v.dense_b, &g.dense_b),
    ] {
        for (a, b) in dst.iter_mut().zip(src) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
}

/// Accumulate one sample's parameter gradients into `acc`.
fn accumulate(acc: &mut ParamGrads, g: &ParamGrads) {
    for (dst, src) in [
        (&mut acc.conv1_w, &g.conv1_w),
        (&mut acc.conv1_b, &g.conv1_b),
        (&mut acc.conv2_w, &g.conv2_w),
        (&mut acc.conv2_b, &g.conv2_b),
        (&mut acc.dense_w, &g.dense_w),
        (&mut acc.dense_b, &g.dense_b),
    ] {
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
}

fn apply_grads(model: &mut ClassifierModel, g: &ParamGrads, step: f64) {
    for (dst, src) in [
        (&mut model.conv1_w, &g.conv1_w),
        (&mut model.conv1_b, &g.conv1_b),
        (&mut model.conv2_w, &g.conv2_w),
        (&mut model.conv2_b, &g.conv2_b),
        (&mut model.dense_w, &g.dense_w),
        (&mut model.dense_b, &g.dense_b),
    ] {
        for (a, b) in dst.iter_mut().zip(src) {
            *a -= step * b;
        }
    }
}

fn zero_grads(model: &ClassifierModel) -> Result<ParamGrads> {
    let dims = model.dims()?;
    Ok(ParamGrads {
        conv1_w: vec![0.0; dims.spec1.weight_len()],
        conv1_b: vec![0.0; C1_OUT],
        conv2_w: vec![0.0; dims.spec2.weight_len()],
        conv2_b: vec![0.0; C2_OUT],
        dense_w: vec![0.0; model.n_classes * dims.feature_len],
        dense_b: vec![0.0; model.n_classes],
    })
}

pub fn accuracy(
    model: &ClassifierModel,
    data: &[(ImageTensor, usize)],
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (image, label) in data {
        if model.predict_label(image)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch SGD on cross-entropy. Deterministic given the config seed.
pub fn train(
    train_data: &[(ImageTensor, usize)],
    val_data: &[(ImageTensor, usize)],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let labels: std::collections::HashSet<usize> =
        train_data.iter().map(|(_, l)| *l).collect();
    if labels.len() < 2 {
        return Err(Error::config("training set needs at least 2 classes"));
    }
    let (c, h, w) = train_data[0].0.shape();
    if train_data.iter().any(|(img, _)| img.shape() != (c, h, w)) {
        return Err(Error::config("inconsistent image shapes in training set"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = ClassifierModel::new_random(c, h, w, n_classes, &mut rng)?;
    let mut history = TrainHistory::default();

    // Heavy-ball momentum with a slow harmonic decay of the step size;
    // both constants are fixed here rather than exposed in TrainConfig.
    const MOMENTUM: f64 = 0.9;
    let mut velocity = zero_grads(&model)?;

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..cfg.epochs {
        let step = cfg.learning_rate / (1.0 + 0.05 * epoch as f64);
        // Fisher-Yates with the run RNG keeps epochs reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = zero_grads(&model)?;
            for &idx in chunk {
                let (image, label) = &train_data[idx];
                let pass = forward(&model, image)?;
                let loss = -pass.probs[*label].max(1e-300).ln();
                if !loss.is_finite() {
                    return Err(Error::NumericAbort {
                        context: format!("classifier training (epoch {epoch})"),
                        detail: format!("loss = {loss}"),
                    });
                }
                epoch_loss += loss;
                let (g, _) = backward(&model, &pass, *label, false)?;
                accumulate(&mut acc, &g);
            }
            scale_grads(&mut acc, 1.0 / chunk.len() as f64);
            blend_velocity(&mut velocity, &acc, MOMENTUM);
            apply_grads(&mut model, &velocity, step);
        }
        history.train_loss.push(epoch_loss / train_data.len() as f64);
        history.train_accuracy.push(accuracy(&model, train_data)?);
        if !val_data.is_empty() {
            history.val_accuracy.push(accuracy(&model, val_data)?);
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_sample;

    fn toy_input_dims() -> (usize, usize, usize) {
        // 16x16 -> conv 12x12 -> pool 6x6 -> conv 2x2 -> pool 1x1
        (3, 16, 16)
    }

    fn random_model(seed: u64) -> ClassifierModel {
        let (c, h, w) = toy_input_dims();
        ClassifierModel::new_random(c, h, w, 4, &mut SeededRng::new(seed)).unwrap()
    }

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed);
        gaussian_sample(&mut rng, 3, 16, 16).map(|v| (v * 60.0 + 128.0).clamp(0.0, 255.0))
    }

    #[test]
    fn probabilities_sum_to_one_and_positive() {
        let model = random_model(1);
        for seed in 0..5 {
            let probs = model.predict_probs(&random_image(seed)).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn zero_weight_model_is_uniform() {
        let mut model = random_model(2);
        let zeros = vec![0.0; model.flatten_params().len()];
        model.load_flat_params(&zeros).unwrap();
        let probs = model.predict_probs(&random_image(3)).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    /// Scalar-loop forward oracle on a toy instance: recompute the whole
    /// stack with naive loops and compare logits.
    #[test]
    fn forward_matches_scalar_oracle() {
        let model = random_model(4);
        let image = random_image(5);
        let got = model.logits(&image).unwrap();

        // conv1
        let scaled = image.map(|v| v / 255.0);
        let mut a1 = ImageTensor::zeros(C1_OUT, 12, 12);
        for k in 0..C1_OUT {
            for y in 0..12 {
                for x in 0..12 {
                    let mut acc = model.conv1_b[k];
                    for c in 0..3 {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                acc += scaled.get(c, y + ky, x + kx)
                                    * model.conv1_w[((k * 3 + c) * 5 + ky) * 5 + kx];
                            }
                        }
                    }
                    a1.set(k, y, x, acc.max(0.0));
                }
            }
        }
        let p1 = avg_pool2(&a1);
        let mut a2 = ImageTensor::zeros(C2_OUT, 2, 2);
        for k in 0..C2_OUT {
            for y in 0..2 {
                for x in 0..2 {
                    let mut acc = model.conv2_b[k];
                    for c in 0..C1_OUT {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                acc += p1.get(c, y + ky, x + kx)
                                    * model.conv2_w[((k * C1_OUT + c) * 5 + ky) * 5 + kx];
                            }
                        }
                    }
                    a2.set(k, y, x, acc.max(0.0));
                }
            }
        }
        let p2 = avg_pool2(&a2);
        for i in 0..4 {
            let mut acc = model.dense_b[i];
            for (j, f) in p2.data().iter().enumerate() {
                acc += f * model.dense_w[i * 16 + j];
            }
            assert!((got[i] - acc).abs() < 1e-10, "logit {i}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = random_model(6);
        let image = random_image(7);
        let label = 2;
        let g = model.loss_grad_wrt_input(&image, label).unwrap();
        let h = 1e-4; // pixel units; loss scale absorbs the 1/255
        for i in (0..image.len()).step_by(97) {
            let mut plus = image.clone();
            plus.data_mut()[i] += h;
            let mut minus = image.clone();
            minus.data_mut()[i] -= h;
            let num =
                (model.loss(&plus, label).unwrap() - model.loss(&minus, label).unwrap()) / (2.0 * h);
            let denom = g.data()[i].abs().max(num.abs()).max(1e-9);
            assert!(
                (g.data()[i] - num).abs() / denom < 1e-6,
                "pixel {i}: analytic {} numeric {num}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let model = random_model(8);
        let image = random_image(9);
        let label = 1;
        let pass = forward(&model, &image).unwrap();
        let (g, _) = backward(&model, &pass, label, false).unwrap();
        let gflat = {
            let mut v = Vec::new();
            v.extend_from_slice(&g.conv1_w);
            v.extend_from_slice(&g.conv1_b);
            v.extend_from_slice(&g.conv2_w);
            v.extend_from_slice(&g.conv2_b);
            v.extend_from_slice(&g.dense_w);
            v.extend_from_slice(&g.dense_b);
            v
        };
        let pflat = model.flatten_params();
        let h = 1e-5;
        for i in (0..pflat.len()).step_by(211) {
            let mut m = model.clone();
            let mut plus = pflat.clone();
            plus[i] += h;
            m.load_flat_params(&plus).unwrap();
            let lp = m.loss(&image, label).unwrap();
            let mut minus = pflat.clone();
            minus[i] -= h;
            m.load_flat_params(&minus).unwrap();
            let lm = m.loss(&image, label).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let denom = gflat[i].abs().max(num.abs()).max(1e-9);
            assert!(
                (gflat[i] - num).abs() / denom < 1e-6,
                "param {i}: analytic {} numeric {num}",
                gflat[i]
            );
        }
    }

    /// Cross-entropy gradient at a saturated correct prediction tends to 0.
    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        let mut model = random_model(10);
        // Blow up the dense row of class 0 so its probability saturates.
        let dims = model.dims().unwrap();
        for v in model.dense_b.iter_mut() {
            *v = 0.0;
        }
        model.dense_b[0] = 200.0;
        let _ = dims;
        let image = random_image(11);
        let probs = model.predict_probs(&image).unwrap();
        assert!(probs[0] > 0.999999);
        let g = model.loss_grad_wrt_input(&image, 0).unwrap();
        let max_abs = g.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max_abs < 1e-6, "max |grad| = {max_abs}");
    }

    /// Softmax identity: summing the loss gradients over all class labels
    /// weighted by 1 gives sum_y (p - e_y) = N*p - 1 summed...; at the logit
    /// level sum_y dlogits(y) = sum_y (probs - onehot_y) = N*probs - 1, whose
    /// total over classes is zero. Checked against the oracle by summing
    /// input gradients across labels and comparing to the analytic combination.
    #[test]
    fn softmax_gradient_identity() {
        let model = random_model(12);
        let image = random_image(13);
        // sum over labels y of grad_input(loss_y) corresponds to backprop of
        // sum_y (probs - onehot_y) = N*probs - 1 through the network.
        let n = model.n_classes;
        let mut summed = ImageTensor::zeros(3, 16, 16);
        for y in 0..n {
            let g = model.loss_grad_wrt_input(&image, y).unwrap();
            for (a, b) in summed.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        // Independent route: finite differences of the summed loss.
        let total_loss = |img: &ImageTensor| -> f64 {
            (0..n).map(|y| model.loss(img, y).unwrap()).sum()
        };
        let h = 1e-4;
        for i in (0..image.len()).step_by(151) {
            let mut plus = image.clone();
            plus.data_mut()[i] += h;
            let mut minus = image.clone();
            minus.data_mut()[i] -= h;
            let num = (total_loss(&plus) - total_loss(&minus)) / (2.0 * h);
            let denom = summed.data()[i].abs().max(num.abs()).max(1e-9);
            assert!((summed.data()[i] - num).abs() / denom < 1e-5);
        }
    }

    fn separable_set(seed: u64, n_per_class: usize) -> Vec<(ImageTensor, usize)> {
        // Two classes: bright left half vs bright right half.
        let mut rng = SeededRng::new(seed);
        let mut data = Vec::new();
        for label in 0..2usize {
            for _ in 0..n_per_class {
                let mut img = ImageTensor::zeros(3, 16, 16);
                for c in 0..3 {
                    for y in 0..16 {
                        for x in 0..16 {
                            let bright = if label == 0 { x < 8 } else { x >= 8 };
                            let base = if bright { 200.0 } else { 40.0 };
                            img.set(c, y, x, (base + 20.0 * rng.normal()).clamp(0.0, 255.0));
                        }
                    }
                }
                data.push((img, label));
            }
        }
        data
    }

    #[test]
    fn learns_linearly_separable_toy_set() {
        let data = separable_set(20, 12);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.5,
            seed: 3,
        };
        let (_, history) = train(&data, &[], 2, &cfg).unwrap();
        let final_acc = *history.train_accuracy.last().unwrap();
        assert!(final_acc >= 0.99, "train accuracy {final_acc}");
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_rejected() {
        let data = separable_set(21, 6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.1,
            seed: 5,
        };
        let (m1, _) = train(&data, &[], 2, &cfg).unwrap();
        let (m2, _) = train(&data, &[], 2, &cfg).unwrap();
        assert_eq!(m1.flatten_params(), m2.flatten_params());

        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert!(train(&data, &[], 2, &bad).is_err());
    }

    /// Full-batch descent with a small rate decreases cross-entropy
    /// monotonically over the first epoch's updates.
    #[test]
    fn full_batch_loss_decreases() {
        let data = separable_set(22, 6);
        let mut rng = SeededRng::new(9);
        let mut model = ClassifierModel::new_random(3, 16, 16, 2, &mut rng).unwrap();
        let total_loss = |m: &ClassifierModel| -> f64 {
            data.iter().map(|(img, l)| m.loss(img, *l).unwrap()).sum()
        };
        let mut prev = total_loss(&model);
        for _ in 0..5 {
            let mut acc = zero_grads(&model).unwrap();
            for (img, l) in &data {
                let pass = forward(&model, img).unwrap();
                let (g, _) = backward(&model, &pass, *l, false).unwrap();
                accumulate(&mut acc, &g);
            }
            apply_grads(&mut model, &acc, 0.01 / data.len() as f64);
            let cur = total_loss(&model);
            assert!(cur <= prev + 1e-12, "loss went up: {prev} -> {cur}");
            prev = cur;
        }
    }
}

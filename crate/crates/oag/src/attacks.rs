//! Gradient-sign adversarial attacks against a differentiable classifier.
//!
//! All attacks operate on continuous [0,255] pixel values; 8-bit quantization
//! happens only when images are exported. Every attack guarantees the L∞
//! bound |I_adv - I| <= ε and keeps outputs inside [0,255]. There is no RNG in
//! this module: attacks are deterministic given (image, label, classifier).

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::ImageTensor;

/// Read-only view of the target network that attacks are allowed to query.
/// The gradient must be consistent with the loss (finite-difference checkable).
pub trait ClassifierHandle: Sync {
    fn logits(&self, image: &ImageTensor) -> Result<Vec<f64>>;
    fn loss(&self, image: &ImageTensor, label: usize) -> Result<f64>;
    fn loss_grad_wrt_input(&self, image: &ImageTensor, label: usize) -> Result<ImageTensor>;

    fn predict_probs(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let logits = self.logits(image)?;
        Ok(softmax(&logits))
    }

    fn predict_label(&self, image: &ImageTensor) -> Result<usize> {
        let probs = self.predict_probs(image)?;
        Ok(crate::pipeline::argmax(&probs))
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    FgsmUntargeted,
    FgsmTargeted,
    IgsmTargeted,
    MifgsmUntargeted,
    /// ε = 0 degenerate case used as the clean baseline in reports.
    None,
}

impl AttackKind {
    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackKind::FgsmTargeted | AttackKind::IgsmTargeted)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::FgsmUntargeted => "fgsm_untargeted",
            AttackKind::FgsmTargeted => "fgsm_targeted",
            AttackKind::IgsmTargeted => "igsm_targeted",
            AttackKind::MifgsmUntargeted => "mifgsm_untargeted",
            AttackKind::None => "none",
        }
    }
}

/// Full description of one attack configuration. ε is in 0-255 pixel units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Per-iteration step size; the reference setting is 1.
    pub step_size: f64,
    pub iterations: usize,
    pub target_label: Option<usize>,
    /// Momentum decay μ for MI-FGSM; ignored elsewhere.
    pub momentum_decay: f64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::config("epsilon must be non-negative"));
        }
        if self.kind != AttackKind::None {
            if self.step_size <= 0.0 {
                return Err(Error::config("step_size must be positive"));
            }
            if self.iterations > 1 && self.step_size > self.epsilon {
                return Err(Error::config(
                    "step_size must not exceed epsilon for multi-step attacks",
                ));
            }
        }
        if self.kind.is_targeted() != self.target_label.is_some() {
            return Err(Error::config(
                "target_label must be present exactly for targeted attacks",
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum_decay) {
            return Err(Error::config("momentum_decay must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Iteration-count rule from the reference attack setting:
/// min(ε + 4, ceil(1.25·ε)).
pub fn default_iterations(epsilon: f64) -> usize {
    let a = epsilon + 4.0;
    let b = (1.25 * epsilon).ceil();
    a.min(b).max(0.0) as usize
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Untargeted FGSM: one ascent step on the true-label loss.
pub fn fgsm_untargeted(
    image: &ImageTensor,
    true_label: usize,
    classifier: &dyn ClassifierHandle,
    epsilon: f64,
) -> Result<ImageTensor> {
    let grad = classifier.loss_grad_wrt_input(image, true_label)?;
    let mut adv = image.clone();
    for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + epsilon * sign(*g)).clamp(0.0, 255.0);
    }
    Ok(adv)
}

/// Targeted FGSM: one descent step on the target-label loss.
pub fn fgsm_targeted(
    image: &ImageTensor,
    true_label: usize,
    target_label: usize,
    classifier: &dyn ClassifierHandle,
    epsilon: f64,
) -> Result<ImageTensor> {
    if target_label == true_label {
        return Err(Error::config(
            "targeted attack requires target_label != true label",
        ));
    }
    let grad = classifier.loss_grad_wrt_input(image, target_label)?;
    let mut adv = image.clone();
    for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v - epsilon * sign(*g)).clamp(0.0, 255.0);
    }
    Ok(adv)
}

fn clip_to_ball(adv: &mut ImageTensor, original: &ImageTensor, epsilon: f64) {
    for (v, o) in adv.data_mut().iter_mut().zip(original.data()) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 255.0);
    }
}

/// Targeted iterative FGSM: descend the target loss with a small step,
/// clipping to the ε-ball around the original after every step.
pub fn igsm(
    image: &ImageTensor,
    true_label: usize,
    target_label: usize,
    classifier: &dyn ClassifierHandle,
    epsilon: f64,
    step_size: f64,
    iterations: usize,
) -> Result<ImageTensor> {
    if target_label == true_label {
        return Err(Error::config(
            "targeted attack requires target_label != true label",
        ));
    }
    let mut adv = image.clone();
    for _ in 0..iterations {
        let grad = classifier.loss_grad_wrt_input(&adv, target_label)?;
        for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *v -= step_size * sign(*g);
        }
        clip_to_ball(&mut adv, image, epsilon);
    }
    Ok(adv)
}

/// Untargeted momentum iterative FGSM:
/// g_{t+1} = μ·g_t + ∇L/||∇L||₁, step by α·sign(g_{t+1}), clip each round.
pub fn mifgsm(
    image: &ImageTensor,
    true_label: usize,
    classifier: &dyn ClassifierHandle,
    epsilon: f64,
    step_size: f64,
    iterations: usize,
    momentum_decay: f64,
) -> Result<ImageTensor> {
    let mut adv = image.clone();
    let mut momentum = vec![0.0; image.len()];
    for _ in 0..iterations {
        let grad = classifier.loss_grad_wrt_input(&adv, true_label)?;
        let l1: f64 = grad.data().iter().map(|g| g.abs()).sum();
        for (m, g) in momentum.iter_mut().zip(grad.data()) {
            // Zero gradient: skip normalization, accumulate the raw zero.
            let normed = if l1 > 0.0 { g / l1 } else { 0.0 };
            *m = momentum_decay * *m + normed;
        }
        for (v, m) in adv.data_mut().iter_mut().zip(&momentum) {
            *v += step_size * sign(*m);
        }
        clip_to_ball(&mut adv, image, epsilon);
    }
    Ok(adv)
}

/// Pick a target label uniformly at random, excluding the true class.
pub fn choose_target_label(rng: &mut SeededRng, true_label: usize, n_classes: usize) -> usize {
    debug_assert!(n_classes >= 2);
    let pick = rng.below(n_classes as u64 - 1) as usize;
    if pick >= true_label {
        pick + 1
    } else {
        pick
    }
}

/// Dispatch an [`AttackSpec`] against one image.
pub fn apply_attack(
    spec: &AttackSpec,
    image: &ImageTensor,
    true_label: usize,
    classifier: &dyn ClassifierHandle,
) -> Result<ImageTensor> {
    spec.validate()?;
    if spec.epsilon == 0.0 || spec.kind == AttackKind::None {
        return Ok(image.clone());
    }
    match spec.kind {
        AttackKind::None => Ok(image.clone()),
        AttackKind::FgsmUntargeted => {
            fgsm_untargeted(image, true_label, classifier, spec.epsilon)
        }
        AttackKind::FgsmTargeted => fgsm_targeted(
            image,
            true_label,
            spec.target_label.expect("validated"),
            classifier,
            spec.epsilon,
        ),
        AttackKind::IgsmTargeted => igsm(
            image,
            true_label,
            spec.target_label.expect("validated"),
            classifier,
            spec.epsilon,
            spec.step_size,
            spec.iterations,
        ),
        AttackKind::MifgsmUntargeted => mifgsm(
            image,
            true_label,
            classifier,
            spec.epsilon,
            spec.step_size,
            spec.iterations,
            spec.momentum_decay,
        ),
    }
}

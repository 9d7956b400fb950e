//! The online alternate generation defense.
//!
//! Per input image: randomly initialize the generator, start the synthesized
//! image from zeros, then alternate T_I Langevin image updates with one
//! likelihood-ascent network update, T_N times. The final synthesized image is
//! the substitute sent downstream. Nothing here ever touches the target
//! classifier; the sole exception is [`calibrate_network_steps`], which uses a
//! classifier offline to pick T_N from Gaussian-noised images.

use crate::attacks::ClassifierHandle;
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorArch, GeneratorParams};
use crate::metrics::psnr;
use crate::rng::SeededRng;
use crate::tensor::{gaussian_sample, ImageTensor};
use std::time::Instant;

/// Hyper-parameters of one defense run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OagConfig {
    /// Outer (network update) iterations T_N.
    pub network_steps: usize,
    /// Inner (image update) iterations T_I per outer iteration.
    pub image_steps: usize,
    /// Langevin noise magnitude ε_g; the image-update learning rate is ε_g²/2.
    pub noise_scale: f64,
    /// Network-update step size β.
    pub net_learning_rate: f64,
    pub arch: GeneratorArch,
    pub seed: u64,
    /// Emit a trace checkpoint every this many outer iterations (0 = off).
    pub checkpoint_every: usize,
}

impl OagConfig {
    /// Image-update learning rate α = ε_g²/2.
    pub fn alpha(&self) -> f64 {
        self.noise_scale * self.noise_scale / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.network_steps < 1 || self.image_steps < 1 {
            return Err(Error::config("network_steps and image_steps must be >= 1"));
        }
        let alpha = self.alpha();
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!(
                "inertia factor 1 - eps_g^2/2 must lie in (0,1); eps_g = {} gives alpha = {alpha}",
                self.noise_scale
            )));
        }
        if self.net_learning_rate <= 0.0 {
            return Err(Error::config("net_learning_rate must be positive"));
        }
        self.arch.validate()
    }
}

/// Ring of the T_I + 1 most recent synthesized images; oldest overwritten first.
#[derive(Debug, Clone)]
pub struct SnapshotBuffer {
    slots: Vec<ImageTensor>,
    capacity: usize,
    cursor: usize,
}

impl SnapshotBuffer {
    pub fn new(capacity: usize) -> Self {
        SnapshotBuffer {
            slots: Vec::with_capacity(capacity),
            capacity,
            cursor: 0,
        }
    }

    pub fn push(&mut self, image: ImageTensor) {
        if self.slots.len() < self.capacity {
            self.slots.push(image);
        } else {
            self.slots[self.cursor] = image;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Most recently pushed snapshot.
    pub fn newest(&self) -> Option<&ImageTensor> {
        if self.slots.is_empty() {
            return None;
        }
        let idx = (self.cursor + self.capacity - 1) % self.capacity;
        self.slots.get(idx).or_else(|| self.slots.last())
    }
}

/// One checkpointed state of a defense run.
#[derive(Debug, Clone)]
pub struct TracePoint {
    /// Outer iteration index (1-based) at which the snapshot was taken.
    pub outer_iter: usize,
    /// Synthesized image at that point, clamped to the pixel range [0, 255].
    pub image: ImageTensor,
    /// PSNR against the reference image, in dB (pixel-unit peak).
    pub psnr_db: f64,
}

/// Instrumentation of a full defense run.
#[derive(Debug, Clone)]
pub struct DefenseTrace {
    pub checkpoints: Vec<TracePoint>,
    pub network_updates: usize,
    pub image_updates: usize,
    /// Occupancy of the snapshot ring when the run finished.
    pub snapshot_ring_len: usize,
    pub wall_time_secs: f64,
}

/// One Langevin step, Eq-for-eq:
/// I_{s+1} = (1 - ε_g²/2)·I_s + (ε_g²/2)·∂F/∂I + ε_g·N(0,1).
pub fn image_update_step(
    current: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
    noise_scale: f64,
    rng: &mut SeededRng,
) -> Result<ImageTensor> {
    let grad = generator::grad_wrt_image(current, params, arch)?;
    let alpha = noise_scale * noise_scale / 2.0;
    let mut next = current.clone();
    let (c, h, w) = current.shape();
    let noise = gaussian_sample(rng, c, h, w);
    for ((v, g), n) in next
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(noise.data())
    {
        *v = (1.0 - alpha) * *v + alpha * g + noise_scale * n;
    }
    Ok(next)
}

/// The ε_g → 0 limit of the image update: noise suppressed, step retained as
/// an explicit learning rate. Used for the contraction analysis and tests.
pub fn image_update_step_deterministic(
    current: &ImageTensor,
    params: &GeneratorParams,
    arch: &GeneratorArch,
    alpha: f64,
) -> Result<ImageTensor> {
    let grad = generator::grad_wrt_image(current, params, arch)?;
    let mut next = current.clone();
    for (v, g) in next.data_mut().iter_mut().zip(grad.data()) {
        *v = (1.0 - alpha) * *v + alpha * g;
    }
    Ok(next)
}

/// Likelihood ascent: θ_{t+1} = θ_t + β(∂F(I_z;θ)/∂θ − ∂F(I_s;θ)/∂θ).
pub fn network_update_step(
    params: &GeneratorParams,
    reference: &ImageTensor,
    synthesized: &ImageTensor,
    learning_rate: f64,
    arch: &GeneratorArch,
) -> Result<GeneratorParams> {
    let mut delta = generator::grad_wrt_params(reference, params, arch)?;
    let grad_syn = generator::grad_wrt_params(synthesized, params, arch)?;
    // Difference first: when the two gradients agree the update is exactly zero.
    delta.add_scaled(&grad_syn, -1.0);
    let mut next = params.clone();
    next.add_scaled(&delta, learning_rate);
    Ok(next)
}

/// Map 8-bit pixel coordinates [0,255] to unit coordinates [-1,1].
pub fn pixel_to_unit(image: &ImageTensor) -> ImageTensor {
    image.map(|v| v / 127.5 - 1.0)
}

/// Map unit coordinates [-1,1] back to pixel coordinates [0,255].
pub fn unit_to_pixel(image: &ImageTensor) -> ImageTensor {
    image.map(|v| (v + 1.0) * 127.5)
}

fn abort_if_nonfinite(
    tensor: &ImageTensor,
    params: &GeneratorParams,
    context: &str,
    step: usize,
) -> Result<()> {
    if tensor.all_finite() {
        return Ok(());
    }
    Err(Error::NumericAbort {
        context: format!("{context} (step {step})"),
        detail: format!("theta squared norm = {:.6e}", params.squared_norm()),
    })
}

/// Run the full defense, additionally snapshotting at the given outer
/// iterations (1-based, must be sorted ascending).
pub fn run_defense_with_checkpoints(
    reference: &ImageTensor,
    config: &OagConfig,
    checkpoint_iters: &[usize],
) -> Result<(ImageTensor, DefenseTrace)> {
    config.validate()?;
    let arch = &config.arch;
    if reference.shape()
        != (
            arch.input_channels,
            arch.input_height,
            arch.input_width,
        )
    {
        return Err(Error::config(format!(
            "reference shape {:?} does not match generator input",
            reference.shape()
        )));
    }
    let start = Instant::now();
    let mut rng = SeededRng::new(config.seed);
    let mut params = generator::init_params(&mut rng, arch)?;
    let mut ring = SnapshotBuffer::new(config.image_steps + 1);
    let mut current = ImageTensor::zeros(
        arch.input_channels,
        arch.input_height,
        arch.input_width,
    );
    ring.push(current.clone());

    let mut checkpoints = Vec::new();
    let mut network_updates = 0usize;
    let mut image_updates = 0usize;

    for t in 1..=config.network_steps {
        for s in 1..=config.image_steps {
            current = image_update_step(&current, &params, arch, config.noise_scale, &mut rng)?;
            image_updates += 1;
            abort_if_nonfinite(&current, &params, "image update", (t - 1) * config.image_steps + s)?;
            ring.push(current.clone());
        }
        params = network_update_step(
            &params,
            reference,
            &current,
            config.net_learning_rate,
            arch,
        )?;
        network_updates += 1;
        if !params.all_finite() {
            return Err(Error::NumericAbort {
                context: format!("network update (outer iter {t})"),
                detail: format!("theta squared norm = {:.6e}", params.squared_norm()),
            });
        }
        let want_interval = config.checkpoint_every > 0 && t % config.checkpoint_every == 0;
        let want_listed = checkpoint_iters.binary_search(&t).is_ok();
        if want_interval || want_listed {
            let image = current.clamp(0.0, 255.0);
            let psnr_db = psnr(&image, reference, 255.0)?;
            checkpoints.push(TracePoint {
                outer_iter: t,
                image,
                psnr_db,
            });
        }
    }

    let final_image = current.clamp(0.0, 255.0);
    let trace = DefenseTrace {
        checkpoints,
        network_updates,
        image_updates,
        snapshot_ring_len: ring.len(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    debug_assert_eq!(ring.len(), (config.image_steps + 1).min(image_updates + 1));
    Ok((final_image, trace))
}

/// Algorithm entry point: reference image in pixel scale ([0,255]) in, final
/// synthesized image (clamped to [0,255]) and trace out.
///
/// The chain deliberately runs on the raw pixel scale: the update couples its
/// learning rate to the noise magnitude (α = ε_g²/2), so the working scale
/// decides the signal-to-noise ratio of the synthesis. On [0,255] data the
/// per-step perturbation ε_g is a fraction of one grey level, which is what
/// lets the reconstruction reach useful fidelity.
pub fn run_defense(
    reference: &ImageTensor,
    config: &OagConfig,
) -> Result<(ImageTensor, DefenseTrace)> {
    run_defense_with_checkpoints(reference, config, &[])
}

/// Defense entry point for 8-bit pixel images: clamps the input to [0,255]
/// and synthesizes the substitute on the same scale.
pub fn defend_pixel_image(image: &ImageTensor, config: &OagConfig) -> Result<ImageTensor> {
    let (synth, _) = run_defense(&image.clamp(0.0, 255.0), config)?;
    Ok(synth)
}

/// Accuracy curve from a calibration run, plus the selected network-step count.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub chosen_network_steps: usize,
    /// (candidate checkpoint, top-1 accuracy over the calibration set).
    pub curve: Vec<(usize, f64)>,
}

/// Plateau rule: the smallest checkpoint whose accuracy gain over the next
/// `window` checkpoints stays below `threshold`; falls back to the last.
pub fn plateau_select(curve: &[f64], window: usize, threshold: f64) -> usize {
    let n = curve.len();
    for i in 0..n.saturating_sub(1) {
        let hi = (i + window).min(n - 1);
        if i < hi {
            let max_gain = curve[i + 1..=hi]
                .iter()
                .map(|v| v - curve[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max_gain < threshold {
                return i;
            }
        }
    }
    n - 1
}

pub const PLATEAU_WINDOW: usize = 2;
pub const PLATEAU_THRESHOLD: f64 = 0.01;

/// Pick T_N without touching adversarial samples: perturb clean images with
/// Gaussian noise, run the defense, and find where downstream accuracy goes
/// flat. `noise_sigma` is in pixel (0-255) units. The classifier is used
/// strictly offline here.
pub fn calibrate_network_steps(
    clean_images: &[(ImageTensor, usize)],
    classifier: &dyn ClassifierHandle,
    config: &OagConfig,
    noise_sigma: f64,
    candidates: &[usize],
) -> Result<CalibrationResult> {
    let perturbed: Vec<(ImageTensor, usize)> = clean_images
        .iter()
        .enumerate()
        .map(|(img_idx, (image, label))| {
            let mut noise_rng = SeededRng::derive(config.seed, 0x6e6f_6973 ^ img_idx as u64);
            let mut n = image.clone();
            for v in n.data_mut().iter_mut() {
                *v = (*v + noise_sigma * noise_rng.normal()).clamp(0.0, 255.0);
            }
            (n, *label)
        })
        .collect();
    calibrate_from_perturbed(&perturbed, classifier, config, candidates)
}

/// Same plateau search, but on caller-supplied perturbed images (e.g. actual
/// attack samples, for checking how well the noise proxy transfers).
pub fn calibrate_from_perturbed(
    perturbed: &[(ImageTensor, usize)],
    classifier: &dyn ClassifierHandle,
    config: &OagConfig,
    candidates: &[usize],
) -> Result<CalibrationResult> {
    if perturbed.is_empty() {
        return Err(Error::config("calibration set is empty"));
    }
    if candidates.is_empty() {
        return Err(Error::config("no candidate checkpoints supplied"));
    }
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let max_t = *sorted.last().unwrap();

    let mut correct = vec![0usize; sorted.len()];
    for (img_idx, (noised, label)) in perturbed.iter().enumerate() {
        let run_cfg = OagConfig {
            network_steps: max_t,
            checkpoint_every: 0,
            seed: SeededRng::derive(config.seed, img_idx as u64).next_u64(),
            ..*config
        };
        let (_, trace) = run_defense_with_checkpoints(noised, &run_cfg, &sorted)?;
        for point in &trace.checkpoints {
            if let Ok(pos) = sorted.binary_search(&point.outer_iter) {
                let probs = classifier.predict_probs(&point.image)?;
                let pred = argmax(&probs);
                if pred == *label {
                    correct[pos] += 1;
                }
            }
        }
    }

    let n = perturbed.len() as f64;
    let curve: Vec<(usize, f64)> = sorted
        .iter()
        .zip(&correct)
        .map(|(&t, &c)| (t, c as f64 / n))
        .collect();
    let acc: Vec<f64> = curve.iter().map(|(_, a)| *a).collect();
    let idx = plateau_select(&acc, PLATEAU_WINDOW, PLATEAU_THRESHOLD);
    Ok(CalibrationResult {
        chosen_network_steps: curve[idx].0,
        curve,
    })
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Declared defaults for the 64x64 desk benchmark. The generator geometry and
/// the Langevin/ascent rates are tuning choices, exposed here in one place.
pub fn default_config(seed: u64) -> OagConfig {
    OagConfig {
        network_steps: 300,
        image_steps: 20,
        noise_scale: 0.3,
        net_learning_rate: 3.0e-5,
        arch: GeneratorArch {
            filters: 16,
            kernel: 15,
            stride: 4,
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            sigma_init: 0.001,
        },
        seed,
        checkpoint_every: 0,
    }
}

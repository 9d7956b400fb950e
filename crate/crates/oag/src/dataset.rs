//! Procedural desk-scale benchmark: small RGB images in ten geometrically
//! distinct families with per-sample jitter, plus the manifest bookkeeping
//! that ties images to labels and splits.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// One generated sample, kept in memory; the io module handles disk.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: usize,
    pub split: Split,
}

const CLASS_NAMES: [&str; 10] = [
    "disc", "square", "triangle", "hstripes", "vstripes", "checker", "ring", "cross", "gradient",
    "dots",
];

fn render(class: usize, height: usize, width: usize, rng: &mut SeededRng) -> ImageTensor {
    let mut img = ImageTensor::zeros(3, height, width);
    let h = height as f64;
    let w = width as f64;

    // Per-sample jitter shared by all pixels.
    let cx = w * rng.uniform_in(0.35, 0.65);
    let cy = h * rng.uniform_in(0.35, 0.65);
    let scale = rng.uniform_in(0.55, 0.9) * (h.min(w) / 2.0);
    let freq = rng.uniform_in(0.5, 0.8);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    // Colors carry no class signal: foreground and background are drawn from
    // the same distribution for every class, with modest contrast, so the
    // classifier has to rely on geometry and texture. Template-like images
    // with saturated per-class palettes give the model enormous decision
    // margins, which makes small-budget pixel attacks ineffective.
    let bg: Vec<f64> = (0..3).map(|_| rng.uniform_in(85.0, 155.0)).collect();
    let fg: Vec<f64> = bg
        .iter()
        .map(|b| {
            let delta = rng.uniform_in(22.0, 48.0);
            let signed = if rng.uniform() < 0.5 { -delta } else { delta };
            (b + signed).clamp(0.0, 255.0)
        })
        .collect();

    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 - cx;
            let fy = y as f64 - cy;
            let rad = (fx * fx + fy * fy).sqrt();
            let inside = match class {
                0 => rad < scale,
                1 => fx.abs() < scale * 0.8 && fy.abs() < scale * 0.8,
                2 => fy > -scale * 0.7 && fy + 2.0 * fx < scale * 0.9 && fy - 2.0 * fx < scale * 0.9,
                3 => ((y as f64) * freq + phase).sin() > 0.0,
                4 => ((x as f64) * freq + phase).sin() > 0.0,
                5 => {
                    (((y as f64) * freq + phase).sin() > 0.0)
                        == (((x as f64) * freq + phase).sin() > 0.0)
                }
                6 => rad < scale && rad > scale * 0.55,
                7 => fx.abs() < scale * 0.28 || fy.abs() < scale * 0.28,
                8 => (fx + fy) / (2.0 * scale) > rng_free_gradient(x, y, w, h),
                9 => dot_lattice(x as f64, y as f64, scale * 0.45, freq, phase),
                _ => unreachable!(),
            };
            for c in 0..3 {
                let v = if inside { fg[c] } else { bg[c] };
                img.set(c, y, x, v);
            }
        }
    }

    // Additive pixel noise so classes are not pixel-exact templates.
    for v in img.data_mut().iter_mut() {
        *v = (*v + 10.0 * rng.normal()).clamp(0.0, 255.0);
    }
    img
}

/// Smooth diagonal ramp threshold for the gradient class.
fn rng_free_gradient(x: usize, y: usize, w: f64, h: f64) -> f64 {
    let t = (x as f64 / w + y as f64 / h) - 1.0;
    t * 0.8
}

fn dot_lattice(x: f64, y: f64, radius: f64, freq: f64, phase: f64) -> bool {
    let period = (18.0 / (freq * 20.0)).max(5.0);
    let lx = (x / period + phase).fract() * period;
    let ly = (y / period + phase * 0.7).fract() * period;
    let dx = lx - period / 2.0;
    let dy = ly - period / 2.0;
    (dx * dx + dy * dy).sqrt() < radius.min(period * 0.35)
}

/// Deterministically render `classes x per_class` images with a 70/10/20
/// train/val/test split per class.
pub fn generate_synthetic_dataset(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<String>)> {
    if classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if classes > CLASS_NAMES.len() {
        return Err(Error::config(format!(
            "at most {} classes are defined",
            CLASS_NAMES.len()
        )));
    }
    if per_class == 0 {
        return Err(Error::config("per_class must be positive"));
    }
    let n_train = (per_class * 7) / 10;
    let n_val = per_class / 10;
    let mut samples = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for idx in 0..per_class {
            // One derived stream per image: rendering order never matters.
            let mut rng = SeededRng::derive(seed, (class * 1_000_003 + idx) as u64);
            let image = render(class, height, width, &mut rng);
            let split = if idx < n_train {
                Split::Train
            } else if idx < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            samples.push(Sample {
                image,
                label: class,
                split,
            });
        }
    }
    let names = CLASS_NAMES[..classes].iter().map(|s| s.to_string()).collect();
    Ok((samples, names))
}

/// Collect (image, label) pairs for one split.
pub fn split_pairs(samples: &[Sample], split: Split) -> Vec<(ImageTensor, usize)> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| (s.image.clone(), s.label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let (a, _) = generate_synthetic_dataset(3, 5, 16, 16, 11).unwrap();
        let (b, _) = generate_synthetic_dataset(3, 5, 16, 16, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
        }
        let (c, _) = generate_synthetic_dataset(3, 5, 16, 16, 12).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn counts_and_splits() {
        let (samples, names) = generate_synthetic_dataset(10, 100, 16, 16, 1).unwrap();
        assert_eq!(samples.len(), 1000);
        assert_eq!(names.len(), 10);
        let train = samples.iter().filter(|s| s.split == Split::Train).count();
        let val = samples.iter().filter(|s| s.split == Split::Val).count();
        let test = samples.iter().filter(|s| s.split == Split::Test).count();
        assert_eq!((train, val, test), (700, 100, 200));
    }

    #[test]
    fn pixel_range_and_shape() {
        let (samples, _) = generate_synthetic_dataset(10, 2, 24, 20, 3).unwrap();
        for s in &samples {
            assert_eq!(s.image.shape(), (3, 24, 20));
            assert!(s
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=255.0).contains(&v) && v.is_finite()));
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(generate_synthetic_dataset(1, 5, 16, 16, 1).is_err());
        assert!(generate_synthetic_dataset(3, 0, 16, 16, 1).is_err());
    }
}

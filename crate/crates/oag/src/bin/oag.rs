//! Command-line front end: dataset generation, classifier training, attacks,
//! defense runs, calibration, evaluation, ablations and residual maps.
//!
//! Every subcommand reads one TOML config (`--config`, all sections optional)
//! and applies flag overrides on top. Outputs land under `--out`, which
//! defaults to the `OAG_OUT_DIR` environment variable, then `./out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use oag::attacks::{choose_target_label, AttackKind, AttackSpec};
use oag::classifier::{accuracy, train, ClassifierModel, TrainConfig};
use oag::dataset::{
    generate_synthetic_dataset, DatasetManifest, ManifestRecord, Split,
};
use oag::error::{Error, Result};
use oag::eval::{
    evaluate, median, options_digest, report_summary, write_report_csv, DefenseMethod,
    EvalOptions,
};
use oag::io::{
    read_flat_checkpoint, read_image, read_manifest, read_toml, write_flat_checkpoint,
    write_image, write_manifest, write_toml,
};
use oag::metrics::residual_map;
use oag::pipeline::{calibrate_network_steps, default_config, OagConfig};
use oag::rng::SeededRng;
use oag::tensor::ImageTensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct DatasetCfg {
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            classes: 10,
            per_class: 100,
            height: 64,
            width: 64,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct CalibrationCfg {
    /// Gaussian perturbation sigma in 0-255 pixel units.
    noise_sigma: f64,
    /// Candidate outer-iteration checkpoints, ascending.
    candidates: Vec<usize>,
    /// How many clean images to calibrate on.
    images: usize,
}

impl Default for CalibrationCfg {
    fn default() -> Self {
        CalibrationCfg {
            noise_sigma: 6.0,
            candidates: vec![50, 100, 150, 200, 250, 300],
            images: 10,
        }
    }
}

/// One config file drives every subcommand; unspecified sections fall back
/// to the documented defaults.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct AppConfig {
    dataset: DatasetCfg,
    train: TrainConfig,
    attack: AttackSpec,
    defense: DefenseMethod,
    oag: OagConfig,
    calibration: CalibrationCfg,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            dataset: DatasetCfg::default(),
            train: TrainConfig::default(),
            attack: AttackSpec {
                kind: AttackKind::IgsmTargeted,
                epsilon: 6.0,
                step_size: 1.0,
                iterations: oag::attacks::default_iterations(6.0),
                target_label: None,
                momentum_decay: 1.0,
            },
            defense: DefenseMethod::Oag,
            oag: default_config(0),
            calibration: CalibrationCfg::default(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "oag", about = "Per-image generative preprocessing defense toolkit")]
struct Cli {
    /// TOML config file; missing sections use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; defaults to $OAG_OUT_DIR, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides applied after the config file is read.
#[derive(Debug, Args)]
struct Overrides {
    /// Attack kind: fgsm_untargeted | fgsm_targeted | igsm_targeted |
    /// mifgsm_untargeted | none.
    #[arg(long, global = true)]
    attack_kind: Option<String>,
    /// L-infinity budget in 0-255 pixel units.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Attack iteration count; 0 means the ε-derived default.
    #[arg(long, global = true)]
    attack_iterations: Option<usize>,
    /// Defense: none | mean_filter | oag | autoencoder.
    #[arg(long, global = true)]
    defense: Option<String>,
    /// Outer iterations T_N of the defense.
    #[arg(long, global = true)]
    network_steps: Option<usize>,
    /// Inner iterations T_I of the defense.
    #[arg(long, global = true)]
    image_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic benchmark to disk (images + manifest).
    GenData,
    /// Train the target classifier on the generated training split.
    TrainClassifier,
    /// Write attacked copies of a split, with an extended manifest.
    Attack {
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed for per-image target-label draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the configured defense over a directory of images.
    Defend {
        /// Manifest CSV of the images to defend (e.g. the attack output).
        #[arg(long)]
        input: PathBuf,
        /// Seed for per-image defense randomness.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Pick T_N from Gaussian-noised clean images (classifier used offline).
    Calibrate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attack → defend → classify over the test split; writes a CSV report.
    Evaluate {
        /// Run seed; required so every report is reproducible on purpose.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Sweep one defense hyper-parameter, one evaluation per value.
    Ablate {
        /// image_steps | network_steps | kernel | noise_scale
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 10,20,30,40.
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Normalized per-pixel absolute difference of two images, as grayscale.
    Residual {
        image_a: PathBuf,
        image_b: PathBuf,
        output: PathBuf,
    },
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("OAG_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => read_toml::<AppConfig>(path)?,
        None => AppConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(kind) = &o.attack_kind {
        cfg.attack.kind = match kind.as_str() {
            "fgsm_untargeted" => AttackKind::FgsmUntargeted,
            "fgsm_targeted" => AttackKind::FgsmTargeted,
            "igsm_targeted" => AttackKind::IgsmTargeted,
            "mifgsm_untargeted" => AttackKind::MifgsmUntargeted,
            "none" => AttackKind::None,
            other => return Err(Error::config(format!("unknown attack kind '{other}'"))),
        };
    }
    if let Some(eps) = o.epsilon {
        cfg.attack.epsilon = eps;
        cfg.attack.iterations = oag::attacks::default_iterations(eps);
    }
    if let Some(iters) = o.attack_iterations {
        if iters > 0 {
            cfg.attack.iterations = iters;
        }
    }
    if let Some(name) = &o.defense {
        cfg.defense = match name.as_str() {
            "none" => DefenseMethod::None,
            "mean_filter" => DefenseMethod::MeanFilter { window: 3 },
            "oag" => DefenseMethod::Oag,
            "autoencoder" => DefenseMethod::Autoencoder {
                steps: 300,
                learning_rate: 0.05,
            },
            other => return Err(Error::config(format!("unknown defense '{other}'"))),
        };
    }
    if let Some(t) = o.network_steps {
        cfg.oag.network_steps = t;
    }
    if let Some(t) = o.image_steps {
        cfg.oag.image_steps = t;
    }
    // Targeted attacks may leave target_label unset here; per-image targets
    // are drawn later. Validate with a placeholder so everything else is
    // still checked up front.
    let mut probe = cfg.attack.clone();
    if probe.kind.is_targeted() && probe.target_label.is_none() {
        probe.target_label = Some(0);
    }
    probe.validate()?;
    cfg.oag.validate()?;
    Ok(cfg)
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("dataset").join("manifest.csv")
}

fn classifier_path(root: &Path) -> PathBuf {
    root.join("classifier.ckpt")
}

/// Shape sidecar so a checkpoint can be loaded without the dataset config.
#[derive(serde::Serialize, serde::Deserialize)]
struct ClassifierMeta {
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
}

fn load_split(root: &Path, split: Split) -> Result<Vec<(ImageTensor, usize)>> {
    let mpath = manifest_path(root);
    let manifest = read_manifest(&mpath)?;
    let base = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for rec in manifest.split_records(split) {
        out.push((read_image(&base.join(&rec.path))?, rec.label));
    }
    Ok(out)
}

fn load_classifier(root: &Path) -> Result<ClassifierModel> {
    let meta: ClassifierMeta = read_toml(&root.join("classifier.toml"))?;
    let mut model = ClassifierModel::new_random(
        meta.channels,
        meta.height,
        meta.width,
        meta.classes,
        &mut SeededRng::new(0),
    )?;
    model.load_flat_params(&read_flat_checkpoint(&classifier_path(root))?)?;
    Ok(model)
}

fn cmd_gen_data(root: &Path, cfg: &AppConfig) -> Result<()> {
    let d = &cfg.dataset;
    let (samples, class_names) =
        generate_synthetic_dataset(d.classes, d.per_class, d.height, d.width, d.seed)?;
    let dir = root.join("dataset");
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{}_{:04}.png", class_names[s.label], i);
        write_image(&dir.join(&rel), &s.image)?;
        records.push(ManifestRecord {
            path: rel,
            label: s.label,
            split: s.split,
        });
    }
    let manifest = DatasetManifest {
        records,
        class_names,
    };
    write_manifest(&manifest_path(root), &manifest)?;
    println!(
        "wrote {} images and {} to {}",
        samples.len(),
        "manifest.csv",
        dir.display()
    );
    Ok(())
}

fn cmd_train(root: &Path, cfg: &AppConfig) -> Result<()> {
    let train_pairs = load_split(root, Split::Train)?;
    let val_pairs = load_split(root, Split::Val)?;
    let classes = cfg.dataset.classes;
    let (model, history) = train(&train_pairs, &val_pairs, classes, &cfg.train)?;
    write_flat_checkpoint(&classifier_path(root), &model.flatten_params())?;
    write_toml(
        &root.join("classifier.toml"),
        &ClassifierMeta {
            channels: model.input_channels,
            height: model.input_height,
            width: model.input_width,
            classes: model.n_classes,
        },
    )?;
    let hist_path = root.join("train_history.csv");
    let mut text = String::from("epoch,train_loss,train_accuracy,val_accuracy\n");
    for e in 0..history.train_loss.len() {
        let val = history.val_accuracy.get(e).copied().unwrap_or(f64::NAN);
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            e, history.train_loss[e], history.train_accuracy[e], val
        ));
    }
    std::fs::write(&hist_path, text).map_err(|e| Error::io(&hist_path, e))?;
    let test_pairs = load_split(root, Split::Test)?;
    println!(
        "trained {} epochs; val acc {:.3}, test acc {:.3}; checkpoint at {}",
        cfg.train.epochs,
        history.val_accuracy.last().copied().unwrap_or(f64::NAN),
        accuracy(&model, &test_pairs)?,
        classifier_path(root).display()
    );
    Ok(())
}

fn cmd_attack(
    root: &Path,
    cfg: &AppConfig,
    split: &str,
    seed: u64,
    limit: Option<usize>,
) -> Result<()> {
    let split = Split::parse(split)?;
    let pairs = load_split(root, split)?;
    let model = load_classifier(root)?;
    let n = limit.unwrap_or(pairs.len()).min(pairs.len());
    let dir = root.join("attacked");
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = String::from("path,label,target,kind,epsilon\n");
    for (index, (image, label)) in pairs.iter().take(n).enumerate() {
        let mut spec = cfg.attack.clone();
        if spec.kind.is_targeted() && spec.target_label.is_none() {
            let mut rng = SeededRng::derive(seed, 0x7467 ^ index as u64);
            spec.target_label = Some(choose_target_label(&mut rng, *label, model.n_classes));
        }
        let adv = oag::attacks::apply_attack(&spec, image, *label, &model)?;
        let rel = format!("images/{index:04}.png");
        write_image(&dir.join(&rel), &adv)?;
        rows.push_str(&format!(
            "{rel},{label},{},{},{}\n",
            spec.target_label.map_or(-1i64, |t| t as i64),
            spec.kind.name(),
            spec.epsilon
        ));
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, rows).map_err(|e| Error::io(&mpath, e))?;
    println!("wrote {n} attacked images to {}", dir.display());
    Ok(())
}

fn cmd_defend(
    root: &Path,
    cfg: &AppConfig,
    input: &Path,
    seed: u64,
    limit: Option<usize>,
) -> Result<()> {
    let base = input.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let mut paths = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("path,") {
            continue;
        }
        if let Some(field) = line.split(',').next() {
            if !field.is_empty() {
                paths.push(field.to_string());
            }
        }
    }
    let n = limit.unwrap_or(paths.len()).min(paths.len());
    let dir = root.join("defended");
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (index, rel) in paths.iter().take(n).enumerate() {
        let image = read_image(&base.join(rel))?;
        let image_seed = SeededRng::derive(seed, index as u64).next_u64();
        let defended = oag::eval::apply_defense(&cfg.defense, &image, &cfg.oag, image_seed)?;
        write_image(&dir.join(format!("images/{index:04}.png")), &defended)?;
    }
    println!(
        "defended {n} images with '{}' into {}",
        cfg.defense.name(),
        dir.display()
    );
    Ok(())
}

fn cmd_calibrate(root: &Path, cfg: &AppConfig, seed: u64) -> Result<()> {
    let pairs = load_split(root, Split::Val)?;
    let model = load_classifier(root)?;
    let subset: Vec<_> = pairs.into_iter().take(cfg.calibration.images).collect();
    let mut oag_cfg = cfg.oag.clone();
    oag_cfg.seed = seed;
    let result = calibrate_network_steps(
        &subset,
        &model,
        &oag_cfg,
        cfg.calibration.noise_sigma,
        &cfg.calibration.candidates,
    )?;
    let mut text = String::from("network_steps,accuracy\n");
    for (t, acc) in &result.curve {
        text.push_str(&format!("{t},{acc:.6}\n"));
        println!("T_N {t:>4}: accuracy {acc:.3}");
    }
    let path = root.join("calibration.csv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("chosen network_steps = {}", result.chosen_network_steps);
    Ok(())
}

fn cmd_evaluate(root: &Path, cfg: &AppConfig, seed: u64, limit: Option<usize>) -> Result<()> {
    let pairs = load_split(root, Split::Test)?;
    let model = load_classifier(root)?;
    let n = limit.unwrap_or(pairs.len()).min(pairs.len());
    let subset: Vec<_> = pairs.into_iter().take(n).collect();
    let options = EvalOptions {
        attack: cfg.attack.clone(),
        defense: cfg.defense.clone(),
        oag: cfg.oag.clone(),
        seed,
    };
    let report = evaluate(&subset, &model, &options)?;
    let digest = options_digest(&options)?;
    if report.config_digest != digest {
        return Err(Error::config("report digest does not echo the run options"));
    }
    let csv_path = root.join("report.csv");
    write_report_csv(&csv_path, &report)?;
    let summary = report_summary(&report, &options);
    let sum_path = root.join("report_summary.txt");
    std::fs::write(&sum_path, &summary).map_err(|e| Error::io(&sum_path, e))?;
    print!("{summary}");
    println!("report written to {}", csv_path.display());
    Ok(())
}

fn cmd_ablate(
    root: &Path,
    cfg: &AppConfig,
    param: &str,
    values: &str,
    seed: u64,
    limit: Option<usize>,
) -> Result<()> {
    let parsed: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::config(format!("bad value '{v}': {e}")))
        })
        .collect::<Result<_>>()?;
    if parsed.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }
    let pairs = load_split(root, Split::Test)?;
    let model = load_classifier(root)?;
    let n = limit.unwrap_or(pairs.len()).min(pairs.len());
    let subset: Vec<_> = pairs.into_iter().take(n).collect();
    let mut text = String::from(
        "param,value,attacked_accuracy,defended_accuracy,median_psnr_db,wall_time_secs\n",
    );
    for &value in &parsed {
        let mut options = EvalOptions {
            attack: cfg.attack.clone(),
            defense: cfg.defense.clone(),
            oag: cfg.oag.clone(),
            seed,
        };
        match param {
            "image_steps" => options.oag.image_steps = value as usize,
            "network_steps" => options.oag.network_steps = value as usize,
            "kernel" => options.oag.arch.kernel = value as usize,
            "noise_scale" => options.oag.noise_scale = value,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation parameter '{other}' (expected image_steps, \
                     network_steps, kernel or noise_scale)"
                )))
            }
        }
        let report = evaluate(&subset, &model, &options)?;
        println!(
            "{param} = {value}: attacked {:.3}, defended {:.3}, psnr {:.2} dB",
            report.attacked_accuracy, report.defended_accuracy, report.median_psnr_db
        );
        text.push_str(&format!(
            "{param},{value},{:.6},{:.6},{:.4},{:.3}\n",
            report.attacked_accuracy,
            report.defended_accuracy,
            report.median_psnr_db,
            report.wall_time_secs
        ));
    }
    let path = root.join(format!("ablation_{param}.csv"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("ablation table written to {}", path.display());
    Ok(())
}

fn cmd_residual(image_a: &Path, image_b: &Path, output: &Path) -> Result<()> {
    let a = read_image(image_a)?;
    let b = read_image(image_b)?;
    let map = residual_map(&a, &b)?;
    // The map lives in [0,1]; scale to the 8-bit range for export.
    write_image(output, &map.map(|v| v * 255.0))?;
    let mut values: Vec<f64> = map.data().to_vec();
    println!(
        "residual written to {} (median {:.4})",
        output.display(),
        median(&mut values)
    );
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let root = out_root(&cli);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&root, &cfg),
        Command::TrainClassifier => cmd_train(&root, &cfg),
        Command::Attack { split, seed, limit } => cmd_attack(&root, &cfg, split, *seed, *limit),
        Command::Defend { input, seed, limit } => cmd_defend(&root, &cfg, input, *seed, *limit),
        Command::Calibrate { seed } => cmd_calibrate(&root, &cfg, *seed),
        Command::Evaluate { seed, limit } => cmd_evaluate(&root, &cfg, *seed, *limit),
        Command::Ablate {
            param,
            values,
            seed,
            limit,
        } => cmd_ablate(&root, &cfg, param, values, *seed, *limit),
        Command::Residual {
            image_a,
            image_b,
            output,
        } => cmd_residual(image_a, image_b, output),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

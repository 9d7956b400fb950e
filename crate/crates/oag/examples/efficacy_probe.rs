//! End-to-end accuracy probe: train the classifier on the synthetic set,
//! attack a test subset with IGSM, and compare undefended / mean-filter /
//! defended accuracy. Args: [subset] [network_steps] [epochs]

use oag::attacks::{default_iterations, AttackKind, AttackSpec};
use oag::classifier::{accuracy, train, ClassifierModel, TrainConfig};
use oag::dataset::{generate_synthetic_dataset, split_pairs, Split};
use oag::eval::{evaluate, DefenseMethod, EvalOptions};
use oag::io::{read_flat_checkpoint, write_flat_checkpoint};
use oag::pipeline::default_config;
use oag::rng::SeededRng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let subset: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(40);
    let network_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);

    let (samples, _names) = generate_synthetic_dataset(10, 100, 64, 64, 11).unwrap();
    let train_pairs = split_pairs(&samples, Split::Train);
    let val_pairs = split_pairs(&samples, Split::Val);
    let test_pairs = split_pairs(&samples, Split::Test);

    let ckpt = std::path::PathBuf::from(format!("/tmp/oag_probe/classifier_e{epochs}.ckpt"));
    std::fs::create_dir_all("/tmp/oag_probe").unwrap();
    let mut model =
        ClassifierModel::new_random(3, 64, 64, 10, &mut SeededRng::new(1)).unwrap();
    if ckpt.exists() {
        let flat = read_flat_checkpoint(&ckpt).unwrap();
        model.load_flat_params(&flat).unwrap();
        eprintln!("loaded cached classifier from {}", ckpt.display());
    } else {
        let t0 = std::time::Instant::now();
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        let (m, hist) = train(&train_pairs, &val_pairs, 10, &cfg).unwrap();
        model = m;
        eprintln!(
            "trained in {:.1}s, val acc per epoch: {:?}",
            t0.elapsed().as_secs_f64(),
            hist.val_accuracy
                .iter()
                .map(|a| (a * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
        write_flat_checkpoint(&ckpt, &model.flatten_params()).unwrap();
    }

    let clean_acc = accuracy(&model, &test_pairs).unwrap();
    eprintln!("clean test accuracy: {:.3} ({} images)", clean_acc, test_pairs.len());

    let subset_pairs: Vec<_> = test_pairs.iter().take(subset).cloned().collect();
    let attack = AttackSpec {
        kind: AttackKind::IgsmTargeted,
        epsilon: 6.0,
        step_size: 1.0,
        iterations: default_iterations(6.0),
        target_label: None,
        momentum_decay: 1.0,
    };
    let mut oag_cfg = default_config(0);
    oag_cfg.network_steps = network_steps;

    for defense in [
        DefenseMethod::None,
        DefenseMethod::MeanFilter { window: 3 },
        DefenseMethod::Oag,
    ] {
        let options = EvalOptions {
            attack: attack.clone(),
            defense: defense.clone(),
            oag: oag_cfg.clone(),
            seed: 99,
        };
        let t0 = std::time::Instant::now();
        let report = evaluate(&subset_pairs, &model, &options).unwrap();
        eprintln!(
            "{:<12} kept={} attacked_acc={:.3} defended_acc={:.3} median_psnr={:.2} dB  ({:.1}s)",
            report.config_digest[..8].to_string(),
            report.n_clean_correct,
            report.attacked_accuracy,
            report.defended_accuracy,
            report.median_psnr_db,
            t0.elapsed().as_secs_f64()
        );
        eprintln!("  defense = {}", defense.name());
        if !report.failures.is_empty() {
            eprintln!("  failures: {:?}", report.failures);
        }
    }
}

//! Undefended accuracy vs epsilon for each attack kind, plus logit margins.
//! Args: [subset]

use oag::attacks::{default_iterations, AttackKind, AttackSpec};
use oag::classifier::ClassifierModel;
use oag::dataset::{generate_synthetic_dataset, split_pairs, Split};
use oag::eval::{evaluate, DefenseMethod, EvalOptions};
use oag::io::read_flat_checkpoint;
use oag::pipeline::default_config;
use oag::rng::SeededRng;

fn main() {
    let subset: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(30);
    let (samples, _names) = generate_synthetic_dataset(10, 100, 64, 64, 11).unwrap();
    let test_pairs = split_pairs(&samples, Split::Test);
    let mut model = ClassifierModel::new_random(3, 64, 64, 10, &mut SeededRng::new(1)).unwrap();
    let flat = read_flat_checkpoint("/tmp/oag_probe/classifier_e10.ckpt".as_ref()).unwrap();
    model.load_flat_params(&flat).unwrap();

    // Softmax margin on a few clean images.
    for (image, label) in test_pairs.iter().take(5) {
        let probs = oag::attacks::ClassifierHandle::predict_probs(&model, image).unwrap();
        let mut sorted = probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eprintln!(
            "label {label}: p(top)={:.6} p(2nd)={:.3e}",
            sorted[0], sorted[1]
        );
    }

    let subset_pairs: Vec<_> = test_pairs.iter().take(subset).cloned().collect();
    for kind in [AttackKind::FgsmUntargeted, AttackKind::IgsmTargeted, AttackKind::MifgsmUntargeted] {
        for eps in [2.0, 4.0, 6.0, 8.0, 16.0, 32.0] {
            let attack = AttackSpec {
                kind,
                epsilon: eps,
                step_size: 1.0_f64.min(eps),
                iterations: default_iterations(eps),
                target_label: None,
                momentum_decay: 1.0,
            };
            let options = EvalOptions {
                attack,
                defense: DefenseMethod::None,
                oag: default_config(0),
                seed: 5,
            };
            let report = evaluate(&subset_pairs, &model, &options).unwrap();
            eprintln!(
                "{:<18} eps={eps:<4} attacked_acc={:.3} linf_max={:.2}",
                kind.name(),
                report.attacked_accuracy,
                report
                    .rows
                    .iter()
                    .map(|r| r.adv_linf)
                    .fold(0.0f64, f64::max)
            );
        }
    }
}

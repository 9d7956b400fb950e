//! Reconstruction-fidelity probe: defend a clean synthetic image and print
//! the PSNR trace. Args: filters kernel stride T_N T_I eps_g beta [class].

use oag::dataset::generate_synthetic_dataset;
use oag::pipeline::{default_config, run_defense_with_checkpoints};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = default_config(99);
    cfg.arch.filters = args[0].parse().unwrap();
    cfg.arch.kernel = args[1].parse().unwrap();
    cfg.arch.stride = args[2].parse().unwrap();
    cfg.network_steps = args[3].parse().unwrap();
    cfg.image_steps = args[4].parse().unwrap();
    cfg.noise_scale = args[5].parse().unwrap();
    cfg.net_learning_rate = args[6].parse().unwrap();
    if let Some(s) = args.get(7) {
        cfg.arch.sigma_init = s.parse().unwrap();
    }
    let class: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0);

    let (samples, _) = generate_synthetic_dataset(10, 1, 64, 64, 5).unwrap();
    let reference = samples[class].image.clone();
    let ticks: Vec<usize> = vec![25, 50, 100, 200, 300, 400, 600]
        .into_iter()
        .filter(|&t| t <= cfg.network_steps)
        .collect();
    let start = std::time::Instant::now();
    let (_, trace) = run_defense_with_checkpoints(&reference, &cfg, &ticks).unwrap();
    print!(
        "K={} k={} s={} T_N={} T_I={} eps={} beta={} sig={} class={}:",
        cfg.arch.filters,
        cfg.arch.kernel,
        cfg.arch.stride,
        cfg.network_steps,
        cfg.image_steps,
        cfg.noise_scale,
        cfg.net_learning_rate,
        cfg.arch.sigma_init,
        class
    );
    for p in &trace.checkpoints {
        print!(" [{}]{:.2}dB", p.outer_iter, p.psnr_db);
    }
    println!(" ({:.1}s)", start.elapsed().as_secs_f64());
}

//! Quick wall-clock probe: how long does one full defense run take at a given
//! generator size? Args: filters kernel stride network_steps image_steps.

use oag::pipeline::{default_config, run_defense};
use oag::rng::SeededRng;
use oag::tensor::gaussian_sample;

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("usize args"))
        .collect();
    let mut cfg = default_config(1234);
    if args.len() >= 5 {
        cfg.arch.filters = args[0];
        cfg.arch.kernel = args[1];
        cfg.arch.stride = args[2];
        cfg.network_steps = args[3];
        cfg.image_steps = args[4];
    }
    let mut rng = SeededRng::new(7);
    let reference = gaussian_sample(&mut rng, 3, cfg.arch.input_height, cfg.arch.input_width)
        .map(|v| (v.abs() * 80.0).min(255.0));
    let start = std::time::Instant::now();
    let (out, trace) = run_defense(&reference, &cfg).unwrap();
    let dt = start.elapsed().as_secs_f64();
    println!(
        "filters={} kernel={} stride={} T_N={} T_I={} -> {:.2}s/image ({} net updates, {} image updates), out finite={}",
        cfg.arch.filters,
        cfg.arch.kernel,
        cfg.arch.stride,
        cfg.network_steps,
        cfg.image_steps,
        dt,
        trace.network_updates,
        trace.image_updates,
        out.all_finite()
    );
}

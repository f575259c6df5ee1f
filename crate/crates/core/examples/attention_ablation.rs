//! Transport attention against softmax attention in the decoder, same
//! scenes, same initialisation, same number of steps, inductive training.

use prompt_ot::cli::{run_seed, Mode, RunConfig};
use prompt_ot::segpipe::AttentionKind;

fn main() -> prompt_ot::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut cfg = RunConfig { mode: Mode::Inductive, ..RunConfig::default() };
    cfg.sync();
    let mut soft = cfg.clone();
    soft.model.decoder.attention = AttentionKind::Softmax;
    let mut gain = 0.0;
    for seed in 0..seeds {
        let a = run_seed(&cfg, seed)?.summary.decoder.hiou;
        let b = run_seed(&soft, seed)?.summary.decoder.hiou;
        gain += a - b;
        println!("seed {seed}: transport {a:.3}  softmax {b:.3}");
    }
    println!("mean decoder hIoU gain {:+.3}", gain / seeds as f64);
    Ok(())
}

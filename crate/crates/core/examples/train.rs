//! Trains the two-path model on one planted scene, inductively and with
//! self-training, and prints metrics of each output.

use prompt_ot::cli::{run_seed, Mode, RunConfig};

fn main() -> prompt_ot::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for mode in [Mode::Inductive, Mode::Transductive, Mode::FullySupervised] {
        let mut cfg = RunConfig { mode, ..RunConfig::default() };
        cfg.sync();
        let r = run_seed(&cfg, seed)?;
        let t = &r.train.trace;
        println!("{mode}: loss {:.4} -> {:.4}", t[0].loss, t[t.len() - 1].loss);
        for (name, m) in [("decoder", &r.evaluation.decoder), ("scoremap", &r.evaluation.scoremap), ("ensemble", &r.evaluation.ensemble)] {
            println!("  {name:<9} seen {:.3}  unseen {:.3}  hIoU {:.3}", m.miou_seen, m.miou_unseen, m.hiou);
        }
    }
    Ok(())
}

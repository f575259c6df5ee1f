//! Entropic transport between 64 pixels and 8 prompts at three
//! temperatures, and the gradient of a linear read-out of the plan.

use prompt_ot::ot::{sinkhorn_grad, sinkhorn_log, Marginals, SinkhornConfig};
use prompt_ot::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> prompt_ot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cost = Mat::from_fn(64, 8, |_, _| rng.random::<f64>());
    let marg = Marginals::uniform(64, 8);

    for eps in [0.5, 0.1, 0.05] {
        let cfg = SinkhornConfig::new(eps, 1000, 1e-9)?;
        let t = sinkhorn_log(&cost, &marg, &cfg)?;
        let cost_paid: f64 = t.plan.hadamard(&cost)?.sum();
        let max_entry = t.plan.data().iter().copied().fold(0.0, f64::max);
        println!(
            "eps {eps:<5} iters {:>4}  marginal err {:.1e}  <T,C> {cost_paid:.4}  largest entry {max_entry:.4}",
            t.iters_used, t.marginal_err
        );
    }

    // d<U, T(C)>/dC through the unrolled iterations
    let upstream = Mat::from_fn(64, 8, |i, j| if j == i % 8 { 1.0 } else { 0.0 });
    let g = sinkhorn_grad(&cost, &marg, &SinkhornConfig::new(0.1, 200, 1e-9)?, &upstream)?;
    println!("gradient norm {:.4}", g.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}

//! Small transport problems solved exactly and with decreasing
//! regularisation: the entropic cost approaches the linear-program optimum.

use prompt_ot::ot::{exact_ot, sinkhorn_log, Marginals, SinkhornConfig};
use prompt_ot::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> prompt_ot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cost = Mat::from_fn(3, 4, |_, _| rng.random::<f64>());
    let marg = Marginals::uniform(3, 4);
    let exact = exact_ot(&cost, &marg)?;
    println!("exact optimum {:.6}", exact.value);
    println!("{:?}", exact.plan);

    for eps in [1.0, 0.1, 0.01, 0.001] {
        let t = sinkhorn_log(&cost, &marg, &SinkhornConfig::new(eps, 100_000, 1e-12)?)?;
        let c = t.plan.hadamard(&cost)?.sum();
        println!(
            "eps {eps:<6} cost {c:.6}  relative gap {:.2e}  max plan deviation {:.2e}",
            (c - exact.value) / exact.value,
            t.plan.max_abs_diff(&exact.plan)
        );
    }
    Ok(())
}

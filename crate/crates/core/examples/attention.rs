//! The attention operators side by side on random inputs, with a finite
//! difference check of the transport attention.

use prompt_ot::attention::{
    cross_attention, mpsa, mpsa_grad, self_attention, sinkformer_attention, sinkformer_plan, AttnParams, MpsaConfig, SinkformerConfig,
};
use prompt_ot::linalg::{finite_diff_grad, max_relative_error};
use prompt_ot::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> prompt_ot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, n, m, d) = (3, 2, 16, 8);
    let p = AttnParams::random(d, 4, &mut rng);
    let text = Mat::random_normal(k * n, d, 0.5, &mut rng);
    let pixels = Mat::random_normal(m, d, 0.5, &mut rng);

    println!("self attention   {:?}", self_attention(&pixels, &p)?.shape());
    let sk = SinkformerConfig::default();
    let plan = sinkformer_plan(&pixels, &p, &sk)?;
    let cols = plan.plan.col_sums();
    println!(
        "sinkformer       {:?}  column sums in [{:.3}, {:.3}]",
        sinkformer_attention(&pixels, &p, &sk)?.shape(),
        cols.iter().copied().fold(f64::INFINITY, f64::min),
        cols.iter().copied().fold(0.0, f64::max)
    );
    println!("cross attention  {:?}", cross_attention(&text, &pixels, &p)?.shape());

    let cfg = MpsaConfig { epsilon: 0.5, iters: 10, tol: 0.0 };
    let out = mpsa(&text, &pixels, &p, k, n, &cfg)?;
    println!("transport attention context {:?}, mask logits {:?}", out.context.shape(), out.mask_logits.shape());

    let up = Mat::random_normal(k * n, 4, 1.0, &mut rng);
    let loss = |t: &Mat| -> f64 {
        let o = mpsa(t, &pixels, &p, k, n, &cfg).unwrap();
        o.context.hadamard(&up).unwrap().sum()
    };
    let analytic = mpsa_grad(&text, &pixels, &p, k, n, &cfg, &up, &Mat::zeros(m, k))?;
    let numeric = finite_diff_grad(loss, &text, 1e-5)?;
    println!("d/d text relative error {:.2e}", max_relative_error(&analytic.query_input, &numeric));
    Ok(())
}

//! Per-prompt score maps of a planted scene: cosine scores, transport
//! weighting and softmax weighting, and how similar the prompts of a class
//! end up under each.

use prompt_ot::ot::SinkhornConfig;
use prompt_ot::prompt_align::{mps, prompt_correlation, prompt_maps, prompt_spread, score_map};
use prompt_ot::segpipe::{gen_toy_scene, SceneConfig};

fn main() -> prompt_ot::Result<()> {
    let cfg = SceneConfig::default();
    let (scene, bundle) = gen_toy_scene(&cfg, 0)?;
    let score = SinkhornConfig::default();

    let s = score_map(&bundle)?;
    let refined = mps(&s, &score)?;
    println!("scores {}x{} -> refined {}x{}", s.data.rows(), s.data.cols(), refined.data.rows(), refined.data.cols());
    let iters: Vec<usize> = refined.plans.iter().map(|p| p.iters_used).collect();
    println!("iterations per class {iters:?}");

    let maps = prompt_maps(&bundle, &score)?;
    for (name, m) in [("raw", &maps.raw), ("transport", &maps.transport), ("softmax", &maps.softmax)] {
        println!("{name:<10} correlation {:+.3}  spread {:.3}", prompt_correlation(m), prompt_spread(m));
    }

    // where does each prompt of class 0 put its mass?
    let parts = scene.cell_parts();
    let labels = scene.cell_ground_truth();
    for n in 0..cfg.prompts {
        let col = maps.transport[0].col(n);
        let mut by_part = vec![0.0; cfg.prompts];
        for (i, v) in col.iter().enumerate() {
            if labels[i] == 0 {
                by_part[parts[i]] += v;
            }
        }
        let total: f64 = by_part.iter().sum();
        let share: Vec<String> = by_part.iter().map(|v| format!("{:.2}", v / total)).collect();
        println!("class 0 prompt {n}: share per attribute region [{}]", share.join(", "));
    }
    Ok(())
}

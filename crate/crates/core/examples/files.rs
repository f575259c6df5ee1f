//! Scene and checkpoint files, the training trace as CSV and a score map
//! as an 8-bit PGM, written to a directory given on the command line.

use std::path::PathBuf;

use prompt_ot::cli::{run_seed, RunConfig};
use prompt_ot::segpipe::{load_checkpoint, load_scene, save_checkpoint, save_scene, write_pgm, write_trace_csv};

fn main() -> prompt_ot::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "files-example".into()));
    std::fs::create_dir_all(&dir)?;
    let mut cfg = RunConfig::default();
    cfg.train.steps = 50;
    cfg.sync();
    let r = run_seed(&cfg, 4)?;

    save_scene(&dir.join("scene.bin"), &r.scene)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &r.train.params, 4)?;
    write_trace_csv(std::fs::File::create(dir.join("trace.csv"))?, &r.train.trace)?;
    let (h, w) = cfg.scene.grid;
    let (lo, hi) = write_pgm(std::fs::File::create(dir.join("class0_prompt0.pgm"))?, &r.maps.transport[0].col(0), h, w)?;

    let scene = load_scene(&dir.join("scene.bin"))?;
    let (params, seed) = load_checkpoint(&dir.join("checkpoint.bin"))?;
    assert_eq!(scene.pixels, r.scene.pixels);
    assert_eq!(params, r.train.params);
    println!("round trip ok (seed {seed}); map range [{lo:.4}, {hi:.4}]; files in {}", dir.display());
    Ok(())
}

//! A run described in TOML, executed through the library the same way the
//! `run` subcommand does.

use prompt_ot::cli::{run, RunConfig};

const CONFIG: &str = r#"
mode = "transductive"
seeds = "0..2"

[scene]
noise = 0.2
grid = [8, 8]
image = [16, 16]

[model]
lambda = 0.5

[model.score]
epsilon = 0.05

[train]
steps = 120

[train.pseudo]
every = 20

[export]
scoremaps = true
"#;

fn main() -> prompt_ot::Result<()> {
    let mut cfg = RunConfig::from_toml_str(CONFIG)?;
    cfg.sync();
    let out = tempfile_dir();
    let (dir, rows) = run(&cfg, &out, true)?;
    for r in &rows {
        println!("seed {}: ensemble hIoU {:.3}", r.seed, r.ensemble.hiou);
    }
    print!("{}", std::fs::read_to_string(dir.join("metrics.csv"))?);
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join("prompt-ot-config-run")
}

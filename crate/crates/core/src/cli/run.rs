//! `run` and `export`: per-seed pipelines and their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::prompt_align::{prompt_correlation, prompt_maps, prompt_spread, EmbeddingBundle, PromptMaps};
use crate::segpipe::{
    adapted_bundle, evaluate, gen_toy_scene, load_checkpoint, train_inductive, train_transductive, write_checkpoint, write_pgm,
    write_scene, write_trace_csv, Evaluation, ModelParams, SegMetrics, ToyScene, TrainResult,
};

/// Environment variable naming the directory runs are written under when
/// `--out` is not given.
pub const OUTPUT_ROOT_ENV: &str = "PROMPT_OT_OUTPUT_ROOT";

/// Where a run writes: `--out` if given, else `$PROMPT_OT_OUTPUT_ROOT/<name>`,
/// else `runs/<name>`.
pub fn output_dir(out: Option<&Path>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from).join(name),
    }
}

/// Output directory under construction. Files go to `<out>.partial` and
/// the directory is renamed into place by [`Staging::commit`]; dropping it
/// uncommitted removes the partial directory.
pub struct Staging {
    target: PathBuf,
    partial: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn begin(target: &Path, force: bool) -> Result<Self> {
        if target.exists() {
            if !force {
                return Err(Error::config("out", format!("{} already exists (use --force to replace it)", target.display())));
            }
            if target.is_dir() {
                fs::remove_dir_all(target)?;
            } else {
                fs::remove_file(target)?;
            }
        }
        let mut name = target.file_name().ok_or_else(|| Error::config("out", "path has no final component"))?.to_os_string();
        name.push(".partial");
        let partial = target.with_file_name(name);
        if partial.exists() {
            fs::remove_dir_all(&partial)?;
        }
        fs::create_dir_all(&partial)?;
        Ok(Staging {
            target: target.to_path_buf(),
            partial,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Writes `bytes` to `rel` (forward slashes) inside the output.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.partial.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.partial, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.partial);
        }
    }
}

/// Summary statistics of per-prompt maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dispersion {
    pub raw_correlation: f64,
    pub transport_correlation: f64,
    pub softmax_correlation: f64,
    pub raw_spread: f64,
    pub transport_spread: f64,
    pub softmax_spread: f64,
}

impl Dispersion {
    pub fn of(maps: &PromptMaps) -> Self {
        Dispersion {
            raw_correlation: prompt_correlation(&maps.raw),
            transport_correlation: prompt_correlation(&maps.transport),
            softmax_correlation: prompt_correlation(&maps.softmax),
            raw_spread: prompt_spread(&maps.raw),
            transport_spread: prompt_spread(&maps.transport),
            softmax_spread: prompt_spread(&maps.softmax),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mode: Mode,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_pseudo_pixels: usize,
    /// Ground-truth label reads during training; always zero.
    pub gt_reads_during_training: usize,
    pub decoder: SegMetrics,
    pub scoremap: SegMetrics,
    pub ensemble: SegMetrics,
    pub dispersion: Dispersion,
}

/// Everything one seed of `run` produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub scene: ToyScene,
    pub train: TrainResult,
    pub evaluation: Evaluation,
    pub maps: PromptMaps,
    pub summary: SeedSummary,
}

/// Initial parameters for `seed`, drawn from a stream independent of the
/// scene's.
pub fn init_params(cfg: &RunConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    ModelParams::init(cfg.scene.dim, &cfg.model.decoder, &mut rng)
}

/// Generates the scene, trains in the configured mode and evaluates.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let (scene, _) = gen_toy_scene(&cfg.scene, seed)?;
    let scene = match cfg.mode {
        Mode::FullySupervised => scene.with_full_supervision(),
        _ => scene,
    };
    let params = init_params(cfg, seed);
    let train = match cfg.mode {
        Mode::Transductive => train_transductive(&scene, &cfg.model, params, &cfg.train)?,
        Mode::Inductive | Mode::FullySupervised => train_inductive(&scene, &cfg.model, params, &cfg.train)?,
    };
    let gt_reads = scene.gt_reads();
    let (_, evaluation) = evaluate(&scene, &cfg.model, &train.params)?;
    let bundle = adapted_bundle(&scene.pixels, &scene.text, cfg.scene.grid, cfg.scene.prompts, &train.params)?;
    let maps = prompt_maps(&bundle, &cfg.model.score)?;
    let last = train.trace.last();
    let summary = SeedSummary {
        seed,
        mode: cfg.mode,
        steps: train.trace.len(),
        final_loss: last.map(|t| t.loss),
        final_pseudo_pixels: last.map_or(0, |t| t.pseudo_pixels),
        gt_reads_during_training: gt_reads,
        decoder: evaluation.decoder.clone(),
        scoremap: evaluation.scoremap.clone(),
        ensemble: evaluation.ensemble.clone(),
        dispersion: Dispersion::of(&maps),
    };
    Ok(SeedRun {
        scene,
        train,
        evaluation,
        maps,
        summary,
    })
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Input(format!("json: {e}")))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Writes `dir/class{k}_prompt{n}.pgm` plus a `.txt` with the value range
/// for every map.
fn write_map_set(st: &mut Staging, dir: &str, maps: &[Mat], grid: (usize, usize)) -> Result<()> {
    for (k, m) in maps.iter().enumerate() {
        for n in 0..m.cols() {
            let mut buf = Vec::new();
            let (lo, hi) = write_pgm(&mut buf, &m.col(n), grid.0, grid.1)?;
            let stem = format!("{dir}/class{k}_prompt{n}");
            st.write(&format!("{stem}.pgm"), &buf)?;
            st.write(&format!("{stem}.txt"), format!("{lo:.9} {hi:.9}\n").as_bytes())?;
        }
    }
    Ok(())
}

/// Transport maps at `root`, softmax and raw maps in subdirectories.
pub fn write_prompt_maps(st: &mut Staging, root: &str, maps: &PromptMaps, grid: (usize, usize)) -> Result<()> {
    write_map_set(st, root, &maps.transport, grid)?;
    write_map_set(st, &format!("{root}/softmax"), &maps.softmax, grid)?;
    write_map_set(st, &format!("{root}/raw"), &maps.raw, grid)
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

/// `metrics.csv`: one row per seed and path, then the per-path means.
pub fn metrics_csv(mode: Mode, rows: &[SeedSummary]) -> String {
    let mut s = String::from("seed,mode,path,miou_seen,miou_unseen,hiou\n");
    let paths = |r: &SeedSummary| [("decoder", r.decoder.clone()), ("scoremap", r.scoremap.clone()), ("ensemble", r.ensemble.clone())];
    for r in rows {
        for (name, m) in paths(r) {
            let _ = writeln!(s, "{},{mode},{name},{},{},{}", r.seed, fmt_metric(m.miou_seen), fmt_metric(m.miou_unseen), fmt_metric(m.hiou));
        }
    }
    for (i, name) in ["decoder", "scoremap", "ensemble"].iter().enumerate() {
        let mean = |f: fn(&SegMetrics) -> f64| rows.iter().map(|r| f(&paths(r)[i].1)).sum::<f64>() / rows.len() as f64;
        let _ = writeln!(
            s,
            "mean,{mode},{name},{},{},{}",
            fmt_metric(mean(|m| m.miou_seen)),
            fmt_metric(mean(|m| m.miou_unseen)),
            fmt_metric(mean(|m| m.hiou))
        );
    }
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    files: Vec<String>,
}

fn finish(mut st: Staging, command: &'static str, cfg: &RunConfig, checkpoint: Option<String>) -> Result<PathBuf> {
    let mut files = st.files().to_vec();
    files.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: cfg,
        checkpoint,
        files,
    };
    st.write("manifest.json", &json(&manifest)?)?;
    st.commit()
}

/// Trains every seed and writes the run directory. Returns the directory
/// and the per-seed summaries.
pub fn run(cfg: &RunConfig, target: &Path, force: bool) -> Result<(PathBuf, Vec<SeedSummary>)> {
    cfg.validate()?;
    let mut st = Staging::begin(target, force)?;
    let mut rows = Vec::with_capacity(cfg.seeds.0.len());
    for &seed in &cfg.seeds.0 {
        let r = run_seed(cfg, seed)?;
        let dir = seed_dir(seed);
        st.write(&format!("{dir}/summary.json"), &json(&r.summary)?)?;
        let mut trace = Vec::new();
        write_trace_csv(&mut trace, &r.train.trace)?;
        st.write(&format!("{dir}/trace.csv"), &trace)?;
        if cfg.export.scoremaps {
            write_prompt_maps(&mut st, &format!("{dir}/scoremaps"), &r.maps, cfg.scene.grid)?;
        }
        if cfg.export.checkpoints {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &r.train.params, seed)?;
            st.write(&format!("{dir}/checkpoint.bin"), &buf)?;
        }
        if cfg.export.scenes {
            let mut buf = Vec::new();
            write_scene(&mut buf, &r.scene)?;
            st.write(&format!("{dir}/scene.bin"), &buf)?;
        }
        rows.push(r.summary);
    }
    st.write("metrics.csv", metrics_csv(cfg.mode, &rows).as_bytes())?;
    Ok((finish(st, "run", cfg, None)?, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportSummary {
    pub seed: u64,
    pub trained: bool,
    pub dispersion: Dispersion,
}

/// Writes scenes and per-prompt maps without training. With a checkpoint
/// the maps use its adapter and relationship descriptor; otherwise the
/// planted embeddings are used directly.
pub fn export(cfg: &RunConfig, target: &Path, force: bool, checkpoint: Option<&Path>) -> Result<(PathBuf, Vec<ExportSummary>)> {
    cfg.validate()?;
    let params = match checkpoint {
        Some(p) => {
            let (params, _) = load_checkpoint(p)?;
            if params.input_dim() != cfg.scene.dim {
                return Err(Error::config("checkpoint", format!("trained for D = {}, scene has D = {}", params.input_dim(), cfg.scene.dim)));
            }
            Some(params)
        }
        None => None,
    };
    let mut st = Staging::begin(target, force)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds.0 {
        let (scene, planted) = gen_toy_scene(&cfg.scene, seed)?;
        let bundle: EmbeddingBundle = match &params {
            Some(p) => adapted_bundle(&scene.pixels, &scene.text, cfg.scene.grid, cfg.scene.prompts, p)?,
            None => planted,
        };
        let maps = prompt_maps(&bundle, &cfg.model.score)?;
        let dir = seed_dir(seed);
        let mut buf = Vec::new();
        write_scene(&mut buf, &scene)?;
        st.write(&format!("{dir}/scene.bin"), &buf)?;
        write_prompt_maps(&mut st, &format!("{dir}/scoremaps"), &maps, cfg.scene.grid)?;
        let row = ExportSummary {
            seed,
            trained: params.is_some(),
            dispersion: Dispersion::of(&maps),
        };
        st.write(&format!("{dir}/summary.json"), &json(&row)?)?;
        rows.push(row);
    }
    let ck = checkpoint.map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()));
    Ok((finish(st, "export", cfg, ck)?, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::SeedList;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.seeds = SeedList(vec![0, 1]);
        c.train.steps = 4;
        c.scene.grid = (4, 4);
        c.scene.image = (8, 8);
        c.sync();
        c
    }

    #[test]
    fn existing_output_needs_force() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("r");
        let cfg = tiny();
        run(&cfg, &out, false).unwrap();
        assert!(matches!(run(&cfg, &out, false), Err(Error::Config { .. })));
        run(&cfg, &out, true).unwrap();
        assert!(!tmp.path().join("r.partial").exists());
    }

    #[test]
    fn failed_run_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("r");
        let mut cfg = tiny();
        cfg.train.optimizer.lr = 1e12;
        cfg.train.steps = 50;
        // either diverges or finishes; in both cases no partial directory survives
        let res = run(&cfg, &out, false);
        assert!(!tmp.path().join("r.partial").exists());
        assert_eq!(res.is_ok(), out.exists());
    }

    #[test]
    fn metrics_csv_has_means() {
        let tmp = tempfile::tempdir().unwrap();
        let (dir, rows) = run(&tiny(), &tmp.path().join("r"), false).unwrap();
        let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * rows.len() + 3);
        assert!(csv.lines().last().unwrap().starts_with("mean,transductive,ensemble,"));
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["seeds"], serde_json::json!([0, 1]));
        assert!(manifest["files"].as_array().unwrap().iter().any(|f| f == "seed-1/trace.csv"));
    }

    #[test]
    fn output_dir_resolution() {
        assert_eq!(output_dir(Some(Path::new("/x/y")), "n"), PathBuf::from("/x/y"));
    }
}

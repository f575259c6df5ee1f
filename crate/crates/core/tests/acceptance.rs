//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use prompt_ot::checks::{self, CheckOutcome};
use prompt_ot::cli::{export, run_seed, Mode, RunConfig, SeedList};
use prompt_ot::prompt_align::prompt_correlation;
use prompt_ot::segpipe::AttentionKind;
use prompt_ot::{Mat, Result};

const SEEDS: u64 = 10;

struct Line {
    passed: bool,
    text: String,
    details: Vec<String>,
}

fn from_checks(label: &str, outcomes: &[CheckOutcome], extra: Option<(bool, String)>) -> Line {
    let mut passed = outcomes.iter().all(|o| o.passed);
    let mut summary: Vec<String> = outcomes.iter().map(|o| format!("{}={:.3e}/{:.0e}", o.name, o.measured, o.tolerance)).collect();
    if let Some((ok, s)) = extra {
        passed &= ok;
        summary.push(s);
    }
    Line {
        passed,
        text: format!("{label}: {}", summary.join(", ")),
        details: outcomes.iter().map(CheckOutcome::line).collect(),
    }
}

fn base_config() -> RunConfig {
    let mut c = RunConfig {
        seeds: SeedList((0..SEEDS).collect()),
        ..RunConfig::default()
    };
    c.sync();
    c
}

fn criterion_1() -> Result<Line> {
    Ok(from_checks("[1] sinkhorn feasibility", &checks::sinkhorn_feasibility(SEEDS)?, None))
}

fn criterion_2() -> Result<Line> {
    Ok(from_checks("[2] one-step softmax reduction", &[checks::softmax_reduction(100)?], None))
}

fn criterion_3() -> Result<Line> {
    Ok(from_checks("[3] exact-LP agreement at eps 0.01", &checks::lp_oracle(20)?, None))
}

fn criterion_4() -> Result<Line> {
    let t0 = Instant::now();
    let mut all = vec![checks::grad_sinkhorn(SEEDS, 1e-4)?, checks::grad_mps(SEEDS, 1e-4)?];
    all.extend(checks::grad_attention(SEEDS, 1e-4)?);
    all.extend(checks::grad_losses(SEEDS, 1e-5)?);
    let secs = t0.elapsed().as_secs_f64();
    Ok(from_checks("[4] gradient suite", &all, Some((secs < 60.0, format!("runtime={secs:.1}s/60s")))))
}

fn criterion_5() -> Line {
    from_checks("[5] reported hIoU pairs", &[checks::hiou_reported()], None)
}

/// Paired per-seed differences `b - a`: (mean, count of non-negative).
fn paired(a: &[f64], b: &[f64]) -> (f64, usize) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    (d.iter().sum::<f64>() / d.len() as f64, d.iter().filter(|&&v| v >= 0.0).count())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

struct Runs {
    transport_inductive: Vec<prompt_ot::cli::SeedSummary>,
}

/// Inductive, as in the attention ablation being mirrored.
fn criterion_6(runs: &mut Runs) -> Result<Line> {
    let t0 = Instant::now();
    let mut cfg = base_config();
    cfg.mode = Mode::Inductive;
    let mut soft_cfg = cfg.clone();
    soft_cfg.model.decoder.attention = AttentionKind::Softmax;
    let (mut m, mut s) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds.0 {
        let a = run_seed(&cfg, seed)?.summary;
        let b = run_seed(&soft_cfg, seed)?.summary;
        m.push(a.decoder.hiou);
        s.push(b.decoder.hiou);
        runs.transport_inductive.push(a);
    }
    let secs = t0.elapsed().as_secs_f64();
    let (mean, wins) = paired(&s, &m);
    let n = m.len();
    Ok(Line {
        passed: 2 * wins > n && mean > 0.0 && secs < 300.0,
        text: format!("[6] decoder hIoU (inductive), transport vs softmax attention: mean gain={mean:+.4}, non-negative on {wins}/{n} seeds, runtime={secs:.1}s/300s"),
        details: vec![format!("transport: {}", fmt_list(&m)), format!("softmax:   {}", fmt_list(&s))],
    })
}

fn criterion_7(runs: &Runs) -> Result<Line> {
    let cfg = base_config();
    assert_eq!(cfg.mode, Mode::Transductive);
    let (mut te, mut td) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds.0 {
        let r = run_seed(&cfg, seed)?.summary;
        te.push(r.ensemble.miou_unseen);
        td.push(r.decoder.miou_unseen);
    }
    let ie: Vec<f64> = runs.transport_inductive.iter().map(|r| r.ensemble.miou_unseen).collect();
    let id: Vec<f64> = runs.transport_inductive.iter().map(|r| r.decoder.miou_unseen).collect();
    let (mean, wins) = paired(&ie, &te);
    let (dmean, dwins) = paired(&id, &td);
    Ok(Line {
        passed: mean > 0.0,
        text: format!(
            "[7] unseen mIoU, transductive vs inductive (ensemble): mean gain={mean:+.4}, non-negative on {wins}/{} seeds",
            te.len()
        ),
        details: vec![
            format!("inductive ensemble:    {}", fmt_list(&ie)),
            format!("transductive ensemble: {}", fmt_list(&te)),
            format!("decoder path alone: mean gain={dmean:+.4}, non-negative on {dwins}/{}", td.len()),
        ],
    })
}

/// Reads a binary PGM written by the exporter.
fn read_pgm(path: &Path) -> Vec<f64> {
    let bytes = std::fs::read(path).unwrap();
    let mut fields = 0;
    let mut i = 0;
    while fields < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    bytes[i + 1..].iter().map(|&b| f64::from(b)).collect()
}

fn exported_maps(dir: &Path, k: usize, n: usize) -> Vec<Mat> {
    (0..k)
        .map(|c| {
            let cols: Vec<Vec<f64>> = (0..n).map(|p| read_pgm(&dir.join(format!("class{c}_prompt{p}.pgm")))).collect();
            Mat::from_fn(cols[0].len(), n, |i, j| cols[j][i])
        })
        .collect()
}

fn criterion_8() -> Result<Line> {
    let cfg = base_config();
    let tmp = tempfile::tempdir()?;
    let (dir, _) = export(&cfg, &tmp.path().join("maps"), false, None)?;
    let (k, n) = (cfg.scene.classes, cfg.scene.prompts);
    let (mut t, mut s) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds.0 {
        let root = dir.join(format!("seed-{seed}/scoremaps"));
        t.push(prompt_correlation(&exported_maps(&root, k, n)));
        s.push(prompt_correlation(&exported_maps(&root.join("softmax"), k, n)));
    }
    let lower = t.iter().zip(&s).filter(|(a, b)| a < b).count();
    Ok(Line {
        passed: 2 * lower > t.len(),
        text: format!("[8] prompt-map correlation, transport below softmax on {lower}/{} seeds (exported PGMs)", t.len()),
        details: vec![format!("transport: {}", fmt_list(&t)), format!("softmax:   {}", fmt_list(&s))],
    })
}

fn criterion_9() -> Result<Line> {
    let tmp = tempfile::tempdir()?;
    let bin = env!("CARGO_BIN_EXE_prompt-ot");
    let run = |name: &str| {
        let st = Command::new(bin)
            .args(["run", "--seeds", "0..1", "--steps", "60", "--export-scoremaps", "--out"])
            .arg(tmp.path().join(name))
            .output()
            .expect("spawn prompt-ot");
        st.status.success()
    };
    let ok = run("a") && run("b");
    let mut csvs = Vec::new();
    for rel in ["metrics.csv", "seed-0/trace.csv", "seed-1/trace.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(rel)).unwrap_or_default();
        let b = std::fs::read(tmp.path().join("b").join(rel)).unwrap_or_else(|_| vec![1]);
        csvs.push((rel, !a.is_empty() && a == b));
    }
    let same = csvs.iter().all(|c| c.1);
    Ok(Line {
        passed: ok && same,
        text: format!("[9] determinism: two CLI runs, {} of {} CSV files byte-identical", csvs.iter().filter(|c| c.1).count(), csvs.len()),
        details: csvs.iter().map(|(r, s)| format!("{r}: {}", if *s { "identical" } else { "DIFFERENT" })).collect(),
    })
}

fn report(line: Result<Line>, failed: &mut usize) {
    match line {
        Ok(l) => {
            println!("{} {}", if l.passed { "PASS" } else { "FAIL" }, l.text);
            for d in &l.details {
                println!("       {d}");
            }
            if !l.passed {
                *failed += 1;
            }
        }
        Err(e) => {
            println!("FAIL error: {e}");
            *failed += 1;
        }
    }
}

fn main() {
    let t0 = Instant::now();
    let mut failed = 0;
    report(criterion_1(), &mut failed);
    report(criterion_2(), &mut failed);
    report(criterion_3(), &mut failed);
    report(criterion_4(), &mut failed);
    report(Ok(criterion_5()), &mut failed);
    let mut runs = Runs { transport_inductive: Vec::new() };
    report(criterion_6(&mut runs), &mut failed);
    report(criterion_7(&runs), &mut failed);
    report(criterion_8(), &mut failed);
    report(criterion_9(), &mut failed);
    println!("acceptance: {} of 9 criteria passed in {:.1}s", 9 - failed, t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

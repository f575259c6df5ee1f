//! Full-batch training on one scene, inductive and transductive.
//!
//! Inductive training sees only seen-class text rows and seen-class labels;
//! pixels of withheld classes are ignored. Transductive training runs the
//! inductive loop for the first half of the steps, then labels ignored
//! pixels with the model's own confident unseen-class predictions and
//! trains on those as well. Pseudo-labels are refreshed every
//! `pseudo.every` steps.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::segpipe::loss::{loss_total, LossWeights, Targets};
use crate::segpipe::metrics::{metrics, SegMetrics};
use crate::segpipe::model::{class_rows, forward_graph, predict, upsampler, ModelConfig, ModelParams, ParamVars, SegOutput};
use crate::segpipe::optim::{AdamW, AdamWConfig};
use crate::segpipe::scene::ToyScene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Minimum ensemble probability for a pseudo-label.
    pub threshold: f64,
    /// Steps between refreshes during the self-training half.
    pub every: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig { threshold: 0.5, every: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub pseudo: PseudoLabelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            pseudo: PseudoLabelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.pseudo.threshold) {
            return Err(Error::config("pseudo.threshold", "must lie in [0, 1]"));
        }
        if self.pseudo.every == 0 {
            return Err(Error::config("pseudo.every", "must be positive"));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub decoder_loss: f64,
    pub scoremap_loss: f64,
    /// Classes with a loss channel this step.
    pub active_classes: usize,
    /// Pixels carrying a pseudo-label this step.
    pub pseudo_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

fn check_inputs(scene: &ToyScene, model: &ModelConfig, params: &ModelParams, cfg: &TrainConfig) -> Result<()> {
    model.validate()?;
    cfg.validate()?;
    params.check_shapes()?;
    let sc = &scene.config;
    if model.decoder.prompts != sc.prompts || model.decoder.classes != sc.classes {
        return Err(Error::config("decoder.prompts", "decoder prompt/class counts must match the scene"));
    }
    if params.input_dim() != sc.dim || params.decoder.layers.len() != model.decoder.layers || params.decoder.w_text.cols() != model.decoder.d {
        return Err(Error::shape("train", format!("parameters for D = {}, d = {}", sc.dim, model.decoder.d), "mismatched parameters"));
    }
    Ok(())
}

/// Pseudo-labels for ignored pixels: the most probable withheld class under
/// the ensemble when its probability reaches `threshold`. Labelled pixels
/// keep their labels.
pub fn pseudo_labels(base: &[Option<usize>], ensemble: &Mat, seen: &[bool], threshold: f64) -> Vec<Option<usize>> {
    base.iter()
        .enumerate()
        .map(|(p, &t)| {
            t.or_else(|| {
                let mut best: Option<(f64, usize)> = None;
                for c in (0..seen.len()).filter(|&c| !seen[c]) {
                    let v = ensemble[(p, c)];
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, c));
                    }
                }
                best.filter(|&(v, _)| v >= threshold).map(|(_, c)| c)
            })
        })
        .collect()
}

fn train_loop(scene: &ToyScene, model: &ModelConfig, mut params: ModelParams, cfg: &TrainConfig, self_train: bool) -> Result<TrainResult> {
    check_inputs(scene, model, &params, cfg)?;
    let sc = &scene.config;
    let n = sc.prompts;
    let up = upsampler(sc.grid, sc.image)?;
    let base = scene.training_targets().to_vec();
    let labelled = |labels: &[Option<usize>], c: usize| scene.seen[c] || labels.contains(&Some(c));
    let mut labels = base.clone();
    let mut channels: Vec<usize> = (0..sc.classes).filter(|&c| labelled(&base, c)).collect();
    let mut pseudo = 0usize;
    let mut opt = AdamW::new(cfg.optimizer)?;
    let half = cfg.steps / 2;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if self_train && step >= half && (step - half).is_multiple_of(cfg.pseudo.every) {
            let out = predict(&scene.pixels, &scene.text, sc.grid, sc.image, model, &params)?;
            labels = pseudo_labels(&base, &out.ensemble_pred, &scene.seen, cfg.pseudo.threshold);
            pseudo = labels.iter().zip(&base).filter(|(l, b)| l.is_some() && b.is_none()).count();
            channels = (0..sc.classes).filter(|&c| labelled(&labels, c)).collect();
        }
        let text = class_rows(&scene.text, &channels, n);
        let targets = Targets::from_labels(&labels, &channels);

        let tape = Tape::new();
        let pv = ParamVars::bind(&tape, &params);
        let f = forward_graph(&tape, &pv, &scene.pixels, &text, model)?;
        let dec = f.decoder.left_mul_const(up.clone());
        let sco = f.scoremap.left_mul_const(up.clone());
        let lt = match loss_total(&dec.value(), &sco.value(), &targets, &cfg.loss) {
            Ok(lt) if lt.value.is_finite() => lt,
            Ok(lt) => return Err(Error::Diverged { step, loss: lt.value }),
            Err(Error::Evaluation(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        // the loss gradient with respect to each logit map is known, so a
        // linear surrogate carries it back through the graph
        let surrogate = dec
            .mul(tape.var(lt.decoder_grad.clone()))
            .sum()
            .add(sco.mul(tape.var(lt.scoremap_grad.clone())).sum());
        let grads = tape.backward(surrogate, None);
        let g: Vec<Mat> = pv.vars().iter().map(|&v| grads.of(v)).collect();
        if g.iter().any(|m| !m.is_finite()) {
            return Err(Error::Diverged { step, loss: lt.value });
        }
        opt.step(&mut params.tensors_mut(), &g)?;
        let seg = |p: &crate::segpipe::loss::LossParts| cfg.loss.lambda_ce * p.ce + cfg.loss.lambda_focal * p.focal + cfg.loss.lambda_dice * p.dice;
        trace.push(TraceRow {
            step,
            loss: lt.value,
            decoder_loss: seg(&lt.decoder),
            scoremap_loss: seg(&lt.scoremap),
            active_classes: channels.len(),
            pseudo_pixels: pseudo,
        });
    }
    Ok(TrainResult { params, trace })
}

/// Trains on seen-class labels only.
pub fn train_inductive(scene: &ToyScene, model: &ModelConfig, params: ModelParams, cfg: &TrainConfig) -> Result<TrainResult> {
    train_loop(scene, model, params, cfg, false)
}

/// Inductive first half, pseudo-label self-training second half.
pub fn train_transductive(scene: &ToyScene, model: &ModelConfig, params: ModelParams, cfg: &TrainConfig) -> Result<TrainResult> {
    train_loop(scene, model, params, cfg, true)
}

/// Metrics of each prediction path against the scene's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub decoder: SegMetrics,
    pub scoremap: SegMetrics,
    pub ensemble: SegMetrics,
}

/// Predicts every class and scores all three outputs. Reads ground truth.
pub fn evaluate(scene: &ToyScene, model: &ModelConfig, params: &ModelParams) -> Result<(SegOutput, Evaluation)> {
    let sc = &scene.config;
    let out = predict(&scene.pixels, &scene.text, sc.grid, sc.image, model, params)?;
    let truth = scene.ground_truth();
    let eval = Evaluation {
        decoder: metrics(&out.decoder_pred, truth, &scene.seen)?,
        scoremap: metrics(&out.scoremap_pred, truth, &scene.seen)?,
        ensemble: metrics(&out.ensemble_pred, truth, &scene.seen)?,
    };
    Ok((out, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segpipe::model::DecoderConfig;
    use crate::segpipe::scene::{gen_toy_scene, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(noise: f64, seed: u64) -> (ToyScene, ModelConfig, ModelParams) {
        let sc = SceneConfig { noise, ..SceneConfig::default() };
        let (scene, _) = gen_toy_scene(&sc, seed).unwrap();
        let mc = ModelConfig {
            decoder: DecoderConfig { prompts: sc.prompts, classes: sc.classes, ..DecoderConfig::default() },
            ..ModelConfig::default()
        };
        let p = ModelParams::init(sc.dim, &mc.decoder, &mut ChaCha8Rng::seed_from_u64(seed + 1000));
        (scene, mc, p)
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (scene, mc, p) = setup(0.1, 0);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let r = train_inductive(&scene, &mc, p.clone(), &cfg).unwrap();
        assert_eq!(r.params, p);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn training_never_reads_ground_truth() {
        let (scene, mc, p) = setup(0.2, 1);
        let cfg = TrainConfig { steps: 20, pseudo: PseudoLabelConfig { threshold: 0.5, every: 5 }, ..TrainConfig::default() };
        train_inductive(&scene, &mc, p.clone(), &cfg).unwrap();
        train_transductive(&scene, &mc, p, &cfg).unwrap();
        assert_eq!(scene.gt_reads(), 0);
    }

    #[test]
    fn unreachable_threshold_matches_inductive() {
        let (scene, mc, p) = setup(0.2, 2);
        let cfg = TrainConfig { steps: 12, pseudo: PseudoLabelConfig { threshold: 1.0, every: 3 }, ..TrainConfig::default() };
        let a = train_inductive(&scene, &mc, p.clone(), &cfg).unwrap();
        let b = train_transductive(&scene, &mc, p, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn pseudo_labels_keep_given_labels() {
        let base = vec![Some(0), None, None, Some(1)];
        let ens = Mat::from_rows(&[[0.1, 0.1, 0.99], [0.1, 0.1, 0.95], [0.9, 0.1, 0.2], [0.0, 0.0, 1.0]]);
        let l = pseudo_labels(&base, &ens, &[true, true, false], 0.9);
        assert_eq!(l, vec![Some(0), Some(2), None, Some(1)]);
    }

    #[test]
    fn divergence_is_reported() {
        let (scene, mc, mut p) = setup(0.1, 3);
        p.decoder.out_scale[(0, 0)] = f64::INFINITY;
        let r = train_inductive(&scene, &mc, p, &TrainConfig { steps: 3, ..TrainConfig::default() });
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })));
    }

    fn equal_grid(noise: f64, seed: u64) -> (ToyScene, ModelConfig, ModelParams) {
        let sc = SceneConfig { noise, grid: (8, 8), image: (8, 8), ..SceneConfig::default() };
        let (scene, _) = gen_toy_scene(&sc, seed).unwrap();
        let mc = ModelConfig::default();
        let p = ModelParams::init(sc.dim, &mc.decoder, &mut ChaCha8Rng::seed_from_u64(seed));
        (scene, mc, p)
    }

    // Feature grid equals label grid here: bilinear upsampling alone caps
    // IoU well below 0.95 on an 8 -> 16 grid.
    #[test]
    fn noise_free_sanity_run() {
        let (mut seen, mut h) = (0.0, 0.0);
        for seed in 0..5 {
            let (scene, mc, p) = equal_grid(0.0, seed);
            let r = train_inductive(&scene, &mc, p, &TrainConfig::default()).unwrap();
            let (_, e) = evaluate(&scene, &mc, &r.params).unwrap();
            seen += e.ensemble.miou_seen / 5.0;
            h += e.ensemble.hiou / 5.0;
        }
        assert!(seen >= 0.95, "seen mIoU {seen}");
        assert!(h >= 0.95, "hIoU {h}");
    }

    #[test]
    fn loss_moving_average_decreases() {
        for seed in 0..5 {
            let (scene, mc, p) = equal_grid(0.15, seed);
            let r = train_inductive(&scene, &mc, p, &TrainConfig::default()).unwrap();
            let loss: Vec<f64> = r.trace.iter().map(|t| t.loss).collect();
            let ma: Vec<f64> = loss.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
            for (i, w) in ma.windows(2).enumerate() {
                assert!(w[1] <= w[0], "seed {seed}: moving average rises at step {}", i + 20);
            }
        }
    }
}

//! Trainable model: pixel adapter, relationship descriptor, the score-map
//! path and the attention decoder.
//!
//! Two prediction paths share the adapted pixels and refined text rows:
//! the score-map path refines cosine scores with per-class transport and
//! maps them to logits through a learned scalar scale and bias; the decoder
//! path runs `layers` pre-norm blocks over the `K*N` text stream and reads
//! the mask logits of the last block's attention.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{mpsa_projected, prompt_softmax_projected, upsample_operator, MpsaConfig};
use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::ot::SinkhornConfig;
use crate::prompt_align::{mps_graph, relationship_descriptor_graph, score_map_graph, Affine, EmbeddingBundle};

/// Attention normalisation inside the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Per-class transport plans between pixels and prompts.
    Mpsa,
    /// Independent softmax over pixels per query.
    Softmax,
}

/// Decoder shape and attention settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d: usize,
    pub ffn_mult: usize,
    pub prompts: usize,
    pub classes: usize,
    pub attention: AttentionKind,
    pub mpsa: MpsaConfig,
    /// Initial query/key maps are `qk_init * I` (plus small noise).
    pub qk_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            d: 32,
            ffn_mult: 2,
            prompts: 3,
            classes: 6,
            attention: AttentionKind::Mpsa,
            mpsa: MpsaConfig::default(),
            qk_init: 32f64.powf(-0.25),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("decoder.layers", "must be at least 1"));
        }
        if self.d < 4 {
            return Err(Error::config("decoder.d", "must be at least 4"));
        }
        if !(self.qk_init > 0.0 && self.qk_init.is_finite()) {
            return Err(Error::config("decoder.qk_init", "must be positive and finite"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("decoder.ffn_mult", "must be positive"));
        }
        if self.prompts == 0 || self.classes == 0 {
            return Err(Error::config("decoder.prompts", "prompt and class counts must be positive"));
        }
        self.mpsa.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("decoder.mpsa.{field}"), reason),
            other => other,
        })
    }
}

/// Everything that shapes a forward pass besides the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    /// Transport settings of the score-map path.
    pub score: SinkhornConfig,
    /// Weight of the decoder path in the ensemble.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: DecoderConfig::default(),
            score: SinkhornConfig::default(),
            lambda: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.score.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("score.{field}"), reason),
            other => other,
        })?;
        self.decoder.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Decoder parameters (trained only through the decoder loss).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `D x d` projection of the text stream.
    pub w_text: Mat,
    /// `D x d` projection of the pixel memory.
    pub w_pix: Mat,
    pub layers: Vec<LayerParams>,
    pub out_scale: Mat,
    pub out_bias: Mat,
}

/// Parameters shared by both paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Pixel adapter `x · A + a`.
    pub adapter: Affine,
    /// Relationship-descriptor projection `2D -> D`.
    pub relation: Affine,
    pub score_scale: Mat,
    pub score_bias: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

fn perturbed_identity<R: Rng + ?Sized>(n: usize, scale: f64, std: f64, rng: &mut R) -> Mat {
    let mut m = Mat::random_normal(n, n, std, rng);
    for i in 0..n {
        m[(i, i)] += scale;
    }
    m
}

/// `rows x cols` with orthonormal columns when `cols <= rows`.
fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let mut cs: Vec<Vec<f64>> = (0..cols).map(|_| (0..rows).map(|_| rng.sample(StandardNormal)).collect()).collect();
    for i in 0..cols {
        if i < rows {
            for j in 0..i {
                let p: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| a * b).sum();
                let prev = cs[j].clone();
                cs[i].iter_mut().zip(&prev).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = cs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        cs[i].iter_mut().for_each(|x| *x /= n);
    }
    Mat::from_fn(rows, cols, |r, c| cs[c][r])
}

impl ModelParams {
    /// Initialisation: identity adapter, text-passthrough descriptor, a
    /// shared orthonormal projection for text and pixels, near-identity
    /// query/key maps and near-zero residual branches.
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let f = cfg.d * cfg.ffn_mult;
        let proj = orthonormal_columns(dim, d, rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: perturbed_identity(d, cfg.qk_init, 0.02 * cfg.qk_init, rng),
                wk: perturbed_identity(d, cfg.qk_init, 0.02 * cfg.qk_init, rng),
                wv: Mat::random_normal(d, d, 1.0 / (d as f64).sqrt(), rng),
                wo: Mat::random_normal(d, d, 0.02, rng),
                w1: Mat::random_normal(d, f, 1.0 / (d as f64).sqrt(), rng),
                b1: Mat::zeros(1, f),
                w2: Mat::random_normal(f, d, 0.02, rng),
                b2: Mat::zeros(1, d),
            })
            .collect();
        ModelParams {
            encoder: EncoderParams {
                adapter: Affine::linear(Mat::identity(dim)),
                relation: Affine::passthrough_second(dim),
                score_scale: Mat::filled(1, 1, 10.0),
                score_bias: Mat::filled(1, 1, -3.0),
            },
            decoder: DecoderParams {
                w_text: proj.clone(),
                w_pix: proj,
                layers,
                out_scale: Mat::filled(1, 1, 8.0 / (d as f64 * cfg.qk_init * cfg.qk_init)),
                out_bias: Mat::filled(1, 1, -2.0),
            },
        }
    }

    /// All tensors in a fixed order (the optimizer's view).
    pub fn tensors(&self) -> Vec<&Mat> {
        let e = &self.encoder;
        let dc = &self.decoder;
        let mut v = vec![
            &e.adapter.weight,
            &e.adapter.bias,
            &e.relation.weight,
            &e.relation.bias,
            &e.score_scale,
            &e.score_bias,
            &dc.w_text,
            &dc.w_pix,
            &dc.out_scale,
            &dc.out_bias,
        ];
        for l in &dc.layers {
            v.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let e = &mut self.encoder;
        let dc = &mut self.decoder;
        let mut v = vec![
            &mut e.adapter.weight,
            &mut e.adapter.bias,
            &mut e.relation.weight,
            &mut e.relation.bias,
            &mut e.score_scale,
            &mut e.score_bias,
            &mut dc.w_text,
            &mut dc.w_pix,
            &mut dc.out_scale,
            &mut dc.out_bias,
        ];
        for l in &mut dc.layers {
            v.extend([&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2]);
        }
        v
    }

    /// Rebuilds parameters from tensors in [`tensors`](Self::tensors) order.
    pub fn from_tensors(mut ts: Vec<Mat>, layers: usize) -> Result<Self> {
        if ts.len() != 10 + 8 * layers {
            return Err(Error::Format(format!("expected {} tensors, found {}", 10 + 8 * layers, ts.len())));
        }
        let rest = ts.split_off(10);
        let mut it = ts.into_iter();
        let mut next = || it.next().unwrap();
        let adapter = Affine::new(next(), next())?;
        let relation = Affine::new(next(), next())?;
        let (score_scale, score_bias, w_text, w_pix, out_scale, out_bias) = (next(), next(), next(), next(), next(), next());
        let mut rest = rest.into_iter();
        let layers = (0..layers)
            .map(|_| {
                let mut n = || rest.next().unwrap();
                LayerParams {
                    wq: n(),
                    wk: n(),
                    wv: n(),
                    wo: n(),
                    w1: n(),
                    b1: n(),
                    w2: n(),
                    b2: n(),
                }
            })
            .collect();
        let p = ModelParams {
            encoder: EncoderParams {
                adapter,
                relation,
                score_scale,
                score_bias,
            },
            decoder: DecoderParams {
                w_text,
                w_pix,
                layers,
                out_scale,
                out_bias,
            },
        };
        p.check_shapes()?;
        Ok(p)
    }

    /// Checks internal consistency of all tensor shapes.
    pub fn check_shapes(&self) -> Result<()> {
        let dim = self.encoder.adapter.weight.rows();
        let d = self.decoder.w_text.cols();
        let bad = |what: &str| Err(Error::shape("ModelParams", what.to_string(), "inconsistent tensor"));
        let e = &self.encoder;
        if e.adapter.weight.shape() != (dim, dim) || e.relation.weight.shape() != (2 * dim, dim) {
            return bad("square adapter and 2D x D relation");
        }
        for s in [&e.score_scale, &e.score_bias, &self.decoder.out_scale, &self.decoder.out_bias] {
            if s.shape() != (1, 1) {
                return bad("1x1 scalars");
            }
        }
        if self.decoder.w_text.shape() != (dim, d) || self.decoder.w_pix.shape() != (dim, d) {
            return bad("D x d projections");
        }
        for l in &self.decoder.layers {
            let f = l.w1.cols();
            if [&l.wq, &l.wk, &l.wv, &l.wo].iter().any(|m| m.shape() != (d, d))
                || l.w1.rows() != d
                || l.b1.shape() != (1, f)
                || l.w2.shape() != (f, d)
                || l.b2.shape() != (1, d)
            {
                return bad("decoder layer shapes");
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.adapter.weight.rows()
    }
}

struct LayerVars<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

/// Parameters bound to a tape, in [`ModelParams::tensors`] order.
pub struct ParamVars<'t> {
    all: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn bind(tape: &'t Tape, params: &ModelParams) -> Self {
        ParamVars {
            all: params.tensors().into_iter().map(|m| tape.var(m.clone())).collect(),
        }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.all
    }

    fn layer(&self, i: usize) -> LayerVars<'t> {
        let b = 10 + 8 * i;
        let a = &self.all;
        LayerVars {
            wq: a[b],
            wk: a[b + 1],
            wv: a[b + 2],
            wo: a[b + 3],
            w1: a[b + 4],
            b1: a[b + 5],
            w2: a[b + 6],
            b2: a[b + 7],
        }
    }

    fn layers(&self) -> usize {
        (self.all.len() - 10) / 8
    }
}

/// Logit maps of both paths for one forward pass.
pub struct ForwardVars<'t> {
    /// `M x C` decoder logits on the feature grid.
    pub decoder: Var<'t>,
    /// `M x C` score-map logits on the feature grid.
    pub scoremap: Var<'t>,
    /// Refined text rows `C*N x D`.
    pub text: Var<'t>,
    /// Adapted pixels `M x D`.
    pub pixels: Var<'t>,
    /// Cosine score map `M x C*N` before refinement.
    pub score: Var<'t>,
}

/// Decoder over already-refined text rows and adapted pixels; returns the
/// `M x C` mask logits of the last block (before the output affine).
pub fn decoder_graph<'t>(text: Var<'t>, pixels: Var<'t>, pv: &ParamVars<'t>, cfg: &DecoderConfig, classes: usize) -> Result<Var<'t>> {
    let a = pv.vars();
    let (w_text, w_pix) = (a[6], a[7]);
    let mem = pixels.matmul(w_pix).layer_norm_rows();
    let mut x = text.matmul(w_text);
    let mut mask = None;
    for i in 0..pv.layers() {
        let l = pv.layer(i);
        let h = x.layer_norm_rows();
        let (q, k, v) = (h.matmul(l.wq), mem.matmul(l.wk), mem.matmul(l.wv));
        let (ctx, m) = match cfg.attention {
            AttentionKind::Mpsa => {
                let (c, m, _) = mpsa_projected(q, k, v, classes, cfg.prompts, &cfg.mpsa)?;
                (c, m)
            }
            AttentionKind::Softmax => prompt_softmax_projected(q, k, v, classes, cfg.prompts, cfg.mpsa.epsilon),
        };
        x = x.add(ctx.matmul(l.wo));
        let ff = x.layer_norm_rows().matmul(l.w1).add_row(l.b1).gelu().matmul(l.w2).add_row(l.b2);
        x = x.add(ff);
        mask = Some(m);
    }
    Ok(mask.expect("at least one layer"))
}

/// Both paths on the feature grid for the classes whose text rows are given.
pub fn forward_graph<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    pixels: &Mat,
    text: &Mat,
    cfg: &ModelConfig,
) -> Result<ForwardVars<'t>> {
    let n = cfg.decoder.prompts;
    if !text.rows().is_multiple_of(n) || text.rows() == 0 {
        return Err(Error::shape("forward", format!("a multiple of {n} text rows"), format!("{}", text.rows())));
    }
    let classes = text.rows() / n;
    let m = pixels.rows() as f64;
    let a = pv.vars();
    let px = tape.var(pixels.clone()).matmul(a[0]).add_row(a[1]);
    let global = px.mean_rows();
    let t = relationship_descriptor_graph(tape.var(text.clone()), global, a[2], a[3]);
    let score = score_map_graph(t, px);
    let (refined, _) = mps_graph(score, classes, n, &cfg.score)?;
    let scoremap = refined.scale(m).scale_by(a[4]).shift_by(a[5]);
    let mask = decoder_graph(t, px, pv, &cfg.decoder, classes)?;
    let decoder = mask.scale(m).scale_by(a[8]).shift_by(a[9]);
    Ok(ForwardVars {
        decoder,
        scoremap,
        text: t,
        pixels: px,
        score,
    })
}

/// Decoder-path prediction `U(sigmoid(logits))` from an embedding bundle
/// whose text rows are already refined and pixels already adapted.
pub fn decoder_forward(bundle: &EmbeddingBundle, cfg: &DecoderConfig, params: &ModelParams, image: (usize, usize)) -> Result<Mat> {
    bundle.validate()?;
    cfg.validate()?;
    params.check_shapes()?;
    if bundle.dim() != params.input_dim() || bundle.n != cfg.prompts {
        return Err(Error::shape("decoder_forward", format!("D = {}, N = {}", params.input_dim(), cfg.prompts), format!("D = {}, N = {}", bundle.dim(), bundle.n)));
    }
    let tape = Tape::new();
    let pv = ParamVars::bind(&tape, params);
    let mask = decoder_graph(tape.var(bundle.text.clone()), tape.var(bundle.pixels.clone()), &pv, cfg, bundle.k)?;
    let m = bundle.pixels.rows() as f64;
    let logits = mask.scale(m).scale_by(pv.vars()[8]).shift_by(pv.vars()[9]);
    let u = upsample_operator((bundle.h, bundle.w), image)?;
    crate::linalg::matmul(&u, &logits.value().map(sigmoid))
}

/// Predictions of both paths and their convex combination on the image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub decoder_pred: Mat,
    pub scoremap_pred: Mat,
    pub ensemble_pred: Mat,
    pub lambda: f64,
}

/// `lambda * decoder + (1 - lambda) * scoremap`.
pub fn ensemble(decoder_pred: Mat, scoremap_pred: Mat, lambda: f64) -> Result<SegOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} outside [0, 1]")));
    }
    let ensemble_pred = decoder_pred.zip_map(&scoremap_pred, |a, b| lambda * a + (1.0 - lambda) * b)?;
    Ok(SegOutput {
        decoder_pred,
        scoremap_pred,
        ensemble_pred,
        lambda,
    })
}

/// Rows of `text` belonging to `classes` (class-major, `n` prompts each).
pub fn class_rows(text: &Mat, classes: &[usize], n: usize) -> Mat {
    let idx: Vec<usize> = classes.iter().flat_map(|&c| c * n..(c + 1) * n).collect();
    text.select_rows(&idx)
}

/// Full prediction on the image grid for `classes`.
pub fn predict(pixels: &Mat, text: &Mat, grid: (usize, usize), image: (usize, usize), cfg: &ModelConfig, params: &ModelParams) -> Result<SegOutput> {
    let tape = Tape::new();
    let pv = ParamVars::bind(&tape, params);
    let f = forward_graph(&tape, &pv, pixels, text, cfg)?;
    let u = upsample_operator(grid, image)?;
    let dec = crate::linalg::matmul(&u, &f.decoder.value().map(sigmoid))?;
    let sco = crate::linalg::matmul(&u, &f.scoremap.value().map(sigmoid))?;
    ensemble(dec, sco, cfg.lambda)
}

/// Adapted pixels, refined text rows and global token of a trained model,
/// as both prediction paths see them.
pub fn adapted_bundle(pixels: &Mat, text: &Mat, grid: (usize, usize), prompts: usize, params: &ModelParams) -> Result<EmbeddingBundle> {
    params.check_shapes()?;
    if prompts == 0 || !text.rows().is_multiple_of(prompts) {
        return Err(Error::shape("adapted_bundle", format!("a multiple of {prompts} text rows"), format!("{}", text.rows())));
    }
    let tape = Tape::new();
    let pv = ParamVars::bind(&tape, params);
    let a = pv.vars();
    let px = tape.var(pixels.clone()).matmul(a[0]).add_row(a[1]);
    let global = px.mean_rows();
    let t = relationship_descriptor_graph(tape.var(text.clone()), global, a[2], a[3]);
    let (t, px, g) = (t.value().as_ref().clone(), px.value().as_ref().clone(), global.value().as_ref().clone());
    EmbeddingBundle::new(t, px, g, text.rows() / prompts, prompts, grid.0, grid.1)
}

/// Shared upsampling operator for training graphs.
pub(crate) fn upsampler(grid: (usize, usize), image: (usize, usize)) -> Result<Rc<Mat>> {
    Ok(Rc::new(upsample_operator(grid, image)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, max_relative_error};
    use crate::segpipe::loss::{seg_loss, LossWeights, Targets};
    use crate::segpipe::scene::{gen_toy_scene, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (SceneConfig, ModelConfig) {
        let scene = SceneConfig {
            classes: 2,
            prompts: 2,
            dim: 8,
            grid: (4, 4),
            image: (4, 4),
            unseen: vec![],
            ..SceneConfig::default()
        };
        let model = ModelConfig {
            decoder: DecoderConfig {
                d: 4,
                prompts: 2,
                classes: 2,
                mpsa: MpsaConfig { epsilon: 0.5, iters: 3, tol: 0.0 },
                ..DecoderConfig::default()
            },
            score: SinkhornConfig { epsilon: 0.5, max_iters: 5, tol: 0.0 },
            lambda: 0.5,
        };
        (scene, model)
    }

    #[test]
    fn decoder_output_in_unit_interval() {
        let (sc, mc) = small();
        let (_, bundle) = gen_toy_scene(&sc, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(8, &mc.decoder, &mut rng);
        let y = decoder_forward(&bundle, &mc.decoder, &p, (6, 6)).unwrap();
        assert_eq!(y.shape(), (36, 2));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn tensors_round_trip() {
        let (_, mc) = small();
        let p = ModelParams::init(8, &mc.decoder, &mut ChaCha8Rng::seed_from_u64(3));
        let ts: Vec<Mat> = p.tensors().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_tensors(ts, 3).unwrap(), p);
    }

    #[test]
    fn ensemble_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Mat::random_normal(5, 3, 1.0, &mut rng);
        let b = Mat::random_normal(5, 3, 1.0, &mut rng);
        assert_eq!(ensemble(a.clone(), b.clone(), 1.0).unwrap().ensemble_pred, a);
        assert_eq!(ensemble(a.clone(), b.clone(), 0.0).unwrap().ensemble_pred, b);
        let e = ensemble(a.clone(), b.clone(), 0.3).unwrap().ensemble_pred;
        for i in 0..15 {
            let (x, y, z) = (a.data()[i], b.data()[i], e.data()[i]);
            assert!(z >= x.min(y) - 1e-15 && z <= x.max(y) + 1e-15);
        }
        assert!(ensemble(a.clone(), b.clone(), 1.5).is_err());
        assert!(ensemble(a, b, -0.1).is_err());
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        // focal + dice through all three layers on a 4x4 grid, K = 2, N = 2
        let (sc, mc) = small();
        let (scene, _) = gen_toy_scene(&sc, 5).unwrap();
        let mut params = ModelParams::init(8, &mc.decoder, &mut ChaCha8Rng::seed_from_u64(6));
        // move away from the symmetric initial point
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in params.tensors_mut() {
            let noise = Mat::random_normal(t.rows(), t.cols(), 0.1, &mut rng);
            t.axpy(1.0, &noise);
        }
        let targets = Targets::dense(Mat::from_fn(16, 2, |p, c| f64::from(u8::from(scene.training_targets()[p] == Some(c)))));
        let w = LossWeights { lambda_ce: 0.0, ..LossWeights::default() };
        let u = upsampler(sc.grid, sc.image).unwrap();
        let loss_of = |p: &ModelParams| -> (f64, Vec<Mat>) {
            let tape = Tape::new();
            let pv = ParamVars::bind(&tape, p);
            let f = forward_graph(&tape, &pv, &scene.pixels, &scene.text, &mc).unwrap();
            let logits = f.decoder.left_mul_const(u.clone());
            let (v, _, g) = seg_loss(&logits.value(), &targets, &w).unwrap();
            let grads = tape.backward(logits, Some(g));
            (v, pv.vars().iter().map(|&x| grads.of(x)).collect())
        };
        let (_, analytic) = loss_of(&params);
        let mut worst: f64 = 0.0;
        for (i, g) in analytic.iter().enumerate() {
            let fd = finite_diff_grad(
                |x| {
                    let mut q = params.clone();
                    *q.tensors_mut()[i] = x.clone();
                    loss_of(&q).0
                },
                params.tensors()[i],
                1e-5,
            )
            .unwrap();
            worst = worst.max(max_relative_error(g, &fd));
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn adapted_bundle_matches_forward_score() {
        let (sc, mc) = small();
        let (scene, _) = gen_toy_scene(&sc, 8).unwrap();
        let mut params = ModelParams::init(8, &mc.decoder, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for t in params.tensors_mut() {
            let noise = Mat::random_normal(t.rows(), t.cols(), 0.1, &mut rng);
            t.axpy(1.0, &noise);
        }
        let b = adapted_bundle(&scene.pixels, &scene.text, sc.grid, 2, &params).unwrap();
        let s = crate::prompt_align::score_map(&b).unwrap();
        let tape = Tape::new();
        let pv = ParamVars::bind(&tape, &params);
        let f = forward_graph(&tape, &pv, &scene.pixels, &scene.text, &mc).unwrap();
        assert!(max_relative_error(&s.data, &f.score.value()) < 1e-12);
        assert!(adapted_bundle(&scene.pixels, &scene.text, sc.grid, 3, &params).is_err());
    }
}

//! Attention operators: softmax self-attention, Sinkhorn (doubly
//! stochastic) self-attention, text-to-pixel cross-attention, multi-prompt
//! Sinkhorn attention (MPSA), its mask head, and bilinear upsampling.
//!
//! Each operator is a graph on the [`Tape`](crate::autodiff::Tape); the
//! `*_grad` functions run the reverse pass for a given output cotangent.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::ot::{Marginals, SinkhornConfig, TransportPlan};

/// Query/key/value projections `D -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

impl AttnParams {
    pub fn new(wq: Mat, wk: Mat, wv: Mat) -> Result<Self> {
        let p = AttnParams { wq, wk, wv };
        p.validate()?;
        Ok(p)
    }

    pub fn random<R: rand::Rng + ?Sized>(input_dim: usize, head_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (input_dim as f64).sqrt();
        AttnParams {
            wq: Mat::random_normal(input_dim, head_dim, std, rng),
            wk: Mat::random_normal(input_dim, head_dim, std, rng),
            wv: Mat::random_normal(input_dim, head_dim, std, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.wq.shape();
        if shape.1 == 0 || self.wk.shape() != shape || self.wv.shape() != shape {
            return Err(Error::shape(
                "AttnParams",
                format!("three {}x{} maps with d >= 1", shape.0, shape.1),
                format!("wk {:?}, wv {:?}", self.wk.shape(), self.wv.shape()),
            ));
        }
        if !(self.wq.is_finite() && self.wk.is_finite() && self.wv.is_finite()) {
            return Err(Error::Input("attention weights are not finite".into()));
        }
        Ok(())
    }

    fn check_input(&self, op: &'static str, x: &Mat) -> Result<()> {
        self.validate()?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape(op, format!("{} input columns", self.input_dim()), format!("{}", x.cols())));
        }
        if x.rows() == 0 || !x.is_finite() {
            return Err(Error::Input(format!("{op}: empty or non-finite input")));
        }
        Ok(())
    }
}

/// Gradients of a scalar loss through an attention operator.
#[derive(Debug, Clone)]
pub struct AttnGrads {
    /// Query-side input (`x` for self-attention, `text` for cross/MPSA).
    pub query_input: Mat,
    /// Key/value-side input; for self-attention this is folded into `query_input`.
    pub kv_input: Option<Mat>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

/// Alternating-normalisation settings for Sinkhorn self-attention. The
/// regularisation is fixed at `sqrt(d)`; `normalizations` counts row and
/// column normalisations separately, so `1` is a plain row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkformerConfig {
    pub normalizations: usize,
    pub tol: f64,
}

impl Default for SinkformerConfig {
    fn default() -> Self {
        SinkformerConfig {
            normalizations: 6,
            tol: 0.0,
        }
    }
}

/// MPSA settings. Scores enter the plan without `1/sqrt(d)` scaling; the
/// regularisation weight plays the temperature role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpsaConfig {
    pub epsilon: f64,
    pub iters: usize,
    pub tol: f64,
}

impl Default for MpsaConfig {
    fn default() -> Self {
        MpsaConfig {
            epsilon: 0.05,
            iters: 4,
            tol: 0.0,
        }
    }
}

impl MpsaConfig {
    pub fn validate(&self) -> Result<()> {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.iters,
            tol: self.tol,
        }
        .validate()
    }
}

impl From<SinkhornConfig> for MpsaConfig {
    fn from(c: SinkhornConfig) -> Self {
        MpsaConfig {
            epsilon: c.epsilon,
            iters: c.max_iters,
            tol: c.tol,
        }
    }
}

/// Output of [`mpsa`].
#[derive(Debug, Clone)]
pub struct MpsaOutput {
    /// `K*N x d` attended values, one row per (class, prompt).
    pub context: Mat,
    /// `M x K` pre-sigmoid mask scores.
    pub mask_logits: Mat,
    /// Per-class `M x N` transport plans.
    pub plans: Vec<TransportPlan>,
}

struct ParamVars<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
}

fn param_vars<'t>(tape: &'t Tape, p: &AttnParams) -> ParamVars<'t> {
    ParamVars {
        wq: tape.var(p.wq.clone()),
        wk: tape.var(p.wk.clone()),
        wv: tape.var(p.wv.clone()),
    }
}

/// `softmax(Q Kᵀ / sqrt d) V` with `Q, K, V` projected from `x`.
pub fn self_attention_graph<'t>(x: Var<'t>, wq: Var<'t>, wk: Var<'t>, wv: Var<'t>) -> Var<'t> {
    let d = wq.shape().1 as f64;
    let q = x.matmul(wq);
    let k = x.matmul(wk);
    let v = x.matmul(wv);
    q.matmul_nt(k).scale(1.0 / d.sqrt()).row_softmax().matmul(v)
}

/// Sinkhorn-normalised self-attention: the plan for cost `-Q Kᵀ` at
/// regularisation `sqrt d` with uniform `1/M` marginals, applied to `V`.
pub fn sinkformer_graph<'t>(
    x: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    cfg: &SinkformerConfig,
) -> Result<(Var<'t>, TransportPlan)> {
    let d = wq.shape().1 as f64;
    let m = x.shape().0;
    let q = x.matmul(wq);
    let k = x.matmul(wk);
    let v = x.matmul(wv);
    let cost = q.matmul_nt(k).scale(-1.0);
    let (plan, info) = cost.sinkhorn(&Marginals::uniform(m, m), d.sqrt(), cfg.normalizations, cfg.tol, true)?;
    Ok((plan.matmul(v), info))
}

/// Text queries attending over pixel keys/values with a softmax over pixels.
pub fn cross_attention_graph<'t>(text: Var<'t>, pixels: Var<'t>, wq: Var<'t>, wk: Var<'t>, wv: Var<'t>) -> Var<'t> {
    let d = wq.shape().1 as f64;
    let q = text.matmul(wq);
    let k = pixels.matmul(wk);
    let v = pixels.matmul(wv);
    q.matmul_nt(k).scale(1.0 / d.sqrt()).row_softmax().matmul(v)
}

/// Multi-prompt Sinkhorn attention on already-projected `q` (`K*N x d`),
/// `k` and `v` (`M x d`). Returns `(context, mask_logits, plans)`.
///
/// For class `c`, `S_c = (q_c kᵀ)ᵀ` is `M x N`; the plan `T_c` solves
/// transport between uniform pixels and uniform prompts for cost `-S_c`
/// (equivalent to `1 - S_c` up to a constant shift). The weights
/// `W_c = T_c ⊙ S_c` give prompt `n`'s pixel weights (column `n`) for the
/// context row, and `sum_n W_c[:, n]` the class's mask logits.
pub fn mpsa_projected<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    classes: usize,
    prompts: usize,
    cfg: &MpsaConfig,
) -> Result<(Var<'t>, Var<'t>, Vec<TransportPlan>)> {
    let m = k.shape().0;
    let marg = Marginals::uniform(m, prompts);
    let scores = q.matmul_nt(k);
    let mut ctx = Vec::with_capacity(classes);
    let mut mask = Vec::with_capacity(classes);
    let mut plans = Vec::with_capacity(classes);
    for c in 0..classes {
        let s = scores.row_block(c * prompts, prompts).transpose();
        let (t, info) = s.scale(-1.0).sinkhorn(&marg, cfg.epsilon, 2 * cfg.iters, cfg.tol, false)?;
        let w = t.mul(s);
        ctx.push(w.transpose().matmul(v));
        mask.push(w.sum_cols());
        plans.push(info);
    }
    Ok((Var::vcat(&ctx), Var::hcat(&mask), plans))
}

/// Softmax counterpart of [`mpsa_projected`] at the same temperature: each
/// (class, prompt) query takes a softmax over pixels of `q kᵀ / temperature`.
/// The mask logits use the same reduction as MPSA with the independent
/// coupling `1 / (M N)` in place of the plan, i.e. the prompt-averaged raw
/// scores divided by `M`.
pub fn prompt_softmax_projected<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    classes: usize,
    prompts: usize,
    temperature: f64,
) -> (Var<'t>, Var<'t>) {
    let scores = q.matmul_nt(k);
    let m = scores.shape().1 as f64;
    let ctx = scores.scale(1.0 / temperature).row_softmax().matmul(v);
    let mask: Vec<Var<'t>> = (0..classes)
        .map(|c| scores.row_block(c * prompts, prompts).mean_rows().scale(1.0 / m))
        .collect();
    (ctx, Var::vcat(&mask).transpose())
}

/// Graph form of [`mpsa`] starting from raw embeddings.
#[allow(clippy::too_many_arguments)]
pub fn mpsa_graph<'t>(
    text: Var<'t>,
    pixels: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    classes: usize,
    prompts: usize,
    cfg: &MpsaConfig,
) -> Result<(Var<'t>, Var<'t>, Vec<TransportPlan>)> {
    mpsa_projected(text.matmul(wq), pixels.matmul(wk), pixels.matmul(wv), classes, prompts, cfg)
}

pub fn self_attention(x: &Mat, p: &AttnParams) -> Result<Mat> {
    p.check_input("self_attention", x)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let out = self_attention_graph(tape.var(x.clone()), pv.wq, pv.wk, pv.wv);
    Ok(out.value().as_ref().clone())
}

pub fn self_attention_grad(x: &Mat, p: &AttnParams, upstream: &Mat) -> Result<AttnGrads> {
    p.check_input("self_attention", x)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let xv = tape.var(x.clone());
    let out = self_attention_graph(xv, pv.wq, pv.wk, pv.wv);
    check_upstream("self_attention", out.shape(), upstream)?;
    let g = tape.backward(out, Some(upstream.clone()));
    Ok(AttnGrads {
        query_input: g.of(xv),
        kv_input: None,
        wq: g.of(pv.wq),
        wk: g.of(pv.wk),
        wv: g.of(pv.wv),
    })
}

pub fn sinkformer_attention(x: &Mat, p: &AttnParams, cfg: &SinkformerConfig) -> Result<Mat> {
    p.check_input("sinkformer_attention", x)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let (out, _) = sinkformer_graph(tape.var(x.clone()), pv.wq, pv.wk, pv.wv, cfg)?;
    Ok(out.value().as_ref().clone())
}

/// Attention plan of [`sinkformer_attention`] (rows and columns sum to `1/M` once converged).
pub fn sinkformer_plan(x: &Mat, p: &AttnParams, cfg: &SinkformerConfig) -> Result<TransportPlan> {
    p.check_input("sinkformer_attention", x)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    Ok(sinkformer_graph(tape.var(x.clone()), pv.wq, pv.wk, pv.wv, cfg)?.1)
}

pub fn sinkformer_attention_grad(x: &Mat, p: &AttnParams, cfg: &SinkformerConfig, upstream: &Mat) -> Result<AttnGrads> {
    p.check_input("sinkformer_attention", x)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let xv = tape.var(x.clone());
    let (out, _) = sinkformer_graph(xv, pv.wq, pv.wk, pv.wv, cfg)?;
    check_upstream("sinkformer_attention", out.shape(), upstream)?;
    let g = tape.backward(out, Some(upstream.clone()));
    Ok(AttnGrads {
        query_input: g.of(xv),
        kv_input: None,
        wq: g.of(pv.wq),
        wk: g.of(pv.wk),
        wv: g.of(pv.wv),
    })
}

fn check_pair(op: &'static str, text: &Mat, pixels: &Mat, p: &AttnParams) -> Result<()> {
    p.check_input(op, text)?;
    p.check_input(op, pixels)
}

pub fn cross_attention(text: &Mat, pixels: &Mat, p: &AttnParams) -> Result<Mat> {
    check_pair("cross_attention", text, pixels, p)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let out = cross_attention_graph(tape.var(text.clone()), tape.var(pixels.clone()), pv.wq, pv.wk, pv.wv);
    Ok(out.value().as_ref().clone())
}

pub fn cross_attention_grad(text: &Mat, pixels: &Mat, p: &AttnParams, upstream: &Mat) -> Result<AttnGrads> {
    check_pair("cross_attention", text, pixels, p)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let (tv, xv) = (tape.var(text.clone()), tape.var(pixels.clone()));
    let out = cross_attention_graph(tv, xv, pv.wq, pv.wk, pv.wv);
    check_upstream("cross_attention", out.shape(), upstream)?;
    let g = tape.backward(out, Some(upstream.clone()));
    Ok(AttnGrads {
        query_input: g.of(tv),
        kv_input: Some(g.of(xv)),
        wq: g.of(pv.wq),
        wk: g.of(pv.wk),
        wv: g.of(pv.wv),
    })
}

fn check_mpsa(text: &Mat, pixels: &Mat, p: &AttnParams, classes: usize, prompts: usize, cfg: &MpsaConfig) -> Result<()> {
    check_pair("mpsa", text, pixels, p)?;
    cfg.validate()?;
    if classes == 0 || prompts == 0 || text.rows() != classes * prompts {
        return Err(Error::shape("mpsa", format!("{} text rows", classes * prompts), format!("{}", text.rows())));
    }
    Ok(())
}

pub fn mpsa(text: &Mat, pixels: &Mat, p: &AttnParams, classes: usize, prompts: usize, cfg: &MpsaConfig) -> Result<MpsaOutput> {
    check_mpsa(text, pixels, p, classes, prompts, cfg)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let (ctx, mask, plans) = mpsa_graph(tape.var(text.clone()), tape.var(pixels.clone()), pv.wq, pv.wk, pv.wv, classes, prompts, cfg)?;
    Ok(MpsaOutput {
        context: ctx.value().as_ref().clone(),
        mask_logits: mask.value().as_ref().clone(),
        plans,
    })
}

/// Gradient of `<up_context, context> + <up_mask, mask_logits>`.
#[allow(clippy::too_many_arguments)]
pub fn mpsa_grad(
    text: &Mat,
    pixels: &Mat,
    p: &AttnParams,
    classes: usize,
    prompts: usize,
    cfg: &MpsaConfig,
    up_context: &Mat,
    up_mask: &Mat,
) -> Result<AttnGrads> {
    check_mpsa(text, pixels, p, classes, prompts, cfg)?;
    let tape = Tape::new();
    let pv = param_vars(&tape, p);
    let (tv, xv) = (tape.var(text.clone()), tape.var(pixels.clone()));
    let (ctx, mask, _) = mpsa_graph(tv, xv, pv.wq, pv.wk, pv.wv, classes, prompts, cfg)?;
    check_upstream("mpsa context", ctx.shape(), up_context)?;
    check_upstream("mpsa mask", mask.shape(), up_mask)?;
    let loss = ctx.mul(tape.var(up_context.clone())).sum().add(mask.mul(tape.var(up_mask.clone())).sum());
    let g = tape.backward(loss, None);
    Ok(AttnGrads {
        query_input: g.of(tv),
        kv_input: Some(g.of(xv)),
        wq: g.of(pv.wq),
        wk: g.of(pv.wk),
        wv: g.of(pv.wv),
    })
}

/// Elementwise sigmoid of the MPSA mask logits.
pub fn mask_head(out: &MpsaOutput) -> Mat {
    out.mask_logits.map(sigmoid)
}

fn check_upstream(op: &'static str, shape: (usize, usize), up: &Mat) -> Result<()> {
    if up.shape() != shape {
        return Err(Error::shape(op, format!("upstream {}x{}", shape.0, shape.1), format!("{}x{}", up.rows(), up.cols())));
    }
    Ok(())
}

/// 1-D bilinear weights with the half-pixel (align-corners false) convention:
/// for each output index, `(lower, upper, weight_of_upper)`.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Dense `(H_I W_I) x (H W)` bilinear interpolation operator.
pub fn upsample_operator(grid: (usize, usize), target: (usize, usize)) -> Result<Mat> {
    let (h, w) = grid;
    let (th, tw) = target;
    if h == 0 || w == 0 {
        return Err(Error::Input("empty source grid".into()));
    }
    if th < h || tw < w {
        return Err(Error::Size(format!("target {th}x{tw} smaller than source {h}x{w}")));
    }
    let wy = axis_weights(h, th);
    let wx = axis_weights(w, tw);
    let mut u = Mat::zeros(th * tw, h * w);
    for (oy, &(y0, y1, ly)) in wy.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in wx.iter().enumerate() {
            let r = oy * tw + ox;
            u[(r, y0 * w + x0)] += (1.0 - ly) * (1.0 - lx);
            u[(r, y0 * w + x1)] += (1.0 - ly) * lx;
            u[(r, y1 * w + x0)] += ly * (1.0 - lx);
            u[(r, y1 * w + x1)] += ly * lx;
        }
    }
    Ok(u)
}

/// Bilinear upsampling of every channel of an `(H W) x K` map.
pub fn upsample(mask: &Mat, grid: (usize, usize), target: (usize, usize)) -> Result<Mat> {
    if mask.rows() != grid.0 * grid.1 {
        return Err(Error::shape("upsample", format!("{} rows", grid.0 * grid.1), format!("{}", mask.rows())));
    }
    let u = upsample_operator(grid, target)?;
    crate::linalg::matmul(&u, mask)
}

/// Graph form of [`upsample`] given a precomputed operator.
pub fn upsample_graph<'t>(mask: Var<'t>, operator: Rc<Mat>) -> Var<'t> {
    mask.left_mul_const(operator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, matmul, max_relative_error};
    use crate::prompt_align::{mps, ScoreMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn naive_softmax_attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
        let mut out = Mat::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let mut w = vec![0.0; k.rows()];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = (0..q.cols()).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / scale;
            }
            let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..k.rows() {
                let a = (w[j] - mx).exp() / z;
                for c in 0..v.cols() {
                    out[(i, c)] += a * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn self_attention_examples() {
        let mut r = rng(1);
        let p = AttnParams::random(8, 4, &mut r);
        let x = Mat::random_normal(1, 8, 1.0, &mut r);
        let out = self_attention(&x, &p).unwrap();
        assert!(out.max_abs_diff(&matmul(&x, &p.wv).unwrap()) < 1e-15);

        let row = Mat::random_normal(1, 8, 1.0, &mut r);
        let x2 = Mat::from_rows(&[row.row(0), row.row(0)]);
        let out = self_attention(&x2, &p).unwrap();
        let v = matmul(&row, &p.wv).unwrap();
        assert!(out.row_block(0, 1).max_abs_diff(&v) < 1e-14);
        assert!(out.row_block(1, 1).max_abs_diff(&v) < 1e-14);

        let x = Mat::random_normal(4, 8, 1.0, &mut r);
        let q = matmul(&x, &p.wq).unwrap();
        let k = matmul(&x, &p.wk).unwrap();
        let v = matmul(&x, &p.wv).unwrap();
        let want = naive_softmax_attention(&q, &k, &v, 2.0);
        assert!(self_attention(&x, &p).unwrap().max_abs_diff(&want) < 1e-10);
        assert!(self_attention(&Mat::zeros(3, 5), &p).is_err());
    }

    #[test]
    fn sinkformer_examples() {
        let mut r = rng(2);
        let p = AttnParams::random(6, 4, &mut r);
        let x = Mat::random_normal(5, 6, 1.0, &mut r);
        let one = SinkformerConfig { normalizations: 1, tol: 0.0 };
        let s = sinkformer_attention(&x, &p, &one).unwrap();
        let sa = self_attention(&x, &p).unwrap().scale(1.0 / 5.0);
        assert!(s.max_abs_diff(&sa) < 1e-12);

        let conv = SinkformerConfig { normalizations: 2000, tol: 1e-10 };
        let plan = sinkformer_plan(&x, &p, &conv).unwrap();
        for v in plan.plan.row_sums().into_iter().chain(plan.plan.col_sums()) {
            assert!((v - 0.2).abs() < 1e-6);
        }

        let perm = [3usize, 0, 4, 1, 2];
        let cfg = SinkformerConfig { normalizations: 10, tol: 0.0 };
        let base = sinkformer_attention(&x, &p, &cfg).unwrap();
        let permuted = sinkformer_attention(&x.select_rows(&perm), &p, &cfg).unwrap();
        assert!(permuted.max_abs_diff(&base.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn cross_attention_examples() {
        let mut r = rng(3);
        let p = AttnParams::random(6, 3, &mut r);
        let text = Mat::random_normal(4, 6, 1.0, &mut r);
        let px = Mat::random_normal(1, 6, 1.0, &mut r);
        let out = cross_attention(&text, &px, &p).unwrap();
        let v = matmul(&px, &p.wv).unwrap();
        for i in 0..4 {
            assert!(out.row_block(i, 1).max_abs_diff(&v) < 1e-14);
        }

        // zero queries give uniform weights: every row is the value mean
        let pixels = Mat::random_normal(5, 6, 1.0, &mut r);
        let out = cross_attention(&Mat::zeros(2, 6), &pixels, &p).unwrap();
        let vm = matmul(&pixels, &p.wv).unwrap();
        let mean = Mat::row_vector(&vm.col_sums()).scale(0.2);
        assert!(out.row_block(1, 1).max_abs_diff(&mean) < 1e-14);

        let q = matmul(&text, &p.wq).unwrap();
        let k = matmul(&pixels, &p.wk).unwrap();
        let want = naive_softmax_attention(&q, &k, &vm, 3f64.sqrt());
        assert!(cross_attention(&text, &pixels, &p).unwrap().max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn mpsa_matches_mps_on_transposed_scores() {
        for seed in 0..5 {
            let mut r = rng(10 + seed);
            let p = AttnParams::random(6, 4, &mut r);
            let text = Mat::random_normal(6, 6, 0.5, &mut r);
            let pixels = Mat::random_normal(8, 6, 0.5, &mut r);
            let cfg = MpsaConfig { epsilon: 0.5, iters: 20, tol: 1e-9 };
            let out = mpsa(&text, &pixels, &p, 3, 2, &cfg).unwrap();
            let g = matmul(&matmul(&text, &p.wq).unwrap(), &matmul(&pixels, &p.wk).unwrap().transpose()).unwrap();
            let score = ScoreMap::new(g.transpose(), 3, 2, 2, 4).unwrap();
            let refined = mps(&score, &SinkhornConfig::new(0.5, 20, 1e-9).unwrap()).unwrap();
            assert!(out.mask_logits.max_abs_diff(&refined.data) < 1e-10);
        }
    }

    #[test]
    fn mpsa_degenerate_single_prompt() {
        // N = 1 and S = 1 everywhere: the plan is 1/M in every row, so each
        // context row is the mean value row scaled by 1/M.
        let m = 4;
        let p = AttnParams::new(Mat::filled(1, 1, 1.0), Mat::filled(1, 1, 1.0), Mat::filled(1, 1, 1.0)).unwrap();
        let text = Mat::filled(2, 1, 1.0);
        let pixels = Mat::column(&[1.0; 4]);
        let out = mpsa(&text, &pixels, &p, 2, 1, &MpsaConfig::default()).unwrap();
        assert!(out.context.max_abs_diff(&Mat::filled(2, 1, 1.0)) < 1e-15);
        assert!(out.mask_logits.max_abs_diff(&Mat::filled(m, 2, 0.25)) < 1e-15);
    }

    #[test]
    fn mpsa_planted_blocks_recover_partition() {
        // Pixels of class k sit in a contiguous block; every prompt of class
        // k scores positive on that block and negative elsewhere.
        let (k, n, m, d) = (3, 2, 12, 6);
        let mut r = rng(40);
        let centred = |c: usize, j: usize| if j == c { 2.0 / 3.0 } else if j < 3 { -1.0 / 3.0 } else { 0.0 };
        let label = |px: usize| px / 4;
        let jitter = Mat::random_normal(m + k * n, d, 0.05, &mut r);
        let pixels = Mat::from_fn(m, d, |px, j| centred(label(px), j) + if j >= 3 { jitter[(px, j)] } else { 0.0 });
        let text = Mat::from_fn(k * n, d, |row, j| centred(row / n, j) + if j >= 3 { jitter[(m + row, j)] } else { 0.0 });
        let p = AttnParams::new(Mat::identity(d), Mat::identity(d), Mat::identity(d)).unwrap();
        let out = mpsa(&text, &pixels, &p, k, n, &MpsaConfig::default()).unwrap();
        let mask = mask_head(&out);
        for px in 0..m {
            for c in 0..k {
                assert_eq!(mask[(px, c)] > 0.5, label(px) == c, "pixel {px}, class {c}");
            }
        }
    }

    #[test]
    fn mpsa_prompt_permutation() {
        let mut r = rng(30);
        let p = AttnParams::random(5, 3, &mut r);
        let text = Mat::random_normal(6, 5, 1.0, &mut r);
        let pixels = Mat::random_normal(7, 5, 1.0, &mut r);
        let cfg = MpsaConfig { epsilon: 0.3, iters: 5, tol: 0.0 };
        let base = mpsa(&text, &pixels, &p, 2, 3, &cfg).unwrap();
        let perm = [2usize, 0, 1, 4, 5, 3];
        let pt = mpsa(&text.select_rows(&perm), &pixels, &p, 2, 3, &cfg).unwrap();
        assert!(pt.mask_logits.max_abs_diff(&base.mask_logits) < 1e-10);
        assert!(pt.context.max_abs_diff(&base.context.select_rows(&perm)) < 1e-10);
    }

    #[test]
    fn mask_head_examples() {
        let out = MpsaOutput {
            context: Mat::zeros(1, 1),
            mask_logits: Mat::from_rows(&[[0.0, 1e3, -1e3, 2.0]]),
            plans: vec![],
        };
        let m = mask_head(&out);
        assert_eq!(m[(0, 0)], 0.5);
        assert!((m[(0, 1)] - 1.0).abs() < 1e-12);
        assert!(m[(0, 2)] >= 0.0 && m[(0, 2)] < 1e-12);
        assert!(m[(0, 3)] > m[(0, 0)]);
    }

    #[test]
    fn upsample_examples() {
        let mut r = rng(4);
        let x = Mat::random_normal(6, 2, 1.0, &mut r);
        assert!(upsample(&x, (2, 3), (2, 3)).unwrap().max_abs_diff(&x) < 1e-15);
        let c = upsample(&Mat::filled(6, 1, 0.7), (2, 3), (5, 7)).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let checker = Mat::column(&[1.0, 0.0, 0.0, 1.0]);
        let out = upsample(&checker, (2, 2), (4, 4)).unwrap();
        let want = [
            [1.0, 0.75, 0.25, 0.0],
            [0.75, 0.625, 0.375, 0.25],
            [0.25, 0.375, 0.625, 0.75],
            [0.0, 0.25, 0.75, 1.0],
        ];
        for y in 0..4 {
            for x in 0..4 {
                assert!((out[(y * 4 + x, 0)] - want[y][x]).abs() < 1e-15);
            }
        }
        assert!(matches!(upsample(&checker, (2, 2), (1, 4)), Err(Error::Size(_))));
    }

    fn check(rel: f64, what: &str) {
        assert!(rel < 1e-4, "{what}: relative error {rel}");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            let p = AttnParams::random(5, 3, &mut r);
            let x = Mat::random_normal(4, 5, 1.0, &mut r);
            let up = Mat::random_normal(4, 3, 1.0, &mut r);
            let loss = |y: Mat| y.hadamard(&up).unwrap().sum();

            let g = self_attention_grad(&x, &p, &up).unwrap();
            let fd = finite_diff_grad(|m| loss(self_attention(m, &p).unwrap()), &x, 1e-5).unwrap();
            check(max_relative_error(&g.query_input, &fd), "self x");
            let fd = finite_diff_grad(|w| loss(self_attention(&x, &AttnParams { wq: w.clone(), ..p.clone() }).unwrap()), &p.wq, 1e-5).unwrap();
            check(max_relative_error(&g.wq, &fd), "self wq");

            let cfg = SinkformerConfig { normalizations: 7, tol: 0.0 };
            let g = sinkformer_attention_grad(&x, &p, &cfg, &up).unwrap();
            let fd = finite_diff_grad(|m| loss(sinkformer_attention(m, &p, &cfg).unwrap()), &x, 1e-5).unwrap();
            check(max_relative_error(&g.query_input, &fd), "sinkformer x");
            let fd = finite_diff_grad(|w| loss(sinkformer_attention(&x, &AttnParams { wk: w.clone(), ..p.clone() }, &cfg).unwrap()), &p.wk, 1e-5).unwrap();
            check(max_relative_error(&g.wk, &fd), "sinkformer wk");

            let text = Mat::random_normal(6, 5, 1.0, &mut r);
            let up6 = Mat::random_normal(6, 3, 1.0, &mut r);
            let loss6 = |y: Mat| y.hadamard(&up6).unwrap().sum();
            let g = cross_attention_grad(&text, &x, &p, &up6).unwrap();
            let fd = finite_diff_grad(|m| loss6(cross_attention(m, &x, &p).unwrap()), &text, 1e-5).unwrap();
            check(max_relative_error(&g.query_input, &fd), "cross text");
            let fd = finite_diff_grad(|m| loss6(cross_attention(&text, m, &p).unwrap()), &x, 1e-5).unwrap();
            check(max_relative_error(g.kv_input.as_ref().unwrap(), &fd), "cross pixels");

            let cfg = MpsaConfig { epsilon: 0.5, iters: 4, tol: 0.0 };
            let upm = Mat::random_normal(4, 2, 1.0, &mut r);
            let mloss = |o: MpsaOutput| o.context.hadamard(&up6).unwrap().sum() + o.mask_logits.hadamard(&upm).unwrap().sum();
            let g = mpsa_grad(&text, &x, &p, 2, 3, &cfg, &up6, &upm).unwrap();
            let fd = finite_diff_grad(|m| mloss(mpsa(m, &x, &p, 2, 3, &cfg).unwrap()), &text, 1e-5).unwrap();
            check(max_relative_error(&g.query_input, &fd), "mpsa text");
            let fd = finite_diff_grad(|m| mloss(mpsa(&text, m, &p, 2, 3, &cfg).unwrap()), &x, 1e-5).unwrap();
            check(max_relative_error(g.kv_input.as_ref().unwrap(), &fd), "mpsa pixels");
            let fd = finite_diff_grad(|w| mloss(mpsa(&text, &x, &AttnParams { wv: w.clone(), ..p.clone() }, 2, 3, &cfg).unwrap()), &p.wv, 1e-5).unwrap();
            check(max_relative_error(&g.wv, &fd), "mpsa wv");
        }
    }

    #[test]
    fn upsample_graph_gradient_is_transpose() {
        let u = Rc::new(upsample_operator((2, 3), (4, 5)).unwrap());
        let mut r = rng(5);
        let x = Mat::random_normal(6, 2, 1.0, &mut r);
        let up = Mat::from_fn(20, 2, |_, _| r.random::<f64>());
        let tape = Tape::new();
        let xv = tape.var(x);
        let y = upsample_graph(xv, u.clone());
        let g = tape.backward(y, Some(up.clone())).of(xv);
        assert!(g.max_abs_diff(&matmul(&u.transpose(), &up).unwrap()) < 1e-14);
    }
}

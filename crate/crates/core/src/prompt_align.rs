//! Text-pixel score maps and their multi-prompt transport refinement.
//!
//! Text rows are class-major (`row = k * N + n`). Score maps are stored
//! pixel-major, `M x (K * N)`. Refinement solves one `M x N` transport
//! problem per class between uniformly weighted pixels and prompts, then
//! sums the plan-weighted scores over prompts.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows, matmul_nt, softmax_in_place, Mat};
use crate::ot::{sinkhorn_log, Marginals, SinkhornConfig, TransportPlan};

/// Prompt-conditioned text embeddings plus pixel embeddings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// `K*N x D`, class-major.
    pub text: Mat,
    /// `M x D` with `M = H * W`.
    pub pixels: Mat,
    /// `1 x D` image-level token.
    pub global: Mat,
    pub k: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl EmbeddingBundle {
    pub fn new(text: Mat, pixels: Mat, global: Mat, k: usize, n: usize, h: usize, w: usize) -> Result<Self> {
        let b = EmbeddingBundle {
            text,
            pixels,
            global,
            k,
            n,
            h,
            w,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Input("K, N, H and W must be positive".into()));
        }
        if self.text.rows() != self.k * self.n {
            return Err(Error::shape("EmbeddingBundle.text", format!("{} rows", self.k * self.n), format!("{} rows", self.text.rows())));
        }
        if self.pixels.rows() != self.h * self.w {
            return Err(Error::shape("EmbeddingBundle.pixels", format!("{} rows", self.h * self.w), format!("{} rows", self.pixels.rows())));
        }
        if self.pixels.cols() != self.text.cols() || self.global.shape() != (1, self.text.cols()) {
            return Err(Error::shape(
                "EmbeddingBundle",
                format!("embedding dim {}", self.text.cols()),
                format!("pixels {}x{}, global {}x{}", self.pixels.rows(), self.pixels.cols(), self.global.rows(), self.global.cols()),
            ));
        }
        if !(self.text.is_finite() && self.pixels.is_finite() && self.global.is_finite()) {
            return Err(Error::Input("embeddings contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Pixel-by-(class, prompt) similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `M x K*N`.
    pub data: Mat,
    pub k: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ScoreMap {
    pub fn new(data: Mat, k: usize, n: usize, h: usize, w: usize) -> Result<Self> {
        if data.cols() != k * n || data.rows() != h * w || k == 0 || n == 0 {
            return Err(Error::shape(
                "ScoreMap",
                format!("{}x{}", h * w, k * n),
                format!("{}x{}", data.rows(), data.cols()),
            ));
        }
        Ok(ScoreMap { data, k, n, h, w })
    }

    pub fn pixels(&self) -> usize {
        self.data.rows()
    }

    /// `M x N` slice for class `k`.
    pub fn class_slice(&self, k: usize) -> Mat {
        self.data.col_block(k * self.n, self.n)
    }
}

/// Per-class scores after transport refinement.
#[derive(Debug, Clone)]
pub struct RefinedScoreMap {
    /// `M x K`, `data[m][k] = sum_n plans[k][m][n] * S[m][k*N+n]`.
    pub data: Mat,
    /// One `M x N` plan per class.
    pub plans: Vec<TransportPlan>,
    /// `plans[k] ⊙ S_k`, the per-prompt maps before the prompt sum.
    pub weighted: Vec<Mat>,
}

impl RefinedScoreMap {
    /// Plan-weighted map of prompt `n` for class `k`, one value per pixel.
    pub fn prompt_map(&self, k: usize, n: usize) -> Vec<f64> {
        self.weighted[k].col(n)
    }
}

/// Learnable affine map `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Mat,
}

impl Affine {
    pub fn new(weight: Mat, bias: Mat) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::shape("Affine", format!("bias 1x{}", weight.cols()), format!("{}x{}", bias.rows(), bias.cols())));
        }
        Ok(Affine { weight, bias })
    }

    /// Zero bias.
    pub fn linear(weight: Mat) -> Self {
        let cols = weight.cols();
        Affine {
            weight,
            bias: Mat::zeros(1, cols),
        }
    }

    /// `2D -> D` map that passes the second (raw text) half through.
    pub fn passthrough_second(d: usize) -> Self {
        Self::linear(Mat::from_fn(2 * d, d, |r, c| if r == d + c { 1.0 } else { 0.0 }))
    }

    /// `2D -> D` map that keeps the first (Hadamard) half.
    pub fn passthrough_first(d: usize) -> Self {
        Self::linear(Mat::from_fn(2 * d, d, |r, c| if r == c { 1.0 } else { 0.0 }))
    }
}

/// Graph form of [`relationship_descriptor`].
pub fn relationship_descriptor_graph<'t>(text: Var<'t>, global: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let fused = text.mul_row(global);
    Var::hcat(&[fused, text]).matmul(weight).add_row(bias)
}

/// `proj(cat[global ⊙ text, text])` row by row, the global token
/// broadcast across all `K*N` rows.
pub fn relationship_descriptor(text_raw: &Mat, global: &Mat, proj: &Affine) -> Result<Mat> {
    let d = text_raw.cols();
    if global.shape() != (1, d) {
        return Err(Error::shape("relationship_descriptor", format!("global 1x{d}"), format!("{}x{}", global.rows(), global.cols())));
    }
    if proj.weight.rows() != 2 * d {
        return Err(Error::shape("relationship_descriptor", format!("projection with {} rows", 2 * d), format!("{} rows", proj.weight.rows())));
    }
    if proj.bias.shape() != (1, proj.weight.cols()) {
        return Err(Error::shape("relationship_descriptor", format!("bias 1x{}", proj.weight.cols()), format!("{}x{}", proj.bias.rows(), proj.bias.cols())));
    }
    let tape = Tape::new();
    let out = relationship_descriptor_graph(
        tape.var(text_raw.clone()),
        tape.var(global.clone()),
        tape.var(proj.weight.clone()),
        tape.var(proj.bias.clone()),
    );
    Ok(out.value().as_ref().clone())
}

/// Graph form of [`score_map`]: `normalize(pixels) · normalize(text)ᵀ`.
pub fn score_map_graph<'t>(text: Var<'t>, pixels: Var<'t>) -> Var<'t> {
    pixels.l2_normalize_rows().matmul_nt(text.l2_normalize_rows())
}

/// Cosine similarity of every pixel with every (class, prompt) text row.
pub fn score_map(bundle: &EmbeddingBundle) -> Result<ScoreMap> {
    bundle.validate()?;
    let t = l2_normalize_rows(&bundle.text);
    let p = l2_normalize_rows(&bundle.pixels);
    ScoreMap::new(matmul_nt(&p, &t)?, bundle.k, bundle.n, bundle.h, bundle.w)
}

/// Transport refinement of a score map.
///
/// For each class `k`: cost `1 - S_k`, uniform marginals over the `M`
/// pixels and the `N` prompts, plan `T_k`, then `data[:, k] = sum_n (T_k ⊙ S_k)[:, n]`.
pub fn mps(score: &ScoreMap, cfg: &SinkhornConfig) -> Result<RefinedScoreMap> {
    cfg.validate()?;
    let (m, n) = (score.pixels(), score.n);
    let marg = Marginals::uniform(m, n);
    let mut data = Mat::zeros(m, score.k);
    let mut plans = Vec::with_capacity(score.k);
    let mut weighted = Vec::with_capacity(score.k);
    for k in 0..score.k {
        let s = score.class_slice(k);
        let cost = s.map(|v| 1.0 - v);
        let plan = sinkhorn_log(&cost, &marg, cfg)?;
        let w = plan.plan.hadamard(&s)?;
        for (i, v) in w.row_sums().into_iter().enumerate() {
            data[(i, k)] = v;
        }
        plans.push(plan);
        weighted.push(w);
    }
    Ok(RefinedScoreMap { data, plans, weighted })
}

/// Graph form of [`mps`] on an `M x K*N` score node.
pub fn mps_graph<'t>(score: Var<'t>, k: usize, n: usize, cfg: &SinkhornConfig) -> Result<(Var<'t>, Vec<TransportPlan>)> {
    cfg.validate()?;
    let m = score.shape().0;
    let marg = Marginals::uniform(m, n);
    let mut cols = Vec::with_capacity(k);
    let mut plans = Vec::with_capacity(k);
    for class in 0..k {
        let s = score.col_block(class * n, n);
        let cost = s.scale(-1.0).add_scalar(1.0);
        let (t, plan) = cost.sinkhorn(&marg, cfg.epsilon, 2 * cfg.max_iters, cfg.tol, false)?;
        cols.push(t.mul(s).sum_cols());
        plans.push(plan);
    }
    Ok((Var::hcat(&cols), plans))
}

/// Gradient of `<upstream, mps(S)>` with respect to `S`, through both the
/// plan's dependence on `S` and the direct Hadamard factor.
pub fn mps_grad(score: &ScoreMap, cfg: &SinkhornConfig, upstream: &Mat) -> Result<Mat> {
    if upstream.shape() != (score.pixels(), score.k) {
        return Err(Error::shape(
            "mps_grad",
            format!("{}x{}", score.pixels(), score.k),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let tape = Tape::new();
    let s = tape.var(score.data.clone());
    let (out, _) = mps_graph(s, score.k, score.n, cfg)?;
    Ok(tape.backward(out, Some(upstream.clone())).of(s))
}

/// Per-prompt maps under plain softmax normalisation, the baseline the
/// transport maps are compared against: for each prompt, a softmax over
/// pixels of `S / temperature` scaled to mass `1/N`, times `S`.
pub fn softmax_weighted(score: &ScoreMap, temperature: f64) -> Vec<Mat> {
    let (m, n) = (score.pixels(), score.n);
    (0..score.k)
        .map(|k| {
            let s = score.class_slice(k);
            let mut cols = s.transpose().scale(1.0 / temperature);
            for r in 0..n {
                softmax_in_place(cols.row_mut(r));
            }
            Mat::from_fn(m, n, |i, j| cols[(j, i)] / n as f64 * s[(i, j)])
        })
        .collect()
}

/// Per-prompt maps of one bundle under the three weightings, one `M x N`
/// matrix per class in each.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMaps {
    /// Cosine scores.
    pub raw: Vec<Mat>,
    /// Transport-weighted scores `T ⊙ S`.
    pub transport: Vec<Mat>,
    /// Softmax-weighted scores at the same temperature.
    pub softmax: Vec<Mat>,
}

pub fn prompt_maps(bundle: &EmbeddingBundle, cfg: &SinkhornConfig) -> Result<PromptMaps> {
    let s = score_map(bundle)?;
    let refined = mps(&s, cfg)?;
    Ok(PromptMaps {
        raw: (0..s.k).map(|k| s.class_slice(k)).collect(),
        transport: refined.weighted,
        softmax: softmax_weighted(&s, cfg.epsilon),
    })
}

fn standardised(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (var > 0.0).then(|| col.iter().map(|v| (v - mean) / var.sqrt()).collect())
}

/// Mean pairwise Pearson correlation between the prompt maps (columns) of
/// each class, averaged over pairs and classes. Constant maps are skipped.
pub fn prompt_correlation(maps: &[Mat]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0usize);
    for m in maps {
        let z: Vec<Vec<f64>> = (0..m.cols()).filter_map(|c| standardised(&m.col(c))).collect();
        for a in 0..z.len() {
            for b in a + 1..z.len() {
                total += z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / m.rows() as f64;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Per-pixel variance across the standardised prompt maps of each class,
/// averaged over pixels and classes. Zero when all prompts agree.
pub fn prompt_spread(maps: &[Mat]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for m in maps {
        let z: Vec<Vec<f64>> = (0..m.cols()).filter_map(|c| standardised(&m.col(c))).collect();
        if z.len() < 2 {
            continue;
        }
        let n = z.len() as f64;
        for i in 0..m.rows() {
            let mean = z.iter().map(|c| c[i]).sum::<f64>() / n;
            total += z.iter().map(|c| (c[i] - mean) * (c[i] - mean)).sum::<f64>() / n;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, finite_diff_grad, max_relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_bundle(k: usize, n: usize, d: usize, h: usize, w: usize, seed: u64) -> EmbeddingBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingBundle::new(
            Mat::random_normal(k * n, d, 1.0, &mut rng),
            Mat::random_normal(h * w, d, 1.0, &mut rng),
            Mat::random_normal(1, d, 1.0, &mut rng),
            k,
            n,
            h,
            w,
        )
        .unwrap()
    }

    #[test]
    fn relationship_descriptor_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Mat::random_normal(6, 4, 1.0, &mut rng);
        let ones = Mat::filled(1, 4, 1.0);
        let out = relationship_descriptor(&t, &ones, &Affine::passthrough_first(4)).unwrap();
        assert!(out.max_abs_diff(&t) < 1e-15);
        let out = relationship_descriptor(&t, &Mat::zeros(1, 4), &Affine::passthrough_first(4)).unwrap();
        assert_eq!(out, Mat::zeros(6, 4));
        let g = Mat::random_normal(1, 4, 1.0, &mut rng);
        let out = relationship_descriptor(&t, &g, &Affine::passthrough_second(4)).unwrap();
        assert_eq!(out, t);
        assert!(relationship_descriptor(&t, &Mat::zeros(1, 3), &Affine::passthrough_first(4)).is_err());
    }

    #[test]
    fn score_map_examples() {
        let mut b = random_bundle(2, 2, 5, 2, 2, 3);
        let row = b.text.row(3).to_vec();
        b.pixels.row_mut(1).copy_from_slice(&row);
        b.pixels.row_mut(2).copy_from_slice(&[0.0; 5]);
        let s = score_map(&b).unwrap();
        assert!((s.data[(1, 3)] - 1.0).abs() < 1e-15);
        // zero pixel row: cosine 0 everywhere
        assert!(s.data.row(2).iter().all(|&v| v == 0.0));

        let mut b2 = b.clone();
        b2.text = Mat::from_fn(4, 5, |r, c| if c == r { 1.0 } else { 0.0 });
        b2.pixels = Mat::from_fn(4, 5, |r, c| if c == 4 { 1.0 + r as f64 } else { 0.0 });
        let s = score_map(&b2).unwrap();
        assert!(s.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_map_matches_naive_loop() {
        let b = random_bundle(3, 2, 6, 3, 2, 4);
        let s = score_map(&b).unwrap();
        for m in 0..6 {
            for j in 0..6 {
                let p = b.pixels.row(m);
                let t = b.text.row(j);
                let want = dot(p, t) / (dot(p, p).sqrt() * dot(t, t).sqrt());
                assert!((s.data[(m, j)] - want).abs() < 1e-12);
            }
        }
        assert!(s.data.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn mps_single_prompt_is_scaled_score() {
        let b = random_bundle(3, 1, 4, 2, 3, 5);
        let s = score_map(&b).unwrap();
        let r = mps(&s, &SinkhornConfig::default()).unwrap();
        assert!(r.data.max_abs_diff(&s.data.scale(1.0 / 6.0)) < 1e-15);
        for p in &r.plans {
            assert!(p.plan.max_abs_diff(&Mat::filled(6, 1, 1.0 / 6.0)) < 1e-15);
        }
    }

    #[test]
    fn mps_constant_score() {
        let s = ScoreMap::new(Mat::filled(4, 6, 0.3), 2, 3, 2, 2).unwrap();
        let r = mps(&s, &SinkhornConfig::default()).unwrap();
        for p in &r.plans {
            assert!(p.plan.max_abs_diff(&Mat::filled(4, 3, 1.0 / 12.0)) < 1e-15);
        }
        assert!(r.data.max_abs_diff(&Mat::filled(4, 2, 0.3 / 4.0)) < 1e-15);
    }

    #[test]
    fn mps_reduction_identity_and_feasibility() {
        let b = random_bundle(3, 4, 8, 3, 3, 6);
        let s = score_map(&b).unwrap();
        let cfg = SinkhornConfig::new(0.1, 500, 1e-9).unwrap();
        let r = mps(&s, &cfg).unwrap();
        for k in 0..3 {
            for m in 0..9 {
                let want: f64 = (0..4).map(|n| r.plans[k].plan[(m, n)] * s.data[(m, k * 4 + n)]).sum();
                assert!((r.data[(m, k)] - want).abs() < 1e-10);
            }
            assert!(r.plans[k].marginal_err <= cfg.tol);
        }
    }

    #[test]
    fn mps_grad_examples() {
        let b = random_bundle(2, 3, 5, 2, 3, 7);
        let s = score_map(&b).unwrap();
        let cfg = SinkhornConfig::fixed(0.5, 30);
        assert_eq!(mps_grad(&s, &cfg, &Mat::zeros(6, 2)).unwrap(), Mat::zeros(6, 6));

        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let up = Mat::random_normal(6, 2, 1.0, &mut rng);
        let g = mps_grad(&s, &cfg, &up).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let sm = ScoreMap::new(x.clone(), 2, 3, 2, 3).unwrap();
                mps(&sm, &cfg).unwrap().data.hadamard(&up).unwrap().sum()
            },
            &s.data,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g, &fd) < 1e-4);

        let b1 = random_bundle(3, 1, 4, 2, 2, 8);
        let s1 = score_map(&b1).unwrap();
        let up = Mat::random_normal(4, 3, 1.0, &mut rng);
        let g = mps_grad(&s1, &cfg, &up).unwrap();
        assert!(g.max_abs_diff(&up.scale(0.25)) < 1e-15);
    }

    #[test]
    fn mps_graph_matches_direct() {
        let b = random_bundle(2, 3, 5, 3, 3, 9);
        let s = score_map(&b).unwrap();
        let cfg = SinkhornConfig::default();
        let direct = mps(&s, &cfg).unwrap();
        let tape = Tape::new();
        let (out, _) = mps_graph(tape.var(s.data.clone()), 2, 3, &cfg).unwrap();
        assert!(out.value().max_abs_diff(&direct.data) < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn class_permutation_permutes_columns(seed in 0u64..500) {
            let b = random_bundle(3, 2, 6, 2, 3, seed);
            let s = score_map(&b).unwrap();
            let perm = [2usize, 0, 1];
            let cols: Vec<usize> = perm.iter().flat_map(|&k| [k * 2, k * 2 + 1]).collect();
            let sp = ScoreMap::new(s.data.select_cols(&cols), 3, 2, 2, 3).unwrap();
            let cfg = SinkhornConfig::default();
            let r = mps(&s, &cfg).unwrap();
            let rp = mps(&sp, &cfg).unwrap();
            prop_assert!(rp.data.max_abs_diff(&r.data.select_cols(&perm)) < 1e-12);
        }

        #[test]
        fn prompt_permutation_invariance(seed in 0u64..500) {
            let b = random_bundle(2, 4, 6, 3, 2, seed);
            let s = score_map(&b).unwrap();
            let cols = [2usize, 0, 3, 1, 5, 7, 4, 6];
            let sp = ScoreMap::new(s.data.select_cols(&cols), 2, 4, 3, 2).unwrap();
            let cfg = SinkhornConfig::fixed(0.1, 40);
            let r = mps(&s, &cfg).unwrap();
            let rp = mps(&sp, &cfg).unwrap();
            prop_assert!(rp.data.max_abs_diff(&r.data) < 1e-10);
        }
    }

    #[test]
    fn correlation_and_spread_extremes() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let same = Mat::from_fn(4, 2, |r, _| a[r]);
        assert!((prompt_correlation(std::slice::from_ref(&same)) - 1.0).abs() < 1e-12);
        assert!(prompt_spread(std::slice::from_ref(&same)).abs() < 1e-12);
        let flipped = Mat::from_fn(4, 2, |r, c| if c == 0 { a[r] } else { -a[r] });
        assert!((prompt_correlation(std::slice::from_ref(&flipped)) + 1.0).abs() < 1e-12);
        assert!((prompt_spread(std::slice::from_ref(&flipped)) - 1.0).abs() < 1e-12);
        assert_eq!(prompt_correlation(&[Mat::filled(3, 2, 1.0)]), 0.0);
    }

    proptest! {
        #[test]
        fn two_prompt_spread_is_half_decorrelation(v in proptest::collection::vec(-3.0f64..3.0, 16)) {
            let m = Mat::from_fn(8, 2, |r, c| v[2 * r + c]);
            let maps = [m];
            let corr = prompt_correlation(&maps);
            prop_assume!(corr != 0.0 || prompt_spread(&maps) != 0.0);
            prop_assert!((prompt_spread(&maps) - (1.0 - corr) / 2.0).abs() < 1e-9);
        }
    }
}

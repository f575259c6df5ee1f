use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logsumexp, sum_slice, Mat};

/// Solver settings for [`sinkhorn_log`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularisation weight, strictly positive.
    pub epsilon: f64,
    /// Cap on full (row + column) iterations.
    pub max_iters: usize,
    /// Stop once the L1 marginal violation of the implied plan is at most this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn new(epsilon: f64, max_iters: usize, tol: f64) -> Result<Self> {
        let cfg = SinkhornConfig {
            epsilon,
            max_iters,
            tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fixed iteration count: `tol = 0` never triggers early exit.
    pub fn fixed(epsilon: f64, iters: usize) -> Self {
        SinkhornConfig {
            epsilon,
            max_iters: iters,
            tol: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("tol", format!("must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Source and target probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    mu: Vec<f64>,
    nu: Vec<f64>,
}

impl Marginals {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        for (name, v) in [("mu", &mu), ("nu", &nu)] {
            if v.is_empty() {
                return Err(Error::Input(format!("{name} is empty")));
            }
            if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Input(format!("{name} has negative or non-finite entries")));
            }
            let s: f64 = sum_slice(v);
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!("{name} sums to {s}, expected 1")));
            }
        }
        Ok(Marginals { mu, nu })
    }

    pub fn uniform(m: usize, n: usize) -> Self {
        assert!(m > 0 && n > 0, "uniform marginals need positive sizes");
        Marginals {
            mu: vec![1.0 / m as f64; m],
            nu: vec![1.0 / n as f64; n],
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// Reorders the source side: entry `i` of the result is `mu[perm[i]]`.
    pub fn permute_source(&self, perm: &[usize]) -> Self {
        Marginals {
            mu: perm.iter().map(|&p| self.mu[p]).collect(),
            nu: self.nu.clone(),
        }
    }
}

/// Output of a Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Mat,
    /// Full iterations performed (a half iteration counts as one).
    pub iters_used: usize,
    /// `|rows - mu|_1 + |cols - nu|_1` of `plan`.
    pub marginal_err: f64,
    /// Log-scale row potential.
    pub dual_a: Vec<f64>,
    /// Log-scale column potential.
    pub dual_b: Vec<f64>,
}

/// Forward record kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct UnrolledSinkhorn {
    /// `-C / epsilon`.
    log_kernel: Mat,
    log_mu: Vec<f64>,
    log_nu: Vec<f64>,
    epsilon: f64,
    /// Potentials after every row update.
    a_hist: Vec<Vec<f64>>,
    /// Potentials after every column update; `b_hist[0]` is the zero start.
    b_hist: Vec<Vec<f64>>,
    half_steps: usize,
    pub(crate) result: TransportPlan,
}

fn check_inputs(cost: &Mat, marg: &Marginals, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config("epsilon", format!("must be > 0, got {epsilon}")));
    }
    if !cost.is_finite() {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    if cost.rows() != marg.mu.len() || cost.cols() != marg.nu.len() {
        return Err(Error::shape(
            "sinkhorn",
            format!("{}x{}", marg.mu.len(), marg.nu.len()),
            format!("{}x{}", cost.rows(), cost.cols()),
        ));
    }
    Ok(())
}

fn materialize(log_kernel: &Mat, a: &[f64], b: &[f64]) -> Mat {
    Mat::from_fn(log_kernel.rows(), log_kernel.cols(), |i, j| {
        (a[i] + log_kernel[(i, j)] + b[j]).exp()
    })
}

fn marginal_violation(plan: &Mat, marg: &Marginals) -> f64 {
    let rows: f64 = plan
        .row_sums()
        .iter()
        .zip(&marg.mu)
        .map(|(s, m)| (s - m).abs())
        .sum();
    let cols: f64 = plan
        .col_sums()
        .iter()
        .zip(&marg.nu)
        .map(|(s, n)| (s - n).abs())
        .sum();
    rows + cols
}

/// Runs up to `max_half_steps` alternating updates (row first).
///
/// Convergence is checked after every half step when `check_each_half` is
/// set, otherwise only after column updates.
pub(crate) fn run_unrolled(
    cost: &Mat,
    marg: &Marginals,
    epsilon: f64,
    max_half_steps: usize,
    tol: f64,
    check_each_half: bool,
) -> Result<UnrolledSinkhorn> {
    check_inputs(cost, marg, epsilon)?;
    let (m, n) = cost.shape();
    let log_kernel = cost.scale(-1.0 / epsilon);
    let log_mu: Vec<f64> = marg.mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = marg.nu.iter().map(|v| v.ln()).collect();

    let mut a_hist: Vec<Vec<f64>> = Vec::new();
    let mut b_hist: Vec<Vec<f64>> = vec![vec![0.0; n]];
    let mut scratch_row = vec![0.0; n];
    let mut scratch_col = vec![0.0; m];
    let mut half_steps = 0;
    let mut plan = Mat::zeros(m, n);
    let mut err = f64::INFINITY;

    while half_steps < max_half_steps.max(1) {
        if half_steps % 2 == 0 {
            let b = b_hist.last().unwrap();
            let a: Vec<f64> = (0..m)
                .map(|i| {
                    if log_mu[i] == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    for j in 0..n {
                        scratch_row[j] = log_kernel[(i, j)] + b[j];
                    }
                    log_mu[i] - logsumexp(&scratch_row)
                })
                .collect();
            a_hist.push(a);
        } else {
            let a = a_hist.last().unwrap();
            let b: Vec<f64> = (0..n)
                .map(|j| {
                    if log_nu[j] == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    for i in 0..m {
                        scratch_col[i] = log_kernel[(i, j)] + a[i];
                    }
                    log_nu[j] - logsumexp(&scratch_col)
                })
                .collect();
            b_hist.push(b);
        }
        half_steps += 1;

        let is_last = half_steps >= max_half_steps;
        if check_each_half || half_steps % 2 == 0 || is_last {
            plan = materialize(&log_kernel, a_hist.last().unwrap(), b_hist.last().unwrap());
            err = marginal_violation(&plan, marg);
            if err <= tol {
                break;
            }
        }
    }

    if !plan.is_finite() {
        return Err(Error::Input("Sinkhorn produced a non-finite plan".into()));
    }
    let result = TransportPlan {
        plan,
        iters_used: half_steps.div_ceil(2),
        marginal_err: err,
        dual_a: a_hist.last().unwrap().clone(),
        dual_b: b_hist.last().unwrap().clone(),
    };
    Ok(UnrolledSinkhorn {
        log_kernel,
        log_mu,
        log_nu,
        epsilon,
        a_hist,
        b_hist,
        half_steps,
        result,
    })
}

/// Reverse pass of [`run_unrolled`]: gradient of `<upstream, plan>` with
/// respect to the cost, through exactly the updates the forward pass ran.
pub(crate) fn sinkhorn_vjp(fwd: &UnrolledSinkhorn, upstream: &Mat) -> Mat {
    let plan = &fwd.result.plan;
    let (m, n) = plan.shape();
    assert_eq!(upstream.shape(), (m, n), "upstream shape mismatch");
    let lk = &fwd.log_kernel;

    let mut g_kernel = Mat::zeros(m, n);
    let mut g_a = vec![0.0; m];
    let mut g_b = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let g = upstream[(i, j)] * plan[(i, j)];
            g_kernel[(i, j)] = g;
            g_a[i] += g;
            g_b[j] += g;
        }
    }

    let mut ai = fwd.a_hist.len();
    let mut bi = fwd.b_hist.len() - 1;
    for step in (0..fwd.half_steps).rev() {
        if step % 2 == 1 {
            // b_j = log nu_j - LSE_i(L_ij + a_i), with a = a_hist[ai - 1]
            let a = &fwd.a_hist[ai - 1];
            let b = &fwd.b_hist[bi];
            for j in 0..n {
                if fwd.log_nu[j] == f64::NEG_INFINITY || g_b[j] == 0.0 {
                    continue;
                }
                for i in 0..m {
                    if a[i] == f64::NEG_INFINITY {
                        continue;
                    }
                    let w = (lk[(i, j)] + a[i] + b[j] - fwd.log_nu[j]).exp();
                    let t = g_b[j] * w;
                    g_kernel[(i, j)] -= t;
                    g_a[i] -= t;
                }
            }
            g_b.iter_mut().for_each(|v| *v = 0.0);
            bi -= 1;
        } else {
            // a_i = log mu_i - LSE_j(L_ij + b_j), with b = b_hist[bi]
            let a = &fwd.a_hist[ai - 1];
            let b = &fwd.b_hist[bi];
            for i in 0..m {
                if fwd.log_mu[i] == f64::NEG_INFINITY || g_a[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    if b[j] == f64::NEG_INFINITY {
                        continue;
                    }
                    let w = (lk[(i, j)] + b[j] + a[i] - fwd.log_mu[i]).exp();
                    let t = g_a[i] * w;
                    g_kernel[(i, j)] -= t;
                    g_b[j] -= t;
                }
            }
            g_a.iter_mut().for_each(|v| *v = 0.0);
            ai -= 1;
        }
    }
    // The initial zero column potential is a constant; its gradient is dropped.
    g_kernel.scale(-1.0 / fwd.epsilon)
}

/// Entropic OT plan `diag(e^a) exp(-C/eps) diag(e^b)` by log-domain
/// alternating updates starting from `b = 0`.
pub fn sinkhorn_log(cost: &Mat, marg: &Marginals, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    Ok(run_unrolled(cost, marg, cfg.epsilon, 2 * cfg.max_iters, cfg.tol, false)?.result)
}

/// Alternating normalisation counted in half steps (row, column, row, ...),
/// the convention used by Sinkhorn attention: one step is a plain row
/// softmax scaled by `mu`.
pub fn sinkhorn_normalize(
    cost: &Mat,
    marg: &Marginals,
    epsilon: f64,
    normalizations: usize,
    tol: f64,
) -> Result<TransportPlan> {
    if normalizations == 0 {
        return Err(Error::config("normalizations", "must be >= 1"));
    }
    Ok(run_unrolled(cost, marg, epsilon, normalizations, tol, true)?.result)
}

/// Plan after the first row update only: row `i` is `mu_i * softmax(-C_i / eps)`.
pub fn sinkhorn_one_step(cost: &Mat, marg: &Marginals, epsilon: f64) -> Result<Mat> {
    Ok(run_unrolled(cost, marg, epsilon, 1, 0.0, true)?.result.plan)
}

/// Gradient of `<upstream, T*(C)>` with respect to `C`.
pub fn sinkhorn_grad(
    cost: &Mat,
    marg: &Marginals,
    cfg: &SinkhornConfig,
    upstream: &Mat,
) -> Result<Mat> {
    cfg.validate()?;
    let fwd = run_unrolled(cost, marg, cfg.epsilon, 2 * cfg.max_iters, cfg.tol, false)?;
    if upstream.shape() != cost.shape() {
        return Err(Error::shape(
            "sinkhorn_grad",
            format!("{}x{}", cost.rows(), cost.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    Ok(sinkhorn_vjp(&fwd, upstream))
}

fn xlogx_sum(plan: &Mat) -> f64 {
    plan.data()
        .iter()
        .map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 })
        .sum()
}

fn check_plan_cost(plan: &Mat, cost: &Mat) -> Result<()> {
    if plan.shape() != cost.shape() {
        return Err(Error::shape(
            "ot_objective",
            format!("{}x{}", cost.rows(), cost.cols()),
            format!("{}x{}", plan.rows(), plan.cols()),
        ));
    }
    if plan.data().iter().any(|&t| t < 0.0) {
        return Err(Error::Input("transport plan has negative entries".into()));
    }
    Ok(())
}

/// `<T, C> - eps * sum T log T` with `0 log 0 = 0`.
///
/// The entropy term enters with a minus sign on `sum T log T`. The plan
/// returned by [`sinkhorn_log`] minimises [`entropic_objective`] instead.
pub fn ot_objective(plan: &Mat, cost: &Mat, epsilon: f64) -> Result<f64> {
    check_plan_cost(plan, cost)?;
    Ok(plan.hadamard(cost)?.sum() - epsilon * xlogx_sum(plan))
}

/// `<T, C> + eps * sum T log T`, the objective whose minimiser over the
/// transport polytope is the Sinkhorn fixed point.
pub fn entropic_objective(plan: &Mat, cost: &Mat, epsilon: f64) -> Result<f64> {
    check_plan_cost(plan, cost)?;
    Ok(plan.hadamard(cost)?.sum() + epsilon * xlogx_sum(plan))
}

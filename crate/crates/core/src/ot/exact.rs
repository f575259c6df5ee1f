//! Exact (unregularised) discrete OT for small instances.
//!
//! Two independent routes: enumeration of every basic feasible solution
//! (spanning trees of the bipartite row/column graph) and a two-phase
//! tableau simplex with Bland's rule. [`exact_ot`] uses enumeration when the
//! number of candidate bases is small and the simplex otherwise.

use super::Marginals;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Largest `M * N` accepted by [`exact_ot`].
pub const EXACT_OT_MAX_CELLS: usize = 64;

const ENUMERATION_LIMIT: f64 = 2.0e5;
const FEAS_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ExactOt {
    pub plan: Mat,
    pub value: f64,
}

fn check(cost: &Mat, marg: &Marginals) -> Result<()> {
    if cost.rows() * cost.cols() > EXACT_OT_MAX_CELLS {
        return Err(Error::Size(format!(
            "exact_ot supports at most {EXACT_OT_MAX_CELLS} cells, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    if cost.rows() != marg.mu().len() || cost.cols() != marg.nu().len() {
        return Err(Error::shape(
            "exact_ot",
            format!("{}x{}", marg.mu().len(), marg.nu().len()),
            format!("{}x{}", cost.rows(), cost.cols()),
        ));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact optimum of `min <T, C>` over the transport polytope.
pub fn exact_ot(cost: &Mat, marg: &Marginals) -> Result<ExactOt> {
    check(cost, marg)?;
    let (m, n) = cost.shape();
    if binomial(m * n, m + n - 1) <= ENUMERATION_LIMIT {
        let verts = enumerate_vertices(cost, marg)?;
        let best = verts
            .into_iter()
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .expect("transport polytope is non-empty");
        Ok(best)
    } else {
        simplex(cost, marg)
    }
}

/// Every distinct vertex of the transport polytope with its cost, sorted
/// by increasing cost.
pub fn enumerate_vertices(cost: &Mat, marg: &Marginals) -> Result<Vec<ExactOt>> {
    check(cost, marg)?;
    let (m, n) = cost.shape();
    let nodes = m + n;
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let mut out: Vec<ExactOt> = Vec::new();
    let mut chosen = Vec::with_capacity(nodes - 1);
    let mut parent: Vec<usize> = (0..nodes).collect();

    fn find(parent: &[usize], mut x: usize) -> usize {
        while parent[x] != x {
            x = parent[x];
        }
        x
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        start: usize,
        cells: &[(usize, usize)],
        m: usize,
        need: usize,
        chosen: &mut Vec<usize>,
        parent: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if chosen.len() == need {
            visit(chosen);
            return;
        }
        let remaining = need - chosen.len();
        for idx in start..cells.len() {
            if cells.len() - idx < remaining {
                break;
            }
            let (i, j) = cells[idx];
            let (ri, rj) = (find(parent, i), find(parent, m + j));
            if ri == rj {
                continue;
            }
            parent[ri] = rj;
            chosen.push(idx);
            recurse(idx + 1, cells, m, need, chosen, parent, visit);
            chosen.pop();
            parent[ri] = ri;
        }
    }

    let mut visit = |tree: &[usize]| {
        if let Some(plan) = tree_flows(tree, &cells, marg, m, n) {
            let value = plan.hadamard(cost).unwrap().sum();
            if !out.iter().any(|v| v.plan.max_abs_diff(&plan) < 1e-12) {
                out.push(ExactOt { plan, value });
            }
        }
    };
    recurse(0, &cells, m, nodes - 1, &mut chosen, &mut parent, &mut visit);
    out.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(out)
}

/// Flows on a spanning tree by leaf peeling; `None` if any flow is negative.
fn tree_flows(
    tree: &[usize],
    cells: &[(usize, usize)],
    marg: &Marginals,
    m: usize,
    n: usize,
) -> Option<Mat> {
    let mut supply: Vec<f64> = marg.mu().iter().chain(marg.nu()).copied().collect();
    let mut degree = vec![0usize; m + n];
    for &e in tree {
        let (i, j) = cells[e];
        degree[i] += 1;
        degree[m + j] += 1;
    }
    let mut alive = vec![true; tree.len()];
    let mut plan = Mat::zeros(m, n);
    for _ in 0..tree.len() {
        let (k, &e) = tree
            .iter()
            .enumerate()
            .find(|&(k, &e)| {
                let (i, j) = cells[e];
                alive[k] && (degree[i] == 1 || degree[m + j] == 1)
            })?;
        let (i, j) = cells[e];
        let (leaf, other) = if degree[i] == 1 { (i, m + j) } else { (m + j, i) };
        let flow = supply[leaf];
        if flow < -FEAS_TOL {
            return None;
        }
        plan[(i, j)] = flow.max(0.0);
        supply[leaf] = 0.0;
        supply[other] -= flow;
        degree[leaf] -= 1;
        degree[other] -= 1;
        alive[k] = false;
    }
    Some(plan)
}

/// Two-phase tableau simplex with Bland's anti-cycling rule.
fn simplex(cost: &Mat, marg: &Marginals) -> Result<ExactOt> {
    let (m, n) = cost.shape();
    let nv = m * n;
    // Row constraints for all rows, column constraints for the first n-1
    // columns; the last column constraint is implied.
    let nc = m + n - 1;
    let na = nc;
    let width = nv + na + 1;
    let mut tab = vec![vec![0.0; width]; nc];
    for i in 0..m {
        for j in 0..n {
            tab[i][i * n + j] = 1.0;
        }
        tab[i][width - 1] = marg.mu()[i];
    }
    for j in 0..n - 1 {
        for i in 0..m {
            tab[m + j][i * n + j] = 1.0;
        }
        tab[m + j][width - 1] = marg.nu()[j];
    }
    for (r, row) in tab.iter_mut().enumerate() {
        row[nv + r] = 1.0;
    }
    let mut basis: Vec<usize> = (nv..nv + na).collect();

    let phase1: Vec<f64> = (0..nv + na).map(|v| if v >= nv { 1.0 } else { 0.0 }).collect();
    run_simplex(&mut tab, &mut basis, &phase1, nv + na)?;

    // Pivot remaining (zero-level) artificials out of the basis.
    for r in 0..nc {
        if basis[r] >= nv {
            if let Some(col) = (0..nv).find(|&c| tab[r][c].abs() > 1e-9) {
                pivot(&mut tab, &mut basis, r, col);
            }
        }
    }

    let mut phase2: Vec<f64> = cost.data().to_vec();
    phase2.resize(nv + na, 0.0);
    run_simplex(&mut tab, &mut basis, &phase2, nv)?;

    let mut plan = Mat::zeros(m, n);
    for (r, &b) in basis.iter().enumerate() {
        if b < nv {
            plan[(b / n, b % n)] = tab[r][width - 1].max(0.0);
        }
    }
    let value = plan.hadamard(cost)?.sum();
    Ok(ExactOt { plan, value })
}

fn pivot(tab: &mut [Vec<f64>], basis: &mut [usize], r: usize, c: usize) {
    let p = tab[r][c];
    for v in tab[r].iter_mut() {
        *v /= p;
    }
    let prow = tab[r].clone();
    for (k, row) in tab.iter_mut().enumerate() {
        if k != r {
            let f = row[c];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(&prow) {
                    *x -= f * y;
                }
            }
        }
    }
    basis[r] = c;
}

fn run_simplex(tab: &mut [Vec<f64>], basis: &mut [usize], costs: &[f64], allowed: usize) -> Result<()> {
    let width = tab[0].len();
    for _ in 0..10_000 {
        let reduced = |c: usize, tab: &[Vec<f64>]| {
            costs[c]
                - basis
                    .iter()
                    .enumerate()
                    .map(|(r, &b)| costs[b] * tab[r][c])
                    .sum::<f64>()
        };
        let entering = (0..allowed).find(|&c| !basis.contains(&c) && reduced(c, tab) < -1e-11);
        let Some(c) = entering else { return Ok(()) };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..tab.len() {
            if tab[r][c] > 1e-12 {
                let ratio = tab[r][width - 1] / tab[r][c];
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-14 || (ratio <= lratio + 1e-14 && basis[r] < basis[lr]) {
                            Some((r, ratio))
                        } else {
                            Some((lr, lratio))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::Input("transport LP unbounded".into()));
        };
        pivot(tab, basis, r, c);
    }
    Err(Error::Input("simplex iteration limit reached".into()))
}

//! Minimal reverse-mode tape over [`Mat`] values.
//!
//! Every composite operator in the crate (attention variants, the
//! multi-prompt transport score, the decoder, the losses) is written once as
//! a graph on this tape; forward evaluation reads node values and the
//! reverse pass gives gradients for every leaf.

use std::cell::RefCell;
use std::rc::Rc;

use crate::linalg::{matmul, matmul_nt, matmul_tn, softmax_in_place, Mat};
use crate::ot::{run_unrolled, sinkhorn_vjp, Marginals, TransportPlan};

type Backward = Box<dyn Fn(&Mat, &[&Mat], &Mat) -> Vec<Mat>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one scalar output with respect to every node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn of(&self, v: Var<'_>) -> Mat {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Mat::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, parents: Vec<usize>, backward: Option<Backward>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn op<'t>(
        &'t self,
        value: Mat,
        parents: &[Var<'t>],
        backward: impl Fn(&Mat, &[&Mat], &Mat) -> Vec<Mat> + 'static,
    ) -> Var<'t> {
        self.push(
            value,
            parents.iter().map(|p| p.id).collect(),
            Some(Box::new(backward)),
        )
    }

    /// Reverse pass from `out` seeded with `seed` (ones when `None`).
    pub fn backward(&self, out: Var<'_>, seed: Option<Mat>) -> Grads {
        let nodes = self.nodes.borrow();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        let (r, c) = shapes[out.id];
        grads[out.id] = Some(seed.unwrap_or_else(|| Mat::filled(r, c, 1.0)));
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_vals: Vec<&Mat> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
                let pg = bw(&g, &parent_vals, &node.value);
                debug_assert_eq!(pg.len(), node.parents.len());
                for (&p, gp) in node.parents.iter().zip(pg) {
                    match &mut grads[p] {
                        Some(acc) => acc.axpy(1.0, &gp),
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads, shapes }
    }
}

fn broadcast_row(row: &Mat, rows: usize) -> Mat {
    Mat::from_fn(rows, row.cols(), |_, c| row[(0, c)])
}

const LN_EPS: f64 = 1e-5;

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Mat> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = matmul(&self.value(), &rhs.value()).expect("matmul shape");
        self.tape.op(v, &[self, rhs], |g, p, _| {
            vec![matmul_nt(g, p[1]).unwrap(), matmul_tn(p[0], g).unwrap()]
        })
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(self, rhs: Var<'t>) -> Var<'t> {
        let v = matmul_nt(&self.value(), &rhs.value()).expect("matmul_nt shape");
        self.tape.op(v, &[self, rhs], |g, p, _| {
            vec![matmul(g, p[1]).unwrap(), matmul_tn(g, p[0]).unwrap()]
        })
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().add(&rhs.value()).expect("add shape");
        self.tape.op(v, &[self, rhs], |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().sub(&rhs.value()).expect("sub shape");
        self.tape.op(v, &[self, rhs], |g, _, _| vec![g.clone(), g.scale(-1.0)])
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().hadamard(&rhs.value()).expect("mul shape");
        self.tape.op(v, &[self, rhs], |g, p, _| {
            vec![g.hadamard(p[1]).unwrap(), g.hadamard(p[0]).unwrap()]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.op(v, &[self], move |g, _, _| vec![g.scale(s)])
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.tape.op(v, &[self], |g, _, _| vec![g.clone()])
    }

    /// Multiplies every entry by the 1x1 node `s`.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let sv = s.scalar();
        let v = self.value().scale(sv);
        self.tape.op(v, &[self, s], |g, p, _| {
            let gs = g.hadamard(p[0]).unwrap().sum();
            vec![g.scale(p[1][(0, 0)]), Mat::filled(1, 1, gs)]
        })
    }

    /// Adds the 1x1 node `s` to every entry.
    pub fn shift_by(self, s: Var<'t>) -> Var<'t> {
        let sv = s.scalar();
        let v = self.value().map(|x| x + sv);
        self.tape.op(v, &[self, s], |g, _, _| vec![g.clone(), Mat::filled(1, 1, g.sum())])
    }

    /// Adds a 1xC row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let x = self.value();
        let r = row.value();
        assert_eq!((1, x.cols()), r.shape(), "add_row shape");
        let v = x.add(&broadcast_row(&r, x.rows())).unwrap();
        self.tape.op(v, &[self, row], |g, _, _| {
            vec![g.clone(), Mat::row_vector(&g.col_sums())]
        })
    }

    /// Multiplies every row entrywise by a 1xC row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let x = self.value();
        let r = row.value();
        assert_eq!((1, x.cols()), r.shape(), "mul_row shape");
        let v = x.hadamard(&broadcast_row(&r, x.rows())).unwrap();
        self.tape.op(v, &[self, row], |g, p, _| {
            let gx = g.hadamard(&broadcast_row(p[1], g.rows())).unwrap();
            let gr = g.hadamard(p[0]).unwrap().col_sums();
            vec![gx, Mat::row_vector(&gr)]
        })
    }

    /// Column means as a 1xC row.
    pub fn mean_rows(self) -> Var<'t> {
        let x = self.value();
        let n = x.rows() as f64;
        let v = Mat::row_vector(&x.col_sums()).scale(1.0 / n);
        let rows = x.rows();
        self.tape.op(v, &[self], move |g, _, _| vec![broadcast_row(g, rows).scale(1.0 / n)])
    }

    /// Row sums as an Rx1 column.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let v = Mat::column(&x.row_sums());
        let cols = x.cols();
        self.tape.op(v, &[self], move |g, _, _| {
            vec![Mat::from_fn(g.rows(), cols, |r, _| g[(r, 0)])]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.shape();
        self.tape
            .op(Mat::filled(1, 1, x.sum()), &[self], move |g, _, _| vec![Mat::filled(r, c, g[(0, 0)])])
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.op(v, &[self], |g, _, _| vec![g.transpose()])
    }

    pub fn col_block(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let v = x.col_block(start, len);
        self.tape.op(v, &[self], move |g, _, _| {
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..len {
                    out[(r, start + c)] = g[(r, c)];
                }
            }
            vec![out]
        })
    }

    pub fn row_block(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let v = x.row_block(start, len);
        self.tape.op(v, &[self], move |g, _, _| {
            let mut out = Mat::zeros(rows, cols);
            for r in 0..len {
                out.row_mut(start + r).copy_from_slice(g.row(r));
            }
            vec![out]
        })
    }

    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let v = x.select_rows(idx);
        let idx = idx.to_vec();
        self.tape.op(v, &[self], move |g, _, _| {
            let mut out = Mat::zeros(rows, cols);
            for (k, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    out[(r, c)] += g[(k, c)];
                }
            }
            vec![out]
        })
    }

    pub fn select_cols(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let v = x.select_cols(idx);
        let idx = idx.to_vec();
        self.tape.op(v, &[self], move |g, _, _| {
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                for (k, &c) in idx.iter().enumerate() {
                    out[(r, c)] += g[(r, k)];
                }
            }
            vec![out]
        })
    }

    /// `u · self` for a constant matrix `u` (e.g. an interpolation operator).
    pub fn left_mul_const(self, u: Rc<Mat>) -> Var<'t> {
        let v = matmul(&u, &self.value()).expect("left_mul_const shape");
        self.tape.op(v, &[self], move |g, _, _| vec![matmul_tn(&u, g).unwrap()])
    }

    pub fn l2_normalize_rows(self) -> Var<'t> {
        let x = self.value();
        let norms: Vec<f64> = (0..x.rows()).map(|r| crate::linalg::dot(x.row(r), x.row(r)).sqrt()).collect();
        let v = Mat::from_fn(x.rows(), x.cols(), |r, c| {
            if norms[r] > 0.0 {
                x[(r, c)] / norms[r]
            } else {
                0.0
            }
        });
        self.tape.op(v, &[self], move |g, _, y| {
            let mut out = Mat::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                if norms[r] == 0.0 {
                    continue;
                }
                let gy = crate::linalg::dot(g.row(r), y.row(r));
                for c in 0..g.cols() {
                    out[(r, c)] = (g[(r, c)] - y[(r, c)] * gy) / norms[r];
                }
            }
            vec![out]
        })
    }

    /// Per-row standardisation (zero mean, unit variance), no affine part.
    pub fn layer_norm_rows(self) -> Var<'t> {
        let x = self.value();
        let d = x.cols() as f64;
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut v = x.as_ref().clone();
        for r in 0..x.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * is;
            }
            inv_std.push(is);
        }
        self.tape.op(v, &[self], move |g, _, y| {
            let mut out = Mat::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let gm = g.row(r).iter().sum::<f64>() / d;
                let gym = crate::linalg::dot(g.row(r), y.row(r)) / d;
                for c in 0..g.cols() {
                    out[(r, c)] = inv_std[r] * (g[(r, c)] - gm - y[(r, c)] * gym);
                }
            }
            vec![out]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let v = self.value().map(|x| 0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh()));
        self.tape.op(v, &[self], |g, p, _| {
            let d = p[0].map(|x| {
                let t = (K * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x)
            });
            vec![g.hadamard(&d).unwrap()]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.tape.op(v, &[self], |g, _, y| {
            vec![g.zip_map(y, |gv, s| gv * s * (1.0 - s)).unwrap()]
        })
    }

    pub fn row_softmax(self) -> Var<'t> {
        let mut v = self.value().as_ref().clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.tape.op(v, &[self], |g, _, y| {
            let mut out = Mat::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let gy = crate::linalg::dot(g.row(r), y.row(r));
                for c in 0..g.cols() {
                    out[(r, c)] = y[(r, c)] * (g[(r, c)] - gy);
                }
            }
            vec![out]
        })
    }

    /// Entropic transport plan for cost `self`, differentiated through the
    /// exact unrolled update sequence. `half_steps` counts row and column
    /// updates separately.
    pub fn sinkhorn(
        self,
        marg: &Marginals,
        epsilon: f64,
        half_steps: usize,
        tol: f64,
        check_each_half: bool,
    ) -> crate::error::Result<(Var<'t>, TransportPlan)> {
        let fwd = run_unrolled(&self.value(), marg, epsilon, half_steps, tol, check_each_half)?;
        let result = fwd.result.clone();
        let v = fwd.result.plan.clone();
        let fwd = Rc::new(fwd);
        let out = self.tape.op(v, &[self], move |g, _, _| vec![sinkhorn_vjp(&fwd, g)]);
        Ok((out, result))
    }

    /// Concatenates nodes with equal row counts left to right.
    pub fn hcat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for v in &vals {
            assert_eq!(v.rows(), rows, "hcat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        tape.op(out, parts, move |g, _, _| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let b = g.col_block(off, w);
                    off += w;
                    b
                })
                .collect()
        })
    }

    /// Stacks nodes with equal column counts top to bottom.
    pub fn vcat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        let heights: Vec<usize> = vals.iter().map(|v| v.rows()).collect();
        let mut data = Vec::new();
        for v in &vals {
            assert_eq!(v.cols(), cols, "vcat col mismatch");
            data.extend_from_slice(v.data());
        }
        let out = Mat::from_vec(heights.iter().sum(), cols, data).unwrap();
        tape.op(out, parts, move |g, _, _| {
            let mut off = 0;
            heights
                .iter()
                .map(|&h| {
                    let b = g.row_block(off, h);
                    off += h;
                    b
                })
                .collect()
        })
    }

    /// Escape hatch for operators with a hand-written vector-Jacobian product.
    pub fn custom(
        parents: &[Var<'t>],
        value: Mat,
        backward: impl Fn(&Mat, &[&Mat], &Mat) -> Vec<Mat> + 'static,
    ) -> Var<'t> {
        parents[0].tape.op(value, parents, backward)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_unary(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, x: &Mat, tol: f64) {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = f(xv);
        let w = Mat::random_normal(y.shape().0, y.shape().1, 1.0, &mut rng);
        let wv = tape.var(w.clone());
        let loss = y.mul(wv).sum();
        let g = tape.backward(loss, None).of(xv);
        let fd = finite_diff_grad(
            |m| {
                let t = Tape::new();
                let y = f(t.var(m.clone()));
                y.value().hadamard(&w).unwrap().sum()
            },
            x,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&g, &fd);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::random_normal(4, 5, 1.0, &mut rng);
        check_unary(|v| v.l2_normalize_rows(), &x, 1e-7);
        check_unary(|v| v.layer_norm_rows(), &x, 1e-7);
        check_unary(|v| v.gelu(), &x, 1e-7);
        check_unary(|v| v.sigmoid(), &x, 1e-7);
        check_unary(|v| v.row_softmax(), &x, 1e-7);
        check_unary(|v| v.mean_rows(), &x, 1e-7);
        check_unary(|v| v.sum_cols(), &x, 1e-7);
        check_unary(|v| v.transpose().col_block(1, 2), &x, 1e-7);
        check_unary(|v| v.select_rows(&[3, 0, 3]).select_cols(&[4, 1]), &x, 1e-7);
        check_unary(|v| Var::hcat(&[v, v.scale(2.0)]), &x, 1e-7);
        check_unary(|v| Var::vcat(&[v.row_block(1, 2), v]), &x, 1e-7);
        check_unary(|v| v.matmul_nt(v).add_scalar(1.0), &x, 1e-7);
        check_unary(|v| v.mul_row(v.mean_rows()).add_row(v.row_block(0, 1)), &x, 1e-7);
        check_unary(|v| v.scale_by(v.row_block(0, 1).col_block(0, 1)), &x, 1e-7);
        check_unary(|v| v.shift_by(v.sum()), &x, 1e-7);
    }

    #[test]
    fn sinkhorn_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Mat::random_normal(5, 3, 1.0, &mut rng);
        let marg = Marginals::uniform(5, 3);
        check_unary(
            move |v| v.sinkhorn(&marg, 0.4, 9, 0.0, false).unwrap().0,
            &x,
            1e-6,
        );
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(Mat::filled(2, 2, 1.0));
        let b = tape.var(Mat::filled(3, 1, 1.0));
        let g = tape.backward(a.sum(), None);
        assert_eq!(g.of(b), Mat::zeros(3, 1));
        assert_eq!(g.of(a), Mat::filled(2, 2, 1.0));
    }
}

//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! then accumulates gradients from a scalar output back to every node.

use nalgebra::DMatrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape, which indexes the gradients from `backward`.
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    ColMean(Var),
    SumRows(Var),
    SumAll(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Transpose(Var),
    SelectCol(Var, usize),
    ConcatCols(Vec<Var>),
    LogSumExpRows(Var),
    GaussPairwise(Var, Var, Var),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn col_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

fn row_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), 1, |i, _| m.row(i).sum())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + r` with the row vector `r` added to every row.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let rv = self.value(r).clone();
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            row += &rv;
        }
        self.push(v, Op::AddRow(a, r))
    }

    /// Every row of `a` multiplied elementwise by the row vector `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let rv = self.value(r).clone();
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            row.component_mul_assign(&rv);
        }
        self.push(v, Op::MulRow(a, r))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::AddScalar(a))
    }

    /// `a` times the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar(s);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    /// Column means as a 1×n row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows() as f64;
        let v = col_sum(self.value(a)) / n;
        self.push(v, Op::ColMean(a))
    }

    /// Row sums as a B×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = row_sum(self.value(a));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Repeats the 1×n row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let r = self.value(a).clone();
        let v = DMatrix::from_fn(rows, r.ncols(), |_, j| r[(0, j)]);
        self.push(v, Op::BroadcastRows(a))
    }

    /// Repeats the B×1 column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let c = self.value(a).clone();
        let v = DMatrix::from_fn(c.nrows(), cols, |i, _| c[(i, 0)]);
        self.push(v, Op::BroadcastCols(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn select_col(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a).columns(j, 1).into_owned();
        self.push(v, Op::SelectCol(a, j))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            v.columns_mut(at, m.ncols()).copy_from(m);
            at += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `log Σ_j exp(a_ij)` per row, as a B×1 column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = DMatrix::from_fn(m.nrows(), 1, |i, _| {
            let mx = m.row(i).max();
            mx + m.row(i).iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
        });
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let cols = self.value(a).ncols();
        let lse = self.log_sum_exp_rows(a);
        let b = self.broadcast_cols(lse, cols);
        self.sub(a, b)
    }

    /// `L_ij = log N(z_i; m_j, diag s_j)` for rows of `z` against rows of
    /// `m` and `s`.
    pub fn gauss_pairwise(&mut self, z: Var, m: Var, s: Var) -> Var {
        let (zv, mv, sv) = (self.value(z), self.value(m), self.value(s));
        let q = zv.ncols();
        let log_det: Vec<f64> = (0..mv.nrows())
            .map(|j| sv.row(j).iter().map(|x| x.ln()).sum::<f64>())
            .collect();
        let v = DMatrix::from_fn(zv.nrows(), mv.nrows(), |i, j| {
            let quad: f64 = (0..q)
                .map(|l| (zv[(i, l)] - mv[(j, l)]).powi(2) / sv[(j, l)])
                .sum();
            -0.5 * (quad + log_det[j] + q as f64 * LN_2PI)
        });
        self.push(v, Op::GaussPairwise(z, m, s))
    }

    /// `log N(z_i; m_i, diag s_i)` per row, as a B×1 column.
    pub fn gauss_rowwise(&mut self, z: Var, m: Var, s: Var) -> Var {
        let q = self.value(z).ncols() as f64;
        let d = self.sub(z, m);
        let d2 = self.square(d);
        let inv = self.recip(s);
        let w = self.mul(d2, inv);
        let ls = self.log(s);
        let t = self.add(w, ls);
        let r = self.sum_rows(t);
        let r = self.scale(r, -0.5);
        self.add_scalar(r, -0.5 * q * LN_2PI)
    }

    /// Gradients of the 1×1 node `out` with respect to every leaf. Entries
    /// for intermediate nodes are consumed during the sweep and come back
    /// as `None`.
    pub fn backward(&self, out: Var) -> Vec<Option<DMatrix<f64>>> {
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, d: DMatrix<f64>| match &mut grads[v.0] {
                Some(e) => *e += d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, &g * self.value(*b).transpose());
                    acc(*b, self.value(*a).transpose() * &g);
                }
                Op::AddRow(a, r) => {
                    acc(*r, col_sum(&g));
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let rv = self.value(*r);
                    let mut ga = g.clone();
                    for mut row in ga.row_iter_mut() {
                        row.component_mul_assign(rv);
                    }
                    acc(*r, col_sum(&g.component_mul(self.value(*a))));
                    acc(*a, ga);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.component_mul(self.value(*b)));
                    acc(*b, g.component_mul(self.value(*a)));
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddScalar(a) => acc(*a, g),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    acc(*s, DMatrix::from_element(1, 1, g.dot(self.value(*a))));
                    acc(*a, g * sv);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(*a, g.zip_map(av, |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
                Op::Softplus(a) => {
                    acc(*a, g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x)));
                }
                Op::Exp(a) => acc(*a, g.component_mul(&node.value)),
                Op::Log(a) => acc(*a, g.component_div(self.value(*a))),
                Op::Square(a) => acc(*a, g.component_mul(self.value(*a)) * 2.0),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |gi, r| gi / (2.0 * r))),
                Op::Recip(a) => acc(*a, g.zip_map(&node.value, |gi, r| -gi * r * r)),
                Op::ColMean(a) => {
                    let n = self.value(*a).nrows();
                    acc(*a, DMatrix::from_fn(n, g.ncols(), |_, j| g[(0, j)] / n as f64));
                }
                Op::SumRows(a) => {
                    let c = self.value(*a).ncols();
                    acc(*a, DMatrix::from_fn(g.nrows(), c, |i, _| g[(i, 0)]));
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    acc(*a, DMatrix::from_element(av.nrows(), av.ncols(), g[(0, 0)]));
                }
                Op::BroadcastRows(a) => acc(*a, col_sum(&g)),
                Op::BroadcastCols(a) => acc(*a, row_sum(&g)),
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::SelectCol(a, j) => {
                    let av = self.value(*a);
                    let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                    ga.columns_mut(*j, 1).copy_from(&g);
                    acc(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        acc(*p, g.columns(at, c).into_owned());
                        at += c;
                    }
                }
                Op::LogSumExpRows(a) => {
                    let av = self.value(*a);
                    let ga = DMatrix::from_fn(av.nrows(), av.ncols(), |i, j| {
                        g[(i, 0)] * (av[(i, j)] - node.value[(i, 0)]).exp()
                    });
                    acc(*a, ga);
                }
                Op::GaussPairwise(z, m, s) => {
                    let (zv, mv, sv) = (self.value(*z), self.value(*m), self.value(*s));
                    let q = zv.ncols();
                    let mut gz = DMatrix::zeros(zv.nrows(), q);
                    let mut gm = DMatrix::zeros(mv.nrows(), q);
                    let mut gs = DMatrix::zeros(sv.nrows(), q);
                    for i in 0..zv.nrows() {
                        for j in 0..mv.nrows() {
                            let gij = g[(i, j)];
                            if gij == 0.0 {
                                continue;
                            }
                            for l in 0..q {
                                let s_jl = sv[(j, l)];
                                let diff = zv[(i, l)] - mv[(j, l)];
                                let r = diff / s_jl;
                                gz[(i, l)] -= gij * r;
                                gm[(j, l)] += gij * r;
                                gs[(j, l)] += gij * 0.5 * (r * r - 1.0 / s_jl);
                            }
                        }
                    }
                    acc(*z, gz);
                    acc(*m, gm);
                    acc(*s, gs);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_gradient;

    /// Checks the tape gradient of `build` with respect to its single leaf.
    fn check(shape: (usize, usize), x0: &[f64], build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(DMatrix::from_row_slice(shape.0, shape.1, x));
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.leaf(DMatrix::from_row_slice(shape.0, shape.1, x0));
        let out = build(&mut t, v);
        let g = t.backward(out)[0].clone().unwrap();
        let fd = fd_gradient(eval, x0, None).unwrap();
        let analytic: Vec<f64> = g.transpose().iter().copied().collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{analytic:?} vs {fd:?}");
        }
    }

    const X: [f64; 6] = [0.3, -1.2, 0.8, 1.5, -0.4, 0.9];

    #[test]
    fn elementwise_ops() {
        check((2, 3), &X, |t, v| {
            let a = t.softplus(v);
            let b = t.square(v);
            let c = t.mul(a, b);
            let e = t.exp(v);
            let f = t.add(c, e);
            let r = t.relu(v);
            let f = t.sub(f, r);
            let s = t.add_scalar(f, 3.0);
            let l = t.log(s);
            let q = t.sqrt(s);
            let w = t.recip(q);
            let h = t.add(l, w);
            t.sum_all(h)
        });
    }

    #[test]
    fn matrix_ops() {
        check((2, 3), &X, |t, v| {
            let w = t.constant(DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let h = t.matmul(v, w);
            let r = t.col_mean(v);
            let hr = t.mul_row(v, r);
            let ar = t.add_row(hr, r);
            let c = t.concat_cols(&[h, ar]);
            let sel = t.select_col(c, 3);
            let b = t.broadcast_cols(sel, 2);
            let bt = t.transpose(b);
            let s = t.sum_rows(bt);
            let br = t.transpose(s);
            let br = t.broadcast_rows(br, 3);
            let first = t_first(t, v);
            let sc = t.scale_by(br, first);
            let lse = t.log_softmax_rows(c);
            let a = t.sum_all(sc);
            let b2 = t.sum_all(lse);
            let tot = t.add(a, b2);
            t.scale(tot, 0.5)
        });
    }

    fn t_first(t: &mut Tape, v: Var) -> Var {
        let c = t.select_col(v, 0);
        let c = t.transpose(c);
        let c = t.select_col(c, 1);
        t.square(c)
    }

    #[test]
    fn gaussian_densities() {
        // z, m and s packed into one leaf so a single FD pass covers all
        check((3, 2), &X, |t, v| {
            let z = t.select_col(v, 0);
            let z = t.concat_cols(&[z, z]);
            let m1 = t.select_col(v, 1);
            let m0 = t.select_col(v, 0);
            let m = t.concat_cols(&[m1, m0]);
            let s = t.square(v);
            let s = t.add_scalar(s, 0.5);
            let p = t.gauss_pairwise(z, m, s);
            let r = t.gauss_rowwise(z, m, s);
            let lse = t.log_sum_exp_rows(p);
            let a = t.add(lse, r);
            t.sum_all(a)
        });
    }

    #[test]
    fn rowwise_matches_pairwise_diagonal() {
        let mut t = Tape::new();
        let z = t.leaf(DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.5, 1.0]));
        let m = t.leaf(DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.3, 0.3]));
        let s = t.leaf(DMatrix::from_row_slice(2, 2, &[0.7, 1.3, 0.2, 2.0]));
        let p = t.gauss_pairwise(z, m, s);
        let r = t.gauss_rowwise(z, m, s);
        for i in 0..2 {
            assert!((t.value(p)[(i, i)] - t.value(r)[(i, 0)]).abs() < 1e-14);
        }
    }
}

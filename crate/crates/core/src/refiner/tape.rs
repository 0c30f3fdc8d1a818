//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Only the handful of operations the refiner needs are supported. Leaf
//! parameters borrow their tensors from the store so a forward pass does
//! not copy weights.

use std::borrow::Cow;

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(usize),
    Const,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
        }
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient is reported under `index`.
    pub fn param(&mut self, index: usize, value: &'p Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(index))
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Cow::Owned(v), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Cow::Owned(v), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Cow::Owned(v), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(Cow::Owned(v), Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(Cow::Owned(v), Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(Cow::Owned(v), Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(Cow::Owned(v), Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(0.0, |acc, &v| acc + v * v) / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column mismatch");
        self.push(Cow::Owned(v), Op::ConcatRows(a, b))
    }

    /// Back-propagates `seed` (the gradient of a scalar w.r.t. `out`)
    /// and adds parameter gradients into `param_grads`.
    pub fn backward(&self, out: Var, seed: Array2<f64>, param_grads: &mut [Array2<f64>]) {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Param(idx) => param_grads[*idx] += &g,
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.dot(&yrow);
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv = yv * (*dv - dot));
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gdx = &g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = gdx.clone();
                    for ((mut dxr, gr), (xr, &is)) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(gdx.rows())
                        .zip(xhat.rows().into_iter().zip(inv_std))
                    {
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        Zip::from(&mut dxr)
                            .and(&gr)
                            .and(&xr)
                            .for_each(|d, &gv, &xv| *d = is * (gv - mean_g - xv * mean_gx));
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    acc(*a, g.slice(ndarray::s![..na, ..]).to_owned());
                    acc(*b, g.slice(ndarray::s![na.., ..]).to_owned());
                }
            }
        }
    }
}

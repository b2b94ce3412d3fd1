//! Reverse-mode differentiation over row-major matrices.
//!
//! Every value on a [`Tape`] is a `rows×cols` matrix. Parameters are read in
//! place from the borrowed [`ParamStore`]; `backward` returns gradients aligned
//! with that store.

use super::gemm::{gemm, MatRef};
use super::tensor::{Grads, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    /// Σ w·x[r, c] over the entries.
    PickSum {
        x: Var,
        entries: Vec<(usize, usize, f64)>,
    },
    Sum(Vec<Var>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        let v = Var(self.nodes.len() as u32);
        self.nodes.push(Node { rows, cols, value, op });
        v
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx()];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.idx()].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.idx()].cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.idx()];
        match n.op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &n.value,
        }
    }

    pub fn row(&self, v: Var, i: usize) -> &[f64] {
        let c = self.cols(v);
        &self.value(v)[i * c..(i + 1) * c]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.shape(v), (1, 1), "not a scalar");
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape")
    }

    /// Constant input (no gradient flows out of the tape).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "input size");
        self.push(rows, cols, data, Op::Input)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.input(t.rows(), t.cols(), t.data().to_vec())
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = self.push(t.rows(), t.cols(), Vec::new(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::n(self.value(a)), MatRef::n(self.value(b)), &mut out, false);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::n(self.value(a)), MatRef::t(self.value(b)), &mut out, false);
        self.push(m, n, out, Op::MatMulBT(a, b))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(b), (1, n), "bias shape");
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(m, n, out, Op::AddRow(x, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Vec<f64>) {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "elementwise shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        (s.0, s.1, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x + y);
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x * y);
        self.push(r, c, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(r, c, out, Op::Tanh(a))
    }

    /// Row-wise layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(m, n, out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(m, n, out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(m, n, out, Op::LogSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= n, "slice out of range");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        self.push(m, len, out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.rows(parts[0]);
        assert!(parts.iter().all(|&p| self.rows(p) == m), "concat_cols rows");
        let n: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.row(p, i));
            }
        }
        self.push(m, n, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.cols(parts[0]);
        assert!(parts.iter().all(|&p| self.cols(p) == n), "concat_rows cols");
        let m: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push(m, n, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather index {i} out of {m}");
            out.extend_from_slice(self.row(x, i));
        }
        self.push(idx.len(), n, out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Scalar `Σ w · x[r, c]`.
    pub fn pick_sum(&mut self, x: Var, entries: &[(usize, usize, f64)]) -> Var {
        let (m, n) = self.shape(x);
        let xv = self.value(x);
        let mut s = 0.0;
        for &(r, c, w) in entries {
            assert!(r < m && c < n, "pick out of range");
            s += w * xv[r * n + c];
        }
        self.push(1, 1, vec![s], Op::PickSum { x, entries: entries.to_vec() })
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (m, n) = self.shape(parts[0]);
        let mut out = vec![0.0; m * n];
        for &p in parts {
            assert_eq!(self.shape(p), (m, n), "sum shapes");
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        self.push(m, n, out, Op::Sum(parts.to_vec()))
    }

    /// Reverse sweep from a scalar; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_scaled(loss, 1.0)
    }

    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Vec<f64>> = (0..=loss.idx()).map(|_| Vec::new()).collect();
        grads[loss.idx()] = vec![seed];
        let mut out = Grads::zeros_like(self.params);

        fn acc<'g>(grads: &'g mut [Vec<f64>], nodes: &[Node], v: Var) -> &'g mut [f64] {
            let i = v.idx();
            if grads[i].is_empty() {
                let n = &nodes[i];
                grads[i] = vec![0.0; n.rows * n.cols];
            }
            &mut grads[i]
        }

        for i in (0..=loss.idx()).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            let (m, n) = (node.rows, node.cols);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (o, gv) in out.get_mut(*id).iter_mut().zip(&g) {
                        *o += gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.cols(*a);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    gemm(m, n, k, MatRef::n(&g), MatRef::t(bv), acc(&mut grads, &self.nodes, *a), true);
                    gemm(k, m, n, MatRef::t(av), MatRef::n(&g), acc(&mut grads, &self.nodes, *b), true);
                }
                Op::MatMulBT(a, b) => {
                    let k = self.cols(*a);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    gemm(m, n, k, MatRef::n(&g), MatRef::n(bv), acc(&mut grads, &self.nodes, *a), true);
                    gemm(n, m, k, MatRef::t(&g), MatRef::n(av), acc(&mut grads, &self.nodes, *b), true);
                }
                Op::AddRow(x, b) => {
                    add_into(acc(&mut grads, &self.nodes, *x), &g);
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    add_into(acc(&mut grads, &self.nodes, *b), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for ((o, gv), y) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gv * y;
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for ((o, gv), x) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gv * x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for (o, gv) in ga.iter_mut().zip(&g) {
                        *o += gv * s;
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for ((o, gv), x) in ga.iter_mut().zip(&g).zip(av) {
                        *o += gv * gelu_grad(*x);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for ((o, gv), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *o += gv * (1.0 - y * y);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gam = self.value(*gamma);
                    {
                        let gg = acc(&mut grads, &self.nodes, *gamma);
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, &self.nodes, *beta);
                        for grow in g.chunks(n) {
                            add_into(gb, grow);
                        }
                    }
                    let gx = acc(&mut grads, &self.nodes, *x);
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dh[j] = grow[j] * gam[j];
                            s1 += dh[j];
                            s2 += dh[j] * hrow[j];
                        }
                        let rs = rstd[r];
                        for j in 0..n {
                            gx[r * n + j] += rs / nf * (nf * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for r in 0..m {
                        let y = &node.value[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for r in 0..m {
                        let y = &node.value[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gr[j] - y[j].exp() * total;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let xn = self.cols(*x);
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for r in 0..m {
                        add_into(&mut gx[r * xn + start..r * xn + start + n], &g[r * n..(r + 1) * n]);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.cols(p);
                        let gp = acc(&mut grads, &self.nodes, p);
                        for r in 0..m {
                            add_into(&mut gp[r * pc..(r + 1) * pc], &g[r * n + off..r * n + off + pc]);
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.rows(p) * n;
                        add_into(acc(&mut grads, &self.nodes, p), &g[off..off + len]);
                        off += len;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
                Op::PickSum { x, entries } => {
                    let xn = self.cols(*x);
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for &(r, c, w) in entries {
                        gx[r * xn + c] += w * g[0];
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        add_into(acc(&mut grads, &self.nodes, p), &g);
                    }
                }
            }
        }
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

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

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn param_node_reused() {
        let mut p = ParamStore::new(0);
        let id = p.weight("w", 2, 2);
        let mut t = Tape::new(&p);
        let a = t.param(id);
        let b = t.param(id);
        assert_eq!(a, b);
        let s = t.mul(a, b);
        let l = t.pick_sum(s, &[(0, 0, 1.0)]);
        let g = t.backward(l);
        let w = p.get(id).data()[0];
        assert!((g.get(id)[0] - 2.0 * w).abs() < 1e-15);
    }
}

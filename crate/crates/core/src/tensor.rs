//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] as [`Var`] handles. Every primitive records its inputs, so the
//! tape is in topological order by construction and [`Tape::backward`] walks
//! it once in reverse.
//!
//! ```
//! use bmcl::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = tape.square(x);
//! let f = tape.sum(sq);
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};

/// Row-major tensor of finite `f64` values. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Param(format!("tensor dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() || self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul_kernel(&self.data, &other.data, m, k, n),
        })
    }

    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("add_bias")?;
        if bias.len() != n || bias.shape.len() != 1 {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log_softmax_temp(&self, temperature: f64) -> Result<Tensor> {
        check_temperature(temperature)?;
        let (n, c) = self.expect_matrix("log_softmax_temp")?;
        Ok(Tensor {
            shape: vec![n, c],
            data: log_softmax_kernel(&self.data, n, c, temperature),
        })
    }

    /// Row-wise softmax of `self / temperature`.
    pub fn softmax_temp(&self, temperature: f64) -> Result<Tensor> {
        Ok(self.log_softmax_temp(temperature)?.map(f64::exp))
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let c = self.cols();
        (0..self.rows())
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (n, c) = self.expect_matrix("select_rows")?;
        if rows.is_empty() {
            return Err(Error::Contract("select_rows needs at least one row".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Contract(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * c..(r + 1) * c]);
        }
        Ok(Tensor {
            shape: vec![rows.len(), c],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `a^T * b` for `a: k×m`, `b: k×n`.
fn matmul_tn_kernel(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            for (o, &b_pj) in out[i * n..(i + 1) * n].iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_pi * b_pj;
            }
        }
    }
    out
}

/// `a * b^T` for `a: m×n`, `b: k×n`.
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn log_softmax_kernel(x: &[f64], n: usize, c: usize, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let lse = row.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = v / t - max - lse;
        }
    }
    out
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    LogSoftmax(Var, f64),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddConst(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    grad_enabled: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, grad_enabled: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn enabled(&self, v: Var) -> bool {
        self.nodes[v.0].grad_enabled
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.enabled(a) || self.enabled(b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_bias(self.value(bias))?;
        let g = self.enabled(x) || self.enabled(bias);
        Ok(self.push(out, Op::AddBias(x, bias), g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let g = self.enabled(x);
        self.push(out, Op::Relu(x), g)
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax_temp(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = self.value(x).log_softmax_temp(temperature)?;
        let g = self.enabled(x);
        Ok(self.push(out, Op::LogSoftmax(x, temperature), g))
    }

    /// Picks `x[i, index[i]]` from each row, giving a vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = t.expect_matrix("gather")?;
        if index.len() != n {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        let mut data = Vec::with_capacity(n);
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(Error::Contract(format!("gather index {j} out of range for {c} columns")));
            }
            data.push(t.data[i * c + j]);
        }
        let g = self.enabled(x);
        Ok(self.push(Tensor::vector(data), Op::Gather(x, index.to_vec()), g))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(rows)?;
        let g = self.enabled(x);
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec()), g))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape {
                op,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let g = self.enabled(a) || self.enabled(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let g = self.enabled(a) || self.enabled(b);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let g = self.enabled(a) || self.enabled(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let g = self.enabled(x);
        self.push(out, Op::Square(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let g = self.enabled(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        let g = self.enabled(x);
        self.push(Tensor::scalar(m), Op::Mean(x), g)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let g = self.enabled(x);
        self.push(out, Op::Scale(x, factor), g)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let g = self.enabled(x);
        self.push(out, Op::AddConst(x), g)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor {
            shape: out.shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad_enabled {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.grad_enabled {
                    grads.get_mut(i).and_then(Option::take)
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            grads: leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.enabled(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data.iter_mut().zip(&g.data) {
                        *e += x;
                    }
                }
                slot => *slot = Some(g),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.enabled(*a) {
                    let da = matmul_nt_kernel(&dy.data, &tb.data, m, n, k);
                    acc(*a, Tensor { shape: ta.shape.clone(), data: da }, grads);
                }
                if self.enabled(*b) {
                    let db = matmul_tn_kernel(&ta.data, &dy.data, m, k, n);
                    acc(*b, Tensor { shape: tb.shape.clone(), data: db }, grads);
                }
            }
            Op::AddBias(x, b) => {
                let n = dy.cols();
                if self.enabled(*b) {
                    let mut db = vec![0.0; n];
                    for row in dy.data.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::vector(db), grads);
                }
                acc(*x, dy.clone(), grads);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = tx
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(*x, Tensor { shape: tx.shape.clone(), data }, grads);
            }
            Op::LogSoftmax(x, t) => {
                // d/dx = (dy - softmax * rowsum(dy)) / t
                let (n, c) = (dy.shape[0], dy.shape[1]);
                let mut data = vec![0.0; n * c];
                for i in 0..n {
                    let ys = &node.value.data[i * c..(i + 1) * c];
                    let gs = &dy.data[i * c..(i + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        data[i * c + j] = (gs[j] - ys[j].exp() * total) / t;
                    }
                }
                acc(*x, Tensor { shape: vec![n, c], data }, grads);
            }
            Op::Gather(x, index) => {
                let tx = self.value(*x);
                let c = tx.shape[1];
                let mut data = vec![0.0; tx.len()];
                for (i, (&j, &g)) in index.iter().zip(&dy.data).enumerate() {
                    data[i * c + j] = g;
                }
                acc(*x, Tensor { shape: tx.shape.clone(), data }, grads);
            }
            Op::SelectRows(x, rows) => {
                let tx = self.value(*x);
                let c = tx.shape[1];
                let mut data = vec![0.0; tx.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        data[r * c + j] += dy.data[k * c + j];
                    }
                }
                acc(*x, Tensor { shape: tx.shape.clone(), data }, grads);
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.map(|g| -g), grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.enabled(*a) {
                    let data = dy.data.iter().zip(&tb.data).map(|(g, v)| g * v).collect();
                    acc(*a, Tensor { shape: ta.shape.clone(), data }, grads);
                }
                if self.enabled(*b) {
                    let data = dy.data.iter().zip(&ta.data).map(|(g, v)| g * v).collect();
                    acc(*b, Tensor { shape: tb.shape.clone(), data }, grads);
                }
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                let data = tx.data.iter().zip(&dy.data).map(|(v, g)| 2.0 * v * g).collect();
                acc(*x, Tensor { shape: tx.shape.clone(), data }, grads);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                let g = dy.item();
                acc(*x, Tensor { shape: tx.shape.clone(), data: vec![g; tx.len()] }, grads);
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let g = dy.item() / tx.len() as f64;
                acc(*x, Tensor { shape: tx.shape.clone(), data: vec![g; tx.len()] }, grads);
            }
            Op::Scale(x, s) => acc(*x, dy.map(|g| g * s), grads),
            Op::AddConst(x) => acc(*x, dy.clone(), grads),
        }
    }
}

/// Gradients of one backward sweep, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; leaves the output does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = m(2, 2, &[1.5, -2.0, 0.25, 7.0]);
        let id = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn matmul_hand_value() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(2, 1, &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_values() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]);
        assert!(neg.relu().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[0.0]);
    }

    #[test]
    fn log_softmax_symmetric() {
        for t in [0.5, 1.0, 3.0] {
            let y = m(1, 2, &[0.0, 0.0]).log_softmax_temp(t).unwrap();
            for v in y.data() {
                assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn log_softmax_with_temperature() {
        let y = m(1, 2, &[2.0, 0.0]).log_softmax_temp(2.0).unwrap();
        // softmax(1, 0) in closed form
        let lse = (1.0f64.exp() + 1.0).ln();
        assert!((y.data()[0] - (1.0 - lse)).abs() < 1e-15);
        assert!((y.data()[1] + lse).abs() < 1e-15);
        assert!((y.data()[0] + 0.3133).abs() < 1e-4);
        assert!((y.data()[1] + 1.3133).abs() < 1e-4);
    }

    #[test]
    fn log_softmax_no_overflow() {
        let y = m(1, 2, &[1000.0, 0.0]).log_softmax_temp(1.0).unwrap();
        assert!(y.all_finite());
        assert!(y.data()[0].abs() < 1e-300);
        assert!((y.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_rejects_bad_temperature() {
        let x = m(1, 2, &[1.0, 0.0]);
        assert!(matches!(x.log_softmax_temp(0.0), Err(Error::Param(_))));
        assert!(matches!(x.log_softmax_temp(-1.0), Err(Error::Param(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let sq = tape.square(x);
        let f = tape.sum(sq);
        assert_eq!(tape.backward(f).unwrap().get(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_output_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let unused = tape.leaf(Tensor::zeros(&[2, 3]));
        let f = tape.sum(x);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x) via mul of the same var
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0]));
        let p = tape.mul(x, x).unwrap();
        let f = tape.sum(p);
        assert_eq!(tape.backward(f).unwrap().get(x).data(), &[6.0, -2.0]);
    }

    #[test]
    fn select_rows_repeats_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.select_rows(x, &[1, 1, 0]).unwrap();
        let f = tape.sum(s);
        assert_eq!(tape.backward(f).unwrap().get(x).data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}

use super::kernels::{self, AxisGroups};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Gelu(Var),
    L2Normalize { src: Var, axis: usize, norms: Vec<f64>, eps: f64 },
    Exp(Var),
    Log(Var),
    Diag(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be propagated in
/// reverse.
///
/// Nodes are appended as ops run, so every node's inputs precede it. Leaf
/// gradients persist across [`Tape::backward`] calls and accumulate until
/// [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

/// Reduction groups for softmax-like ops on rank-1 (axis 0) or rank-2 tensors.
fn axis_groups(op: &'static str, t: &Tensor, axis: usize) -> Result<AxisGroups, TensorError> {
    let g = match (t.shape(), axis) {
        ([n], 0) => AxisGroups::new(1, *n, 1),
        ([r, c], 0 | 1) => AxisGroups::new(*r, *c, axis),
        (s, _) => {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: s.to_vec(),
            })
        }
    };
    if g.len == 0 {
        return Err(TensorError::Empty { op });
    }
    Ok(g)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, TensorError> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<usize, TensorError> {
        let (_, n) = rank2(op, self.value(a))?;
        if self.value(row).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(n)
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let n = self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of an `m x n` matrix elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let n = self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x + c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_var",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::MulScalarVar(a, s), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let data = self.value(a).data().to_vec();
        let value = Tensor::new(shape.to_vec(), data).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: self.shape(a).to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        if axis > 1 {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: self.shape(first).to_vec(),
            });
        }
        let (r0, c0) = rank2("concat", self.value(first))?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2("concat", self.value(p))?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            dims.push((r, c));
        }
        let value = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let (r, c) = rank2("slice", self.value(a))?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => {
                return Err(TensorError::Axis {
                    op: "slice",
                    axis,
                    shape: vec![r, c],
                })
            }
        };
        if len == 0 {
            return Err(TensorError::Empty { op: "slice" });
        }
        if start + len > extent {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                bound: extent,
            });
        }
        let src = self.value(a).data();
        let value = if axis == 0 {
            Tensor::new(vec![len, c], src[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Slice { src: a, axis, start }, rg))
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = rank2("gather_rows", self.value(a))?;
        if idx.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means of an `m x n` matrix, as a `1 x n` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = rank2("mean_rows", self.value(a))?;
        let src = self.value(a).data();
        let mut data = vec![0.0; c];
        for row in 0..r {
            for (d, s) in data.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                *d += s;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![1, c], data)?, Op::MeanRows(a), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let g = axis_groups("softmax", self.value(a), axis)?;
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for grp in 0..g.groups {
            let mx = (0..g.len)
                .map(|i| d[g.at(grp, i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..g.len {
                let e = (d[g.at(grp, i)] - mx).exp();
                d[g.at(grp, i)] = e;
                z += e;
            }
            for i in 0..g.len {
                d[g.at(grp, i)] /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let g = axis_groups("log_softmax", self.value(a), axis)?;
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for grp in 0..g.groups {
            let mx = (0..g.len)
                .map(|i| d[g.at(grp, i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..g.len).map(|i| (d[g.at(grp, i)] - mx).exp()).sum();
            let lse = mx + z.ln();
            for i in 0..g.len {
                d[g.at(grp, i)] -= lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let g = axis_groups("layer_norm", self.value(a), self.value(a).shape().len() - 1)?;
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        let mut inv_std = Vec::with_capacity(g.groups);
        for grp in 0..g.groups {
            let n = g.len as f64;
            let mean = (0..g.len).map(|i| d[g.at(grp, i)]).sum::<f64>() / n;
            let var = (0..g.len)
                .map(|i| (d[g.at(grp, i)] - mean).powi(2))
                .sum::<f64>()
                / n;
            let is = 1.0 / (var + eps).sqrt();
            for i in 0..g.len {
                let k = g.at(grp, i);
                d[k] = (d[k] - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LayerNorm { src: a, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| kernels::gelu(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// `x / max(||x||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        let g = axis_groups("l2_normalize", self.value(a), axis)?;
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        let mut norms = Vec::with_capacity(g.groups);
        for grp in 0..g.groups {
            let norm = (0..g.len)
                .map(|i| d[g.at(grp, i)].powi(2))
                .sum::<f64>()
                .sqrt();
            let denom = norm.max(eps);
            for i in 0..g.len {
                d[g.at(grp, i)] /= denom;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::L2Normalize {
                src: a,
                axis,
                norms,
                eps,
            },
            rg,
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.exp()).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// Natural log; every input element must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(TensorError::Domain { op: "log" });
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.ln()).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = rank2("diag", self.value(a))?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "diag",
                lhs: vec![r, c],
                rhs: vec![c, r],
            });
        }
        let src = self.value(a).data();
        let data = (0..r).map(|i| src[i * c + i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(data), Op::Diag(a), rg))
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.leaf_grads[i], &g);
                continue;
            }
            for (input, gi) in self.input_grads(i, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], &gi);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).dims2().unwrap().1;
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    res.push((*a, kernels::matmul_nt(g, val(*b).data(), m, n, k)));
                }
                if self.nodes[b.0].requires_grad {
                    res.push((*b, kernels::matmul_tn(val(*a).data(), g, m, k, n)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::AddRow(a, r) => {
                let n = val(*r).numel();
                let mut gr = vec![0.0; n];
                for (k, x) in g.iter().enumerate() {
                    gr[k % n] += x;
                }
                vec![(*a, g.to_vec()), (*r, gr)]
            }
            Op::MulRow(a, r) => {
                let n = val(*r).numel();
                let (av, rv) = (val(*a).data(), val(*r).data());
                let mut gr = vec![0.0; n];
                let mut ga = vec![0.0; g.len()];
                for (k, x) in g.iter().enumerate() {
                    gr[k % n] += x * av[k];
                    ga[k] = x * rv[k % n];
                }
                vec![(*a, ga), (*r, gr)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MulScalarVar(a, s) => {
                let c = val(*s).item();
                let gs: f64 = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                vec![(*a, g.iter().map(|x| x * c).collect()), (*s, vec![gs])]
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                vec![(*a, kernels::transpose(g, c, r))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat(parts, axis) => {
                let (_, total_c) = out.dims2().unwrap();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(*p).dims2().unwrap();
                    let gp = if *axis == 0 {
                        let s = g[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        s
                    } else {
                        let mut s = Vec::with_capacity(r * c);
                        for row in 0..r {
                            s.extend_from_slice(
                                &g[row * total_c + offset..row * total_c + offset + c],
                            );
                        }
                        offset += c;
                        s
                    };
                    res.push((*p, gp));
                }
                res
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = val(*src).dims2().unwrap();
                let mut gs = vec![0.0; r * c];
                if *axis == 0 {
                    gs[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let len = g.len() / r;
                    for row in 0..r {
                        gs[row * c + start..row * c + start + len]
                            .copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                }
                vec![(*src, gs)]
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).dims2().unwrap();
                let mut ga = vec![0.0; r * c];
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[row * c + j] += g[k * c + j];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|x| x / r as f64));
                }
                vec![(*a, ga)]
            }
            Op::Softmax(a, axis) => {
                let grp = axis_groups("softmax", out, *axis).unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for gi in 0..grp.groups {
                    let dot: f64 = (0..grp.len)
                        .map(|k| g[grp.at(gi, k)] * y[grp.at(gi, k)])
                        .sum();
                    for k in 0..grp.len {
                        let p = grp.at(gi, k);
                        ga[p] = y[p] * (g[p] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a, axis) => {
                let grp = axis_groups("log_softmax", out, *axis).unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for gi in 0..grp.groups {
                    let total: f64 = (0..grp.len).map(|k| g[grp.at(gi, k)]).sum();
                    for k in 0..grp.len {
                        let p = grp.at(gi, k);
                        ga[p] = g[p] - y[p].exp() * total;
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm { src, inv_std } => {
                let grp = axis_groups("layer_norm", out, out.shape().len() - 1).unwrap();
                let y = out.data();
                let n = grp.len as f64;
                let mut ga = vec![0.0; y.len()];
                for gi in 0..grp.groups {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for k in 0..grp.len {
                        let p = grp.at(gi, k);
                        mg += g[p];
                        mgy += g[p] * y[p];
                    }
                    mg /= n;
                    mgy /= n;
                    for k in 0..grp.len {
                        let p = grp.at(gi, k);
                        ga[p] = inv_std[gi] * (g[p] - mg - y[p] * mgy);
                    }
                }
                vec![(*src, ga)]
            }
            Op::Gelu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(x, &v)| x * kernels::gelu_grad(v))
                    .collect(),
            )],
            Op::L2Normalize {
                src,
                axis,
                norms,
                eps,
            } => {
                let grp = axis_groups("l2_normalize", out, *axis).unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for gi in 0..grp.groups {
                    let norm = norms[gi];
                    if norm > *eps {
                        let dot: f64 = (0..grp.len)
                            .map(|k| g[grp.at(gi, k)] * y[grp.at(gi, k)])
                            .sum();
                        for k in 0..grp.len {
                            let p = grp.at(gi, k);
                            ga[p] = (g[p] - y[p] * dot) / norm;
                        }
                    } else {
                        for k in 0..grp.len {
                            let p = grp.at(gi, k);
                            ga[p] = g[p] / eps;
                        }
                    }
                }
                vec![(*src, ga)]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(out.data()).map(|(x, y)| x * y).collect())],
            Op::Log(a) => vec![(
                *a,
                g.iter().zip(val(*a).data()).map(|(x, y)| x / y).collect(),
            )],
            Op::Diag(a) => {
                let (n, _) = val(*a).dims2().unwrap();
                let mut ga = vec![0.0; n * n];
                for (k, x) in g.iter().enumerate() {
                    ga[k * n + k] = *x;
                }
                vec![(*a, ga)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0; 3]));
        let s = tape.softmax(x, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn quadratic_and_mean_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        // repeated backward accumulates
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        let y = tape.param(Tensor::vector(vec![3.0, -1.0, 2.0, 7.0]));
        let m = tape.mean(y);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1.0; 6]));
        let b = tape.param(t(&[2, 3], &[1.0; 6]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(tape.backward(a), Err(TensorError::NonScalarLoss(_))));
        let z = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(tape.log(z), Err(TensorError::Domain { .. })));
        assert!(matches!(tape.softmax(a, 2), Err(TensorError::Axis { .. })));
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[3.0, 4.0, 0.0, 1e-3, -2e-3, 5.0]));
        let n = tape.l2_normalize(a, 1, 1e-12).unwrap();
        for r in 0..2 {
            let norm: f64 = tape.value(n).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let nz = tape.l2_normalize(z, 1, 1e-12).unwrap();
        assert_eq!(tape.value(nz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 4]);
    }
}

//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation in evaluation order; [`Var`] is a
//! lightweight handle into it. Values are dense row-major `f64` arrays.
//! Elementwise binary ops broadcast numpy-style (shapes aligned on the right).

use std::cell::{Cell, Ref, RefCell};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{transform_channels, SpectralBackend};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Plain n-dimensional array; the storage type for parameters and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Sqrt(Var),
    Exp(Var),
    Cos(Var),
    Silu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // per row: (x - μ)/σ and 1/σ; rows that are exactly zero store 0/0
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Norm(Var),
    Fft3(Var, [usize; 3]),
    Ifft3Real(Var, [usize; 3]),
    Select0(Var, usize),
    Stack0(Vec<Var>),
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation. One tape is single-writer; build a new tape
/// for each evaluation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backend: SpectralBackend,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` if `v` does not
    /// require gradients or the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros of length `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
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

/// Source index into each operand for every output element of a broadcast
/// binary op; `None` when the operand already has the output shape.
struct Broadcast {
    shape: Vec<usize>,
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

fn broadcast(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<Broadcast> {
    if sa == sb {
        return Ok(Broadcast {
            shape: sa.to_vec(),
            a: None,
            b: None,
        });
    }
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(sa), pad(sb));
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let (x, y) = (pa[d], pb[d]);
        if x == y || y == 1 {
            shape.push(x);
        } else if x == 1 {
            shape.push(y);
        } else {
            return Err(Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")));
        }
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        st
    };
    let total: usize = shape.iter().product();
    let index = |p: &[usize]| -> Option<Vec<usize>> {
        if p == shape.as_slice() {
            return None;
        }
        let st = strides(p);
        let mut out = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..total {
            out.push(flat);
            for d in (0..rank).rev() {
                counter[d] += 1;
                flat += st[d];
                if counter[d] < shape[d] {
                    break;
                }
                flat -= st[d] * shape[d];
                counter[d] = 0;
            }
        }
        Some(out)
    };
    Ok(Broadcast {
        a: index(&pa),
        b: index(&pb),
        shape,
    })
}

#[inline]
fn at(idx: &Option<Vec<usize>>, i: usize) -> usize {
    match idx {
        Some(v) => v[i],
        None => i,
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Add `g` (output-shaped) into the operand gradient, summing over
/// broadcast positions.
fn reduce_into(target: &mut [f64], idx: &Option<Vec<usize>>, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    match idx {
        None => {
            for (i, (t, &gi)) in target.iter_mut().zip(g).enumerate() {
                *t += f(i, gi);
            }
        }
        Some(ix) => {
            for (i, (&j, &gi)) in ix.iter().zip(g).enumerate() {
                target[j] += f(i, gi);
            }
        }
    }
}

fn layer_norm_rows(x: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (o, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

impl Tape {
    pub fn new() -> Self {
        Self::with_backend(SpectralBackend::Fast)
    }

    /// Tape whose spectral ops use `backend`.
    pub fn with_backend(backend: SpectralBackend) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backend,
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn node_shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Record an input. Gradients are only tracked through leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("leaf", format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn constant(&self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.push(vec![v], vec![], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.node_shape(v)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor {
            shape: nodes[v.0].shape.clone(),
            data: nodes[v.0].value.clone(),
        }
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let bc = broadcast(name, &na.shape, &nb.shape)?;
            let total = bc.shape.iter().product::<usize>();
            let value: Vec<f64> = match (&bc.a, &bc.b) {
                (None, None) => na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect(),
                _ => (0..total)
                    .map(|i| f(na.value[at(&bc.a, i)], nb.value[at(&bc.b, i)]))
                    .collect(),
            };
            (value, bc.shape)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, shape, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.iter().map(|&x| f(x)).collect(), nodes[a.0].shape.clone())
        };
        let rg = self.rg(&[a]);
        self.push(value, shape, op, rg)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::shape("matmul", format!("{:?} × {:?}", na.shape, nb.shape)));
            }
            let (n, k, m) = (na.shape[0], na.shape[1], nb.shape[1]);
            (gemm(&na.value, &nb.value, n, k, m), vec![n, m])
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, shape, Op::MatMul(a, b), rg))
    }

    /// `[B, n, k] × [B, k, m] → [B, n, m]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 3 || nb.shape.len() != 3 || na.shape[0] != nb.shape[0] || na.shape[2] != nb.shape[1] {
                return Err(Error::shape("batch_matmul", format!("{:?} × {:?}", na.shape, nb.shape)));
            }
            let (bs, n, k, m) = (na.shape[0], na.shape[1], na.shape[2], nb.shape[2]);
            let mut out = Vec::with_capacity(bs * n * m);
            for b in 0..bs {
                out.extend(gemm(&na.value[b * n * k..(b + 1) * n * k], &nb.value[b * k * m..(b + 1) * k * m], n, k, m));
            }
            (out, vec![bs, n, m])
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, shape, Op::BatchMatMul(a, b), rg))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![v], vec![], Op::SumAll(a), rg)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if axis >= na.shape.len() {
                return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", na.shape)));
            }
            let (outer, n, inner) = split_axis(&na.shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &na.value[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = na.shape.clone();
            shape.remove(axis);
            (out, shape)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node_shape(a).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).to_vec();
        if value.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", format!("{} values into {shape:?}", value.len())));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].shape;
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
            }
            let mut shape = first.clone();
            shape[axis] = 0;
            for p in parts {
                let s = &nodes[p.0].shape;
                let mismatch = s.len() != first.len()
                    || s.iter().zip(first).enumerate().any(|(d, (x, y))| d != axis && x != y);
                if mismatch {
                    return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.0];
                    let chunk = n.shape[axis] * inner;
                    out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            (out, shape)
        };
        let rg = self.rg(parts);
        Ok(self.push(value, shape, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rows `index` of `a` along its first axis.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.is_empty() {
                return Err(Error::shape("gather_rows", "scalar input"));
            }
            let rows = na.shape[0];
            let width = na.value.len() / rows.max(1);
            let mut out = Vec::with_capacity(index.len() * width);
            for &i in index {
                if i >= rows {
                    return Err(Error::IndexOutOfRange { index: i, len: rows });
                }
                out.extend_from_slice(&na.value[i * width..(i + 1) * width]);
            }
            let mut shape = na.shape.clone();
            shape[0] = index.len();
            (out, shape)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::GatherRows(a, index.to_vec()), rg))
    }

    /// `out[index[i]] += a[i]` into `rows` zero rows; the adjoint of gather.
    pub fn scatter_add_rows(&self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.is_empty() || na.shape[0] != index.len() {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("{} indices for shape {:?}", index.len(), na.shape),
                ));
            }
            let width = na.shape[1..].iter().product::<usize>();
            let mut out = vec![0.0; rows * width];
            for (i, &t) in index.iter().enumerate() {
                if t >= rows {
                    return Err(Error::IndexOutOfRange { index: t, len: rows });
                }
                for (d, s) in out[t * width..(t + 1) * width].iter_mut().zip(&na.value[i * width..(i + 1) * width]) {
                    *d += s;
                }
            }
            let mut shape = na.shape.clone();
            shape[0] = rows;
            (out, shape)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::ScatterAddRows(a, index.to_vec()), rg))
    }

    /// Normalize over the last axis, then apply `gamma` and `beta` (both of
    /// the last-axis width). Rows that are exactly zero map to zero.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, shape, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let width = *nx.shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            if width < 1 {
                return Err(Error::shape("layer_norm", "normalized axis is empty"));
            }
            if nodes[gamma.0].value.len() != width || nodes[beta.0].value.len() != width {
                return Err(Error::shape("layer_norm", format!("affine parameters do not match width {width}")));
            }
            let (xhat, inv_std) = layer_norm_rows(&nx.value, width);
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let mut out = vec![0.0; nx.value.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                if is == 0.0 {
                    continue;
                }
                for c in 0..width {
                    out[r * width + c] = xhat[r * width + c] * g[c] + b[c];
                }
            }
            (out, nx.shape.clone(), xhat, inv_std)
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Euclidean norm over the last axis (which is removed).
    pub fn l2norm(&self, a: Var) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let width = *na.shape.last().ok_or_else(|| Error::shape("l2norm", "scalar input"))?;
            let rows = if width == 0 { 0 } else { na.value.len() / width };
            let out = (0..rows)
                .map(|r| na.value[r * width..(r + 1) * width].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            (out, na.shape[..na.shape.len() - 1].to_vec())
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::L2Norm(a), rg))
    }

    /// Forward 3D DFT of each channel of a real `[M, C]` grid array; the
    /// result is `[2, M, C]` holding real and imaginary parts.
    pub fn fft3(&self, x: Var, counts: [usize; 3]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let m = counts.iter().product::<usize>();
            if nx.shape.len() != 2 || nx.shape[0] != m {
                return Err(Error::shape("fft3", format!("{:?} on grid {counts:?}", nx.shape)));
            }
            let c = nx.shape[1];
            let z: Vec<Complex64> = nx.value.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            let y = transform_channels(&z, counts, c, true, self.backend);
            split_complex(&y)
        };
        let shape = {
            let s = self.node_shape(x);
            vec![2, s[0], s[1]]
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, shape, Op::Fft3(x, counts), rg))
    }

    /// Real part of the normalized inverse 3D DFT of a `[2, M, C]` spectrum.
    pub fn ifft3_real(&self, y: Var, counts: [usize; 3]) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let ny = &nodes[y.0];
            let m = counts.iter().product::<usize>();
            if ny.shape.len() != 3 || ny.shape[0] != 2 || ny.shape[1] != m {
                return Err(Error::shape("ifft3_real", format!("{:?} on grid {counts:?}", ny.shape)));
            }
            let c = ny.shape[2];
            let z = join_complex(&ny.value);
            let x = transform_channels(&z, counts, c, false, self.backend);
            let inv = 1.0 / m as f64;
            (x.iter().map(|v| v.re * inv).collect(), vec![m, c])
        };
        let rg = self.rg(&[y]);
        Ok(self.push(value, shape, Op::Ifft3Real(y, counts), rg))
    }

    /// Slice `index` of the first axis.
    pub fn select0(&self, a: Var, index: usize) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.is_empty() || index >= na.shape[0] {
                return Err(Error::IndexOutOfRange {
                    index,
                    len: na.shape.first().copied().unwrap_or(0),
                });
            }
            let width = na.value.len() / na.shape[0];
            (na.value[index * width..(index + 1) * width].to_vec(), na.shape[1..].to_vec())
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::Select0(a, index), rg))
    }

    /// Stack equally shaped arrays along a new first axis.
    pub fn stack0(&self, parts: &[Var]) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|p| nodes[p.0].shape.clone())
                .ok_or_else(|| Error::shape("stack0", "no inputs"))?;
            let mut out = Vec::new();
            for p in parts {
                if nodes[p.0].shape != first {
                    return Err(Error::shape("stack0", format!("{:?} vs {first:?}", nodes[p.0].shape)));
                }
                out.extend_from_slice(&nodes[p.0].value);
            }
            let mut shape = vec![parts.len()];
            shape.extend(first);
            (out, shape)
        };
        let rg = self.rg(parts);
        Ok(self.push(value, shape, Op::Stack0(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `output`. A tape can be swept once.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.len() != 1 {
            self.consumed.set(false);
            return Err(Error::NonScalarOutput(nodes[output.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.pullback(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Allow another [`backward`](Self::backward) sweep on the same tape.
    pub fn reset(&self) {
        self.consumed.set(false);
    }

    fn pullback(&self, nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bc = broadcast("backward", &nodes[a.0].shape, &nodes[b.0].shape).expect("checked in forward");
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], len(a));
                    match &node.op {
                        Op::Add(..) | Op::Sub(..) => reduce_into(ga, &bc.a, g, |_, gi| gi),
                        Op::Mul(..) => reduce_into(ga, &bc.a, g, |i, gi| gi * vb[at(&bc.b, i)]),
                        _ => reduce_into(ga, &bc.a, g, |i, gi| gi / vb[at(&bc.b, i)]),
                    }
                }
                if wants(b) {
                    let gb = accumulate(&mut grads[b.0], len(b));
                    match &node.op {
                        Op::Add(..) => reduce_into(gb, &bc.b, g, |_, gi| gi),
                        Op::Sub(..) => reduce_into(gb, &bc.b, g, |_, gi| -gi),
                        Op::Mul(..) => reduce_into(gb, &bc.b, g, |i, gi| gi * va[at(&bc.a, i)]),
                        _ => reduce_into(gb, &bc.b, g, |i, gi| {
                            let y = vb[at(&bc.b, i)];
                            -gi * va[at(&bc.a, i)] / (y * y)
                        }),
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga.iter_mut().zip(g).for_each(|(t, gi)| *t += s * gi);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga.iter_mut().zip(g).for_each(|(t, gi)| *t += gi);
            }
            Op::Sqrt(a) => self.elementwise(nodes, *a, node, g, grads, |_, y| 0.5 / y),
            Op::Exp(a) => self.elementwise(nodes, *a, node, g, grads, |_, y| y),
            Op::Cos(a) => self.elementwise(nodes, *a, node, g, grads, |x, _| -x.sin()),
            Op::Square(a) => self.elementwise(nodes, *a, node, g, grads, |x, _| 2.0 * x),
            Op::Silu(a) => self.elementwise(nodes, *a, node, g, grads, |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k, m) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[b.0].shape[1]);
                if wants(a) {
                    // dA = G Bᵀ
                    let ga = accumulate(&mut grads[a.0], n * k);
                    gemm_nt_acc(g, &nodes[b.0].value, n, m, k, ga);
                }
                if wants(b) {
                    // dB = Aᵀ G
                    let gb = accumulate(&mut grads[b.0], k * m);
                    gemm_tn_acc(&nodes[a.0].value, g, n, k, m, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (a, b) = (*a, *b);
                let s = &nodes[a.0].shape;
                let (bs, n, k, m) = (s[0], s[1], s[2], nodes[b.0].shape[2]);
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], bs * n * k);
                    for t in 0..bs {
                        gemm_nt_acc(
                            &g[t * n * m..(t + 1) * n * m],
                            &nodes[b.0].value[t * k * m..(t + 1) * k * m],
                            n,
                            m,
                            k,
                            &mut ga[t * n * k..(t + 1) * n * k],
                        );
                    }
                }
                if wants(b) {
                    let gb = accumulate(&mut grads[b.0], bs * k * m);
                    for t in 0..bs {
                        gemm_tn_acc(
                            &nodes[a.0].value[t * n * k..(t + 1) * n * k],
                            &g[t * n * m..(t + 1) * n * m],
                            n,
                            k,
                            m,
                            &mut gb[t * k * m..(t + 1) * k * m],
                        );
                    }
                }
            }
            Op::SumAll(a) => {
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga.iter_mut().for_each(|t| *t += g[0]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = split_axis(&nodes[a.0].shape, *axis);
                let ga = accumulate(&mut grads[a.0], len(*a));
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(t, gi)| *t += gi);
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let chunk = nodes[p.0].shape[*axis] * inner;
                        if wants(*p) {
                            let gp = accumulate(&mut grads[p.0], len(*p));
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[offset..offset + chunk])
                                .for_each(|(t, gi)| *t += gi);
                        }
                        offset += chunk;
                    }
                }
            }
            Op::GatherRows(a, index) => {
                let width = node.shape[1..].iter().product::<usize>();
                let ga = accumulate(&mut grads[a.0], len(*a));
                for (i, &r) in index.iter().enumerate() {
                    ga[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[i * width..(i + 1) * width])
                        .for_each(|(t, gi)| *t += gi);
                }
            }
            Op::ScatterAddRows(a, index) => {
                let width = node.shape[1..].iter().product::<usize>();
                let ga = accumulate(&mut grads[a.0], len(*a));
                for (i, &r) in index.iter().enumerate() {
                    ga[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(t, gi)| *t += gi);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let width = *node.shape.last().unwrap();
                let gam = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], width);
                    for (r, &is) in inv_std.iter().enumerate() {
                        if is != 0.0 {
                            for c in 0..width {
                                gg[c] += g[r * width + c] * xhat[r * width + c];
                            }
                        }
                    }
                }
                if wants(*beta) {
                    let gb = accumulate(&mut grads[beta.0], width);
                    for (r, &is) in inv_std.iter().enumerate() {
                        if is != 0.0 {
                            for c in 0..width {
                                gb[c] += g[r * width + c];
                            }
                        }
                    }
                }
                if wants(*x) {
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    let wf = width as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        if is == 0.0 {
                            continue;
                        }
                        let row = r * width..(r + 1) * width;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for c in 0..width {
                            let d = g[row.start + c] * gam[c];
                            m1 += d;
                            m2 += d * xhat[row.start + c];
                        }
                        m1 /= wf;
                        m2 /= wf;
                        for c in 0..width {
                            let i = row.start + c;
                            gx[i] += is * (g[i] * gam[c] - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::L2Norm(a) => {
                let width = *nodes[a.0].shape.last().unwrap();
                let va = &nodes[a.0].value;
                let ga = accumulate(&mut grads[a.0], va.len());
                for (r, (&n, &gr)) in node.value.iter().zip(g).enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    for c in 0..width {
                        ga[r * width + c] += gr * va[r * width + c] / n;
                    }
                }
            }
            Op::Fft3(x, counts) => {
                let c = nodes[x.0].shape[1];
                let z = join_complex(g);
                let back = transform_channels(&z, *counts, c, false, self.backend);
                let gx = accumulate(&mut grads[x.0], len(*x));
                gx.iter_mut().zip(&back).for_each(|(t, b)| *t += b.re);
            }
            Op::Ifft3Real(y, counts) => {
                let (m, c) = (node.shape[0], node.shape[1]);
                let z: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                let fwd = transform_channels(&z, *counts, c, true, self.backend);
                let inv = 1.0 / m as f64;
                let gy = accumulate(&mut grads[y.0], 2 * m * c);
                for (i, f) in fwd.iter().enumerate() {
                    gy[i] += f.re * inv;
                    gy[m * c + i] += f.im * inv;
                }
            }
            Op::Select0(a, index) => {
                let w = node.value.len();
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga[index * w..(index + 1) * w].iter_mut().zip(g).for_each(|(t, gi)| *t += gi);
            }
            Op::Stack0(parts) => {
                let w = nodes[parts[0].0].value.len();
                for (i, p) in parts.iter().enumerate() {
                    if wants(*p) {
                        let gp = accumulate(&mut grads[p.0], w);
                        gp.iter_mut().zip(&g[i * w..(i + 1) * w]).for_each(|(t, gi)| *t += gi);
                    }
                }
            }
        }
    }

    /// Pullback of an elementwise map; `d(x, y)` is the derivative given the
    /// input and output values.
    fn elementwise(
        &self,
        nodes: &[Node],
        a: Var,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64) -> f64,
    ) {
        let va = &nodes[a.0].value;
        let ga = accumulate(&mut grads[a.0], va.len());
        for i in 0..va.len() {
            ga[i] += g[i] * d(va[i], node.value[i]);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `[n,k] × [k,m]`, row-major.
fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += x * y;
            }
        }
    }
    out
}

/// out[n,k] += g[n,m] × b[k,m]ᵀ
fn gemm_nt_acc(g: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let br = &b[p * m..(p + 1) * m];
            out[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,m] += a[n,k]ᵀ × g[n,m]
fn gemm_tn_acc(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[p * m..(p + 1) * m].iter_mut().zip(gr) {
                *o += x * y;
            }
        }
    }
}

fn split_complex(z: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * z.len());
    out.extend(z.iter().map(|v| v.re));
    out.extend(z.iter().map(|v| v.im));
    out
}

fn join_complex(v: &[f64]) -> Vec<Complex64> {
    let h = v.len() / 2;
    (0..h).map(|i| Complex64::new(v[i], v[h + i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Compare the tape gradient of `f` with central differences over every
    /// input coordinate.
    fn gradcheck(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&Tape, &[Var]) -> Result<Var>) {
        let eval = |vals: &[Vec<f64>]| {
            let tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .zip(inputs)
                .map(|(v, (_, s))| tape.leaf(v.clone(), s, true).unwrap())
                .collect();
            let out = f(&tape, &vars).unwrap();
            tape.item(out)
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(v, s)| tape.leaf(v.clone(), s, true).unwrap()).collect();
        let out = f(&tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
        let h = 1e-6;
        for (k, (v, _)) in inputs.iter().enumerate() {
            let an = grads.get_or_zeros(vars[k], v.len());
            for i in 0..v.len() {
                let mut p = base.clone();
                p[k][i] += h;
                let mut m = base.clone();
                m[k][i] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                let err = (fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(1.0);
                assert!(err < 1e-6, "input {k}[{i}]: fd {fd} vs tape {}", an[i]);
            }
        }
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        let y = tape.sum_all(tape.square(x));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_gradients_are_transposed_contractions() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let b = tape.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], true).unwrap();
        let y = tape.sum_all(tape.matmul(a, b).unwrap());
        let g = tape.backward(y).unwrap();
        // d/dA Σ(AB) = 1 Bᵀ: row sums of B
        assert_eq!(g.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // d/dB = Aᵀ 1: column sums of A
        assert_eq!(g.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn silu_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(vec![0.0], &[1]).unwrap();
        assert_eq!(tape.value(tape.silu(x))[0], 0.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(vec![3.0; 4], &[1, 4]).unwrap();
        let g = tape.constant(vec![1.0; 4], &[4]).unwrap();
        let b = tape.constant(vec![0.0; 4], &[4]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_row_bypasses_layer_norm() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0; 3], &[1, 3], true).unwrap();
        let g = tape.constant(vec![1.0; 3], &[3]).unwrap();
        let b = tape.constant(vec![0.5; 3], &[3]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
        let grads = tape.backward(tape.sum_all(y)).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gather_gradient_counts_indices() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0; 8], &[4, 2], true).unwrap();
        let y = tape.sum_all(tape.gather_rows(x, &[0, 2, 2]).unwrap());
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0; 4], &[2, 2], true).unwrap();
        let y = tape.leaf(vec![1.0; 3], &[3], true).unwrap();
        assert!(matches!(tape.add(x, y), Err(Error::Shape { .. })));
        assert!(matches!(tape.gather_rows(x, &[2]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarOutput(_))));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
        tape.reset();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn broadcasting_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = (random(&mut rng, 12), vec![3, 4]);
        let row = (random(&mut rng, 4), vec![4]);
        let col = (random(&mut rng, 3).iter().map(|v| v + 2.0).collect(), vec![3, 1]);
        gradcheck(&[a.clone(), row.clone(), col.clone()], |t, v| {
            let x = t.add(v[0], v[1])?;
            let x = t.mul(x, v[2])?;
            let x = t.sub(x, v[1])?;
            let x = t.div(x, v[2])?;
            Ok(t.sum_all(t.square(x)))
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = (random(&mut rng, 6).iter().map(|v| v + 1.5).collect(), vec![2, 3]);
        gradcheck(&[x], |t, v| {
            let a = t.sqrt(v[0]);
            let b = t.exp(t.scale(v[0], 0.3));
            let c = t.cos(v[0]);
            let d = t.silu(t.add_scalar(v[0], -1.0));
            let s = t.add(t.mul(a, b)?, t.mul(c, d)?)?;
            Ok(t.sum_all(s))
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = (random(&mut rng, 12), vec![4, 3]);
        let w = (random(&mut rng, 6), vec![3, 2]);
        let b = (random(&mut rng, 2 * 3 * 2), vec![2, 3, 2]);
        gradcheck(&[x, w, b], |t, v| {
            let y = t.matmul(v[0], v[1])?; // [4,2]
            let g = t.gather_rows(y, &[3, 0, 0, 2])?;
            let s = t.scatter_add_rows(g, &[1, 1, 0, 2], 3)?; // [3,2]
            let c = t.concat(&[s, y], 0)?; // [7,2]
            let c2 = t.concat(&[c, c], 1)?; // [7,4]
            let r = t.reshape(t.select0(t.stack0(&[c2, c2])?, 1)?, &[7, 4])?;
            let n = t.l2norm(r)?; // [7]
            let m = t.mean_axis(t.reshape(t.gather_rows(y, &[0, 1, 2])?, &[1, 3, 2])?, 0)?; // [3,2]
            let bm = t.batch_matmul(t.reshape(m, &[2, 1, 3])?, v[2])?; // [2,1,2]
            let sa = t.sum_axis(bm, 2)?;
            Ok(t.add(t.sum_all(n), t.sum_all(t.square(sa)))?)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = (random(&mut rng, 15), vec![3, 5]);
        let g = (random(&mut rng, 5), vec![5]);
        let b = (random(&mut rng, 5), vec![5]);
        let w = random(&mut rng, 15);
        gradcheck(&[x, g, b], move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let c = t.constant(w.clone(), &[3, 5])?;
            Ok(t.sum_all(t.square(t.mul(y, c)?)))
        });
    }

    #[test]
    fn spectral_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts = [3, 2, 2];
        let x = (random(&mut rng, 24), vec![12, 2]);
        let w = random(&mut rng, 2 * 12 * 2);
        gradcheck(&[x], move |t, v| {
            let s = t.fft3(v[0], counts)?;
            let c = t.constant(w.clone(), &[2, 12, 2])?;
            let mixed = t.mul(s, c)?;
            let y = t.ifft3_real(mixed, counts)?;
            Ok(t.add(t.sum_all(t.square(y)), t.sum_all(t.mul(s, c)?))?)
        });
    }

    #[test]
    fn dense_and_fast_spectral_ops_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 64 * 3);
        let run = |backend| {
            let t = Tape::with_backend(backend);
            let v = t.leaf(x.clone(), &[64, 3], true).unwrap();
            let s = t.fft3(v, [4, 4, 4]).unwrap();
            let y = t.ifft3_real(t.square(s), [4, 4, 4]).unwrap();
            let out = t.sum_all(t.silu(y));
            let g = t.backward(out).unwrap();
            (t.item(out), g.get(v).unwrap().to_vec())
        };
        let (a, ga) = run(SpectralBackend::Fast);
        let (b, gb) = run(SpectralBackend::Dense);
        assert!((a - b).abs() < 1e-10);
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn roundtrip_through_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 30);
        let t = Tape::new();
        let v = t.constant(x.clone(), &[15, 2]).unwrap();
        let y = t.ifft3_real(t.fft3(v, [5, 3, 1]).unwrap(), [5, 3, 1]).unwrap();
        assert!(t.value(y).iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

//! Differentiable operations. Each forward constructor records an [`Op`]
//! whose backward rule lives in [`backward`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Node, Tensor};

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        a_t: bool,
        b_t: bool,
    },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `b` is repeated over the leading dimensions of `a`.
    AddBroadcast { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// Multiply by a one-element tensor.
    ScaleBy { a: usize, s: usize },
    Relu { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { table: usize, ids: Vec<usize>, d: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        vocab: usize,
        count: usize,
    },
    Sum { a: usize },
    Mean { a: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Concat {
        parts: Vec<usize>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: usize,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Dropout { a: usize, mask: Vec<f64> },
    Gather { a: usize, idx: Vec<usize> },
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c[m×n] += op(a)[m×k] · op(b)[k×n]`, where `op` optionally transposes the
/// stored row-major operand.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the strides above address exactly the m×k and k×n elements
    // of `a` and `b`, and `c` holds m×n contiguous elements (checked above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Parent<'a> {
    shape: &'a [usize],
    value: &'a [f64],
}

impl Tensor {
    fn unary<F>(&self, f: F) -> Tensor
    where
        F: FnOnce(Parent<'_>) -> (Vec<usize>, Vec<f64>, Op),
    {
        let (shape, value, op, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let (shape, value, op) = f(Parent {
                shape: &n.shape,
                value: &n.value,
            });
            (shape, value, op, n.requires_grad)
        };
        self.tape.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        })
    }

    fn binary<F>(&self, other: &Tensor, f: F) -> Result<Tensor>
    where
        F: FnOnce(Parent<'_>, Parent<'_>) -> Result<(Vec<usize>, Vec<f64>, Op)>,
    {
        self.same_tape(other)?;
        let (shape, value, op, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let rg = a.requires_grad || b.requires_grad;
            let (shape, value, op) = f(
                Parent {
                    shape: &a.shape,
                    value: &a.value,
                },
                Parent {
                    shape: &b.shape,
                    value: &b.value,
                },
            )?;
            (shape, value, op, rg)
        };
        Ok(self.tape.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        }))
    }

    fn matmul_impl(&self, other: &Tensor, b_t: bool) -> Result<Tensor> {
        let (ai, bi) = (self.id, other.id);
        self.binary(other, |a, b| {
            let mismatch = || TensorError::Shape {
                op: "matmul",
                lhs: a.shape.to_vec(),
                rhs: b.shape.to_vec(),
            };
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(mismatch());
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (kb, n) = if b_t {
                (b.shape[1], b.shape[0])
            } else {
                (b.shape[0], b.shape[1])
            };
            if k != kb {
                return Err(mismatch());
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(m, k, n, a.value, false, b.value, b_t, &mut out);
            Ok((
                vec![m, n],
                out,
                Op::MatMul {
                    a: ai,
                    b: bi,
                    m,
                    k,
                    n,
                    a_t: false,
                    b_t,
                },
            ))
        })
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, false)
    }

    /// `self[m×k] · other[n×k]ᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, true)
    }

    fn elementwise(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        let (ai, bi) = (self.id, other.id);
        self.binary(other, |a, b| {
            if a.shape != b.shape {
                return Err(TensorError::Shape {
                    op: name,
                    lhs: a.shape.to_vec(),
                    rhs: b.shape.to_vec(),
                });
            }
            let out = a.value.iter().zip(b.value).map(|(&x, &y)| f(x, y)).collect();
            Ok((a.shape.to_vec(), out, op(ai, bi)))
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Adds `bias`, whose shape must equal the trailing dimensions of `self`.
    pub fn add_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (ai, bi) = (self.id, bias.id);
        self.binary(bias, |a, b| {
            let r = b.shape.len();
            if r > a.shape.len() || a.shape[a.shape.len() - r..] != *b.shape {
                return Err(TensorError::Shape {
                    op: "add_broadcast",
                    lhs: a.shape.to_vec(),
                    rhs: b.shape.to_vec(),
                });
            }
            let nb = b.value.len();
            let out = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.value[i % nb])
                .collect();
            Ok((a.shape.to_vec(), out, Op::AddBroadcast { a: ai, b: bi }))
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let a = self.id;
        self.unary(|p| {
            let out = p.value.iter().map(|x| x * c).collect();
            (p.shape.to_vec(), out, Op::Scale { a, c })
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        let (ai, si) = (self.id, s.id);
        self.binary(s, |a, sp| {
            if sp.value.len() != 1 {
                return Err(TensorError::Shape {
                    op: "scale_by",
                    lhs: a.shape.to_vec(),
                    rhs: sp.shape.to_vec(),
                });
            }
            let c = sp.value[0];
            let out = a.value.iter().map(|x| x * c).collect();
            Ok((a.shape.to_vec(), out, Op::ScaleBy { a: ai, s: si }))
        })
    }

    pub fn relu(&self) -> Tensor {
        let a = self.id;
        self.unary(|p| {
            let out = p.value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            (p.shape.to_vec(), out, Op::Relu { a })
        })
    }

    pub fn exp(&self) -> Tensor {
        let a = self.id;
        self.unary(|p| {
            let out = p.value.iter().map(|x| x.exp()).collect();
            (p.shape.to_vec(), out, Op::Exp { a })
        })
    }

    pub fn ln(&self) -> Tensor {
        let a = self.id;
        self.unary(|p| {
            let out = p.value.iter().map(|x| x.ln()).collect();
            (p.shape.to_vec(), out, Op::Ln { a })
        })
    }

    fn normalize_axis(&self, axis: usize, log: bool) -> Result<Tensor> {
        let a = self.id;
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if self.with_values(|v| v.iter().any(|x| x.is_nan())) {
            return Err(TensorError::NonFinite(if log { "log_softmax" } else { "softmax" }));
        }
        Ok(self.unary(|p| {
            let mut out = vec![0.0; p.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| p.value[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (p.value[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                    if log {
                        let lse = max + total.ln();
                        for j in 0..len {
                            out[at(j)] = p.value[at(j)] - lse;
                        }
                    } else {
                        for j in 0..len {
                            out[at(j)] /= total;
                        }
                    }
                }
            }
            let op = if log {
                Op::LogSoftmax { a, outer, len, inner }
            } else {
                Op::Softmax { a, outer, len, inner }
            };
            (p.shape.to_vec(), out, op)
        }))
    }

    /// Max-shifted softmax along `axis`. Errors on NaN input.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.normalize_axis(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.normalize_axis(axis, true)
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let shape = self.shape();
        let d = *shape.last().ok_or(TensorError::Axis { axis: 0, rank: 0 })?;
        for t in [gain, bias] {
            let s = t.shape();
            if s != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: s,
                });
            }
        }
        let (value, xhat, inv_std, rg) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let g = &inner.nodes[gain.id].value;
            let b = &inner.nodes[bias.id].value;
            let rows = x.value.len() / d;
            let mut out = vec![0.0; x.value.len()];
            let mut xhat = vec![0.0; x.value.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.value[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
            let rg = x.requires_grad
                || inner.nodes[gain.id].requires_grad
                || inner.nodes[bias.id].requires_grad;
            (out, xhat, inv_std, rg)
        };
        Ok(self.tape.push(Node {
            shape,
            value,
            op: Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                d,
                xhat,
                inv_std,
            },
            requires_grad: rg,
        }))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                bound: v,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding lookup with no ids".into()));
        }
        let table = self.id;
        let ids = ids.to_vec();
        Ok(self.unary(|p| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in &ids {
                out.extend_from_slice(&p.value[i * d..(i + 1) * d]);
            }
            (vec![ids.len(), d], out, Op::Embedding { table, ids, d })
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self[n×V]`. Positions whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(&self, targets: &[usize], ignore_index: Option<usize>) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let (n, vocab) = (shape[0], shape[1]);
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| if Some(t) == ignore_index { None } else { Some(t) })
            .collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: *bad,
                bound: vocab,
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let logits = self.id;
        Ok(self.unary(|p| {
            let mut probs = vec![0.0; n * vocab];
            let mut total = 0.0;
            for r in 0..n {
                let row = &p.value[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..vocab {
                    let e = (row[j] - max).exp();
                    probs[r * vocab + j] = e;
                    z += e;
                }
                for j in 0..vocab {
                    probs[r * vocab + j] /= z;
                }
                if let Some(t) = targets[r] {
                    total += max + z.ln() - row[t];
                }
            }
            (
                Vec::new(),
                vec![total / count as f64],
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    vocab,
                    count,
                },
            )
        }))
    }

    pub fn sum(&self) -> Tensor {
        let a = self.id;
        self.unary(|p| (Vec::new(), vec![p.value.iter().sum()], Op::Sum { a }))
    }

    pub fn mean(&self) -> Tensor {
        let a = self.id;
        self.unary(|p| {
            let m = p.value.iter().sum::<f64>() / p.value.len() as f64;
            (Vec::new(), vec![m], Op::Mean { a })
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols, a) = (shape[0], shape[1], self.id);
        Ok(self.unary(|p| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = p.value[r * cols + c];
                }
            }
            (vec![cols, rows], out, Op::Transpose { a, rows, cols })
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        crate::tape::check_shape(shape, self.numel())?;
        let a = self.id;
        let shape = shape.to_vec();
        Ok(self.unary(|p| (shape, p.value.to_vec(), Op::Reshape { a })))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        for p in &parts[1..] {
            first.same_tape(p)?;
        }
        let tape = first.tape.clone();
        let (shape, value, lens, outer, inner, rg) = {
            let tin = tape.inner.borrow();
            let base = &tin.nodes[first.id].shape;
            let (outer, _, inner) = axis_split(base, axis)?;
            let mut lens = Vec::with_capacity(parts.len());
            let mut rg = false;
            for p in parts {
                let n = &tin.nodes[p.id];
                let same_rest = n.shape.len() == base.len()
                    && n.shape.iter().zip(base).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !same_rest {
                    return Err(TensorError::Shape {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                lens.push(n.shape[axis]);
                rg |= n.requires_grad;
            }
            let total: usize = lens.iter().sum();
            let mut value = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (p, &len) in parts.iter().zip(&lens) {
                    let v = &tin.nodes[p.id].value;
                    value.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (shape, value, lens, outer, inner, rg)
        };
        Ok(tape.push(Node {
            shape,
            value,
            op: Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                lens,
                outer,
                inner,
            },
            requires_grad: rg,
        }))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack_scalars(items: &[Tensor]) -> Result<Tensor> {
        let flat: Vec<Tensor> = items
            .iter()
            .map(|t| t.reshape(&[1]))
            .collect::<Result<_>>()?;
        Tensor::concat(&flat, 0)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        let (outer, len_in, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > len_in {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                bound: len_in,
            });
        }
        let a = self.id;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.unary(|p| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * len_in + start) * inner;
                out.extend_from_slice(&p.value[base..base + len * inner]);
            }
            (
                out_shape,
                out,
                Op::Slice {
                    a,
                    outer,
                    len_in,
                    start,
                    len,
                    inner,
                },
            )
        }))
    }

    /// Row `i` of a 2-D tensor as a `[d]` vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Axis { axis: 0, rank: shape.len() });
        }
        self.slice(0, i, 1)?.reshape(&[shape[1]])
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        let n = self.numel();
        if i >= n {
            return Err(TensorError::Index {
                op: "index",
                index: i,
                bound: n,
            });
        }
        let a = self.id;
        Ok(self.unary(|p| (Vec::new(), vec![p.value[i]], Op::Gather { a, idx: vec![i] })))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let a = self.id;
        Ok(self.unary(|pa| {
            let out = pa.value.iter().zip(&mask).map(|(x, m)| x * m).collect();
            (pa.shape.to_vec(), out, Op::Dropout { a, mask })
        }))
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let (shape, value) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.shape.clone(), n.value.clone())
        };
        self.tape.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: false,
        })
    }
}

fn grad_slot<'a>(
    pending: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(pending[id].get_or_insert_with(|| vec![0.0; n]))
}

/// Propagates `g` (the gradient of this node's output) into its parents.
pub(crate) fn backward(
    op: &Op,
    g: &[f64],
    out: &[f64],
    nodes: &[Node],
    pending: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            a_t,
            b_t,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = grad_slot(pending, nodes, *a) {
                if *a_t {
                    gemm_acc(k, n, m, bv, *b_t, g, true, da);
                } else {
                    gemm_acc(m, n, k, g, false, bv, !*b_t, da);
                }
            }
            if let Some(db) = grad_slot(pending, nodes, *b) {
                if *b_t {
                    gemm_acc(n, m, k, g, true, av, *a_t, db);
                } else {
                    gemm_acc(k, m, n, av, !*a_t, g, false, db);
                }
            }
        }
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if let Some(d) = grad_slot(pending, nodes, id) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = grad_slot(pending, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if let Some(d) = grad_slot(pending, nodes, *b) {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        Op::AddBroadcast { a, b } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = grad_slot(pending, nodes, *b) {
                let nb = d.len();
                for (i, y) in g.iter().enumerate() {
                    d[i % nb] += y;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::ScaleBy { a, s } => {
            let c = nodes[*s].value[0];
            let av = &nodes[*a].value;
            if let Some(d) = grad_slot(pending, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            if let Some(d) = grad_slot(pending, nodes, *s) {
                d[0] += av.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        Op::Relu { a } => {
            let av = &nodes[*a].value;
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Exp { a } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * out[i];
                }
            }
        }
        Op::Ln { a } => {
            let av = &nodes[*a].value;
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] / av[i];
                }
            }
        }
        Op::Softmax { a, outer, len, inner } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { a, outer, len, inner } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..*len).map(|j| g[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] += g[at(j)] - out[at(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            inv_std,
        } => {
            let d = *d;
            let rows = g.len() / d;
            let gv = &nodes[*gain].value;
            if let Some(dx) = grad_slot(pending, nodes, *x) {
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] += scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            }
            if let Some(dg) = grad_slot(pending, nodes, *gain) {
                for (i, y) in g.iter().enumerate() {
                    dg[i % d] += y * xhat[i];
                }
            }
            if let Some(db) = grad_slot(pending, nodes, *bias) {
                for (i, y) in g.iter().enumerate() {
                    db[i % d] += y;
                }
            }
        }
        Op::Embedding { table, ids, d } => {
            if let Some(dt) = grad_slot(pending, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..*d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            vocab,
            count,
        } => {
            if let Some(dl) = grad_slot(pending, nodes, *logits) {
                let scale = g[0] / *count as f64;
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..*vocab {
                        dl[r * vocab + j] += scale * probs[r * vocab + j];
                    }
                    dl[r * vocab + t] -= scale;
                }
            }
        }
        Op::Sum { a } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Concat {
            parts,
            lens,
            outer,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(lens) {
                if let Some(d) = grad_slot(pending, nodes, p) {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            d[dst + i] += g[src + i];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice {
            a,
            outer,
            len_in,
            start,
            len,
            inner,
        } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for o in 0..*outer {
                    let dst = (o * len_in + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        d[dst + i] += g[src + i];
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * mask[i];
                }
            }
        }
        Op::Gather { a, idx } => {
            if let Some(d) = grad_slot(pending, nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += g[k];
                }
            }
        }
    }
}

use std::cell::RefCell;
use std::rc::Rc;

use demp_tensor::{ParamId, ParamStore, Tape, Tensor, MASKED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A tape bound to a parameter store for one forward pass.
pub struct Ctx<'a> {
    pub tape: Rc<Tape>,
    pub store: &'a ParamStore,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'a> Ctx<'a> {
    /// Evaluation context: dropout off.
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            dropout: None,
        }
    }

    /// Training context with dropout rate `p` driven by `seed`.
    pub fn training(store: &'a ParamStore, p: f64, seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            dropout: (p > 0.0).then(|| (p, RefCell::new(ChaCha8Rng::seed_from_u64(seed)))),
        }
    }

    /// Evaluation context recording onto an existing tape.
    pub fn with_tape(tape: Rc<Tape>, store: &'a ParamStore) -> Self {
        Ctx {
            tape,
            store,
            dropout: None,
        }
    }

    pub fn p(&self, id: ParamId) -> Tensor {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(self.tape.constant(values, shape)?)
    }

    pub(crate) fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        match &self.dropout {
            Some((p, rng)) => Ok(x.dropout(*p, &mut *rng.borrow_mut())?),
            None => Ok(x.clone()),
        }
    }
}

/// Registers parameters under a common name prefix.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Ok(self.store.add(name, shape, values)?)
    }

    /// Glorot-uniform `[rows × cols]`.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, &[rows, cols], bound)
    }

    /// Rows with unit expected squared norm.
    pub fn table(&mut self, name: &str, rows: usize, d: usize) -> Result<ParamId> {
        self.uniform(name, &[rows, d], (3.0 / d as f64).sqrt())
    }

    pub fn filled(&mut self, name: &str, n: usize, value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, &[n], vec![value; n])?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: init.matrix(&format!("{name}.w"), d_in, d_out)?,
            b: init.filled(&format!("{name}.b"), d_out, 0.0)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&ctx.p(self.w))?.add_broadcast(&ctx.p(self.b))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: init.filled(&format!("{name}.gain"), d, 1.0)?,
            bias: init.filled(&format!("{name}.bias"), d, 0.0)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&ctx.p(self.gain), &ctx.p(self.bias), LN_EPS)?)
    }
}

/// `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub(crate) fn new(init: &mut Init, name: &str, d_in: usize, d_ff: usize, d_out: usize) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(init, &format!("{name}.inner"), d_in, d_ff)?,
            outer: Linear::new(init, &format!("{name}.outer"), d_ff, d_out)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let h = ctx.dropout(&self.inner.forward(ctx, x)?.relu())?;
        self.outer.forward(ctx, &h)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new(init: &mut Init, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            query: Linear::new(init, &format!("{name}.query"), d, d)?,
            key: Linear::new(init, &format!("{name}.key"), d, d)?,
            value: Linear::new(init, &format!("{name}.value"), d, d)?,
            out: Linear::new(init, &format!("{name}.out"), d, d)?,
            n_heads,
        })
    }

    /// Scaled dot-product attention per head. `mask` is additive with shape
    /// `[queries × keys]`.
    pub fn forward(&self, ctx: &Ctx, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (k_rows, v_rows) = (k.shape()[0], v.shape()[0]);
        if k_rows != v_rows {
            return Err(Error::Tensor(demp_tensor::TensorError::Shape {
                op: "multi_head_attention",
                lhs: k.shape(),
                rhs: v.shape(),
            }));
        }
        let q = self.query.forward(ctx, q)?;
        let k = self.key.forward(ctx, k)?;
        let v = self.value.forward(ctx, v)?;
        let d = q.shape()[1];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (q.slice(1, h * dh, dh)?, k.slice(1, h * dh, dh)?, v.slice(1, h * dh, dh)?)
            };
            let mut scores = qh.matmul_t(&kh)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let weights = ctx.dropout(&scores.softmax(1)?)?;
            heads.push(weights.matmul(&vh)?);
        }
        let joined = if heads.len() == 1 {
            heads.pop().expect("one head")
        } else {
            Tensor::concat(&heads, 1)?
        };
        self.out.forward(ctx, &joined)
    }
}

/// Additive mask hiding keys after each query position.
pub fn causal_mask(ctx: &Ctx, t: usize) -> Result<Tensor> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = MASKED;
        }
    }
    ctx.constant(m, &[t, t])
}

/// Additive mask hiding padded keys from every query, or `None` when no key
/// is padded.
pub fn key_mask(ctx: &Ctx, queries: usize, keys: &[bool]) -> Result<Option<Tensor>> {
    if keys.iter().all(|k| *k) {
        return Ok(None);
    }
    let row: Vec<f64> = keys.iter().map(|&k| if k { 0.0 } else { MASKED }).collect();
    let m: Vec<f64> = (0..queries).flat_map(|_| row.iter().copied()).collect();
    Ok(Some(ctx.constant(m, &[queries, keys.len()])?))
}

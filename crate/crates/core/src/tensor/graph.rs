use super::kernels::{self, AttnShape};
use super::{axis_split, check_rope, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulRow(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        weights: Option<Vec<T>>,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        width: usize,
        head_dim: usize,
        base: f32,
        start_pos: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    LogSoftmaxGather {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Every operation evaluates immediately and
/// appends a node; nodes only reference earlier nodes, so the tape is
/// always in topological order.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

impl Graph<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Element> Graph<T> {
    pub fn with_precision() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) target with
    /// respect to `v`, if `v` participates in it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|&v| f(v)).collect(),
        );
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::lit(c);
        self.map(x, Op::Scale(x, c), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let k = T::lit(c);
        self.map(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Op::Silu(x), kernels::silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// `x[.., c] * v[c]`, broadcasting `v` over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(v).numel() != c {
            return Err(Error::dim("mul_row", self.shape(x), self.shape(v)));
        }
        let vd = self.data(v);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| a * b))
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, Op::MulRow(x, v), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let t = Tensor::from_parts(
            self.shape(x).to_vec(),
            kernels::softmax_axis(self.data(x), outer, len, inner),
        );
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// RMS normalisation over the trailing axis. See
    /// [`kernels::rms_norm`] for the role of `weights`.
    pub fn rms_norm(
        &mut self,
        x: Var,
        gain: Var,
        weights: Option<Vec<T>>,
        eps: f32,
    ) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d {
            return Err(Error::dim("rms_norm", self.shape(x), self.shape(gain)));
        }
        if let Some(w) = &weights {
            if w.len() != d {
                return Err(Error::dim("rms_norm", self.shape(x), &[w.len()]));
            }
        }
        if eps < 0.0 {
            return Err(Error::Contract(format!("rms_norm eps must be >= 0, got {eps}")));
        }
        let (out, inv_rms) =
            kernels::rms_norm(self.data(x), d, self.data(gain), weights.as_deref(), T::widen(eps));
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            t,
            Op::RmsNorm {
                x,
                gain,
                weights,
                inv_rms,
            },
            rg,
        ))
    }

    /// Rotary embedding; row `t` of `x` sits at position `start_pos + t`.
    pub fn rope(&mut self, x: Var, head_dim: usize, base: f32, start_pos: usize) -> Result<Var> {
        check_rope(self.shape(x), head_dim)?;
        let width = self.value(x).numel() / self.shape(x)[0];
        let t = Tensor::from_parts(
            self.shape(x).to_vec(),
            kernels::rope(self.data(x), width, head_dim, base, start_pos, false),
        );
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                width,
                head_dim,
                base,
                start_pos,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).matrix_dims("embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of an empty sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], data);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal grouped-query attention over `q[seq × heads·hd]`,
    /// `k, v[seq × kv_heads·hd]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        kv_heads: usize,
    ) -> Result<Var> {
        let (seq, qw) = self.value(q).matrix_dims("attention")?;
        let (kseq, kw) = self.value(k).matrix_dims("attention")?;
        if kv_heads == 0 || heads % kv_heads != 0 || qw % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {heads} / kv heads {kv_heads} do not tile width {qw}"
            )));
        }
        let head_dim = qw / heads;
        if kseq != seq || kw != kv_heads * head_dim || self.shape(v) != self.shape(k) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        let shape = AttnShape {
            seq,
            heads,
            kv_heads,
            head_dim,
        };
        let (out, probs) =
            kernels::causal_attention(self.data(q), self.data(k), self.data(v), shape);
        let t = Tensor::from_parts(vec![seq, qw], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Row-wise `log softmax(logits)[i, targets[i]]`, shape `[n]`.
    pub fn log_softmax_gather(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.value(logits).matrix_dims("log_softmax_gather")?;
        if targets.len() != n {
            return Err(Error::dim("log_softmax_gather", self.shape(logits), &[targets.len()]));
        }
        let mut out = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n * vocab);
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: vocab,
                });
            }
            let ls = kernels::log_softmax_row(self.value(logits).row(i));
            out.push(ls[t]);
            probs.extend(ls.iter().map(|l| l.exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::LogSoftmaxGather {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax_gather(logits, targets)?;
        let total = self.sum(lp);
        Ok(self.scale(total, -1.0 / targets.len() as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `silu(x·W_gate) ⊙ (x·W_up) · W_down`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let hidden = self.swiglu_hidden(x, w_gate, w_up)?;
        self.matmul(hidden, w_down)
    }

    /// The gated hidden activation `silu(x·W_gate) ⊙ (x·W_up)`.
    pub fn swiglu_hidden(&mut self, x: Var, w_gate: Var, w_up: Var) -> Result<Var> {
        let g = self.matmul(x, w_gate)?;
        let g = self.silu(g);
        let u = self.matmul(x, w_up)?;
        self.mul(g, u)
    }

    /// Reverse-mode accumulation from scalar `loss`. Gradients land on
    /// every node that depends on a `requires_grad` input and can be read
    /// with [`grad`](Self::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, &c) in existing.iter_mut().zip(&contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    acc(*a, kernels::matmul_b_t(g, self.data(*b), m, k, n));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_a_t(self.data(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(&g, &y)| g * y).collect());
                acc(*b, g.iter().zip(da).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(x, c) => {
                let k = T::lit(*c);
                acc(*x, g.iter().map(|&v| v * k).collect())
            }
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::MulRow(x, v) => {
                let vd = self.data(*v);
                let c = vd.len();
                if self.rg(*x) {
                    acc(
                        *x,
                        g.chunks(c)
                            .flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| a * b))
                            .collect(),
                    );
                }
                if self.rg(*v) {
                    let mut dv = vec![T::zero(); c];
                    for (grow, xrow) in g.chunks(c).zip(self.data(*x).chunks(c)) {
                        for ((d, &a), &b) in dv.iter_mut().zip(grow).zip(xrow) {
                            *d = *d + a * b;
                        }
                    }
                    acc(*v, dv);
                }
            }
            Op::Silu(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
            ),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let mut dot = T::zero();
                        for i in 0..*len {
                            let p = base + i * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for i in 0..*len {
                            let p = base + i * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::RmsNorm {
                x,
                gain,
                weights,
                inv_rms,
            } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let d = gd.len();
                let denom = match weights {
                    Some(w) => w.iter().fold(T::zero(), |a, &b| a + b),
                    None => T::lit(d as f64),
                };
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgain = vec![T::zero(); d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for i in 0..d {
                        dot = dot + gr[i] * gd[i] * xr[i];
                        dgain[i] = dgain[i] + gr[i] * xr[i] * inv;
                    }
                    let coef = inv * inv * inv * dot / denom;
                    for i in 0..d {
                        let w2 = weights.as_ref().map_or(T::one(), |w| w[i] * w[i]);
                        dx[r * d + i] = gd[i] * inv * gr[i] - coef * w2 * xr[i];
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
            }
            Op::Rope {
                x,
                width,
                head_dim,
                base,
                start_pos,
            } => acc(
                *x,
                kernels::rope(g, *width, *head_dim, *base, *start_pos, true),
            ),
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *t = *t + v;
                    }
                }
                acc(*table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (dq, dk, dv) = kernels::causal_attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    *shape,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::LogSoftmaxGather {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).last_dim();
                let mut dl = vec![T::zero(); probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut dl[i * vocab..(i + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *d = -g[i] * p;
                    }
                    row[t] = row[t] + g[i];
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
        }
    }
}

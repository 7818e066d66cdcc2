//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! Every operation appends a node holding its output and whatever it needs for
//! the backward pass. Inputs always precede outputs, so a single reverse sweep
//! over the node list visits each node once in topological order.
//!
//! Broadcasting is limited to [`Graph::add_bias`] (a vector added along the
//! last axis).

use rand::Rng;

use crate::tensor::{numel, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: R,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<R>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: Vec<bool>,
        probs: Vec<R>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Operation tape for one forward/backward cycle.
#[derive(Debug)]
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    record: bool,
    grads: Option<Vec<Option<Vec<R>>>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank_err(axis: usize, rank: usize) -> TensorError {
    TensorError::Axis { axis, rank }
}

// out[m×n] += a[m×k]·b[k×n]
fn gemm<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

// out[m×k] += dc[m×n]·bᵀ where b is [k×n]
fn gemm_nt<R: Real>(dc: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = R::zero();
            for (&d, &bv) in drow.iter().zip(brow) {
                acc = acc + d * bv;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

// out[k×n] += aᵀ·dc where a is [m×k], dc is [m×n]
fn gemm_tn<R: Real>(a: &[R], dc: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &d) in orow.iter_mut().zip(drow) {
                *o = *o + av * d;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// Maps each output flat index to its source flat index under `perm`.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl<R: Real> Graph<R> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            grads: None,
        }
    }

    /// A graph that only evaluates: nothing it produces carries a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            grads: None,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of a node's value, with its gradient attached when one was computed.
    pub fn tensor(&self, v: Var) -> Tensor<R> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone())
            .expect("graph nodes are well formed")
            .with_requires_grad(node.requires_grad);
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad matches data");
        }
        t
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<R>, op: Op<R>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a tensor on the graph. It participates in differentiation when
    /// the tensor has `requires_grad` set and this graph records.
    pub fn leaf(&mut self, t: &Tensor<R>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: self.record && t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input, never differentiated.
    pub fn constant(&mut self, shape: &[usize], data: Vec<R>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n, vec![*b, *m, *n]),
            _ => return Err(mismatch()),
        };
        let mut out = vec![R::zero(); batch * m * n];
        {
            let ad = self.value(a);
            let bd = self.value(b);
            for bi in 0..batch {
                gemm(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let width = *sx.last().expect("rank >= 1");
        if self.shape(bias) != [width] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bd = self.value(bias);
        let out = self
            .value(x)
            .chunks(width)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > R::zero() { v } else { R::zero() })
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(rank_err(axis, shape.len()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x);
        let mut out = vec![R::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = R::neg_infinity();
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut total = R::zero();
                for j in 0..len {
                    let e = (xd[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Normalizes the last axis, then applies an elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let n = R::from_usize(width).expect("width fits");
        let xd = self.value(x);
        let gd = self.value(gain);
        let bd = self.value(bias);
        let rows = xd.len() / width;
        let mut xhat = vec![R::zero(); xd.len()];
        let mut inv_std = vec![R::zero(); rows];
        let mut out = vec![R::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let is = R::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = h * gd[j] + bd[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table; output is `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(rank_err(1, shape.len()));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding lookup with no ids".into()));
        }
        let td = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout. Eval mode and a zero rate return `x` unchanged and
    /// draw nothing from `rng`.
    pub fn dropout<G: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut G) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate} not in [0,1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = R::lit(1.0 / (1.0 - rate));
        let mask: Vec<R> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    R::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() {
            return Err(rank_err(perm.len(), shape.len()));
        }
        for &p in perm {
            if p >= shape.len() || seen[p] {
                return Err(rank_err(p, shape.len()));
            }
            seen[p] = true;
        }
        let map = permute_index(&shape, perm);
        let xd = self.value(x);
        let out = map.iter().map(|&s| xd[s]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(rank_err(a.max(b), rank));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(rank_err(axis, first.len()));
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total / inner;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            parts,
        ))
    }

    /// Mean over non-padding rows of `-log softmax(logits)[row, target]`.
    /// Logits of shape `[..., V]` are read as `[N, V]` rows.
    ///
    /// `pad[i] == true` marks row `i` as padding; such rows contribute nothing
    /// to the value or the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / vocab;
        if shape.len() < 2 || rows != targets.len() || pad.len() != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len(), pad.len()],
            });
        }
        let count = pad.iter().filter(|&&p| !p).count();
        if count == 0 {
            return Err(TensorError::EmptyLossSupport);
        }
        let ld = self.value(logits);
        let mut probs = vec![R::zero(); ld.len()];
        let mut total = R::zero();
        for (r, (&t, &is_pad)) in targets.iter().zip(pad).enumerate() {
            if is_pad {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::Index {
                    index: t,
                    size: vocab,
                });
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let sum: R = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - log_z).exp();
            }
            total = total + (log_z - row[t]);
        }
        let loss = total / R::from_usize(count).expect("count fits");
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad: pad.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    pub fn backward_done(&self) -> bool {
        self.grads.is_some()
    }

    /// Clears computed gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Populates the gradient of `loss` with respect to every recorded node
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        if self.shape(loss) != [1] {
            return Err(TensorError::NonScalar(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::NotRecorded);
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [R])| {
            let len = self.nodes[v.0].data.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![R::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bd = &self.nodes[b.0].data;
                    acc(*a, &mut |da| {
                        for bi in 0..*batch {
                            gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bd[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if wants(*b) {
                    let ad = &self.nodes[a.0].data;
                    acc(*b, &mut |db| {
                        for bi in 0..*batch {
                            gemm_tn(
                                &ad[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                }
                if wants(*bias) {
                    let w = self.nodes[bias.0].data.len();
                    acc(*bias, &mut |d| {
                        for row in g.chunks(w) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if wants(*a) {
                    acc(*a, &mut |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * bd[j];
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * ad[j];
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *factor));
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xd = &self.nodes[x.0].data;
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            if xd[j] > R::zero() {
                                d[j] = d[j] + g[j];
                            }
                        }
                    });
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if wants(*x) {
                    let y = &node.data;
                    acc(*x, &mut |d| {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let base = o * len * inner + i;
                                let mut dot = R::zero();
                                for j in 0..*len {
                                    let p = base + j * inner;
                                    dot = dot + g[p] * y[p];
                                }
                                for j in 0..*len {
                                    let p = base + j * inner;
                                    d[p] = d[p] + y[p] * (g[p] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gd = &self.nodes[gain.0].data;
                let width = gd.len();
                let n = R::from_usize(width).expect("width fits");
                if wants(*x) {
                    acc(*x, &mut |d| {
                        for (r, &is) in inv_std.iter().enumerate() {
                            let off = r * width;
                            let mut sum_dh = R::zero();
                            let mut sum_dh_h = R::zero();
                            for j in 0..width {
                                let dh = g[off + j] * gd[j];
                                sum_dh = sum_dh + dh;
                                sum_dh_h = sum_dh_h + dh * xhat[off + j];
                            }
                            for j in 0..width {
                                let dh = g[off + j] * gd[j];
                                d[off + j] = d[off + j]
                                    + is / n * (n * dh - sum_dh - xhat[off + j] * sum_dh_h);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    acc(*gain, &mut |d| {
                        for (row_g, row_h) in g.chunks(width).zip(xhat.chunks(width)) {
                            for j in 0..width {
                                d[j] = d[j] + row_g[j] * row_h[j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(*bias, &mut |d| {
                        for row in g.chunks(width) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let dim = self.nodes[table.0].shape[1];
                    acc(*table, &mut |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g[r * dim..(r + 1) * dim];
                            let dst = &mut d[id * dim..(id + 1) * dim];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    acc(*x, &mut |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * mask[j];
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                }
            }
            Op::Permute { x, perm } => {
                if wants(*x) {
                    let map = permute_index(&self.nodes[x.0].shape, perm);
                    acc(*x, &mut |d| {
                        for (o, &s) in map.iter().enumerate() {
                            d[s] = d[s] + g[o];
                        }
                    });
                }
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if wants(p) {
                        acc(p, &mut |d| {
                            for o in 0..*outer {
                                let src = &g[o * total + offset..o * total + offset + w];
                                let dst = &mut d[o * w..(o + 1) * w];
                                dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let vocab = *self.nodes[logits.0].shape.last().expect("rank >= 1");
                    let scale = g[0] / R::from_usize(*count).expect("count fits");
                    acc(*logits, &mut |d| {
                        for (r, (&t, &is_pad)) in targets.iter().zip(pad).enumerate() {
                            if is_pad {
                                continue;
                            }
                            for j in 0..vocab {
                                let onehot = if j == t { R::one() } else { R::zero() };
                                d[r * vocab + j] =
                                    d[r * vocab + j] + scale * (probs[r * vocab + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0]));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        let t = Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true);
        g.leaf(&t)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.leaf(&Tensor::identity(2));
        let m = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_matmul() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(&Tensor::zeros(&[2, 3]));
        let m = g.leaf(&Tensor::from_fn(&[3, 4], |i| i as f64 + 1.0));
        let out = g.matmul(z, m).unwrap();
        assert_eq!(g.shape(out), &[2, 4]);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err.to_string(),
            "dimension mismatch in matmul: [2, 3] vs [2, 3]"
        );
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[3], vec![0.0; 3]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);
        assert!(v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_inner_axis_sums_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 5.0));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = param(&mut g, &[1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn double_backward_rejected_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = param(&mut g, &[1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = param(&mut g, &[2], vec![1.0, 2.0]);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::<f64>::no_grad();
        let x = param(&mut g, &[1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        assert!(!g.requires_grad(y));
        assert_eq!(g.backward(y), Err(TensorError::NotRecorded));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        // near-certain logits
        let l = g.constant(&[2, 3], vec![100.0, 0.0, 0.0, 0.0, 100.0, 0.0]).unwrap();
        let loss = g.cross_entropy(l, &[0, 1], &[false, false]).unwrap();
        assert!(g.value(loss)[0].abs() < 1e-12);
        // uniform logits
        let l = g.constant(&[2, 5], vec![0.7; 10]).unwrap();
        let loss = g.cross_entropy(l, &[3, 1], &[false, false]).unwrap();
        assert!((g.value(loss)[0] - 5f64.ln()).abs() < 1e-12);
        // all padded
        assert_eq!(
            g.cross_entropy(l, &[3, 1], &[true, true]),
            Err(TensorError::EmptyLossSupport)
        );
        assert_eq!(g.cross_entropy(l, &[3, 1], &[true, true]).unwrap_err().to_string(), "empty loss support");
        // target out of range
        assert!(matches!(
            g.cross_entropy(l, &[5, 1], &[false, false]),
            Err(TensorError::Index { index: 5, size: 5 })
        ));
    }

    #[test]
    fn masked_rows_get_exact_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let l = param(&mut g, &[3, 4], (0..12).map(|i| (i as f64).cos()).collect());
        let loss = g.cross_entropy(l, &[1, 2, 0], &[false, true, false]).unwrap();
        g.backward(loss).unwrap();
        let d = g.grad(l).unwrap();
        assert!(d[4..8].iter().all(|&v| v == 0.0));
        assert!(d[0..4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full(&[1000], 1.0));
        let same = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(same, x);
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let v = g.value(y);
        assert!(v.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = v.iter().filter(|&&v| v == 2.0).count();
        assert!((400..600).contains(&kept));
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn permute_and_concat_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn(&[2, 3], |i| i as f64));
        let t = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let y = g.leaf(&Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64));
        let c = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.value(c), &[0.0, 1.0, 2.0, 10.0, 3.0, 4.0, 5.0, 11.0]);
        let c0 = g.concat(&[x, x], 0).unwrap();
        assert_eq!(g.shape(c0), &[4, 3]);
        assert!(g.concat(&[x, t], 1).is_err());
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = Graph::<f64>::new();
        let t = g.leaf(&Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.embedding(t, &[1, 4]),
            Err(TensorError::Index { index: 4, size: 4 })
        ));
    }
}

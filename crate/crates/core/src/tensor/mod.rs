//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] consumes the tape
//! and returns per-node gradients. Values are row-major contiguous and
//! shared via `Arc`, so enrolling parameters as leaves copies nothing.
//! Accumulation order is fixed (reverse insertion order), which makes
//! training bit-deterministic for a given seed.

pub mod adam;
pub mod gradcheck;
pub mod linalg;

use crate::error::TensorError;
use std::sync::Arc;

type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional value. `grad` is populated by the training loop
/// after a backward pass.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal product(shape)"
        );
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![0.0; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], vec![1])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Mutable view of the values; clones the buffer only if it is still
    /// shared with a live tape.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    /// Grouped matmul: (g,m,k) @ (g,k,n), rhs optionally transposed in its
    /// last two axes.
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// rhs tiled over the leading dimensions of lhs.
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
    },
    /// (1, rest..) tiled to (reps, rest..).
    Repeat0 {
        a: usize,
    },
    /// (B,C,H,W) -> (B, (H/p)*(W/p), C*p*p) non-overlapping patches.
    Patches {
        x: usize,
        patch: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// FLOP attribution buckets; `AttnScores` isolates the q·kᵀ step for the
/// complexity benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    General = 0,
    AttnScores = 1,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

/// Recording tape. Dropped (or consumed by [`Tape::backward`]) after each
/// training step.
pub struct Tape {
    nodes: Vec<Node>,
    flops: [u64; 2],
    scope: Scope,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Epsilon inside the layer-norm variance square root. Small enough that
/// normalized rows with variance >= 1e-2 have output variance within 1e-6
/// of one.
pub const LAYER_NORM_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: [0, 0],
            scope: Scope::General,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_scope(&mut self, scope: Scope) {
        self.scope = scope;
    }

    pub fn flops(&self, scope: Scope) -> u64 {
        self.flops[scope as usize]
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    fn count(&mut self, flops: u64) {
        self.flops[self.scope as usize] += flops;
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data: Arc::new(data),
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Enroll a tensor as a leaf; the value buffer is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            data: Arc::clone(&t.data),
            shape: t.shape.clone(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from raw values that never needs gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push(data, shape, false, Op::Leaf)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            false,
            self.value(b),
            false,
            0.0,
            &mut out,
        );
        self.count(2 * (m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || if trans_b {
                sa[2] != sb[2]
            } else {
                sa[2] != sb[1]
            };
        if bad {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            linalg::gemm(
                m,
                k,
                n,
                1.0,
                &self.value(a)[gi * m * k..(gi + 1) * m * k],
                false,
                &self.value(b)[gi * k * n..(gi + 1) * k * n],
                trans_b,
                0.0,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        self.count(2 * (g * m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            vec![g, m, n],
            rg,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
        ))
    }

    /// 2D convolution over (B,Cin,H,W) with weight (Cout,Cin,kh,kw), zero
    /// padding, square stride.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: sx,
                reason: format!("input smaller than {kh}x{kw} kernel"),
            });
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(bv).to_vec(),
                });
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let mut cols = vec![0.0; b * ho * wo * ckk];
        for bi in 0..b {
            linalg::im2col(
                &self.value(x)[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut cols[bi * ho * wo * ckk..(bi + 1) * ho * wo * ckk],
            );
        }
        let mut out = vec![0.0; b * cout * ho * wo];
        for bi in 0..b {
            // w_flat (cout, ckk) @ cols_bᵀ (ckk, ho*wo) -> (cout, ho*wo)
            linalg::gemm(
                cout,
                ckk,
                ho * wo,
                1.0,
                self.value(w),
                false,
                &cols[bi * ho * wo * ckk..(bi + 1) * ho * wo * ckk],
                true,
                0.0,
                &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
            );
        }
        if let Some(bv) = bias {
            let bias_vals = self.value(bv).to_vec();
            for bi in 0..b {
                for (c, bval) in bias_vals.iter().enumerate() {
                    let off = (bi * cout + c) * ho * wo;
                    for v in &mut out[off..off + ho * wo] {
                        *v += bval;
                    }
                }
            }
        }
        self.count(2 * (b * cout * ho * wo * ckk) as u64);
        let rg = self.rg(x) || self.rg(w) || bias.map(|bv| self.rg(bv)).unwrap_or(false);
        Ok(self.push(
            out,
            vec![b, cout, ho, wo],
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|v| v.0),
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.count(out.len() as u64);
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(out, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Add with the rhs tiled across leading axes: lhs shape must end with
    /// the rhs shape (ignoring leading 1s of the rhs).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let trimmed: Vec<usize> = sb.iter().copied().skip_while(|&d| d == 1).collect();
        let ok = trimmed.len() <= sa.len() && sa[sa.len() - trimmed.len()..] == trimmed[..];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa,
                rhs: sb,
            });
        }
        let bn = self.value(b).len().max(1);
        let mut out = self.value(a).to_vec();
        let bvals = self.value(b);
        for (i, v) in out.iter_mut().enumerate() {
            *v += bvals[i % bn];
        }
        self.count(out.len() as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, sa, rg, Op::AddBroadcast { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.count(out.len() as u64);
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(out, shape, rg, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        self.count(out.len() as u64);
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(out, shape, rg, Op::AddScalar { a: a.0 })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut at = 0;
            for p in parts {
                let pa = self.shape(*p)[axis];
                let src = &self.value(*p)[o * pa * inner..(o + 1) * pa * inner];
                out[(o * axis_total + at) * inner..(o * axis_total + at + pa) * inner]
                    .copy_from_slice(src);
                at += pa;
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            out,
            shape,
            rg,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src =
                &self.value(a)[(o * sa[axis] + start) * inner..(o * sa[axis] + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
        ))
    }

    /// Split along an axis into parts of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || total != sa[axis] {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape: sa,
                reason: format!("sizes {sizes:?} on axis {axis}"),
            });
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &len in sizes {
            out.push(self.slice(a, axis, at, len)?);
            at += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} != {}", numel, self.value(a).len()),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, shape.to_vec(), rg, Op::Reshape { a: a.0 }))
    }

    /// Materialized axis permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: sa,
                reason: format!("bad axes {axes:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let out = permute_copy(self.value(a), &sa, axes);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Transpose of a 2D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: "expected 2D".into(),
            });
        }
        self.permute(a, &[1, 0])
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let cols = *sa.last().ok_or(TensorError::InvalidShape {
            op: "softmax",
            shape: sa.clone(),
            reason: "rank 0".into(),
        })?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.count(5 * out.len() as u64);
        let rg = self.rg(a);
        Ok(self.push(out, sa, rg, Op::Softmax { a: a.0 }))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap_or(&0);
        if cols == 0 || self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.value(x).len() / cols;
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let xv = self.value(x);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xhat[r * cols + c] * g[c] + b[c];
            }
        }
        self.count(8 * out.len() as u64);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            sx,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.count(10 * out.len() as u64);
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(out, shape, rg, Op::Gelu { a: a.0 })
    }

    /// Mean over one axis, or over all elements (scalar) when `axis` is None.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match axis {
            None => {
                let n = self.value(a).len() as f64;
                let s: f64 = self.value(a).iter().sum();
                self.count(self.value(a).len() as u64);
                let rg = self.rg(a);
                Ok(self.push(vec![s / n], vec![1], rg, Op::Mean { a: a.0, axis }))
            }
            Some(ax) => {
                if ax >= sa.len() {
                    return Err(TensorError::InvalidShape {
                        op: "mean",
                        shape: sa,
                        reason: format!("axis {ax} out of range"),
                    });
                }
                let outer: usize = sa[..ax].iter().product();
                let mid = sa[ax];
                let inner: usize = sa[ax + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                let av = self.value(a);
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            out[o * inner + i] += av[(o * mid + m) * inner + i];
                        }
                    }
                }
                for v in &mut out {
                    *v /= mid as f64;
                }
                let mut shape = sa.clone();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                self.count(av.len() as u64);
                let rg = self.rg(a);
                Ok(self.push(out, shape, rg, Op::Mean { a: a.0, axis }))
            }
        }
    }

    /// Tile a (1, rest..) tensor to (reps, rest..).
    pub fn repeat0(&mut self, a: Var, reps: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.first() != Some(&1) {
            return Err(TensorError::InvalidShape {
                op: "repeat0",
                shape: sa,
                reason: "leading axis must be 1".into(),
            });
        }
        let chunk = self.value(a).to_vec();
        let mut out = Vec::with_capacity(chunk.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(&chunk);
        }
        let mut shape = sa;
        shape[0] = reps;
        let rg = self.rg(a);
        Ok(self.push(out, shape, rg, Op::Repeat0 { a: a.0 }))
    }

    /// Non-overlapping patch extraction:
    /// (B,C,H,W) -> (B, (H/p)(W/p), C·p·p), patches in row-major grid order.
    pub fn patches(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % patch != 0 || sx[3] % patch != 0 {
            return Err(TensorError::InvalidShape {
                op: "patches",
                shape: sx,
                reason: format!("spatial dims must divide patch size {patch}"),
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (nh, nw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let mut out = vec![0.0; b * nh * nw * feat];
        let xv = self.value(x);
        for bi in 0..b {
            for ph in 0..nh {
                for pw in 0..nw {
                    let t = (bi * nh * nw + ph * nw + pw) * feat;
                    let mut idx = 0;
                    for ci in 0..c {
                        for dy in 0..patch {
                            let row = ((bi * c + ci) * h + ph * patch + dy) * w + pw * patch;
                            out[t + idx..t + idx + patch].copy_from_slice(&xv[row..row + patch]);
                            idx += patch;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            vec![b, nh * nw, feat],
            rg,
            Op::Patches { x: x.0, patch },
        ))
    }

    /// Affine map over the last axis: x @ w + b, where x is (.., in) flattened
    /// to rows, w is (in, out), b is (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().ok_or(TensorError::InvalidShape {
            op: "linear",
            shape: sx.clone(),
            reason: "rank 0".into(),
        })?;
        if sw.len() != 2 || sw[0] != din {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let rows = self.value(x).len() / din;
        let flat = self.reshape(x, &[rows, din])?;
        let prod = self.matmul(flat, w)?;
        let biased = self.add_broadcast(prod, b)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(biased, &out_shape)
    }

    /// Mean cross-entropy over a batch of logits (B,C) with integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: sl,
                reason: format!("expected (B,C) logits with B={} labels", labels.len()),
            });
        }
        let (b, c) = (sl[0], sl[1]);
        for &l in labels {
            if l >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: l,
                    classes: c,
                });
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &lv[bi * c..(bi + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[bi * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[bi * c + j] /= sum;
            }
            // -log softmax(row)[label], in log-sum-exp form
            loss += sum.ln() + mx - row[labels[bi]];
        }
        loss /= b as f64;
        self.count(8 * (b * c) as u64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Consumes the tape; each
    /// recorded node is visited exactly once, in reverse insertion order
    /// (a valid reverse-topological order by construction). Leaves that
    /// require gradients but are unreachable from the loss get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // keep gradients for leaves, free interior buffers
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
        match &mut grads[idx] {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => grads[idx] = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |this: &Self, idx: usize| this.nodes[idx].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if needs(self, *a) {
                    let mut da = vec![0.0; m * k];
                    linalg::gemm(m, n, k, 1.0, g, false, &self.nodes[*b].data, true, 0.0, &mut da);
                    Self::accumulate(grads, *a, &da);
                }
                if needs(self, *b) {
                    let mut db = vec![0.0; k * n];
                    linalg::gemm(k, m, n, 1.0, &self.nodes[*a].data, true, g, false, 0.0, &mut db);
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (gn, m, k) = (
                    self.nodes[*a].shape[0],
                    self.nodes[*a].shape[1],
                    self.nodes[*a].shape[2],
                );
                let n = self.nodes[i].shape[2];
                let av = &self.nodes[*a].data;
                let bv = &self.nodes[*b].data;
                if needs(self, *a) {
                    let mut da = vec![0.0; gn * m * k];
                    for gi in 0..gn {
                        // dA = G @ op(B)ᵀ
                        linalg::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[gi * m * n..(gi + 1) * m * n],
                            false,
                            &bv[gi * k * n..(gi + 1) * k * n],
                            !trans_b,
                            0.0,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    Self::accumulate(grads, *a, &da);
                }
                if needs(self, *b) {
                    let mut db = vec![0.0; gn * k * n];
                    for gi in 0..gn {
                        if *trans_b {
                            // B stored (n,k): dB = Gᵀ @ A -> (n, k)
                            linalg::gemm(
                                n,
                                m,
                                k,
                                1.0,
                                &g[gi * m * n..(gi + 1) * m * n],
                                true,
                                &av[gi * m * k..(gi + 1) * m * k],
                                false,
                                0.0,
                                &mut db[gi * k * n..(gi + 1) * k * n],
                            );
                        } else {
                            linalg::gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &av[gi * m * k..(gi + 1) * m * k],
                                true,
                                &g[gi * m * n..(gi + 1) * m * n],
                                false,
                                0.0,
                                &mut db[gi * k * n..(gi + 1) * k * n],
                            );
                        }
                    }
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            } => {
                let sx = &self.nodes[*x].shape;
                let sw = &self.nodes[*w].shape;
                let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd + 2 * pad - kw) / stride + 1;
                let ckk = cin * kh * kw;
                if needs(self, *w) {
                    let mut dw = vec![0.0; cout * ckk];
                    for bi in 0..b {
                        linalg::gemm(
                            cout,
                            ho * wo,
                            ckk,
                            1.0,
                            &g[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
                            false,
                            &cols[bi * ho * wo * ckk..(bi + 1) * ho * wo * ckk],
                            false,
                            1.0,
                            &mut dw,
                        );
                    }
                    Self::accumulate(grads, *w, &dw);
                }
                if needs(self, *x) {
                    let mut dx = vec![0.0; b * cin * h * wd];
                    let mut dcols = vec![0.0; ho * wo * ckk];
                    for bi in 0..b {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        linalg::gemm(
                            ho * wo,
                            cout,
                            ckk,
                            1.0,
                            &g[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
                            true,
                            &self.nodes[*w].data,
                            false,
                            0.0,
                            &mut dcols,
                        );
                        linalg::col2im(
                            &dcols,
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        );
                    }
                    Self::accumulate(grads, *x, &dx);
                }
                if let Some(bv) = bias {
                    if needs(self, *bv) {
                        let mut db = vec![0.0; cout];
                        for bi in 0..b {
                            for (c, slot) in db.iter_mut().enumerate() {
                                let off = (bi * cout + c) * ho * wo;
                                *slot += g[off..off + ho * wo].iter().sum::<f64>();
                            }
                        }
                        Self::accumulate(grads, *bv, &db);
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(self, *a) {
                    Self::accumulate(grads, *a, g);
                }
                if needs(self, *b) {
                    Self::accumulate(grads, *b, g);
                }
            }
            Op::AddBroadcast { a, b } => {
                if needs(self, *a) {
                    Self::accumulate(grads, *a, g);
                }
                if needs(self, *b) {
                    let bn = self.nodes[*b].data.len();
                    let mut db = vec![0.0; bn];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bn] += gv;
                    }
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                if needs(self, *a) {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::AddScalar { a } => {
                if needs(self, *a) {
                    Self::accumulate(grads, *a, g);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &self.nodes[i].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut at = 0;
                for p in parts {
                    let pa = self.nodes[*p].shape[*axis];
                    if needs(self, *p) {
                        let mut dp = vec![0.0; outer * pa * inner];
                        for o in 0..outer {
                            let src = &g[(o * axis_total + at) * inner
                                ..(o * axis_total + at + pa) * inner];
                            dp[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(src);
                        }
                        Self::accumulate(grads, *p, &dp);
                    }
                    at += pa;
                }
            }
            Op::Slice { a, axis, start } => {
                if needs(self, *a) {
                    let sa = &self.nodes[*a].shape;
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let len = self.nodes[i].shape[*axis];
                    let mut da = vec![0.0; self.nodes[*a].data.len()];
                    for o in 0..outer {
                        let dst_off = (o * sa[*axis] + start) * inner;
                        da[dst_off..dst_off + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Reshape { a } => {
                if needs(self, *a) {
                    Self::accumulate(grads, *a, g);
                }
            }
            Op::Permute { a, axes } => {
                if needs(self, *a) {
                    // adjoint permutation
                    let mut inv = vec![0usize; axes.len()];
                    for (pos, &ax) in axes.iter().enumerate() {
                        inv[ax] = pos;
                    }
                    let da = permute_copy(g, &self.nodes[i].shape, &inv);
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Softmax { a } => {
                if needs(self, *a) {
                    let cols = *self.nodes[i].shape.last().unwrap();
                    let y = &self.nodes[i].data;
                    let mut da = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..cols {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = *self.nodes[i].shape.last().unwrap();
                let rows = xhat.len() / cols;
                let gam = &self.nodes[*gamma].data;
                if needs(self, *gamma) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    Self::accumulate(grads, *gamma, &dg);
                }
                if needs(self, *beta) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    Self::accumulate(grads, *beta, &db);
                }
                if needs(self, *x) {
                    let mut dx = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gam[c];
                            sum_dxhat += dxhat[c];
                            sum_dxhat_xhat += dxhat[c] * xh[c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] = inv_std[r]
                                * (dxhat[c] - sum_dxhat / nf - xh[c] * sum_dxhat_xhat / nf);
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Gelu { a } => {
                if needs(self, *a) {
                    let da: Vec<f64> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| gv * gelu_bwd(x))
                        .collect();
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Mean { a, axis } => {
                if needs(self, *a) {
                    let sa = &self.nodes[*a].shape;
                    match axis {
                        None => {
                            let n = self.nodes[*a].data.len();
                            let da = vec![g[0] / n as f64; n];
                            Self::accumulate(grads, *a, &da);
                        }
                        Some(ax) => {
                            let outer: usize = sa[..*ax].iter().product();
                            let mid = sa[*ax];
                            let inner: usize = sa[*ax + 1..].iter().product();
                            let mut da = vec![0.0; self.nodes[*a].data.len()];
                            for o in 0..outer {
                                for m in 0..mid {
                                    for c in 0..inner {
                                        da[(o * mid + m) * inner + c] =
                                            g[o * inner + c] / mid as f64;
                                    }
                                }
                            }
                            Self::accumulate(grads, *a, &da);
                        }
                    }
                }
            }
            Op::Repeat0 { a } => {
                if needs(self, *a) {
                    let chunk = self.nodes[*a].data.len();
                    let mut da = vec![0.0; chunk];
                    for (i, gv) in g.iter().enumerate() {
                        da[i % chunk] += gv;
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Patches { x, patch } => {
                if needs(self, *x) {
                    let sx = &self.nodes[*x].shape;
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (nh, nw) = (h / patch, w / patch);
                    let feat = c * patch * patch;
                    let mut dx = vec![0.0; b * c * h * w];
                    for bi in 0..b {
                        for ph in 0..nh {
                            for pw in 0..nw {
                                let t = (bi * nh * nw + ph * nw + pw) * feat;
                                let mut idx = 0;
                                for ci in 0..c {
                                    for dy in 0..*patch {
                                        let row = ((bi * c + ci) * h + ph * patch + dy) * w
                                            + pw * patch;
                                        dx[row..row + patch]
                                            .copy_from_slice(&g[t + idx..t + idx + patch]);
                                        idx += patch;
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(self, *logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let mut dl = probs.clone();
                    for (bi, &lab) in labels.iter().enumerate() {
                        dl[bi * c + lab] -= 1.0;
                    }
                    let scale = g[0] / b as f64;
                    for v in &mut dl {
                        *v *= scale;
                    }
                    Self::accumulate(grads, *logits, &dl);
                }
            }
        }
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (d, &c) in coords.iter().enumerate() {
            src += c * in_strides[axes[d]];
        }
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

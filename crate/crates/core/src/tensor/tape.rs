//! Wengert tape: forward ops are recorded in order and replayed in reverse.
//!
//! Every op method validates shapes, computes the forward value into a fresh
//! arena node, and records what backward needs (argmax indices, dropout
//! masks, normalization statistics). `backward` seeds the scalar loss with
//! 1.0 and walks the op list in reverse, accumulating vector-Jacobian
//! products into each node that can reach a gradient-carrying leaf.
//!
//! Shape conventions: ops that work on feature vectors accept rank 1 (a
//! single vector) or rank 2 (a batch of row vectors); spatial ops accept
//! rank 3 `[C,H,W]` (one sample) or rank 4 `[N,C,H,W]`. Batch normalization
//! is the one op that requires rank 4.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op {
    Linear { x: Var, w: Var, b: Option<Var>, out: Var },
    Conv2d { x: Var, k: Var, b: Var, out: Var },
    MaxPool2x2 { x: Var, out: Var, argmax: Vec<u32> },
    BatchNorm2dTrain { x: Var, gamma: Var, beta: Var, out: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm2dEval { x: Var, gamma: Var, beta: Var, out: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, out: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: Var, out: Var },
    SoftmaxRows { x: Var, out: Var },
    Dropout { x: Var, out: Var, mask: Vec<f64> },
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    AffineConst { x: Var, mul: f64, add: f64, out: Var },
    MulConst { x: Var, c: Vec<f64>, out: Var },
    RowDot { a: Var, b: Var, out: Var },
    RowScale { s: Var, v: Var, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    GlobalAvgPool { x: Var, out: Var },
    GatherPerRow { x: Var, idx: Vec<usize>, out: Var },
    PowConst { x: Var, e: f64, out: Var },
    LnClamped { x: Var, floor: f64, out: Var },
    SumAll { x: Var, out: Var },
    Reshape { x: Var, out: Var },
}

/// Batch-norm running statistics; owned by the model, updated by train-mode
/// forward passes, consumed by eval-mode passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

/// Recording tape. One tape per forward/backward cycle; `reset` clears it
/// for reuse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Clear all recorded state so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.ops.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    /// Register a tensor as a leaf node (copies its data).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// Register raw data as a non-differentiated constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "constant shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(self.push_node(data, shape, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient accumulated into `v` by the last `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value entered the tape"
        );
        self.nodes.push(Node { data, shape, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn out_node(&mut self, data: Vec<f64>, shape: Vec<usize>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(data, shape, needs)
    }

    // ── shape helpers ───────────────────────────────────────────────

    /// Interpret a rank-1 or rank-2 shape as (rows, cols).
    fn rows_cols(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [d] => Ok((1, *d)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!(
                "{what} expects rank 1 or 2, got shape {other:?}"
            ))),
        }
    }

    /// Interpret a rank-3 or rank-4 shape as (n, c, h, w).
    fn nchw(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [c, h, w] => Ok((1, *c, *h, *w)),
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::Dimension(format!(
                "{what} expects rank 3 or 4, got shape {other:?}"
            ))),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// `out = W x + b` with `W: [m,n]`; `x` may be `[n]` or a batch `[B,n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, n) = self.rows_cols(x, "linear input")?;
        let wshape = self.nodes[w.0].shape.clone();
        let [m, wn] = wshape.as_slice() else {
            return Err(Error::Dimension(format!(
                "linear weight expects rank 2, got {wshape:?}"
            )));
        };
        let (m, wn) = (*m, *wn);
        if wn != n {
            return Err(Error::Dimension(format!(
                "linear: weight shape {wshape:?} does not match input shape {:?}",
                self.nodes[x.0].shape
            )));
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [m] {
                return Err(Error::Dimension(format!(
                    "linear: bias shape {:?} does not match weight shape {wshape:?}",
                    self.nodes[b.0].shape
                )));
            }
        }
        let mut out = vec![0.0; rows * m];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = b.map(|b| self.nodes[b.0].data.as_slice());
            for bi in 0..rows {
                let xrow = &xd[bi * n..(bi + 1) * n];
                let orow = &mut out[bi * m..(bi + 1) * m];
                for i in 0..m {
                    let wrow = &wd[i * n..(i + 1) * n];
                    let mut acc = match bd {
                        Some(bd) => bd[i],
                        None => 0.0,
                    };
                    for (wv, xv) in wrow.iter().zip(xrow) {
                        acc += wv * xv;
                    }
                    orow[i] = acc;
                }
            }
        }
        let shape = if self.nodes[x.0].shape.len() == 1 { vec![m] } else { vec![rows, m] };
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let out = self.out_node(out, shape, &inputs);
        self.ops.push(Op::Linear { x, w, b, out });
        Ok(out)
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1; spatial size is
    /// preserved. `x: [Cin,H,W]` or `[N,Cin,H,W]`, `k: [Cout,Cin,3,3]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (n, cin, h, w) = self.nchw(x, "conv2d input")?;
        let kshape = self.nodes[k.0].shape.clone();
        let [cout, kcin, kh, kw] = kshape.as_slice() else {
            return Err(Error::Dimension(format!(
                "conv2d kernels expect rank 4, got {kshape:?}"
            )));
        };
        let (cout, kcin, kh, kw) = (*cout, *kcin, *kh, *kw);
        if kh != 3 || kw != 3 {
            return Err(Error::Dimension(format!(
                "conv2d supports 3x3 kernels only, got {kshape:?}"
            )));
        }
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: kernel shape {kshape:?} does not match input shape {:?}",
                self.nodes[x.0].shape
            )));
        }
        if self.nodes[b.0].shape != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                self.nodes[b.0].shape
            )));
        }
        let mut out = vec![0.0; n * cout * h * w];
        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[k.0].data;
            let bd = &self.nodes[b.0].data;
            for s in 0..n {
                let xs = &xd[s * cin * h * w..(s + 1) * cin * h * w];
                let os = &mut out[s * cout * h * w..(s + 1) * cout * h * w];
                conv2d_plane(xs, kd, bd, os, cin, cout, h, w);
            }
        }
        let shape = if self.nodes[x.0].shape.len() == 3 {
            vec![cout, h, w]
        } else {
            vec![n, cout, h, w]
        };
        let out = self.out_node(out, shape, &[x, k, b]);
        self.ops.push(Op::Conv2d { x, k, b, out });
        Ok(out)
    }

    /// 2x2 max pooling with stride 2. Ties go to the first cell of the
    /// window in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "maxpool2x2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2x2 needs even spatial extents, got shape {:?}",
                self.nodes[x.0].shape
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            for p in 0..n * c {
                let plane = &xd[p * h * w..(p + 1) * h * w];
                let obase = p * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (2 * oy + dy) * w + 2 * ox + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[obase + oy * ow + ox] = best;
                        argmax[obase + oy * ow + ox] = (p * h * w + best_idx) as u32;
                    }
                }
            }
        }
        let shape = if self.nodes[x.0].shape.len() == 3 {
            vec![c, oh, ow]
        } else {
            vec![n, c, oh, ow]
        };
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::MaxPool2x2 { x, out, argmax });
        Ok(out)
    }

    /// Train-mode batch normalization over `[N,C,H,W]` with N >= 2. Updates
    /// `state` running statistics with momentum 0.1 (unbiased variance).
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
    ) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let [n, c, h, w] = shape.as_slice() else {
            return Err(Error::Dimension(format!(
                "batchnorm2d train mode expects rank 4, got {shape:?}"
            )));
        };
        let (n, c, h, w) = (*n, *c, *h, *w);
        if n < 2 {
            return Err(Error::Config(format!(
                "batchnorm2d train mode needs batch size >= 2, got {n}"
            )));
        }
        self.check_bn_affine(gamma, beta, c, "batchnorm2d")?;
        if state.running_mean.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm2d: running stats have {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xd = &self.nodes[x.0].data;
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    let plane = &xd[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for &v in plane {
                        sum += v;
                    }
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for s in 0..n {
                    let plane = &xd[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for &v in plane {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for ch in 0..c {
            state.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * state.running_mean[ch] + BN_MOMENTUM * mean[ch];
            let unbiased = var[ch] * m / (m - 1.0);
            state.running_var[ch] =
                (1.0 - BN_MOMENTUM) * state.running_var[ch] + BN_MOMENTUM * unbiased;
        }
        let out = self.bn_forward(x, gamma, beta, n, c, h * w, &mean, &inv_std);
        self.ops.push(Op::BatchNorm2dTrain { x, gamma, beta, out, mean, inv_std });
        Ok(out)
    }

    /// Eval-mode batch normalization using running statistics; accepts rank 3
    /// or rank 4 input (batch size 1 is fine here).
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BnState,
    ) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "batchnorm2d input")?;
        self.check_bn_affine(gamma, beta, c, "batchnorm2d")?;
        if state.running_mean.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm2d: running stats have {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let mean = state.running_mean.clone();
        let inv_std: Vec<f64> =
            state.running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = self.bn_forward(x, gamma, beta, n, c, h * w, &mean, &inv_std);
        self.ops.push(Op::BatchNorm2dEval { x, gamma, beta, out, mean, inv_std });
        Ok(out)
    }

    fn check_bn_affine(&self, gamma: Var, beta: Var, c: usize, what: &str) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [c] {
                return Err(Error::Dimension(format!(
                    "{what}: {name} shape {:?}, expected [{c}]",
                    self.nodes[v.0].shape
                )));
            }
        }
        Ok(())
    }

    fn bn_forward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        plane: usize,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Var {
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (mu, istd, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in 0..plane {
                    out[base + i] = (xd[base + i] - mu) * istd * g + b;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.out_node(out, shape, &[x, gamma, beta])
    }

    /// Layer normalization over the last axis of a `[d]` or `[B,d]` input.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.rows_cols(x, "layernorm input")?;
        if d < 2 {
            return Err(Error::Dimension(format!(
                "layernorm needs feature size >= 2, got shape {:?}",
                self.nodes[x.0].shape
            )));
        }
        self.check_bn_affine(gamma, beta, d, "layernorm")?;
        let mut out = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + LN_EPS).sqrt();
                mean[r] = mu;
                inv_std[r] = istd;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mu) * istd * gd[j] + bd[j];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x, gamma, beta]);
        self.ops.push(Op::LayerNorm { x, gamma, beta, out, mean, inv_std });
        Ok(out)
    }

    /// Elementwise max(0, x) on any shape.
    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::Relu { x, out });
        out
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.rows_cols(x, "softmax input")?;
        if k == 0 {
            return Err(Error::Dimension("softmax input is empty".into()));
        }
        let mut out = vec![0.0; rows * k];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..rows {
                let row = &xd[r * k..(r + 1) * k];
                let orow = &mut out[r * k..(r + 1) * k];
                softmax_into(row, orow);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::SoftmaxRows { x, out });
        Ok(out)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); eval mode is the
    /// identity (the input var is returned unchanged).
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0,1), got {p}")));
        }
        if !train {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::Dropout { x, out, mask });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.out_node(out, shape, &[a, b]);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.out_node(out, shape, &[a, b]);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine_const(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| mul * v + add).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::AffineConst { x, mul, add, out });
        out
    }

    /// Elementwise multiply by a constant vector of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.nodes[x.0].data.len() {
            return Err(Error::Dimension(format!(
                "mul_const: constant length {} vs value shape {:?}",
                c.len(),
                self.nodes[x.0].shape
            )));
        }
        let out: Vec<f64> = self.nodes[x.0].data.iter().zip(&c).map(|(v, k)| v * k).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::MulConst { x, c, out });
        Ok(out)
    }

    /// Per-row dot product of two `[B,d]` (or `[d]`) values; output `[B]`
    /// (or `[1]`).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (rows, d) = self.rows_cols(a, "row_dot input")?;
        let mut out = vec![0.0; rows];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for r in 0..rows {
                out[r] = ad[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bd[r * d..(r + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        let out = self.out_node(out, vec![rows], &[a, b]);
        self.ops.push(Op::RowDot { a, b, out });
        Ok(out)
    }

    /// Scale each row of `v: [B,d]` by the matching entry of `s: [B]`.
    pub fn row_scale(&mut self, s: Var, v: Var) -> Result<Var> {
        let (rows, d) = self.rows_cols(v, "row_scale value")?;
        if self.nodes[s.0].data.len() != rows {
            return Err(Error::Dimension(format!(
                "row_scale: scale shape {:?} vs value shape {:?}",
                self.nodes[s.0].shape, self.nodes[v.0].shape
            )));
        }
        let mut out = vec![0.0; rows * d];
        {
            let sd = &self.nodes[s.0].data;
            let vd = &self.nodes[v.0].data;
            for r in 0..rows {
                for j in 0..d {
                    out[r * d + j] = sd[r] * vd[r * d + j];
                }
            }
        }
        let shape = self.nodes[v.0].shape.clone();
        let out = self.out_node(out, shape, &[s, v]);
        self.ops.push(Op::RowScale { s, v, out });
        Ok(out)
    }

    /// Concatenate along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero parts".into()));
        }
        let rank = self.nodes[parts[0].0].shape.len();
        let (rows, _) = self.rows_cols(parts[0], "concat part")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, d) = self.rows_cols(p, "concat part")?;
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat: row mismatch {:?} vs {:?}",
                    self.nodes[parts[0].0].shape, self.nodes[p.0].shape
                )));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &d) in parts.iter().zip(&widths) {
            let pd = &self.nodes[p.0].data;
            for r in 0..rows {
                out[r * total + off..r * total + off + d]
                    .copy_from_slice(&pd[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let out = self.out_node(out, shape, parts);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Spatial mean: `[C,H,W]` -> `[C]`, or `[N,C,H,W]` -> `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "global_avg_pool input")?;
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        {
            let xd = &self.nodes[x.0].data;
            for p in 0..n * c {
                out[p] = xd[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64;
            }
        }
        let shape =
            if self.nodes[x.0].shape.len() == 3 { vec![c] } else { vec![n, c] };
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::GlobalAvgPool { x, out });
        Ok(out)
    }

    /// Pick one element per row: `x: [B,K]`, `idx` of length B, output `[B]`.
    pub fn gather_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, k) = self.rows_cols(x, "gather input")?;
        if idx.len() != rows {
            return Err(Error::Dimension(format!(
                "gather: {} indices for {rows} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::Data(format!("gather index {bad} out of range for {k} classes")));
        }
        let xd = &self.nodes[x.0].data;
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xd[r * k + i]).collect();
        let out = self.out_node(out, vec![rows], &[x]);
        self.ops.push(Op::GatherPerRow { x, idx: idx.to_vec(), out });
        Ok(out)
    }

    /// Elementwise `x^e` for constant exponent `e >= 0`.
    pub fn pow_const(&mut self, x: Var, e: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.powf(e)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::PowConst { x, e, out });
        out
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(floor).ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(out, shape, &[x]);
        self.ops.push(Op::LnClamped { x, floor, out });
        out
    }

    /// Sum of all elements; output shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let out = self.out_node(vec![s], vec![1], &[x]);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.nodes[x.0].shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let out = self.out_node(data, shape, &[x]);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients of every reachable gradient-carrying node from a
    /// scalar loss. The tape must be `reset` before recording again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; reset before reuse".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            backward_op(&self.ops[i], &self.nodes, &mut self.grads);
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row into `out`.
fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Direct 3x3 conv for one sample. Accumulation order per output cell is
/// (cin, ky, kx), identical to the naive quadruple loop, so results match a
/// reference implementation bit for bit. The output plane is swept once per
/// kernel tap; it is small enough to stay cache-resident.
fn conv2d_plane(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    out: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    for co in 0..cout {
        let oplane = &mut out[co * h * w..(co + 1) * h * w];
        oplane.fill(bias[co]);
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (w + 1 - kx).min(w);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let orow = &mut oplane[y * w + x0..y * w + x1];
                        let xrow = &xplane[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += kv * xv;
                        }
                    }
                }
            }
        }
    }
}

fn accum<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()])
}

fn backward_op(op: &Op, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    macro_rules! upstream {
        ($out:expr) => {
            match &grads[$out.0] {
                Some(g) => g.clone(),
                None => return,
            }
        };
    }
    let needs = |v: Var| nodes[v.0].needs_grad;

    match op {
        Op::Linear { x, w, b, out } => {
            if !needs(*out) {
                return;
            }
            let up = upstream!(out);
            let (rows, n) = match nodes[x.0].shape.as_slice() {
                [d] => (1, *d),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            let m = nodes[w.0].shape[0];
            if needs(*x) {
                let wd = &nodes[w.0].data;
                let gx = accum(grads, nodes, *x);
                for bi in 0..rows {
                    let urow = &up[bi * m..(bi + 1) * m];
                    let grow = &mut gx[bi * n..(bi + 1) * n];
                    for i in 0..m {
                        let u = urow[i];
                        if u == 0.0 {
                            continue;
                        }
                        let wrow = &wd[i * n..(i + 1) * n];
                        for (g, &wv) in grow.iter_mut().zip(wrow) {
                            *g += u * wv;
                        }
                    }
                }
            }
            if needs(*w) {
                let xd = &nodes[x.0].data;
                let gw = accum(grads, nodes, *w);
                for bi in 0..rows {
                    let urow = &up[bi * m..(bi + 1) * m];
                    let xrow = &xd[bi * n..(bi + 1) * n];
                    for i in 0..m {
                        let u = urow[i];
                        if u == 0.0 {
                            continue;
                        }
                        let grow = &mut gw[i * n..(i + 1) * n];
                        for (g, &xv) in grow.iter_mut().zip(xrow) {
                            *g += u * xv;
                        }
                    }
                }
            }
            if let Some(b) = b {
                if needs(*b) {
                    let gb = accum(grads, nodes, *b);
                    for bi in 0..rows {
                        for i in 0..m {
                            gb[i] += up[bi * m + i];
                        }
                    }
                }
            }
        }

        Op::Conv2d { x, k, b, out } => {
            if !needs(*out) {
                return;
            }
            let up = upstream!(out);
            let (n, cin, h, w) = match nodes[x.0].shape.as_slice() {
                [c, h, w] => (1, *c, *h, *w),
                [n, c, h, w] => (*n, *c, *h, *w),
                _ => unreachable!(),
            };
            let cout = nodes[k.0].shape[0];
            let plane = h * w;
            if needs(*x) {
                // dx is a same-padded conv of the upstream gradient with the
                // flipped kernel, channels transposed; reuse the forward kernel.
                let kd = &nodes[k.0].data;
                let mut kt = vec![0.0; cin * cout * 9];
                for co in 0..cout {
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                kt[((ci * cout + co) * 3 + ky) * 3 + kx] =
                                    kd[((co * cin + ci) * 3 + (2 - ky)) * 3 + (2 - kx)];
                            }
                        }
                    }
                }
                let zero_bias = vec![0.0; cin];
                let mut tmp = vec![0.0; cin * plane];
                let gx = accum(grads, nodes, *x);
                for s in 0..n {
                    let us = &up[s * cout * plane..(s + 1) * cout * plane];
                    conv2d_plane(us, &kt, &zero_bias, &mut tmp, cout, cin, h, w);
                    let gxs = &mut gx[s * cin * plane..(s + 1) * cin * plane];
                    for (g, &t) in gxs.iter_mut().zip(&tmp) {
                        *g += t;
                    }
                }
            }
            if needs(*k) {
                let xd = &nodes[x.0].data;
                let gk = accum(grads, nodes, *k);
                for s in 0..n {
                    let us = &up[s * cout * plane..(s + 1) * cout * plane];
                    let xs = &xd[s * cin * plane..(s + 1) * cin * plane];
                    for co in 0..cout {
                        let uplane = &us[co * plane..(co + 1) * plane];
                        for ci in 0..cin {
                            let xplane = &xs[ci * plane..(ci + 1) * plane];
                            // one pass over the planes, nine tap accumulators
                            let mut acc = [0.0f64; 9];
                            for y in 0..h {
                                let urow = &uplane[y * w..(y + 1) * w];
                                for ky in 0..3 {
                                    let iy = y + ky;
                                    if iy < 1 || iy > h {
                                        continue;
                                    }
                                    let xrow = &xplane[(iy - 1) * w..iy * w];
                                    for kx in 0..3 {
                                        let x0 = 1usize.saturating_sub(kx);
                                        let x1 = (w + 1 - kx).min(w);
                                        let mut dot = 0.0;
                                        for (&u, &xv) in urow[x0..x1]
                                            .iter()
                                            .zip(&xrow[x0 + kx - 1..x1 + kx - 1])
                                        {
                                            dot += u * xv;
                                        }
                                        acc[ky * 3 + kx] += dot;
                                    }
                                }
                            }
                            let gkbase = &mut gk[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                            for (g, &a) in gkbase.iter_mut().zip(&acc) {
                                *g += a;
                            }
                        }
                    }
                }
            }
            if needs(*b) {
                let gb = accum(grads, nodes, *b);
                for s in 0..n {
                    for co in 0..cout {
                        let uplane = &up[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                        gb[co] += uplane.iter().sum::<f64>();
                    }
                }
            }
        }

        Op::MaxPool2x2 { x, out, argmax } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let gx = accum(grads, nodes, *x);
            for (i, &src) in argmax.iter().enumerate() {
                gx[src as usize] += up[i];
            }
        }

        Op::BatchNorm2dTrain { x, gamma, beta, out, mean, inv_std } => {
            if !needs(*out) {
                return;
            }
            let up = upstream!(out);
            let shape = &nodes[x.0].shape;
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let m = (n * plane) as f64;
            let xd = &nodes[x.0].data;
            let gd = &nodes[gamma.0].data;
            // per-channel reductions over the whole batch
            let mut sum_up = vec![0.0; c];
            let mut sum_up_xhat = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let (mu, istd) = (mean[ch], inv_std[ch]);
                    for i in 0..plane {
                        let u = up[base + i];
                        sum_up[ch] += u;
                        sum_up_xhat[ch] += u * (xd[base + i] - mu) * istd;
                    }
                }
            }
            if needs(*gamma) {
                let gg = accum(grads, nodes, *gamma);
                for ch in 0..c {
                    gg[ch] += sum_up_xhat[ch];
                }
            }
            if needs(*beta) {
                let gb = accum(grads, nodes, *beta);
                for ch in 0..c {
                    gb[ch] += sum_up[ch];
                }
            }
            if needs(*x) {
                let gx = accum(grads, nodes, *x);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let (mu, istd, g) = (mean[ch], inv_std[ch], gd[ch]);
                        let k1 = sum_up[ch] / m;
                        let k2 = sum_up_xhat[ch] / m;
                        for i in 0..plane {
                            let xhat = (xd[base + i] - mu) * istd;
                            gx[base + i] += g * istd * (up[base + i] - k1 - xhat * k2);
                        }
                    }
                }
            }
        }

        Op::BatchNorm2dEval { x, gamma, beta, out, mean, inv_std } => {
            if !needs(*out) {
                return;
            }
            let up = upstream!(out);
            let (n, c, plane) = match nodes[x.0].shape.as_slice() {
                [c, h, w] => (1, *c, h * w),
                [n, c, h, w] => (*n, *c, h * w),
                _ => unreachable!(),
            };
            let xd = &nodes[x.0].data;
            let gd = &nodes[gamma.0].data;
            if needs(*x) {
                let gx = accum(grads, nodes, *x);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let scale = gd[ch] * inv_std[ch];
                        for i in 0..plane {
                            gx[base + i] += up[base + i] * scale;
                        }
                    }
                }
            }
            if needs(*gamma) {
                let gg = accum(grads, nodes, *gamma);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let (mu, istd) = (mean[ch], inv_std[ch]);
                        for i in 0..plane {
                            gg[ch] += up[base + i] * (xd[base + i] - mu) * istd;
                        }
                    }
                }
            }
            if needs(*beta) {
                let gb = accum(grads, nodes, *beta);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in 0..plane {
                            gb[ch] += up[base + i];
                        }
                    }
                }
            }
        }

        Op::LayerNorm { x, gamma, beta, out, mean, inv_std } => {
            if !needs(*out) {
                return;
            }
            let up = upstream!(out);
            let (rows, d) = match nodes[x.0].shape.as_slice() {
                [d] => (1, *d),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            let xd = &nodes[x.0].data;
            let gd = &nodes[gamma.0].data;
            if needs(*gamma) || needs(*beta) {
                for r in 0..rows {
                    let (mu, istd) = (mean[r], inv_std[r]);
                    for j in 0..d {
                        let u = up[r * d + j];
                        if needs(*gamma) {
                            accum(grads, nodes, *gamma)[j] += u * (xd[r * d + j] - mu) * istd;
                        }
                        if needs(*beta) {
                            accum(grads, nodes, *beta)[j] += u;
                        }
                    }
                }
            }
            if needs(*x) {
                let gx = accum(grads, nodes, *x);
                for r in 0..rows {
                    let (mu, istd) = (mean[r], inv_std[r]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxhat = up[r * d + j] * gd[j];
                        let xhat = (xd[r * d + j] - mu) * istd;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let k1 = sum_dxhat / d as f64;
                    let k2 = sum_dxhat_xhat / d as f64;
                    for j in 0..d {
                        let dxhat = up[r * d + j] * gd[j];
                        let xhat = (xd[r * d + j] - mu) * istd;
                        gx[r * d + j] += istd * (dxhat - k1 - xhat * k2);
                    }
                }
            }
        }

        Op::Relu { x, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let xd = &nodes[x.0].data;
            let gx = accum(grads, nodes, *x);
            for i in 0..xd.len() {
                if xd[i] > 0.0 {
                    gx[i] += up[i];
                }
            }
        }

        Op::SoftmaxRows { x, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let (rows, k) = match nodes[x.0].shape.as_slice() {
                [d] => (1, *d),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            let p = &nodes[out.0].data;
            let gx = accum(grads, nodes, *x);
            for r in 0..rows {
                let prow = &p[r * k..(r + 1) * k];
                let urow = &up[r * k..(r + 1) * k];
                let dot: f64 = prow.iter().zip(urow).map(|(p, u)| p * u).sum();
                for j in 0..k {
                    gx[r * k + j] += prow[j] * (urow[j] - dot);
                }
            }
        }

        Op::Dropout { x, out, mask } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let gx = accum(grads, nodes, *x);
            for i in 0..mask.len() {
                gx[i] += up[i] * mask[i];
            }
        }

        Op::Add { a, b, out } => {
            let up = upstream!(out);
            for v in [a, b] {
                if needs(*v) {
                    let g = accum(grads, nodes, *v);
                    for i in 0..up.len() {
                        g[i] += up[i];
                    }
                }
            }
        }

        Op::Mul { a, b, out } => {
            let up = upstream!(out);
            if needs(*a) {
                let bd = &nodes[b.0].data;
                let ga = accum(grads, nodes, *a);
                for i in 0..up.len() {
                    ga[i] += up[i] * bd[i];
                }
            }
            if needs(*b) {
                let ad = &nodes[a.0].data;
                let gb = accum(grads, nodes, *b);
                for i in 0..up.len() {
                    gb[i] += up[i] * ad[i];
                }
            }
        }

        Op::AffineConst { x, mul, out, .. } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let gx = accum(grads, nodes, *x);
            for i in 0..up.len() {
                gx[i] += up[i] * mul;
            }
        }

        Op::MulConst { x, c, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let gx = accum(grads, nodes, *x);
            for i in 0..up.len() {
                gx[i] += up[i] * c[i];
            }
        }

        Op::RowDot { a, b, out } => {
            let up = upstream!(out);
            let (rows, d) = match nodes[a.0].shape.as_slice() {
                [d] => (1, *d),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            if needs(*a) {
                let bd = &nodes[b.0].data;
                let ga = accum(grads, nodes, *a);
                for r in 0..rows {
                    for j in 0..d {
                        ga[r * d + j] += up[r] * bd[r * d + j];
                    }
                }
            }
            if needs(*b) {
                let ad = &nodes[a.0].data;
                let gb = accum(grads, nodes, *b);
                for r in 0..rows {
                    for j in 0..d {
                        gb[r * d + j] += up[r] * ad[r * d + j];
                    }
                }
            }
        }

        Op::RowScale { s, v, out } => {
            let up = upstream!(out);
            let (rows, d) = match nodes[v.0].shape.as_slice() {
                [d] => (1, *d),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            if needs(*s) {
                let vd = &nodes[v.0].data;
                let gs = accum(grads, nodes, *s);
                for r in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += up[r * d + j] * vd[r * d + j];
                    }
                    gs[r] += acc;
                }
            }
            if needs(*v) {
                let sd = &nodes[s.0].data;
                let gv = accum(grads, nodes, *v);
                for r in 0..rows {
                    for j in 0..d {
                        gv[r * d + j] += up[r * d + j] * sd[r];
                    }
                }
            }
        }

        Op::ConcatCols { parts, out } => {
            let up = upstream!(out);
            let rows = match nodes[parts[0].0].shape.as_slice() {
                [_] => 1,
                [r, _] => *r,
                _ => unreachable!(),
            };
            let total = nodes[out.0].data.len() / rows;
            let mut off = 0;
            for &p in parts {
                let d = nodes[p.0].data.len() / rows;
                if needs(p) {
                    let gp = accum(grads, nodes, p);
                    for r in 0..rows {
                        for j in 0..d {
                            gp[r * d + j] += up[r * total + off + j];
                        }
                    }
                }
                off += d;
            }
        }

        Op::GlobalAvgPool { x, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let plane = {
                let s = &nodes[x.0].shape;
                s[s.len() - 1] * s[s.len() - 2]
            };
            let gx = accum(grads, nodes, *x);
            let scale = 1.0 / plane as f64;
            for (p, &u) in up.iter().enumerate() {
                let g = u * scale;
                for i in 0..plane {
                    gx[p * plane + i] += g;
                }
            }
        }

        Op::GatherPerRow { x, idx, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let k = {
                let s = &nodes[x.0].shape;
                s[s.len() - 1]
            };
            let gx = accum(grads, nodes, *x);
            for (r, &i) in idx.iter().enumerate() {
                gx[r * k + i] += up[r];
            }
        }

        Op::PowConst { x, e, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let xd = &nodes[x.0].data;
            let gx = accum(grads, nodes, *x);
            if *e != 0.0 {
                for i in 0..up.len() {
                    gx[i] += up[i] * e * xd[i].powf(e - 1.0);
                }
            }
        }

        Op::LnClamped { x, floor, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let xd = &nodes[x.0].data;
            let gx = accum(grads, nodes, *x);
            for i in 0..up.len() {
                if xd[i] > *floor {
                    gx[i] += up[i] / xd[i];
                }
            }
        }

        Op::SumAll { x, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let gx = accum(grads, nodes, *x);
            for g in gx.iter_mut() {
                *g += up[0];
            }
        }

        Op::Reshape { x, out } => {
            if !needs(*x) {
                return;
            }
            let up = upstream!(out);
            let gx = accum(grads, nodes, *x);
            for i in 0..up.len() {
                gx[i] += up[i];
            }
        }
    }
}

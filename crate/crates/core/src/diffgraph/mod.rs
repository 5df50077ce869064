//! Reverse-mode automatic differentiation over the fixed operation set used
//! by the mel frontend and the reference detection network.
//!
//! The engine is deliberately not a general tensor library: the set of
//! primitives below is exactly what the frontend and model need, each with a
//! hand-written backward rule. A [`Tape`] records one forward pass;
//! [`Tape::backward`] then fills gradients for every node that can reach a
//! gradient-requiring leaf.

mod check;
mod optim;
mod stft;

pub use check::{grad_check, grad_check_report, GradCheckReport};
pub use optim::{adam_step, sign_step, AdamState};
pub use stft::{power_direct as stft_power_direct, StftSpec};

use thiserror::Error;

/// Clamp applied to every probability that enters a logarithm; the losses
/// are undefined at exactly 0 or 1.
pub const PROB_EPS: f64 = 1e-7;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensor values length {values} does not match shape product {expected}")]
    BadTensor { values: usize, expected: usize },
    #[error("loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; re-run the forward pass first")]
    BackwardAlreadyRun,
    #[error("bce target at index {index} is outside [0, 1]: {value}")]
    TargetOutOfRange { index: usize, value: f64 },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("tape-building procedure is non-deterministic: two forward passes disagree ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional gradient of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, GraphError> {
        let expected = shape_len(&shape);
        if expected != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(GraphError::BadTensor {
                values: values.len(),
                expected,
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_len(&shape);
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, GraphError> {
        Self::new(vec![rows, cols], values)
    }

    /// 1×n row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            shape: vec![1, n],
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), GraphError> {
        if grad.len() != self.values.len() {
            return Err(GraphError::BadTensor {
                values: grad.len(),
                expected: self.values.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// (rows, cols) + (1, cols), broadcast over rows.
    AddRows {
        m: NodeId,
        row: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        k: f64,
    },
    AddScalar {
        a: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// 3×3 kernels, stride 1, zero padding 1; x is (in_ch, t, f).
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        in_ch: usize,
        out_ch: usize,
        t: usize,
        f: usize,
    },
    /// Width-2 max pooling along the innermost (frequency) axis.
    MaxPoolFreq {
        x: NodeId,
        ch: usize,
        t: usize,
        f_out: usize,
        argmax: Vec<u8>,
    },
    Sigmoid {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    /// Stack 1×c rows into a (t, c) matrix.
    ConcatTime {
        parts: Vec<NodeId>,
        cols: usize,
    },
    SliceRow {
        a: NodeId,
        row: usize,
        cols: usize,
    },
    /// (ch, t, f) -> (t, ch·f); feature order is channel-major.
    FlattenFrames {
        a: NodeId,
        ch: usize,
        t: usize,
        f: usize,
    },
    /// Summed binary cross-entropy with constant targets and optional
    /// constant per-element weights; predictions are clamped to
    /// [PROB_EPS, 1-PROB_EPS] before the logarithms.
    Bce {
        pred: NodeId,
        target: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    /// Elementwise ln(max(x, floor)).
    LogFloor {
        a: NodeId,
        floor: f64,
    },
    /// Same data, new shape.
    Reshape {
        a: NodeId,
    },
    /// Hann-windowed, centered (reflect-padded) power spectrogram.
    /// `spectra` stores interleaved (re, im) per frame and bin for backward.
    StftPower {
        x: NodeId,
        spec: StftSpec,
        spectra: Vec<f64>,
    },
}

/// Records a single forward pass as a topologically ordered node list.
#[derive(Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id]
    }

    /// Gradient of the loss w.r.t. node `id`; `None` before backward or when
    /// no gradient reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        match self.grads.get(id) {
            Some(g) if !g.is_empty() => Some(g.as_slice()),
            _ => None,
        }
    }

    /// Copies a node out of the tape, attaching its gradient when present.
    pub fn extract(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.shapes[id].clone(),
            values: self.values[id].clone(),
            grad: self.grad(id).map(|g| g.to_vec()),
        }
    }

    /// Hash of every piecewise decision taken during the forward pass: relu
    /// signs, pool argmaxes, log floors, probability clamps. Two forward
    /// passes that agree on this signature lie in the same differentiable
    /// region, which is the precondition for a central finite difference to
    /// estimate the analytic gradient.
    pub fn decision_signature(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = FNV_OFFSET;
        let mut feed = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(FNV_PRIME);
        };
        for op in &self.ops {
            match op {
                Op::Relu { a } => {
                    for &v in &self.values[*a] {
                        feed(u8::from(v > 0.0));
                    }
                }
                Op::MaxPoolFreq { argmax, .. } => {
                    for &m in argmax {
                        feed(m);
                    }
                }
                Op::LogFloor { a, floor } => {
                    for &v in &self.values[*a] {
                        feed(u8::from(v > *floor));
                    }
                }
                Op::Bce { pred, .. } => {
                    for &p in &self.values[*pred] {
                        feed(u8::from(p > PROB_EPS) | (u8::from(p < 1.0 - PROB_EPS) << 1));
                    }
                }
                _ => {}
            }
        }
        hash
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape_len(&shape), values.len());
        let id = self.shapes.len();
        self.shapes.push(shape);
        self.values.push(values);
        self.needs_grad.push(needs_grad);
        self.ops.push(op);
        self.backward_done = false;
        id
    }

    /// Inserts a leaf node. Gradients are only computed for nodes that can
    /// reach a leaf with `needs_grad = true`.
    pub fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> NodeId {
        self.push(t.shape.clone(), t.values.clone(), needs_grad, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Result<NodeId, GraphError> {
        let expected = shape_len(&shape);
        if expected != values.len() {
            return Err(GraphError::BadTensor {
                values: values.len(),
                expected,
            });
        }
        Ok(self.push(shape, values, needs_grad, Op::Leaf))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if self.shapes[a] != self.shapes[b] {
            return Err(GraphError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shapes[a], self.shapes[b]),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        let values = self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs_grad[a] || self.needs_grad[b];
        Ok(self.push(self.shapes[a].clone(), values, ng, Op::Add { a, b }))
    }

    pub fn add_rows(&mut self, m: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let (ms, rs) = (&self.shapes[m], &self.shapes[row]);
        if ms.len() != 2 || rs.len() != 2 || rs[0] != 1 || rs[1] != ms[1] {
            return Err(GraphError::ShapeMismatch {
                op: "add_rows",
                detail: format!("{ms:?} + {rs:?}"),
            });
        }
        let cols = ms[1];
        let mut values = self.values[m].clone();
        for chunk in values.chunks_mut(cols) {
            for (v, r) in chunk.iter_mut().zip(&self.values[row]) {
                *v += r;
            }
        }
        let ng = self.needs_grad[m] || self.needs_grad[row];
        Ok(self.push(self.shapes[m].clone(), values, ng, Op::AddRows { m, row }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("multiply", a, b)?;
        let values = self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs_grad[a] || self.needs_grad[b];
        Ok(self.push(self.shapes[a].clone(), values, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let values = self.values[a].iter().map(|x| x * k).collect();
        let ng = self.needs_grad[a];
        self.push(self.shapes[a].clone(), values, ng, Op::Scale { a, k })
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let values = self.values[a].iter().map(|x| x + k).collect();
        let ng = self.needs_grad[a];
        self.push(self.shapes[a].clone(), values, ng, Op::AddScalar { a })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} × {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.values[a];
        let bv = &self.values[b];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o += aik * bj;
                }
            }
        }
        let ng = self.needs_grad[a] || self.needs_grad[b];
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b, m, k, n }))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sx, sw, sb) = (&self.shapes[x], &self.shapes[w], &self.shapes[b]);
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            });
        }
        let (in_ch, t, f) = (sx[0], sx[1], sx[2]);
        let out_ch = sw[0];
        if sw[1] != in_ch || sw[2] != 3 || sw[3] != 3 || sb[0] != out_ch {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {sx:?} incompatible with w {sw:?} / b {sb:?}"),
            });
        }
        let xv = &self.values[x];
        let wv = &self.values[w];
        let bv = &self.values[b];
        let mut out = vec![0.0; out_ch * t * f];
        for oc in 0..out_ch {
            let plane = &mut out[oc * t * f..(oc + 1) * t * f];
            plane.fill(bv[oc]);
        }
        for oc in 0..out_ch {
            for ic in 0..in_ch {
                let xplane = &xv[ic * t * f..(ic + 1) * t * f];
                for kt in 0..3usize {
                    let dt = kt as isize - 1;
                    for kf in 0..3usize {
                        let df = kf as isize - 1;
                        let weight = wv[((oc * in_ch + ic) * 3 + kt) * 3 + kf];
                        if weight == 0.0 {
                            continue;
                        }
                        let t_lo = (-dt).max(0) as usize;
                        let t_hi = (t as isize - dt.max(0)) as usize;
                        let f_lo = (-df).max(0) as usize;
                        let f_hi = (f as isize - df.max(0)) as usize;
                        for ti in t_lo..t_hi {
                            let src_row = ((ti as isize + dt) as usize) * f;
                            let dst_row = ti * f;
                            let src = &xplane[src_row + (f_lo as isize + df) as usize
                                ..src_row + (f_hi as isize + df) as usize];
                            let dst = &mut out
                                [oc * t * f + dst_row + f_lo..oc * t * f + dst_row + f_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += weight * s;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs_grad[x] || self.needs_grad[w] || self.needs_grad[b];
        Ok(self.push(
            vec![out_ch, t, f],
            out,
            ng,
            Op::Conv2d {
                x,
                w,
                b,
                in_ch,
                out_ch,
                t,
                f,
            },
        ))
    }

    pub fn maxpool_freq(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let sx = &self.shapes[x];
        if sx.len() != 3 || sx[2] % 2 != 0 {
            return Err(GraphError::ShapeMismatch {
                op: "maxpool_freq",
                detail: format!("expected (ch, t, even f), got {sx:?}"),
            });
        }
        let (ch, t, f) = (sx[0], sx[1], sx[2]);
        let f_out = f / 2;
        let xv = &self.values[x];
        let mut out = vec![0.0; ch * t * f_out];
        let mut argmax = vec![0u8; ch * t * f_out];
        for c in 0..ch {
            for ti in 0..t {
                let row = &xv[(c * t + ti) * f..(c * t + ti + 1) * f];
                let base = (c * t + ti) * f_out;
                for fo in 0..f_out {
                    let (a, b) = (row[2 * fo], row[2 * fo + 1]);
                    if b > a {
                        out[base + fo] = b;
                        argmax[base + fo] = 1;
                    } else {
                        out[base + fo] = a;
                    }
                }
            }
        }
        let ng = self.needs_grad[x];
        Ok(self.push(
            vec![ch, t, f_out],
            out,
            ng,
            Op::MaxPoolFreq {
                x,
                ch,
                t,
                f_out,
                argmax,
            },
        ))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let values = self.values[a]
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let ng = self.needs_grad[a];
        self.push(self.shapes[a].clone(), values, ng, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let values = self.values[a].iter().map(|x| x.tanh()).collect();
        let ng = self.needs_grad[a];
        self.push(self.shapes[a].clone(), values, ng, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values = self.values[a].iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs_grad[a];
        self.push(self.shapes[a].clone(), values, ng, Op::Relu { a })
    }

    pub fn concat_time(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::InvalidArgument(
                "concat_time needs at least one row".into(),
            ));
        }
        let cols = {
            let s = &self.shapes[parts[0]];
            if s.len() != 2 || s[0] != 1 {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_time",
                    detail: format!("expected 1×c rows, got {s:?}"),
                });
            }
            s[1]
        };
        let mut values = Vec::with_capacity(parts.len() * cols);
        let mut ng = false;
        for &p in parts {
            let s = &self.shapes[p];
            if s.len() != 2 || s[0] != 1 || s[1] != cols {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_time",
                    detail: format!("row shape {s:?} does not match 1×{cols}"),
                });
            }
            values.extend_from_slice(&self.values[p]);
            ng |= self.needs_grad[p];
        }
        Ok(self.push(
            vec![parts.len(), cols],
            values,
            ng,
            Op::ConcatTime {
                parts: parts.to_vec(),
                cols,
            },
        ))
    }

    pub fn slice_row(&mut self, a: NodeId, row: usize) -> Result<NodeId, GraphError> {
        let s = &self.shapes[a];
        if s.len() != 2 || row >= s[0] {
            return Err(GraphError::ShapeMismatch {
                op: "slice_row",
                detail: format!("row {row} of {s:?}"),
            });
        }
        let cols = s[1];
        let values = self.values[a][row * cols..(row + 1) * cols].to_vec();
        let ng = self.needs_grad[a];
        Ok(self.push(vec![1, cols], values, ng, Op::SliceRow { a, row, cols }))
    }

    pub fn flatten_frames(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = &self.shapes[a];
        if s.len() != 3 {
            return Err(GraphError::ShapeMismatch {
                op: "flatten_frames",
                detail: format!("expected (ch, t, f), got {s:?}"),
            });
        }
        let (ch, t, f) = (s[0], s[1], s[2]);
        let av = &self.values[a];
        let mut values = vec![0.0; t * ch * f];
        for c in 0..ch {
            for ti in 0..t {
                let src = &av[(c * t + ti) * f..(c * t + ti + 1) * f];
                let dst = &mut values[ti * ch * f + c * f..ti * ch * f + (c + 1) * f];
                dst.copy_from_slice(src);
            }
        }
        let ng = self.needs_grad[a];
        Ok(self.push(
            vec![t, ch * f],
            values,
            ng,
            Op::FlattenFrames { a, ch, t, f },
        ))
    }

    /// Summed BCE against constant targets.
    pub fn bce(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId, GraphError> {
        self.bce_impl(pred, target, None)
    }

    /// Summed BCE with a constant per-element weight (used to restrict the
    /// sum to a region of the output grid).
    pub fn bce_weighted(
        &mut self,
        pred: NodeId,
        target: &[f64],
        weights: &[f64],
    ) -> Result<NodeId, GraphError> {
        self.bce_impl(pred, target, Some(weights))
    }

    fn bce_impl(
        &mut self,
        pred: NodeId,
        target: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<NodeId, GraphError> {
        let n = self.values[pred].len();
        if target.len() != n {
            return Err(GraphError::ShapeMismatch {
                op: "bce",
                detail: format!("pred has {n} elements, target {}", target.len()),
            });
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(GraphError::ShapeMismatch {
                    op: "bce",
                    detail: format!("pred has {n} elements, weights {}", w.len()),
                });
            }
        }
        for (index, &value) in target.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(GraphError::TargetOutOfRange { index, value });
            }
        }
        let mut sum = 0.0;
        for (i, &p) in self.values[pred].iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let t = target[i];
            sum -= w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        }
        let ng = self.needs_grad[pred];
        Ok(self.push(
            vec![1],
            vec![sum],
            ng,
            Op::Bce {
                pred,
                target: target.to_vec(),
                weights: weights.map(|w| w.to_vec()),
            },
        ))
    }

    pub fn log_floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        let values = self.values[a].iter().map(|x| x.max(floor).ln()).collect();
        let ng = self.needs_grad[a];
        self.push(self.shapes[a].clone(), values, ng, Op::LogFloor { a, floor })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        if shape_len(&shape) != self.values[a].len() {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shapes[a]),
            });
        }
        let values = self.values[a].clone();
        let ng = self.needs_grad[a];
        Ok(self.push(shape, values, ng, Op::Reshape { a }))
    }

    /// Power spectrogram of a 1-D sample vector; see [`StftSpec`].
    pub fn stft_power(&mut self, x: NodeId, spec: &StftSpec) -> Result<NodeId, GraphError> {
        let s = &self.shapes[x];
        if s.len() != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "stft_power",
                detail: format!("expected 1-D samples, got {s:?}"),
            });
        }
        if s[0] != spec.n_samples {
            return Err(GraphError::ShapeMismatch {
                op: "stft_power",
                detail: format!("spec built for {} samples, node has {}", spec.n_samples, s[0]),
            });
        }
        let (power, spectra) = stft::forward(&self.values[x], spec);
        let ng = self.needs_grad[x];
        Ok(self.push(
            vec![spec.frames(), spec.bins()],
            power,
            ng,
            Op::StftPower {
                x,
                spec: spec.clone(),
                spectra,
            },
        ))
    }

    /// Propagates gradients from a scalar loss node back through the tape.
    /// Fan-out accumulates by summation.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if self.backward_done {
            return Err(GraphError::BackwardAlreadyRun);
        }
        if shape_len(&self.shapes[loss]) != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: self.shapes[loss].clone(),
            });
        }
        self.backward_done = true;
        self.grads = vec![Vec::new(); self.ops.len()];
        self.grads[loss] = vec![1.0];

        // Split borrows: ops and values are read-only during the sweep.
        let ops = &self.ops;
        let values = &self.values;
        let needs = &self.needs_grad;
        let grads = &mut self.grads;

        fn acc(grads: &mut [Vec<f64>], id: NodeId, len: usize) -> &mut [f64] {
            if grads[id].is_empty() {
                grads[id] = vec![0.0; len];
            }
            &mut grads[id]
        }

        for id in (0..ops.len()).rev() {
            if grads[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            match &ops[id] {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    for input in [*a, *b] {
                        if needs[input] {
                            let ga = acc(grads, input, g.len());
                            for (d, s) in ga.iter_mut().zip(&g) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::AddRows { m, row } => {
                    let cols = values[*row].len();
                    if needs[*m] {
                        let gm = acc(grads, *m, g.len());
                        for (d, s) in gm.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if needs[*row] {
                        let gr = acc(grads, *row, cols);
                        for chunk in g.chunks(cols) {
                            for (d, s) in gr.iter_mut().zip(chunk) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if needs[a] {
                        let bv = &values[b];
                        let ga = acc(grads, a, g.len());
                        for ((d, s), x) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += s * x;
                        }
                    }
                    if needs[b] {
                        let av = &values[a];
                        let gb = acc(grads, b, g.len());
                        for ((d, s), x) in gb.iter_mut().zip(&g).zip(av) {
                            *d += s * x;
                        }
                    }
                }
                Op::Scale { a, k } => {
                    if needs[*a] {
                        let ga = acc(grads, *a, g.len());
                        for (d, s) in ga.iter_mut().zip(&g) {
                            *d += k * s;
                        }
                    }
                }
                Op::AddScalar { a } => {
                    if needs[*a] {
                        let ga = acc(grads, *a, g.len());
                        for (d, s) in ga.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if needs[a] {
                        // dA[i,kk] = Σ_j g[i,j]·B[kk,j]
                        let bv = &values[b];
                        let ga = acc(grads, a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for (kk, d) in garow.iter_mut().enumerate() {
                                let brow = &bv[kk * n..(kk + 1) * n];
                                let mut dot = 0.0;
                                for (gj, bj) in grow.iter().zip(brow) {
                                    dot += gj * bj;
                                }
                                *d += dot;
                            }
                        }
                    }
                    if needs[b] {
                        // dB[kk,j] = Σ_i A[i,kk]·g[i,j]
                        let av = &values[a];
                        let gb = acc(grads, b, k * n);
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            let grow = &g[i * n..(i + 1) * n];
                            for (kk, &aik) in arow.iter().enumerate() {
                                let gbrow = &mut gb[kk * n..(kk + 1) * n];
                                for (d, gj) in gbrow.iter_mut().zip(grow) {
                                    *d += aik * gj;
                                }
                            }
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    in_ch,
                    out_ch,
                    t,
                    f,
                } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (in_ch, out_ch, t, f) = (*in_ch, *out_ch, *t, *f);
                    let plane = t * f;
                    if needs[b] {
                        let gb = acc(grads, b, out_ch);
                        for oc in 0..out_ch {
                            gb[oc] += g[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    if needs[w] {
                        let xv = &values[x];
                        let gw = acc(grads, w, out_ch * in_ch * 9);
                        for oc in 0..out_ch {
                            let gplane = &g[oc * plane..(oc + 1) * plane];
                            for ic in 0..in_ch {
                                let xplane = &xv[ic * plane..(ic + 1) * plane];
                                for kt in 0..3usize {
                                    let dt = kt as isize - 1;
                                    for kf in 0..3usize {
                                        let df = kf as isize - 1;
                                        let t_lo = (-dt).max(0) as usize;
                                        let t_hi = (t as isize - dt.max(0)) as usize;
                                        let f_lo = (-df).max(0) as usize;
                                        let f_hi = (f as isize - df.max(0)) as usize;
                                        let mut sum = 0.0;
                                        for ti in t_lo..t_hi {
                                            let src_row = ((ti as isize + dt) as usize) * f;
                                            let src = &xplane[src_row
                                                + (f_lo as isize + df) as usize
                                                ..src_row + (f_hi as isize + df) as usize];
                                            let gr = &gplane[ti * f + f_lo..ti * f + f_hi];
                                            for (s, gg) in src.iter().zip(gr) {
                                                sum += s * gg;
                                            }
                                        }
                                        gw[((oc * in_ch + ic) * 3 + kt) * 3 + kf] += sum;
                                    }
                                }
                            }
                        }
                    }
                    if needs[x] {
                        let wv = &values[w];
                        let gx = acc(grads, x, in_ch * plane);
                        for oc in 0..out_ch {
                            let gplane = &g[oc * plane..(oc + 1) * plane];
                            for ic in 0..in_ch {
                                for kt in 0..3usize {
                                    let dt = kt as isize - 1;
                                    for kf in 0..3usize {
                                        let df = kf as isize - 1;
                                        let weight = wv[((oc * in_ch + ic) * 3 + kt) * 3 + kf];
                                        if weight == 0.0 {
                                            continue;
                                        }
                                        let t_lo = (-dt).max(0) as usize;
                                        let t_hi = (t as isize - dt.max(0)) as usize;
                                        let f_lo = (-df).max(0) as usize;
                                        let f_hi = (f as isize - df.max(0)) as usize;
                                        for ti in t_lo..t_hi {
                                            let dst_row = ((ti as isize + dt) as usize) * f;
                                            let dst = &mut gx[ic * plane
                                                + dst_row
                                                + (f_lo as isize + df) as usize
                                                ..ic * plane
                                                    + dst_row
                                                    + (f_hi as isize + df) as usize];
                                            let gr = &gplane[ti * f + f_lo..ti * f + f_hi];
                                            for (d, gg) in dst.iter_mut().zip(gr) {
                                                *d += weight * gg;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPoolFreq {
                    x,
                    ch,
                    t,
                    f_out,
                    argmax,
                } => {
                    if needs[*x] {
                        let f = f_out * 2;
                        let gx = acc(grads, *x, ch * t * f);
                        for c in 0..*ch {
                            for ti in 0..*t {
                                let base_out = (c * t + ti) * f_out;
                                let base_in = (c * t + ti) * f;
                                for fo in 0..*f_out {
                                    let which = argmax[base_out + fo] as usize;
                                    gx[base_in + 2 * fo + which] += g[base_out + fo];
                                }
                            }
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    if needs[*a] {
                        let out = &values[id];
                        let ga = acc(grads, *a, g.len());
                        for ((d, s), y) in ga.iter_mut().zip(&g).zip(out) {
                            *d += s * y * (1.0 - y);
                        }
                    }
                }
                Op::Tanh { a } => {
                    if needs[*a] {
                        let out = &values[id];
                        let ga = acc(grads, *a, g.len());
                        for ((d, s), y) in ga.iter_mut().zip(&g).zip(out) {
                            *d += s * (1.0 - y * y);
                        }
                    }
                }
                Op::Relu { a } => {
                    if needs[*a] {
                        let xin = &values[*a];
                        let ga = acc(grads, *a, g.len());
                        for ((d, s), x) in ga.iter_mut().zip(&g).zip(xin) {
                            if *x > 0.0 {
                                *d += s;
                            }
                        }
                    }
                }
                Op::ConcatTime { parts, cols } => {
                    for (row, &p) in parts.iter().enumerate() {
                        if needs[p] {
                            let gp = acc(grads, p, *cols);
                            for (d, s) in gp.iter_mut().zip(&g[row * cols..(row + 1) * cols]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::SliceRow { a, row, cols } => {
                    if needs[*a] {
                        let len = values[*a].len();
                        let ga = acc(grads, *a, len);
                        for (d, s) in ga[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::FlattenFrames { a, ch, t, f } => {
                    if needs[*a] {
                        let ga = acc(grads, *a, ch * t * f);
                        for c in 0..*ch {
                            for ti in 0..*t {
                                let dst = &mut ga[(c * t + ti) * f..(c * t + ti + 1) * f];
                                let src = &g[ti * ch * f + c * f..ti * ch * f + (c + 1) * f];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                Op::Bce {
                    pred,
                    target,
                    weights,
                } => {
                    if needs[*pred] {
                        let go = g[0];
                        let pv = &values[*pred];
                        let gp = acc(grads, *pred, pv.len());
                        for (i, (&p, d)) in pv.iter().zip(gp.iter_mut()).enumerate() {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            if w == 0.0 {
                                continue;
                            }
                            // Zero gradient where the clamp is active.
                            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                                continue;
                            }
                            *d += go * w * (p - target[i]) / (p * (1.0 - p));
                        }
                    }
                }
                Op::LogFloor { a, floor } => {
                    if needs[*a] {
                        let xin = &values[*a];
                        let ga = acc(grads, *a, g.len());
                        for ((d, s), x) in ga.iter_mut().zip(&g).zip(xin) {
                            if *x > *floor {
                                *d += s / x;
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    if needs[*a] {
                        let ga = acc(grads, *a, g.len());
                        for (d, s) in ga.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::StftPower { x, spec, spectra } => {
                    if needs[*x] {
                        let gx = acc(grads, *x, spec.n_samples);
                        stft::backward(&g, spectra, spec, gx);
                    }
                }
            }
            grads[id] = g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(GraphError::BadTensor { .. })
        ));
    }

    #[test]
    fn sigmoid_value_and_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0), true);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s), &[0.5]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::scalar(0.5), true);
        let loss = tape.bce(p, &[1.0]).unwrap();
        assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_of_sigmoid_gradient_closed_form() {
        // d bce(σ(z), t)/dz = σ(z) − t; at z = 0, t = 1 → −0.5.
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::scalar(0.0), true);
        let p = tape.sigmoid(z);
        let loss = tape.bce(p, &[1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(z).unwrap()[0] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::scalar(0.5), true);
        assert!(matches!(
            tape.bce(p, &[1.5]),
            Err(GraphError::TargetOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn conv2d_of_ones_center_is_nine() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 5, 5], vec![1.0; 25]).unwrap(), false);
        let w = tape.leaf(&Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(), false);
        let b = tape.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let out = tape.conv2d(x, w, b).unwrap();
        let v = tape.value(out);
        assert_eq!(v[2 * 5 + 2], 9.0); // interior: full 3×3 support
        assert_eq!(v[0], 4.0); // corner: 2×2 support under zero padding
    }

    #[test]
    fn fan_out_accumulates_k_branches() {
        // y = x + x + x → dy/dx = 3.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0), true);
        let s1 = tape.add(x, x).unwrap();
        let s2 = tape.add(s1, x).unwrap();
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0), true);
        let y = tape.scale(x, 2.0);
        tape.backward(y).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(GraphError::BackwardAlreadyRun)
        ));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(GraphError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_shape_check() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), false);
        let b = tape.leaf(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), false);
        assert!(matches!(
            tape.matmul(a, b),
            Err(GraphError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::new(vec![1, 1, 4], vec![1.0, 3.0, 5.0, 2.0]).unwrap(),
            true,
        );
        let p = tape.maxpool_freq(x).unwrap();
        assert_eq!(tape.value(p), &[3.0, 5.0]);
        // Reduce with a linear map: sum = 1·p0 + 1·p1 via matmul.
        let flat = tape.flatten_frames(p).unwrap(); // (1, 2)
        let ones = tape.leaf(&Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(), false);
        let sum = tape.matmul(flat, ones).unwrap();
        tape.backward(sum).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut tape = Tape::new();
        let m = tape.leaf(
            &Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let r0 = tape.slice_row(m, 0).unwrap();
        let r1 = tape.slice_row(m, 1).unwrap();
        let back = tape.concat_time(&[r0, r1]).unwrap();
        assert_eq!(tape.value(back), tape.value(m));
        let ones = tape.leaf(&Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(), false);
        let summed = tape.matmul(back, ones).unwrap(); // (2,1)
        let w = tape.leaf(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), false);
        let total = tape.matmul(w, summed).unwrap(); // (1,1)
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }
}

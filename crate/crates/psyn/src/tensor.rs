//! Minimal reverse-mode automatic differentiation on a single-use tape.
//!
//! Every operation the model needs is a tape op with a hand-derived
//! backward rule, validated by the finite-difference checker below.
//! Values are f32; loss reductions accumulate in f64 before narrowing
//! so the gradient checker is not drowned in rounding noise.

use rand::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    AddBias(TensorId, TensorId),
    Relu(TensorId),
    Conv1dSame {
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        inv_std: Vec<f32>,
        normed: Vec<f32>,
    },
    MaskedSoftmax {
        scores: TensorId,
        mask: Vec<bool>,
    },
    RelativeScores {
        q: TensorId,
        k: TensorId,
        wloc: TensorId,
        window: usize,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    Dropout {
        x: TensorId,
        mask: Vec<f32>,
    },
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        end: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    L1Loss {
        pred: TensorId,
        target: Vec<f32>,
    },
    MseLoss {
        pred: TensorId,
        target: Vec<f32>,
    },
    LengthRegulate {
        x: TensorId,
        durations: Vec<usize>,
    },
    SegmentMeanPool {
        x: TensorId,
        durations: Vec<usize>,
    },
    MdnNll {
        weights: TensorId,
        means: TensorId,
        logvars: TensorId,
        target: Vec<f32>,
        components: usize,
        dim: usize,
    },
    ForwardSum {
        mu: TensorId,
        logvar: TensorId,
        mel: Vec<f32>,
        frames: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Single-use computation tape. Ops are appended in topological order;
/// `backward` walks them in exact reverse and then consumes the tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    // f64 value of the most recent scalar reduction, kept so the gradient
    // checker's finite differences aren't limited by f32 storage
    precise: Option<(TensorId, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            precise: None,
        }
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> f32 {
        self.nodes[id.0].data[0]
    }

    /// Scalar value at full reduction precision when available.
    pub fn scalar_value_precise(&self, id: TensorId) -> f64 {
        match self.precise {
            Some((pid, v)) if pid == id => v,
            _ => f64::from(self.nodes[id.0].data[0]),
        }
    }

    fn record_precise(&mut self, id: TensorId, value: f64) -> TensorId {
        self.precise = Some((id, value));
        id
    }

    fn rows(&self, id: TensorId) -> usize {
        self.nodes[id.0].shape[0]
    }

    fn cols(&self, id: TensorId) -> usize {
        self.nodes[id.0].shape[1]
    }

    fn check_2d(&self, id: TensorId, op: &'static str) -> Result<()> {
        if self.nodes[id.0].shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[id.0].shape.clone(),
                right: vec![],
            });
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Result<TensorId> {
        #[cfg(debug_assertions)]
        {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value produced by op at node {}",
                    self.nodes.len()
                )));
            }
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Ok(id)
    }

    fn req(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    // ---- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_2d(a, "matmul")?;
        self.check_2d(b, "matmul")?;
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.req(&[a, b]);
        self.push(vec![m, n], out, rg, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.req(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.req(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        let out: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.req(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    /// Broadcast-add a `[d]` bias row onto every row of an `[n, d]` matrix.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check_2d(x, "add_bias")?;
        let d = self.cols(x);
        if self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bdata = self.data(bias);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdata[i % d])
            .collect();
        let rg = self.req(&[x, bias]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f32> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.req(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Relu(x))
    }

    /// Length-preserving 1D convolution along the row axis with zero padding.
    /// `x: [n, c_in]`, `kernel: [k, c_in, c_out]`, odd `k` required.
    pub fn conv1d_same(&mut self, x: TensorId, kernel: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        self.check_2d(x, "conv1d_same")?;
        let kshape = self.shape(kernel).to_vec();
        if kshape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                left: kshape,
                right: vec![],
            });
        }
        let (k, c_in, c_out) = (kshape[0], kshape[1], kshape[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if self.cols(x) != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                left: self.shape(x).to_vec(),
                right: kshape,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d_same",
                    left: self.shape(b).to_vec(),
                    right: vec![c_out],
                });
            }
        }
        let n = self.rows(x);
        let half = k / 2;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0f32; n * c_out];
        for t in 0..n {
            for d in 0..k {
                let s = t as isize + d as isize - half as isize;
                if s < 0 || s >= n as isize {
                    continue;
                }
                let xrow = &xd[s as usize * c_in..(s as usize + 1) * c_in];
                for (ci, xv) in xrow.iter().enumerate() {
                    if *xv == 0.0 {
                        continue;
                    }
                    let krow = &kd[(d * c_in + ci) * c_out..(d * c_in + ci + 1) * c_out];
                    let orow = &mut out[t * c_out..(t + 1) * c_out];
                    for (o, kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for t in 0..n {
                for co in 0..c_out {
                    out[t * c_out + co] += bd[co];
                }
            }
        }
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let rg = self.req(&inputs);
        self.push(vec![n, c_out], out, rg, Op::Conv1dSame { x, kernel, bias })
    }

    /// Per-row layer normalization: zero mean, unit variance before gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f32) -> Result<TensorId> {
        self.check_2d(x, "layer_norm")?;
        let (n, d) = (self.rows(x), self.cols(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gain).to_vec();
        let bd = self.data(bias).to_vec();
        let mut out = vec![0.0f32; n * d];
        let mut inv_std = vec![0.0f32; n];
        let mut normed = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let nv = (row[j] - mean) * istd;
                normed[i * d + j] = nv;
                out[i * d + j] = nv * gd[j] + bd[j];
            }
        }
        let rg = self.req(&[x, gain, bias]);
        self.push(
            vec![n, d],
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            },
        )
    }

    /// Row-wise softmax over unmasked entries; masked entries are exactly 0.
    /// `mask[i*cols+j] == true` means position (i, j) participates.
    pub fn masked_softmax(&mut self, scores: TensorId, mask: &[bool]) -> Result<TensorId> {
        self.check_2d(scores, "masked_softmax")?;
        let (n, m) = (self.rows(scores), self.cols(scores));
        if mask.len() != n * m {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: vec![n, m],
                right: vec![mask.len()],
            });
        }
        let sd = self.data(scores);
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let row = &sd[i * m..(i + 1) * m];
            let mrow = &mask[i * m..(i + 1) * m];
            let mut max = f32::NEG_INFINITY;
            for j in 0..m {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f32::NEG_INFINITY {
                return Err(Error::Invariant(format!("masked_softmax: row {i} is fully masked")));
            }
            let mut sum = 0.0f64;
            for j in 0..m {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[i * m + j] = e;
                    sum += e as f64;
                }
            }
            for j in 0..m {
                if mrow[j] {
                    out[i * m + j] = (out[i * m + j] as f64 / sum) as f32;
                }
            }
        }
        let rg = self.req(&[scores]);
        self.push(
            vec![n, m],
            out,
            rg,
            Op::MaskedSoftmax {
                scores,
                mask: mask.to_vec(),
            },
        )
    }

    /// Banded bilinear attention scores: A[i][j] = q_i' W[i-j] k_j for
    /// |i-j| <= window, 0 elsewhere (out-of-band entries are masked by the
    /// softmax, never stored as infinities). Only the band is computed.
    pub fn relative_scores(&mut self, q: TensorId, k: TensorId, wloc: TensorId, window: usize) -> Result<TensorId> {
        self.check_2d(q, "relative_scores")?;
        self.check_2d(k, "relative_scores")?;
        if self.shape(q) != self.shape(k) {
            return Err(Error::ShapeMismatch {
                op: "relative_scores",
                left: self.shape(q).to_vec(),
                right: self.shape(k).to_vec(),
            });
        }
        let (n, dh) = (self.rows(q), self.cols(q));
        let expected = vec![2 * window + 1, dh, dh];
        if self.shape(wloc) != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "relative_scores",
                left: self.shape(wloc).to_vec(),
                right: expected,
            });
        }
        let qd = self.data(q);
        let kd = self.data(k);
        let wd = self.data(wloc);
        let mut out = vec![0.0f32; n * n];
        let mut wk = vec![0.0f32; dh];
        for j in 0..n {
            let krow = &kd[j * dh..(j + 1) * dh];
            let lo = j.saturating_sub(window);
            let hi = (j + window).min(n - 1);
            for i in lo..=hi {
                let delta = (window as isize + i as isize - j as isize) as usize;
                let w = &wd[delta * dh * dh..(delta + 1) * dh * dh];
                for (r, slot) in wk.iter_mut().enumerate() {
                    let wrow = &w[r * dh..(r + 1) * dh];
                    *slot = wrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                }
                let qrow = &qd[i * dh..(i + 1) * dh];
                out[i * n + j] = qrow.iter().zip(&wk).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.req(&[q, k, wloc]);
        self.push(vec![n, n], out, rg, Op::RelativeScores { q, k, wloc, window })
    }

    /// Table lookup: rows of `table` selected by `ids`. Gradient scatters
    /// (accumulating) into the table.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.check_2d(table, "embedding")?;
        let (v, d) = (self.rows(table), self.cols(table));
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, size: v });
            }
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.req(&[table]);
        self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Inverted dropout: surviving entries scaled by 1/(1-p). p = 0 is the
    /// exact identity. Callers skip this op entirely at inference.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, p: f32, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        let len = self.data(x).len();
        let mask: Vec<f32> = if p == 0.0 {
            vec![1.0; len]
        } else {
            let keep = 1.0 / (1.0 - p);
            (0..len)
                .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
                .collect()
        };
        let out: Vec<f32> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.req(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Dropout { x, mask })
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols: empty input list".into()));
        }
        let n = self.rows(parts[0]);
        let mut total = 0;
        for &p in parts {
            self.check_2d(p, "concat_cols")?;
            if self.rows(p) != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += self.cols(p);
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let d = self.cols(p);
                out.extend_from_slice(&self.data(p)[i * d..(i + 1) * d]);
            }
        }
        let rg = self.req(parts);
        self.push(vec![n, total], out, rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Column slice [start, end) of a matrix.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        self.check_2d(x, "slice_cols")?;
        let (n, d) = (self.rows(x), self.cols(x));
        if start >= end || end > d {
            return Err(Error::Config(format!(
                "slice_cols: invalid range {start}..{end} for width {d}"
            )));
        }
        let w = end - start;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&xd[i * d + start..i * d + end]);
        }
        let rg = self.req(&[x]);
        self.push(vec![n, w], out, rg, Op::SliceCols { x, start, end })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.data(x).iter().map(|v| f64::from(*v)).sum::<f64>();
        let rg = self.req(&[x]);
        let id = self.push(vec![1], vec![s as f32], rg, Op::SumAll(x))?;
        Ok(self.record_precise(id, s))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let len = self.data(x).len();
        let s = self.data(x).iter().map(|v| f64::from(*v)).sum::<f64>() / len as f64;
        let rg = self.req(&[x]);
        let id = self.push(vec![1], vec![s as f32], rg, Op::MeanAll(x))?;
        Ok(self.record_precise(id, s))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId> {
        if self.data(pred).len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "l1_loss",
                left: self.shape(pred).to_vec(),
                right: vec![target.len()],
            });
        }
        let s = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (*p as f64 - *t as f64).abs())
            .sum::<f64>()
            / target.len() as f64;
        let rg = self.req(&[pred]);
        let id = self.push(
            vec![1],
            vec![s as f32],
            rg,
            Op::L1Loss {
                pred,
                target: target.to_vec(),
            },
        )?;
        Ok(self.record_precise(id, s))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId> {
        if self.data(pred).len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                left: self.shape(pred).to_vec(),
                right: vec![target.len()],
            });
        }
        let s = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = *p as f64 - *t as f64;
                d * d
            })
            .sum::<f64>()
            / target.len() as f64;
        let rg = self.req(&[pred]);
        let id = self.push(
            vec![1],
            vec![s as f32],
            rg,
            Op::MseLoss {
                pred,
                target: target.to_vec(),
            },
        )?;
        Ok(self.record_precise(id, s))
    }

    /// Repeat row i of `x` durations[i] times, preserving order.
    pub fn length_regulate(&mut self, x: TensorId, durations: &[usize]) -> Result<TensorId> {
        self.check_2d(x, "length_regulate")?;
        let (m, d) = (self.rows(x), self.cols(x));
        if durations.len() != m {
            return Err(Error::ShapeMismatch {
                op: "length_regulate",
                left: vec![m],
                right: vec![durations.len()],
            });
        }
        if durations.iter().any(|&du| du == 0) {
            return Err(Error::Invariant("length_regulate: zero duration".into()));
        }
        let total: usize = durations.iter().sum();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(total * d);
        for (i, &du) in durations.iter().enumerate() {
            for _ in 0..du {
                out.extend_from_slice(&xd[i * d..(i + 1) * d]);
            }
        }
        let rg = self.req(&[x]);
        self.push(
            vec![total, d],
            out,
            rg,
            Op::LengthRegulate {
                x,
                durations: durations.to_vec(),
            },
        )
    }

    /// Mean-pool frame rows into one row per segment; segment i covers
    /// durations[i] consecutive rows.
    pub fn segment_mean_pool(&mut self, x: TensorId, durations: &[usize]) -> Result<TensorId> {
        self.check_2d(x, "segment_mean_pool")?;
        let (n, d) = (self.rows(x), self.cols(x));
        let total: usize = durations.iter().sum();
        if total != n || durations.iter().any(|&du| du == 0) {
            return Err(Error::Invariant(format!(
                "segment_mean_pool: durations sum {total} does not match {n} rows (or zero duration)"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0f32; durations.len() * d];
        let mut t = 0;
        for (i, &du) in durations.iter().enumerate() {
            for _ in 0..du {
                for j in 0..d {
                    out[i * d + j] += xd[t * d + j];
                }
                t += 1;
            }
            for j in 0..d {
                out[i * d + j] /= du as f32;
            }
        }
        let rg = self.req(&[x]);
        self.push(
            vec![durations.len(), d],
            out,
            rg,
            Op::SegmentMeanPool {
                x,
                durations: durations.to_vec(),
            },
        )
    }

    /// Mixture-density negative log-likelihood, mean over rows.
    /// `weights: [m, C]` logits, `means/logvars: [m, C*dim]`, target `m*dim`.
    pub fn mdn_nll(
        &mut self,
        weights: TensorId,
        means: TensorId,
        logvars: TensorId,
        target: &[f32],
        components: usize,
        dim: usize,
    ) -> Result<TensorId> {
        self.check_2d(weights, "mdn_nll")?;
        let m = self.rows(weights);
        if self.cols(weights) != components
            || self.shape(means) != [m, components * dim]
            || self.shape(logvars) != [m, components * dim]
            || target.len() != m * dim
        {
            return Err(Error::ShapeMismatch {
                op: "mdn_nll",
                left: self.shape(means).to_vec(),
                right: vec![m, components * dim],
            });
        }
        let loss = mdn_nll_forward(
            self.data(weights),
            self.data(means),
            self.data(logvars),
            target,
            m,
            components,
            dim,
        );
        let rg = self.req(&[weights, means, logvars]);
        let id = self.push(
            vec![1],
            vec![loss as f32],
            rg,
            Op::MdnNll {
                weights,
                means,
                logvars,
                target: target.to_vec(),
                components,
                dim,
            },
        )?;
        Ok(self.record_precise(id, loss))
    }

    /// Monotonic forward-sum alignment loss between per-phoneme diagonal
    /// Gaussians and a constant mel matrix, normalized by frame count.
    /// `mu/logvar: [m, d]`, `mel: frames*d`.
    pub fn forward_sum_loss(&mut self, mu: TensorId, logvar: TensorId, mel: &[f32], frames: usize) -> Result<TensorId> {
        self.check_2d(mu, "forward_sum_loss")?;
        let (m, d) = (self.rows(mu), self.cols(mu));
        if self.shape(logvar) != [m, d] {
            return Err(Error::ShapeMismatch {
                op: "forward_sum_loss",
                left: self.shape(mu).to_vec(),
                right: self.shape(logvar).to_vec(),
            });
        }
        if mel.len() != frames * d {
            return Err(Error::ShapeMismatch {
                op: "forward_sum_loss",
                left: vec![frames, d],
                right: vec![mel.len()],
            });
        }
        if m > frames {
            return Err(Error::InfeasibleAlignment {
                phonemes: m,
                frames,
            });
        }
        let log_total = crate::alignment::forward_sum_log_total_f32(self.data(mu), self.data(logvar), mel, m, frames, d)?;
        let loss = -log_total / frames as f64;
        let rg = self.req(&[mu, logvar]);
        let id = self.push(
            vec![1],
            vec![loss as f32],
            rg,
            Op::ForwardSum {
                mu,
                logvar,
                mel: mel.to_vec(),
                frames,
            },
        )?;
        Ok(self.record_precise(id, loss))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-sweep gradient propagation from a scalar loss. Consumes the
    /// tape: a second call is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("grad present");
            let (before, rest) = self.nodes.split_at_mut(i);
            propagate(before, &rest[0], &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }
}

fn needs(nodes: &[Node], id: TensorId) -> bool {
    nodes[id.0].requires_grad
}

fn accumulate(nodes: &mut [Node], id: TensorId, contrib: &[f32]) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
    for (gi, ci) in g.iter_mut().zip(contrib) {
        *gi += *ci;
    }
}

#[allow(clippy::too_many_lines)]
fn propagate(nodes: &mut [Node], node: &Node, grad: &[f32]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if needs(nodes, *a) {
                let bd = &nodes[b.0].data;
                let mut da = vec![0.0f32; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0f32;
                        for j in 0..n {
                            s += grad[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                accumulate(nodes, *a, &da);
            }
            if needs(nodes, *b) {
                let ad = &nodes[a.0].data;
                let mut db = vec![0.0f32; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * grad[i * n + j];
                        }
                    }
                }
                accumulate(nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, grad);
            accumulate(nodes, *b, grad);
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                let contrib: Vec<f32> = grad.iter().zip(&nodes[b.0].data).map(|(g, v)| g * v).collect();
                accumulate(nodes, *a, &contrib);
            }
            if needs(nodes, *b) {
                let contrib: Vec<f32> = grad.iter().zip(&nodes[a.0].data).map(|(g, v)| g * v).collect();
                accumulate(nodes, *b, &contrib);
            }
        }
        Op::Scale(a, c) => {
            let contrib: Vec<f32> = grad.iter().map(|g| g * c).collect();
            accumulate(nodes, *a, &contrib);
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, *x, grad);
            if needs(nodes, *bias) {
                let d = nodes[bias.0].data.len();
                let mut db = vec![0.0f32; d];
                for (i, g) in grad.iter().enumerate() {
                    db[i % d] += g;
                }
                accumulate(nodes, *bias, &db);
            }
        }
        Op::Relu(x) => {
            if needs(nodes, *x) {
                let contrib: Vec<f32> = grad
                    .iter()
                    .zip(&nodes[x.0].data)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(nodes, *x, &contrib);
            }
        }
        Op::Conv1dSame { x, kernel, bias } => {
            let kshape = nodes[kernel.0].shape.clone();
            let (k, c_in, c_out) = (kshape[0], kshape[1], kshape[2]);
            let n = nodes[x.0].shape[0];
            let half = k / 2;
            if needs(nodes, *x) {
                let kd = &nodes[kernel.0].data;
                let mut dx = vec![0.0f32; n * c_in];
                for t in 0..n {
                    let grow = &grad[t * c_out..(t + 1) * c_out];
                    for d in 0..k {
                        let s = t as isize + d as isize - half as isize;
                        if s < 0 || s >= n as isize {
                            continue;
                        }
                        let s = s as usize;
                        for ci in 0..c_in {
                            let krow = &kd[(d * c_in + ci) * c_out..(d * c_in + ci + 1) * c_out];
                            dx[s * c_in + ci] += grow.iter().zip(krow).map(|(g, kv)| g * kv).sum::<f32>();
                        }
                    }
                }
                accumulate(nodes, *x, &dx);
            }
            if needs(nodes, *kernel) {
                let xd = &nodes[x.0].data;
                let mut dk = vec![0.0f32; k * c_in * c_out];
                for t in 0..n {
                    let grow = &grad[t * c_out..(t + 1) * c_out];
                    for d in 0..k {
                        let s = t as isize + d as isize - half as isize;
                        if s < 0 || s >= n as isize {
                            continue;
                        }
                        let s = s as usize;
                        for ci in 0..c_in {
                            let xv = xd[s * c_in + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let drow = &mut dk[(d * c_in + ci) * c_out..(d * c_in + ci + 1) * c_out];
                            for (dkv, g) in drow.iter_mut().zip(grow) {
                                *dkv += xv * g;
                            }
                        }
                    }
                }
                accumulate(nodes, *kernel, &dk);
            }
            if let Some(b) = bias {
                if needs(nodes, *b) {
                    let mut db = vec![0.0f32; c_out];
                    for t in 0..n {
                        for co in 0..c_out {
                            db[co] += grad[t * c_out + co];
                        }
                    }
                    accumulate(nodes, *b, &db);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            inv_std,
            normed,
        } => {
            let d = nodes[gain.0].data.len();
            let n = inv_std.len();
            if needs(nodes, *gain) {
                let mut dg = vec![0.0f32; d];
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += grad[i * d + j] * normed[i * d + j];
                    }
                }
                accumulate(nodes, *gain, &dg);
            }
            if needs(nodes, *bias) {
                let mut db = vec![0.0f32; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += grad[i * d + j];
                    }
                }
                accumulate(nodes, *bias, &db);
            }
            if needs(nodes, *x) {
                let gd = &nodes[gain.0].data;
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    let mut mean_gy = 0.0f32;
                    let mut mean_gyx = 0.0f32;
                    for j in 0..d {
                        let gy = grad[i * d + j] * gd[j];
                        mean_gy += gy;
                        mean_gyx += gy * normed[i * d + j];
                    }
                    mean_gy /= d as f32;
                    mean_gyx /= d as f32;
                    for j in 0..d {
                        let gy = grad[i * d + j] * gd[j];
                        dx[i * d + j] = inv_std[i] * (gy - mean_gy - normed[i * d + j] * mean_gyx);
                    }
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::MaskedSoftmax { scores, mask } => {
            if needs(nodes, *scores) {
                let y = &node.data;
                let m = node.shape[1];
                let n = node.shape[0];
                let mut ds = vec![0.0f32; n * m];
                for i in 0..n {
                    let mut dot = 0.0f32;
                    for j in 0..m {
                        if mask[i * m + j] {
                            dot += grad[i * m + j] * y[i * m + j];
                        }
                    }
                    for j in 0..m {
                        if mask[i * m + j] {
                            ds[i * m + j] = y[i * m + j] * (grad[i * m + j] - dot);
                        }
                    }
                }
                accumulate(nodes, *scores, &ds);
            }
        }
        Op::RelativeScores { q, k, wloc, window } => {
            let n = node.shape[0];
            let dh = nodes[q.0].shape[1];
            let window = *window;
            let qd = nodes[q.0].data.clone();
            let kd = nodes[k.0].data.clone();
            let wd = nodes[wloc.0].data.clone();
            let mut dq = vec![0.0f32; n * dh];
            let mut dk = vec![0.0f32; n * dh];
            let mut dw = vec![0.0f32; (2 * window + 1) * dh * dh];
            for j in 0..n {
                let krow = &kd[j * dh..(j + 1) * dh];
                let lo = j.saturating_sub(window);
                let hi = (j + window).min(n - 1);
                for i in lo..=hi {
                    let g = grad[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    let delta = (window as isize + i as isize - j as isize) as usize;
                    let w = &wd[delta * dh * dh..(delta + 1) * dh * dh];
                    let qrow = &qd[i * dh..(i + 1) * dh];
                    for r in 0..dh {
                        let wrow = &w[r * dh..(r + 1) * dh];
                        // dq_i[r] += g * (W k_j)[r]
                        dq[i * dh + r] += g * wrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>();
                        // dW[delta][r][c] += g * q_i[r] * k_j[c]
                        let qr = qrow[r];
                        if qr != 0.0 {
                            let dwrow = &mut dw[delta * dh * dh + r * dh..delta * dh * dh + (r + 1) * dh];
                            for (slot, kc) in dwrow.iter_mut().zip(krow) {
                                *slot += g * qr * kc;
                            }
                        }
                    }
                    // dk_j[c] += g * (W' q_i)[c]
                    for c in 0..dh {
                        let mut s = 0.0f32;
                        for r in 0..dh {
                            s += w[r * dh + c] * qrow[r];
                        }
                        dk[j * dh + c] += g * s;
                    }
                }
            }
            accumulate(nodes, *q, &dq);
            accumulate(nodes, *k, &dk);
            accumulate(nodes, *wloc, &dw);
        }
        Op::Embedding { table, ids } => {
            if needs(nodes, *table) {
                let d = nodes[table.0].shape[1];
                let v = nodes[table.0].shape[0];
                let mut dt = vec![0.0f32; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[i * d + j];
                    }
                }
                accumulate(nodes, *table, &dt);
            }
        }
        Op::Dropout { x, mask } => {
            if needs(nodes, *x) {
                let contrib: Vec<f32> = grad.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(nodes, *x, &contrib);
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let d = nodes[p.0].shape[1];
                if needs(nodes, p) {
                    let mut dp = vec![0.0f32; n * d];
                    for i in 0..n {
                        dp[i * d..(i + 1) * d].copy_from_slice(&grad[i * total + offset..i * total + offset + d]);
                    }
                    accumulate(nodes, p, &dp);
                }
                offset += d;
            }
        }
        Op::SliceCols { x, start, end } => {
            if needs(nodes, *x) {
                let d = nodes[x.0].shape[1];
                let n = node.shape[0];
                let w = end - start;
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + end].copy_from_slice(&grad[i * w..(i + 1) * w]);
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::SumAll(x) => {
            if needs(nodes, *x) {
                let contrib = vec![grad[0]; nodes[x.0].data.len()];
                accumulate(nodes, *x, &contrib);
            }
        }
        Op::MeanAll(x) => {
            if needs(nodes, *x) {
                let len = nodes[x.0].data.len();
                let contrib = vec![grad[0] / len as f32; len];
                accumulate(nodes, *x, &contrib);
            }
        }
        Op::L1Loss { pred, target } => {
            if needs(nodes, *pred) {
                let len = target.len();
                let g = grad[0] / len as f32;
                let contrib: Vec<f32> = nodes[pred.0]
                    .data
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        if p > t {
                            g
                        } else if p < t {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(nodes, *pred, &contrib);
            }
        }
        Op::MseLoss { pred, target } => {
            if needs(nodes, *pred) {
                let len = target.len();
                let g = 2.0 * grad[0] / len as f32;
                let contrib: Vec<f32> = nodes[pred.0]
                    .data
                    .iter()
                    .zip(target)
                    .map(|(p, t)| g * (p - t))
                    .collect();
                accumulate(nodes, *pred, &contrib);
            }
        }
        Op::LengthRegulate { x, durations } => {
            if needs(nodes, *x) {
                let d = nodes[x.0].shape[1];
                let mut dx = vec![0.0f32; nodes[x.0].data.len()];
                let mut t = 0;
                for (i, &du) in durations.iter().enumerate() {
                    for _ in 0..du {
                        for j in 0..d {
                            dx[i * d + j] += grad[t * d + j];
                        }
                        t += 1;
                    }
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::SegmentMeanPool { x, durations } => {
            if needs(nodes, *x) {
                let d = nodes[x.0].shape[1];
                let mut dx = vec![0.0f32; nodes[x.0].data.len()];
                let mut t = 0;
                for (i, &du) in durations.iter().enumerate() {
                    let scale = 1.0 / du as f32;
                    for _ in 0..du {
                        for j in 0..d {
                            dx[t * d + j] = grad[i * d + j] * scale;
                        }
                        t += 1;
                    }
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::MdnNll {
            weights,
            means,
            logvars,
            target,
            components,
            dim,
        } => {
            let m = nodes[weights.0].shape[0];
            let (dw, dmu, ds) = mdn_nll_backward(
                &nodes[weights.0].data,
                &nodes[means.0].data,
                &nodes[logvars.0].data,
                target,
                m,
                *components,
                *dim,
                grad[0],
            );
            accumulate(nodes, *weights, &dw);
            accumulate(nodes, *means, &dmu);
            accumulate(nodes, *logvars, &ds);
        }
        Op::ForwardSum {
            mu,
            logvar,
            mel,
            frames,
        } => {
            let m = nodes[mu.0].shape[0];
            let d = nodes[mu.0].shape[1];
            let (dmu, dlv) = crate::alignment::forward_sum_backward_f32(
                &nodes[mu.0].data,
                &nodes[logvar.0].data,
                mel,
                m,
                *frames,
                d,
                grad[0],
            );
            accumulate(nodes, *mu, &dmu);
            accumulate(nodes, *logvar, &dlv);
        }
    }
}

pub(crate) const VARIANCE_FLOOR: f64 = 1e-6;

fn mdn_component_terms(
    weights: &[f32],
    means: &[f32],
    logvars: &[f32],
    target: &[f32],
    i: usize,
    components: usize,
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    // returns (log-softmax of weights, per-component joint log terms a_c)
    const LOG_2PI: f64 = 1.837_877_066_409_345_5;
    let wrow: Vec<f64> = (0..components).map(|c| weights[i * components + c] as f64).collect();
    let wmax = wrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let wsum: f64 = wrow.iter().map(|w| (w - wmax).exp()).sum();
    let logw: Vec<f64> = wrow.iter().map(|w| w - wmax - wsum.ln()).collect();
    let mut terms = Vec::with_capacity(components);
    for c in 0..components {
        let mut g = 0.0f64;
        for d in 0..dim {
            let idx = i * components * dim + c * dim + d;
            let mu = means[idx] as f64;
            let v = (logvars[idx] as f64).exp().max(VARIANCE_FLOOR);
            let x = target[i * dim + d] as f64;
            g += -0.5 * (LOG_2PI + v.ln() + (x - mu) * (x - mu) / v);
        }
        terms.push(logw[c] + g);
    }
    (logw, terms)
}

fn mdn_nll_forward(
    weights: &[f32],
    means: &[f32],
    logvars: &[f32],
    target: &[f32],
    m: usize,
    components: usize,
    dim: usize,
) -> f64 {
    let mut total = 0.0f64;
    for i in 0..m {
        let (_, terms) = mdn_component_terms(weights, means, logvars, target, i, components, dim);
        let tmax = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = tmax + terms.iter().map(|t| (t - tmax).exp()).sum::<f64>().ln();
        total -= lse;
    }
    total / m as f64
}

#[allow(clippy::too_many_arguments)]
fn mdn_nll_backward(
    weights: &[f32],
    means: &[f32],
    logvars: &[f32],
    target: &[f32],
    m: usize,
    components: usize,
    dim: usize,
    upstream: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let scale = upstream as f64 / m as f64;
    let mut dw = vec![0.0f32; m * components];
    let mut dmu = vec![0.0f32; m * components * dim];
    let mut ds = vec![0.0f32; m * components * dim];
    for i in 0..m {
        let (logw, terms) = mdn_component_terms(weights, means, logvars, target, i, components, dim);
        let tmax = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zsum: f64 = terms.iter().map(|t| (t - tmax).exp()).sum();
        for c in 0..components {
            let resp = (terms[c] - tmax).exp() / zsum;
            let softw = logw[c].exp();
            dw[i * components + c] = (scale * (softw - resp)) as f32;
            for d in 0..dim {
                let idx = i * components * dim + c * dim + d;
                let mu = means[idx] as f64;
                let s = logvars[idx] as f64;
                let v = s.exp().max(VARIANCE_FLOOR);
                let x = target[i * dim + d] as f64;
                dmu[idx] = (scale * (-resp * (x - mu) / v)) as f32;
                if s.exp() > VARIANCE_FLOOR {
                    ds[idx] = (scale * (resp * 0.5 * (1.0 - (x - mu) * (x - mu) / v))) as f32;
                }
            }
        }
    }
    (dw, dmu, ds)
}

// ---- gradient checking ---------------------------------------------------

/// Central-difference gradient check of a scalar-valued tensor function.
/// Returns the max relative error |analytic - numeric| / max(1e-8, |a|+|n|).
/// Rejects non-deterministic functions (two differing forward evaluations).
pub fn check_gradients<F>(f: F, shape: &[usize], x0: &[f32], h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let eval = |x: &[f32]| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.leaf(shape, x.to_vec(), false)?;
        let loss = f(&mut tape, xid)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        Ok(tape.scalar_value_precise(loss))
    };
    let first = eval(x0)?;
    let second = eval(x0)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two forward evaluations differ: {first} vs {second}"
        )));
    }

    let mut tape = Tape::new();
    let xid = tape.leaf(shape, x0.to_vec(), true)?;
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xid)
        .ok_or_else(|| Error::Invariant("gradient check: no gradient reached the input".into()))?
        .to_vec();

    let mut max_rel = 0.0f32;
    let mut xp = x0.to_vec();
    for i in 0..x0.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = eval(&xp)?;
        xp[i] = orig - h;
        let fm = eval(&xp)?;
        xp[i] = orig;
        let numeric = (fp - fm) / (2.0 * f64::from(h));
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel as f32 > max_rel {
            max_rel = rel as f32;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transpose() {
        let mut r = rng();
        let bdata = rand_vec(&mut r, 6);
        let x0 = rand_vec(&mut r, 6);
        let b2 = bdata.clone();
        let err = check_gradients(
            move |tape, x| {
                let b = tape.constant(&[3, 2], b2.clone())?;
                let c = tape.matmul(x, b)?;
                tape.sum_all(c)
            },
            &[2, 3],
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
        // and the analytic grad equals ones * B^T
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3], x0, true).unwrap();
        let b = tape.constant(&[3, 2], bdata.clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum_all(c).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(a).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let expect: f32 = bdata[p * 2] + bdata[p * 2 + 1];
                assert!((g[i * 3 + p] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = tape.constant(&[3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let y = tape.conv1d_same(x, k, None).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_averaging_kernel_with_zero_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let third = 1.0f32 / 3.0;
        let k = tape.constant(&[3, 1, 1], vec![third, third, third]).unwrap();
        let y = tape.conv1d_same(x, k, None).unwrap();
        let got = tape.data(y);
        assert!((got[0] - 1.0).abs() < 1e-6);
        assert!((got[1] - 2.0).abs() < 1e-6);
        assert!((got[2] - 5.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn conv1d_even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![0.0; 3]).unwrap();
        let k = tape.constant(&[2, 1, 1], vec![0.0; 2]).unwrap();
        assert!(matches!(tape.conv1d_same(x, k, None), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_gradient_check() {
        let mut r = rng();
        let x0 = rand_vec(&mut r, 5 * 2);
        // positive taps keep the input gradients away from zero, where
        // 32-bit finite differences lose relative accuracy
        let kdata: Vec<f32> = (0..3 * 2 * 3).map(|_| r.gen_range(0.1..1.0)).collect();
        let bdata = rand_vec(&mut r, 3);
        let err = check_gradients(
            move |tape, x| {
                let k = tape.constant(&[3, 2, 3], kdata.clone())?;
                let b = tape.constant(&[3], bdata.clone())?;
                let y = tape.conv1d_same(x, k, Some(b))?;
                tape.sum_all(y)
            },
            &[5, 2],
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn conv1d_kernel_gradient_check() {
        let mut r = rng();
        let xdata = rand_vec(&mut r, 5 * 2);
        let k0 = rand_vec(&mut r, 3 * 2 * 3);
        let err = check_gradients(
            move |tape, kern| {
                let x = tape.constant(&[5, 2], xdata.clone())?;
                let y = tape.conv1d_same(x, kern, None)?;
                let y2 = tape.mul(y, y)?;
                tape.sum_all(y2)
            },
            &[3, 2, 3],
            &k0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 4], vec![5.0; 4]).unwrap();
        let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
        let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for v in tape.data(y) {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_symmetric_row() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![1.0, 3.0]).unwrap();
        let g = tape.constant(&[2], vec![1.0; 2]).unwrap();
        let b = tape.constant(&[2], vec![0.0; 2]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-8).unwrap();
        let got = tape.data(y);
        assert!((got[0] + 1.0).abs() < 1e-3);
        assert!((got[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_gradient_check() {
        let mut r = rng();
        let x0 = rand_vec(&mut r, 3 * 4);
        let gdata = rand_vec(&mut r, 4);
        let bdata = rand_vec(&mut r, 4);
        let w = rand_vec(&mut r, 3 * 4);
        let err = check_gradients(
            move |tape, x| {
                let g = tape.constant(&[4], gdata.clone())?;
                let b = tape.constant(&[4], bdata.clone())?;
                let y = tape.layer_norm(x, g, b, 1e-5)?;
                let wt = tape.constant(&[3, 4], w.clone())?;
                let y = tape.mul(y, wt)?;
                tape.sum_all(y)
            },
            &[3, 4],
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn masked_softmax_singleton_and_symmetry() {
        let mut tape = Tape::new();
        let s = tape.constant(&[2, 2], vec![3.0, -1.0, 0.0, 0.0]).unwrap();
        let mask = vec![true, false, true, true];
        let y = tape.masked_softmax(s, &mask).unwrap();
        let got = tape.data(y);
        assert_eq!(got[0], 1.0);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - 0.5).abs() < 1e-6);
        assert!((got[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_large_values_stable() {
        let mut tape = Tape::new();
        let s = tape.constant(&[1, 2], vec![1000.0, 1001.0]).unwrap();
        let y = tape.masked_softmax(s, &[true, true]).unwrap();
        let got = tape.data(y);
        // 64-bit oracle: 1/(1+e), e/(1+e) with e = exp(1)
        let e = std::f64::consts::E;
        assert!((got[0] as f64 - 1.0 / (1.0 + e)).abs() < 1e-6);
        assert!((got[1] as f64 - e / (1.0 + e)).abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_error() {
        let mut tape = Tape::new();
        let s = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.masked_softmax(s, &[false, false]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zeros_property() {
        let mut r = rng();
        for _ in 0..50 {
            let n = r.gen_range(1..6usize);
            let m = r.gen_range(1..6usize);
            let data = rand_vec(&mut r, n * m);
            let mut mask = vec![false; n * m];
            for i in 0..n {
                // ensure at least one unmasked per row
                mask[i * m + r.gen_range(0..m)] = true;
                for j in 0..m {
                    if r.gen::<f32>() < 0.5 {
                        mask[i * m + j] = true;
                    }
                }
            }
            let mut tape = Tape::new();
            let s = tape.constant(&[n, m], data).unwrap();
            let y = tape.masked_softmax(s, &mask).unwrap();
            let got = tape.data(y);
            for i in 0..n {
                let sum: f32 = got[i * m..(i + 1) * m].iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
                for j in 0..m {
                    if !mask[i * m + j] {
                        assert_eq!(got[i * m + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_softmax_gradient_check_first_column_sum() {
        let mut r = rng();
        let x0 = rand_vec(&mut r, 4 * 4);
        let mask: Vec<bool> = (0..16).map(|i| (i / 4 >= (i % 4)) || i % 4 == i / 4).collect();
        let err = check_gradients(
            move |tape, x| {
                let y = tape.masked_softmax(x, &mask)?;
                let col = tape.slice_cols(y, 0, 1)?;
                tape.sum_all(col)
            },
            &[4, 4],
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn relu_and_dropout_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 2.0]);
        let mut r = rng();
        let z = tape.dropout(y, 0.0, &mut r).unwrap();
        assert_eq!(tape.data(z), &[0.0, 2.0]);
    }

    #[test]
    fn dropout_scales_by_inverse_keep_probability() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1000], vec![1.0; 1000]).unwrap();
        let mut r = rng();
        let y = tape.dropout(x, 0.5, &mut r).unwrap();
        for v in tape.data(y) {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_gradient_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        let y = tape.embedding(table, &[0, 0]).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(g, &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_out_of_range_reports_id() {
        let mut tape = Tape::new();
        let table = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.embedding(table, &[5]).unwrap_err();
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 3], vec![0.5, -1.0, 2.0], true).unwrap();
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 2], vec![1.0, 2.0], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1], vec![1.0], true).unwrap();
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn check_gradients_identity_sum_is_exact() {
        let err = check_gradients(|tape, x| tape.sum_all(x), &[2, 2], &[0.3, -0.7, 1.1, 0.0], 1e-3).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn check_gradients_rejects_nondeterminism() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let counter = AtomicU32::new(0);
        let res = check_gradients(
            move |tape, x| {
                let c = counter.fetch_add(1, Ordering::SeqCst) as f32;
                let noise = tape.constant(&[1], vec![c])?;
                let s = tape.sum_all(x)?;
                tape.add(s, noise)
            },
            &[1, 1],
            &[1.0],
            1e-3,
        );
        assert!(matches!(res, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn length_regulate_examples_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.length_regulate(x, &[2, 1, 3]).unwrap();
        assert_eq!(tape.data(y), &[1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);

        let err = check_gradients(
            |tape, x| {
                let y = tape.length_regulate(x, &[2, 1, 3])?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &[3, 1],
            &[1.0, -2.0, 0.5],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn length_regulate_zero_duration_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.length_regulate(x, &[1, 0]), Err(Error::Invariant(_))));
    }

    #[test]
    fn segment_mean_pool_gradient_check() {
        let err = check_gradients(
            |tape, x| {
                let y = tape.segment_mean_pool(x, &[2, 3])?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &[5, 2],
            &[0.1, 0.9, -0.3, 0.5, 1.2, -0.4, 0.0, 0.7, -1.1, 0.2],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let err = check_gradients(
            |tape, x| {
                let a = tape.slice_cols(x, 0, 2)?;
                let b = tape.slice_cols(x, 2, 3)?;
                let y = tape.concat_cols(&[a, b])?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &[2, 3],
            &[1.0, -0.5, 0.25, 2.0, 0.0, -1.5],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn l1_and_mse_gradient_checks() {
        let target = vec![0.3f32, -0.6, 1.4, 0.0];
        let t1 = target.clone();
        let err = check_gradients(
            move |tape, x| tape.l1_loss(x, &t1),
            &[2, 2],
            &[1.0, -1.0, 0.5, 0.7],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "l1 rel err {err}");
        let t2 = target.clone();
        let err = check_gradients(
            move |tape, x| tape.mse_loss(x, &t2),
            &[2, 2],
            &[1.0, -1.0, 0.5, 0.7],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "mse rel err {err}");
    }

    #[test]
    fn finite_inputs_give_finite_outputs() {
        let mut r = rng();
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 4], rand_vec(&mut r, 16)).unwrap();
        let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
        let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.matmul(y, x).unwrap();
        assert!(tape.data(y).iter().all(|v| v.is_finite()));
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one dynamically built forward pass as a flat list of
//! nodes; [`Tape::backward`] sweeps it once in reverse, accumulating exact
//! analytic gradients into per-node buffers. Values are addressed by opaque
//! [`ValueId`] handles. A tape is confined to one thread of execution;
//! independent tapes (one per batch element) may run concurrently.

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Batch-normalization mode. Train normalizes with the statistics of the
/// given activation map; eval applies the frozen running statistics, making
/// the op a per-channel affine function of its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op<F: Real> {
    Leaf,
    /// [n,k] x [k,m]
    Matmul { a: usize, b: usize },
    /// [n,k] x [m,k]^T -> [n,m]
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// [n,m] + row vector [m]
    AddBiasRow { a: usize, b: usize },
    Scale { a: usize, c: F },
    Relu { a: usize },
    /// Softmax over the last axis; the node value holds the output rows.
    Softmax { a: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<F>,
        xhat: Vec<F>,
    },
    BatchNorm2d {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<F>,
        xhat: Vec<F>,
        mode: BnMode,
    },
    Conv2d { x: usize, kernels: usize, bias: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    /// Mask folds the inverted-dropout scaling, so backward is a plain product.
    Dropout { x: usize, mask: Vec<F> },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    /// Row i of `a` scaled by `s[i]`.
    ScaleRows { a: usize, s: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    MeanRows { a: usize },
    Reshape { a: usize },
}

struct Node<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
    grad: Option<Vec<F>>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor<F>) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: ValueId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` output w.r.t. this value, if tracked.
    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            grad: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn shape_err(&self, op: &'static str, a: ValueId, b: ValueId) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ── Linear algebra ────────────────────────────────────────────────

    /// Matrix product `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); n * m];
        mm(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, m, &mut out);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![n, m], out, Op::Matmul { a: a.0, b: b.0 }, needs))
    }

    /// `a x b^T` for `a: [n,k]`, `b: [m,k]` — the attention-score product.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); n * m];
        mm_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, m, &mut out);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![n, m], out, Op::MatmulNt { a: a.0, b: b.0 }, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.shape_err("add", a, b));
        }
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(shape, data, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// Adds a `[m]` bias row to every row of `[n,m]`.
    pub fn add_bias_row(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.shape_err("add_bias_row", a, b));
        }
        let (n, m) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..n {
            for (v, &bv) in data[i * m..(i + 1) * m].iter_mut().zip(&self.nodes[b.0].data) {
                *v = *v + bv;
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![n, m], data, Op::AddBiasRow { a: a.0, b: b.0 }, needs))
    }

    /// Fully connected layer: `x·w + b` for `x: [n,k]`, `w: [k,m]`, `b: [m]`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.matmul(x, w)?;
        self.add_bias_row(y, b)
    }

    pub fn scale(&mut self, a: ValueId, c: F) -> ValueId {
        let data: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.nodes[a.0].needs_grad;
        self.push(shape, data, Op::Scale { a: a.0, c }, needs)
    }

    // ── Activations and normalization ─────────────────────────────────

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.nodes[a.0].needs_grad;
        self.push(shape, data, Op::Relu { a: a.0 }, needs)
    }

    /// Row-wise softmax over the last axis of a 2-d value.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(self.shape_err("softmax", a, a));
        }
        let (n, m) = (sa[0], sa[1]);
        let mut data = vec![F::zero(); n * m];
        for i in 0..n {
            let row = &self.nodes[a.0].data[i * m..(i + 1) * m];
            softmax_row(row, &mut data[i * m..(i + 1) * m]);
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![n, m], data, Op::Softmax { a: a.0 }, needs))
    }

    /// Layer normalization over the last axis with learned scale/shift.
    pub fn layernorm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: F) -> Result<ValueId> {
        if eps <= F::zero() {
            return Err(Error::Config(format!("layernorm eps must be positive, got {eps}")));
        }
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(self.shape_err("layernorm", x, x));
        }
        let (n, m) = (sx[0], sx[1]);
        if self.nodes[gamma.0].shape != [m] || self.nodes[beta.0].shape != [m] {
            return Err(self.shape_err("layernorm", x, gamma));
        }
        let mut xhat = vec![F::zero(); n * m];
        let mut inv_std = vec![F::zero(); n];
        let mut data = vec![F::zero(); n * m];
        let mf = F::from_f64(m as f64);
        for i in 0..n {
            let row = &self.nodes[x.0].data[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<F>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
            let istd = (var + eps).sqrt().recip();
            inv_std[i] = istd;
            for j in 0..m {
                let h = (row[j] - mean) * istd;
                xhat[i * m + j] = h;
                data[i * m + j] = self.nodes[gamma.0].data[j] * h + self.nodes[beta.0].data[j];
            }
        }
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            vec![n, m],
            data,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, inv_std, xhat },
            needs,
        ))
    }

    /// Per-channel normalization of a `[C,H,W]` map over its spatial
    /// positions. Train mode normalizes with the map's own statistics and
    /// returns them so the caller can fold them into running statistics;
    /// eval mode applies the frozen `running_mean`/`running_var`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
        mode: BnMode,
    ) -> Result<(ValueId, Option<(Vec<F>, Vec<F>)>)> {
        if eps <= F::zero() {
            return Err(Error::Config(format!("batchnorm eps must be positive, got {eps}")));
        }
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(self.shape_err("batchnorm2d", x, x));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(self.shape_err("batchnorm2d", x, gamma));
        }
        let hw = h * w;
        let nf = F::from_f64(hw as f64);
        let mut xhat = vec![F::zero(); c * hw];
        let mut inv_std = vec![F::zero(); c];
        let mut data = vec![F::zero(); c * hw];
        let mut batch_stats = if mode == BnMode::Train {
            Some((vec![F::zero(); c], vec![F::zero(); c]))
        } else {
            None
        };
        for ch in 0..c {
            let plane = &self.nodes[x.0].data[ch * hw..(ch + 1) * hw];
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mean = plane.iter().copied().sum::<F>() / nf;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                    let stats = batch_stats.as_mut().unwrap();
                    stats.0[ch] = mean;
                    stats.1[ch] = var;
                    (mean, var)
                }
                BnMode::Eval => (running_mean[ch], running_var[ch]),
            };
            let istd = (var + eps).sqrt().recip();
            inv_std[ch] = istd;
            let (g, b) = (self.nodes[gamma.0].data[ch], self.nodes[beta.0].data[ch]);
            for j in 0..hw {
                let hhat = (plane[j] - mean) * istd;
                xhat[ch * hw + j] = hhat;
                data[ch * hw + j] = g * hhat + b;
            }
        }
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        let id = self.push(
            vec![c, h, w],
            data,
            Op::BatchNorm2d { x: x.0, gamma: gamma.0, beta: beta.0, inv_std, xhat, mode },
            needs,
        );
        Ok((id, batch_stats.take()))
    }

    // ── Convolutional ops ─────────────────────────────────────────────

    /// 3x3 cross-correlation with stride 1 and zero padding 1, preserving the
    /// spatial size: `x: [C_in,H,W]`, `kernels: [C_out,C_in,3,3]`,
    /// `bias: [C_out]`.
    pub fn conv2d(&mut self, x: ValueId, kernels: ValueId, bias: ValueId) -> Result<ValueId> {
        let sx = &self.nodes[x.0].shape;
        let sk = &self.nodes[kernels.0].shape;
        if sx.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != sx[0] {
            return Err(self.shape_err("conv2d", x, kernels));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let c_out = sk[0];
        if self.nodes[bias.0].shape != [c_out] {
            return Err(self.shape_err("conv2d", kernels, bias));
        }
        let hw = h * w;
        let mut out = vec![F::zero(); c_out * hw];
        conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[kernels.0].data,
            &self.nodes[bias.0].data,
            c_in,
            c_out,
            h,
            w,
            &mut out,
        );
        let needs = self.needs(&[x.0, kernels.0, bias.0]);
        Ok(self.push(
            vec![c_out, h, w],
            out,
            Op::Conv2d { x: x.0, kernels: kernels.0, bias: bias.0 },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2. Backward routes each gradient to the
    /// window argmax, first occurrence in row-major order on ties.
    pub fn maxpool2d(&mut self, x: ValueId) -> Result<ValueId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 || sx[1] % 2 != 0 || sx[2] % 2 != 0 {
            return Err(Error::Shape {
                op: "maxpool2d",
                lhs: sx.clone(),
                rhs: vec![sx[0], 2, 2],
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![F::zero(); c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        let data = &self.nodes[x.0].data;
        for ch in 0..c {
            let plane = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = best;
                    argmax[ch * oh * ow + oy * ow + ox] = best_idx;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2d { x: x.0, argmax }, needs))
    }

    // ── Regularization ────────────────────────────────────────────────

    /// Inverted dropout. In eval mode this is the identity (the input id is
    /// returned unchanged); in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: ValueId, rate: f64, train: bool, rng: &mut R) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data: Vec<F> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(shape, data, Op::Dropout { x: x.0, mask }, needs))
    }

    // ── Loss ──────────────────────────────────────────────────────────

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with a
    /// log-sum-exp that is stable for any finite logits.
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sl.clone(),
                rhs: vec![labels.len()],
            });
        }
        let (b, q) = (sl[0], sl[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= q {
                return Err(Error::Index(format!(
                    "cross_entropy label {l} at row {i} out of range for {q} classes"
                )));
            }
        }
        let mut probs = vec![F::zero(); b * q];
        let mut total = F::zero();
        for i in 0..b {
            let row = &self.nodes[logits.0].data[i * q..(i + 1) * q];
            softmax_row(row, &mut probs[i * q..(i + 1) * q]);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total = total + (lse - row[labels[i]]);
        }
        let loss = total / F::from_f64(b as f64);
        let needs = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Scales row `i` of `a: [n,m]` by `s[i]` for `s: [n,1]` — the
    /// per-feature token embedding `diag(s) x W`.
    pub fn scale_rows(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        let (sa, ss) = (&self.nodes[a.0].shape, &self.nodes[s.0].shape);
        if sa.len() != 2 || ss != &[sa[0], 1] {
            return Err(self.shape_err("scale_rows", a, s));
        }
        let (n, m) = (sa[0], sa[1]);
        let mut data = vec![F::zero(); n * m];
        for i in 0..n {
            let sv = self.nodes[s.0].data[i];
            for j in 0..m {
                data[i * m + j] = self.nodes[a.0].data[i * m + j] * sv;
            }
        }
        let needs = self.needs(&[a.0, s.0]);
        Ok(self.push(vec![n, m], data, Op::ScaleRows { a: a.0, s: s.0 }, needs))
    }

    // ── Shape ops ─────────────────────────────────────────────────────

    /// Concatenates 2-d values along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].shape[0];
        let mut total = 0;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 2 || sp[0] != n {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += sp[1];
        }
        let mut data = vec![F::zero(); n * total];
        let mut col = 0;
        for &p in parts {
            let m = self.nodes[p.0].shape[1];
            for i in 0..n {
                data[i * total + col..i * total + col + m]
                    .copy_from_slice(&self.nodes[p.0].data[i * m..(i + 1) * m]);
            }
            col += m;
        }
        let needs = self.needs(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        Ok(self.push(
            vec![n, total],
            data,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
            needs,
        ))
    }

    /// Column slice `[n, len]` starting at `start` — used to split attention
    /// heads out of a packed projection.
    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 || start + len > sa[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: sa.clone(),
                rhs: vec![start, len],
            });
        }
        let (n, m) = (sa[0], sa[1]);
        let mut data = vec![F::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a.0].data[i * m + start..i * m + start + len]);
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![n, len], data, Op::SliceCols { a: a.0, start, len }, needs))
    }

    /// Mean over rows: `[s,d] -> [1,d]`.
    pub fn mean_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(self.shape_err("mean_rows", a, a));
        }
        let (s, d) = (sa[0], sa[1]);
        let sf = F::from_f64(s as f64);
        let mut data = vec![F::zero(); d];
        for i in 0..s {
            for j in 0..d {
                data[j] = data[j] + self.nodes[a.0].data[i * d + j];
            }
        }
        data.iter_mut().for_each(|v| *v = *v / sf);
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![1, d], data, Op::MeanRows { a: a.0 }, needs))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, data, Op::Reshape { a: a.0 }, needs))
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Gradients accumulate into every
    /// node on a path from a `requires_grad` leaf to `output`.
    pub fn backward(&mut self, output: ValueId) -> Result<()> {
        if self.nodes[output.0].data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.nodes[output.0].shape.clone(),
                rhs: vec![1],
            });
        }
        self.nodes[output.0].grad = Some(vec![F::one()]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    fn take_grad(&mut self, i: usize) -> Vec<F> {
        self.nodes[i].grad.clone().unwrap()
    }

    fn add_grad(&mut self, i: usize, delta: &[F]) {
        if !self.nodes[i].needs_grad {
            return;
        }
        let len = self.nodes[i].data.len();
        let grad = self.nodes[i].grad.get_or_insert_with(|| vec![F::zero(); len]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    fn backward_node(&mut self, i: usize) {
        let dy = self.take_grad(i);
        // Ops are matched by value where cheap; heavy payloads are cloned out
        // to satisfy the borrow checker around `add_grad`.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let m = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    let mut da = vec![F::zero(); n * k];
                    mm_nt(&dy, &self.nodes[b].data, n, m, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![F::zero(); k * m];
                    mm_tn(&self.nodes[a].data, &dy, n, k, m, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let m = self.nodes[b].shape[0];
                if self.nodes[a].needs_grad {
                    let mut da = vec![F::zero(); n * k];
                    mm(&dy, &self.nodes[b].data, n, m, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![F::zero(); m * k];
                    mm_tn(&dy, &self.nodes[a].data, n, m, k, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &dy);
                self.add_grad(b, &dy);
            }
            Op::AddBiasRow { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[b].data.len();
                self.add_grad(a, &dy);
                if self.nodes[b].needs_grad {
                    let mut db = vec![F::zero(); m];
                    for row in dy.chunks_exact(m) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<F> = dy.iter().map(|&d| d * c).collect();
                self.add_grad(a, &da);
            }
            Op::Relu { a } => {
                let a = *a;
                let da: Vec<F> = dy
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(&d, &x)| if x > F::zero() { d } else { F::zero() })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Softmax { a } => {
                let a = *a;
                let m = self.nodes[i].shape[1];
                let y = &self.nodes[i].data;
                let mut da = vec![F::zero(); y.len()];
                for r in 0..self.nodes[i].shape[0] {
                    let yr = &y[r * m..(r + 1) * m];
                    let dyr = &dy[r * m..(r + 1) * m];
                    let dot: F = yr.iter().zip(dyr).map(|(&yv, &dv)| yv * dv).sum();
                    for j in 0..m {
                        da[r * m + j] = yr[j] * (dyr[j] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, inv_std, xhat } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (inv_std, xhat) = (inv_std.clone(), xhat.clone());
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mf = F::from_f64(m as f64);
                if self.nodes[gamma].needs_grad {
                    let mut dg = vec![F::zero(); m];
                    for r in 0..n {
                        for j in 0..m {
                            dg[j] = dg[j] + dy[r * m + j] * xhat[r * m + j];
                        }
                    }
                    self.add_grad(gamma, &dg);
                }
                if self.nodes[beta].needs_grad {
                    let mut db = vec![F::zero(); m];
                    for row in dy.chunks_exact(m) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                    self.add_grad(beta, &db);
                }
                if self.nodes[x].needs_grad {
                    let g = &self.nodes[gamma].data;
                    let mut dx = vec![F::zero(); n * m];
                    for r in 0..n {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_xhat = F::zero();
                        for j in 0..m {
                            let dh = dy[r * m + j] * g[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_xhat = sum_dh_xhat + dh * xhat[r * m + j];
                        }
                        for j in 0..m {
                            let dh = dy[r * m + j] * g[j];
                            dx[r * m + j] =
                                inv_std[r] * (dh - (sum_dh + xhat[r * m + j] * sum_dh_xhat) / mf);
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::BatchNorm2d { x, gamma, beta, inv_std, xhat, mode } => {
                let (x, gamma, beta, mode) = (*x, *gamma, *beta, *mode);
                let (inv_std, xhat) = (inv_std.clone(), xhat.clone());
                let c = self.nodes[i].shape[0];
                let hw = self.nodes[i].shape[1] * self.nodes[i].shape[2];
                let nf = F::from_f64(hw as f64);
                if self.nodes[gamma].needs_grad {
                    let mut dg = vec![F::zero(); c];
                    for ch in 0..c {
                        for j in 0..hw {
                            dg[ch] = dg[ch] + dy[ch * hw + j] * xhat[ch * hw + j];
                        }
                    }
                    self.add_grad(gamma, &dg);
                }
                if self.nodes[beta].needs_grad {
                    let mut db = vec![F::zero(); c];
                    for ch in 0..c {
                        for j in 0..hw {
                            db[ch] = db[ch] + dy[ch * hw + j];
                        }
                    }
                    self.add_grad(beta, &db);
                }
                if self.nodes[x].needs_grad {
                    let mut dx = vec![F::zero(); c * hw];
                    match mode {
                        // Train: the normalization statistics depend on x, so
                        // the mean/variance terms enter the gradient.
                        BnMode::Train => {
                            for ch in 0..c {
                                let g = self.nodes[gamma].data[ch];
                                let mut sum_dh = F::zero();
                                let mut sum_dh_xhat = F::zero();
                                for j in 0..hw {
                                    let dh = dy[ch * hw + j] * g;
                                    sum_dh = sum_dh + dh;
                                    sum_dh_xhat = sum_dh_xhat + dh * xhat[ch * hw + j];
                                }
                                for j in 0..hw {
                                    let dh = dy[ch * hw + j] * g;
                                    dx[ch * hw + j] = inv_std[ch]
                                        * (dh - (sum_dh + xhat[ch * hw + j] * sum_dh_xhat) / nf);
                                }
                            }
                        }
                        // Eval: frozen statistics make the op elementwise
                        // affine, so the gradient is a per-channel scale.
                        BnMode::Eval => {
                            for ch in 0..c {
                                let s = self.nodes[gamma].data[ch] * inv_std[ch];
                                for j in 0..hw {
                                    dx[ch * hw + j] = dy[ch * hw + j] * s;
                                }
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Conv2d { x, kernels, bias } => {
                let (x, kernels, bias) = (*x, *kernels, *bias);
                let (c_in, h, w) = (
                    self.nodes[x].shape[0],
                    self.nodes[x].shape[1],
                    self.nodes[x].shape[2],
                );
                let c_out = self.nodes[kernels].shape[0];
                if self.nodes[x].needs_grad {
                    let mut dx = vec![F::zero(); c_in * h * w];
                    conv2d_backward_input(&dy, &self.nodes[kernels].data, c_in, c_out, h, w, &mut dx);
                    self.add_grad(x, &dx);
                }
                if self.nodes[kernels].needs_grad {
                    let mut dk = vec![F::zero(); c_out * c_in * 9];
                    conv2d_backward_kernels(&dy, &self.nodes[x].data, c_in, c_out, h, w, &mut dk);
                    self.add_grad(kernels, &dk);
                }
                if self.nodes[bias].needs_grad {
                    let hw = h * w;
                    let mut db = vec![F::zero(); c_out];
                    for co in 0..c_out {
                        db[co] = dy[co * hw..(co + 1) * hw].iter().copied().sum();
                    }
                    self.add_grad(bias, &db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let mut dx = vec![F::zero(); self.nodes[x].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] = dx[src] + dy[o];
                }
                self.add_grad(x, &dx);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let da: Vec<F> = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.add_grad(x, &da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let q = self.nodes[logits].shape[1];
                let b = labels.len();
                let scale = dy[0] / F::from_f64(b as f64);
                let mut dl = probs;
                for (r, &lab) in labels.iter().enumerate() {
                    dl[r * q + lab] = dl[r * q + lab] - F::one();
                }
                dl.iter_mut().for_each(|v| *v = *v * scale);
                self.add_grad(logits, &dl);
            }
            Op::ScaleRows { a, s } => {
                let (a, s) = (*a, *s);
                let (n, m) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                if self.nodes[a].needs_grad {
                    let mut da = vec![F::zero(); n * m];
                    for i in 0..n {
                        let sv = self.nodes[s].data[i];
                        for j in 0..m {
                            da[i * m + j] = dy[i * m + j] * sv;
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.nodes[s].needs_grad {
                    let mut ds = vec![F::zero(); n];
                    for i in 0..n {
                        for j in 0..m {
                            ds[i] = ds[i] + dy[i * m + j] * self.nodes[a].data[i * m + j];
                        }
                    }
                    self.add_grad(s, &ds);
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut col = 0;
                for p in parts {
                    let m = self.nodes[p].shape[1];
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![F::zero(); n * m];
                        for r in 0..n {
                            dp[r * m..(r + 1) * m]
                                .copy_from_slice(&dy[r * total + col..r * total + col + m]);
                        }
                        self.add_grad(p, &dp);
                    }
                    col += m;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (n, m) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let mut da = vec![F::zero(); n * m];
                for r in 0..n {
                    da[r * m + start..r * m + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.add_grad(a, &da);
            }
            Op::MeanRows { a } => {
                let a = *a;
                let (s, d) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let sf = F::from_f64(s as f64);
                let mut da = vec![F::zero(); s * d];
                for r in 0..s {
                    for j in 0..d {
                        da[r * d + j] = dy[j] / sf;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.add_grad(a, &dy);
            }
        }
    }
}

fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `out += a[n,k] x b[k,m]`.
fn mm<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize, out: &mut [F]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a[n,k] x b[m,k]^T` (row-by-row dot products).
fn mm_nt<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize, out: &mut [F]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let dot: F = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * m + j] = out[i * m + j] + dot;
        }
    }
}

/// `out += a[n,k]^T x b[n,m]`.
fn mm_tn<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize, out: &mut [F]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Shift-and-scale formulation: each kernel tap contributes one scaled,
/// spatially shifted copy of an input plane, which keeps the inner loop a
/// contiguous axpy.
#[allow(clippy::too_many_arguments)]
fn conv2d_forward<F: Real>(
    x: &[F],
    kernels: &[F],
    bias: &[F],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    out: &mut [F],
) {
    let hw = h * w;
    for co in 0..c_out {
        out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wgt = kernels[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix = (x0 as isize + dx) as usize;
                        let src = &plane[iy * w + ix..iy * w + ix + (x1 - x0)];
                        let dst = &mut out[co * hw + y * w + x0..co * hw + y * w + x1];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + wgt * v;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed form of the forward loop: scatter `dout` back through each tap.
fn conv2d_backward_input<F: Real>(
    dout: &[F],
    kernels: &[F],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dx_out: &mut [F],
) {
    let hw = h * w;
    for co in 0..c_out {
        let dplane = &dout[co * hw..(co + 1) * hw];
        for ci in 0..c_in {
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wgt = kernels[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix = (x0 as isize + dx) as usize;
                        let src = &dplane[y * w + x0..y * w + x1];
                        let dst = &mut dx_out[ci * hw + iy * w + ix..ci * hw + iy * w + ix + (x1 - x0)];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + wgt * v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels<F: Real>(
    dout: &[F],
    x: &[F],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dk_out: &mut [F],
) {
    let hw = h * w;
    for co in 0..c_out {
        let dplane = &dout[co * hw..(co + 1) * hw];
        for ci in 0..c_in {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix = (x0 as isize + dx) as usize;
                        let a = &dplane[y * w + x0..y * w + x1];
                        let b = &plane[iy * w + ix..iy * w + ix + (x1 - x0)];
                        acc = acc + a.iter().zip(b).map(|(&u, &v)| u * v).sum::<F>();
                    }
                    dk_out[((co * c_in + ci) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
}

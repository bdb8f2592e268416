//! A small reverse-mode tape over dense `f64` tensors.
//!
//! Ops are coarse (convolution, linear layers, RoI sampling, fused losses) so
//! the per-node bookkeeping is negligible next to the arithmetic. Every value
//! is `f64`; finite-difference checks rely on that headroom.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One bilinear tap set for a single sampled location: four flat spatial
/// indices into an `H x W` plane and their weights.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
pub struct LossItem {
    pub index: usize,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassItem {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    RoiSample { feat: Var, taps: Vec<BilinearTap>, per_roi: usize },
    ConcatCols(Vec<Var>),
    WeightedSum(Vec<(Var, f64)>),
    BceLogits { x: Var, items: Vec<LossItem> },
    SmoothL1 { x: Var, items: Vec<LossItem>, beta: f64 },
    SoftmaxCe { x: Var, items: Vec<ClassItem> },
    Focal { q: Var, items: Vec<LossItem>, gamma: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, keyed by parameter slot.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub grads: Vec<(usize, Vec<f64>)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A trainable leaf; its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(slot))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv channel mismatch");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(&self.value(x).data, c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![0.0; o * ho * wo];
        let bias = &self.value(b).data;
        for oc in 0..o {
            out[oc * ho * wo..(oc + 1) * ho * wo].fill(bias[oc]);
        }
        let ckk = c * k * k;
        gemm(o, ckk, ho * wo, &self.value(w).data, ckk, 1, &cols, ho * wo, 1, &mut out, 1.0);
        self.push(Tensor::new(vec![o, ho, wo], out), Op::Conv2d { x, w, b, stride, pad })
    }

    /// `x[N, D] * w[O, D]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input mismatch: {xs:?} vs {ws:?}");
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let bias = &self.value(b).data;
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(n, d, o, &self.value(x).data, d, 1, &self.value(w).data, 1, d, &mut out, 1.0);
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.shape[1];
        let mut data = Vec::with_capacity(t.data.len());
        for row in t.data.chunks(cols) {
            data.extend(softmax(row));
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::SoftmaxRows(x))
    }

    /// Samples `feat[C, H, W]` at precomputed bilinear taps. `taps` holds
    /// `rois * per_roi` entries; output is `[rois, C * per_roi]`, channel-major
    /// within each row.
    pub fn roi_sample(&mut self, feat: Var, taps: Vec<BilinearTap>, per_roi: usize) -> Var {
        let f = self.value(feat);
        let (c, h, w) = (f.shape[0], f.shape[1], f.shape[2]);
        let plane = h * w;
        let rois = taps.len().checked_div(per_roi).unwrap_or(0);
        let mut out = vec![0.0; rois * c * per_roi];
        for r in 0..rois {
            for ch in 0..c {
                let src = &f.data[ch * plane..(ch + 1) * plane];
                let dst = &mut out[(r * c + ch) * per_roi..(r * c + ch + 1) * per_roi];
                for (p, tap) in taps[r * per_roi..(r + 1) * per_roi].iter().enumerate() {
                    dst[p] = (0..4).map(|i| tap.w[i] * src[tap.idx[i]]).sum();
                }
            }
        }
        self.push(
            Tensor::new(vec![rois, c * per_roi], out),
            Op::RoiSample { feat, taps, per_roi },
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        if xs.len() == 1 {
            return xs[0];
        }
        let n = self.value(xs[0]).shape[0];
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).shape[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &v in xs {
                let t = self.value(v);
                assert_eq!(t.shape[0], n, "concat row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor::new(vec![n, total], out), Op::ConcatCols(xs.to_vec()))
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(x, c)| c * self.scalar(x)).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()))
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// `sum_i w_i * (softplus(x_i) - t_i x_i)` over the selected flat entries.
    pub fn bce_logits(&mut self, x: Var, items: Vec<LossItem>) -> Var {
        let d = &self.value(x).data;
        let v = items
            .iter()
            .map(|it| it.weight * bce_with_logit(d[it.index], it.target))
            .sum();
        self.push(Tensor::scalar(v), Op::BceLogits { x, items })
    }

    /// `sum_i w_i * smooth_l1(x_i - t_i)` with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, items: Vec<LossItem>, beta: f64) -> Var {
        let d = &self.value(x).data;
        let v = items
            .iter()
            .map(|it| it.weight * smooth_l1(d[it.index] - it.target, beta))
            .sum();
        self.push(Tensor::scalar(v), Op::SmoothL1 { x, items, beta })
    }

    /// `sum_i w_i * -log softmax(x_row_i)[class_i]` over rows of `x[N, C]`.
    pub fn softmax_ce(&mut self, x: Var, items: Vec<ClassItem>) -> Var {
        let t = self.value(x);
        let v = items
            .iter()
            .map(|it| it.weight * -log_softmax_at(t.row(it.row), it.class))
            .sum();
        self.push(Tensor::scalar(v), Op::SoftmaxCe { x, items })
    }

    /// `sum_i w_i * FL(q_i, t_i)` over probabilities `q`.
    pub fn focal(&mut self, q: Var, items: Vec<LossItem>, gamma: f64) -> Var {
        let d = &self.value(q).data;
        let v = items
            .iter()
            .map(|it| it.weight * crate::losses::focal_loss(d[it.index], it.target >= 0.5, gamma))
            .sum();
        self.push(Tensor::scalar(v), Op::Focal { q, items, gamma })
    }

    /// Back-propagates from scalar `root` and returns gradients for every
    /// parameter leaf reached.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        let mut out = ParamGrads::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => out.grads.push((*slot, g)),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (c, h, wd) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                    let (o, k) = (wt.shape[0], wt.shape[2]);
                    let (ho, wo) = (node.value.shape[1], node.value.shape[2]);
                    let hw = ho * wo;
                    let ckk = c * k * k;
                    let cols = im2col(&xt.data, c, h, wd, k, *stride, *pad, ho, wo);
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, hw, ckk, &g, hw, 1, &cols, 1, hw, &mut dw, 0.0);
                    accumulate(&mut grads, w.0, dw);
                    let db: Vec<f64> = g.chunks(hw).map(|r| r.iter().sum()).collect();
                    accumulate(&mut grads, b.0, db);
                    if self.needs_grad(*x) {
                        let mut dcols = vec![0.0; ckk * hw];
                        gemm(ckk, o, hw, &wt.data, 1, ckk, &g, hw, 1, &mut dcols, 0.0);
                        let dx = col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo);
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (n, d) = (xt.shape[0], xt.shape[1]);
                    let o = wt.shape[0];
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, &g, 1, o, &xt.data, d, 1, &mut dw, 0.0);
                    accumulate(&mut grads, w.0, dw);
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, b.0, db);
                    if self.needs_grad(*x) {
                        let mut dx = vec![0.0; n * d];
                        gemm(n, o, d, &g, o, 1, &wt.data, d, 1, &mut dx, 0.0);
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.value(*x).data;
                    let dx = g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Elu(x) => {
                    let xv = &self.value(*x).data;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { g * v.exp() })
                        .collect();
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value.data;
                    let dx = g.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, x.0, dx);
                }
                Op::SoftmaxRows(x) => {
                    let cols = node.value.shape[1];
                    let mut dx = vec![0.0; g.len()];
                    for ((s, gr), dr) in node
                        .value
                        .data
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(dx.chunks_mut(cols))
                    {
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] = s[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::RoiSample { feat, taps, per_roi } => {
                    let ft = self.value(*feat);
                    let (c, h, w) = (ft.shape[0], ft.shape[1], ft.shape[2]);
                    let plane = h * w;
                    let mut df = vec![0.0; c * plane];
                    let rois = node.value.shape[0];
                    for r in 0..rois {
                        for ch in 0..c {
                            let src = &g[(r * c + ch) * per_roi..(r * c + ch + 1) * per_roi];
                            let dst = &mut df[ch * plane..(ch + 1) * plane];
                            for (p, tap) in taps[r * per_roi..(r + 1) * per_roi].iter().enumerate() {
                                for k in 0..4 {
                                    dst[tap.idx[k]] += tap.w[k] * src[p];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, feat.0, df);
                }
                Op::ConcatCols(xs) => {
                    let n = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for &v in xs {
                        let width = self.value(v).shape[1];
                        let mut dx = Vec::with_capacity(n * width);
                        for r in 0..n {
                            dx.extend_from_slice(&g[r * total + offset..r * total + offset + width]);
                        }
                        offset += width;
                        accumulate(&mut grads, v.0, dx);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(x, c) in terms {
                        accumulate(&mut grads, x.0, vec![c * g[0]]);
                    }
                }
                Op::BceLogits { x, items } => {
                    let xv = &self.value(*x).data;
                    let mut dx = vec![0.0; xv.len()];
                    for it in items {
                        dx[it.index] += g[0] * it.weight * (sigmoid(xv[it.index]) - it.target);
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::SmoothL1 { x, items, beta } => {
                    let xv = &self.value(*x).data;
                    let mut dx = vec![0.0; xv.len()];
                    for it in items {
                        dx[it.index] +=
                            g[0] * it.weight * smooth_l1_grad(xv[it.index] - it.target, *beta);
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::SoftmaxCe { x, items } => {
                    let xt = self.value(*x);
                    let cols = xt.shape[1];
                    let mut dx = vec![0.0; xt.data.len()];
                    for it in items {
                        let p = softmax(xt.row(it.row));
                        let dr = &mut dx[it.row * cols..(it.row + 1) * cols];
                        for j in 0..cols {
                            let onehot = if j == it.class { 1.0 } else { 0.0 };
                            dr[j] += g[0] * it.weight * (p[j] - onehot);
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Focal { q, items, gamma } => {
                    let qv = &self.value(*q).data;
                    let mut dq = vec![0.0; qv.len()];
                    for it in items {
                        dq[it.index] += g[0]
                            * it.weight
                            * crate::losses::focal_loss_grad(qv[it.index], it.target >= 0.5, *gamma);
                    }
                    accumulate(&mut grads, q.0, dq);
                }
            }
        }
        out
    }

    /// Leaf constants never need gradients; everything else might.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Row-major GEMM with explicit strides: `c = a * b + beta * c`, where `a`
/// is `m x k` and `b` is `k x n`; `c` is dense row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert_eq!(c.len(), m * n);
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index the kernel touches.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let hw = ho * wo;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let hw = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[class] - lse
}

fn bce_with_logit(x: f64, t: f64) -> f64 {
    // softplus(x) - t x, stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p() - t * x
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a small graph touching every op and returns its scalar loss.
    fn graph(params: &[Tensor]) -> (Tape, Var) {
        let mut t = Tape::new();
        let p: Vec<Var> = params.iter().enumerate().map(|(i, x)| t.param(i, x.clone())).collect();
        let img = t.leaf(Tensor::new(
            vec![2, 6, 6],
            (0..72).map(|i| ((i * 37) % 11) as f64 / 11.0).collect(),
        ));
        let c = t.conv2d(img, p[0], p[1], 2, 1);
        let c = t.relu(c);
        let taps = vec![
            BilinearTap { idx: [0, 1, 3, 4], w: [0.1, 0.2, 0.3, 0.4] },
            BilinearTap { idx: [4, 5, 7, 8], w: [0.25, 0.25, 0.25, 0.25] },
            BilinearTap { idx: [2, 2, 5, 5], w: [0.5, 0.0, 0.5, 0.0] },
            BilinearTap { idx: [0, 0, 0, 0], w: [1.0, 0.0, 0.0, 0.0] },
        ];
        let pooled = t.roi_sample(c, taps, 2);
        let h = t.linear(pooled, p[2], p[3]);
        let h = t.elu(h);
        let s = t.softmax_rows(h);
        let cat = t.concat_cols(&[h, s]);
        let z = t.linear(cat, p[4], p[5]);
        let q = t.sigmoid(z);
        let l1 = t.bce_logits(z, vec![
            LossItem { index: 0, target: 1.0, weight: 0.7 },
            LossItem { index: 3, target: 0.0, weight: 1.3 },
        ]);
        let l2 = t.smooth_l1(h, vec![
            LossItem { index: 1, target: 0.3, weight: 1.0 },
            LossItem { index: 2, target: -2.0, weight: 0.5 },
        ], 1.0);
        let l3 = t.softmax_ce(h, vec![ClassItem { row: 0, class: 1, weight: 1.0 }, ClassItem { row: 1, class: 2, weight: 0.5 }]);
        let l4 = t.focal(q, vec![
            LossItem { index: 1, target: 1.0, weight: 1.0 },
            LossItem { index: 2, target: 0.0, weight: 2.0 },
        ], 1.5);
        let total = t.weighted_sum(&[(l1, 1.0), (l2, 2.0), (l3, 0.5), (l4, 1.5)]);
        (t, total)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes = vec![
            vec![4, 2, 3, 3],
            vec![4],
            vec![3, 8],
            vec![3],
            vec![2, 6],
            vec![2],
        ];
        let params: Vec<Tensor> = shapes.into_iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let (tape, root) = graph(&params);
        let grads = tape.backward(root);
        let mut analytic: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        for (slot, g) in grads.grads {
            for (a, v) in analytic[slot].iter_mut().zip(g) {
                *a += v;
            }
        }
        let eps = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data[j] += eps;
                let mut minus = params.clone();
                minus[pi].data[j] -= eps;
                let (tp, rp) = graph(&plus);
                let (tm, rm) = graph(&minus);
                let fd = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * eps);
                let a = analytic[pi][j];
                let denom = a.abs().max(fd.abs()).max(1e-7);
                assert!((a - fd).abs() / denom < 1e-5, "param {pi}[{j}]: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![3, 7, 5]);
        let w = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, vec![2]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv2d(xv, wv, bv, 2, 1);
        let out = t.value(y);
        assert_eq!(out.shape, vec![2, 4, 3]);
        for o in 0..2 {
            for oy in 0..4 {
                for ox in 0..3 {
                    let mut acc = b.data[o];
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 7 && ix >= 0 && ix < 5 {
                                    acc += w.data[((o * 3 + c) * 3 + ky) * 3 + kx]
                                        * x.data[(c * 7 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data[(o * 4 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stable_losses_at_extremes() {
        assert!(bce_with_logit(800.0, 1.0).abs() < 1e-12);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!(log_softmax_at(&[1000.0, 0.0], 0).abs() < 1e-12);
    }
}

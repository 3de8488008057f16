//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every primitive appends one node holding its output value. Replaying the
//! nodes backwards accumulates adjoints; the set of primitives is exactly what
//! the two classifier architectures and the attribution methods need.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        cols: Vec<f64>,
    },
    Relu {
        input: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Pick {
        input: usize,
        index: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// A tape is owned by a single thread; separate inputs use separate tapes.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.resolve(var)?].value)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.resolve(var).is_ok()
    }

    fn resolve(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Same-padded, stride-1 convolution of a `[C, H, W]` input with a
    /// `[O, C, k, k]` kernel (k odd) and `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.resolve(input)?, self.resolve(weight)?, self.resolve(bias)?);
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        if x.rank() != 3 {
            return Err(Error::invalid(format!(
                "conv2d expects a [C, H, W] input, got {:?}",
                x.shape()
            )));
        }
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if w.rank() != 4 || w.shape()[1] != c || w.shape()[2] != w.shape()[3] || w.shape()[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                context: "conv2d weight",
                expected: vec![w.shape().first().copied().unwrap_or(1), c, 3, 3],
                actual: w.shape().to_vec(),
            });
        }
        let (o, k) = (w.shape()[0], w.shape()[2]);
        b.expect_shape("conv2d bias", &[o])?;

        let cols = im2col(x.data(), c, h, wd, k);
        let hw = h * wd;
        let mut out = vec![0.0; o * hw];
        for (row, &bv) in out.chunks_mut(hw).zip(b.data()) {
            row.fill(bv);
        }
        gemm(o, c * k * k, hw, w.data(), false, &cols, false, &mut out, true);
        let value = Tensor::new(vec![o, h, wd], out)?;
        let rg = self.needs_grad(&[xi, wi, bi]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.resolve(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[xi]);
        Ok(self.push(value, Op::Relu { input: xi }, rg))
    }

    /// 2×2 max-pool with stride 2 over a `[C, H, W]` input. Odd trailing
    /// rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let xi = self.resolve(input)?;
        let x = &self.nodes[xi].value;
        if x.rank() != 3 || x.shape()[1] < 2 || x.shape()[2] < 2 {
            return Err(Error::invalid(format!(
                "max_pool2 expects [C, H>=2, W>=2], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = x.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // strict comparison keeps the first maximum in row-major order
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.needs_grad(&[xi]);
        Ok(self.push(value, Op::MaxPool2 { input: xi, argmax }, rg))
    }

    /// Fully connected layer: the input is flattened, `weight` is
    /// `[out, in]`, `bias` is `[out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.resolve(input)?, self.resolve(weight)?, self.resolve(bias)?);
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let b = &self.nodes[bi].value;
        let n_in = x.numel();
        if w.rank() != 2 || w.shape()[1] != n_in {
            return Err(Error::ShapeMismatch {
                context: "dense weight",
                expected: vec![w.shape()[0], n_in],
                actual: w.shape().to_vec(),
            });
        }
        let n_out = w.shape()[0];
        b.expect_shape("dense bias", &[n_out])?;
        let mut out = b.data().to_vec();
        gemm(n_out, n_in, 1, w.data(), false, x.data(), false, &mut out, true);
        let value = Tensor::new(vec![n_out], out)?;
        let rg = self.needs_grad(&[xi, wi, bi]);
        Ok(self.push(
            value,
            Op::Dense {
                input: xi,
                weight: wi,
                bias: bi,
            },
            rg,
        ))
    }

    /// Mean over the spatial axes of a `[C, H, W]` input, giving `[C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.resolve(input)?;
        let x = &self.nodes[xi].value;
        if x.rank() != 3 {
            return Err(Error::invalid(format!(
                "global_avg_pool expects [C, H, W], got {:?}",
                x.shape()
            )));
        }
        let c = x.shape()[0];
        let hw = x.shape()[1] * x.shape()[2];
        let data = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let rg = self.needs_grad(&[xi]);
        Ok(self.push(value, Op::GlobalAvgPool { input: xi }, rg))
    }

    /// Selects one element (in flat order) as a scalar.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var> {
        let xi = self.resolve(input)?;
        let x = &self.nodes[xi].value;
        let v = *x.data().get(index).ok_or_else(|| {
            Error::invalid(format!("pick index {index} out of range for {} elements", x.numel()))
        })?;
        let rg = self.needs_grad(&[xi]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { input: xi, index }, rg))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let li = self.resolve(logits)?;
        let z = self.nodes[li].value.data();
        if target >= z.len() {
            return Err(Error::invalid(format!(
                "target class {target} out of range for {} logits",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = -(z[target] - max - total.ln());
        let rg = self.needs_grad(&[li]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Gradients of a scalar output with respect to every differentiable
    /// node on the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let oi = self.scalar_output(output)?;
        let adjoints = self.replay(oi, 0);
        Ok(Gradients {
            tape: self.id,
            adjoints,
        })
    }

    /// `∂output/∂target` for a scalar `output`.
    pub fn grad_wrt(&self, output: Var, target: Var) -> Result<Tensor> {
        let oi = self.scalar_output(output)?;
        let ti = self.resolve(target)?;
        if !self.nodes[ti].requires_grad {
            return Err(Error::invalid("target does not require gradients"));
        }
        let shape = self.nodes[ti].value.shape().to_vec();
        if ti > oi {
            return Ok(Tensor::zeros(&shape));
        }
        let mut adjoints = self.replay(oi, ti);
        match adjoints[ti].take() {
            Some(g) => Tensor::new(shape, g),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    fn scalar_output(&self, output: Var) -> Result<usize> {
        let oi = self.resolve(output)?;
        if self.nodes[oi].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "gradient source must be a scalar, got shape {:?}",
                self.nodes[oi].value.shape()
            )));
        }
        Ok(oi)
    }

    /// Walks nodes `output..=stop` in reverse, accumulating adjoints.
    fn replay(&self, output: usize, stop: usize) -> Vec<Option<Vec<f64>>> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[output] = Some(vec![1.0]);
        for i in (stop..=output).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        adj
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
            } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (o, k) = (w.shape()[0], w.shape()[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                if self.nodes[*weight].requires_grad {
                    let dw = slot(adj, *weight, o * ckk);
                    gemm(o, hw, ckk, g, false, cols, true, dw, true);
                }
                if self.nodes[*bias].requires_grad {
                    let db = slot(adj, *bias, o);
                    for (d, row) in db.iter_mut().zip(g.chunks(hw)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if self.nodes[*input].requires_grad {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, o, hw, w.data(), true, g, false, &mut dcols, false);
                    let dx = slot(adj, *input, c * hw);
                    col2im_add(&dcols, c, h, wd, k, dx);
                }
            }
            Op::Relu { input } => {
                if self.nodes[*input].requires_grad {
                    let x = self.nodes[*input].value.data();
                    let dx = slot(adj, *input, x.len());
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        // subgradient at 0 is 0
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.nodes[*input].requires_grad {
                    let n = self.nodes[*input].value.numel();
                    let dx = slot(adj, *input, n);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.nodes[*input].value.data();
                let w = &self.nodes[*weight].value;
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                if self.nodes[*weight].requires_grad {
                    let dw = slot(adj, *weight, n_out * n_in);
                    gemm(n_out, 1, n_in, g, false, x, false, dw, true);
                }
                if self.nodes[*bias].requires_grad {
                    let db = slot(adj, *bias, n_out);
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.nodes[*input].requires_grad {
                    let dx = slot(adj, *input, n_in);
                    gemm(n_in, n_out, 1, w.data(), true, g, false, dx, true);
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.nodes[*input].requires_grad {
                    let x = &self.nodes[*input].value;
                    let hw = x.shape()[1] * x.shape()[2];
                    let dx = slot(adj, *input, x.numel());
                    for (chunk, &gv) in dx.chunks_mut(hw).zip(g) {
                        let share = gv / hw as f64;
                        for d in chunk {
                            *d += share;
                        }
                    }
                }
            }
            Op::Pick { input, index } => {
                if self.nodes[*input].requires_grad {
                    let n = self.nodes[*input].value.numel();
                    slot(adj, *input, n)[*index] += g[0];
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let dz = slot(adj, *logits, probs.len());
                    for (j, (d, &p)) in dz.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - onehot);
                    }
                }
            }
        }
        debug_assert_eq!(out.numel(), g.len());
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], index: usize, len: usize) -> &mut [f64] {
    adj[index].get_or_insert_with(|| vec![0.0; len])
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for xx in x0..x1 {
                        dst_row[xx] = src_row[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (w as isize - ddx).min(w as isize) as usize;
                    let base = ch * hw + sy as usize * w;
                    for xx in x0..x1 {
                        dx[base + (xx as isize + ddx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, shaped like its value. A differentiable node with
    /// no path to the output has an all-zero gradient.
    pub fn get(&self, tape: &Tape, var: Var) -> Result<Tensor> {
        if var.tape != self.tape {
            return Err(Error::NotOnTape);
        }
        let value = tape.value(var)?;
        match &self.adjoints[var.index] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()),
            None => Ok(Tensor::zeros(value.shape())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_gradient_equals_weights() {
        let mut tape = Tape::new();
        let w = [0.5, -1.25, 2.0];
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let wv = tape.constant(t(&[1, 3], &w));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.dense(x, wv, b).unwrap();
        let g = tape.grad_wrt(y, x).unwrap();
        assert_eq!(g.data(), &w);
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.grad_wrt(y, x).unwrap().data(), &[0.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.grad_wrt(y, x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.leaf(Tensor::scalar(1.0));
        let xb = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.grad_wrt(xa, xb), Err(Error::NotOnTape)));
        assert!(matches!(a.relu(xb), Err(Error::NotOnTape)));
    }

    #[test]
    fn constants_are_not_valid_gradient_targets() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let y = tape.relu(x).unwrap();
        assert!(tape.grad_wrt(y, x).is_err());
    }

    #[test]
    fn gradient_source_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(tape.grad_wrt(y, x).is_err());
    }

    #[test]
    fn max_pool_routes_ties_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[3.0, 3.0, 3.0, 3.0]));
        let p = tape.max_pool2(x).unwrap();
        let s = tape.pick(p, 0).unwrap();
        let g = tape.grad_wrt(s, x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_with_unit_kernel_scales_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 4, 4], 0.5));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[4]));
        let l = tape.softmax_cross_entropy(z, 2).unwrap();
        let v = tape.value(l).unwrap().item().unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let g = tape.grad_wrt(l, z).unwrap();
        assert_eq!(g.data(), &[0.25, 0.25, -0.75, 0.25]);
    }
}

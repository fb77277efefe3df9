//! Reverse-mode differentiation over the kernels in [`crate::ops`].
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; `backward`
//! walks the record once and accumulates gradients. Values live on the tape,
//! so backward passes read saved inputs instead of recomputing them. Forward
//! work is metered into a scoped [`FlopTrace`] stack; use [`Tape::scoped`]
//! to attribute a phase (e.g. the QKV convolutions) to a labelled child.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ops;
use crate::tensor::{Real, Shape, Tensor};
use crate::trace::FlopTrace;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Scale { x: Var, k: T },
    BmmNN { a: Var, b: Var },
    BmmNT { a: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: (usize, usize), pad: (usize, usize), groups: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    SoftmaxLastDim { x: Var, mask: Option<Vec<bool>> },
    Gelu { x: Var },
    MeanPoolSpatial { x: Var },
    ConcatChannels { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    SliceTokens { x: Var, start: usize },
    GatherTokens { x: Var, coords: Vec<(usize, usize)> },
    ScatterTokens { groups: Vec<Var>, coords: Vec<Vec<(usize, usize)>> },
    PadSpatial { x: Var },
    CropSpatial { x: Var },
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a computation for one forward/backward round.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    traces: Vec<FlopTrace>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), traces: vec![FlopTrace::new("tape")] }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// The root trace accumulated so far.
    pub fn trace(&self) -> &FlopTrace {
        &self.traces[0]
    }

    pub fn take_trace(&mut self) -> FlopTrace {
        core::mem::replace(&mut self.traces[0], FlopTrace::new("tape"))
    }

    /// Run `f` with its forward work attributed to a labelled child scope.
    pub fn scoped<R>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.traces.push(FlopTrace::new(label));
        let out = f(self);
        let child = self.traces.pop().expect("scope stack underflow");
        self.traces.last_mut().expect("root trace").absorb(child);
        out
    }

    fn top(&mut self) -> &mut FlopTrace {
        self.traces.last_mut().expect("root trace")
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::add(self.value(a), self.value(b), &mut trace);
        *self.top() = trace;
        Ok(self.push(out?, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let mut trace = core::mem::take(self.top());
        let out = ops::scale(self.value(x), k, &mut trace);
        *self.top() = trace;
        self.push(out, Op::Scale { x, k })
    }

    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::bmm_nn(self.value(a), self.value(b), &mut trace);
        *self.top() = trace;
        Ok(self.push(out?, Op::BmmNN { a, b }))
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::bmm_nt(self.value(a), self.value(b), &mut trace);
        *self.top() = trace;
        Ok(self.push(out?, Op::BmmNT { a, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).b != 1 || self.shape(b).b != 1 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("expected unbatched matrices, got {} x {}", self.shape(a), self.shape(b)),
            });
        }
        self.bmm_nn(a, b)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            groups,
            &mut trace,
        );
        *self.top() = trace;
        Ok(self.push(out?, Op::Conv2d { x, w, bias, stride, pad, groups }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps, &mut trace);
        *self.top() = trace;
        Ok(self.push(out?, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::softmax_lastdim(self.value(x), mask.as_deref(), &mut trace);
        *self.top() = trace;
        Ok(self.push(out?, Op::SoftmaxLastDim { x, mask }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut trace = core::mem::take(self.top());
        let out = ops::gelu(self.value(x), &mut trace);
        *self.top() = trace;
        self.push(out, Op::Gelu { x })
    }

    pub fn mean_pool_spatial(&mut self, x: Var) -> Var {
        let mut trace = core::mem::take(self.top());
        let out = ops::mean_pool_spatial(self.value(x), &mut trace);
        *self.top() = trace;
        self.push(out, Op::MeanPoolSpatial { x })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_tokens(self.value(x), start, len)?;
        Ok(self.push(out, Op::SliceTokens { x, start }))
    }

    pub fn gather_tokens(&mut self, x: Var, coords: Vec<(usize, usize)>) -> Result<Var> {
        let out = ops::gather_tokens(self.value(x), &coords)?;
        Ok(self.push(out, Op::GatherTokens { x, coords }))
    }

    pub fn scatter_tokens(
        &mut self,
        groups: Vec<Var>,
        coords: Vec<Vec<(usize, usize)>>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = groups.iter().map(|&g| self.value(g)).collect();
        let out = ops::scatter_tokens(&tensors, &coords, h, w)?;
        Ok(self.push(out, Op::ScatterTokens { groups, coords }))
    }

    pub fn pad_spatial(&mut self, x: Var, hp: usize, wp: usize) -> Result<Var> {
        let out = ops::pad_spatial(self.value(x), hp, wp)?;
        Ok(self.push(out, Op::PadSpatial { x }))
    }

    pub fn crop_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::crop_spatial(self.value(x), h, w)?;
        Ok(self.push(out, Op::CropSpatial { x }))
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let mut trace = core::mem::take(self.top());
        let out = ops::cross_entropy_mean(self.value(logits), &labels, &mut trace);
        *self.top() = trace;
        Ok(self.push(out?, Op::CrossEntropyMean { logits, labels }))
    }

    /// Backpropagate from a scalar output (seed gradient 1).
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.shape(output);
        if shape.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: format!("output must be scalar, got {shape}"),
            });
        }
        self.backward_with_seed(output, Tensor::scalar(T::one()))
    }

    /// Backpropagate with an explicit seed gradient for `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("seed {} vs output {}", seed.shape(), self.shape(output)),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Scale { x, k } => {
                    let dx = Tensor::new(dy.shape(), dy.data().iter().map(|&g| g * *k).collect())
                        .unwrap();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BmmNN { a, b } => {
                    let (da, db) = ops::bmm_nn_vjp(self.value(*a), self.value(*b), &dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::BmmNT { a, b } => {
                    let (da, db) = ops::bmm_nt_vjp(self.value(*a), self.value(*b), &dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Conv2d { x, w, bias, stride, pad, groups } => {
                    let (dx, dw, db) =
                        ops::conv2d_vjp(self.value(*x), self.value(*w), *stride, *pad, *groups, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) =
                        ops::layer_norm_vjp(self.value(*x), self.value(*gamma), *eps, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxLastDim { x, mask } => {
                    let dx = ops::softmax_lastdim_vjp(&self.nodes[i].value, &dy, mask.as_deref());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let dx = ops::gelu_vjp(self.value(*x), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanPoolSpatial { x } => {
                    let dx = ops::mean_pool_spatial_vjp(self.shape(*x), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatChannels { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p).c;
                        let dp = ops::slice_channels(&dy, start, len).unwrap();
                        accumulate(&mut grads, p, dp);
                        start += len;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xs = self.shape(*x);
                    let mut dx = Tensor::zeros(xs);
                    let len = dy.shape().c;
                    for b in 0..xs.b {
                        for y in 0..xs.h {
                            for x_ in 0..xs.w {
                                for ch in 0..len {
                                    dx.set(b, y, x_, start + ch, dy.at(b, y, x_, ch));
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceTokens { x, start } => {
                    let dx = ops::slice_tokens_vjp(self.shape(*x), *start, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherTokens { x, coords } => {
                    let dx = ops::gather_tokens_vjp(self.shape(*x), coords, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ScatterTokens { groups, coords } => {
                    for (dg, &g) in ops::scatter_tokens_vjp(coords, &dy).into_iter().zip(groups) {
                        accumulate(&mut grads, g, dg);
                    }
                }
                Op::PadSpatial { x } => {
                    let xs = self.shape(*x);
                    let dx = ops::crop_spatial(&dy, xs.h, xs.w).unwrap();
                    accumulate(&mut grads, *x, dx);
                }
                Op::CropSpatial { x } => {
                    let xs = self.shape(*x);
                    let cropped = dy;
                    let dx = ops::pad_spatial(&cropped, xs.h, xs.w).unwrap();
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let dl = ops::cross_entropy_mean_vjp(self.value(*logits), labels, dy.data()[0]);
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// Gradient buffers produced by [`Tape::backward`], addressed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` if the output did not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn backward_through_matmul_chain() {
        // loss = sum(A * B) with A = [[1, 2]], B = [[3], [4]]
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn scoped_traces_nest() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        tape.scoped("inner", |t| t.matmul(a, b).unwrap());
        assert_eq!(tape.trace().matmul, 12);
        assert_eq!(tape.trace().child("inner").unwrap().matmul, 12);
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}

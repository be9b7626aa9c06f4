//! Minimal dense 5-axis tensor engine with reverse-mode differentiation.
//!
//! Values live on a tape: every operation appends a node recording its
//! inputs, so reverse insertion order is a valid topological order for the
//! backward pass. Tensors are always dense `f64`; the only broadcasting is
//! the explicit [`Tape::broadcast`] op (axes of size 1 expand, gradients
//! sum back). Axes are conventionally (batch, channel, time, height,
//! width), though weight tensors reuse the five slots for their own
//! layouts.

mod conv;
mod optim;

pub use conv::{ConvSpec, PadMode};
pub use optim::{AdaMod, AdaModConfig};

use crate::error::{Error, Result};

pub type Shape5 = [usize; 5];

/// Dense 5-axis value container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    pub shape: Shape5,
    pub data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 { shape, data: vec![0.0; numel(shape)] }
    }

    pub fn filled(shape: Shape5, value: f64) -> Self {
        Tensor5 { shape, data: vec![value; numel(shape)] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?} ({} expected)",
                data.len(),
                numel(shape)
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor5 { shape: [1, 1, 1, 1, 1], data: vec![value] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub fn numel(shape: Shape5) -> usize {
    shape.iter().product()
}

fn strides(shape: Shape5) -> [usize; 5] {
    let [_, c, t, h, w] = shape;
    [c * t * h * w, t * h * w, h * w, w, 1]
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
    pub shape: Shape5,
}

enum Op {
    Leaf { param: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Sqrt(usize),
    Scale(usize, f64),
    Offset(usize),
    Maximum(usize, usize),
    Broadcast(usize),
    /// Variance over (batch, height, width) per (channel, time).
    VarBhw(usize),
    /// Variance over (height, width) per (batch, channel, time).
    VarHw(usize),
    Conv3d { input: usize, weight: usize, bias: Option<usize>, spec: ConvSpec },
    LocallyConnected { input: usize, weight: usize, kernel: (usize, usize, usize) },
    ConcatChannels(Vec<usize>),
    MseLoss { pred: usize, target: Tensor5 },
    SumAll(usize),
}

struct Node {
    value: Tensor5,
    grad: Vec<f64>,
    op: Op,
}

/// Computation tape. Build one per forward pass, call [`Tape::backward`]
/// on a scalar loss, then read gradients off leaves or via
/// [`Tape::param_grads`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor5, op: Op) -> Var {
        let shape = value.shape;
        self.nodes.push(Node { value, grad: Vec::new(), op });
        Var { id: self.nodes.len() - 1, shape }
    }

    pub fn leaf(&mut self, value: Tensor5) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf bound to an external parameter slot; its gradient is collected
    /// by [`Tape::param_grads`].
    pub fn param(&mut self, slot: usize, value: &Tensor5) -> Var {
        self.push(value.clone(), Op::Leaf { param: Some(slot) })
    }

    pub fn value(&self, v: Var) -> &Tensor5 {
        &self.nodes[v.id].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].grad
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                a.shape, b.shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let data = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x + y);
        Ok(self.push(Tensor5 { shape: a.shape, data }, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let data = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x - y);
        Ok(self.push(Tensor5 { shape: a.shape, data }, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let data = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x * y);
        Ok(self.push(Tensor5 { shape: a.shape, data }, Op::Mul(a.id, b.id)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div")?;
        let data = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x / y);
        Ok(self.push(Tensor5 { shape: a.shape, data }, Op::Div(a.id, b.id)))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.id].value.data.iter().map(|&x| x.sqrt()).collect();
        self.push(Tensor5 { shape: a.shape, data }, Op::Sqrt(a.id))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.nodes[a.id].value.data.iter().map(|&x| x * factor).collect();
        self.push(Tensor5 { shape: a.shape, data }, Op::Scale(a.id, factor))
    }

    pub fn offset(&mut self, a: Var, constant: f64) -> Var {
        let data = self.nodes[a.id].value.data.iter().map(|&x| x + constant).collect();
        self.push(Tensor5 { shape: a.shape, data }, Op::Offset(a.id))
    }

    /// Element-wise maximum; ties route the gradient to the first operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum")?;
        let data = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, f64::max);
        Ok(self.push(Tensor5 { shape: a.shape, data }, Op::Maximum(a.id, b.id)))
    }

    /// Expands size-1 axes of `a` to `target`.
    pub fn broadcast(&mut self, a: Var, target: Shape5) -> Result<Var> {
        for axis in 0..5 {
            if a.shape[axis] != target[axis] && a.shape[axis] != 1 {
                return Err(Error::Shape(format!(
                    "broadcast: axis {axis} is {} but target is {}",
                    a.shape[axis], target[axis]
                )));
            }
        }
        let src = &self.nodes[a.id].value;
        let mut out = Tensor5::zeros(target);
        broadcast_into(src, &mut out);
        Ok(self.push(out, Op::Broadcast(a.id)))
    }

    /// Population variance over (batch, height, width) per (channel, time).
    pub fn var_bhw(&mut self, a: Var) -> Var {
        let value = group_variance(&self.nodes[a.id].value, true);
        self.push(value, Op::VarBhw(a.id))
    }

    /// Population variance over (height, width) per (batch, channel, time).
    pub fn var_hw(&mut self, a: Var) -> Var {
        let value = group_variance(&self.nodes[a.id].value, false);
        self.push(value, Op::VarHw(a.id))
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.check(input.shape, weight.shape, bias.map(|b| b.shape))?;
        let out = conv::forward(
            &self.nodes[input.id].value,
            &self.nodes[weight.id].value,
            bias.map(|b| &self.nodes[b.id].value),
            &spec,
        );
        Ok(self.push(
            out,
            Op::Conv3d { input: input.id, weight: weight.id, bias: bias.map(|b| b.id), spec },
        ))
    }

    /// Locally-connected layer: one filter per output location, causal in
    /// time and same-padded in space like [`Tape::conv3d`]. Weights are
    /// `[c_out, t, h, w, c_in * kt * kh * kw]`.
    pub fn locally_connected(
        &mut self,
        input: Var,
        weight: Var,
        kernel: (usize, usize, usize),
    ) -> Result<Var> {
        conv::check_local(input.shape, weight.shape, kernel)?;
        let out = conv::local_forward(
            &self.nodes[input.id].value,
            &self.nodes[weight.id].value,
            kernel,
        );
        Ok(self.push(out, Op::LocallyConnected { input: input.id, weight: weight.id, kernel }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = parts[0].shape;
        let mut channels = 0;
        for p in parts {
            let s = p.shape;
            if [s[0], s[2], s[3], s[4]] != [first[0], first[2], first[3], first[4]] {
                return Err(Error::Shape(format!(
                    "concat: {:?} does not match {:?} outside the channel axis",
                    s, first
                )));
            }
            channels += s[1];
        }
        let out_shape = [first[0], channels, first[2], first[3], first[4]];
        let mut out = Tensor5::zeros(out_shape);
        let plane = first[2] * first[3] * first[4];
        for b in 0..first[0] {
            let mut c_off = 0;
            for p in parts {
                let src = &self.nodes[p.id].value;
                let pc = p.shape[1];
                let src_base = b * pc * plane;
                let dst_base = b * channels * plane + c_off * plane;
                out.data[dst_base..dst_base + pc * plane]
                    .copy_from_slice(&src.data[src_base..src_base + pc * plane]);
                c_off += pc;
            }
        }
        Ok(self.push(out, Op::ConcatChannels(parts.iter().map(|p| p.id).collect())))
    }

    /// Mean squared error against a constant target; yields a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor5) -> Result<Var> {
        if pred.shape != target.shape {
            return Err(Error::Shape(format!(
                "mse: prediction {:?} vs target {:?}",
                pred.shape, target.shape
            )));
        }
        let n = target.numel() as f64;
        let sum: f64 = self.nodes[pred.id]
            .value
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor5::scalar(sum / n),
            Op::MseLoss { pred: pred.id, target: target.clone() },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum: f64 = self.nodes[a.id].value.data.iter().sum();
        self.push(Tensor5::scalar(sum), Op::SumAll(a.id))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.clear();
        }
    }

    /// Reverse-mode accumulation from a scalar loss. Gradients of all
    /// reachable nodes are populated exactly once per call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(loss.shape) != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.value.numel()];
        }
        self.nodes[loss.id].grad[0] = 1.0;
        let mut reached = vec![false; self.nodes.len()];
        reached[loss.id] = true;

        for id in (0..self.nodes.len()).rev() {
            if !reached[id] {
                continue;
            }
            // Split borrows: take the gradient out, push into inputs.
            let grad = std::mem::take(&mut self.nodes[id].grad);
            let mut mark = |idx: usize| reached[idx] = true;
            match &self.nodes[id].op {
                Op::Leaf { .. } => {}
                &Op::Add(a, b) => {
                    mark(a);
                    mark(b);
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g;
                    }
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[b].grad[i] += g;
                    }
                }
                &Op::Sub(a, b) => {
                    mark(a);
                    mark(b);
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g;
                    }
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[b].grad[i] -= g;
                    }
                }
                &Op::Mul(a, b) => {
                    mark(a);
                    mark(b);
                    for i in 0..grad.len() {
                        let (ga, gb) = (
                            grad[i] * self.nodes[b].value.data[i],
                            grad[i] * self.nodes[a].value.data[i],
                        );
                        self.nodes[a].grad[i] += ga;
                        self.nodes[b].grad[i] += gb;
                    }
                }
                &Op::Div(a, b) => {
                    mark(a);
                    mark(b);
                    for i in 0..grad.len() {
                        let bv = self.nodes[b].value.data[i];
                        let av = self.nodes[a].value.data[i];
                        let ga = grad[i] / bv;
                        let gb = -grad[i] * av / (bv * bv);
                        self.nodes[a].grad[i] += ga;
                        self.nodes[b].grad[i] += gb;
                    }
                }
                &Op::Sqrt(a) => {
                    mark(a);
                    for i in 0..grad.len() {
                        let out = self.nodes[id].value.data[i];
                        self.nodes[a].grad[i] += grad[i] * 0.5 / out;
                    }
                }
                &Op::Scale(a, factor) => {
                    mark(a);
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g * factor;
                    }
                }
                &Op::Offset(a) => {
                    mark(a);
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a].grad[i] += g;
                    }
                }
                &Op::Maximum(a, b) => {
                    mark(a);
                    mark(b);
                    for i in 0..grad.len() {
                        if self.nodes[a].value.data[i] >= self.nodes[b].value.data[i] {
                            self.nodes[a].grad[i] += grad[i];
                        } else {
                            self.nodes[b].grad[i] += grad[i];
                        }
                    }
                }
                &Op::Broadcast(a) => {
                    mark(a);
                    let src_shape = self.nodes[a].shape();
                    let out_shape = self.nodes[id].value.shape;
                    reduce_broadcast(&grad, out_shape, &mut self.nodes[a].grad, src_shape);
                }
                &Op::VarBhw(a) => {
                    mark(a);
                    variance_backward(
                        &grad,
                        &self.nodes[a].value.clone(),
                        &mut self.nodes[a].grad,
                        true,
                    );
                }
                &Op::VarHw(a) => {
                    mark(a);
                    variance_backward(
                        &grad,
                        &self.nodes[a].value.clone(),
                        &mut self.nodes[a].grad,
                        false,
                    );
                }
                Op::Conv3d { input, weight, bias, spec } => {
                    let (input, weight, bias, spec) = (*input, *weight, *bias, *spec);
                    mark(input);
                    mark(weight);
                    if let Some(b) = bias {
                        mark(b);
                    }
                    let x = self.nodes[input].value.clone();
                    let w = self.nodes[weight].value.clone();
                    let (gx, gw, gb) = conv::backward(&grad, &x, &w, &spec);
                    accumulate(&mut self.nodes[input].grad, &gx);
                    accumulate(&mut self.nodes[weight].grad, &gw);
                    if let Some(b) = bias {
                        accumulate(&mut self.nodes[b].grad, &gb);
                    }
                }
                Op::LocallyConnected { input, weight, kernel } => {
                    let (input, weight, kernel) = (*input, *weight, *kernel);
                    mark(input);
                    mark(weight);
                    let x = self.nodes[input].value.clone();
                    let w = self.nodes[weight].value.clone();
                    let (gx, gw) = conv::local_backward(&grad, &x, &w, kernel);
                    accumulate(&mut self.nodes[input].grad, &gx);
                    accumulate(&mut self.nodes[weight].grad, &gw);
                }
                Op::ConcatChannels(parts) => {
                    let parts = parts.clone();
                    let out_shape = self.nodes[id].value.shape;
                    let plane = out_shape[2] * out_shape[3] * out_shape[4];
                    let channels = out_shape[1];
                    let mut c_off = 0;
                    for pid in parts {
                        reached[pid] = true;
                        let pc = self.nodes[pid].shape()[1];
                        for b in 0..out_shape[0] {
                            let src_base = b * channels * plane + c_off * plane;
                            let dst_base = b * pc * plane;
                            for i in 0..pc * plane {
                                self.nodes[pid].grad[dst_base + i] += grad[src_base + i];
                            }
                        }
                        c_off += pc;
                    }
                }
                Op::MseLoss { pred, target } => {
                    let pred = *pred;
                    let target = target.clone();
                    mark(pred);
                    let n = target.numel() as f64;
                    let g = grad[0];
                    for i in 0..target.numel() {
                        let diff = self.nodes[pred].value.data[i] - target.data[i];
                        self.nodes[pred].grad[i] += g * 2.0 * diff / n;
                    }
                }
                &Op::SumAll(a) => {
                    mark(a);
                    let g = grad[0];
                    for slot in self.nodes[a].grad.iter_mut() {
                        *slot += g;
                    }
                }
            }
            self.nodes[id].grad = grad;
        }
        Ok(())
    }

    /// Accumulated gradients per parameter slot (zeros for unbound slots).
    pub fn param_grads(&self, n_slots: usize, sizes: &[usize]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        debug_assert_eq!(sizes.len(), n_slots);
        for node in &self.nodes {
            if let Op::Leaf { param: Some(slot) } = node.op {
                if !node.grad.is_empty() {
                    for (o, g) in out[slot].iter_mut().zip(&node.grad) {
                        *o += g;
                    }
                }
            }
        }
        out
    }
}

impl Node {
    fn shape(&self) -> Shape5 {
        self.value.shape
    }
}

fn zip_map(a: &Tensor5, b: &Tensor5, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn broadcast_into(src: &Tensor5, out: &mut Tensor5) {
    let ss = strides(src.shape);
    let os = out.shape;
    let mut idx = 0;
    for b in 0..os[0] {
        let sb = if src.shape[0] == 1 { 0 } else { b } * ss[0];
        for c in 0..os[1] {
            let sc = sb + if src.shape[1] == 1 { 0 } else { c } * ss[1];
            for t in 0..os[2] {
                let st = sc + if src.shape[2] == 1 { 0 } else { t } * ss[2];
                for h in 0..os[3] {
                    let sh = st + if src.shape[3] == 1 { 0 } else { h } * ss[3];
                    for w in 0..os[4] {
                        let sw = sh + if src.shape[4] == 1 { 0 } else { w } * ss[4];
                        out.data[idx] = src.data[sw];
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn reduce_broadcast(grad: &[f64], out_shape: Shape5, into: &mut [f64], src_shape: Shape5) {
    let ss = strides(src_shape);
    let mut idx = 0;
    for b in 0..out_shape[0] {
        let sb = if src_shape[0] == 1 { 0 } else { b } * ss[0];
        for c in 0..out_shape[1] {
            let sc = sb + if src_shape[1] == 1 { 0 } else { c } * ss[1];
            for t in 0..out_shape[2] {
                let st = sc + if src_shape[2] == 1 { 0 } else { t } * ss[2];
                for h in 0..out_shape[3] {
                    let sh = st + if src_shape[3] == 1 { 0 } else { h } * ss[3];
                    for w in 0..out_shape[4] {
                        let sw = sh + if src_shape[4] == 1 { 0 } else { w } * ss[4];
                        into[sw] += grad[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Population variance per (channel, time) over (b, h, w) when
/// `over_batch`, else per (batch, channel, time) over (h, w).
fn group_variance(x: &Tensor5, over_batch: bool) -> Tensor5 {
    let [b, c, t, h, w] = x.shape;
    let st = strides(x.shape);
    if over_batch {
        let mut out = Tensor5::zeros([1, c, t, 1, 1]);
        let n = (b * h * w) as f64;
        for ci in 0..c {
            for ti in 0..t {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for bi in 0..b {
                    let base = bi * st[0] + ci * st[1] + ti * st[2];
                    for &v in &x.data[base..base + h * w] {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / n;
                out.data[ci * t + ti] = (sq / n - mean * mean).max(0.0);
            }
        }
        out
    } else {
        let mut out = Tensor5::zeros([b, c, t, 1, 1]);
        let n = (h * w) as f64;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let base = bi * st[0] + ci * st[1] + ti * st[2];
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for &v in &x.data[base..base + h * w] {
                        sum += v;
                        sq += v * v;
                    }
                    let mean = sum / n;
                    out.data[(bi * c + ci) * t + ti] = (sq / n - mean * mean).max(0.0);
                }
            }
        }
        out
    }
}

fn variance_backward(grad: &[f64], x: &Tensor5, into: &mut [f64], over_batch: bool) {
    let [b, c, t, h, w] = x.shape;
    let st = strides(x.shape);
    if over_batch {
        let n = (b * h * w) as f64;
        for ci in 0..c {
            for ti in 0..t {
                let g = grad[ci * t + ti];
                if g == 0.0 {
                    continue;
                }
                let mut sum = 0.0;
                for bi in 0..b {
                    let base = bi * st[0] + ci * st[1] + ti * st[2];
                    for &v in &x.data[base..base + h * w] {
                        sum += v;
                    }
                }
                let mean = sum / n;
                for bi in 0..b {
                    let base = bi * st[0] + ci * st[1] + ti * st[2];
                    for (off, slot) in into[base..base + h * w].iter_mut().enumerate() {
                        *slot += g * 2.0 * (x.data[base + off] - mean) / n;
                    }
                }
            }
        }
    } else {
        let n = (h * w) as f64;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let g = grad[(bi * c + ci) * t + ti];
                    if g == 0.0 {
                        continue;
                    }
                    let base = bi * st[0] + ci * st[1] + ti * st[2];
                    let mut sum = 0.0;
                    for &v in &x.data[base..base + h * w] {
                        sum += v;
                    }
                    let mean = sum / n;
                    for (off, slot) in into[base..base + h * w].iter_mut().enumerate() {
                        *slot += g * 2.0 * (x.data[base + off] - mean) / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv::PadMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape5) -> Tensor5 {
        let data = (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor5::from_vec(shape, data).unwrap()
    }

    /// Central finite differences on every element of every parameter.
    fn gradient_check(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        params: &[Tensor5],
        tol: f64,
    ) {
        let run = |values: &[Tensor5]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values
                .iter()
                .enumerate()
                .map(|(slot, v)| tape.param(slot, v))
                .collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).data[0]
        };
        // Analytic gradients.
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(slot, v)| tape.param(slot, v))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        let grads = tape.param_grads(params.len(), &sizes);

        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for ei in 0..p.numel() {
                let mut plus = params.to_vec();
                plus[pi].data[ei] += h;
                let mut minus = params.to_vec();
                minus[pi].data[ei] -= h;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let g = grads[pi][ei];
                let denom = g.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (g - fd).abs() / denom <= tol,
                    "param {pi} elem {ei}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn sum_of_product_gradient_is_input() {
        let x = Tensor5::from_vec([1, 1, 1, 1, 3], vec![2.0, -1.0, 4.0]).unwrap();
        let w = Tensor5::from_vec([1, 1, 1, 1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.param(0, &w);
        let prod = tape.mul(wv, xv).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wv), x.data.as_slice());
    }

    #[test]
    fn backward_twice_with_zero_grad_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, [1, 2, 2, 3, 3]);
        let w = random_tensor(&mut rng, [1, 2, 2, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.param(0, &w);
        let prod = tape.mul(wv, xv).unwrap();
        let loss = tape.mse_loss(prod, &Tensor5::zeros([1, 2, 2, 3, 3])).unwrap();
        tape.backward(loss).unwrap();
        let g1 = tape.grad(wv).to_vec();
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(g1, tape.grad(wv));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor5::zeros([1, 1, 1, 2, 2]));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn gradient_linearity_in_loss_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_tensor(&mut rng, [1, 1, 2, 2, 2]);
        let x = random_tensor(&mut rng, [1, 1, 2, 2, 2]);
        let grads_for = |factor: f64| {
            let mut tape = Tape::new();
            let wv = tape.param(0, &w);
            let xv = tape.leaf(x.clone());
            let prod = tape.mul(wv, xv).unwrap();
            let sum = tape.sum_all(prod);
            let scaled = tape.scale(sum, factor);
            tape.backward(scaled).unwrap();
            tape.grad(wv).to_vec()
        };
        let g1 = grads_for(1.0);
        let g3 = grads_for(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert_eq!(3.0 * a, *b, "exact linearity");
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [1, 2, 2, 2, 2];
        let a = random_tensor(&mut rng, shape);
        let mut b = random_tensor(&mut rng, shape);
        // Keep divisors and sqrt arguments away from zero.
        for v in &mut b.data {
            *v = 1.5 + v.abs();
        }
        gradient_check(
            |tape, vars| {
                let sum = tape.add(vars[0], vars[1]).unwrap();
                let diff = tape.sub(vars[0], vars[1]).unwrap();
                let prod = tape.mul(sum, diff).unwrap();
                let quot = tape.div(prod, vars[1]).unwrap();
                let root = tape.sqrt(vars[1]);
                let mx = tape.maximum(quot, root).unwrap();
                let off = tape.offset(mx, 0.3);
                tape.mse_loss(off, &Tensor5::filled(shape, 0.1)).unwrap()
            },
            &[a, b],
            1e-4,
        );
    }

    #[test]
    fn broadcast_and_variance_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, [2, 2, 3, 2, 2]);
        let scale = random_tensor(&mut rng, [1, 2, 1, 1, 1]);
        gradient_check(
            |tape, vars| {
                let s = tape.broadcast(vars[1], [2, 2, 3, 2, 2]).unwrap();
                let scaled = tape.mul(vars[0], s).unwrap();
                let bvar = tape.var_bhw(scaled);
                let ivar = tape.var_hw(scaled);
                let bb = tape.broadcast(bvar, [2, 2, 3, 2, 2]).unwrap();
                let ib = tape.broadcast(ivar, [2, 2, 3, 2, 2]).unwrap();
                let mix = tape.add(bb, ib).unwrap();
                let shifted = tape.offset(mix, 0.7);
                let root = tape.sqrt(shifted);
                tape.mse_loss(root, &Tensor5::filled([2, 2, 3, 2, 2], 0.5)).unwrap()
            },
            &[x, scale],
            1e-4,
        );
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, [1, 1, 3, 4, 4]);
        let w = Tensor5::from_vec([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new((1, 1, 1), 1, 1, PadMode::SameSpatial, false);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let out = tape.conv3d(xv, wv, None, spec).unwrap();
        assert_eq!(tape.value(out).data, x.data);
    }

    #[test]
    fn causal_impulse_response() {
        // Impulse at t=2 through a causal 3x1x1 kernel is nonzero only at
        // t in {2, 3, 4}.
        let mut x = Tensor5::zeros([1, 1, 6, 1, 1]);
        x.data[2] = 1.0;
        let w = Tensor5::from_vec([1, 1, 3, 1, 1], vec![0.3, 0.5, 0.7]).unwrap();
        let spec = ConvSpec::new((3, 1, 1), 1, 1, PadMode::CausalTemporal, false);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let out = tape.conv3d(xv, wv, None, spec).unwrap();
        let data = &tape.value(out).data;
        assert_eq!(data[0], 0.0);
        assert_eq!(data[1], 0.0);
        assert!(data[2] != 0.0 && data[3] != 0.0 && data[4] != 0.0);
        assert_eq!(data[5], 0.0);
    }

    #[test]
    fn conv3d_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, [1, 2, 4, 5, 5]);
        let w = random_tensor(&mut rng, [3, 2, 1, 3, 3]);
        let bias = random_tensor(&mut rng, [1, 3, 1, 1, 1]);
        let spec = ConvSpec::new((1, 3, 3), 2, 3, PadMode::SameSpatial, true);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(bias.clone());
        let out = tape.conv3d(xv, wv, Some(bv), spec).unwrap();
        let got = tape.value(out);

        // Direct six-loop reference.
        let (ph, pw) = (1usize, 1usize);
        for co in 0..3 {
            for t in 0..4 {
                for oh in 0..5 {
                    for ow in 0..5 {
                        let mut acc = bias.data[co];
                        for ci in 0..2 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let ih = oh as isize - ph as isize + kh as isize;
                                    let iw = ow as isize - pw as isize + kw as isize;
                                    if ih < 0 || ih >= 5 || iw < 0 || iw >= 5 {
                                        continue;
                                    }
                                    let xi = ((ci * 4 + t) * 5 + ih as usize) * 5 + iw as usize;
                                    let wi = (((co * 2 + ci) * 1) * 3 + kh) * 3 + kw;
                                    acc += w.data[wi] * x.data[xi];
                                }
                            }
                        }
                        let oi = ((co * 4 + t) * 5 + oh) * 5 + ow;
                        assert!(
                            (got.data[oi] - acc).abs() < 1e-12,
                            "at co={co} t={t} h={oh} w={ow}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, [2, 2, 3, 3, 3]);
        let w = random_tensor(&mut rng, [2, 2, 2, 1, 1]);
        let b = random_tensor(&mut rng, [1, 2, 1, 1, 1]);
        let spec = ConvSpec::new((2, 1, 1), 2, 2, PadMode::CausalTemporal, true);
        gradient_check(
            |tape, vars| {
                let out = tape.conv3d(vars[0], vars[1], Some(vars[2]), spec).unwrap();
                tape.mse_loss(out, &Tensor5::filled([2, 2, 3, 3, 3], 0.2)).unwrap()
            },
            &[x, w, b],
            1e-4,
        );
    }

    #[test]
    fn locally_connected_unit_weights_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, [1, 1, 2, 3, 3]);
        let w = Tensor5::filled([1, 2, 3, 3, 1], 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let out = tape.locally_connected(xv, wv, (1, 1, 1)).unwrap();
        assert_eq!(tape.value(out).data, x.data);
    }

    #[test]
    fn locally_connected_weight_map_on_unit_input() {
        let x = Tensor5::filled([1, 1, 1, 2, 2], 1.0);
        let w = Tensor5::from_vec([1, 1, 2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let out = tape.locally_connected(xv, wv, (1, 1, 1)).unwrap();
        assert_eq!(tape.value(out).data, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn locally_connected_matches_per_location_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, [1, 1, 1, 3, 3]);
        // One 2x2 filter per output location.
        let w = random_tensor(&mut rng, [1, 1, 3, 3, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let out = tape.locally_connected(xv, wv, (1, 2, 2)).unwrap();
        let got = tape.value(out);
        // Same padding for an even kernel: left pad 0, right pad 1.
        for oh in 0..3usize {
            for ow in 0..3usize {
                let mut acc = 0.0;
                for kh in 0..2usize {
                    for kw in 0..2usize {
                        let ih = oh + kh;
                        let iw = ow + kw;
                        if ih >= 3 || iw >= 3 {
                            continue;
                        }
                        acc += w.data[(oh * 3 + ow) * 4 + kh * 2 + kw] * x.data[ih * 3 + iw];
                    }
                }
                assert!(
                    (got.data[oh * 3 + ow] - acc).abs() < 1e-12,
                    "at h={oh} w={ow}"
                );
            }
        }
    }

    #[test]
    fn locally_connected_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&mut rng, [1, 2, 2, 3, 3]);
        let w = random_tensor(&mut rng, [2, 2, 3, 3, 2]);
        gradient_check(
            |tape, vars| {
                let out = tape.locally_connected(vars[0], vars[1], (1, 1, 1)).unwrap();
                tape.mse_loss(out, &Tensor5::filled([1, 2, 2, 3, 3], 0.0)).unwrap()
            },
            &[x, w],
            1e-4,
        );
    }

    #[test]
    fn concat_channels_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, [2, 1, 2, 2, 2]);
        let b = random_tensor(&mut rng, [2, 2, 2, 2, 2]);
        gradient_check(
            |tape, vars| {
                let cat = tape.concat_channels(&[vars[0], vars[1]]).unwrap();
                let target = Tensor5::filled([2, 3, 2, 2, 2], 0.25);
                tape.mse_loss(cat, &target).unwrap()
            },
            &[a, b],
            1e-4,
        );
    }

    #[test]
    fn adamod_hand_computed_first_step() {
        let config = AdaModConfig::default();
        let mut opt = AdaMod::new(config, &[1]);
        let mut params = vec![Tensor5::scalar(1.0)];
        let applied = opt.step(&mut params, &[vec![1.0]]).unwrap();
        assert!(applied);
        // By hand: m_hat = 1, v_hat = 1, eta = lr / (1 + eps),
        // s = (1 - b3) * eta, step = min(eta, s) * m_hat = s.
        let eta = config.lr / (1.0 + config.eps);
        let s = (1.0 - config.beta3) * eta;
        let expect = 1.0 - s;
        assert!((params[0].data[0] - expect).abs() < 1e-15, "{}", params[0].data[0]);
    }

    #[test]
    fn adamod_zero_gradient_keeps_params() {
        let mut opt = AdaMod::new(AdaModConfig::default(), &[3]);
        let mut params = vec![Tensor5::from_vec([1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].data.clone();
        opt.step(&mut params, &[vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(params[0].data, before);
    }

    #[test]
    fn adamod_beta3_zero_is_unclipped() {
        let config = AdaModConfig { beta3: 0.0, ..Default::default() };
        let mut opt = AdaMod::new(config, &[1]);
        let mut params = vec![Tensor5::scalar(0.0)];
        for _ in 0..5 {
            opt.step(&mut params, &[vec![2.0]]).unwrap();
        }
        // Compare against the plain adaptive step computed independently.
        let mut m = 0.0;
        let mut v = 0.0;
        let mut p = 0.0;
        for t in 1..=5 {
            m = 0.9 * m + 0.1 * 2.0;
            v = 0.999 * v + 0.001 * 4.0;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            let eta = config.lr / (v_hat.sqrt() + config.eps);
            p -= eta * m_hat;
        }
        assert!((params[0].data[0] - p).abs() < 1e-12);
    }

    #[test]
    fn adamod_skips_non_finite_gradients() {
        let mut opt = AdaMod::new(AdaModConfig::default(), &[1]);
        let mut params = vec![Tensor5::scalar(1.0)];
        let applied = opt.step(&mut params, &[vec![f64::NAN]]).unwrap();
        assert!(!applied);
        assert_eq!(params[0].data[0], 1.0);
    }
}

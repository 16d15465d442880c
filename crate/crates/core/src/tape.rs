//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Operations
//! append nodes in execution order, so the node list is already a topological
//! order and backward is a single reverse sweep with additive accumulation at
//! fan-out points.

use crate::error::{Error, Result};
use crate::ops;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddScalar(VarId),
    MulScalar(VarId, f64),
    MatMul(VarId, VarId),
    TransposeLast2(VarId),
    Softmax(VarId),
    Sigmoid(VarId),
    Relu(VarId),
    Ln(VarId),
    Clamp(VarId, f64, f64),
    MeanAll(VarId),
    SumAll(VarId),
    MeanPerItem(VarId),
    DivByItem(VarId, VarId),
    MulByItem(VarId, VarId),
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize, pad: usize },
    DwConv2d { x: VarId, w: VarId, pad: usize },
    ConcatChannels(Vec<VarId>),
    MulBroadcastChannel(VarId, VarId),
    MaxPool2 { x: VarId, argmax: Vec<usize> },
    AvgPool { x: VarId, factor: usize },
    Upsample { x: VarId, factor: usize },
    GlobalAvgPool(VarId),
    Reshape(VarId),
    NchwToTokens(VarId),
    TokensToNchw(VarId),
    Detach,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Untracked input tensor.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Tracked leaf; gradient is populated by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Tracked leaf bound to a parameter in `store`.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> Result<VarId> {
        let value = store.value(pid).clone();
        self.push(value, Op::Param(pid), true, "param")
    }

    // ---- elementwise ----

    fn check_same_shape(&self, a: VarId, b: VarId, op: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs, "mul")
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape(a, b, "div")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), needs, "div")
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x + s).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a), needs, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(v, Op::MulScalar(a, s), needs, "mul_scalar")
    }

    /// 1 - x, convenience for complement maps.
    pub fn one_minus(&mut self, a: VarId) -> Result<VarId> {
        let neg = self.mul_scalar(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a), needs, "sigmoid")
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs, "relu")
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.ln()).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(v, Op::Ln(a), needs, "ln")
    }

    /// Clamp to [lo, hi]. Gradient passes through strictly inside the
    /// interval and is zero outside and at the boundary.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId> {
        if lo > hi {
            return Err(Error::InvalidArg(format!("clamp: lo {lo} > hi {hi}")));
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), needs, "clamp")
    }

    // ---- reductions / broadcasts ----

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), Op::MeanAll(a), needs, "mean_all")
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let s = self.value(a).data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs, "sum_all")
    }

    /// Per-batch-item mean: [N, ...] -> [N].
    pub fn mean_per_item(&mut self, a: VarId) -> Result<VarId> {
        let t = self.value(a);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let data: Vec<f64> = t
            .data()
            .chunks(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n], data)?, Op::MeanPerItem(a), needs, "mean_per_item")
    }

    /// Divide each batch item of `a` by the matching scalar of `s` ([N]).
    pub fn div_by_item(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        let n = self.value(a).shape()[0];
        if self.value(s).shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "div_by_item: scale shape {:?} vs batch {n}",
                self.value(s).shape()
            )));
        }
        let per = self.value(a).numel() / n;
        let sd = self.value(s).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x / sd[i / per])
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(s);
        self.push(v, Op::DivByItem(a, s), needs, "div_by_item")
    }

    /// Multiply each batch item of `a` by the matching scalar of `s` ([N]).
    pub fn mul_by_item(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        let n = self.value(a).shape()[0];
        if self.value(s).shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "mul_by_item: scale shape {:?} vs batch {n}",
                self.value(s).shape()
            )));
        }
        let per = self.value(a).numel() / n;
        let sd = self.value(s).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * sd[i / per])
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(s);
        self.push(v, Op::MulByItem(a, s), needs, "mul_by_item")
    }

    /// x[N,C,H,W] * w[N,1,H,W], broadcasting w over channels.
    pub fn mul_broadcast_channel(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let (n, c, h, wid) = self.value(x).dims4()?;
        let (wn, wc, wh, ww) = self.value(w).dims4()?;
        if wn != n || wc != 1 || wh != h || ww != wid {
            return Err(Error::ShapeMismatch(format!(
                "mul_broadcast_channel: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let hw = h * wid;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut data = vec![0.0; xd.len()];
        for ni in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(ni * c + ch) * hw + p] = xd[(ni * c + ch) * hw + p] * wd[ni * hw + p];
                }
            }
        }
        let v = Tensor::new(vec![n, c, h, wid], data)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::MulBroadcastChannel(x, w), needs, "mul_broadcast_channel")
    }

    pub fn global_avg_pool(&mut self, a: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let hw = (h * w) as f64;
        let xd = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for i in 0..n * c {
            data[i] = xd[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let v = Tensor::new(vec![n, c], data)?;
        let needs = self.needs(a);
        self.push(v, Op::GlobalAvgPool(a), needs, "global_avg_pool")
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let v = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a), needs, "reshape")
    }

    pub fn concat_channels(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_channels: no inputs".into()));
        }
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut ctotal = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if pn != n || ph != h || pw != w {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            ctotal += pc;
        }
        let hw = h * w;
        let mut data = vec![0.0; n * ctotal * hw];
        for ni in 0..n {
            let mut coff = 0;
            for &p in parts {
                let pc = self.value(p).shape()[1];
                let pd = self.value(p).data();
                for ch in 0..pc {
                    let src = ((ni * pc + ch) * hw)..((ni * pc + ch + 1) * hw);
                    let dst = (ni * ctotal + coff + ch) * hw;
                    data[dst..dst + hw].copy_from_slice(&pd[src]);
                }
                coff += pc;
            }
        }
        let v = Tensor::new(vec![n, ctotal, h, w], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatChannels(parts.to_vec()), needs, "concat_channels")
    }

    pub fn detach(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false, "detach")
    }

    // ---- linear algebra / attention ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = ops::matmul_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs, "matmul")
    }

    pub fn transpose_last2(&mut self, a: VarId) -> Result<VarId> {
        let v = ops::transpose_last2(self.value(a))?;
        let needs = self.needs(a);
        self.push(v, Op::TransposeLast2(a), needs, "transpose_last2")
    }

    pub fn softmax_lastdim(&mut self, a: VarId) -> Result<VarId> {
        let v = ops::softmax_lastdim_forward(self.value(a))?;
        let needs = self.needs(a);
        self.push(v, Op::Softmax(a), needs, "softmax_lastdim")
    }

    // ---- convolutions / pooling ----

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let v = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, needs, "conv2d")
    }

    pub fn dwconv2d(&mut self, x: VarId, w: VarId, pad: usize) -> Result<VarId> {
        let v = ops::dwconv2d_forward(self.value(x), self.value(w), pad)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::DwConv2d { x, w, pad }, needs, "dwconv2d")
    }

    pub fn maxpool2(&mut self, x: VarId) -> Result<VarId> {
        let (v, argmax) = ops::maxpool2_forward(self.value(x))?;
        let needs = self.needs(x);
        self.push(v, Op::MaxPool2 { x, argmax }, needs, "maxpool2")
    }

    pub fn avgpool(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 1 {
            return Ok(x);
        }
        let v = ops::avgpool_forward(self.value(x), factor)?;
        let needs = self.needs(x);
        self.push(v, Op::AvgPool { x, factor }, needs, "avgpool")
    }

    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 1 {
            return Ok(x);
        }
        let v = ops::upsample_nearest_forward(self.value(x), factor)?;
        let needs = self.needs(x);
        self.push(v, Op::Upsample { x, factor }, needs, "upsample_nearest")
    }

    pub fn nchw_to_tokens(&mut self, x: VarId) -> Result<VarId> {
        let v = ops::nchw_to_tokens(self.value(x))?;
        let needs = self.needs(x);
        self.push(v, Op::NchwToTokens(x), needs, "nchw_to_tokens")
    }

    pub fn tokens_to_nchw(&mut self, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let v = ops::tokens_to_nchw(self.value(x), h, w)?;
        let needs = self.needs(x);
        self.push(v, Op::TokensToNchw(x), needs, "tokens_to_nchw")
    }

    // ---- backward ----

    fn accumulate(grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Populate gradients of every tracked node reachable from `loss`.
    /// Repeated calls accumulate into existing gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::InvalidArg(
                "backward: loss is detached from every tracked input".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            // keep the node's own gradient for inspection
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.needs_grad, g) {
                match &mut node.grad {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Detach => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    Self::accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<f64> = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    Self::accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                if self.needs(*a) {
                    let d: Vec<f64> = gd.iter().zip(bd).map(|(g, y)| g / y).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    Self::accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
            }
            Op::MulScalar(a, s) => {
                if self.needs(*a) {
                    let d: Vec<f64> = gd.iter().map(|g| g * s).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = node.value.data();
                    let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let d: Vec<f64> = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Ln(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let d: Vec<f64> = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let s = gd[0] / t.numel() as f64;
                    Self::accumulate(grads, *a, Tensor::full(t.shape(), s));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    Self::accumulate(grads, *a, Tensor::full(t.shape(), gd[0]));
                }
            }
            Op::MeanPerItem(a) => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let n = t.shape()[0];
                    let per = t.numel() / n;
                    let mut d = vec![0.0; t.numel()];
                    for (i, v) in d.iter_mut().enumerate() {
                        *v = gd[i / per] / per as f64;
                    }
                    Self::accumulate(grads, *a, Tensor::new(t.shape().to_vec(), d)?);
                }
            }
            Op::DivByItem(a, s) => {
                let ta = self.value(*a);
                let n = ta.shape()[0];
                let per = ta.numel() / n;
                let sd = self.value(*s).data();
                if self.needs(*a) {
                    let d: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g / sd[i / per]).collect();
                    Self::accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.needs(*s) {
                    let ad = ta.data();
                    let mut d = vec![0.0; n];
                    for i in 0..ta.numel() {
                        let ni = i / per;
                        d[ni] -= gd[i] * ad[i] / (sd[ni] * sd[ni]);
                    }
                    Self::accumulate(grads, *s, Tensor::new(vec![n], d)?);
                }
            }
            Op::MulByItem(a, s) => {
                let ta = self.value(*a);
                let n = ta.shape()[0];
                let per = ta.numel() / n;
                let sd = self.value(*s).data();
                if self.needs(*a) {
                    let d: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * sd[i / per]).collect();
                    Self::accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.needs(*s) {
                    let ad = ta.data();
                    let mut d = vec![0.0; n];
                    for i in 0..ta.numel() {
                        d[i / per] += gd[i] * ad[i];
                    }
                    Self::accumulate(grads, *s, Tensor::new(vec![n], d)?);
                }
            }
            Op::MulBroadcastChannel(x, w) => {
                let (n, c, h, wid) = self.value(*x).dims4()?;
                let hw = h * wid;
                if self.needs(*x) {
                    let wd = self.value(*w).data();
                    let mut d = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(ni * c + ch) * hw + p] = gd[(ni * c + ch) * hw + p] * wd[ni * hw + p];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new(vec![n, c, h, wid], d)?);
                }
                if self.needs(*w) {
                    let xd = self.value(*x).data();
                    let mut d = vec![0.0; n * hw];
                    for ni in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[ni * hw + p] += gd[(ni * c + ch) * hw + p] * xd[(ni * c + ch) * hw + p];
                            }
                        }
                    }
                    Self::accumulate(grads, *w, Tensor::new(vec![n, 1, h, wid], d)?);
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.needs(*a) {
                    let (n, c, h, w) = self.value(*a).dims4()?;
                    let hw = h * w;
                    let mut d = vec![0.0; n * c * hw];
                    for i in 0..n * c {
                        let s = gd[i] / hw as f64;
                        for p in 0..hw {
                            d[i * hw + p] = s;
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new(vec![n, c, h, w], d)?);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let shaped = g.clone().reshaped(self.value(*a).shape().to_vec())?;
                    Self::accumulate(grads, *a, shaped);
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, ctotal, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut coff = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut d = vec![0.0; n * pc * hw];
                        for ni in 0..n {
                            for ch in 0..pc {
                                let src = (ni * ctotal + coff + ch) * hw;
                                let dst = (ni * pc + ch) * hw;
                                d[dst..dst + hw].copy_from_slice(&gd[src..src + hw]);
                            }
                        }
                        Self::accumulate(grads, p, Tensor::new(vec![n, pc, h, w], d)?);
                    }
                    coff += pc;
                }
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), g)?;
                if self.needs(*a) {
                    Self::accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::TransposeLast2(a) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, ops::transpose_last2(g)?);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, ops::softmax_lastdim_backward(&node.value, g)?);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, g)?;
                if self.needs(*x) {
                    Self::accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    Self::accumulate(grads, *w, gw);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::DwConv2d { x, w, pad } => {
                let (gx, gw) = ops::dwconv2d_backward(self.value(*x), self.value(*w), *pad, g)?;
                if self.needs(*x) {
                    Self::accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    Self::accumulate(grads, *w, gw);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let mut d = vec![0.0; t.numel()];
                    for (gi, &src) in gd.iter().zip(argmax) {
                        d[src] += gi;
                    }
                    Self::accumulate(grads, *x, Tensor::new(t.shape().to_vec(), d)?);
                }
            }
            Op::AvgPool { x, factor } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, ops::avgpool_backward(self.value(*x).shape(), *factor, g)?);
                }
            }
            Op::Upsample { x, factor } => {
                if self.needs(*x) {
                    Self::accumulate(
                        grads,
                        *x,
                        ops::upsample_nearest_backward(self.value(*x).shape(), *factor, g)?,
                    );
                }
            }
            Op::NchwToTokens(x) => {
                if self.needs(*x) {
                    let (_, _, h, w) = self.value(*x).dims4()?;
                    Self::accumulate(grads, *x, ops::tokens_to_nchw(g, h, w)?);
                }
            }
            Op::TokensToNchw(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, ops::nchw_to_tokens(g)?);
                }
            }
        }
        Ok(())
    }

    /// Gradients of all parameter leaves, summed per parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for node in &self.nodes {
            if let (Op::Param(pid), Some(g)) = (&node.op, &node.grad) {
                match out.iter_mut().find(|(id, _)| id == pid) {
                    Some((_, acc)) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => out.push((*pid, g.clone())),
                }
            }
        }
        out
    }
}

//! Reverse-mode compute record over the kernel set.
//!
//! A [`Tape`] records every op executed during one forward pass together
//! with the values its adjoint needs; [`Tape::backward`] replays the record
//! in exact reverse order.

use super::kernels::{self, Partition};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered parameter set with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `scale * grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

/// Per-parameter gradients from one backward pass, indexed by [`ParamId`];
/// `None` means the parameter was not reachable from the loss.
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Node handle inside a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv3d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Pointwise { x: Var, w: Var, b: Option<Var> },
    Pool { x: Var, part: Partition },
    Upsample { x: Var },
    Crop { x: Var },
    Concat { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MaskMul { x: Var, mask: Vec<f64> },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    Reshape { x: Var },
    SelectColumns { x: Var, idx: Vec<usize> },
    Scatter { x: Var, sites: Vec<usize> },
    QuantizeSte { x: Var },
    VqLoss { x: Var, codebook: Var, codes: Vec<usize>, beta: f64, denom: f64 },
    DiceLoss { pred: Var, target: Vec<f64>, eps: f64 },
    BceLoss { pred: Var, target: Vec<f64>, delta: f64 },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    leaves: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Grads {
    /// Gradient of a leaf created with [`Tape::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Treatment of stop-gradient operands (`sg(·)` in the STE and VQ terms)
/// and of ReLU activation patterns.
#[derive(Debug, Default)]
enum StopGrad {
    #[default]
    Live,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    stop_grad: StopGrad,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            stop_grad: StopGrad::Live,
        }
    }

    /// Keeps a copy of every stop-gradient operand and ReLU gate evaluated
    /// from now on.
    pub fn record_stop_gradients(&mut self) {
        self.stop_grad = StopGrad::Record(Vec::new());
    }

    /// Operands kept since [`Tape::record_stop_gradients`], in evaluation order.
    pub fn take_stop_gradients(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.stop_grad) {
            StopGrad::Record(v) => v,
            _ => Vec::new(),
        }
    }

    /// Evaluates stop-gradient operands as the given constants instead of
    /// from the current inputs. Finite differences then see the same
    /// surrogate function the adjoints differentiate.
    pub fn replay_stop_gradients(&mut self, values: Vec<Tensor>) {
        self.stop_grad = StopGrad::Replay(values, 0);
    }

    /// `live` unless a replay is active; records it when recording.
    fn stop_gradient(&mut self, live: Tensor) -> Result<Tensor> {
        match &mut self.stop_grad {
            StopGrad::Live => Ok(live),
            StopGrad::Record(v) => {
                v.push(live.clone());
                Ok(live)
            }
            StopGrad::Replay(v, i) => {
                let t = v.get(*i).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("stop-gradient replay exhausted after {i} operands"))
                })?;
                *i += 1;
                if t.shape() != live.shape() {
                    return Err(Error::Shape(format!(
                        "replayed stop-gradient operand {:?} vs live {:?}",
                        t.shape(),
                        live.shape()
                    )));
                }
                Ok(t)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = kernels::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Conv3d { x, w, b, stride }, &ins))
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::pointwise(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Pointwise { x, w, b }, &ins))
    }

    pub fn avg_pool(&mut self, x: Var, cell: [usize; 3]) -> Result<Var> {
        if cell.contains(&0) {
            return Err(Error::InvalidArgument("zero-size pooling cell".into()));
        }
        let part = Partition::replicated(self.value(x).spatial(), cell);
        self.partition_pool(x, part)
    }

    pub fn partition_pool(&mut self, x: Var, part: Partition) -> Result<Var> {
        let y = kernels::partition_pool(self.value(x), &part)?;
        Ok(self.push(y, Op::Pool { x, part }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var, out: Dims) -> Result<Var> {
        let y = kernels::upsample2_trilinear(self.value(x), out)?;
        Ok(self.push(y, Op::Upsample { x }, &[x]))
    }

    /// Keeps the leading `out` corner of every channel.
    pub fn crop(&mut self, x: Var, out: Dims) -> Result<Var> {
        let xv = self.value(x);
        let dims = xv.spatial();
        if out.d > dims.d || out.h > dims.h || out.w > dims.w {
            return Err(Error::Shape(format!("cannot crop {dims} to {out}")));
        }
        if out == dims {
            return Ok(x);
        }
        let c = xv.channels();
        let mut y = Tensor::zeros(&Tensor::feature_shape(c, out));
        for ch in 0..c {
            let src = xv.channel(ch);
            for d in 0..out.d {
                for h in 0..out.h {
                    let o = out.index(d, h, 0) + ch * out.len();
                    let i = dims.index(d, h, 0);
                    y.data_mut()[o..o + out.w].copy_from_slice(&src[i..i + out.w]);
                }
            }
        }
        Ok(self.push(y, Op::Crop { x }, &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        if matches!(self.stop_grad, StopGrad::Live) {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            // the active pattern is a branch decision, held fixed like sg(·)
            let gate = Tensor::new(y.shape(), y.data().iter().map(|&v| f64::from(v > 0.0)).collect()).expect("same shape");
            let gate = self.stop_gradient(gate).expect("relu gate replay out of step with the recorded graph");
            y.data_mut().iter_mut().zip(gate.data()).for_each(|(v, g)| *v *= g);
        }
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(y, Op::Scale { x, c }, &[x])
    }

    /// Multiplies every channel of a feature map by a constant spatial mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let plane = xv.len() / xv.channels();
        if mask.len() != plane {
            return Err(Error::Shape(format!(
                "mask of {} sites for {plane}-site feature map",
                mask.len()
            )));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_exact_mut(plane) {
            for (v, m) in row.iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        Ok(self.push(y, Op::MaskMul { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("weighted_sum expects scalar terms".into()));
            }
            acc += w * self.value(v).item();
        }
        let ins: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &ins,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// Picks columns of a rank-2 `(C, n)` tensor.
    pub fn select_columns(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Shape(format!("select_columns on rank {}", xv.rank())));
        }
        let (c, n) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("column {bad} out of {n}")));
        }
        let k = idx.len();
        let mut data = vec![0.0; c * k];
        for ch in 0..c {
            for (j, &i) in idx.iter().enumerate() {
                data[ch * k + j] = xv.data()[ch * n + i];
            }
        }
        let y = Tensor::new(&[c, k], data)?;
        Ok(self.push(
            y,
            Op::SelectColumns {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Places column `j` of a `(C, k)` tensor at flat site `sites[j]` of a
    /// zero `(C, D, H, W)` grid.
    pub fn scatter(&mut self, x: Var, dims: Dims, sites: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[1] != sites.len() {
            return Err(Error::Shape(format!(
                "scatter of {:?} onto {} sites",
                xv.shape(),
                sites.len()
            )));
        }
        let plane = dims.len();
        if let Some(&bad) = sites.iter().find(|&&s| s >= plane) {
            return Err(Error::InvalidArgument(format!("site {bad} outside grid {dims}")));
        }
        let (c, k) = (xv.shape()[0], sites.len());
        let mut y = Tensor::zeros(&Tensor::feature_shape(c, dims));
        for ch in 0..c {
            for (j, &s) in sites.iter().enumerate() {
                y.data_mut()[ch * plane + s] = xv.data()[ch * k + j];
            }
        }
        Ok(self.push(
            y,
            Op::Scatter {
                x,
                sites: sites.to_vec(),
            },
            &[x],
        ))
    }

    /// Replaces each column of `x (C, n)` by its assigned codebook row, as
    /// `x + sg(c − x)`; the adjoint copies the downstream gradient to `x`
    /// unchanged.
    pub fn quantize_ste(&mut self, x: Var, codebook: Var, codes: &[usize]) -> Result<Var> {
        let xv = self.value(x).clone();
        let gathered = self.gather_rows(x, codebook, codes)?;
        let offset: Vec<f64> = gathered.data().iter().zip(xv.data()).map(|(c, x)| c - x).collect();
        let replaying = matches!(self.stop_grad, StopGrad::Replay(..));
        let offset = self.stop_gradient(Tensor::new(xv.shape(), offset)?)?;
        // Outside a replay the rows are returned as is, bit for bit.
        let y = if replaying {
            Tensor::new(xv.shape(), xv.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect())?
        } else {
            gathered
        };
        Ok(self.push(y, Op::QuantizeSte { x }, &[x]))
    }

    /// Codebook rows `codes[j]` laid out as columns of a `(C, n)` tensor.
    fn gather_rows(&self, x: Var, codebook: Var, codes: &[usize]) -> Result<Tensor> {
        let (xv, cb) = (self.value(x), self.value(codebook));
        check_codes(xv, cb, codes)?;
        let (c, n) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![0.0; c * n];
        for (j, &k) in codes.iter().enumerate() {
            for ch in 0..c {
                data[ch * n + j] = cb.data()[k * c + ch];
            }
        }
        Tensor::new(&[c, n], data)
    }

    /// `(1/denom) Σ_j ‖sg(x_j) − c_k‖² + beta ‖x_j − sg(c_k)‖²` with
    /// `k = codes[j]`. The codebook receives the gradient of the embedding
    /// term only, `x` that of the commitment term only.
    pub fn vq_loss(&mut self, x: Var, codebook: Var, codes: &[usize], beta: f64, denom: f64) -> Result<Var> {
        let gathered = self.gather_rows(x, codebook, codes)?;
        let xv = self.value(x).clone();
        let x_sg = self.stop_gradient(xv.clone())?;
        let c_sg = self.stop_gradient(gathered.clone())?;
        let d2 = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum() };
        let y = Tensor::scalar((d2(&x_sg, &gathered) + beta * d2(&xv, &c_sg)) / denom);
        Ok(self.push(
            y,
            Op::VqLoss {
                x,
                codebook,
                codes: codes.to_vec(),
                beta,
                denom,
            },
            &[x, codebook],
        ))
    }

    /// Soft Dice loss `1 − (2Σyp + ε)/(Σy + Σp + ε)`.
    pub fn dice_loss(&mut self, pred: Var, target: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::Shape(format!(
                "dice: {} predictions vs {} labels",
                p.len(),
                target.len()
            )));
        }
        let (inter, sy, sp) = dice_sums(p.data(), target);
        let y = Tensor::scalar(1.0 - (2.0 * inter + eps) / (sy + sp + eps));
        Ok(self.push(
            y,
            Op::DiceLoss {
                pred,
                target: target.to_vec(),
                eps,
            },
            &[pred],
        ))
    }

    /// Mean binary cross-entropy with predictions clamped to `[δ, 1−δ]`.
    pub fn bce_loss(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::Shape(format!(
                "bce: {} predictions vs {} labels",
                p.len(),
                target.len()
            )));
        }
        let n = p.len() as f64;
        let mut acc = 0.0;
        for (&pi, &yi) in p.data().iter().zip(target) {
            let q = pi.clamp(delta, 1.0 - delta);
            acc += yi * q.ln() + (1.0 - yi) * (1.0 - q).ln();
        }
        let y = Tensor::scalar(-acc / n);
        Ok(self.push(
            y,
            Op::BceLoss {
                pred,
                target: target.to_vec(),
                delta,
            },
            &[pred],
        ))
    }

    /// Replays the record in reverse from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = vec![None; self.store.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => params[id.0] = Some(g),
                op => self.adjoint(op, Var(i), &g, &mut grads)?,
            }
        }
        Ok(Grads {
            leaves,
            params: ParamGrads(params),
        })
    }

    fn adjoint(&self, op: &Op, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv3d { x, w, b, stride } => {
                let cg = kernels::conv3d_backward(self.value(*x), self.value(*w), *stride, g, self.needs(*x))?;
                if let Some(gx) = cg.x {
                    acc(*x, gx);
                }
                acc(*w, cg.w);
                if let Some(b) = b {
                    acc(*b, cg.b);
                }
            }
            Op::Pointwise { x, w, b } => {
                let (gx, gw, gb) = kernels::pointwise_backward(self.value(*x), self.value(*w), g, self.needs(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if self.needs(*w) {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Pool { x, part } => {
                acc(*x, kernels::partition_pool_backward(self.value(*x).shape(), part, g));
            }
            Op::Upsample { x } => {
                acc(*x, kernels::upsample2_trilinear_backward(self.value(*x).shape(), g));
            }
            Op::Crop { x } => {
                let xv = self.value(*x);
                let (dims, out) = (xv.spatial(), g.spatial());
                let mut gx = Tensor::zeros(xv.shape());
                for ch in 0..xv.channels() {
                    for d in 0..out.d {
                        for h in 0..out.h {
                            let o = out.index(d, h, 0) + ch * out.len();
                            let i = dims.index(d, h, 0) + ch * dims.len();
                            gx.data_mut()[i..i + out.w].copy_from_slice(&g.data()[o..o + out.w]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                acc(*a, Tensor::new(self.value(*a).shape(), g.data()[..na].to_vec())?);
                acc(*b, Tensor::new(self.value(*b).shape(), g.data()[na..].to_vec())?);
            }
            Op::Relu { x } => {
                let mut gx = g.clone();
                for (d, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, gx);
            }
            Op::Sigmoid { x } => {
                let mut gx = g.clone();
                for (d, &s) in gx.data_mut().iter_mut().zip(self.value(out).data()) {
                    *d *= s * (1.0 - s);
                }
                acc(*x, gx);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let mut ga = g.clone();
                for (d, &v) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= v;
                }
                let mut gb = g.clone();
                for (d, &v) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= v;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale { x, c } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|d| *d *= c);
                acc(*x, gx);
            }
            Op::MaskMul { x, mask } => {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_exact_mut(mask.len()) {
                    for (d, m) in row.iter_mut().zip(mask) {
                        *d *= m;
                    }
                }
                acc(*x, gx);
            }
            Op::Sum { x } => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.item()));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    acc(v, Tensor::scalar(w * g.item()));
                }
            }
            Op::Reshape { x } => {
                acc(*x, g.clone().reshaped(self.value(*x).shape())?);
            }
            Op::SelectColumns { x, idx } => {
                let xs = self.value(*x).shape();
                let (c, n, k) = (xs[0], xs[1], idx.len());
                let mut gx = Tensor::zeros(xs);
                for ch in 0..c {
                    for (j, &i) in idx.iter().enumerate() {
                        gx.data_mut()[ch * n + i] += g.data()[ch * k + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Scatter { x, sites } => {
                let xs = self.value(*x).shape();
                let (c, k) = (xs[0], xs[1]);
                let plane = g.len() / c;
                let mut gx = Tensor::zeros(xs);
                for ch in 0..c {
                    for (j, &s) in sites.iter().enumerate() {
                        gx.data_mut()[ch * k + j] = g.data()[ch * plane + s];
                    }
                }
                acc(*x, gx);
            }
            Op::QuantizeSte { x } => acc(*x, g.clone()),
            Op::VqLoss {
                x,
                codebook,
                codes,
                beta,
                denom,
            } => {
                let (xv, cb) = (self.value(*x), self.value(*codebook));
                let (c, n) = (xv.shape()[0], xv.shape()[1]);
                let s = g.item() * 2.0 / denom;
                let mut gx = Tensor::zeros(xv.shape());
                let mut gc = Tensor::zeros(cb.shape());
                for (j, &k) in codes.iter().enumerate() {
                    for ch in 0..c {
                        let diff = xv.data()[ch * n + j] - cb.data()[k * c + ch];
                        gx.data_mut()[ch * n + j] += s * beta * diff;
                        gc.data_mut()[k * c + ch] -= s * diff;
                    }
                }
                acc(*x, gx);
                acc(*codebook, gc);
            }
            Op::DiceLoss { pred, target, eps } => {
                let p = self.value(*pred).data();
                let (inter, sy, sp) = dice_sums(p, target);
                let den = sy + sp + eps;
                let num = 2.0 * inter + eps;
                let gs = g.item();
                let data = target
                    .iter()
                    .map(|&y| -gs * (2.0 * y * den - num) / (den * den))
                    .collect();
                acc(*pred, Tensor::new(self.value(*pred).shape(), data)?);
            }
            Op::BceLoss { pred, target, delta } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let gs = g.item();
                let data = p
                    .iter()
                    .zip(target)
                    .map(|(&pi, &y)| {
                        if pi < *delta || pi > 1.0 - delta {
                            0.0
                        } else {
                            -gs * (y / pi - (1.0 - y) / (1.0 - pi)) / n
                        }
                    })
                    .collect();
                acc(*pred, Tensor::new(self.value(*pred).shape(), data)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn check_codes(x: &Tensor, cb: &Tensor, codes: &[usize]) -> Result<()> {
    if x.rank() != 2 || cb.rank() != 2 || x.shape()[0] != cb.shape()[1] {
        return Err(Error::Shape(format!(
            "tokens {:?} vs codebook {:?}",
            x.shape(),
            cb.shape()
        )));
    }
    if codes.len() != x.shape()[1] {
        return Err(Error::Shape(format!(
            "{} codes for {} tokens",
            codes.len(),
            x.shape()[1]
        )));
    }
    if let Some(&bad) = codes.iter().find(|&&k| k >= cb.shape()[0]) {
        return Err(Error::InvalidArgument(format!("code {bad} outside codebook")));
    }
    Ok(())
}

fn dice_sums(p: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sy = 0.0;
    let mut sp = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        inter += pi * yi;
        sy += yi;
        sp += pi;
    }
    (inter, sy, sp)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

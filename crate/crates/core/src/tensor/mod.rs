//! A small reverse-mode autodiff tape over `ndarray` tensors (NCHW layout).
//!
//! The tape is rebuilt every forward pass: leaves are pushed first (inputs and
//! parameters), ops append nodes, and `backward` walks the arena in reverse.
//! Only the ops this detector needs are implemented; losses plug in through
//! [`CustomOp`] so the loss math lives next to its oracles, not here.

mod conv;

pub use conv::conv_out_dim;

use ndarray::{Array1, Array4, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// An operation with caller-supplied forward/backward, used for loss heads.
pub trait CustomOp<F: Scalar>: std::fmt::Debug + Send {
    fn forward(&self, inputs: &[&ArrayD<F>]) -> Result<ArrayD<F>>;
    /// Returns one gradient per input, same shapes as the inputs.
    fn backward(
        &self,
        inputs: &[&ArrayD<F>],
        output: &ArrayD<F>,
        grad_out: &ArrayD<F>,
    ) -> Result<Vec<ArrayD<F>>>;
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf { requires_grad: bool },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    /// feat (N,C,h,w) * att (N,1,h,w), att broadcast over channels.
    MulAttention { feat: NodeId, att: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    MaxPool2 { x: NodeId },
    AvgPool { x: NodeId, k: usize },
    UpsampleBilinear { x: NodeId, th: usize, tw: usize },
    WeightedSum { terms: Vec<(NodeId, F)> },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp<F>> },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::Relu { x } | Op::Sigmoid { x } | Op::Scale { x, .. } => self.needs(*x),
            Op::Add { a, b } => self.needs(*a) || self.needs(*b),
            Op::MulAttention { feat, att } => self.needs(*feat) || self.needs(*att),
            Op::Conv2d { x, w, b, .. } => {
                self.needs(*x) || self.needs(*w) || b.map(|b| self.needs(b)).unwrap_or(false)
            }
            Op::InstanceNorm { x, gamma, beta, .. } => {
                self.needs(*x) || self.needs(*gamma) || self.needs(*beta)
            }
            Op::MaxPool2 { x } | Op::AvgPool { x, .. } | Op::UpsampleBilinear { x, .. } => {
                self.needs(*x)
            }
            Op::WeightedSum { terms } => terms.iter().any(|(id, _)| self.needs(*id)),
            Op::Custom { inputs, .. } => inputs.iter().any(|id| self.needs(*id)),
        };
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf { requires_grad })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.push(v, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let v = self.value(x).mapv(|v| v * c);
        self.push(v, Op::Scale { x, c })
    }

    /// Multiply every channel of `feat` by the single-channel map `att`.
    pub fn mul_attention(&mut self, feat: NodeId, att: NodeId) -> Result<NodeId> {
        let f = as4(self.value(feat))?;
        let a = as4(self.value(att))?;
        let (n, _c, h, w) = f.dim();
        if a.dim() != (n, 1, h, w) {
            return Err(Error::Shape(format!(
                "attention map {:?} does not match feature map {:?}",
                a.dim(),
                f.dim()
            )));
        }
        let mut out = f.to_owned();
        for i in 0..n {
            let plane = a.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), 0);
            for mut ch in out.index_axis_mut(Axis(0), i).outer_iter_mut() {
                ch *= &plane;
            }
        }
        Ok(self.push(out.into_dyn(), Op::MulAttention { feat, att }))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xv = as4(self.value(x))?;
        let wv = as4(self.value(w))?;
        let bias = match b {
            Some(bid) => Some(
                self.value(bid)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|e| Error::Shape(e.to_string()))?
                    .to_owned(),
            ),
            None => None,
        };
        let out = conv::conv2d_forward(&xv, &wv, bias.as_ref(), stride, pad)?;
        Ok(self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Per-sample per-channel normalization over the spatial dims, with affine.
    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = as4(self.value(x))?;
        let (n, c, h, w) = xv.dim();
        let g = self.value(gamma);
        let bt = self.value(beta);
        if g.len() != c || bt.len() != c {
            return Err(Error::Shape(format!(
                "instance norm affine length {} vs {} channels",
                g.len(),
                c
            )));
        }
        let epsf = F::of(eps);
        let m = F::of((h * w) as f64);
        let mut out = Array4::<F>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.slice(ndarray::s![i, ch, .., ..]);
                let mean = plane.sum() / m;
                let var = plane.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / m;
                let inv = (var + epsf).sqrt().recip();
                let gc = g[[ch]];
                let bc = bt[[ch]];
                let mut dst = out.slice_mut(ndarray::s![i, ch, .., ..]);
                dst.assign(&plane.mapv(|v| (v - mean) * inv * gc + bc));
            }
        }
        Ok(self.push(out.into_dyn(), Op::InstanceNorm { x, gamma, beta, eps }))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as4(self.value(x))?;
        let (n, c, h, w) = xv.dim();
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("max_pool2 on {h}x{w} map")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<F>::zeros((n, c, ho, wo));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = xv[[i, ch, 2 * oy, 2 * ox]];
                        for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                            let v = xv[[i, ch, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                            }
                        }
                        out[[i, ch, oy, ox]] = best;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::MaxPool2 { x }))
    }

    /// Non-overlapping k x k mean pooling; spatial dims must divide by k.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = as4(self.value(x))?;
        let (n, c, h, w) = xv.dim();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("avg_pool{k} on {h}x{w} map")));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = F::of(1.0 / (k * k) as f64);
        let mut out = Array4::<F>::zeros((n, c, ho, wo));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let block = xv.slice(ndarray::s![
                            i,
                            ch,
                            k * oy..k * (oy + 1),
                            k * ox..k * (ox + 1)
                        ]);
                        out[[i, ch, oy, ox]] = block.sum() * inv;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::AvgPool { x, k }))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let xv = as4(self.value(x))?;
        let (n, c, h, w) = xv.dim();
        if th == 0 || tw == 0 {
            return Err(Error::Shape("upsample to empty target".into()));
        }
        let ys = lerp_axis(h, th);
        let xs = lerp_axis(w, tw);
        let mut out = Array4::<F>::zeros((n, c, th, tw));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..th {
                    let (y0, y1, ty) = ys[oy];
                    let (ty, sy) = (F::of(ty), F::of(1.0 - ty));
                    for ox in 0..tw {
                        let (x0, x1, tx) = xs[ox];
                        let (txf, sx) = (F::of(tx), F::of(1.0 - tx));
                        let v = xv[[i, ch, y0, x0]] * sy * sx
                            + xv[[i, ch, y0, x1]] * sy * txf
                            + xv[[i, ch, y1, x0]] * ty * sx
                            + xv[[i, ch, y1, x1]] * ty * txf;
                        out[[i, ch, oy, ox]] = v;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::UpsampleBilinear { x, th, tw }))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, F)]) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum of nothing".into()))?;
        let mut acc = ArrayD::<F>::zeros(self.value(first.0).raw_dim());
        for &(id, wgt) in terms {
            if self.value(id).shape() != acc.shape() {
                return Err(Error::Shape("weighted_sum term shapes differ".into()));
            }
            acc.zip_mut_with(self.value(id), |a, &v| *a += v * wgt);
        }
        Ok(self.push(acc, Op::WeightedSum { terms: terms.to_vec() }))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<F>>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&ArrayD<F>> = inputs.iter().map(|&id| self.value(id)).collect();
        let out = op.forward(&vals)?;
        Ok(self.push(out, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Reverse pass from a scalar node. Gradients land on every node that
    /// (transitively) depends on a `requires_grad` leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(
                "backward root must be a scalar".into(),
            ));
        }
        let shape = self.value(root).raw_dim();
        self.nodes[root.0].grad = Some(ArrayD::from_elem(shape, F::one()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = {
                let node = &self.nodes[i];
                let g = node.grad.as_ref().unwrap();
                self.op_backward(&node.op, &node.value, g)?
            };
            for (pid, c) in contributions {
                self.accumulate(pid, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, c: ArrayD<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &c,
            slot @ None => *slot = Some(c),
        }
    }

    fn op_backward(
        &self,
        op: &Op<F>,
        value: &ArrayD<F>,
        g: &ArrayD<F>,
    ) -> Result<Vec<(NodeId, ArrayD<F>)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf { .. } => {}
            Op::Relu { x } => {
                let mut dx = g.clone();
                dx.zip_mut_with(self.value(*x), |d, &v| {
                    if v <= F::zero() {
                        *d = F::zero();
                    }
                });
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                dx.zip_mut_with(value, |d, &y| *d *= y * (F::one() - y));
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale { x, c } => {
                out.push((*x, g.mapv(|v| v * *c)));
            }
            Op::MulAttention { feat, att } => {
                let gv = as4(g)?;
                let fv = as4(self.value(*feat))?;
                let av = as4(self.value(*att))?;
                let (n, c, h, w) = fv.dim();
                if self.needs(*feat) {
                    let mut dfeat = Array4::<F>::zeros((n, c, h, w));
                    for i in 0..n {
                        let plane = av.slice(ndarray::s![i, 0, .., ..]);
                        for ch in 0..c {
                            let mut dst = dfeat.slice_mut(ndarray::s![i, ch, .., ..]);
                            dst.assign(&gv.slice(ndarray::s![i, ch, .., ..]));
                            dst *= &plane;
                        }
                    }
                    out.push((*feat, dfeat.into_dyn()));
                }
                if self.needs(*att) {
                    let mut datt = Array4::<F>::zeros((n, 1, h, w));
                    for i in 0..n {
                        let mut dst = datt.slice_mut(ndarray::s![i, 0, .., ..]);
                        for ch in 0..c {
                            let prod = &gv.slice(ndarray::s![i, ch, .., ..])
                                * &fv.slice(ndarray::s![i, ch, .., ..]);
                            dst += &prod;
                        }
                    }
                    out.push((*att, datt.into_dyn()));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let grads = conv::conv2d_backward(
                    &as4(self.value(*x))?,
                    &as4(self.value(*w))?,
                    &as4(g)?,
                    *stride,
                    *pad,
                    self.needs(*x),
                )?;
                if let Some(dx) = grads.dx {
                    out.push((*x, dx.into_dyn()));
                }
                if self.needs(*w) {
                    out.push((*w, grads.dw.into_dyn()));
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        out.push((*bid, grads.db.into_dyn()));
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let xv = as4(self.value(*x))?;
                let gv = as4(g)?;
                let gamma_v = self.value(*gamma);
                let (n, c, h, w) = xv.dim();
                let m = F::of((h * w) as f64);
                let epsf = F::of(*eps);
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                let mut dgamma = Array1::<F>::zeros(c);
                let mut dbeta = Array1::<F>::zeros(c);
                for i in 0..n {
                    for ch in 0..c {
                        let plane = xv.slice(ndarray::s![i, ch, .., ..]);
                        let gout = gv.slice(ndarray::s![i, ch, .., ..]);
                        let mean = plane.sum() / m;
                        let var =
                            plane.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / m;
                        let inv = (var + epsf).sqrt().recip();
                        let xhat = plane.mapv(|v| (v - mean) * inv);
                        dbeta[ch] += gout.sum();
                        dgamma[ch] += (&xhat * &gout).sum();
                        if self.needs(*x) {
                            let gsum = gout.sum() / m;
                            let gxsum = (&xhat * &gout).sum() / m;
                            let gc = gamma_v[[ch]] * inv;
                            let mut dst = dx.slice_mut(ndarray::s![i, ch, .., ..]);
                            ndarray::Zip::from(&mut dst)
                                .and(&gout)
                                .and(&xhat)
                                .for_each(|d, &go, &xh| *d = gc * (go - gsum - xh * gxsum));
                        }
                    }
                }
                if self.needs(*x) {
                    out.push((*x, dx.into_dyn()));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma.into_dyn()));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta.into_dyn()));
                }
            }
            Op::MaxPool2 { x } => {
                let xv = as4(self.value(*x))?;
                let gv = as4(g)?;
                let (n, c, h, w) = xv.dim();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                // first strict max in scan order, same as forward
                                let (mut by, mut bx) = (2 * oy, 2 * ox);
                                let mut best = xv[[i, ch, by, bx]];
                                for (dy, dxx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                                    let v = xv[[i, ch, 2 * oy + dy, 2 * ox + dxx]];
                                    if v > best {
                                        best = v;
                                        by = 2 * oy + dy;
                                        bx = 2 * ox + dxx;
                                    }
                                }
                                dx[[i, ch, by, bx]] += gv[[i, ch, oy, ox]];
                            }
                        }
                    }
                }
                out.push((*x, dx.into_dyn()));
            }
            Op::AvgPool { x, k } => {
                let gv = as4(g)?;
                let (n, c, ho, wo) = gv.dim();
                let inv = F::of(1.0 / (*k * *k) as f64);
                let mut dx = Array4::<F>::zeros((n, c, ho * k, wo * k));
                for i in 0..n {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gval = gv[[i, ch, oy, ox]] * inv;
                                let mut block = dx.slice_mut(ndarray::s![
                                    i,
                                    ch,
                                    k * oy..k * (oy + 1),
                                    k * ox..k * (ox + 1)
                                ]);
                                block.mapv_inplace(|v| v + gval);
                            }
                        }
                    }
                }
                out.push((*x, dx.into_dyn()));
            }
            Op::UpsampleBilinear { x, th, tw } => {
                let xv = as4(self.value(*x))?;
                let gv = as4(g)?;
                let (n, c, h, w) = xv.dim();
                let ys = lerp_axis(h, *th);
                let xs = lerp_axis(w, *tw);
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        for oy in 0..*th {
                            let (y0, y1, ty) = ys[oy];
                            let (ty, sy) = (F::of(ty), F::of(1.0 - ty));
                            for ox in 0..*tw {
                                let (x0, x1, tx) = xs[ox];
                                let (txf, sx) = (F::of(tx), F::of(1.0 - tx));
                                let gval = gv[[i, ch, oy, ox]];
                                dx[[i, ch, y0, x0]] += gval * sy * sx;
                                dx[[i, ch, y0, x1]] += gval * sy * txf;
                                dx[[i, ch, y1, x0]] += gval * ty * sx;
                                dx[[i, ch, y1, x1]] += gval * ty * txf;
                            }
                        }
                    }
                }
                out.push((*x, dx.into_dyn()));
            }
            Op::WeightedSum { terms } => {
                for &(id, wgt) in terms {
                    if self.needs(id) {
                        out.push((id, g.mapv(|v| v * wgt)));
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&ArrayD<F>> = inputs.iter().map(|&id| self.value(id)).collect();
                let grads = op.backward(&vals, value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "custom op returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&id, gr) in inputs.iter().zip(grads) {
                    if self.needs(id) {
                        out.push((id, gr));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> Result<ndarray::ArrayView4<'_, F>> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::Shape(format!("expected 4-d tensor: {e}")))
}

fn sigmoid_scalar<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        (F::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Bilinear sample positions for resizing an axis of length `src` to `dst`
/// (half-pixel-centered convention). Returns (lo index, hi index, hi weight).
fn lerp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Central-difference gradient of `f` at `x`, the oracle used by gradient tests.
pub fn numeric_gradient<F, G>(f: G, x: &ArrayD<F>, h: f64) -> ArrayD<F>
where
    F: Scalar,
    G: Fn(&ArrayD<F>) -> F,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let hf = F::of(h);
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + hf;
        let up = f(&probe);
        probe[&idx] = orig - hf;
        let down = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (up - down) / (F::of(2.0) * hf);
    }
    grad
}

/// Largest relative mismatch between an analytic and a numeric gradient.
pub fn max_relative_error<F: Scalar>(analytic: &ArrayD<F>, numeric: &ArrayD<F>) -> f64 {
    let floor = 1e-4;
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let (a, n) = (a.f64(), n.f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

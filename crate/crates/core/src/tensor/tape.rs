use rand::Rng;

use super::kernels::{self, ConvGeometry, Padding};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: S,
    },
    Silu {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<S>,
    },
    Reshape {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: S,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<S>,
    },
    Softmax {
        input: Var,
    },
    NllClamped {
        probs: Var,
        labels: Vec<usize>,
        floor: S,
    },
    SoftCrossEntropy {
        probs: Var,
        target: Tensor<S>,
        floor: S,
    },
    KlDivergence {
        probs: Var,
        target: Tensor<S>,
        floor: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Eagerly evaluated record of one forward computation.
///
/// Node ids are allocated in evaluation order, so every input id is smaller
/// than the id of the node consuming it and the backward sweep is a single
/// reverse scan.
pub struct Tape<S: Element = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Element> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Element>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

impl<S: Element> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution over an NCHW batch with `[out, in, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!("conv2d input must be NCHW, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d weights must be [out, in, kh, kw], got {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d input channels (axis 1 of input) = {} but weight in_ch (axis 1 of weights) = {}",
                xs[1], ws[1]
            )));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::dim(format!(
                "conv2d bias shape {:?} does not match out_ch (axis 0 of weights) = {}",
                self.shape(bias),
                ws[0]
            )));
        }
        let geom = ConvGeometry::new((xs[2], xs[3]), (ws[2], ws[3]), stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            xs[0],
            xs[1],
            self.value(weight).data(),
            self.value(bias).data(),
            ws[0],
            &geom,
        );
        let value = Tensor::new(vec![xs[0], ws[0], geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!("maxpool2d input must be NCHW, got {xs:?}")));
        }
        let geom = ConvGeometry::new((xs[2], xs[3]), pool, stride, padding)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), xs[0], xs[1], &geom);
        let value = Tensor::new(vec![xs[0], xs[1], geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    /// Affine map `input[N, F] * weight[F, C] + bias[C]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "dense: input {xs:?} (axis 1) does not match weights {ws:?} (axis 0)"
            )));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(Error::dim(format!(
                "dense: bias {:?} does not match weights axis 1 = {}",
                self.shape(bias),
                ws[1]
            )));
        }
        let mut out = kernels::matmul(
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            xs[0],
            xs[1],
            ws[1],
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(ws[1]) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let value = Tensor::new(vec![xs[0], ws[1]], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }))
    }

    /// `max(x, slope * x)` elementwise; `slope = 0` gives ReLU.
    pub fn leaky_relu(&mut self, input: Var, slope: S) -> Result<Var> {
        if slope < S::zero() {
            return Err(Error::contract("leaky_relu slope must be >= 0"));
        }
        let value = self
            .value(input)
            .map(|x| if x > S::zero() { x } else { slope * x });
        Ok(self.push(value, Op::LeakyRelu { input, slope }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, S::zero())
    }

    /// `x * sigmoid(x)` elementwise.
    pub fn silu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x / (S::one() + (-x).exp()));
        self.push(value, Op::Silu { input })
    }

    /// Inverted dropout: in training each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<S> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// `[N, C, H, W] -> [N, C*H*W]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool needs NCHW, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let inv = S::of(1.0 / plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input })
    }

    /// `sum(input * weights)` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<S>) -> Result<Var> {
        if self.shape(input) != weights.shape() {
            return Err(Error::dim(format!(
                "weighted_sum: shapes {:?} and {:?} differ",
                self.shape(input),
                weights.shape()
            )));
        }
        let total = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input, weights }))
    }

    /// Row-wise softmax of `[N, C]` logits, stabilised by max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::dim(format!("softmax needs [N, C], got {:?}", x.shape())));
        }
        check_finite(x, "softmax input")?;
        let value = Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), x.shape()[1]))?;
        Ok(self.push(value, Op::Softmax { input }))
    }

    /// Mean of `-ln(max(p[n, label_n], floor))` over the batch.
    pub fn nll_clamped(&mut self, probs: Var, labels: &[usize], floor: S) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 2 || p.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "nll: probs {:?} vs {} labels",
                p.shape(),
                labels.len()
            )));
        }
        let c = p.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range [0, {c})")));
        }
        let inv_n = S::of(1.0 / labels.len() as f64);
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(p.data()[i * c + l].max(floor)).ln())
            .sum();
        let value = Tensor::scalar(total * inv_n);
        Ok(self.push(
            value,
            Op::NllClamped {
                probs,
                labels: labels.to_vec(),
                floor,
            },
        ))
    }

    fn check_target(&self, probs: Var, target: &Tensor<S>, op: &str) -> Result<usize> {
        let p = self.value(probs);
        if p.rank() != 2 || p.shape() != target.shape() {
            return Err(Error::dim(format!(
                "{op}: student {:?} and target {:?} differ",
                p.shape(),
                target.shape()
            )));
        }
        Ok(p.shape()[0])
    }

    /// Mean over rows of `-sum_c t_c ln(max(p_c, floor))` against constant
    /// target distributions.
    pub fn soft_cross_entropy(&mut self, probs: Var, target: Tensor<S>, floor: S) -> Result<Var> {
        let n = self.check_target(probs, &target, "soft_cross_entropy")?;
        let total: S = self
            .value(probs)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| -t * p.max(floor).ln())
            .sum();
        let value = Tensor::scalar(total * S::of(1.0 / n as f64));
        Ok(self.push(value, Op::SoftCrossEntropy { probs, target, floor }))
    }

    /// Mean over rows of `KL(target || probs)`, both clamped at `floor`
    /// inside the logarithms; zero-probability target entries contribute 0.
    pub fn kl_divergence(&mut self, probs: Var, target: Tensor<S>, floor: S) -> Result<Var> {
        let n = self.check_target(probs, &target, "kl_divergence")?;
        let total: S = self
            .value(probs)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                if t == S::zero() {
                    S::zero()
                } else {
                    t * (t.max(floor).ln() - p.max(floor).ln())
                }
            })
            .sum();
        let value = Tensor::scalar(total * S::of(1.0 / n as f64));
        Ok(self.push(value, Op::KlDivergence { probs, target, floor }))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        let mut nodes = self.nodes;
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(node, &g, &nodes, &mut grads);
            grads[id] = Some(g);
            // Saved context is no longer needed once this node is processed.
            if !matches!(node.op, Op::Leaf) {
                nodes[id].op = Op::Leaf;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<S: Element>(grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node<S: Element>(node: &Node<S>, g: &[S], nodes: &[Node<S>], grads: &mut [Option<Vec<S>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let xs = val(*input).shape();
            let ws = val(*weight).shape();
            let (dx, dw, db) = kernels::conv2d_backward(g, cols, val(*weight).data(), xs[0], xs[1], ws[0], geom);
            accumulate(grads, *input, dx);
            accumulate(grads, *weight, dw);
            accumulate(grads, *bias, db);
        }
        Op::MaxPool2d { input, argmax } => {
            let mut dx = vec![S::zero(); val(*input).len()];
            for (&gi, &idx) in g.iter().zip(argmax) {
                dx[idx] += gi;
            }
            accumulate(grads, *input, dx);
        }
        Op::Dense { input, weight, bias } => {
            let xs = val(*input).shape();
            let ws = val(*weight).shape();
            let (n, f, c) = (xs[0], xs[1], ws[1]);
            let dx = kernels::matmul(g, false, val(*weight).data(), true, n, c, f);
            let dw = kernels::matmul(val(*input).data(), true, g, false, f, n, c);
            let mut db = vec![S::zero(); c];
            for row in g.chunks(c) {
                for (d, &r) in db.iter_mut().zip(row) {
                    *d += r;
                }
            }
            accumulate(grads, *input, dx);
            accumulate(grads, *weight, dw);
            accumulate(grads, *bias, db);
        }
        Op::LeakyRelu { input, slope } => {
            let dx = val(*input)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > S::zero() { gi } else { gi * *slope })
                .collect();
            accumulate(grads, *input, dx);
        }
        Op::Silu { input } => {
            let dx = val(*input)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| {
                    let s = S::one() / (S::one() + (-x).exp());
                    gi * s * (S::one() + x * (S::one() - s))
                })
                .collect();
            accumulate(grads, *input, dx);
        }
        Op::Dropout { input, mask } => {
            let dx = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
            accumulate(grads, *input, dx);
        }
        Op::Reshape { input } => accumulate(grads, *input, g.to_vec()),
        Op::GlobalAvgPool { input } => {
            let s = val(*input).shape();
            let plane = s[2] * s[3];
            let inv = S::of(1.0 / plane as f64);
            let mut dx = Vec::with_capacity(val(*input).len());
            for &gi in g {
                dx.extend(std::iter::repeat_n(gi * inv, plane));
            }
            accumulate(grads, *input, dx);
        }
        Op::Add { a, b } => {
            accumulate(grads, *a, g.to_vec());
            accumulate(grads, *b, g.to_vec());
        }
        Op::Mul { a, b } => {
            let da = g.iter().zip(val(*b).data()).map(|(&gi, &y)| gi * y).collect();
            let db = g.iter().zip(val(*a).data()).map(|(&gi, &x)| gi * x).collect();
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Scale { input, factor } => {
            accumulate(grads, *input, g.iter().map(|&gi| gi * *factor).collect());
        }
        Op::Sum { input } => {
            accumulate(grads, *input, vec![g[0]; val(*input).len()]);
        }
        Op::WeightedSum { input, weights } => {
            accumulate(grads, *input, weights.data().iter().map(|&w| w * g[0]).collect());
        }
        Op::Softmax { input } => {
            let p = &node.value;
            let c = p.shape()[1];
            let mut dx = vec![S::zero(); p.len()];
            for ((prow, grow), drow) in p.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let dot: S = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for ((d, &pi), &gi) in drow.iter_mut().zip(prow).zip(grow) {
                    *d = pi * (gi - dot);
                }
            }
            accumulate(grads, *input, dx);
        }
        Op::NllClamped { probs, labels, floor } => {
            let p = val(*probs);
            let c = p.shape()[1];
            let scale = g[0] * S::of(1.0 / labels.len() as f64);
            let mut dp = vec![S::zero(); p.len()];
            for (i, &l) in labels.iter().enumerate() {
                let pi = p.data()[i * c + l];
                if pi > *floor {
                    dp[i * c + l] = -scale / pi;
                }
            }
            accumulate(grads, *probs, dp);
        }
        Op::SoftCrossEntropy { probs, target, floor } | Op::KlDivergence { probs, target, floor } => {
            let p = val(*probs);
            let scale = g[0] * S::of(1.0 / p.shape()[0] as f64);
            let dp = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&pi, &t)| if pi > *floor { -scale * t / pi } else { S::zero() })
                .collect();
            accumulate(grads, *probs, dp);
        }
    }
}

/// Result of [`Tape::backward`]: gradient of the loss for every node.
pub struct Gradients<S: Element = f32> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Element> Gradients<S> {
    /// Gradient for `v`; zeros when `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Move the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn contributed(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_window_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn conv_same_stride_two_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 224, 224]));
        let w = tape.leaf(Tensor::zeros(&[64, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[64]));
        let y = tape.conv2d(x, w, b, (2, 2), Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[1, 64, 112, 112]);
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        match tape.conv2d(x, w, b, (1, 1), Padding::Valid) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("axis 1"), "{msg}"),
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn maxpool_values_and_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, (2, 2), (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_in_scan_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 7.0));
        let y = tape.maxpool2d(x, (2, 2), (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_constant_input_is_constant() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 5, 5], 0.25));
        let y = tape.maxpool2d(x, (2, 2), (1, 1), Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 5, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_window_too_large() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            tape.maxpool2d(x, (3, 3), (1, 1), Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dense_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[1.0, 1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        let w_bad = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.dense(x, w_bad, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]));
        let w = tape.leaf(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn leaky_relu_values_and_slopes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[5.0, -5.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -1.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 0.2]);
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]));
        let y = tape.silu(x);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - expected).abs() < 1e-15);
        assert!((expected - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[0.0, 0.0, 0.0, 2.0, 1.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let p = tape.value(y).data();
        for v in &p[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // e^2, e^1, e^0 normalised.
        let z = 1.0 + 1f64.exp() + 2f64.exp();
        let expected = [2f64.exp() / z, 1f64.exp() / z, 1.0 / z];
        for (a, b) in p[3..].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[3] - 0.66524).abs() < 1e-5);
        assert!((p[4] - 0.24473).abs() < 1e-5);
        assert!((p[5] - 0.09003).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn dropout_infer_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 5], |i| i as f32));
        let y = tape.dropout(x, 0.25, Mode::Infer, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::<f64>::new();
        let n = 1_000_000;
        let x = tape.leaf(Tensor::ones(&[n]));
        let y = tape.dropout(x, 0.25, Mode::Train, &mut rng).unwrap();
        let out = tape.value(y).data();
        let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((zeros - 0.25).abs() < 0.005, "zero fraction {zeros}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let unused = tape.leaf(t(&[2], &[5.0, 5.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
        assert!(!g.contributed(unused));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nll_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[1, 2], &[0.5, 0.5]));
        assert!(matches!(tape.nll_clamped(p, &[2], 1e-12), Err(Error::Contract(_))));
    }
}

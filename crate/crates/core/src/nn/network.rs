use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{self, BnBatch, ConvGeom};
use super::spec::{ArchitectureSpec, Op, Shapes};
use super::tensor::Tensor;
use super::{NnError, Result};
use crate::imaging::{resize_bilinear, to_grayscale, Image};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the classification head's initial weights.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, running statistics updated.
    Train,
    /// Running statistics in BN, no state change.
    Infer,
}

/// Parameters of one node. Conv and dense layers use `weight`/`bias`; batch
/// norm stores gamma in `weight`, beta in `bias` and its running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
    pub running_mean: Option<Tensor<S>>,
    pub running_var: Option<Tensor<S>>,
}

impl<S> LayerParams<S> {
    fn empty() -> Self {
        Self { weight: None, bias: None, running_mean: None, running_var: None }
    }
}

/// Gradients for one node, aligned with [`LayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<S> {
    pub weight: Option<Vec<S>>,
    pub bias: Option<Vec<S>>,
}

/// Activations and per-layer state kept for the backward pass.
pub struct Cache<S> {
    mode: Mode,
    input: Tensor<S>,
    outputs: Vec<Tensor<S>>,
    bn: Vec<Option<(Vec<S>, BnBatch)>>,
    pool_arg: Vec<Option<Vec<u32>>>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class_id: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    spec: ArchitectureSpec,
    shapes: Shapes,
    params: Vec<LayerParams<S>>,
    class_names: Vec<String>,
}

fn he_normal<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<S> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| S::of(normal.sample(rng))).collect()
}

fn vec_tensor<S: Scalar>(v: Vec<S>) -> Tensor<S> {
    let n = v.len();
    Tensor::new(vec![n], v).expect("length matches")
}

/// Stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> Network<S> {
    /// Builds a network with He-normal conv and hidden dense weights, a
    /// small-normal classification head, zero biases and zero beta. Gamma is
    /// one except at the end of residual branches, where it is zero.
    pub fn new(spec: ArchitectureSpec, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let outputs = {
            let (c, h, w) = *shapes.last().expect("nonempty");
            c * h * w
        };
        if class_names.len() != outputs {
            return Err(NnError::InvalidSpec(format!(
                "{} class names for {outputs} outputs",
                class_names.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.nodes.len());
        for i in 0..spec.nodes.len() {
            params.push(Self::init_layer(&spec, &shapes, i, &mut rng));
        }
        Ok(Self { spec, shapes, params, class_names })
    }

    fn init_layer(spec: &ArchitectureSpec, shapes: &Shapes, i: usize, rng: &mut ChaCha8Rng) -> LayerParams<S> {
        let (c, h, w) = spec.input_of(i).map_or(spec.input, |j| shapes[j]);
        let mut p = LayerParams::empty();
        match spec.nodes[i].op {
            Op::Conv { k, out_ch, bias, .. } => {
                let fan_in = c * k * k;
                p.weight = Some(Tensor::new(vec![out_ch, c, k, k], he_normal(rng, out_ch * fan_in, fan_in)).expect("sized"));
                if bias {
                    p.bias = Some(vec_tensor(vec![S::zero(); out_ch]));
                }
            }
            Op::FullyConnected { out } => {
                let d = c * h * w;
                let values = if spec.head_index() == Some(i) {
                    let normal = Normal::new(0.0, HEAD_INIT_STD).expect("positive std");
                    (0..out * d).map(|_| S::of(normal.sample(rng))).collect()
                } else {
                    he_normal(rng, out * d, d)
                };
                p.weight = Some(Tensor::new(vec![out, d], values).expect("sized"));
                p.bias = Some(vec_tensor(vec![S::zero(); out]));
            }
            Op::BatchNorm => {
                // the last BN of a residual branch starts at zero so each
                // block begins as the identity
                let ends_branch = spec
                    .nodes
                    .iter()
                    .enumerate()
                    .any(|(j, n)| matches!(n.op, Op::ResidualAdd { .. }) && spec.input_of(j) == Some(i));
                let gamma = if ends_branch { S::zero() } else { S::one() };
                p.weight = Some(vec_tensor(vec![gamma; c]));
                p.bias = Some(vec_tensor(vec![S::zero(); c]));
                p.running_mean = Some(vec_tensor(vec![S::zero(); c]));
                p.running_var = Some(vec_tensor(vec![S::one(); c]));
            }
            _ => {}
        }
        p
    }

    /// Assembles a network from stored parameters, checking every shape.
    pub fn from_parts(spec: ArchitectureSpec, params: Vec<LayerParams<S>>, class_names: Vec<String>) -> Result<Self> {
        let template = Self::new(spec, class_names, 0)?;
        if params.len() != template.params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter groups for {} nodes",
                params.len(),
                template.params.len()
            )));
        }
        let shape = |t: &Option<Tensor<S>>| t.as_ref().map(|t| t.shape().to_vec());
        for (i, (p, t)) in params.iter().zip(&template.params).enumerate() {
            let same = shape(&p.weight) == shape(&t.weight)
                && shape(&p.bias) == shape(&t.bias)
                && shape(&p.running_mean) == shape(&t.running_mean)
                && shape(&p.running_var) == shape(&t.running_var);
            if !same {
                return Err(NnError::ShapeMismatch(format!("parameters of node {i} do not match the spec")));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<S>] {
        &mut self.params
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.spec.input
    }

    /// Converts to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let c = |t: &Option<Tensor<S>>| t.as_ref().map(Tensor::cast);
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: c(&p.weight),
                    bias: c(&p.bias),
                    running_mean: c(&p.running_mean),
                    running_var: c(&p.running_var),
                })
                .collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Index of the node whose output is the logits (the softmax input).
    fn logits_node(&self) -> usize {
        let n = self.spec.nodes.len();
        if matches!(self.spec.nodes[n - 1].op, Op::Softmax) {
            n - 2
        } else {
            n - 1
        }
    }

    fn in_shape(&self, i: usize) -> (usize, usize, usize) {
        self.spec.input_of(i).map_or(self.spec.input, |j| self.shapes[j])
    }

    /// Forward pass without touching running statistics.
    pub fn forward_pure(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Cache<S>)> {
        self.forward_impl(x, mode, None)
    }

    /// Forward pass with every ReLU gate and max-pool winner taken from
    /// `piece` instead of recomputed. Near the point `piece` came from this
    /// is the network restricted to one linear piece, so it is smooth there
    /// and has the same gradient.
    pub(crate) fn forward_on_piece(&self, x: &Tensor<S>, mode: Mode, piece: &Cache<S>) -> Result<(Tensor<S>, Cache<S>)> {
        self.forward_impl(x, mode, Some(piece))
    }

    fn forward_impl(&self, x: &Tensor<S>, mode: Mode, piece: Option<&Cache<S>>) -> Result<(Tensor<S>, Cache<S>)> {
        let (n, c, h, w) = x.dims4()?;
        if (c, h, w) != self.spec.input || n == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "batch {:?} does not match input {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        let last = self.logits_node();
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(last + 1);
        let mut bn = Vec::with_capacity(last + 1);
        let mut pool_arg = Vec::with_capacity(last + 1);
        for i in 0..=last {
            let input = match self.spec.input_of(i) {
                Some(j) => &outputs[j],
                None => x,
            };
            let (ci, hi, wi) = self.in_shape(i);
            let (co, ho, wo) = self.shapes[i];
            let p = &self.params[i];
            let mut bn_i = None;
            let mut arg_i = None;
            let data = match self.spec.nodes[i].op {
                Op::Conv { k, stride, out_ch, pad, .. } => {
                    let g = ConvGeom { cin: ci, h: hi, w: wi, cout: out_ch, k, stride, pad, ho, wo };
                    let wt = p.weight.as_ref().expect("conv weight").data();
                    layers::conv_forward(input.data(), n, &g, wt, p.bias.as_ref().map(|b| b.data()))
                }
                Op::BatchNorm => {
                    let gamma = p.weight.as_ref().expect("gamma").data();
                    let beta = p.bias.as_ref().expect("beta").data();
                    match mode {
                        Mode::Train => {
                            let st = layers::bn_batch_stats(input.data(), n, ci, hi * wi);
                            let (y, xhat) =
                                layers::bn_apply(input.data(), n, ci, hi * wi, &st.mean, &st.var, gamma, beta, BN_EPS, true);
                            bn_i = Some((xhat, st));
                            y
                        }
                        Mode::Infer => {
                            let f = |t: &Option<Tensor<S>>| t.as_ref().expect("running stats").data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
                            let (rm, rv) = (f(&p.running_mean), f(&p.running_var));
                            let (y, xhat) = layers::bn_apply(input.data(), n, ci, hi * wi, &rm, &rv, gamma, beta, BN_EPS, true);
                            bn_i = Some((xhat, BnBatch { mean: rm, var: rv, count: n * hi * wi }));
                            y
                        }
                    }
                }
                Op::Relu => match piece {
                    Some(pc) => input
                        .data()
                        .iter()
                        .zip(pc.outputs[i].data())
                        .map(|(v, gate)| if *gate > S::zero() { *v } else { S::zero() })
                        .collect(),
                    None => input.data().iter().map(|v| v.max(S::zero())).collect(),
                },
                Op::MaxPool { k, stride, pad } => match piece.and_then(|pc| pc.pool_arg[i].as_ref()) {
                    Some(arg) => {
                        let y = arg.iter().map(|&a| input.data()[a as usize]).collect();
                        arg_i = Some(arg.clone());
                        y
                    }
                    None => {
                        let (y, arg) =
                            layers::maxpool_forward(input.data(), n, ci, (hi, wi), (k, stride, pad), (ho, wo));
                        arg_i = Some(arg);
                        y
                    }
                },
                Op::GlobalAvgPool => layers::gap_forward(input.data(), n * ci, hi * wi),
                Op::FullyConnected { out } => {
                    let wt = p.weight.as_ref().expect("fc weight").data();
                    let b = p.bias.as_ref().expect("fc bias").data();
                    layers::fc_forward(input.data(), n, ci * hi * wi, wt, b, out)
                }
                Op::ResidualAdd { from } => {
                    input.data().iter().zip(outputs[from].data()).map(|(a, b)| *a + *b).collect()
                }
                Op::Softmax => unreachable!("softmax is only the last node"),
            };
            let t = Tensor::new(vec![n, co, ho, wo], data)?;
            if !t.is_finite() {
                return Err(NnError::NonFiniteActivation { node: i });
            }
            outputs.push(t);
            bn.push(bn_i);
            pool_arg.push(arg_i);
        }
        let (co, ho, wo) = self.shapes[last];
        let logits = outputs[last].clone().reshaped(vec![n, co * ho * wo]);
        Ok((logits, Cache { mode, input: x.clone(), outputs, bn, pool_arg }))
    }

    /// Forward pass. In train mode BN running statistics are updated with
    /// factor 0.1 (unbiased batch variance).
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Cache<S>)> {
        let (logits, cache) = self.forward_pure(x, mode)?;
        if mode == Mode::Train {
            for (p, st) in self.params.iter_mut().zip(&cache.bn) {
                let Some((_, st)) = st else { continue };
                let unbias = if st.count > 1 { st.count as f64 / (st.count - 1) as f64 } else { 1.0 };
                let rm = p.running_mean.as_mut().expect("running mean").data_mut();
                for (r, m) in rm.iter_mut().zip(&st.mean) {
                    *r = S::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * m);
                }
                let rv = p.running_var.as_mut().expect("running var").data_mut();
                for (r, v) in rv.iter_mut().zip(&st.var) {
                    *r = S::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * unbias);
                }
            }
        }
        Ok((logits, cache))
    }

    /// Backpropagates `dlogits` (shape `N × K`) through the cached pass.
    pub fn backward(&self, cache: &Cache<S>, dlogits: &Tensor<S>) -> Result<Vec<LayerGrads<S>>> {
        let last = cache.outputs.len() - 1;
        let n = cache.input.shape()[0];
        if dlogits.len() != cache.outputs[last].len() {
            return Err(NnError::ShapeMismatch(format!(
                "dlogits {:?} for logits of {} values",
                dlogits.shape(),
                cache.outputs[last].len()
            )));
        }
        let mut grads: Vec<LayerGrads<S>> =
            (0..self.spec.nodes.len()).map(|_| LayerGrads { weight: None, bias: None }).collect();
        let mut douts: Vec<Option<Vec<S>>> = vec![None; last + 1];
        douts[last] = Some(dlogits.data().to_vec());
        let add_into = |slot: &mut Option<Vec<S>>, g: Vec<S>| match slot {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        };
        for i in (0..=last).rev() {
            let Some(dy) = douts[i].take() else { continue };
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient { node: i });
            }
            let src = self.spec.input_of(i);
            let input = match src {
                Some(j) => &cache.outputs[j],
                None => &cache.input,
            };
            let (ci, hi, wi) = self.in_shape(i);
            let (_, ho, wo) = self.shapes[i];
            let p = &self.params[i];
            let dx = match self.spec.nodes[i].op {
                Op::Conv { k, stride, out_ch, pad, bias } => {
                    let g = ConvGeom { cin: ci, h: hi, w: wi, cout: out_ch, k, stride, pad, ho, wo };
                    let wt = p.weight.as_ref().expect("conv weight").data();
                    let (dx, dw, db) = layers::conv_backward(input.data(), n, &g, wt, &dy, bias);
                    grads[i].weight = Some(dw);
                    grads[i].bias = bias.then_some(db);
                    dx
                }
                Op::BatchNorm => {
                    let gamma = p.weight.as_ref().expect("gamma").data();
                    let (xhat, st) = cache.bn[i].as_ref().expect("bn cache");
                    match cache.mode {
                        Mode::Train => {
                            let (dx, dg, db) = layers::bn_backward(&dy, xhat, n, ci, hi * wi, &st.var, gamma, BN_EPS);
                            grads[i].weight = Some(dg);
                            grads[i].bias = Some(db);
                            dx
                        }
                        Mode::Infer => {
                            let hw = hi * wi;
                            let mut dg = vec![S::zero(); ci];
                            let mut db = vec![S::zero(); ci];
                            let mut dx = vec![S::zero(); dy.len()];
                            for (idx, d) in dy.iter().enumerate() {
                                let ch = (idx / hw) % ci;
                                dg[ch] += *d * xhat[idx];
                                db[ch] += *d;
                                dx[idx] = *d * S::of(gamma[ch].as_f64() / (st.var[ch] + BN_EPS).sqrt());
                            }
                            grads[i].weight = Some(dg);
                            grads[i].bias = Some(db);
                            dx
                        }
                    }
                }
                Op::Relu => {
                    let y = cache.outputs[i].data();
                    dy.iter().zip(y).map(|(d, y)| if *y > S::zero() { *d } else { S::zero() }).collect()
                }
                Op::MaxPool { .. } => {
                    layers::maxpool_backward(&dy, cache.pool_arg[i].as_ref().expect("pool cache"), input.len())
                }
                Op::GlobalAvgPool => layers::gap_backward(&dy, hi * wi),
                Op::FullyConnected { out } => {
                    let wt = p.weight.as_ref().expect("fc weight").data();
                    let (dx, dw, db) = layers::fc_backward(input.data(), n, ci * hi * wi, wt, &dy, out);
                    grads[i].weight = Some(dw);
                    grads[i].bias = Some(db);
                    dx
                }
                Op::ResidualAdd { from } => {
                    add_into(&mut douts[from], dy.clone());
                    dy
                }
                Op::Softmax => unreachable!("softmax is only the last node"),
            };
            if let Some(j) = src {
                add_into(&mut douts[j], dx);
            }
        }
        Ok(grads)
    }

    /// Planar sample for `image`: resized to the input size, with gray
    /// replicated to RGB or RGB reduced to gray as the input demands.
    pub fn prepare_image(&self, image: &Image<S>) -> Result<Vec<S>> {
        let (c, h, w) = self.spec.input;
        let img = match (c, image.channels()) {
            (3, 1) => image.to_rgb(),
            (1, 3) => to_grayscale(image)?,
            (a, b) if a == b => image.clone(),
            (a, b) => {
                return Err(NnError::ShapeMismatch(format!("image has {b} channels, network expects {a}")));
            }
        };
        let img = resize_bilinear(&img, w, h)?;
        Ok(img.to_planar())
    }

    /// Infer-mode class probabilities for a batch, one row per sample.
    pub fn probabilities(&self, x: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = self.forward_pure(x, Mode::Infer)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| softmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect())
    }

    fn to_prediction(&self, probs: Vec<f64>) -> Prediction {
        let class_id = argmax(&probs);
        Prediction { label: self.class_names[class_id].clone(), class_id, probs }
    }

    /// Predicts one image (resized internally).
    pub fn predict(&self, image: &Image<S>) -> Result<Prediction> {
        let sample = self.prepare_image(image)?;
        let x = Tensor::stack(&[&sample], self.spec.input)?;
        let probs = self.probabilities(&x)?.pop().expect("one row");
        Ok(self.to_prediction(probs))
    }

    /// Predicts many images, batching `batch` at a time.
    pub fn predict_many(&self, images: &[Image<S>], batch: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let samples = chunk.iter().map(|i| self.prepare_image(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[S]> = samples.iter().map(|s| s.as_slice()).collect();
            let x = Tensor::stack(&refs, self.spec.input)?;
            out.extend(self.probabilities(&x)?.into_iter().map(|p| self.to_prediction(p)));
        }
        Ok(out)
    }

    /// Replaces the trailing dense layer with a freshly initialized one of
    /// `class_names.len()` outputs. Every other parameter is kept as is.
    pub fn replace_head(&self, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let head = self.spec.head_index().ok_or(NnError::NoHeadFound)?;
        if class_names.len() < 2 {
            return Err(NnError::InvalidSpec(format!("need at least 2 classes, got {}", class_names.len())));
        }
        let mut spec = self.spec.clone();
        spec.nodes[head].op = Op::FullyConnected { out: class_names.len() };
        let shapes = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.params.clone();
        params[head] = Self::init_layer(&spec, &shapes, head, &mut rng);
        Ok(Self { spec, shapes, params, class_names })
    }
}

//! A small 3D convolutional classifier over feature stacks.
//!
//! The first (hardwired) layer is the feature extractor itself: its output is
//! a `size × size × 6 × 1` tensor. After that come three valid 3D
//! convolutions with ReLU, two `2×2×1` max pools and a dense softmax layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::{extract_stack, FeatureConfig, FeatureStack, NUM_FEATURES};
use crate::imaging::HazeImage;
use crate::{AqiScale, Error, Result, AQI_MAX};

/// Dense activations indexed `(y, x, z, channel)`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || data.len() != dims.iter().product::<usize>() {
            return Err(Error::input(format!(
                "tensor {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    /// `height × width × 6 × 1` view of a feature stack.
    pub fn from_stack(stack: &FeatureStack) -> Self {
        Self {
            dims: [stack.height(), stack.width(), NUM_FEATURES, 1],
            data: stack.interleaved(),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, z: usize, c: usize) -> usize {
        let [_, w, d, ch] = self.dims;
        ((y * w + x) * d + z) * ch + c
    }

    pub fn get(&self, y: usize, x: usize, z: usize, c: usize) -> f64 {
        self.data[self.index(y, x, z, c)]
    }
}

/// Valid, stride-1 3D convolution. Weights are laid out
/// `[kh][kw][kd][in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(kernel: [usize; 3], in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            weights: vec![0.0; kernel.iter().product::<usize>() * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_dims(&self, input: [usize; 4]) -> Option<[usize; 4]> {
        let [h, w, d, c] = input;
        let [kh, kw, kd] = self.kernel;
        if c != self.in_channels || h < kh || w < kw || d < kd {
            return None;
        }
        Some([h - kh + 1, w - kw + 1, d - kd + 1, self.out_channels])
    }

    pub fn forward(&self, input: &Tensor4) -> Tensor4 {
        let out_dims = self.output_dims(input.dims).expect("conv input shape checked at model construction");
        let [oh, ow, od, co] = out_dims;
        let [kh, kw, kd] = self.kernel;
        let ci = self.in_channels;
        let mut out = Tensor4::zeros(out_dims);
        for y in 0..oh {
            for x in 0..ow {
                for z in 0..od {
                    let o = out.index(y, x, z, 0);
                    let acc = &mut out.data[o..o + co];
                    acc.copy_from_slice(&self.bias);
                    for i in 0..kh {
                        for j in 0..kw {
                            for k in 0..kd {
                                let src = input.index(y + i, x + j, z + k, 0);
                                let wbase = ((i * kw + j) * kd + k) * ci * co;
                                for c in 0..ci {
                                    let a = input.data[src + c];
                                    if a == 0.0 {
                                        continue;
                                    }
                                    let row = &self.weights[wbase + c * co..wbase + (c + 1) * co];
                                    for (acc, w) in acc.iter_mut().zip(row) {
                                        *acc += a * w;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grad_w`, `grad_b`.
    pub fn backward(&self, input: &Tensor4, grad_out: &Tensor4, grad_w: &mut [f64], grad_b: &mut [f64]) -> Tensor4 {
        let [oh, ow, od, co] = grad_out.dims;
        let [kh, kw, kd] = self.kernel;
        let ci = self.in_channels;
        let mut grad_in = Tensor4::zeros(input.dims);
        for y in 0..oh {
            for x in 0..ow {
                for z in 0..od {
                    let o = grad_out.index(y, x, z, 0);
                    let g = &grad_out.data[o..o + co];
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for (b, gv) in grad_b.iter_mut().zip(g) {
                        *b += gv;
                    }
                    for i in 0..kh {
                        for j in 0..kw {
                            for k in 0..kd {
                                let src = input.index(y + i, x + j, z + k, 0);
                                let wbase = ((i * kw + j) * kd + k) * ci * co;
                                for c in 0..ci {
                                    let a = input.data[src + c];
                                    let range = wbase + c * co..wbase + (c + 1) * co;
                                    let row = &self.weights[range.clone()];
                                    let mut dx = 0.0;
                                    for ((gw, w), gv) in grad_w[range].iter_mut().zip(row).zip(g) {
                                        *gw += a * gv;
                                        dx += w * gv;
                                    }
                                    grad_in.data[src + c] += dx;
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Non-overlapping `2×2×1` max pooling; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool;

impl MaxPool {
    pub fn output_dims(&self, input: [usize; 4]) -> Option<[usize; 4]> {
        let [h, w, d, c] = input;
        (h >= 2 && w >= 2).then_some([h / 2, w / 2, d, c])
    }

    /// Output plus, for each output value, the flat index of the winning input.
    pub fn forward(&self, input: &Tensor4) -> (Tensor4, Vec<usize>) {
        let dims = self.output_dims(input.dims).expect("pool input shape checked at model construction");
        let [oh, ow, d, c] = dims;
        let mut out = Tensor4::zeros(dims);
        let mut arg = vec![0; out.data.len()];
        for y in 0..oh {
            for x in 0..ow {
                for z in 0..d {
                    for ch in 0..c {
                        let mut best = input.index(2 * y, 2 * x, z, ch);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = input.index(2 * y + dy, 2 * x + dx, z, ch);
                            if input.data[i] > input.data[best] {
                                best = i;
                            }
                        }
                        let o = out.index(y, x, z, ch);
                        out.data[o] = input.data[best];
                        arg[o] = best;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn backward(&self, input_dims: [usize; 4], argmax: &[usize], grad_out: &Tensor4) -> Tensor4 {
        let mut grad_in = Tensor4::zeros(input_dims);
        for (g, &i) in grad_out.data.iter().zip(argmax) {
            grad_in.data[i] += g;
        }
        grad_in
    }
}

pub fn relu(t: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: t.dims,
        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient of ReLU given its *input*.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Fully connected layer over the flattened input; weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, input: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            grad_b[o] += g;
            let row = o * self.inputs..(o + 1) * self.inputs;
            for ((gw, gi), (w, x)) in grad_w[row.clone()]
                .iter_mut()
                .zip(grad_in.iter_mut())
                .zip(self.weights[row].iter().zip(input))
            {
                *gw += g * x;
                *gi += g * w;
            }
        }
        grad_in
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Channel widths, input size and class partition of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub classes: Vec<AqiScale>,
    pub features: FeatureConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            c1: 32,
            c2: 16,
            c3: 16,
            classes: equal_classes(10),
            features: FeatureConfig::default(),
        }
    }
}

/// `n` equal-width classes covering `[0, 500]`.
pub fn equal_classes(n: usize) -> Vec<AqiScale> {
    let w = AQI_MAX / n as f64;
    (0..n)
        .map(|i| AqiScale {
            x_min: i as f64 * w,
            x_max: (i + 1) as f64 * w,
        })
        .collect()
}

/// Classes delimited by the given interior boundaries.
pub fn classes_from_bounds(bounds: &[f64]) -> Result<Vec<AqiScale>> {
    let mut edges = vec![0.0];
    edges.extend_from_slice(bounds);
    edges.push(AQI_MAX);
    edges
        .windows(2)
        .map(|w| {
            if w[1] <= w[0] {
                return Err(Error::input(format!("class bounds must increase strictly, got {bounds:?}")));
            }
            AqiScale::new(w[0], w[1])
        })
        .collect()
}

pub const KERNELS: [[usize; 3]; 3] = [[3, 3, 1], [3, 3, 3], [3, 3, 4]];

impl Architecture {
    /// Checks the class partition and returns the shape after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 4]>> {
        if self.classes.len() < 2 {
            return Err(Error::input("a classifier needs at least 2 classes"));
        }
        if self.classes[0].x_min != 0.0 || self.classes.last().map(|c| c.x_max) != Some(AQI_MAX) {
            return Err(Error::input("class intervals must cover [0, 500]"));
        }
        for pair in self.classes.windows(2) {
            if pair[0].x_max != pair[1].x_min || pair[0].x_min >= pair[0].x_max {
                return Err(Error::input("class intervals must be contiguous and non-empty"));
            }
        }
        if self.c1 == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(Error::input("channel counts must be positive"));
        }
        self.features.validate()?;
        let s = self.features.size;
        let mut shape = [s, s, NUM_FEATURES, 1];
        let mut shapes = vec![shape];
        let widths = [self.c1, self.c2, self.c3];
        for (i, (&kernel, &width)) in KERNELS.iter().zip(&widths).enumerate() {
            let conv = Conv3d::zeros(kernel, shape[3], width);
            shape = conv.output_dims(shape).ok_or_else(|| {
                Error::input(format!("input size {s} is too small for convolution {}", i + 1))
            })?;
            shapes.push(shape);
            if i < 2 {
                shape = MaxPool
                    .output_dims(shape)
                    .ok_or_else(|| Error::input(format!("input size {s} is too small for pooling {}", i + 1)))?;
                shapes.push(shape);
            }
        }
        shapes.push([1, 1, 1, self.classes.len()]);
        Ok(shapes)
    }

    /// Index of the class containing `aqi`; class intervals are half-open
    /// except the last.
    pub fn class_of(&self, aqi: f64) -> Result<usize> {
        if !(0.0..=AQI_MAX).contains(&aqi) {
            return Err(Error::input(format!("AQI label {aqi} outside [0, 500]")));
        }
        Ok(self
            .classes
            .iter()
            .position(|c| aqi < c.x_max)
            .unwrap_or(self.classes.len() - 1))
    }
}

/// Everything remembered from one forward pass, for backpropagation.
struct Trace {
    conv_in: [Tensor4; 3],
    conv_out: [Tensor4; 3],
    pool_arg: [Vec<usize>; 2],
    pool_in_dims: [[usize; 4]; 2],
    flat: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn3dModel {
    pub arch: Architecture,
    pub convs: [Conv3d; 3],
    pub dense: Dense,
    /// Per-element training-set mean, present once the model is trained.
    pub mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stop once an epoch ends with at least this training accuracy.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            stop_at_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub loss: Vec<f64>,
    /// Training accuracy per epoch, measured during the epoch.
    pub accuracy: Vec<f64>,
}

/// Subtracts the element-wise batch mean; returns the centred tensors and the mean.
pub fn preprocess(stacks: &[FeatureStack]) -> Result<(Vec<Tensor4>, Vec<f64>)> {
    let first = stacks.first().ok_or_else(|| Error::input("cannot preprocess an empty batch"))?;
    let tensors: Vec<Tensor4> = stacks.iter().map(Tensor4::from_stack).collect();
    if tensors.iter().any(|t| t.dims != tensors[0].dims) {
        return Err(Error::input("feature stacks in a batch must share dimensions"));
    }
    let n = first.width() * first.height() * NUM_FEATURES;
    let mut mean = vec![0.0; n];
    for t in &tensors {
        for (m, v) in mean.iter_mut().zip(&t.data) {
            *m += v;
        }
    }
    let count = tensors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let centred = tensors.into_iter().map(|t| center(t, &mean)).collect();
    Ok((centred, mean))
}

fn center(mut t: Tensor4, mean: &[f64]) -> Tensor4 {
    for (v, m) in t.data.iter_mut().zip(mean) {
        *v -= m;
    }
    t
}

impl Cnn3dModel {
    /// All weights and biases zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let shapes = arch.shapes()?;
        let widths = [arch.c1, arch.c2, arch.c3];
        let mut in_ch = 1;
        let convs = std::array::from_fn(|i| {
            let c = Conv3d::zeros(KERNELS[i], in_ch, widths[i]);
            in_ch = widths[i];
            c
        });
        let flat: usize = shapes[shapes.len() - 2].iter().product();
        let dense = Dense::zeros(flat, arch.classes.len());
        Ok(Self {
            arch,
            convs,
            dense,
            mean: None,
        })
    }

    /// He-initialised weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut model.convs {
            let fan_in = conv.kernel.iter().product::<usize>() * conv.in_channels;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            conv.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        let normal = Normal::new(0.0, (1.0 / model.dense.inputs as f64).sqrt()).expect("finite std");
        model.dense.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes.len()
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum::<usize>()
            + self.dense.weights.len()
            + self.dense.bias.len()
    }

    fn input_dims(&self) -> [usize; 4] {
        let s = self.arch.features.size;
        [s, s, NUM_FEATURES, 1]
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.dims != self.input_dims() {
            return Err(Error::input(format!(
                "network expects input {:?}, got {:?}",
                self.input_dims(),
                x.dims
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &Tensor4) -> Trace {
        let mut conv_in: Vec<Tensor4> = Vec::with_capacity(3);
        let mut conv_out: Vec<Tensor4> = Vec::with_capacity(3);
        let mut pool_arg = Vec::with_capacity(2);
        let mut pool_in_dims = Vec::with_capacity(2);
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(&cur);
            let act = relu(&pre);
            conv_in.push(cur);
            conv_out.push(pre);
            cur = if i < 2 {
                pool_in_dims.push(act.dims);
                let (pooled, arg) = MaxPool.forward(&act);
                pool_arg.push(arg);
                pooled
            } else {
                act
            };
        }
        let flat = cur.data;
        let probs = softmax(&self.dense.forward(&flat));
        let to3 = |v: Vec<Tensor4>| -> [Tensor4; 3] { v.try_into().expect("three convolutions") };
        Trace {
            conv_in: to3(conv_in),
            conv_out: to3(conv_out),
            pool_arg: pool_arg.try_into().expect("two pools"),
            pool_in_dims: pool_in_dims.try_into().expect("two pools"),
            flat,
            probs,
        }
    }

    /// Class probabilities for an already preprocessed input.
    pub fn forward(&self, x: &Tensor4) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).probs)
    }

    /// Cross-entropy of `label` and its gradient w.r.t. every parameter,
    /// flattened in [`Self::params`] order.
    pub fn loss_and_gradient(&self, x: &Tensor4, label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let mut grads = self.zero_grads();
        let loss = self.accumulate(x, label, &mut grads).0;
        Ok((loss, grads.into_iter().flatten().collect()))
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.param_slices().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(8);
        for c in &self.convs {
            out.push(&c.weights);
            out.push(&c.bias);
        }
        out.push(&self.dense.weights);
        out.push(&self.dense.bias);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(8);
        for c in &mut self.convs {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        out.push(&mut self.dense.weights);
        out.push(&mut self.dense.bias);
        out
    }

    /// All parameters, conv weights/biases in layer order then dense.
    pub fn params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::input(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.param_slices_mut() {
            let n = p.len();
            p.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    // Returns (loss, predicted class).
    fn accumulate(&self, x: &Tensor4, label: usize, grads: &mut [Vec<f64>]) -> (f64, usize) {
        let t = self.trace(x);
        let loss = -t.probs[label].max(1e-300).ln();
        let predicted = argmax(&t.probs);
        let mut g: Vec<f64> = t.probs.clone();
        g[label] -= 1.0;
        let (conv_grads, dense_grads) = grads.split_at_mut(6);
        let (dw, db) = dense_grads.split_at_mut(1);
        let flat_grad = self.dense.backward(&t.flat, &g, &mut dw[0], &mut db[0]);
        let mut grad = Tensor4 {
            dims: t.conv_out[2].dims,
            data: flat_grad,
        };
        for i in (0..3).rev() {
            if i < 2 {
                grad = MaxPool.backward(t.pool_in_dims[i], &t.pool_arg[i], &grad);
            }
            grad = relu_backward(&t.conv_out[i], &grad);
            let (w, rest) = conv_grads[2 * i..].split_at_mut(1);
            let input_grad = self.convs[i].backward(&t.conv_in[i], &grad, &mut w[0], &mut rest[0]);
            if i > 0 {
                grad = input_grad;
            }
        }
        (loss, predicted)
    }

    /// Mini-batch SGD with momentum on preprocessed inputs.
    pub fn fit(&mut self, inputs: &[Tensor4], labels: &[usize], config: &TrainConfig) -> Result<TrainReport> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::input("training needs equally many (nonzero) inputs and labels"));
        }
        if config.batch_size == 0 || !(config.learning_rate >= 0.0) || !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::input("invalid training hyper-parameters"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::input(format!("class label {bad} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut velocity = self.zero_grads();
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut report = TrainReport {
            loss: Vec::new(),
            accuracy: Vec::new(),
        };
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut correct = 0;
            for batch in order.chunks(config.batch_size) {
                let mut grads = self.zero_grads();
                for &i in batch {
                    let (loss, predicted) = self.accumulate(&inputs[i], labels[i], &mut grads);
                    total += loss;
                    correct += usize::from(predicted == labels[i]);
                }
                let scale = config.learning_rate / batch.len() as f64;
                for ((p, v), g) in self.param_slices_mut().into_iter().zip(&mut velocity).zip(&grads) {
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = config.momentum * *v - scale * g;
                        *p += *v;
                    }
                }
            }
            let loss = total / inputs.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    iteration: epoch,
                    message: "training loss diverged".into(),
                });
            }
            let accuracy = correct as f64 / inputs.len() as f64;
            report.loss.push(loss);
            report.accuracy.push(accuracy);
            if config.stop_at_accuracy.is_some_and(|target| accuracy >= target) {
                break;
            }
        }
        Ok(report)
    }

    /// Preprocesses the stacks, stores their mean and trains on the AQI labels.
    pub fn train(&mut self, stacks: &[FeatureStack], aqi: &[f64], config: &TrainConfig) -> Result<TrainReport> {
        if stacks.len() != aqi.len() {
            return Err(Error::input("every stack needs exactly one AQI label"));
        }
        let labels = aqi.iter().map(|&a| self.arch.class_of(a)).collect::<Result<Vec<_>>>()?;
        let (inputs, mean) = preprocess(stacks)?;
        let report = self.fit(&inputs, &labels, config)?;
        self.mean = Some(mean);
        Ok(report)
    }

    /// Class probabilities for a raw feature stack, using the stored mean.
    pub fn predict_stack(&self, stack: &FeatureStack) -> Result<Vec<f64>> {
        let mean = self
            .mean
            .as_ref()
            .ok_or_else(|| Error::state("model has not been trained"))?;
        let x = Tensor4::from_stack(stack);
        self.check_input(&x)?;
        self.forward(&center(x, mean))
    }

    pub fn classify_stack(&self, stack: &FeatureStack) -> Result<AqiScale> {
        Ok(self.arch.classes[argmax(&self.predict_stack(stack)?)])
    }

    pub fn infer_scale(&self, img: &HazeImage) -> Result<AqiScale> {
        if self.mean.is_none() {
            return Err(Error::state("model has not been trained"));
        }
        self.classify_stack(&extract_stack(img, &self.arch.features)?)
    }

    /// Serialises as magic, version, JSON descriptor, parameters and mean.
    pub fn to_bytes(&self) -> Vec<u8> {
        let descriptor = serde_json::to_vec(&self.arch).expect("architecture serialises");
        let params = self.params();
        let mean = self.mean.as_deref().unwrap_or(&[]);
        let mut out = Vec::with_capacity(32 + descriptor.len() + 8 * (params.len() + mean.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(&descriptor);
        for block in [&params[..], mean] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
            return Err(Error::format("offset 0", "not a model file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != MODEL_VERSION {
            return Err(Error::format("offset 6", format!("unsupported model version {version}")));
        }
        let len = u32::from_le_bytes(r.array()?) as usize;
        let arch: Architecture = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format("architecture descriptor", e.to_string()))?;
        let mut model = Self::zeros(arch)?;
        let params = r.f64_block()?;
        model.set_params(&params)?;
        let mean = r.f64_block()?;
        if !mean.is_empty() {
            let expected: usize = model.input_dims().iter().product();
            if mean.len() != expected {
                return Err(Error::format("mean block", format!("expected {expected} values, got {}", mean.len())));
            }
            model.mean = Some(mean);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!("offset {}", r.pos), "trailing bytes after model"));
        }
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8] = b"AQCNN\0";
const MODEL_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                format!("offset {}", self.pos),
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn f64_block(&mut self) -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(self.array()?) as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("model", "block too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

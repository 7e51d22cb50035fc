//! Convolutional autoencoder with batch normalization.
//!
//! Every conv and transposed conv uses kernel 4, stride 2, padding 1, so each
//! encoder conv halves the spatial size and each decoder deconv doubles it.
//! Layout inside the network is NCHW; image batches at the API boundary are
//! NHWC with values in [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::{gemm, sigmoid_scalar, Adam, AdamConfig, Rng, Tensor};
use crate::taskworld::Frame;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaeSpec {
    /// Square input side length.
    pub input_size: usize,
    /// Channel counts starting with the image channels, e.g. `[3, 16, 32, 64]`.
    pub channels: Vec<usize>,
    /// Hidden dense sizes between the flattened conv output and the features.
    pub dense: Vec<usize>,
    pub feature_dim: usize,
    /// Batch norm after each encoder conv; mirrored onto the hidden deconvs.
    pub batch_norm: Vec<bool>,
}

impl CaeSpec {
    /// 64 x 64 x 3, conv 16/32/64, dense 256, 10 features.
    pub fn small() -> Self {
        Self {
            input_size: 64,
            channels: vec![3, 16, 32, 64],
            dense: vec![256],
            feature_dim: 10,
            batch_norm: vec![true; 3],
        }
    }

    /// 112 x 112 x 3, conv 64/32/16, dense 1000, 10 features.
    pub fn full() -> Self {
        Self {
            input_size: 112,
            channels: vec![3, 64, 32, 16],
            dense: vec![1000],
            feature_dim: 10,
            batch_norm: vec![true; 3],
        }
    }

    /// Used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 8,
            channels: vec![3, 2, 2],
            dense: vec![4],
            feature_dim: 3,
            batch_norm: vec![true; 2],
        }
    }

    pub fn conv_count(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.conv_count()
    }

    pub fn validate(&self) -> Result<()> {
        let convs = self.conv_count();
        if convs == 0 || self.channels.contains(&0) {
            return Err(Error::Config("CAE needs at least one conv layer with positive channels".into()));
        }
        if self.feature_dim == 0 || self.dense.contains(&0) {
            return Err(Error::Config("CAE dense and feature sizes must be positive".into()));
        }
        if self.batch_norm.len() != convs {
            return Err(Error::Config(format!(
                "batch_norm needs one flag per conv layer ({convs}), got {}",
                self.batch_norm.len()
            )));
        }
        let mut size = self.input_size;
        for _ in 0..convs {
            if size < 2 || !size.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "input size {} cannot be halved exactly {convs} times",
                    self.input_size
                )));
            }
            size /= 2;
        }
        Ok(())
    }

    fn architecture(&self) -> Vec<LayerKind> {
        let convs = self.conv_count();
        let s = self.bottleneck_size();
        let last_c = *self.channels.last().expect("validated");
        let flat = last_c * s * s;
        let mut layers = Vec::new();
        for i in 0..convs {
            let (cin, cout) = (self.channels[i], self.channels[i + 1]);
            layers.push(LayerKind::Conv {
                cin,
                cout,
                bias: !self.batch_norm[i],
            });
            if self.batch_norm[i] {
                layers.push(LayerKind::BatchNorm { channels: cout });
            }
            layers.push(LayerKind::Relu);
        }
        let mut sizes = vec![flat];
        sizes.extend(&self.dense);
        sizes.push(self.feature_dim);
        for w in sizes.windows(2) {
            layers.push(LayerKind::Dense { inputs: w[0], outputs: w[1] });
            layers.push(LayerKind::Relu);
        }
        *layers.last_mut().expect("non-empty") = LayerKind::Sigmoid;
        let encoder_len = layers.len();
        let rev: Vec<usize> = sizes.iter().rev().copied().collect();
        for w in rev.windows(2) {
            layers.push(LayerKind::Dense { inputs: w[0], outputs: w[1] });
            layers.push(LayerKind::Relu);
        }
        layers.push(LayerKind::Reshape { channels: last_c, size: s });
        for i in (0..convs).rev() {
            let (cin, cout) = (self.channels[i + 1], self.channels[i]);
            let output_layer = i == 0;
            let bn = !output_layer && self.batch_norm[i - 1];
            layers.push(LayerKind::Deconv {
                cin,
                cout,
                bias: !bn,
            });
            if output_layer {
                layers.push(LayerKind::Sigmoid);
            } else {
                if bn {
                    layers.push(LayerKind::BatchNorm { channels: cout });
                }
                layers.push(LayerKind::Relu);
            }
        }
        debug_assert!(encoder_len < layers.len());
        layers
    }

    fn encoder_len(&self) -> usize {
        let convs = self.conv_count();
        let bn = self.batch_norm.iter().filter(|b| **b).count();
        2 * convs + bn + 2 * (self.dense.len() + 1)
    }
}

impl Default for CaeSpec {
    fn default() -> Self {
        Self::small()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum LayerKind {
    Conv { cin: usize, cout: usize, bias: bool },
    Deconv { cin: usize, cout: usize, bias: bool },
    BatchNorm { channels: usize },
    Dense { inputs: usize, outputs: usize },
    Reshape { channels: usize, size: usize },
    Relu,
    Sigmoid,
}

/// Trainable tensors and running statistics of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    None,
    /// Conv weight `[cout, cin*k*k]`; deconv weight `[cin, cout*k*k]`.
    Conv { weight: Tensor, bias: Option<Tensor> },
    Dense { weight: Tensor, bias: Tensor },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl LayerParams {
    fn trainable(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight, bias } => {
                let mut v = vec![weight];
                v.extend(bias.as_ref());
                v
            }
            LayerParams::Dense { weight, bias } => vec![weight, bias],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight, bias } => {
                let mut v = vec![weight];
                v.extend(bias.as_mut());
                v
            }
            LayerParams::Dense { weight, bias } => vec![weight, bias],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeParams {
    pub layers: Vec<LayerParams>,
}

impl CaeParams {
    /// He-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(spec: &CaeSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let k2 = KERNEL * KERNEL;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        let layers = spec
            .architecture()
            .into_iter()
            .map(|kind| match kind {
                LayerKind::Conv { cin, cout, bias } => LayerParams::Conv {
                    weight: uniform(&[cout, cin * k2], cin * k2),
                    bias: bias.then(|| Tensor::zeros(&[cout])),
                },
                LayerKind::Deconv { cin, cout, bias } => LayerParams::Conv {
                    // Each output pixel receives about cin * k*k / stride^2 terms.
                    weight: uniform(&[cin, cout * k2], cin * k2 / (STRIDE * STRIDE)),
                    bias: bias.then(|| Tensor::zeros(&[cout])),
                },
                LayerKind::Dense { inputs, outputs } => LayerParams::Dense {
                    weight: uniform(&[outputs, inputs], inputs),
                    bias: Tensor::zeros(&[outputs]),
                },
                LayerKind::BatchNorm { channels } => LayerParams::BatchNorm {
                    gamma: Tensor::filled(&[channels], 1.0),
                    beta: Tensor::zeros(&[channels]),
                    running_mean: Tensor::zeros(&[channels]),
                    running_var: Tensor::filled(&[channels], 1.0),
                },
                LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Reshape { .. } => LayerParams::None,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn check(&self, spec: &CaeSpec) -> Result<()> {
        spec.validate()?;
        let arch = spec.architecture();
        if arch.len() != self.layers.len() {
            return Err(shape_mismatch("CaeParams layers", &[arch.len()], &[self.layers.len()]));
        }
        let k2 = KERNEL * KERNEL;
        for (kind, p) in arch.iter().zip(&self.layers) {
            let ok = match (kind, p) {
                (LayerKind::Conv { cin, cout, bias }, LayerParams::Conv { weight, bias: b }) => {
                    weight.shape() == [*cout, cin * k2] && b.is_some() == *bias
                }
                (LayerKind::Deconv { cin, cout, bias }, LayerParams::Conv { weight, bias: b }) => {
                    weight.shape() == [*cin, cout * k2] && b.is_some() == *bias
                }
                (LayerKind::Dense { inputs, outputs }, LayerParams::Dense { weight, bias }) => {
                    weight.shape() == [*outputs, *inputs] && bias.shape() == [*outputs]
                }
                (LayerKind::BatchNorm { channels }, LayerParams::BatchNorm { gamma, running_var, .. }) => {
                    gamma.shape() == [*channels] && running_var.shape() == [*channels]
                }
                (LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Reshape { .. }, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Format(format!("CAE parameters do not match layer {kind:?}")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.trainable())
            .map(Tensor::len)
            .sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in self.layers.iter().flat_map(|l| l.trainable()) {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.layers.iter_mut().flat_map(|l| l.trainable_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// N x H x W x 3 images in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn from_frames(frames: &[&Frame]) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("image batch"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if f.height != first.height || f.width != first.width {
                return Err(shape_mismatch(
                    "ImageBatch frame",
                    &[first.height, first.width],
                    &[f.height, f.width],
                ));
            }
            data.extend(f.data.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(Self {
            count: frames.len(),
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.height * self.width * 3;
        &self.data[i * len..(i + 1) * len]
    }

    fn to_nchw(&self) -> Act {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for n in 0..self.count {
            let src = self.image(n);
            let dst = &mut data[n * 3 * h * w..(n + 1) * 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    dst[c * h * w + p] = src[p * 3 + c];
                }
            }
        }
        Act {
            n: self.count,
            c: 3,
            h,
            w,
            data,
        }
    }

    fn from_nchw(act: &Act) -> Self {
        let (h, w) = (act.h, act.w);
        let mut data = vec![0.0; act.data.len()];
        for n in 0..act.n {
            let src = &act.data[n * 3 * h * w..(n + 1) * 3 * h * w];
            let dst = &mut data[n * 3 * h * w..(n + 1) * 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    dst[p * 3 + c] = src[c * h * w + p];
                }
            }
        }
        Self {
            count: act.n,
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_frames(&self) -> Vec<Frame> {
        (0..self.count)
            .map(|i| Frame {
                height: self.height,
                width: self.width,
                data: self.image(i).to_vec(),
            })
            .collect()
    }

    /// Population variance of all channel values.
    pub fn pixel_variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// NCHW activation; dense activations use `h = w = 1`.
#[derive(Clone, Debug)]
struct Act {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Act {
    fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    fn sample(&self, i: usize) -> &[f64] {
        let len = self.per_sample();
        &self.data[i * len..(i + 1) * len]
    }
}

/// `img` is `[c, h, w]`; writes `[c*k*k, oh*ow]` columns for a stride-2,
/// padding-1 window.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    let plane = oh * ow;
    for ch in 0..c {
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = (ch * KERNEL + ki) * KERNEL + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * STRIDE + ki) as isize - PADDING as isize;
                    let drow = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(ch * h + ii as usize) * w..(ch * h + ii as usize + 1) * w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * STRIDE + kj) as isize - PADDING as isize;
                        *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `img` (accumulating).
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, img: &mut [f64]) {
    let plane = oh * ow;
    for ch in 0..c {
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = (ch * KERNEL + ki) * KERNEL + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * STRIDE + ki) as isize - PADDING as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ch * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * STRIDE + kj) as isize - PADDING as isize;
                        if jj >= 0 && jj < w as isize {
                            img[base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Saved state needed by the backward pass of one layer.
enum Cache {
    None,
    /// Layer input (needed by dense, deconv, relu, sigmoid-free layers).
    Input(Act),
    /// Per-sample im2col buffers for a conv.
    Cols(Vec<Vec<f64>>, [usize; 4]),
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Layer output (sigmoid).
    Output(Act),
}

fn conv_forward(x: &Act, weight: &Tensor, bias: Option<&Tensor>, cout: usize, keep: bool) -> (Act, Cache) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let kdim = x.c * KERNEL * KERNEL;
    let plane = oh * ow;
    let mut out = vec![0.0; x.n * cout * plane];
    let mut saved = Vec::new();
    let mut cols = vec![0.0; kdim * plane];
    for n in 0..x.n {
        im2col(x.sample(n), x.c, x.h, x.w, oh, ow, &mut cols);
        let dst = &mut out[n * cout * plane..(n + 1) * cout * plane];
        gemm(cout, kdim, plane, 1.0, weight.data(), false, &cols, false, 0.0, dst);
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                dst[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
        if keep {
            saved.push(cols.clone());
        }
    }
    let act = Act {
        n: x.n,
        c: cout,
        h: oh,
        w: ow,
        data: out,
    };
    let cache = if keep {
        Cache::Cols(saved, [x.n, x.c, x.h, x.w])
    } else {
        Cache::None
    };
    (act, cache)
}

fn deconv_forward(x: &Act, weight: &Tensor, bias: Option<&Tensor>, cout: usize) -> Act {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let kdim = cout * KERNEL * KERNEL;
    let plane = x.h * x.w;
    let mut out = vec![0.0; x.n * cout * oh * ow];
    let mut cols = vec![0.0; kdim * plane];
    for n in 0..x.n {
        // cols = W^T x, W is [cin, cout*k*k]
        gemm(kdim, x.c, plane, 1.0, weight.data(), true, x.sample(n), false, 0.0, &mut cols);
        let dst = &mut out[n * cout * oh * ow..(n + 1) * cout * oh * ow];
        col2im(&cols, cout, oh, ow, x.h, x.w, dst);
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                dst[co * oh * ow..(co + 1) * oh * ow].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Act {
        n: x.n,
        c: cout,
        h: oh,
        w: ow,
        data: out,
    }
}

fn dense_forward(x: &Act, weight: &Tensor, bias: &Tensor, outputs: usize) -> Act {
    let inputs = x.per_sample();
    let mut out = vec![0.0; x.n * outputs];
    gemm(x.n, inputs, outputs, 1.0, &x.data, false, weight.data(), true, 0.0, &mut out);
    for row in out.chunks_mut(outputs) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Act {
        n: x.n,
        c: outputs,
        h: 1,
        w: 1,
        data: out,
    }
}

struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn batchnorm_forward(
    x: &Act,
    gamma: &Tensor,
    beta: &Tensor,
    running: (&Tensor, &Tensor),
    mode: Mode,
) -> (Act, Cache, Option<BnStats>) {
    let plane = x.h * x.w;
    let m = (x.n * plane) as f64;
    let c = x.c;
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..x.n {
                let s = x.sample(n);
                for ch in 0..c {
                    mean[ch] += s[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for n in 0..x.n {
                let s = x.sample(n);
                for ch in 0..c {
                    var[ch] += s[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let stats = BnStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running.0.data().to_vec(), running.1.data().to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.data.len()];
    let mut out = vec![0.0; x.data.len()];
    for n in 0..x.n {
        for ch in 0..c {
            let base = n * c * plane + ch * plane;
            for p in 0..plane {
                let xh = (x.data[base + p] - mean[ch]) * inv_std[ch];
                xhat[base + p] = xh;
                out[base + p] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    let act = Act {
        n: x.n,
        c,
        h: x.h,
        w: x.w,
        data: out,
    };
    (act, Cache::BatchNorm { xhat, inv_std }, stats)
}

/// Gradients for the trainable tensors of one layer, in `trainable()` order.
type LayerGrads = Vec<Vec<f64>>;

struct ForwardPass {
    output: Act,
    caches: Vec<Cache>,
    bn_stats: Vec<Option<BnStats>>,
}

fn run_layers(
    spec: &CaeSpec,
    params: &CaeParams,
    input: Act,
    layers: std::ops::Range<usize>,
    mode: Mode,
    keep: bool,
) -> ForwardPass {
    let arch = spec.architecture();
    let mut x = input;
    let mut caches = Vec::new();
    let mut bn_stats = Vec::new();
    for idx in layers {
        let (kind, p) = (arch[idx], &params.layers[idx]);
        let (next, cache, stats) = match (kind, p) {
            (LayerKind::Conv { cout, .. }, LayerParams::Conv { weight, bias }) => {
                let (a, c) = conv_forward(&x, weight, bias.as_ref(), cout, keep);
                (a, c, None)
            }
            (LayerKind::Deconv { cout, .. }, LayerParams::Conv { weight, bias }) => {
                let a = deconv_forward(&x, weight, bias.as_ref(), cout);
                (a, Cache::Input(x), None)
            }
            (LayerKind::Dense { outputs, .. }, LayerParams::Dense { weight, bias }) => {
                let a = dense_forward(&x, weight, bias, outputs);
                (a, Cache::Input(x), None)
            }
            (
                LayerKind::BatchNorm { .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => batchnorm_forward(&x, gamma, beta, (running_mean, running_var), mode),
            (LayerKind::Relu, _) => {
                let mut a = x.clone();
                a.data.iter_mut().for_each(|v| *v = v.max(0.0));
                (a, Cache::Input(x), None)
            }
            (LayerKind::Sigmoid, _) => {
                let mut a = x;
                a.data.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
                let cache = Cache::Output(a.clone());
                (a, cache, None)
            }
            (LayerKind::Reshape { channels, size }, _) => {
                let a = Act {
                    n: x.n,
                    c: channels,
                    h: size,
                    w: size,
                    data: x.data,
                };
                (a, Cache::None, None)
            }
            _ => unreachable!("parameters checked against architecture"),
        };
        caches.push(if keep { cache } else { Cache::None });
        bn_stats.push(stats);
        x = next;
    }
    ForwardPass {
        output: x,
        caches,
        bn_stats,
    }
}

fn check_images(images: &ImageBatch, spec: &CaeSpec) -> Result<()> {
    if images.count == 0 {
        return Err(Error::Empty("image batch"));
    }
    if images.height != spec.input_size || images.width != spec.input_size {
        return Err(shape_mismatch(
            "CAE input",
            &[spec.input_size, spec.input_size],
            &[images.height, images.width],
        ));
    }
    if images.data.len() != images.count * images.height * images.width * 3 {
        return Err(shape_mismatch(
            "CAE input buffer",
            &[images.count * images.height * images.width * 3],
            &[images.data.len()],
        ));
    }
    Ok(())
}

/// Encodes a batch into `N x feature_dim` features in (0, 1).
///
/// In train mode batch statistics are used (so features depend on the batch);
/// eval mode uses running statistics and is a per-image pure function.
pub fn encode(images: &ImageBatch, params: &CaeParams, spec: &CaeSpec, mode: Mode) -> Result<Tensor> {
    check_images(images, spec)?;
    params.check(spec)?;
    let pass = run_layers(spec, params, images.to_nchw(), 0..spec.encoder_len(), mode, false);
    Tensor::new(vec![images.count, spec.feature_dim], pass.output.data)
}

/// Decodes features back to images (eval-mode batch norm).
pub fn decode(features: &Tensor, params: &CaeParams, spec: &CaeSpec) -> Result<ImageBatch> {
    params.check(spec)?;
    if features.shape().len() != 2 || features.cols() != spec.feature_dim {
        return Err(shape_mismatch(
            "decode features",
            &[features.rows(), spec.feature_dim],
            features.shape(),
        ));
    }
    let input = Act {
        n: features.rows(),
        c: spec.feature_dim,
        h: 1,
        w: 1,
        data: features.data().to_vec(),
    };
    let arch_len = spec.architecture().len();
    let pass = run_layers(spec, params, input, spec.encoder_len()..arch_len, Mode::Eval, false);
    Ok(ImageBatch::from_nchw(&pass.output))
}

/// Full reconstruction `decode(encode(x))`.
pub fn reconstruct(images: &ImageBatch, params: &CaeParams, spec: &CaeSpec, mode: Mode) -> Result<ImageBatch> {
    check_images(images, spec)?;
    params.check(spec)?;
    let arch_len = spec.architecture().len();
    let pass = run_layers(spec, params, images.to_nchw(), 0..arch_len, mode, false);
    Ok(ImageBatch::from_nchw(&pass.output))
}

/// Reconstruction loss and gradients for every trainable tensor (train mode).
struct LossAndGrads {
    /// Reconstruction MSE plus the feature-logit penalty.
    loss: f64,
    reconstruction: f64,
    grads: Vec<LayerGrads>,
    bn_stats: Vec<Option<BnStats>>,
}

fn loss_and_grads(
    inputs: &ImageBatch,
    targets: &ImageBatch,
    params: &CaeParams,
    spec: &CaeSpec,
    feature_penalty: f64,
) -> LossAndGrads {
    let arch = spec.architecture();
    let feature_sigmoid = spec.encoder_len() - 1;
    let pass = run_layers(spec, params, inputs.to_nchw(), 0..arch.len(), Mode::Train, true);
    let target = targets.to_nchw();
    let count = target.data.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = pass
        .output
        .data
        .iter()
        .zip(&target.data)
        .map(|(y, t)| {
            loss += (y - t) * (y - t);
            2.0 * (y - t) / count
        })
        .collect();
    loss /= count;
    let reconstruction = loss;

    let mut grads: Vec<LayerGrads> = vec![Vec::new(); arch.len()];
    let mut shape = (pass.output.n, pass.output.c, pass.output.h, pass.output.w);
    for idx in (0..arch.len()).rev() {
        let (kind, p, cache) = (arch[idx], &params.layers[idx], &pass.caches[idx]);
        match (kind, p, cache) {
            (LayerKind::Sigmoid, _, Cache::Output(y)) => {
                for (g, y) in grad.iter_mut().zip(&y.data) {
                    *g *= y * (1.0 - y);
                }
                if idx == feature_sigmoid && feature_penalty > 0.0 {
                    // mean squared logit, recomputed from the dense input
                    let (LayerParams::Dense { weight, bias }, Cache::Input(x)) = (&params.layers[idx - 1], &pass.caches[idx - 1]) else {
                        unreachable!("feature sigmoid follows a dense layer");
                    };
                    let (n, outputs, inputs) = (x.n, weight.rows(), weight.cols());
                    let mut z = vec![0.0; n * outputs];
                    for row in z.chunks_mut(outputs) {
                        row.copy_from_slice(bias.data());
                    }
                    gemm(n, inputs, outputs, 1.0, &x.data, false, weight.data(), true, 1.0, &mut z);
                    let m = z.len() as f64;
                    for (g, z) in grad.iter_mut().zip(&z) {
                        loss += feature_penalty * z * z / m;
                        *g += 2.0 * feature_penalty * z / m;
                    }
                }
            }
            (LayerKind::Relu, _, Cache::Input(x)) => {
                for (g, x) in grad.iter_mut().zip(&x.data) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            (LayerKind::Reshape { .. }, _, _) => {
                let (n, c, h, w) = shape;
                shape = (n, c * h * w, 1, 1);
            }
            (LayerKind::Dense { inputs, outputs }, LayerParams::Dense { weight, .. }, Cache::Input(x)) => {
                let n = x.n;
                let mut dw = vec![0.0; outputs * inputs];
                gemm(outputs, n, inputs, 1.0, &grad, true, &x.data, false, 0.0, &mut dw);
                let mut db = vec![0.0; outputs];
                for row in grad.chunks(outputs) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                let mut dx = vec![0.0; n * inputs];
                gemm(n, outputs, inputs, 1.0, &grad, false, weight.data(), false, 0.0, &mut dx);
                grads[idx] = vec![dw, db];
                grad = dx;
                shape = (x.n, x.c, x.h, x.w);
            }
            (LayerKind::BatchNorm { channels }, LayerParams::BatchNorm { gamma, .. }, Cache::BatchNorm { xhat, inv_std }) => {
                let (n, c, h, w) = shape;
                debug_assert_eq!(c, channels);
                let plane = h * w;
                let m = (n * plane) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = s * c * plane + ch * plane;
                        for p in 0..plane {
                            dgamma[ch] += grad[base + p] * xhat[base + p];
                            dbeta[ch] += grad[base + p];
                        }
                    }
                }
                let mut dx = vec![0.0; grad.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = s * c * plane + ch * plane;
                        let g = gamma.data()[ch];
                        for p in 0..plane {
                            let dxhat = grad[base + p] * g;
                            dx[base + p] = inv_std[ch] / m
                                * (m * dxhat - g * dbeta[ch] - xhat[base + p] * g * dgamma[ch]);
                        }
                    }
                }
                grads[idx] = vec![dgamma, dbeta];
                grad = dx;
            }
            (LayerKind::Conv { cin, cout, bias }, LayerParams::Conv { weight, .. }, Cache::Cols(cols, in_shape)) => {
                let [n, _, h, w] = *in_shape;
                let (oh, ow) = (h / 2, w / 2);
                let plane = oh * ow;
                let kdim = cin * KERNEL * KERNEL;
                let mut dw = vec![0.0; cout * kdim];
                let mut db = vec![0.0; cout];
                let mut dx = vec![0.0; n * cin * h * w];
                let mut dcols = vec![0.0; kdim * plane];
                for s in 0..n {
                    let dout = &grad[s * cout * plane..(s + 1) * cout * plane];
                    gemm(cout, plane, kdim, 1.0, dout, false, &cols[s], true, 1.0, &mut dw);
                    if bias {
                        for co in 0..cout {
                            db[co] += dout[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    gemm(kdim, cout, plane, 1.0, weight.data(), true, dout, false, 0.0, &mut dcols);
                    col2im(&dcols, cin, h, w, oh, ow, &mut dx[s * cin * h * w..(s + 1) * cin * h * w]);
                }
                grads[idx] = if bias { vec![dw, db] } else { vec![dw] };
                grad = dx;
                shape = (n, cin, h, w);
            }
            (LayerKind::Deconv { cin, cout, bias }, LayerParams::Conv { weight, .. }, Cache::Input(x)) => {
                let (h, w) = (x.h, x.w);
                let (oh, ow) = (h * 2, w * 2);
                let plane = h * w;
                let kdim = cout * KERNEL * KERNEL;
                let mut dw = vec![0.0; cin * kdim];
                let mut db = vec![0.0; cout];
                let mut dx = vec![0.0; x.n * cin * plane];
                let mut cols = vec![0.0; kdim * plane];
                for s in 0..x.n {
                    let dout = &grad[s * cout * oh * ow..(s + 1) * cout * oh * ow];
                    if bias {
                        for co in 0..cout {
                            db[co] += dout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                        }
                    }
                    im2col(dout, cout, oh, ow, h, w, &mut cols);
                    // dx = W cols ; dW += x cols^T
                    gemm(cin, kdim, plane, 1.0, weight.data(), false, &cols, false, 0.0, &mut dx[s * cin * plane..(s + 1) * cin * plane]);
                    gemm(cin, plane, kdim, 1.0, x.sample(s), false, &cols, true, 1.0, &mut dw);
                }
                grads[idx] = if bias { vec![dw, db] } else { vec![dw] };
                grad = dx;
                shape = (x.n, cin, h, w);
            }
            _ => unreachable!("cache kind matches layer kind"),
        }
    }
    LossAndGrads {
        loss,
        reconstruction,
        grads,
        bn_stats: pass.bn_stats,
    }
}

fn update_running_stats(params: &mut CaeParams, stats: &[Option<BnStats>], samples_per_channel: &[usize]) {
    for ((layer, s), m) in params.layers.iter_mut().zip(stats).zip(samples_per_channel) {
        if let (
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            Some(s),
        ) = (layer, s)
        {
            let unbias = if *m > 1 { *m as f64 / (*m as f64 - 1.0) } else { 1.0 };
            for (r, v) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            for (r, v) in running_var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }
}

/// Per-batch-norm-layer number of values reduced per channel.
fn bn_reduction_sizes(spec: &CaeSpec, batch: usize) -> Vec<usize> {
    let mut size = spec.input_size;
    let mut out = Vec::new();
    for kind in spec.architecture() {
        match kind {
            LayerKind::Conv { .. } => size /= 2,
            LayerKind::Deconv { .. } => size *= 2,
            LayerKind::Reshape { size: s, .. } => size = s,
            _ => {}
        }
        out.push(match kind {
            LayerKind::BatchNorm { .. } => batch * size * size,
            _ => 0,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub noise_std: f64,
    /// Per-channel multiplicative jitter, drawn from `[1 - s, 1 + s]`.
    pub brightness_scale: f64,
    /// Per-channel additive jitter, drawn from `[-s, s]`.
    pub brightness_shift: f64,
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            noise_std: 0.0,
            brightness_scale: 0.0,
            brightness_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 || self.brightness_scale < 0.0 || self.brightness_shift < 0.0 {
            return Err(Error::Config("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.brightness_scale == 0.0 && self.brightness_shift == 0.0
    }

    /// Gaussian noise plus per-channel colour jitter, re-clamped to [0, 1].
    pub fn apply(&self, images: &ImageBatch, rng: &mut Rng) -> ImageBatch {
        let mut out = images.clone();
        if self.is_identity() {
            return out;
        }
        let len = images.height * images.width * 3;
        for n in 0..images.count {
            let scale: [f64; 3] = std::array::from_fn(|_| rng.uniform(1.0 - self.brightness_scale, 1.0 + self.brightness_scale));
            let shift: [f64; 3] = std::array::from_fn(|_| rng.uniform(-self.brightness_shift, self.brightness_shift));
            let img = &mut out.data[n * len..(n + 1) * len];
            for (i, v) in img.iter_mut().enumerate() {
                let c = i % 3;
                let noise = if self.noise_std > 0.0 { rng.normal(0.0, self.noise_std) } else { 0.0 };
                *v = (*v * scale[c] + shift[c] + noise).clamp(0.0, 1.0);
            }
        }
        out
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.02,
            brightness_scale: 0.05,
            brightness_shift: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augmentation: AugmentationConfig,
    /// Weight on the mean squared pre-sigmoid feature. Keeps features off the
    /// flat ends of the sigmoid so nearby scenes get nearby codes.
    pub feature_penalty: f64,
}

impl Default for CaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            adam: AdamConfig::default(),
            augmentation: AugmentationConfig::default(),
            feature_penalty: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaeTraining {
    pub params: CaeParams,
    /// Mean training reconstruction loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Trains with Adam on MSE reconstruction. Augmentation touches inputs only;
/// targets are always the clean images.
pub fn train_cae(
    dataset: &ImageBatch,
    spec: &CaeSpec,
    config: &CaeTrainConfig,
    rng: &mut Rng,
) -> Result<CaeTraining> {
    check_images(dataset, spec)?;
    config.augmentation.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = CaeParams::init(spec, rng)?;
    train_cae_from(dataset, spec, config, rng, &mut params)
}

/// Continues training existing parameters.
pub fn train_cae_from(
    dataset: &ImageBatch,
    spec: &CaeSpec,
    config: &CaeTrainConfig,
    rng: &mut Rng,
    params: &mut CaeParams,
) -> Result<CaeTraining> {
    check_images(dataset, spec)?;
    params.check(spec)?;
    if !(config.feature_penalty >= 0.0) {
        return Err(Error::Config("feature_penalty must be non-negative".into()));
    }
    let mut flat = params.flatten();
    let mut adam = Adam::new(config.adam, flat.len());
    let mut order: Vec<usize> = (0..dataset.count).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let image_len = dataset.height * dataset.width * 3;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * image_len);
            for &i in chunk {
                data.extend_from_slice(dataset.image(i));
            }
            let clean = ImageBatch {
                count: chunk.len(),
                height: dataset.height,
                width: dataset.width,
                data,
            };
            let noisy = config.augmentation.apply(&clean, rng);
            let out = loss_and_grads(&noisy, &clean, params, spec, config.feature_penalty);
            let grads: Vec<f64> = out.grads.into_iter().flatten().flatten().collect();
            adam.step(&mut flat, &grads)?;
            params.unflatten(&flat);
            update_running_stats(params, &out.bn_stats, &bn_reduction_sizes(spec, chunk.len()));
            epoch_loss += out.reconstruction * chunk.len() as f64;
        }
        history.push(epoch_loss / dataset.count as f64);
    }
    Ok(CaeTraining {
        params: params.clone(),
        loss_history: history,
    })
}

/// Per-pixel MSE of `decode(encode(x))` against `x` in eval mode.
pub fn reconstruction_mse(images: &ImageBatch, params: &CaeParams, spec: &CaeSpec) -> Result<f64> {
    let mut total = 0.0;
    let image_len = images.height * images.width * 3;
    // Bounded batches keep memory flat on large sets; eval mode is per-image.
    for start in (0..images.count).step_by(64) {
        let end = (start + 64).min(images.count);
        let batch = ImageBatch {
            count: end - start,
            height: images.height,
            width: images.width,
            data: images.data[start * image_len..end * image_len].to_vec(),
        };
        let recon = reconstruct(&batch, params, spec, Mode::Eval)?;
        total += recon
            .data
            .iter()
            .zip(&batch.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / images.data.len() as f64)
}

/// Largest relative error of analytic vs central-difference gradients, per
/// parameter kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub conv: f64,
    pub deconv: f64,
    pub batch_norm: f64,
    pub dense: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.conv.max(self.deconv).max(self.batch_norm).max(self.dense)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / scale
}

/// Checks every trainable parameter of `spec` against central differences
/// (`h = 1e-5`) on a random batch of three images in train mode.
pub fn grad_check_cae(spec: &CaeSpec, rng: &mut Rng) -> Result<GradCheckReport> {
    let mut params = CaeParams::init(spec, rng)?;
    // Non-trivial batch-norm affine parameters.
    for layer in &mut params.layers {
        if let LayerParams::BatchNorm { gamma, beta, .. } = layer {
            gamma.data_mut().iter_mut().for_each(|g| *g = rng.uniform(0.5, 1.5));
            beta.data_mut().iter_mut().for_each(|b| *b = rng.uniform(-0.2, 0.2));
        }
        if let LayerParams::Conv { bias: Some(b), .. } | LayerParams::Dense { bias: b, .. } = layer {
            b.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.1, 0.1));
        }
    }
    let count = 3;
    let len = count * spec.input_size * spec.input_size * 3;
    let make = |rng: &mut Rng| ImageBatch {
        count,
        height: spec.input_size,
        width: spec.input_size,
        data: (0..len).map(|_| rng.uniform(0.0, 1.0)).collect(),
    };
    let inputs = make(rng);
    let targets = make(rng);
    let penalty = 0.1;
    let analytic = loss_and_grads(&inputs, &targets, &params, spec, penalty);
    let arch = spec.architecture();
    let h = 1e-5;
    let mut report = GradCheckReport::default();
    for (idx, kind) in arch.iter().enumerate() {
        let n_tensors = params.layers[idx].trainable().len();
        for ti in 0..n_tensors {
            let n = params.layers[idx].trainable()[ti].len();
            for k in 0..n {
                let original = params.layers[idx].trainable()[ti].data()[k];
                params.layers[idx].trainable_mut()[ti].data_mut()[k] = original + h;
                let plus = loss_and_grads(&inputs, &targets, &params, spec, penalty).loss;
                params.layers[idx].trainable_mut()[ti].data_mut()[k] = original - h;
                let minus = loss_and_grads(&inputs, &targets, &params, spec, penalty).loss;
                params.layers[idx].trainable_mut()[ti].data_mut()[k] = original;
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(analytic.grads[idx][ti][k], numeric);
                let slot = match kind {
                    LayerKind::Conv { .. } => &mut report.conv,
                    LayerKind::Deconv { .. } => &mut report.deconv,
                    LayerKind::BatchNorm { .. } => &mut report.batch_norm,
                    LayerKind::Dense { .. } => &mut report.dense,
                    _ => unreachable!("only parameterised layers have tensors"),
                };
                *slot = slot.max(err);
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

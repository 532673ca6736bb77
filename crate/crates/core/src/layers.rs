//! Stateful layers built on the tensor kernels.
//!
//! Every layer has a `forward` that returns its output together with a cache,
//! and a `backward` that consumes the cache, accumulates parameter gradients
//! into [`Grads`] and returns the gradient for its input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BufferId, Grads, ParamId, Registry};
use crate::tensor::{self, conv2d, conv2d_backward, ConvSpec, Element, ShapeDisplay, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Pending running-statistic writes collected during a training forward pass.
pub type StatUpdates<T> = Vec<(BufferId, Tensor<T>)>;

/// Per-channel batch normalization over every axis but the last.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn register<T: Element>(reg: &mut Registry<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: reg.add_param(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())),
            beta: reg.add_param(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: reg
                .add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: reg.add_buffer(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// In `Train` mode normalizes by biased batch statistics and pushes the
    /// exponential-moving-average update of the running statistics onto
    /// `updates`; in `Infer` mode uses the running statistics only.
    pub fn forward<T: Element>(
        &self,
        reg: &Registry<T>,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let c = self.channels;
        if x.shape().last() != Some(&c) {
            return Err(Error::dim(
                "batchnorm",
                format!("input [{}] vs {c} channels", ShapeDisplay(x.shape())),
            ));
        }
        let count = x.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let (mean, var) = channel_moments(x, c);
                let rm = reg.buffer(self.running_mean);
                let rv = reg.buffer(self.running_var);
                let m = self.momentum;
                let blend = |run: &Tensor<T>, batch: &[f64]| {
                    Tensor::from_parts(
                        vec![c],
                        run.data()
                            .iter()
                            .zip(batch)
                            .map(|(&r, &b)| T::of(m * r.as_f64() + (1.0 - m) * b))
                            .collect(),
                    )
                };
                updates.push((self.running_mean, blend(rm, &mean)));
                updates.push((self.running_var, blend(rv, &var)));
                (mean, var)
            }
            Mode::Infer => {
                let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
                (
                    to64(reg.buffer(self.running_mean)),
                    to64(reg.buffer(self.running_var)),
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let gamma = reg.param(self.gamma).data();
        let beta = reg.param(self.beta).data();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for px in x.data().chunks(c) {
            for ch in 0..c {
                let xh = T::of((px[ch].as_f64() - mean[ch]) * inv_std[ch]);
                x_hat.push(xh);
                y.push(gamma[ch] * xh + beta[ch]);
            }
        }
        let shape = x.shape().to_vec();
        Ok((
            Tensor::from_parts(shape.clone(), y),
            BatchNormCache {
                mode,
                x_hat: Tensor::from_parts(shape, x_hat),
                inv_std,
            },
        ))
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        cache: &BatchNormCache<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        upstream.expect_same_shape(&cache.x_hat, "batchnorm_backward")?;
        let c = self.channels;
        let count = upstream.len() / c;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xh = vec![0.0f64; c];
        for (dy, xh) in upstream.data().chunks(c).zip(cache.x_hat.data().chunks(c)) {
            for ch in 0..c {
                sum_dy[ch] += dy[ch].as_f64();
                sum_dy_xh[ch] += dy[ch].as_f64() * xh[ch].as_f64();
            }
        }
        let gamma = reg.param(self.gamma).data();
        let m = count as f64;
        let mut dx = Vec::with_capacity(upstream.len());
        for (dy, xh) in upstream.data().chunks(c).zip(cache.x_hat.data().chunks(c)) {
            for ch in 0..c {
                let scale = gamma[ch].as_f64() * cache.inv_std[ch];
                let v = match cache.mode {
                    Mode::Train => {
                        scale / m
                            * (m * dy[ch].as_f64()
                                - sum_dy[ch]
                                - xh[ch].as_f64() * sum_dy_xh[ch])
                    }
                    Mode::Infer => scale * dy[ch].as_f64(),
                };
                dx.push(T::of(v));
            }
        }
        let vec_t = |v: &[f64]| Tensor::from_parts(vec![c], v.iter().map(|&x| T::of(x)).collect());
        grads.accumulate(self.gamma, &vec_t(&sum_dy_xh))?;
        grads.accumulate(self.beta, &vec_t(&sum_dy))?;
        Ok(Tensor::from_parts(upstream.shape().to_vec(), dx))
    }
}

/// Biased per-channel mean and variance over all leading axes.
fn channel_moments<T: Element>(x: &Tensor<T>, c: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (x.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for px in x.data().chunks(c) {
        for ch in 0..c {
            mean[ch] += px[ch].as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; c];
    for px in x.data().chunks(c) {
        for ch in 0..c {
            let d = px[ch].as_f64() - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

pub fn apply_updates<T: Element>(reg: &mut Registry<T>, updates: StatUpdates<T>) {
    for (id, t) in updates {
        *reg.buffer_mut(id) = t;
    }
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Element>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(upstream, "relu_backward", |v, d| {
        if v > T::zero() {
            d
        } else {
            T::zero()
        }
    })
}

/// Logistic function, held inside the open interval `(0, 1)` even where the
/// exact value rounds to an endpoint.
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let half_ulp = T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(T::one() - half_ulp)
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(upstream, "sigmoid_backward", |s, d| d * s * (T::one() - s))
}

/// Row-wise softmax of `[N, k]` logits with max subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = x.dims2()?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradient through a softmax given its output `y`: `y ⊙ (g − Σ g⊙y)` per row.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    y.expect_same_shape(upstream, "softmax_backward")?;
    let (_, k) = y.dims2()?;
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(k).zip(upstream.data().chunks(k)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout_rate", format!("{rate} not in [0, 1)")));
        }
        Ok(DropoutSpec { rate })
    }
}

/// Inverted dropout. Returns the output and, when units were dropped, the
/// multiplicative mask (entries `0` or `1/(1-rate)`).
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    spec: DropoutSpec,
    mode: Mode,
    rng: &mut R,
) -> (Tensor<T>, Option<Tensor<T>>) {
    if mode == Mode::Infer || spec.rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - spec.rate;
    let scale = T::of(1.0 / keep);
    let mask = Tensor::from_parts(
        x.shape().to_vec(),
        (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect(),
    );
    let y = x.mul(&mask).expect("mask built from x's shape");
    (y, Some(mask))
}

pub fn dropout_backward<T: Element>(
    mask: Option<&Tensor<T>>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    match mask {
        Some(m) => m.mul(upstream),
        None => Ok(upstream.clone()),
    }
}

/// Spatial mean per channel: `[N,h,w,c] → [N,c]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    let area = (h * w) as f64;
    let mut out = Vec::with_capacity(n * c);
    for sample in x.data().chunks(h * w * c) {
        let mut acc = vec![0.0f64; c];
        for px in sample.chunks(c) {
            for ch in 0..c {
                acc[ch] += px[ch].as_f64();
            }
        }
        out.extend(acc.into_iter().map(|s| T::of(s / area)));
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = input_shape else {
        return Err(Error::dim("global_avg_pool_backward", "input shape must be rank 4"));
    };
    if upstream.shape() != [*n, *c] {
        return Err(Error::dim(
            "global_avg_pool_backward",
            format!("upstream [{}]", ShapeDisplay(upstream.shape())),
        ));
    }
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * h * w * c);
    for row in upstream.data().chunks(*c) {
        for _ in 0..h * w {
            out.extend(row.iter().map(|&g| g * inv));
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// `x · W + b` with the bias broadcast over rows.
pub fn dense<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = weight.dims2()?;
    if bias.shape() != [k] {
        return Err(Error::dim(
            "dense",
            format!(
                "weight [{}] bias [{}]",
                ShapeDisplay(weight.shape()),
                ShapeDisplay(bias.shape())
            ),
        ));
    }
    let mut y = tensor::matmul(x, weight)?;
    for row in y.data_mut().chunks_mut(k) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Fully connected classifier layer, weight `[features, classes]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn register<T: Element, R: Rng + ?Sized>(
        reg: &mut Registry<T>,
        prefix: &str,
        features: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (features + classes) as f64).sqrt();
        Dense {
            weight: reg.add_param(
                format!("{prefix}.weight"),
                Tensor::uniform(&[features, classes], -limit, limit, rng),
            ),
            bias: reg.add_param(format!("{prefix}.bias"), Tensor::zeros(&[classes])),
        }
    }

    pub fn forward<T: Element>(&self, reg: &Registry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, reg.param(self.weight), reg.param(self.bias))
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        x: &Tensor<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let w = reg.param(self.weight);
        let (_, k) = upstream.dims2()?;
        let dw = tensor::matmul(&tensor::transpose(x)?, upstream)?;
        let mut db = Tensor::zeros(&[k]);
        for row in upstream.data().chunks(k) {
            for (a, &g) in db.data_mut().iter_mut().zip(row) {
                *a += g;
            }
        }
        grads.accumulate(self.weight, &dw)?;
        grads.accumulate(self.bias, &db)?;
        tensor::matmul(upstream, &tensor::transpose(w)?)
    }
}

/// Bias-free convolution with a registered kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element, R: Rng + ?Sized>(
        reg: &mut Registry<T>,
        name: &str,
        k: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        Conv {
            kernel: reg.add_param(
                format!("{name}.kernel"),
                Tensor::randn(&[k, k, c_in, c_out], std, rng),
            ),
            spec: ConvSpec::same(k, stride),
        }
    }

    pub fn forward<T: Element>(&self, reg: &Registry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, reg.param(self.kernel), self.spec)
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        x: &Tensor<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dk) = conv2d_backward(x, reg.param(self.kernel), self.spec, upstream)?;
        grads.accumulate(self.kernel, &dk)?;
        Ok(dx)
    }

    pub fn out_channels<T: Element>(&self, reg: &Registry<T>) -> usize {
        reg.param(self.kernel).shape()[3]
    }
}

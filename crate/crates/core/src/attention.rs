//! Area attention: a feature map is tiled into non-overlapping `a × b` areas
//! and each area is rescaled by a single learned gate.
//!
//! For every area `A`:
//!
//! ```text
//! u = BN(W1 * A)            1×1 conv to c_mid channels, then batch norm
//! v = W2 * u                3×3 conv to one channel, zero padded at the area border
//! α = sigmoid(mean(v))      one scalar per area
//! out = A ⊙ α
//! ```
//!
//! When the map extent is not a multiple of the area size the last row/column
//! of areas is ragged. Those areas behave exactly like smaller areas: pad
//! pixels are zero inputs to the 3×3 conv and are left out of the mean.
//!
//! [`AreaAttention::forward`] evaluates all areas at once over the whole map;
//! [`area_attention_reference`] loops over areas with isolated small
//! convolutions and exists to cross-check it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{sigmoid_scalar, BatchNorm, BatchNormCache, Mode, StatUpdates};
use crate::params::{Grads, ParamId, Registry};
use crate::tensor::{self, conv2d, ConvSpec, Element, ShapeDisplay, Tensor};

const GATE_KERNEL: usize = 3;

/// Width of the 1×1 reduction inside the gate.
pub fn reduced_channels(c: usize) -> usize {
    (c / 8).max(1)
}

#[derive(Debug, Clone)]
pub struct AreaAttention {
    /// `[1, 1, c, c_mid]`
    pub w1: ParamId,
    pub bn: BatchNorm,
    /// `[3, 3, c_mid, 1]`
    pub w2: ParamId,
    pub area_h: usize,
    pub area_w: usize,
    pub channels: usize,
    pub mid: usize,
}

/// Tiling of an `h × w` map into `a × b` areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AreaGrid {
    pub h: usize,
    pub w: usize,
    pub area_h: usize,
    pub area_w: usize,
    pub rows: usize,
    pub cols: usize,
}

impl AreaGrid {
    pub fn new(h: usize, w: usize, area_h: usize, area_w: usize) -> Result<Self> {
        if area_h == 0 || area_w == 0 {
            return Err(Error::config("area", "area extents must be >= 1"));
        }
        Ok(AreaGrid {
            h,
            w,
            area_h,
            area_w,
            rows: h.div_ceil(area_h),
            cols: w.div_ceil(area_w),
        })
    }

    /// Row range `[start, end)` of area row `i`, clipped to the map.
    pub fn row_span(&self, i: usize) -> (usize, usize) {
        (i * self.area_h, ((i + 1) * self.area_h).min(self.h))
    }

    pub fn col_span(&self, j: usize) -> (usize, usize) {
        (j * self.area_w, ((j + 1) * self.area_w).min(self.w))
    }

    /// Number of real (unpadded) pixels in area `(i, j)`.
    pub fn real_count(&self, i: usize, j: usize) -> usize {
        let (r0, r1) = self.row_span(i);
        let (c0, c1) = self.col_span(j);
        (r1 - r0) * (c1 - c0)
    }

    pub fn area_of(&self, y: usize, x: usize) -> (usize, usize) {
        (y / self.area_h, x / self.area_w)
    }
}

/// Original spatial extents of a map before [`area_partition`] padded it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub h: usize,
    pub w: usize,
}

/// Splits `[N,h,w,c]` into `[N, ceil(h/a), ceil(w/b), a, b, c]` tiles,
/// zero padding the bottom/right edge as needed.
pub fn area_partition<T: Element>(
    feature: &Tensor<T>,
    area_h: usize,
    area_w: usize,
) -> Result<(Tensor<T>, PadRecord)> {
    let (n, h, w, c) = feature.dims4()?;
    let grid = AreaGrid::new(h, w, area_h, area_w)?;
    let padded = tensor::pad2d(
        feature,
        0,
        grid.rows * area_h - h,
        0,
        grid.cols * area_w - w,
        T::zero(),
    )?;
    let pw = grid.cols * area_w;
    let ph = grid.rows * area_h;
    let src = padded.data();
    let mut out = Vec::with_capacity(padded.len());
    for b in 0..n {
        for i in 0..grid.rows {
            for j in 0..grid.cols {
                for y in 0..area_h {
                    let row = (b * ph + i * area_h + y) * pw + j * area_w;
                    out.extend_from_slice(&src[row * c..(row + area_w) * c]);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, grid.rows, grid.cols, area_h, area_w, c], out),
        PadRecord { h, w },
    ))
}

/// Inverse of [`area_partition`]: reassembles tiles and crops the padding.
pub fn area_merge<T: Element>(areas: &Tensor<T>, record: PadRecord) -> Result<Tensor<T>> {
    let [n, rows, cols, ah, aw, c] = areas.shape()[..] else {
        return Err(Error::dim(
            "area_merge",
            format!("expected rank-6 tiles, got [{}]", ShapeDisplay(areas.shape())),
        ));
    };
    let (ph, pw) = (rows * ah, cols * aw);
    let mut full = vec![T::zero(); n * ph * pw * c];
    let src = areas.data();
    let mut k = 0;
    for b in 0..n {
        for i in 0..rows {
            for j in 0..cols {
                for y in 0..ah {
                    let row = (b * ph + i * ah + y) * pw + j * aw;
                    full[row * c..(row + aw) * c].copy_from_slice(&src[k..k + aw * c]);
                    k += aw * c;
                }
            }
        }
    }
    let full = Tensor::from_parts(vec![n, ph, pw, c], full);
    tensor::crop2d(&full, 0, 0, record.h, record.w)
}

/// Whether backward propagates through the gate's dependence on the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateGradient {
    Full,
    /// Treat α as a constant. Only useful for diagnostics.
    Detached,
}

#[derive(Debug, Clone)]
pub struct AreaAttentionCache<T> {
    grid: AreaGrid,
    input: Tensor<T>,
    bn_cache: BatchNormCache<T>,
    /// BN output feeding the 3×3 conv, `[N,h,w,c_mid]`.
    normed: Tensor<T>,
    alpha: Tensor<T>,
}

impl<T: Element> AreaAttentionCache<T> {
    pub fn alpha(&self) -> &Tensor<T> {
        &self.alpha
    }
}

impl AreaAttention {
    pub fn register<T: Element, R: Rng + ?Sized>(
        reg: &mut Registry<T>,
        prefix: &str,
        channels: usize,
        area_h: usize,
        area_w: usize,
        rng: &mut R,
    ) -> Self {
        let mid = reduced_channels(channels);
        let w1 = reg.add_param(
            format!("{prefix}.w1"),
            Tensor::randn(&[1, 1, channels, mid], (2.0 / channels as f64).sqrt(), rng),
        );
        let bn = BatchNorm::register(reg, &format!("{prefix}.bn"), mid);
        let fan_in = (GATE_KERNEL * GATE_KERNEL * mid) as f64;
        let w2 = reg.add_param(
            format!("{prefix}.w2"),
            Tensor::randn(&[GATE_KERNEL, GATE_KERNEL, mid, 1], (2.0 / fan_in).sqrt(), rng),
        );
        AreaAttention {
            w1,
            bn,
            w2,
            area_h,
            area_w,
            channels,
            mid,
        }
    }

    fn check_input<T: Element>(&self, feature: &Tensor<T>) -> Result<AreaGrid> {
        let (_, h, w, c) = feature.dims4()?;
        if c != self.channels {
            return Err(Error::dim(
                "area_attention",
                format!(
                    "feature [{}] vs gate built for {} channels",
                    ShapeDisplay(feature.shape()),
                    self.channels
                ),
            ));
        }
        AreaGrid::new(h, w, self.area_h, self.area_w)
    }

    /// Returns the gated map (same shape as `feature`) and the per-area
    /// gates `α` as `[N, rows, cols]`.
    pub fn forward<T: Element>(
        &self,
        reg: &Registry<T>,
        feature: &Tensor<T>,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<(Tensor<T>, AreaAttentionCache<T>)> {
        let grid = self.check_input(feature)?;
        let (n, h, w, c) = feature.dims4()?;
        let u = conv2d(feature, reg.param(self.w1), ConvSpec::same(1, 1))?;
        let (normed, bn_cache) = self.bn.forward(reg, &u, mode, updates)?;
        let v = area_conv(&normed, reg.param(self.w2), &grid)?;

        let mut alpha = Vec::with_capacity(n * grid.rows * grid.cols);
        let vd = v.data();
        for b in 0..n {
            let mut sums = vec![0.0f64; grid.rows * grid.cols];
            for y in 0..h {
                for x in 0..w {
                    let (i, j) = grid.area_of(y, x);
                    sums[i * grid.cols + j] += vd[(b * h + y) * w + x].as_f64();
                }
            }
            for i in 0..grid.rows {
                for j in 0..grid.cols {
                    let mean = sums[i * grid.cols + j] / grid.real_count(i, j) as f64;
                    alpha.push(sigmoid_scalar(T::of(mean)));
                }
            }
        }
        let alpha = Tensor::from_parts(vec![n, grid.rows, grid.cols], alpha);

        let mut out = feature.data().to_vec();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (i, j) = grid.area_of(y, x);
                    let g = alpha.data()[(b * grid.rows + i) * grid.cols + j];
                    for v in &mut out[((b * h + y) * w + x) * c..][..c] {
                        *v *= g;
                    }
                }
            }
        }
        Ok((
            Tensor::from_parts(feature.shape().to_vec(), out),
            AreaAttentionCache {
                grid,
                input: feature.clone(),
                bn_cache,
                normed,
                alpha,
            },
        ))
    }

    pub fn backward<T: Element>(
        &self,
        reg: &Registry<T>,
        cache: &AreaAttentionCache<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        self.backward_with(reg, cache, upstream, grads, GateGradient::Full)
    }

    pub fn backward_with<T: Element>(
        &self,
        reg: &Registry<T>,
        cache: &AreaAttentionCache<T>,
        upstream: &Tensor<T>,
        grads: &mut Grads<T>,
        gate: GateGradient,
    ) -> Result<Tensor<T>> {
        upstream.expect_same_shape(&cache.input, "area_attention_backward")?;
        let grid = cache.grid;
        let (n, h, w, c) = cache.input.dims4()?;
        let per_sample = grid.rows * grid.cols;
        let alpha = cache.alpha.data();
        let fx = cache.input.data();
        let up = upstream.data();

        let mut d_feature = Vec::with_capacity(up.len());
        let mut d_alpha = vec![0.0f64; n * per_sample];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (i, j) = grid.area_of(y, x);
                    let a_idx = b * per_sample + i * grid.cols + j;
                    let g = alpha[a_idx];
                    let base = ((b * h + y) * w + x) * c;
                    for ch in 0..c {
                        d_feature.push(up[base + ch] * g);
                        d_alpha[a_idx] += up[base + ch].as_f64() * fx[base + ch].as_f64();
                    }
                }
            }
        }
        let mut d_feature = Tensor::from_parts(cache.input.shape().to_vec(), d_feature);
        if gate == GateGradient::Detached {
            return Ok(d_feature);
        }

        // Through sigmoid and the area mean onto every real pixel of v.
        let mut dv = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (i, j) = grid.area_of(y, x);
                    let a_idx = b * per_sample + i * grid.cols + j;
                    let s = alpha[a_idx].as_f64();
                    let ds = d_alpha[a_idx] * s * (1.0 - s);
                    dv.push(T::of(ds / grid.real_count(i, j) as f64));
                }
            }
        }
        let dv = Tensor::from_parts(vec![n, h, w, 1], dv);
        let (d_normed, d_w2) = area_conv_backward(&cache.normed, reg.param(self.w2), &grid, &dv)?;
        grads.accumulate(self.w2, &d_w2)?;
        let du = self.bn.backward(reg, &cache.bn_cache, &d_normed, grads)?;
        let (d_gate_in, d_w1) =
            tensor::conv2d_backward(&cache.input, reg.param(self.w1), ConvSpec::same(1, 1), &du)?;
        grads.accumulate(self.w1, &d_w1)?;
        d_feature.add_assign(&d_gate_in)?;
        Ok(d_feature)
    }
}

/// SAME convolution to a single channel in which taps never cross an area border.
fn area_conv<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, grid: &AreaGrid) -> Result<Tensor<T>> {
    let (n, h, w, cm) = x.dims4()?;
    let (kh, kw, kc, co) = kernel.dims4()?;
    if kc != cm || co != 1 {
        return Err(Error::dim(
            "area_conv",
            format!(
                "input [{}] kernel [{}]",
                ShapeDisplay(x.shape()),
                ShapeDisplay(kernel.shape())
            ),
        ));
    }
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n * h * w];
    for b in 0..n {
        for y in 0..h {
            let (r0, r1) = grid.row_span(y / grid.area_h);
            for xx in 0..w {
                let (c0, c1) = grid.col_span(xx / grid.area_w);
                let mut acc = T::zero();
                for ky in 0..kh {
                    let Some(iy) = (y + ky).checked_sub(pt).filter(|&v| v >= r0 && v < r1) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = (xx + kx).checked_sub(pl).filter(|&v| v >= c0 && v < c1)
                        else {
                            continue;
                        };
                        let px = &xd[((b * h + iy) * w + ix) * cm..][..cm];
                        let tap = &kd[(ky * kw + kx) * cm..][..cm];
                        for (&a, &k) in px.iter().zip(tap) {
                            acc += a * k;
                        }
                    }
                }
                out[(b * h + y) * w + xx] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, h, w, 1], out))
}

fn area_conv_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grid: &AreaGrid,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, h, w, cm) = x.dims4()?;
    let (kh, kw, _, _) = kernel.dims4()?;
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let kd = kernel.data();
    let ud = upstream.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for b in 0..n {
        for y in 0..h {
            let (r0, r1) = grid.row_span(y / grid.area_h);
            for xx in 0..w {
                let (c0, c1) = grid.col_span(xx / grid.area_w);
                let g = ud[(b * h + y) * w + xx];
                for ky in 0..kh {
                    let Some(iy) = (y + ky).checked_sub(pt).filter(|&v| v >= r0 && v < r1) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = (xx + kx).checked_sub(pl).filter(|&v| v >= c0 && v < c1)
                        else {
                            continue;
                        };
                        let base = ((b * h + iy) * w + ix) * cm;
                        let tap = (ky * kw + kx) * cm;
                        for m in 0..cm {
                            dx[base + m] += kd[tap + m] * g;
                            dk[tap + m] += xd[base + m] * g;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    ))
}

/// Area attention computed one area at a time with isolated convolutions on
/// padded tiles. Same contract as [`AreaAttention::forward`] but shares none
/// of its batching; running statistics are read, never updated.
pub fn area_attention_reference<T: Element>(
    layer: &AreaAttention,
    reg: &Registry<T>,
    feature: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let grid = layer.check_input(feature)?;
    let (ah, aw) = (layer.area_h, layer.area_w);
    let (tiles, record) = area_partition(feature, ah, aw)?;
    let [n, rows, cols, _, _, c] = tiles.shape()[..] else {
        unreachable!("area_partition returns rank 6")
    };
    let cm = layer.mid;
    let tile_len = ah * aw * c;
    let is_real = |i: usize, j: usize, y: usize, x: usize| {
        i * ah + y < grid.h && j * aw + x < grid.w
    };

    // 1×1 conv per tile.
    let mut reduced = Vec::new();
    for t in 0..n * rows * cols {
        let tile = Tensor::from_parts(
            vec![1, ah, aw, c],
            tiles.data()[t * tile_len..(t + 1) * tile_len].to_vec(),
        );
        reduced.push(conv2d(&tile, reg.param(layer.w1), ConvSpec::same(1, 1))?);
    }

    // Batch statistics gathered from real pixels of every tile.
    let (mean, var) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; cm];
            let mut sq = vec![0.0f64; cm];
            let mut count = 0usize;
            for (t, u) in reduced.iter().enumerate() {
                let (i, j) = ((t / cols) % rows, t % cols);
                for y in 0..ah {
                    for x in 0..aw {
                        if !is_real(i, j, y, x) {
                            continue;
                        }
                        count += 1;
                        let px = &u.data()[(y * aw + x) * cm..(y * aw + x + 1) * cm];
                        for (s, v) in sum.iter_mut().zip(px) {
                            *s += v.as_f64();
                        }
                    }
                }
            }
            if count < 2 {
                return Err(Error::DegenerateBatch(count));
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            for (t, u) in reduced.iter().enumerate() {
                let (i, j) = ((t / cols) % rows, t % cols);
                for y in 0..ah {
                    for x in 0..aw {
                        if !is_real(i, j, y, x) {
                            continue;
                        }
                        for m in 0..cm {
                            let d = u.data()[(y * aw + x) * cm + m].as_f64() - mean[m];
                            sq[m] += d * d;
                        }
                    }
                }
            }
            (mean, sq.iter().map(|s| s / count as f64).collect::<Vec<_>>())
        }
        Mode::Infer => (
            reg.buffer(layer.bn.running_mean)
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
            reg.buffer(layer.bn.running_var)
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        ),
    };
    let gamma = reg.param(layer.bn.gamma).data();
    let beta = reg.param(layer.bn.beta).data();

    let mut gated = Vec::with_capacity(tiles.len());
    let mut alphas = Vec::with_capacity(n * rows * cols);
    for (t, u) in reduced.iter().enumerate() {
        let (i, j) = ((t / cols) % rows, t % cols);
        let mut normed = vec![T::zero(); ah * aw * cm];
        for y in 0..ah {
            for x in 0..aw {
                if !is_real(i, j, y, x) {
                    continue;
                }
                for m in 0..cm {
                    let v = u.data()[(y * aw + x) * cm + m].as_f64();
                    let xh = T::of((v - mean[m]) / (var[m] + layer.bn.epsilon).sqrt());
                    normed[(y * aw + x) * cm + m] = gamma[m] * xh + beta[m];
                }
            }
        }
        let normed = Tensor::from_parts(vec![1, ah, aw, cm], normed);
        let v = conv2d(
            &normed,
            reg.param(layer.w2),
            ConvSpec::same(GATE_KERNEL, 1),
        )?;
        let mut total = 0.0f64;
        for y in 0..ah {
            for x in 0..aw {
                if is_real(i, j, y, x) {
                    total += v.data()[y * aw + x].as_f64();
                }
            }
        }
        let alpha = sigmoid_scalar(T::of(total / grid.real_count(i, j) as f64));
        alphas.push(alpha);
        gated.extend(
            tiles.data()[t * tile_len..(t + 1) * tile_len]
                .iter()
                .map(|&f| f * alpha),
        );
    }
    let gated = Tensor::from_parts(tiles.shape().to_vec(), gated);
    Ok((
        area_merge(&gated, record)?,
        Tensor::from_parts(vec![n, rows, cols], alphas),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn setup<T: Element>(c: usize, a: usize, b: usize, seed: u64) -> (Registry<T>, AreaAttention) {
        let mut r = rng(seed);
        let mut reg = Registry::new();
        let layer = AreaAttention::register(&mut reg, "att", c, a, b, &mut r);
        let m = layer.mid;
        *reg.param_mut(layer.bn.gamma) = Tensor::uniform(&[m], 0.5, 1.5, &mut r);
        *reg.param_mut(layer.bn.beta) = Tensor::randn(&[m], 0.5, &mut r);
        *reg.buffer_mut(layer.bn.running_mean) = Tensor::randn(&[m], 0.5, &mut r);
        *reg.buffer_mut(layer.bn.running_var) = Tensor::uniform(&[m], 0.5, 2.0, &mut r);
        (reg, layer)
    }

    #[test]
    fn partition_exact_and_ragged() {
        let x = Tensor::<f32>::randn(&[1, 8, 8, 2], 1.0, &mut rng(0));
        let (t, rec) = area_partition(&x, 4, 4).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2, 4, 4, 2]);
        assert_eq!(rec, PadRecord { h: 8, w: 8 });
        let x = Tensor::<f32>::randn(&[1, 7, 7, 1], 1.0, &mut rng(0));
        let (t, rec) = area_partition(&x, 4, 4).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2, 4, 4, 1]);
        assert_eq!(rec, PadRecord { h: 7, w: 7 });
    }

    #[test]
    fn zero_feature_gives_zero_output() {
        let (reg, layer) = setup::<f64>(4, 4, 4, 1);
        let x = Tensor::zeros(&[2, 8, 8, 4]);
        let (y, cache) = layer.forward(&reg, &x, Mode::Train, &mut Vec::new()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(cache.alpha().data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn matches_reference_on_grid() {
        let mut case = 0;
        for (h, w) in [(7, 8), (8, 8), (14, 16), (16, 14)] {
            for a in [1, 4, 7] {
                for c in [1, 4, 8] {
                    for mode in [Mode::Train, Mode::Infer] {
                        case += 1;
                        let (reg, layer) = setup::<f64>(c, a, a, case);
                        let x = Tensor::<f64>::randn(&[2, h, w, c], 1.0, &mut rng(case + 99));
                        let (y, cache) = layer.forward(&reg, &x, mode, &mut Vec::new()).unwrap();
                        let (yr, ar) = area_attention_reference(&layer, &reg, &x, mode).unwrap();
                        assert!(y.max_abs_diff(&yr) <= 1e-6, "h={h} w={w} a={a} c={c}");
                        assert!(cache.alpha().max_abs_diff(&ar) <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn single_area_is_one_scalar_gate() {
        let (reg, layer) = setup::<f64>(3, 5, 6, 4);
        let x = Tensor::<f64>::randn(&[1, 5, 6, 3], 1.0, &mut rng(5));
        let (y, cache) = layer.forward(&reg, &x, Mode::Infer, &mut Vec::new()).unwrap();
        assert_eq!(cache.alpha().shape(), &[1, 1, 1]);
        let a = cache.alpha().data()[0];
        // Whole-map pipeline with ordinary SAME padding.
        let u = conv2d(&x, reg.param(layer.w1), ConvSpec::same(1, 1)).unwrap();
        let (un, _) = layer.bn.forward(&reg, &u, Mode::Infer, &mut Vec::new()).unwrap();
        let v = conv2d(&un, reg.param(layer.w2), ConvSpec::same(3, 1)).unwrap();
        let want = sigmoid_scalar(v.sum() / 30.0);
        assert!((a - want).abs() < 1e-12);
        for (&o, &i) in y.data().iter().zip(x.data()) {
            assert!((o - i * a).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_areas_gate_each_pixel_pointwise() {
        let (reg, layer) = setup::<f64>(4, 1, 1, 6);
        let x = Tensor::<f64>::randn(&[1, 3, 3, 4], 1.0, &mut rng(7));
        let (_, cache) = layer.forward(&reg, &x, Mode::Infer, &mut Vec::new()).unwrap();
        let u = conv2d(&x, reg.param(layer.w1), ConvSpec::same(1, 1)).unwrap();
        let (un, _) = layer.bn.forward(&reg, &u, Mode::Infer, &mut Vec::new()).unwrap();
        // Only the centre tap of W2 sees a 1×1 area.
        let w2 = reg.param(layer.w2);
        let centre = &w2.data()[4 * layer.mid..5 * layer.mid];
        for p in 0..9 {
            let s: f64 = un.data()[p * layer.mid..(p + 1) * layer.mid]
                .iter()
                .zip(centre)
                .map(|(a, b)| a * b)
                .sum();
            assert!((cache.alpha().data()[p] - sigmoid_scalar(s)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream_and_detached_gate() {
        let (reg, layer) = setup::<f64>(4, 3, 3, 8);
        let x = Tensor::<f64>::randn(&[2, 7, 7, 4], 1.0, &mut rng(9));
        let (_, cache) = layer.forward(&reg, &x, Mode::Train, &mut Vec::new()).unwrap();
        let mut grads = Grads::zeros_for(&reg);
        let d = layer
            .backward(&reg, &cache, &Tensor::zeros(x.shape()), &mut grads)
            .unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert!(grads.tensors().iter().all(|g| g.data().iter().all(|&v| v == 0.0)));

        let up = Tensor::<f64>::randn(x.shape(), 1.0, &mut rng(10));
        let d = layer
            .backward_with(&reg, &cache, &up, &mut grads, GateGradient::Detached)
            .unwrap();
        let grid = AreaGrid::new(7, 7, 3, 3).unwrap();
        for b in 0..2 {
            for y in 0..7 {
                for xx in 0..7 {
                    let (i, j) = grid.area_of(y, xx);
                    let a = cache.alpha().data()[(b * 3 + i) * 3 + j];
                    for ch in 0..4 {
                        let p = ((b * 7 + y) * 7 + xx) * 4 + ch;
                        assert_eq!(d.data()[p], up.data()[p] * a);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_fd_including_gate() {
        for seed in 0..5u64 {
            for mode in [Mode::Train, Mode::Infer] {
                let (reg, layer) = setup::<f64>(4, 3, 4, seed);
                let x = Tensor::<f64>::randn(&[2, 7, 8, 4], 1.0, &mut rng(seed + 50));
                let up = Tensor::<f64>::randn(x.shape(), 1.0, &mut rng(seed + 60));
                let (_, cache) = layer.forward(&reg, &x, mode, &mut Vec::new()).unwrap();
                let mut grads = Grads::zeros_for(&reg);
                let dx = layer.backward(&reg, &cache, &up, &mut grads).unwrap();
                let loss = |reg: &Registry<f64>, x: &Tensor<f64>| {
                    layer.forward(reg, x, mode, &mut Vec::new()).unwrap().0.dot(&up)
                };
                let nx = central_difference(&x, 1e-6, |x| loss(&reg, x));
                assert!(rel_error(&dx, &nx) <= 1e-5, "input {mode:?}");
                for (k, p) in reg.params().iter().enumerate() {
                    let id = ParamId(k);
                    let np = central_difference(&p.tensor, 1e-6, |t| {
                        let mut r2 = reg.clone();
                        *r2.param_mut(id) = t.clone();
                        loss(&r2, &x)
                    });
                    assert!(rel_error(grads.get(id), &np) <= 1e-5, "{} {mode:?}", p.name);
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (reg, layer) = setup::<f32>(4, 2, 2, 0);
        let x = Tensor::zeros(&[1, 4, 4, 3]);
        assert!(matches!(
            layer.forward(&reg, &x, Mode::Infer, &mut Vec::new()),
            Err(Error::Dimension { .. })
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn partition_merge_round_trip(
            h in 1usize..10, w in 1usize..10, a in 1usize..6, b in 1usize..6, seed in 0u64..500,
        ) {
            let x = Tensor::<f32>::randn(&[2, h, w, 3], 1.0, &mut rng(seed));
            let (t, rec) = area_partition(&x, a, b).unwrap();
            proptest::prop_assert_eq!(area_merge(&t, rec).unwrap(), x);
        }

        #[test]
        fn gating_shrinks_and_preserves_sign(
            h in 1usize..9, w in 1usize..9, a in 1usize..10, b in 1usize..10, seed in 0u64..500,
        ) {
            let (reg, layer) = setup::<f64>(2, a, b, seed);
            let x = Tensor::<f64>::randn(&[2, h, w, 2], 1.0, &mut rng(seed + 1));
            let (y, cache) = layer.forward(&reg, &x, Mode::Infer, &mut Vec::new()).unwrap();
            proptest::prop_assert_eq!(y.shape(), x.shape());
            proptest::prop_assert!(cache.alpha().data().iter().all(|&a| a > 0.0 && a < 1.0));
            for (&o, &i) in y.data().iter().zip(x.data()) {
                proptest::prop_assert!(o == 0.0 || o.signum() == i.signum());
                if i != 0.0 {
                    proptest::prop_assert!(o.abs() < i.abs());
                }
            }
        }
    }
}

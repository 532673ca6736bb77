//! Central finite-difference checks for every differentiable layer.
//!
//! The primitives ([`central_difference`], [`rel_error`]) are shared by unit
//! tests across the crate. [`run_suite`] checks each entry of
//! [`LAYER_REGISTRY`] over several seeds and reports the worst relative error.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::attention::AreaAttention;
use crate::error::{Error, Result};
use crate::layers::{self, BatchNorm, Conv, Dense, DropoutSpec, Mode};
use crate::model::{Downsample, ModelConfig, ResLinkModel, ResidualBlock, Stem};
use crate::params::{Grads, ParamId, Registry};
use crate::tensor::{self, DType, Element, Padding, Tensor};
use crate::ModelRng;

/// Central-difference estimate of `∂f/∂x` at every element of `x`.
pub fn central_difference<T: Element>(
    x: &Tensor<T>,
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Tensor<f64> {
    let indices: Vec<usize> = (0..x.len()).collect();
    let values = central_difference_at(x, &indices, step, &mut f);
    Tensor::from_parts(x.shape().to_vec(), values)
}

/// Central-difference estimate at the listed flat indices only.
pub fn central_difference_at<T: Element>(
    x: &Tensor<T>,
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::of(orig.as_f64() + step);
            let plus = f(&probe);
            probe.data_mut()[i] = T::of(orig.as_f64() - step);
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            // Use the step actually representable in T.
            let h = T::of(orig.as_f64() + step).as_f64() - T::of(orig.as_f64() - step).as_f64();
            (plus - minus) / h
        })
        .collect()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)` over the whole gradient; 0 when both vanish.
pub fn rel_error<T: Element>(analytic: &Tensor<T>, numeric: &Tensor<f64>) -> f64 {
    let a: Vec<f64> = analytic.data().iter().map(|v| v.as_f64()).collect();
    rel_error_slices(&a, numeric.data())
}

pub fn rel_error_slices(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    if diff == 0.0 {
        return 0.0;
    }
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale
}

/// Largest relative error allowed in each precision.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-5,
        DType::F32 => 1e-3,
    }
}

/// Finite-difference step used in each precision.
pub fn step(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-6,
        DType::F32 => 1e-3,
    }
}

/// Inputs shared by every check.
#[derive(Debug, Clone)]
pub struct CheckInput<'a> {
    pub seed: u64,
    /// Composed-model architecture.
    pub model: &'a ModelConfig,
    /// Scale analytic gradients before comparing, simulating a broken backward.
    pub corrupt: bool,
}

type CheckFn = fn(&CheckInput) -> Result<f64>;

pub struct LayerEntry {
    pub name: &'static str,
    f64: CheckFn,
    f32: CheckFn,
}

impl LayerEntry {
    /// Worst relative error over the input and every parameter.
    pub fn check(&self, dtype: DType, input: &CheckInput) -> Result<f64> {
        match dtype {
            DType::F64 => (self.f64)(input),
            DType::F32 => (self.f32)(input),
        }
    }
}

macro_rules! entry {
    ($name:literal, $f:ident) => {
        LayerEntry {
            name: $name,
            f64: $f::<f64>,
            f32: $f::<f32>,
        }
    };
}

/// Every differentiable unit checked by [`run_suite`], in report order.
pub const LAYER_REGISTRY: &[LayerEntry] = &[
    entry!("conv2d", check_conv),
    entry!("conv2d_stride2", check_conv_strided),
    entry!("batchnorm_train", check_bn_train),
    entry!("batchnorm_infer", check_bn_infer),
    entry!("relu", check_relu),
    entry!("maxpool", check_maxpool),
    entry!("global_avg_pool", check_gap),
    entry!("dense", check_dense),
    entry!("dropout", check_dropout),
    entry!("sigmoid", check_sigmoid),
    entry!("softmax", check_softmax),
    entry!("area_attention", check_attention),
    entry!("area_attention_infer", check_attention_infer),
    entry!("stem", check_stem),
    entry!("residual_block", check_block),
    entry!("residual_block_projection", check_block_projection),
    entry!("downsample", check_downsample),
    entry!("model", check_model),
];

fn rng(c: &CheckInput, salt: u64) -> ModelRng {
    ModelRng::seed_from_u64(c.seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt))
}

fn scaled<T: Element>(t: &Tensor<T>, corrupt: bool) -> Tensor<T> {
    if corrupt {
        t.map(|v| v * T::of(1.05))
    } else {
        t.clone()
    }
}

/// Compares `backward` against central differences of `Σ up ⊙ forward(x)`
/// for the input and every parameter in `reg`. The differences are taken
/// on an f64 copy of the unit at the same point, so in f32 the comparison
/// measures the f32 backward pass rather than f32 forward rounding.
fn check_unit<T: Element>(
    c: &CheckInput,
    reg: &Registry<T>,
    x: &Tensor<T>,
    forward: impl Fn(&Registry<T>, &Tensor<T>) -> Result<Tensor<T>>,
    forward64: impl Fn(&Registry<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    backward: impl Fn(&Registry<T>, &Tensor<T>, &Tensor<T>, &mut Grads<T>) -> Result<Tensor<T>>,
) -> Result<f64> {
    let y = forward(reg, x)?;
    let up = Tensor::<T>::randn(y.shape(), 1.0, &mut rng(c, 1));
    let mut grads = Grads::zeros_for(reg);
    let dx = backward(reg, x, &up, &mut grads)?;

    let (reg64, x64, up64) = (reg.cast::<f64>(), x.cast::<f64>(), up.cast::<f64>());
    let h = step(DType::F64);
    let mut failure = None;
    let mut loss = |reg: &Registry<f64>, x: &Tensor<f64>| match forward64(reg, x) {
        Ok(y) => y.dot(&up64),
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let nx = central_difference(&x64, h, |x| loss(&reg64, x));
    let mut worst = rel_error(&scaled(&dx, c.corrupt), &nx);
    for (k, named) in reg64.params().iter().enumerate() {
        let id = ParamId(k);
        let np = central_difference(&named.tensor, h, |t| {
            let mut probe = reg64.clone();
            *probe.param_mut(id) = t.clone();
            loss(&probe, &x64)
        });
        worst = worst.max(rel_error(&scaled(grads.get(id), c.corrupt), &np));
    }
    match failure {
        Some(e) => Err(e),
        None if worst.is_nan() => Err(Error::NumericFault("gradient check".into())),
        None => Ok(worst),
    }
}

/// Runs [`check_unit`] with one forward expression instantiated for both `T` and f64.
macro_rules! unit {
    ($c:expr, $reg:expr, $x:expr, |$r:ident, $xi:ident| $fwd:expr, |$r2:pat_param, $x2:pat_param, $up:pat_param, $g:pat_param| $bwd:expr $(,)?) => {
        check_unit(
            $c,
            $reg,
            $x,
            |$r: &Registry<T>, $xi: &Tensor<T>| $fwd,
            |$r: &Registry<f64>, $xi: &Tensor<f64>| $fwd,
            |$r2, $x2, $up, $g| $bwd,
        )
    };
}

/// Standard-normal values kept at least `gap` away from zero.
fn away_from_zero<T: Element>(shape: &[usize], gap: f64, r: &mut ModelRng) -> Tensor<T> {
    Tensor::<f64>::randn(shape, 1.0, r)
        .map(|v| v + gap.copysign(v))
        .cast()
}

fn check_conv<T: Element>(c: &CheckInput) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let conv = Conv::register(&mut reg, "conv", 3, 1, 3, 4, &mut r);
    let x = Tensor::<T>::randn(&[2, 5, 6, 3], 1.0, &mut r);
    unit!(c, &reg, &x, |reg, x| conv.forward(reg, x), |reg, x, up, g| conv.backward(reg, x, up, g))
}

fn check_conv_strided<T: Element>(c: &CheckInput) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let conv = Conv::register(&mut reg, "conv", 5, 2, 2, 3, &mut r);
    let x = Tensor::<T>::randn(&[2, 7, 8, 2], 1.0, &mut r);
    unit!(c, &reg, &x, |reg, x| conv.forward(reg, x), |reg, x, up, g| conv.backward(reg, x, up, g))
}

fn randomized_bn<T: Element>(reg: &mut Registry<T>, channels: usize, r: &mut ModelRng) -> BatchNorm {
    let bn = BatchNorm::register(reg, "bn", channels);
    *reg.param_mut(bn.gamma) = Tensor::uniform(&[channels], 0.5, 1.5, r);
    *reg.param_mut(bn.beta) = Tensor::randn(&[channels], 0.5, r);
    *reg.buffer_mut(bn.running_mean) = Tensor::randn(&[channels], 0.5, r);
    *reg.buffer_mut(bn.running_var) = Tensor::uniform(&[channels], 0.5, 2.0, r);
    bn
}

fn check_bn<T: Element>(c: &CheckInput, mode: Mode) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let bn = randomized_bn(&mut reg, 3, &mut r);
    let x = Tensor::<T>::randn(&[3, 4, 4, 3], 2.0, &mut r);
    unit!(
        c,
        &reg,
        &x,
        |reg, x| Ok(bn.forward(reg, x, mode, &mut Vec::new())?.0),
        |reg, x, up, g| {
            let (_, cache) = bn.forward(reg, x, mode, &mut Vec::new())?;
            bn.backward(reg, &cache, up, g)
        },
    )
}

fn check_bn_train<T: Element>(c: &CheckInput) -> Result<f64> {
    check_bn::<T>(c, Mode::Train)
}

fn check_bn_infer<T: Element>(c: &CheckInput) -> Result<f64> {
    check_bn::<T>(c, Mode::Infer)
}

fn check_relu<T: Element>(c: &CheckInput) -> Result<f64> {
    let x = away_from_zero::<T>(&[2, 4, 4, 3], 0.05, &mut rng(c, 0));
    unit!(
        c,
        &Registry::<T>::new(),
        &x,
        |_reg, x| Ok(layers::relu(x)),
        |_, x, up, _| layers::relu_backward(x, up),
    )
}

fn check_maxpool<T: Element>(c: &CheckInput) -> Result<f64> {
    // Distinct values spaced well beyond the step so no window has near-ties.
    let mut r = rng(c, 0);
    let shape = [2, 7, 7, 2];
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    values.shuffle(&mut r);
    let x = Tensor::new(shape.to_vec(), values)?.cast::<T>();
    unit!(
        c,
        &Registry::<T>::new(),
        &x,
        |_reg, x| Ok(tensor::maxpool2d(x, 3, 3, 2, Padding::Same)?.0),
        |_, x, up, _| {
            let (_, idx) = tensor::maxpool2d(x, 3, 3, 2, Padding::Same)?;
            tensor::maxpool2d_backward(&idx, up)
        },
    )
}

fn check_gap<T: Element>(c: &CheckInput) -> Result<f64> {
    let x = Tensor::<T>::randn(&[2, 3, 5, 4], 1.0, &mut rng(c, 0));
    unit!(
        c,
        &Registry::<T>::new(),
        &x,
        |_reg, x| layers::global_avg_pool(x),
        |_, x, up, _| layers::global_avg_pool_backward(x.shape(), up),
    )
}

fn check_dense<T: Element>(c: &CheckInput) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let dense = Dense::register(&mut reg, "dense", 6, 3, &mut r);
    *reg.param_mut(dense.bias) = Tensor::randn(&[3], 0.5, &mut r);
    let x = Tensor::<T>::randn(&[4, 6], 1.0, &mut r);
    unit!(c, &reg, &x, |reg, x| dense.forward(reg, x), |reg, x, up, g| dense.backward(reg, x, up, g))
}

fn check_dropout<T: Element>(c: &CheckInput) -> Result<f64> {
    let spec = DropoutSpec::new(0.4)?;
    let x = Tensor::<T>::randn(&[4, 6], 1.0, &mut rng(c, 0));
    // Same PRNG state on every call freezes the mask.
    let mask_rng = rng(c, 7);
    unit!(
        c,
        &Registry::<T>::new(),
        &x,
        |_reg, x| Ok(layers::dropout(x, spec, Mode::Train, &mut mask_rng.clone()).0),
        |_, x, up, _| {
            let (_, mask) = layers::dropout(x, spec, Mode::Train, &mut mask_rng.clone());
            layers::dropout_backward(mask.as_ref(), up)
        },
    )
}

fn check_sigmoid<T: Element>(c: &CheckInput) -> Result<f64> {
    let x = Tensor::<T>::randn(&[3, 4], 2.0, &mut rng(c, 0));
    unit!(
        c,
        &Registry::<T>::new(),
        &x,
        |_reg, x| Ok(layers::sigmoid(x)),
        |_, x, up, _| layers::sigmoid_backward(&layers::sigmoid(x), up),
    )
}

fn check_softmax<T: Element>(c: &CheckInput) -> Result<f64> {
    let x = Tensor::<T>::randn(&[3, 4], 2.0, &mut rng(c, 0));
    unit!(
        c,
        &Registry::<T>::new(),
        &x,
        |_reg, x| layers::softmax(x),
        |_, x, up, _| layers::softmax_backward(&layers::softmax(x)?, up),
    )
}

fn check_attention_in<T: Element>(c: &CheckInput, mode: Mode) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let att = AreaAttention::register(&mut reg, "att", 8, 3, 2, &mut r);
    let bn = att.bn.clone();
    *reg.param_mut(bn.gamma) = Tensor::uniform(&[1], 0.5, 1.5, &mut r);
    *reg.param_mut(bn.beta) = Tensor::randn(&[1], 0.5, &mut r);
    *reg.buffer_mut(bn.running_var) = Tensor::uniform(&[1], 0.5, 2.0, &mut r);
    // 7×5 map over 3×2 areas leaves ragged edges on both axes.
    let x = Tensor::<T>::randn(&[2, 7, 5, 8], 1.0, &mut r);
    unit!(
        c,
        &reg,
        &x,
        |reg, x| Ok(att.forward(reg, x, mode, &mut Vec::new())?.0),
        |reg, x, up, g| {
            let (_, cache) = att.forward(reg, x, mode, &mut Vec::new())?;
            att.backward(reg, &cache, up, g)
        },
    )
}

fn check_attention<T: Element>(c: &CheckInput) -> Result<f64> {
    check_attention_in::<T>(c, Mode::Train)
}

fn check_attention_infer<T: Element>(c: &CheckInput) -> Result<f64> {
    check_attention_in::<T>(c, Mode::Infer)
}

fn check_stem<T: Element>(c: &CheckInput) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let stem = Stem {
        conv: Conv::register(&mut reg, "stem.conv", 7, 2, 2, 3, &mut r),
        bn: BatchNorm::register(&mut reg, "stem.bn", 3),
    };
    let x = Tensor::<T>::randn(&[2, 10, 10, 2], 1.0, &mut r);
    unit!(
        c,
        &reg,
        &x,
        |reg, x| Ok(stem.forward(reg, x, Mode::Train, &mut Vec::new())?.0),
        |reg, x, up, g| {
            let (_, cache) = stem.forward(reg, x, Mode::Train, &mut Vec::new())?;
            stem.backward(reg, &cache, up, g)
        },
    )
}

fn check_block_with<T: Element>(c: &CheckInput, c_in: usize, filters: usize) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let block = ResidualBlock::register(&mut reg, "block", c_in, filters, Some((4, 4)), false, &mut r);
    let x = Tensor::<T>::randn(&[2, 8, 8, c_in], 1.0, &mut r);
    unit!(
        c,
        &reg,
        &x,
        |reg, x| Ok(block.forward(reg, x, Mode::Train, &mut Vec::new())?.0),
        |reg, x, up, g| {
            let (_, cache) = block.forward(reg, x, Mode::Train, &mut Vec::new())?;
            block.backward(reg, &cache, up, g)
        },
    )
}

fn check_block<T: Element>(c: &CheckInput) -> Result<f64> {
    check_block_with::<T>(c, 4, 4)
}

fn check_block_projection<T: Element>(c: &CheckInput) -> Result<f64> {
    check_block_with::<T>(c, 3, 5)
}

fn check_downsample<T: Element>(c: &CheckInput) -> Result<f64> {
    let mut r = rng(c, 0);
    let mut reg = Registry::<T>::new();
    let down = Downsample {
        conv: Conv::register(&mut reg, "down.conv", 3, 2, 3, 3, &mut r),
        bn: BatchNorm::register(&mut reg, "down.bn", 3),
    };
    let x = Tensor::<T>::randn(&[2, 7, 7, 3], 1.0, &mut r);
    unit!(
        c,
        &reg,
        &x,
        |reg, x| Ok(down.forward(reg, x, Mode::Train, &mut Vec::new())?.0),
        |reg, x, up, g| {
            let (_, cache) = down.forward(reg, x, Mode::Train, &mut Vec::new())?;
            down.backward(reg, &cache, up, g)
        },
    )
}

/// Number of parameter scalars sampled in the composed-model check.
pub const MODEL_SAMPLES: usize = 50;

fn check_model<T: Element>(c: &CheckInput) -> Result<f64> {
    let mut r = rng(c, 0);
    let model = ResLinkModel::<T>::build(c.model.clone(), c.seed)?;
    let cfg = model.config();
    let x = Tensor::<T>::randn(&[2, cfg.input_h, cfg.input_w, cfg.input_c], 1.0, &mut r);
    let drop_rng = rng(c, 3);
    let (y, cache, _) = model.forward_detached(&x, Mode::Train, &mut drop_rng.clone())?;
    let up = Tensor::<T>::randn(y.shape(), 1.0, &mut r);
    let grads = model.backward(&cache, &up)?;

    let sizes: Vec<usize> = model.registry().params().iter().map(|p| p.tensor.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks = rand::seq::index::sample(&mut r, total, MODEL_SAMPLES.min(total));
    let model64 = model.cast::<f64>();
    let (x64, up64) = (x.cast::<f64>(), up.cast::<f64>());
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut failure = None;
    for flat in picks {
        let (mut k, mut offset) = (0, flat);
        while offset >= sizes[k] {
            offset -= sizes[k];
            k += 1;
        }
        let id = ParamId(k);
        let g = grads.get(id).data()[offset].as_f64();
        analytic.push(if c.corrupt { g * 1.05 } else { g });
        numeric.extend(central_difference_at(
            model64.registry().param(id),
            &[offset],
            step(DType::F64),
            |t| {
                let mut probe = model64.clone();
                *probe.registry_mut().param_mut(id) = t.clone();
                match probe.forward_detached(&x64, Mode::Train, &mut drop_rng.clone()) {
                    Ok((y, _, _)) => y.dot(&up64),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
        ));
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(rel_error_slices(&analytic, &numeric)),
    }
}

/// Worst error of one layer across all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

impl LayerResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub dtype: DType,
    pub seeds: usize,
    pub layers: Vec<LayerResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(LayerResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.layers.iter().filter(|l| !l.passed()).map(|l| l.name).collect()
    }

    /// One `name  worst  tolerance  ok|FAIL` line per layer.
    pub fn render(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:?} {:<width$}  max_rel_err {:.3e}  tol {:.0e}  {}",
                self.dtype,
                l.name,
                l.worst,
                l.tolerance,
                if l.passed() { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

/// Checks every registry entry for each seed. `fault` names a layer whose
/// analytic gradient is deliberately scaled, to exercise failure reporting.
pub fn run_suite(
    dtype: DType,
    seeds: &[u64],
    model: &ModelConfig,
    fault: Option<&str>,
) -> Result<SuiteReport> {
    if let Some(name) = fault {
        if !LAYER_REGISTRY.iter().any(|e| e.name == name) {
            return Err(Error::config("inject_fault", format!("unknown layer `{name}`")));
        }
    }
    model.validate()?;
    let layers = LAYER_REGISTRY
        .par_iter()
        .map(|entry| {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let input = CheckInput {
                    seed,
                    model,
                    corrupt: fault == Some(entry.name),
                };
                let err = entry.check(dtype, &input)?;
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            Ok(LayerResult {
                name: entry.name,
                worst,
                tolerance: tolerance(dtype),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        dtype,
        seeds: seeds.len(),
        layers,
    })
}

/// Small architecture used for the composed-model check by default.
pub fn reference_model() -> ModelConfig {
    ModelConfig {
        input_h: 12,
        input_w: 12,
        input_c: 2,
        stem_filters: 4,
        stage_filters: vec![4, 6],
        area_h: 2,
        area_w: 2,
        dropout_rate: 0.3,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_representable() {
        let x = Tensor::new(vec![1], vec![1000.0f32]).unwrap();
        let d = central_difference(&x, 1e-3, |t| t.data()[0] as f64 * 2.0);
        assert!((d.data()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rel_error_cases() {
        assert_eq!(rel_error_slices(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(rel_error_slices(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_error_slices(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_in_both_precisions() {
        let seeds: Vec<u64> = (0..5).collect();
        for dtype in [DType::F64, DType::F32] {
            let report = run_suite(dtype, &seeds, &reference_model(), None).unwrap();
            assert_eq!(report.layers.len(), LAYER_REGISTRY.len());
            assert!(report.passed(), "{}", report.render());
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let report = run_suite(DType::F64, &[0], &reference_model(), Some("dense")).unwrap();
        assert_eq!(report.failures(), ["dense"]);
        assert!(run_suite(DType::F64, &[0], &reference_model(), Some("nope")).is_err());
    }
}

//! Cross-entropy losses, Adam, and the epoch loop.

use std::fmt::Write as _;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, ImageSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics;
use crate::model::{Head, ResLinkModel};
use crate::params::{Grads, Registry};
use crate::tensor::{Element, ShapeDisplay, Tensor};
use crate::ModelRng;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before the log.
pub const CLIP: f64 = 1e-7;

fn clip(p: f64) -> f64 {
    p.clamp(CLIP, 1.0 - CLIP)
}

fn check_pair<T: Element>(y_hat: &Tensor<T>, y: &Tensor<T>, op: &'static str) -> Result<()> {
    y_hat.expect_same_shape(y, op)?;
    y_hat.dims2()?;
    if !y_hat.all_finite() {
        return Err(Error::NumericFault(format!("{op} prediction")));
    }
    Ok(())
}

/// Mean binary cross-entropy over `[N, 1]` and its gradient w.r.t. `y_hat`.
pub fn bce_loss<T: Element>(y_hat: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_pair(y_hat, y, "bce_loss")?;
    let n = y_hat.shape()[0] as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&p, &t) in y_hat.data().iter().zip(y.data()) {
        let t = t.as_f64();
        if t != 0.0 && t != 1.0 {
            return Err(Error::Input(format!("binary target {t} is not 0 or 1")));
        }
        let p = clip(p.as_f64());
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push(T::of((-t / p + (1.0 - t) / (1.0 - p)) / n));
    }
    Ok((loss / n, Tensor::new(y.shape().to_vec(), grad)?))
}

/// Mean categorical cross-entropy over `[N, k]` against one-hot targets.
pub fn cce_loss<T: Element>(y_hat: &Tensor<T>, y_onehot: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_pair(y_hat, y_onehot, "cce_loss")?;
    let (rows, k) = y_hat.dims2()?;
    let n = rows as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y_hat.len());
    for (r, (pr, yr)) in y_hat.data().chunks(k).zip(y_onehot.data().chunks(k)).enumerate() {
        let ones = yr.iter().filter(|v| v.as_f64() == 1.0).count();
        let zeros = yr.iter().filter(|v| v.as_f64() == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Input(format!("target row {r} is not one-hot")));
        }
        for (&p, &t) in pr.iter().zip(yr) {
            let (p, t) = (clip(p.as_f64()), t.as_f64());
            loss -= t * p.ln();
            grad.push(T::of(-t / p / n));
        }
    }
    Ok((loss / n, Tensor::new(y_hat.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        for (field, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} not in [0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("optim.epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zero moments shaped like every parameter of `reg`.
    pub fn new(config: AdamConfig, reg: &Registry<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = reg.params().iter().map(|p| Tensor::zeros_like(&p.tensor)).collect();
        Ok(AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Element>(
    reg: &mut Registry<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != reg.param_count() || state.m.len() != reg.param_count() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                reg.param_count(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in reg.params().iter().zip(grads.tensors()).zip(&state.m) {
        if p.tensor.shape() != g.shape() || p.tensor.shape() != m.shape() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "`{}` is [{}], gradient [{}]",
                    p.name,
                    ShapeDisplay(p.tensor.shape()),
                    ShapeDisplay(g.shape())
                ),
            ));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(c.lr), T::of(c.epsilon));
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for ((param, g), (m, v)) in reg.params_mut().iter_mut().zip(grads.tensors()).zip(moments) {
        let it = param
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and accuracy for one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Decision threshold for sigmoid heads.
    pub threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            batch_size: 32,
            threshold: 0.5,
        }
    }
}

/// Target tensor for a batch: `[B, 1]` binary labels or `[B, k]` one-hot rows.
pub fn targets<T: Element>(labels: &[usize], head: Head, classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    match head {
        Head::Sigmoid => Tensor::new(
            vec![labels.len(), 1],
            labels.iter().map(|&l| T::of(l as f64)).collect(),
        ),
        Head::Softmax => {
            let mut data = vec![T::zero(); labels.len() * classes];
            for (row, &l) in labels.iter().enumerate() {
                data[row * classes + l] = T::one();
            }
            Tensor::new(vec![labels.len(), classes], data)
        }
    }
}

pub fn loss_for<T: Element>(y_hat: &Tensor<T>, y: &Tensor<T>, head: Head) -> Result<(f64, Tensor<T>)> {
    match head {
        Head::Sigmoid => bce_loss(y_hat, y),
        Head::Softmax => cce_loss(y_hat, y),
    }
}

/// Running sums over the batches of one pass.
#[derive(Default)]
struct Tally {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl Tally {
    fn add(&mut self, loss: f64, predictions: &[(usize, f64)], labels: &[usize]) {
        self.loss += loss * labels.len() as f64;
        self.correct += predictions.iter().zip(labels).filter(|((p, _), l)| p == *l).count();
        self.seen += labels.len();
    }

    fn means(&self) -> (f64, f64) {
        let n = self.seen.max(1) as f64;
        (self.loss / n, self.correct as f64 / n)
    }
}

fn check_dataset<T: Element>(model: &ResLinkModel<T>, ds: &LabeledDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Input(format!("{what} set is empty")));
    }
    let classes = model.config().class_count();
    if ds.class_names.len() != classes {
        return Err(Error::Input(format!(
            "{what} set has {} classes, model predicts {classes}",
            ds.class_names.len()
        )));
    }
    Ok(())
}

fn at_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericFault(site) => {
            Error::NumericFault(format!("{site} (epoch {epoch}, batch {batch})"))
        }
        other => other,
    }
}

/// Inference-mode loss and accuracy over a whole dataset.
pub fn evaluate_loss<T: Element>(
    model: &ResLinkModel<T>,
    ds: &LabeledDataset,
    spec: ImageSpec,
    opts: &TrainOptions,
) -> Result<(f64, f64)> {
    let head = model.config().head;
    let classes = model.config().class_count();
    let mut tally = Tally::default();
    for batch in batches(ds, spec, opts.batch_size, None)? {
        let Batch { x, labels } = batch?;
        let y_hat = model.predict(&x.cast())?;
        let (loss, _) = loss_for(&y_hat, &targets(&labels, head, classes)?, head)?;
        tally.add(loss, &metrics::decide(&y_hat, head, opts.threshold)?, &labels);
    }
    Ok(tally.means())
}

/// Runs `opts.epochs` epochs of shuffled mini-batch Adam, validating after
/// each. `on_epoch` sees every row as soon as it is complete.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Element>(
    model: &mut ResLinkModel<T>,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    spec: ImageSpec,
    opts: &TrainOptions,
    adam: &mut AdamState<T>,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    check_dataset(model, train_set, "training")?;
    check_dataset(model, val_set, "validation")?;
    let head = model.config().head;
    let classes = model.config().class_count();
    let mut order_rng = ModelRng::seed_from_u64(seed);
    let mut report = TrainReport::default();
    for epoch in 1..=opts.epochs {
        let mut tally = Tally::default();
        for (b, batch) in batches(train_set, spec, opts.batch_size, Some(&mut order_rng))?.enumerate() {
            let step = || -> Result<()> {
                let Batch { x, labels } = batch?;
                let (y_hat, cache) = model.forward(&x.cast(), Mode::Train)?;
                let (loss, grad) = loss_for(&y_hat, &targets(&labels, head, classes)?, head)?;
                if !loss.is_finite() {
                    return Err(Error::NumericFault("loss".into()));
                }
                let grads = model.backward(&cache, &grad)?;
                adam_step(model.registry_mut(), &grads, adam)?;
                tally.add(loss, &metrics::decide(&y_hat, head, opts.threshold)?, &labels);
                Ok(())
            };
            step().map_err(|e| at_batch(e, epoch, b + 1))?;
        }
        let (train_loss, train_acc) = tally.means();
        let (val_loss, val_acc) = evaluate_loss(model, val_set, spec, opts)?;
        let row = EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        on_epoch(&row);
        report.epochs.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::gradcheck::{central_difference, rel_error};
    use crate::model::ModelConfig;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        let (l, _) = bce_loss(&col(&[0.5]), &col(&[1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-9);
        let (l, _) = bce_loss(&col(&[1.0]), &col(&[1.0])).unwrap();
        assert!((l - 1e-7).abs() < 1e-12, "{l}");
        let (l, _) = bce_loss(&Tensor::new(vec![1, 1], vec![1.0f32]).unwrap(), &Tensor::new(vec![1, 1], vec![1.0f32]).unwrap()).unwrap();
        assert!((l - 1e-7).abs() < 1e-12, "{l}");
        assert!(matches!(bce_loss(&col(&[f64::NAN]), &col(&[1.0])), Err(Error::NumericFault(_))));
        assert!(matches!(bce_loss(&col(&[0.3]), &col(&[0.5])), Err(Error::Input(_))));
    }

    #[test]
    fn bce_gradient_matches_fd() {
        let mut rng = ModelRng::seed_from_u64(1);
        let p = Tensor::<f64>::uniform(&[8, 1], 0.05, 0.95, &mut rng);
        let y = col(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let (_, g) = bce_loss(&p, &y).unwrap();
        let n = central_difference(&p, 1e-6, |p| bce_loss(p, &y).unwrap().0);
        assert!(rel_error(&g, &n) <= 1e-7);
    }

    #[test]
    fn cce_examples_and_gradient() {
        let u = Tensor::new(vec![2, 4], vec![0.25f64; 8]).unwrap();
        let y = targets::<f64>(&[1, 3], Head::Softmax, 4).unwrap();
        let (l, _) = cce_loss(&u, &y).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cce_loss(&y, &y).unwrap();
        assert!(l > 0.0 && l < 2e-7);
        let bad = Tensor::new(vec![2, 4], vec![0.5f64, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(cce_loss(&u, &bad), Err(Error::Input(_))));

        let mut rng = ModelRng::seed_from_u64(2);
        let p = Tensor::<f64>::uniform(&[2, 4], 0.05, 0.9, &mut rng);
        let (_, g) = cce_loss(&p, &y).unwrap();
        let n = central_difference(&p, 1e-6, |p| cce_loss(p, &y).unwrap().0);
        assert!(rel_error(&g, &n) <= 1e-7);
    }

    fn scalar_registry(p: f64) -> Registry<f64> {
        let mut reg = Registry::new();
        reg.add_param("p", Tensor::scalar(p));
        reg
    }

    fn grads_of(reg: &Registry<f64>, g: f64) -> Grads<f64> {
        let mut grads = Grads::zeros_for(reg);
        grads.tensors_mut()[0] = Tensor::scalar(g);
        grads
    }

    #[test]
    fn adam_closed_form_first_step() {
        let mut reg = scalar_registry(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &reg).unwrap();
        let g = grads_of(&reg, 1.0);
        adam_step(&mut reg, &g, &mut state).unwrap();
        let moved = reg.params()[0].tensor.data()[0];
        assert!((moved - (-1e-3 / (1.0 + 1e-8))).abs() <= 1e-12);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut reg = scalar_registry(0.7);
        let before = reg.clone();
        let mut state = AdamState::new(AdamConfig::default(), &reg).unwrap();
        let g = grads_of(&reg, 0.0);
        adam_step(&mut reg, &g, &mut state).unwrap();
        assert_eq!(reg, before);
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // Independent scalar Adam on f(p) = (p - 3)^2.
        let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (0.5f64, 0.0, 0.0);
        let mut reg = scalar_registry(0.5);
        let mut state = AdamState::new(AdamConfig::default(), &reg).unwrap();
        for t in 1..=10 {
            let g = 2.0 * (p - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);

            let q = reg.params()[0].tensor.data()[0];
            let g = grads_of(&reg, 2.0 * (q - 3.0));
            adam_step(&mut reg, &g, &mut state).unwrap();
        }
        assert!((reg.params()[0].tensor.data()[0] - p).abs() <= 1e-10);
    }

    #[test]
    fn adam_rejects_misaligned_gradients() {
        let mut reg = scalar_registry(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &reg).unwrap();
        let mut g = grads_of(&reg, 1.0);
        g.tensors_mut()[0] = Tensor::zeros(&[2]);
        assert!(matches!(adam_step(&mut reg, &g, &mut state), Err(Error::Dimension { .. })));
        let bad = AdamConfig { beta1: 1.0, ..AdamConfig::default() };
        assert!(AdamState::new(bad, &reg).is_err());
    }

    #[test]
    fn report_csv_format() {
        let r = TrainReport {
            epochs: vec![EpochStats { epoch: 1, train_loss: 0.5, train_acc: 0.75, val_loss: 1.0 / 3.0, val_acc: 1.0 }],
        };
        assert_eq!(
            r.to_csv(),
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.500000,0.750000,0.333333,1.000000\n"
        );
    }

    fn tiny_setup() -> (ModelConfig, LabeledDataset, ImageSpec) {
        let cfg = ModelConfig {
            input_h: 16,
            input_w: 16,
            input_c: 1,
            stem_filters: 4,
            stage_filters: vec![4],
            area_h: 2,
            area_w: 2,
            ..ModelConfig::default()
        };
        let ds = make_synthetic(12, 16, 16, 3).unwrap();
        (cfg, ds, ImageSpec { height: 16, width: 16, channels: 1 })
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let (cfg, ds, spec) = tiny_setup();
        let mut m = ResLinkModel::<f32>::build(cfg, 1).unwrap();
        let before = m.registry().clone();
        let mut adam = AdamState::new(AdamConfig::default(), m.registry()).unwrap();
        let opts = TrainOptions { epochs: 0, ..TrainOptions::default() };
        let r = train(&mut m, &ds, &ds, spec, &opts, &mut adam, 1, |_| {}).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(m.registry(), &before);
    }

    #[test]
    fn training_is_reproducible_and_touches_every_parameter() {
        let (cfg, ds, spec) = tiny_setup();
        let opts = TrainOptions { epochs: 2, batch_size: 8, ..TrainOptions::default() };
        let run = || {
            let mut m = ResLinkModel::<f32>::build(cfg.clone(), 1).unwrap();
            let mut adam = AdamState::new(AdamConfig::default(), m.registry()).unwrap();
            let r = train(&mut m, &ds, &ds, spec, &opts, &mut adam, 4, |_| {}).unwrap();
            (r, m)
        };
        let (r1, m1) = run();
        let (r2, m2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1.registry(), m2.registry());
        assert_eq!(r1.epochs.len(), 2);
        let fresh = ResLinkModel::<f32>::build(cfg, 1).unwrap();
        for (a, b) in fresh.registry().params().iter().zip(m1.registry().params()) {
            assert_ne!(a.tensor, b.tensor, "{} never updated", a.name);
        }
        for e in &r1.epochs {
            assert!((0.0..=1.0).contains(&e.train_acc) && (0.0..=1.0).contains(&e.val_acc));
        }
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let (cfg, mut ds, spec) = tiny_setup();
        ds.class_names.push("extra".into());
        let mut m = ResLinkModel::<f32>::build(cfg, 1).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), m.registry()).unwrap();
        let r = train(&mut m, &ds, &ds, spec, &TrainOptions::default(), &mut adam, 1, |_| {});
        assert!(matches!(r, Err(Error::Input(_))));
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use reslink::checkpoint;
use reslink::data::{
    self, batches, load_sample, ImageSource, ImageSpec, LabeledDataset,
};
use reslink::gradcheck::{self, LAYER_REGISTRY};
use reslink::metrics::{self, ConfusionMatrix, MetricsReport};
use reslink::optim::{self, AdamState};
use reslink::{DType, ModelConfig, ResLinkModel, Tensor};

use crate::config::RunConfig;
use crate::plot::curves_svg;
use crate::CliError;

const EVAL_BATCH: usize = 32;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn image_spec(cfg: &ModelConfig) -> ImageSpec {
    ImageSpec {
        height: cfg.input_h,
        width: cfg.input_w,
        channels: cfg.input_c,
    }
}

/// Inference over a dataset: confusion matrix and report.
fn score(
    model: &ResLinkModel<f32>,
    ds: &LabeledDataset,
    threshold: f64,
) -> Result<(ConfusionMatrix, MetricsReport), CliError> {
    let cfg = model.config();
    let mut predicted = Vec::with_capacity(ds.len());
    for batch in batches(ds, image_spec(cfg), EVAL_BATCH, None)? {
        let y_hat = model.predict(&batch?.x)?;
        predicted.extend(metrics::decide(&y_hat, cfg.head, threshold)?.into_iter().map(|(c, _)| c));
    }
    let cm = metrics::confusion(&ds.labels(), &predicted, ds.class_names.len())?;
    let report = metrics::report(&cm)?;
    Ok((cm, report))
}

fn write_report(
    out: &Path,
    names: &[String],
    cm: &ConfusionMatrix,
    report: &MetricsReport,
) -> Result<String, CliError> {
    let text = report.to_text(names, cm);
    write(&out.join("report.csv"), report.to_csv(names))?;
    write(&out.join("report.txt"), &text)?;
    Ok(text)
}

fn splits(cfg: &RunConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), CliError> {
    let ds = match (&cfg.data.root, &cfg.data.synthetic) {
        (Some(root), _) => data::load_directory(root)?,
        (None, Some(s)) => data::make_synthetic(s.n_per_class, s.height, s.width, s.seed.unwrap_or(seed))?,
        (None, None) => unreachable!("validated"),
    };
    let resample_seed = seed ^ 0x5EED_0FF5;
    let d = &cfg.data;
    let ds = if d.oversample && d.oversample_before_split {
        data::oversample(&ds, resample_seed)?
    } else {
        ds
    };
    let (train, val, test) = data::stratified_split(&ds, d.split, seed)?;
    let train = if d.oversample && !d.oversample_before_split {
        data::oversample(&train, resample_seed)?
    } else {
        train
    };
    Ok((train, val, test))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    if out.is_some() {
        cfg.out = out;
    }
    cfg.validate()?;
    let seed = cfg
        .seed
        .ok_or_else(|| CliError::config("seed: set `seed` in the config or pass --seed"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::config("out: set `out` in the config or pass --out"))?;
    fs::create_dir_all(&out).map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;

    let started = Instant::now();
    let (train_set, val_set, test_set) = splits(&cfg, seed)?;
    eprintln!(
        "data: train {} {:?}, val {} {:?}, test {} {:?}",
        train_set.len(),
        train_set.class_counts(),
        val_set.len(),
        val_set.class_counts(),
        test_set.len(),
        test_set.class_counts()
    );

    let mut model = ResLinkModel::<f32>::build(cfg.model.clone(), seed)?;
    write(&out.join("shapes.txt"), model.shape_table().render())?;
    eprintln!(
        "model: {} parameter tensors, {} scalars",
        model.registry().param_count(),
        model.registry().scalar_count()
    );

    let mut adam = AdamState::new(cfg.optim.adam(), model.registry())?;
    let opts = cfg.optim.train_options();
    let epochs = opts.epochs;
    let report = optim::train(
        &mut model,
        &train_set,
        &val_set,
        image_spec(&cfg.model),
        &opts,
        &mut adam,
        seed.wrapping_add(1),
        |e| {
            eprintln!(
                "epoch {}/{epochs}: train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4} ({:.0?})",
                e.epoch,
                e.train_loss,
                e.train_acc,
                e.val_loss,
                e.val_acc,
                started.elapsed()
            )
        },
    )?;
    write(&out.join("metrics.csv"), report.to_csv())?;
    write(&out.join("curves.svg"), curves_svg(&report))?;

    let names = &test_set.class_names;
    checkpoint::save(out.join("model.rslk"), &model, names)?;
    if test_set.samples.iter().all(|(s, _)| matches!(s, ImageSource::File(_))) {
        data::write_manifest(&test_set, &out.join("test_manifest.csv"))?;
    }
    let (cm, metrics_report) = score(&model, &test_set, opts.threshold)?;
    print!("{}", write_report(&out, names, &cm, &metrics_report)?);
    eprintln!("done in {:.1?}, outputs in {}", started.elapsed(), out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint<f32>, CliError> {
    Ok(checkpoint::load::<f32>(path)?)
}

pub fn evaluate(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = if data.is_dir() {
        let ds = data::load_directory(data)?;
        if ds.class_names != ck.class_names {
            return Err(CliError::config(format!(
                "{}: classes {:?} do not match the checkpoint's {:?}",
                data.display(),
                ds.class_names,
                ck.class_names
            )));
        }
        ds
    } else {
        data::read_manifest(data, Some(&ck.class_names))?
    };
    let (cm, report) = score(&ck.model, &ds, optim::TrainOptions::default().threshold)?;
    let text = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
            write_report(dir, &ck.class_names, &cm, &report)?
        }
        None => report.to_text(&ck.class_names, &cm),
    };
    print!("{text}");
    Ok(())
}

pub fn predict(checkpoint: &Path, images: &[PathBuf]) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = ck.model.config();
    let spec = image_spec(cfg);
    let threshold = optim::TrainOptions::default().threshold;
    for chunk in images.chunks(EVAL_BATCH) {
        let xs = chunk
            .iter()
            .map(|p| load_sample(&ImageSource::File(p.clone()), spec))
            .collect::<Result<Vec<_>, _>>()?;
        let y_hat = ck.model.predict(&Tensor::stack(&xs)?)?;
        for (path, (class, p)) in chunk.iter().zip(metrics::decide(&y_hat, cfg.head, threshold)?) {
            println!("{},{},{}", path.display(), ck.class_names[class], p as f32);
        }
    }
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, seed: u64, fault: Option<&str>) -> Result<(), CliError> {
    let model = match config {
        Some(path) => RunConfig::load(path)?.model,
        None => gradcheck::reference_model(),
    };
    let seeds: Vec<u64> = (seed..seed + 5).collect();
    let started = Instant::now();
    let mut failed = Vec::new();
    for dtype in [DType::F64, DType::F32] {
        let report = gradcheck::run_suite(dtype, &seeds, &model, fault)?;
        print!("{}", report.render());
        failed.extend(report.failures().into_iter().map(|l| format!("{l} ({dtype:?})")));
    }
    eprintln!(
        "{} layers × 2 precisions × {} seeds in {:.1?}",
        LAYER_REGISTRY.len(),
        seeds.len(),
        started.elapsed()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn synth(out: &Path, n_per_class: usize, height: usize, width: usize, seed: u64) -> Result<(), CliError> {
    let ds = data::make_synthetic(n_per_class, height, width, seed)?;
    let written = data::write_dataset(&ds, out)?;
    eprintln!("wrote {} images under {}", written.len(), out.display());
    Ok(())
}

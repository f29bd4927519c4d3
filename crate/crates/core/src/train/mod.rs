//! Deterministic single-threaded training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod sgd;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{BuildOptions, Engine, NetworkPlan};
use crate::error::{Error, Result};
use crate::kernels::error_rate;
use crate::metrics::{flatten, grad_angle, Ctx};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::Checkpoint;
pub use config::{Augment, DataSource, Precision, TrainConfig};
pub use data::{crop_flip, load_cifar10, synthetic, Batcher, CifarRecords, Dataset};
pub use sgd::{Schedule, Sgd};

pub const METRICS_HEADER: &str = "step,loss,train_err,angle_deg,peak_bytes";

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub train_err: f64,
    /// Angle between this step's gradient and a stored-activation f64 reference.
    pub angle_deg: Option<f64>,
    pub peak_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub final_train_accuracy: f64,
    pub param_count: usize,
    pub files: Vec<PathBuf>,
}

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let angle = r.angle_deg.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.loss, r.train_err, angle, r.peak_bytes);
    }
    s
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic { samples, margin } => Ok(synthetic(
            cfg.arch.input_shape,
            cfg.arch.classes,
            *samples,
            *margin,
            cfg.seed.wrapping_add(1),
        )),
        DataSource::Cifar10(p) => load_cifar10(p),
    }
}

/// Trains per `cfg`. With `out` set, writes `metrics.csv`,
/// `checkpoint-initial.bin` and (after at least one step) `checkpoint-final.bin`.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, &data, out),
        Precision::F64 => run::<f64>(cfg, &data, out),
    }
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.sample_shape != cfg.arch.input_shape {
        let (c, h, w) = data.sample_shape;
        let (ec, eh, ew) = cfg.arch.input_shape;
        return Err(Error::Config(format!(
            "dataset samples are {c}x{h}x{w}, network expects {ec}x{eh}x{ew}"
        )));
    }
    if data.classes > cfg.arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network has {}",
            data.classes, cfg.arch.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(())
}

fn save<T: Scalar>(net: &NetworkPlan<T>, step: u64, path: &Path) -> Result<()> {
    Checkpoint {
        step,
        params: net.param_names().into_iter().zip(net.params().into_iter().cloned()).collect(),
    }
    .save(path)
}

/// Training-set accuracy with train-mode normalisation over batches of `batch`.
pub fn accuracy<T: Scalar>(net: &mut NetworkPlan<T>, data: &Dataset, batch: usize) -> Result<f64> {
    let mut wrong = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.batch::<T>(chunk);
        let logits = net.predict(&x, &mut Ctx::default())?;
        wrong += error_rate(&logits, &y) * chunk.len() as f64;
    }
    Ok(1.0 - wrong / data.len() as f64)
}

fn run<T: Scalar>(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    check_data(cfg, data)?;
    let mut net = NetworkPlan::<T>::build(
        &cfg.arch,
        BuildOptions {
            seed: cfg.seed,
            zero_init_residual: cfg.zero_init_residual,
        },
    )?;
    let mut files = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let p = dir.join("checkpoint-initial.bin");
        save(&net, 0, &p)?;
        files.push(p);
    }
    let mut opt = Sgd::<T>::new(
        Schedule {
            base_lr: cfg.lr,
            decay_steps: cfg.decay_steps.clone(),
            factor: cfg.decay_factor,
        },
        cfg.momentum,
        cfg.weight_decay,
    );
    let mut batcher = Batcher::new(data.len(), cfg.seed.wrapping_add(2));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut records = Vec::with_capacity(cfg.total_steps as usize);

    let result = (|| {
        for step in 0..cfg.total_steps {
            let (mut x, y) = data.batch::<T>(&batcher.next_batch(cfg.batch_size));
            if cfg.augment == Augment::CropFlip {
                x = crop_flip(&x, 4, &mut aug_rng);
            }
            let mut ctx = Ctx::default();
            let (loss, logits, grads) = net.loss_and_grads(&x, &y, cfg.engine, &mut ctx)?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let angle_deg = match cfg.angle_interval {
                Some(k) if step % k == 0 => {
                    let mut reference = net.cast::<f64>();
                    let (_, _, g) = reference.loss_and_grads(&x.cast::<f64>(), &y, Engine::Stored, &mut Ctx::default())?;
                    let a = grad_angle(&flatten(&grads), &flatten(&g))?;
                    a.defined.then_some(a.angle_degrees)
                }
                _ => None,
            };
            records.push(StepRecord {
                step,
                loss,
                train_err: error_rate(&logits, &y),
                angle_deg,
                peak_bytes: ctx.mem.peak_bytes(),
            });
            opt.step(net.params_mut(), &grads, step)?;
        }
        Ok(())
    })();

    if let Some(dir) = out {
        let p = dir.join("metrics.csv");
        fs::write(&p, metrics_csv(&records))?;
        files.push(p);
    }
    result?;
    if let (Some(dir), true) = (out, cfg.total_steps > 0) {
        let p = dir.join("checkpoint-final.bin");
        save(&net, cfg.total_steps, &p)?;
        files.push(p);
    }
    let final_train_accuracy = accuracy(&mut net, data, cfg.batch_size)?;
    Ok(TrainOutcome {
        records,
        final_train_accuracy,
        param_count: net.count_params(),
        files,
    })
}

/// Gradient of one batch, for callers that drive their own loop.
pub fn batch_grads<T: Scalar>(net: &mut NetworkPlan<T>, x: &Tensor<T>, labels: &[usize], engine: Engine) -> Result<(f64, Vec<Tensor<T>>)> {
    let (loss, _, g) = net.loss_and_grads(x, labels, engine, &mut Ctx::default())?;
    Ok((loss.to_f64(), g))
}

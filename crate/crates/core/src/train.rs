//! Epoch loop: shuffle, batch, augment, forward, loss, backward, step.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::augment::augment_affine;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{composite_loss, compute_class_weights, ClassWeights};
use crate::metrics::{predict_labels, DiceCounts, MetricsReport};
use crate::network::Model;
use crate::optim::{lr_at, sgd_step, OptState, TrainConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::synth::{Dataset, Split};
use crate::tensor::{LabelMap, Tensor};

pub const LOG_NAME: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.cdfc";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.cdfc")
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean training loss per completed epoch.
    pub loss_curve: Vec<(usize, f64)>,
    /// Held-out loss per epoch, when a validation split exists.
    pub val_curve: Vec<(usize, f64)>,
    pub stopped_early: bool,
    pub report: MetricsReport,
}

fn batch(ds: &Dataset, idx: &[usize]) -> Result<(Tensor<f32>, LabelMap)> {
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &ds.images[i]).collect();
    let lbls: Vec<&LabelMap> = idx.iter().map(|&i| &ds.labels[i]).collect();
    Ok((Tensor::stack(&imgs)?, LabelMap::stack(&lbls)?))
}

fn augmented_batch(ds: &Dataset, idx: &[usize], rng: &mut Rng) -> Result<(Tensor<f32>, LabelMap)> {
    let mut imgs = Vec::with_capacity(idx.len());
    let mut lbls = Vec::with_capacity(idx.len());
    for &i in idx {
        let (im, lb) = augment_affine(&ds.images[i], &ds.labels[i], rng)?;
        imgs.push(im);
        lbls.push(lb);
    }
    Ok((
        Tensor::stack(&imgs.iter().collect::<Vec<_>>())?,
        LabelMap::stack(&lbls.iter().collect::<Vec<_>>())?,
    ))
}

/// Mean composite loss over `indices` in eval mode.
pub fn eval_loss(
    model: &mut Model<f32>,
    ds: &Dataset,
    indices: &[usize],
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let (x, y) = batch(ds, chunk)?;
        let (logits, _) = model.forward(&x, Mode::Eval)?;
        let (parts, _) = composite_loss(&logits, &y, weights)?;
        total += parts.total() * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Hard Dice pooled over every pixel of the split, in eval mode.
pub fn evaluate(
    model: &mut Model<f32>,
    ds: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<MetricsReport> {
    let indices = ds.indices(split);
    let k = model.spec().num_classes;
    let mut counts = DiceCounts::new(k);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = batch(ds, chunk)?;
        let (logits, _) = model.forward(&x, Mode::Eval)?;
        counts.add(&predict_labels(&logits), &y)?;
    }
    Ok(MetricsReport::new(
        model.spec().variant.name(),
        split.name(),
        indices.len(),
        counts.dice(),
        &ds.spec.class_groups(),
        model.param_count(),
        Vec::new(),
    ))
}

/// The held-out split used for the final report: test, else val, else train.
pub fn report_split(ds: &Dataset) -> Split {
    [Split::Test, Split::Val]
        .into_iter()
        .find(|&s| !ds.indices(s).is_empty())
        .unwrap_or(Split::Train)
}

/// Trains `model` on the train split of `ds`.
///
/// With `out` set, appends one line per epoch to `train.log`, writes
/// periodic checkpoints and `final.cdfc`. Early stopping monitors the
/// validation loss, or the training loss when there is no validation split.
pub fn train(
    model: &mut Model<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.spec.num_classes() != model.spec().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.spec.num_classes(),
            model.spec().num_classes
        )));
    }
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    let weights = compute_class_weights(
        train_idx.iter().map(|&i| &ds.labels[i]),
        ds.spec.num_classes(),
    )?;
    let mut opt = OptState::new(&*model);
    let mut shuffle_rng = Rng::stream(cfg.seed, 0);
    let mut aug_rng = Rng::stream(cfg.seed, 1);
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_NAME);
            Some((
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };

    let mut loss_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order = train_idx.clone();
        shuffle_rng.shuffle(&mut order);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = if cfg.augment {
                augmented_batch(ds, chunk, &mut aug_rng)?
            } else {
                batch(ds, chunk)?
            };
            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let (parts, grad) = composite_loss(&logits, &y, &weights)?;
            let loss = parts.total();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            model.backward(cache, &grad)?;
            sgd_step(model, &mut opt, lr, cfg)?;
            sum += loss * chunk.len() as f64;
        }
        let mean = sum / train_idx.len() as f64;
        loss_curve.push((epoch, mean));
        let monitored = if val_idx.is_empty() {
            mean
        } else {
            let v = eval_loss(model, ds, &val_idx, &weights, cfg.batch_size)?;
            val_curve.push((epoch, v));
            v
        };
        log::info!("epoch {epoch} lr {lr:e} loss {mean:.6}");
        if let Some((file, path)) = &mut log {
            writeln!(
                file,
                "epoch={epoch} lr={lr:e} loss={mean:.6} val_loss={} wall_s={:.3}",
                val_curve
                    .last()
                    .map_or("none".to_owned(), |(_, v)| format!("{v:.6}")),
                start.elapsed().as_secs_f64()
            )
            .map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save_checkpoint(dir.join(checkpoint_name(epoch + 1)))?;
            }
        }
        if monitored < best {
            best = monitored;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            stopped_early = true;
            log::info!("stopping after epoch {epoch}: no improvement for {since_best} epochs");
            break;
        }
    }
    if let Some(dir) = out {
        model.save_checkpoint(dir.join(FINAL_CHECKPOINT))?;
    }
    let mut report = evaluate(model, ds, report_split(ds), cfg.batch_size)?;
    report.loss_curve = loss_curve.clone();
    Ok(TrainOutcome {
        loss_curve,
        val_curve,
        stopped_early,
        report,
    })
}

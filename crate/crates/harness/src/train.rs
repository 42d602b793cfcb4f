//! Mini-batch fine-tuning and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gft_core::config::TaskConfig;
use gft_core::heads::{argmax_rows, overall_accuracy, segmentation_miou, SegSample};
use gft_core::model::{ForwardOptions, Head};
use gft_core::numcore::ParamGrads;
use gft_core::optim::{cosine_schedule, AdamW, AdamWConfig, TrainConfig};
use gft_core::pointops::PointCloud;
use gft_core::{GftModel, Graph, ParamStore};

use crate::augment::{normalize, resample, Augment};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metrics {
    Classification { oa: f64 },
    Segmentation { oa: f64, instance_miou: f64, class_miou: f64 },
}

impl Metrics {
    /// The model-selection score: OA for classification, instance mIoU for
    /// segmentation.
    pub fn score(&self) -> f64 {
        match *self {
            Metrics::Classification { oa } => oa,
            Metrics::Segmentation { instance_miou, .. } => instance_miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub loss: f64,
    pub metrics: Option<Metrics>,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,score,seconds";

    pub fn csv_row(&self) -> String {
        let score = self.metrics.map(|m| format!("{:.6}", m.score())).unwrap_or_default();
        format!("{},{:.6e},{:.6},{},{:.2}", self.epoch, self.lr, self.loss, score, self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters are in `best`; the earliest one on ties.
    pub best_epoch: usize,
    pub best: Option<Metrics>,
    pub best_store: ParamStore<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub augment: Augment,
    pub eval_every: usize,
}

/// Resamples every cloud to `n` points and normalizes it to the unit
/// sphere.
pub fn prepare(clouds: &[PointCloud], n: usize) -> Result<Vec<PointCloud>> {
    clouds
        .iter()
        .map(|c| {
            let mut c = resample(c, n)?;
            normalize(&mut c);
            Ok(c)
        })
        .collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains `model` in place on `train`, evaluating on `test` every
/// `eval_every` epochs and after the last one. `on_epoch` sees each log row
/// as it is produced. On return the model holds the final parameters;
/// the best ones are in the outcome.
pub fn train(
    model: &mut GftModel<f32>,
    train: &[PointCloud],
    test: &[PointCloud],
    cfg: &TrainConfig,
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut first_lr = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_schedule(epoch as f64 + step as f64 / steps_per_epoch as f64, cfg);
            if step == 0 {
                first_lr = lr;
            }
            let mut acc = ParamGrads::new(model.store.len());
            let w = 1.0 / batch.len() as f32;
            for &i in batch {
                let mut cloud = train[i].clone();
                opts.augment.apply(&mut cloud, &mut rng);
                let fwd = ForwardOptions::train(rng.gen());
                let mut g = Graph::new(&model.store).skip_frozen_grads();
                let out = model.forward(&mut g, &cloud, &fwd)?;
                let loss = model.loss(&mut g, &out, &cloud)?;
                loss_sum += g.value(loss).data()[0] as f64;
                let grads = g.backward(loss)?;
                acc.accumulate(&grads.params, w);
            }
            opt.step(&mut model.store, &acc, lr)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let metrics = if !test.is_empty() && ((epoch + 1) % opts.eval_every.max(1) == 0 || last) {
            Some(evaluate(model, test)?)
        } else {
            None
        };
        if let Some(m) = metrics {
            if best.as_ref().is_none_or(|(_, b, _)| m.score() > b.score()) {
                best = Some((epoch + 1, m, model.store.clone()));
            }
        }
        let row = EpochLog {
            epoch: epoch + 1,
            lr: first_lr,
            loss: loss_sum / train.len() as f64,
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
    }
    let (best_epoch, best, best_store) = match best {
        Some((e, m, s)) => (e, Some(m), s),
        None => (cfg.epochs, None, model.store.clone()),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best,
        best_store,
    })
}

/// Evaluation-mode metrics. For segmentation the object label, when
/// present, is the shape category, and every category may use every part.
pub fn evaluate(model: &GftModel<f32>, clouds: &[PointCloud]) -> Result<Metrics> {
    if clouds.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let opts = ForwardOptions::default();
    let mut preds = Vec::with_capacity(clouds.len());
    for c in clouds {
        let mut g = model.graph();
        let out = model.forward(&mut g, c, &opts)?;
        preds.push(argmax_rows(g.value(out.logits)));
    }
    match &model.head {
        Head::Classifier(_) => {
            let labels = clouds
                .iter()
                .map(|c| c.object_label.ok_or_else(|| Error::Argument("cloud has no object label".into())))
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<usize> = preds.iter().map(|p| p[0]).collect();
            Ok(Metrics::Classification {
                oa: overall_accuracy(&pred, &labels)?,
            })
        }
        Head::Segmentation(_) => {
            let TaskConfig::Segmentation(s) = &model.config.task else {
                unreachable!("segmentation head with classification config")
            };
            let parts: Vec<usize> = (0..s.num_parts).collect();
            let mut samples = Vec::with_capacity(clouds.len());
            let (mut hit, mut total) = (0usize, 0usize);
            for (c, p) in clouds.iter().zip(&preds) {
                let labels = c
                    .point_labels
                    .as_deref()
                    .ok_or_else(|| Error::Argument("cloud has no point labels".into()))?;
                hit += p.iter().zip(labels).filter(|(a, b)| a == b).count();
                total += labels.len();
                samples.push(SegSample {
                    category: c.object_label.unwrap_or(0),
                    parts: &parts,
                    pred: p,
                    labels,
                });
            }
            let m = segmentation_miou(&samples)?;
            Ok(Metrics::Segmentation {
                oa: hit as f64 / total as f64,
                instance_miou: m.instance_miou,
                class_miou: m.class_miou,
            })
        }
    }
}

//! Mini-batch contrastive training with per-epoch validation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::RetrievalDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, Direction, EvalOptions, RetrievalReport};
use crate::graph::Graph;
use crate::model::RetrievalModel;
use crate::objective::loss_var;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based across the whole run.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub validation: RetrievalReport,
}

pub enum Progress<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: RetrievalModel,
    /// Parameters of the epoch with the best validation score, or the last
    /// epoch when no validation set was given.
    pub best: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainOutcome {
    /// Metric log as `step,epoch,loss` CSV.
    pub fn steps_csv(&self) -> String {
        steps_csv(&self.steps)
    }
}

pub fn steps_csv(steps: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for s in steps {
        let _ = writeln!(out, "{},{},{:?}", s.step, s.epoch, s.loss);
    }
    out
}

/// Sum of R@k over both directions at the smallest configured k.
pub fn selection_score(report: &RetrievalReport, ks: &[usize]) -> f64 {
    let k = ks.iter().copied().min().unwrap_or(1);
    report.recall(Direction::T2a, k).unwrap_or(0.0) + report.recall(Direction::A2t, k).unwrap_or(0.0)
}

pub fn train(cfg: &TrainConfig, train: &RetrievalDataset, val: Option<&RetrievalDataset>) -> Result<TrainOutcome> {
    train_with(cfg, train, val, |_| {})
}

/// [`train`] with a callback after every step and every validation pass.
pub fn train_with(
    cfg: &TrainConfig,
    train: &RetrievalDataset,
    val: Option<&RetrievalDataset>,
    mut observe: impl FnMut(Progress<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.items.iter().any(|it| it.captions.is_empty()) {
        return Err(Error::Input("every training clip needs at least one caption".into()));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training clips",
            cfg.batch_size,
            train.len()
        )));
    }
    let input_dim = train.feature_dim().ok_or(Error::EmptyDataset)?;
    if let Some(vd) = val.and_then(RetrievalDataset::feature_dim) {
        if vd != input_dim {
            return Err(Error::Input(format!(
                "validation features are {vd} wide, training features {input_dim}"
            )));
        }
    }
    let dims = cfg.model_dims(input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RetrievalModel::init(&mut rng, &dims, cfg.pooling);
    let mut opt = Optimizer::from_config(cfg);
    let loss_cfg = cfg.loss_config();
    let eval_opts = EvalOptions {
        workers: cfg.workers,
        ..EvalOptions::default()
    };

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut validate = |model: &RetrievalModel, epoch: usize| -> Result<Option<EpochLog>> {
        let Some(v) = val.filter(|v| !v.is_empty()) else {
            return Ok(None);
        };
        let log = EpochLog {
            epoch,
            validation: evaluate_dataset(model, v, &cfg.eval_ks, &eval_opts)?,
        };
        let score = selection_score(&log.validation, &cfg.eval_ks);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, Checkpoint::new(cfg, epoch as u64, model)));
        }
        Ok(Some(log))
    };
    if let Some(log) = validate(&model, 0)? {
        observe(Progress::Epoch(&log));
        epochs.push(log);
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(cfg.batch_size) {
            step += 1;
            let tokens: Vec<&Tensor> = batch
                .iter()
                .map(|&i| {
                    let caps = &train.items[i].captions;
                    &caps[rng.random_range(0..caps.len())].tokens
                })
                .collect();
            let frames: Vec<&Tensor> = batch.iter().map(|&i| &train.items[i].frames).collect();

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let s = model.similarity(&mut g, &vars, &tokens, &frames)?;
            let loss = loss_var(&mut g, cfg.loss, s, &loss_cfg)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    dump: format!("{}", g.value(s)),
                });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .in_order()
                .into_iter()
                .map(|v| grads.take(v).expect("every parameter is a trainable leaf"))
                .collect();
            opt.step(&mut model.params, &grads)?;
            if !model.params.is_finite() {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
            let log = StepLog {
                step,
                epoch,
                loss: value,
            };
            observe(Progress::Step(&log));
            steps.push(log);
        }
        if let Some(log) = validate(&model, epoch)? {
            observe(Progress::Epoch(&log));
            epochs.push(log);
        }
    }

    let best = match best {
        Some((_, ck)) => ck,
        None => Checkpoint::new(cfg, cfg.epochs as u64, &model),
    };
    Ok(TrainOutcome {
        model,
        best,
        steps,
        epochs,
    })
}

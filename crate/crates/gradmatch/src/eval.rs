//! Evaluation protocol: train target networks from scratch on a small set,
//! measure test accuracy, repeat over seeds, aggregate.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_cross_entropy, Graph};
use crate::data::{gather_rows, Dataset};
use crate::error::{Error, Result};
use crate::matching::GradientSet;
use crate::models::{bind_params, forward, init_params, ModelSpec, ParamSet};
use crate::tensor::Tensor;

/// From-scratch SGD recipe for target networks.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            lr: 0.01,
            lr_decay_epochs: vec![150],
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push("lr must be finite and >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Plain SGD with cross-entropy on (images, labels); deterministic per seed.
pub fn train_from_scratch(
    spec: &ModelSpec,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    cfg.validate()?;
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} images vs {} labels",
            n,
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init_params(spec, rng.random::<u64>())?;
    let batch_size = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        if cfg.lr_decay_epochs.contains(&epoch) {
            lr *= cfg.lr_decay_factor;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let g = Graph::new();
            let params = bind_params(&g, &theta, true)?;
            let batch = g.constant(gather_rows(images, chunk))?;
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = softmax_cross_entropy(&forward(spec, &params, &batch)?, &chunk_labels)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Training {
                        epoch,
                        msg: format!("non-finite loss in {op}"),
                    },
                    other => other,
                })?;
            let grads =
                GradientSet::from_loss(&loss, &theta, &params, false).map_err(|e| match e {
                    Error::NonFinite { op } => Error::Training {
                        epoch,
                        msg: format!("non-finite gradient in {op}"),
                    },
                    other => other,
                })?;
            for (e, ge) in theta.entries.iter_mut().zip(grads.entries) {
                let gt = ge.var.value();
                for (v, &gv) in e.tensor.data_mut().iter_mut().zip(gt.data()) {
                    *v -= lr * gv;
                }
            }
        }
    }
    Ok(theta)
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn accuracy(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} images vs {} labels",
            n,
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let chunk_size = 512usize;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(chunk_size) {
        let g = Graph::new();
        let vars = bind_params(&g, params, false)?;
        let batch = g.constant(gather_rows(images, chunk))?;
        let logits = forward(spec, &vars, &batch)?.value();
        let c = logits.shape()[1];
        for (row, &i) in chunk.iter().enumerate() {
            let scores = &logits.data()[row * c..(row + 1) * c];
            let mut best = 0usize;
            for (j, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = j;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Test accuracies over repeated from-scratch trainings.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample (n-1) standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: usize,
    pub source_arch: Option<String>,
    pub target_arch: String,
}

pub fn aggregate(accuracies: Vec<f64>, target_arch: String, source_arch: Option<String>) -> EvalReport {
    let runs = accuracies.len();
    let mean = accuracies.iter().sum::<f64>() / runs.max(1) as f64;
    let std = if runs > 1 {
        (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (runs - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    EvalReport {
        accuracies,
        mean,
        std,
        runs,
        source_arch,
        target_arch,
    }
}

/// `runs` independent (train, test) evaluations with seeds
/// `base_seed..base_seed+runs`.
pub fn repeat_eval(
    spec: &ModelSpec,
    train_images: &Tensor,
    train_labels: &[usize],
    test: &Dataset,
    cfg: &TrainConfig,
    runs: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    if runs == 0 {
        return Err(Error::Contract("repeat_eval: runs must be >= 1".into()));
    }
    let mut accs = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = base_seed + r as u64;
        let params = train_from_scratch(spec, train_images, train_labels, &run_cfg)
            .map_err(|e| match e {
                Error::Training { epoch, msg } => Error::Training {
                    epoch,
                    msg: format!("run {r}: {msg}"),
                },
                other => other,
            })?;
        accs.push(accuracy(spec, &params, &test.images, &test.labels)?);
    }
    Ok(aggregate(accs, spec.arch.to_string(), None))
}

/// Evaluate every (source-condensed set, target architecture) pair.
pub fn cross_arch_matrix(
    sources: &[(String, Tensor, Vec<usize>)],
    targets: &[ModelSpec],
    test: &Dataset,
    cfg: &TrainConfig,
    runs: usize,
    base_seed: u64,
) -> Result<Vec<Vec<EvalReport>>> {
    let mut matrix = Vec::with_capacity(sources.len());
    for (source_name, images, labels) in sources {
        let mut row = Vec::with_capacity(targets.len());
        for target in targets {
            let s = images.shape();
            let want = target.input;
            if (s[1], s[2], s[3]) != want {
                return Err(Error::Matrix {
                    source_arch: source_name.clone(),
                    target_arch: target.arch.to_string(),
                    msg: format!("set shape {:?} does not fit input {:?}", &s[1..], want),
                });
            }
            let mut rep = repeat_eval(target, images, labels, test, cfg, runs, base_seed)?;
            rep.source_arch = Some(source_name.clone());
            row.push(rep);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

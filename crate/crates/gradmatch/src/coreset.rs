//! Coreset baselines: random per-class selection and greedy mean-matching
//! herding.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{gather_rows, Dataset};
use crate::error::{Error, Result};
use crate::eval::{train_from_scratch, TrainConfig};
use crate::models::{bind_params, forward_features, ModelSpec};
use crate::tensor::Tensor;

/// Feature space the herding criterion operates in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HerdingFeatures {
    /// Flattened normalized pixels; needs no trained model.
    Pixel,
    /// Penultimate activations of a briefly trained model.
    ModelEmbedding,
}

/// Selected per-class sample indices, exactly `ipc` per class.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CoresetResult {
    pub method: String,
    pub seed: u64,
    pub per_class: Vec<Vec<usize>>,
}

impl CoresetResult {
    pub fn ipc(&self) -> usize {
        self.per_class.first().map_or(0, Vec::len)
    }

    /// Flattened selection grouped by class, matching SyntheticSet layout.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.per_class.iter().flatten().copied().collect()
    }

    /// Materialize the selected training set.
    pub fn to_train_set(&self, ds: &Dataset) -> (Tensor, Vec<usize>) {
        let idx = self.flat_indices();
        let images = gather_rows(&ds.images, &idx);
        let labels = idx.iter().map(|&i| ds.labels[i]).collect();
        (images, labels)
    }

    fn check(&self, ds: &Dataset, ipc: usize) -> Result<()> {
        for (c, sel) in self.per_class.iter().enumerate() {
            let mut sorted = sel.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ipc {
                return Err(Error::Selection(format!(
                    "class {c}: {} distinct indices, expected {ipc}",
                    sorted.len()
                )));
            }
            if sel.iter().any(|&i| i >= ds.len() || ds.labels[i] != c) {
                return Err(Error::Selection(format!("class {c}: index outside the class")));
            }
        }
        Ok(())
    }
}

fn check_class_sizes(ds: &Dataset, ipc: usize) -> Result<()> {
    if ipc == 0 {
        return Err(Error::Selection("ipc must be >= 1".into()));
    }
    for (c, members) in ds.class_index.iter().enumerate() {
        if members.len() < ipc {
            return Err(Error::Selection(format!(
                "class {c} has {} samples, ipc = {ipc}",
                members.len()
            )));
        }
    }
    Ok(())
}

/// Uniform without-replacement selection of `ipc` samples per class.
pub fn random_coreset(ds: &Dataset, ipc: usize, seed: u64) -> Result<CoresetResult> {
    check_class_sizes(ds, ipc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = ds
        .class_index
        .iter()
        .map(|members| {
            let mut pool = members.clone();
            pool.shuffle(&mut rng);
            pool.truncate(ipc);
            pool
        })
        .collect();
    let result = CoresetResult {
        method: "random".into(),
        seed,
        per_class,
    };
    result.check(ds, ipc)?;
    Ok(result)
}

/// Per-sample feature rows for one class.
fn class_features(
    ds: &Dataset,
    class: usize,
    features: HerdingFeatures,
    spec: Option<&ModelSpec>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let members = &ds.class_index[class];
    match features {
        HerdingFeatures::Pixel => {
            let s = ds.images.shape();
            let stride: usize = s[1..].iter().product();
            let d = ds.images.data();
            Ok(members
                .iter()
                .map(|&i| d[i * stride..(i + 1) * stride].to_vec())
                .collect())
        }
        HerdingFeatures::ModelEmbedding => {
            let spec = spec.ok_or_else(|| {
                Error::Selection("model_embedding herding requires a model spec".into())
            })?;
            // A short training run is enough to shape the embedding.
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 64,
                lr: 0.01,
                lr_decay_epochs: vec![],
                lr_decay_factor: 0.1,
                seed,
            };
            let params = train_from_scratch(spec, &ds.images, &ds.labels, &cfg)?;
            let g = Graph::new();
            let vars = bind_params(&g, &params, false)?;
            let batch = g.constant(gather_rows(&ds.images, members))?;
            let emb = forward_features(spec, &vars, &batch)?.value();
            let dim = emb.shape()[1];
            Ok((0..members.len())
                .map(|i| emb.data()[i * dim..(i + 1) * dim].to_vec())
                .collect())
        }
    }
}

/// Greedy mean-matching: at step k choose the unselected sample that brings
/// the running mean of the selection closest to the class feature mean.
/// Ties break toward the lowest index.
pub fn herding_coreset(
    ds: &Dataset,
    ipc: usize,
    features: HerdingFeatures,
    spec: Option<&ModelSpec>,
    seed: u64,
) -> Result<CoresetResult> {
    check_class_sizes(ds, ipc)?;
    let mut per_class = Vec::with_capacity(ds.num_classes);
    for c in 0..ds.num_classes {
        let feats = class_features(ds, c, features, spec, seed)?;
        let members = &ds.class_index[c];
        let dim = feats[0].len();
        let m = members.len();
        let mut mu = vec![0.0; dim];
        for f in &feats {
            for (a, &b) in mu.iter_mut().zip(f) {
                *a += b;
            }
        }
        for a in mu.iter_mut() {
            *a /= m as f64;
        }

        let mut chosen: Vec<usize> = Vec::with_capacity(ipc); // positions within the class
        let mut running_sum = vec![0.0; dim];
        for step in 1..=ipc {
            let mut best: Option<(f64, usize)> = None;
            for pos in 0..m {
                if chosen.contains(&pos) {
                    continue;
                }
                let inv = 1.0 / step as f64;
                let dist: f64 = (0..dim)
                    .map(|j| {
                        let mean_j = (running_sum[j] + feats[pos][j]) * inv;
                        let d = mu[j] - mean_j;
                        d * d
                    })
                    .sum();
                // strict < keeps the lowest index on ties
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, pos));
                }
            }
            let (_, pos) = best.expect("class has >= ipc samples");
            for (a, &b) in running_sum.iter_mut().zip(&feats[pos]) {
                *a += b;
            }
            chosen.push(pos);
        }
        per_class.push(chosen.into_iter().map(|pos| members[pos]).collect());
    }
    let result = CoresetResult {
        method: match features {
            HerdingFeatures::Pixel => "herding_pixel".into(),
            HerdingFeatures::ModelEmbedding => "herding_embedding".into(),
        },
        seed,
        per_class,
    };
    result.check(ds, ipc)?;
    Ok(result)
}

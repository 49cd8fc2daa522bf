//! The meta-gradient oracle: the gradient of the matching loss with respect
//! to the synthetic images — a derivative through a gradient computation —
//! checked entry by entry against central finite differences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gradmatch::autodiff::check::{finite_diff_gradient, max_rel_err};
use gradmatch::autodiff::{softmax_cross_entropy, Graph};
use gradmatch::condenser::{synthetic_step, CondenseConfig, MatchMode};
use gradmatch::data::{gaussian_blobs, init_synthetic, sample_class_batch, SynthInit, SyntheticSet};
use gradmatch::matching::{multi_level_loss, DistanceSpec, GradEntry, GradientSet};
use gradmatch::models::{bind_params, forward, init_params, Arch, ModelSpec, ParamSet};
use gradmatch::{grad, Result, Tensor};

/// Value of the multi-level matching loss at a given S (as plain data).
/// Real-side gradients are precomputed constants, so this is exactly the
/// scalar function of S that the meta-gradient differentiates.
fn matching_loss_at(
    s_images: &Tensor,
    s: &SyntheticSet,
    theta: &ParamSet,
    spec: &ModelSpec,
    real: &[(Vec<Tensor>, usize)],
    dist: &DistanceSpec,
    lambda: f64,
) -> Result<f64> {
    let g = Graph::new();
    let params = bind_params(&g, theta, true)?;
    let s_leaf = g.leaf(s_images.clone(), false)?;

    let mut per_class_s = Vec::new();
    let mut per_class_t = Vec::new();
    for (c, (real_grads, real_n)) in real.iter().enumerate() {
        let range = s.class_range(c);
        let batch = s_leaf.slice_rows(range.start, range.end)?;
        let labels = &s.labels[range];
        let loss = softmax_cross_entropy(&forward(spec, &params, &batch)?, labels)?;
        per_class_s.push((
            GradientSet::from_loss(&loss, theta, &params, true)?,
            labels.len(),
        ));
        per_class_t.push((
            GradientSet {
                entries: theta
                    .entries
                    .iter()
                    .zip(real_grads)
                    .map(|(e, t)| {
                        Ok(GradEntry {
                            layer: e.layer.clone(),
                            role: e.role,
                            var: g.constant(t.clone())?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            *real_n,
        ));
    }
    Ok(multi_level_loss(&per_class_s, &per_class_t, dist, lambda)?
        .total
        .item())
}

fn real_side(
    ds: &gradmatch::data::Dataset,
    theta: &ParamSet,
    spec: &ModelSpec,
    batch: usize,
    seed: u64,
) -> Vec<(Vec<Tensor>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ds.num_classes)
        .map(|c| {
            let (images, labels) = sample_class_batch(ds, c, batch, &mut rng).unwrap();
            let g = Graph::new();
            let params = bind_params(&g, theta, true).unwrap();
            let b = g.constant(images).unwrap();
            let loss =
                softmax_cross_entropy(&forward(spec, &params, &b).unwrap(), &labels).unwrap();
            let gs = GradientSet::from_loss(&loss, theta, &params, false).unwrap();
            (
                gs.entries.iter().map(|e| e.var.value()).collect::<Vec<_>>(),
                labels.len(),
            )
        })
        .collect()
}

fn check_meta_gradient(
    arch: Arch,
    dim: usize,
    classes: usize,
    ipc: usize,
    tol: f64,
) -> (f64, usize) {
    let ds = gaussian_blobs(classes, 16, dim, 3.0, 41).unwrap();
    let spec = ModelSpec::new(arch, (1, 1, dim), classes).unwrap();
    let theta = init_params(&spec, 17).unwrap();
    let s = init_synthetic(&ds, ipc, SynthInit::Noise, 23).unwrap();
    let dist: DistanceSpec = "d1+d2".parse().unwrap();
    let lambda = classes as f64;
    let real = real_side(&ds, &theta, &spec, 8, 99);

    // autodiff meta-gradient
    let g = Graph::new();
    let params = bind_params(&g, &theta, true).unwrap();
    let s_leaf = g.leaf(s.images.clone(), true).unwrap();
    let mut per_class_s = Vec::new();
    let mut per_class_t = Vec::new();
    for (c, (real_grads, real_n)) in real.iter().enumerate() {
        let range = s.class_range(c);
        let batch = s_leaf.slice_rows(range.start, range.end).unwrap();
        let labels = &s.labels[range];
        let loss =
            softmax_cross_entropy(&forward(&spec, &params, &batch).unwrap(), labels).unwrap();
        per_class_s.push((
            GradientSet::from_loss(&loss, &theta, &params, true).unwrap(),
            labels.len(),
        ));
        per_class_t.push((
            GradientSet {
                entries: theta
                    .entries
                    .iter()
                    .zip(real_grads)
                    .map(|(e, t)| GradEntry {
                        layer: e.layer.clone(),
                        role: e.role,
                        var: g.constant(t.clone()).unwrap(),
                    })
                    .collect(),
            },
            *real_n,
        ));
    }
    let ml = multi_level_loss(&per_class_s, &per_class_t, &dist, lambda).unwrap();
    let meta = grad(&ml.total, &[&s_leaf], false).unwrap().remove(0);

    // finite differences over every entry of S
    let mut f =
        |t: &Tensor| -> Result<f64> { matching_loss_at(t, &s, &theta, &spec, &real, &dist, lambda) };
    let fd = finite_diff_gradient(&mut f, &s.images, 1e-5).unwrap();
    let err = max_rel_err(&meta.value(), &fd);
    assert!(err <= tol, "{arch}: meta-gradient rel err {err:.3e} > {tol:.0e}");
    (err, s.images.numel())
}

#[test]
fn meta_gradient_logistic_four_points() {
    // 2 classes x 2 images per class = 4 synthetic points
    let (err, n) = check_meta_gradient(Arch::Logistic, 3, 2, 2, 1e-4);
    assert_eq!(n, 4 * 3);
    eprintln!("logistic meta-gradient rel err {err:.3e}");
}

#[test]
fn meta_gradient_two_layer_mlp_eight_points() {
    // 2 classes x 4 images per class = 8 synthetic points on a 2-layer MLP
    let (err, n) = check_meta_gradient(Arch::Mlp, 4, 2, 4, 1e-4);
    assert_eq!(n, 8 * 4);
    eprintln!("mlp meta-gradient rel err {err:.3e}");
}

/// A full synthetic_step must move S exactly along the negative
/// meta-gradient: S' = S - eta * dL/dS.
#[test]
fn synthetic_step_is_one_sgd_step_on_the_meta_gradient() {
    let ds = gaussian_blobs(2, 20, 2, 3.0, 7).unwrap();
    let spec = ModelSpec::new(Arch::Logistic, (1, 1, 2), 2).unwrap();
    let theta = init_params(&spec, 3).unwrap();
    let mut cfg = CondenseConfig::new(1, "d1+d2".parse().unwrap(), 2);
    cfg.mode = MatchMode::MultiLevel;
    cfg.eta_s = 0.05;
    cfg.real_batch_per_class = 6;

    let mut s = init_synthetic(&ds, 1, SynthInit::Noise, 9).unwrap();
    let before = s.images.clone();

    // reproduce the step's sampling stream to precompute the real side
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let real = {
        let mut rng2 = ChaCha8Rng::seed_from_u64(1234);
        (0..2)
            .map(|c| {
                let (images, labels) = sample_class_batch(&ds, c, 6, &mut rng2).unwrap();
                let g = Graph::new();
                let params = bind_params(&g, &theta, true).unwrap();
                let b = g.constant(images).unwrap();
                let loss = softmax_cross_entropy(&forward(&spec, &params, &b).unwrap(), &labels)
                    .unwrap();
                let gs = GradientSet::from_loss(&loss, &theta, &params, false).unwrap();
                (
                    gs.entries.iter().map(|e| e.var.value()).collect::<Vec<_>>(),
                    labels.len(),
                )
            })
            .collect::<Vec<_>>()
    };

    synthetic_step(&mut s, &theta, &ds, &spec, &cfg, 0, &mut rng).unwrap();

    // recompute the expected step independently
    let g = Graph::new();
    let params = bind_params(&g, &theta, true).unwrap();
    let s_leaf = g.leaf(before.clone(), true).unwrap();
    let mut per_class_s = Vec::new();
    let mut per_class_t = Vec::new();
    for (c, (real_grads, real_n)) in real.iter().enumerate() {
        let range = c..c + 1;
        let batch = s_leaf.slice_rows(range.start, range.end).unwrap();
        let labels = &s.labels[range];
        let loss =
            softmax_cross_entropy(&forward(&spec, &params, &batch).unwrap(), labels).unwrap();
        per_class_s.push((
            GradientSet::from_loss(&loss, &theta, &params, true).unwrap(),
            labels.len(),
        ));
        per_class_t.push((
            GradientSet {
                entries: theta
                    .entries
                    .iter()
                    .zip(real_grads)
                    .map(|(e, t)| GradEntry {
                        layer: e.layer.clone(),
                        role: e.role,
                        var: g.constant(t.clone()).unwrap(),
                    })
                    .collect(),
            },
            *real_n,
        ));
    }
    let ml = multi_level_loss(&per_class_s, &per_class_t, &cfg.distance, cfg.lambda).unwrap();
    let meta = grad(&ml.total, &[&s_leaf], false).unwrap().remove(0).value();

    for ((&got, &orig), &gv) in s
        .images
        .data()
        .iter()
        .zip(before.data())
        .zip(meta.data())
    {
        let want = orig - cfg.eta_s * gv;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

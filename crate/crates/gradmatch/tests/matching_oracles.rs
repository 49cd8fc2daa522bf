//! Independent oracles for the matching module: a from-scratch flat
//! reimplementation of the layer-wise distance, the union-gradient identity
//! against a directly computed concatenated-batch gradient, and property
//! tests of the distance identities.

use proptest::prelude::*;

use gradmatch::autodiff::{softmax_cross_entropy, Graph};
use gradmatch::data::gaussian_blobs;
use gradmatch::matching::{
    gradset_distance, layer_distance, row_view, union_gradient, DistanceKind, DistanceSpec,
    GradEntry, GradientSet,
};
use gradmatch::models::{bind_params, forward, init_params, Arch, ModelSpec, Role};
use gradmatch::tensor::Tensor;
use gradmatch::{Result, Var};

const EPS: f64 = 1e-6;

/// Plain-loop reimplementation of the row-distance sum; shares nothing with
/// the graph implementation.
fn oracle_rows_distance(a: &[Vec<f64>], b: &[Vec<f64>], terms: &[(DistanceKind, f64)]) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let len = ra.len() as f64;
        let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
        let na: f64 = ra.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let ssq: f64 = ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        for &(kind, w) in terms {
            total += w * match kind {
                DistanceKind::D1Cosine => 1.0 - dot / (na * nb).max(EPS),
                DistanceKind::D2Euclid => ssq.sqrt(),
                DistanceKind::D3Sq => ssq,
                DistanceKind::D4Mse => ssq / len,
            };
        }
    }
    total
}

/// Materialize the (out, rest) rows of a gradient tensor.
fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (out, rest) = match s.len() {
        1 => (s[0], 1),
        2 => (s[0], s[1]),
        4 => (s[0], s[1] * s[2] * s[3]),
        _ => panic!("unexpected gradient rank {s:?}"),
    };
    (0..out)
        .map(|i| t.data()[i * rest..(i + 1) * rest].to_vec())
        .collect()
}

fn gradset_of(g: &Graph, tensors: &[(&str, Role, Tensor)]) -> GradientSet {
    GradientSet {
        entries: tensors
            .iter()
            .map(|(layer, role, t)| GradEntry {
                layer: layer.to_string(),
                role: *role,
                var: g.constant(t.clone()).unwrap(),
            })
            .collect(),
    }
}

#[test]
fn gradset_distance_matches_flat_oracle() {
    let g = Graph::new();
    let mk = |seed: u64, shape: &[usize]| {
        Tensor::from_fn(shape, |i| ((i as f64 + seed as f64) * 0.7391).sin() * 2.0)
    };
    let spec: DistanceSpec = "d1+0.5*d2+2*d3+100*d4".parse().unwrap();

    let layers_a = [
        ("conv1", Role::Weight, mk(1, &[4, 2, 3, 3])),
        ("conv1", Role::Bias, mk(2, &[4])),
        ("fc", Role::Weight, mk(3, &[5, 8])),
        ("fc", Role::Bias, mk(4, &[5])),
    ];
    let layers_b = [
        ("conv1", Role::Weight, mk(9, &[4, 2, 3, 3])),
        ("conv1", Role::Bias, mk(10, &[4])),
        ("fc", Role::Weight, mk(11, &[5, 8])),
        ("fc", Role::Bias, mk(12, &[5])),
    ];
    let gs = gradset_of(&g, &layers_a);
    let gt = gradset_of(&g, &layers_b);

    let got = gradset_distance(&gs, &gt, &spec).unwrap().item();
    let want: f64 = layers_a
        .iter()
        .zip(&layers_b)
        .map(|((_, _, ta), (_, _, tb))| {
            oracle_rows_distance(&to_rows(ta), &to_rows(tb), &spec.terms)
        })
        .sum();
    assert!(
        (got - want).abs() <= 1e-10 * want.abs().max(1.0),
        "graph {got} vs oracle {want}"
    );
}

/// Per-class gradients of a logistic model under mean-reduced cross-entropy.
fn class_gradients(
    ds: &gradmatch::data::Dataset,
    spec: &ModelSpec,
    theta: &gradmatch::models::ParamSet,
    sizes: &[usize],
) -> Result<(Vec<(GradientSet, usize)>, Tensor, Vec<usize>)> {
    use gradmatch::data::gather_rows;
    let g = Graph::new();
    let mut per_class = Vec::new();
    let mut all_rows: Vec<usize> = Vec::new();
    let mut all_labels = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        let members = &ds.class_index[c][..n];
        all_rows.extend_from_slice(members);
        all_labels.extend(std::iter::repeat(c).take(n));
        let params = bind_params(&g, theta, true)?;
        let batch = g.constant(gather_rows(&ds.images, members))?;
        let labels = vec![c; n];
        let loss = softmax_cross_entropy(&forward(spec, &params, &batch)?, &labels)?;
        per_class.push((GradientSet::from_loss(&loss, theta, &params, false)?, n));
    }
    let union_images = gather_rows(&ds.images, &all_rows);
    Ok((per_class, union_images, all_labels))
}

#[test]
fn union_gradient_equals_concatenated_batch_gradient() {
    // Random class counts 2..=5 and batch sizes 1..=7, the weighted form.
    let mut seed = 0u64;
    for classes in 2usize..=5 {
        for trial in 0..3 {
            seed += 1;
            let sizes: Vec<usize> = (0..classes)
                .map(|i| 1 + ((seed as usize + i * 3 + trial) % 7))
                .collect();
            let ds = gaussian_blobs(classes, 8, 3, 2.0, 100 + seed).unwrap();
            let spec = ModelSpec::new(Arch::Logistic, (1, 1, 3), classes).unwrap();
            let theta = init_params(&spec, 200 + seed).unwrap();

            let (per_class, union_images, union_labels) =
                class_gradients(&ds, &spec, &theta, &sizes).unwrap();
            let union = union_gradient(&per_class).unwrap();

            let g = Graph::new();
            let params = bind_params(&g, &theta, true).unwrap();
            let batch = g.constant(union_images).unwrap();
            let loss =
                softmax_cross_entropy(&forward(&spec, &params, &batch).unwrap(), &union_labels)
                    .unwrap();
            let direct = GradientSet::from_loss(&loss, &theta, &params, false).unwrap();

            for (u, d) in union.entries.iter().zip(&direct.entries) {
                let uv = u.var.value();
                let dv = d.var.value();
                for (&a, &b) in uv.data().iter().zip(dv.data()) {
                    assert!(
                        (a - b).abs() <= 1e-10,
                        "classes {classes} sizes {sizes:?}: {a} vs {b}"
                    );
                }
            }
        }
    }
}

fn const_var(g: &Graph, rows: usize, cols: usize, vals: &[f64]) -> Var {
    g.constant(Tensor::new(vec![rows, cols], vals.to_vec()).unwrap())
        .unwrap()
}

fn pure(kind: DistanceKind) -> DistanceSpec {
    DistanceSpec::single(kind)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Pure d1 is invariant to positive row scalings on healthy rows.
    #[test]
    fn d1_scale_invariance(
        vals in proptest::collection::vec(-3.0f64..3.0, 8),
        c in prop_oneof![Just(0.1f64), Just(3.0), Just(100.0)],
    ) {
        let rows = 2;
        let cols = 4;
        // keep both rows well away from zero norm
        let norm0: f64 = vals[..cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm1: f64 = vals[cols..].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm0 >= 1e-2 && norm1 >= 1e-2);

        let g = Graph::new();
        let a = const_var(&g, rows, cols, &vals);
        let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
        let b = const_var(&g, rows, cols, &vals);
        let bc = const_var(&g, rows, cols, &scaled);

        let base = layer_distance(&a, &b, &pure(DistanceKind::D1Cosine)).unwrap().item();
        let moved = layer_distance(&a, &bc, &pure(DistanceKind::D1Cosine)).unwrap().item();
        prop_assert!((base - moved).abs() <= 1e-6, "|{base} - {moved}|");
    }

    /// Every d1 row contribution lies in [0, 2]; the layer sum in [0, 2*rows].
    #[test]
    fn d1_range(vals_a in proptest::collection::vec(-5.0f64..5.0, 12),
                vals_b in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let g = Graph::new();
        for row in 0..3 {
            let a = const_var(&g, 1, 4, &vals_a[row * 4..(row + 1) * 4]);
            let b = const_var(&g, 1, 4, &vals_b[row * 4..(row + 1) * 4]);
            let d = layer_distance(&a, &b, &pure(DistanceKind::D1Cosine)).unwrap().item();
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&d), "row d1 = {d}");
        }
        let a = const_var(&g, 3, 4, &vals_a);
        let b = const_var(&g, 3, 4, &vals_b);
        let d = layer_distance(&a, &b, &pure(DistanceKind::D1Cosine)).unwrap().item();
        prop_assert!((-1e-9..=6.0 + 1e-9).contains(&d), "layer d1 = {d}");
    }

    /// d2, d3, d4 are exactly symmetric.
    #[test]
    fn magnitude_terms_symmetric(
        vals_a in proptest::collection::vec(-5.0f64..5.0, 8),
        vals_b in proptest::collection::vec(-5.0f64..5.0, 8),
    ) {
        let g = Graph::new();
        let a = const_var(&g, 2, 4, &vals_a);
        let b = const_var(&g, 2, 4, &vals_b);
        for kind in [DistanceKind::D2Euclid, DistanceKind::D3Sq, DistanceKind::D4Mse] {
            let ab = layer_distance(&a, &b, &pure(kind)).unwrap().item();
            let ba = layer_distance(&b, &a, &pure(kind)).unwrap().item();
            prop_assert_eq!(ab, ba);
        }
    }

    /// The graph distance always agrees with the flat oracle.
    #[test]
    fn distance_matches_oracle_on_random_matrices(
        vals_a in proptest::collection::vec(-4.0f64..4.0, 15),
        vals_b in proptest::collection::vec(-4.0f64..4.0, 15),
        w2 in 0.01f64..10.0,
    ) {
        let g = Graph::new();
        let a = const_var(&g, 3, 5, &vals_a);
        let b = const_var(&g, 3, 5, &vals_b);
        let spec = DistanceSpec {
            terms: vec![(DistanceKind::D1Cosine, 1.0), (DistanceKind::D2Euclid, w2)],
        };
        let got = layer_distance(&a, &b, &spec).unwrap().item();
        let rows_a: Vec<Vec<f64>> = vals_a.chunks(5).map(<[f64]>::to_vec).collect();
        let rows_b: Vec<Vec<f64>> = vals_b.chunks(5).map(<[f64]>::to_vec).collect();
        let want = oracle_rows_distance(&rows_a, &rows_b, &spec.terms);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

/// The meta-gradient path: gradients of layer_distance w.r.t. both arguments
/// pass finite differences for every single-term spec and the combined one.
#[test]
fn layer_distance_gradients_match_finite_differences() {
    use gradmatch::autodiff::check::{finite_diff_gradient, max_rel_err};
    use gradmatch::grad;

    let specs: Vec<DistanceSpec> = vec![
        "d1".parse().unwrap(),
        "d2".parse().unwrap(),
        "d3".parse().unwrap(),
        "d4".parse().unwrap(),
        "d1+d2".parse().unwrap(),
        "d1+100*d4".parse().unwrap(),
    ];
    let a0 = Tensor::from_fn(&[3, 4], |i| ((i as f64) * 0.83).sin() + 0.2);
    let b0 = Tensor::from_fn(&[3, 4], |i| ((i as f64) * 1.91).cos() - 0.1);

    for spec in &specs {
        let g = Graph::new();
        let a = g.leaf(a0.clone(), true).unwrap();
        let b = g.leaf(b0.clone(), true).unwrap();
        let d = layer_distance(&a, &b, spec).unwrap();
        let grads = grad(&d, &[&a, &b], false).unwrap();

        for (idx, gv) in grads.iter().enumerate() {
            let mut f = |t: &Tensor| -> Result<f64> {
                let fg = Graph::new();
                let fa = fg.leaf(if idx == 0 { t.clone() } else { a0.clone() }, false)?;
                let fb = fg.leaf(if idx == 1 { t.clone() } else { b0.clone() }, false)?;
                Ok(layer_distance(&fa, &fb, spec)?.item())
            };
            let x0 = if idx == 0 { &a0 } else { &b0 };
            let fd = finite_diff_gradient(&mut f, x0, 1e-5).unwrap();
            let err = max_rel_err(&gv.value(), &fd);
            assert!(err <= 1e-5, "spec {spec}, arg {idx}: rel err {err:.3e}");
        }
    }
}

/// row_view conventions quoted in the module contract.
#[test]
fn row_view_shapes() {
    let g = Graph::new();
    let conv = g.constant(Tensor::zeros(&[8, 3, 3, 3])).unwrap();
    assert_eq!(row_view(&conv).unwrap().shape(), vec![8, 27]);
    let bias = g.constant(Tensor::zeros(&[10])).unwrap();
    assert_eq!(row_view(&bias).unwrap().shape(), vec![10, 1]);
}

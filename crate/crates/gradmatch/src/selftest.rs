//! Built-in oracle suites: every differentiable operation is validated
//! against the central finite-difference oracle, first and second order.
//!
//! The CLI `selftest` subcommand runs these, and the acceptance test suite
//! asserts on their outcomes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::{finite_diff_gradient, max_rel_err};
use crate::autodiff::{grad, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const FIRST_ORDER_TOL: f64 = 1e-5;
const SECOND_ORDER_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// How inputs for an operation are sampled.
#[derive(Clone, Copy)]
enum Domain {
    /// Uniform in [-1, 1].
    Any,
    /// Uniform with |x| >= 1e-3 (keeps relu/clamp checks off the kink).
    AwayFromZero,
    /// Uniform in [0.1, 1.1].
    Positive,
}

fn sample(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(-1.0..1.0);
        match domain {
            Domain::Any => v,
            Domain::AwayFromZero => v + v.signum() * 1e-3,
            Domain::Positive => v.abs() + 0.1,
        }
    })
}

/// Contract a tensor to a scalar against fixed random weights so every entry
/// of the op output influences the objective.
fn weighted_sum(v: &Var, weights: &Tensor) -> Result<Var> {
    let w = v.graph().constant(weights.clone())?;
    v.mul(&w)?.sum()
}

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domains: &'static [Domain],
    build: fn(&Graph, &[Var]) -> Result<Var>,
}

fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        OpCase {
            name: "add",
            shapes: &[&[3, 4], &[3, 4]],
            domains: &[Any, Any],
            build: |_, v| v[0].add(&v[1]),
        },
        OpCase {
            name: "sub",
            shapes: &[&[3, 4], &[3, 4]],
            domains: &[Any, Any],
            build: |_, v| v[0].sub(&v[1]),
        },
        OpCase {
            name: "mul",
            shapes: &[&[3, 4], &[3, 4]],
            domains: &[Any, Any],
            build: |_, v| v[0].mul(&v[1]),
        },
        OpCase {
            name: "scale",
            shapes: &[&[5]],
            domains: &[Any],
            build: |_, v| v[0].scale(-1.7),
        },
        OpCase {
            name: "recip",
            shapes: &[&[5]],
            domains: &[Positive],
            build: |_, v| v[0].recip(),
        },
        OpCase {
            name: "exp",
            shapes: &[&[5]],
            domains: &[Any],
            build: |_, v| v[0].exp(),
        },
        OpCase {
            name: "log",
            shapes: &[&[5]],
            domains: &[Positive],
            build: |_, v| v[0].log(),
        },
        OpCase {
            name: "sqrt",
            shapes: &[&[5]],
            domains: &[Positive],
            build: |_, v| v[0].sqrt(),
        },
        OpCase {
            name: "relu",
            shapes: &[&[4, 3]],
            domains: &[AwayFromZero],
            build: |_, v| v[0].relu(),
        },
        OpCase {
            name: "clamp_min",
            shapes: &[&[6]],
            domains: &[AwayFromZero],
            build: |_, v| v[0].clamp_min(0.0),
        },
        OpCase {
            name: "matmul",
            shapes: &[&[3, 4], &[4, 2]],
            domains: &[Any, Any],
            build: |_, v| v[0].matmul(&v[1]),
        },
        OpCase {
            name: "transpose",
            shapes: &[&[3, 5]],
            domains: &[Any],
            build: |_, v| v[0].transpose(),
        },
        OpCase {
            name: "reshape",
            shapes: &[&[2, 6]],
            domains: &[Any],
            build: |_, v| v[0].reshape(vec![3, 4]),
        },
        OpCase {
            name: "sum",
            shapes: &[&[3, 4]],
            domains: &[Any],
            build: |_, v| v[0].sum(),
        },
        OpCase {
            name: "mean",
            shapes: &[&[3, 4]],
            domains: &[Any],
            build: |_, v| v[0].mean(),
        },
        OpCase {
            name: "sum_axis1",
            shapes: &[&[3, 4]],
            domains: &[Any],
            build: |_, v| v[0].sum_axis1(),
        },
        OpCase {
            name: "broadcast_axis1",
            shapes: &[&[3]],
            domains: &[Any],
            build: |_, v| v[0].broadcast_axis1(4),
        },
        OpCase {
            name: "sum_rows",
            shapes: &[&[3, 4]],
            domains: &[Any],
            build: |_, v| v[0].sum_rows(),
        },
        OpCase {
            name: "broadcast_rows",
            shapes: &[&[4]],
            domains: &[Any],
            build: |_, v| v[0].broadcast_rows(3),
        },
        OpCase {
            name: "slice_rows",
            shapes: &[&[5, 3]],
            domains: &[Any],
            build: |_, v| v[0].slice_rows(1, 4),
        },
        OpCase {
            name: "pad_rows",
            shapes: &[&[2, 3]],
            domains: &[Any],
            build: |_, v| v[0].pad_rows(5, 2),
        },
        OpCase {
            name: "conv2d",
            shapes: &[&[2, 2, 5, 5], &[3, 2, 3, 3]],
            domains: &[Any, Any],
            build: |_, v| v[0].conv2d(&v[1], 1, 0),
        },
        OpCase {
            name: "conv2d_stride2_pad1",
            shapes: &[&[1, 2, 6, 7], &[2, 2, 3, 3]],
            domains: &[Any, Any],
            build: |_, v| v[0].conv2d(&v[1], 2, 1),
        },
        OpCase {
            name: "avg_pool2d",
            shapes: &[&[1, 2, 5, 6]],
            domains: &[Any],
            build: |_, v| v[0].avg_pool2d(2),
        },
        OpCase {
            name: "flatten",
            shapes: &[&[2, 2, 3, 2]],
            domains: &[Any],
            build: |_, v| v[0].flatten(),
        },
        OpCase {
            name: "sum_channels",
            shapes: &[&[2, 3, 2, 2]],
            domains: &[Any],
            build: |_, v| v[0].sum_channels(),
        },
        OpCase {
            name: "broadcast_channels",
            shapes: &[&[3]],
            domains: &[Any],
            build: |_, v| v[0].broadcast_channels(2, 2, 2),
        },
        OpCase {
            name: "dot_rows",
            shapes: &[&[3, 4], &[3, 4]],
            domains: &[Any, Any],
            build: |_, v| v[0].dot_rows(&v[1]),
        },
        OpCase {
            name: "l2_norm_rows",
            shapes: &[&[3, 4]],
            domains: &[Positive],
            build: |_, v| v[0].l2_norm_rows(),
        },
        OpCase {
            name: "l2_norm",
            shapes: &[&[5]],
            domains: &[Positive],
            build: |_, v| v[0].l2_norm(),
        },
        OpCase {
            name: "dot",
            shapes: &[&[5], &[5]],
            domains: &[Any, Any],
            build: |_, v| v[0].dot(&v[1]),
        },
        OpCase {
            name: "add_row_bias",
            shapes: &[&[3, 4], &[4]],
            domains: &[Any, Any],
            build: |_, v| v[0].add_row_bias(&v[1]),
        },
        OpCase {
            name: "add_channel_bias",
            shapes: &[&[2, 3, 2, 2], &[3]],
            domains: &[Any, Any],
            build: |_, v| v[0].add_channel_bias(&v[1]),
        },
        OpCase {
            name: "softmax_cross_entropy",
            shapes: &[&[4, 3]],
            domains: &[Any],
            build: |_, v| {
                crate::autodiff::softmax_cross_entropy(&v[0], &[0, 2, 1, 2])
            },
        },
    ]
}

/// First-order check of one case at one seed; returns the worst relative
/// error across all inputs.
fn check_case_once(case: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .zip(case.domains)
        .map(|(s, d)| sample(s, *d, &mut rng))
        .collect();

    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = (case.build)(&g, &vars)?;
    let weights = sample(&out.shape(), Domain::Any, &mut rng);
    let objective = weighted_sum(&out, &weights)?;
    let grads = grad(&objective, &vars.iter().collect::<Vec<_>>(), false)?;

    let mut worst = 0.0f64;
    for (idx, gv) in grads.iter().enumerate() {
        let mut f = |t: &Tensor| -> Result<f64> {
            let fg = Graph::new();
            let fv: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| fg.leaf(if j == idx { t.clone() } else { orig.clone() }, false))
                .collect::<Result<_>>()?;
            let o = (case.build)(&fg, &fv)?;
            Ok(weighted_sum(&o, &weights)?.item())
        };
        let fd = finite_diff_gradient(&mut f, &inputs[idx], FD_STEP)?;
        worst = worst.max(max_rel_err(&gv.value(), &fd));
    }
    Ok(worst)
}

/// Every op against finite differences, `instances` random instances each.
pub fn gradient_oracle_suite(instances: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut worst = 0.0f64;
        let mut failed_seed = None;
        for s in 0..instances as u64 {
            let err = check_case_once(&case, 0x5eed_0000 + s)?;
            if err > worst {
                worst = err;
                if err > FIRST_ORDER_TOL {
                    failed_seed = Some(s);
                }
            }
        }
        out.push(Check::new(
            format!("grad/{}", case.name),
            worst <= FIRST_ORDER_TOL,
            match failed_seed {
                Some(s) => format!("max rel err {worst:.3e} (seed {s}) over {instances} instances"),
                None => format!("max rel err {worst:.3e} over {instances} instances"),
            },
        ));
    }
    Ok(out)
}

struct SecondOrderCase {
    name: &'static str,
    shape: &'static [usize],
    domain: Domain,
    build: fn(&Graph, &Var) -> Result<Var>,
}

fn second_order_cases() -> Vec<SecondOrderCase> {
    use Domain::*;
    vec![
        SecondOrderCase {
            name: "cubic",
            shape: &[4],
            domain: Any,
            build: |_, x| x.mul(x)?.mul(x)?.sum(),
        },
        SecondOrderCase {
            name: "exp_log_mix",
            shape: &[3],
            domain: Positive,
            build: |_, x| {
                let e = x.exp()?;
                e.add(&x.log()?)?.mul(&e)?.sum()
            },
        },
        SecondOrderCase {
            name: "matmul_quadratic",
            shape: &[3, 3],
            domain: Any,
            build: |_, x| x.matmul(x)?.mul(x)?.sum(),
        },
        SecondOrderCase {
            name: "row_cosine",
            shape: &[3, 4],
            domain: Positive,
            build: |g, x| {
                let shifted = x.add(&g.constant(Tensor::full(&[3, 4], 0.5))?)?;
                let dots = x.dot_rows(&shifted)?;
                let denom = x
                    .l2_norm_rows()?
                    .mul(&shifted.l2_norm_rows()?)?
                    .clamp_min(1e-6)?;
                dots.mul(&denom.recip()?)?.sum()
            },
        },
        SecondOrderCase {
            name: "conv_pool_sq",
            shape: &[1, 1, 4, 4],
            domain: Any,
            build: |g, x| {
                let w = g.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64) * 0.11 - 0.7))?;
                let y = x.conv2d(&w, 1, 1)?.avg_pool2d(2)?;
                y.mul(&y)?.sum()
            },
        },
        SecondOrderCase {
            name: "cross_entropy_sq",
            shape: &[3, 4],
            domain: Any,
            build: |_, x| {
                let l = crate::autodiff::softmax_cross_entropy(x, &[1, 3, 0])?;
                l.mul(&l)
            },
        },
    ]
}

/// grad(grad(f)) against finite differences of the autodiff gradient.
pub fn second_order_suite(instances: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for case in second_order_cases() {
        let mut worst = 0.0f64;
        for s in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0x2ed_0000 + s);
            let x0 = sample(case.shape, case.domain, &mut rng);
            let weights = sample(case.shape, Domain::Any, &mut rng);

            let g = Graph::new();
            let x = g.leaf(x0.clone(), true)?;
            let y = (case.build)(&g, &x)?;
            let g1 = grad(&y, &[&x], true)?.remove(0);
            let contracted = weighted_sum(&g1, &weights)?;
            let g2 = grad(&contracted, &[&x], false)?.remove(0);

            let mut f = |t: &Tensor| -> Result<f64> {
                let fg = Graph::new();
                let fx = fg.leaf(t.clone(), true)?;
                let fy = (case.build)(&fg, &fx)?;
                let fg1 = grad(&fy, &[&fx], false)?.remove(0);
                Ok(weighted_sum(&fg1, &weights)?.item())
            };
            let fd = finite_diff_gradient(&mut f, &x0, FD_STEP)?;
            worst = worst.max(max_rel_err(&g2.value(), &fd));
        }
        out.push(Check::new(
            format!("grad2/{}", case.name),
            worst <= SECOND_ORDER_TOL,
            format!("max rel err {worst:.3e} over {instances} instances"),
        ));
    }
    Ok(out)
}

//! The gradient-matching condensation loop: outer parameter re-initializations
//! around inner iterations that alternate one synthetic-set update (through
//! the meta-gradient) with a budgeted run of parameter updates.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, softmax_cross_entropy, Graph};
use crate::data::{sample_class_batch, sample_mixed_batch, Dataset, SynthInit, SyntheticSet};
use crate::error::{Error, Result};
use crate::matching::{
    inter_class_loss, intra_class_loss, multi_level_loss, DistanceSpec, GradientSet,
};
use crate::models::{bind_params, forward, init_params, ModelSpec, ParamSet};
use crate::tensor::Tensor;

/// How many parameter updates each inner iteration performs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaPolicy {
    /// The same step count at every inner iteration.
    Fixed { steps: usize },
    /// The non-increasing preset schedule (50-10t, then 10, then 5).
    Schedule,
    /// Step until the validation loss rises, up to `cap` steps.
    OverfitCriterion { cap: usize },
}

/// Which gradients the matching loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Intra,
    Inter,
    Interleaved,
    MultiLevel,
}

impl std::fmt::Display for MatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchMode::Intra => "intra",
            MatchMode::Inter => "inter",
            MatchMode::Interleaved => "interleaved",
            MatchMode::MultiLevel => "multi_level",
        })
    }
}

impl std::str::FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(MatchMode::Intra),
            "inter" => Ok(MatchMode::Inter),
            "interleaved" => Ok(MatchMode::Interleaved),
            "multi_level" => Ok(MatchMode::MultiLevel),
            other => Err(Error::Config(vec![format!("unknown match mode '{other}'")])),
        }
    }
}

/// Every hyperparameter of one condensation run.
#[derive(Clone, Debug)]
pub struct CondenseConfig {
    /// Outer iterations (fresh parameter initializations).
    pub outer_iters: usize,
    /// Inner iterations per outer iteration.
    pub inner_iters: usize,
    /// Synthetic-set updates per inner iteration.
    pub synth_steps: usize,
    pub theta_policy: ThetaPolicy,
    pub eta_s: f64,
    pub eta_theta: f64,
    /// SGD momentum on the synthetic images (0 = plain SGD).
    pub momentum_s: f64,
    /// SGD momentum on the parameter phase (0 = plain SGD).
    pub momentum_theta: f64,
    /// Weight of the inter-class term.
    pub lambda: f64,
    pub mode: MatchMode,
    pub distance: DistanceSpec,
    pub real_batch_per_class: usize,
    pub ipc: usize,
    pub init: SynthInit,
    /// Mixed-class real batch size for the overfit criterion.
    pub val_batch_size: usize,
    pub seed: u64,
}

impl CondenseConfig {
    pub fn new(ipc: usize, distance: DistanceSpec, num_classes: usize) -> Self {
        Self {
            outer_iters: 1,
            inner_iters: 1,
            synth_steps: 1,
            theta_policy: ThetaPolicy::Fixed { steps: 50 },
            eta_s: 0.1,
            eta_theta: 0.01,
            momentum_s: 0.0,
            momentum_theta: 0.0,
            lambda: num_classes as f64,
            mode: MatchMode::MultiLevel,
            distance,
            real_batch_per_class: 64,
            ipc,
            init: SynthInit::Noise,
            val_batch_size: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.outer_iters == 0 {
            errs.push("outer_iters must be >= 1".to_string());
        }
        if self.inner_iters == 0 {
            errs.push("inner_iters must be >= 1".to_string());
        }
        if self.synth_steps == 0 {
            errs.push("synth_steps must be >= 1".to_string());
        }
        if !(self.eta_s >= 0.0 && self.eta_s.is_finite()) {
            errs.push("eta_s must be finite and >= 0".to_string());
        }
        if !(self.eta_theta > 0.0 && self.eta_theta.is_finite()) {
            errs.push("eta_theta must be finite and > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum_s) {
            errs.push("momentum_s must be in [0, 1)".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum_theta) {
            errs.push("momentum_theta must be in [0, 1)".to_string());
        }
        if !self.lambda.is_finite() {
            errs.push("lambda must be finite".to_string());
        }
        if self.real_batch_per_class == 0 {
            errs.push("real_batch_per_class must be >= 1".to_string());
        }
        if self.ipc == 0 {
            errs.push("ipc must be >= 1".to_string());
        }
        if let ThetaPolicy::Fixed { steps } = self.theta_policy {
            if steps == 0 {
                errs.push("fixed theta steps must be >= 1".to_string());
            }
        }
        if let ThetaPolicy::OverfitCriterion { cap } = self.theta_policy {
            if cap == 0 {
                errs.push("overfit cap must be >= 1".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// The preset non-increasing step schedule.
pub fn zeta_schedule(t: usize) -> usize {
    if t < 4 {
        50 - 10 * t
    } else if t < 10 {
        10
    } else {
        5
    }
}

/// Total parameter updates in one outer iteration: the final inner iteration
/// performs none, so the sum runs over t = 0..T-2. For the overfit criterion
/// this is the cap-based upper bound (the realized count is data-dependent).
pub fn count_theta_updates(inner_iters: usize, policy: &ThetaPolicy) -> usize {
    if inner_iters <= 1 {
        return 0;
    }
    (0..inner_iters - 1)
        .map(|t| match policy {
            ThetaPolicy::Fixed { steps } => *steps,
            ThetaPolicy::Schedule => zeta_schedule(t),
            ThetaPolicy::OverfitCriterion { cap } => *cap,
        })
        .sum()
}

/// One inner-iteration record.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TraceRecord {
    pub outer: usize,
    pub inner: usize,
    pub loss: f64,
    pub intra: f64,
    pub inter: f64,
    pub theta_steps: usize,
    /// Validation losses observed by the overfit criterion (first entry is
    /// the pre-step loss); empty under fixed/schedule policies.
    pub val_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct CondenseTrace {
    pub records: Vec<TraceRecord>,
}

/// Losses of one synthetic-set update.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub loss: f64,
    pub intra: f64,
    pub inter: f64,
}

/// Detached per-class parameter gradients of the real set. These do not
/// depend on S, so one computation serves all `synth_steps` sub-steps.
fn real_class_gradients(
    data: &Dataset,
    theta: &ParamSet,
    spec: &ModelSpec,
    batch_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<Tensor>, usize)>> {
    let mut out = Vec::with_capacity(data.num_classes);
    for c in 0..data.num_classes {
        let (images, labels) = sample_class_batch(data, c, batch_per_class, rng)?;
        let g = Graph::new();
        let params = bind_params(&g, theta, true)?;
        let batch = g.constant(images)?;
        let loss = softmax_cross_entropy(&forward(spec, &params, &batch)?, &labels)?;
        let gs = GradientSet::from_loss(&loss, theta, &params, false)?;
        let tensors: Vec<Tensor> = gs.entries.iter().map(|e| e.var.value()).collect();
        out.push((tensors, labels.len()));
    }
    Ok(out)
}

fn mode_for_iteration(mode: MatchMode, t: usize) -> MatchMode {
    match mode {
        // Interleaved starts with intra at t = 0.
        MatchMode::Interleaved => {
            if t % 2 == 0 {
                MatchMode::Intra
            } else {
                MatchMode::Inter
            }
        }
        m => m,
    }
}

/// One inner-iteration synthetic update: sample per-class batches, build the
/// matching loss from create_graph gradients, and take `synth_steps` SGD
/// steps on the images of S. `velocity` is the momentum buffer, carried
/// across iterations by the caller; pass `&mut None` to start a fresh run.
pub fn synthetic_step(
    s: &mut SyntheticSet,
    theta: &ParamSet,
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &CondenseConfig,
    t: usize,
    rng: &mut ChaCha8Rng,
    velocity: &mut Option<Tensor>,
) -> Result<StepRecord> {
    let real = real_class_gradients(data, theta, spec, cfg.real_batch_per_class, rng)?;
    let classes = data.num_classes;
    let mut last = StepRecord {
        loss: f64::NAN,
        intra: f64::NAN,
        inter: f64::NAN,
    };

    for _ in 0..cfg.synth_steps {
        let g = Graph::new();
        let params = bind_params(&g, theta, true)?;
        let s_leaf = g.leaf(s.images.clone(), true)?;

        let mut per_class_s = Vec::with_capacity(classes);
        let mut per_class_t = Vec::with_capacity(classes);
        for (c, (real_grads, real_n)) in real.iter().enumerate() {
            let range = s.class_range(c);
            let batch = s_leaf.slice_rows(range.start, range.end)?;
            let labels = &s.labels[range];
            let loss = softmax_cross_entropy(&forward(spec, &params, &batch)?, labels)?;
            let gs = GradientSet::from_loss(&loss, theta, &params, true)?;
            let size_s = labels.len();
            per_class_s.push((gs, size_s));

            let gt = GradientSet {
                entries: theta
                    .entries
                    .iter()
                    .zip(real_grads)
                    .map(|(e, tensor)| {
                        Ok(crate::matching::GradEntry {
                            layer: e.layer.clone(),
                            role: e.role,
                            var: g.constant(tensor.clone())?,
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            per_class_t.push((gt, *real_n));
        }

        let (loss_var, intra_val, inter_val) = match mode_for_iteration(cfg.mode, t) {
            MatchMode::Intra => {
                let intra = intra_class_loss(&per_class_s, &per_class_t, &cfg.distance)?;
                let v = intra.item();
                (intra, v, 0.0)
            }
            MatchMode::Inter => {
                let inter = inter_class_loss(&per_class_s, &per_class_t, &cfg.distance)?;
                let v = inter.item();
                (inter.scale(cfg.lambda)?, 0.0, v)
            }
            MatchMode::MultiLevel => {
                let ml = multi_level_loss(&per_class_s, &per_class_t, &cfg.distance, cfg.lambda)?;
                let (i, e) = (ml.intra.item(), ml.inter.item());
                (ml.total, i, e)
            }
            MatchMode::Interleaved => unreachable!("resolved by mode_for_iteration"),
        };

        let grad_s = grad(&loss_var, &[&s_leaf], false)?.remove(0).value();
        let vel = velocity.get_or_insert_with(|| Tensor::zeros(s.images.shape()));
        let imgs = s.images.data_mut();
        for ((v, vel_v), &gv) in imgs.iter_mut().zip(vel.data_mut()).zip(grad_s.data()) {
            *vel_v = cfg.momentum_s * *vel_v + gv;
            *v -= cfg.eta_s * *vel_v;
        }
        last = StepRecord {
            loss: loss_var.item(),
            intra: intra_val,
            inter: inter_val,
        };
    }
    Ok(last)
}

/// Run up to `cap` steps, stopping after the first one whose validation loss
/// exceeds the previous one (that step is kept). Returns the number of steps
/// performed and every observed validation loss, the pre-step one first.
pub fn adaptive_steps(
    cap: usize,
    mut step: impl FnMut(usize) -> Result<()>,
    mut val_loss: impl FnMut() -> Result<f64>,
) -> Result<(usize, Vec<f64>)> {
    let mut losses = vec![val_loss()?];
    for i in 0..cap {
        step(i)?;
        let l = val_loss()?;
        let prev = *losses.last().expect("seeded with the pre-step loss");
        losses.push(l);
        if l > prev {
            return Ok((i + 1, losses));
        }
    }
    Ok((cap, losses))
}

/// The parameter-update phase: SGD on the cross-entropy over the whole
/// synthetic set. Under the overfit criterion, `val_batch` supplies the real
/// validation samples. `velocity` is the momentum buffer; the caller keeps it
/// alive for the lifetime of one parameter trajectory.
#[allow(clippy::too_many_arguments)]
pub fn theta_phase(
    theta: &mut ParamSet,
    s: &SyntheticSet,
    spec: &ModelSpec,
    policy: &ThetaPolicy,
    t: usize,
    eta_theta: f64,
    momentum: f64,
    val_batch: Option<(&Tensor, &[usize])>,
    velocity: &mut Option<Vec<Tensor>>,
) -> Result<(usize, Vec<f64>)> {
    let sgd_step = |theta: &mut ParamSet, vel: &mut Vec<Tensor>| -> Result<()> {
        let g = Graph::new();
        let params = bind_params(&g, theta, true)?;
        let batch = g.constant(s.images.clone())?;
        let loss = softmax_cross_entropy(&forward(spec, &params, &batch)?, &s.labels)?;
        let gs = GradientSet::from_loss(&loss, theta, &params, false)?;
        for ((e, ge), v) in theta.entries.iter_mut().zip(gs.entries).zip(vel.iter_mut()) {
            let gt = ge.var.value();
            for ((p, vv), &gv) in e
                .tensor
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(gt.data())
            {
                *vv = momentum * *vv + gv;
                *p -= eta_theta * *vv;
            }
        }
        Ok(())
    };
    if velocity.is_none() {
        *velocity = Some(
            theta
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        );
    }
    let vel = velocity.as_mut().expect("just initialized");

    match policy {
        ThetaPolicy::Fixed { steps } => {
            for _ in 0..*steps {
                sgd_step(theta, vel)?;
            }
            Ok((*steps, Vec::new()))
        }
        ThetaPolicy::Schedule => {
            let steps = zeta_schedule(t);
            for _ in 0..steps {
                sgd_step(theta, vel)?;
            }
            Ok((steps, Vec::new()))
        }
        ThetaPolicy::OverfitCriterion { cap } => {
            let (images, labels) = val_batch.ok_or_else(|| {
                Error::Contract("overfit criterion requires a validation batch".into())
            })?;
            // RefCell lets the step and validation closures share the state.
            let cell = std::cell::RefCell::new((
                std::mem::replace(theta, ParamSet { entries: vec![] }),
                std::mem::take(vel),
            ));
            let result = adaptive_steps(
                *cap,
                |_| {
                    let (th, v) = &mut *cell.borrow_mut();
                    sgd_step(th, v)
                },
                || {
                    let g = Graph::new();
                    let params = bind_params(&g, &cell.borrow().0, false)?;
                    let batch = g.constant(images.clone())?;
                    Ok(softmax_cross_entropy(&forward(spec, &params, &batch)?, labels)?.item())
                },
            );
            let (th, v) = cell.into_inner();
            *theta = th;
            *vel = v;
            result
        }
    }
}

/// Algorithm entry point: K outer iterations of fresh parameters, each with
/// T inner iterations of synthetic update followed by the parameter phase
/// (skipped on the final inner iteration). Deterministic per (seed, config).
pub fn condense(
    data: &Dataset,
    cfg: &CondenseConfig,
    spec: &ModelSpec,
) -> Result<(SyntheticSet, CondenseTrace)> {
    cfg.validate()?;
    if data.num_classes != spec.num_classes {
        return Err(Error::ClassCount {
            expected: spec.num_classes,
            got: data.num_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let synth_seed = rng.random::<u64>();
    let mut s = crate::data::init_synthetic(data, cfg.ipc, cfg.init, synth_seed)?;
    let labels_before = s.labels.clone();
    let mut trace = CondenseTrace::default();

    let wants_val = matches!(cfg.theta_policy, ThetaPolicy::OverfitCriterion { .. });
    let mut velocity_s: Option<Tensor> = None;
    for k in 0..cfg.outer_iters {
        let theta_seed = rng.random::<u64>();
        let mut theta = init_params(spec, theta_seed)?;
        // The parameter optimizer state lives for one trajectory (one outer
        // iteration); the synthetic optimizer state spans the whole run.
        let mut velocity_theta: Option<Vec<Tensor>> = None;
        let val = if wants_val {
            Some(sample_mixed_batch(data, cfg.val_batch_size, &mut rng)?)
        } else {
            None
        };
        for t in 0..cfg.inner_iters {
            let rec = synthetic_step(&mut s, &theta, data, spec, cfg, t, &mut rng, &mut velocity_s)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Divergence {
                        outer: k,
                        inner: t,
                        msg: format!("non-finite values in {op} during the synthetic update"),
                    },
                    other => other,
                })?;
            let (theta_steps, val_losses) = if t + 1 < cfg.inner_iters {
                theta_phase(
                    &mut theta,
                    &s,
                    spec,
                    &cfg.theta_policy,
                    t,
                    cfg.eta_theta,
                    cfg.momentum_theta,
                    val.as_ref().map(|(i, l)| (i, l.as_slice())),
                    &mut velocity_theta,
                )
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Divergence {
                        outer: k,
                        inner: t,
                        msg: format!("non-finite values in {op} during the parameter phase"),
                    },
                    other => other,
                })?
            } else {
                (0, Vec::new())
            };
            trace.records.push(TraceRecord {
                outer: k,
                inner: t,
                loss: rec.loss,
                intra: rec.intra,
                inter: rec.inter,
                theta_steps,
                val_losses,
            });
        }
    }
    debug_assert_eq!(s.labels, labels_before);
    Ok((s, trace))
}

//! Distances between gradient sets and the multi-level matching loss.
//!
//! Gradients are compared layer by layer after reshaping each parameter
//! gradient to (out, rest) rows: conv (o,c,kh,kw) -> (o, c*kh*kw), linear
//! unchanged, bias (o) -> (o, 1). Four row distances are provided — negative
//! cosine (angle), Euclidean, squared error, and mean squared error — and
//! arbitrary weighted sums of them.

use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::models::{ParamSet, Role};
use crate::tensor::Tensor;

/// Stabilizer for the cosine denominator on near-zero rows.
pub const COSINE_EPS: f64 = 1e-6;

/// Floor under squared row norms before the root. Zero rows are real (dead
/// relu units produce all-zero gradient rows), and the exact-zero root would
/// put an infinite reciprocal on the backward tape. The floor leaves values
/// above 1e-9 bit-identical and makes the gradient at coincident rows
/// exactly zero, the usual norm subgradient convention.
const NORM_FLOOR: f64 = 1e-18;

/// sqrt(sum of squares per row), guarded at zero.
fn safe_row_norms(v: &Var) -> Result<Var> {
    v.mul(v)?.sum_axis1()?.clamp_min(NORM_FLOOR)?.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    /// 1 - cos(a, b) per row.
    D1Cosine,
    /// ||a - b|| per row.
    D2Euclid,
    /// ||a - b||^2 per row.
    D3Sq,
    /// ||a - b||^2 / len per row.
    D4Mse,
}

impl DistanceKind {
    fn name(self) -> &'static str {
        match self {
            DistanceKind::D1Cosine => "d1",
            DistanceKind::D2Euclid => "d2",
            DistanceKind::D3Sq => "d3",
            DistanceKind::D4Mse => "d4",
        }
    }
}

/// A weighted sum of row-distance terms, e.g. `d1 + 100*d4`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceSpec {
    pub terms: Vec<(DistanceKind, f64)>,
}

impl DistanceSpec {
    pub fn single(kind: DistanceKind) -> Self {
        Self {
            terms: vec![(kind, 1.0)],
        }
    }

    /// The paper's default combination: angle plus magnitude.
    pub fn cosine_plus_euclid() -> Self {
        Self {
            terms: vec![(DistanceKind::D1Cosine, 1.0), (DistanceKind::D2Euclid, 1.0)],
        }
    }
}

impl std::str::FromStr for DistanceSpec {
    type Err = Error;

    /// Grammar: sum of optionally weighted terms, `d1 + 0.1*d2 + 100*d4`.
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in s.split('+') {
            let part = raw.trim();
            if part.is_empty() {
                return Err(Error::DistanceSpec(format!("empty term in '{s}'")));
            }
            let (weight, name) = match part.split_once('*') {
                Some((w, n)) => {
                    let w: f64 = w.trim().parse().map_err(|_| {
                        Error::DistanceSpec(format!("bad weight '{}' in '{s}'", w.trim()))
                    })?;
                    (w, n.trim())
                }
                None => (1.0, part),
            };
            if !weight.is_finite() {
                return Err(Error::DistanceSpec(format!("non-finite weight in '{s}'")));
            }
            let kind = match name {
                "d1" => DistanceKind::D1Cosine,
                "d2" => DistanceKind::D2Euclid,
                "d3" => DistanceKind::D3Sq,
                "d4" => DistanceKind::D4Mse,
                other => {
                    return Err(Error::DistanceSpec(format!(
                        "unknown term '{other}' (expected d1..d4)"
                    )))
                }
            };
            terms.push((kind, weight));
        }
        if terms.is_empty() {
            return Err(Error::DistanceSpec("at least one term required".into()));
        }
        Ok(Self { terms })
    }
}

impl std::fmt::Display for DistanceSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (kind, w)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, "+")?;
            }
            if *w == 1.0 {
                write!(f, "{}", kind.name())?;
            } else {
                write!(f, "{}*{}", w, kind.name())?;
            }
        }
        Ok(())
    }
}

/// One per-parameter gradient, mirroring the ParamSet entry it was taken
/// against.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub layer: String,
    pub role: Role,
    pub var: Var,
}

/// Per-layer gradients of a loss w.r.t. a ParamSet, in ParamSet order.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub entries: Vec<GradEntry>,
}

impl GradientSet {
    /// Differentiate `loss` w.r.t. the bound parameter vars. With
    /// `create_graph` the entries stay differentiable (the meta-gradient
    /// path); without it they are detached constants.
    pub fn from_loss(
        loss: &Var,
        layout: &ParamSet,
        vars: &[Var],
        create_graph: bool,
    ) -> Result<Self> {
        if layout.entries.len() != vars.len() {
            return Err(Error::Structure(format!(
                "{} vars bound for {} param entries",
                vars.len(),
                layout.entries.len()
            )));
        }
        let refs: Vec<&Var> = vars.iter().collect();
        let grads = grad(loss, &refs, create_graph)?;
        Ok(Self {
            entries: layout
                .entries
                .iter()
                .zip(grads)
                .map(|(e, var)| GradEntry {
                    layer: e.layer.clone(),
                    role: e.role,
                    var,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_structure(&self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structure(format!(
                "{} vs {} layers",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.layer != b.layer || a.role != b.role || a.var.shape() != b.var.shape() {
                return Err(Error::Structure(format!(
                    "first differing layer: {} {} {:?} vs {} {} {:?}",
                    a.layer,
                    a.role,
                    a.var.shape(),
                    b.layer,
                    b.role,
                    b.var.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Reshape a parameter gradient to (out, rest) rows.
pub fn row_view(g: &Var) -> Result<Var> {
    let s = g.shape();
    match s.len() {
        1 => g.reshape(vec![s[0], 1]),
        2 => Ok(g.clone()),
        4 => g.reshape(vec![s[0], s[1] * s[2] * s[3]]),
        _ => Err(Error::Shape {
            op: "row_view",
            shape: s,
            msg: "expected bias (1-D), linear (2-D) or conv (4-D) gradient".into(),
        }),
    }
}

/// Sum over rows of the weighted distance terms between two (R, L) matrices.
pub fn layer_distance(a: &Var, b: &Var, spec: &DistanceSpec) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::Dim {
            op: "layer_distance",
            lhs: sa,
            rhs: sb,
        });
    }
    let len = sa[1] as f64;
    let g = a.graph();

    let mut total: Option<Var> = None;
    let mut add_term = |v: Var| -> Result<()> {
        total = Some(match total.take() {
            Some(t) => t.add(&v)?,
            None => v,
        });
        Ok(())
    };

    // Shared subexpressions across terms.
    let mut diff_sq_rows: Option<Var> = None;
    let mut sq_rows_of = |a: &Var, b: &Var| -> Result<Var> {
        if diff_sq_rows.is_none() {
            let d = a.sub(b)?;
            diff_sq_rows = Some(d.mul(&d)?.sum_axis1()?);
        }
        Ok(diff_sq_rows.clone().unwrap())
    };

    for &(kind, w) in &spec.terms {
        let term = match kind {
            DistanceKind::D1Cosine => {
                let dots = a.dot_rows(b)?;
                let denom = safe_row_norms(a)?
                    .mul(&safe_row_norms(b)?)?
                    .clamp_min(COSINE_EPS)?;
                let cos = dots.mul(&denom.recip()?)?;
                let ones = g.constant(Tensor::ones(&[sa[0]]))?;
                ones.sub(&cos)?.sum()?
            }
            DistanceKind::D2Euclid => {
                sq_rows_of(a, b)?.clamp_min(NORM_FLOOR)?.sqrt()?.sum()?
            }
            DistanceKind::D3Sq => sq_rows_of(a, b)?.sum()?,
            DistanceKind::D4Mse => sq_rows_of(a, b)?.sum()?.scale(1.0 / len)?,
        };
        add_term(term.scale(w)?)?;
    }
    Ok(total.expect("DistanceSpec has at least one term"))
}

/// Eq-by-layer distance between two gradient sets: the sum over layers of
/// the row-wise distance on their (out, rest) views.
pub fn gradset_distance(gs: &GradientSet, gt: &GradientSet, spec: &DistanceSpec) -> Result<Var> {
    gs.check_structure(gt)?;
    if gs.is_empty() {
        return Err(Error::EmptyInput {
            op: "gradset_distance",
        });
    }
    let mut total: Option<Var> = None;
    for (a, b) in gs.entries.iter().zip(&gt.entries) {
        let d = layer_distance(&row_view(&a.var)?, &row_view(&b.var)?, spec)?;
        total = Some(match total.take() {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    Ok(total.expect("nonempty gradient set"))
}

/// The gradient of the union mini-batch, recombined from per-class
/// gradients without extra forward/backward passes: entrywise
/// `sum_c |B_c| g_c / sum_c |B_c|`, which reduces to the plain mean when all
/// batches share one size.
pub fn union_gradient(per_class: &[(GradientSet, usize)]) -> Result<GradientSet> {
    if per_class.is_empty() {
        return Err(Error::EmptyInput {
            op: "union_gradient",
        });
    }
    for (gs, _) in &per_class[1..] {
        per_class[0].0.check_structure(gs)?;
    }
    let equal_sizes = per_class.iter().all(|&(_, n)| n == per_class[0].1);
    let total_size: usize = per_class.iter().map(|&(_, n)| n).sum();
    if total_size == 0 {
        return Err(Error::EmptyInput {
            op: "union_gradient",
        });
    }

    let num_entries = per_class[0].0.len();
    let mut entries = Vec::with_capacity(num_entries);
    for i in 0..num_entries {
        let mut acc: Option<Var> = None;
        for (gs, n) in per_class {
            let contrib = if equal_sizes {
                gs.entries[i].var.clone()
            } else {
                gs.entries[i].var.scale(*n as f64)?
            };
            acc = Some(match acc.take() {
                Some(a) => a.add(&contrib)?,
                None => contrib,
            });
        }
        let scale = if equal_sizes {
            1.0 / per_class.len() as f64
        } else {
            1.0 / total_size as f64
        };
        entries.push(GradEntry {
            layer: per_class[0].0.entries[i].layer.clone(),
            role: per_class[0].0.entries[i].role,
            var: acc.expect("nonempty class list").scale(scale)?,
        });
    }
    Ok(GradientSet { entries })
}

/// The three pieces of the multi-level matching loss.
#[derive(Clone, Debug)]
pub struct MultiLevelLoss {
    /// intra + lambda * inter
    pub total: Var,
    /// Sum over classes of the per-class gradient distance.
    pub intra: Var,
    /// Distance between the union gradients.
    pub inter: Var,
}

/// Intra-class distances accumulated over classes plus `lambda` times the
/// inter-class (union) distance. Both lists pair each class gradient with
/// its mini-batch size.
pub fn multi_level_loss(
    per_class_s: &[(GradientSet, usize)],
    per_class_t: &[(GradientSet, usize)],
    spec: &DistanceSpec,
    lambda: f64,
) -> Result<MultiLevelLoss> {
    if per_class_s.len() != per_class_t.len() {
        return Err(Error::ClassCount {
            expected: per_class_t.len(),
            got: per_class_s.len(),
        });
    }
    let intra = intra_class_loss(per_class_s, per_class_t, spec)?;
    let inter = inter_class_loss(per_class_s, per_class_t, spec)?;
    let total = intra.add(&inter.scale(lambda)?)?;
    Ok(MultiLevelLoss {
        total,
        intra,
        inter,
    })
}

/// Sum over classes of D(g_c^S, g_c^T).
pub fn intra_class_loss(
    per_class_s: &[(GradientSet, usize)],
    per_class_t: &[(GradientSet, usize)],
    spec: &DistanceSpec,
) -> Result<Var> {
    if per_class_s.len() != per_class_t.len() {
        return Err(Error::ClassCount {
            expected: per_class_t.len(),
            got: per_class_s.len(),
        });
    }
    if per_class_s.is_empty() {
        return Err(Error::EmptyInput {
            op: "intra_class_loss",
        });
    }
    let mut total: Option<Var> = None;
    for ((gs, _), (gt, _)) in per_class_s.iter().zip(per_class_t) {
        let d = gradset_distance(gs, gt, spec)?;
        total = Some(match total.take() {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    Ok(total.expect("nonempty class list"))
}

/// D(union gradient of S, union gradient of T).
pub fn inter_class_loss(
    per_class_s: &[(GradientSet, usize)],
    per_class_t: &[(GradientSet, usize)],
    spec: &DistanceSpec,
) -> Result<Var> {
    let us = union_gradient(per_class_s)?;
    let ut = union_gradient(per_class_t)?;
    gradset_distance(&us, &ut, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn mat(g: &Graph, rows: usize, cols: usize, vals: &[f64]) -> Var {
        g.constant(Tensor::new(vec![rows, cols], vals.to_vec()).unwrap())
            .unwrap()
    }

    fn spec(s: &str) -> DistanceSpec {
        s.parse().unwrap()
    }

    #[test]
    fn d1_orthogonal_rows() {
        let g = Graph::new();
        let a = mat(&g, 1, 2, &[1.0, 0.0]);
        let b = mat(&g, 1, 2, &[0.0, 1.0]);
        let d = layer_distance(&a, &b, &spec("d1")).unwrap();
        assert!((d.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn magnitude_terms_hand_values() {
        let g = Graph::new();
        let a = mat(&g, 1, 2, &[3.0, 4.0]);
        let b = mat(&g, 1, 2, &[0.0, 0.0]);
        assert!((layer_distance(&a, &b, &spec("d2")).unwrap().item() - 5.0).abs() < 1e-12);
        assert!((layer_distance(&a, &b, &spec("d3")).unwrap().item() - 25.0).abs() < 1e-12);
        assert!((layer_distance(&a, &b, &spec("d4")).unwrap().item() - 12.5).abs() < 1e-12);
    }

    #[test]
    fn identical_unit_rows_vanish_under_d1_d2() {
        let g = Graph::new();
        let v = &[0.6, 0.8, 0.0, 1.0];
        let a = mat(&g, 2, 2, v);
        let b = mat(&g, 2, 2, v);
        let d = layer_distance(&a, &b, &spec("d1+d2")).unwrap();
        assert!(d.item().abs() <= 1e-5, "got {}", d.item());
    }

    #[test]
    fn weighted_combo_matches_components() {
        let g = Graph::new();
        let a = mat(&g, 2, 3, &[0.3, -1.0, 0.5, 2.0, 0.1, -0.4]);
        let b = mat(&g, 2, 3, &[-0.2, 0.7, 0.9, 1.0, -0.3, 0.8]);
        let combo = layer_distance(&a, &b, &spec("d1+100*d4")).unwrap().item();
        let d1 = layer_distance(&a, &b, &spec("d1")).unwrap().item();
        let d4 = layer_distance(&a, &b, &spec("d4")).unwrap().item();
        assert!((combo - (d1 + 100.0 * d4)).abs() < 1e-12);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!("".parse::<DistanceSpec>().is_err());
        assert!("d5".parse::<DistanceSpec>().is_err());
        assert!("x*d1".parse::<DistanceSpec>().is_err());
        assert!("d1+".parse::<DistanceSpec>().is_err());
        let s: DistanceSpec = "d1 + 0.1*d2".parse().unwrap();
        assert_eq!(s.terms.len(), 2);
        assert_eq!(s.to_string(), "d1+0.1*d2");
    }

    #[test]
    fn row_view_conventions() {
        let g = Graph::new();
        let conv = g.constant(Tensor::zeros(&[8, 3, 3, 3])).unwrap();
        assert_eq!(row_view(&conv).unwrap().shape(), vec![8, 27]);
        let lin = g.constant(Tensor::zeros(&[10, 128])).unwrap();
        assert_eq!(row_view(&lin).unwrap().shape(), vec![10, 128]);
        let bias = g.constant(Tensor::zeros(&[10])).unwrap();
        assert_eq!(row_view(&bias).unwrap().shape(), vec![10, 1]);
    }

    fn tiny_gradset(g: &Graph, vals: &[f64]) -> GradientSet {
        GradientSet {
            entries: vec![GradEntry {
                layer: "fc".into(),
                role: Role::Weight,
                var: g
                    .constant(Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap())
                    .unwrap(),
            }],
        }
    }

    #[test]
    fn union_means() {
        let g = Graph::new();
        // equal sizes: plain mean
        let u = union_gradient(&[(tiny_gradset(&g, &[2.0]), 4), (tiny_gradset(&g, &[4.0]), 4)])
            .unwrap();
        assert_eq!(u.entries[0].var.value().data(), &[3.0]);
        // sizes 1 and 3: weighted mean
        let u = union_gradient(&[(tiny_gradset(&g, &[0.0]), 1), (tiny_gradset(&g, &[4.0]), 3)])
            .unwrap();
        assert_eq!(u.entries[0].var.value().data(), &[3.0]);
    }

    #[test]
    fn structure_mismatch_names_layer() {
        let g = Graph::new();
        let a = tiny_gradset(&g, &[1.0, 2.0]);
        let b = tiny_gradset(&g, &[1.0]);
        match gradset_distance(&a, &b, &spec("d2")) {
            Err(Error::Structure(msg)) => assert!(msg.contains("fc")),
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn multi_level_reduces_to_intra_at_lambda_zero() {
        let g = Graph::new();
        let s = vec![
            (tiny_gradset(&g, &[1.0, 0.0]), 2),
            (tiny_gradset(&g, &[0.5, 0.5]), 2),
        ];
        let t = vec![
            (tiny_gradset(&g, &[0.0, 1.0]), 2),
            (tiny_gradset(&g, &[0.5, -0.5]), 2),
        ];
        let d = spec("d1+d2");
        let ml = multi_level_loss(&s, &t, &d, 0.0).unwrap();
        let intra = intra_class_loss(&s, &t, &d).unwrap();
        assert!((ml.total.item() - intra.item()).abs() < 1e-15);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let g = Graph::new();
        let s = vec![(tiny_gradset(&g, &[1.0]), 1)];
        let t: Vec<(GradientSet, usize)> = vec![];
        assert!(matches!(
            multi_level_loss(&s, &t, &spec("d1"), 1.0),
            Err(Error::ClassCount { .. })
        ));
    }

    #[test]
    fn single_layer_set_reduces_to_layer_distance() {
        let g = Graph::new();
        let a = tiny_gradset(&g, &[0.4, -0.3, 1.0]);
        let b = tiny_gradset(&g, &[-0.1, 0.8, 0.2]);
        let d = spec("d1+d2");
        let whole = gradset_distance(&a, &b, &d).unwrap().item();
        let single = layer_distance(
            &row_view(&a.entries[0].var).unwrap(),
            &row_view(&b.entries[0].var).unwrap(),
            &d,
        )
        .unwrap()
        .item();
        assert_eq!(whole, single);
    }
}

//! Learnable per-class attribute surrogates and their KL losses.
//!
//! A class table lives in the projection space and is compared with the
//! student's projection distribution; a patch table lives in the encoder
//! space and is compared with the attention-weighted mean of patch features.
//! Only the two global views enter either loss.

mod optim;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

pub use optim::{cosine_ramp, AdamWConfig, LrSchedule, OptimizerState, ParamGroup, Update};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, Distribution, Matrix, KL_FLOOR};

/// Standard deviation of the Gaussian surrogate initialisation.
pub const SURROGATE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    Class,
    Patch,
}

impl SurrogateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::Class => "class",
            SurrogateKind::Patch => "patch",
        }
    }
}

/// One descriptor row per training class.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateTable {
    pub kind: SurrogateKind,
    pub descriptors: Matrix,
}

impl SurrogateTable {
    pub fn init(kind: SurrogateKind, classes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "surrogate table needs at least one class and dimension, got {classes}x{dim}"
            )));
        }
        let normal = Normal::new(0.0, SURROGATE_INIT_STD).expect("positive std");
        Ok(SurrogateTable {
            kind,
            descriptors: Matrix::from_fn(classes, dim, |_, _| normal.sample(rng)),
        })
    }

    pub fn from_descriptors(kind: SurrogateKind, descriptors: Matrix) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Empty("surrogate descriptors"));
        }
        if !descriptors.is_finite() {
            return Err(Error::NonFinite(format!("{} surrogate descriptors", kind.as_str())));
        }
        Ok(SurrogateTable { kind, descriptors })
    }

    pub fn classes(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn row(&self, y: usize) -> Result<&[f64]> {
        if y >= self.classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.classes(),
            });
        }
        Ok(self.descriptors.row(y))
    }

    fn expect_kind(&self, kind: SurrogateKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "expected a {} surrogate table, got {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// `α` weights the class surrogate term, `β` the patch surrogate term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(LossWeights { alpha, beta })
    }
}

/// Value and gradient of the class-surrogate loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSurrogateLoss {
    pub loss: f64,
    /// Gradient on each global view's input (probabilities or projection
    /// logits, depending on the entry point).
    pub grad_views: [Vec<f64>; 2],
    pub label: usize,
    /// Gradient on `z_c(label)`; every other row has zero gradient.
    pub grad_row: Vec<f64>,
}

/// Value and gradients of the patch-surrogate loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSurrogateLoss {
    pub loss: f64,
    pub grad_patches: [Matrix; 2],
    pub grad_attention: [Vec<f64>; 2],
    pub label: usize,
    pub grad_row: Vec<f64>,
}

/// Adds `scale · grad_row` into row `label` of a table-shaped gradient.
pub fn accumulate_row(grad: &mut Matrix, label: usize, grad_row: &[f64], scale: f64) -> Result<()> {
    if label >= grad.rows() || grad_row.len() != grad.cols() {
        return Err(Error::shape(format!(
            "row {label} of length {} does not fit a {:?} gradient",
            grad_row.len(),
            grad.shape()
        )));
    }
    for (g, r) in grad.row_mut(label).iter_mut().zip(grad_row) {
        *g += scale * r;
    }
    Ok(())
}

/// Floored log of the target distribution, as used inside the KL.
fn log_target(q: &[f64]) -> Vec<f64> {
    q.iter().map(|v| v.max(KL_FLOOR).ln()).collect()
}

/// Gradient of `Σ p ln(p/q)` w.r.t. the logits `z` of `q = softmax(z)`.
fn target_logit_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(pi, qi)| if *qi >= KL_FLOOR { -pi / qi } else { 0.0 })
        .collect();
    crate::numerics::softmax_backward(q, &g, 1.0)
}

/// `KL(softmax(u/τ) ‖ q)` and its gradient w.r.t. `u`.
fn kl_from_logits(u: &[f64], temperature: f64, log_q: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let log_p = log_softmax(u, temperature)?;
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let kl: f64 = p.iter().zip(&log_p).zip(log_q).map(|((pi, lp), lq)| pi * (lp - lq)).sum();
    let grad = p
        .iter()
        .zip(&log_p)
        .zip(log_q)
        .map(|((pi, lp), lq)| pi * (lp - lq - kl) / temperature)
        .collect();
    Ok((kl, grad, p))
}

fn check_view_dims(views: [&[f64]; 2], dim: usize, what: &str) -> Result<()> {
    for v in views {
        if v.len() != dim {
            return Err(Error::shape(format!("{what} has {} entries, surrogates have {dim}", v.len())));
        }
    }
    Ok(())
}

/// `½ Σ_g KL(P_s(x_g) ‖ softmax(z_c(y)))` on the two global-view student
/// distributions. `grad_views` is the gradient w.r.t. the probabilities and
/// is zero on entries where `P_s` is exactly zero.
pub fn class_surrogate_loss(
    student: [&Distribution; 2],
    table: &SurrogateTable,
    y: usize,
) -> Result<ClassSurrogateLoss> {
    table.expect_kind(SurrogateKind::Class)?;
    let z = table.row(y)?;
    check_view_dims([student[0].probs(), student[1].probs()], z.len(), "student distribution")?;
    let q = softmax(z, 1.0)?;
    let log_q = log_target(q.probs());
    let mut loss = 0.0;
    let mut grad_row = vec![0.0; z.len()];
    let mut grad_views: [Vec<f64>; 2] = Default::default();
    for (g, p) in student.iter().enumerate() {
        loss += 0.5 * crate::numerics::kl_divergence(p, &q)?;
        grad_views[g] = p
            .probs()
            .iter()
            .zip(&log_q)
            .map(|(pi, lq)| if *pi > 0.0 { 0.5 * (pi.ln() + 1.0 - lq) } else { 0.0 })
            .collect();
        for (r, d) in grad_row.iter_mut().zip(target_logit_grad(p.probs(), q.probs())) {
            *r += 0.5 * d;
        }
    }
    Ok(ClassSurrogateLoss {
        loss,
        grad_views,
        label: y,
        grad_row,
    })
}

/// Same loss taking the raw projections `P(x_g)`; the student distribution
/// is `softmax(P / τ_s)` and `grad_views` is w.r.t. the projections.
pub fn class_surrogate_loss_from_projection(
    projections: [&[f64]; 2],
    student_temperature: f64,
    table: &SurrogateTable,
    y: usize,
) -> Result<ClassSurrogateLoss> {
    table.expect_kind(SurrogateKind::Class)?;
    let z = table.row(y)?;
    check_view_dims(projections, z.len(), "projection")?;
    let q = softmax(z, 1.0)?;
    let log_q = log_target(q.probs());
    let mut loss = 0.0;
    let mut grad_row = vec![0.0; z.len()];
    let mut grad_views: [Vec<f64>; 2] = Default::default();
    for (g, u) in projections.iter().enumerate() {
        let (kl, grad_u, p) = kl_from_logits(u, student_temperature, &log_q)?;
        loss += 0.5 * kl;
        grad_views[g] = grad_u.into_iter().map(|v| 0.5 * v).collect();
        for (r, d) in grad_row.iter_mut().zip(target_logit_grad(&p, q.probs())) {
            *r += 0.5 * d;
        }
    }
    Ok(ClassSurrogateLoss {
        loss,
        grad_views,
        label: y,
        grad_row,
    })
}

/// `F_p = a_c · f_p`, the attention-weighted mean of patch features.
pub fn aggregate_patch_tokens(a_c: &[f64], f_p: &Matrix) -> Result<Vec<f64>> {
    if a_c.len() != f_p.rows() {
        return Err(Error::shape(format!(
            "{} attention weights for {} patch tokens",
            a_c.len(),
            f_p.rows()
        )));
    }
    if a_c.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::InvalidArgument("cls attention weights must be non-negative".into()));
    }
    let total: f64 = a_c.iter().sum();
    if (total - 1.0).abs() > Distribution::SUM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("cls attention sums to {total}, expected 1")));
    }
    let mut out = vec![0.0; f_p.cols()];
    for (a, row) in a_c.iter().zip((0..f_p.rows()).map(|i| f_p.row(i))) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// `½ Σ_g KL(softmax(F_p(x_g)) ‖ softmax(z_p(y)))` over the two global views.
pub fn patch_surrogate_loss(
    patches: [&Matrix; 2],
    attention: [&[f64]; 2],
    table: &SurrogateTable,
    y: usize,
) -> Result<PatchSurrogateLoss> {
    table.expect_kind(SurrogateKind::Patch)?;
    let z = table.row(y)?;
    let q = softmax(z, 1.0)?;
    let log_q = log_target(q.probs());
    let mut loss = 0.0;
    let mut grad_row = vec![0.0; z.len()];
    let mut grad_patches = [Matrix::zeros(0, 0), Matrix::zeros(0, 0)];
    let mut grad_attention: [Vec<f64>; 2] = Default::default();
    for g in 0..2 {
        let (f_p, a_c) = (patches[g], attention[g]);
        if f_p.cols() != z.len() {
            return Err(Error::shape(format!(
                "patch features have dimension {}, surrogates have {}",
                f_p.cols(),
                z.len()
            )));
        }
        let agg = aggregate_patch_tokens(a_c, f_p)?;
        let (kl, grad_agg, p) = kl_from_logits(&agg, 1.0, &log_q)?;
        loss += 0.5 * kl;
        let grad_agg: Vec<f64> = grad_agg.into_iter().map(|v| 0.5 * v).collect();
        grad_patches[g] = Matrix::from_fn(f_p.rows(), f_p.cols(), |i, j| a_c[i] * grad_agg[j]);
        grad_attention[g] = (0..f_p.rows())
            .map(|i| crate::numerics::dot(f_p.row(i), &grad_agg))
            .collect();
        for (r, d) in grad_row.iter_mut().zip(target_logit_grad(&p, q.probs())) {
            *r += 0.5 * d;
        }
    }
    Ok(PatchSurrogateLoss {
        loss,
        grad_patches,
        grad_attention,
        label: y,
        grad_row,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn class_table(rows: Vec<Vec<f64>>) -> SurrogateTable {
        SurrogateTable::from_descriptors(SurrogateKind::Class, Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn init_statistics_and_determinism() {
        let t = SurrogateTable::init(SurrogateKind::Class, 5, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.descriptors.shape(), (5, 16));
        let mean: f64 = t.descriptors.as_slice().iter().sum::<f64>() / 80.0;
        assert!(mean.abs() < 5.0 * SURROGATE_INIT_STD / 80f64.sqrt());
        let again = SurrogateTable::init(SurrogateKind::Class, 5, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t, again);
        let single = SurrogateTable::init(SurrogateKind::Patch, 1, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(single.classes(), 1);
    }

    #[test]
    fn class_loss_vanishes_at_target() {
        let table = class_table(vec![vec![0.3, -0.2, 0.5]]);
        let q = softmax(table.row(0).unwrap(), 1.0).unwrap();
        let l = class_surrogate_loss([&q, &q], &table, 0).unwrap();
        assert!(l.loss.abs() < 1e-15);
        assert!(l.grad_row.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn class_loss_closed_form() {
        let table = class_table(vec![vec![0.0, 0.0]]);
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let l = class_surrogate_loss([&p, &p], &table, 0).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let table = class_table(vec![vec![0.0, 0.0]]);
        let p = Distribution::uniform(2);
        assert!(matches!(
            class_surrogate_loss([&p, &p], &table, 1),
            Err(Error::LabelOutOfRange { label: 1, classes: 1 })
        ));
    }

    #[test]
    fn wrong_table_kind_is_rejected() {
        let table = class_table(vec![vec![0.0, 0.0]]);
        let f = Matrix::zeros(1, 2);
        assert!(patch_surrogate_loss([&f, &f], [&[1.0], &[1.0]], &table, 0).is_err());
    }

    #[test]
    fn aggregation_cases() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]).unwrap();
        let third = 1.0 / 3.0;
        let mean = aggregate_patch_tokens(&[third, third, third], &f).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-15 && (mean[1] - 5.0).abs() < 1e-15);
        assert_eq!(aggregate_patch_tokens(&[0.0, 1.0, 0.0], &f).unwrap(), vec![3.0, 4.0]);
        assert!(aggregate_patch_tokens(&[0.5, 0.5], &f).is_err());
        assert!(aggregate_patch_tokens(&[0.5, 0.6, -0.1], &f).is_err());
    }

    #[test]
    fn patch_loss_zero_and_closed_form() {
        let z = vec![0.4, -0.1];
        let table = SurrogateTable::from_descriptors(SurrogateKind::Patch, Matrix::from_rows(&[z.clone()]).unwrap()).unwrap();
        let f = Matrix::from_rows(&[z.clone(), z.clone()]).unwrap();
        let l = patch_surrogate_loss([&f, &f], [&[0.5, 0.5], &[0.2, 0.8]], &table, 0).unwrap();
        assert!(l.loss.abs() < 1e-15);

        // softmax([100, 0]) is one-hot to double precision; against a uniform
        // target the loss is ln 2.
        let table = SurrogateTable::from_descriptors(SurrogateKind::Patch, Matrix::zeros(1, 2)).unwrap();
        let f = Matrix::from_rows(&[vec![100.0, 0.0]]).unwrap();
        let l = patch_surrogate_loss([&f, &f], [&[1.0], &[1.0]], &table, 0).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_validate() {
        assert_eq!(LossWeights::default(), LossWeights { alpha: 1.0, beta: 0.1 });
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
    }
}

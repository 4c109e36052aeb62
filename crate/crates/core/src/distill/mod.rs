//! Teacher–student self-distillation over multi-crop views and the per-stage
//! training objectives built on it.

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax, softmax, Matrix};
use crate::surrogates::{
    class_surrogate_loss_from_projection, cosine_ramp, patch_surrogate_loss, LossWeights, SurrogateTable,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub center_momentum: f64,
    /// EMA momentum at the first step.
    pub ema_start: f64,
    /// EMA momentum reached at the last step.
    pub ema_end: f64,
    /// Number of local views `m`.
    pub local_views: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            local_views: 2,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let (ts, tt) = (self.student_temperature, self.teacher_temperature);
        if !(tt > 0.0 && tt <= ts && ts.is_finite()) {
            return Err(Error::Config(format!(
                "temperatures must satisfy 0 < teacher <= student, got teacher={tt} student={ts}"
            )));
        }
        for (name, m) in [
            ("center_momentum", self.center_momentum),
            ("ema_start", self.ema_start),
            ("ema_end", self.ema_end),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {m}")));
            }
        }
        Ok(())
    }

    /// `M = 2(m + 1)`: ordered (global teacher view, other student view) pairs.
    pub fn pair_count(&self) -> usize {
        2 * (self.local_views + 1)
    }

    /// EMA momentum for `step` of a `total`-step run.
    pub fn ema_momentum(&self, step: u64, total: u64) -> f64 {
        cosine_ramp(self.ema_start, self.ema_end, step, total)
    }
}

/// EMA copy of a student plus the running center of its projections.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub center: Vec<f64>,
    /// Last EMA momentum applied.
    pub momentum: f64,
}

impl TeacherState {
    pub fn from_student(student: &ModelParams) -> Self {
        TeacherState {
            params: student.clone(),
            center: vec![0.0; student.config.proj_dim],
            momentum: 0.0,
        }
    }

    /// `c ← μ·c + (1 − μ)·mean(outputs)`.
    pub fn update_center(&mut self, outputs: &[&[f64]], momentum: f64) -> Result<()> {
        if outputs.is_empty() {
            return Ok(());
        }
        let mut mean = vec![0.0; self.center.len()];
        for o in outputs {
            if o.len() != mean.len() {
                return Err(Error::shape(format!(
                    "teacher output has {} entries, center has {}",
                    o.len(),
                    mean.len()
                )));
            }
            for (m, v) in mean.iter_mut().zip(o.iter()) {
                *m += v;
            }
        }
        let n = outputs.len() as f64;
        for (c, m) in self.center.iter_mut().zip(mean) {
            *c = momentum * *c + (1.0 - momentum) * (m / n);
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("teacher center".into()));
        }
        Ok(())
    }
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s`, elementwise.
pub fn ema_update(teacher: &mut TeacherState, student: &ModelParams, lambda: f64) -> Result<()> {
    if teacher.params.config != student.config {
        return Err(Error::shape("teacher and student configurations differ"));
    }
    let theirs = student.tensors();
    for ((_, t), (_, s)) in teacher.params.tensors_mut().into_iter().zip(theirs) {
        for (a, b) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a = lambda * *a + (1.0 - lambda) * b;
        }
    }
    teacher.momentum = lambda;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinoLoss {
    pub loss: f64,
    /// Gradient on each student projection, in view order.
    pub grad_student: Vec<Vec<f64>>,
    /// Number of (teacher, student) pairs summed.
    pub pairs: usize,
}

/// Cross-entropy from the centred, sharpened teacher distribution of each
/// global view to the student distribution of every *other* view, averaged
/// over the `2(m + 1)` pairs.
///
/// `student` lists the two globals first, then the `m` locals.
pub fn dino_loss(teacher: &[&[f64]], student: &[&[f64]], center: &[f64], cfg: &DistillConfig) -> Result<DinoLoss> {
    if teacher.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "distillation needs exactly 2 global teacher views, got {}",
            teacher.len()
        )));
    }
    if student.len() != 2 + cfg.local_views {
        return Err(Error::InvalidArgument(format!(
            "expected {} student views, got {}",
            2 + cfg.local_views,
            student.len()
        )));
    }
    let dim = center.len();
    if teacher.iter().chain(student).any(|v| v.len() != dim) {
        return Err(Error::shape(format!("projections must all have {dim} entries")));
    }
    let targets = teacher
        .iter()
        .map(|t| {
            let centred: Vec<f64> = t.iter().zip(center).map(|(a, c)| a - c).collect();
            softmax(&centred, cfg.teacher_temperature).map(|d| d.into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let log_ps = student
        .iter()
        .map(|s| log_softmax(s, cfg.student_temperature))
        .collect::<Result<Vec<_>>>()?;

    let m = cfg.pair_count() as f64;
    let mut loss = 0.0;
    let mut pairs = 0;
    let mut grad_student = vec![vec![0.0; dim]; student.len()];
    for (g, pt) in targets.iter().enumerate() {
        for (v, lp) in log_ps.iter().enumerate() {
            if v == g {
                continue;
            }
            pairs += 1;
            loss -= dot(pt, lp) / m;
            for ((gr, l), t) in grad_student[v].iter_mut().zip(lp).zip(pt) {
                *gr += (l.exp() - t) / (cfg.student_temperature * m);
            }
        }
    }
    debug_assert_eq!(pairs, cfg.pair_count());
    Ok(DinoLoss {
        loss,
        grad_student,
        pairs,
    })
}

/// Everything one sample contributes to a stage objective.
///
/// Projections are listed globals first, then locals. Patch features and cls
/// attention are only needed for the patch-surrogate term.
pub struct StageInputs<'a> {
    pub teacher_projections: [&'a [f64]; 2],
    pub center: &'a [f64],
    pub student_projections: Vec<&'a [f64]>,
    pub global_patches: Option<[&'a Matrix; 2]>,
    pub global_attention: Option<[&'a [f64]; 2]>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLoss {
    pub total: f64,
    pub dino: f64,
    pub class: f64,
    pub patch: Option<f64>,
    pub grad_projections: Vec<Vec<f64>>,
    /// Gradients on the global views' patch features and cls attention.
    pub grad_patches: Option<[Matrix; 2]>,
    pub grad_attention: Option<[Vec<f64>; 2]>,
    pub label: usize,
    pub grad_class_row: Vec<f64>,
    pub grad_patch_row: Option<Vec<f64>>,
}

fn dino_plus_class(
    inputs: &StageInputs<'_>,
    class_table: &SurrogateTable,
    weights: LossWeights,
    cfg: &DistillConfig,
) -> Result<StageLoss> {
    let dino = dino_loss(&inputs.teacher_projections, &inputs.student_projections, inputs.center, cfg)?;
    let globals = [inputs.student_projections[0], inputs.student_projections[1]];
    let class = class_surrogate_loss_from_projection(globals, cfg.student_temperature, class_table, inputs.label)?;
    let mut grad_projections = dino.grad_student;
    for g in 0..2 {
        for (a, b) in grad_projections[g].iter_mut().zip(&class.grad_views[g]) {
            *a += weights.alpha * b;
        }
    }
    Ok(StageLoss {
        total: dino.loss + weights.alpha * class.loss,
        dino: dino.loss,
        class: class.loss,
        patch: None,
        grad_projections,
        grad_patches: None,
        grad_attention: None,
        label: inputs.label,
        grad_class_row: class.grad_row.iter().map(|g| weights.alpha * g).collect(),
        grad_patch_row: None,
    })
}

/// `L_DINO + α·L_cls + β·L_pth`.
pub fn stage1_loss(
    inputs: &StageInputs<'_>,
    class_table: Option<&SurrogateTable>,
    patch_table: Option<&SurrogateTable>,
    weights: LossWeights,
    cfg: &DistillConfig,
) -> Result<StageLoss> {
    let class_table = class_table.ok_or_else(|| Error::InvalidArgument("stage 1 needs a class surrogate table".into()))?;
    let patch_table = patch_table.ok_or_else(|| Error::InvalidArgument("stage 1 needs a patch surrogate table".into()))?;
    let (Some(patches), Some(attention)) = (inputs.global_patches, inputs.global_attention) else {
        return Err(Error::InvalidArgument(
            "stage 1 needs global-view patch features and cls attention".into(),
        ));
    };
    let mut out = dino_plus_class(inputs, class_table, weights, cfg)?;
    let patch = patch_surrogate_loss(patches, attention, patch_table, inputs.label)?;
    out.total += weights.beta * patch.loss;
    out.patch = Some(patch.loss);
    let [p0, p1] = patch.grad_patches;
    out.grad_patches = Some([p0.scaled(weights.beta), p1.scaled(weights.beta)]);
    let [a0, a1] = patch.grad_attention;
    let scale = |v: Vec<f64>| v.into_iter().map(|x| weights.beta * x).collect::<Vec<_>>();
    out.grad_attention = Some([scale(a0), scale(a1)]);
    out.grad_patch_row = Some(scale(patch.grad_row));
    Ok(out)
}

/// `L_DINO + α·L_cls`. Supervision is on the class token only, so passing a
/// patch table is an error.
pub fn stage2_loss(
    inputs: &StageInputs<'_>,
    class_table: &SurrogateTable,
    patch_table: Option<&SurrogateTable>,
    weights: LossWeights,
    cfg: &DistillConfig,
) -> Result<StageLoss> {
    if patch_table.is_some() {
        return Err(Error::InvalidArgument(
            "stage 2 supervises the class token only; no patch surrogate table is allowed".into(),
        ));
    }
    dino_plus_class(inputs, class_table, weights, cfg)
}

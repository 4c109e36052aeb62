//! Two-stage training driver.
//!
//! Training is organised in phases. A phase trains a contiguous range of
//! transformer sets while every set below it stays frozen; gradients from a
//! trainable set flow back through pooling into the trainable sets beneath
//! it. Stage 1 is one phase over set 1 (or sets 1 and 2); stage 2 is one
//! end-to-end phase over the remaining sets, or one phase per set.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Stage2Mode};
use super::dataset::{Dataset, Split};
use super::metrics::{MetricsRow, MetricsWriter};
use super::model::{Branch, Cascade, CascadePass, SETS};
use crate::distill::{ema_update, stage1_loss, stage2_loss, StageInputs, StageLoss};
use crate::encoder::{backward, multi_crop, patch_embed_backward, ModelParams, OutputGrad};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Matrix;
use crate::pooling::{pool_backward, GradMode};
use crate::surrogates::{accumulate_row, LrSchedule, OptimizerState, ParamGroup, Update};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";

/// Tags xor-ed into the run seed to derive independent random streams.
const INIT_STREAM: u64 = 0x696e_6974;
const ORDER_STREAM: u64 = 0x6f72_6465_72;
const VIEW_STREAM: u64 = 0x7669_6577;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Distillation plus class and patch surrogate terms.
    WithPatch,
    /// Distillation plus the class surrogate term.
    ClassOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub stage: u8,
    pub trainable: Range<usize>,
    pub objectives: Vec<Objective>,
    pub epochs: usize,
}

/// Phases of one stage under `cfg`.
pub fn plan(cfg: &RunConfig, stage: u8) -> Vec<Phase> {
    let split = cfg.stage1_sets;
    match stage {
        1 => {
            let mut objectives = vec![Objective::WithPatch];
            objectives.resize(split, Objective::ClassOnly);
            vec![Phase {
                stage,
                trainable: 0..split,
                objectives,
                epochs: cfg.stage1_epochs,
            }]
        }
        _ => {
            let objective = if cfg.stage2_patch_loss {
                Objective::WithPatch
            } else {
                Objective::ClassOnly
            };
            let ranges: Vec<Range<usize>> = match cfg.stage2_mode {
                Stage2Mode::EndToEnd => vec![split..SETS],
                Stage2Mode::OneByOne => (split..SETS).map(|k| k..k + 1).collect(),
            };
            ranges
                .into_iter()
                .map(|r| Phase {
                    stage,
                    objectives: vec![objective; r.len()],
                    trainable: r,
                    epochs: cfg.stage2_epochs,
                })
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    Both,
    Only(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
    /// Mean total loss of the last epoch of each stage that ran.
    pub final_loss: Vec<f64>,
}

/// Mean loss terms of one set over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct LossSums {
    total: f64,
    dino: f64,
    class: f64,
    patch: Option<f64>,
}

/// Per-set gradient accumulators.
struct SetGrads {
    params: ModelParams,
    class: Matrix,
    patch: Option<Matrix>,
}

struct StepContext<'a> {
    cfg: &'a RunConfig,
    phase: &'a Phase,
    mode: GradMode,
}

impl StepContext<'_> {
    fn upto(&self) -> usize {
        self.phase.trainable.end
    }

    /// Losses and gradients for one image, accumulated into `grads`.
    /// Returns the per-set losses and the teacher's global projections.
    fn sample(
        &self,
        cascade: &Cascade,
        image: &Image,
        label: usize,
        grads: &mut [SetGrads],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<StageLoss>, Vec<[Vec<f64>; 2]>)> {
        let lo = self.phase.trainable.start;
        let upto = self.upto();
        let views = multi_crop(image, rng, &self.cfg.crops())?;
        let mut student: Vec<CascadePass> = Vec::with_capacity(views.len());
        for v in views.iter() {
            student.push(cascade.run(v, Branch::Student, upto, lo..upto, rng)?);
        }
        let mut teacher = Vec::with_capacity(2);
        for g in &views.globals {
            teacher.push(cascade.run(g, Branch::Teacher, upto, 0..0, rng)?);
        }

        let weights = self.cfg.weights();
        let distill = self.cfg.distill();
        let mut losses = Vec::with_capacity(upto - lo);
        let mut teacher_out = Vec::with_capacity(upto - lo);
        for (slot, k) in self.phase.trainable.clone().enumerate() {
            let set = &cascade.sets[k];
            let t = [&teacher[0].sets[k].output, &teacher[1].sets[k].output];
            let s0 = &student[0].sets[k].output;
            let s1 = &student[1].sets[k].output;
            let inputs = StageInputs {
                teacher_projections: [&t[0].projection, &t[1].projection],
                center: &set.teacher.center,
                student_projections: student.iter().map(|p| p.sets[k].output.projection.as_slice()).collect(),
                global_patches: Some([&s0.f_p, &s1.f_p]),
                global_attention: Some([&s0.attention.cls_row, &s1.attention.cls_row]),
                label,
            };
            let loss = match self.phase.objectives[slot] {
                Objective::WithPatch => stage1_loss(&inputs, Some(&set.class_table), set.patch_table.as_ref(), weights, &distill)?,
                Objective::ClassOnly => stage2_loss(&inputs, &set.class_table, None, weights, &distill)?,
            };
            accumulate_row(&mut grads[slot].class, label, &loss.grad_class_row, 1.0)?;
            if let (Some(row), Some(g)) = (&loss.grad_patch_row, grads[slot].patch.as_mut()) {
                accumulate_row(g, label, row, 1.0)?;
            }
            teacher_out.push([t[0].projection.clone(), t[1].projection.clone()]);
            losses.push(loss);
        }

        for (v, pass) in student.iter().enumerate() {
            // Gradient arriving at set k's outputs from set k + 1.
            let mut carried: Option<(Vec<f64>, Matrix)> = None;
            for k in (lo..upto).rev() {
                let slot = k - lo;
                let sp = &pass.sets[k];
                let mut og = OutputGrad::zeros_for(&sp.output);
                og.projection.clone_from(&losses[slot].grad_projections[v]);
                if v < 2 {
                    if let (Some(gp), Some(ga)) = (&losses[slot].grad_patches, &losses[slot].grad_attention) {
                        og.f_p.add_assign(&gp[v])?;
                        og.cls_attention.clone_from(&ga[v]);
                    }
                }
                if let Some((cls, patches)) = carried.take() {
                    for (a, b) in og.f_c.iter_mut().zip(&cls) {
                        *a += b;
                    }
                    og.f_p.add_assign(&patches)?;
                }
                let cache = sp.cache.as_ref().expect("trainable sets keep their caches");
                let params = &cascade.sets[k].student;
                let (g, tg) = backward(&og, cache, params)?;
                grads[slot].params.axpy(1.0, &g)?;
                if k > lo {
                    let assignment = sp.pooled_by.as_ref().expect("sets after the first are pooled");
                    carried = Some((tg.cls, pool_backward(&tg.patches, assignment, self.mode)?));
                } else if k == 0 {
                    patch_embed_backward(&pass.embed_cache, &tg, &mut grads[slot].params)?;
                }
            }
        }
        Ok((losses, teacher_out))
    }
}

fn checkpoint_meta(cfg: &RunConfig, stage: u8, epoch: usize, step: u64, classes: usize) -> Vec<(String, String)> {
    vec![
        ("stage".into(), stage.to_string()),
        ("epoch".into(), epoch.to_string()),
        ("step".into(), step.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("classes".into(), classes.to_string()),
        ("deterministic".into(), cfg.deterministic.to_string()),
    ]
}

pub fn checkpoint_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.output_dir.join(if stage == 1 { STAGE1_CHECKPOINT } else { STAGE2_CHECKPOINT })
}

struct Driver<'a> {
    cfg: &'a RunConfig,
    data: Vec<(&'a Image, usize)>,
    classes: usize,
    metrics: MetricsWriter,
}

impl Driver<'_> {
    fn save(&self, cascade: &Cascade, stage: u8, epoch: usize, step: u64) -> Result<PathBuf> {
        let path = checkpoint_path(self.cfg, stage);
        cascade
            .to_checkpoint(checkpoint_meta(self.cfg, stage, epoch, step, self.classes))
            .write(&path)?;
        Ok(path)
    }

    /// Runs every phase of `stage`, saving after each epoch. Returns the
    /// mean loss of the last epoch.
    fn stage(&mut self, cascade: &mut Cascade, stage: u8, step: &mut u64) -> Result<f64> {
        self.save(cascade, stage, 0, *step)?;
        let mut last = f64::NAN;
        let mut epoch_base = 0;
        for (p, phase) in plan(self.cfg, stage).iter().enumerate() {
            let tag = (stage as u64) << 8 | p as u64;
            let mut order_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ORDER_STREAM ^ tag);
            let mut view_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ VIEW_STREAM ^ tag);
            last = self.phase(cascade, phase, epoch_base, step, &mut order_rng, &mut view_rng)?;
            epoch_base += phase.epochs;
        }
        Ok(last)
    }

    fn phase(
        &mut self,
        cascade: &mut Cascade,
        phase: &Phase,
        epoch_base: usize,
        step: &mut u64,
        order_rng: &mut ChaCha8Rng,
        view_rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let cfg = self.cfg;
        let batch = cfg.batch_size.min(self.data.len()).max(1);
        let per_epoch = self.data.len().div_ceil(batch) as u64;
        let total = per_epoch * phase.epochs as u64;
        let lr = LrSchedule {
            base: cfg.lr,
            floor: cfg.min_lr,
            warmup_fraction: cfg.warmup_fraction,
            total_steps: total,
        };
        let lr_s = LrSchedule { base: cfg.lr_surrogates, ..lr };
        let distill = cfg.distill();
        let mut opt = OptimizerState::new(cfg.adamw(), cfg.lr, cfg.lr_surrogates);
        let ctx = StepContext {
            cfg,
            phase,
            mode: cfg.pool_grad.into(),
        };
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut last_epoch_loss = f64::NAN;
        for epoch in 0..phase.epochs {
            order.shuffle(order_rng);
            let mut epoch_sum = 0.0;
            for chunk in order.chunks(batch) {
                let local = opt.step_count();
                let (lr_now, lr_s_now) = (lr.at(local), lr_s.at(local));
                opt.set_learning_rates(lr_now, lr_s_now);
                let mut grads: Vec<SetGrads> = phase
                    .trainable
                    .clone()
                    .map(|k| {
                        let set = &cascade.sets[k];
                        SetGrads {
                            params: set.student.zeros_like(),
                            class: zeros_as(&set.class_table.descriptors),
                            patch: set.patch_table.as_ref().map(|t| zeros_as(&t.descriptors)),
                        }
                    })
                    .collect();
                let mut sums = vec![LossSums::default(); phase.trainable.len()];
                let mut teacher_out: Vec<Vec<Vec<f64>>> = vec![Vec::new(); phase.trainable.len()];
                for &i in chunk {
                    let (image, label) = self.data[i];
                    let (losses, t_out) = ctx.sample(cascade, image, label, &mut grads, view_rng)?;
                    for (slot, l) in losses.iter().enumerate() {
                        if !l.total.is_finite() {
                            return Err(Error::NonFiniteLoss { step: *step as usize });
                        }
                        let s = &mut sums[slot];
                        s.total += l.total;
                        s.dino += l.dino;
                        s.class += l.class;
                        if let Some(p) = l.patch {
                            *s.patch.get_or_insert(0.0) += p;
                        }
                    }
                    for (slot, [a, b]) in t_out.into_iter().enumerate() {
                        teacher_out[slot].push(a);
                        teacher_out[slot].push(b);
                    }
                }
                let n = chunk.len() as f64;
                for g in grads.iter_mut() {
                    let mut mean = g.params.zeros_like();
                    mean.axpy(1.0 / n, &g.params)?;
                    g.params = mean;
                    g.class.scale(1.0 / n);
                    if let Some(p) = g.patch.as_mut() {
                        p.scale(1.0 / n);
                    }
                }
                let ema = distill.ema_momentum(local, total);
                apply_step(cascade, phase, &grads, &mut opt)?;
                for (slot, k) in phase.trainable.clone().enumerate() {
                    let set = &mut cascade.sets[k];
                    ema_update(&mut set.teacher, &set.student, ema)?;
                    let refs: Vec<&[f64]> = teacher_out[slot].iter().map(|v| v.as_slice()).collect();
                    set.teacher.update_center(&refs, distill.center_momentum)?;
                    let s = sums[slot];
                    self.metrics.push(&MetricsRow {
                        stage: phase.stage,
                        epoch: epoch_base + epoch + 1,
                        step: *step,
                        set: k + 1,
                        total: s.total / n,
                        dino: s.dino / n,
                        class: s.class / n,
                        patch: s.patch.map(|p| p / n),
                        lr: lr_now,
                        lr_surrogates: lr_s_now,
                        ema,
                    })?;
                    epoch_sum += s.total;
                }
                *step += 1;
            }
            self.metrics.flush()?;
            last_epoch_loss = epoch_sum / (self.data.len() * phase.trainable.len()) as f64;
            self.save(cascade, phase.stage, epoch_base + epoch + 1, *step)?;
        }
        Ok(last_epoch_loss)
    }
}

fn zeros_as(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn apply_step(cascade: &mut Cascade, phase: &Phase, grads: &[SetGrads], opt: &mut OptimizerState) -> Result<()> {
    let mut updates = Vec::new();
    let lo = phase.trainable.start;
    for (slot, (set, g)) in cascade.sets[phase.trainable.clone()].iter_mut().zip(grads).enumerate() {
        let n = lo + slot + 1;
        for ((name, value), (_, grad)) in set.student.tensors_mut().into_iter().zip(g.params.tensors()) {
            updates.push(Update {
                name: format!("set{n}.student.{name}"),
                group: ParamGroup::Model,
                decay: value.rows() > 1,
                value,
                grad,
            });
        }
        updates.push(Update {
            name: format!("set{n}.class_surrogates"),
            group: ParamGroup::Surrogate,
            decay: false,
            value: &mut set.class_table.descriptors,
            grad: &g.class,
        });
        if let (Some(table), Some(grad)) = (set.patch_table.as_mut(), g.patch.as_ref()) {
            updates.push(Update {
                name: format!("set{n}.patch_surrogates"),
                group: ParamGroup::Surrogate,
                decay: false,
                value: &mut table.descriptors,
                grad,
            });
        }
    }
    opt.step(&mut updates)
}

/// Trains the requested stages, writing checkpoints and the metrics log into
/// `cfg.output_dir`. Stage 2 on its own resumes from the stage-1 checkpoint
/// found there.
pub fn train(cfg: &RunConfig, dataset: &Dataset, stages: Stages) -> Result<TrainReport> {
    cfg.validate()?;
    let data = dataset.split(Split::Base);
    if data.is_empty() {
        return Err(Error::InsufficientData("the base split has no images".into()));
    }
    let classes = dataset.manifest.count(Split::Base);
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    let run_stage1 = matches!(stages, Stages::Both | Stages::Only(1));
    let run_stage2 = matches!(stages, Stages::Both | Stages::Only(2));
    if !run_stage1 && !run_stage2 {
        return Err(Error::InvalidArgument("stage must be 1 or 2".into()));
    }
    if run_stage1 && metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut driver = Driver {
        cfg,
        data,
        classes,
        metrics: MetricsWriter::open(&metrics_path)?,
    };
    let mut step = 0u64;
    let mut report = TrainReport {
        checkpoints: Vec::new(),
        steps: 0,
        final_loss: Vec::new(),
    };
    let mut cascade = if run_stage1 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let mut c = Cascade::init(cfg, classes, &mut rng)?;
        report.final_loss.push(driver.stage(&mut c, 1, &mut step)?);
        report.checkpoints.push(checkpoint_path(cfg, 1));
        c
    } else {
        load_cascade(cfg, classes, &checkpoint_path(cfg, 1))?
    };
    if run_stage2 {
        report.final_loss.push(driver.stage(&mut cascade, 2, &mut step)?);
        report.checkpoints.push(checkpoint_path(cfg, 2));
    }
    report.steps = step;
    Ok(report)
}

/// The cascade a fresh run starts from.
pub fn initial_cascade(cfg: &RunConfig, classes: usize) -> Result<Cascade> {
    Cascade::init(cfg, classes, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM))
}

pub fn load_cascade(cfg: &RunConfig, classes: usize, path: &Path) -> Result<Cascade> {
    Cascade::from_checkpoint(cfg, classes, &Checkpoint::read(path)?)
}

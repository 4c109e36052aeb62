//! Finite-difference audit of every training loss on a tiny model, shared by
//! the integration tests and the acceptance harness.

#![allow(dead_code)]

use hctx_core::distill::{dino_loss, stage1_loss, stage2_loss, DistillConfig, StageInputs};
use hctx_core::encoder::{
    backward, forward, patch_embed, patch_embed_backward, EncoderConfig, ModelParams, OutputGrad, PatchConfig,
    TokenSequence,
};
use hctx_core::image::Image;
use hctx_core::numerics::Matrix;
use hctx_core::surrogates::{
    accumulate_row, class_surrogate_loss_from_projection, patch_surrogate_loss, LossWeights, SurrogateKind,
    SurrogateTable,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const AUDIT_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 3e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Dino,
    Class,
    Patch,
    Stage1,
    Stage2,
    /// Stage-2 objective on a set fed pooled tokens instead of pixels.
    Stage2Pooled,
}

pub const ALL_LOSSES: [LossKind; 6] = [
    LossKind::Dino,
    LossKind::Class,
    LossKind::Patch,
    LossKind::Stage1,
    LossKind::Stage2,
    LossKind::Stage2Pooled,
];

pub fn five_point(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Inputs of one set: pixels (views) or fixed token sequences.
enum Inputs {
    Pixels(Vec<Image>),
    Tokens(Vec<TokenSequence>),
}

/// Tiny model: D = 8, N = 4, D′ = 8, one block.
pub struct Fixture {
    pub kind: LossKind,
    pub student: ModelParams,
    teacher_projections: [Vec<f64>; 2],
    center: Vec<f64>,
    pub class_table: SurrogateTable,
    pub patch_table: SurrogateTable,
    inputs: Inputs,
    label: usize,
    cfg: DistillConfig,
    weights: LossWeights,
}

pub struct Gradients {
    pub params: ModelParams,
    pub class: Matrix,
    pub patch: Matrix,
}

fn scaled(params: &ModelParams, rng: &mut impl Rng) -> ModelParams {
    let mut p = params.clone();
    let flat: Vec<f64> = p.flatten().iter().map(|v| v * 3.0 + rng.random_range(-0.1..0.1)).collect();
    p.assign_flat(&flat).unwrap();
    p
}

fn random_image(side: usize, rng: &mut impl Rng) -> Image {
    let data = (0..side * side).map(|_| rng.random::<f64>()).collect();
    Image::new(side, side, 1, data).unwrap()
}

fn random_table(kind: SurrogateKind, classes: usize, dim: usize, rng: &mut impl Rng) -> SurrogateTable {
    let m = Matrix::from_fn(classes, dim, |_, _| rng.random_range(-1.0..1.0));
    SurrogateTable::from_descriptors(kind, m).unwrap()
}

impl Fixture {
    pub fn new(kind: LossKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = kind == LossKind::Stage2Pooled;
        let config = EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 8,
            head_hidden: 8,
            proj_dim: 8,
            patch: (!pooled).then_some(PatchConfig {
                patch_size: 2,
                channels: 1,
                global_grid: (2, 2),
                local_grid: (1, 1),
            }),
        };
        let student = scaled(&ModelParams::init(&config, &mut rng).unwrap(), &mut rng);
        let inputs = if pooled {
            Inputs::Tokens(
                [4, 4, 2]
                    .iter()
                    .map(|&n| {
                        let cls = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let patches = Matrix::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
                        TokenSequence::new(cls, patches, None).unwrap()
                    })
                    .collect(),
            )
        } else {
            Inputs::Pixels(vec![random_image(4, &mut rng), random_image(4, &mut rng), random_image(2, &mut rng)])
        };
        let mut proj = || -> Vec<f64> { (0..8).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let teacher_projections = [proj(), proj()];
        let center = proj().iter().map(|v| v * 0.1).collect();
        let cfg = DistillConfig {
            local_views: 1,
            ..DistillConfig::default()
        };
        Fixture {
            kind,
            student,
            teacher_projections,
            center,
            class_table: random_table(SurrogateKind::Class, 3, 8, &mut rng),
            patch_table: random_table(SurrogateKind::Patch, 3, 8, &mut rng),
            inputs,
            label: 1,
            cfg,
            weights: LossWeights::default(),
        }
    }

    /// Loss value and, when `grads` is set, its exact gradients.
    pub fn evaluate(
        &self,
        student: &ModelParams,
        class_table: &SurrogateTable,
        patch_table: &SurrogateTable,
        want_grads: bool,
    ) -> (f64, Option<Gradients>) {
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        let mut embeds = Vec::new();
        let views = match &self.inputs {
            Inputs::Pixels(v) => v.len(),
            Inputs::Tokens(t) => t.len(),
        };
        for v in 0..views {
            let tokens = match &self.inputs {
                Inputs::Pixels(imgs) => {
                    let (t, e) = patch_embed(&imgs[v], student).unwrap();
                    embeds.push(e);
                    t
                }
                Inputs::Tokens(t) => t[v].clone(),
            };
            let (o, c) = forward(&tokens, student).unwrap();
            outs.push(o);
            caches.push(c);
        }
        let projections: Vec<&[f64]> = outs.iter().map(|o| o.projection.as_slice()).collect();
        let teacher = [self.teacher_projections[0].as_slice(), self.teacher_projections[1].as_slice()];
        let globals = [projections[0], projections[1]];
        let patches = [&outs[0].f_p, &outs[1].f_p];
        let attention = [outs[0].attention.cls_row.as_slice(), outs[1].attention.cls_row.as_slice()];

        let mut out_grads: Vec<OutputGrad> = outs.iter().map(OutputGrad::zeros_for).collect();
        let mut class_grad = Matrix::zeros(self.class_table.classes(), self.class_table.dim());
        let mut patch_grad = Matrix::zeros(self.patch_table.classes(), self.patch_table.dim());
        let y = self.label;
        let loss = match self.kind {
            LossKind::Dino => {
                let l = dino_loss(&teacher, &projections, &self.center, &self.cfg).unwrap();
                for (g, d) in out_grads.iter_mut().zip(&l.grad_student) {
                    g.projection.clone_from(d);
                }
                l.loss
            }
            LossKind::Class => {
                let l = class_surrogate_loss_from_projection(globals, self.cfg.student_temperature, class_table, y).unwrap();
                for v in 0..2 {
                    out_grads[v].projection.clone_from(&l.grad_views[v]);
                }
                accumulate_row(&mut class_grad, y, &l.grad_row, 1.0).unwrap();
                l.loss
            }
            LossKind::Patch => {
                let l = patch_surrogate_loss(patches, attention, patch_table, y).unwrap();
                for v in 0..2 {
                    out_grads[v].f_p = l.grad_patches[v].clone();
                    out_grads[v].cls_attention.clone_from(&l.grad_attention[v]);
                }
                accumulate_row(&mut patch_grad, y, &l.grad_row, 1.0).unwrap();
                l.loss
            }
            LossKind::Stage1 | LossKind::Stage2 | LossKind::Stage2Pooled => {
                let inputs = StageInputs {
                    teacher_projections: teacher,
                    center: &self.center,
                    student_projections: projections.clone(),
                    global_patches: Some(patches),
                    global_attention: Some(attention),
                    label: y,
                };
                let l = if self.kind == LossKind::Stage1 {
                    stage1_loss(&inputs, Some(class_table), Some(patch_table), self.weights, &self.cfg).unwrap()
                } else {
                    stage2_loss(&inputs, class_table, None, self.weights, &self.cfg).unwrap()
                };
                for (g, d) in out_grads.iter_mut().zip(&l.grad_projections) {
                    g.projection.clone_from(d);
                }
                if let (Some(gp), Some(ga)) = (&l.grad_patches, &l.grad_attention) {
                    for v in 0..2 {
                        out_grads[v].f_p = gp[v].clone();
                        out_grads[v].cls_attention.clone_from(&ga[v]);
                    }
                }
                accumulate_row(&mut class_grad, y, &l.grad_class_row, 1.0).unwrap();
                if let Some(row) = &l.grad_patch_row {
                    accumulate_row(&mut patch_grad, y, row, 1.0).unwrap();
                }
                l.total
            }
        };
        if !want_grads {
            return (loss, None);
        }
        let mut params = student.zeros_like();
        for v in 0..views {
            let (g, tg) = backward(&out_grads[v], &caches[v], student).unwrap();
            params.axpy(1.0, &g).unwrap();
            if let Some(e) = embeds.get(v) {
                patch_embed_backward(e, &tg, &mut params).unwrap();
            }
        }
        (
            loss,
            Some(Gradients {
                params,
                class: class_grad,
                patch: patch_grad,
            }),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Audit {
    pub kind: LossKind,
    pub coordinates: usize,
    pub worst: f64,
    pub worst_name: String,
}

/// Compares the analytic gradient with a 5-point central difference on every
/// parameter and every surrogate coordinate.
pub fn audit(kind: LossKind, seed: u64) -> Audit {
    let fx = Fixture::new(kind, seed);
    let (_, grads) = fx.evaluate(&fx.student, &fx.class_table, &fx.patch_table, true);
    let grads = grads.unwrap();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut coordinates = 0;
    let mut check = |name: String, analytic: f64, fd: f64| {
        coordinates += 1;
        let e = rel_err(analytic, fd);
        if e > worst {
            worst = e;
            worst_name = name;
        }
    };

    let flat = fx.student.flatten();
    let analytic = grads.params.flatten();
    for i in 0..flat.len() {
        let eval = |x: f64| {
            let mut p = fx.student.clone();
            let mut v = flat.clone();
            v[i] = x;
            p.assign_flat(&v).unwrap();
            fx.evaluate(&p, &fx.class_table, &fx.patch_table, false).0
        };
        check(format!("param[{i}]"), analytic[i], five_point(eval, flat[i], FD_STEP));
    }
    for (table_kind, table, g) in [("class", &fx.class_table, &grads.class), ("patch", &fx.patch_table, &grads.patch)] {
        for r in 0..table.classes() {
            for c in 0..table.dim() {
                let eval = |x: f64| {
                    let mut d = table.descriptors.clone();
                    d.row_mut(r)[c] = x;
                    let t = SurrogateTable::from_descriptors(table.kind, d).unwrap();
                    if table_kind == "class" {
                        fx.evaluate(&fx.student, &t, &fx.patch_table, false).0
                    } else {
                        fx.evaluate(&fx.student, &fx.class_table, &t, false).0
                    }
                };
                let x = table.descriptors.row(r)[c];
                check(format!("{table_kind}[{r},{c}]"), g.row(r)[c], five_point(eval, x, FD_STEP));
            }
        }
    }
    Audit {
        kind,
        coordinates,
        worst,
        worst_name,
    }
}

//! The three-set cascade: each set has a student, an EMA teacher and its
//! surrogate tables, and spectral pooling sits between consecutive sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, TensorKind, TensorRecord};
use super::config::RunConfig;
use crate::distill::TeacherState;
use crate::encoder::{forward, patch_embed, EmbedCache, EncoderOutput, ForwardCache, ModelParams, TokenSequence};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Matrix;
use crate::pooling::{build_grid_adjacency, spectral_pool_with, Adjacency, ClusterAssignment, PoolConfig};
use crate::surrogates::{SurrogateKind, SurrogateTable};

pub const SETS: usize = 3;

#[derive(Clone, Debug)]
pub struct TransformerSet {
    pub student: ModelParams,
    pub teacher: TeacherState,
    pub class_table: SurrogateTable,
    pub patch_table: Option<SurrogateTable>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

/// One set's share of a cascade pass.
pub struct SetPass {
    pub output: EncoderOutput,
    pub cache: Option<ForwardCache>,
    /// Pooling that produced this set's input tokens (sets after the first).
    pub pooled_by: Option<ClusterAssignment>,
}

pub struct CascadePass {
    pub sets: Vec<SetPass>,
    pub embed_cache: EmbedCache,
}

#[derive(Clone, Debug)]
pub struct Cascade {
    pub sets: Vec<TransformerSet>,
    global_pooling: Vec<usize>,
    local_pooling: Vec<usize>,
    global_adjacency: Adjacency,
    local_adjacency: Adjacency,
    pool: PoolConfig,
}

impl Cascade {
    /// Fresh cascade; teachers start as copies of their students. Set 1
    /// always has a patch table; later sets get one only for the stage-2
    /// patch-loss ablation.
    pub fn init(cfg: &RunConfig, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut sets = Vec::with_capacity(SETS);
        for k in 0..SETS {
            let student = ModelParams::init(&cfg.encoder(k), rng)?;
            let teacher = TeacherState::from_student(&student);
            let class_table = SurrogateTable::init(SurrogateKind::Class, classes, cfg.proj_dim, rng)?;
            let patch_table = if k == 0 || cfg.stage2_patch_loss {
                Some(SurrogateTable::init(SurrogateKind::Patch, classes, cfg.embed_dim, rng)?)
            } else {
                None
            };
            sets.push(TransformerSet {
                student,
                teacher,
                class_table,
                patch_table,
            });
        }
        let (gg, lg) = (cfg.global_grid(), cfg.local_grid());
        Ok(Cascade {
            sets,
            global_pooling: cfg.pooling.clone(),
            local_pooling: cfg.local_pooling()?,
            global_adjacency: build_grid_adjacency(gg.0, gg.1),
            local_adjacency: build_grid_adjacency(lg.0, lg.1),
            pool: PoolConfig { kmeans: cfg.kmeans() },
        })
    }

    pub fn classes(&self) -> usize {
        self.sets[0].class_table.classes()
    }

    pub fn params(&self, k: usize, branch: Branch) -> &ModelParams {
        match branch {
            Branch::Student => &self.sets[k].student,
            Branch::Teacher => &self.sets[k].teacher.params,
        }
    }

    /// Runs `view` through sets `0..upto`. Forward caches are kept for sets
    /// whose index is in `cached`.
    pub fn run(
        &self,
        view: &Image,
        branch: Branch,
        upto: usize,
        cached: std::ops::Range<usize>,
        rng: &mut impl Rng,
    ) -> Result<CascadePass> {
        if upto == 0 || upto > SETS {
            return Err(Error::InvalidArgument(format!("cannot run {upto} transformer sets")));
        }
        let (tokens, embed_cache) = patch_embed(view, self.params(0, branch))?;
        let (schedule, base_adj) = if tokens.len() == self.global_pooling[0] {
            (&self.global_pooling, &self.global_adjacency)
        } else if tokens.len() == self.local_pooling[0] {
            (&self.local_pooling, &self.local_adjacency)
        } else {
            return Err(Error::shape(format!("view yields {} tokens, matching no pooling schedule", tokens.len())));
        };
        let mut passes: Vec<SetPass> = Vec::with_capacity(upto);
        let mut adj = base_adj.clone();
        let mut input = tokens;
        let mut pooled_by = None;
        for k in 0..upto {
            if input.len() != schedule[k] {
                return Err(Error::shape(format!(
                    "set {} expects {} tokens, got {}",
                    k + 1,
                    schedule[k],
                    input.len()
                )));
            }
            let (output, cache) = forward(&input, self.params(k, branch))?;
            let done = SetPass {
                output,
                cache: cached.contains(&k).then_some(cache),
                pooled_by: pooled_by.take(),
            };
            if k + 1 < upto {
                let out = &done.output;
                let (pooled, assignment) =
                    spectral_pool_with(&out.f_p, &out.attention.patch_block, &adj, schedule[k + 1], &self.pool, rng)?;
                adj = adj.coarsen(&assignment)?;
                // The next set's [cls] input is this set's transformed [cls].
                input = TokenSequence::new(out.f_c.clone(), pooled, None)?;
                pooled_by = Some(assignment);
            }
            passes.push(done);
        }
        Ok(CascadePass {
            sets: passes,
            embed_cache,
        })
    }

    /// `[cls]` feature of set `stage` (1-based) for an image, computed by the
    /// students with pooling seeded by `seed`.
    pub fn features(&self, image: &Image, stage: usize, seed: u64) -> Result<Vec<f64>> {
        let side = self.sets[0]
            .student
            .config
            .patch
            .as_ref()
            .map(|p| p.global_grid.0 * p.patch_size)
            .expect("set 1 embeds patches");
        let view = image.resize(side, side);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pass = self.run(&view, Branch::Student, stage, 0..0, &mut rng)?;
        Ok(pass.sets[stage - 1].output.f_c.clone())
    }

    pub fn to_checkpoint(&self, metadata: Vec<(String, String)>) -> Checkpoint {
        let mut tensors = Vec::new();
        for (k, set) in self.sets.iter().enumerate() {
            let n = k + 1;
            for (name, t) in set.student.tensors() {
                tensors.push(record(format!("set{n}.student.{name}"), TensorKind::Weights, t));
            }
            for (name, t) in set.teacher.params.tensors() {
                tensors.push(record(format!("set{n}.teacher.{name}"), TensorKind::Weights, t));
            }
            tensors.push(record(
                format!("set{n}.teacher.center"),
                TensorKind::Buffer,
                &Matrix::row_vector(&set.teacher.center),
            ));
            tensors.push(record(
                format!("set{n}.class_surrogates"),
                TensorKind::ClassSurrogates,
                &set.class_table.descriptors,
            ));
            if let Some(p) = &set.patch_table {
                tensors.push(record(format!("set{n}.patch_surrogates"), TensorKind::PatchSurrogates, &p.descriptors));
            }
        }
        Checkpoint { metadata, tensors }
    }

    /// Rebuilds a cascade shaped by `cfg` from a checkpoint, listing every
    /// missing, unexpected or mis-shaped tensor on failure. Patch tables of
    /// sets 2 and 3 are loaded when present.
    pub fn from_checkpoint(cfg: &RunConfig, classes: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut template = cfg.clone();
        template.stage2_patch_loss = false;
        let mut cascade = Cascade::init(&template, classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut problems = Vec::new();
        let mut used = vec![false; ckpt.tensors.len()];
        let mut fetch = |name: &str, kind: TensorKind, shape: (usize, usize), problems: &mut Vec<String>| {
            match ckpt.tensors.iter().position(|t| t.name == name) {
                None => {
                    problems.push(format!("missing {name} ({}x{})", shape.0, shape.1));
                    None
                }
                Some(i) => {
                    used[i] = true;
                    let t = &ckpt.tensors[i];
                    if t.kind != kind {
                        problems.push(format!("{name}: kind {} but expected {}", t.kind.as_str(), kind.as_str()));
                        None
                    } else if t.data.shape() != shape {
                        problems.push(format!(
                            "{name}: checkpoint {}x{} vs config {}x{}",
                            t.data.rows(),
                            t.data.cols(),
                            shape.0,
                            shape.1
                        ));
                        None
                    } else {
                        Some(t.data.clone())
                    }
                }
            }
        };
        for (k, set) in cascade.sets.iter_mut().enumerate() {
            let n = k + 1;
            for (prefix, params) in [("student", &mut set.student), ("teacher", &mut set.teacher.params)] {
                for (name, t) in params.tensors_mut() {
                    if let Some(m) = fetch(&format!("set{n}.{prefix}.{name}"), TensorKind::Weights, t.shape(), &mut problems) {
                        *t = m;
                    }
                }
            }
            let proj = set.teacher.center.len();
            if let Some(m) = fetch(&format!("set{n}.teacher.center"), TensorKind::Buffer, (1, proj), &mut problems) {
                set.teacher.center = m.into_vec();
            }
            let shape = set.class_table.descriptors.shape();
            if let Some(m) = fetch(&format!("set{n}.class_surrogates"), TensorKind::ClassSurrogates, shape, &mut problems) {
                set.class_table.descriptors = m;
            }
            let patch_name = format!("set{n}.patch_surrogates");
            let patch_shape = (classes, cfg.embed_dim);
            if k == 0 || ckpt.tensor(&patch_name).is_some() {
                if let Some(m) = fetch(&patch_name, TensorKind::PatchSurrogates, patch_shape, &mut problems) {
                    set.patch_table = Some(SurrogateTable::from_descriptors(SurrogateKind::Patch, m)?);
                }
            }
        }
        for (t, u) in ckpt.tensors.iter().zip(&used) {
            if !u {
                problems.push(format!("unexpected {}", t.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::IncompatibleCheckpoint(problems));
        }
        if cfg.stage2_patch_loss {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7061_7463);
            for set in cascade.sets.iter_mut().skip(1) {
                if set.patch_table.is_none() {
                    set.patch_table = Some(SurrogateTable::init(SurrogateKind::Patch, classes, cfg.embed_dim, &mut rng)?);
                }
            }
        }
        Ok(cascade)
    }
}

fn record(name: String, kind: TensorKind, data: &Matrix) -> TensorRecord {
    TensorRecord {
        name,
        kind,
        data: data.clone(),
    }
}

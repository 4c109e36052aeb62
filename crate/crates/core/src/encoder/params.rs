use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Patch-embedding geometry for a transformer set that reads pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Token grid of a global view, `(h, w)`.
    pub global_grid: (usize, usize),
    /// Token grid of a local view, `(h, w)`.
    pub local_grid: (usize, usize),
}

impl PatchConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    /// Projection dimension `D′`.
    pub proj_dim: usize,
    /// `None` for sets that consume pooled tokens from a previous set.
    pub patch: Option<PatchConfig>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if let Some(p) = &self.patch {
            if p.patch_size == 0 || p.channels == 0 {
                return Err(Error::Config("patch size and channels must be positive".into()));
            }
            if p.global_grid.0 * p.global_grid.1 == 0 || p.local_grid.0 * p.local_grid.1 == 0 {
                return Err(Error::Config("token grids must be non-empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub patch_weight: Matrix,
    pub patch_bias: Matrix,
    pub cls_token: Matrix,
    pub pos_global: Matrix,
    pub pos_local: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub qkv_weight: Matrix,
    pub qkv_bias: Matrix,
    pub proj_weight: Matrix,
    pub proj_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub fc1_weight: Matrix,
    pub fc1_bias: Matrix,
    pub fc2_weight: Matrix,
    pub fc2_bias: Matrix,
}

/// Two hidden GELU layers followed by a linear map to `D′`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub fc1_weight: Matrix,
    pub fc1_bias: Matrix,
    pub fc2_weight: Matrix,
    pub fc2_bias: Matrix,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
}

/// All learnable tensors of one transformer set.
///
/// Every instance carries an identity and a version counter; forward caches
/// record both so a backward pass against different or since-modified
/// parameters is rejected.
#[derive(Debug)]
pub struct ModelParams {
    pub config: EncoderConfig,
    embed: Option<EmbedParams>,
    blocks: Vec<BlockParams>,
    head: HeadParams,
    id: u64,
    version: u64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            embed: self.embed.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed == other.embed
            && self.blocks == other.blocks
            && self.head == other.head
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn ones(cols: usize) -> Matrix {
    Matrix::from_fn(1, cols, |_, _| 1.0)
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let embed = config.patch.as_ref().map(|p| EmbedParams {
            patch_weight: gaussian(p.patch_dim(), d, INIT_STD, rng),
            patch_bias: Matrix::zeros(1, d),
            cls_token: gaussian(1, d, INIT_STD, rng),
            pos_global: gaussian(p.global_grid.0 * p.global_grid.1, d, INIT_STD, rng),
            pos_local: gaussian(p.local_grid.0 * p.local_grid.1, d, INIT_STD, rng),
        });
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gain: ones(d),
                ln1_bias: Matrix::zeros(1, d),
                qkv_weight: gaussian(d, 3 * d, INIT_STD, rng),
                qkv_bias: Matrix::zeros(1, 3 * d),
                proj_weight: gaussian(d, d, INIT_STD, rng),
                proj_bias: Matrix::zeros(1, d),
                ln2_gain: ones(d),
                ln2_bias: Matrix::zeros(1, d),
                fc1_weight: gaussian(d, config.mlp_hidden, INIT_STD, rng),
                fc1_bias: Matrix::zeros(1, config.mlp_hidden),
                fc2_weight: gaussian(config.mlp_hidden, d, INIT_STD, rng),
                fc2_bias: Matrix::zeros(1, d),
            })
            .collect();
        // The head sees unnormalised residual features, so use fan-in scaling here.
        let fan_in = |n: usize| (1.0 / n as f64).sqrt();
        let h = config.head_hidden;
        let head = HeadParams {
            fc1_weight: gaussian(d, h, fan_in(d), rng),
            fc1_bias: Matrix::zeros(1, h),
            fc2_weight: gaussian(h, h, fan_in(h), rng),
            fc2_bias: Matrix::zeros(1, h),
            out_weight: gaussian(h, config.proj_dim, fan_in(h), rng),
            out_bias: Matrix::zeros(1, config.proj_dim),
        };
        Ok(ModelParams {
            config: config.clone(),
            embed,
            blocks,
            head,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.scale(0.0);
        }
        out
    }

    pub fn embed(&self) -> Option<&EmbedParams> {
        self.embed.as_ref()
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub(crate) fn embed_mut(&mut self) -> Option<&mut EmbedParams> {
        self.version += 1;
        self.embed.as_mut()
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [BlockParams] {
        self.version += 1;
        &mut self.blocks
    }

    pub(crate) fn head_mut(&mut self) -> &mut HeadParams {
        self.version += 1;
        &mut self.head
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }

    /// Stable `(name, tensor)` listing; the order is the checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            out.push(("embed.patch_weight".to_string(), &e.patch_weight));
            out.push(("embed.patch_bias".to_string(), &e.patch_bias));
            out.push(("embed.cls_token".to_string(), &e.cls_token));
            out.push(("embed.pos_global".to_string(), &e.pos_global));
            out.push(("embed.pos_local".to_string(), &e.pos_local));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, &Matrix); 12] = [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("qkv_weight", &b.qkv_weight),
                ("qkv_bias", &b.qkv_bias),
                ("proj_weight", &b.proj_weight),
                ("proj_bias", &b.proj_bias),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("fc1_weight", &b.fc1_weight),
                ("fc1_bias", &b.fc1_bias),
                ("fc2_weight", &b.fc2_weight),
                ("fc2_bias", &b.fc2_bias),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        let h = &self.head;
        for (n, t) in [
            ("fc1_weight", &h.fc1_weight),
            ("fc1_bias", &h.fc1_bias),
            ("fc2_weight", &h.fc2_weight),
            ("fc2_bias", &h.fc2_bias),
            ("out_weight", &h.out_weight),
            ("out_bias", &h.out_bias),
        ] {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.version += 1;
        let mut out = Vec::new();
        if let Some(e) = &mut self.embed {
            out.push(("embed.patch_weight".to_string(), &mut e.patch_weight));
            out.push(("embed.patch_bias".to_string(), &mut e.patch_bias));
            out.push(("embed.cls_token".to_string(), &mut e.cls_token));
            out.push(("embed.pos_global".to_string(), &mut e.pos_global));
            out.push(("embed.pos_local".to_string(), &mut e.pos_local));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let fields: [(&str, &mut Matrix); 12] = [
                ("ln1_gain", &mut b.ln1_gain),
                ("ln1_bias", &mut b.ln1_bias),
                ("qkv_weight", &mut b.qkv_weight),
                ("qkv_bias", &mut b.qkv_bias),
                ("proj_weight", &mut b.proj_weight),
                ("proj_bias", &mut b.proj_bias),
                ("ln2_gain", &mut b.ln2_gain),
                ("ln2_bias", &mut b.ln2_bias),
                ("fc1_weight", &mut b.fc1_weight),
                ("fc1_bias", &mut b.fc1_bias),
                ("fc2_weight", &mut b.fc2_weight),
                ("fc2_bias", &mut b.fc2_bias),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        let h = &mut self.head;
        for (n, t) in [
            ("fc1_weight", &mut h.fc1_weight),
            ("fc1_bias", &mut h.fc1_bias),
            ("fc2_weight", &mut h.fc2_weight),
            ("fc2_bias", &mut h.fc2_bias),
            ("out_weight", &mut h.out_weight),
            ("out_bias", &mut h.out_bias),
        ] {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All coordinates concatenated in [`ModelParams::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "assign_flat: {} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("axpy: parameter sets differ"));
        }
        for ((_, a), (_, b)) in mine.into_iter().zip(theirs) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: 16,
            head_hidden: 12,
            proj_dim: 6,
            patch: Some(PatchConfig {
                patch_size: 2,
                channels: 1,
                global_grid: (2, 2),
                local_grid: (1, 1),
            }),
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&config(), &mut rng).unwrap();
        let flat = p.flatten();
        let mut q = p.zeros_like();
        assert!(q.flatten().iter().all(|v| *v == 0.0));
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&flat[1..]).is_err());
    }

    #[test]
    fn names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&config(), &mut rng).unwrap();
        let mut names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
    }

    #[test]
    fn clones_get_new_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&config(), &mut rng).unwrap();
        let q = p.clone();
        assert_ne!(p.stamp().0, q.stamp().0);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = config();
        c.heads = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ModelParams::init(&c, &mut rng).is_err());
    }
}

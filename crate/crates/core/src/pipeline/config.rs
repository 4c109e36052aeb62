//! Run configuration: a flat TOML file, `HCTX_<KEY>` environment overrides
//! and a documented printer of every effective value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::encoder::{CropConfig, EncoderConfig, PatchConfig};
use crate::error::{Error, Result};
use crate::fewshot::Protocol;
use crate::pooling::{GradMode, KMeansConfig};
use crate::surrogates::{AdamWConfig, LossWeights};

pub const ENV_PREFIX: &str = "HCTX_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Mode {
    /// Sets 2 and 3 are trained together, gradients flowing from set 3 into set 2.
    EndToEnd,
    /// Set 2 is trained first, then set 3 with set 2 frozen.
    OneByOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolGrad {
    Copy,
    Adjoint,
}

impl From<PoolGrad> for GradMode {
    fn from(p: PoolGrad) -> Self {
        match p {
            PoolGrad::Copy => GradMode::Copy,
            PoolGrad::Adjoint => GradMode::Adjoint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Base,
    Val,
    Novel,
}

/// Every knob of a run. Field names are the TOML keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub output_dir: PathBuf,

    pub dataset: String,
    pub synthetic_classes: usize,
    pub synthetic_images_per_class: usize,
    pub split_base: usize,
    pub split_val: usize,
    pub split_novel: usize,

    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub depths: Vec<usize>,
    pub pooling: Vec<usize>,
    pub pool_grad: PoolGrad,
    pub kmeans_restarts: usize,
    pub kmeans_iterations: usize,

    pub local_views: usize,
    pub local_side: usize,
    pub global_scale_min: f64,
    pub global_scale_max: f64,
    pub local_scale_min: f64,
    pub local_scale_max: f64,
    pub flip_probability: f64,

    pub alpha: f64,
    pub beta: f64,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,

    pub lr: f64,
    pub lr_surrogates: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_sets: usize,
    pub stage2_mode: Stage2Mode,
    pub stage2_patch_loss: bool,

    pub eval_split: EvalSplit,
    pub eval_way: usize,
    pub eval_shot: usize,
    pub eval_queries: usize,
    pub eval_episodes: usize,
    pub stage_select: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            output_dir: PathBuf::from("runs/default"),
            dataset: "synthetic".into(),
            synthetic_classes: 17,
            synthetic_images_per_class: 30,
            split_base: 10,
            split_val: 2,
            split_novel: 5,
            image_side: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            heads: 4,
            mlp_hidden: 64,
            head_hidden: 64,
            proj_dim: 128,
            depths: vec![2, 1, 1],
            pooling: vec![64, 32, 16],
            pool_grad: PoolGrad::Copy,
            kmeans_restarts: 20,
            kmeans_iterations: 100,
            local_views: 2,
            local_side: 16,
            global_scale_min: 0.4,
            global_scale_max: 1.0,
            local_scale_min: 0.05,
            local_scale_max: 0.4,
            flip_probability: 0.5,
            alpha: 1.0,
            beta: 0.1,
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            lr: 5e-3,
            lr_surrogates: 5e-4,
            min_lr: 1e-6,
            warmup_fraction: 0.1,
            weight_decay: 0.04,
            batch_size: 8,
            stage1_epochs: 40,
            stage2_epochs: 10,
            stage1_sets: 1,
            stage2_mode: Stage2Mode::EndToEnd,
            stage2_patch_loss: false,
            eval_split: EvalSplit::Novel,
            eval_way: 5,
            eval_shot: 1,
            eval_queries: 15,
            eval_episodes: 500,
            stage_select: 2,
        }
    }
}

/// `(key, description)` for every field, in printing order.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "master seed; every random stream is derived from it"),
    ("deterministic", "force fully sequential execution (recorded in checkpoints)"),
    ("output_dir", "directory for checkpoints, metrics and images"),
    ("dataset", "\"synthetic\" or a directory with one sub-directory of PPM images per class"),
    ("synthetic_classes", "number of generated classes"),
    ("synthetic_images_per_class", "images generated per class"),
    ("split_base", "classes used for training (surrogate table rows)"),
    ("split_val", "classes held out for model selection"),
    ("split_novel", "classes held out for few-shot evaluation"),
    ("image_side", "images are resized to this square side; also the global crop side"),
    ("channels", "image channels (1 or 3)"),
    ("patch_size", "patch side P in pixels"),
    ("embed_dim", "token dimension D, shared by all transformer sets"),
    ("heads", "attention heads per block"),
    ("mlp_hidden", "hidden width of the block MLP"),
    ("head_hidden", "hidden width of the projection head"),
    ("proj_dim", "projection dimension D'"),
    ("depths", "blocks in transformer sets 1, 2 and 3"),
    ("pooling", "token count entering each set for a global view, strictly decreasing"),
    ("pool_grad", "gradient rule through pooling: \"copy\" or \"adjoint\""),
    ("kmeans_restarts", "k-means++ restarts per pooling call"),
    ("kmeans_iterations", "Lloyd iterations per restart"),
    ("local_views", "local crops m per image"),
    ("local_side", "local crop side in pixels"),
    ("global_scale_min", "smallest area fraction of a global crop"),
    ("global_scale_max", "largest area fraction of a global crop"),
    ("local_scale_min", "smallest area fraction of a local crop"),
    ("local_scale_max", "largest area fraction of a local crop"),
    ("flip_probability", "probability of a horizontal flip per crop"),
    ("alpha", "weight of the class surrogate loss"),
    ("beta", "weight of the patch surrogate loss"),
    ("student_temperature", "student softmax temperature"),
    ("teacher_temperature", "teacher softmax temperature"),
    ("center_momentum", "momentum of the teacher output center"),
    ("ema_start", "teacher EMA momentum at the first step of a stage"),
    ("ema_end", "teacher EMA momentum at the last step of a stage"),
    ("lr", "peak learning rate of network weights"),
    ("lr_surrogates", "peak learning rate of surrogate tables (a tenth of lr works best here)"),
    ("min_lr", "learning rate at the end of the cosine decay"),
    ("warmup_fraction", "fraction of a stage spent in linear warmup"),
    ("weight_decay", "decoupled weight decay on weight matrices"),
    ("batch_size", "images per optimizer step"),
    ("stage1_epochs", "epochs of stage 1"),
    ("stage2_epochs", "epochs of stage 2 (per set in one-by-one mode)"),
    ("stage1_sets", "transformer sets trained in stage 1 and frozen in stage 2 (1 or 2)"),
    ("stage2_mode", "\"end-to-end\" or \"one-by-one\""),
    ("stage2_patch_loss", "ablation: add the patch surrogate term to stage 2"),
    ("eval_split", "split evaluated by eval: \"base\", \"val\" or \"novel\""),
    ("eval_way", "classes per episode"),
    ("eval_shot", "support images per class"),
    ("eval_queries", "query images per class"),
    ("eval_episodes", "episodes per evaluation"),
    ("stage_select", "transformer set whose [cls] feature is evaluated (1, 2 or 3)"),
];

impl RunConfig {
    /// Reads a TOML file; keys left out keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `HCTX_<KEY>` overrides from `vars`, e.g. `HCTX_SEED=3` or
    /// `HCTX_POOLING=64,32,16`.
    pub fn with_env_overrides<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table = self.to_table()?;
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            let Some(current) = table.get(&key) else {
                return Err(Error::Config(format!("unknown override {}{}", ENV_PREFIX, key.to_ascii_uppercase())));
            };
            let value = parse_override(current, v.as_ref())
                .ok_or_else(|| Error::Config(format!("cannot parse {ENV_PREFIX}{} = {:?}", key.to_ascii_uppercase(), v.as_ref())))?;
            table.insert(key, value);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Overrides from the process environment.
    pub fn with_process_env(&self) -> Result<Self> {
        self.with_env_overrides(std::env::vars())
    }

    fn to_table(&self) -> Result<toml::Table> {
        match toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => Ok(t),
            _ => unreachable!("a struct serializes to a table"),
        }
    }

    /// Every effective value, one `key = value` line each, preceded by its
    /// description as a comment. The output parses back to the same config.
    pub fn to_documented_toml(&self) -> Result<String> {
        let table = self.to_table()?;
        let mut out = String::new();
        for (key, doc) in SCHEMA {
            let value = table
                .get(*key)
                .ok_or_else(|| Error::Config(format!("schema key {key} is not a config field")))?;
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_base == 0 {
            return bad("split_base must be positive".into());
        }
        if self.dataset == "synthetic" {
            let total = self.split_base + self.split_val + self.split_novel;
            if total != self.synthetic_classes {
                return bad(format!(
                    "splits {}+{}+{} do not add up to {} synthetic classes",
                    self.split_base, self.split_val, self.split_novel, self.synthetic_classes
                ));
            }
            if self.synthetic_images_per_class == 0 {
                return bad("synthetic_images_per_class must be positive".into());
            }
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 || self.local_side % self.patch_size != 0 {
            return bad(format!(
                "image_side {} and local_side {} must be multiples of patch_size {}",
                self.image_side, self.local_side, self.patch_size
            ));
        }
        if self.local_side >= self.image_side {
            return bad("local_side must be smaller than image_side".into());
        }
        if self.depths.len() != 3 || self.pooling.len() != 3 {
            return bad("depths and pooling need one entry per transformer set (3)".into());
        }
        if self.depths.contains(&0) {
            return bad("every transformer set needs at least one block".into());
        }
        let grid = self.image_side / self.patch_size;
        if self.pooling[0] != grid * grid {
            return bad(format!(
                "pooling must start at the {} patch tokens of a global view, got {}",
                grid * grid,
                self.pooling[0]
            ));
        }
        if self.pooling.windows(2).any(|w| w[1] >= w[0] || w[1] == 0) {
            return bad(format!("pooling schedule {:?} must be strictly decreasing and positive", self.pooling));
        }
        self.local_pooling()?;
        if !(1..=2).contains(&self.stage1_sets) {
            return bad("stage1_sets must be 1 or 2".into());
        }
        if !(1..=3).contains(&self.stage_select) {
            return bad("stage_select must be 1, 2 or 3".into());
        }
        if self.batch_size == 0 || self.kmeans_restarts == 0 {
            return bad("batch_size and kmeans_restarts must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_surrogates > 0.0 && self.min_lr >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("warmup_fraction and flip_probability must lie in [0, 1]".into());
        }
        let scales = [
            (self.global_scale_min, self.global_scale_max),
            (self.local_scale_min, self.local_scale_max),
        ];
        if scales.iter().any(|(lo, hi)| !(*lo > 0.0 && lo <= hi && *hi <= 1.0)) {
            return bad("crop scales must satisfy 0 < min <= max <= 1".into());
        }
        LossWeights::new(self.alpha, self.beta)?;
        self.distill().validate()?;
        for k in 0..3 {
            self.encoder(k).validate()?;
        }
        Ok(())
    }

    /// Token counts entering each set for a local view: the global schedule
    /// scaled to the local grid.
    pub fn local_pooling(&self) -> Result<Vec<usize>> {
        let lg = self.local_side / self.patch_size;
        let n_local = lg * lg;
        self.pooling
            .iter()
            .map(|&p| {
                let scaled = n_local * p;
                if scaled % self.pooling[0] != 0 || scaled / self.pooling[0] == 0 {
                    Err(Error::Config(format!(
                        "pooling {:?} does not scale to the {n_local} tokens of a local view",
                        self.pooling
                    )))
                } else {
                    Ok(scaled / self.pooling[0])
                }
            })
            .collect()
    }

    pub fn global_grid(&self) -> (usize, usize) {
        let g = self.image_side / self.patch_size;
        (g, g)
    }

    pub fn local_grid(&self) -> (usize, usize) {
        let g = self.local_side / self.patch_size;
        (g, g)
    }

    /// Encoder configuration of set `k` (0-based).
    pub fn encoder(&self, k: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            depth: self.depths.get(k).copied().unwrap_or(0),
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            head_hidden: self.head_hidden,
            proj_dim: self.proj_dim,
            patch: (k == 0).then(|| PatchConfig {
                patch_size: self.patch_size,
                channels: self.channels,
                global_grid: self.global_grid(),
                local_grid: self.local_grid(),
            }),
        }
    }

    pub fn crops(&self) -> CropConfig {
        CropConfig {
            global_side: self.image_side,
            local_side: self.local_side,
            local_count: self.local_views,
            global_scale: (self.global_scale_min, self.global_scale_max),
            local_scale: (self.local_scale_min, self.local_scale_max),
            flip_probability: self.flip_probability,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            student_temperature: self.student_temperature,
            teacher_temperature: self.teacher_temperature,
            center_momentum: self.center_momentum,
            ema_start: self.ema_start,
            ema_end: self.ema_end,
            local_views: self.local_views,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            restarts: self.kmeans_restarts,
            max_iterations: self.kmeans_iterations,
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            way: self.eval_way,
            shot: self.eval_shot,
            queries: self.eval_queries,
            episodes: self.eval_episodes,
        }
    }
}

fn parse_override(current: &toml::Value, raw: &str) -> Option<toml::Value> {
    use toml::Value;
    if let Value::String(_) = current {
        return Some(Value::String(raw.to_string()));
    }
    let text = match current {
        Value::Array(_) if !raw.trim_start().starts_with('[') => format!("[{raw}]"),
        _ => raw.to_string(),
    };
    let parsed: toml::Table = toml::from_str(&format!("v = {text}")).ok()?;
    let value = parsed.get("v")?.clone();
    match (current, &value) {
        (Value::Float(_), Value::Integer(i)) => Some(Value::Float(*i as f64)),
        (a, b) if std::mem::discriminant(a) == std::mem::discriminant(b) => Some(value),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_documented() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let table = cfg.to_table().unwrap();
        assert_eq!(table.len(), SCHEMA.len());
        let printed = cfg.to_documented_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&printed).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\nbeta = 0.01\nstage2_mode = \"one-by-one\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.stage2_mode, Stage2Mode::OneByOne);
        assert_eq!(cfg.embed_dim, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1\n").is_err());
    }

    #[test]
    fn env_overrides() {
        let cfg = RunConfig::default()
            .with_env_overrides([
                ("HCTX_SEED", "11"),
                ("HCTX_ALPHA", "0"),
                ("HCTX_POOLING", "64,16,4"),
                ("HCTX_DATASET", "/data/x"),
                ("HCTX_STAGE2_MODE", "one-by-one"),
                ("PATH", "/usr/bin"),
            ])
            .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.pooling, vec![64, 16, 4]);
        assert_eq!(cfg.dataset, "/data/x");
        assert_eq!(cfg.stage2_mode, Stage2Mode::OneByOne);
        assert!(RunConfig::default().with_env_overrides([("HCTX_NOPE", "1")]).is_err());
        assert!(RunConfig::default().with_env_overrides([("HCTX_SEED", "abc")]).is_err());
    }

    #[test]
    fn validation_catches_bad_schedules() {
        let mut cfg = RunConfig::default();
        cfg.pooling = vec![64, 64, 16];
        assert!(cfg.validate().is_err());
        cfg.pooling = vec![60, 32, 16];
        assert!(cfg.validate().is_err());
        cfg.pooling = vec![64, 30, 16];
        // 16 local tokens do not scale by 30/64 to an integer.
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.teacher_temperature = 0.5;
        assert!(cfg.validate().is_err());
        assert_eq!(RunConfig::default().local_pooling().unwrap(), vec![16, 8, 4]);
    }
}

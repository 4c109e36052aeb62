//! Evaluation and visualisation commands.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::dataset::Dataset;
use super::model::{Branch, Cascade, SETS};
use crate::error::{Error, Result};
use crate::fewshot::{evaluate_features, EvalReport, FeatureBank, Protocol};
use crate::image::Image;
use crate::pooling::{render_cluster_map, render_heatmap};

const EPISODE_STREAM: u64 = 0x6570_6973;
const FEATURE_STREAM: u64 = 0x6665_6174;

fn check_stage(stage: usize) -> Result<()> {
    if !(1..=SETS).contains(&stage) {
        return Err(Error::InvalidArgument(format!("stage-select must be 1, 2 or 3, got {stage}")));
    }
    Ok(())
}

/// `[cls]` features of set `stage` for every image of the evaluation split.
/// Pooling for image `i` is seeded from the run seed and `i`.
pub fn feature_bank(cfg: &RunConfig, cascade: &Cascade, dataset: &Dataset, stage: usize) -> Result<FeatureBank> {
    check_stage(stage)?;
    let items = dataset.split(cfg.eval_split);
    let mut features = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (i, (image, label)) in items.into_iter().enumerate() {
        features.push(cascade.features(image, stage, cfg.seed ^ FEATURE_STREAM ^ ((i as u64) << 20))?);
        labels.push(label);
    }
    FeatureBank::new(features, labels)
}

/// Episodic evaluation of `cascade` on the configured split.
pub fn evaluate_cascade(
    cfg: &RunConfig,
    cascade: &Cascade,
    dataset: &Dataset,
    protocol: Protocol,
    stage: usize,
) -> Result<EvalReport> {
    let bank = feature_bank(cfg, cascade, dataset, stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EPISODE_STREAM);
    evaluate_features(&bank, protocol, &mut rng)
}

/// Loads `checkpoint`, evaluates it, and writes the per-episode accuracies
/// to `per_episode` when given.
pub fn evaluate_cmd(
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoint: &Path,
    protocol: Protocol,
    stage: usize,
    per_episode: Option<&Path>,
) -> Result<EvalReport> {
    check_stage(stage)?;
    let classes = dataset.manifest.count(super::dataset::Split::Base);
    let cascade = super::train::load_cascade(cfg, classes, checkpoint)?;
    let report = evaluate_cascade(cfg, &cascade, dataset, protocol, stage)?;
    if let Some(path) = per_episode {
        std::fs::write(path, report.per_episode_tsv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

pub const VIZ_FILES: [&str; 5] = [
    "cluster_map_layer1.ppm",
    "cluster_map_layer2.ppm",
    "cls_attention.ppm",
    "assignment_layer1.txt",
    "assignment_layer2.txt",
];

/// Writes the cluster map of each pooling layer over the input image, the
/// set-1 `[cls]` attention heatmap at image resolution, and the raw
/// assignment of each layer. Returns the written paths.
pub fn visualize_cmd(cfg: &RunConfig, cascade: &Cascade, image: &Image, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if image.width() != cfg.image_side || image.height() != cfg.image_side || image.channels() != cfg.channels {
        return Err(Error::shape(format!(
            "image is {}x{} with {} channels, config expects {}x{} with {}",
            image.width(),
            image.height(),
            image.channels(),
            cfg.image_side,
            cfg.image_side,
            cfg.channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ FEATURE_STREAM);
    let pass = cascade.run(image, Branch::Student, SETS, 0..0, &mut rng)?;
    let layer1 = pass.sets[1].pooled_by.as_ref().expect("set 2 input is pooled");
    let layer2 = pass.sets[2].pooled_by.as_ref().expect("set 3 input is pooled");
    let through = layer1.compose(layer2)?;
    let heat = render_heatmap(&pass.sets[0].output.attention.cls_row, cfg.global_grid(), cfg.patch_size)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths: Vec<PathBuf> = VIZ_FILES.iter().map(|f| out_dir.join(f)).collect();
    render_cluster_map(layer1, image, cfg.patch_size)?.write_ppm(&paths[0])?;
    render_cluster_map(&through, image, cfg.patch_size)?.write_ppm(&paths[1])?;
    heat.write_ppm(&paths[2])?;
    for (path, a) in paths[3..].iter().zip([layer1, layer2]) {
        std::fs::write(path, a.to_text()).map_err(|e| Error::io(path, e))?;
    }
    Ok(paths)
}

use super::ClusterAssignment;
use crate::error::{Error, Result};
use crate::image::Image;

fn patch_grid(image: &Image, patch_size: usize, tokens: usize) -> Result<(usize, usize)> {
    if patch_size == 0 || image.width() % patch_size != 0 || image.height() % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image does not tile into {patch_size} pixel patches",
            image.width(),
            image.height()
        )));
    }
    let grid = (image.height() / patch_size, image.width() / patch_size);
    if grid.0 * grid.1 != tokens {
        return Err(Error::shape(format!(
            "{} patches in the image, {tokens} tokens to render",
            grid.0 * grid.1
        )));
    }
    Ok(grid)
}

/// Paints every patch with the mean colour of all pixels in its cluster.
pub fn render_cluster_map(assignment: &ClusterAssignment, image: &Image, patch_size: usize) -> Result<Image> {
    let (_, gw) = patch_grid(image, patch_size, assignment.len())?;
    let c = image.channels();
    let token_of = |x: usize, y: usize| (y / patch_size) * gw + x / patch_size;
    let mut means = vec![vec![0.0; c]; assignment.n_clusters];
    let mut counts = vec![0usize; assignment.n_clusters];
    for y in 0..image.height() {
        for x in 0..image.width() {
            let l = assignment.labels[token_of(x, y)];
            counts[l] += 1;
            for (m, v) in means[l].iter_mut().zip(image.pixel(x, y)) {
                *m += v;
            }
        }
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= *n as f64;
        }
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let l = assignment.labels[token_of(x, y)];
            out.pixel_mut(x, y).copy_from_slice(&means[l]);
        }
    }
    Ok(out)
}

/// Grey heatmap of per-patch weights scaled so the largest weight is white.
pub fn render_heatmap(weights: &[f64], grid: (usize, usize), scale: usize) -> Result<Image> {
    let (gh, gw) = grid;
    if weights.len() != gh * gw || scale == 0 {
        return Err(Error::shape(format!(
            "{} weights for a {gh}x{gw} grid at scale {scale}",
            weights.len()
        )));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut data = Vec::with_capacity(gh * gw * scale * scale);
    for y in 0..gh * scale {
        for x in 0..gw * scale {
            data.push((weights[(y / scale) * gw + x / scale] * norm).clamp(0.0, 1.0));
        }
    }
    Image::new(gw * scale, gh * scale, 1, data)
}

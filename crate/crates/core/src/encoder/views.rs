use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub global_side: usize,
    pub local_side: usize,
    /// Number of local views `m`.
    pub local_count: usize,
    /// Area fraction range for global crops.
    pub global_scale: (f64, f64),
    /// Area fraction range for local crops.
    pub local_scale: (f64, f64),
    pub flip_probability: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            global_side: 32,
            local_side: 16,
            local_count: 2,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            flip_probability: 0.5,
        }
    }
}

/// Two global crops and `m` local crops of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub globals: [Image; 2],
    pub locals: Vec<Image>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        2 + self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Globals first, then locals.
    pub fn iter(&self) -> impl Iterator<Item = &Image> {
        self.globals.iter().chain(self.locals.iter())
    }
}

/// Random-resized crops with horizontal flips.
pub fn multi_crop(image: &Image, rng: &mut impl Rng, config: &CropConfig) -> Result<ViewSet> {
    if config.local_side >= config.global_side {
        return Err(Error::Config(format!(
            "local crop side {} must be smaller than global side {}",
            config.local_side, config.global_side
        )));
    }
    let smallest = image.width().min(image.height());
    if smallest < config.local_side {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {} pixel local crop",
            image.width(),
            image.height(),
            config.local_side
        )));
    }
    let g1 = random_crop(image, rng, config.global_scale, config.global_side, config.flip_probability);
    let g2 = random_crop(image, rng, config.global_scale, config.global_side, config.flip_probability);
    let locals = (0..config.local_count)
        .map(|_| random_crop(image, rng, config.local_scale, config.local_side, config.flip_probability))
        .collect();
    Ok(ViewSet {
        globals: [g1, g2],
        locals,
    })
}

fn random_crop(image: &Image, rng: &mut impl Rng, scale: (f64, f64), side: usize, flip: f64) -> Image {
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let area = iw * ih * rng.random_range(scale.0..=scale.1);
    let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let w = (area * ratio).sqrt().clamp(1.0, iw);
    let h = (area / ratio).sqrt().clamp(1.0, ih);
    let x0 = rng.random_range(0.0..=(iw - w));
    let y0 = rng.random_range(0.0..=(ih - h));
    let crop = image.crop_resize(x0, y0, w, h, side, side);
    if rng.random_bool(flip) {
        crop.flip_horizontal()
    } else {
        crop
    }
}

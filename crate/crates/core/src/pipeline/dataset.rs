//! Labelled image collections with class-disjoint base/val/novel splits.
//!
//! Two sources: a directory holding one sub-directory of `.ppm` files per
//! class, or a procedural generator of oriented gratings. Each synthetic class
//! is an (orientation, frequency) signature; colour, brightness, contrast,
//! phase and noise vary per image and carry no class information. Gratings are
//! oriented within `[0°, 90°]` so a horizontal flip never turns one class into
//! another.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use super::config::{EvalSplit, RunConfig};
use crate::error::{Error, Result};
use crate::image::Image;

pub type Split = EvalSplit;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub name: String,
    pub split: Split,
    /// File paths, or generated item names for synthetic data.
    pub items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<ClassInfo>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.classes.iter().filter(|c| c.split == split).count()
    }
}

/// A manifest plus the decoded images, `images[class][item]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<Vec<Image>>,
}

/// Parameters of the grating generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub splits: (usize, usize, usize),
    pub side: usize,
    pub channels: usize,
    pub seed: u64,
}

const ORIENTATIONS: usize = 5;
const NOISE_STD: f64 = 0.05;

fn split_of(index: usize, splits: (usize, usize, usize)) -> Split {
    if index < splits.0 {
        Split::Base
    } else if index < splits.0 + splits.1 {
        Split::Val
    } else {
        Split::Novel
    }
}

/// Orientation (radians) and cycles per image side of signature `i`.
fn signature(i: usize) -> (f64, f64) {
    let theta = (i % ORIENTATIONS) as f64 * (PI / 2.0) / (ORIENTATIONS - 1) as f64;
    let cycles = 2.0 + 1.75 * (i / ORIENTATIONS) as f64;
    (theta, cycles)
}

fn grating(theta: f64, cycles: f64, spec: &SyntheticSpec, rng: &mut impl Rng) -> Image {
    let side = spec.side as f64;
    let theta = theta + rng.random_range(-0.05..0.05);
    let freq = cycles * rng.random_range(0.95..1.05) / side;
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.7..1.0);
    let brightness = rng.random_range(0.0..0.15);
    let tint: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.85..1.0)).collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let (s, c) = theta.sin_cos();
    let mut data = Vec::with_capacity(spec.side * spec.side * spec.channels);
    for y in 0..spec.side {
        for x in 0..spec.side {
            let u = c * x as f64 + s * y as f64;
            let g = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
            for t in &tint {
                let v = t * (brightness + contrast * g) + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(spec.side, spec.side, spec.channels, data).expect("generator emits valid images")
}

fn to_channels(image: Image, channels: usize) -> Result<Image> {
    match (image.channels(), channels) {
        (a, b) if a == b => Ok(image),
        (3, 1) => {
            let data = image.data().chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
            Image::new(image.width(), image.height(), 1, data)
        }
        (1, 3) => {
            let data = image.data().iter().flat_map(|v| [*v, *v, *v]).collect();
            Image::new(image.width(), image.height(), 3, data)
        }
        (a, b) => Err(Error::InvalidArgument(format!("cannot convert {a}-channel images to {b} channels"))),
    }
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        let (b, v, n) = spec.splits;
        if b + v + n != spec.classes || spec.classes == 0 || spec.images_per_class == 0 {
            return Err(Error::Config(format!(
                "synthetic dataset of {} classes x {} images cannot be split {b}/{v}/{n}",
                spec.classes, spec.images_per_class
            )));
        }
        // Enough signatures for every class, shuffled so each split spans the
        // factor levels.
        let levels = spec.classes.div_ceil(ORIENTATIONS) + 1;
        let mut signatures: Vec<usize> = (0..levels * ORIENTATIONS).collect();
        signatures.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5157_4e41));
        let mut classes = Vec::with_capacity(spec.classes);
        let mut images = Vec::with_capacity(spec.classes);
        for (c, &sig) in signatures.iter().take(spec.classes).enumerate() {
            let (theta, cycles) = signature(sig);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c as u64);
            let imgs: Vec<Image> = (0..spec.images_per_class).map(|_| grating(theta, cycles, spec, &mut rng)).collect();
            classes.push(ClassInfo {
                name: format!("grating_{:03.0}deg_{:.2}c", theta.to_degrees(), cycles),
                split: split_of(c, spec.splits),
                items: (0..spec.images_per_class).map(|i| format!("synthetic/{c}/{i}")).collect(),
            });
            images.push(imgs);
        }
        Ok(Dataset {
            manifest: DatasetManifest { classes },
            images,
        })
    }

    /// Loads `root/<class>/*.ppm`; classes are sorted by name and split in
    /// that order.
    pub fn from_dir(root: &Path, splits: (usize, usize, usize), side: usize, channels: usize) -> Result<Self> {
        let read_dir = |p: &Path| std::fs::read_dir(p).map_err(|e| Error::io(p, e));
        let mut class_dirs: Vec<PathBuf> = Vec::new();
        for entry in read_dir(root)? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if entry.path().is_dir() {
                class_dirs.push(entry.path());
            }
        }
        class_dirs.sort();
        let total = splits.0 + splits.1 + splits.2;
        if class_dirs.len() != total {
            return Err(Error::Config(format!(
                "{} holds {} class directories but the splits ask for {total}",
                root.display(),
                class_dirs.len()
            )));
        }
        let mut classes = Vec::new();
        let mut images = Vec::new();
        for (c, dir) in class_dirs.iter().enumerate() {
            let mut files: Vec<PathBuf> = Vec::new();
            for entry in read_dir(dir)? {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
                    files.push(path);
                }
            }
            files.sort();
            if files.is_empty() {
                return Err(Error::InsufficientData(format!("class directory {} has no .ppm images", dir.display())));
            }
            let mut imgs = Vec::with_capacity(files.len());
            for f in &files {
                let img = Image::read_ppm(f)?.resize(side, side);
                imgs.push(to_channels(img, channels)?);
            }
            classes.push(ClassInfo {
                name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                split: split_of(c, splits),
                items: files.iter().map(|f| f.display().to_string()).collect(),
            });
            images.push(imgs);
        }
        Ok(Dataset {
            manifest: DatasetManifest { classes },
            images,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let splits = (cfg.split_base, cfg.split_val, cfg.split_novel);
        if cfg.dataset == "synthetic" {
            Dataset::synthetic(&SyntheticSpec {
                classes: cfg.synthetic_classes,
                images_per_class: cfg.synthetic_images_per_class,
                splits,
                side: cfg.image_side,
                channels: cfg.channels,
                seed: cfg.seed,
            })
        } else {
            Dataset::from_dir(Path::new(&cfg.dataset), splits, cfg.image_side, cfg.channels)
        }
    }

    /// Images of one split, labelled `0..count(split)` in class order.
    pub fn split(&self, split: Split) -> Vec<(&Image, usize)> {
        let mut out = Vec::new();
        let mut label = 0;
        for (info, imgs) in self.manifest.classes.iter().zip(&self.images) {
            if info.split == split {
                out.extend(imgs.iter().map(|i| (i, label)));
                label += 1;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 10,
            images_per_class: 40,
            splits: (6, 2, 2),
            side: 16,
            channels: 3,
            seed: 1,
        }
    }

    #[test]
    fn synthetic_counts() {
        let d = Dataset::synthetic(&spec()).unwrap();
        assert_eq!(d.manifest.classes.len(), 10);
        assert!(d.manifest.classes.iter().all(|c| c.items.len() == 40));
        assert_eq!(
            (d.manifest.count(Split::Base), d.manifest.count(Split::Val), d.manifest.count(Split::Novel)),
            (6, 2, 2)
        );
        let base = d.split(Split::Base);
        assert_eq!(base.len(), 240);
        assert_eq!(base.last().unwrap().1, 5);
        let names: std::collections::BTreeSet<_> = d.manifest.classes.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names.len(), 10);
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = Dataset::synthetic(&spec()).unwrap();
        let b = Dataset::synthetic(&spec()).unwrap();
        assert_eq!(a.images, b.images);
        assert!(a.images[0][0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bad_split_is_rejected() {
        let mut s = spec();
        s.splits = (6, 2, 1);
        assert!(Dataset::synthetic(&s).is_err());
    }

    #[test]
    fn directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (c, v) in [("alpha", 0.2), ("beta", 0.8)] {
            std::fs::create_dir(dir.path().join(c)).unwrap();
            for i in 0..3 {
                Image::filled(8, 8, &[v, v, v]).write_ppm(&dir.path().join(c).join(format!("{i}.ppm"))).unwrap();
            }
        }
        let d = Dataset::from_dir(dir.path(), (1, 0, 1), 4, 1).unwrap();
        assert_eq!(d.manifest.classes[0].name, "alpha");
        assert_eq!(d.manifest.classes[1].split, Split::Novel);
        let novel = d.split(Split::Novel);
        assert_eq!(novel.len(), 3);
        assert_eq!(novel[0].0.channels(), 1);
        assert_eq!(novel[0].0.width(), 4);

        let missing = Dataset::from_dir(&dir.path().join("nope"), (1, 0, 1), 4, 1).unwrap_err();
        assert!(missing.to_string().contains("nope"));
    }
}

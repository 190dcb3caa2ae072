//! Image collections, patch sampling and a synthetic image generator.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::degradation::{degrade, sample_spec_with, DegradationRanges, DegradedSample};
use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::rng;

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    names: Vec<String>,
}

impl Dataset {
    pub fn from_images(images: Vec<ImageTensor>) -> Self {
        let names = (0..images.len()).map(|i| format!("image{i:04}")).collect();
        Self { images, names }
    }

    /// Every `.png` in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(invalid(format!("no .png images in {}", dir.display())));
        }
        let mut out = Self::default();
        for p in paths {
            out.images.push(ImageTensor::read_png(&p)?);
            out.names.push(p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        }
        Ok(out)
    }

    /// `n` synthetic images of size `h x w`.
    pub fn synthetic(n: usize, h: usize, w: usize, seed: u64) -> Self {
        Self::from_images((0..n).map(|i| synthetic_image(h, w, rng::derive_seed(seed, i as u64))).collect())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn image(&self, i: usize) -> &ImageTensor {
        &self.images[i]
    }

    fn usable(&self, side: usize) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        let ok: Vec<usize> = (0..self.len())
            .filter(|&i| self.images[i].height() >= side && self.images[i].width() >= side)
            .collect();
        let skipped = self.len() - ok.len();
        if ok.is_empty() {
            return Err(invalid(format!("every image is smaller than the {side}x{side} HR patch")));
        }
        if skipped > 0 {
            log::warn!("skipping {skipped} image(s) smaller than {side}x{side}");
        }
        Ok(ok)
    }
}

/// One training item: the augmented HR patch and its degradation.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub hr: ImageTensor,
    pub dihedral: u8,
    pub sample: DegradedSample,
}

/// Patch sampling parameters, a subset of the training config.
#[derive(Clone, Copy, Debug)]
pub struct BatchSpec {
    pub batch: usize,
    pub lr_patch: usize,
    pub augment: bool,
    pub ranges: DegradationRanges,
}

/// Uniform image choice, random crop, uniform dihedral variant, fresh degradation.
pub fn sample_batch(data: &Dataset, spec: &BatchSpec, r: &mut impl Rng) -> Result<Vec<TrainItem>> {
    if spec.batch == 0 || spec.lr_patch == 0 {
        return Err(invalid("batch and lr_patch must be positive"));
    }
    let side = spec.lr_patch * spec.ranges.scale;
    let usable = data.usable(side)?;
    (0..spec.batch)
        .map(|_| {
            let img = &data.images[usable[r.gen_range(0..usable.len())]];
            let top = r.gen_range(0..=img.height() - side);
            let left = r.gen_range(0..=img.width() - side);
            let which = if spec.augment { r.gen_range(0..8u8) } else { 0 };
            let hr = img.crop(top, left, side, side)?.dihedral(which);
            let dspec = sample_spec_with(&spec.ranges, r)?;
            let sample = degrade(&hr, &dspec)?;
            Ok(TrainItem {
                hr,
                dihedral: which,
                sample,
            })
        })
        .collect()
}

/// Piecewise-smooth test image: a tilted colour gradient, a few flat-shaded
/// ellipses and rectangles with hard edges, and one oriented grating.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = rng::stream(seed, 0);
    let (hf, wf) = (h as f32, w as f32);
    let base: [f32; 3] = r.gen();
    let grad: [[f32; 2]; 3] = [r.gen(), r.gen(), r.gen()];
    let mut img = ImageTensor::from_fn(h, w, 3, |y, x, c| {
        0.2 + 0.4 * base[c] + 0.2 * (grad[c][0] - 0.5) * y as f32 / hf + 0.2 * (grad[c][1] - 0.5) * x as f32 / wf
    });

    for _ in 0..r.gen_range(3..7) {
        let colour: [f32; 3] = r.gen();
        let cy = r.gen_range(0.0..hf);
        let cx = r.gen_range(0.0..wf);
        let ry = r.gen_range(0.08..0.35) * hf;
        let rx = r.gen_range(0.08..0.35) * wf;
        let ellipse = r.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    let shade = 0.9 + 0.1 * dy;
                    for c in 0..3 {
                        img.set(y, x, c, colour[c] * shade);
                    }
                }
            }
        }
    }

    let angle = r.gen_range(0.0..std::f32::consts::PI);
    let period = r.gen_range(3.0..9.0);
    let amp = r.gen_range(0.05..0.15);
    let (sa, ca) = angle.sin_cos();
    let (y0, y1) = (r.gen_range(0..h / 2), r.gen_range(h / 2..h));
    for y in y0..y1 {
        for x in 0..w {
            let t = (y as f32 * sa + x as f32 * ca) * std::f32::consts::TAU / period;
            for c in 0..3 {
                let v = img.get(y, x, c) + amp * t.sin();
                img.set(y, x, c, v);
            }
        }
    }
    img.clamped()
}

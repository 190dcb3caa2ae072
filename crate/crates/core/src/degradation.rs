//! Synthetic degradation: `lr = clamp((hr * k) downsampled by s + n)`.
//!
//! Blur uses reflect padding; downsampling is antialiased cubic convolution
//! (`a = -0.5`) with per-pixel weight renormalization; noise is i.i.d.
//! Gaussian with standard deviation `sigma / 255` on `[0, 1]` images.

use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::ops::{self, ResamplePlan};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_KERNEL_SIZE: usize = 15;
pub const KERNEL_WIDTH_RANGE: (f64, f64) = (0.2, 3.0);
pub const NOISE_LEVEL_RANGE: (f64, f64) = (0.0, 75.0);

/// Square blur kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(invalid(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(invalid(format!("{} weights for a {size}x{size} kernel", weights.len())));
        }
        Ok(Self { size, weights })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        w[size * size / 2] = 1.0;
        Self::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let n = self.size;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[j * n + i] = self.weights[i * n + j];
            }
        }
        Self { size: n, weights: w }
    }

    pub fn rotate180(&self) -> Self {
        let mut w = self.weights.clone();
        w.reverse();
        Self { size: self.size, weights: w }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.weights.iter().map(|&v| v as f32).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_array(path, container::MAGIC_KERNEL, &[self.size, self.size], &self.to_f32())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = container::read_array(path, container::MAGIC_KERNEL)?;
        if dims.len() != 2 || dims[0] != dims[1] {
            return Err(invalid(format!("kernel dims {dims:?} are not square")));
        }
        Self::new(dims[0], data.into_iter().map(f64::from).collect())
    }
}

/// Signed per-pixel noise realization with the LR image's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap(ImageTensor);

impl NoiseMap {
    pub fn new(map: ImageTensor) -> Self {
        Self(map)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self(ImageTensor::zeros(height, width, channels))
    }

    pub fn into_inner(self) -> ImageTensor {
        self.0
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w, c) = self.0.dims();
        container::write_array(path, container::MAGIC_NOISE, &[h, w, c], self.0.data())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = container::read_array(path, container::MAGIC_NOISE)?;
        if dims.len() != 3 {
            return Err(invalid(format!("noise map dims {dims:?}, expected HxWxC")));
        }
        Ok(Self(ImageTensor::new(dims[0], dims[1], dims[2], data)?))
    }
}

impl Deref for NoiseMap {
    type Target = ImageTensor;

    fn deref(&self) -> &ImageTensor {
        &self.0
    }
}

/// Recipe for one degraded sample. `noise_level` is on the 0-255 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kernel_width: f64,
    pub noise_level: f64,
    pub scale: usize,
    pub seed: u64,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

fn default_kernel_size() -> usize {
    DEFAULT_KERNEL_SIZE
}

impl DegradationSpec {
    pub fn new(kernel_width: f64, noise_level: f64, scale: usize, seed: u64) -> Self {
        Self {
            kernel_width,
            noise_level,
            scale,
            seed,
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }

    pub fn with_kernel_size(mut self, size: usize) -> Self {
        self.kernel_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (klo, khi) = KERNEL_WIDTH_RANGE;
        if !(klo..=khi).contains(&self.kernel_width) {
            return Err(invalid(format!("kernel width {} outside [{klo}, {khi}]", self.kernel_width)));
        }
        let (nlo, nhi) = NOISE_LEVEL_RANGE;
        if !(nlo..=nhi).contains(&self.noise_level) {
            return Err(invalid(format!("noise level {} outside [{nlo}, {nhi}]", self.noise_level)));
        }
        check_scale(self.scale)?;
        if self.kernel_size % 2 == 0 {
            return Err(invalid(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }
}

pub fn check_scale(s: usize) -> Result<()> {
    if matches!(s, 2..=4) {
        Ok(())
    } else {
        Err(invalid(format!("scale must be 2, 3 or 4, got {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedSample {
    /// Clamped network input.
    pub lr: ImageTensor,
    /// The same image before clamping; `lr_preclamp = down(blur(hr)) + noise` exactly.
    pub lr_preclamp: ImageTensor,
    pub kernel_gt: BlurKernel,
    pub noise_map_gt: NoiseMap,
    pub spec: DegradationSpec,
    pub hr_ref: ImageTensor,
}

/// Ranges a training spec is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub kernel_width: (f64, f64),
    pub noise_level: (f64, f64),
    pub scale: usize,
    pub kernel_size: usize,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            kernel_width: KERNEL_WIDTH_RANGE,
            noise_level: NOISE_LEVEL_RANGE,
            scale: 4,
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }
}

impl DegradationRanges {
    /// Fixed degradation, both ranges collapsed to a point.
    pub fn fixed(kernel_width: f64, noise_level: f64, scale: usize) -> Self {
        Self {
            kernel_width: (kernel_width, kernel_width),
            noise_level: (noise_level, noise_level),
            scale,
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }

    pub fn noise_free(self) -> Self {
        Self {
            noise_level: (0.0, 0.0),
            ..self
        }
    }
}

/// Isotropic Gaussian on a `size x size` grid, normalized to sum 1.
pub fn gaussian_kernel(width: f64, size: usize) -> Result<BlurKernel> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(invalid(format!("kernel width must be positive, got {width}")));
    }
    if size % 2 == 0 {
        return Err(invalid(format!("kernel size must be odd, got {size}")));
    }
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (i, j) = ((idx / size) as f64 - c, (idx % size) as f64 - c);
            (-(i * i + j * j) / (2.0 * width * width)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    BlurKernel::new(size, w)
}

/// Per-channel correlation with reflect padding; output has the input shape.
pub fn blur(image: &ImageTensor, kernel: &BlurKernel) -> Result<ImageTensor> {
    let k = kernel.size();
    if k > image.height() || k > image.width() {
        return Err(invalid(format!(
            "{k}x{k} kernel larger than {}x{} image",
            image.height(),
            image.width()
        )));
    }
    let out = ops::blur(&image.to_chw::<f32>(), &kernel.to_f32(), k);
    Ok(ImageTensor::from_chw(&out))
}

pub fn bicubic_plan(height: usize, width: usize, s: usize) -> Result<ResamplePlan> {
    if s == 0 || height % s != 0 || width % s != 0 {
        return Err(invalid(format!("{height}x{width} not divisible by scale {s}; crop first")));
    }
    Ok(ResamplePlan::cubic(height, width, height / s, width / s))
}

pub fn bicubic_downsample(image: &ImageTensor, s: usize) -> Result<ImageTensor> {
    let plan = bicubic_plan(image.height(), image.width(), s)?;
    Ok(ImageTensor::from_chw(&plan.apply(&image.to_chw::<f32>())))
}

/// Cubic upscaling by `s`; the baseline every model is compared against.
pub fn bicubic_upsample(image: &ImageTensor, s: usize) -> Result<ImageTensor> {
    if s == 0 {
        return Err(invalid("scale must be positive"));
    }
    let (h, w, _) = image.dims();
    let plan = ResamplePlan::cubic(h, w, h * s, w * s);
    Ok(ImageTensor::from_chw(&plan.apply(&image.to_chw::<f32>())))
}

/// Returns `(clamp(image + n), n)` with `n ~ N(0, (sigma/255)^2)` drawn from
/// a generator seeded with `seed`, in row-major pixel, channel order.
pub fn add_awgn(image: &ImageTensor, sigma: f64, seed: u64) -> Result<(ImageTensor, NoiseMap)> {
    let (noisy, noise) = add_awgn_unclamped(image, sigma, seed)?;
    Ok((noisy.clamped(), noise))
}

fn add_awgn_unclamped(image: &ImageTensor, sigma: f64, seed: u64) -> Result<(ImageTensor, NoiseMap)> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let (h, w, c) = image.dims();
    let mut noise = ImageTensor::zeros(h, w, c);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma / 255.0).expect("positive std");
        let mut rng = rng::stream(seed, 0);
        for v in noise.data_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    let mut out = image.clone();
    for (o, &n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += n;
    }
    Ok((out, NoiseMap(noise)))
}

/// Blur, downsample, add noise, clamp. `hr` sides must be multiples of the scale.
pub fn degrade(hr: &ImageTensor, spec: &DegradationSpec) -> Result<DegradedSample> {
    spec.validate()?;
    let kernel = gaussian_kernel(spec.kernel_width, spec.kernel_size)?;
    degrade_with_kernel(hr, kernel, spec)
}

/// [`degrade`] with an explicit kernel in place of the Gaussian of `spec`.
pub fn degrade_with_kernel(hr: &ImageTensor, kernel: BlurKernel, spec: &DegradationSpec) -> Result<DegradedSample> {
    check_scale(spec.scale)?;
    let plan = bicubic_plan(hr.height(), hr.width(), spec.scale)?;
    let blurred = blur(hr, &kernel)?;
    let down = ImageTensor::from_chw(&plan.apply(&blurred.to_chw::<f32>()));
    let (lr_preclamp, noise) = add_awgn_unclamped(&down, spec.noise_level, spec.seed)?;
    Ok(DegradedSample {
        lr: lr_preclamp.clamped(),
        lr_preclamp,
        kernel_gt: kernel,
        noise_map_gt: noise,
        spec: *spec,
        hr_ref: hr.clone(),
    })
}

/// Draws a spec: kernel width and noise level uniform over their ranges.
pub fn sample_spec(ranges: &DegradationRanges, seed: u64) -> Result<DegradationSpec> {
    let mut r = rng::stream(seed, 1);
    sample_spec_with(ranges, &mut r)
}

pub fn sample_spec_with(ranges: &DegradationRanges, r: &mut impl Rng) -> Result<DegradationSpec> {
    let (klo, khi) = ranges.kernel_width;
    let (nlo, nhi) = ranges.noise_level;
    if !(klo <= khi) || !(nlo <= nhi) {
        return Err(invalid(format!(
            "empty degradation range: width [{klo}, {khi}], noise [{nlo}, {nhi}]"
        )));
    }
    if klo <= 0.0 || nlo < 0.0 {
        return Err(invalid("kernel width must be positive and noise non-negative"));
    }
    check_scale(ranges.scale)?;
    let kernel_width = if klo == khi { klo } else { r.gen_range(klo..=khi) };
    let noise_level = if nlo == nhi { nlo } else { r.gen_range(nlo..=nhi) };
    Ok(DegradationSpec {
        kernel_width,
        noise_level,
        scale: ranges.scale,
        seed: r.gen(),
        kernel_size: ranges.kernel_size,
    })
}

/// `hr` in CHW layout, for callers that already hold tensors.
pub fn blur_downsample_chw(hr: &Tensor<f32>, kernel: &BlurKernel, s: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = hr.chw();
    let plan = bicubic_plan(h, w, s)?;
    Ok(plan.apply(&ops::blur(hr, &kernel.to_f32(), kernel.size())))
}

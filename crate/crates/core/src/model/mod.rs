//! The restoration network: degradation extractor, meta-denoise module,
//! residual-group backbone and meta-deblur module with dynamic convolution.

mod config;
pub mod network;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

pub use config::{MnmMode, ModelConfig};

use crate::autograd::{Ctx, Eval};
use crate::degradation::{BlurKernel, NoiseMap, KERNEL_WIDTH_RANGE};
use crate::error::{shape, Result};
use crate::image::ImageTensor;
use crate::kernel_space::{build_kernel_pool, compute_pca, PcaProjection, DEFAULT_POOL_SIZE};
use crate::ops;
use crate::params::{component_of, Init, ParameterSet};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Channel-first `[C, H, W]` activations.
pub type FeatureMap = Tensor<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorOutput {
    pub noise_map_est: NoiseMap,
    /// Softmax output reshaped to `k x k`.
    pub kernel_est: BlurKernel,
}

/// Per-pixel `k x k` kernels, stored `[k*k, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    kernel_size: usize,
    tensor: Tensor<f32>,
}

impl WeightField {
    pub fn new(kernel_size: usize, tensor: Tensor<f32>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != kernel_size * kernel_size {
            return Err(shape(format!(
                "weight field {:?} for {kernel_size}x{kernel_size} kernels",
                tensor.shape()
            )));
        }
        Ok(Self { kernel_size, tensor })
    }

    /// Every pixel gets the same kernel.
    pub fn uniform(kernel: &[f32], kernel_size: usize, height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(kernel.len() * height * width);
        for &v in kernel {
            data.extend(std::iter::repeat(v).take(height * width));
        }
        Self::new(kernel_size, Tensor::from_vec(&[kernel.len(), height, width], data))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

/// Spatially varying convolution: every pixel's kernel is applied to all
/// channels with zero padding.
pub fn dynamic_conv(image: &ImageTensor, weights: &WeightField) -> Result<ImageTensor> {
    if weights.dims() != (image.height(), image.width()) {
        return Err(shape(format!(
            "weight field {:?} for a {}x{} image",
            weights.dims(),
            image.height(),
            image.width()
        )));
    }
    let out = ops::dynamic_conv(&image.to_chw::<f32>(), weights.tensor(), weights.kernel_size());
    Ok(ImageTensor::from_chw(&out))
}

fn conv_shape(co: usize, ci: usize, k: usize) -> [usize; 4] {
    [co, ci, k, k]
}

/// Parameter names, shapes and initializers of a configuration.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let k = cfg.kernel_size;
    let conv = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, co: usize, ci: usize, k: usize, winit: Init, binit: Init| {
        out.push((format!("{name}.weight"), conv_shape(co, ci, k).to_vec(), winit));
        out.push((format!("{name}.bias"), vec![co], binit));
    };
    let he = Init::KaimingNormal { gain: 1.0 };
    let small = Init::KaimingNormal { gain: 0.1 };
    let e = cfg.extractor_channels;
    let kd = cfg.kernel_dim();
    conv(&mut out, "extractor.head", e, 3, k, he.clone(), Init::Zeros);
    for r in 0..2 {
        conv(&mut out, &format!("extractor.res{r}.conv1"), e, e, k, he.clone(), Init::Zeros);
        conv(&mut out, &format!("extractor.res{r}.conv2"), e, e, k, small.clone(), Init::Zeros);
    }
    conv(&mut out, "extractor.noise", 3, e, k, he.clone(), Init::Zeros);
    conv(&mut out, "extractor.kernel1", 2 * e, e, k, he.clone(), Init::Zeros);
    conv(&mut out, "extractor.kernel2", kd, 2 * e, k, he.clone(), Init::Zeros);

    let c = cfg.channels;
    let red = c / cfg.ca_reduction;
    conv(&mut out, "sr.mnm", c, 6, cfg.mnm_kernel_size, he.clone(), Init::Zeros);
    conv(&mut out, "sr.head", c, c, k, he.clone(), Init::Zeros);
    for g in 0..cfg.n_groups {
        for r in 0..cfg.n_rcab_per_group {
            let n = format!("sr.group{g}.rcab{r}");
            conv(&mut out, &format!("{n}.conv1"), c, c, k, he.clone(), Init::Zeros);
            conv(&mut out, &format!("{n}.conv2"), c, c, k, small.clone(), Init::Zeros);
            out.push((format!("{n}.ca_down.weight"), vec![red, c], he.clone()));
            out.push((format!("{n}.ca_down.bias"), vec![red], Init::Zeros));
            out.push((format!("{n}.ca_up.weight"), vec![c, red], he.clone()));
            out.push((format!("{n}.ca_up.bias"), vec![c], Init::Zeros));
        }
        conv(&mut out, &format!("sr.group{g}.tail"), c, c, k, he.clone(), Init::Zeros);
    }
    conv(&mut out, "sr.trunk", c, c, k, he.clone(), Init::Zeros);
    for (i, r) in cfg.upsample_stages().into_iter().enumerate() {
        conv(&mut out, &format!("sr.up{i}"), c * r * r, c, k, he.clone(), Init::Zeros);
    }
    conv(&mut out, "sr.tail", 3, c, k, he.clone(), Init::Zeros);
    for m in 0..cfg.n_mbm {
        out.push((format!("sr.mbm{m}.embed.weight"), vec![cfg.embed_dim, kd], Init::Pca));
        conv(&mut out, &format!("sr.mbm{m}.field"), kd, 3 + cfg.embed_dim, k, small.clone(), Init::CenteredDelta);
        conv(&mut out, &format!("sr.mbm{m}.out"), 3, 3, k, Init::Identity, Init::Zeros);
    }
    out
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

/// Fresh parameters for `cfg`; the deblur embedding copies `pca`.
pub fn init_parameters(cfg: &ModelConfig, pca: &PcaProjection, seed: u64) -> Result<ParameterSet<f32>> {
    cfg.validate()?;
    if (pca.dim(), pca.input_dim()) != (cfg.embed_dim, cfg.kernel_dim()) {
        return Err(shape(format!(
            "projection is {}x{}, model needs {}x{}",
            pca.dim(),
            pca.input_dim(),
            cfg.embed_dim,
            cfg.kernel_dim()
        )));
    }
    let mut params = ParameterSet::new();
    for (i, (name, shape, init)) in parameter_layout(cfg).into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match &init {
            Init::KaimingNormal { gain } => {
                let std = gain * (2.0 / fan_in(&shape) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut r = rng::stream(seed, i as u64);
                (0..n).map(|_| normal.sample(&mut r) as f32).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Pca => pca.to_f32(),
            Init::Identity => {
                let (co, ci, k) = (shape[0], shape[1], shape[2]);
                let mut d = vec![0.0; n];
                for o in 0..co.min(ci) {
                    d[((o * ci + o) * k + k / 2) * k + k / 2] = 1.0;
                }
                d
            }
            Init::CenteredDelta => {
                let mut d = vec![0.0; n];
                d[n / 2] = 1.0;
                d
            }
        };
        params.insert(name, Tensor::from_vec(&shape, data), init);
    }
    Ok(params)
}

/// Default kernel-space projection for a configuration: a pool of
/// 10,000 Gaussians over the training width range.
pub fn default_projection(cfg: &ModelConfig, seed: u64) -> Result<PcaProjection> {
    let pool = build_kernel_pool(DEFAULT_POOL_SIZE, KERNEL_WIDTH_RANGE, cfg.blur_kernel_size, seed)?;
    compute_pca(&pool, cfg.embed_dim)
}

/// Learnable scalars per component (`extractor`, `sr`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterCounts {
    pub per_component: IndexMap<String, usize>,
}

impl ParameterCounts {
    pub fn component(&self, name: &str) -> usize {
        self.per_component.get(name).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.per_component.values().sum()
    }
}

pub fn count_parameters<T: Real>(params: &ParameterSet<T>) -> ParameterCounts {
    let mut counts = ParameterCounts::default();
    for (name, e) in params.iter() {
        *counts.per_component.entry(component_of(name).to_string()).or_insert(0) += e.tensor.len();
    }
    counts
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Dmsr {
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
}

impl Dmsr {
    pub fn new(config: ModelConfig, pca: &PcaProjection, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, pca, seed)?;
        Ok(Self { config, params })
    }

    fn check_rgb(&self, img: &ImageTensor) -> Result<()> {
        if img.channels() != 3 {
            return Err(crate::error::invalid(format!("expected 3 channels, got {}", img.channels())));
        }
        Ok(())
    }

    fn kernel_tensor(&self, kernel: &BlurKernel) -> Result<Tensor<f32>> {
        if kernel.size() != self.config.blur_kernel_size {
            return Err(crate::error::invalid(format!(
                "{0}x{0} kernel for a model with {1}x{1} kernels",
                kernel.size(),
                self.config.blur_kernel_size
            )));
        }
        Ok(Tensor::from_vec(&[kernel.size() * kernel.size()], kernel.to_f32()))
    }

    pub fn extractor_forward(&self, lr: &ImageTensor) -> Result<ExtractorOutput> {
        self.check_rgb(lr)?;
        let mut ctx = Eval::new(&self.params);
        let x = ctx.constant(lr.to_chw());
        let (n, k) = network::extractor(&mut ctx, &self.config, &x);
        Ok(self.extractor_output(ctx.value(&n), ctx.value(&k)))
    }

    fn extractor_output(&self, n: &Tensor<f32>, k: &Tensor<f32>) -> ExtractorOutput {
        let ks = self.config.blur_kernel_size;
        ExtractorOutput {
            noise_map_est: NoiseMap::new(ImageTensor::from_chw(n)),
            kernel_est: BlurKernel::new(ks, k.data().iter().map(|&v| v as f64).collect()).expect("kernel size from config"),
        }
    }

    /// Broadcast a scalar noise level into a constant map shaped like `lr`.
    pub fn constant_noise_map(lr: &ImageTensor, level: f32) -> NoiseMap {
        NoiseMap::new(ImageTensor::filled(lr.height(), lr.width(), 3, level))
    }

    pub fn mnm_forward(&self, lr: &ImageTensor, noise_map: &NoiseMap) -> Result<FeatureMap> {
        self.check_rgb(lr)?;
        if noise_map.dims() != lr.dims() {
            return Err(shape(format!("noise map {:?} vs image {:?}", noise_map.dims(), lr.dims())));
        }
        let mut ctx = Eval::new(&self.params);
        let x = ctx.constant(lr.to_chw());
        let n = ctx.constant(noise_map.to_chw());
        let f = network::mnm(&mut ctx, &x, &n);
        Ok(ctx.value(&f).clone())
    }

    /// Residual groups and upsampler; `features` must have `channels` planes.
    pub fn backbone_forward(&self, features: &FeatureMap) -> Result<ImageTensor> {
        if features.shape().len() != 3 || features.shape()[0] != self.config.channels {
            return Err(shape(format!("features {:?}, expected {} channels", features.shape(), self.config.channels)));
        }
        let mut ctx = Eval::new(&self.params);
        let x = ctx.constant(features.clone());
        let y = network::backbone(&mut ctx, &self.config, &x);
        Ok(ImageTensor::from_chw(ctx.value(&y)))
    }

    /// Weight field of deblur module `idx`.
    pub fn weight_field(&self, idx: usize, coarse: &ImageTensor, kernel_est: &BlurKernel) -> Result<WeightField> {
        self.check_rgb(coarse)?;
        let kt = self.kernel_tensor(kernel_est)?;
        let mut ctx = Eval::new(&self.params);
        let x = ctx.constant(coarse.to_chw());
        let k = ctx.constant(kt);
        let f = network::weight_field(&mut ctx, idx, &x, &k);
        WeightField::new(self.config.blur_kernel_size, ctx.value(&f).clone())
    }

    /// One deblur module. The kernel is used as given; no renormalization.
    pub fn mbm_forward(&self, idx: usize, coarse: &ImageTensor, kernel_est: &BlurKernel) -> Result<ImageTensor> {
        self.check_rgb(coarse)?;
        if idx >= self.config.n_mbm {
            return Err(crate::error::invalid(format!("model has {} deblur modules", self.config.n_mbm)));
        }
        let kt = self.kernel_tensor(kernel_est)?;
        let mut ctx = Eval::new(&self.params);
        let x = ctx.constant(coarse.to_chw());
        let k = ctx.constant(kt);
        let y = network::mbm(&mut ctx, &self.config, idx, &x, &k);
        Ok(ImageTensor::from_chw(ctx.value(&y)))
    }

    /// Kernel embedding of deblur module `idx`.
    pub fn embed_kernel(&self, idx: usize, kernel: &[f32]) -> Result<Vec<f32>> {
        let w = self.params.require(&format!("sr.mbm{idx}.embed.weight"))?;
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if kernel.len() != n {
            return Err(shape(format!("{}-vector for a {n}-input embedding", kernel.len())));
        }
        Ok((0..m)
            .map(|i| w.data()[i * n..(i + 1) * n].iter().zip(kernel).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Full network. The SR image is left unclamped.
    pub fn forward(&self, lr: &ImageTensor) -> Result<(ImageTensor, ExtractorOutput)> {
        self.check_rgb(lr)?;
        let mut ctx = Eval::new(&self.params);
        let x = ctx.constant(lr.to_chw());
        let (sr, n, k) = network::forward(&mut ctx, &self.config, &x);
        Ok((ImageTensor::from_chw(ctx.value(&sr)), self.extractor_output(ctx.value(&n), ctx.value(&k))))
    }

    /// Display-ready output clamped to `[0, 1]`.
    pub fn infer(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.forward(lr)?.0.clamped())
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        count_parameters(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(scale: usize) -> Dmsr {
        let cfg = ModelConfig::tiny(scale);
        let pca = default_projection(&cfg, 0).unwrap();
        Dmsr::new(cfg, &pca, 1).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, 3, |_, _, _| r.gen())
    }

    #[test]
    fn single_conv_count() {
        let mut p = ParameterSet::<f32>::new();
        assert_eq!(count_parameters(&p).total(), 0);
        p.insert("x.head.weight", Tensor::zeros(&[64, 3, 3, 3]), Init::Zeros);
        p.insert("x.head.bias", Tensor::zeros(&[64]), Init::Zeros);
        assert_eq!(count_parameters(&p).total(), 1792);
    }

    #[test]
    fn extractor_shapes_and_simplex() {
        let m = tiny(2);
        let out = m.extractor_forward(&random_image(12, 10, 3)).unwrap();
        assert_eq!(out.noise_map_est.dims(), (12, 10, 3));
        assert_eq!(out.kernel_est.size(), 5);
        assert!((out.kernel_est.sum() - 1.0).abs() < 1e-6);
        assert!(out.kernel_est.weights().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_shapes_for_every_scale() {
        for s in 2..=4 {
            let m = tiny(s);
            for (h, w) in [(7, 9), (8, 8)] {
                let (sr, _) = m.forward(&random_image(h, w, s as u64)).unwrap();
                assert_eq!(sr.dims(), (s * h, s * w, 3));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = tiny(3);
        let b = tiny(3);
        let lr = random_image(6, 6, 0);
        assert_eq!(a.forward(&lr).unwrap(), b.forward(&lr).unwrap());
    }

    #[test]
    fn scalar_mode_equals_constant_map() {
        let mut m = tiny(2);
        m.config.mnm_mode = MnmMode::NoiseScalar;
        let lr = random_image(8, 8, 4);
        let est = m.extractor_forward(&lr).unwrap();
        let first = est.noise_map_est.data()[0];
        assert!(est.noise_map_est.data().iter().all(|&v| v == first));
        let a = m.mnm_forward(&lr, &est.noise_map_est).unwrap();
        let b = m.mnm_forward(&lr, &Dmsr::constant_noise_map(&lr, first)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mnm_locality() {
        let mut m = tiny(2);
        m.params.get_mut("sr.mnm.bias").unwrap().data_mut().fill(0.0);
        let lr = random_image(10, 10, 1);
        let n0 = NoiseMap::zeros(10, 10, 3);
        let base = m.mnm_forward(&lr, &n0).unwrap();
        assert_eq!(base.shape(), &[8, 10, 10]);
        let mut bumped = n0.clone().into_inner();
        bumped.set(5, 5, 1, 0.5);
        let moved = m.mnm_forward(&lr, &NoiseMap::new(bumped)).unwrap();
        for c in 0..8 {
            for y in 0..10 {
                for x in 0..10 {
                    let i = (c * 10 + y) * 10 + x;
                    let near = (y as usize).abs_diff(5) <= 1 && (x as usize).abs_diff(5) <= 1;
                    if !near {
                        assert_eq!(base.data()[i], moved.data()[i]);
                    }
                }
            }
        }
        // Zero noise map and zero bias: only the image half of the concat matters.
        let lr_only = {
            let mut p = m.params.clone();
            let w = p.get_mut("sr.mnm.weight").unwrap();
            let k = 3 * 3;
            for o in 0..8 {
                w.data_mut()[(o * 6 + 3) * k..(o * 6 + 6) * k].fill(0.0);
            }
            Dmsr { config: m.config.clone(), params: p }.mnm_forward(&lr, &n0).unwrap()
        };
        assert_eq!(lr_only, base);
    }

    #[test]
    fn channel_gate_is_in_unit_interval() {
        let m = tiny(2);
        let mut ctx = Eval::new(&m.params);
        let x = ctx.constant(random_image(6, 6, 2).to_chw::<f32>());
        let feats = {
            let w = ctx.constant(Tensor::full(&[8, 3, 1, 1], 3.0));
            ctx.conv2d(&x, &w, None)
        };
        let g = network::channel_attention(&mut ctx, &feats, "sr.group0.rcab0");
        assert!(ctx.value(&g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_residual_paths_reduce_group_to_tail() {
        let mut m = tiny(2);
        for (name, e) in m.params.iter_mut() {
            if name.contains(".rcab") && name.contains("conv2") {
                e.tensor.data_mut().fill(0.0);
            }
        }
        let f = random_image(6, 6, 8).to_chw::<f32>();
        let feats = {
            let mut ctx = Eval::new(&m.params);
            let x = ctx.constant(f.clone());
            let w = ctx.param("sr.mnm.weight");
            let b = ctx.param("sr.mnm.bias");
            let cat = ctx.concat(&[&x, &x]);
            let y = ctx.conv2d(&cat, &w, Some(&b));
            ctx.value(&y).clone()
        };
        let mut ctx = Eval::new(&m.params);
        let x = ctx.constant(feats);
        let head = {
            let w = ctx.param("sr.head.weight");
            let b = ctx.param("sr.head.bias");
            ctx.conv2d(&x, &w, Some(&b))
        };
        // Group output computed by hand: head + tail(head).
        let tail = {
            let w = ctx.param("sr.group0.tail.weight");
            let b = ctx.param("sr.group0.tail.bias");
            ctx.conv2d(&head, &w, Some(&b))
        };
        let by_hand = ctx.add(&head, &tail);
        let mut y = head.clone();
        for r in 0..2 {
            let name = format!("sr.group0.rcab{r}");
            let a = {
                let w = ctx.param(&format!("{name}.conv1.weight"));
                let b = ctx.param(&format!("{name}.conv1.bias"));
                let t = ctx.conv2d(&y, &w, Some(&b));
                ctx.relu(&t)
            };
            let w = ctx.param(&format!("{name}.conv2.weight"));
            let b = ctx.param(&format!("{name}.conv2.bias"));
            let z = ctx.conv2d(&a, &w, Some(&b));
            let gate = network::channel_attention(&mut ctx, &z, &name);
            let att = ctx.scale_channels(&z, &gate);
            y = ctx.add(&y, &att);
        }
        assert_eq!(ctx.value(&y), ctx.value(&head));
        let t2 = {
            let w = ctx.param("sr.group0.tail.weight");
            let b = ctx.param("sr.group0.tail.bias");
            ctx.conv2d(&y, &w, Some(&b))
        };
        let via_blocks = ctx.add(&head, &t2);
        assert_eq!(ctx.value(&via_blocks), ctx.value(&by_hand));
    }

    #[test]
    fn dynamic_conv_identity_and_box() {
        let img = random_image(9, 11, 5);
        let mut delta = vec![0.0f32; 225];
        delta[112] = 1.0;
        let wf = WeightField::uniform(&delta, 15, 9, 11).unwrap();
        assert_eq!(dynamic_conv(&img, &wf).unwrap(), img);
        let bad = WeightField::uniform(&delta, 15, 9, 10).unwrap();
        assert!(dynamic_conv(&img, &bad).is_err());
    }

    #[test]
    fn mbm_conditioning_and_linear_embedding() {
        let m = tiny(2);
        let coarse = random_image(8, 8, 6);
        let k1 = crate::degradation::gaussian_kernel(0.6, 5).unwrap();
        let k2 = crate::degradation::gaussian_kernel(2.4, 5).unwrap();
        let f1 = m.weight_field(0, &coarse, &k1).unwrap();
        let f2 = m.weight_field(0, &coarse, &k2).unwrap();
        assert!(f1.tensor().max_abs_diff(f2.tensor()) > 0.0);
        assert_eq!(m.mbm_forward(0, &coarse, &k1).unwrap().dims(), coarse.dims());

        let e1 = m.embed_kernel(0, &k1.to_f32()).unwrap();
        let scaled: Vec<f32> = k1.to_f32().iter().map(|v| v * 2.5).collect();
        let e2 = m.embed_kernel(0, &scaled).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a * 2.5 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_shape_must_match() {
        let cfg = ModelConfig::tiny(2);
        let wrong = default_projection(&ModelConfig { embed_dim: 4, ..cfg.clone() }, 0).unwrap();
        assert!(Dmsr::new(cfg, &wrong, 0).is_err());
    }

    #[test]
    fn full_config_counts() {
        let cfg = ModelConfig::full(2);
        let counts: usize = parameter_layout(&cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        assert_eq!(counts, 484_516 + 7_895_193);
    }
}

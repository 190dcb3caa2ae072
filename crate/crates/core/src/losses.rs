//! Reconstruction, degradation-reconstruction and degradation-consistency
//! losses. Every squared-norm term is a mean over elements.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Ctx;
use crate::degradation::{bicubic_plan, BlurKernel, NoiseMap};
use crate::error::{invalid, shape, Error, Result};
use crate::image::ImageTensor;
use crate::model::{network, ExtractorOutput, ModelConfig};
use crate::ops::{self, ResamplePlan};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub re: f64,
    pub dr: f64,
    pub dc: f64,
    /// Include `dc_lr` in the consistency term.
    pub dc_lr: bool,
    /// Include `dc_noise` and `dc_kernel` in the consistency term.
    pub dc_kernel_noise: bool,
    /// Treat the first-pass estimates as constants in `dc_noise`/`dc_kernel`.
    pub stop_grad_estimates: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            re: 1.0,
            dr: 10.0,
            dc: 1.0,
            dc_lr: true,
            dc_kernel_noise: true,
            stop_grad_estimates: false,
        }
    }
}

/// Rows of the loss ablation: which supervision of the extractor is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossAblation {
    ReconstructionOnly,
    WithDr,
    WithDrDcLr,
    Full,
}

impl LossWeights {
    pub fn ablation(row: LossAblation) -> Self {
        let full = Self::default();
        match row {
            LossAblation::ReconstructionOnly => Self { dr: 0.0, dc: 0.0, ..full },
            LossAblation::WithDr => Self { dc: 0.0, ..full },
            LossAblation::WithDrDcLr => Self {
                dc_kernel_noise: false,
                ..full
            },
            LossAblation::Full => full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.re, self.dr, self.dc].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }

    fn dc_active(&self) -> bool {
        self.dc > 0.0 && (self.dc_lr || self.dc_kernel_noise)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub re: f64,
    pub dr: f64,
    pub dc_lr: f64,
    pub dc_kernel: f64,
    pub dc_noise: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of already-computed parts; a non-finite part is an error
    /// naming the term.
    pub fn combine(re: f64, dr: f64, dc_lr: f64, dc_kernel: f64, dc_noise: f64, w: &LossWeights, iteration: u64) -> Result<Self> {
        for (term, v) in [("re", re), ("dr", dr), ("dc_lr", dc_lr), ("dc_kernel", dc_kernel), ("dc_noise", dc_noise)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term, iteration });
            }
        }
        Ok(Self {
            re,
            dr,
            dc_lr,
            dc_kernel,
            dc_noise,
            total: w.re * re + w.dr * dr + w.dc * (dc_lr + dc_kernel + dc_noise),
        })
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        self.re += s * other.re;
        self.dr += s * other.dr;
        self.dc_lr += s * other.dc_lr;
        self.dc_kernel += s * other.dc_kernel;
        self.dc_noise += s * other.dc_noise;
        self.total += s * other.total;
    }

    pub const CSV_HEADER: &'static str = "iteration,re,dr,dc_lr,dc_noise,dc_kernel,total,lr_rate";

    pub fn csv_row(&self, iteration: u64, lr_rate: f64) -> String {
        format!(
            "{iteration},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:e}",
            self.re, self.dr, self.dc_lr, self.dc_noise, self.dc_kernel, self.total, lr_rate
        )
    }
}

/// Weighted sum of the parts (`total` of the input is ignored).
pub fn overall_loss(parts: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    Ok(LossBreakdown::combine(parts.re, parts.dr, parts.dc_lr, parts.dc_kernel, parts.dc_noise, w, 0)?.total)
}

fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
}

fn mean_sq(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.zip(b) {
        s += (x - y) * (x - y);
        n += 1;
    }
    s / n as f64
}

/// Mean absolute error over `C*H*W`.
pub fn reconstruction_loss(sr: &ImageTensor, hr: &ImageTensor) -> Result<f64> {
    if !sr.same_shape(hr) {
        return Err(shape(format!("sr {:?} vs hr {:?}", sr.dims(), hr.dims())));
    }
    Ok(mean_abs(sr.data(), hr.data()))
}

pub fn degradation_reconstruction_loss(n_est: &NoiseMap, k_est: &BlurKernel, n_gt: &NoiseMap, k_gt: &BlurKernel) -> Result<f64> {
    if n_est.dims() != n_gt.dims() || k_est.size() != k_gt.size() {
        return Err(shape("estimated and ground-truth degradations differ in shape"));
    }
    let n = mean_sq(n_est.data().iter().map(|&v| v as f64), n_gt.data().iter().map(|&v| v as f64));
    let k = mean_sq(k_est.weights().iter().copied(), k_gt.weights().iter().copied());
    Ok(n + k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyTerms {
    pub dc_lr: f64,
    pub dc_noise: f64,
    pub dc_kernel: f64,
}

/// Re-degrades `hr` with the estimates, compares against `lr`, and re-runs
/// `extractor` on the simulated image. Forward only.
pub fn degradation_consistency_loss(
    hr: &ImageTensor,
    lr: &ImageTensor,
    k_est: &BlurKernel,
    n_est: &NoiseMap,
    extractor: impl Fn(&ImageTensor) -> Result<ExtractorOutput>,
    s: usize,
) -> Result<ConsistencyTerms> {
    let plan = bicubic_plan(hr.height(), hr.width(), s)?;
    if n_est.dims() != lr.dims() || (lr.height(), lr.width()) != (hr.height() / s, hr.width() / s) {
        return Err(shape("noise map, lr and hr/s must share a shape"));
    }
    let down = plan.apply(&ops::blur(&hr.to_chw::<f32>(), &k_est.to_f32(), k_est.size()));
    let mut sim = ImageTensor::from_chw(&down);
    for (v, &n) in sim.data_mut().iter_mut().zip(n_est.data()) {
        *v += n;
    }
    let again = extractor(&sim)?;
    Ok(ConsistencyTerms {
        dc_lr: mean_sq(sim.data().iter().map(|&v| v as f64), lr.data().iter().map(|&v| v as f64)),
        dc_noise: mean_sq(
            again.noise_map_est.data().iter().map(|&v| v as f64),
            n_est.data().iter().map(|&v| v as f64),
        ),
        dc_kernel: mean_sq(again.kernel_est.weights().iter().copied(), k_est.weights().iter().copied()),
    })
}

// ---------------------------------------------------------------------------
// Differentiable versions

/// Anything that maps an LR image to `(noise map, flattened kernel)` inside a context.
pub trait DegradationEstimator<T: Real, C: Ctx<T>> {
    fn estimate(&self, ctx: &mut C, lr: &C::Var) -> (C::Var, C::Var);
}

impl<T: Real, C: Ctx<T>> DegradationEstimator<T, C> for ModelConfig {
    fn estimate(&self, ctx: &mut C, lr: &C::Var) -> (C::Var, C::Var) {
        network::extractor(ctx, self, lr)
    }
}

/// Consistency terms as graph nodes. Disabled terms are `None`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_terms<T: Real, C: Ctx<T>, E: DegradationEstimator<T, C>>(
    ctx: &mut C,
    hr: &C::Var,
    lr_target: &C::Var,
    k_est: &C::Var,
    n_est: &C::Var,
    estimator: &E,
    kernel_size: usize,
    plan: Arc<ResamplePlan>,
    w: &LossWeights,
) -> (Option<C::Var>, Option<C::Var>, Option<C::Var>) {
    let blurred = ctx.blur(hr, k_est, kernel_size);
    let down = ctx.resample(&blurred, plan);
    let sim = ctx.add(&down, n_est);
    let dc_lr = w.dc_lr.then(|| ctx.mse_mean(&sim, lr_target));
    if !w.dc_kernel_noise {
        return (dc_lr, None, None);
    }
    let (n_sim, k_sim) = estimator.estimate(ctx, &sim);
    let (n_ref, k_ref) = if w.stop_grad_estimates {
        (ctx.detach(n_est), ctx.detach(k_est))
    } else {
        (n_est.clone(), k_est.clone())
    };
    let dc_noise = ctx.mse_mean(&n_sim, &n_ref);
    let dc_kernel = ctx.mse_mean(&k_sim, &k_ref);
    (dc_lr, Some(dc_noise), Some(dc_kernel))
}

/// One training example in network layout (`[C,H,W]`, kernel flattened).
#[derive(Clone, Debug)]
pub struct SampleTensors<T> {
    pub lr: Tensor<T>,
    /// What `dc_lr` compares against: the pre-clamp LR when known.
    pub lr_target: Tensor<T>,
    pub hr: Tensor<T>,
    pub kernel_gt: Tensor<T>,
    pub noise_gt: Tensor<T>,
}

impl<T: Real> SampleTensors<T> {
    pub fn cast<U: Real>(&self) -> SampleTensors<U> {
        SampleTensors {
            lr: self.lr.cast(),
            lr_target: self.lr_target.cast(),
            hr: self.hr.cast(),
            kernel_gt: self.kernel_gt.cast(),
            noise_gt: self.noise_gt.cast(),
        }
    }
}

/// Handles into the recorded objective.
pub struct Objective<V> {
    pub total: V,
    pub sr: V,
    pub re: V,
    pub dr: V,
    pub dc_lr: Option<V>,
    pub dc_noise: Option<V>,
    pub dc_kernel: Option<V>,
}

impl<V> Objective<V> {
    pub fn breakdown<T: Real, C: Ctx<T, Var = V>>(&self, ctx: &C) -> LossBreakdown {
        let get = |v: &V| ctx.value(v).item().to_f64().unwrap_or(f64::NAN);
        let opt = |v: &Option<V>| v.as_ref().map(get).unwrap_or(0.0);
        LossBreakdown {
            re: get(&self.re),
            dr: get(&self.dr),
            dc_lr: opt(&self.dc_lr),
            dc_kernel: opt(&self.dc_kernel),
            dc_noise: opt(&self.dc_noise),
            total: get(&self.total),
        }
    }
}

/// Full network plus every loss term for one sample.
pub fn objective<T: Real, C: Ctx<T>>(ctx: &mut C, cfg: &ModelConfig, w: &LossWeights, sample: &SampleTensors<T>) -> Objective<C::Var> {
    let lr = ctx.constant(sample.lr.clone());
    let hr = ctx.constant(sample.hr.clone());
    let (sr, n_est, k_est) = network::forward(ctx, cfg, &lr);
    let re = ctx.l1_mean(&sr, &hr);
    let n_gt = ctx.constant(sample.noise_gt.clone());
    let k_gt = ctx.constant(sample.kernel_gt.clone());
    let dr_n = ctx.mse_mean(&n_est, &n_gt);
    let dr_k = ctx.mse_mean(&k_est, &k_gt);
    let dr = ctx.weighted_sum(&[(&dr_n, 1.0), (&dr_k, 1.0)]);

    let (dc_lr, dc_noise, dc_kernel) = if w.dc_active() {
        let (_, h, wd) = sample.hr.chw();
        let plan = Arc::new(ResamplePlan::cubic(h, wd, h / cfg.scale, wd / cfg.scale));
        let target = ctx.constant(sample.lr_target.clone());
        consistency_terms(ctx, &hr, &target, &k_est, &n_est, cfg, cfg.blur_kernel_size, plan, w)
    } else {
        (None, None, None)
    };
    let mut terms: Vec<(&C::Var, f64)> = vec![(&re, w.re), (&dr, w.dr)];
    for t in [&dc_lr, &dc_noise, &dc_kernel].into_iter().flatten() {
        terms.push((t, w.dc));
    }
    let total = ctx.weighted_sum(&terms);
    Objective {
        total,
        sr,
        re,
        dr,
        dc_lr,
        dc_noise,
        dc_kernel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Eval, Tape};
    use crate::degradation::{degrade, gaussian_kernel, DegradationSpec};
    use crate::model::{default_projection, Dmsr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, 3, |_, _, _| r.gen())
    }

    #[test]
    fn reconstruction_loss_cases() {
        let hr = random_image(6, 5, 1);
        assert_eq!(reconstruction_loss(&hr, &hr).unwrap(), 0.0);
        let mut off = hr.clone();
        off.data_mut().iter_mut().for_each(|v| *v += 0.1);
        assert!((reconstruction_loss(&off, &hr).unwrap() - 0.1).abs() < 1e-6);
        let sr = random_image(6, 5, 2);
        let mut oracle = 0.0f64;
        for y in 0..6 {
            for x in 0..5 {
                for c in 0..3 {
                    oracle += (sr.get(y, x, c) as f64 - hr.get(y, x, c) as f64).abs();
                }
            }
        }
        assert!((reconstruction_loss(&sr, &hr).unwrap() - oracle / 90.0).abs() < 1e-7);
        assert!(reconstruction_loss(&sr, &random_image(5, 5, 0)).is_err());
    }

    #[test]
    fn dr_loss_cases() {
        let k = gaussian_kernel(1.2, 15).unwrap();
        let n = NoiseMap::new(random_image(4, 4, 3));
        assert_eq!(degradation_reconstruction_loss(&n, &k, &n, &k).unwrap(), 0.0);
        let mut w = k.weights().to_vec();
        w[40] += 0.01;
        let k2 = BlurKernel::new(15, w).unwrap();
        let got = degradation_reconstruction_loss(&n, &k2, &n, &k).unwrap();
        assert!((got - 1e-4 / 225.0).abs() < 1e-12);

        let n2 = NoiseMap::new(random_image(4, 4, 4));
        let mut oracle_n = 0.0;
        for (a, b) in n2.data().iter().zip(n.data()) {
            oracle_n += (*a as f64 - *b as f64).powi(2);
        }
        let mut oracle_k = 0.0;
        for (a, b) in k2.weights().iter().zip(k.weights()) {
            oracle_k += (a - b).powi(2);
        }
        let got = degradation_reconstruction_loss(&n2, &k2, &n, &k).unwrap();
        assert!((got - (oracle_n / 48.0 + oracle_k / 225.0)).abs() < 1e-7);
    }

    #[test]
    fn overall_loss_arithmetic() {
        let parts = LossBreakdown {
            re: 0.2,
            dr: 0.01,
            dc_lr: 0.02,
            dc_kernel: 0.01,
            dc_noise: 0.02,
            total: f64::NAN,
        };
        assert!((overall_loss(&parts, &LossWeights::default()).unwrap() - 0.35).abs() < 1e-12);
        let re_only = LossWeights::ablation(LossAblation::ReconstructionOnly);
        assert_eq!(overall_loss(&parts, &re_only).unwrap(), 0.2);
        assert_eq!(overall_loss(&LossBreakdown::default(), &LossWeights::default()).unwrap(), 0.0);
        let bad = LossBreakdown { dc_noise: f64::NAN, ..parts };
        match overall_loss(&bad, &LossWeights::default()) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "dc_noise"),
            other => panic!("{other:?}"),
        }
    }

    /// Returns the same estimate for any input.
    struct Constant<T> {
        noise: Tensor<T>,
        kernel: Tensor<T>,
    }

    impl<T: Real, C: Ctx<T>> DegradationEstimator<T, C> for Constant<T> {
        fn estimate(&self, ctx: &mut C, _lr: &C::Var) -> (C::Var, C::Var) {
            (ctx.constant(self.noise.clone()), ctx.constant(self.kernel.clone()))
        }
    }

    #[test]
    fn consistency_is_zero_at_perfect_estimates() {
        let hr = random_image(24, 24, 5);
        let spec = DegradationSpec::new(1.3, 15.0, 2, 9).with_kernel_size(5);
        let s = degrade(&hr, &spec).unwrap();
        let perfect = Constant {
            noise: s.noise_map_gt.to_chw::<f32>(),
            kernel: Tensor::from_vec(&[25], s.kernel_gt.to_f32()),
        };
        let mut ctx = Eval::without_params();
        let hr_v = ctx.constant(hr.to_chw());
        let tgt = ctx.constant(s.lr_preclamp.to_chw());
        let (n_est, k_est) = DegradationEstimator::<f32, _>::estimate(&perfect, &mut ctx, &tgt);
        let plan = Arc::new(bicubic_plan(24, 24, 2).unwrap());
        let (a, b, c) = consistency_terms(&mut ctx, &hr_v, &tgt, &k_est, &n_est, &perfect, 5, plan, &LossWeights::default());
        for v in [a, b, c] {
            assert_eq!(ctx.value(&v.unwrap()).item(), 0.0);
        }
        // Forward-only route agrees.
        let fwd = degradation_consistency_loss(
            &hr,
            &s.lr_preclamp,
            &s.kernel_gt,
            &s.noise_map_gt,
            |_| Ok(ExtractorOutput { noise_map_est: s.noise_map_gt.clone(), kernel_est: s.kernel_gt.clone() }),
            2,
        )
        .unwrap();
        assert_eq!((fwd.dc_lr, fwd.dc_noise, fwd.dc_kernel), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_extractor_gives_zero_kernel_noise_terms() {
        let mut m = Dmsr::new(ModelConfig::tiny(2), &default_projection(&ModelConfig::tiny(2), 0).unwrap(), 0).unwrap();
        for (name, e) in m.params.iter_mut() {
            if name.starts_with("extractor.") {
                e.tensor.data_mut().fill(0.0);
            }
        }
        let hr = random_image(16, 16, 6);
        let lr = random_image(8, 8, 7);
        let est = m.extractor_forward(&lr).unwrap();
        let t = degradation_consistency_loss(&hr, &lr, &est.kernel_est, &est.noise_map_est, |x| m.extractor_forward(x), 2).unwrap();
        assert_eq!(t.dc_noise, 0.0);
        assert_eq!(t.dc_kernel, 0.0);
        assert!(t.dc_lr > 0.0);
    }

    #[test]
    fn graph_terms_match_forward_only_recomputation() {
        let cfg = ModelConfig::tiny(2);
        let m = Dmsr::new(cfg.clone(), &default_projection(&cfg, 0).unwrap(), 3).unwrap();
        let hr = random_image(16, 16, 8);
        let s = degrade(&hr, &DegradationSpec::new(1.3, 15.0, 2, 1).with_kernel_size(5)).unwrap();
        let sample = SampleTensors {
            lr: s.lr.to_chw(),
            lr_target: s.lr_preclamp.to_chw(),
            hr: hr.to_chw(),
            kernel_gt: Tensor::from_vec(&[25], s.kernel_gt.to_f32()),
            noise_gt: s.noise_map_gt.to_chw(),
        };
        let mut tape = Tape::new(&m.params);
        let obj = objective(&mut tape, &cfg, &LossWeights::default(), &sample);
        let b = obj.breakdown(&tape);

        let (sr, est) = m.forward(&s.lr).unwrap();
        let fwd = degradation_consistency_loss(&hr, &s.lr_preclamp, &est.kernel_est, &est.noise_map_est, |x| m.extractor_forward(x), 2).unwrap();
        assert!((b.dc_lr - fwd.dc_lr).abs() < 1e-6);
        assert!((b.dc_noise - fwd.dc_noise).abs() < 1e-6);
        assert!((b.dc_kernel - fwd.dc_kernel).abs() < 1e-6);
        assert!((b.re - reconstruction_loss(&sr, &hr).unwrap()).abs() < 1e-6);
        let dr = degradation_reconstruction_loss(&est.noise_map_est, &est.kernel_est, &s.noise_map_gt, &s.kernel_gt).unwrap();
        assert!((b.dr - dr).abs() < 1e-6);
        let again = LossBreakdown::combine(b.re, b.dr, b.dc_lr, b.dc_kernel, b.dc_noise, &LossWeights::default(), 0).unwrap();
        assert!((again.total - b.total).abs() < 1e-6);
    }

    #[test]
    fn ablation_rows_enable_expected_terms() {
        let cfg = ModelConfig::tiny(2);
        let m = Dmsr::new(cfg.clone(), &default_projection(&cfg, 0).unwrap(), 3).unwrap();
        let hr = random_image(16, 16, 9);
        let s = degrade(&hr, &DegradationSpec::new(1.0, 5.0, 2, 1).with_kernel_size(5)).unwrap();
        let sample = SampleTensors {
            lr: s.lr.to_chw::<f32>(),
            lr_target: s.lr_preclamp.to_chw(),
            hr: hr.to_chw(),
            kernel_gt: Tensor::from_vec(&[25], s.kernel_gt.to_f32()),
            noise_gt: s.noise_map_gt.to_chw(),
        };
        let shape_of = |row| {
            let mut t = Tape::new(&m.params);
            let o = objective(&mut t, &cfg, &LossWeights::ablation(row), &sample);
            (o.dc_lr.is_some(), o.dc_noise.is_some(), o.dc_kernel.is_some())
        };
        assert_eq!(shape_of(LossAblation::ReconstructionOnly), (false, false, false));
        assert_eq!(shape_of(LossAblation::WithDr), (false, false, false));
        assert_eq!(shape_of(LossAblation::WithDrDcLr), (true, false, false));
        assert_eq!(shape_of(LossAblation::Full), (true, true, true));
        assert_eq!(LossWeights::ablation(LossAblation::WithDr).dr, 10.0);
    }

    #[test]
    fn dc_lr_gradient_wrt_kernel_matches_finite_differences() {
        let hr = random_image(12, 12, 11).to_chw::<f64>();
        let lr = random_image(6, 6, 12).to_chw::<f64>();
        let noise = random_image(6, 6, 13).to_chw::<f64>().map(|v| 0.05 * v);
        let k0: Vec<f64> = gaussian_kernel(1.1, 5).unwrap().weights().to_vec();
        let plan = Arc::new(ResamplePlan::cubic(12, 12, 6, 6));
        let w = LossWeights { dc_kernel_noise: false, ..LossWeights::default() };
        let none = Constant { noise: noise.clone(), kernel: Tensor::from_vec(&[25], k0.clone()) };
        let run = |k: Vec<f64>| {
            let mut t = Tape::without_params();
            let kv = t.variable(Tensor::from_vec(&[25], k));
            let (h, l, n) = (t.constant(hr.clone()), t.constant(lr.clone()), t.constant(noise.clone()));
            let (dc, _, _) = consistency_terms(&mut t, &h, &l, &kv, &n, &none, 5, plan.clone(), &w);
            let dc = dc.unwrap();
            let g = t.backward(dc).get(kv).cloned().unwrap();
            (t.value(&dc).item(), g)
        };
        let (_, g) = run(k0.clone());
        let h = 1e-6;
        for i in 0..25 {
            let mut kp = k0.clone();
            kp[i] += h;
            let mut km = k0.clone();
            km[i] -= h;
            let fd = (run(kp).0 - run(km).0) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-8);
            assert!(rel <= 1e-3, "k[{i}]: fd {fd} analytic {}", g.data()[i]);
        }
    }
}

//! Layer graph of the network, written once against [`Ctx`].
//!
//! All image-like values are channel-first tensors of a single sample.

use crate::autograd::Ctx;
use crate::tensor::Real;

use super::config::{MnmMode, ModelConfig};

fn conv<T: Real, C: Ctx<T>>(ctx: &mut C, x: &C::Var, name: &str) -> C::Var {
    let w = ctx.param(&format!("{name}.weight"));
    let b = ctx.param(&format!("{name}.bias"));
    ctx.conv2d(x, &w, Some(&b))
}

fn conv_relu<T: Real, C: Ctx<T>>(ctx: &mut C, x: &C::Var, name: &str) -> C::Var {
    let y = conv(ctx, x, name);
    ctx.relu(&y)
}

/// Degradation extractor: `lr [3,H,W]` -> `(noise [3,H,W], kernel [k*k])`.
pub fn extractor<T: Real, C: Ctx<T>>(ctx: &mut C, cfg: &ModelConfig, lr: &C::Var) -> (C::Var, C::Var) {
    let mut f = conv_relu(ctx, lr, "extractor.head");
    for r in 0..2 {
        let a = conv_relu(ctx, &f, &format!("extractor.res{r}.conv1"));
        let b = conv(ctx, &a, &format!("extractor.res{r}.conv2"));
        f = ctx.add(&f, &b);
    }
    let mut noise = conv(ctx, &f, "extractor.noise");
    if cfg.mnm_mode == MnmMode::NoiseScalar {
        let shape = ctx.value(&noise).shape().to_vec();
        let level = ctx.mean(&noise);
        noise = ctx.broadcast(&level, &shape);
    }
    let k1 = conv_relu(ctx, &f, "extractor.kernel1");
    let k2 = conv_relu(ctx, &k1, "extractor.kernel2");
    let pooled = ctx.global_avg_pool(&k2);
    let kernel = ctx.softmax(&pooled);
    (noise, kernel)
}

/// Meta-denoise: one convolution over `concat(lr, noise)`.
pub fn mnm<T: Real, C: Ctx<T>>(ctx: &mut C, lr: &C::Var, noise: &C::Var) -> C::Var {
    let cat = ctx.concat(&[lr, noise]);
    conv(ctx, &cat, "sr.mnm")
}

fn rcab<T: Real, C: Ctx<T>>(ctx: &mut C, x: &C::Var, name: &str) -> C::Var {
    let a = conv_relu(ctx, x, &format!("{name}.conv1"));
    let b = conv(ctx, &a, &format!("{name}.conv2"));
    let gate = channel_attention(ctx, &b, name);
    let att = ctx.scale_channels(&b, &gate);
    ctx.add(x, &att)
}

/// Pool, squeeze, ReLU, excite, sigmoid. Returns the per-channel gate.
pub fn channel_attention<T: Real, C: Ctx<T>>(ctx: &mut C, x: &C::Var, name: &str) -> C::Var {
    let pooled = ctx.global_avg_pool(x);
    let wd = ctx.param(&format!("{name}.ca_down.weight"));
    let bd = ctx.param(&format!("{name}.ca_down.bias"));
    let d = ctx.linear(&pooled, &wd, Some(&bd));
    let d = ctx.relu(&d);
    let wu = ctx.param(&format!("{name}.ca_up.weight"));
    let bu = ctx.param(&format!("{name}.ca_up.bias"));
    let u = ctx.linear(&d, &wu, Some(&bu));
    ctx.sigmoid(&u)
}

/// Residual groups, trunk, upsampler and the final 3-channel projection.
pub fn backbone<T: Real, C: Ctx<T>>(ctx: &mut C, cfg: &ModelConfig, features: &C::Var) -> C::Var {
    let head = conv(ctx, features, "sr.head");
    let mut x = head.clone();
    for g in 0..cfg.n_groups {
        let mut y = x.clone();
        for r in 0..cfg.n_rcab_per_group {
            y = rcab(ctx, &y, &format!("sr.group{g}.rcab{r}"));
        }
        let t = conv(ctx, &y, &format!("sr.group{g}.tail"));
        x = ctx.add(&x, &t);
    }
    let trunk = conv(ctx, &x, "sr.trunk");
    let mut x = ctx.add(&head, &trunk);
    for (i, r) in cfg.upsample_stages().into_iter().enumerate() {
        let y = conv(ctx, &x, &format!("sr.up{i}"));
        let y = ctx.pixel_shuffle(&y, r);
        x = ctx.relu(&y);
    }
    conv(ctx, &x, "sr.tail")
}

/// Per-pixel kernels predicted from `concat(image, stretched embedding)`.
pub fn weight_field<T: Real, C: Ctx<T>>(ctx: &mut C, idx: usize, image: &C::Var, kernel: &C::Var) -> C::Var {
    let (_, h, w) = ctx.value(image).chw();
    let we = ctx.param(&format!("sr.mbm{idx}.embed.weight"));
    let e = ctx.linear(kernel, &we, None);
    let stretched = ctx.repeat_spatial(&e, h, w);
    let cat = ctx.concat(&[image, &stretched]);
    conv(ctx, &cat, &format!("sr.mbm{idx}.field"))
}

/// Meta-deblur: weight field, dynamic convolution, 3x3 output convolution.
pub fn mbm<T: Real, C: Ctx<T>>(ctx: &mut C, cfg: &ModelConfig, idx: usize, image: &C::Var, kernel: &C::Var) -> C::Var {
    let field = weight_field(ctx, idx, image, kernel);
    let d = ctx.dynamic_conv(image, &field, cfg.blur_kernel_size);
    conv(ctx, &d, &format!("sr.mbm{idx}.out"))
}

/// SR network given the estimated degradation.
pub fn restore<T: Real, C: Ctx<T>>(
    ctx: &mut C,
    cfg: &ModelConfig,
    lr: &C::Var,
    noise: &C::Var,
    kernel: &C::Var,
) -> C::Var {
    let f = mnm(ctx, lr, noise);
    let mut x = backbone(ctx, cfg, &f);
    for m in 0..cfg.n_mbm {
        x = mbm(ctx, cfg, m, &x, kernel);
    }
    x
}

/// Extractor followed by the SR network. Returns `(sr, noise, kernel)`.
pub fn forward<T: Real, C: Ctx<T>>(ctx: &mut C, cfg: &ModelConfig, lr: &C::Var) -> (C::Var, C::Var, C::Var) {
    let (noise, kernel) = extractor(ctx, cfg, lr);
    let sr = restore(ctx, cfg, lr, &noise, &kernel);
    (sr, noise, kernel)
}

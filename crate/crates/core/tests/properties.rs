//! Randomized invariants of the degradation pipeline and metrics.

use dmsr::degradation::{blur, degrade, gaussian_kernel, BlurKernel, DegradationSpec};
use dmsr::evaluation::{psnr_y, ssim_y};
use dmsr::image::ImageTensor;
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        let t = (y * 31 + x * 17 + c * 7) as u64 ^ seed;
        ((t.wrapping_mul(2654435761) % 1000) as f32) / 1000.0
    })
}

fn max_diff(a: &BlurKernel, b: &BlurKernel) -> f64 {
    a.weights().iter().zip(b.weights()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kernels_are_normalized_and_symmetric(width in 0.2f64..4.0, half in 1usize..8) {
        let k = gaussian_kernel(width, 2 * half + 1).unwrap();
        prop_assert!((k.sum() - 1.0).abs() < 1e-12);
        prop_assert!(max_diff(&k, &k.transpose()) < 1e-15);
        prop_assert!(max_diff(&k, &k.rotate180()) < 1e-15);
    }

    #[test]
    fn blur_preserves_constants(v in 0.0f32..1.0, width in 0.2f64..4.0) {
        let img = ImageTensor::filled(12, 9, 3, v);
        let out = blur(&img, &gaussian_kernel(width, 7).unwrap()).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-5);
    }

    #[test]
    fn degraded_lr_is_in_range_with_expected_shape(
        s in 2usize..5, hs in 4usize..8, ws in 4usize..8, width in 0.2f64..3.0, noise in 0.0f64..75.0, seed in any::<u64>(),
    ) {
        let hr = image(hs * s, ws * s, seed);
        let spec = DegradationSpec::new(width, noise, s, seed).with_kernel_size(7);
        let d = degrade(&hr, &spec).unwrap();
        prop_assert_eq!(d.lr.dims(), (hs, ws, 3));
        prop_assert!(d.lr.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = degrade(&hr, &spec).unwrap();
        prop_assert_eq!(d.lr.data(), again.lr.data());
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let (a, b) = (image(24, 20, seed_a), image(24, 20, seed_b));
        let p = psnr_y(&a, &b, 2).unwrap();
        prop_assert!((p - psnr_y(&b, &a, 2).unwrap()).abs() < 1e-9 || p.is_infinite());
        let q = ssim_y(&a, &b, 2).unwrap();
        prop_assert!(q <= 1.0 + 1e-12 && q >= -1.0);
        prop_assert!((ssim_y(&a, &a, 2).unwrap() - 1.0).abs() < 1e-9);
    }
}

//! Principal components of the Gaussian kernel family.
//!
//! cargo run --release --example kernel_pca

use dmsr::degradation::{gaussian_kernel, KERNEL_WIDTH_RANGE};
use dmsr::kernel_space::{build_kernel_pool, compute_pca};

fn main() -> dmsr::error::Result<()> {
    let pool = build_kernel_pool(10_000, KERNEL_WIDTH_RANGE, 15, 0)?;
    let full = compute_pca(&pool, 225)?;
    let total: f64 = full.eigenvalues().iter().sum();
    let mut acc = 0.0;
    println!("dim  cumulative explained variance");
    for (i, ev) in full.eigenvalues().iter().take(20).enumerate() {
        acc += ev;
        println!("{:>3}  {:.8}", i + 1, acc / total);
    }

    let pca = compute_pca(&pool, 15)?;
    println!("\n15-dim projection hash {}", pca.hash());
    for width in [0.2, 1.3, 2.6] {
        let k = gaussian_kernel(width, 15)?;
        let back = pca.reconstruct(&pca.project(&k)?)?;
        let err = back.iter().zip(k.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("sigma_k {width}: max reconstruction error {err:.2e}");
    }
    Ok(())
}

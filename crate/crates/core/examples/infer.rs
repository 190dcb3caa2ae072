//! Super-resolve one image with a checkpoint and report the estimated degradation.
//!
//! cargo run --release --example infer -- <checkpoint.dmcp> [lr.png] [sr.png]

use dmsr::degradation::{degrade, DegradationSpec};
use dmsr::image::ImageTensor;
use dmsr::training::{load_checkpoint, synthetic_image};

fn main() -> dmsr::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(ckpt) = args.next() else {
        eprintln!("usage: infer <checkpoint.dmcp> [lr.png] [sr.png]");
        std::process::exit(1);
    };
    let model = load_checkpoint(&ckpt, None)?.into_model();
    let s = model.config.scale;
    let lr = match args.next() {
        Some(p) => ImageTensor::read_png(p)?,
        None => {
            let k = model.config.blur_kernel_size;
            degrade(&synthetic_image(32 * s, 32 * s, 3), &DegradationSpec::new(1.3, 15.0, s, 3).with_kernel_size(k))?.lr
        }
    };
    let (sr, est) = model.forward(&lr)?;
    let k = &est.kernel_est;
    let c = k.size() / 2;
    let noise = est.noise_map_est.data();
    let rms = (noise.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / noise.len() as f64).sqrt() * 255.0;
    println!("{:?} -> {:?}", lr.dims(), sr.dims());
    println!("estimated kernel centre {:.4}, estimated noise rms {rms:.2} (8-bit)", k.at(c, c));
    sr.clamped().write_png(args.next().unwrap_or_else(|| "sr.png".into()))?;
    Ok(())
}

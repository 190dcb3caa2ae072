//! Synthesize a degraded LR image and report what the pipeline produced.
//!
//! cargo run --release --example degrade -- [input.png] [out_dir]

use std::path::PathBuf;

use dmsr::degradation::{bicubic_upsample, degrade, DegradationSpec};
use dmsr::evaluation::psnr_y;
use dmsr::image::ImageTensor;
use dmsr::training::synthetic_image;

fn main() -> dmsr::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let hr = match args.next() {
        Some(p) => ImageTensor::read_png(p)?,
        None => synthetic_image(128, 128, 7),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "degrade_out".into()));
    std::fs::create_dir_all(&out)?;

    let hr = hr.crop_to_multiple(4)?;
    hr.write_png(out.join("hr.png"))?;
    for (width, noise) in [(0.2, 0.0), (1.3, 15.0), (2.6, 50.0)] {
        let spec = DegradationSpec::new(width, noise, 4, 7);
        let s = degrade(&hr, &spec)?;
        let up = bicubic_upsample(&s.lr, 4)?.clamped();
        let measured = {
            let d = s.noise_map_gt.data();
            let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt() * 255.0
        };
        println!(
            "sigma_k {width:>3}  sigma_n {noise:>4}  lr {:?}  kernel centre {:.4}  noise std {measured:5.2}  bicubic PSNR-Y {:.2} dB",
            s.lr.dims(),
            s.kernel_gt.at(7, 7),
            psnr_y(&up, &hr, 4)?
        );
        let tag = format!("k{width}_n{noise}");
        s.lr.write_png(out.join(format!("lr_{tag}.png")))?;
        s.kernel_gt.write(out.join(format!("kernel_{tag}.dmkn")))?;
        s.noise_map_gt.write(out.join(format!("noise_{tag}.dmnm")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

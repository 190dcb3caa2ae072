//! Desk-scale training on synthetic images at a fixed degradation, then a
//! held-out comparison against bicubic upsampling.
//!
//! cargo run --release --example train_tiny -- [iterations] [out_dir]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use dmsr::degradation::{degrade, DegradationRanges, DegradationSpec};
use dmsr::evaluation::{psnr_y, ssim_y, BicubicBaseline, Upscaler};
use dmsr::model::{default_projection, Dmsr, ModelConfig};
use dmsr::training::{save_checkpoint, train, Dataset, RateRule, RunOutput, TrainConfig, TrainState};

fn main() -> dmsr::error::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let iters: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "train_tiny_out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = ModelConfig::tiny(2);
    let pca = default_projection(&cfg, 0)?;
    let mut state = TrainState::new(Dmsr::new(cfg, &pca, 0)?, pca.hash(), 0);
    let tc = TrainConfig {
        batch: 4,
        lr_patch: 16,
        base_lr: 2e-3,
        halve_every: iters / 2 + 1,
        log_every: 100,
        checkpoint_every: 0,
        ranges: DegradationRanges {
            kernel_size: 5,
            ..DegradationRanges::fixed(1.3, 15.0, 2)
        },
        ..TrainConfig::default()
    };
    let data = Dataset::synthetic(100, 64, 64, 1);
    let mut log = BufWriter::new(File::create(out.join("train_log.csv"))?);
    let mut run = RunOutput {
        log: Some(&mut log),
        checkpoint_dir: None,
    };
    let rows = train(&mut state, &data, &tc, iters, RateRule::Schedule, &mut run)?;
    drop(run);
    for (i, r) in rows.iter().enumerate().filter(|(i, _)| (i + 1) % 500 == 0) {
        println!("iter {:>5}  re {:.4}  dr {:.2e}  dc_lr {:.2e}  total {:.4}", i + 1, r.re, r.dr, r.dc_lr, r.total);
    }
    save_checkpoint(&state, out.join("tiny.dmcp"))?;

    let model = state.into_model();
    let held = Dataset::synthetic(10, 64, 64, 999);
    let (mut pm, mut pb, mut sm, mut sb) = (0.0, 0.0, 0.0, 0.0);
    for (i, hr) in held.images().iter().enumerate() {
        let lr = degrade(hr, &DegradationSpec::new(1.3, 15.0, 2, 1000 + i as u64).with_kernel_size(5))?.lr;
        let sr = model.infer(&lr)?;
        let bi = BicubicBaseline.upscale(&lr, 2)?;
        pm += psnr_y(&sr, hr, 2)?;
        pb += psnr_y(&bi, hr, 2)?;
        sm += ssim_y(&sr, hr, 2)?;
        sb += ssim_y(&bi, hr, 2)?;
    }
    let n = held.len() as f64;
    println!("held-out: model {:.3} dB / {:.4}, bicubic {:.3} dB / {:.4}", pm / n, sm / n, pb / n, sb / n);
    Ok(())
}

//! Benchmark grid: bicubic and an untrained network per scale over
//! 3 scales x 3 kernel widths x 2 noise levels.
//!
//! cargo run --release --example benchmark -- [dataset_dir]

use std::collections::BTreeMap;

use dmsr::evaluation::{run_benchmark, BenchmarkGrid, BicubicBaseline, PerScale};
use dmsr::model::{default_projection, Dmsr, ModelConfig};
use dmsr::training::Dataset;

fn main() -> dmsr::error::Result<()> {
    let data = match std::env::args().nth(1) {
        Some(dir) => Dataset::load_dir(dir)?,
        None => Dataset::synthetic(3, 96, 96, 5),
    };
    let sets = vec![("synthetic".to_string(), data)];
    let grid = BenchmarkGrid::default();

    let report = run_benchmark(&BicubicBaseline, &sets, &grid)?;
    println!("{}", report.to_markdown());

    let mut models = BTreeMap::new();
    for s in grid.scales.iter().copied() {
        let cfg = ModelConfig {
            blur_kernel_size: 15,
            embed_dim: 15,
            ..ModelConfig::tiny(s)
        };
        models.insert(s, Dmsr::new(cfg.clone(), &default_projection(&cfg, 0)?, 0)?);
    }
    let random = run_benchmark(&PerScale(models), &sets, &grid)?;
    println!("{}", random.to_markdown());
    println!("{} cells per dataset", random.cells_for("synthetic"));
    Ok(())
}

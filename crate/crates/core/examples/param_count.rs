//! Parameter counts of the full-size network per component and scale.
//!
//! cargo run --release --example param_count

use dmsr::model::{default_projection, Dmsr, ModelConfig};

fn main() -> dmsr::error::Result<()> {
    for scale in [2, 3, 4] {
        let cfg = ModelConfig::full(scale);
        let pca = default_projection(&cfg, 0)?;
        let counts = Dmsr::new(cfg, &pca, 0)?.count_parameters();
        println!(
            "x{scale}: extractor {:>9}  sr {:>9}  total {:>9}",
            counts.component("extractor"),
            counts.component("sr"),
            counts.total()
        );
    }
    let tiny = ModelConfig::tiny(2);
    let pca = default_projection(&tiny, 0)?;
    println!("tiny x2 total {}", Dmsr::new(tiny, &pca, 0)?.count_parameters().total());
    Ok(())
}

//! The 6 x 4 window of candidate degradations for one image, as a PNG mosaic
//! and a CSV manifest.
//!
//! cargo run --release --example degradation_window -- [input.png] [scale]

use dmsr::evaluation::degradation_window;
use dmsr::image::ImageTensor;
use dmsr::training::synthetic_image;

fn main() -> dmsr::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let img = match args.next() {
        Some(p) => ImageTensor::read_png(p)?,
        None => synthetic_image(96, 96, 11),
    };
    let scale: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let w = degradation_window(&img, scale, 0)?;
    w.mosaic.write_png("window.png")?;
    std::fs::write("window_manifest.csv", w.manifest_csv())?;
    for t in &w.manifest {
        print!("{}", if t.col == 0 { format!("\nsigma_n {:>4}:", t.noise_level) } else { String::new() });
        print!("  [sigma_k {} at {},{}]", t.kernel_width, t.y, t.x);
    }
    println!("\n{} tiles -> window.png, window_manifest.csv", w.tiles.len());
    Ok(())
}

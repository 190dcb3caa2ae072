//! Y-channel PSNR/SSIM, benchmark grids and the degradation window.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::{bicubic_upsample, degrade, DegradationSpec, DEFAULT_KERNEL_SIZE};
use crate::error::{invalid, shape, Result};
use crate::image::ImageTensor;
use crate::model::Dmsr;
use crate::rng;
use crate::tensor::Tensor;
use crate::training::Dataset;

/// BT.601 limited-range luma on the 0-255 scale, as an `[H, W]` tensor.
pub fn rgb_to_y(image: &ImageTensor) -> Result<Tensor<f64>> {
    if image.channels() != 3 {
        return Err(invalid(format!("expected 3 channels, got {}", image.channels())));
    }
    let data = image
        .data()
        .chunks_exact(3)
        .map(|p| 16.0 + 65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64)
        .collect();
    Ok(Tensor::from_vec(&[image.height(), image.width()], data))
}

fn cropped_y_pair(a: &ImageTensor, b: &ImageTensor, crop: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if !a.same_shape(b) {
        return Err(shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (h, w) = (a.height(), a.width());
    if h <= 2 * crop || w <= 2 * crop {
        return Err(invalid(format!("{h}x{w} image leaves nothing after a {crop}-pixel crop")));
    }
    let inner = |img: &ImageTensor| -> Result<Tensor<f64>> {
        let y = rgb_to_y(img)?;
        let (ch, cw) = (h - 2 * crop, w - 2 * crop);
        let mut out = Vec::with_capacity(ch * cw);
        for r in crop..h - crop {
            out.extend_from_slice(&y.data()[r * w + crop..r * w + w - crop]);
        }
        Ok(Tensor::from_vec(&[ch, cw], out))
    };
    Ok((inner(a)?, inner(b)?))
}

/// PSNR on the cropped Y planes. Identical inputs give `f64::INFINITY`.
pub fn psnr_y(a: &ImageTensor, b: &ImageTensor, crop: usize) -> Result<f64> {
    let (ya, yb) = cropped_y_pair(a, b, crop)?;
    let mse = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ya.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for xo in 0..ow {
            tmp[y * ow + xo] = g.iter().zip(&row[xo..xo + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| g[i] * tmp[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM on cropped Y planes: 11x11 Gaussian window with
/// sigma 1.5, averaged over the valid region.
pub fn ssim_y(a: &ImageTensor, b: &ImageTensor, crop: usize) -> Result<f64> {
    let (ya, yb) = cropped_y_pair(a, b, crop)?;
    let (h, w) = (ya.shape()[0], ya.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after cropping, got {h}x{w}")));
    }
    let g = gaussian_window();
    let (x, y) = (ya.data(), yb.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let xx = filter_valid(&prod(&|p, _| p * p), h, w, &g);
    let yy = filter_valid(&prod(&|_, q| q * q), h, w, &g);
    let xy = filter_valid(&prod(&|p, q| p * q), h, w, &g);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

// ---------------------------------------------------------------------------
// Benchmarks

/// Anything that turns an LR image into an `s`-times larger one.
pub trait Upscaler {
    fn name(&self) -> String;
    fn upscale(&self, lr: &ImageTensor, s: usize) -> Result<ImageTensor>;
}

/// Bicubic interpolation of the LR input.
pub struct BicubicBaseline;

impl Upscaler for BicubicBaseline {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn upscale(&self, lr: &ImageTensor, s: usize) -> Result<ImageTensor> {
        Ok(bicubic_upsample(lr, s)?.clamped())
    }
}

impl Upscaler for Dmsr {
    fn name(&self) -> String {
        format!("dmsr-x{}", self.config.scale)
    }

    fn upscale(&self, lr: &ImageTensor, s: usize) -> Result<ImageTensor> {
        if s != self.config.scale {
            return Err(invalid(format!("model is x{}, asked for x{s}", self.config.scale)));
        }
        self.infer(lr)
    }
}

/// One model per scale, for grids that span several scales.
pub struct PerScale(pub BTreeMap<usize, Dmsr>);

impl Upscaler for PerScale {
    fn name(&self) -> String {
        let scales: Vec<String> = self.0.keys().map(|s| format!("x{s}")).collect();
        format!("dmsr-{}", scales.join(""))
    }

    fn upscale(&self, lr: &ImageTensor, s: usize) -> Result<ImageTensor> {
        self.0
            .get(&s)
            .ok_or_else(|| invalid(format!("no model for x{s}")))?
            .upscale(lr, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkGrid {
    pub scales: Vec<usize>,
    pub kernel_widths: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for BenchmarkGrid {
    /// 3 scales x 3 kernel widths x 2 noise levels.
    fn default() -> Self {
        Self {
            scales: vec![2, 3, 4],
            kernel_widths: vec![0.2, 1.3, 2.6],
            noise_levels: vec![15.0, 50.0],
            kernel_size: DEFAULT_KERNEL_SIZE,
            seed: 0,
        }
    }
}

impl BenchmarkGrid {
    /// Cells in scale-major, then kernel width, then noise order.
    pub fn cells(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &s in &self.scales {
            for &k in &self.kernel_widths {
                for &n in &self.noise_levels {
                    out.push((s, k, n));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub scale: usize,
    pub kernel_width: f64,
    pub noise_level: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub images: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub crop_rule: String,
    pub rows: Vec<EvalRow>,
}

fn name_seed(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn cells_for(&self, dataset: &str) -> usize {
        self.rows.iter().filter(|r| r.dataset == dataset).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,scale,kernel_width,noise_level,psnr_y,ssim_y,images,failed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{},{}",
                r.dataset,
                r.scale,
                r.kernel_width,
                r.noise_level,
                fmt_psnr(r.psnr),
                r.ssim,
                r.images,
                r.failed
            );
        }
        s
    }

    /// One table per dataset: a row per (scale, kernel width), a column per noise level.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {} (PSNR-Y / SSIM-Y, {})\n", self.model, self.crop_rule);
        let mut datasets: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        for d in datasets {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.dataset == d).collect();
            let mut noises: Vec<f64> = Vec::new();
            let mut blocks: Vec<(usize, f64)> = Vec::new();
            for r in &rows {
                if !noises.contains(&r.noise_level) {
                    noises.push(r.noise_level);
                }
                if !blocks.contains(&(r.scale, r.kernel_width)) {
                    blocks.push((r.scale, r.kernel_width));
                }
            }
            let _ = writeln!(s, "\n## {d}\n");
            let head: Vec<String> = noises.iter().map(|n| format!("σ_n={n}")).collect();
            let _ = writeln!(s, "| scale | σ_k | {} |", head.join(" | "));
            let _ = writeln!(s, "|---|---|{}", "---|".repeat(noises.len()));
            for (sc, k) in blocks {
                let cells: Vec<String> = noises
                    .iter()
                    .map(|n| {
                        rows.iter()
                            .find(|r| r.scale == sc && r.kernel_width == k && r.noise_level == *n)
                            .map(|r| format!("{} / {:.4}", fmt_psnr(r.psnr), r.ssim))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect();
                let _ = writeln!(s, "| x{sc} | {k} | {} |", cells.join(" | "));
            }
        }
        s
    }
}

/// Degrades every image of every dataset under every grid cell with a seed
/// fixed by (dataset, cell, image), upscales, and averages the metrics.
/// Images that fail are logged and counted, not averaged.
pub fn run_benchmark(model: &dyn Upscaler, datasets: &[(String, Dataset)], grid: &BenchmarkGrid) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (dname, data) in datasets {
        let dseed = rng::derive_seed(grid.seed, name_seed(dname));
        for (ci, &(s, k, n)) in grid.cells().iter().enumerate() {
            let cseed = rng::derive_seed(dseed, ci as u64);
            let (mut psnr, mut ssim, mut ok, mut failed) = (0.0, 0.0, 0usize, 0usize);
            for (ii, img) in data.images().iter().enumerate() {
                let spec = DegradationSpec::new(k, n, s, rng::derive_seed(cseed, ii as u64)).with_kernel_size(grid.kernel_size);
                let one = || -> Result<(f64, f64)> {
                    let hr = img.crop_to_multiple(s)?;
                    let lr = degrade(&hr, &spec)?.lr;
                    let sr = model.upscale(&lr, s)?;
                    Ok((psnr_y(&sr, &hr, s)?, ssim_y(&sr, &hr, s)?))
                };
                match one() {
                    Ok((p, q)) => {
                        psnr += p;
                        ssim += q;
                        ok += 1;
                    }
                    Err(e) => {
                        log::warn!("{dname}/{} at x{s} sigma_k={k} sigma_n={n}: {e}", data.names()[ii]);
                        failed += 1;
                    }
                }
            }
            let denom = ok.max(1) as f64;
            rows.push(EvalRow {
                dataset: dname.clone(),
                scale: s,
                kernel_width: k,
                noise_level: n,
                psnr: if ok == 0 { f64::NAN } else { psnr / denom },
                ssim: if ok == 0 { f64::NAN } else { ssim / denom },
                images: ok,
                failed,
            });
        }
    }
    Ok(EvalReport {
        model: model.name(),
        crop_rule: "border crop = scale".into(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Degradation window

pub const WINDOW_NOISE_LEVELS: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];
pub const WINDOW_KERNEL_WIDTHS: [f64; 4] = [0.2, 1.2, 2.1, 3.0];
const WINDOW_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowTile {
    pub row: usize,
    pub col: usize,
    pub noise_level: f64,
    pub kernel_width: f64,
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DegradationWindow {
    /// Rows are noise levels, columns kernel widths, separated by white gaps.
    pub mosaic: ImageTensor,
    pub tiles: Vec<ImageTensor>,
    pub manifest: Vec<WindowTile>,
}

impl DegradationWindow {
    pub fn manifest_csv(&self) -> String {
        let mut s = String::from("row,col,noise_level,kernel_width,y,x,height,width,seed\n");
        for t in &self.manifest {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                t.row, t.col, t.noise_level, t.kernel_width, t.y, t.x, t.height, t.width, t.seed
            );
        }
        s
    }
}

/// The image degraded under 6 noise levels x 4 kernel widths, tiled.
pub fn degradation_window(image: &ImageTensor, scale: usize, seed: u64) -> Result<DegradationWindow> {
    let hr = image.crop_to_multiple(scale)?;
    let (th, tw) = (hr.height() / scale, hr.width() / scale);
    let rows = WINDOW_NOISE_LEVELS.len();
    let cols = WINDOW_KERNEL_WIDTHS.len();
    let mut mosaic = ImageTensor::filled(
        rows * th + (rows - 1) * WINDOW_GAP,
        cols * tw + (cols - 1) * WINDOW_GAP,
        hr.channels(),
        1.0,
    );
    let mut tiles = Vec::new();
    let mut manifest = Vec::new();
    for (r, &n) in WINDOW_NOISE_LEVELS.iter().enumerate() {
        for (c, &k) in WINDOW_KERNEL_WIDTHS.iter().enumerate() {
            let tseed = rng::derive_seed(seed, (r * cols + c) as u64);
            let lr = degrade(&hr, &DegradationSpec::new(k, n, scale, tseed))?.lr;
            let (y0, x0) = (r * (th + WINDOW_GAP), c * (tw + WINDOW_GAP));
            for y in 0..th {
                for x in 0..tw {
                    for ch in 0..hr.channels() {
                        mosaic.set(y0 + y, x0 + x, ch, lr.get(y, x, ch));
                    }
                }
            }
            manifest.push(WindowTile {
                row: r,
                col: c,
                noise_level: n,
                kernel_width: k,
                y: y0,
                x: x0,
                height: th,
                width: tw,
                seed: tseed,
            });
            tiles.push(lr);
        }
    }
    Ok(DegradationWindow { mosaic, tiles, manifest })
}

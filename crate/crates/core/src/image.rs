//! The pixel container shared by every stage of the pipeline.

use std::path::Path;

use crate::error::{invalid, shape, Result};
use crate::tensor::{Real, Tensor};

/// An `height x width x channels` image of 32-bit reals, channel-last.
///
/// Values are nominally in `[0, 1]`; operations that clamp say so. Network
/// code works on channel-first [`Tensor`]s, see [`ImageTensor::to_chw`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Crops the top-left region so both sides are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<Self> {
        let h = self.height / s * s;
        let w = self.width / s * s;
        self.crop(0, 0, h, w)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(invalid(format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Channel-first copy for the network kernels.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = self.dims();
        let mut out = vec![T::zero(); h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = T::of(v as f64);
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }

    pub fn from_chw<T: Real>(t: &Tensor<T>) -> Self {
        let (c, h, w) = t.chw();
        let mut data = vec![0.0f32; h * w * c];
        let src = t.data();
        for ch in 0..c {
            for i in 0..h * w {
                data[i * c + ch] = src[ch * h * w + i].to_f32().unwrap_or(f32::NAN);
            }
        }
        Self {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    /// Reads an 8-bit image, mapping `0..=255` linearly onto `[0, 1]`.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, 3, data)
    }

    /// Writes an 8-bit PNG; values are clamped and rounded.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer sized from dims")
                .save(path.as_ref())?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer sized from dims")
                .save(path.as_ref())?,
            c => return Err(invalid(format!("cannot encode {c}-channel image as PNG"))),
        }
        Ok(())
    }

    /// One of the eight dihedral transforms: `0..4` rotations by 90 degrees,
    /// `4..8` the same after a horizontal flip.
    pub fn dihedral(&self, which: u8) -> Self {
        let flip = which >= 4;
        let rot = which % 4;
        let (h, w, c) = self.dims();
        let (oh, ow) = if rot % 2 == 1 { (w, h) } else { (h, w) };
        let mut out = Self::zeros(oh, ow, c);
        for y in 0..oh {
            for x in 0..ow {
                // Source pixel for a counter-clockwise rotation of the flipped image.
                let (sy, sx) = match rot {
                    0 => (y, x),
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                let sx = if flip { w - 1 - sx } else { sx };
                for ch in 0..c {
                    out.set(y, x, ch, self.get(sy, sx, ch));
                }
            }
        }
        out
    }
}

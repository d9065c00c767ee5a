//! 8-bit images and conversions to network tensors.

use std::path::Path;

use gazesr_tensor::Scalar;
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// Smallest side accepted by dataset and pipeline entry points.
pub const MIN_PIPELINE_SIDE: usize = 8;

/// Interleaved (HWC) 8-bit image with 1 or 3 channels.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageU8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageU8({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "image must be non-empty, got {height}x{width}");
        ensure!(channels == 1 || channels == 3, "image must have 1 or 3 channels, got {channels}");
        ensure!(
            data.len() == height * width * channels,
            "image buffer holds {} bytes, expected {}",
            data.len(),
            height * width * channels
        );
        Ok(ImageU8 { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageU8) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Rejects images smaller than [`MIN_PIPELINE_SIDE`].
    pub fn check_pipeline_size(&self) -> Result<()> {
        ensure!(
            self.height >= MIN_PIPELINE_SIDE && self.width >= MIN_PIPELINE_SIDE,
            "image {}x{} is smaller than the {MIN_PIPELINE_SIDE}px minimum",
            self.height,
            self.width
        );
        Ok(())
    }

    pub fn to_rgb(&self) -> ImageU8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageU8 { height: self.height, width: self.width, channels: 3, data }
    }

    /// BT.601 luma as f64 in [0, 255], row-major.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Planar CHW values scaled to [0, 1], appended to `out`.
    pub fn write_chw<S: Scalar>(&self, out: &mut Vec<S>) {
        let inv = 1.0 / 255.0;
        out.reserve(self.data.len());
        for c in 0..self.channels {
            out.extend(self.data.iter().skip(c).step_by(self.channels).map(|&v| S::of(v as f64 * inv)));
        }
    }

    pub fn to_chw<S: Scalar>(&self) -> Vec<S> {
        let mut v = Vec::new();
        self.write_chw(&mut v);
        v
    }

    /// Inverse of [`ImageU8::to_chw`]: scales by 255, rounds half away from zero, clamps.
    pub fn from_chw<S: Scalar>(values: &[S], channels: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(values.len() == channels * height * width, "tensor size does not match {channels}x{height}x{width}");
        let plane = height * width;
        let mut data = vec![0u8; values.len()];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = quantize(values[c * plane + i].as_f64() * 255.0);
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::new(h as usize, w as usize, 1, g.into_raw())
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new(h as usize, w as usize, 3, rgb.into_raw())
            }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.data.clone()).expect("sized buffer"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.data.clone()).expect("sized buffer"))
        }
    }

    /// Reads a PNG or JPEG file.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_dynamic(img).map_err(|e| Error::load(path, e.to_string()))
    }

    /// Writes a PNG file, creating parent directories.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// SHA-256 over shape and pixels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.height, self.width, self.channels] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(&self.data);
        hex::encode(h.finalize())
    }
}

/// Rounds half away from zero, then clamps to [0, 255].
#[inline]
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

/// Peak signal-to-noise ratio in dB against an 8-bit peak.
///
/// Identical images give `f64::INFINITY`.
pub fn psnr_db(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    ensure!(a.same_shape(b), "psnr of differently shaped images: {a:?} vs {b:?}");
    let sse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = sse / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Stacks same-shaped images into one NCHW buffer.
pub fn batch_chw<S: Scalar>(images: &[&ImageU8]) -> Result<(Vec<S>, [usize; 4])> {
    ensure!(!images.is_empty(), "empty image batch");
    let first = images[0];
    let mut out = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        ensure!(img.same_shape(first), "mixed image shapes in batch: {first:?} vs {img:?}");
        img.write_chw(&mut out);
    }
    Ok((out, [images.len(), first.channels, first.height, first.width]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_constant_offset() {
        let a = ImageU8::filled(8, 8, 3, 100).unwrap();
        let b = ImageU8::filled(8, 8, 3, 116).unwrap();
        // 10 log10(255^2 / 16^2)
        let expect = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr_db(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 24.05).abs() < 0.01);
        assert_eq!(psnr_db(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr_db(&a, &ImageU8::filled(8, 9, 3, 0).unwrap()).is_err());
    }

    #[test]
    fn construction_checks() {
        assert!(ImageU8::new(0, 4, 3, vec![]).is_err());
        assert!(ImageU8::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageU8::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(ImageU8::filled(7, 9, 1, 0).unwrap().check_pipeline_size().is_err());
        assert!(ImageU8::filled(8, 8, 1, 0).unwrap().check_pipeline_size().is_ok());
    }

    #[test]
    fn chw_round_trip_and_rounding() {
        let img = ImageU8::new(2, 2, 3, (0..12).map(|v| v * 20).collect()).unwrap();
        let t: Vec<f32> = img.to_chw();
        assert_eq!(t[1], 60.0 / 255.0);
        assert_eq!(ImageU8::from_chw(&t, 3, 2, 2).unwrap(), img);
        assert_eq!(quantize(127.5), 128);
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(300.0), 255);
        assert_eq!(quantize(2.4999), 2);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageU8::new(9, 8, 3, (0..216).map(|v| (v * 7 % 256) as u8).collect()).unwrap();
        let p = dir.path().join("a/b.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageU8::load(&p).unwrap(), img);
        assert!(ImageU8::load(&dir.path().join("missing.png")).is_err());
    }
}

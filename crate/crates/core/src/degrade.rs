//! Synthetic image degradation: blur, rescale, noise and JPEG.
//!
//! A [`DegradationRecipe`] is fully materialised, so applying it is a pure
//! function of the input image. Recipes are drawn from [`DegradationRanges`]
//! with a seeded ChaCha8 stream.

use std::fmt;

use gazesr_tensor::resample_matrix;
pub use gazesr_tensor::ResampleMethod;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{quantize, ImageU8};

/// Identifies the JPEG implementation; outputs are only bit-stable against it.
pub const JPEG_CODEC: &str = "image-0.25 jpeg encoder + zune-jpeg-0.5 decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Blur,
    Rescale,
    Noise,
}

impl Stage {
    pub const CANONICAL: [Stage; 3] = [Stage::Blur, Stage::Rescale, Stage::Noise];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Blur => "BLUR",
            Stage::Rescale => "RESCALE",
            Stage::Noise => "NOISE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// One sample per pixel shared by all channels.
    Gray,
    /// Independent samples per channel.
    Color,
}

/// One concrete degradation. Stages left out by sampling carry identity
/// parameters (`blur_sigma = 0`, `rescale_factor = 1`, `noise_sigma = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRecipe {
    pub seed: u64,
    pub stage_order: [Stage; 3],
    pub blur_sigma: f64,
    pub rescale_factor: f64,
    pub rescale_method: ResampleMethod,
    pub noise_sigma: f64,
    pub noise_mode: NoiseMode,
    pub noise_seed: u64,
    pub jpeg_quality: u8,
}

impl DegradationRecipe {
    /// Every stage at identity strength; only JPEG at the given quality remains.
    pub fn jpeg_only(quality: u8) -> Self {
        DegradationRecipe {
            seed: 0,
            stage_order: Stage::CANONICAL,
            blur_sigma: 0.0,
            rescale_factor: 1.0,
            rescale_method: ResampleMethod::Bicubic,
            noise_sigma: 0.0,
            noise_mode: NoiseMode::Gray,
            noise_seed: 0,
            jpeg_quality: quality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut order = self.stage_order;
        order.sort();
        ensure!(order == Stage::CANONICAL, "stage_order must be a permutation of BLUR, RESCALE, NOISE");
        ensure!(
            self.blur_sigma == 0.0 || (0.1..=5.0).contains(&self.blur_sigma),
            "blur_sigma {} outside {{0}} or [0.1, 5]",
            self.blur_sigma
        );
        ensure!(
            (1.0..=4.0).contains(&self.rescale_factor),
            "rescale_factor {} outside [1, 4]",
            self.rescale_factor
        );
        ensure!((0.0..=0.2).contains(&self.noise_sigma), "noise_sigma {} outside [0, 0.2]", self.noise_sigma);
        ensure!((5..=100).contains(&self.jpeg_quality), "jpeg_quality {} outside [5, 100]", self.jpeg_quality);
        Ok(())
    }
}

/// Sampling distribution for recipes. Each `[min, max]` pair is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub blur_sigma: [f64; 2],
    pub rescale_factor: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub jpeg_quality: [u8; 2],
    pub p_blur: f64,
    pub p_rescale: f64,
    pub p_noise: f64,
    pub gray_noise_prob: f64,
    pub rescale_methods: Vec<ResampleMethod>,
    /// When false the stage order is always BLUR, RESCALE, NOISE.
    pub shuffle_order: bool,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            blur_sigma: [0.2, 3.0],
            rescale_factor: [1.0, 4.0],
            noise_sigma: [0.004, 0.1],
            jpeg_quality: [30, 95],
            p_blur: 0.8,
            p_rescale: 0.8,
            p_noise: 0.8,
            gray_noise_prob: 0.4,
            rescale_methods: ResampleMethod::ALL.to_vec(),
            shuffle_order: true,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    ensure!(
        r[0] <= r[1] && r[0] >= lo && r[1] <= hi,
        "{name} range [{}, {}] must be ordered and inside [{lo}, {hi}]",
        r[0],
        r[1]
    );
    Ok(())
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        check_range("blur_sigma", self.blur_sigma, 0.1, 5.0)?;
        check_range("rescale_factor", self.rescale_factor, 1.0, 4.0)?;
        check_range("noise_sigma", self.noise_sigma, 0.0, 0.2)?;
        let q = self.jpeg_quality;
        ensure!(q[0] <= q[1] && q[0] >= 5 && q[1] <= 100, "jpeg_quality range {q:?} must be ordered inside [5, 100]");
        for (name, p) in [
            ("p_blur", self.p_blur),
            ("p_rescale", self.p_rescale),
            ("p_noise", self.p_noise),
            ("gray_noise_prob", self.gray_noise_prob),
        ] {
            ensure!((0.0..=1.0).contains(&p), "{name} = {p} is not a probability");
        }
        ensure!(!self.rescale_methods.is_empty(), "rescale_methods must not be empty");
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Draws one recipe. The draw sequence is fixed, so equal seeds give equal recipes.
pub fn sample_recipe(ranges: &DegradationRanges, seed: u64) -> Result<DegradationRecipe> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: [[Stage; 3]; 6] = [
        [Stage::Blur, Stage::Rescale, Stage::Noise],
        [Stage::Blur, Stage::Noise, Stage::Rescale],
        [Stage::Rescale, Stage::Blur, Stage::Noise],
        [Stage::Rescale, Stage::Noise, Stage::Blur],
        [Stage::Noise, Stage::Blur, Stage::Rescale],
        [Stage::Noise, Stage::Rescale, Stage::Blur],
    ];
    let pick = rng.random_range(0..6usize);
    let stage_order = if ranges.shuffle_order { perms[pick] } else { Stage::CANONICAL };

    let use_blur = rng.random::<f64>() < ranges.p_blur;
    let sigma = uniform(&mut rng, ranges.blur_sigma);
    let use_rescale = rng.random::<f64>() < ranges.p_rescale;
    let factor = uniform(&mut rng, ranges.rescale_factor);
    let method = ranges.rescale_methods[rng.random_range(0..ranges.rescale_methods.len())];
    let use_noise = rng.random::<f64>() < ranges.p_noise;
    let noise = uniform(&mut rng, ranges.noise_sigma);
    let gray = rng.random::<f64>() < ranges.gray_noise_prob;
    let [qa, qb] = ranges.jpeg_quality;
    let jpeg_quality = rng.random_range(qa..=qb);
    let noise_seed = rng.next_u64();

    let recipe = DegradationRecipe {
        seed,
        stage_order,
        blur_sigma: if use_blur { sigma } else { 0.0 },
        rescale_factor: if use_rescale { factor } else { 1.0 },
        rescale_method: method,
        noise_sigma: if use_noise { noise } else { 0.0 },
        noise_mode: if gray { NoiseMode::Gray } else { NoiseMode::Color },
        noise_seed,
        jpeg_quality,
    };
    recipe.validate()?;
    Ok(recipe)
}

/// Reflect-101 index (the edge pixel is not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Normalised 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect padding; `sigma = 0` is the identity.
pub fn gaussian_blur(img: &ImageU8, sigma: f64) -> Result<ImageU8> {
    ensure!(sigma.is_finite() && sigma >= 0.0, "blur sigma must be non-negative, got {sigma}");
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for (t, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - r, w);
                let base = (y * w + sx) * c;
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += kv * src[base + ch] as f64;
                }
            }
        }
    }
    let mut out = vec![0u8; h * w * c];
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - r, h);
                let base = (sy * w + x) * c;
                for ch in 0..c {
                    acc[ch] += kv * tmp[base + ch];
                }
            }
            for ch in 0..c {
                out[(y * w + x) * c + ch] = quantize(acc[ch]);
            }
        }
    }
    ImageU8::new(h, w, c, out)
}

/// Non-zero taps of each output row of the resampling matrix.
fn sparse_taps(in_len: usize, out_len: usize, method: ResampleMethod) -> Vec<Vec<(usize, f64)>> {
    let m = resample_matrix(in_len, out_len, method);
    m.chunks_exact(in_len)
        .map(|row| row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, w)| (i, *w)).collect())
        .collect()
}

/// Resizes with half-pixel centres (align-corners = false).
pub fn resize(img: &ImageU8, out_h: usize, out_w: usize, method: ResampleMethod) -> Result<ImageU8> {
    ensure!(out_h > 0 && out_w > 0, "resize target must be non-empty, got {out_h}x{out_w}");
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let tx = sparse_taps(w, out_w, method);
    let ty = sparse_taps(h, out_h, method);
    let src = img.data();
    let mut tmp = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (x, taps) in tx.iter().enumerate() {
            for &(sx, wt) in taps {
                let base = (y * w + sx) * c;
                for ch in 0..c {
                    tmp[(y * out_w + x) * c + ch] += wt * src[base + ch] as f64;
                }
            }
        }
    }
    let mut out = vec![0u8; out_h * out_w * c];
    let mut acc = vec![0.0f64; c];
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..out_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(sy, wt) in taps {
                let base = (sy * out_w + x) * c;
                for ch in 0..c {
                    acc[ch] += wt * tmp[base + ch];
                }
            }
            for ch in 0..c {
                out[(y * out_w + x) * c + ch] = quantize(acc[ch]);
            }
        }
    }
    ImageU8::new(out_h, out_w, c, out)
}

/// Additive Gaussian noise; `sigma` is relative to the [0, 1] intensity scale.
pub fn add_gaussian_noise(img: &ImageU8, sigma: f64, mode: NoiseMode, seed: u64) -> Result<ImageU8> {
    ensure!(sigma.is_finite() && sigma >= 0.0, "noise sigma must be non-negative, got {sigma}");
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma * 255.0).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = img.channels();
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        match mode {
            NoiseMode::Gray => {
                let n = normal.sample(&mut rng);
                px.iter_mut().for_each(|v| *v = quantize(*v as f64 + n));
            }
            NoiseMode::Color => {
                px.iter_mut().for_each(|v| *v = quantize(*v as f64 + normal.sample(&mut rng)));
            }
        }
    }
    Ok(out)
}

/// Encodes and decodes through baseline JPEG at `quality`.
pub fn jpeg_compress(img: &ImageU8, quality: u8) -> Result<ImageU8> {
    ensure!((1..=100).contains(&quality), "jpeg quality {quality} outside [1, 100]");
    let mut buf = Vec::new();
    let color = if img.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality).encode(
        img.data(),
        img.width() as u32,
        img.height() as u32,
        color,
    )?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    let out = ImageU8::from_dynamic(decoded)?;
    ensure!(out.same_shape(img), "jpeg round trip changed the image shape");
    Ok(out)
}

/// Applies the recipe's stages in order, resizes back to `target` (the input
/// size by default) with the recipe's rescale method, then JPEG-compresses.
pub fn complex_degrade(img: &ImageU8, recipe: &DegradationRecipe, target: Option<(usize, usize)>) -> Result<ImageU8> {
    recipe.validate()?;
    let (th, tw) = target.unwrap_or((img.height(), img.width()));
    let mut cur = img.clone();
    for stage in recipe.stage_order {
        cur = match stage {
            Stage::Blur => gaussian_blur(&cur, recipe.blur_sigma)?,
            Stage::Rescale => {
                if recipe.rescale_factor == 1.0 {
                    cur
                } else {
                    let nh = ((cur.height() as f64 / recipe.rescale_factor).round() as usize).max(1);
                    let nw = ((cur.width() as f64 / recipe.rescale_factor).round() as usize).max(1);
                    resize(&cur, nh, nw, recipe.rescale_method)?
                }
            }
            Stage::Noise => add_gaussian_noise(&cur, recipe.noise_sigma, recipe.noise_mode, recipe.noise_seed)?,
        };
    }
    let cur = resize(&cur, th, tw, recipe.rescale_method)?;
    jpeg_compress(&cur, recipe.jpeg_quality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::psnr_db;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> ImageU8 {
        let mut d = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = 128.0 + 60.0 * ((x as f64) * 0.21).sin() + 40.0 * ((y as f64) * 0.13).cos();
                d.extend([quantize(v), quantize(v * 0.8), quantize(255.0 - v)]);
            }
        }
        ImageU8::new(h, w, 3, d).unwrap()
    }

    #[test]
    fn blur_impulse_matches_dense_gaussian() {
        let mut img = ImageU8::filled(33, 33, 1, 0).unwrap();
        img.set(16, 16, 0, 255);
        let out = gaussian_blur(&img, 1.5).unwrap();
        // Oracle: 2-D Gaussian normalised over its (2r+1)^2 support.
        let r = 5i32;
        let w = |dy: i32, dx: i32| (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
        let total: f64 = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| w(dy, dx))).sum();
        for (dy, dx) in [(0, 0), (1, 0), (2, 2), (0, 4)] {
            let expect = 255.0 * w(dy, dx) / total;
            let got = out.get((16 + dy) as usize, (16 + dx) as usize, 0) as f64;
            assert!((got - expect).abs() <= 1.0, "offset ({dy},{dx}): {got} vs {expect}");
        }
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn reflect_padding_does_not_repeat_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn area_checkerboard_rounds_half_up() {
        let img = ImageU8::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        assert_eq!(resize(&img, 1, 1, ResampleMethod::Area).unwrap().data(), &[128]);
    }

    #[test]
    fn bicubic_round_trip_keeps_detail() {
        let img = gradient_image(448, 448);
        let small = resize(&img, 112, 112, ResampleMethod::Bicubic).unwrap();
        let back = resize(&small, 448, 448, ResampleMethod::Bicubic).unwrap();
        assert!(psnr_db(&img, &back).unwrap() > 20.0);
    }

    #[test]
    fn resize_rejects_empty_target() {
        assert!(resize(&gradient_image(8, 8), 0, 4, ResampleMethod::Nearest).is_err());
    }

    #[test]
    fn noise_std_and_gray_mode() {
        let img = ImageU8::filled(128, 128, 3, 128).unwrap();
        let out = add_gaussian_noise(&img, 0.05, NoiseMode::Color, 7).unwrap();
        let vals: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((0.045 * 255.0..=0.055 * 255.0).contains(&std), "std {std}");

        let gray = add_gaussian_noise(&img, 0.05, NoiseMode::Gray, 7).unwrap();
        assert!(gray.data().chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(add_gaussian_noise(&img, 0.05, NoiseMode::Gray, 7).unwrap(), gray);
    }

    #[test]
    fn jpeg_quality_ordering() {
        let img = gradient_image(64, 64);
        let q100 = psnr_db(&img, &jpeg_compress(&img, 100).unwrap()).unwrap();
        let q90 = psnr_db(&img, &jpeg_compress(&img, 90).unwrap()).unwrap();
        let q10 = psnr_db(&img, &jpeg_compress(&img, 10).unwrap()).unwrap();
        assert!(q100 >= 40.0, "q100 psnr {q100}");
        assert!(q10 < q90);
        // From quality 75 up the DC quantiser step is small enough for flat blocks to survive.
        for v in [0u8, 77, 128, 201, 255] {
            let flat = ImageU8::filled(32, 32, 3, v).unwrap();
            for q in [75, 90, 100] {
                assert!(psnr_db(&flat, &jpeg_compress(&flat, q).unwrap()).unwrap() >= 50.0);
            }
        }
    }

    #[test]
    fn complex_degrade_restores_target_size() {
        let img = gradient_image(40, 40);
        let r = sample_recipe(&DegradationRanges::default(), 3).unwrap();
        assert_eq!(complex_degrade(&img, &r, None).unwrap().height(), 40);
        let small = complex_degrade(&img, &r, Some((20, 20))).unwrap();
        assert_eq!((small.height(), small.width()), (20, 20));
    }

    #[test]
    fn range_validation() {
        let bad = DegradationRanges { blur_sigma: [3.0, 1.0], ..Default::default() };
        assert!(sample_recipe(&bad, 0).is_err());
        let bad = DegradationRanges { jpeg_quality: [2, 50], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DegradationRanges { p_noise: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn degenerate_ranges_force_one_recipe() {
        let ranges = DegradationRanges {
            blur_sigma: [1.0, 1.0],
            rescale_factor: [2.0, 2.0],
            noise_sigma: [0.02, 0.02],
            jpeg_quality: [60, 60],
            p_blur: 1.0,
            p_rescale: 1.0,
            p_noise: 1.0,
            gray_noise_prob: 1.0,
            rescale_methods: vec![ResampleMethod::Area],
            shuffle_order: false,
        };
        for seed in 0..20 {
            let r = sample_recipe(&ranges, seed).unwrap();
            let forced = DegradationRecipe {
                seed,
                stage_order: Stage::CANONICAL,
                blur_sigma: 1.0,
                rescale_factor: 2.0,
                rescale_method: ResampleMethod::Area,
                noise_sigma: 0.02,
                noise_mode: NoiseMode::Gray,
                noise_seed: r.noise_seed,
                jpeg_quality: 60,
            };
            assert_eq!(r, forced);
        }
    }

    #[test]
    fn stage_orders_are_uniform() {
        let mut counts = std::collections::BTreeMap::new();
        let n = 6000;
        for seed in 0..n {
            let r = sample_recipe(&DegradationRanges::default(), seed).unwrap();
            *counts.entry(r.stage_order).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let e = n as f64 / 6.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 5 degrees of freedom, p = 0.001
        assert!(chi2 < 20.515, "chi-square {chi2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn recipes_are_deterministic_and_valid(seed in any::<u64>()) {
            let ranges = DegradationRanges::default();
            let a = sample_recipe(&ranges, seed).unwrap();
            prop_assert_eq!(&a, &sample_recipe(&ranges, seed).unwrap());
            prop_assert!(a.validate().is_ok());
            let img = gradient_image(24, 24);
            let x = complex_degrade(&img, &a, None).unwrap();
            prop_assert_eq!(x, complex_degrade(&img, &a, None).unwrap());
        }
    }
}

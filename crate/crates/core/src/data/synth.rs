//! Procedural face images with exactly known gaze.
//!
//! Each subject gets its own skin, iris and sclera colours, texture and eye
//! placement. The irises sit inside elliptical scleras and are displaced from
//! the sclera centre by `k * yaw` horizontally and `-k * pitch` vertically,
//! with `k` = [`PX_PER_RAD`] times the image size. Labels that would push an
//! iris outside its sclera are shrunk towards zero until it fits, so the label
//! always matches the rendered pixels. Edges are anti-aliased by supersampling.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::LayoutWriter;
use super::{load_mpii_layout, Dataset, Provenance};
use crate::error::{ensure, Result};
use crate::geometry::GazeAngles;
use crate::image::{quantize, ImageU8};
use crate::util::{derive_seed, write_atomic};

/// Iris displacement per radian of gaze, as a fraction of the image side.
pub const PX_PER_RAD: f64 = 0.09;
pub const PITCH_LIMIT: f64 = 0.4;
pub const YAW_LIMIT: f64 = 0.6;

/// One eye in pixel units of the image it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeMeta {
    /// Sclera centre `[x, y]`; pixel `i` spans `[i, i + 1)`.
    pub center: [f64; 2],
    /// Sclera semi-axes `[horizontal, vertical]`.
    pub sclera_axes: [f64; 2],
    pub iris_radius: f64,
    pub pupil_radius: f64,
    /// Iris centre minus sclera centre.
    pub iris_offset: [f64; 2],
}

/// Rendering geometry stored beside every synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryMeta {
    pub image_size: usize,
    pub px_per_rad: f64,
    pub eyes: [EyeMeta; 2],
}

impl GeometryMeta {
    /// The same geometry expressed for a resized copy of the image.
    pub fn scaled_to(&self, size: usize) -> GeometryMeta {
        let f = size as f64 / self.image_size as f64;
        let eye = |e: &EyeMeta| EyeMeta {
            center: [e.center[0] * f, e.center[1] * f],
            sclera_axes: [e.sclera_axes[0] * f, e.sclera_axes[1] * f],
            iris_radius: e.iris_radius * f,
            pupil_radius: e.pupil_radius * f,
            iris_offset: [e.iris_offset[0] * f, e.iris_offset[1] * f],
        };
        GeometryMeta { image_size: size, px_per_rad: self.px_per_rad * f, eyes: [eye(&self.eyes[0]), eye(&self.eyes[1])] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_subjects: usize,
    pub per_subject: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { n_subjects: 15, per_subject: 100, image_size: 112, seed: 0 }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_subjects >= 2, "need at least 2 subjects, got {}", self.n_subjects);
        ensure!(self.per_subject >= 10, "need at least 10 images per subject, got {}", self.per_subject);
        ensure!(self.image_size >= 8, "image size must be at least 8, got {}", self.image_size);
        Ok(())
    }

    pub fn subject_id(i: usize) -> String {
        format!("s{i:02}")
    }
}

/// Appearance shared by all images of one subject; lengths are fractions of the image side.
#[derive(Debug, Clone)]
pub struct SubjectStyle {
    skin: [f64; 3],
    hair: [f64; 3],
    backdrop: [f64; 3],
    lips: [f64; 3],
    sclera: [f64; 3],
    iris: [f64; 3],
    texture: [f64; 6],
    eye_y: f64,
    eye_dx: f64,
    axes: [f64; 2],
    iris_r: f64,
}

impl SubjectStyle {
    pub fn sample(seed: u64, subject: &str) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["style", subject]));
        let skin_r = r.random_range(150.0..235.0);
        let skin_g = skin_r * r.random_range(0.66..0.84);
        let skin = [skin_r, skin_g, skin_g * r.random_range(0.72..0.9)];
        let hair_v = r.random_range(20.0..110.0);
        let hair = [hair_v, hair_v * r.random_range(0.7..0.95), hair_v * r.random_range(0.5..0.85)];
        let backdrop = [r.random_range(60.0..200.0), r.random_range(60.0..200.0), r.random_range(60.0..200.0)];
        let lips = [r.random_range(150.0..200.0), r.random_range(60.0..100.0), r.random_range(60.0..100.0)];
        let sv = r.random_range(225.0..248.0);
        let sclera = [sv, sv * r.random_range(0.96..1.0), sv * r.random_range(0.93..1.0)];
        let iris = match r.random_range(0..3) {
            0 => [r.random_range(70.0..110.0), r.random_range(40.0..70.0), r.random_range(20.0..40.0)],
            1 => [r.random_range(40.0..80.0), r.random_range(80.0..120.0), r.random_range(120.0..170.0)],
            _ => [r.random_range(60.0..90.0), r.random_range(80.0..110.0), r.random_range(50.0..80.0)],
        };
        let texture = [
            r.random_range(0.02..0.06),
            r.random_range(1.0..4.0),
            r.random_range(1.0..4.0),
            r.random_range(0.0..TAU),
            r.random_range(2.0..6.0),
            r.random_range(0.0..TAU),
        ];
        SubjectStyle {
            skin,
            hair,
            backdrop,
            lips,
            sclera,
            iris,
            texture,
            eye_y: r.random_range(0.435..0.465),
            eye_dx: r.random_range(0.19..0.21),
            axes: [0.14 * r.random_range(0.96..1.04), 0.085 * r.random_range(0.96..1.04)],
            iris_r: 0.04 * r.random_range(0.95..1.05),
        }
    }
}

/// Per-image nuisance parameters.
#[derive(Debug, Clone, Copy)]
pub struct Lighting {
    pub gain: f64,
    /// Left-to-right relative brightness slope.
    pub slope: f64,
    /// Whole-face shift `[x, y]` as a fraction of the image side.
    pub shift: [f64; 2],
}

impl Lighting {
    pub const NEUTRAL: Lighting = Lighting { gain: 1.0, slope: 0.0, shift: [0.0, 0.0] };
}

fn inside_ellipse(dx: f64, dy: f64, a: f64, b: f64) -> bool {
    (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
}

/// Shrinks `gaze` until a disc of `radius` (image fractions) around the
/// displaced iris centre lies inside the sclera ellipse.
fn clip_gaze(gaze: GazeAngles<f64>, axes: [f64; 2], radius: f64) -> GazeAngles<f64> {
    let fits = |g: GazeAngles<f64>| {
        let (ox, oy) = (PX_PER_RAD * g.yaw, -PX_PER_RAD * g.pitch);
        (0..64).all(|i| {
            let t = TAU * i as f64 / 64.0;
            inside_ellipse(ox + radius * t.cos(), oy + radius * t.sin(), axes[0], axes[1])
        })
    };
    let mut g = gaze;
    for _ in 0..400 {
        if fits(g) {
            return g;
        }
        g = GazeAngles { pitch: g.pitch * 0.97, yaw: g.yaw * 0.97 };
    }
    GazeAngles { pitch: 0.0, yaw: 0.0 }
}

/// Clearance kept between iris and sclera edge, in pixels.
fn clearance_px(size: usize) -> f64 {
    (0.5 + 0.008 * size as f64).min(2.0)
}

struct Scene<'a> {
    style: &'a SubjectStyle,
    eyes: [[f64; 2]; 2],
    offset: [f64; 2],
    shift: [f64; 2],
}

impl Scene<'_> {
    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let s = self.style;
        let (u, v) = (u - self.shift[0], v - self.shift[1]);
        let mut c = s.backdrop;
        if inside_ellipse(u - 0.5, v - 0.56, 0.37, 0.46) {
            let t = s.texture;
            let m = 1.0 + t[0] * (TAU * (t[1] * u + t[2] * v) + t[3]).sin() * (TAU * t[4] * (u - v) + t[5]).cos();
            c = [s.skin[0] * m, s.skin[1] * m, s.skin[2] * m];
            if inside_ellipse(u - 0.5, v - 0.63, 0.035, 0.07) {
                c = [c[0] * 0.85, c[1] * 0.85, c[2] * 0.85];
            }
            if inside_ellipse(u - 0.5, v - 0.8, 0.1, 0.028) {
                c = s.lips;
            }
        }
        if v < 0.3 && inside_ellipse(u - 0.5, v - 0.22, 0.42, 0.2) {
            c = s.hair;
        }
        for e in &self.eyes {
            let (dx, dy) = (u - e[0], v - e[1]);
            if inside_ellipse(dx, dy + 0.085, 0.095, 0.014) {
                c = s.hair;
            }
            if inside_ellipse(dx, dy, s.axes[0] * 1.12, s.axes[1] * 1.25) {
                c = [c[0] * 0.55, c[1] * 0.5, c[2] * 0.5];
            }
            if inside_ellipse(dx, dy, s.axes[0], s.axes[1]) {
                c = s.sclera;
                let (ix, iy) = (dx - self.offset[0], dy - self.offset[1]);
                let d2 = ix * ix + iy * iy;
                if d2 <= s.iris_r * s.iris_r {
                    c = s.iris;
                    if d2 <= (0.45 * s.iris_r).powi(2) {
                        c = [18.0, 16.0, 16.0];
                    }
                }
            }
        }
        c
    }

    fn in_eye_box(&self, u: f64, v: f64) -> bool {
        let (u, v) = (u - self.shift[0], v - self.shift[1]);
        self.eyes.iter().any(|e| (u - e[0]).abs() < self.style.axes[0] * 1.2 && (v - e[1]).abs() < 0.11)
    }
}

/// Renders one image; returns the (possibly clipped) label and its geometry.
pub fn render_face(
    style: &SubjectStyle,
    gaze: GazeAngles<f64>,
    size: usize,
    light: Lighting,
) -> Result<(ImageU8, GazeAngles<f64>, GeometryMeta)> {
    ensure!(size >= 8, "image size must be at least 8, got {size}");
    let sf = size as f64;
    let gaze = clip_gaze(gaze, style.axes, style.iris_r + clearance_px(size) / sf);
    let offset = [PX_PER_RAD * gaze.yaw, -PX_PER_RAD * gaze.pitch];
    let eyes = [[0.5 - style.eye_dx, style.eye_y], [0.5 + style.eye_dx, style.eye_y]];
    let scene = Scene { style, eyes, offset, shift: light.shift };

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u0, v0) = ((x as f64 + 0.5) / sf, (y as f64 + 0.5) / sf);
            let ss = if scene.in_eye_box(u0, v0) { 4 } else { 2 };
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss as f64) / sf;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss as f64) / sf;
                    let c = scene.shade(u, v);
                    acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                }
            }
            let l = light.gain * (1.0 + light.slope * (u0 - 0.5));
            let n = (ss * ss) as f64;
            data.extend(acc.iter().map(|a| quantize(a / n * l)));
        }
    }
    let eye_meta = |e: [f64; 2]| EyeMeta {
        center: [(e[0] + light.shift[0]) * sf, (e[1] + light.shift[1]) * sf],
        sclera_axes: [style.axes[0] * sf, style.axes[1] * sf],
        iris_radius: style.iris_r * sf,
        pupil_radius: 0.45 * style.iris_r * sf,
        iris_offset: [offset[0] * sf, offset[1] * sf],
    };
    let meta = GeometryMeta { image_size: size, px_per_rad: PX_PER_RAD * sf, eyes: [eye_meta(eyes[0]), eye_meta(eyes[1])] };
    Ok((ImageU8::new(size, size, 3, data)?, gaze, meta))
}

/// A rendered sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub subject_id: String,
    pub file_name: String,
    pub gaze: GazeAngles<f64>,
    pub geometry: GeometryMeta,
    pub image: ImageU8,
}

/// Draws the nuisance and gaze parameters for one image and renders it.
pub fn synthesize_one(params: &SynthParams, subject: usize, index: usize) -> Result<SynthSample> {
    let sid = SynthParams::subject_id(subject);
    let style = SubjectStyle::sample(params.seed, &sid);
    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &["sample", &sid, &index.to_string()]));
    let gaze = GazeAngles { pitch: r.random_range(-PITCH_LIMIT..=PITCH_LIMIT), yaw: r.random_range(-YAW_LIMIT..=YAW_LIMIT) };
    let light = Lighting {
        gain: r.random_range(0.88..1.08),
        slope: r.random_range(-0.08..0.08),
        shift: [r.random_range(-0.006..0.006), r.random_range(-0.006..0.006)],
    };
    let (image, gaze, geometry) = render_face(&style, gaze, params.image_size, light)?;
    Ok(SynthSample { file_name: format!("{sid}_{index:04}.png"), subject_id: sid, gaze, geometry, image })
}

/// Renders the whole dataset in memory, in subject then index order.
pub fn synthesize(params: &SynthParams) -> Result<Vec<SynthSample>> {
    params.validate()?;
    let mut out = Vec::with_capacity(params.n_subjects * params.per_subject);
    for s in 0..params.n_subjects {
        for i in 0..params.per_subject {
            out.push(synthesize_one(params, s, i)?);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SynthManifest {
    params: SynthParams,
    content_hash: String,
}

const MANIFEST: &str = "synth.json";

fn mark_synthetic(mut ds: Dataset, seed: u64) -> Dataset {
    for s in &mut ds.samples {
        s.provenance = Provenance::Synthetic { seed };
    }
    ds
}

/// The dataset in `out_dir` when it was generated with `params` and its
/// content hash still matches the recorded one.
pub fn current_synthetic(params: &SynthParams, out_dir: &Path) -> Option<Dataset> {
    let text = std::fs::read_to_string(out_dir.join(MANIFEST)).ok()?;
    let m = serde_json::from_str::<SynthManifest>(&text).ok()?;
    if &m.params != params {
        return None;
    }
    let ds = load_mpii_layout(out_dir).ok()?;
    (ds.content_hash().ok()? == m.content_hash).then(|| mark_synthetic(ds, params.seed))
}

/// Writes a synthetic dataset to `out_dir` in the standard layout.
///
/// When `out_dir` already holds a dataset generated with the same parameters
/// whose content hash still matches, nothing is rewritten.
pub fn generate_synthetic(params: &SynthParams, out_dir: &Path) -> Result<Dataset> {
    params.validate()?;
    if let Some(ds) = current_synthetic(params, out_dir) {
        log::info!("synthetic dataset at {} is up to date", out_dir.display());
        return Ok(ds);
    }
    if out_dir.join(MANIFEST).exists() {
        log::warn!("regenerating stale synthetic dataset at {}", out_dir.display());
    }
    let subjects = out_dir.join("subjects");
    if subjects.exists() {
        std::fs::remove_dir_all(&subjects)?;
    }
    let mut w = LayoutWriter::new(out_dir);
    for s in 0..params.n_subjects {
        for i in 0..params.per_subject {
            let smp = synthesize_one(params, s, i)?;
            w.add(&smp.subject_id, &smp.file_name, &smp.image, smp.gaze, Some(&smp.geometry))?;
        }
    }
    w.finish()?;
    let ds = load_mpii_layout(out_dir)?;
    let manifest = SynthManifest { params: params.clone(), content_hash: ds.content_hash()? };
    write_atomic(&out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(mark_synthetic(ds, params.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_stay_in_range_and_match_offsets() {
        let p = SynthParams { n_subjects: 2, per_subject: 10, image_size: 56, seed: 4 };
        for s in synthesize(&p).unwrap() {
            assert!(s.gaze.pitch.abs() <= PITCH_LIMIT && s.gaze.yaw.abs() <= YAW_LIMIT);
            let k = s.geometry.px_per_rad;
            for e in &s.geometry.eyes {
                assert!((e.iris_offset[0] - k * s.gaze.yaw).abs() < 1e-9);
                assert!((e.iris_offset[1] + k * s.gaze.pitch).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extreme_gaze_is_clipped_not_mislabelled() {
        let style = SubjectStyle::sample(1, "s00");
        let (_, g, meta) = render_face(&style, GazeAngles { pitch: 1.4, yaw: -3.0 }, 64, Lighting::NEUTRAL).unwrap();
        assert!(g.pitch < 1.4 && g.yaw > -3.0);
        assert!((g.yaw / g.pitch - (-3.0 / 1.4)).abs() < 1e-9);
        let e = &meta.eyes[0];
        let r = e.iris_radius;
        for i in 0..32 {
            let t = TAU * i as f64 / 32.0;
            let (x, y) = (e.iris_offset[0] + r * t.cos(), e.iris_offset[1] + r * t.sin());
            assert!(inside_ellipse(x, y, e.sclera_axes[0], e.sclera_axes[1]));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_subject_specific() {
        let p = SynthParams { n_subjects: 2, per_subject: 10, image_size: 32, seed: 9 };
        let a = synthesize_one(&p, 0, 3).unwrap();
        assert_eq!(a.image, synthesize_one(&p, 0, 3).unwrap().image);
        assert_ne!(a.image, synthesize_one(&p, 1, 3).unwrap().image);
    }

    #[test]
    fn scaled_geometry() {
        let p = SynthParams { n_subjects: 2, per_subject: 10, image_size: 40, seed: 2 };
        let g = synthesize_one(&p, 0, 0).unwrap().geometry;
        let h = g.scaled_to(20);
        assert_eq!(h.image_size, 20);
        assert!((h.eyes[1].center[0] * 2.0 - g.eyes[1].center[0]).abs() < 1e-12);
        assert!((h.px_per_rad * 2.0 - g.px_per_rad).abs() < 1e-12);
    }

    #[test]
    fn invalid_params() {
        assert!(SynthParams { n_subjects: 1, per_subject: 10, image_size: 32, seed: 0 }.validate().is_err());
        assert!(SynthParams { n_subjects: 2, per_subject: 9, image_size: 32, seed: 0 }.validate().is_err());
    }

    #[test]
    fn regeneration_is_skipped_when_unchanged() {
        let d = tempfile::tempdir().unwrap();
        let p = SynthParams { n_subjects: 2, per_subject: 10, image_size: 16, seed: 1 };
        let a = generate_synthetic(&p, d.path()).unwrap();
        let probe = &a.samples[0].image_path;
        let t0 = std::fs::metadata(probe).unwrap().modified().unwrap();
        std::thread::sleep(std::time::Duration::from_millis(20));
        let b = generate_synthetic(&p, d.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::metadata(probe).unwrap().modified().unwrap(), t0);
        assert!(matches!(b.samples[0].provenance, Provenance::Synthetic { seed: 1 }));
    }
}

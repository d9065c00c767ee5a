//! Stand-in for face restorers that hallucinate eyes: upscales, then redraws
//! both irises at the sclera centre.

use gazesr_tensor::ResampleMethod;

use crate::data::{EyeMeta, GeometryMeta};
use crate::degrade::resize;
use crate::error::{ensure, Error, Result};
use crate::image::{quantize, ImageU8};

fn median_color(img: &ImageU8, pixels: &[(usize, usize)]) -> Option<Vec<f64>> {
    if pixels.is_empty() {
        return None;
    }
    let c = img.channels();
    Some(
        (0..c)
            .map(|ch| {
                let mut v: Vec<u8> = pixels.iter().map(|&(y, x)| img.get(y, x, ch)).collect();
                v.sort_unstable();
                v[v.len() / 2] as f64
            })
            .collect(),
    )
}

fn redraw_eye(img: &mut ImageU8, e: &EyeMeta) {
    let [cx, cy] = e.center;
    let [a, b] = e.sclera_axes;
    let [ox, oy] = e.iris_offset;
    let r = e.iris_radius;
    let pr = e.pupil_radius;
    let (h, w) = (img.height(), img.width());
    let x0 = (cx - a).floor().max(0.0) as usize;
    let x1 = ((cx + a).ceil() as usize).min(w);
    let y0 = (cy - b).floor().max(0.0) as usize;
    let y1 = ((cy + b).ceil() as usize).min(h);
    let in_sclera = |x: f64, y: f64| ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0;
    let dist_old = |x: f64, y: f64| ((x - cx - ox).powi(2) + (y - cy - oy).powi(2)).sqrt();

    let (mut sclera_px, mut iris_px, mut pupil_px) = (Vec::new(), Vec::new(), Vec::new());
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !(((px - cx) / (0.85 * a)).powi(2) + ((py - cy) / (0.85 * b)).powi(2) <= 1.0) {
                continue;
            }
            let d = dist_old(px, py);
            if d > r + 1.5 {
                sclera_px.push((y, x));
            } else if d > pr + 0.75 && d < r - 0.75 {
                iris_px.push((y, x));
            } else if d < pr - 0.5 {
                pupil_px.push((y, x));
            }
        }
    }
    let Some(sclera) = median_color(img, &sclera_px) else { return };
    let iris = median_color(img, &iris_px).unwrap_or_else(|| vec![90.0; img.channels()]);
    let pupil = median_color(img, &pupil_px).unwrap_or_else(|| vec![20.0; img.channels()]);

    const SS: usize = 4;
    let c = img.channels();
    for y in y0..y1 {
        for x in x0..x1 {
            let mut acc = vec![0.0; c];
            let mut covered = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if !in_sclera(px, py) {
                        continue;
                    }
                    covered += 1;
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                    let col = if d <= pr {
                        &pupil
                    } else if d <= r {
                        &iris
                    } else {
                        &sclera
                    };
                    acc.iter_mut().zip(col).for_each(|(a, v)| *a += v);
                }
            }
            if covered == 0 {
                continue;
            }
            let n = (SS * SS) as f64;
            let keep = (SS * SS - covered) as f64 / n;
            for ch in 0..c {
                let v = acc[ch] / n + keep * img.get(y, x, ch) as f64;
                img.set(y, x, ch, quantize(v));
            }
        }
    }
}

/// Upscales `image` by `scale` (bicubic) and redraws both irises centred in
/// their scleras, using the rendering geometry of the source sample.
///
/// `geometry` may describe the image at any resolution; it is rescaled to the
/// output. A sample already looking straight ahead is returned as the plain
/// upscale.
pub fn center_gaze_stub(image: &ImageU8, geometry: Option<&GeometryMeta>, scale: usize) -> Result<ImageU8> {
    let geometry = geometry.ok_or_else(|| Error::domain("center_gaze_stub needs eye geometry metadata"))?;
    ensure!(scale >= 1, "stub upscale factor must be at least 1");
    ensure!(image.height() == image.width(), "stub expects square images");
    let mut out = resize(image, image.height() * scale, image.width() * scale, ResampleMethod::Bicubic)?;
    let g = geometry.scaled_to(out.height());
    for e in &g.eyes {
        if e.iris_offset[0].abs() < 1e-9 && e.iris_offset[1].abs() < 1e-9 {
            continue;
        }
        redraw_eye(&mut out, e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{render_face, Lighting, SubjectStyle};
    use crate::geometry::GazeAngles;
    use crate::sr::interpolate_upscale;

    #[test]
    fn missing_metadata_is_an_error() {
        let img = ImageU8::filled(16, 16, 3, 0).unwrap();
        assert!(center_gaze_stub(&img, None, 2).is_err());
    }

    #[test]
    fn straight_gaze_is_plain_upscale() {
        let style = SubjectStyle::sample(3, "s01");
        let (img, _, meta) = render_face(&style, GazeAngles::zero(), 32, Lighting::NEUTRAL).unwrap();
        let out = center_gaze_stub(&img, Some(&meta), 2).unwrap();
        assert_eq!(out, interpolate_upscale(&img, 2, ResampleMethod::Bicubic).unwrap());
    }

    #[test]
    fn redrawn_eye_matches_centred_render() {
        let style = SubjectStyle::sample(3, "s01");
        let (img, _, meta) = render_face(&style, GazeAngles { pitch: 0.2, yaw: 0.3 }, 64, Lighting::NEUTRAL).unwrap();
        let (centred, _, _) = render_face(&style, GazeAngles::zero(), 64, Lighting::NEUTRAL).unwrap();
        let out = center_gaze_stub(&img, Some(&meta), 1).unwrap();
        // Inside the sclera the output should now look like the straight-gaze render.
        let e = &meta.eyes[0];
        let (cx, cy) = (e.center[0] as usize, e.center[1] as usize);
        let diff = |a: &ImageU8| -> f64 {
            let mut s = 0.0;
            for y in cy - 2..cy + 3 {
                for x in cx - 4..cx + 5 {
                    s += (a.get(y, x, 0) as f64 - centred.get(y, x, 0) as f64).abs();
                }
            }
            s
        };
        assert!(diff(&out) < 0.25 * diff(&img), "{} vs {}", diff(&out), diff(&img));
    }
}

//! Oracles shared by the integration tests.
#![allow(dead_code)]

use gazesr::data::{EyeMeta, GeometryMeta};
use gazesr::sr::{SrBackboneConfig, SrModel};
use gazesr::{GazeAngles, ImageU8};
use gazesr_tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Iris centre of one eye recovered from pixels alone.
///
/// Pixels whose footprint lies fully inside the sclera ellipse are weighted by
/// how much darker they are than the sclera (estimated as the 90th luma
/// percentile in that region), normalised by the darkest pixel; the weighted
/// centroid is the iris centre.
pub fn iris_center(img: &ImageU8, eye: &EyeMeta) -> Option<[f64; 2]> {
    let luma = img.luma();
    let w = img.width();
    let [cx, cy] = eye.center;
    let [a, b] = eye.sclera_axes;
    let inside = |x: f64, y: f64| ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0;
    let mut region = Vec::new();
    let (x0, x1) = ((cx - a).floor().max(0.0) as usize, ((cx + a).ceil() as usize).min(w));
    let (y0, y1) = ((cy - b).floor().max(0.0) as usize, ((cy + b).ceil() as usize).min(img.height()));
    for y in y0..y1 {
        for x in x0..x1 {
            let (fx, fy) = (x as f64, y as f64);
            if inside(fx, fy) && inside(fx + 1.0, fy) && inside(fx, fy + 1.0) && inside(fx + 1.0, fy + 1.0) {
                region.push((x, y, luma[y * w + x]));
            }
        }
    }
    if region.len() < 4 {
        return None;
    }
    let mut vals: Vec<f64> = region.iter().map(|r| r.2).collect();
    vals.sort_by(|p, q| p.total_cmp(q));
    let hi = vals[(vals.len() as f64 * 0.9) as usize];
    let lo = vals[0];
    if hi - lo < 1e-6 {
        return None;
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for &(x, y, v) in &region {
        let mut wt = ((hi - v) / (hi - lo)).clamp(0.0, 1.0);
        if wt < 0.08 {
            wt = 0.0;
        }
        sw += wt;
        sx += wt * (x as f64 + 0.5);
        sy += wt * (y as f64 + 0.5);
    }
    (sw > 0.0).then(|| [sx / sw, sy / sw])
}

/// Mean iris offset over both eyes, in pixels.
pub fn mean_iris_offset(img: &ImageU8, geom: &GeometryMeta) -> Option<[f64; 2]> {
    let mut acc = [0.0, 0.0];
    for e in &geom.eyes {
        let c = iris_center(img, e)?;
        acc[0] += (c[0] - e.center[0]) / 2.0;
        acc[1] += (c[1] - e.center[1]) / 2.0;
    }
    Some(acc)
}

/// Gaze recovered from the rendered iris positions.
pub fn oracle_gaze(img: &ImageU8, geom: &GeometryMeta) -> Option<GazeAngles<f64>> {
    let o = mean_iris_offset(img, geom)?;
    Some(GazeAngles { pitch: -o[1] / geom.px_per_rad, yaw: o[0] / geom.px_per_rad })
}

pub fn random_input(n: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n * 3 * h * w).map(|_| r.random_range(0.0..1.0)).collect()
}

/// `mean(out * weights)` over the upscaled image.
fn sr_objective(model: &SrModel<f64>, x: &[f64], shape: [usize; 4], weights: &[f64]) -> f64 {
    let g = Graph::new(&model.store);
    let out = model.net.forward(&g, g.input(x.to_vec(), &shape));
    let v = g.to_vec(out.image);
    v.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() / v.len() as f64
}

/// Central differences against backprop for three entries of every SR
/// parameter, in f64. Returns the number of entries checked and the worst
/// relative error.
pub fn sr_gradient_check(cfg: SrBackboneConfig, hw: usize) -> (usize, f64) {
    let mut model = SrModel::<f64>::new(&cfg, 7).unwrap();
    let shape = [1, 3, hw, hw];
    let x = random_input(1, hw, hw, 1);
    let out_len = 3 * hw * hw * cfg.scale * cfg.scale;
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let weights: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();

    let grads = {
        let g = Graph::new(&model.store);
        let out = model.net.forward(&g, g.input(x.clone(), &shape));
        let wv = g.input(weights.clone(), &g.shape(out.image));
        let loss = g.mean(g.mul(out.image, wv));
        let gr = g.backward(loss);
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        ids.into_iter().map(|id| gr.param(id).map(|s| s.to_vec()).unwrap_or_default()).collect::<Vec<_>>()
    };

    let h = 1e-5;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    for (pi, id) in ids.into_iter().enumerate() {
        let n = model.store.get(id).value.len();
        for j in [0, n / 3, n - 1] {
            let orig = model.store.get(id).value[j];
            model.store.get_mut(id).value[j] = orig + h;
            let fp = sr_objective(&model, &x, shape, &weights);
            model.store.get_mut(id).value[j] = orig - h;
            let fm = sr_objective(&model, &x, shape, &weights);
            model.store.get_mut(id).value[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[pi][j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
            checked += 1;
        }
    }
    (checked, worst)
}

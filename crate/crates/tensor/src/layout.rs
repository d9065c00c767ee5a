//! Index maps for [`Graph::gather`](crate::Graph::gather).
//!
//! Each builder returns `(idx, out_shape)` with `out[i] = in[idx[i]]`. Maps can be
//! chained with [`compose`] so a shift + window partition is a single gather.

use crate::graph::GATHER_ZERO;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out = in.permute(perm)`.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(shape.len(), perm.len(), "permute rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..n {
        let src: usize = coord.iter().zip(perm).map(|(c, &p)| c * in_strides[p]).sum();
        idx.push(src as u32);
        for d in (0..coord.len()).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    (idx, out_shape)
}

/// Zero-pads (or crops) the H/W axes of an `[N, H, W, C]` tensor to `(h2, w2)`,
/// anchored at the top-left corner.
pub fn resize_canvas_nhwc(shape: &[usize], h2: usize, w2: usize) -> (Vec<u32>, Vec<usize>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(n * h2 * w2 * c);
    for b in 0..n {
        for y in 0..h2 {
            for x in 0..w2 {
                for ch in 0..c {
                    if y < h && x < w {
                        idx.push((((b * h + y) * w + x) * c + ch) as u32);
                    } else {
                        idx.push(GATHER_ZERO);
                    }
                }
            }
        }
    }
    (idx, vec![n, h2, w2, c])
}

/// Cyclic shift of `[N, H, W, C]`: `out[y][x] = in[(y + dy) mod H][(x + dx) mod W]`.
pub fn roll_nhwc(shape: &[usize], dy: isize, dx: isize) -> (Vec<u32>, Vec<usize>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
                for ch in 0..c {
                    idx.push((((b * h + sy) * w + sx) * c + ch) as u32);
                }
            }
        }
    }
    (idx, shape.to_vec())
}

/// `[N, H, W, C] -> [N * nH * nW, ws * ws, C]`; H and W must be multiples of `ws`.
pub fn window_partition(shape: &[usize], ws: usize) -> (Vec<u32>, Vec<usize>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h % ws == 0 && w % ws == 0, "window_partition: {h}x{w} not divisible by {ws}");
    let (nh, nw) = (h / ws, w / ws);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let (y, x) = (wy * ws + iy, wx * ws + ix);
                        for ch in 0..c {
                            idx.push((((b * h + y) * w + x) * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    (idx, vec![n * nh * nw, ws * ws, c])
}

/// Inverse of [`window_partition`] back to `[N, H, W, C]`.
pub fn window_reverse(n: usize, h: usize, w: usize, c: usize, ws: usize) -> (Vec<u32>, Vec<usize>) {
    let (fwd, _) = window_partition(&[n, h, w, c], ws);
    let mut idx = vec![0u32; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        idx[src as usize] = i as u32;
    }
    (idx, vec![n, h, w, c])
}

/// `[N, C * r * r, H, W] -> [N, C, H * r, W * r]`.
pub fn pixel_shuffle(shape: &[usize], r: usize) -> (Vec<u32>, Vec<usize>) {
    let (n, crr, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(crr % (r * r), 0, "pixel_shuffle: channels {crr} not divisible by {}", r * r);
    let c = crr / (r * r);
    let (h2, w2) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * crr * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let src_c = ch * r * r + (y % r) * r + (x % r);
                    idx.push((((b * crr + src_c) * h + y / r) * w + x / r) as u32);
                }
            }
        }
    }
    (idx, vec![n, c, h2, w2])
}

/// Composite map: gathering with `inner` then with `outer`.
pub fn compose(outer: &[u32], inner: &[u32]) -> Vec<u32> {
    outer.iter().map(|&o| if o == GATHER_ZERO { GATHER_ZERO } else { inner[o as usize] }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(idx: &[u32], data: &[i32]) -> Vec<i32> {
        idx.iter().map(|&i| if i == GATHER_ZERO { 0 } else { data[i as usize] }).collect()
    }

    #[test]
    fn permute_transposes_matrix() {
        let (idx, shape) = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(apply(&idx, &[0, 1, 2, 3, 4, 5]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn window_roundtrip() {
        let shape = [2, 4, 6, 3];
        let data: Vec<i32> = (0..(2 * 4 * 6 * 3)).collect();
        let (p, _) = window_partition(&shape, 2);
        let (r, _) = window_reverse(2, 4, 6, 3, 2);
        assert_eq!(apply(&compose(&r, &p), &data), data);
    }

    #[test]
    fn roll_inverts() {
        let shape = [1, 3, 5, 2];
        let data: Vec<i32> = (0..30).collect();
        let (a, _) = roll_nhwc(&shape, 1, -2);
        let (b, _) = roll_nhwc(&shape, -1, 2);
        assert_eq!(apply(&compose(&b, &a), &data), data);
    }

    #[test]
    fn pixel_shuffle_layout() {
        // one output channel, r = 2, 1x1 spatial: channels become a 2x2 block
        let (idx, shape) = pixel_shuffle(&[1, 4, 1, 1], 2);
        assert_eq!(shape, vec![1, 1, 2, 2]);
        assert_eq!(apply(&idx, &[10, 11, 12, 13]), vec![10, 11, 12, 13]);
    }

    #[test]
    fn canvas_pad_then_crop() {
        let data: Vec<i32> = (1..=12).collect();
        let (pad, s) = resize_canvas_nhwc(&[1, 2, 3, 2], 4, 4);
        let (crop, _) = resize_canvas_nhwc(&s, 2, 3);
        assert_eq!(apply(&compose(&crop, &pad), &data), data);
        assert_eq!(apply(&pad, &data).iter().filter(|v| **v == 0).count(), 32 - 12);
    }
}

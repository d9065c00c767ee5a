//! Shifted-window transformer blocks over `[N, H, W, C]` token grids.

use std::rc::Rc;

use gazesr_tensor::nn::{LayerNorm, Linear};
use gazesr_tensor::{layout, Graph, Init, ParamId, ParamStore, Scalar, Var};
use rand::Rng;

pub(crate) struct SwinBlock {
    norm1: LayerNorm,
    qkv: Linear,
    rel_table: ParamId,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
    heads: usize,
    ws: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ws: usize,
        mlp_hidden: usize,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        let n = (2 * ws - 1) * (2 * ws - 1);
        SwinBlock {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim, rng),
            qkv: Linear::new(ps, &format!("{name}.attn.qkv"), dim, 3 * dim, true, rng),
            rel_table: ps.add(
                format!("{name}.attn.relative_position_bias_table"),
                &[n, heads],
                Init::Normal { std: 0.02 },
                rng,
            ),
            proj: Linear::new(ps, &format!("{name}.attn.proj"), dim, dim, true, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim, rng),
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), dim, mlp_hidden, true, rng),
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), mlp_hidden, dim, true, rng),
            shifted,
            heads,
            ws,
        }
    }

    /// `t`: `[N, H, W, C]` with H and W multiples of the window size.
    pub(crate) fn forward<S: Scalar>(&self, g: &Graph<'_, S>, t: Var) -> Var {
        let shape = g.shape(t);
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let ws = self.ws;
        let shift = if self.shifted && h > ws && w > ws { ws / 2 } else { 0 };

        let x = self.norm1.forward(g, t);
        let (roll, _) = layout::roll_nhwc(&shape, shift as isize, shift as isize);
        let (part, wshape) = layout::window_partition(&shape, ws);
        let windows = g.gather(x, Rc::from(layout::compose(&part, &roll)), &wshape);
        let mask = (shift > 0).then(|| shift_mask(h, w, ws, shift, self.heads));
        let attn = self.attention(g, windows, mask);
        let (rev, _) = layout::window_reverse(n, h, w, c, ws);
        let (unroll, _) = layout::roll_nhwc(&shape, -(shift as isize), -(shift as isize));
        let back = g.gather(attn, Rc::from(layout::compose(&unroll, &rev)), &shape);
        let t = g.add(t, back);

        let m = self.norm2.forward(g, t);
        let m = self.fc2.forward(g, g.gelu(self.fc1.forward(g, m)));
        g.add(t, m)
    }

    /// Multi-head self-attention within windows: `[B, T, C] -> [B, T, C]`.
    fn attention<S: Scalar>(&self, g: &Graph<'_, S>, x: Var, mask: Option<Vec<S>>) -> Var {
        let s = g.shape(x);
        let (b, t, c) = (s[0], s[1], s[2]);
        let heads = self.heads;
        let hd = c / heads;
        let qkv = self.qkv.forward(g, x);
        let split = |part: usize| -> Rc<[u32]> {
            let mut idx = Vec::with_capacity(b * t * c);
            for bi in 0..b {
                for h in 0..heads {
                    for ti in 0..t {
                        let base = (bi * t + ti) * 3 * c + part * c + h * hd;
                        idx.extend((0..hd).map(|d| (base + d) as u32));
                    }
                }
            }
            idx.into()
        };
        let hshape = [b * heads, t, hd];
        let q = g.scale(g.gather(qkv, split(0), &hshape), S::of(1.0 / (hd as f64).sqrt()));
        let k = g.gather(qkv, split(1), &hshape);
        let v = g.gather(qkv, split(2), &hshape);

        let mut attn = g.bmm(q, k, true);
        let table = g.param(self.rel_table);
        let bias = g.gather(table, relative_index(self.ws, heads), &[heads, t, t]);
        attn = g.add_tiled(attn, bias);
        if let Some(m) = mask {
            let nw = m.len() / (heads * t * t);
            let mv = g.input(m, &[nw, heads, t, t]);
            attn = g.add_tiled(attn, mv);
        }
        let out = g.bmm(g.softmax(attn), v, false);

        let mut idx = Vec::with_capacity(b * t * c);
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let base = ((bi * heads + h) * t + ti) * hd;
                    idx.extend((0..hd).map(|d| (base + d) as u32));
                }
            }
        }
        let merged = g.gather(out, idx.into(), &[b, t, c]);
        self.proj.forward(g, merged)
    }
}

/// Index of `table[rel(i, j), h]` for every `(h, i, j)` of a window.
pub(crate) fn relative_index(ws: usize, heads: usize) -> Rc<[u32]> {
    let t = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            let (yi, xi) = (i / ws, i % ws);
            for j in 0..t {
                let (yj, xj) = (j / ws, j % ws);
                let rel = (yi + ws - 1 - yj) * span + (xi + ws - 1 - xj);
                idx.push((rel * heads + h) as u32);
            }
        }
    }
    idx.into()
}

/// Additive mask `[nW, heads, T, T]`: 0 within a region of the shifted grid, -100 across.
pub(crate) fn shift_mask<S: Scalar>(h: usize, w: usize, ws: usize, shift: usize, heads: usize) -> Vec<S> {
    let region = |p: usize, len: usize| -> usize {
        if p < len - ws {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let t = ws * ws;
    let mut out = Vec::with_capacity(nh * nw * heads * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|i| region(wy * ws + i / ws, h) * 3 + region(wx * ws + i % ws, w))
                .collect();
            for _ in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        out.push(if ids[i] == ids[j] { S::zero() } else { S::of(-100.0) });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_is_symmetric_about_the_centre() {
        let ws = 3;
        let idx = relative_index(ws, 1);
        let t = ws * ws;
        // diagonal is the zero offset: (ws-1)*(2ws-1) + (ws-1)
        let centre = ((ws - 1) * (2 * ws - 1) + ws - 1) as u32;
        assert!((0..t).all(|i| idx[i * t + i] == centre));
        let span = (2 * ws - 1) as u32;
        // token 0 = (0,0), token t-1 = (2,2): offsets (-2,-2) and (2,2)
        assert_eq!(idx[t - 1], 0);
        assert_eq!(idx[(t - 1) * t], span * span - 1);
    }

    #[test]
    fn mask_only_blocks_the_wrapped_border_windows() {
        let m: Vec<f64> = shift_mask(8, 8, 4, 2, 1);
        let t = 16;
        let window = |k: usize| &m[k * t * t..(k + 1) * t * t];
        assert!(window(0).iter().all(|&v| v == 0.0));
        assert!(window(3).iter().any(|&v| v == -100.0));
        // mask is symmetric
        let w3 = window(3);
        assert!((0..t).all(|i| (0..t).all(|j| w3[i * t + j] == w3[j * t + i])));
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for parameters and for inputs created with
//! [`Graph::input_with_grad`]. Graphs are cheap and single-use: build one per
//! step (or per inference batch) and drop it afterwards.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index value meaning "write zero" in a gather map.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    LeakyRelu(Var, S),
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<S>, rstd: Vec<S> },
    Gather { x: Var, idx: Rc<[u32]> },
    ConcatAxis1(Vec<Var>),
    Resample { x: Var, rows: Rc<[S]>, cols: Rc<[S]> },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    MeanSpatial(Var),
    Reshape(Var),
    Mean(Var),
    L1Loss { pred: Var, target: Vec<S> },
    Dropout { x: Var, mask: Vec<S> },
}

struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: RefCell<Vec<Node<S>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    params: Vec<(ParamId, Vec<S>)>,
    inputs: HashMap<Var, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn input(&self, v: Var) -> Option<&[S]> {
        self.inputs.get(&v).map(|g| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += *src;
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Inference graph: dropout disabled.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Graph {
            params,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Training graph; `seed` drives dropout masks.
    pub fn training(params: &'p ParamStore<S>, seed: u64) -> Self {
        Graph {
            params,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            training: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "value/shape mismatch");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, shape, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [S]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn to_vec(&self, v: Var) -> Vec<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> S {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.len(), 1, "scalar() on a non-scalar node");
        nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&self, value: Vec<S>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "input value does not match shape {shape:?}");
        self.push(value, shape.to_vec(), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&self, value: Vec<S>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "input value does not match shape {shape:?}");
        self.push(value, shape.to_vec(), Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let p = self.params.get(id);
        let v = self.push(p.value.clone(), p.shape.clone(), Op::Param(id), p.trainable);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!(na.shape, nb.shape, "add: shape mismatch");
            (na.value.iter().zip(&nb.value).map(|(x, y)| *x + *y).collect(), na.shape.clone())
        };
        let g = self.any_grad(&[a, b]);
        self.push(value, shape, Op::Add(a, b), g)
    }

    /// `a + b` where `b` is repeated over `a`'s leading elements (`b.numel` divides `a.numel`
    /// and `b`'s shape is a suffix of `a`'s).
    pub fn add_tiled(&self, a: Var, b: Var) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let k = nb.value.len();
            assert!(
                na.shape.ends_with(&nb.shape) || na.value.len() % k == 0,
                "add_tiled: {:?} is not tileable over {:?}",
                nb.shape,
                na.shape
            );
            assert_eq!(na.value.len() % k, 0, "add_tiled: size mismatch");
            let v = na.value.iter().enumerate().map(|(i, x)| *x + nb.value[i % k]).collect();
            (v, na.shape.clone())
        };
        let g = self.any_grad(&[a, b]);
        self.push(value, shape, Op::AddTiled(a, b), g)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!(na.shape, nb.shape, "mul: shape mismatch");
            (na.value.iter().zip(&nb.value).map(|(x, y)| *x * *y).collect(), na.shape.clone())
        };
        let g = self.any_grad(&[a, b]);
        self.push(value, shape, Op::Mul(a, b), g)
    }

    pub fn scale(&self, a: Var, s: S) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.iter().map(|x| *x * s).collect(), nodes[a.0].shape.clone())
        };
        let g = self.any_grad(&[a]);
        self.push(value, shape, Op::Scale(a, s), g)
    }

    fn unary(&self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.iter().map(|x| f(*x)).collect(), nodes[a.0].shape.clone())
        };
        let g = self.any_grad(&[a]);
        self.push(value, shape, op, g)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let s = S::of(slope);
        self.unary(a, move |x| if x > S::zero() { x } else { x * s }, Op::LeakyRelu(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu_fwd, Op::Gelu(a))
    }

    pub fn dropout(&self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = S::of(1.0 / (1.0 - p));
        let (value, shape, mask) = {
            let nodes = self.nodes.borrow();
            let mut rng = self.rng.borrow_mut();
            let n = &nodes[a.0];
            let mask: Vec<S> =
                (0..n.value.len()).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect();
            let v = n.value.iter().zip(&mask).map(|(x, m)| *x * *m).collect();
            (v, n.shape.clone(), mask)
        };
        let g = self.any_grad(&[a]);
        self.push(value, shape, Op::Dropout { x: a, mask }, g)
    }

    // ---------------------------------------------------------------- linear algebra

    /// 2-D convolution, NCHW input, OIHW weight, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let geo = ConvGeom::new(&nx.shape, &nw.shape, spec);
            let mut out = vec![S::zero(); geo.n * geo.o * geo.p()];
            let mut col = vec![S::zero(); geo.ckk() * geo.p()];
            for n in 0..geo.n {
                let xn = &nx.value[n * geo.c * geo.h * geo.w..(n + 1) * geo.c * geo.h * geo.w];
                let colref: &[S] = if geo.is_pointwise() {
                    xn
                } else {
                    geo.im2col(xn, &mut col);
                    &col
                };
                let on = &mut out[n * geo.o * geo.p()..(n + 1) * geo.o * geo.p()];
                gemm(
                    S::one(),
                    MatRef::new(&nw.value, geo.o, geo.ckk()),
                    MatRef::new(colref, geo.ckk(), geo.p()),
                    S::zero(),
                    on,
                );
                if let Some(b) = b {
                    let bias = &nodes[b.0].value;
                    for (o, row) in on.chunks_mut(geo.p()).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[o]);
                    }
                }
            }
            (out, vec![geo.n, geo.o, geo.ho, geo.wo])
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        self.push(value, shape, Op::Conv2d { x, w, b, spec }, g)
    }

    /// `x @ w^T + b` over the last dimension; `w` is `[out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let (fo, fi) = (nw.shape[0], nw.shape[1]);
            let d = *nx.shape.last().expect("linear on scalar");
            assert_eq!(d, fi, "linear: input features {d} != weight in-features {fi}");
            let m = nx.value.len() / fi;
            let mut out = vec![S::zero(); m * fo];
            gemm(S::one(), MatRef::new(&nx.value, m, fi), MatRef::t(&nw.value, fo, fi), S::zero(), &mut out);
            if let Some(b) = b {
                let bias = &nodes[b.0].value;
                for row in out.chunks_mut(fo) {
                    row.iter_mut().zip(bias).for_each(|(v, bb)| *v += *bb);
                }
            }
            let mut shape = nx.shape.clone();
            *shape.last_mut().unwrap() = fo;
            (out, shape)
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        self.push(value, shape, Op::Linear { x, w, b }, g)
    }

    /// Batched matmul: `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (bs, m, k) = split3(&na.shape);
            let (bs2, r, c) = split3(&nb.shape);
            assert_eq!(bs, bs2, "bmm: batch mismatch");
            let n = if trans_b {
                assert_eq!(c, k, "bmm: inner mismatch");
                r
            } else {
                assert_eq!(r, k, "bmm: inner mismatch");
                c
            };
            let mut out = vec![S::zero(); bs * m * n];
            for i in 0..bs {
                let ai = &na.value[i * m * k..(i + 1) * m * k];
                let bi = &nb.value[i * k * n..(i + 1) * k * n];
                let bref = if trans_b { MatRef::t(bi, n, k) } else { MatRef::new(bi, k, n) };
                gemm(S::one(), MatRef::new(ai, m, k), bref, S::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
            let mut shape = na.shape[..na.shape.len() - 2].to_vec();
            shape.extend([m, n]);
            (out, shape)
        };
        let g = self.any_grad(&[a, b]);
        self.push(value, shape, Op::Bmm { a, b, trans_b }, g)
    }

    // ---------------------------------------------------------------- normalisation

    pub fn softmax(&self, a: Var) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let d = *n.shape.last().unwrap();
            let mut out = n.value.clone();
            for row in out.chunks_mut(d) {
                let mx = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
                let mut sum = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            (out, n.shape.clone())
        };
        let g = self.any_grad(&[a]);
        self.push(value, shape, Op::Softmax(a), g)
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, shape, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let d = *n.shape.last().unwrap();
            let (gm, bt) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            assert_eq!(gm.len(), d, "layer_norm: gamma size");
            let rows = n.value.len() / d;
            let mut xhat = vec![S::zero(); n.value.len()];
            let mut rstd = vec![S::zero(); rows];
            let mut out = vec![S::zero(); n.value.len()];
            let dn = S::of(d as f64);
            for r in 0..rows {
                let row = &n.value[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / dn;
                let rs = S::one() / (var + S::of(eps)).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm[j] + bt[j];
                }
            }
            (out, n.shape.clone(), xhat, rstd)
        };
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(value, shape, Op::LayerNorm { x, gamma, beta, xhat, rstd }, g)
    }

    /// Group norm over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (value, shape, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (bn, c) = (n.shape[0], n.shape[1]);
            assert_eq!(c % groups, 0, "group_norm: channels {c} not divisible by {groups}");
            let inner = n.value.len() / (bn * c);
            let cg = c / groups;
            let glen = cg * inner;
            let (gm, bt) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let mut xhat = vec![S::zero(); n.value.len()];
            let mut rstd = vec![S::zero(); bn * groups];
            let mut out = vec![S::zero(); n.value.len()];
            let gn = S::of(glen as f64);
            for s in 0..bn * groups {
                let base = s * glen;
                let seg = &n.value[base..base + glen];
                let mean = seg.iter().copied().sum::<S>() / gn;
                let var = seg.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / gn;
                let rs = S::one() / (var + S::of(eps)).sqrt();
                rstd[s] = rs;
                let g0 = (s % groups) * cg;
                for j in 0..glen {
                    let ch = g0 + j / inner;
                    let h = (seg[j] - mean) * rs;
                    xhat[base + j] = h;
                    out[base + j] = h * gm[ch] + bt[ch];
                }
            }
            (out, n.shape.clone(), xhat, rstd)
        };
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(value, shape, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, g)
    }

    // ---------------------------------------------------------------- layout

    /// `out[i] = x[idx[i]]` (or zero for [`GATHER_ZERO`]), reshaped to `shape`.
    pub fn gather(&self, x: Var, idx: Rc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(idx.len(), numel(shape), "gather: index map does not match shape");
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].value;
            idx.iter().map(|&i| if i == GATHER_ZERO { S::zero() } else { src[i as usize] }).collect()
        };
        let g = self.any_grad(&[x]);
        self.push(value, shape.to_vec(), Op::Gather { x, idx }, g)
    }

    /// Axis permutation (general transpose).
    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x);
        let (idx, out_shape) = crate::layout::permute_index(&shape, perm);
        self.gather(x, idx.into(), &out_shape)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self.to_vec(x);
        assert_eq!(value.len(), numel(shape), "reshape: element count mismatch");
        let g = self.any_grad(&[x]);
        self.push(value, shape.to_vec(), Op::Reshape(x), g)
    }

    /// Concatenate along axis 1 (`[N, C_i, ...]`).
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].shape;
            let n = first[0];
            let inner: usize = first[2..].iter().product();
            let mut c_total = 0;
            for p in parts {
                let s = &nodes[p.0].shape;
                assert_eq!(s[0], n, "concat: batch mismatch");
                assert_eq!(&s[2..], &first[2..], "concat: spatial mismatch");
                c_total += s[1];
            }
            let mut out = Vec::with_capacity(n * c_total * inner);
            for b in 0..n {
                for p in parts {
                    let np = &nodes[p.0];
                    let blk = np.shape[1] * inner;
                    out.extend_from_slice(&np.value[b * blk..(b + 1) * blk]);
                }
            }
            let mut shape = first.clone();
            shape[1] = c_total;
            (out, shape)
        };
        let g = self.any_grad(parts);
        self.push(value, shape, Op::ConcatAxis1(parts.to_vec()), g)
    }

    /// Separable linear resampling of `[N, C, H, W]` planes: `out = rows · X · colsᵀ`
    /// with `rows: [Ho, H]`, `cols: [Wo, W]`.
    pub fn resample(&self, x: Var, rows: Rc<[S]>, cols: Rc<[S]>, out_hw: (usize, usize)) -> Var {
        let (ho, wo) = out_hw;
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (bn, c, h, w) = split4(&n.shape);
            assert_eq!(rows.len(), ho * h, "resample: row matrix size");
            assert_eq!(cols.len(), wo * w, "resample: col matrix size");
            let mut out = vec![S::zero(); bn * c * ho * wo];
            let mut tmp = vec![S::zero(); h * wo];
            for plane in 0..bn * c {
                let src = &n.value[plane * h * w..(plane + 1) * h * w];
                gemm(S::one(), MatRef::new(src, h, w), MatRef::t(&cols, wo, w), S::zero(), &mut tmp);
                gemm(
                    S::one(),
                    MatRef::new(&rows, ho, h),
                    MatRef::new(&tmp, h, wo),
                    S::zero(),
                    &mut out[plane * ho * wo..(plane + 1) * ho * wo],
                );
            }
            (out, vec![bn, c, ho, wo])
        };
        let g = self.any_grad(&[x]);
        self.push(value, shape, Op::Resample { x, rows, cols }, g)
    }

    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (value, shape, argmax) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (bn, c, h, w) = split4(&n.shape);
            let ho = (h + 2 * pad - kernel) / stride + 1;
            let wo = (w + 2 * pad - kernel) / stride + 1;
            let mut out = vec![S::zero(); bn * c * ho * wo];
            let mut arg = vec![GATHER_ZERO; out.len()];
            for plane in 0..bn * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = S::neg_infinity();
                        let mut bi = GATHER_ZERO;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = base + iy as usize * w + ix as usize;
                                if n.value[i] > best {
                                    best = n.value[i];
                                    bi = i as u32;
                                }
                            }
                        }
                        let o = plane * ho * wo + oy * wo + ox;
                        out[o] = best;
                        arg[o] = bi;
                    }
                }
            }
            (out, vec![bn, c, ho, wo], arg)
        };
        let g = self.any_grad(&[x]);
        self.push(value, shape, Op::MaxPool2d { x, argmax }, g)
    }

    /// Mean over all trailing dims of `[N, C, ...]` giving `[N, C]`.
    pub fn mean_spatial(&self, x: Var) -> Var {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (bn, c) = (n.shape[0], n.shape[1]);
            let inner = n.value.len() / (bn * c);
            let inv = S::of(1.0 / inner as f64);
            (n.value.chunks(inner).map(|ch| ch.iter().copied().sum::<S>() * inv).collect(), vec![bn, c])
        };
        let g = self.any_grad(&[x]);
        self.push(value, shape, Op::MeanSpatial(x), g)
    }

    // ---------------------------------------------------------------- reductions / losses

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            vec![v.iter().copied().sum::<S>() / S::of(v.len() as f64)]
        };
        let g = self.any_grad(&[x]);
        self.push(value, vec![1], Op::Mean(x), g)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, pred: Var, target: Vec<S>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            assert_eq!(p.len(), target.len(), "l1_loss: size mismatch");
            let s: S = p.iter().zip(&target).map(|(a, b)| (*a - *b).abs()).sum();
            vec![s / S::of(p.len() as f64)]
        };
        let g = self.any_grad(&[pred]);
        self.push(value, vec![1], Op::L1Loss { pred, target }, g)
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        let mut out = Gradients { params: Vec::new(), inputs: HashMap::new() };
        if !nodes[root.0].needs_grad {
            return out;
        }
        grads[root.0] = Some(vec![S::one(); nodes[root.0].value.len()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::Add(a, b) => {
                    add_into(&mut grads, &nodes, *a, &g);
                    add_into(&mut grads, &nodes, *b, &g);
                }
                Op::AddTiled(a, b) => {
                    add_into(&mut grads, &nodes, *a, &g);
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        let k = gb.len();
                        for (j, v) in g.iter().enumerate() {
                            gb[j % k] += *v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * vb[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for j in 0..g.len() {
                            gb[j] += g[j] * va[j];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(d, v)| *d += *v * *s);
                    }
                }
                Op::Relu(a) => {
                    let va = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            if va[j] > S::zero() {
                                ga[j] += g[j];
                            }
                        }
                    }
                }
                Op::LeakyRelu(a, s) => {
                    let va = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += if va[j] > S::zero() { g[j] } else { g[j] * *s };
                        }
                    }
                }
                Op::Gelu(a) => {
                    let va = &nodes[a.0].value;
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * gelu_grad(va[j]);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for j in 0..g.len() {
                            gx[j] += g[j] * mask[j];
                        }
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    conv2d_backward(&mut grads, &nodes, &g, *x, *w, *b, *spec);
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (fo, fi) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                    let m = vx.len() / fi;
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        gemm(S::one(), MatRef::new(&g, m, fo), MatRef::new(vw, fo, fi), S::one(), gx);
                    }
                    if let Some(gw) = slot(&mut grads, &nodes, *w) {
                        gemm(S::one(), MatRef::t(&g, m, fo), MatRef::new(vx, m, fi), S::one(), gw);
                    }
                    if let Some(b) = b {
                        if let Some(gb) = slot(&mut grads, &nodes, *b) {
                            for row in g.chunks(fo) {
                                gb.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                            }
                        }
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (bs, m, k) = split3(&nodes[a.0].shape);
                    let n = node.shape[node.shape.len() - 1];
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &vb[i * k * n..(i + 1) * k * n];
                            // dA = dC · Bᵀ
                            let bt = if *trans_b { MatRef::new(bi, n, k) } else { MatRef::t(bi, k, n) };
                            gemm(S::one(), MatRef::new(gi, m, n), bt, S::one(), &mut ga[i * m * k..(i + 1) * m * k]);
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &va[i * m * k..(i + 1) * m * k];
                            let dst = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // B stored [n, k]: dB = dCᵀ · A
                                gemm(S::one(), MatRef::t(gi, m, n), MatRef::new(ai, m, k), S::one(), dst);
                            } else {
                                gemm(S::one(), MatRef::t(ai, m, k), MatRef::new(gi, m, n), S::one(), dst);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let d = *node.shape.last().unwrap();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for r in 0..y.len() / d {
                            let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                            let dot: S = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                            for j in 0..d {
                                ga[r * d + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = *node.shape.last().unwrap();
                    let gm = &nodes[gamma.0].value;
                    if let Some(gg) = slot(&mut grads, &nodes, *gamma) {
                        for (j, v) in g.iter().enumerate() {
                            gg[j % d] += *v * xhat[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *beta) {
                        for (j, v) in g.iter().enumerate() {
                            gb[j % d] += *v;
                        }
                    }
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let dn = S::of(d as f64);
                        let mut dxh = vec![S::zero(); d];
                        for r in 0..rstd.len() {
                            let (mut m1, mut m2) = (S::zero(), S::zero());
                            for j in 0..d {
                                dxh[j] = g[r * d + j] * gm[j];
                                m1 += dxh[j];
                                m2 += dxh[j] * xhat[r * d + j];
                            }
                            m1 /= dn;
                            m2 /= dn;
                            for j in 0..d {
                                gx[r * d + j] += rstd[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
                            }
                        }
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                    let (bn, c) = (node.shape[0], node.shape[1]);
                    let inner = node.value.len() / (bn * c);
                    let cg = c / groups;
                    let glen = cg * inner;
                    let gm = &nodes[gamma.0].value;
                    let chan = |j: usize| (j / inner) % c;
                    if let Some(gg) = slot(&mut grads, &nodes, *gamma) {
                        for (j, v) in g.iter().enumerate() {
                            gg[chan(j)] += *v * xhat[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *beta) {
                        for (j, v) in g.iter().enumerate() {
                            gb[chan(j)] += *v;
                        }
                    }
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let gn = S::of(glen as f64);
                        let mut dxh = vec![S::zero(); glen];
                        for s in 0..bn * groups {
                            let base = s * glen;
                            let (mut m1, mut m2) = (S::zero(), S::zero());
                            for j in 0..glen {
                                dxh[j] = g[base + j] * gm[chan(base + j)];
                                m1 += dxh[j];
                                m2 += dxh[j] * xhat[base + j];
                            }
                            m1 /= gn;
                            m2 /= gn;
                            for j in 0..glen {
                                gx[base + j] += rstd[s] * (dxh[j] - m1 - xhat[base + j] * m2);
                            }
                        }
                    }
                }
                Op::Gather { x, idx } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (j, &src) in idx.iter().enumerate() {
                            if src != GATHER_ZERO {
                                gx[src as usize] += g[j];
                            }
                        }
                    }
                }
                Op::ConcatAxis1(parts) => {
                    let n = node.shape[0];
                    let inner: usize = node.shape[2..].iter().product();
                    let c_total = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let cp = nodes[p.0].shape[1];
                        if let Some(gp) = slot(&mut grads, &nodes, *p) {
                            for b in 0..n {
                                let src = &g[(b * c_total + offset) * inner..(b * c_total + offset + cp) * inner];
                                let dst = &mut gp[b * cp * inner..(b + 1) * cp * inner];
                                dst.iter_mut().zip(src).for_each(|(d, v)| *d += *v);
                            }
                        }
                        offset += cp;
                    }
                }
                Op::Resample { x, rows, cols } => {
                    let (bn, c, h, w) = split4(&nodes[x.0].shape);
                    let (ho, wo) = (node.shape[2], node.shape[3]);
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let mut tmp = vec![S::zero(); h * wo];
                        for plane in 0..bn * c {
                            let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                            gemm(S::one(), MatRef::t(rows, ho, h), MatRef::new(gp, ho, wo), S::zero(), &mut tmp);
                            gemm(
                                S::one(),
                                MatRef::new(&tmp, h, wo),
                                MatRef::new(cols, wo, w),
                                S::one(),
                                &mut gx[plane * h * w..(plane + 1) * h * w],
                            );
                        }
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (j, &src) in argmax.iter().enumerate() {
                            if src != GATHER_ZERO {
                                gx[src as usize] += g[j];
                            }
                        }
                    }
                }
                Op::MeanSpatial(x) => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let inner = gx.len() / g.len();
                        let inv = S::of(1.0 / inner as f64);
                        for (j, d) in gx.iter_mut().enumerate() {
                            *d += g[j / inner] * inv;
                        }
                    }
                }
                Op::Reshape(x) => add_into(&mut grads, &nodes, *x, &g),
                Op::Mean(x) => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let s = g[0] / S::of(gx.len() as f64);
                        gx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::L1Loss { pred, target } => {
                    let vp = &nodes[pred.0].value;
                    if let Some(gp) = slot(&mut grads, &nodes, *pred) {
                        let s = g[0] / S::of(gp.len() as f64);
                        for j in 0..gp.len() {
                            let diff = vp[j] - target[j];
                            if diff > S::zero() {
                                gp[j] += s;
                            } else if diff < S::zero() {
                                gp[j] -= s;
                            }
                        }
                    }
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        out
    }
}

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var, g: &[S]) {
    if let Some(dst) = slot(grads, nodes, v) {
        dst.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
    }
}

fn split3(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 3, "expected a batched matrix, got {shape:?}");
    let k = shape.len();
    (shape[..k - 2].iter().product(), shape[k - 2], shape[k - 1])
}

fn split4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        let (n, c, h, wd) = split4(x);
        let (o, ci, kh, kw) = split4(w);
        assert_eq!(c, ci, "conv2d: input channels {c} != weight channels {ci}");
        assert!(h + 2 * spec.pad >= kh && wd + 2 * spec.pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        ConvGeom { n, c, h, w: wd, o, kh, kw, ho, wo, stride: spec.stride, pad: spec.pad }
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<S: Scalar>(&self, x: &[S], col: &mut [S]) {
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            row.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..(c * self.h + iy as usize + 1) * self.w];
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { S::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<S: Scalar>(&self, col: &[S], dx: &mut [S]) {
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    g: &[S],
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: Conv2dSpec,
) {
    let geo = ConvGeom::new(&nodes[x.0].shape, &nodes[w.0].shape, spec);
    let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
    let (p, ckk, o) = (geo.p(), geo.ckk(), geo.o);
    let xs = geo.c * geo.h * geo.w;

    if let Some(b) = b {
        if let Some(gb) = slot(grads, nodes, b) {
            for n in 0..geo.n {
                for oc in 0..o {
                    let row = &g[(n * o + oc) * p..(n * o + oc + 1) * p];
                    gb[oc] += row.iter().copied().sum::<S>();
                }
            }
        }
    }

    let mut col = vec![S::zero(); ckk * p];
    if let Some(gw) = slot(grads, nodes, w) {
        for n in 0..geo.n {
            let xn = &vx[n * xs..(n + 1) * xs];
            let colref: &[S] = if geo.is_pointwise() {
                xn
            } else {
                geo.im2col(xn, &mut col);
                &col
            };
            let gn = &g[n * o * p..(n + 1) * o * p];
            gemm(S::one(), MatRef::new(gn, o, p), MatRef::t(colref, ckk, p), S::one(), gw);
        }
    }
    if let Some(gx) = slot(grads, nodes, x) {
        for n in 0..geo.n {
            let gn = &g[n * o * p..(n + 1) * o * p];
            let dst = &mut gx[n * xs..(n + 1) * xs];
            if geo.is_pointwise() {
                gemm(S::one(), MatRef::t(vw, o, ckk), MatRef::new(gn, o, p), S::one(), dst);
            } else {
                gemm(S::one(), MatRef::t(vw, o, ckk), MatRef::new(gn, o, p), S::zero(), &mut col);
                geo.col2im_add(&col, dst);
            }
        }
    }
}

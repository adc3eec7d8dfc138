//! Position and channel self-attention.
//!
//! Both modules end in `y = gamma * attended + x` with a learnable scalar
//! `gamma` that starts at zero, so a fresh module is the identity.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::layers::Conv2d;
use crate::param::{join, Module, Param};

/// Row-wise softmax in place.
fn softmax_rows(mut m: ArrayViewMut2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        row.mapv_inplace(|v| {
            // Subnormal weights are flushed: they are negligible and make
            // the following matrix products very slow.
            let e = (v - max).exp();
            let e = if e < f32::MIN_POSITIVE { 0.0 } else { e };
            sum += e as f64;
            e
        });
        let inv = (1.0 / sum) as f32;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Backward of a row softmax: `dE = A * (dA - rowsum(dA * A))`, in place on
/// `da`.
fn softmax_rows_backward(a: ArrayView2<f32>, mut da: ArrayViewMut2<f32>) {
    for (arow, mut drow) in a.rows().into_iter().zip(da.rows_mut()) {
        let dot: f64 = arow.iter().zip(drow.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
        let dot = dot as f32;
        drow.zip_mut_with(&arow, |d, &x| *d = x * (*d - dot));
    }
}

fn plane(x: &Array4<f32>, b: usize) -> ArrayView2<'_, f32> {
    let (_, c, h, w) = x.dim();
    x.index_axis(Axis(0), b)
        .into_shape_with_order((c, h * w))
        .expect("standard layout")
}

fn plane_mut(x: &mut Array4<f32>, b: usize) -> ArrayViewMut2<'_, f32> {
    let (_, c, h, w) = x.dim();
    x.index_axis_mut(Axis(0), b)
        .into_shape_with_order((c, h * w))
        .expect("standard layout")
}

fn channel_affinity(xm: ArrayView2<f32>) -> Array2<f32> {
    let c = xm.nrows();
    let mut e = Array2::<f32>::zeros((c, c));
    general_mat_mul(1.0, &xm, &xm.t(), 0.0, &mut e);
    for mut row in e.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| max - v);
    }
    softmax_rows(e.view_mut());
    e
}

/// Query rows processed at once when no backward pass is needed; bounds the
/// memory of the `N x N` affinity at large grids.
const EVAL_BLOCK: usize = 1024;

/// Position attention: every location aggregates the value features of all
/// locations, weighted by a softmax over query-key products.
#[derive(Debug, Clone)]
pub struct PositionAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: Param,
    cache: Option<PamCache>,
}

#[derive(Debug, Clone)]
struct PamCache {
    q: Array4<f32>,
    k: Array4<f32>,
    v: Array4<f32>,
    attn: Vec<Array2<f32>>,
    attended: Array4<f32>,
}

impl PositionAttention {
    pub fn new<R: Rng>(channels: usize, reduction: usize, gamma_init: f32, rng: &mut R) -> Self {
        let inner = (channels / reduction).max(1);
        PositionAttention {
            query: Conv2d::k1(channels, inner, 1, rng),
            key: Conv2d::k1(channels, inner, 1, rng),
            value: Conv2d::k1(channels, channels, 1, rng),
            gamma: Param::filled(&[1], gamma_init),
            cache: None,
        }
    }

    /// The `N x N` affinity (`N = H W`) of sample `b`; rows sum to one.
    pub fn affinity(&mut self, x: &Array4<f32>, b: usize) -> Array2<f32> {
        let q = self.query.forward(x, false);
        let k = self.key.forward(x, false);
        let (qm, km) = (plane(&q, b), plane(&k, b));
        let n = qm.ncols();
        let mut e = Array2::<f32>::zeros((n, n));
        general_mat_mul(1.0, &qm.t(), &km, 0.0, &mut e);
        softmax_rows(e.view_mut());
        e
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let q = self.query.forward(&x, train);
        let k = self.key.forward(&x, train);
        let v = self.value.forward(&x, train);
        let (bsz, c, _, _) = x.dim();
        let n = q.dim().2 * q.dim().3;
        let mut attended = Array4::<f32>::zeros(x.raw_dim());
        let mut attn = Vec::new();
        for b in 0..bsz {
            let (qm, km, vm) = (plane(&q, b), plane(&k, b), plane(&v, b));
            let mut out = plane_mut(&mut attended, b);
            if train {
                let mut a = Array2::<f32>::zeros((n, n));
                general_mat_mul(1.0, &qm.t(), &km, 0.0, &mut a);
                softmax_rows(a.view_mut());
                general_mat_mul(1.0, &vm, &a.t(), 0.0, &mut out);
                attn.push(a);
            } else {
                let mut a = Array2::<f32>::zeros((EVAL_BLOCK.min(n), n));
                for start in (0..n).step_by(EVAL_BLOCK) {
                    let end = (start + EVAL_BLOCK).min(n);
                    let mut blk = a.slice_mut(s![..end - start, ..]);
                    general_mat_mul(1.0, &qm.slice(s![.., start..end]).t(), &km, 0.0, &mut blk);
                    softmax_rows(blk.view_mut());
                    let mut o = out.slice_mut(s![.., start..end]);
                    general_mat_mul(1.0, &vm, &blk.t(), 0.0, &mut o);
                }
            }
        }
        debug_assert_eq!(c, attended.dim().1);
        let g = self.gamma.value[[0]];
        let y = &attended * g + &x;
        if train {
            self.cache = Some(PamCache {
                q,
                k,
                v,
                attn,
                attended,
            });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("attention backward without a training forward");
        let dy = dy.as_standard_layout().into_owned();
        let g = self.gamma.value[[0]];
        self.gamma.grad[[0]] += dy.iter().zip(cache.attended.iter()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
        let d_out = &dy * g;
        let bsz = dy.dim().0;
        let mut dq = Array4::<f32>::zeros(cache.q.raw_dim());
        let mut dk = Array4::<f32>::zeros(cache.k.raw_dim());
        let mut dv = Array4::<f32>::zeros(cache.v.raw_dim());
        for b in 0..bsz {
            let a = &cache.attn[b];
            let n = a.nrows();
            let dom = plane(&d_out, b);
            general_mat_mul(1.0, &dom, a, 0.0, &mut plane_mut(&mut dv, b));
            let mut da = Array2::<f32>::zeros((n, n));
            general_mat_mul(1.0, &dom.t(), &plane(&cache.v, b), 0.0, &mut da);
            softmax_rows_backward(a.view(), da.view_mut());
            general_mat_mul(1.0, &plane(&cache.k, b), &da.t(), 0.0, &mut plane_mut(&mut dq, b));
            general_mat_mul(1.0, &plane(&cache.q, b), &da, 0.0, &mut plane_mut(&mut dk, b));
        }
        let mut dx = dy;
        dx += &self.query.backward(&dq);
        dx += &self.key.backward(&dk);
        dx += &self.value.backward(&dv);
        dx
    }
}

impl Module for PositionAttention {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Channel attention: each channel aggregates all channels, weighted by a
/// softmax over `rowmax(X X^T) - X X^T`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub gamma: Param,
    cache: Option<CamCache>,
}

#[derive(Debug, Clone)]
struct CamCache {
    x: Array4<f32>,
    attn: Vec<Array2<f32>>,
    attended: Array4<f32>,
}

impl ChannelAttention {
    pub fn new(gamma_init: f32) -> Self {
        ChannelAttention {
            gamma: Param::filled(&[1], gamma_init),
            cache: None,
        }
    }

    /// The `C x C` affinity of sample `b`; rows sum to one.
    pub fn affinity(x: &Array4<f32>, b: usize) -> Array2<f32> {
        let x = x.as_standard_layout().into_owned();
        channel_affinity(plane(&x, b))
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let mut attended = Array4::<f32>::zeros(x.raw_dim());
        let mut attn = Vec::new();
        for b in 0..x.dim().0 {
            let a = channel_affinity(plane(&x, b));
            general_mat_mul(1.0, &a, &plane(&x, b), 0.0, &mut plane_mut(&mut attended, b));
            if train {
                attn.push(a);
            }
        }
        let y = &attended * self.gamma.value[[0]] + &x;
        if train {
            self.cache = Some(CamCache { x, attn, attended });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("attention backward without a training forward");
        let dy = dy.as_standard_layout().into_owned();
        self.gamma.grad[[0]] += dy.iter().zip(cache.attended.iter()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
        let d_out = &dy * self.gamma.value[[0]];
        let mut dx = dy;
        for b in 0..d_out.dim().0 {
            let a = &cache.attn[b];
            let xm = plane(&cache.x, b);
            let dom = plane(&d_out, b);
            let c = a.nrows();
            let mut dxm = plane_mut(&mut dx, b);
            general_mat_mul(1.0, &a.t(), &dom, 1.0, &mut dxm);
            let mut da = Array2::<f32>::zeros((c, c));
            general_mat_mul(1.0, &dom, &xm.t(), 0.0, &mut da);
            softmax_rows_backward(a.view(), da.view_mut());
            // The energy enters negated; the row max shifts every entry of a
            // row equally and drops out of the softmax.
            let de = da.mapv(|v| -v);
            let sym = &de + &de.t();
            general_mat_mul(1.0, &sym, &xm, 1.0, &mut dxm);
        }
        dx
    }
}

impl Module for ChannelAttention {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Sum of position and channel attention applied to the same input.
#[derive(Debug, Clone)]
pub struct DualAttention {
    pub pam: PositionAttention,
    pub cam: ChannelAttention,
}

impl DualAttention {
    pub fn new<R: Rng>(channels: usize, reduction: usize, gamma_init: f32, rng: &mut R) -> Self {
        DualAttention {
            pam: PositionAttention::new(channels, reduction, gamma_init, rng),
            cam: ChannelAttention::new(gamma_init),
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let p = self.pam.forward(x, train);
        let c = self.cam.forward(x, train);
        p + c
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let dp = self.pam.backward(dy);
        let dc = self.cam.backward(dy);
        dp + dc
    }
}

impl Module for DualAttention {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.pam.visit(&join(prefix, "pam"), f);
        self.cam.visit(&join(prefix, "cam"), f);
    }
}

//! Convolution, batch normalization, ReLU and bilinear resizing with
//! explicit backward passes. Every layer caches what its backward pass needs
//! during a training forward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, IxDyn, Zip};
use rand::Rng;

use crate::param::{from_channel_major, join, kaiming, sum_rows, to_channel_major, Module, Param};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng)),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    /// 3x3, padding 1.
    pub fn k3<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Conv2d::new(cin, cout, 3, stride, 1, rng)
    }

    /// 1x1, no padding.
    pub fn k1<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Conv2d::new(cin, cout, 1, stride, 0, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.padding),
            conv_out(w, self.kernel, self.stride, self.padding),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: ArrayView4<f32>, ho: usize, wo: usize) -> Array2<f32> {
        if self.is_pointwise() {
            return to_channel_major(x);
        }
        let (b, c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        let mut cols = Array2::<f32>::zeros((c * k * k, b * plane));
        let xs = x.as_slice().expect("standard layout input");
        let cols_s = cols.as_slice_mut().expect("fresh array");
        let ncols = b * plane;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols_s[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let src = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        let dst = &mut dst_row[bi * plane..(bi + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * s) as isize - p + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * s) as isize - p + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, dim: (usize, usize, usize, usize), ho: usize, wo: usize) -> Array4<f32> {
        let (b, c, h, w) = dim;
        if self.is_pointwise() {
            return from_channel_major(cols, b, h, w);
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        let ncols = b * plane;
        let mut x = Array4::<f32>::zeros(dim);
        let xs = x.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &cs[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let dst = &mut xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        let src = &src_row[bi * plane..(bi + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * s) as isize - p + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                                let ix = (ox * s) as isize - p + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let cols = self.im2col(x.view(), ho, wo);
        let mut y = Array2::<f32>::zeros((self.out_channels, b * ho * wo));
        general_mat_mul(1.0, &self.weight.matrix(), &cols, 0.0, &mut y);
        let bias = self.bias.vector();
        for (mut row, &bv) in y.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        if train {
            self.cache = Some(ConvCache {
                cols,
                input_dim: (b, c, h, w),
                out_hw: (ho, wo),
            });
        }
        from_channel_major(&y, b, ho, wo)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("conv backward without a training forward");
        let (ho, wo) = cache.out_hw;
        let dy_cm = to_channel_major(dy.view());
        general_mat_mul(1.0, &dy_cm, &cache.cols.t(), 1.0, &mut self.weight.grad_matrix());
        let db = sum_rows(&dy_cm);
        self.bias.grad_vector().zip_mut_with(&db, |g, &d| *g += d);
        let mut dcols = Array2::<f32>::zeros(cache.cols.raw_dim());
        general_mat_mul(1.0, &self.weight.matrix().t(), &dy_cm, 0.0, &mut dcols);
        self.col2im(&dcols, cache.input_dim, ho, wo)
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running averages; evaluation mode uses the running averages.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        let m = (b * h * w) as f64;
        let mut mean = Array1::<f32>::zeros(c);
        let mut inv_std = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let lane = x.slice(ndarray::s![.., ci, .., ..]);
            if train {
                let mu = lane.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = lane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m;
                mean[ci] = mu as f32;
                inv_std[ci] = (1.0 / (var + self.eps as f64).sqrt()) as f32;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let k = self.momentum;
                let rm = &mut self.running_mean.value[[ci]];
                *rm = (1.0 - k) * *rm + k * mu as f32;
                let rv = &mut self.running_var.value[[ci]];
                *rv = (1.0 - k) * *rv + k * unbiased as f32;
            } else {
                mean[ci] = self.running_mean.value[[ci]];
                inv_std[ci] = 1.0 / (self.running_var.value[[ci]] + self.eps).sqrt();
            }
        }
        let mut xhat = x.to_owned();
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            xhat.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, bt) = (self.gamma.value[[ci]], self.beta.value[[ci]]);
            y.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| g * v + bt);
        }
        if train {
            self.cache = Some(BnCache { xhat, inv_std });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("batch norm backward without a training forward");
        let (b, c, h, w) = dy.dim();
        let m = (b * h * w) as f64;
        let mut dx = Array4::<f32>::zeros(dy.raw_dim());
        for ci in 0..c {
            let dyc = dy.slice(ndarray::s![.., ci, .., ..]);
            let xh = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            Zip::from(&dyc).and(&xh).for_each(|&d, &x| {
                sum_dy += d as f64;
                sum_dy_xh += d as f64 * x as f64;
            });
            self.gamma.grad[[ci]] += sum_dy_xh as f32;
            self.beta.grad[[ci]] += sum_dy as f32;
            let g = self.gamma.value[[ci]];
            let is = cache.inv_std[ci];
            let mut dxc = dx.slice_mut(ndarray::s![.., ci, .., ..]);
            let (mean_dy, mean_dy_xh) = ((sum_dy / m) as f32, (sum_dy_xh / m) as f32);
            Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| *o = g * is * (d - mean_dy - x * mean_dy_xh));
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Array4<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        if train {
            self.mask = Some(x.mapv(|v| v > 0.0));
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let mask = self.mask.take().expect("relu backward without a training forward");
        let mut dx = dy.clone();
        Zip::from(&mut dx).and(&mask).for_each(|d, &m| {
            if !m {
                *d = 0.0
            }
        });
        dx
    }
}

/// Conv, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new(conv: Conv2d) -> Self {
        let bn = BatchNorm2d::new(conv.out_channels());
        ConvBnRelu {
            conv,
            bn,
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        self.relu.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

impl Module for ConvBnRelu {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Interpolation matrix `(out, in)` of 1-D bilinear resampling with
/// half-pixel centers (`align_corners = false`).
pub fn interpolation_matrix(input: usize, output: usize) -> Array2<f32> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let l = (src - i0 as f64) as f32;
        m[[o, i0]] += 1.0 - l;
        m[[o, i1]] += l;
    }
    m
}

/// Bilinear resize of the two spatial axes; linear, so the backward pass is
/// the transpose.
#[derive(Debug, Clone, Default)]
pub struct Resize {
    mats: Option<(Array2<f32>, Array2<f32>)>,
    input_hw: (usize, usize),
}

impl Resize {
    pub fn forward(&mut self, x: &Array4<f32>, out_h: usize, out_w: usize) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        self.input_hw = (h, w);
        if (h, w) == (out_h, out_w) {
            self.mats = None;
            return x.clone();
        }
        let ry = interpolation_matrix(h, out_h);
        let rx = interpolation_matrix(w, out_w);
        let x = x.as_standard_layout();
        let flat = x.view().into_shape_with_order((b * c * h, w)).expect("contiguous");
        let mut t = Array2::<f32>::zeros((b * c * h, out_w));
        general_mat_mul(1.0, &flat, &rx.t(), 0.0, &mut t);
        let mut y = Array4::<f32>::zeros((b, c, out_h, out_w));
        for bi in 0..b {
            for ci in 0..c {
                let k = bi * c + ci;
                let tk = t.slice(ndarray::s![k * h..(k + 1) * h, ..]);
                let mut yk = y.slice_mut(ndarray::s![bi, ci, .., ..]);
                general_mat_mul(1.0, &ry, &tk, 0.0, &mut yk);
            }
        }
        self.mats = Some((ry, rx));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let Some((ry, rx)) = &self.mats else {
            return dy.clone();
        };
        let (b, c, out_h, out_w) = dy.dim();
        let (h, w) = self.input_hw;
        let mut dt = Array2::<f32>::zeros((b * c * h, out_w));
        for bi in 0..b {
            for ci in 0..c {
                let k = bi * c + ci;
                let dyk = dy.slice(ndarray::s![bi, ci, .., ..]);
                let mut dtk = dt.slice_mut(ndarray::s![k * h..(k + 1) * h, ..]);
                general_mat_mul(1.0, &ry.t(), &dyk, 0.0, &mut dtk);
            }
        }
        let mut dx = Array2::<f32>::zeros((b * c * h, w));
        general_mat_mul(1.0, &dt, rx, 0.0, &mut dx);
        debug_assert_eq!(out_h, ry.nrows());
        dx.into_shape_with_order((b, c, h, w)).expect("contiguous")
    }
}

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named tensor owned by a layer. Buffers (batch-norm running statistics)
/// are stored and checkpointed like parameters but never optimized.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<f32>) -> Self {
        Param {
            grad: ArrayD::zeros(IxDyn(&[0])),
            value,
            trainable: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(0.0);
        }
    }

    pub(crate) fn matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        let s = self.value.shape();
        self.value
            .view()
            .into_shape_with_order((s[0], s[1..].iter().product::<usize>()))
            .expect("contiguous parameter")
    }

    pub(crate) fn grad_matrix(&mut self) -> ndarray::ArrayViewMut2<'_, f32> {
        let s = self.grad.shape().to_vec();
        self.grad
            .view_mut()
            .into_shape_with_order((s[0], s[1..].iter().product::<usize>()))
            .expect("contiguous gradient")
    }

    pub(crate) fn vector(&self) -> ndarray::ArrayView1<'_, f32> {
        self.value
            .view()
            .into_shape_with_order(self.value.len())
            .expect("contiguous parameter")
    }

    pub(crate) fn grad_vector(&mut self) -> ndarray::ArrayViewMut1<'_, f32> {
        let n = self.grad.len();
        self.grad.view_mut().into_shape_with_order(n).expect("contiguous gradient")
    }
}

/// Anything holding parameters. `visit` must enumerate them in a fixed
/// order with stable names.
pub trait Module {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-normal initialization for a layer with the given fan-in.
pub(crate) fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng) as f32)
}

/// `(B, C, H, W)` as a `(C, B*H*W)` matrix, channel-major.
pub(crate) fn to_channel_major(x: ArrayView4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let mut out = Array2::zeros((c, b * h * w));
    for bi in 0..b {
        for ci in 0..c {
            let src = x.slice(ndarray::s![bi, ci, .., ..]);
            out.slice_mut(ndarray::s![ci, bi * h * w..(bi + 1) * h * w])
                .into_shape_with_order((h, w))
                .expect("contiguous row")
                .assign(&src);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub(crate) fn from_channel_major(m: &Array2<f32>, b: usize, h: usize, w: usize) -> Array4<f32> {
    let c = m.nrows();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let src = m.slice(ndarray::s![ci, bi * h * w..(bi + 1) * h * w]);
            out.slice_mut(ndarray::s![bi, ci, .., ..])
                .assign(&src.into_shape_with_order((h, w)).expect("contiguous"));
        }
    }
    out
}

pub(crate) fn sum_rows(m: &Array2<f32>) -> Array1<f32> {
    m.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32).collect()
}

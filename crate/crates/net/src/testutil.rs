//! Finite-difference gradient checks shared by the layer tests.

use ndarray::{Array4, Zip};
use rand::seq::index::sample;
use rand::Rng;

use crate::param::Module;

pub fn random4<R: Rng>(rng: &mut R, dim: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}

fn weighted_sum(y: &Array4<f32>, r: &Array4<f32>) -> f64 {
    let mut s = 0.0;
    Zip::from(y).and(r).for_each(|&a, &b| s += a as f64 * b as f64);
    s
}

const STEP: f32 = 1e-3;
const SAMPLES: usize = 24;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 2e-2 * analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central difference from `f(-h)`, `f(0)`, `f(h)`, or `None` when the two
/// one-sided differences disagree: a ReLU kink lies inside the stencil and
/// the function is not differentiable there at this resolution.
fn central(minus: f64, mid: f64, plus: f64) -> Option<f64> {
    let h = STEP as f64;
    let (fwd, bwd) = ((plus - mid) / h, (mid - minus) / h);
    close(fwd, bwd).then_some((plus - minus) / (2.0 * h))
}

/// At most half of the sampled entries may sit on kinks.
fn assert_enough(skipped: usize, total: usize) {
    assert!(2 * skipped <= total, "{skipped} of {total} samples were non-smooth");
}

/// Checks the input gradient of `fwd` against central differences of the
/// scalar `sum(r * fwd(x))` for a random `r`.
pub fn check_input_grad<M, R: Rng>(
    m: &mut M,
    x: &Array4<f32>,
    rng: &mut R,
    fwd: impl Fn(&mut M, &Array4<f32>) -> Array4<f32>,
    bwd: impl Fn(&mut M, &Array4<f32>) -> Array4<f32>,
) {
    let y = fwd(m, x);
    let r = random4(rng, y.dim());
    let dx = bwd(m, &r);
    assert_eq!(dx.dim(), x.dim());
    let flat: Vec<f32> = x.iter().copied().collect();
    let n = flat.len();
    let mid = weighted_sum(&fwd(m, x), &r);
    let (mut skipped, mut total) = (0, 0);
    for i in sample(rng, n, SAMPLES.min(n)) {
        let mut at = |delta: f32| {
            let mut v = flat.clone();
            v[i] += delta;
            weighted_sum(&fwd(m, &Array4::from_shape_vec(x.raw_dim(), v).unwrap()), &r)
        };
        let (plus, minus) = (at(STEP), at(-STEP));
        total += 1;
        let Some(num) = central(minus, mid, plus) else {
            skipped += 1;
            continue;
        };
        let ana = dx.iter().nth(i).copied().unwrap() as f64;
        assert!(close(ana, num), "input {i}: analytic {ana} numeric {num}");
    }
    assert_enough(skipped, total);
}

/// Checks every trainable parameter's gradient the same way.
pub fn check_param_grads<M: Module, R: Rng>(
    m: &mut M,
    x: &Array4<f32>,
    rng: &mut R,
    fwd: impl Fn(&mut M, &Array4<f32>) -> Array4<f32>,
    bwd: impl Fn(&mut M, &Array4<f32>) -> Array4<f32>,
) {
    m.zero_grad();
    let y = fwd(m, x);
    let r = random4(rng, y.dim());
    bwd(m, &r);
    let mut grads = Vec::new();
    m.visit("", &mut |name, p| {
        if p.trainable {
            grads.push((name.to_owned(), p.grad.clone()));
        }
    });
    let mid = weighted_sum(&fwd(m, x), &r);
    let (mut skipped, mut total) = (0, 0);
    for (pi, (name, grad)) in grads.iter().enumerate() {
        let n = grad.len();
        for i in sample(rng, n, SAMPLES.min(n)) {
            let set = |m: &mut M, value: Option<f32>| {
                let mut k = 0;
                let mut previous = 0.0;
                m.visit("", &mut |_, p| {
                    if p.trainable {
                        if k == pi {
                            let slot = p.value.iter_mut().nth(i).unwrap();
                            previous = *slot;
                            if let Some(v) = value {
                                *slot = v;
                            }
                        }
                        k += 1;
                    }
                });
                previous
            };
            let orig = set(m, None);
            let mut eval = |v: f32| {
                set(m, Some(v));
                let out = weighted_sum(&fwd(m, x), &r);
                set(m, Some(orig));
                out
            };
            let (plus, minus) = (eval(orig + STEP), eval(orig - STEP));
            total += 1;
            let Some(num) = central(minus, mid, plus) else {
                skipped += 1;
                continue;
            };
            let ana = grad.iter().nth(i).copied().unwrap() as f64;
            assert!(close(ana, num), "{name}[{i}]: analytic {ana} numeric {num}");
        }
    }
    assert_enough(skipped, total);
}

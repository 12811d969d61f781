//! Finite-difference suites for every differentiable operation, run by the
//! `verify` command and the acceptance tests.

use serde::{Deserialize, Serialize};

use crate::mask::{gumbel_sigmoid, gumbel_sigmoid_grad};
use crate::par;
use crate::rng::SeededRng;
use crate::tensor::{
    conv2d, conv2d_backward, cross_entropy, finite_diff_check, finite_diff_check_masked,
    group_norm, group_norm_backward, linear, linear_backward, relu, relu_backward, GradCheck,
    Tensor,
};

pub const GRAD_TOL: f64 = 1e-5;
const EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// `0.5 * sum(r * y^2)` and its gradient `r * y`.
fn weighted_square(y: &Tensor, r: &Tensor) -> (f64, Tensor) {
    let v = y
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| 0.5 * b * a * a)
        .sum();
    let g = Tensor::from_fn(y.shape(), |i| r.data()[i] * y.data()[i]);
    (v, g)
}

fn worst(checks: impl IntoIterator<Item = GradCheck>) -> f64 {
    checks
        .into_iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max)
}

fn conv_point(rng: &mut SeededRng) -> f64 {
    let (stride, pad) = [(1, 1), (1, 0), (2, 1)][rng.below(3)];
    let x = rand_tensor(rng, &[2, 2, 5, 5]);
    let w = rand_tensor(rng, &[3, 2, 3, 3]);
    let b = rand_tensor(rng, &[3]);
    let y0 = conv2d(&x, &w, &b, stride, pad).unwrap();
    let r = rand_tensor(rng, y0.shape());
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let y = conv2d(x, w, b, stride, pad).unwrap();
        let (v, g) = weighted_square(&y, &r);
        (v, conv2d_backward(x, w, &g, stride, pad, true).unwrap())
    };
    worst([
        finite_diff_check(
            |p| {
                let (v, g) = f(p, &w, &b);
                (v, g.input.unwrap())
            },
            &x,
            EPS,
        ),
        finite_diff_check(
            |p| {
                let (v, g) = f(&x, p, &b);
                (v, g.filters)
            },
            &w,
            EPS,
        ),
        finite_diff_check(
            |p| {
                let (v, g) = f(&x, &w, p);
                (v, g.bias)
            },
            &b,
            EPS,
        ),
    ])
}

fn linear_point(rng: &mut SeededRng) -> f64 {
    let x = rand_tensor(rng, &[3, 5]);
    let w = rand_tensor(rng, &[4, 5]);
    let b = rand_tensor(rng, &[4]);
    let r = rand_tensor(rng, &[3, 4]);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let (v, g) = weighted_square(&linear(x, w, b).unwrap(), &r);
        (v, linear_backward(x, w, &g).unwrap(), g)
    };
    worst([
        finite_diff_check(
            |p| {
                let (v, g, _) = f(p, &w, &b);
                (v, g.input)
            },
            &x,
            EPS,
        ),
        finite_diff_check(
            |p| {
                let (v, g, _) = f(&x, p, &b);
                (v, g.weight)
            },
            &w,
            EPS,
        ),
        finite_diff_check(
            |p| {
                let (v, g, _) = f(&x, &w, p);
                (v, g.bias)
            },
            &b,
            EPS,
        ),
    ])
}

fn relu_point(rng: &mut SeededRng) -> f64 {
    let x = rand_tensor(rng, &[24]);
    let r = rand_tensor(rng, &[24]);
    let off_kink = |i: usize| x.data()[i].abs() > 100.0 * EPS;
    let c = finite_diff_check_masked(
        |p| {
            let (v, g) = weighted_square(&relu(p), &r);
            (v, relu_backward(p, &g).unwrap())
        },
        &x,
        EPS,
        off_kink,
    );
    c.max_rel_error
}

fn cross_entropy_point(rng: &mut SeededRng) -> f64 {
    let logits = Tensor::from_fn(&[4, 5], |_| rng.uniform_range(-3.0, 3.0));
    let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    finite_diff_check(|p| cross_entropy(p, &labels).unwrap(), &logits, EPS).max_rel_error
}

fn group_norm_point(rng: &mut SeededRng) -> f64 {
    let x = rand_tensor(rng, &[2, 4, 3, 3]);
    let gamma = rand_tensor(rng, &[4]);
    let beta = rand_tensor(rng, &[4]);
    let r = rand_tensor(rng, x.shape());
    let groups = [1, 2, 4][rng.below(3)];
    let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
        let (y, cache) = group_norm(x, gm, bt, groups, 1e-5).unwrap();
        let (v, g) = weighted_square(&y, &r);
        (v, group_norm_backward(&cache, gm, &g).unwrap())
    };
    worst([
        finite_diff_check(
            |p| {
                let (v, g) = f(p, &gamma, &beta);
                (v, g.input)
            },
            &x,
            EPS,
        ),
        finite_diff_check(
            |p| {
                let (v, g) = f(&x, p, &beta);
                (v, g.gamma)
            },
            &gamma,
            EPS,
        ),
        finite_diff_check(
            |p| {
                let (v, g) = f(&x, &gamma, p);
                (v, g.beta)
            },
            &beta,
            EPS,
        ),
    ])
}

/// Convolution with a kernel mask replaced by its relaxed Gumbel-Sigmoid
/// value: the surrogate gradient the straight-through estimator hands to the
/// logits must be the exact derivative of this relaxed path.
fn masked_relaxed_point(rng: &mut SeededRng) -> f64 {
    let (cout, cin, k) = (3, 2, 3);
    let x = rand_tensor(rng, &[2, cin, 5, 5]);
    let w = rand_tensor(rng, &[cout, cin, k, k]);
    let b = rand_tensor(rng, &[cout]);
    let m = Tensor::from_fn(&[cout, cin], |_| rng.uniform_range(-2.0, 2.0));
    let g0: Vec<f64> = (0..cout * cin)
        .map(|_| crate::mask::gumbel_from_uniform(rng.uniform_open()))
        .collect();
    let g1: Vec<f64> = (0..cout * cin)
        .map(|_| crate::mask::gumbel_from_uniform(rng.uniform_open()))
        .collect();
    let t = rng.uniform_range(0.5, 2.0);
    let r = rand_tensor(rng, &[2, cout, 5, 5]);
    let kk = k * k;
    let f = |m: &Tensor| {
        let p: Vec<f64> = (0..cout * cin)
            .map(|j| gumbel_sigmoid(m.data()[j], g0[j], g1[j], t).unwrap())
            .collect();
        let weff = Tensor::from_fn(w.shape(), |i| w.data()[i] * p[i / kk]);
        let y = conv2d(&x, &weff, &b, 1, 1).unwrap();
        let (v, gy) = weighted_square(&y, &r);
        let gw = conv2d_backward(&x, &weff, &gy, 1, 1, false)
            .unwrap()
            .filters;
        let gm = Tensor::from_fn(m.shape(), |j| {
            let gp: f64 = (0..kk)
                .map(|q| gw.data()[j * kk + q] * w.data()[j * kk + q])
                .sum();
            gp * gumbel_sigmoid_grad(m.data()[j], g0[j], g1[j], t)
        });
        (v, gm)
    };
    finite_diff_check(f, &m, EPS).max_rel_error
}

/// Relaxed L0 surrogate `lambda * sum(sigmoid(m))` against the gradient
/// reported by `l0_penalty`.
fn l0_point(rng: &mut SeededRng) -> f64 {
    use crate::mask::{l0_penalty, BinaryMask, Binding, Granularity, MaskParam};
    let n = 6;
    let binding = Binding {
        layer: 0,
        out_channels: n,
        in_channels: 1,
    };
    let lambda = rng.uniform_range(0.01, 1.0);
    let m = Tensor::from_fn(&[n], |_| rng.uniform_range(-3.0, 3.0));
    let bits = BinaryMask::filled(Granularity::Channel, binding, true);
    let f = |m: &Tensor| {
        let p = MaskParam::from_logits(Granularity::Channel, binding, m.clone()).unwrap();
        let (_, g) = l0_penalty(&bits, &p, lambda).unwrap();
        let v = m.data().iter().map(|&z| lambda / (1.0 + (-z).exp())).sum();
        (v, g)
    };
    finite_diff_check(f, &m, EPS).max_rel_error
}

type PointFn = fn(&mut SeededRng) -> f64;

pub const SUITES: [(&str, PointFn); 8] = [
    ("conv2d", conv_point),
    ("linear", linear_point),
    ("relu", relu_point),
    ("cross_entropy", cross_entropy_point),
    ("group_norm", group_norm_point),
    ("maxpool2d", maxpool_point),
    ("masked_relaxed", masked_relaxed_point),
    ("l0_surrogate", l0_point),
];

fn maxpool_point(rng: &mut SeededRng) -> f64 {
    use crate::tensor::{maxpool2d, maxpool2d_backward};
    // distinct values on a coarse lattice keep every window away from ties
    let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.01).collect();
    rng.shuffle(&mut vals);
    let x = Tensor::new(&[2, 2, 4, 4], vals).unwrap();
    let r = rand_tensor(rng, &[2, 2, 2, 2]);
    let f = |p: &Tensor| {
        let pooled = maxpool2d(p, 2, 2).unwrap();
        let (v, g) = weighted_square(&pooled.output, &r);
        (v, maxpool2d_backward(&pooled, p.shape(), &g).unwrap())
    };
    finite_diff_check(f, &x, EPS).max_rel_error
}

/// Run every suite at `points` random points drawn from `seed`.
pub fn gradient_suites(points: usize, seed: u64) -> Vec<SuiteResult> {
    let root = SeededRng::new(seed).substream("gradcheck");
    SUITES
        .iter()
        .map(|&(name, point)| {
            let errs = par::map_range(points, |i| {
                point(&mut root.substream(&format!("{name}/{i}")))
            });
            let max = errs.iter().copied().fold(0.0, f64::max);
            SuiteResult {
                name: name.to_string(),
                points,
                max_rel_error: max,
                pass: errs.iter().all(|e| *e < GRAD_TOL),
            }
        })
        .collect()
}

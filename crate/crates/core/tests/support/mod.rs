//! Shared f64 oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kpgen_core::autograd::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, lo, hi)).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + h;
            let up = f(&x);
            x[i] = v - h;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-12)
}

pub fn leaky(x: f64, s: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        s * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[m,k] × [k,n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Direct 3D cross-correlation of `[Cin, B, W, W, W]` with `[Cout, Cin, K, K, K]`
/// plus bias; output `[Cout, B, O, O, O]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    cin: usize,
    batch: usize,
    side: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize) {
    let o = (side + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * batch * o * o * o];
    for co in 0..cout {
        for b in 0..batch {
            for ox in 0..o {
                for oy in 0..o {
                    for oz in 0..o {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for kx in 0..k {
                                for ky in 0..k {
                                    for kz in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        let s = side as isize;
                                        if ix < 0 || iy < 0 || iz < 0 || ix >= s || iy >= s || iz >= s {
                                            continue;
                                        }
                                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                        let xi = (((ci * batch + b) * side + ix) * side + iy) * side + iz;
                                        let wi = (((co * cin + ci) * k + kx) * k + ky) * k + kz;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((co * batch + b) * o + ox) * o + oy) * o + oz] = acc;
                    }
                }
            }
        }
    }
    (out, o)
}

/// Symmetric Chamfer distance: mean squared nearest distance both ways.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let d = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
    let one = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    one(a, b) + one(b, a)
}

pub fn points3(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Greedy NMS by sorting then scanning every kept point.
pub fn brute_nms(points: &[kpgen_core::geometry::Point], scores: &[f32], radius: f32, threshold: f32) -> Vec<usize> {
    let d2 = |a: [f32; 3], b: [f32; 3]| (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f32>();
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| scores[i] >= threshold).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| d2(points[k], points[i]) > radius * radius) {
            keep.push(i);
        }
    }
    keep
}

/// Registers plain check functions as tests. The acceptance target includes
/// the same files without a test harness and calls the functions directly.
#[allow(unused_macros)]
macro_rules! as_tests {
    ($($f:ident),* $(,)?) => {
        mod run {
            $(
                #[test]
                fn $f() {
                    super::$f()
                }
            )*
        }
    };
}
#[allow(unused_imports)]
pub(crate) use as_tests;

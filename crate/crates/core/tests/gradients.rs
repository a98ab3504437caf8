//! Reverse-mode gradients against central differences of independent f64
//! reference implementations.

mod support;

use std::rc::Rc;

use kpgen_core::autograd::{Tape, Tensor, Var};
use support::*;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

/// Checks the tape's forward against `reference` and the gradient of
/// `Σ w ⊙ out` (random `w`) against f64 central differences.
fn check(name: &str, inputs: &[Tensor], build: &dyn Fn(&Tape, &[Var]) -> Var, reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>, seed: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars);
    let out_t = tape.value(out);
    let x64: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let ref_out = reference(&x64);
    assert_eq!(ref_out.len(), out_t.numel(), "{name}: output size");
    let fwd = rel_err(&to64(&out_t), &ref_out);
    assert!(fwd < 1e-5, "{name}: forward rel err {fwd}");

    let mut r = rng(seed);
    let w = rand_tensor(&mut r, out_t.shape(), -1.0, 1.0);
    let w64 = to64(&w);
    let loss = tape.sum(tape.mul(out, tape.constant(w)).unwrap());
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| to64(&grads.get_or_zeros(v, t.shape())))
        .collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let flat: Vec<f64> = x64.concat();
    let f = |x: &[f64]| {
        let mut parts = Vec::new();
        let mut at = 0;
        for &s in &sizes {
            parts.push(x[at..at + s].to_vec());
            at += s;
        }
        reference(&parts).iter().zip(&w64).map(|(a, b)| a * b).sum()
    };
    let fd = fd_grad(&f, &flat, H);
    let err = rel_err(&analytic, &fd);
    println!("{name}: gradient rel err {err:.2e}");
    assert!(err < TOL, "{name}: gradient rel err {err}");
    err
}

pub fn matmul_gradient() {
    let mut r = rng(1);
    let a = rand_tensor(&mut r, &[5, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    check(
        "matmul",
        &[a, b],
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
        &|x| matmul(&x[0], &x[1], 5, 4, 3),
        2,
    );
}

pub fn matmul_analytic_and_errors() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    assert_eq!(tape.value(tape.matmul(a, b).unwrap()).data(), &[3.0, 7.0]);
    let i = tape.constant(Tensor::eye(2));
    assert_eq!(tape.value(tape.matmul(i, a).unwrap()).data(), tape.value(a).data());
    assert!(tape.matmul(b, b).is_err());
}

fn conv_case(name: &str, cin: usize, batch: usize, side: usize, cout: usize, stride: usize, pad: usize, seed: u64) {
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, &[cin, batch, side, side, side], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[cout, cin, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut r, &[cout], -0.5, 0.5);
    check(
        name,
        &[x, w, b],
        &|t, v| t.conv3d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
        &|x| conv3d(&x[0], &x[1], &x[2], cin, batch, side, cout, 3, stride, pad).0,
        seed + 100,
    );
}

pub fn conv3d_gradient() {
    conv_case("conv3d stride 1", 2, 2, 4, 3, 1, 1, 3);
    conv_case("conv3d stride 2", 2, 1, 5, 2, 2, 1, 4);
    conv_case("conv3d no padding", 1, 2, 4, 2, 1, 0, 5);
}

pub fn conv3d_analytic_cases() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones(vec![1, 2, 2, 2]));
    let k = tape.leaf(Tensor::ones(vec![1, 1, 2, 2, 2]));
    let y = tape.conv3d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[8.0]);

    let mut r = rng(9);
    let input = rand_tensor(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let mut delta = Tensor::zeros(vec![1, 1, 3, 3, 3]);
    delta.data_mut()[13] = 1.0;
    let xi = tape.leaf(input.clone());
    let y = tape.conv3d(xi, tape.constant(delta), None, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
    let too_small = tape.leaf(Tensor::ones(vec![1, 2, 2, 2]));
    assert!(tape.conv3d(too_small, tape.constant(Tensor::ones(vec![1, 1, 3, 3, 3])), None, 1, 0).is_err());
}

pub fn conv1d_pointwise_gradient() {
    let mut r = rng(6);
    let w = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let x = rand_tensor(&mut r, &[4, 6], -1.0, 1.0);
    check(
        "conv1d_pointwise",
        &[x, w],
        &|t, v| t.conv1d_pointwise(v[0], v[1]).unwrap(),
        &|x| matmul(&x[1], &x[0], 3, 4, 6),
        7,
    );
}

pub fn reduce_max_gradient() {
    let mut r = rng(8);
    // Distinct values keep the argmax away from ties.
    let mut v: Vec<f32> = (0..21).map(|i| i as f32 * 0.1).collect();
    for i in (1..v.len()).rev() {
        let j = rand::Rng::random_range(&mut r, 0..=i);
        v.swap(i, j);
    }
    let x = Tensor::new(vec![3, 7], v).unwrap();
    check(
        "reduce_max",
        &[x],
        &|t, v| t.reduce_max_over_points(v[0]).unwrap(),
        &|x| x[0].chunks(7).map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect(),
        9,
    );
}

pub fn reduce_max_tie_and_mass() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 3.0, 2.0, 5.0, 5.0, 5.0]).unwrap());
    let m = tape.reduce_max_over_points(x).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    let loss = tape.sum(tape.mul(m, tape.constant(Tensor::vector(vec![0.7, -1.3]))).unwrap());
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.7, 0.0, -1.3, 0.0, 0.0]);
    let empty = tape.leaf(Tensor::zeros(vec![2, 0]));
    assert!(tape.reduce_max_over_points(empty).is_err());
}

pub fn unary_elementwise_gradients() {
    let mut r = rng(10);
    let x = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    let pos = rand_tensor(&mut r, &[3, 5], 0.2, 2.0);
    let map = |f: fn(f64) -> f64| move |x: &[Vec<f64>]| x[0].iter().map(|&v| f(v)).collect::<Vec<f64>>();
    check("sigmoid", &[x.clone()], &|t, v| t.sigmoid(v[0]), &map(sigmoid), 11);
    check("leaky_relu", &[x.clone()], &|t, v| t.leaky_relu(v[0], 0.2), &map(|v| leaky(v, 0.2)), 12);
    check("relu", &[x.clone()], &|t, v| t.relu(v[0]), &map(|v| v.max(0.0)), 13);
    check("square", &[x.clone()], &|t, v| t.square(v[0]), &map(|v| v * v), 14);
    check("sqrt", &[pos.clone()], &|t, v| t.sqrt(v[0]), &map(f64::sqrt), 15);
    check("neg", &[x.clone()], &|t, v| t.neg(v[0]), &map(|v| -v), 16);
    check("scale", &[x.clone()], &|t, v| t.scale(v[0], 1.7), &map(|v| 1.7 * v), 17);
    check("add_scalar", &[x.clone()], &|t, v| t.add_scalar(v[0], -0.3), &map(|v| v - 0.3), 18);
    check(
        "signed_pow",
        &[x.clone()],
        &|t, v| t.signed_pow(v[0], 2.5),
        &map(|v| v.signum() * v.abs().powf(2.5)),
        19,
    );
}

pub fn binary_elementwise_gradients_with_broadcast() {
    let mut r = rng(20);
    let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let col = rand_tensor(&mut r, &[3, 1], 0.5, 2.0);
    let row = rand_tensor(&mut r, &[4], -2.0, 2.0);
    let bcast = |x: &[Vec<f64>], f: fn(f64, f64) -> f64| -> Vec<f64> {
        (0..12).map(|k| f(x[0][k], x[1][k / 4])).collect()
    };
    check("add", &[a.clone(), col.clone()], &|t, v| t.add(v[0], v[1]).unwrap(), &|x| bcast(x, |p, q| p + q), 21);
    check("sub", &[a.clone(), col.clone()], &|t, v| t.sub(v[0], v[1]).unwrap(), &|x| bcast(x, |p, q| p - q), 22);
    check("mul", &[a.clone(), col.clone()], &|t, v| t.mul(v[0], v[1]).unwrap(), &|x| bcast(x, |p, q| p * q), 23);
    check("div", &[a.clone(), col.clone()], &|t, v| t.div(v[0], v[1]).unwrap(), &|x| bcast(x, |p, q| p / q), 24);
    check(
        "mul trailing",
        &[a.clone(), row.clone()],
        &|t, v| t.mul(v[0], v[1]).unwrap(),
        &|x| (0..12).map(|k| x[0][k] * x[1][k % 4]).collect(),
        25,
    );
    let tape = Tape::new();
    let p = tape.leaf(a);
    let q = tape.leaf(Tensor::zeros(vec![4, 3]));
    assert!(tape.add(p, q).is_err());
}

pub fn elementwise_analytic_values() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::vector(vec![0.0, -1.0]));
    assert_eq!(tape.value(tape.sigmoid(z)).data()[0], 0.5);
    assert!((tape.value(tape.leaky_relu(z, 0.2)).data()[1] + 0.2).abs() < 1e-7);
}

pub fn composed_chain_gradient() {
    let mut r = rng(30);
    let w = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let x = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 1], -0.5, 0.5);
    check(
        "chain",
        &[w, x, b],
        &|t, v| {
            let y = t.add(t.matmul(v[0], v[1]).unwrap(), v[2]).unwrap();
            let y = t.leaky_relu(y, 0.2);
            t.sigmoid(t.square(y))
        },
        &|x| {
            let y = matmul(&x[0], &x[1], 4, 3, 5);
            (0..20).map(|k| sigmoid(leaky(y[k] + x[2][k / 5], 0.2).powi(2))).collect()
        },
        31,
    );
}

pub fn l2_normalize_gradient() {
    let mut r = rng(40);
    let x = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    check(
        "l2_normalize",
        &[x],
        &|t, v| t.l2_normalize(v[0]).unwrap(),
        &|x| {
            let mut out = x[0].clone();
            for j in 0..5 {
                let n = (0..4).map(|i| x[0][i * 5 + j].powi(2)).sum::<f64>().sqrt().max(1e-8);
                for i in 0..4 {
                    out[i * 5 + j] /= n;
                }
            }
            out
        },
        41,
    );
    let tape = Tape::new();
    let v = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(tape.value(tape.l2_normalize(v).unwrap()).data(), &[0.6, 0.8]);
    let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    assert_eq!(tape.value(tape.l2_normalize(z).unwrap()).data(), &[0.0, 0.0]);
}

pub fn chamfer_gradient() {
    // Redraw until every nearest neighbor wins by a clear margin, so the
    // finite-difference step never switches an assignment.
    let mut r = rng(50);
    let (a, b) = loop {
        let a = rand_tensor(&mut r, &[2, 5, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[2, 6, 3], -1.0, 1.0);
        let (pa, pb) = (points3(&to64(&a)), points3(&to64(&b)));
        let ok = (0..2).all(|k| {
            nn_margin(&pa[k * 5..(k + 1) * 5], &pb[k * 6..(k + 1) * 6]) > 0.05
                && nn_margin(&pb[k * 6..(k + 1) * 6], &pa[k * 5..(k + 1) * 5]) > 0.05
        });
        if ok {
            break (a, b);
        }
    };
    check(
        "chamfer",
        &[a, b],
        &|t, v| t.chamfer(v[0], v[1]).unwrap(),
        &|x| {
            (0..2)
                .map(|k| chamfer(&points3(&x[0][k * 15..(k + 1) * 15]), &points3(&x[1][k * 18..(k + 1) * 18])))
                .collect()
        },
        51,
    );
}

/// Smallest gap between the nearest and second-nearest squared distance.
fn nn_margin(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|p| {
            let mut d: Vec<f64> = to.iter().map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum()).collect();
            d.sort_by(f64::total_cmp);
            d[1] - d[0]
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn structural_ops_gradient() {
    let mut r = rng(60);
    let a = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[1, 3, 4], -1.0, 1.0);
    check(
        "mean_trailing",
        &[a.clone()],
        &|t, v| t.mean_trailing(v[0]).unwrap(),
        &|x| x[0].chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect(),
        61,
    );
    check(
        "concat",
        &[a.clone(), b],
        &|t, v| t.concat(&[v[0], v[1]]).unwrap(),
        &|x| x.concat(),
        62,
    );
    let idx = Rc::new(vec![5usize, 0, 5, 23, 7, 7]);
    let i2 = idx.clone();
    check(
        "gather",
        &[a.clone()],
        &move |t, v| t.gather(v[0], idx.clone(), &[2, 3]).unwrap(),
        &move |x| i2.iter().map(|&k| x[0][k]).collect(),
        63,
    );
    let src = rand_tensor(&mut r, &[6], -1.0, 1.0);
    let sidx = Rc::new(vec![1usize, 3, 1, 0, 3, 3]);
    let s2 = sidx.clone();
    check(
        "scatter_add",
        &[src],
        &move |t, v| t.scatter_add(v[0], sidx.clone(), &[4]).unwrap(),
        &move |x| {
            let mut out = vec![0.0; 4];
            for (k, &i) in s2.iter().enumerate() {
                out[i] += x[0][k];
            }
            out
        },
        64,
    );
    let m = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    check(
        "transpose",
        &[m],
        &|t, v| t.transpose(v[0]).unwrap(),
        &|x| (0..12).map(|k| x[0][(k % 3) * 4 + k / 3]).collect(),
        65,
    );
}

pub fn grad_of_scalar_first_order_cases() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let g = tape.grad(tape.sum(tape.square(x)), &[x], false).unwrap()[0];
    assert_eq!(tape.value(g).data(), &[2.0, 4.0]);
    let g = tape.grad(tape.sum(x), &[x], true).unwrap()[0];
    assert_eq!(tape.value(g).data(), &[1.0, 1.0]);
    let gg = tape.grad(tape.sum(g), &[x], false);
    // The gradient of sum(x) is constant, so its own gradient is zero or unreachable.
    if let Ok(gg) = gg {
        assert!(tape.value(gg[0]).data().iter().all(|v| *v == 0.0));
    }
    let other = Tape::new();
    let y = other.leaf(Tensor::vector(vec![1.0]));
    assert!(tape.grad(tape.sum(x), &[y], false).is_err());
}

/// `D(x) = max_i (w2ᵀ leaky(W1 xᵢ + b1) + b2)` per sample; the penalty
/// `λ·mean_b (‖∂D/∂x_b‖ − 1)²` is differentiated w.r.t. the critic weights.
pub fn double_backprop_penalty_gradient() {
    let (hid, b, n, slope, lambda) = (6usize, 2usize, 3usize, 0.2f64, 1.0f64);
    let mut r = rng(70);
    let w1 = rand_tensor(&mut r, &[hid, 1], -1.5, 1.5);
    let b1 = rand_tensor(&mut r, &[hid, 1], -0.5, 0.5);
    let w2 = rand_tensor(&mut r, &[1, hid], -1.5, 1.5);
    let b2 = rand_tensor(&mut r, &[1, 1], -0.5, 0.5);
    let x = rand_tensor(&mut r, &[b, n], 0.0, 1.0);

    let tape = Tape::new();
    let vars: Vec<Var> = [&w1, &b1, &w2, &b2].iter().map(|t| tape.leaf((*t).clone())).collect();
    let xv = tape.leaf(x.clone());
    let flat = tape.reshape(xv, &[1, b * n]).unwrap();
    let h = tape.leaky_relu(tape.add(tape.matmul(vars[0], flat).unwrap(), vars[1]).unwrap(), slope as f32);
    let s = tape.add(tape.matmul(vars[2], h).unwrap(), vars[3]).unwrap();
    let d = tape.reduce_max_over_points(tape.reshape(s, &[1, b, n]).unwrap()).unwrap();
    let pen = kpgen_core::train::gradient_penalty(&tape, tape.reshape(d, &[b]).unwrap(), xv, b, n).unwrap();
    let loss = tape.scale(pen, lambda as f32);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip([&w1, &b1, &w2, &b2])
        .flat_map(|(&v, t)| to64(&grads.get_or_zeros(v, t.shape())))
        .collect();

    let x64 = to64(&x);
    let f = |p: &[f64]| {
        let (w1, rest) = p.split_at(hid);
        let (b1, rest) = rest.split_at(hid);
        let (w2, b2) = rest.split_at(hid);
        let mut total = 0.0;
        for s in 0..b {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
            for i in 0..n {
                let xi = x64[s * n + i];
                let mut v = b2[0];
                let mut dv = 0.0;
                for k in 0..hid {
                    let z = w1[k] * xi + b1[k];
                    v += w2[k] * leaky(z, slope);
                    dv += w2[k] * if z > 0.0 { 1.0 } else { slope } * w1[k];
                }
                if v > best {
                    best = v;
                    arg = dv;
                }
            }
            let norm = (arg * arg + 1e-12).sqrt();
            total += (norm - 1.0).powi(2);
        }
        lambda * total / b as f64
    };
    let p64: Vec<f64> = [&w1, &b1, &w2, &b2].iter().flat_map(|t| to64(t)).collect();
    let fd = fd_grad(&f, &p64, 1e-6);
    let err = rel_err(&analytic, &fd);
    println!("gradient penalty: parameter gradient rel err {err:.2e}");
    assert!(err < 1e-2, "{err}");
}

pub fn replayed_tape_is_bit_identical() {
    let run = || {
        let mut r = rng(80);
        let tape = Tape::new();
        let w = tape.leaf(rand_tensor(&mut r, &[4, 3], -1.0, 1.0));
        let x = tape.leaf(rand_tensor(&mut r, &[3, 9], -1.0, 1.0));
        let y = tape.l2_normalize(tape.leaky_relu(tape.matmul(w, x).unwrap(), 0.2)).unwrap();
        let loss = tape.sum(tape.reduce_max_over_points(y).unwrap());
        let g = tape.backward(loss).unwrap();
        (g.get(w).unwrap().clone(), g.get(x).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.data().iter().zip(b.0.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

support::as_tests!(
    matmul_gradient,
    matmul_analytic_and_errors,
    conv3d_gradient,
    conv3d_analytic_cases,
    conv1d_pointwise_gradient,
    reduce_max_gradient,
    reduce_max_tie_and_mass,
    unary_elementwise_gradients,
    binary_elementwise_gradients_with_broadcast,
    elementwise_analytic_values,
    composed_chain_gradient,
    l2_normalize_gradient,
    chamfer_gradient,
    structural_ops_gradient,
    grad_of_scalar_first_order_cases,
    double_backprop_penalty_gradient,
    replayed_tape_is_bit_identical,
);

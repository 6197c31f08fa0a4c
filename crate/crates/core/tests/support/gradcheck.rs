//! Central finite-difference oracle for graph gradients on f64.

#![allow(dead_code)]

use oqat_core::numerics::{Graph, NodeId, Tensor};
use oqat_core::quantizer::QRange;
use oqat_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_STEP: f64 = 1e-3;
pub const QUANT_STEP: f64 = 1e-4;

pub type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Scalar loss: the output itself when scalar, otherwise `sum(out * probe)`.
fn loss_of(g: &mut Graph<f64>, out: NodeId, probe: &Option<Tensor<f64>>) -> Result<NodeId> {
    match probe {
        None => Ok(out),
        Some(p) => {
            let p = g.input(p.clone());
            let m = g.mul(out, p)?;
            Ok(g.sum(m))
        }
    }
}

fn eval(build: &Build, inputs: &[Tensor<f64>], probe: &Option<Tensor<f64>>) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let l = loss_of(&mut g, out, probe)?;
    Ok(g.value(l).item())
}

/// Worst relative error over all inputs between backward and central
/// differences with step `h`.
pub fn check(build: &Build, inputs: &[Tensor<f64>], h: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let probe = if g.value(out).is_scalar() {
        None
    } else {
        let shape = g.value(out).shape().to_vec();
        let n = g.value(out).numel();
        Some(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)
    };
    let l = loss_of(&mut g, out, &probe)?;
    let grads = g.backward(l)?;
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            *slot = (eval(build, &plus, &probe)? - eval(build, &minus, &probe)?) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude at least `margin` (away from ReLU kinks).
pub fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Layer types covered by [`layer_case`].
pub const LAYERS: [&str; 11] =
    ["conv", "conv_strided", "depthwise", "linear", "bn_train", "bn_eval", "relu", "add", "mul", "avg_pool", "cross_entropy"];

/// One random gradient check of layer `name`; returns the relative error.
pub fn layer_case(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(3..=5);
    match name {
        "conv" | "conv_strided" => {
            let o = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = if name == "conv" { 1 } else { 2 };
            let x = random(rng, &[n, c, hw, hw], -1.0, 1.0);
            let w = random(rng, &[o, c, k, k], -1.0, 1.0);
            check(&move |g, i| g.conv2d(i[0], i[1], stride, k / 2, 1), &[x, w], LAYER_STEP, rng)
        }
        "depthwise" => {
            let k = [3, 5][rng.random_range(0..2)];
            let x = random(rng, &[n, c, hw, hw], -1.0, 1.0);
            let w = random(rng, &[c, 1, k, k], -1.0, 1.0);
            check(&move |g, i| g.conv2d(i[0], i[1], 1, k / 2, c), &[x, w], LAYER_STEP, rng)
        }
        "linear" => {
            let (fi, fo) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let x = random(rng, &[n, fi], -1.0, 1.0);
            let w = random(rng, &[fo, fi], -1.0, 1.0);
            let b = random(rng, &[fo], -1.0, 1.0);
            check(&|g, i| g.linear(i[0], i[1], Some(i[2])), &[x, w, b], LAYER_STEP, rng)
        }
        "bn_train" => {
            let n = n + 1;
            let x = random(rng, &[n, c, hw, hw], -1.0, 1.0);
            let gamma = random(rng, &[c], 0.5, 1.5);
            let beta = random(rng, &[c], -0.5, 0.5);
            check(&|g, i| g.batchnorm_train(i[0], i[1], i[2]), &[x, gamma, beta], LAYER_STEP, rng)
        }
        "bn_eval" => {
            let x = random(rng, &[n, c, hw, hw], -1.0, 1.0);
            let gamma = random(rng, &[c], 0.5, 1.5);
            let beta = random(rng, &[c], -0.5, 0.5);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
            check(&move |g, i| g.batchnorm_eval(i[0], i[1], i[2], &mean, &var), &[x, gamma, beta], LAYER_STEP, rng)
        }
        "relu" => {
            let x = random_off_zero(rng, &[n, c, hw, hw], 1e-2);
            check(&|g, i| Ok(g.relu(i[0])), &[x], LAYER_STEP, rng)
        }
        "add" | "mul" => {
            let a = random(rng, &[n, c, hw], -1.0, 1.0);
            let b = random(rng, &[n, c, hw], -1.0, 1.0);
            if name == "add" {
                check(&|g, i| g.add(i[0], i[1]), &[a, b], LAYER_STEP, rng)
            } else {
                check(&|g, i| g.mul(i[0], i[1]), &[a, b], LAYER_STEP, rng)
            }
        }
        "avg_pool" => {
            let x = random(rng, &[n, c, hw, hw], -1.0, 1.0);
            check(&|g, i| g.global_avg_pool(i[0]), &[x], LAYER_STEP, rng)
        }
        "cross_entropy" => {
            let classes = rng.random_range(2..=6);
            let x = random(rng, &[n, classes], -2.0, 2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            check(&move |g, i| g.cross_entropy(i[0], &labels), &[x], LAYER_STEP, rng)
        }
        other => panic!("unknown layer {other}"),
    }
}

/// Values whose `v / s` stays at least `margin` away from every rounding
/// boundary (half-integers) and from the clip edges, with extra room at the
/// edges for the drift a step-size perturbation causes.
pub fn quant_values(rng: &mut ChaCha8Rng, n: usize, s: f64, range: QRange, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let r = rng.random_range(range.min as f64 - 2.0..range.max as f64 + 2.0);
            let frac_ok = ((r - r.floor()) - 0.5).abs() >= margin;
            let edge = margin + 2.0 * r.abs() * QUANT_STEP / s;
            let edge_ok = (r - range.min as f64).abs() >= edge && (r - range.max as f64).abs() >= edge;
            if frac_ok && edge_ok {
                break r * s;
            }
        })
        .collect()
}

/// Fake-quant gradient check against the stop-gradient surrogate
/// `f(v, s) = s * (clip(v/s) + r)` with `r = round(clip(v0/s0)) - clip(v0/s0)`
/// frozen at the evaluation point. Returns `(err_v, err_s)`.
pub fn fake_quant_case(rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let bits = [2u32, 3, 4, 8][rng.random_range(0..4)];
    let range = if rng.random_bool(0.5) { QRange::signed(bits) } else { QRange::unsigned(bits) };
    let s = rng.random_range(0.05..1.0);
    let n = rng.random_range(1..=12);
    let v = quant_values(rng, n, s, range, 1e-2);
    let up: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let vi = g.param(Tensor::new(vec![n], v.clone())?);
    let si = g.param(Tensor::scalar(s));
    let q = g.fake_quant(vi, si, range, 1.0)?;
    let p = g.input(Tensor::new(vec![n], up.clone())?);
    let m = g.mul(q, p)?;
    let l = g.sum(m);
    let grads = g.backward(l)?;

    let (lo, hi) = (range.min as f64, range.max as f64);
    let clip = |x: f64| x.clamp(lo, hi);
    let resid: Vec<f64> = v.iter().map(|&x| clip(x / s).round() - clip(x / s)).collect();
    let f = |v: &[f64], s: f64| -> f64 { v.iter().zip(&resid).zip(&up).map(|((&x, &r), &u)| u * s * (clip(x / s) + r)).sum() };

    let mut num_v = vec![0.0; n];
    for i in 0..n {
        let (mut a, mut b) = (v.clone(), v.clone());
        a[i] += LAYER_STEP * s;
        b[i] -= LAYER_STEP * s;
        num_v[i] = (f(&a, s) - f(&b, s)) / (2.0 * LAYER_STEP * s);
    }
    let num_s = (f(&v, s + QUANT_STEP) - f(&v, s - QUANT_STEP)) / (2.0 * QUANT_STEP);
    let err_v = rel_err(grads.get(vi).unwrap(), &num_v);
    let err_s = rel_err(grads.get(si).unwrap(), &[num_s]);
    Ok((err_v, err_s))
}

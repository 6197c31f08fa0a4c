//! Brute-force oracles for costs, pareto fronts and rank correlation.

#![allow(dead_code)]

use oqat_core::numerics::{conv2d, Tensor};
use oqat_core::space::ArchSpec;
use oqat_core::supernet::Supernet;

/// `(layer name, MACs, quantized)` for every layer of `arch`, measured by
/// running each sliced convolution on a zero input and reading shapes.
pub fn shape_walk(net: &Supernet, arch: &ArchSpec) -> Vec<(String, u64, bool)> {
    let view = net.select(arch).unwrap();
    let mut out = Vec::new();
    let mut x: Tensor<f32> = Tensor::zeros(&[1, net.space().in_channels, arch.resolution, arch.resolution]);
    let mut strides = vec![net.space().stem_stride];
    for (s, st) in net.space().stages.iter().enumerate() {
        for j in 0..arch.depths[s] {
            strides.extend([1, if j == 0 { st.stride } else { 1 }, 1]);
        }
    }
    strides.push(1);
    let weights = view.weights();
    let (convs, cls) = weights.split_at(weights.len() - 1);
    for ((name, w), stride) in convs.iter().zip(strides) {
        let w = w.to_tensor();
        let (o, i, k) = (w.dim(0), w.dim(1), w.dim(2));
        let groups = x.dim(1) / i;
        let y = conv2d(&x, &Tensor::zeros(w.shape()), stride, k / 2, groups).unwrap();
        assert_eq!(y.dim(1), o);
        out.push((name.clone(), (y.numel() * i * k * k) as u64, name != "stem"));
        x = y;
    }
    let c = cls[0].1.to_tensor();
    out.push((cls[0].0.clone(), c.numel() as u64, false));
    out
}

/// O(n^2) dominance filter, sorted by cost then input position.
pub fn dominance_front(items: &[(f64, f64)]) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..items.len())
        .filter(|&i| {
            !(0..items.len()).any(|j| {
                let (ci, ai) = items[i];
                let (cj, aj) = items[j];
                j != i && cj <= ci && aj >= ai && (cj < ci || aj > ai)
            })
        })
        .collect();
    keep.sort_by(|&a, &b| items[a].0.total_cmp(&items[b].0).then(a.cmp(&b)));
    keep
}

/// Rank with ties averaged by counting, then Pearson.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

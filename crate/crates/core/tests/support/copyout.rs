//! Independent network evaluated from weights copied out of a supernet.
//!
//! Looks parameters up by name, slices them with its own index arithmetic
//! and runs the standalone kernels, so it shares no slicing or graph code
//! with the supernet.

#![allow(dead_code)]

use oqat_core::numerics::{add, batchnorm_forward, conv2d, global_avg_pool, linear, relu, BatchNormState, Tensor};
use oqat_core::quantizer::{quantize_forward, QuantParams};
use oqat_core::space::ArchSpec;
use oqat_core::supernet::{BnKey, BnStats, StepKey, StepKind, StepVariant, Supernet};

fn param<'a>(net: &'a Supernet, name: &str) -> &'a Tensor<f32> {
    &net.params().iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}")).tensor
}

fn layer_index(net: &Supernet, name: &str) -> usize {
    net.layers().iter().position(|l| l.name == name).unwrap()
}

/// Copy of the leading `out` x `inp` channels and the centered `k x k`
/// window of an OIHW tensor.
pub fn copy_slice(t: &Tensor<f32>, out: usize, inp: usize, k: usize) -> Tensor<f32> {
    let s = t.shape();
    let (si, sk) = (s[1], s[2]);
    let off = (sk - k) / 2;
    let mut v = Vec::new();
    for o in 0..out {
        for i in 0..inp {
            for y in 0..k {
                for x in 0..k {
                    v.push(t.data()[((o * si + i) * sk + (y + off)) * sk + (x + off)]);
                }
            }
        }
    }
    Tensor::new(vec![out, inp, k, k], v).unwrap()
}

fn bn(net: &Supernet, stats: &BnStats, name: &str, preceding: usize, x: &Tensor<f32>) -> Tensor<f32> {
    let c = x.dim(1);
    let mut st = BatchNormState::new(c, 0.1);
    let key = BnKey { layer: layer_index(net, name), preceding };
    if let Some(s) = stats.get(&key) {
        st.running_mean = s.mean[..c].to_vec();
        st.running_var = s.var[..c].to_vec();
    }
    st.scale = param(net, &format!("{name}.bn.gamma")).data()[..c].to_vec();
    st.shift = param(net, &format!("{name}.bn.beta")).data()[..c].to_vec();
    batchnorm_forward(x, &mut st, false).unwrap()
}

fn conv(net: &Supernet, name: &str, x: &Tensor<f32>, out: usize, k: usize, stride: usize, depthwise: bool) -> Tensor<f32> {
    let inp = if depthwise { 1 } else { x.dim(1) };
    let mut w = copy_slice(param(net, &format!("{name}.weight")), out, inp, k);
    let mut x = x.clone();
    let q = net.quant();
    let qlayer = net.layers()[layer_index(net, name)].qindex;
    if let (true, Some(ql)) = (q.enabled, qlayer) {
        let step = |kind| net.step(&StepKey { qlayer: ql, kind, variant: StepVariant::Shared }).unwrap();
        x = quantize_forward(&x, &QuantParams::activations(q.act_bits, step(StepKind::Activation)).unwrap()).unwrap();
        w = quantize_forward(&w, &QuantParams::weights(q.weight_bits, step(StepKind::Weight)).unwrap()).unwrap();
    }
    conv2d(&x, &w, stride, k / 2, if depthwise { out } else { 1 }).unwrap()
}

/// Logits of `arch` on `images` with BatchNorm statistics `stats`
/// (per-layer step sharing only).
pub fn reference_logits(net: &Supernet, arch: &ArchSpec, images: &Tensor<f32>, stats: &BnStats) -> Tensor<f32> {
    let sp = net.space();
    let mut x = conv(net, "stem", images, sp.stem_channels, 3, sp.stem_stride, false);
    x = relu(&bn(net, stats, "stem", 0, &x));
    let mut preceding = 0;
    for (s, stage) in sp.stages.iter().enumerate() {
        for j in 0..arch.depths[s] {
            let base = format!("stages.{s}.blocks.{j}");
            let input = x.clone();
            let hidden = x.dim(1) * sp.expand_ratio;
            let stride = if j == 0 { stage.stride } else { 1 };
            let k = arch.kernels[s][j];
            let mut h = conv(net, &format!("{base}.expand"), &x, hidden, 1, 1, false);
            h = relu(&bn(net, stats, &format!("{base}.expand"), preceding, &h));
            h = conv(net, &format!("{base}.depthwise"), &h, hidden, k, stride, true);
            h = relu(&bn(net, stats, &format!("{base}.depthwise"), preceding, &h));
            h = conv(net, &format!("{base}.project"), &h, arch.widths[s][j], 1, 1, false);
            h = bn(net, stats, &format!("{base}.project"), preceding, &h);
            if stride == 1 && input.dim(1) == h.dim(1) {
                h = add(&h, &input).unwrap();
            }
            x = h;
            preceding += 1;
        }
    }
    x = conv(net, "head", &x, sp.head_channels, 1, 1, false);
    x = relu(&bn(net, stats, "head", preceding, &x));
    let pooled = global_avg_pool(&x).unwrap();
    linear(&pooled, param(net, "classifier.weight"), Some(param(net, "classifier.bias"))).unwrap()
}

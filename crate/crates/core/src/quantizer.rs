//! Learned-step-size fake quantization.
//!
//! Forward: `q(v) = round(clip(v / s, q_min, q_max)) * s`, rounding half away
//! from zero. Backward uses the straight-through estimator: the value gradient
//! passes through inside `(q_min * s, q_max * s)` and is zero outside; the step
//! gradient per element is `round(v/s) - v/s` inside the range and `q_min` /
//! `q_max` when clipped, summed into one scalar per step size.

use serde::{Deserialize, Serialize};

use crate::error::{OqatError, Result};
use crate::numerics::{Real, Tensor};

/// Lower floor used by [`init_step_size`] for all-zero tensors.
pub const STEP_FLOOR: f32 = 1e-3;

/// Inclusive integer grid `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QRange {
    pub min: i64,
    pub max: i64,
}

impl QRange {
    /// `[-2^(k-1), 2^(k-1) - 1]`
    pub fn signed(bits: u32) -> Self {
        let half = 1i64 << (bits - 1);
        Self { min: -half, max: half - 1 }
    }

    /// `[0, 2^k - 1]`
    pub fn unsigned(bits: u32) -> Self {
        Self { min: 0, max: (1i64 << bits) - 1 }
    }

    pub fn for_kind(bits: u32, signed: bool) -> Self {
        if signed {
            Self::signed(bits)
        } else {
            Self::unsigned(bits)
        }
    }

    pub fn levels(&self) -> u64 {
        (self.max - self.min + 1) as u64
    }
}

/// Bit width, signedness and step size of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bit_width: u32,
    pub signed: bool,
    pub step: f32,
}

impl QuantParams {
    pub fn new(bit_width: u32, signed: bool, step: f32) -> Result<Self> {
        let qp = Self { bit_width, signed, step };
        qp.validate()?;
        Ok(qp)
    }

    pub fn weights(bit_width: u32, step: f32) -> Result<Self> {
        Self::new(bit_width, true, step)
    }

    pub fn activations(bit_width: u32, step: f32) -> Result<Self> {
        Self::new(bit_width, false, step)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bit_width) {
            return Err(OqatError::Quant(format!("bit width must be in 2..=16, got {}", self.bit_width)));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(OqatError::Quant(format!("step size must be positive and finite, got {}", self.step)));
        }
        Ok(())
    }

    pub fn range(&self) -> QRange {
        QRange::for_kind(self.bit_width, self.signed)
    }

    pub fn q_min(&self) -> i64 {
        self.range().min
    }

    pub fn q_max(&self) -> i64 {
        self.range().max
    }
}

/// How learned step sizes are shared across subnets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSharingScheme {
    /// Every subnet owns private step sizes.
    PerSubnet,
    /// One step size per candidate kernel size in each layer.
    SwitchablePerChoice,
    /// One weight and one activation step size per layer.
    #[default]
    PerLayer,
}

#[inline]
fn scaled_clip<T: Real>(v: T, s: T, range: QRange) -> T {
    let lo = T::from_i64(range.min).unwrap();
    let hi = T::from_i64(range.max).unwrap();
    (v / s).max(lo).min(hi)
}

/// Integer grid index of `v`.
#[inline]
pub fn grid_index<T: Real>(v: T, s: T, range: QRange) -> i64 {
    scaled_clip(v, s, range).round().to_i64().unwrap()
}

pub(crate) fn fake_quant_values<T: Real>(v: &[T], s: T, range: QRange) -> Vec<T> {
    // adding zero maps -0.0 to +0.0 so zero is a single level bitwise
    v.iter().map(|&x| (scaled_clip(x, s, range).round() + T::zero()) * s).collect()
}

/// STE gradients: `(grad_v, raw summed grad_s)`.
pub(crate) fn fake_quant_grads<T: Real>(v: &[T], s: T, range: QRange, up: &[T]) -> (Vec<T>, T) {
    let lo = T::from_i64(range.min).unwrap();
    let hi = T::from_i64(range.max).unwrap();
    let mut gv = vec![T::zero(); v.len()];
    let mut gs = T::zero();
    for ((g, &x), &u) in gv.iter_mut().zip(v).zip(up) {
        let r = x / s;
        let ds = if r <= lo {
            lo
        } else if r >= hi {
            hi
        } else {
            *g = u;
            r.round() - r
        };
        gs = gs + u * ds;
    }
    (gv, gs)
}

/// LSQ step-gradient scale `1 / sqrt(N * q_max)`.
pub fn lsq_grad_scale(numel: usize, range: QRange) -> f64 {
    1.0 / ((numel as f64) * (range.max.max(1) as f64)).sqrt()
}

pub fn quantize_forward<T: Real>(v: &Tensor<T>, qp: &QuantParams) -> Result<Tensor<T>> {
    qp.validate()?;
    Tensor::new(v.shape().to_vec(), fake_quant_values(v.data(), T::lit(qp.step as f64), qp.range()))
}

/// Returns `(grad_v, grad_s)`. With `lsq_scale` the summed step gradient is
/// multiplied by `1 / sqrt(N * q_max)`.
pub fn quantize_backward<T: Real>(
    v: &Tensor<T>,
    qp: &QuantParams,
    upstream: &Tensor<T>,
    lsq_scale: bool,
) -> Result<(Tensor<T>, T)> {
    qp.validate()?;
    if v.shape() != upstream.shape() {
        return Err(OqatError::Shape(format!(
            "quantize_backward: value {:?} vs upstream {:?}",
            v.shape(),
            upstream.shape()
        )));
    }
    let range = qp.range();
    let (gv, gs) = fake_quant_grads(v.data(), T::lit(qp.step as f64), range, upstream.data());
    let gs = if lsq_scale { gs * T::lit(lsq_grad_scale(v.numel(), range)) } else { gs };
    Ok((Tensor::new(v.shape().to_vec(), gv)?, gs))
}

/// `2 * mean(|v|) / sqrt(q_max)`, or [`STEP_FLOOR`] when the mean is zero.
pub fn init_step_size(v: &[f32], range: QRange) -> f32 {
    if v.is_empty() {
        return STEP_FLOOR;
    }
    let mean_abs = v.iter().map(|x| x.abs() as f64).sum::<f64>() / v.len() as f64;
    if mean_abs == 0.0 {
        return STEP_FLOOR;
    }
    (2.0 * mean_abs / (range.max as f64).sqrt()) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: f32, s: f32, bits: u32, signed: bool) -> f32 {
        let t = Tensor::new(vec![1], vec![v]).unwrap();
        quantize_forward(&t, &QuantParams::new(bits, signed, s).unwrap()).unwrap().item()
    }

    #[test]
    fn ranges_follow_bit_width() {
        assert_eq!(QRange::signed(2), QRange { min: -2, max: 1 });
        assert_eq!(QRange::signed(4), QRange { min: -8, max: 7 });
        assert_eq!(QRange::unsigned(2), QRange { min: 0, max: 3 });
        assert_eq!(QRange::unsigned(4), QRange { min: 0, max: 15 });
    }

    #[test]
    fn forward_examples() {
        assert_eq!(q(0.0, 0.37, 3, true), 0.0);
        assert_eq!(q(5.0, 1.0, 2, true), 1.0);
        assert_eq!(q(2.3, 1.0, 4, true), 2.0);
        assert_eq!(q(-9.0, 1.0, 4, true), -8.0);
        assert_eq!(q(-1.0, 1.0, 4, false), 0.0);
        // ties round away from zero
        assert_eq!(q(2.5, 1.0, 4, true), 3.0);
        assert_eq!(q(-2.5, 1.0, 4, true), -3.0);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(QuantParams::new(4, true, 0.0).is_err());
        assert!(QuantParams::new(4, true, -1.0).is_err());
        assert!(QuantParams::new(1, true, 1.0).is_err());
    }

    #[test]
    fn backward_examples() {
        let qp = QuantParams::weights(4, 1.0).unwrap();
        let v = Tensor::new(vec![3], vec![2.3f64, 9.0, -0.4]).unwrap();
        let up = Tensor::new(vec![3], vec![0.5, 0.7, -2.0]).unwrap();
        let (gv, _) = quantize_backward(&v, &qp, &up, false).unwrap();
        assert_eq!(gv.data(), &[0.5, 0.0, -2.0]);

        let one = |x: f64| {
            let v = Tensor::new(vec![1], vec![x]).unwrap();
            quantize_backward(&v, &qp, &Tensor::full(&[1], 1.0), false).unwrap()
        };
        let (_, gs) = one(2.3);
        assert!((gs - (-0.3)).abs() < 1e-12);
        let (gv, gs) = one(9.0);
        assert_eq!((gv.item(), gs), (0.0, 7.0));
        let (gv, gs) = one(-20.0);
        assert_eq!((gv.item(), gs), (0.0, -8.0));
    }

    #[test]
    fn lsq_scale_applied_to_step_grad() {
        let qp = QuantParams::weights(4, 1.0).unwrap();
        let v = Tensor::new(vec![4], vec![9.0f64; 4]).unwrap();
        let up = Tensor::full(&[4], 1.0);
        let (_, raw) = quantize_backward(&v, &qp, &up, false).unwrap();
        let (_, scaled) = quantize_backward(&v, &qp, &up, true).unwrap();
        assert_eq!(raw, 28.0);
        assert!((scaled - 28.0 / (4.0f64 * 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn init_examples() {
        assert_eq!(init_step_size(&[0.0; 8], QRange::signed(4)), STEP_FLOOR);
        let v: Vec<f32> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = init_step_size(&v, QRange::signed(4));
        assert!((s - 2.0 / 7f32.sqrt()).abs() < 1e-6);
        assert!((s - 0.7559).abs() < 1e-4);
    }

    #[test]
    fn mismatched_upstream_rejected() {
        let qp = QuantParams::weights(4, 1.0).unwrap();
        let v = Tensor::<f32>::zeros(&[3]);
        let up = Tensor::<f32>::zeros(&[4]);
        assert!(quantize_backward(&v, &qp, &up, false).is_err());
    }
}

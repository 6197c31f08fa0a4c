//! Quantization-aware supernet training, bit inheritance and the
//! progressive bit-width schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplits, Split};
use crate::error::{OqatError, Result};
use crate::numerics::Tensor;
use crate::quantizer::{grid_index, QRange, StepSharingScheme};
use crate::space::{ArchSpec, SearchSpace};
use crate::supernet::{init_from_mean, BnMode, QuantConfig, StepKind, StepKey, Supernet};

/// Step sizes are kept above this after every update.
pub const MIN_STEP: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight and activation bit width; `None` trains in floating point.
    pub bits: Option<u32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f32,
    pub lr_steps: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global L2 norm cap over all gradients per step; 0 disables.
    pub grad_clip: f32,
    pub lr_schedule: LrSchedule,
    /// Random subnets per step in addition to the largest and smallest.
    pub random_subnets: usize,
    pub bn_momentum: f32,
    pub step_sharing: StepSharingScheme,
    pub lsq_grad_scale: bool,
    pub seed: u64,
    /// Calibration batches used for per-epoch validation and after inheritance.
    pub calib_batches: usize,
    pub eval_batch_size: usize,
    /// Finetune epochs after inheritance as a fraction of `epochs`.
    pub finetune_frac: f64,
    /// Learning-rate multiplier for finetuning after inheritance.
    pub finetune_lr_scale: f32,
    /// Re-initialize activation step sizes from observed statistics after
    /// inheritance.
    pub recalibrate_act_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bits: Some(4),
            epochs: 10,
            batch_size: 32,
            lr_weights: 0.3,
            lr_steps: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            lr_schedule: LrSchedule::Cosine,
            random_subnets: 2,
            bn_momentum: 0.1,
            step_sharing: StepSharingScheme::PerLayer,
            lsq_grad_scale: true,
            seed: 0,
            calib_batches: 4,
            eval_batch_size: 128,
            finetune_frac: 0.1,
            finetune_lr_scale: 0.1,
            recalibrate_act_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bits {
            if b < 2 {
                return Err(OqatError::Config(format!("bits must be at least 2, got {b}")));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.calib_batches == 0 {
            return Err(OqatError::Config("batch sizes and calib_batches must be positive".into()));
        }
        if !(self.lr_weights >= 0.0 && self.lr_steps >= 0.0) {
            return Err(OqatError::Config("learning rates must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(OqatError::Config("momentum must be in [0,1) and bn_momentum in (0,1)".into()));
        }
        if !(self.finetune_frac >= 0.0) {
            return Err(OqatError::Config("finetune_frac must be nonnegative".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(OqatError::Config("grad_clip must be nonnegative".into()));
        }
        if !(self.finetune_lr_scale > 0.0) {
            return Err(OqatError::Config("finetune_lr_scale must be positive".into()));
        }
        self.quant_config().validate()
    }

    pub fn quant_config(&self) -> QuantConfig {
        match self.bits {
            None => QuantConfig::float(),
            Some(b) => QuantConfig { scheme: self.step_sharing, lsq_grad_scale: self.lsq_grad_scale, ..QuantConfig::bits(b) },
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        ((self.epochs as f64 * self.finetune_frac).round() as usize).max(1)
    }

    /// Settings for finetuning an inherited net at `bits`.
    pub fn finetune(&self, bits: u32) -> TrainConfig {
        TrainConfig {
            bits: Some(bits),
            epochs: self.finetune_epochs(),
            lr_weights: self.lr_weights * self.finetune_lr_scale,
            lr_steps: self.lr_steps * self.finetune_lr_scale,
            ..self.clone()
        }
    }

    fn lr_factor(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f32 {
        match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let total = (self.epochs * steps_per_epoch).max(1) as f64;
                let t = (epoch * steps_per_epoch + step) as f64 / total;
                (0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub max_acc: f64,
    pub min_acc: f64,
}

/// SGD with momentum over supernet weights and step sizes.
#[derive(Debug, Default)]
struct Sgd {
    weights: BTreeMap<usize, Vec<f32>>,
    steps: BTreeMap<StepKey, f32>,
}

impl Sgd {
    fn apply(&mut self, net: &mut Supernet, cfg: &TrainConfig, factor: f32) {
        let clip = clip_scale(net, cfg.grad_clip);
        let lr_w = cfg.lr_weights * factor;
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
            // no decay on BatchNorm affine terms and biases
            let decay = if p.tensor.shape().len() > 1 { cfg.weight_decay } else { 0.0 };
            let vel = self.weights.entry(i).or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + clip * g + decay * *w;
                *w -= lr_w * *v;
            }
        }
        let lr_s = cfg.lr_steps * factor;
        for (key, t) in net.steps_mut().iter_mut() {
            let Some(g) = t.grad().map(|g| g[0]) else { continue };
            let v = self.steps.entry(key.clone()).or_insert(0.0);
            *v = cfg.momentum * *v + clip * g;
            let s = &mut t.data_mut()[0];
            *s = (*s - lr_s * *v).max(MIN_STEP);
        }
    }
}

// A layer whose quantized input is constant has near-zero batch variance,
// and BatchNorm then multiplies its gradient by ~1/sqrt(eps).
fn clip_scale(net: &Supernet, max_norm: f32) -> f32 {
    if max_norm == 0.0 {
        return 1.0;
    }
    let mut sq = 0.0f64;
    for p in net.params() {
        sq += p.tensor.grad().map_or(0.0, |g| g.iter().map(|&x| (x as f64).powi(2)).sum());
    }
    for t in net.steps().values() {
        sq += t.grad().map_or(0.0, |g| (g[0] as f64).powi(2));
    }
    let norm = sq.sqrt();
    if norm > max_norm as f64 { (max_norm as f64 / norm) as f32 } else { 1.0 }
}

fn sandwich(space: &SearchSpace, rng: &mut ChaCha8Rng, random: usize) -> Vec<ArchSpec> {
    let mut archs = vec![space.max_arch(), space.min_arch()];
    archs.extend((0..random).map(|_| space.sample(rng)));
    archs
}

/// Largest- and smallest-subnet validation accuracy after BN calibration.
pub fn max_min_accuracy(net: &Supernet, data: &DataSplits, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut out = [0.0; 2];
    for (o, arch) in out.iter_mut().zip([net.space().max_arch(), net.space().min_arch()]) {
        let view = net.select(&arch)?;
        *o = view.calibrate_and_evaluate(&data.calib, &data.val, cfg.eval_batch_size, cfg.calib_batches)?.accuracy;
    }
    Ok((out[0], out[1]))
}

/// Train `net` in place with the sandwich rule. `on_epoch` sees each epoch's
/// metrics as soon as they are computed.
pub fn train_supernet(
    net: &mut Supernet,
    cfg: &TrainConfig,
    data: &DataSplits,
    phase: &str,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(OqatError::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let archs = sandwich(net.space(), &mut rng, cfg.random_subnets);
            net.zero_grads();
            let weight = 1.0 / archs.len() as f32;
            for arch in &archs {
                let (images, labels) = data.train.batch(idx, arch.resolution)?;
                net.prepare_steps(arch, &images)?;
                let mut pass = net.forward(arch, images, BnMode::Batch)?;
                let loss = pass.graph.cross_entropy(pass.logits, &labels)?;
                let value = pass.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(OqatError::NonFiniteLoss { epoch, step });
                }
                loss_sum += value as f64;
                loss_count += 1;
                let scale = pass.graph.value(loss).clone().map(|_| weight);
                let scale = pass.graph.input(scale);
                let scaled = pass.graph.mul(loss, scale)?;
                let grads = pass.graph.backward(scaled)?;
                net.accumulate_grads(&pass, &grads);
                net.update_running_stats(&pass, cfg.bn_momentum);
            }
            opt.apply(net, cfg, cfg.lr_factor(epoch, step, steps_per_epoch));
        }
        net.zero_grads();
        let (max_acc, min_acc) = max_min_accuracy(net, data, cfg)?;
        let m = EpochMetrics {
            phase: phase.to_string(),
            epoch,
            steps: steps_per_epoch,
            loss: loss_sum / loss_count.max(1) as f64,
            max_acc,
            min_acc,
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    net.params_mut().iter_mut().for_each(|p| p.tensor.clear_grad());
    net.steps_mut().values_mut().for_each(Tensor::clear_grad);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepChange {
    pub key: String,
    pub old: f32,
    pub new: f32,
}

/// Quantized-weight distance between the source and the inherited grid for
/// one weight step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBound {
    pub key: String,
    pub layer: String,
    pub n_w: usize,
    pub step: f32,
    pub l1: f64,
    pub bound: f64,
}

impl LayerBound {
    pub fn holds(&self) -> bool {
        self.l1 <= self.bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InheritanceRecord {
    pub source_bits: u32,
    pub target_bits: u32,
    pub steps: Vec<StepChange>,
    pub bounds: Vec<LayerBound>,
    /// Activation step sizes after re-initialization, when enabled.
    pub recalibrated_act_steps: Vec<StepChange>,
}

impl InheritanceRecord {
    pub fn violations(&self) -> Vec<&LayerBound> {
        self.bounds.iter().filter(|b| !b.holds()).collect()
    }

    /// Fail with the first violated layer bound.
    pub fn verify(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(b) => Err(OqatError::BoundViolation { layer: b.layer.clone(), l1: b.l1, bound: b.bound }),
        }
    }
}

/// `||Q(w, s) - Q(w, 2s)||_1` with `Q(w, s)` on the `bits` grid and
/// `Q(w, 2s)` on the `bits - 1` grid, and the bound `N_w * s`.
///
/// Both quantized values are multiples of `s`, so the distance is
/// `s * sum |n_i - 2 m_i|` with integer grid indices; computing it that way
/// is exact.
pub fn inheritance_distance(w: &[f32], s: f32, bits: u32) -> (f64, f64) {
    let hi = QRange::signed(bits);
    let lo = QRange::signed(bits - 1);
    let s2 = 2.0 * s;
    let units: i64 = w.iter().map(|&x| (grid_index(x, s, hi) - 2 * grid_index(x, s2, lo)).abs()).sum();
    (units as f64 * s as f64, w.len() as f64 * s as f64)
}

/// Inherit a `k`-bit supernet into `k-1` bits: weights untouched, every step
/// size doubled, then activation step sizes and stored BatchNorm statistics
/// recalibrated on `calib`.
pub fn inherit_bits(net: &mut Supernet, calib: &Split, cfg: &TrainConfig) -> Result<InheritanceRecord> {
    let quant = net.quant().clone();
    if !quant.enabled {
        return Err(OqatError::Config("cannot inherit from a floating-point supernet".into()));
    }
    if quant.weight_bits != quant.act_bits {
        return Err(OqatError::Config("inheritance needs equal weight and activation bits".into()));
    }
    let k = quant.weight_bits;
    if k <= 2 {
        return Err(OqatError::Config(format!("cannot inherit below 2 bits (source is {k}-bit)")));
    }

    let mut steps = Vec::new();
    let mut bounds = Vec::new();
    for (key, t) in net.steps().iter() {
        let old = t.item();
        steps.push(StepChange { key: key.to_string(), old, new: 2.0 * old });
        if key.kind == StepKind::Weight {
            let layer = net.quantized_layer(key.qlayer);
            let w = net.params()[layer.weight].tensor.data();
            let (l1, bound) = inheritance_distance(w, old, k);
            bounds.push(LayerBound { key: key.to_string(), layer: layer.name.clone(), n_w: w.len(), step: old, l1, bound });
        }
    }
    for t in net.steps_mut().values_mut() {
        t.data_mut()[0] *= 2.0;
    }
    net.set_quant(QuantConfig { weight_bits: k - 1, act_bits: k - 1, ..quant })?;
    let mut record = InheritanceRecord { source_bits: k, target_bits: k - 1, steps, bounds, recalibrated_act_steps: Vec::new() };
    record.verify()?;

    if cfg.recalibrate_act_steps {
        record.recalibrated_act_steps = recalibrate_activation_steps(net, calib, cfg)?;
    }
    recalibrate_stored_bn(net, calib, cfg)?;
    Ok(record)
}

/// Re-initialize every activation step size from the mean absolute layer
/// inputs of the largest subnet on `calib`.
pub fn recalibrate_activation_steps(net: &mut Supernet, calib: &Split, cfg: &TrainConfig) -> Result<Vec<StepChange>> {
    let view = net.max_view();
    let batches = view.calibration_batches(calib, cfg.eval_batch_size, cfg.calib_batches)?;
    let means = net.observe_activations(&view.arch().clone(), &batches)?;
    let range = QRange::unsigned(net.quant().act_bits);
    let mut changes = Vec::new();
    for (key, t) in net.steps_mut().iter_mut() {
        if key.kind == StepKind::Activation {
            if let Some(&m) = means.get(&key.qlayer) {
                let old = t.item();
                let new = init_from_mean(m, range);
                t.data_mut()[0] = new;
                changes.push(StepChange { key: key.to_string(), old, new });
            }
        }
    }
    Ok(changes)
}

/// Replace the stored BatchNorm statistics of the largest and smallest
/// subnets with calibrated ones.
pub fn recalibrate_stored_bn(net: &mut Supernet, calib: &Split, cfg: &TrainConfig) -> Result<()> {
    for arch in [net.space().min_arch(), net.space().max_arch()] {
        let view = net.select(&arch)?;
        let batches = view.calibration_batches(calib, cfg.eval_batch_size, cfg.calib_batches)?;
        let stats = view.calibrate_bn(&batches)?;
        net.store_bn_stats(&stats);
    }
    Ok(())
}

/// Evaluate a trained supernet at different weight/activation bit widths.
/// Step sizes are kept unless `recalibrate_steps` re-initializes activation
/// steps from statistics.
pub fn retarget_bits(net: &mut Supernet, weight_bits: u32, act_bits: u32, calib: &Split, cfg: &TrainConfig, recalibrate_steps: bool) -> Result<()> {
    let quant = net.quant().clone();
    if !quant.enabled {
        return Err(OqatError::Config("cannot retarget a floating-point supernet".into()));
    }
    net.set_quant(QuantConfig { weight_bits, act_bits, ..quant })?;
    if recalibrate_steps {
        recalibrate_activation_steps(net, calib, cfg)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub bits: u32,
    pub method: String,
    pub epochs: usize,
    /// Largest-subnet accuracy after the first epoch.
    pub start_acc: f64,
    pub end_acc: f64,
    /// Accuracy right after inheritance and calibration, before finetuning.
    pub inherited_acc: Option<f64>,
}

pub struct ScheduleOutcome {
    pub checkpoints: Vec<(u32, Supernet)>,
    pub records: Vec<InheritanceRecord>,
    pub rows: Vec<ScheduleRow>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn validate_schedule(bits: &[u32]) -> Result<()> {
    if bits.is_empty() {
        return Err(OqatError::Config("bit schedule is empty".into()));
    }
    if bits.iter().any(|&b| b < 2) {
        return Err(OqatError::Config(format!("bit schedule {bits:?} goes below 2")));
    }
    if bits.windows(2).any(|w| w[1] + 1 != w[0]) {
        return Err(OqatError::Config(format!("bit schedule {bits:?} must be strictly descending and consecutive")));
    }
    Ok(())
}

fn row(bits: u32, method: &str, m: &[EpochMetrics], inherited_acc: Option<f64>) -> ScheduleRow {
    let pick = |e: Option<&EpochMetrics>| e.map(|e| e.max_acc).or(inherited_acc).unwrap_or(0.0);
    ScheduleRow { bits, method: method.into(), epochs: m.len(), start_acc: pick(m.first()), end_acc: pick(m.last()), inherited_acc }
}

/// Train at `bits[0]`, then inherit and finetune down the schedule. With
/// `scratch_baseline`, every lower bit width is also trained from scratch
/// for the same number of epochs at the full learning rate.
pub fn run_schedule(
    space: &SearchSpace,
    cfg: &TrainConfig,
    data: &DataSplits,
    bits: &[u32],
    scratch_baseline: bool,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<ScheduleOutcome> {
    validate_schedule(bits)?;
    cfg.validate()?;
    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();

    let base_cfg = TrainConfig { bits: Some(bits[0]), ..cfg.clone() };
    let mut net = Supernet::new(space.clone(), base_cfg.quant_config(), cfg.seed)?;
    let m = train_supernet(&mut net, &base_cfg, data, &format!("qat-{}", bits[0]), on_epoch)?;
    rows.push(row(bits[0], "qat", &m, None));
    metrics.extend(m);
    checkpoints.push((bits[0], net.clone()));

    let ft_epochs = cfg.finetune_epochs();
    for (i, &b) in bits.iter().enumerate().skip(1) {
        let ft_cfg = TrainConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.finetune(b) };
        let record = inherit_bits(&mut net, &data.calib, &ft_cfg)?;
        records.push(record);
        let inherited = max_min_accuracy(&net, data, &ft_cfg)?.0;
        let m = train_supernet(&mut net, &ft_cfg, data, &format!("inherit-{b}"), on_epoch)?;
        rows.push(row(b, "bit-inheritance", &m, Some(inherited)));
        metrics.extend(m);
        checkpoints.push((b, net.clone()));

        if scratch_baseline {
            let sc_cfg = TrainConfig { bits: Some(b), epochs: ft_epochs, seed: ft_cfg.seed, ..cfg.clone() };
            let mut scratch = Supernet::new(space.clone(), sc_cfg.quant_config(), cfg.seed)?;
            let m = train_supernet(&mut scratch, &sc_cfg, data, &format!("scratch-{b}"), on_epoch)?;
            rows.push(row(b, "qat-scratch", &m, None));
            metrics.extend(m);
        }
    }
    Ok(ScheduleOutcome { checkpoints, records, rows, metrics })
}

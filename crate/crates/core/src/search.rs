//! Cost model, constrained sampling, pareto extraction and coarse-to-fine
//! architecture search.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSplits;
use crate::error::{OqatError, Result};
use crate::space::{ArchSpec, SearchSpace};
use crate::supernet::Supernet;

/// Kernel size of the stem convolution.
pub const STEM_KERNEL: usize = 3;

/// Spaces with at most this many architectures are enumerated instead of
/// sampled when collecting candidates.
pub const ENUMERATION_LIMIT: usize = 250_000;

/// How the unquantized first conv and last linear layer enter BitOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpFactor {
    /// 32 x 32 bit operations per MAC.
    #[default]
    Fp32,
    /// 8 x 8 bit operations per MAC.
    Int8,
    Exclude,
}

impl FpFactor {
    pub fn value(self) -> u64 {
        match self {
            FpFactor::Fp32 => 32 * 32,
            FpFactor::Int8 => 8 * 8,
            FpFactor::Exclude => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    /// Multiply-accumulates.
    pub flops: u64,
    /// `None` for unquantized layers.
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub bitops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_fp: u64,
    pub bitops: u64,
    pub layers: Vec<LayerCost>,
}

fn out_size(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

/// Per-layer MACs of `arch` at its resolution with `m`-bit weights and
/// `n`-bit activations on every quantized layer.
pub fn cost(space: &SearchSpace, arch: &ArchSpec, m: u32, n: u32, fp: FpFactor) -> CostReport {
    let mut layers = Vec::new();
    let mut push = |name: String, flops: u64, quantized: bool| {
        let (wb, ab, bitops) = if quantized { (Some(m), Some(n), m as u64 * n as u64 * flops) } else { (None, None, fp.value() * flops) };
        layers.push(LayerCost { layer: name, flops, weight_bits: wb, act_bits: ab, bitops });
    };
    let mut hw = out_size(arch.resolution, STEM_KERNEL, space.stem_stride);
    push(
        "stem".into(),
        (space.stem_channels * space.in_channels * STEM_KERNEL * STEM_KERNEL * hw * hw) as u64,
        false,
    );
    let mut in_w = space.stem_channels;
    for (s, st) in space.stages.iter().enumerate() {
        for j in 0..arch.depths[s] {
            let (out_w, k) = (arch.widths[s][j], arch.kernels[s][j]);
            let hidden = in_w * space.expand_ratio;
            let stride = if j == 0 { st.stride } else { 1 };
            let base = format!("stages.{s}.blocks.{j}");
            push(format!("{base}.expand"), (hidden * in_w * hw * hw) as u64, true);
            hw = out_size(hw, k, stride);
            push(format!("{base}.depthwise"), (hidden * k * k * hw * hw) as u64, true);
            push(format!("{base}.project"), (out_w * hidden * hw * hw) as u64, true);
            in_w = out_w;
        }
    }
    push("head".into(), (space.head_channels * in_w * hw * hw) as u64, true);
    push("classifier".into(), (space.num_classes * space.head_channels) as u64, false);
    CostReport {
        flops_fp: layers.iter().map(|l| l.flops).sum(),
        bitops: layers.iter().map(|l| l.bitops).sum(),
        layers,
    }
}

/// Cost dimension used for budgets and pareto fronts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKey {
    Flops,
    #[default]
    Bitops,
}

impl CostKey {
    pub fn of(self, c: &CostReport) -> f64 {
        match self {
            CostKey::Flops => c.flops_fp as f64,
            CostKey::Bitops => c.bitops as f64,
        }
    }
}

/// One evaluated architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub arch: ArchSpec,
    /// `fp`, the bit width, or `w/a` for mixed settings.
    pub bit: String,
    pub accuracy: f64,
    pub cost: CostReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub const RECORD_CSV_HEADER: &str = "arch,bit,acc,flops_fp,bitops";

impl EvalRecord {
    /// CSV row; the arch string holds commas and is always quoted.
    pub fn csv_row(&self) -> String {
        format!("\"{}\",{},{},{},{}", self.arch, self.bit, self.accuracy, self.cost.flops_fp, self.cost.bitops)
    }
}

/// Bit widths behind a record label; floating point counts as 32/32.
pub fn label_bits(label: &str) -> Result<(u32, u32)> {
    let bad = || OqatError::Invalid(format!("bad bit label `{label}`"));
    if label == "fp" {
        return Ok((32, 32));
    }
    match label.split_once('/') {
        Some((w, a)) => Ok((w.parse().map_err(|_| bad())?, a.parse().map_err(|_| bad())?)),
        None => {
            let b = label.parse().map_err(|_| bad())?;
            Ok((b, b))
        }
    }
}

/// `count` architectures with FP FLOPs inside `[lo, hi]`, drawn uniformly
/// and rejection-filtered, split evenly over `buckets` equal-width FLOPs
/// intervals. Gives up after `max_attempts` draws.
pub fn sample_constrained(
    space: &SearchSpace,
    flops_range: (f64, f64),
    count: usize,
    buckets: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Vec<ArchSpec>> {
    let (lo, hi) = flops_range;
    if !(lo <= hi) || buckets == 0 {
        return Err(OqatError::Config(format!("invalid FLOPs range [{lo}, {hi}] with {buckets} buckets")));
    }
    let width = (hi - lo) / buckets as f64;
    let bucket_of = |f: f64| -> Option<usize> {
        if f < lo || f > hi {
            None
        } else if width == 0.0 {
            Some(0)
        } else {
            Some((((f - lo) / width) as usize).min(buckets - 1))
        }
    };
    let quota: Vec<usize> = (0..buckets).map(|b| count / buckets + usize::from(b < count % buckets)).collect();
    let mut filled: Vec<Vec<ArchSpec>> = vec![Vec::new(); buckets];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0;
    while filled.iter().zip(&quota).any(|(f, q)| f.len() < *q) {
        if attempts == max_attempts {
            let b = filled.iter().zip(&quota).position(|(f, q)| f.len() < *q).unwrap();
            let (blo, bhi) = (lo + width * b as f64, lo + width * (b + 1) as f64);
            return Err(OqatError::EmptyBucket { lo: blo, hi: bhi, attempts });
        }
        attempts += 1;
        let arch = space.sample(&mut rng);
        let f = cost(space, &arch, 32, 32, FpFactor::Fp32).flops_fp as f64;
        if let Some(b) = bucket_of(f) {
            if filled[b].len() < quota[b] {
                filled[b].push(arch);
            }
        }
    }
    Ok(filled.into_iter().flatten().collect())
}

/// Indices of the non-dominated items, sorted by cost ascending (ties by
/// input order). An item is dropped iff another has cost <= and accuracy >=
/// with at least one strict.
pub fn pareto_indices<T>(items: &[T], cost: impl Fn(&T) -> f64, acc: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    // cost ascending, accuracy descending: a later item can only be dominated
    // by an earlier one.
    order.sort_by(|&a, &b| {
        cost(&items[a])
            .total_cmp(&cost(&items[b]))
            .then(acc(&items[b]).total_cmp(&acc(&items[a])))
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for i in order {
        let (c, a) = (cost(&items[i]), acc(&items[i]));
        let dominated = match best {
            None => false,
            Some((bc, ba)) => ba > a || (ba == a && bc < c),
        };
        if !dominated {
            keep.push(i);
            if best.is_none_or(|(_, ba)| a > ba) {
                best = Some((c, a));
            }
        }
    }
    keep.sort_by(|&a, &b| cost(&items[a]).total_cmp(&cost(&items[b])).then(a.cmp(&b)));
    keep
}

pub fn pareto_front(records: &[EvalRecord], key: CostKey) -> Vec<EvalRecord> {
    pareto_indices(records, |r| key.of(&r.cost), |r| r.accuracy).into_iter().map(|i| records[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub budget: f64,
    pub budget_key: CostKey,
    /// Relative half-width of the feasible window around the budget.
    pub window: f64,
    /// Phase-1 candidate count.
    pub candidates: usize,
    /// Kernel perturbations per pareto skeleton in phase 2.
    pub perturbations: usize,
    pub calib_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    pub fp_factor: FpFactor,
    /// Rejection-sampling draws for spaces too large to enumerate.
    pub max_attempts: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 0.0,
            budget_key: CostKey::Bitops,
            window: 0.1,
            candidates: 100,
            perturbations: 8,
            calib_batches: 4,
            batch_size: 128,
            seed: 0,
            workers: 1,
            fp_factor: FpFactor::Fp32,
            max_attempts: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub budget: f64,
    pub budget_key: CostKey,
    pub best: EvalRecord,
    pub phase1: Vec<EvalRecord>,
    pub phase1_pareto: Vec<String>,
    pub phase2: Vec<EvalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Calibrate BatchNorm for `arch` on the calibration split and evaluate on
/// the validation split.
pub fn evaluate_arch(net: &Supernet, arch: &ArchSpec, data: &DataSplits, batch_size: usize, calib_batches: usize, fp: FpFactor) -> Result<EvalRecord> {
    let view = net.select(arch)?;
    let out = view.calibrate_and_evaluate(&data.calib, &data.val, batch_size, calib_batches)?;
    let q = net.quant();
    let (m, n) = if q.enabled { (q.weight_bits, q.act_bits) } else { (32, 32) };
    Ok(EvalRecord { arch: arch.clone(), bit: q.label(), accuracy: out.accuracy, cost: cost(net.space(), arch, m, n, fp), warnings: out.warnings })
}

/// Evaluate `archs` on `workers` threads; output order follows input order.
pub fn evaluate_many(net: &Supernet, archs: &[ArchSpec], data: &DataSplits, cfg: &SearchConfig) -> Result<Vec<EvalRecord>> {
    let run = || -> Result<Vec<EvalRecord>> {
        archs.par_iter().map(|a| evaluate_arch(net, a, data, cfg.batch_size, cfg.calib_batches, cfg.fp_factor)).collect()
    };
    if cfg.workers <= 1 {
        return archs.iter().map(|a| evaluate_arch(net, a, data, cfg.batch_size, cfg.calib_batches, cfg.fp_factor)).collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| OqatError::Config(format!("cannot start {} workers: {e}", cfg.workers)))?
        .install(run)
}

fn bits_of(net: &Supernet) -> (u32, u32) {
    let q = net.quant();
    if q.enabled {
        (q.weight_bits, q.act_bits)
    } else {
        (32, 32)
    }
}

/// Best record: highest accuracy, then lower BitOPs, then arch string.
pub fn select_best(records: &[EvalRecord]) -> Option<&EvalRecord> {
    records.iter().min_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(a.cost.bitops.cmp(&b.cost.bitops))
            .then(a.arch.compact().cmp(&b.arch.compact()))
    })
}

/// Distinct architectures whose cost lies in `[lo, hi]`: every one of them
/// when the space is small, otherwise up to `count` rejection-sampled ones.
/// Also returns the in-space cost closest to the window.
fn window_candidates(space: &SearchSpace, cost_of: &dyn Fn(&ArchSpec) -> f64, lo: f64, hi: f64, count: usize, seed: u64, max_attempts: usize) -> (Vec<ArchSpec>, Option<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nearest: Option<f64> = None;
    let mut note = |c: f64| {
        let d = if c < lo { lo - c } else { c - hi };
        if nearest.is_none_or(|n| d < if n < lo { lo - n } else { n - hi }) {
            nearest = Some(c);
        }
    };
    if space.count() <= ENUMERATION_LIMIT as u128 {
        let mut inside = Vec::new();
        for a in space.enumerate(ENUMERATION_LIMIT).expect("within limit") {
            let c = cost_of(&a);
            if (lo..=hi).contains(&c) {
                inside.push(a);
            } else {
                note(c);
            }
        }
        if inside.len() > count {
            inside.shuffle(&mut rng);
            inside.truncate(count);
        }
        inside.sort();
        return (inside, nearest);
    }
    let mut seen = BTreeSet::new();
    for _ in 0..max_attempts {
        if seen.len() == count {
            break;
        }
        let a = space.sample(&mut rng);
        let c = cost_of(&a);
        if (lo..=hi).contains(&c) {
            seen.insert(a);
        } else {
            note(c);
        }
    }
    (seen.into_iter().collect(), nearest)
}

/// All kernel assignments of `arch`'s skeleton, or `n` random distinct ones
/// when there are more than `n`.
fn kernel_variants(space: &SearchSpace, arch: &ArchSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<ArchSpec> {
    let slots: Vec<(usize, usize)> = (0..arch.depths.len()).flat_map(|s| (0..arch.depths[s]).map(move |j| (s, j))).collect();
    let total: u128 = slots.iter().map(|&(s, _)| space.stages[s].kernel_choices.len() as u128).product();
    if total <= n as u128 {
        return (0..total)
            .map(|code| {
                let mut c = code;
                let mut a = arch.clone();
                for &(s, j) in &slots {
                    let ks = &space.stages[s].kernel_choices;
                    a.kernels[s][j] = ks[(c % ks.len() as u128) as usize];
                    c /= ks.len() as u128;
                }
                a
            })
            .collect();
    }
    let mut seen = BTreeSet::new();
    let mut guard = 0;
    while seen.len() < n && guard < 100 * n {
        guard += 1;
        let mut a = arch.clone();
        for &(s, j) in &slots {
            let ks = &space.stages[s].kernel_choices;
            a.kernels[s][j] = *ks.choose(rng).unwrap();
        }
        seen.insert(a);
    }
    seen.into_iter().collect()
}

/// Two-phase search: evaluate candidates in the budget window, keep the
/// pareto skeletons, then perturb only their kernel sizes.
pub fn coarse_to_fine_search(net: &Supernet, data: &DataSplits, cfg: &SearchConfig) -> Result<SearchReport> {
    if !(cfg.budget > 0.0) || !(cfg.window >= 0.0) {
        return Err(OqatError::Config(format!("budget must be positive (got {}), window nonnegative", cfg.budget)));
    }
    let space = net.space();
    let (m, n) = bits_of(net);
    let cost_of = |a: &ArchSpec| cfg.budget_key.of(&cost(space, a, m, n, cfg.fp_factor));

    let max = space.max_arch();
    if cfg.budget >= cost_of(&max) {
        let best = evaluate_arch(net, &max, data, cfg.batch_size, cfg.calib_batches, cfg.fp_factor)?;
        return Ok(SearchReport {
            budget: cfg.budget,
            budget_key: cfg.budget_key,
            phase1: vec![best.clone()],
            phase1_pareto: vec![max.compact()],
            phase2: Vec::new(),
            best,
            note: Some(format!("budget {} is at or above the largest architecture ({}); returning it", cfg.budget, cost_of(&max))),
        });
    }

    let (lo, hi) = (cfg.budget * (1.0 - cfg.window), cfg.budget * (1.0 + cfg.window));
    let (cands, nearest) = window_candidates(space, &cost_of, lo, hi, cfg.candidates, cfg.seed, cfg.max_attempts);
    if cands.is_empty() {
        let nearest = nearest.unwrap_or(cost_of(&space.min_arch()));
        return Err(OqatError::InfeasibleBudget { budget: cfg.budget, nearest });
    }
    let phase1 = evaluate_many(net, &cands, data, cfg)?;
    let front = pareto_front(&phase1, cfg.budget_key);

    let mut seen: BTreeMap<String, EvalRecord> = phase1.iter().map(|r| (r.arch.compact(), r.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e2);
    let mut skeletons = BTreeSet::new();
    let mut fresh = Vec::new();
    for r in &front {
        if !skeletons.insert(r.arch.skeleton()) {
            continue;
        }
        for v in kernel_variants(space, &r.arch, cfg.perturbations, &mut rng) {
            let c = cost_of(&v);
            if (lo..=hi).contains(&c) && !seen.contains_key(&v.compact()) && !fresh.contains(&v) {
                fresh.push(v);
            }
        }
    }
    let phase2_new = evaluate_many(net, &fresh, data, cfg)?;
    for r in &phase2_new {
        seen.insert(r.arch.compact(), r.clone());
    }
    // phase 2 competes against the phase-1 pareto records as well
    let mut pool: Vec<EvalRecord> = front.clone();
    pool.extend(phase2_new.iter().cloned());
    let best = select_best(&pool).expect("nonempty pool").clone();
    Ok(SearchReport {
        budget: cfg.budget,
        budget_key: cfg.budget_key,
        best,
        phase1_pareto: front.iter().map(|r| r.arch.compact()).collect(),
        phase1,
        phase2: phase2_new,
        note: None,
    })
}

//! Quantization-friendliness (QF) analysis: QF scores, Spearman rank
//! correlations against architecture features, cohorts and plot data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{OqatError, Result};
use crate::search::{pareto_front, CostKey, CostReport, EvalRecord};
use crate::space::ArchSpec;

/// `acc_k / acc_fp`.
pub fn qf_score(acc_k: f64, acc_fp: f64) -> Result<f64> {
    if !(acc_fp > 0.0) {
        return Err(OqatError::Invalid(format!("QF undefined for floating-point accuracy {acc_fp}")));
    }
    Ok(acc_k / acc_fp)
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman rank correlation. Undefined (an error, never NaN) when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(OqatError::Invalid(format!("spearman needs two equal-length inputs of length >= 2, got {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(OqatError::Invalid("spearman inputs must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or_else(|| OqatError::Invalid("spearman undefined: constant input".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Flops,
    Resolution,
    TotalDepth,
    AvgWidth,
    AvgKernel,
}

impl Feature {
    pub const ALL: [Feature; 5] = [Feature::Flops, Feature::Resolution, Feature::TotalDepth, Feature::AvgWidth, Feature::AvgKernel];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Flops => "flops",
            Feature::Resolution => "resolution",
            Feature::TotalDepth => "total_depth",
            Feature::AvgWidth => "avg_width",
            Feature::AvgKernel => "avg_kernel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QfRecord {
    pub arch: ArchSpec,
    pub flops_fp: u64,
    pub acc_fp: f64,
    /// Accuracy per bit label.
    pub acc: BTreeMap<String, f64>,
    /// QF per bit label; `None` when undefined.
    pub qf: BTreeMap<String, Option<f64>>,
}

impl QfRecord {
    pub fn new(arch: ArchSpec, flops_fp: u64, acc_fp: f64, acc: BTreeMap<String, f64>) -> Self {
        let qf = acc.iter().map(|(b, &a)| (b.clone(), qf_score(a, acc_fp).ok())).collect();
        Self { arch, flops_fp, acc_fp, acc, qf }
    }

    pub fn feature(&self, f: Feature) -> f64 {
        let depth = self.arch.total_depth() as f64;
        match f {
            Feature::Flops => self.flops_fp as f64,
            Feature::Resolution => self.arch.resolution as f64,
            Feature::TotalDepth => depth,
            Feature::AvgWidth => self.arch.total_width() as f64 / depth,
            Feature::AvgKernel => self.arch.total_kernel() as f64 / depth,
        }
    }

    pub fn qf_at(&self, bit: &str) -> Option<f64> {
        self.qf.get(bit).copied().flatten()
    }
}

/// Join floating-point and quantized evaluations of the same architectures.
/// Quantized records without a floating-point partner are skipped.
pub fn join_records(fp: &[EvalRecord], quant: &[EvalRecord]) -> Vec<QfRecord> {
    let mut by_arch: BTreeMap<String, (ArchSpec, u64, f64, BTreeMap<String, f64>)> = BTreeMap::new();
    for r in fp {
        by_arch.insert(r.arch.compact(), (r.arch.clone(), r.cost.flops_fp, r.accuracy, BTreeMap::new()));
    }
    for r in quant {
        if let Some(e) = by_arch.get_mut(&r.arch.compact()) {
            e.3.insert(r.bit.clone(), r.accuracy);
        }
    }
    by_arch.into_values().map(|(a, f, acc_fp, acc)| QfRecord::new(a, f, acc_fp, acc)).collect()
}

/// Records whose FLOPs lie within `tol` (relative) of `center`.
pub fn flops_slice(records: &[QfRecord], center: f64, tol: f64) -> Vec<QfRecord> {
    records.iter().filter(|r| (r.flops_fp as f64 - center).abs() <= tol * center).cloned().collect()
}

/// Median FLOPs (lower median for even counts).
pub fn median_flops(records: &[QfRecord]) -> Option<f64> {
    let mut f: Vec<u64> = records.iter().map(|r| r.flops_fp).collect();
    f.sort_unstable();
    f.get(f.len().saturating_sub(1) / 2).map(|&v| v as f64)
}

/// Spearman of QF at `bit` against every feature over the records where QF
/// is defined. Undefined correlations are `None`.
pub fn feature_correlations(records: &[QfRecord], bit: &str) -> BTreeMap<String, Option<f64>> {
    let valid: Vec<&QfRecord> = records.iter().filter(|r| r.qf_at(bit).is_some()).collect();
    let qf: Vec<f64> = valid.iter().map(|r| r.qf_at(bit).unwrap()).collect();
    Feature::ALL
        .iter()
        .map(|&f| {
            let x: Vec<f64> = valid.iter().map(|r| r.feature(f)).collect();
            (f.name().to_string(), spearman(&qf, &x).ok())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeans {
    pub flops: f64,
    pub resolution: f64,
    pub total_depth: f64,
    pub avg_width: f64,
    pub avg_kernel: f64,
    pub qf: f64,
}

fn means(records: &[&QfRecord], bit: &str) -> FeatureMeans {
    let n = records.len().max(1) as f64;
    let m = |f: Feature| records.iter().map(|r| r.feature(f)).sum::<f64>() / n;
    FeatureMeans {
        flops: m(Feature::Flops),
        resolution: m(Feature::Resolution),
        total_depth: m(Feature::TotalDepth),
        avg_width: m(Feature::AvgWidth),
        avg_kernel: m(Feature::AvgKernel),
        qf: records.iter().map(|r| r.qf_at(bit).unwrap_or(0.0)).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub bit: String,
    pub k: usize,
    pub top: Vec<String>,
    pub worst: Vec<String>,
    pub top_means: FeatureMeans,
    pub worst_means: FeatureMeans,
    pub spearman: BTreeMap<String, Option<f64>>,
    /// Records excluded because QF is undefined.
    pub excluded: usize,
}

/// Top-`k` and worst-`k` architectures by QF at `bit`. Ties rank by arch
/// string so input order never matters.
pub fn cohort_report(records: &[QfRecord], bit: &str, k: usize) -> Result<CohortReport> {
    let mut valid: Vec<&QfRecord> = records.iter().filter(|r| r.qf_at(bit).is_some()).collect();
    if k == 0 || valid.len() < 2 * k {
        return Err(OqatError::Invalid(format!("cohorts of {k} need at least {} records with defined QF, have {}", 2 * k, valid.len())));
    }
    valid.sort_by(|a, b| b.qf_at(bit).unwrap().total_cmp(&a.qf_at(bit).unwrap()).then(a.arch.compact().cmp(&b.arch.compact())));
    let top = &valid[..k];
    let worst: Vec<&QfRecord> = valid[valid.len() - k..].iter().rev().copied().collect();
    Ok(CohortReport {
        bit: bit.to_string(),
        k,
        top: top.iter().map(|r| r.arch.compact()).collect(),
        worst: worst.iter().map(|r| r.arch.compact()).collect(),
        top_means: means(top, bit),
        worst_means: means(&worst, bit),
        spearman: feature_correlations(records, bit),
        excluded: records.len() - valid.len(),
    })
}

/// Expected sign of one correlation, checked with a minimum magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub feature: String,
    pub expected: String,
    pub spearman: Option<f64>,
    pub threshold: f64,
    pub holds: bool,
}

fn direction(corr: &BTreeMap<String, Option<f64>>, feature: Feature, negative: bool, threshold: f64) -> DirectionCheck {
    let s = corr.get(feature.name()).copied().flatten();
    let holds = s.is_some_and(|v| if negative { v < -threshold } else { v > threshold });
    DirectionCheck {
        feature: feature.name().into(),
        expected: if negative { "negative" } else { "positive" }.into(),
        spearman: s,
        threshold,
        holds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub center: f64,
    pub tolerance: f64,
    pub n: usize,
    pub spearman: BTreeMap<String, Option<f64>>,
    pub directions: Vec<DirectionCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub bit: String,
    pub n: usize,
    pub spearman: BTreeMap<String, Option<f64>>,
    pub fixed_flops: SliceReport,
}

/// Correlations over all records plus the fixed-FLOPs slice with the
/// depth (negative) and resolution (positive) direction checks.
pub fn correlation_report(records: &[QfRecord], bit: &str, center: Option<f64>, tolerance: f64, threshold: f64) -> Result<CorrelationReport> {
    let center = center.or_else(|| median_flops(records)).ok_or_else(|| OqatError::Invalid("no records to analyze".into()))?;
    let slice = flops_slice(records, center, tolerance);
    let sc = feature_correlations(&slice, bit);
    let directions = vec![direction(&sc, Feature::TotalDepth, true, threshold), direction(&sc, Feature::Resolution, false, threshold)];
    Ok(CorrelationReport {
        bit: bit.into(),
        n: records.iter().filter(|r| r.qf_at(bit).is_some()).count(),
        spearman: feature_correlations(records, bit),
        fixed_flops: SliceReport { center, tolerance, n: slice.iter().filter(|r| r.qf_at(bit).is_some()).count(), spearman: sc, directions },
    })
}

fn csv_err(e: csv::Error) -> OqatError {
    OqatError::Invalid(format!("csv: {e}"))
}

/// Parse `arch,bit,acc,flops_fp,bitops` rows.
pub fn read_records_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let expected: Vec<&str> = crate::search::RECORD_CSV_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(OqatError::Invalid(format!("record csv header must be `{}`", crate::search::RECORD_CSV_HEADER)));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |what: &str| OqatError::Invalid(format!("record csv row {}: bad {what}", line + 2));
        let acc: f64 = row[2].parse().map_err(|_| bad("acc"))?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(bad("acc (must be a fraction in [0,1])"));
        }
        out.push(EvalRecord {
            arch: row[0].parse()?,
            bit: row[1].to_string(),
            accuracy: acc,
            cost: CostReport { flops_fp: row[3].parse().map_err(|_| bad("flops_fp"))?, bitops: row[4].parse().map_err(|_| bad("bitops"))?, layers: Vec::new() },
            warnings: Vec::new(),
        });
    }
    Ok(out)
}

pub fn write_records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(crate::search::RECORD_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// One row per architecture with features, accuracies and QF per bit.
pub fn qf_report_csv(records: &[QfRecord]) -> Result<String> {
    let bits: Vec<String> = {
        let mut b: Vec<String> = records.iter().flat_map(|r| r.acc.keys().cloned()).collect();
        b.sort();
        b.dedup();
        b
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["arch".to_string()];
    header.extend(Feature::ALL.iter().map(|f| f.name().to_string()));
    header.push("acc_fp".into());
    for b in &bits {
        header.push(format!("acc_{b}"));
        header.push(format!("qf_{b}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        let mut row = vec![r.arch.compact()];
        row.extend(Feature::ALL.iter().map(|&f| r.feature(f).to_string()));
        row.push(r.acc_fp.to_string());
        for b in &bits {
            row.push(opt(r.acc.get(b).copied()));
            row.push(opt(r.qf_at(b)));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| OqatError::Invalid(e.to_string()))?).map_err(|e| OqatError::Invalid(e.to_string()))
}

/// Pareto front over FP FLOPs of the records at `bit`, as record CSV.
pub fn pareto_csv(records: &[EvalRecord], bit: &str) -> String {
    let at: Vec<EvalRecord> = records.iter().filter(|r| r.bit == bit).cloned().collect();
    write_records_csv(&pareto_front(&at, CostKey::Flops))
}

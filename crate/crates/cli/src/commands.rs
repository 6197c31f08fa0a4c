//! Subcommand implementations. Every command resolves its configuration,
//! writes `resolved_config.json` into the output directory and then its
//! artifacts. Reports carry no timestamps so reruns are byte-identical.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use oqat_core::analysis::{cohort_report, correlation_report, join_records, pareto_csv, qf_report_csv, read_records_csv, write_records_csv};
use oqat_core::data::DataSplits;
use oqat_core::search::{coarse_to_fine_search, evaluate_many, sample_constrained, EvalRecord, SearchConfig};
use oqat_core::space::{ArchSpec, SearchSpace};
use oqat_core::supernet::Supernet;
use oqat_core::training::{inherit_bits, retarget_bits, run_schedule, train_supernet, EpochMetrics, TrainConfig};
use oqat_core::OqatError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS: &str = "metrics.jsonl";

/// Output directory plus the metrics stream.
pub struct Run {
    pub cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn start(cfg: RunConfig) -> CliResult<Self> {
        let out = cfg.out_dir().to_path_buf();
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let run = Self { cfg, out };
        run.write(RESOLVED_CONFIG, &run.cfg.to_json())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        self.write(name, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
    }

    fn metrics_sink(&self) -> CliResult<MetricsSink> {
        let p = self.path(METRICS);
        Ok(MetricsSink { file: File::create(&p).map_err(|e| CliError::io(&p, e))?, path: p })
    }
}

struct MetricsSink {
    file: File,
    path: PathBuf,
}

impl MetricsSink {
    fn record(&mut self, m: &EpochMetrics) -> oqat_core::Result<()> {
        eprintln!("[{}] epoch {} loss {:.4} max-acc {:.4} min-acc {:.4}", m.phase, m.epoch, m.loss, m.max_acc, m.min_acc);
        let line = serde_json::to_string(m).expect("serializable");
        writeln!(self.file, "{line}").map_err(|e| OqatError::Invalid(format!("{}: {e}", self.path.display())))
    }
}

/// Load the dataset and fix the search space to the resolved config.
fn prepare_data(cfg: &mut RunConfig, stored: Option<&SearchSpace>) -> CliResult<DataSplits> {
    let mut data = load_dataset(&cfg.dataset)?;
    let space = match (&cfg.space, stored) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => SearchSpace::toy(data.in_channels(), data.num_classes),
    };
    space.validate()?;
    if space.in_channels != data.in_channels() || space.num_classes != data.num_classes {
        return Err(CliError::Usage(format!(
            "space expects {} channels and {} classes, dataset has {} and {}",
            space.in_channels,
            space.num_classes,
            data.in_channels(),
            data.num_classes
        )));
    }
    data.prepare(&space.resolution_choices)?;
    cfg.space = Some(space);
    Ok(data)
}

fn space_of(cfg: &RunConfig) -> &SearchSpace {
    cfg.space.as_ref().expect("space resolved")
}

/// Supernet narrowed to the configured space, if that differs.
fn narrow(cfg: &RunConfig, net: Supernet) -> CliResult<Supernet> {
    match &cfg.space {
        Some(s) if s != net.space() => Ok(net.restricted(s.clone())?),
        _ => Ok(net),
    }
}

pub fn train(mut cfg: RunConfig) -> CliResult<()> {
    let data = prepare_data(&mut cfg, None)?;
    let run = Run::start(cfg)?;
    let tc = &run.cfg.train;
    let mut net = Supernet::new(space_of(&run.cfg).clone(), tc.quant_config(), tc.seed)?;
    let mut sink = run.metrics_sink()?;
    let phase = format!("qat-{}", net.quant().label());
    let metrics = train_supernet(&mut net, tc, &data, &phase, &mut |m| sink.record(m))?;
    checkpoint::save(&run.path("supernet.ckpt"), &net, None)?;
    run.write_json("train_summary.json", &metrics)
}

pub fn inherit(mut cfg: RunConfig, source: &Path, to: Option<u32>, finetune: bool) -> CliResult<()> {
    let loaded = checkpoint::load(source)?;
    let q = loaded.net.quant().clone();
    if let Some(to) = to {
        if !q.enabled || to + 1 != q.weight_bits {
            return Err(CliError::Usage(format!(
                "inheritance steps one bit at a time: checkpoint is {}-bit, asked for {to}",
                q.label()
            )));
        }
    }
    let data = prepare_data(&mut cfg, Some(loaded.net.space()))?;
    if space_of(&cfg) != loaded.net.space() {
        return Err(CliError::Usage("inherit keeps the checkpoint's space; drop `space` from the config".into()));
    }
    let run = Run::start(cfg)?;
    let mut net = loaded.net;
    let tc = TrainConfig { bits: Some(q.weight_bits.saturating_sub(1)), ..run.cfg.train.clone() };
    let record = inherit_bits(&mut net, &data.calib, &tc)?;
    run.write_json("inheritance.json", &record)?;
    let mut sink = run.metrics_sink()?;
    if finetune {
        let ft = run.cfg.train.finetune(record.target_bits);
        train_supernet(&mut net, &ft, &data, &format!("inherit-{}", record.target_bits), &mut |m| sink.record(m))?;
    }
    checkpoint::save(&run.path("supernet.ckpt"), &net, Some(&record))
}

pub fn schedule(mut cfg: RunConfig) -> CliResult<()> {
    let data = prepare_data(&mut cfg, None)?;
    let run = Run::start(cfg)?;
    let c = &run.cfg;
    let mut sink = run.metrics_sink()?;
    let outcome = run_schedule(space_of(c), &c.train, &data, &c.schedule.bits, c.schedule.scratch_baseline, &mut |m| sink.record(m))?;
    for (bits, net) in &outcome.checkpoints {
        let record = outcome.records.iter().find(|r| r.target_bits == *bits);
        checkpoint::save(&run.path(&format!("supernet_{bits}.ckpt")), net, record)?;
    }
    for r in &outcome.records {
        run.write_json(&format!("inheritance_{}.json", r.target_bits), r)?;
    }
    let mut csv = String::from("bits,method,epochs,start_acc,end_acc,inherited_acc\n");
    for r in &outcome.rows {
        let inh = r.inherited_acc.map(|a| a.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.bits, r.method, r.epochs, r.start_acc, r.end_acc, inh));
    }
    run.write("schedule.csv", &csv)?;
    run.write_json("schedule.json", &outcome.rows)
}

pub fn search(mut cfg: RunConfig, ckpt: &Path) -> CliResult<()> {
    let loaded = checkpoint::load(ckpt)?;
    let data = prepare_data(&mut cfg, Some(loaded.net.space()))?;
    let run = Run::start(cfg)?;
    let net = narrow(&run.cfg, loaded.net)?;
    let report = coarse_to_fine_search(&net, &data, &run.cfg.search)?;
    if let Some(n) = &report.note {
        eprintln!("note: {n}");
    }
    eprintln!("best {} acc {:.4} bitops {}", report.best.arch, report.best.accuracy, report.best.cost.bitops);
    run.write_json("search.json", &report)?;
    run.write("phase1.csv", &write_records_csv(&report.phase1))?;
    run.write("phase2.csv", &write_records_csv(&report.phase2))?;
    let mut all = report.phase1.clone();
    all.extend(report.phase2.iter().cloned());
    run.write(&format!("pareto_{}.csv", file_label(&report.best.bit)), &pareto_csv(&all, &report.best.bit))
}

/// Which architectures `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalTarget {
    Arch(ArchSpec),
    Max,
    /// `eval.sample` random architectures.
    Sample,
}

#[derive(Debug, Serialize)]
struct EvalSummary<'a> {
    checkpoint_bits: String,
    records: &'a [EvalRecord],
}

pub fn eval(mut cfg: RunConfig, ckpt: &Path, target: EvalTarget) -> CliResult<()> {
    let loaded = checkpoint::load(ckpt)?;
    let data = prepare_data(&mut cfg, Some(loaded.net.space()))?;
    let run = Run::start(cfg)?;
    let e = &run.cfg.eval;
    let mut net = narrow(&run.cfg, loaded.net)?;
    if e.weight_bits.is_some() || e.act_bits.is_some() {
        let q = net.quant().clone();
        let (wb, ab) = (e.weight_bits.unwrap_or(q.weight_bits), e.act_bits.unwrap_or(q.act_bits));
        retarget_bits(&mut net, wb, ab, &data.calib, &run.cfg.train, false)?;
    }
    let archs = match target {
        EvalTarget::Arch(a) => vec![a],
        EvalTarget::Max => vec![net.space().max_arch()],
        EvalTarget::Sample => {
            let n = e.sample;
            match e.flops_range {
                Some([lo, hi]) => sample_constrained(net.space(), (lo, hi), n, e.buckets, run.cfg.seed, run.cfg.search.max_attempts)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
                    (0..n).map(|_| net.space().sample(&mut rng)).collect()
                }
            }
        }
    };
    let sc = SearchConfig { batch_size: e.batch_size, calib_batches: e.calib_batches, workers: e.workers, ..run.cfg.search.clone() };
    let records = evaluate_many(&net, &archs, &data, &sc)?;
    if let [r] = records.as_slice() {
        eprintln!("{} [{}] acc {:.4} flops {} bitops {}", r.arch, r.bit, r.accuracy, r.cost.flops_fp, r.cost.bitops);
    }
    run.write("records.csv", &write_records_csv(&records))?;
    run.write_json("eval.json", &EvalSummary { checkpoint_bits: loaded.manifest.bits, records: &records })
}

fn file_label(bit: &str) -> String {
    bit.replace('/', "-")
}

pub fn analyze(cfg: RunConfig, inputs: &[PathBuf]) -> CliResult<()> {
    if inputs.is_empty() {
        return Err(CliError::Usage("analyze needs at least one --records CSV".into()));
    }
    let run = Run::start(cfg)?;
    let a = &run.cfg.analysis;
    let mut all = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        all.extend(read_records_csv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?);
    }
    let (fp, quant): (Vec<EvalRecord>, Vec<EvalRecord>) = all.into_iter().partition(|r| r.bit == "fp");
    if fp.is_empty() {
        return Err(CliError::Usage("no floating-point (`fp`) records to compute QF against".into()));
    }
    let joined = join_records(&fp, &quant);
    run.write("qf_report.csv", &qf_report_csv(&joined)?)?;
    let corr = correlation_report(&joined, &a.bit, a.center, a.tolerance, a.threshold)?;
    for d in &corr.fixed_flops.directions {
        eprintln!("QF_{} vs {} in fixed-FLOPs slice (n={}): {:?} expected {} -> {}", a.bit, d.feature, corr.fixed_flops.n, d.spearman, d.expected, if d.holds { "holds" } else { "does not hold" });
    }
    run.write_json("correlations.json", &corr)?;
    match cohort_report(&joined, &a.bit, a.k) {
        Ok(c) => run.write_json("cohorts.json", &c)?,
        Err(e) => eprintln!("cohorts skipped: {e}"),
    }
    let mut labels: Vec<String> = quant.iter().map(|r| r.bit.clone()).collect();
    labels.push("fp".into());
    labels.sort();
    labels.dedup();
    let records: Vec<EvalRecord> = fp.into_iter().chain(quant).collect();
    for l in labels {
        run.write(&format!("pareto_{}.csv", file_label(&l)), &pareto_csv(&records, &l))?;
    }
    Ok(())
}

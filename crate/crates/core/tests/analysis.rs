mod support;

use std::collections::BTreeMap;

use oqat_core::analysis::{cohort_report, qf_score, read_records_csv, spearman, write_records_csv, Feature, QfRecord};
use oqat_core::search::{cost, EvalRecord, FpFactor};
use oqat_core::space::SearchSpace;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::spearman_oracle;

#[test]
fn spearman_matches_rank_pearson_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let Ok(got) = spearman(&x, &y) else {
            assert!(x.iter().all(|v| *v == x[0]));
            continue;
        };
        let want = spearman_oracle(&x, &y);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        checked += 1;
    }
}

#[test]
fn spearman_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(3..30);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s = spearman(&x, &y).unwrap();
        // strictly increasing maps leave ranks alone
        let xm: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        assert!((spearman(&xm, &y).unwrap() - s).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&neg, &y).unwrap() + s).abs() < 1e-12);
        assert!((spearman(&y, &x).unwrap() - s).abs() < 1e-12);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let xp: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        assert!((spearman(&xp, &yp).unwrap() - s).abs() < 1e-12);
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(spearman(&[1.0], &[2.0]).is_err());
}

#[test]
fn qf_fixture_ratios() {
    assert!((qf_score(55.7, 72.0).unwrap() - 0.7736).abs() < 1e-4);
    assert!((qf_score(67.6, 71.0).unwrap() - 0.9521).abs() < 1e-4);
    assert!(qf_score(0.5, 0.0).is_err());
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<QfRecord> {
    let space = SearchSpace::toy(1, 10);
    (0..n)
        .map(|_| {
            let arch = space.sample(rng);
            let flops = cost(&space, &arch, 32, 32, FpFactor::Fp32).flops_fp;
            let fp = rng.random_range(0.3..0.9);
            let mut acc = BTreeMap::new();
            // few levels so ties in QF are common
            acc.insert("2".to_string(), fp * rng.random_range(0..5) as f64 / 5.0);
            QfRecord::new(arch, flops, fp, acc)
        })
        .collect()
}

#[test]
fn cohorts_ignore_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let records = random_records(&mut rng, 40);
        let a = cohort_report(&records, "2", 5).unwrap();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        let b = cohort_report(&shuffled, "2", 5).unwrap();
        assert_eq!(a.top, b.top);
        assert_eq!(a.worst, b.worst);
        let qf = |s: &str| records.iter().find(|r| r.arch.compact() == s).unwrap().qf_at("2").unwrap();
        assert!(qf(a.top.last().unwrap()) >= qf(a.worst.last().unwrap()));
    }
}

#[test]
fn average_width_times_depth_is_total_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for r in random_records(&mut rng, 200) {
        let got = r.feature(Feature::AvgWidth) * r.feature(Feature::TotalDepth);
        let want: usize = r.arch.widths.iter().flatten().sum();
        assert!((got - want as f64).abs() < 1e-9);
    }
}

#[test]
fn record_csv_round_trip() {
    let space = SearchSpace::toy(1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<EvalRecord> = (0..10)
        .map(|i| {
            let arch = space.sample(&mut rng);
            EvalRecord { cost: cost(&space, &arch, 4, 4, FpFactor::Fp32), arch, bit: "4".into(), accuracy: i as f64 / 10.0, warnings: vec![] }
        })
        .collect();
    let text = write_records_csv(&records);
    let back = read_records_csv(&text).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.arch, b.arch);
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.cost.flops_fp, b.cost.flops_fp);
        assert_eq!(a.cost.bitops, b.cost.bitops);
    }
    assert!(read_records_csv("arch,bit,acc\n").is_err());
}

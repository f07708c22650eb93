use std::path::PathBuf;

use proptest::prelude::*;
use specialist_ensemble::metrics::{
    aggregate_runs, aggregate_runs_csv, dtb, miou, report, rmse, Direction, ResultTable,
};
use specialist_ensemble::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn printed(name: &str) -> Vec<(String, f64)> {
    let mut r = csv::Reader::from_path(fixture(name)).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].parse().unwrap())
        })
        .collect()
}

fn computed(table: &str) -> Vec<(String, f64)> {
    dtb(&ResultTable::load(&fixture(table)).unwrap())
        .unwrap()
        .into_iter()
        .map(|r| (r.model, r.avg_dtb))
        .collect()
}

fn lookup(rows: &[(String, f64)], model: &str) -> f64 {
    rows.iter().find(|(m, _)| m == model).unwrap_or_else(|| panic!("no row {model}")).1
}

#[test]
fn headline_rows() {
    let rows = computed("table2.csv");
    assert!((lookup(&rows, "EoS-FM") - 3.81).abs() <= 0.02);
    assert!((lookup(&rows, "UNet") - 3.98).abs() <= 0.02);
    assert!((lookup(&rows, "EoS-FM") - 3.8136).abs() < 1e-3);
}

#[test]
fn printed_columns_match_within_rounding() {
    for (table, avg) in [
        ("table2.csv", "table2_avg_dtb.csv"),
        ("table3.csv", "table3_avg_dtb.csv"),
        ("suppl_table2.csv", "suppl_table2_avg_dtb.csv"),
    ] {
        let rows = computed(table);
        let want = printed(avg);
        assert_eq!(rows.len(), want.len(), "{table}");
        for (model, value) in want {
            if table == "table2.csv" && model == "EoS-FM Small" {
                continue;
            }
            let got = lookup(&rows, &model);
            assert!((got - value).abs() <= 0.05, "{table} {model}: {got:.4} vs {value}");
        }
    }
}

#[test]
fn small_variant_row_disagrees_with_its_own_scores() {
    // The printed 7.29 cannot be recovered from the printed scores.
    let got = lookup(&computed("table2.csv"), "EoS-FM Small");
    assert!((got - 7.1564).abs() < 1e-3, "{got}");
    assert!((got - 7.29).abs() > 0.05);
}

#[test]
fn supplementary_runs_reproduce_summary() {
    let stats = aggregate_runs_csv(&std::fs::read_to_string(fixture("suppl_table1_runs.csv")).unwrap()).unwrap();
    let mut r = csv::Reader::from_path(fixture("suppl_table1_summary.csv")).unwrap();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let (_, s) = stats.iter().find(|(d, _)| d == &rec[0]).unwrap();
        assert_eq!(format!("{:.2}", s.mean), rec[1].to_string(), "{}", &rec[0]);
        assert_eq!(format!("{:.2}", s.std), rec[2].to_string(), "{}", &rec[0]);
        n += 1;
    }
    assert_eq!(n, stats.len());
    assert_eq!(aggregate_runs(&[81.92, 79.83, 80.45]).unwrap().to_string(), "80.73 ± 1.07");
    assert_eq!(aggregate_runs(&[61.96, 60.22, 61.79]).unwrap().to_string(), "61.32 ± 0.96");
    assert_eq!(aggregate_runs(&[4.5; 3]).unwrap().to_string(), "4.50 ± 0.00");
    assert_eq!(aggregate_runs(&[2.0]).unwrap().std, 0.0);
    assert!(aggregate_runs(&[]).is_err());
}

#[test]
fn kernel_examples() {
    assert_eq!(miou(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(), 1.0);
    let v = miou(&[0, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
    // Confusion-matrix oracle: class 0 IoU 1/2, class 1 IoU 2/3.
    assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(miou(&[0, 0], &[1, 1], 2).unwrap(), 0.0);
    assert!(miou(&[0], &[0, 1], 2).is_err());
    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    assert_eq!(rmse(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
    assert!(rmse(&[1.0], &[]).is_err());
}

#[test]
fn single_row_and_parse_errors() {
    let t = ResultTable::new(vec![("a".into(), Direction::HigherBetter)], vec![("m".into(), vec![50.0])]).unwrap();
    assert_eq!(dtb(&t).unwrap()[0].avg_dtb, 0.0);
    let missing = "model,dataset,direction,score\nm1,a,higher_better,1\nm1,b,higher_better,2\nm2,a,higher_better,3\n";
    match ResultTable::from_csv(missing) {
        Err(Error::MissingCell { model, dataset }) => assert_eq!((model.as_str(), dataset.as_str()), ("m2", "b")),
        other => panic!("{other:?}"),
    }
    let dup = "model,dataset,direction,score\nm1,a,higher_better,1\nm1,a,higher_better,2\n";
    assert!(matches!(ResultTable::from_csv(dup), Err(Error::DuplicateCell { .. })));
    let dir = "model,dataset,direction,score\nm1,a,sideways,1\n";
    assert!(matches!(ResultTable::from_csv(dir), Err(Error::UnknownDirection { line: 2, .. })));
}

#[test]
fn report_writes_ranked_csv_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let table = ResultTable::load(&fixture("table2.csv")).unwrap();
    let rows = report(&table, tmp.path()).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("dtb.csv")).unwrap();
    assert!(csv.starts_with("model,avg_dtb,top2\n"));
    assert!(csv.contains("\nEoS-FM,3.8136,"));
    assert!(rows.windows(2).all(|p| p[0].avg_dtb >= p[1].avg_dtb));
    assert!(std::fs::read_to_string(tmp.path().join("dtb.svg")).unwrap().contains("<svg"));
    assert_eq!(ResultTable::from_csv(&table.to_csv()).unwrap(), table);
}

fn table_strategy() -> impl Strategy<Value = (Vec<Direction>, Vec<Vec<f64>>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(d, m)| {
        (
            proptest::collection::vec(prop_oneof![Just(Direction::HigherBetter), Just(Direction::LowerBetter)], d),
            proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, d), m),
        )
    })
}

fn build(dirs: &[Direction], scores: &[Vec<f64>]) -> ResultTable {
    ResultTable::new(
        dirs.iter().enumerate().map(|(i, d)| (format!("d{i}"), *d)).collect(),
        scores.iter().enumerate().map(|(i, s)| (format!("m{i}"), s.clone())).collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn dtb_properties((dirs, scores) in table_strategy()) {
        let rows = dtb(&build(&dirs, &scores)).unwrap();
        prop_assert!(rows.iter().all(|r| r.avg_dtb >= 0.0));

        let mut rev = scores.clone();
        rev.reverse();
        let mut a: Vec<(String, f64)> = rows.iter().map(|r| (r.model.clone(), r.avg_dtb)).collect();
        let mut b: Vec<(String, f64)> = dtb(&build(&dirs, &rev)).unwrap().into_iter()
            .map(|r| (format!("m{}", scores.len() - 1 - r.model[1..].parse::<usize>().unwrap()), r.avg_dtb)).collect();
        a.sort_by(|x, y| x.0.cmp(&y.0));
        b.sort_by(|x, y| x.0.cmp(&y.0));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.1 - y.1).abs() < 1e-9);
        }

        // A dominated row changes nothing for the existing rows.
        let worst: Vec<f64> = dirs.iter().enumerate().map(|(d, dir)| match dir {
            Direction::HigherBetter => scores.iter().map(|s| s[d]).fold(f64::INFINITY, f64::min) - 1.0,
            Direction::LowerBetter => scores.iter().map(|s| s[d]).fold(f64::NEG_INFINITY, f64::max) + 1.0,
        }).collect();
        let mut more = scores.clone();
        more.push(worst);
        let extended = dtb(&build(&dirs, &more)).unwrap();
        for r in &rows {
            let e = extended.iter().find(|x| x.model == r.model).unwrap();
            prop_assert!((e.avg_dtb - r.avg_dtb).abs() < 1e-9);
        }
    }

    #[test]
    fn miou_is_bounded_and_label_permutation_invariant(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        shift in 1usize..4,
    ) {
        let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let v = miou(&pred, &gt, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let p2: Vec<usize> = pred.iter().map(|c| (c + shift) % 4).collect();
        let g2: Vec<usize> = gt.iter().map(|c| (c + shift) % 4).collect();
        prop_assert!((miou(&p2, &g2, 4).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn run_stats_match_two_pass(values in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
        let s = aggregate_runs(&values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        prop_assert!((s.mean - mean).abs() < 1e-12);
        prop_assert!((s.std - var.sqrt()).abs() < 1e-12);
        prop_assert!((rmse(&values, &vec![0.0; values.len()]).unwrap()
            - rmse(&vec![0.0; values.len()], &values).unwrap()).abs() == 0.0);
    }
}

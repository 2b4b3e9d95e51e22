use lod_censor::harness::{
    run_external, run_internal, run_selection_study, FractionArm, HarnessConfig,
};
use lod_censor::synth::{generate_synthetic, SynthConfig, SyntheticWorld};
use lod_censor::variants::{Method, MethodSpec};

fn world(seed: u64, effect: f64) -> SyntheticWorld {
    let cfg = SynthConfig {
        n_samples: 48,
        n_cases: 20,
        n_clusters: 6,
        n_informative: 3,
        n_zero_variance: 1,
        censoring: 0.5,
        effect,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn config(splits: usize, seed: u64) -> HarnessConfig {
    HarnessConfig { splits, seed, ..HarnessConfig::default() }
}

#[test]
fn validating_on_a_copy_makes_pred_and_reest_agree() {
    let w = world(1, 0.8);
    let pred = MethodSpec::shrunken(Method::CrPred);
    let reest = MethodSpec::shrunken(Method::CrReest);
    let t = run_external(&w.table, &w.labels, &w.table, &w.labels, &[pred, reest], &config(1, 0)).unwrap();
    assert!(t.external);
    let a = t.per_split.iter().find(|r| r.method == pred).unwrap();
    let b = t.per_split.iter().find(|r| r.method == reest).unwrap();
    assert_eq!(a.outcome, b.outcome);
    assert!(t.row(pred).unwrap().error_rate.unwrap().se.is_none());
}

#[test]
fn a_single_method_gives_a_single_summary_row() {
    let w = world(2, 0.8);
    let t = run_internal(&w.table, &w.labels, &[MethodSpec::baseline(Method::Bc)], &config(3, 4)).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.per_split.len(), 3);
    assert_eq!(t.rows[0].n_ok + t.rows[0].n_failed, 3);
}

#[test]
fn keeping_every_cluster_reproduces_plain_validation() {
    let w = world(3, 0.8);
    let m = MethodSpec::shrunken(Method::CrPred);
    let hc = config(2, 9);
    let plain = run_internal(&w.table, &w.labels, &[m], &hc).unwrap();
    let study = run_selection_study(&w.table, &w.labels, m, &[FractionArm::Fixed(1.0)], &hc).unwrap();
    let a: Vec<f64> = plain.per_split.iter().map(|r| r.outcome.as_ref().unwrap().error_rate).collect();
    assert_eq!(a, study.errors(FractionArm::Fixed(1.0)));
}

#[test]
fn without_signal_the_auc_hovers_around_one_half() {
    let w = world(4, 0.0);
    let m = MethodSpec::baseline(Method::Tr);
    let t = run_internal(&w.table, &w.labels, &[m], &config(6, 2)).unwrap();
    let auc = t.row(m).unwrap().auc.unwrap().mean;
    assert!((auc - 0.5).abs() < 0.15, "AUC {auc}");
}

#[test]
fn one_split_has_no_standard_errors() {
    let w = world(5, 0.8);
    let m = MethodSpec::baseline(Method::Lod);
    let t = run_internal(&w.table, &w.labels, &[m], &config(1, 0)).unwrap();
    let row = t.row(m).unwrap();
    assert_eq!(row.n_ok, 1);
    assert!(row.error_rate.unwrap().se.is_none());
}

#[test]
fn reports_round_trip_through_csv() {
    let w = world(6, 0.8);
    let methods = [MethodSpec::baseline(Method::Cca), MethodSpec::unshrunken(Method::CrPrep)];
    let t = run_internal(&w.table, &w.labels, &methods, &config(2, 1)).unwrap();
    let mut buf = Vec::new();
    t.write_report_csv(&mut buf).unwrap();
    let rows = lod_censor::harness::read_report(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), t.per_split.len());
    for (a, b) in rows.iter().zip(&t.per_split) {
        assert_eq!(a.method, b.method);
        assert_eq!(a.outcome, b.outcome);
    }
}

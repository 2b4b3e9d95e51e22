//! Invariants checked over random inputs.

use proptest::prelude::*;

use lod_censor::classifier::{auc, fit_ridge_logistic, predict_prob, report_from_probs, Design};
use lod_censor::data::{Labels, LodPolicy, PeakTable, SampleSet};
use lod_censor::harness::{make_splits, CellMetrics, ComparisonTable, ReportRow};
use lod_censor::mixed::MixedConfig;
use lod_censor::numerics::{norm_cdf, trunc_norm_mean_below};
use lod_censor::selection::select_fixed_fraction;
use lod_censor::synth::{generate_synthetic, SynthConfig};
use lod_censor::tobit::{fit_tobit, tobit_loglik, CensoredSeries, TobitParams};
use lod_censor::variants::{cr_pred, Method, MethodSpec, Shrinkage};

fn small_world(seed: u64) -> lod_censor::synth::SyntheticWorld {
    let cfg = SynthConfig {
        n_samples: 24,
        n_cases: 10,
        n_clusters: 3,
        min_peaks: 3,
        max_peaks: 5,
        n_informative: 1,
        n_zero_variance: 0,
        censoring: 0.4,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn labels_with_both_classes() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 4..30)
        .prop_filter("both classes", |g| g.iter().any(|&x| x) && g.iter().any(|&x| !x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normal_cdf_is_symmetric_and_monotone(x in -30.0f64..30.0, dx in 1e-6f64..1.0) {
        prop_assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-15);
        prop_assert!(norm_cdf(x + dx) >= norm_cdf(x));
    }

    #[test]
    fn truncated_mean_lies_below_threshold_and_mean(
        mu in -5.0f64..5.0,
        sigma in 0.01f64..5.0,
        z in -8.0f64..4.0,
    ) {
        let t = mu + sigma * z;
        let m = trunc_norm_mean_below(mu, sigma, t).unwrap();
        prop_assert!(m < t);
        prop_assert!(m < mu);
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        (scores, g) in labels_with_both_classes().prop_flat_map(|g| {
            let n = g.len();
            (prop::collection::vec(-5.0f64..5.0, n), Just(g))
        }),
    ) {
        let a = auc(&scores, &g).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
        prop_assert_eq!(auc(&moved, &g).unwrap(), a);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &g).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn deviance_matches_the_bernoulli_form(
        (probs, g) in labels_with_both_classes().prop_flat_map(|g| {
            let n = g.len();
            (prop::collection::vec(1e-6f64..(1.0 - 1e-6), n), Just(g))
        }),
    ) {
        let r = report_from_probs(probs.clone(), &g, 0.5).unwrap();
        let direct: f64 = probs
            .iter()
            .zip(&g)
            .map(|(&p, &y)| if y { -2.0 * p.ln() } else { -2.0 * (1.0 - p).ln() })
            .sum();
        prop_assert!((r.deviance - direct).abs() <= 1e-9 * direct.max(1.0));
        prop_assert!((0.0..=1.0).contains(&r.brier));
        prop_assert!((0.0..=1.0).contains(&r.error_rate));
    }

    #[test]
    fn ridge_predictions_ignore_column_affine_maps(
        seed in 0u64..1000,
        scale in prop::sample::select(vec![-3.0, 0.5, 2.0, 10.0]),
        shift in -5.0f64..5.0,
        lambda in prop::sample::select(vec![0.01, 1.0, 50.0]),
    ) {
        let (rows, cols) = (12, 3);
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let values: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
        let g: Vec<bool> = (0..rows).map(|i| i % 3 == 0 || values[i * cols] > 0.2).collect();
        prop_assume!(g.iter().any(|&x| x) && g.iter().any(|&x| !x));
        let moved: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| if k % cols == 1 { scale * v + shift } else { v })
            .collect();
        let a = fit_ridge_logistic(&Design::new(&values, rows, cols).unwrap(), &g, lambda).unwrap();
        let b = fit_ridge_logistic(&Design::new(&moved, rows, cols).unwrap(), &g, lambda).unwrap();
        for i in 0..rows {
            let pa = predict_prob(&a, &values[i * cols..(i + 1) * cols]).unwrap();
            let pb = predict_prob(&b, &moved[i * cols..(i + 1) * cols]).unwrap();
            prop_assert!((pa - pb).abs() < 1e-8);
        }
    }

    #[test]
    fn selection_plans_are_nested_and_rank_based(
        tau2 in prop::collection::vec(0.0f64..2.0, 1..40),
        f1 in 0.01f64..1.0,
        f2 in 0.01f64..1.0,
    ) {
        let ids: Vec<usize> = (1..=tau2.len()).collect();
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let small = select_fixed_fraction(&ids, &tau2, lo).unwrap();
        let large = select_fixed_fraction(&ids, &tau2, hi).unwrap();
        prop_assert!(small.kept_clusters.iter().all(|c| large.is_kept(*c)));
        // a strictly increasing map of τ² keeps the same clusters
        let mapped: Vec<f64> = tau2.iter().map(|t| t.sqrt() * 7.0).collect();
        let again = select_fixed_fraction(&ids, &mapped, lo).unwrap();
        prop_assert_eq!(&again.kept_clusters, &small.kept_clusters);
    }

    #[test]
    fn tobit_fit_beats_perturbed_parameters(
        seed in 0u64..500,
        da in -0.2f64..0.2,
        db in -0.2f64..0.2,
        ds in 0.8f64..1.25,
    ) {
        let x = [2.0, 1.6, 1.1, 0.7, 0.3, -0.1];
        let mut state = seed.wrapping_add(17);
        let y: Vec<f64> = x
            .iter()
            .map(|xi| {
                state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                xi + 0.3 * (((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5)
            })
            .collect();
        let lod = 0.35;
        let obs: Vec<bool> = y.iter().map(|&v| v >= lod).collect();
        prop_assume!(obs.iter().filter(|&&o| o).count() >= 3);
        let yc: Vec<f64> = y.iter().map(|&v| v.max(lod)).collect();
        let s = CensoredSeries::new(&yc, &obs, &x).unwrap();
        let fit = fit_tobit(&s).unwrap();
        let other = TobitParams { alpha: fit.alpha + da, beta: fit.beta + db, sigma: fit.sigma * ds };
        prop_assert!(fit.loglik >= tobit_loglik(&other, &s).unwrap() - 1e-9);
    }

    #[test]
    fn splits_partition_each_class(
        n_cases in 7usize..30,
        n_controls in 7usize..30,
        ratio in 0.3f64..0.7,
        seed in any::<u64>(),
    ) {
        let n = n_cases + n_controls;
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let outcome: Vec<bool> = (0..n).map(|i| i < n_cases).collect();
        let labels = Labels::new(ids, outcome).unwrap();
        for s in make_splits(&labels, 3, ratio, seed).unwrap() {
            let mut all: Vec<usize> = s.cal_rows.iter().chain(&s.val_rows).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let cal_cases = s.cal_rows.iter().filter(|&&r| r < n_cases).count() as f64;
            prop_assert!((cal_cases - ratio * n_cases as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn summary_standard_errors_follow_the_split_values(
        errors in prop::collection::vec(0.0f64..1.0, 2..12),
    ) {
        let m = MethodSpec::baseline(Method::Lod);
        let rows: Vec<ReportRow> = errors
            .iter()
            .enumerate()
            .map(|(split, &e)| ReportRow {
                method: m,
                split,
                fraction: None,
                outcome: Ok(CellMetrics { error_rate: e, brier: e / 2.0, deviance: 1.0, auc: None, n_val: 10, lambda: 1.0 }),
            })
            .collect();
        let table = ComparisonTable::from_rows(rows, false);
        let est = table.row(m).unwrap().error_rate.unwrap();
        let r = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / r;
        let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
        prop_assert!((est.mean - mean).abs() < 1e-12);
        prop_assert!((est.se.unwrap() - sd / r.sqrt()).abs() < 1e-12);
        prop_assert!(table.row(m).unwrap().auc.is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn mean_pattern_ignores_row_order(seed in 0u64..100, rot in 1usize..23) {
        let world = small_world(seed);
        let rows: Vec<usize> = (0..24).collect();
        let rotated: Vec<usize> = rows.iter().map(|r| (r + rot) % 24).collect();
        let a = SampleSet::rows(&world.table, &rows).unwrap().cluster_view(2).unwrap();
        let b = SampleSet::rows(&world.table, &rotated).unwrap().cluster_view(2).unwrap();
        for (x, y) in a.mean_pattern.iter().zip(&b.mean_pattern) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.grand_mean - b.grand_mean).abs() < 1e-12);
    }

    #[test]
    fn cr_pred_calibration_ignores_validation_rows(seed in 0u64..100, cut in 14usize..18, bump in 0.1f64..2.0) {
        let world = small_world(seed);
        let t = &world.table;
        // same layout, observed validation cells moved up
        let (n, p) = (t.n_samples(), t.n_peaks());
        let mut values = Vec::with_capacity(n * p);
        let mut observed = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                let o = t.is_observed(i, j);
                values.push(if i >= cut && o { t.value(i, j) + bump } else { t.value(i, j) });
                observed.push(o);
            }
        }
        let moved = PeakTable::from_parts(
            t.sample_ids().to_vec(), t.peaks().to_vec(), values, observed, LodPolicy::Given, None,
        ).unwrap();
        let cal_rows: Vec<usize> = (0..cut).collect();
        let val_rows: Vec<usize> = (cut..n).collect();
        let mc = MixedConfig::default();
        let a = cr_pred(
            &SampleSet::rows(t, &cal_rows).unwrap(), &SampleSet::rows(t, &val_rows).unwrap(), &mc,
        ).unwrap();
        let b = cr_pred(
            &SampleSet::rows(&moved, &cal_rows).unwrap(), &SampleSet::rows(&moved, &val_rows).unwrap(), &mc,
        ).unwrap();
        prop_assert_eq!(a.cal.matrix(Shrinkage::Shrunken), b.cal.matrix(Shrinkage::Shrunken));
        prop_assert_eq!(a.cal.tau2_by_cluster(), b.cal.tau2_by_cluster());
        prop_assert_ne!(&a.val_shrunken, &b.val_shrunken);
    }
}

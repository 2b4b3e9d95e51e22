//! Cluster screening by estimated random-intercept variance.

use std::io::Write;

use crate::classifier::{loo_cv_lambda, preferred, ClassifierError, CvPoint, Design};
use crate::variants::{MethodSpec, SummaryMatrix};

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("no clusters to select from")]
    NoClusters,
    #[error("plan covers {plan} clusters but the matrix has {matrix}")]
    DimensionMismatch { plan: usize, matrix: usize },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub cluster_ids: Vec<usize>,
    pub tau2_by_cluster: Vec<f64>,
    /// Kept cluster ids, ascending.
    pub kept_clusters: Vec<usize>,
    pub fraction: f64,
    pub source_variant: Option<MethodSpec>,
    /// Every τ² is zero, so the kept set comes from tie-breaking alone.
    pub no_signal: bool,
}

impl SelectionPlan {
    pub fn is_kept(&self, cluster_id: usize) -> bool {
        self.kept_clusters.binary_search(&cluster_id).is_ok()
    }

    /// `cluster_id,tau2,kept`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SelectionError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cluster_id", "tau2", "kept"])?;
        for (c, t) in self.cluster_ids.iter().zip(&self.tau2_by_cluster) {
            w.write_record([
                c.to_string(),
                t.to_string(),
                u8::from(self.is_kept(*c)).to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// `⌈fraction·C⌉`, guarded against representation error (0.2·120 → 24).
pub fn kept_count(fraction: f64, c: usize) -> usize {
    (((fraction * c as f64) - 1e-9).ceil().max(1.0) as usize).min(c)
}

/// Keep the `⌈fraction·C⌉` clusters with the largest τ², ties to the lower
/// cluster id. Below fraction 1, clusters with τ² = 0 are never kept.
pub fn select_fixed_fraction(
    cluster_ids: &[usize],
    tau2_by_cluster: &[f64],
    fraction: f64,
) -> Result<SelectionPlan, SelectionError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SelectionError::BadFraction(fraction));
    }
    if cluster_ids.is_empty() {
        return Err(SelectionError::NoClusters);
    }
    if cluster_ids.len() != tau2_by_cluster.len() {
        return Err(SelectionError::DimensionMismatch {
            plan: tau2_by_cluster.len(),
            matrix: cluster_ids.len(),
        });
    }
    let mut order: Vec<usize> = (0..cluster_ids.len()).collect();
    order.sort_by(|&a, &b| {
        tau2_by_cluster[b]
            .total_cmp(&tau2_by_cluster[a])
            .then(cluster_ids[a].cmp(&cluster_ids[b]))
    });
    let count = kept_count(fraction, cluster_ids.len());
    let mut kept: Vec<usize> = order
        .into_iter()
        .take(count)
        .filter(|&i| fraction >= 1.0 || tau2_by_cluster[i] > 0.0)
        .map(|i| cluster_ids[i])
        .collect();
    kept.sort_unstable();
    Ok(SelectionPlan {
        cluster_ids: cluster_ids.to_vec(),
        tau2_by_cluster: tau2_by_cluster.to_vec(),
        kept_clusters: kept,
        fraction,
        source_variant: None,
        no_signal: tau2_by_cluster.iter().all(|&t| t == 0.0),
    })
}

/// Column subset of `matrix` kept by `plan`, in the matrix's order.
pub fn apply_plan(
    plan: &SelectionPlan,
    matrix: &SummaryMatrix,
) -> Result<SummaryMatrix, SelectionError> {
    if let Some(&c) = matrix
        .cluster_ids
        .iter()
        .find(|c| !plan.cluster_ids.contains(c))
    {
        return Err(SelectionError::DimensionMismatch {
            plan: plan.cluster_ids.len(),
            matrix: c,
        });
    }
    Ok(matrix.select_clusters(&plan.kept_clusters))
}

/// The 20 fractions 0.05, 0.10, …, 1.00.
pub fn ventile_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionPoint {
    pub fraction: f64,
    pub n_kept: usize,
    pub curve: Vec<CvPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionSearch {
    pub fraction_star: f64,
    pub lambda_star: f64,
    pub plan: SelectionPlan,
    pub surface: Vec<FractionPoint>,
}

/// Joint leave-one-out search over the ventile fractions and `lambda_grid`.
/// The lowest error wins; ties go to the smallest fraction, then to the
/// penalty rule of [`loo_cv_lambda`]. Fractions whose kept set is empty
/// are skipped.
pub fn optimize_fraction(
    cal: &SummaryMatrix,
    g: &[bool],
    tau2_by_cluster: &[f64],
    lambda_grid: &[f64],
) -> Result<FractionSearch, SelectionError> {
    optimize_over(cal, g, tau2_by_cluster, lambda_grid, &ventile_grid())
}

/// [`optimize_fraction`] over an explicit fraction grid.
pub fn optimize_over(
    cal: &SummaryMatrix,
    g: &[bool],
    tau2_by_cluster: &[f64],
    lambda_grid: &[f64],
    fractions: &[f64],
) -> Result<FractionSearch, SelectionError> {
    let ids = &cal.cluster_ids;
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut surface = Vec::new();
    let mut best: Option<(f64, CvPoint, SelectionPlan)> = None;
    let mut last_kept: Option<Vec<usize>> = None;
    let mut last_curve: Option<Vec<CvPoint>> = None;
    for &f in &fractions {
        let plan = select_fixed_fraction(ids, tau2_by_cluster, f)?;
        if plan.kept_clusters.is_empty() {
            continue;
        }
        // identical kept sets give identical curves
        let curve = match (&last_kept, &last_curve) {
            (Some(k), Some(c)) if *k == plan.kept_clusters => c.clone(),
            _ => {
                let reduced = apply_plan(&plan, cal)?;
                loo_cv_lambda(&Design::from_matrix(&reduced)?, g, lambda_grid)?.curve
            }
        };
        let point = curve[preferred(&curve)];
        // fractions ascend, so only a strictly lower error displaces the
        // current choice
        if best
            .as_ref()
            .map_or(true, |(_, b, _)| point.error < b.error)
        {
            best = Some((f, point, plan.clone()));
        }
        surface.push(FractionPoint {
            fraction: f,
            n_kept: plan.kept_clusters.len(),
            curve: curve.clone(),
        });
        last_kept = Some(plan.kept_clusters);
        last_curve = Some(curve);
    }
    let (fraction_star, point, plan) = best.ok_or(SelectionError::NoClusters)?;
    Ok(FractionSearch {
        fraction_star,
        lambda_star: point.lambda,
        plan,
        surface,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_half_of_distinct_values() {
        let ids: Vec<usize> = (1..=10).collect();
        let tau: Vec<f64> = vec![0.3, 0.9, 0.1, 0.5, 0.8, 0.2, 0.7, 0.05, 0.6, 0.4];
        let plan = select_fixed_fraction(&ids, &tau, 0.5).unwrap();
        assert_eq!(plan.kept_clusters, vec![2, 4, 5, 7, 9]);
        let all = select_fixed_fraction(&ids, &vec![0.0; 10], 1.0).unwrap();
        assert_eq!(all.kept_clusters, ids);
        assert!(all.no_signal);
    }

    #[test]
    fn zero_variance_never_kept_below_one() {
        let ids = [1, 2, 3, 4];
        let plan = select_fixed_fraction(&ids, &[0.0, 0.4, 0.0, 0.0], 0.75).unwrap();
        assert_eq!(plan.kept_clusters, vec![2]);
    }

    #[test]
    fn ties_break_by_id() {
        let ids = [5, 3, 9, 1];
        let plan = select_fixed_fraction(&ids, &[1.0, 1.0, 1.0, 0.5], 0.5).unwrap();
        assert_eq!(plan.kept_clusters, vec![3, 5]);
    }

    #[test]
    fn kept_count_guards_rounding() {
        assert_eq!(kept_count(0.2, 120), 24);
        assert_eq!(kept_count(0.05, 120), 6);
        assert_eq!(kept_count(0.05, 10), 1);
        assert_eq!(kept_count(1.0, 7), 7);
        assert_eq!(kept_count(0.5, 1), 1);
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(select_fixed_fraction(&[1], &[1.0], 0.0).is_err());
        assert!(select_fixed_fraction(&[1], &[1.0], 1.5).is_err());
        assert!(select_fixed_fraction(&[], &[], 0.5).is_err());
    }

    #[test]
    fn ventiles() {
        let v = ventile_grid();
        assert_eq!(v.len(), 20);
        assert_eq!(v[0], 0.05);
        assert_eq!(v[19], 1.0);
    }

    #[test]
    fn plan_csv() {
        let plan = select_fixed_fraction(&[1, 2], &[0.5, 0.0], 0.5).unwrap();
        let mut out = Vec::new();
        plan.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "cluster_id,tau2,kept\n1,0.5,1\n2,0,0\n"
        );
    }
}

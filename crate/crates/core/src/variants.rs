//! Per-sample cluster summaries under each way of handling censored peaks.
//!
//! Baselines work cell by cell: complete-case means (CCA), observed
//! fractions (BC), LOD substitution (LOD), latent truth (TR) and
//! per-patient censored regression (TOBIT). The censored-regression
//! variants fit the random-intercept model on different row sets:
//! all rows (CR Prep), calibration rows for both sides (CR Pred), or each
//! side on its own rows (CR Reest).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{ClusterView, DataError, SampleSet};
use crate::mixed::{
    cluster_posteriors, fit_mixed_censored, fit_population_line, shrunken_summary,
    unshrunken_summary, ClusterData, MixedCensoredFit, MixedConfig, MixedError,
};
use crate::numerics::gauss_hermite_cached;
use crate::tobit::{fit_tobit, tobit_summary, CensoredSeries};

#[derive(Debug, thiserror::Error)]
pub enum VariantError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mixed(#[from] MixedError),
    #[error("no latent intensities available for the truth summary")]
    NoTruth,
    #[error("cluster {0} has no observed cell")]
    NoObserved(usize),
    #[error("unknown method tag `{0}`")]
    UnknownMethod(String),
    #[error("malformed summary matrix: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Cca,
    Bc,
    Lod,
    Tr,
    Tobit,
    CrPrep,
    CrPred,
    CrReest,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Cca,
        Method::Bc,
        Method::Lod,
        Method::Tr,
        Method::Tobit,
        Method::CrPrep,
        Method::CrPred,
        Method::CrReest,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Cca => "CCA",
            Method::Bc => "BC",
            Method::Lod => "LOD",
            Method::Tr => "TR",
            Method::Tobit => "TOBIT",
            Method::CrPrep => "CR_PREP",
            Method::CrPred => "CR_PRED",
            Method::CrReest => "CR_REEST",
        }
    }

    pub fn is_censored_regression(self) -> bool {
        matches!(self, Method::CrPrep | Method::CrPred | Method::CrReest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shrinkage {
    Shrunken,
    Unshrunken,
    NotApplicable,
}

impl Shrinkage {
    pub fn tag(self) -> &'static str {
        match self {
            Shrinkage::Shrunken => "shrunken",
            Shrinkage::Unshrunken => "unshrunken",
            Shrinkage::NotApplicable => "n/a",
        }
    }
}

/// A method plus, for the censored-regression variants, which summary is
/// used. Tags are `CCA`, `BC`, `LOD`, `TR`, `TOBIT`, `CR_PREP`, `CR_PRED`,
/// `CR_REEST` and the unshrunken forms `CR_PREP_U`, `CR_PRED_U`,
/// `CR_REEST_U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodSpec {
    pub method: Method,
    pub shrinkage: Shrinkage,
}

impl MethodSpec {
    pub fn baseline(method: Method) -> Self {
        Self {
            method,
            shrinkage: Shrinkage::NotApplicable,
        }
    }

    pub fn shrunken(method: Method) -> Self {
        Self {
            method,
            shrinkage: Shrinkage::Shrunken,
        }
    }

    pub fn unshrunken(method: Method) -> Self {
        Self {
            method,
            shrinkage: Shrinkage::Unshrunken,
        }
    }

    /// The eleven method rows of a full comparison, TOBIT excluded.
    pub fn standard_set() -> Vec<MethodSpec> {
        let mut out: Vec<MethodSpec> = [Method::Cca, Method::Bc, Method::Lod, Method::Tr]
            .into_iter()
            .map(Self::baseline)
            .collect();
        for m in [Method::CrPrep, Method::CrPred, Method::CrReest] {
            out.push(Self::shrunken(m));
            out.push(Self::unshrunken(m));
        }
        out
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method.tag())?;
        if self.shrinkage == Shrinkage::Unshrunken {
            f.write_str("_U")?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = VariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        let (base, unshrunk) = match upper.strip_suffix("_U") {
            Some(b) => (b, true),
            None => (upper.as_str(), false),
        };
        let method = Method::ALL
            .into_iter()
            .find(|m| m.tag() == base)
            .ok_or_else(|| VariantError::UnknownMethod(s.to_string()))?;
        match (method.is_censored_regression(), unshrunk) {
            (true, false) => Ok(Self::shrunken(method)),
            (true, true) => Ok(Self::unshrunken(method)),
            (false, false) => Ok(Self::baseline(method)),
            (false, true) => Err(VariantError::UnknownMethod(s.to_string())),
        }
    }
}

/// Which rows estimated the parameters behind a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParameterSource {
    /// No fitted parameters (cellwise summaries).
    None,
    AllRows,
    Calibration,
    Validation,
}

impl ParameterSource {
    pub fn tag(self) -> &'static str {
        match self {
            ParameterSource::None => "none",
            ParameterSource::AllRows => "all",
            ParameterSource::Calibration => "calibration",
            ParameterSource::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: ParameterSource,
    /// Sample ids of the rows that estimated the parameters, or that
    /// supplied the imputation mean for cellwise methods.
    pub parameter_samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedCluster {
    pub cluster_id: usize,
    pub reason: String,
}

/// Samples × clusters matrix of summaries for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryMatrix {
    pub sample_ids: Vec<String>,
    pub cluster_ids: Vec<usize>,
    values: Vec<f64>,
    pub method: MethodSpec,
    pub provenance: Provenance,
    pub dropped: Vec<DroppedCluster>,
    /// Clusters whose random-intercept fit was not estimable and whose
    /// column comes from the population line alone.
    pub fallback: Vec<usize>,
}

impl SummaryMatrix {
    /// Assemble from columns in cluster order.
    pub fn from_columns(
        sample_ids: Vec<String>,
        columns: Vec<(usize, Vec<f64>)>,
        method: MethodSpec,
        provenance: Provenance,
    ) -> Result<Self, VariantError> {
        let n = sample_ids.len();
        if let Some((c, _)) = columns.iter().find(|(_, col)| col.len() != n) {
            return Err(VariantError::Malformed(format!(
                "column for cluster {c} has the wrong length"
            )));
        }
        let cluster_ids: Vec<usize> = columns.iter().map(|(c, _)| *c).collect();
        let mut values = vec![0.0; n * cluster_ids.len()];
        for (j, (_, col)) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                values[i * cluster_ids.len() + j] = *v;
            }
        }
        Ok(Self {
            sample_ids,
            cluster_ids,
            values,
            method,
            provenance,
            dropped: Vec::new(),
            fallback: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.n_cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.value(i, col)).collect()
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let c = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            values,
            ..self.clone()
        }
    }

    /// Keep the listed clusters, in this matrix's column order. Ids not
    /// present are ignored.
    pub fn select_clusters(&self, keep: &[usize]) -> Self {
        let cols: Vec<usize> = (0..self.n_cols())
            .filter(|&j| keep.contains(&self.cluster_ids[j]))
            .collect();
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        for i in 0..self.n_rows() {
            values.extend(cols.iter().map(|&j| self.value(i, j)));
        }
        Self {
            cluster_ids: cols.iter().map(|&j| self.cluster_ids[j]).collect(),
            values,
            ..self.clone()
        }
    }

    /// Wide CSV: `sample_id,cluster_<id>,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), VariantError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.cluster_ids.iter().map(|c| format!("cluster_{c}")));
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.sample_ids[i].clone()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Key-value sidecar describing method, provenance and dropped clusters.
    pub fn write_metadata<W: Write>(&self, mut w: W) -> Result<(), VariantError> {
        writeln!(w, "method={}", self.method.method.tag())?;
        writeln!(w, "shrinkage={}", self.method.shrinkage.tag())?;
        writeln!(w, "parameter_source={}", self.provenance.source.tag())?;
        writeln!(
            w,
            "parameter_samples={}",
            self.provenance.parameter_samples.join(";")
        )?;
        writeln!(w, "n_samples={}", self.n_rows())?;
        writeln!(w, "n_clusters={}", self.n_cols())?;
        let dropped: Vec<String> = self
            .dropped
            .iter()
            .map(|d| format!("{}:{}", d.cluster_id, d.reason))
            .collect();
        writeln!(w, "dropped={}", dropped.join(";"))?;
        let fallback: Vec<String> = self.fallback.iter().map(|c| c.to_string()).collect();
        writeln!(w, "population_line_only={}", fallback.join(";"))?;
        Ok(())
    }

    /// Writes `path` and a sidecar `path.meta`.
    pub fn write_path(&self, path: &Path) -> Result<(), VariantError> {
        self.write_csv(std::fs::File::create(path)?)?;
        let mut meta = path.as_os_str().to_owned();
        meta.push(".meta");
        self.write_metadata(std::fs::File::create(meta)?)
    }

    /// Read the wide CSV. Provenance is not stored in the CSV and is set to
    /// [`ParameterSource::None`].
    pub fn read_csv<R: Read>(reader: R, method: MethodSpec) -> Result<Self, VariantError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("sample_id") {
            return Err(VariantError::Malformed(
                "first column must be sample_id".into(),
            ));
        }
        let cluster_ids = header
            .iter()
            .skip(1)
            .map(|h| {
                h.strip_prefix("cluster_")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| VariantError::Malformed(format!("bad column `{h}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut sample_ids = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != cluster_ids.len() + 1 {
                return Err(VariantError::Malformed(format!(
                    "row {} has {} fields",
                    sample_ids.len() + 1,
                    rec.len()
                )));
            }
            sample_ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| VariantError::Malformed(format!("bad value `{field}`")))?;
                values.push(v);
            }
        }
        Ok(Self {
            sample_ids,
            cluster_ids,
            values,
            method,
            provenance: Provenance {
                source: ParameterSource::None,
                parameter_samples: Vec::new(),
            },
            dropped: Vec::new(),
            fallback: Vec::new(),
        })
    }

    pub fn read_path(path: &Path, method: MethodSpec) -> Result<Self, VariantError> {
        Self::read_csv(std::fs::File::open(path)?, method)
    }
}

/// Restrict two matrices to the clusters present in both.
pub fn common_clusters(a: &SummaryMatrix, b: &SummaryMatrix) -> (SummaryMatrix, SummaryMatrix) {
    let shared: Vec<usize> = a
        .cluster_ids
        .iter()
        .copied()
        .filter(|c| b.cluster_ids.contains(c))
        .collect();
    (a.select_clusters(&shared), b.select_clusters(&shared))
}

fn cluster_cells(
    set: &SampleSet<'_>,
    cluster_id: usize,
) -> Result<std::ops::Range<usize>, VariantError> {
    Ok(set.layout().cluster_peaks(cluster_id)?)
}

/// Per-patient observed means; `None` for patients without observed peaks.
fn observed_means(
    set: &SampleSet<'_>,
    cluster_id: usize,
) -> Result<Vec<Option<f64>>, VariantError> {
    let peaks = cluster_cells(set, cluster_id)?;
    Ok((0..set.len())
        .map(|i| {
            let obs: Vec<f64> = peaks
                .clone()
                .filter(|&j| set.is_observed(i, j))
                .map(|j| set.value(i, j))
                .collect();
            (!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64)
        })
        .collect())
}

fn mean_of_present(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Complete-case mean of observed peaks. Patients without observed peaks
/// get `impute` if given, else the mean over the other patients' summaries.
pub fn summarize_cca(
    set: &SampleSet<'_>,
    cluster_id: usize,
    impute: Option<f64>,
) -> Result<Vec<f64>, VariantError> {
    let means = observed_means(set, cluster_id)?;
    let fill = match impute {
        Some(v) => v,
        None => mean_of_present(&means).ok_or(VariantError::NoObserved(cluster_id))?,
    };
    Ok(means.into_iter().map(|m| m.unwrap_or(fill)).collect())
}

/// Fraction of a patient's peaks that are observed.
pub fn summarize_bc(set: &SampleSet<'_>, cluster_id: usize) -> Result<Vec<f64>, VariantError> {
    let peaks = cluster_cells(set, cluster_id)?;
    let k = peaks.len() as f64;
    Ok((0..set.len())
        .map(|i| peaks.clone().filter(|&j| set.is_observed(i, j)).count() as f64 / k)
        .collect())
}

/// Mean over all peaks with censored cells at their LOD.
pub fn summarize_lod(set: &SampleSet<'_>, cluster_id: usize) -> Result<Vec<f64>, VariantError> {
    let peaks = cluster_cells(set, cluster_id)?;
    let k = peaks.len() as f64;
    Ok((0..set.len())
        .map(|i| peaks.clone().map(|j| set.value(i, j)).sum::<f64>() / k)
        .collect())
}

/// Mean of the latent (uncensored) intensities.
pub fn summarize_tr(set: &SampleSet<'_>, cluster_id: usize) -> Result<Vec<f64>, VariantError> {
    let peaks = cluster_cells(set, cluster_id)?;
    let k = peaks.len() as f64;
    (0..set.len())
        .map(|i| {
            let mut s = 0.0;
            for j in peaks.clone() {
                s += set.latent(i, j).ok_or(VariantError::NoTruth)?;
            }
            Ok(s / k)
        })
        .collect()
}

/// Per-patient censored regression on `view`'s mean pattern, summarized as
/// `α̂ᵢ + β̂ᵢ·ȳ̄`. Fully censored patients are imputed like CCA.
pub fn summarize_tobit(
    set: &SampleSet<'_>,
    view: &ClusterView,
    impute: Option<f64>,
) -> Result<Vec<f64>, VariantError> {
    let data = ClusterData::from_set(set, view)?;
    let per: Vec<Option<f64>> = (0..data.n_patients())
        .map(|i| {
            let s: CensoredSeries<'_> = data.patient(i);
            fit_tobit(&s)
                .ok()
                .map(|f| tobit_summary(&f, view.grand_mean))
        })
        .collect();
    let fill = match impute {
        Some(v) => v,
        None => mean_of_present(&per).ok_or(VariantError::NoObserved(view.cluster_id))?,
    };
    Ok(per.into_iter().map(|m| m.unwrap_or(fill)).collect())
}

fn assemble(
    set: &SampleSet<'_>,
    cols: Vec<(usize, Result<Vec<f64>, VariantError>)>,
    method: MethodSpec,
    provenance: Provenance,
) -> Result<SummaryMatrix, VariantError> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (c, col) in cols {
        match col {
            Ok(v) => kept.push((c, v)),
            Err(VariantError::NoObserved(_)) => dropped.push(DroppedCluster {
                cluster_id: c,
                reason: "no observed cell".into(),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut m = SummaryMatrix::from_columns(set.sample_ids(), kept, method, provenance)?;
    m.dropped = dropped;
    Ok(m)
}

/// Cellwise summaries of `cal` and, when given, of `val`. Methods that
/// impute or need a mean pattern (CCA, TOBIT) take those from `cal`.
pub fn summarize_baseline(
    method: Method,
    cal: &SampleSet<'_>,
    val: Option<&SampleSet<'_>>,
) -> Result<(SummaryMatrix, Option<SummaryMatrix>), VariantError> {
    if method.is_censored_regression() {
        return Err(VariantError::UnknownMethod(format!(
            "{} is not a baseline",
            method.tag()
        )));
    }
    let ids: Vec<usize> = cal.layout().cluster_ids().collect();
    let spec = MethodSpec::baseline(method);
    let cal_prov = Provenance {
        source: if matches!(method, Method::Cca | Method::Tobit) {
            ParameterSource::Calibration
        } else {
            ParameterSource::None
        },
        parameter_samples: if matches!(method, Method::Cca | Method::Tobit) {
            cal.sample_ids()
        } else {
            Vec::new()
        },
    };
    let one = |set: &SampleSet<'_>,
               c: usize,
               impute_from: Option<&Vec<f64>>|
     -> Result<Vec<f64>, VariantError> {
        let fill = impute_from.map(|col| col.iter().sum::<f64>() / col.len() as f64);
        match method {
            Method::Cca => summarize_cca(set, c, fill),
            Method::Bc => summarize_bc(set, c),
            Method::Lod => summarize_lod(set, c),
            Method::Tr => summarize_tr(set, c),
            Method::Tobit => summarize_tobit(set, &cal.cluster_view(c)?, fill),
            _ => unreachable!(),
        }
    };
    let cal_cols: Vec<(usize, Result<Vec<f64>, VariantError>)> =
        ids.par_iter().map(|&c| (c, one(cal, c, None))).collect();
    let val_matrix = match val {
        None => None,
        Some(v) => {
            let val_cols: Vec<(usize, Result<Vec<f64>, VariantError>)> = cal_cols
                .par_iter()
                .map(|(c, cal_col)| match cal_col {
                    Ok(col) => (*c, one(v, *c, Some(col))),
                    Err(_) => (*c, Err(VariantError::NoObserved(*c))),
                })
                .collect();
            Some(assemble(v, val_cols, spec, cal_prov.clone())?)
        }
    };
    let cal_matrix = assemble(cal, cal_cols, spec, cal_prov)?;
    Ok((cal_matrix, val_matrix))
}

/// How one cluster's random-intercept model was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum ClusterFit {
    Fitted(MixedCensoredFit),
    /// Fewer than two informative patients: τ² = 0 population line only.
    PopulationLine(MixedCensoredFit),
    Dropped(String),
}

impl ClusterFit {
    pub fn fit(&self) -> Option<&MixedCensoredFit> {
        match self {
            ClusterFit::Fitted(f) | ClusterFit::PopulationLine(f) => Some(f),
            ClusterFit::Dropped(_) => None,
        }
    }
}

/// Random-intercept fits on one row set with the summaries of those rows.
#[derive(Debug, Clone)]
pub struct CrSide {
    pub views: Vec<ClusterView>,
    pub fits: Vec<ClusterFit>,
    pub shrunken: SummaryMatrix,
    pub unshrunken: SummaryMatrix,
}

impl CrSide {
    /// τ̂² per cluster in cluster order; dropped clusters count as 0.
    pub fn tau2_by_cluster(&self) -> Vec<f64> {
        self.fits
            .iter()
            .map(|f| f.fit().map_or(0.0, |f| f.tau2))
            .collect()
    }

    pub fn cluster_ids(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.cluster_id).collect()
    }

    pub fn matrix(&self, shrinkage: Shrinkage) -> &SummaryMatrix {
        match shrinkage {
            Shrinkage::Unshrunken => &self.unshrunken,
            _ => &self.shrunken,
        }
    }

    pub fn converged_fits(&self) -> Vec<&MixedCensoredFit> {
        self.fits.iter().filter_map(|f| f.fit()).collect()
    }
}

fn fit_cluster(data: &ClusterData, config: &MixedConfig) -> ClusterFit {
    match fit_mixed_censored(data, config) {
        Ok(f) => ClusterFit::Fitted(f),
        Err(MixedError::NotEstimable { .. }) => match fit_population_line(data) {
            Ok(f) => ClusterFit::PopulationLine(f),
            Err(e) => ClusterFit::Dropped(e.to_string()),
        },
        Err(e) => ClusterFit::Dropped(e.to_string()),
    }
}

/// Shrunken and unshrunken columns of `target` under fixed fits.
fn score(
    target: &SampleSet<'_>,
    views: &[ClusterView],
    fits: &[ClusterFit],
    method: Method,
    provenance: Provenance,
    config: &MixedConfig,
) -> Result<(SummaryMatrix, SummaryMatrix), VariantError> {
    let rule = gauss_hermite_cached(config.n_quad).map_err(MixedError::from)?;
    let cols: Vec<Option<(Vec<f64>, Vec<f64>)>> = views
        .par_iter()
        .zip(fits.par_iter())
        .map(|(view, fit)| -> Result<_, VariantError> {
            let Some(f) = fit.fit() else { return Ok(None) };
            let data = ClusterData::from_set(target, view)?;
            let posts = cluster_posteriors(&data, f, &rule);
            let shr = posts
                .iter()
                .map(|p| shrunken_summary(p, f, view.grand_mean))
                .collect();
            let uns = posts.iter().map(unshrunken_summary).collect();
            Ok(Some((shr, uns)))
        })
        .collect::<Result<_, _>>()?;
    let mut shr_cols = Vec::new();
    let mut uns_cols = Vec::new();
    let mut dropped = Vec::new();
    let mut fallback = Vec::new();
    for ((view, fit), col) in views.iter().zip(fits).zip(cols) {
        match (fit, col) {
            (ClusterFit::Dropped(reason), _) => dropped.push(DroppedCluster {
                cluster_id: view.cluster_id,
                reason: reason.clone(),
            }),
            (other, Some((s, u))) => {
                if matches!(other, ClusterFit::PopulationLine(_)) {
                    fallback.push(view.cluster_id);
                }
                shr_cols.push((view.cluster_id, s));
                uns_cols.push((view.cluster_id, u));
            }
            (_, None) => unreachable!("fit present but no column"),
        }
    }
    let ids = target.sample_ids();
    let mut shr = SummaryMatrix::from_columns(
        ids.clone(),
        shr_cols,
        MethodSpec::shrunken(method),
        provenance.clone(),
    )?;
    let mut uns =
        SummaryMatrix::from_columns(ids, uns_cols, MethodSpec::unshrunken(method), provenance)?;
    for m in [&mut shr, &mut uns] {
        m.dropped = dropped.clone();
        m.fallback = fallback.clone();
    }
    Ok((shr, uns))
}

/// Fit every cluster on `set` (with `set`'s own mean pattern) and
/// summarize the same rows.
pub fn fit_side(
    set: &SampleSet<'_>,
    method: Method,
    source: ParameterSource,
    config: &MixedConfig,
) -> Result<CrSide, VariantError> {
    let ids: Vec<usize> = set.layout().cluster_ids().collect();
    let views: Vec<ClusterView> = ids
        .iter()
        .map(|&c| set.cluster_view(c))
        .collect::<Result<_, _>>()?;
    let fits: Vec<ClusterFit> = views
        .par_iter()
        .map(|v| -> Result<ClusterFit, VariantError> {
            Ok(fit_cluster(&ClusterData::from_set(set, v)?, config))
        })
        .collect::<Result<_, _>>()?;
    let provenance = Provenance {
        source,
        parameter_samples: set.sample_ids(),
    };
    let (shrunken, unshrunken) = score(set, &views, &fits, method, provenance, config)?;
    Ok(CrSide {
        views,
        fits,
        shrunken,
        unshrunken,
    })
}

/// Summaries of `target` under a side's frozen fits and mean pattern.
pub fn apply_side(
    side: &CrSide,
    target: &SampleSet<'_>,
    method: Method,
    config: &MixedConfig,
) -> Result<(SummaryMatrix, SummaryMatrix), VariantError> {
    let provenance = side.shrunken.provenance.clone();
    score(target, &side.views, &side.fits, method, provenance, config)
}

/// CR Prep: one fit per cluster on all rows; summaries for all rows.
pub fn cr_prep(all: &SampleSet<'_>, config: &MixedConfig) -> Result<CrSide, VariantError> {
    fit_side(all, Method::CrPrep, ParameterSource::AllRows, config)
}

/// Calibration and validation summaries of one CR variant.
#[derive(Debug, Clone)]
pub struct CrSplit {
    pub cal: CrSide,
    pub val_shrunken: SummaryMatrix,
    pub val_unshrunken: SummaryMatrix,
    /// Validation-side fits (CR Reest only).
    pub val_fits: Option<Vec<ClusterFit>>,
}

impl CrSplit {
    /// Calibration and validation matrices restricted to their common
    /// clusters.
    pub fn pair(&self, shrinkage: Shrinkage) -> (SummaryMatrix, SummaryMatrix) {
        let val = match shrinkage {
            Shrinkage::Unshrunken => &self.val_unshrunken,
            _ => &self.val_shrunken,
        };
        common_clusters(self.cal.matrix(shrinkage), val)
    }
}

/// CR Pred: fit on calibration rows; validation patients scored under the
/// calibration parameters and mean pattern.
pub fn cr_pred(
    cal: &SampleSet<'_>,
    val: &SampleSet<'_>,
    config: &MixedConfig,
) -> Result<CrSplit, VariantError> {
    let side = fit_side(cal, Method::CrPred, ParameterSource::Calibration, config)?;
    cr_pred_from(side, val, config)
}

/// CR Pred reusing an existing calibration side.
pub fn cr_pred_from(
    cal_side: CrSide,
    val: &SampleSet<'_>,
    config: &MixedConfig,
) -> Result<CrSplit, VariantError> {
    let cal = relabel(cal_side, Method::CrPred);
    let (val_shrunken, val_unshrunken) = apply_side(&cal, val, Method::CrPred, config)?;
    Ok(CrSplit {
        cal,
        val_shrunken,
        val_unshrunken,
        val_fits: None,
    })
}

/// CR Reest: each side fitted and summarized on its own rows.
pub fn cr_reest(
    cal: &SampleSet<'_>,
    val: &SampleSet<'_>,
    config: &MixedConfig,
) -> Result<CrSplit, VariantError> {
    let side = fit_side(cal, Method::CrReest, ParameterSource::Calibration, config)?;
    cr_reest_from(side, val, config)
}

/// CR Reest reusing an existing calibration side.
pub fn cr_reest_from(
    cal_side: CrSide,
    val: &SampleSet<'_>,
    config: &MixedConfig,
) -> Result<CrSplit, VariantError> {
    let cal = relabel(cal_side, Method::CrReest);
    let v = fit_side(val, Method::CrReest, ParameterSource::Validation, config)?;
    Ok(CrSplit {
        cal,
        val_shrunken: v.shrunken,
        val_unshrunken: v.unshrunken,
        val_fits: Some(v.fits),
    })
}

fn relabel(mut side: CrSide, method: Method) -> CrSide {
    side.shrunken.method.method = method;
    side.unshrunken.method.method = method;
    side
}

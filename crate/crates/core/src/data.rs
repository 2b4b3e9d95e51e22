//! Peak tables with left-censored intensities, class labels and the
//! per-cluster mean pattern.
//!
//! A [`PeakTable`] stores natural-log intensities. Cells below the limit of
//! detection are kept at the peak's LOD value, so the stored value of a
//! censored cell is also its censoring threshold.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("missing header column `{0}`")]
    MissingColumn(&'static str),
    #[error("sample `{sample}` has no row for peak `{peak}`")]
    MissingCell { sample: String, peak: String },
    #[error("duplicate row for sample `{sample}` and peak `{peak}`")]
    DuplicateCell { sample: String, peak: String },
    #[error("peak `{peak}` is assigned to clusters {first} and {second}")]
    InconsistentPeak {
        peak: String,
        first: usize,
        second: usize,
    },
    #[error("cluster {0} has no peaks; cluster ids must run 1..=C")]
    EmptyCluster(usize),
    #[error("peak `{0}` is censored in every sample, so no observed minimum exists for its LOD")]
    NeverObserved(String),
    #[error("peak `{peak}`: censored cells disagree on the LOD ({a} vs {b})")]
    InconsistentLod { peak: String, a: f64, b: f64 },
    #[error("peak `{peak}`: observed value {value} lies below its LOD {lod}")]
    BelowLod { peak: String, value: f64, lod: f64 },
    #[error("unknown cluster id {0}")]
    UnknownCluster(usize),
    #[error("reference row set is empty")]
    EmptyReference,
    #[error("row index {0} out of range")]
    RowOutOfRange(usize),
    #[error("tables do not share the same peak layout")]
    LayoutMismatch,
    #[error("{0}")]
    Labels(String),
}

/// How input intensities are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntensityScale {
    /// Raw positive intensities; ingestion takes natural logs.
    Raw,
    /// Values are already natural-log intensities.
    #[default]
    Log,
}

/// Where per-peak LOD thresholds come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LodPolicy {
    /// Censored rows carry the LOD in their intensity column; every censored
    /// cell of a peak must agree. Peaks without censored cells use their
    /// observed minimum.
    Given,
    /// The LOD of a peak is its minimal observed intensity; censored cells
    /// are overwritten with it.
    #[default]
    MinObserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestOptions {
    pub scale: IntensityScale,
    pub lod_policy: LodPolicy,
}

/// One peak of the layout: an identifier and its isotope cluster (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakSpec {
    pub id: String,
    pub cluster: usize,
}

/// `n × p` log intensities with censoring indicators and per-peak LODs.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakTable {
    sample_ids: Vec<String>,
    peaks: Vec<PeakSpec>,
    intensities: Vec<f64>,
    observed: Vec<bool>,
    lod: Vec<f64>,
    latent: Option<Vec<f64>>,
    clusters: Vec<Range<usize>>,
}

impl PeakTable {
    /// Build a table from row-major `intensities`/`observed` (already on the
    /// log scale). Peaks must be grouped by cluster, clusters numbered
    /// `1..=C` in order. `latent` holds the uncensored truth when known.
    pub fn from_parts(
        sample_ids: Vec<String>,
        peaks: Vec<PeakSpec>,
        mut intensities: Vec<f64>,
        observed: Vec<bool>,
        policy: LodPolicy,
        latent: Option<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let n = sample_ids.len();
        let p = peaks.len();
        if intensities.len() != n * p
            || observed.len() != n * p
            || latent.as_ref().is_some_and(|l| l.len() != n * p)
        {
            return Err(DataError::Malformed {
                line: 0,
                msg: format!("expected {} cells", n * p),
            });
        }
        let clusters = cluster_ranges(&peaks)?;

        let mut lod = vec![f64::NAN; p];
        for (j, spec) in peaks.iter().enumerate() {
            let column = (0..n).map(|i| (intensities[i * p + j], observed[i * p + j]));
            let min_obs = column
                .clone()
                .filter(|c| c.1)
                .map(|c| c.0)
                .fold(f64::INFINITY, f64::min);
            lod[j] = match policy {
                LodPolicy::MinObserved => {
                    if min_obs.is_infinite() {
                        return Err(DataError::NeverObserved(spec.id.clone()));
                    }
                    min_obs
                }
                LodPolicy::Given => {
                    let mut given: Option<f64> = None;
                    for (value, _) in column.clone().filter(|c| !c.1) {
                        match given {
                            None => given = Some(value),
                            Some(g) if g != value => {
                                return Err(DataError::InconsistentLod {
                                    peak: spec.id.clone(),
                                    a: g,
                                    b: value,
                                })
                            }
                            _ => {}
                        }
                    }
                    match given {
                        Some(g) => g,
                        None => min_obs,
                    }
                }
            };
            for i in 0..n {
                let cell = i * p + j;
                if observed[cell] {
                    if !intensities[cell].is_finite() {
                        return Err(DataError::Malformed {
                            line: 0,
                            msg: format!("non-finite intensity for peak `{}`", spec.id),
                        });
                    }
                    if intensities[cell] < lod[j] {
                        return Err(DataError::BelowLod {
                            peak: spec.id.clone(),
                            value: intensities[cell],
                            lod: lod[j],
                        });
                    }
                } else {
                    intensities[cell] = lod[j];
                }
            }
        }
        Ok(Self {
            sample_ids,
            peaks,
            intensities,
            observed,
            lod,
            latent,
            clusters,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_peaks(&self) -> usize {
        self.peaks.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn peaks(&self) -> &[PeakSpec] {
        &self.peaks
    }

    pub fn lod(&self) -> &[f64] {
        &self.lod
    }

    #[inline]
    pub fn value(&self, row: usize, peak: usize) -> f64 {
        self.intensities[row * self.peaks.len() + peak]
    }

    #[inline]
    pub fn is_observed(&self, row: usize, peak: usize) -> bool {
        self.observed[row * self.peaks.len() + peak]
    }

    pub fn has_latent(&self) -> bool {
        self.latent.is_some()
    }

    /// Uncensored intensity, available for synthetic tables only.
    pub fn latent(&self, row: usize, peak: usize) -> Option<f64> {
        self.latent
            .as_ref()
            .map(|l| l[row * self.peaks.len() + peak])
    }

    /// Cluster ids, `1..=C`.
    pub fn cluster_ids(&self) -> impl Iterator<Item = usize> {
        1..=self.clusters.len()
    }

    /// Peak index range of a cluster.
    pub fn cluster_peaks(&self, cluster_id: usize) -> Result<Range<usize>, DataError> {
        cluster_id
            .checked_sub(1)
            .and_then(|c| self.clusters.get(c))
            .cloned()
            .ok_or(DataError::UnknownCluster(cluster_id))
    }

    /// `1 − mean(δ)`.
    pub fn censoring_fraction(&self) -> f64 {
        let observed = self.observed.iter().filter(|&&o| o).count();
        1.0 - observed as f64 / self.observed.len().max(1) as f64
    }

    pub fn same_layout(&self, other: &PeakTable) -> bool {
        self.peaks == other.peaks
    }

    /// Row subset as a new table; LODs are carried over unchanged.
    pub fn subset(&self, rows: &[usize]) -> Result<PeakTable, DataError> {
        let p = self.n_peaks();
        let mut out = PeakTable {
            sample_ids: Vec::with_capacity(rows.len()),
            peaks: self.peaks.clone(),
            intensities: Vec::with_capacity(rows.len() * p),
            observed: Vec::with_capacity(rows.len() * p),
            lod: self.lod.clone(),
            latent: self
                .latent
                .as_ref()
                .map(|_| Vec::with_capacity(rows.len() * p)),
            clusters: self.clusters.clone(),
        };
        for &r in rows {
            if r >= self.n_samples() {
                return Err(DataError::RowOutOfRange(r));
            }
            out.sample_ids.push(self.sample_ids[r].clone());
            out.intensities
                .extend_from_slice(&self.intensities[r * p..(r + 1) * p]);
            out.observed
                .extend_from_slice(&self.observed[r * p..(r + 1) * p]);
            if let (Some(dst), Some(src)) = (out.latent.as_mut(), self.latent.as_ref()) {
                dst.extend_from_slice(&src[r * p..(r + 1) * p]);
            }
        }
        Ok(out)
    }

    /// Write the long-format peak CSV. Intensities are written on the log
    /// scale with round-trip precision; a `latent` column is appended when
    /// the table carries latent truth.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "sample_id",
            "peak_id",
            "cluster_id",
            "intensity",
            "observed",
        ];
        if self.latent.is_some() {
            header.push("latent");
        }
        w.write_record(&header)?;
        for (i, sample) in self.sample_ids.iter().enumerate() {
            for (j, peak) in self.peaks.iter().enumerate() {
                let mut record = vec![
                    sample.clone(),
                    peak.id.clone(),
                    peak.cluster.to_string(),
                    self.value(i, j).to_string(),
                    u8::from(self.is_observed(i, j)).to_string(),
                ];
                if let Some(l) = self.latent(i, j) {
                    record.push(l.to_string());
                }
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<(), DataError> {
        self.write_csv(File::create(path)?)
    }
}

fn cluster_ranges(peaks: &[PeakSpec]) -> Result<Vec<Range<usize>>, DataError> {
    let mut ranges: Vec<Range<usize>> = Vec::new();
    for (j, spec) in peaks.iter().enumerate() {
        let current = ranges.len();
        if current > 0 && spec.cluster == current {
            ranges[current - 1].end = j + 1;
        } else if spec.cluster == current + 1 {
            ranges.push(j..j + 1);
        } else if spec.cluster > current + 1 {
            return Err(DataError::EmptyCluster(current + 1));
        } else {
            return Err(DataError::Malformed {
                line: 0,
                msg: format!(
                    "peak `{}` breaks cluster grouping (cluster {})",
                    spec.id, spec.cluster
                ),
            });
        }
    }
    Ok(ranges)
}

/// Sort key placing peaks in mass order: numeric ids by value, others
/// lexicographically after them.
fn mass_key(id: &str) -> (u8, f64, &str) {
    match id.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => (0, v, ""),
        _ => (1, 0.0, id),
    }
}

/// Read a peak table from the long-format CSV
/// `sample_id,peak_id,cluster_id,intensity,observed[,latent]`.
pub fn read_peak_table<R: Read>(reader: R, options: IngestOptions) -> Result<PeakTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(DataError::MissingColumn(name))
    };
    let (c_sample, c_peak, c_cluster, c_int, c_obs) = (
        col("sample_id")?,
        col("peak_id")?,
        col("cluster_id")?,
        col("intensity")?,
        col("observed")?,
    );
    let c_latent = headers.iter().position(|h| h == "latent");

    let mut sample_index: HashMap<String, usize> = HashMap::new();
    let mut sample_ids = Vec::new();
    let mut peak_index: HashMap<String, usize> = HashMap::new();
    let mut peak_specs: Vec<PeakSpec> = Vec::new();
    // (sample, peak) -> (value, observed, latent)
    let mut cells: HashMap<(usize, usize), (f64, bool, Option<f64>)> = HashMap::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| DataError::Malformed { line, msg };
        let field = |c: usize| record.get(c).ok_or_else(|| bad("too few fields".into()));
        let sample = field(c_sample)?.to_string();
        let peak = field(c_peak)?.to_string();
        let cluster: usize = field(c_cluster)?
            .parse()
            .map_err(|_| bad("cluster_id is not a positive integer".into()))?;
        if cluster == 0 {
            return Err(bad("cluster ids start at 1".into()));
        }
        let observed = match field(c_obs)? {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("observed must be 0 or 1, got `{other}`"))),
        };
        let raw = field(c_int)?;
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            if observed || options.lod_policy == LodPolicy::Given {
                return Err(bad("missing intensity".into()));
            }
            f64::NAN
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| bad(format!("intensity `{raw}` is not a number")))?;
            match options.scale {
                IntensityScale::Log => v,
                IntensityScale::Raw => {
                    if !(v > 0.0) {
                        return Err(bad(format!("raw intensity {v} must be positive")));
                    }
                    v.ln()
                }
            }
        };
        if observed && !value.is_finite() {
            return Err(bad("non-finite intensity".into()));
        }
        let latent = match c_latent {
            Some(c) => Some(
                field(c)?
                    .parse::<f64>()
                    .map_err(|_| bad("latent is not a number".into()))?,
            ),
            None => None,
        };

        let s = *sample_index.entry(sample.clone()).or_insert_with(|| {
            sample_ids.push(sample.clone());
            sample_ids.len() - 1
        });
        let pk = match peak_index.get(&peak) {
            Some(&k) => {
                if peak_specs[k].cluster != cluster {
                    return Err(DataError::InconsistentPeak {
                        peak,
                        first: peak_specs[k].cluster,
                        second: cluster,
                    });
                }
                k
            }
            None => {
                peak_specs.push(PeakSpec {
                    id: peak.clone(),
                    cluster,
                });
                peak_index.insert(peak.clone(), peak_specs.len() - 1);
                peak_specs.len() - 1
            }
        };
        if cells.insert((s, pk), (value, observed, latent)).is_some() {
            return Err(DataError::DuplicateCell { sample, peak });
        }
    }

    let mut order: Vec<usize> = (0..peak_specs.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (mass_key(&peak_specs[a].id), mass_key(&peak_specs[b].id));
        peak_specs[a]
            .cluster
            .cmp(&peak_specs[b].cluster)
            .then(ka.0.cmp(&kb.0))
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.cmp(kb.2))
            .then(a.cmp(&b))
    });

    let n = sample_ids.len();
    let p = order.len();
    let mut intensities = Vec::with_capacity(n * p);
    let mut observed = Vec::with_capacity(n * p);
    let mut latent = c_latent.map(|_| Vec::with_capacity(n * p));
    for s in 0..n {
        for &pk in &order {
            let (v, o, l) = cells
                .get(&(s, pk))
                .copied()
                .ok_or_else(|| DataError::MissingCell {
                    sample: sample_ids[s].clone(),
                    peak: peak_specs[pk].id.clone(),
                })?;
            intensities.push(v);
            observed.push(o);
            if let (Some(dst), Some(l)) = (latent.as_mut(), l) {
                dst.push(l);
            }
        }
    }
    let peaks = order.iter().map(|&k| peak_specs[k].clone()).collect();
    PeakTable::from_parts(
        sample_ids,
        peaks,
        intensities,
        observed,
        options.lod_policy,
        latent,
    )
}

/// Ingest a peak CSV from disk.
pub fn ingest_peak_table(path: &Path, options: IngestOptions) -> Result<PeakTable, DataError> {
    read_peak_table(File::open(path)?, options)
}

/// Class outcomes `gᵢ ∈ {0, 1}` keyed by sample id (1 = case).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub sample_ids: Vec<String>,
    pub outcome: Vec<bool>,
}

impl Labels {
    pub fn new(sample_ids: Vec<String>, outcome: Vec<bool>) -> Result<Self, DataError> {
        if sample_ids.len() != outcome.len() {
            return Err(DataError::Labels(
                "sample id and outcome lengths differ".into(),
            ));
        }
        Ok(Self {
            sample_ids,
            outcome,
        })
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn n_cases(&self) -> usize {
        self.outcome.iter().filter(|&&g| g).count()
    }

    /// Outcomes in the order of `ids`; every id must be labelled.
    pub fn aligned(&self, ids: &[String]) -> Result<Vec<bool>, DataError> {
        let index: HashMap<&str, bool> = self
            .sample_ids
            .iter()
            .map(String::as_str)
            .zip(self.outcome.iter().copied())
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DataError::Labels(format!("no label for sample `{id}`")))
            })
            .collect()
    }

    pub fn read<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &'static str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or(DataError::MissingColumn(name))
        };
        let (c_id, c_out) = (col("sample_id")?, col("outcome")?);
        let mut ids = Vec::new();
        let mut outcome = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let id = record.get(c_id).ok_or(DataError::Malformed {
                line,
                msg: "too few fields".into(),
            })?;
            let g = match record.get(c_out) {
                Some("1") => true,
                Some("0") => false,
                other => {
                    return Err(DataError::Malformed {
                        line,
                        msg: format!("outcome must be 0 or 1, got {other:?}"),
                    })
                }
            };
            if !seen.insert(id.to_string()) {
                return Err(DataError::Malformed {
                    line,
                    msg: format!("duplicate sample `{id}`"),
                });
            }
            ids.push(id.to_string());
            outcome.push(g);
        }
        Ok(Self {
            sample_ids: ids,
            outcome,
        })
    }

    pub fn read_path(path: &Path) -> Result<Self, DataError> {
        Self::read(File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample_id", "outcome"])?;
        for (id, &g) in self.sample_ids.iter().zip(&self.outcome) {
            w.write_record([id.as_str(), if g { "1" } else { "0" }])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<(), DataError> {
        self.write_csv(File::create(path)?)
    }
}

/// An ordered collection of samples drawn from one or more tables that
/// share a peak layout. Censored cells keep their own table's LOD.
#[derive(Debug, Clone)]
pub struct SampleSet<'a> {
    tables: Vec<&'a PeakTable>,
    rows: Vec<(usize, usize)>,
}

impl<'a> SampleSet<'a> {
    pub fn whole(table: &'a PeakTable) -> Self {
        Self {
            tables: vec![table],
            rows: (0..table.n_samples()).map(|r| (0, r)).collect(),
        }
    }

    pub fn rows(table: &'a PeakTable, rows: &[usize]) -> Result<Self, DataError> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= table.n_samples()) {
            return Err(DataError::RowOutOfRange(bad));
        }
        Ok(Self {
            tables: vec![table],
            rows: rows.iter().map(|&r| (0, r)).collect(),
        })
    }

    /// Samples of `self` followed by those of `other`.
    pub fn concat(&self, other: &SampleSet<'a>) -> Result<Self, DataError> {
        if !self.layout().same_layout(other.layout()) {
            return Err(DataError::LayoutMismatch);
        }
        let offset = self.tables.len();
        let mut tables = self.tables.clone();
        tables.extend(other.tables.iter().copied());
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().map(|&(t, r)| (t + offset, r)));
        Ok(Self { tables, rows })
    }

    /// The table that defines the peak layout.
    pub fn layout(&self) -> &'a PeakTable {
        self.tables[0]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    #[inline]
    fn at(&self, k: usize) -> (&'a PeakTable, usize) {
        let (t, r) = self.rows[k];
        (self.tables[t], r)
    }

    pub fn sample_id(&self, k: usize) -> &'a str {
        let (t, r) = self.at(k);
        &t.sample_ids[r]
    }

    pub fn sample_ids(&self) -> Vec<String> {
        (0..self.len())
            .map(|k| self.sample_id(k).to_string())
            .collect()
    }

    #[inline]
    pub fn value(&self, k: usize, peak: usize) -> f64 {
        let (t, r) = self.at(k);
        t.value(r, peak)
    }

    #[inline]
    pub fn is_observed(&self, k: usize, peak: usize) -> bool {
        let (t, r) = self.at(k);
        t.is_observed(r, peak)
    }

    pub fn latent(&self, k: usize, peak: usize) -> Option<f64> {
        let (t, r) = self.at(k);
        t.latent(r, peak)
    }

    /// Mean pattern of a cluster over every sample in the set.
    pub fn cluster_view(&self, cluster_id: usize) -> Result<ClusterView, DataError> {
        if self.is_empty() {
            return Err(DataError::EmptyReference);
        }
        let peaks = self.layout().cluster_peaks(cluster_id)?;
        let n = self.len() as f64;
        let mean_pattern: Vec<f64> = peaks
            .clone()
            .map(|j| (0..self.len()).map(|k| self.value(k, j)).sum::<f64>() / n)
            .collect();
        let grand_mean = mean_pattern.iter().sum::<f64>() / mean_pattern.len() as f64;
        Ok(ClusterView {
            cluster_id,
            peak_indices: peaks.collect(),
            mean_pattern,
            grand_mean,
        })
    }
}

/// Column means `ȳⱼ` of one cluster over a reference sample set, and
/// their average `ȳ̄`. Censored entries enter at their LOD.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterView {
    pub cluster_id: usize,
    pub peak_indices: Vec<usize>,
    pub mean_pattern: Vec<f64>,
    pub grand_mean: f64,
}

/// Mean pattern of `cluster_id` over `reference_rows` of `table`.
pub fn mean_pattern(
    table: &PeakTable,
    cluster_id: usize,
    reference_rows: &[usize],
) -> Result<ClusterView, DataError> {
    SampleSet::rows(table, reference_rows)?.cluster_view(cluster_id)
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lod_censor::classifier::{default_lambda_grid, fit_ridge_logistic, loo_cv_lambda, Design};
use lod_censor::data::{
    ingest_peak_table, IngestOptions, IntensityScale, Labels, LodPolicy, PeakTable, SampleSet,
};
use lod_censor::harness::{
    read_report, run_external, run_internal, run_selection_study, ComparisonTable, FractionArm,
    HarnessConfig, RunManifest,
};
use lod_censor::mixed::{write_fit_dump, MixedCensoredFit, MixedConfig};
use lod_censor::synth::{generate_external, generate_synthetic, ExternalConfig, SynthConfig};
use lod_censor::variants::{
    fit_side, summarize_baseline, Method, MethodSpec, ParameterSource, Shrinkage, SummaryMatrix,
};

#[derive(Parser)]
#[command(
    name = "lod-censor",
    version,
    about = "Censored-regression summaries of isotopic peak clusters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a peak CSV and write it back on the log scale.
    Ingest(IngestArgs),
    /// Draw a synthetic study.
    Synth(SynthArgs),
    /// Per-sample cluster summaries on all rows.
    Summarize(RunArgs),
    /// Tune and fit the ridge classifier on all rows.
    Classify(RunArgs),
    /// Repeated stratified internal validation.
    Internal(RunArgs),
    /// Calibrate on one table, validate on another.
    External(RunArgs),
    /// Cluster-selection study.
    Select(RunArgs),
    /// Rebuild the comparison table from a per-split report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Raw,
    Log,
}

#[derive(Clone, Copy, ValueEnum)]
enum Lod {
    Given,
    MinObserved,
}

#[derive(Args, Clone)]
struct TableArgs {
    #[arg(long)]
    peaks: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "log")]
    scale: Scale,
    #[arg(long, value_enum, default_value = "min-observed")]
    lod_policy: Lod,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_cases: Option<usize>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    censoring: Option<f64>,
    #[arg(long)]
    informative: Option<usize>,
    #[arg(long)]
    effect: Option<f64>,
    #[arg(long)]
    zero_variance: Option<usize>,
    /// τ² range `lo,hi` of non-informative clusters.
    #[arg(long, value_parser = parse_range)]
    noise_tau2: Option<(f64, f64)>,
    /// Also draw a validation population with this intercept shift.
    #[arg(long)]
    val_shift: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Validation peak table (external runs).
    #[arg(long)]
    val_peaks: Option<PathBuf>,
    #[arg(long)]
    val_labels: Option<PathBuf>,
    /// Comma-separated method tags, e.g. `CCA,CR_PREP,CR_PRED_U`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    cal_frac: Option<f64>,
    #[arg(long)]
    n_quad: Option<usize>,
    /// `a,b,c` or `log:lo:hi:count`.
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Comma-separated fractions and/or `cv`.
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Key-value TOML file; its entries override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-split report CSV.
    #[arg(long)]
    input: PathBuf,
    /// Single fixed split: omit standard errors.
    #[arg(long)]
    external: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Flags after the configuration file has been applied.
struct Settings {
    methods: Vec<MethodSpec>,
    harness: HarnessConfig,
    fractions: Vec<FractionArm>,
}

fn parse_methods(s: &str) -> Result<Vec<MethodSpec>> {
    s.split(',')
        .map(|t| t.trim().parse::<MethodSpec>().map_err(anyhow::Error::from))
        .collect()
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if let Some(rest) = s.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            bail!("log grid must be `log:lo:hi:count`");
        }
        let (lo, hi): (f64, f64) = (parts[0].parse()?, parts[1].parse()?);
        let n: usize = parts[2].parse()?;
        if !(lo > 0.0 && hi >= lo && n >= 1) {
            bail!("log grid needs 0 < lo ≤ hi and count ≥ 1");
        }
        if n == 1 {
            return Ok(vec![lo]);
        }
        let step = (hi / lo).ln() / (n - 1) as f64;
        return Ok((0..n).map(|i| lo * (step * i as f64).exp()).collect());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad λ `{v}`"))
        })
        .collect()
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((num(lo)?, num(hi)?))
}

fn parse_fractions(s: &str) -> Result<Vec<FractionArm>> {
    s.split(',')
        .map(|v| v.parse::<FractionArm>().map_err(anyhow::Error::msg))
        .collect()
}

fn toml_string(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(a) => a.iter().map(toml_string).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn settings(args: &RunArgs, default_methods: &str) -> Result<Settings> {
    let mut method = args.method.clone();
    let mut splits = args.splits;
    let mut cal_frac = args.cal_frac;
    let mut n_quad = args.n_quad;
    let mut grid = args.lambda_grid.clone();
    let mut fractions = args.fractions.clone();
    let mut seed = args.seed;
    let mut threshold = None;
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = text
            .parse()
            .with_context(|| format!("parsing {}", path.display()))?;
        for (key, value) in &table {
            let int = || {
                value
                    .as_integer()
                    .filter(|&i| i >= 0)
                    .with_context(|| format!("`{key}` must be a non-negative integer"))
            };
            let float = || {
                value
                    .as_float()
                    .or_else(|| value.as_integer().map(|i| i as f64))
                    .with_context(|| format!("`{key}` must be a number"))
            };
            match key.replace('-', "_").as_str() {
                "method" => method = Some(toml_string(value)),
                "splits" => splits = Some(int()? as usize),
                "cal_frac" => cal_frac = Some(float()?),
                "n_quad" => n_quad = Some(int()? as usize),
                "lambda_grid" => grid = Some(toml_string(value)),
                "fractions" => fractions = Some(toml_string(value)),
                "seed" => seed = Some(int()? as u64),
                "threshold" => threshold = Some(float()?),
                other => bail!("unknown configuration key `{other}`"),
            }
        }
    }
    let defaults = HarnessConfig::default();
    let harness = HarnessConfig {
        splits: splits.unwrap_or(defaults.splits),
        cal_frac: cal_frac.unwrap_or(defaults.cal_frac),
        mixed: MixedConfig {
            n_quad: n_quad.unwrap_or(defaults.mixed.n_quad),
        },
        lambda_grid: grid.as_deref().map(parse_grid).transpose()?,
        threshold: threshold.unwrap_or(defaults.threshold),
        seed: seed.unwrap_or(defaults.seed),
    };
    Ok(Settings {
        methods: parse_methods(method.as_deref().unwrap_or(default_methods))?,
        harness,
        fractions: parse_fractions(fractions.as_deref().unwrap_or("1,0.5,0.2,0.1,cv"))?,
    })
}

fn ingest_options(t: &TableArgs) -> IngestOptions {
    IngestOptions {
        scale: match t.scale {
            Scale::Raw => IntensityScale::Raw,
            Scale::Log => IntensityScale::Log,
        },
        lod_policy: match t.lod_policy {
            Lod::Given => LodPolicy::Given,
            Lod::MinObserved => LodPolicy::MinObserved,
        },
    }
}

fn load_table(path: Option<&Path>, t: &TableArgs, flag: &str) -> Result<PeakTable> {
    let path = path.with_context(|| format!("--{flag} is required"))?;
    ingest_peak_table(path, ingest_options(t))
        .with_context(|| format!("ingesting {}", path.display()))
}

fn load_labels(path: Option<&Path>, flag: &str) -> Result<Labels> {
    let path = path.with_context(|| format!("--{flag} is required"))?;
    Labels::read_path(path).with_context(|| format!("reading {}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut w = create(dir, "manifest.txt")?;
    manifest.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn manifest_for(command: &str, s: &Settings, inputs: &[(&str, Option<&Path>)]) -> RunManifest {
    let mut m = RunManifest::new(command).with_config(&s.harness);
    m.push(
        "methods",
        s.methods
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    for (key, path) in inputs {
        if let Some(p) = path {
            m.push(key, p.display());
        }
    }
    m
}

fn write_table(dir: &Path, table: &ComparisonTable) -> Result<()> {
    let mut w = create(dir, "report.csv")?;
    table.write_report_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "summary.csv")?;
    table.write_summary_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "failures.csv")?;
    table.write_failures_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let table = load_table(args.table.peaks.as_deref(), &args.table, "peaks")?;
    fs::create_dir_all(&args.out)?;
    table.write_path(&args.out.join("peaks.csv"))?;
    let mut m = RunManifest::new("ingest");
    m.push("samples", table.n_samples());
    m.push("peaks", table.n_peaks());
    m.push("clusters", table.n_clusters());
    m.push("censoring", table.censoring_fraction());
    write_manifest(&args.out, &m)?;
    println!(
        "{} samples, {} peaks in {} clusters, {:.1}% censored",
        table.n_samples(),
        table.n_peaks(),
        table.n_clusters(),
        100.0 * table.censoring_fraction()
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_samples: args.n_samples.unwrap_or(d.n_samples),
        n_cases: args.n_cases.unwrap_or(d.n_cases),
        n_clusters: args.n_clusters.unwrap_or(d.n_clusters),
        censoring: args.censoring.unwrap_or(d.censoring),
        n_informative: args.informative.unwrap_or(d.n_informative),
        effect: args.effect.unwrap_or(d.effect),
        n_zero_variance: args.zero_variance.unwrap_or(d.n_zero_variance),
        noise_tau2_range: args.noise_tau2.unwrap_or(d.noise_tau2_range),
        ..d
    };
    fs::create_dir_all(&args.out)?;
    let mut m = RunManifest::new("synth");
    m.push("seed", args.seed);
    m.push("n_samples", cfg.n_samples);
    m.push("n_cases", cfg.n_cases);
    m.push("n_clusters", cfg.n_clusters);
    m.push("censoring", cfg.censoring);
    m.push("n_informative", cfg.n_informative);
    m.push("effect", cfg.effect);
    m.push("n_zero_variance", cfg.n_zero_variance);
    m.push("noise_tau2_range", format!("{},{}", cfg.noise_tau2_range.0, cfg.noise_tau2_range.1));
    let cal = match args.val_shift {
        None => generate_synthetic(&cfg, args.seed)?,
        Some(shift) => {
            let ext = ExternalConfig {
                base: cfg,
                intercept_shift: shift,
                ..ExternalConfig::default()
            };
            let (cal, val) = generate_external(&ext, args.seed)?;
            val.table.write_path(&args.out.join("val_peaks.csv"))?;
            val.labels.write_path(&args.out.join("val_labels.csv"))?;
            m.push("val_shift", shift);
            m.push("n_val", ext.n_val);
            cal
        }
    };
    cal.table.write_path(&args.out.join("peaks.csv"))?;
    cal.labels.write_path(&args.out.join("labels.csv"))?;
    m.push("realized_censoring", cal.table.censoring_fraction());
    write_manifest(&args.out, &m)?;
    Ok(())
}

/// Summaries of every row; CR variants fit on all rows.
fn summarize_all(
    table: &PeakTable,
    spec: MethodSpec,
    cfg: &MixedConfig,
) -> Result<(SummaryMatrix, Vec<MixedCensoredFit>)> {
    let all = SampleSet::whole(table);
    if spec.method.is_censored_regression() {
        let side = fit_side(&all, spec.method, ParameterSource::AllRows, cfg)?;
        let fits = side.fits.iter().filter_map(|f| f.fit().cloned()).collect();
        let shrinkage = if spec.shrinkage == Shrinkage::Unshrunken {
            Shrinkage::Unshrunken
        } else {
            Shrinkage::Shrunken
        };
        Ok((side.matrix(shrinkage).clone(), fits))
    } else {
        Ok((summarize_baseline(spec.method, &all, None)?.0, Vec::new()))
    }
}

fn summarize(args: &RunArgs) -> Result<()> {
    let s = settings(args, "CCA,BC,LOD,TR,CR_PREP")?;
    let table = load_table(args.table.peaks.as_deref(), &args.table, "peaks")?;
    fs::create_dir_all(&args.out)?;
    for &spec in &s.methods {
        if spec.method == Method::Tr && !table.has_latent() {
            eprintln!("skipping {spec}: the table carries no latent intensities");
            continue;
        }
        let (matrix, fits) = summarize_all(&table, spec, &s.harness.mixed)?;
        matrix.write_path(&args.out.join(format!("summary_{spec}.csv")))?;
        if !fits.is_empty() {
            let mut w = create(&args.out, &format!("fits_{spec}.csv"))?;
            write_fit_dump(&fits, &mut w)?;
            w.flush()?;
        }
    }
    write_manifest(
        &args.out,
        &manifest_for("summarize", &s, &[("peaks", args.table.peaks.as_deref())]),
    )
}

fn classify(args: &RunArgs) -> Result<()> {
    let s = settings(args, "CR_PREP")?;
    let [spec] = s.methods[..] else {
        bail!("classify takes exactly one method")
    };
    let table = load_table(args.table.peaks.as_deref(), &args.table, "peaks")?;
    let labels = load_labels(args.labels.as_deref(), "labels")?;
    let g = labels.aligned(table.sample_ids())?;
    let (matrix, _) = summarize_all(&table, spec, &s.harness.mixed)?;
    let x = Design::from_matrix(&matrix)?;
    let grid = s
        .harness
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(x.rows(), x.cols()));
    let cv = loo_cv_lambda(&x, &g, &grid)?;
    let model = fit_ridge_logistic(&x, &g, cv.lambda_star)?;
    fs::create_dir_all(&args.out)?;
    let mut w = create(&args.out, "cv.csv")?;
    writeln!(w, "lambda,error,deviance")?;
    for p in &cv.curve {
        writeln!(w, "{},{},{}", p.lambda, p.error, p.deviance)?;
    }
    w.flush()?;
    let mut w = create(&args.out, "model.csv")?;
    writeln!(w, "term,coefficient,mean,sd")?;
    writeln!(w, "intercept,{},,", model.intercept)?;
    for (i, c) in matrix.cluster_ids.iter().enumerate() {
        writeln!(
            w,
            "cluster_{c},{},{},{}",
            model.coefficients[i], model.means[i], model.sds[i]
        )?;
    }
    w.flush()?;
    let mut m = manifest_for(
        "classify",
        &s,
        &[
            ("peaks", args.table.peaks.as_deref()),
            ("labels", args.labels.as_deref()),
        ],
    );
    m.push("lambda_star", cv.lambda_star);
    write_manifest(&args.out, &m)?;
    println!("λ* = {} (LOO error {})", cv.lambda_star, cv.best().error);
    Ok(())
}

fn internal(args: &RunArgs) -> Result<()> {
    let s = settings(
        args,
        "CCA,BC,LOD,TR,CR_PREP,CR_PREP_U,CR_PRED,CR_PRED_U,CR_REEST,CR_REEST_U",
    )?;
    let table = load_table(args.table.peaks.as_deref(), &args.table, "peaks")?;
    let labels = load_labels(args.labels.as_deref(), "labels")?;
    let methods = drop_tr_without_truth(&s.methods, &table);
    let result = run_internal(&table, &labels, &methods, &s.harness)?;
    fs::create_dir_all(&args.out)?;
    write_table(&args.out, &result)?;
    write_manifest(
        &args.out,
        &manifest_for(
            "internal",
            &s,
            &[
                ("peaks", args.table.peaks.as_deref()),
                ("labels", args.labels.as_deref()),
            ],
        ),
    )?;
    print_table(&result);
    Ok(())
}

fn drop_tr_without_truth(methods: &[MethodSpec], table: &PeakTable) -> Vec<MethodSpec> {
    methods
        .iter()
        .copied()
        .filter(|m| {
            let keep = m.method != Method::Tr || table.has_latent();
            if !keep {
                eprintln!("skipping {m}: the table carries no latent intensities");
            }
            keep
        })
        .collect()
}

fn external(args: &RunArgs) -> Result<()> {
    let s = settings(
        args,
        "CCA,BC,LOD,TR,CR_PREP,CR_PREP_U,CR_PRED,CR_PRED_U,CR_REEST,CR_REEST_U",
    )?;
    let cal = load_table(args.table.peaks.as_deref(), &args.table, "peaks")?;
    let cal_labels = load_labels(args.labels.as_deref(), "labels")?;
    let val = load_table(args.val_peaks.as_deref(), &args.table, "val-peaks")?;
    let val_labels = load_labels(args.val_labels.as_deref(), "val-labels")?;
    let methods = drop_tr_without_truth(&drop_tr_without_truth(&s.methods, &cal), &val);
    let result = run_external(&cal, &cal_labels, &val, &val_labels, &methods, &s.harness)?;
    fs::create_dir_all(&args.out)?;
    write_table(&args.out, &result)?;
    let inputs = [
        ("peaks", args.table.peaks.as_deref()),
        ("labels", args.labels.as_deref()),
        ("val_peaks", args.val_peaks.as_deref()),
        ("val_labels", args.val_labels.as_deref()),
    ];
    write_manifest(&args.out, &manifest_for("external", &s, &inputs))?;
    print_table(&result);
    Ok(())
}

fn select(args: &RunArgs) -> Result<()> {
    let s = settings(args, "CR_PREP")?;
    let [variant] = s.methods[..] else {
        bail!("select takes exactly one censored-regression method")
    };
    let table = load_table(args.table.peaks.as_deref(), &args.table, "peaks")?;
    let labels = load_labels(args.labels.as_deref(), "labels")?;
    let study = run_selection_study(&table, &labels, variant, &s.fractions, &s.harness)?;
    fs::create_dir_all(&args.out)?;
    let mut w = create(&args.out, "selection.csv")?;
    study.write_csv(&mut w)?;
    w.flush()?;
    let mut m = manifest_for(
        "select",
        &s,
        &[
            ("peaks", args.table.peaks.as_deref()),
            ("labels", args.labels.as_deref()),
        ],
    );
    m.push(
        "fractions",
        s.fractions
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    write_manifest(&args.out, &m)?;
    for arm in &s.fractions {
        let e = study.errors(*arm);
        let mean = e.iter().sum::<f64>() / e.len().max(1) as f64;
        println!("{arm:>6}  mean error {mean:.4} over {} splits", e.len());
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let file =
        File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let rows = read_report(file)?;
    let table = ComparisonTable::from_rows(rows, args.external);
    fs::create_dir_all(&args.out)?;
    let mut w = create(&args.out, "summary.csv")?;
    table.write_summary_csv(&mut w)?;
    w.flush()?;
    print_table(&table);
    Ok(())
}

fn print_table(t: &ComparisonTable) {
    let show = |e: Option<lod_censor::harness::Estimate>| match e {
        None => "      -        ".to_string(),
        Some(e) => match e.se {
            Some(se) => format!("{:.4} ({:.4})", e.mean, se),
            None => format!("{:.4}         ", e.mean),
        },
    };
    println!(
        "{:<12} {:<15} {:<15} {:<15}  failed",
        "method", "error", "brier", "auc"
    );
    for r in &t.rows {
        println!(
            "{:<12} {} {} {}  {}",
            r.method.to_string(),
            show(r.error_rate),
            show(r.brier),
            show(r.auc),
            r.n_failed
        );
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(a) => ingest(&a),
        Command::Synth(a) => synth(&a),
        Command::Summarize(a) => summarize(&a),
        Command::Classify(a) => classify(&a),
        Command::Internal(a) => internal(&a),
        Command::External(a) => external(&a),
        Command::Select(a) => select(&a),
        Command::Report(a) => report(&a),
    }
}

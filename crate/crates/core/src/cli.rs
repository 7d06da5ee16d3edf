//! Command-line pipeline: configuration, subcommands and output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmap::{diffusion_distance, ClampStats, DiffusionConfig, DiffusionEmbedding};
use crate::embed::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::gapfill::{two_pass_refill, GapfillConfig, StateOrigin};
use crate::kernels::KernelSpec;
use crate::pipeline::embed_series;
use crate::series::{fmt_float, load_csv, write_csv, CsvSchema, LibraryConfig, MultiSeries, Sample};
use crate::systems::{simulate_pendulum, simulate_three_well, PendulumConfig, ThreeWellConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// CSV file; relative paths are resolved against the config file.
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    /// Held-out values (same layout) used to score imputations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub library: LibraryConfig,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gapfill: Option<GapfillConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Keep every `stride`-th library anchor.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if config.input.path.is_relative() {
            config.input.path = base.join(&config.input.path);
        }
        if let Some(r) = config.input.reference.as_mut().filter(|r| r.is_relative()) {
            *r = base.join(&*r);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        self.embedding.validate()?;
        self.diffusion.validate()?;
        self.kernel.decay.validate()?;
        if let Some(g) = &self.gapfill {
            g.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Timings {
    pub load: f64,
    pub embed: f64,
    pub gapfill: Option<f64>,
    pub write: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SourceFit {
    pub source: String,
    pub observation_rmse: f64,
    pub r_squared: f64,
    pub n_imputed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imputation_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_std: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GapfillSummary {
    pub n_states: usize,
    pub n_imputed: usize,
    pub skipped_blocks: Vec<String>,
    pub transition_rmse: f64,
    pub sources: Vec<SourceFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub library_size: usize,
    pub clamp: ClampStats,
    pub eigenvalues: Vec<f64>,
    pub n_components: usize,
    pub gap_index: Option<usize>,
    pub residual: f64,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gapfill: Option<GapfillSummary>,
    pub timings: Timings,
}

#[derive(Serialize)]
struct EigenvalueReport<'a> {
    eigenvalues: &'a [f64],
    n_components: usize,
    gap_index: Option<usize>,
    residual: f64,
    degenerate: bool,
}

#[derive(Deserialize)]
struct EigenvalueFile {
    eigenvalues: Vec<f64>,
    n_components: usize,
}

/// Writes `bytes` to a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_coordinates(
    path: &Path,
    series: &MultiSeries<f64>,
    rows: &[(usize, usize)],
    coords: &DMatrix<f64>,
    origins: Option<&[StateOrigin]>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header = vec!["anchor".to_string(), "block".into(), "time".into()];
    if origins.is_some() {
        header.push("origin".into());
    }
    header.extend((1..=coords.ncols()).map(|j| format!("psi_{j}")));
    w.write_record(&header)?;
    for (i, &(block, time)) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string(), series.block_ids()[block].clone(), time.to_string()];
        if let Some(o) = origins {
            rec.push(serde_json::to_value(o[i])?.as_str().unwrap_or_default().to_string());
        }
        rec.extend((0..coords.ncols()).map(|j| fmt_float(coords[(i, j)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_eigenvalues(path: &Path, emb: &DiffusionEmbedding<f64>) -> Result<()> {
    let eigenvalues: Vec<f64> = emb.eigenvalues.iter().copied().collect();
    write_json(
        path,
        &EigenvalueReport {
            eigenvalues: &eigenvalues,
            n_components: emb.n_components,
            gap_index: emb.gap_index,
            residual: emb.residual,
            degenerate: emb.degenerate,
        },
    )
}

/// Runs the embedding (and, when `fill` is set, the gap filling) and writes
/// all outputs to `config.output_dir`.
pub fn run_pipeline(config: &PipelineConfig, fill: bool) -> Result<RunManifest> {
    config.validate()?;
    let gap_config = if fill {
        if config.stride != 1 {
            return Err(Error::Config("gap filling needs the full library (stride 1)".into()));
        }
        Some(config.gapfill.clone().unwrap_or_default())
    } else {
        None
    };
    let clock = Instant::now();
    let series: MultiSeries<f64> = load_csv(&config.input.path, &config.input.schema)?;
    let load = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let run = embed_series(
        &series,
        &config.library,
        &config.kernel,
        &config.embedding,
        &config.diffusion,
        config.stride,
    )?;
    let embed = clock.elapsed().as_secs_f64();

    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let mut gapfill_time = None;
    let mut gapfill_summary = None;
    let mut write = 0.0;

    if let Some(gc) = gap_config {
        let clock = Instant::now();
        let filled = two_pass_refill(&run, &gc)?;
        gapfill_time = Some(clock.elapsed().as_secs_f64());
        let clock = Instant::now();
        write_csv(&filled.series, out.join("filled.csv"), true)?;
        let rows: Vec<(usize, usize)> = filled.states.iter().map(|s| (s.block, s.time)).collect();
        let origins: Vec<StateOrigin> = filled.states.iter().map(|s| s.origin).collect();
        write_coordinates(
            &out.join("coordinates.csv"),
            &series,
            &rows,
            &filled.coordinates(),
            Some(&origins),
        )?;
        write_eigenvalues(&out.join("eigenvalues.json"), &filled.embedding)?;
        write += clock.elapsed().as_secs_f64();
        let reference: Option<MultiSeries<f64>> = config
            .input
            .reference
            .as_ref()
            .map(|p| load_csv(p, &config.input.schema))
            .transpose()?;
        let scores = match &reference {
            Some(r) => imputation_rmse(&filled.series, r, &filled.imputed)?,
            None => vec![None; series.n_sources()],
        };
        let sources = series
            .sources()
            .iter()
            .enumerate()
            .zip(&filled.observations.maps)
            .filter_map(|((k, meta), map)| {
                map.as_ref().map(|m| SourceFit {
                    source: meta.name.clone(),
                    observation_rmse: m.residual_rms,
                    r_squared: m.r_squared,
                    n_imputed: filled.imputed.iter().filter(|c| c.2 == k).count(),
                    imputation_rmse: scores[k],
                    reference_std: reference.as_ref().and_then(|r| r.source_std(k)),
                })
            })
            .collect();
        gapfill_summary = Some(GapfillSummary {
            n_states: filled.states.len(),
            n_imputed: filled.imputed.len(),
            skipped_blocks: filled
                .skipped_blocks
                .iter()
                .map(|&k| series.block_ids()[k].clone())
                .collect(),
            transition_rmse: filled.transition.residual_rms,
            sources,
        });
    } else {
        let clock = Instant::now();
        let rows: Vec<(usize, usize)> = run.library.anchors().iter().map(|a| (a.block, a.time)).collect();
        write_coordinates(
            &out.join("coordinates.csv"),
            &series,
            &rows,
            &run.embedding.components(),
            None,
        )?;
        write_eigenvalues(&out.join("eigenvalues.json"), &run.embedding)?;
        write += clock.elapsed().as_secs_f64();
    }

    let emb = &run.embedding;
    let manifest = RunManifest {
        config_hash: config.hash(),
        library_size: run.library.len(),
        clamp: run.operator.clamp,
        eigenvalues: emb.eigenvalues.iter().copied().collect(),
        n_components: emb.n_components,
        gap_index: emb.gap_index,
        residual: emb.residual,
        degenerate: emb.degenerate,
        gapfill: gapfill_summary,
        timings: Timings {
            load,
            embed,
            gapfill: gapfill_time,
            write,
        },
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Per-source RMSE of imputed values against a reference series with the
/// same block layout; `None` for sources without scored cells.
pub fn imputation_rmse(
    filled: &MultiSeries<f64>,
    reference: &MultiSeries<f64>,
    imputed: &[(usize, usize, usize)],
) -> Result<Vec<Option<f64>>> {
    let same_layout = filled.n_sources() == reference.n_sources()
        && filled.blocks().len() == reference.blocks().len()
        && filled
            .blocks()
            .iter()
            .zip(reference.blocks())
            .all(|(a, b)| a.len() == b.len());
    if !same_layout {
        return Err(Error::Config("reference series does not match the input layout".into()));
    }
    let mut sums = vec![(0.0, 0usize); filled.n_sources()];
    for &(block, time, source) in imputed {
        let truth = reference.block(block);
        if !truth.is_valid(source, time) {
            continue;
        }
        if let (Sample::Real(x), Sample::Real(y)) =
            (filled.block(block).sample(source, time), truth.sample(source, time))
        {
            for (a, b) in x.iter().zip(y) {
                sums[source].0 += (a - b) * (a - b);
                sums[source].1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| (s / n as f64).sqrt()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SystemKind {
    PendulumConservative,
    PendulumDamped,
    ThreeWell,
}

impl SystemKind {
    fn name(self) -> &'static str {
        match self {
            SystemKind::PendulumConservative => "pendulum-conservative",
            SystemKind::PendulumDamped => "pendulum-damped",
            SystemKind::ThreeWell => "three-well",
        }
    }
}

/// Overlays user parameters onto a default configuration.
fn with_params<C: Serialize + for<'de> Deserialize<'de>>(defaults: C, params: Option<&str>) -> Result<C> {
    let Some(text) = params else { return Ok(defaults) };
    let mut base = serde_json::to_value(defaults)?;
    let overlay: serde_json::Value = serde_json::from_str(text)?;
    let serde_json::Value::Object(fields) = overlay else {
        return Err(Error::Config("simulation parameters must be a JSON object".into()));
    };
    for (k, v) in fields {
        if base.get(&k).is_none() {
            return Err(Error::Config(format!("unknown simulation parameter `{k}`")));
        }
        base[k] = v;
    }
    Ok(serde_json::from_value(base)?)
}

/// Generates a fixture CSV.
pub fn simulate(kind: SystemKind, params: Option<&str>, seed: Option<u64>, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match kind {
        SystemKind::PendulumConservative => {
            simulate_pendulum(&with_params(PendulumConfig::default(), params)?)?.write_csv(out)
        }
        SystemKind::PendulumDamped => {
            simulate_pendulum(&with_params(PendulumConfig::damped(), params)?)?.write_csv(out)
        }
        SystemKind::ThreeWell => {
            let mut cfg = with_params(ThreeWellConfig::default(), params)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            simulate_three_well(&cfg)?.write_csv(out)
        }
    }
}

/// Diffusion distances between pairs of rows of an `embed` output directory.
pub fn distances(dir: &Path, pairs: &[(usize, usize)], m_used: Option<usize>) -> Result<Vec<f64>> {
    let report: EigenvalueFile = serde_json::from_str(&fs::read_to_string(dir.join("eigenvalues.json"))?)?;
    let mut rdr = csv::Reader::from_path(dir.join("coordinates.csv"))?;
    let headers = rdr.headers()?.clone();
    let psi_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("psi_"))
        .map(|(i, _)| i)
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = psi_cols
            .iter()
            .map(|&c| {
                rec[c].trim().parse::<f64>().map_err(|e| Error::CsvRow {
                    line: line + 2,
                    msg: format!("bad coordinate `{}`: {e}", &rec[c]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let m = psi_cols.len().min(report.n_components);
    let m_used = m_used.unwrap_or(m);
    if m_used > m {
        return Err(Error::Config(format!(
            "m_used = {m_used} exceeds the {m} stored components"
        )));
    }
    let n = rows.len();
    let psi = DMatrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let mut eigenvalues = report.eigenvalues;
    eigenvalues.resize(n.max(m + 1), 0.0);
    let emb = DiffusionEmbedding {
        eigenvalues: DVector::from_vec(eigenvalues),
        psi,
        density: DVector::from_element(n, 1.0 / n as f64),
        row_sums: DVector::from_element(n, 1.0),
        n_components: m,
        gap_index: None,
        residual: 0.0,
        degenerate: false,
    };
    pairs
        .iter()
        .map(|&(i, l)| diffusion_distance(&emb, i, l, m_used))
        .collect()
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::CsvRow {
                    line: line + 2,
                    msg: "expected two anchor indices".into(),
                })
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(
    name = "causal-diffusion",
    version,
    about = "Causal diffusion components of multivariate time series"
)]
pub struct Cli {
    /// Worker threads for Gram evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a fixture CSV from a built-in system.
    Simulate {
        #[arg(value_enum)]
        kind: SystemKind,
        /// JSON file with system parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV (default `<kind>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed a series: coordinates.csv, eigenvalues.json, manifest.json.
    Embed(RunArgs),
    /// Embed, fill gaps and partial histories, and write filled.csv.
    Gapfill(RunArgs),
    /// Diffusion distances between anchor pairs of an embed output.
    Distance {
        /// Directory written by `embed`.
        #[arg(long)]
        embedding: PathBuf,
        /// CSV with two anchor-index columns.
        #[arg(long)]
        pairs: PathBuf,
        /// Components to use (default: all stored).
        #[arg(long)]
        m_used: Option<usize>,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_run_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            kind,
            config,
            out,
            seed,
        } => {
            let params = config.map(fs::read_to_string).transpose()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{}.csv", kind.name())));
            simulate(kind, params.as_deref(), seed, &out)
        }
        Command::Embed(args) => run_pipeline(&load_run_config(&args)?, false).map(|_| ()),
        Command::Gapfill(args) => run_pipeline(&load_run_config(&args)?, true).map(|_| ()),
        Command::Distance {
            embedding,
            pairs,
            m_used,
            out,
        } => {
            let pairs = read_pairs(&pairs)?;
            let d = distances(&embedding, &pairs, m_used)?;
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(fs::File::create(p)?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(sink);
            w.write_record(["i", "l", "distance"])?;
            for (&(i, l), v) in pairs.iter().zip(d) {
                w.write_record([i.to_string(), l.to_string(), fmt_float(v)])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 1 for invalid input or configuration, 2 for numerical
/// failures.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| execute(cli.command))),
        None => execute(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

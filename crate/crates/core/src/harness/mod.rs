//! Config-driven scaling sweeps over T, n or H.
//!
//! Each cell runs generate → collect → train → evaluate for one
//! (axis value, seed) pair. Cells run on a rayon pool; rows are written in
//! (axis value, seed) order so the CSV is byte-identical across runs.
//! Wall-clock times go to a separate timings file for the same reason.

mod plot;
mod slope;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, EvaluateOptions};
use crate::data::{collect_bundle, BehaviorKind};
use crate::ensemble::{generate_ensemble, EnsembleSpec};
use crate::error::{Error, Result};
use crate::features::build_encoder_class;
use crate::fqi::{run_mtfqi, EncoderMode, SolverConfig};
use crate::json;
use crate::rng::{derive_seed, stream};

pub use plot::{emit_plot, render_plot};
pub use slope::{fit_loglog_slope, group_means, is_nonincreasing_with_slack, SlopeFit};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the sweep's worker threads.
pub const THREADS_ENV: &str = "MTFQI_THREADS";

/// Frozen CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "axis",
    "value",
    "seed",
    "status",
    "d1_opt",
    "d1_opt_sq",
    "d1_behavior",
    "mse_stage_h",
    "mse_behavior_max",
    "theorem1a",
    "theorem1c",
    "lambda_max",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    T,
    #[serde(rename = "n")]
    N,
    H,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::T => "T",
            SweepAxis::N => "n",
            SweepAxis::H => "H",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" => Ok(SweepAxis::T),
            "n" => Ok(SweepAxis::N),
            "H" => Ok(SweepAxis::H),
            other => Err(Error::invalid(format!("unknown axis `{other}` (expected T, n or H)"))),
        }
    }
}

/// Parameters held fixed while one axis varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub num_tasks: usize,
    pub n: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub gamma: f64,
    /// `|Φ|`, the truth included.
    pub num_encoders: usize,
    pub corruption: f64,
    pub behavior: BehaviorKind,
    pub delta: f64,
    /// Decoder-norm budget. The default never binds, so rewards keep their
    /// raw `[0, 1]` scale and `Q*` ranges up to `H`.
    pub w_max: f64,
    pub ridge: f64,
}

impl Default for FixedParams {
    fn default() -> Self {
        Self {
            num_states: 5,
            num_actions: 3,
            d: 4,
            num_tasks: 5,
            n: 200,
            horizon: 5,
            gamma: 1.0,
            num_encoders: 8,
            corruption: 1.0,
            behavior: BehaviorKind::Uniform,
            delta: 0.05,
            w_max: 100.0,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sweep_axis: SweepAxis,
    pub values: Vec<usize>,
    pub fixed: FixedParams,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: EncoderMode,
    /// CSV file name inside the output directory.
    pub csv: String,
    /// Optional SVG file name for the `d1_opt` plot.
    #[serde(default)]
    pub plot: Option<String>,
}

impl ExperimentConfig {
    /// A config with default fixed parameters, seeds `0..num_seeds` and
    /// files named after the axis.
    pub fn new(axis: SweepAxis, values: Vec<usize>, num_seeds: u64) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            sweep_axis: axis,
            values,
            fixed: FixedParams::default(),
            seeds: (0..num_seeds).collect(),
            mode: EncoderMode::PerStage,
            csv: format!("sweep_{axis}.csv"),
            plot: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        if self.values.len() < 2 {
            return Err(Error::invalid("a sweep needs at least two axis values"));
        }
        if self.values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("axis values must be strictly increasing"));
        }
        if self.values[0] == 0 {
            return Err(Error::invalid("axis values must be ≥ 1"));
        }
        if self.seeds.len() < 5 {
            return Err(Error::invalid(format!("slope fits need ≥ 5 seeds, got {}", self.seeds.len())));
        }
        if self.fixed.num_encoders == 0 {
            return Err(Error::invalid("num_encoders must be ≥ 1"));
        }
        if self.csv.is_empty() {
            return Err(Error::invalid("csv file name is empty"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = json::from_versioned_str(&inject_kind(text)?, "experiment", CONFIG_SCHEMA_VERSION)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&json::read_to_string(path)?)
    }

    /// Fixed parameters with the axis set to `value`.
    pub fn cell_params(&self, value: usize) -> FixedParams {
        let mut p = self.fixed.clone();
        match self.sweep_axis {
            SweepAxis::T => p.num_tasks = value,
            SweepAxis::N => p.n = value,
            SweepAxis::H => p.horizon = value,
        }
        p
    }

    pub fn timings_name(&self) -> String {
        let stem = self.csv.strip_suffix(".csv").unwrap_or(&self.csv);
        format!("{stem}.timings.csv")
    }
}

/// Config files may omit `kind`; it is implied.
fn inject_kind(text: &str) -> Result<String> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| json::parse_error(text, &e))?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("kind").or_insert_with(|| "experiment".into());
    }
    Ok(value.to_string())
}

/// One (axis value, seed) result. Failed cells carry NaN metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub seed: u64,
    /// `ok` or `error: <message>`.
    pub status: String,
    /// Δ₁ against Q*.
    pub d1_opt: f64,
    pub d1_opt_sq: f64,
    /// Δ₁ against Q^{π_b}.
    pub d1_behavior: f64,
    /// Task-averaged squared error against Q^{π_b} at the last stage.
    pub mse_stage_h: f64,
    /// Largest task-averaged squared error against Q^{π_b} over stages.
    pub mse_behavior_max: f64,
    pub theorem1a: f64,
    pub theorem1c: f64,
    pub lambda_max: f64,
    pub wall_ms: f64,
}

impl SweepRow {
    fn failed(axis: SweepAxis, value: usize, seed: u64, err: &Error, wall_ms: f64) -> Self {
        Self {
            axis,
            value,
            seed,
            status: format!("error: {err}"),
            d1_opt: f64::NAN,
            d1_opt_sq: f64::NAN,
            d1_behavior: f64::NAN,
            mse_stage_h: f64::NAN,
            mse_behavior_max: f64::NAN,
            theorem1a: f64::NAN,
            theorem1c: f64::NAN,
            lambda_max: f64::NAN,
            wall_ms,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.axis.to_string(),
            self.value.to_string(),
            self.seed.to_string(),
            self.status.clone(),
            self.d1_opt.to_string(),
            self.d1_opt_sq.to_string(),
            self.d1_behavior.to_string(),
            self.mse_stage_h.to_string(),
            self.mse_behavior_max.to_string(),
            self.theorem1a.to_string(),
            self.theorem1c.to_string(),
            self.lambda_max.to_string(),
        ]
    }
}

/// Runs one cell of the sweep.
pub fn run_cell(config: &ExperimentConfig, value: usize, seed: u64) -> Result<SweepRow> {
    let start = Instant::now();
    let p = config.cell_params(value);
    let spec = EnsembleSpec::new(p.num_states, p.num_actions, p.horizon, p.num_tasks, p.d)
        .with_gamma(p.gamma)
        .with_w_max(p.w_max);
    let ensemble = generate_ensemble(spec, seed)?;
    let class = build_encoder_class(
        ensemble.features(),
        p.num_encoders - 1,
        p.corruption,
        derive_seed(seed, stream::ENCODERS),
    )?;
    let bundle = collect_bundle(&ensemble, p.behavior, p.n, derive_seed(seed, stream::DATA))?;
    let cfg = SolverConfig {
        ridge: p.ridge,
        gamma: p.gamma,
        mode: config.mode,
        ..SolverConfig::default()
    };
    let (model, _) = run_mtfqi(&bundle, &class, &cfg)?;
    let opts = EvaluateOptions {
        delta: p.delta,
        w_max: p.w_max,
        rademacher_draws: 20,
        seed,
    };
    let report = evaluate(&model, &ensemble, &bundle, &class, &opts)?;
    let d1 = report.error_optimal.delta[0];
    let mse_b = &report.error_behavior.mse;
    Ok(SweepRow {
        axis: config.sweep_axis,
        value,
        seed,
        status: "ok".into(),
        d1_opt: d1,
        d1_opt_sq: d1 * d1,
        d1_behavior: report.error_behavior.delta[0],
        mse_stage_h: *mse_b.last().expect("H ≥ 1"),
        mse_behavior_max: mse_b.iter().cloned().fold(0.0, f64::max),
        theorem1a: report.bounds.theorem1a,
        theorem1c: report.bounds.theorem1c,
        lambda_max: report.inputs.lambda_max,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))
}

/// Runs every cell without touching the filesystem.
pub fn sweep_rows(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let cells: Vec<(usize, u64)> = config
        .values
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = thread_pool()?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(value, seed)| {
                let start = Instant::now();
                run_cell(config, value, seed).unwrap_or_else(|e| {
                    SweepRow::failed(config.sweep_axis, value, seed, &e, start.elapsed().as_secs_f64() * 1e3)
                })
            })
            .collect()
    }))
}

/// Paths written by [`run_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutputs {
    pub csv: PathBuf,
    pub timings: PathBuf,
    pub plot: Option<PathBuf>,
}

/// Runs the sweep and writes the CSV, the timings file and the optional plot
/// into `out_dir`.
pub fn run_sweep(config: &ExperimentConfig, out_dir: &Path) -> Result<(Vec<SweepRow>, SweepOutputs)> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = sweep_rows(config)?;
    let csv_path = out_dir.join(&config.csv);
    fs::write(&csv_path, rows_to_csv(&rows)?).map_err(|e| Error::io(&csv_path, e))?;
    let timings = out_dir.join(config.timings_name());
    let mut text = String::from("value,seed,wall_ms\n");
    for r in &rows {
        text.push_str(&format!("{},{},{:.3}\n", r.value, r.seed, r.wall_ms));
    }
    fs::write(&timings, text).map_err(|e| Error::io(&timings, e))?;
    let plot = match &config.plot {
        Some(name) => {
            let path = out_dir.join(name);
            emit_plot(&csv_path, &config.sweep_axis.to_string(), "d1_opt", &path)?;
            Some(path)
        }
        None => None,
    };
    Ok((
        rows,
        SweepOutputs {
            csv: csv_path,
            timings,
            plot,
        },
    ))
}

/// Serializes rows with the frozen header; floats use shortest round-trip
/// formatting.
pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

/// A parsed results CSV with columns accessible by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub headers: Vec<String>,
    pub records: Vec<Vec<String>>,
}

impl ResultsTable {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let records = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { headers, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&json::read_to_string(path)?)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// A column parsed as floats; unparsable cells become NaN.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column_index(name)?;
        Ok(self
            .records
            .iter()
            .map(|r| r.get(i).and_then(|c| c.parse().ok()).unwrap_or(f64::NAN))
            .collect())
    }

    /// Rows with `status == ok`, when the column exists.
    pub fn ok_rows(&self) -> Self {
        let status = self.headers.iter().position(|h| h == "status");
        let records = self
            .records
            .iter()
            .filter(|r| status.is_none_or(|i| r.get(i).is_some_and(|s| s == "ok")))
            .cloned()
            .collect();
        Self {
            headers: self.headers.clone(),
            records,
        }
    }

    /// Axis values (`value` column) and the chosen response, successful rows only.
    pub fn axis_and_response(&self, response: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let ok = self.ok_rows();
        Ok((ok.numeric("value")?, ok.numeric(response)?))
    }
}

/// Slope of `response` against the axis for a results CSV.
pub fn slope_from_csv(path: &Path, response: &str) -> Result<SlopeFit> {
    let (xs, ys) = ResultsTable::load(path)?.axis_and_response(response)?;
    fit_loglog_slope(&xs, &ys)
}

//! CSV and JSON persistence.
//!
//! Every CSV file starts with one comment line naming its schema,
//! `# schema: <name>/<version>`, followed by a header row and the data.
//! Nothing time-dependent is written to CSV, so reruns with the same seed
//! reproduce the files byte for byte. Wall-clock information goes to the
//! JSON metadata file only.
//!
//! Run records (`spinctl-runs/1`) have the columns
//!
//! | column | meaning |
//! |---|---|
//! | `algorithm` | `lbfgs`, `ppo` or `random` |
//! | `seed` | derived per-run seed |
//! | `n_spins`, `source`, `target` | chain and transition |
//! | `sigma`, `shots` | noise model |
//! | `threshold`, `budget` | stopping rule |
//! | `env_calls` | metered environment calls used |
//! | `converged` | threshold reached within budget |
//! | `perceived_fidelity`, `true_fidelity` | of the returned controller |
//! | `read_time` | returned readout time |
//! | `delta` | returned biases, `;`-separated |

use std::fs::{self, File};
use std::path::Path;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Algorithm, RunRecord, SummaryRow};
use crate::dynamics::{ChainSpec, Controller};
use crate::error::{Error, Result};

pub const RUNS_SCHEMA: &str = "spinctl-runs/1";
pub const SUMMARY_SCHEMA: &str = "spinctl-summary/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Opens `path` for CSV output and writes the schema comment line.
pub fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(io_err(path))?;
    writeln!(file, "# schema: {schema}").map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_row<I, T>(w: &mut csv::Writer<File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(row).map_err(csv_err(path))
}

pub fn finish_csv(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// The schema named on the first line of a CSV file written here.
pub fn read_schema(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# schema: "))
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("{} has no schema line", path.display())))
}

const RUN_COLUMNS: [&str; 15] = [
    "algorithm",
    "seed",
    "n_spins",
    "source",
    "target",
    "sigma",
    "shots",
    "threshold",
    "budget",
    "env_calls",
    "converged",
    "perceived_fidelity",
    "true_fidelity",
    "read_time",
    "delta",
];

#[derive(Serialize, Deserialize)]
struct JsonRuns {
    schema: String,
    records: Vec<RunRecord>,
}

pub fn export_records(records: &[RunRecord], format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv_writer(path, RUNS_SCHEMA)?;
            write_row(&mut w, path, RUN_COLUMNS)?;
            for r in records {
                let delta: Vec<String> = r.controller.delta.iter().map(f64::to_string).collect();
                write_row(
                    &mut w,
                    path,
                    [
                        r.algorithm.to_string(),
                        r.seed.to_string(),
                        r.spec.n_spins.to_string(),
                        r.spec.source.to_string(),
                        r.spec.target.to_string(),
                        r.sigma.to_string(),
                        r.shots.to_string(),
                        r.threshold.to_string(),
                        r.budget.to_string(),
                        r.env_calls.to_string(),
                        r.converged.to_string(),
                        r.perceived_fidelity.to_string(),
                        r.true_fidelity.to_string(),
                        r.controller.read_time.to_string(),
                        delta.join(";"),
                    ],
                )?;
            }
            finish_csv(w, path)
        }
        Format::Json => write_json(
            path,
            &JsonRuns {
                schema: RUNS_SCHEMA.to_string(),
                records: records.to_vec(),
            },
        ),
    }
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: bad {field} value {v:?}", path.display())))
}

/// Reads records written by [`export_records`]. CSV rows carry no wall
/// time and the couplings are taken as uniform.
pub fn load_records(path: &Path, format: Format) -> Result<Vec<RunRecord>> {
    match format {
        Format::Json => {
            let runs: JsonRuns = read_json(path)?;
            if runs.schema != RUNS_SCHEMA {
                return Err(Error::Config(format!("unsupported schema {}", runs.schema)));
            }
            Ok(runs.records)
        }
        Format::Csv => {
            let schema = read_schema(path)?;
            if schema != RUNS_SCHEMA {
                return Err(Error::Config(format!("unsupported schema {schema}")));
            }
            let mut reader = csv_reader(path)?;
            let mut out = Vec::new();
            for row in reader.records() {
                let row = row.map_err(csv_err(path))?;
                let f = |i: usize| row.get(i).unwrap_or("");
                let delta = if f(14).is_empty() {
                    Vec::new()
                } else {
                    f(14).split(';')
                        .map(|v| parse::<f64>(path, "delta", v))
                        .collect::<Result<Vec<_>>>()?
                };
                let n: usize = parse(path, "n_spins", f(2))?;
                out.push(RunRecord {
                    algorithm: parse(path, "algorithm", f(0))?,
                    seed: parse(path, "seed", f(1))?,
                    spec: ChainSpec::uniform(n, parse(path, "source", f(3))?, parse(path, "target", f(4))?)?,
                    sigma: parse(path, "sigma", f(5))?,
                    shots: parse(path, "shots", f(6))?,
                    threshold: parse(path, "threshold", f(7))?,
                    budget: parse(path, "budget", f(8))?,
                    env_calls: parse(path, "env_calls", f(9))?,
                    converged: parse(path, "converged", f(10))?,
                    perceived_fidelity: parse(path, "perceived_fidelity", f(11))?,
                    true_fidelity: parse(path, "true_fidelity", f(12))?,
                    controller: Controller {
                        read_time: parse(path, "read_time", f(13))?,
                        delta,
                    },
                    wall_time_s: 0.0,
                });
            }
            Ok(out)
        }
    }
}

/// Columns: `algorithm,n_spins,source,target,sigma,shots,threshold,runs,
/// converged,median_calls,q1_calls,q3_calls,median_perceived,median_true`.
pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path, SUMMARY_SCHEMA)?;
    write_row(
        &mut w,
        path,
        [
            "algorithm",
            "n_spins",
            "source",
            "target",
            "sigma",
            "shots",
            "threshold",
            "runs",
            "converged",
            "median_calls",
            "q1_calls",
            "q3_calls",
            "median_perceived",
            "median_true",
        ],
    )?;
    for r in rows {
        write_row(
            &mut w,
            path,
            [
                r.algorithm.to_string(),
                r.n_spins.to_string(),
                r.source.to_string(),
                r.target.to_string(),
                r.sigma.to_string(),
                r.shots.to_string(),
                r.threshold.to_string(),
                r.runs.to_string(),
                r.converged.to_string(),
                r.median_calls.to_string(),
                r.q1_calls.to_string(),
                r.q3_calls.to_string(),
                r.median_perceived.to_string(),
                r.median_true.to_string(),
            ],
        )?;
    }
    finish_csv(w, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Lbfgs => "lbfgs",
            Algorithm::Ppo => "ppo",
            Algorithm::Random => "random",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Algorithm::Lbfgs),
            "ppo" => Ok(Algorithm::Ppo),
            "random" => Ok(Algorithm::Random),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

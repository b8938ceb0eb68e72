//! Result records and their JSON and CSV forms.

use std::path::Path;

use mfbdsde_core::PicardTrace;
use serde::{Deserialize, Serialize};

use crate::config::{Axis, Command, ConfigEcho, Format};
use crate::error::{CliError, CliResult};
use crate::ext_f64;

pub const VERSION: &str = "mfbdsde-result/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    pub name: String,
    #[serde(with = "ext_f64")]
    pub value: f64,
    /// Present for every Monte Carlo estimate; `None` for counts,
    /// residuals and other exact quantities.
    #[serde(with = "ext_f64::option")]
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub value: f64,
    /// Estimate of the studied quantity. For the epsilon axis, the
    /// residual of the difference quotient against the variational state.
    #[serde(with = "ext_f64")]
    pub estimate: f64,
    #[serde(with = "ext_f64::option")]
    pub std_err: Option<f64>,
    /// Error against the oracle. For the epsilon axis, `sup_t E|Y^eps - Y|^2`.
    #[serde(with = "ext_f64")]
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub axis: Axis,
    pub rows: Vec<StudyRow>,
    /// Log-log slope of error against axis value; absent when an error is
    /// not positive.
    #[serde(with = "ext_f64::option")]
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: String,
    pub command: Command,
    pub config: ConfigEcho,
    pub scalars: Vec<Scalar>,
    pub series: Vec<Series>,
    pub trace: Option<PicardTrace>,
    pub table: Option<StudyTable>,
    pub wall_clock_s: f64,
}

impl ResultRecord {
    pub fn new(config: ConfigEcho) -> Self {
        Self {
            version: VERSION.into(),
            command: config.command,
            config,
            scalars: Vec::new(),
            series: Vec::new(),
            trace: None,
            table: None,
            wall_clock_s: 0.0,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64, std_err: Option<f64>) {
        self.scalars.push(Scalar { name: name.into(), value, std_err });
    }

    pub fn push_series(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.series.push(Series { name: name.into(), values });
    }

    pub fn scalar(&self, name: &str) -> Option<&Scalar> {
        self.scalars.iter().find(|s| s.name == name)
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    /// Everything but the wall clock, for reproducibility comparisons.
    pub fn without_timing(&self) -> ResultRecord {
        ResultRecord { wall_clock_s: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Output(e.to_string()))
    }

    pub fn from_json(src: &str) -> CliResult<Self> {
        let r: ResultRecord = serde_json::from_str(src).map_err(|e| CliError::Output(format!("result file: {e}")))?;
        if r.version != VERSION {
            return Err(CliError::Output(format!("unsupported result version `{}`", r.version)));
        }
        Ok(r)
    }

    /// Long form: `kind,name,index,value,std_err`, one row per number. The
    /// configuration echo is a single JSON cell.
    pub fn to_csv(&self) -> CliResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |kind: &str, name: &str, index: Option<usize>, value: String, se: Option<f64>| {
            let index = index.map(|i| i.to_string()).unwrap_or_default();
            let se = se.map(|s| format!("{s}")).unwrap_or_default();
            w.write_record([kind, name, index.as_str(), value.as_str(), se.as_str()])
        };
        let out = |e: csv::Error| CliError::Output(e.to_string());
        row("meta", "version", None, self.version.clone(), None).map_err(out)?;
        row("meta", "command", None, self.command.name().into(), None).map_err(out)?;
        row("meta", "wall_clock_s", None, format!("{}", self.wall_clock_s), None).map_err(out)?;
        let echo = serde_json::to_string(&self.config).map_err(|e| CliError::Output(e.to_string()))?;
        row("config", "echo", None, echo, None).map_err(out)?;
        for s in &self.scalars {
            row("scalar", &s.name, None, format!("{}", s.value), s.std_err).map_err(out)?;
        }
        for s in &self.series {
            for (i, v) in s.values.iter().enumerate() {
                row("series", &s.name, Some(i), format!("{v}"), None).map_err(out)?;
            }
        }
        if let Some(t) = &self.trace {
            row("trace", "iterations", None, t.iterations.to_string(), None).map_err(out)?;
            row("trace", "converged", None, t.converged.to_string(), None).map_err(out)?;
            for (i, d) in t.distances.iter().enumerate() {
                row("trace", "distance", Some(i), format!("{d}"), None).map_err(out)?;
            }
        }
        if let Some(t) = &self.table {
            let json = serde_json::to_string(t).map_err(|e| CliError::Output(e.to_string()))?;
            row("table", "json", None, json, None).map_err(out)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| CliError::Output(e.to_string()))?)
            .map_err(|e| CliError::Output(e.to_string()))
    }

    pub fn from_csv(src: &str) -> CliResult<Self> {
        let bad = |msg: String| CliError::Output(format!("result csv: {msg}"));
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(src.as_bytes());
        let mut version = None;
        let mut command = None;
        let mut wall = 0.0;
        let mut config = None;
        let mut scalars = Vec::new();
        let mut series: Vec<Series> = Vec::new();
        let mut trace: Option<PicardTrace> = None;
        let mut table = None;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: `{s}`")));
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", rec.len())));
            }
            let (kind, name, value, se) = (&rec[0], &rec[1], &rec[3], &rec[4]);
            match (kind, name) {
                ("meta", "version") => version = Some(value.to_string()),
                ("meta", "command") => {
                    command = Some(
                        serde_json::from_value::<Command>(serde_json::Value::String(value.into()))
                            .map_err(|e| bad(e.to_string()))?,
                    )
                }
                ("meta", "wall_clock_s") => wall = num(value)?,
                ("config", _) => config = Some(serde_json::from_str::<ConfigEcho>(value).map_err(|e| bad(e.to_string()))?),
                ("scalar", _) => scalars.push(Scalar {
                    name: name.into(),
                    value: num(value)?,
                    std_err: if se.is_empty() { None } else { Some(num(se)?) },
                }),
                ("series", _) => {
                    let v = num(value)?;
                    match series.last_mut() {
                        Some(s) if s.name == name => s.values.push(v),
                        _ => series.push(Series { name: name.into(), values: vec![v] }),
                    }
                }
                ("trace", "iterations") => {
                    trace.get_or_insert_with(Default::default).iterations = value.parse().map_err(|_| bad("iterations".into()))?
                }
                ("trace", "converged") => {
                    trace.get_or_insert_with(Default::default).converged = value.parse().map_err(|_| bad("converged".into()))?
                }
                ("trace", "distance") => trace.get_or_insert_with(Default::default).distances.push(num(value)?),
                ("table", _) => table = Some(serde_json::from_str(value).map_err(|e| bad(e.to_string()))?),
                _ => return Err(bad(format!("unknown row kind `{kind}`/`{name}`"))),
            }
        }
        let version = version.ok_or_else(|| bad("missing version".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version `{version}`")));
        }
        Ok(ResultRecord {
            version,
            command: command.ok_or_else(|| bad("missing command".into()))?,
            config: config.ok_or_else(|| bad("missing config".into()))?,
            scalars,
            series,
            trace,
            table,
            wall_clock_s: wall,
        })
    }
}

impl StudyTable {
    /// `axis,value,estimate,std_err,error`, then a `slope` row carrying the
    /// fitted slope in the last column.
    pub fn to_csv(&self) -> CliResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let out = |e: csv::Error| CliError::Output(e.to_string());
        w.write_record(["axis", "value", "estimate", "std_err", "error"]).map_err(out)?;
        for r in &self.rows {
            let se = r.std_err.map(|s| format!("{s}")).unwrap_or_default();
            w.write_record([
                self.axis.name().to_string(),
                format!("{}", r.value),
                format!("{}", r.estimate),
                se,
                format!("{}", r.error),
            ])
            .map_err(out)?;
        }
        let slope = self.slope.map(|s| format!("{s}")).unwrap_or_default();
        w.write_record(["slope", "", "", "", slope.as_str()]).map_err(out)?;
        String::from_utf8(w.into_inner().map_err(|e| CliError::Output(e.to_string()))?)
            .map_err(|e| CliError::Output(e.to_string()))
    }

    pub fn from_csv(src: &str) -> CliResult<Self> {
        let bad = |msg: String| CliError::Output(format!("study csv: {msg}"));
        let mut rd = csv::Reader::from_reader(src.as_bytes());
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: `{s}`")));
        let mut axis = None;
        let mut rows = Vec::new();
        let mut slope = None;
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if &rec[0] == "slope" {
                slope = if rec[4].is_empty() { None } else { Some(num(&rec[4])?) };
                continue;
            }
            axis = Some(
                serde_json::from_value::<Axis>(serde_json::Value::String(rec[0].into())).map_err(|e| bad(e.to_string()))?,
            );
            rows.push(StudyRow {
                value: num(&rec[1])?,
                estimate: num(&rec[2])?,
                std_err: if rec[3].is_empty() { None } else { Some(num(&rec[3])?) },
                error: num(&rec[4])?,
            });
        }
        Ok(StudyTable { axis: axis.ok_or_else(|| bad("no rows".into()))?, rows, slope })
    }
}

/// What a result file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Record(ResultRecord),
    Study(StudyTable),
}

/// The text written for `record` in `format`. Convergence studies in CSV
/// are written as their table.
pub fn render(record: &ResultRecord, format: Format) -> CliResult<String> {
    match (format, &record.table) {
        (Format::Json, _) => record.to_json(),
        (Format::Csv, Some(t)) => t.to_csv(),
        (Format::Csv, None) => record.to_csv(),
    }
}

pub fn write(record: &ResultRecord, format: Format, path: &Path) -> CliResult<()> {
    std::fs::write(path, render(record, format)?)?;
    Ok(())
}

/// Read back any file written by [`write`].
pub fn load(path: &Path) -> CliResult<Loaded> {
    let src = std::fs::read_to_string(path)?;
    if src.trim_start().starts_with('{') {
        return Ok(Loaded::Record(ResultRecord::from_json(&src)?));
    }
    if src.starts_with("axis,") {
        return Ok(Loaded::Study(StudyTable::from_csv(&src)?));
    }
    Ok(Loaded::Record(ResultRecord::from_csv(&src)?))
}

//! File formats: model documents (JSON), experiment batches, datasets
//! (CSV or whitespace columns) and the plot-ready spectrum and trace files.
//!
//! Numbers are written with the shortest decimal that round-trips, so every
//! file reproduces the in-memory values exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::MarkovSequence;
use crate::recovery::{BatchMeta, Excitation, ExperimentBatch};
use crate::system::{ContinuousBilinearSystem, DiscreteBilinearSystem};

pub const MODEL_FORMAT: &str = "bilinid-model";
const BATCH_HEADER: &str = "# bilinid-batch 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDomain {
    Discrete,
    Continuous,
}

/// On-disk model document. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub time_domain: TimeDomain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub n: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub n_op: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    #[serde(rename = "D", default)]
    pub d: f64,
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
    #[serde(default)]
    pub y_offset: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

/// A model of either time domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Discrete(DiscreteBilinearSystem),
    /// Continuous operators with the sampling time they were derived at, if any.
    Continuous(ContinuousBilinearSystem, Option<f64>),
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format(format!("{name} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn vector(name: &str, v: &[f64], n: usize) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::Format(format!("{name} must have {n} entries")));
    }
    Ok(DVector::from_column_slice(v))
}

macro_rules! to_file {
    ($sys:expr, $domain:expr, $dt:expr) => {{
        let sys = $sys;
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            time_domain: $domain,
            dt: $dt,
            n: sys.dim(),
            a: rows(sys.a()),
            n_op: rows(sys.n()),
            b: sys.b().iter().copied().collect(),
            c: sys.c().iter().copied().collect(),
            d: sys.d(),
            drift: sys.drift().map(|v| v.iter().copied().collect()),
            y_offset: sys.y_offset(),
            x0: Some(sys.x0().iter().copied().collect()),
        }
    }};
}

macro_rules! from_file {
    ($ty:ty, $f:expr) => {{
        let f = $f;
        let n = f.n;
        <$ty>::new(
            matrix("A", &f.a, n)?,
            matrix("N", &f.n_op, n)?,
            vector("B", &f.b, n)?,
            vector("C", &f.c, n)?,
        )?
        .with_d(f.d)?
        .with_drift(f.drift.as_deref().map(|v| vector("drift", v, n)).transpose()?)?
        .with_y_offset(f.y_offset)?
        .with_x0(match &f.x0 {
            Some(x0) => vector("x0", x0, n)?,
            None => DVector::zeros(n),
        })?
    }};
}

impl From<&Model> for ModelFile {
    fn from(model: &Model) -> Self {
        match model {
            Model::Discrete(sys) => to_file!(sys, TimeDomain::Discrete, None),
            Model::Continuous(sys, dt) => to_file!(sys, TimeDomain::Continuous, *dt),
        }
    }
}

impl TryFrom<&ModelFile> for Model {
    type Error = Error;

    fn try_from(f: &ModelFile) -> Result<Self> {
        if f.format != MODEL_FORMAT || f.version != 1 {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} version 1, found {} version {}",
                f.format, f.version
            )));
        }
        if f.n == 0 {
            return Err(Error::Format("state dimension must be positive".into()));
        }
        Ok(match f.time_domain {
            TimeDomain::Discrete => Model::Discrete(from_file!(DiscreteBilinearSystem, f)),
            TimeDomain::Continuous => {
                Model::Continuous(from_file!(ContinuousBilinearSystem, f), f.dt)
            }
        })
    }
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        Model::try_from(&file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

impl From<DiscreteBilinearSystem> for Model {
    fn from(sys: DiscreteBilinearSystem) -> Self {
        Model::Discrete(sys)
    }
}

pub fn markov_to_json(w: &MarkovSequence) -> Result<String> {
    Ok(serde_json::to_string_pretty(w)?)
}

pub fn markov_from_json(text: &str) -> Result<MarkovSequence> {
    Ok(serde_json::from_str(text)?)
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a String");
    }
    s
}

fn excitation_label(excitation: &Excitation) -> String {
    match excitation {
        Excitation::Gaussian { mean, std } => format!("gaussian mean={mean} std={std}"),
        Excitation::Prescribed { .. } => "prescribed".into(),
    }
}

/// Batch text: a header with `d`, `L`, seed and excitation, then for every
/// experiment a `u,…` line followed by a `y,…` line.
pub fn write_batch(batch: &ExperimentBatch) -> String {
    let mut out = String::from(BATCH_HEADER);
    out.push('\n');
    let seed = batch
        .meta()
        .and_then(|m| m.seed)
        .map_or_else(|| "none".to_string(), |s| s.to_string());
    let excitation = batch
        .meta()
        .map_or_else(|| "unknown".to_string(), |m| excitation_label(&m.excitation));
    writeln!(
        out,
        "# d={} L={} seed={seed} excitation={excitation}",
        batch.count(),
        batch.len()
    )
    .expect("writing to a String");
    for i in 0..batch.count() {
        writeln!(out, "u,{}", join(batch.inputs().row(i).iter().copied())).expect("String");
        writeln!(out, "y,{}", join(batch.outputs().row(i).iter().copied())).expect("String");
    }
    out
}

fn parse_number(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {token:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("value on line {line}")));
    }
    Ok(v)
}

fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|t| t.strip_prefix('=')))
}

pub fn read_batch(text: &str) -> Result<ExperimentBatch> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == BATCH_HEADER => {}
        _ => return Err(Error::Format(format!("missing {BATCH_HEADER:?} header"))),
    }
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Format("missing batch size header".into()))?;
    let field = |key: &str| -> Result<usize> {
        header_field(header, key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: hline,
                message: format!("header lacks {key}="),
            })
    };
    let (d, len) = (field("d")?, field("L")?);
    let seed = header_field(header, "seed").and_then(|s| s.parse().ok());
    let excitation = match (header_field(header, "mean"), header_field(header, "std")) {
        (Some(m), Some(s)) => Some(Excitation::Gaussian {
            mean: parse_number(m, hline)?,
            std: parse_number(s, hline)?,
        }),
        _ => None,
    };

    let mut u_rows = Vec::with_capacity(d);
    let mut y_rows = Vec::with_capacity(d);
    for (line, text) in lines.filter(|(_, l)| !l.is_empty() && !l.starts_with('#')) {
        let mut parts = text.split(',');
        let tag = parts.next().unwrap_or_default();
        let values = parts
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != len {
            return Err(Error::Parse {
                line,
                message: format!("expected {len} values, found {}", values.len()),
            });
        }
        match (tag, u_rows.len() == y_rows.len()) {
            ("u", true) => u_rows.push(values),
            ("y", false) => y_rows.push(values),
            _ => {
                return Err(Error::Parse {
                    line,
                    message: "records must alternate u and y lines".into(),
                })
            }
        }
    }
    if u_rows.len() != d || y_rows.len() != d {
        return Err(Error::Format(format!(
            "header announces {d} experiments, found {} input and {} output rows",
            u_rows.len(),
            y_rows.len()
        )));
    }
    let inputs = DMatrix::from_fn(d, len, |r, c| u_rows[r][c]);
    let outputs = DMatrix::from_fn(d, len, |r, c| y_rows[r][c]);
    let batch = ExperimentBatch::new(inputs, outputs)?;
    Ok(match excitation {
        Some(excitation) => batch.with_meta(BatchMeta { seed, excitation }),
        None => batch,
    })
}

/// A measured input/output record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dt: Option<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub label: String,
}

impl Dataset {
    pub fn new(u: Vec<f64>, y: Vec<f64>, dt: Option<f64>, label: impl Into<String>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension(format!(
                "input has {} samples, output has {}",
                u.len(),
                y.len()
            )));
        }
        if let Some(i) = u.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset sample {}", i % u.len().max(1))));
        }
        Ok(Dataset {
            dt,
            u,
            y,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            dt: self.dt,
            u: self.u[start..end].to_vec(),
            y: self.y[start..end].to_vec(),
            label: self.label.clone(),
        }
    }
}

/// Input layout for [`ingest`].
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetFormat {
    /// Comma-separated with a header naming `u`, `y` and optionally `t`.
    Csv,
    /// Whitespace-separated columns, 1-based indices.
    Whitespace {
        u_col: usize,
        y_col: usize,
        t_col: Option<usize>,
    },
}

fn infer_dt(t: &[f64]) -> Option<f64> {
    (t.len() >= 2).then(|| (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64)
}

pub fn parse_dataset(text: &str, format: &DatasetFormat, label: &str) -> Result<Dataset> {
    let (u, y, t) = parse_columns(text, format, true)?;
    let dt = t.as_deref().and_then(infer_dt);
    let ds = Dataset::new(u, y.unwrap_or_default(), dt, label)?;
    if ds.is_empty() {
        return Err(Error::Format(format!("{label} holds no samples")));
    }
    log::info!(
        "{label}: {} samples, u in [{:.4}, {:.4}], y in [{:.4}, {:.4}]",
        ds.len(),
        ds.u.iter().copied().fold(f64::INFINITY, f64::min),
        ds.u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ds.y.iter().copied().fold(f64::INFINITY, f64::min),
        ds.y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(ds)
}

/// Input column alone, with the sampling time when a time column is present.
/// A csv file needs no `y` column and the whitespace `y_col` is ignored.
pub fn parse_input(text: &str, format: &DatasetFormat, label: &str) -> Result<(Vec<f64>, Option<f64>)> {
    let (u, _, t) = parse_columns(text, format, false)?;
    if u.is_empty() {
        return Err(Error::Format(format!("{label} holds no samples")));
    }
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input sample {i}")));
    }
    Ok((u, t.as_deref().and_then(infer_dt)))
}

fn parse_columns(text: &str, format: &DatasetFormat, need_y: bool) -> Result<Columns> {
    match format {
        DatasetFormat::Csv => parse_csv(text, need_y),
        DatasetFormat::Whitespace { u_col, y_col, t_col } => {
            parse_whitespace(text, *u_col, need_y.then_some(*y_col), *t_col)
        }
    }
}

type Columns = (Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>);

fn parse_csv(text: &str, need_y: bool) -> Result<Columns> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (ui, yi) = match (column("u"), column("y")) {
        (Some(u), y) if y.is_some() || !need_y => (u, y.filter(|_| need_y)),
        _ => {
            let wanted = if need_y { "u and y columns" } else { "a u column" };
            return Err(Error::Parse {
                line: 1,
                message: format!("header must name {wanted}, found {headers:?}"),
            });
        }
    };
    let ti = column("t");
    let (mut u, mut y, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        u.push(parse_number(&record[ui], line)?);
        if let Some(yi) = yi {
            y.push(parse_number(&record[yi], line)?);
        }
        if let Some(ti) = ti {
            t.push(parse_number(&record[ti], line)?);
        }
    }
    Ok((u, yi.map(|_| y), ti.map(|_| t)))
}

fn parse_whitespace(
    text: &str,
    u_col: usize,
    y_col: Option<usize>,
    t_col: Option<usize>,
) -> Result<Columns> {
    if u_col == 0 || y_col == Some(0) || t_col == Some(0) {
        return Err(Error::Contract("column indices are 1-based".into()));
    }
    let need = u_col.max(y_col.unwrap_or(0)).max(t_col.unwrap_or(0));
    let (mut u, mut y, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with(['#', '%']) {
            continue;
        }
        if fields.len() < need {
            return Err(Error::Parse {
                line,
                message: format!("expected at least {need} columns, found {}", fields.len()),
            });
        }
        u.push(parse_number(fields[u_col - 1], line)?);
        if let Some(c) = y_col {
            y.push(parse_number(fields[c - 1], line)?);
        }
        if let Some(c) = t_col {
            t.push(parse_number(fields[c - 1], line)?);
        }
    }
    Ok((u, y_col.map(|_| y), t_col.map(|_| t)))
}

pub fn ingest(path: &Path, format: &DatasetFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, format, &path.display().to_string())
}

/// File form of [`parse_input`].
pub fn ingest_input(path: &Path, format: &DatasetFormat) -> Result<(Vec<f64>, Option<f64>)> {
    let text = fs::read_to_string(path)?;
    parse_input(&text, format, &path.display().to_string())
}

/// `index,sigma,sigma_ratio` rows, 1-based index. Numbers are written in the
/// shortest form that parses back to the same value.
pub fn spectrum_csv(singular_values: &[f64]) -> String {
    let first = singular_values.first().copied().unwrap_or(1.0);
    let mut out = String::from("index,sigma,sigma_ratio\n");
    for (i, s) in singular_values.iter().enumerate() {
        writeln!(out, "{},{s:?},{:?}", i + 1, s / first).expect("writing to a String");
    }
    out
}

/// Sample-indexed `t,u,y_ref,<name>…` table for overlay plots.
pub fn trace_csv(u: &[f64], y_ref: &[f64], traces: &[(&str, &[f64])], dt: Option<f64>) -> Result<String> {
    if y_ref.len() != u.len() || traces.iter().any(|(_, y)| y.len() != u.len()) {
        return Err(Error::Dimension("trace lengths differ".into()));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "u".into(), "y_ref".into()];
    header.extend(traces.iter().map(|(name, _)| name.to_string()));
    writer.write_record(&header).map_err(csv_error)?;
    for k in 0..u.len() {
        let t = dt.map_or(k as f64, |dt| k as f64 * dt);
        let mut row = vec![format!("{t:?}"), format!("{:?}", u[k]), format!("{:?}", y_ref[k])];
        row.extend(traces.iter().map(|(_, y)| format!("{:?}", y[k])));
        writer.write_record(&row).map_err(csv_error)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

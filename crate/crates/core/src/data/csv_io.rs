use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Dataset, Schema, MISSING_VARIANCE, NOISELESS_VARIANCE};
use crate::error::{Result, XdError};
use crate::linalg;
use crate::params::{NoisyPoint, Projection};

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> XdError {
    XdError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Empty fields and `NaN` (any case) are missing.
fn parse_field(raw: &str, path: &Path, line: u64, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(v) => Err(parse_error(path, line, format!("column {column}: non-finite value {v}"))),
        Err(_) => Err(parse_error(path, line, format!("column {column}: cannot parse {s:?}"))),
    }
}

struct Layout {
    value: Vec<usize>,
    err: Vec<Option<usize>>,
    /// `(a, b, column)` with `a < b` in schema order.
    corr: Vec<(usize, usize, usize)>,
}

fn layout(schema: &Schema, headers: &csv::StringRecord) -> Result<Layout> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut value = Vec::new();
    let mut err = Vec::new();
    for c in &schema.columns {
        value.push(find(&c.name).ok_or_else(|| XdError::Schema(format!("missing column {}", c.name)))?);
        if c.noise {
            let e = format!("{}_err", c.name);
            err.push(Some(find(&e).ok_or_else(|| XdError::Schema(format!("missing column {e}")))?));
        } else {
            err.push(None);
        }
    }
    let mut corr = Vec::new();
    for a in 0..schema.columns.len() {
        for b in (a + 1)..schema.columns.len() {
            let (na, nb) = (&schema.columns[a].name, &schema.columns[b].name);
            let col = find(&format!("{na}_{nb}_corr")).or_else(|| find(&format!("{nb}_{na}_corr")));
            if let Some(col) = col {
                if err[a].is_none() || err[b].is_none() {
                    return Err(XdError::Schema(format!(
                        "correlation between {na} and {nb} given but one of them has no errors"
                    )));
                }
                corr.push((a, b, col));
            }
        }
    }
    Ok(Layout { value, err, corr })
}

/// Reads a dataset from any reader; `path` is only used in error messages.
///
/// A missing value sets that coordinate of `x` to 0 with noise variance `1e12` and no
/// correlations. Columns without errors get variance `1e-2`. Projections are the identity.
pub fn read_csv<R: Read>(reader: R, schema: &Schema, path: &Path) -> Result<Dataset> {
    schema.validate()?;
    let d = schema.d_obs();
    if schema.d_latent != d {
        return Err(XdError::Schema(format!(
            "CSV data use the identity projection, so d_latent ({}) must equal the number of columns ({d})",
            schema.d_latent
        )));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let lay = layout(schema, &headers)?;
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let mut x = DVector::zeros(d);
        let mut sd = vec![None; d];
        let mut noise = DMatrix::zeros(d, d);
        for (k, c) in schema.columns.iter().enumerate() {
            let v = parse_field(&rec[lay.value[k]], path, line, &c.name)?;
            let e = match lay.err[k] {
                Some(col) => {
                    let e = parse_field(&rec[col], path, line, &format!("{}_err", c.name))?;
                    if e.is_some_and(|e| e < 0.0) {
                        return Err(parse_error(path, line, format!("{}_err is negative", c.name)));
                    }
                    Some(e)
                }
                None => None,
            };
            match (v, e) {
                (Some(v), Some(Some(e))) => {
                    x[k] = v;
                    sd[k] = Some(e);
                    noise[(k, k)] = e * e;
                }
                (Some(v), None) => {
                    x[k] = v;
                    noise[(k, k)] = NOISELESS_VARIANCE;
                }
                _ => noise[(k, k)] = MISSING_VARIANCE,
            }
        }
        for &(a, b, col) in &lay.corr {
            let rho = parse_field(&rec[col], path, line, &headers[col])?;
            if let (Some(rho), Some(ea), Some(eb)) = (rho, sd[a], sd[b]) {
                if !(-1.0..=1.0).contains(&rho) {
                    return Err(parse_error(path, line, format!("{} = {rho} outside [-1, 1]", &headers[col])));
                }
                let cov = rho * (ea * eb);
                noise[(a, b)] = cov;
                noise[(b, a)] = cov;
            }
        }
        if !linalg::is_psd(&noise) {
            return Err(parse_error(path, line, "noise covariance is not positive semidefinite"));
        }
        points.push(NoisyPoint {
            x,
            noise,
            projection: Projection::Identity,
        });
    }
    Dataset::new(schema.clone(), points)
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| XdError::io(path, e))?;
    read_csv(std::io::BufReader::new(file), schema, path)
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-5 || v.abs() >= 1e16) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Writes a dataset in the layout [`read_csv`] expects. Coordinates carrying the missing
/// placeholder (`x = 0`, variance `1e12`) are written as empty fields.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let schema = &data.schema;
    let d = schema.d_obs();
    let noisy: Vec<bool> = schema.columns.iter().map(|c| c.noise).collect();
    let missing = |p: &NoisyPoint, k: usize| p.x[k] == 0.0 && p.noise[(k, k)] == MISSING_VARIANCE;
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|a| ((a + 1)..d).map(move |b| (a, b)))
        .filter(|&(a, b)| noisy[a] && noisy[b])
        .filter(|&(a, b)| data.points.iter().any(|p| p.noise[(a, b)] != 0.0))
        .collect();

    let mut w = csv::Writer::from_writer(out);
    let mut header = Vec::new();
    for c in &schema.columns {
        header.push(c.name.clone());
        if c.noise {
            header.push(format!("{}_err", c.name));
        }
    }
    for &(a, b) in &pairs {
        header.push(format!("{}_{}_corr", schema.columns[a].name, schema.columns[b].name));
    }
    w.write_record(&header)?;

    for (i, p) in data.points.iter().enumerate() {
        if p.projection != Projection::Identity {
            return Err(XdError::InvalidConfig(format!(
                "point {i} has a non-identity projection, which CSV cannot represent"
            )));
        }
        let mut row = Vec::with_capacity(header.len());
        for k in 0..d {
            if missing(p, k) {
                row.push(String::new());
                if noisy[k] {
                    row.push(String::new());
                }
                continue;
            }
            row.push(fmt_f64(p.x[k]));
            if noisy[k] {
                row.push(fmt_f64(p.noise[(k, k)].sqrt()));
            } else if p.noise[(k, k)] != NOISELESS_VARIANCE {
                return Err(XdError::InvalidConfig(format!(
                    "point {i}: column {} is declared noiseless but has variance {}",
                    schema.columns[k].name,
                    p.noise[(k, k)]
                )));
            }
        }
        for &(a, b) in &pairs {
            if missing(p, a) || missing(p, b) {
                row.push(String::new());
            } else {
                let scale = p.noise[(a, a)].sqrt() * p.noise[(b, b)].sqrt();
                row.push(fmt_f64(p.noise[(a, b)] / scale));
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| XdError::io("<csv output>", e))?;
    Ok(())
}

/// Headerless CSV, one sample per row.
pub fn write_samples<W: Write>(samples: &[DVector<f64>], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for s in samples {
        w.write_record(s.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush().map_err(|e| XdError::io("<csv output>", e))?;
    Ok(())
}

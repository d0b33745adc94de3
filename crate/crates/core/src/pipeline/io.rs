//! CSV schemas. Readers report the 1-based line and column of the first
//! problem; writers go through a temporary file and a rename so a failed run
//! never leaves a partial file behind.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, Stage};
use crate::estimation::HeatingPoint;
use crate::spectral::{EsrSpectrum, MotionPsd};

pub const ESR_HEADER: [&str; 2] = ["frequency_hz", "counts"];
pub const PSD_HEADER: [&str; 2] = ["frequency_hz", "psd_m2_per_hz"];
pub const HEATING_HEADER: [&str; 4] = ["intensity_w_m2", "pressure_pa", "d_hz", "sigma_d_hz"];
pub const CALIBRATION_HEADER: [&str; 2] = ["t_set_k", "d_hz"];
pub const ENSEMBLE_HEADER: [&str; 6] = [
    "particle_id",
    "beta_heat",
    "r_hydro_m",
    "sigma_abs_m2",
    "beta_uncertainty",
    "sigma_abs_uncertainty",
];

/// One row of the ensemble table. The two uncertainties are optional
/// columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub particle_id: String,
    /// K·Pa·m²/W.
    pub beta_heat: f64,
    pub beta_uncertainty: Option<f64>,
    /// m.
    pub r_hydro: f64,
    /// m².
    pub sigma_abs: f64,
    pub sigma_abs_uncertainty: Option<f64>,
}

struct Row {
    line: usize,
    fields: Vec<String>,
}

impl Row {
    fn err(&self, column: usize, msg: impl std::fmt::Display) -> PipelineError {
        PipelineError::new(Stage::Ingest, msg).at(self.line, Some(column + 1))
    }

    fn number(&self, column: usize, name: &str) -> Result<f64> {
        let raw = &self.fields[column];
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(column, format!("`{name}` must be a finite number, got `{raw}`"))),
        }
    }

    fn optional_number(&self, column: usize, name: &str) -> Result<Option<f64>> {
        match self.fields.get(column) {
            None => Ok(None),
            Some(s) if s.is_empty() => Ok(None),
            Some(_) => self.number(column, name).map(Some),
        }
    }
}

/// Splits a CSV table into rows after checking the header against each of
/// `headers` (the first match wins). Lines starting with `#` are comments.
fn read_rows(text: &str, headers: &[&[&str]]) -> Result<(usize, Vec<Row>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header_line = text
        .lines()
        .position(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map_or(1, |i| i + 1);
    let got = reader
        .headers()
        .map_err(|e| PipelineError::new(Stage::Ingest, format!("unreadable header: {e}")).at(header_line, None))?
        .clone();
    let got: Vec<&str> = got.iter().collect();
    let width = headers
        .iter()
        .find(|h| h[..] == got[..])
        .map(|h| h.len())
        .ok_or_else(|| {
            let expected: Vec<String> = headers.iter().map(|h| h.join(",")).collect();
            PipelineError::new(
                Stage::Ingest,
                format!("malformed header `{}`, expected `{}`", got.join(","), expected.join("` or `")),
            )
            .at(header_line, Some(1))
        })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            PipelineError::new(Stage::Ingest, format!("malformed row: {e}")).at(line, None)
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(PipelineError::new(
                Stage::Ingest,
                format!("expected {width} fields, found {}", record.len()),
            )
            .at(line, Some(record.len().min(width) + 1)));
        }
        rows.push(Row {
            line,
            fields: record.iter().map(str::to_string).collect(),
        });
    }
    Ok((width, rows))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| PipelineError::new(Stage::Ingest, format!("cannot read file: {e}")).with_file(path))
}

fn check_increasing(rows: &[Row], freqs: &[f64]) -> Result<()> {
    for (i, w) in freqs.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(rows[i + 1].err(0, format!("frequencies must increase strictly ({} after {})", w[1], w[0])));
        }
    }
    Ok(())
}

/// ESR spectrum from CSV text. The dwell time per point comes from a
/// `# dwell_s=<value>` line.
pub fn parse_esr(text: &str) -> Result<EsrSpectrum> {
    let mut dwell = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(meta) = line.trim().strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("dwell_s") {
                let v = v.trim_start().strip_prefix('=').unwrap_or(v).trim();
                dwell = Some(v.parse::<f64>().ok().filter(|d| *d > 0.0 && d.is_finite()).ok_or_else(|| {
                    PipelineError::new(Stage::Ingest, format!("dwell_s must be a positive number, got `{v}`"))
                        .at(i + 1, None)
                })?);
            }
        }
    }
    let dwell = dwell.ok_or_else(|| PipelineError::new(Stage::Ingest, "missing `# dwell_s=<seconds>` line"))?;
    let (_, rows) = read_rows(text, &[&ESR_HEADER])?;
    let mut freqs = Vec::with_capacity(rows.len());
    let mut counts = Vec::with_capacity(rows.len());
    for row in &rows {
        freqs.push(row.number(0, "frequency_hz")?);
        let raw = &row.fields[1];
        let c: i128 = raw
            .parse()
            .map_err(|_| row.err(1, format!("`counts` must be an integer, got `{raw}`")))?;
        if c < 0 {
            return Err(row.err(1, format!("negative counts {c}")));
        }
        counts.push(u64::try_from(c).map_err(|_| row.err(1, "counts overflow"))?);
    }
    check_increasing(&rows, &freqs)?;
    EsrSpectrum::new(freqs, counts, dwell).map_err(|e| PipelineError::new(Stage::Ingest, e))
}

pub fn ingest_esr(path: &Path) -> Result<EsrSpectrum> {
    parse_esr(&read_file(path)?).map_err(|e| e.with_file(path))
}

pub fn parse_psd(text: &str) -> Result<MotionPsd> {
    let (_, rows) = read_rows(text, &[&PSD_HEADER])?;
    let mut freqs = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for row in &rows {
        freqs.push(row.number(0, "frequency_hz")?);
        let v = row.number(1, "psd_m2_per_hz")?;
        if v < 0.0 {
            return Err(row.err(1, format!("negative PSD value {v}")));
        }
        values.push(v);
    }
    check_increasing(&rows, &freqs)?;
    MotionPsd::new(freqs, values).map_err(|e| PipelineError::new(Stage::Ingest, e))
}

pub fn ingest_psd(path: &Path) -> Result<MotionPsd> {
    parse_psd(&read_file(path)?).map_err(|e| e.with_file(path))
}

/// Heating table; an empty or non-positive `sigma_d_hz` means unknown.
pub fn parse_heating_table(text: &str) -> Result<Vec<HeatingPoint>> {
    let (_, rows) = read_rows(text, &[&HEATING_HEADER])?;
    rows.iter()
        .map(|row| {
            let intensity = row.number(0, "intensity_w_m2")?;
            if intensity < 0.0 {
                return Err(row.err(0, "intensity must be non-negative"));
            }
            let pressure = row.number(1, "pressure_pa")?;
            if pressure <= 0.0 {
                return Err(row.err(1, "pressure must be positive"));
            }
            Ok(HeatingPoint {
                intensity,
                pressure,
                d_measured: row.number(2, "d_hz")?,
                sigma_d: row.optional_number(3, "sigma_d_hz")?.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn ingest_heating_table(path: &Path) -> Result<Vec<HeatingPoint>> {
    parse_heating_table(&read_file(path)?).map_err(|e| e.with_file(path))
}

/// Calibration pairs (set temperature K, measured D Hz).
pub fn parse_calibration_table(text: &str) -> Result<Vec<(f64, f64)>> {
    let (_, rows) = read_rows(text, &[&CALIBRATION_HEADER])?;
    rows.iter()
        .map(|row| {
            let t = row.number(0, "t_set_k")?;
            if t <= 0.0 {
                return Err(row.err(0, "temperature must be positive"));
            }
            Ok((t, row.number(1, "d_hz")?))
        })
        .collect()
}

pub fn ingest_calibration_table(path: &Path) -> Result<Vec<(f64, f64)>> {
    parse_calibration_table(&read_file(path)?).map_err(|e| e.with_file(path))
}

/// Ensemble table with either the four mandatory columns or all six.
pub fn parse_ensemble(text: &str) -> Result<Vec<EnsembleRecord>> {
    let (_, rows) = read_rows(text, &[&ENSEMBLE_HEADER[..4], &ENSEMBLE_HEADER])?;
    rows.iter()
        .map(|row| {
            if row.fields[0].is_empty() {
                return Err(row.err(0, "empty particle_id"));
            }
            let beta_heat = row.number(1, "beta_heat")?;
            let r_hydro = row.number(2, "r_hydro_m")?;
            if r_hydro <= 0.0 {
                return Err(row.err(2, "radius must be positive"));
            }
            let sigma_abs = row.number(3, "sigma_abs_m2")?;
            Ok(EnsembleRecord {
                particle_id: row.fields[0].clone(),
                beta_heat,
                beta_uncertainty: row.optional_number(4, "beta_uncertainty")?,
                r_hydro,
                sigma_abs,
                sigma_abs_uncertainty: row.optional_number(5, "sigma_abs_uncertainty")?,
            })
        })
        .collect()
}

pub fn ingest_ensemble(path: &Path) -> Result<Vec<EnsembleRecord>> {
    parse_ensemble(&read_file(path)?).map_err(|e| e.with_file(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Six-column ensemble table. Floats use the shortest representation that
/// parses back to the same value.
pub fn emit_ensemble(records: &[EnsembleRecord]) -> String {
    let mut out = ENSEMBLE_HEADER.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.particle_id,
            r.beta_heat,
            r.r_hydro,
            r.sigma_abs,
            opt(r.beta_uncertainty),
            opt(r.sigma_abs_uncertainty)
        );
    }
    out
}

pub fn emit_esr(spec: &EsrSpectrum) -> String {
    let mut out = format!("# dwell_s={}\n{}\n", spec.dwell_per_point(), ESR_HEADER.join(","));
    for (f, c) in spec.frequencies().iter().zip(spec.counts()) {
        let _ = writeln!(out, "{f},{c}");
    }
    out
}

pub fn emit_psd(psd: &MotionPsd) -> String {
    let mut out = PSD_HEADER.join(",");
    out.push('\n');
    for (f, v) in psd.frequencies().iter().zip(psd.psd_values()) {
        let _ = writeln!(out, "{f},{v}");
    }
    out
}

pub fn write_esr(path: &Path, spec: &EsrSpectrum) -> Result<()> {
    write_atomic(path, &emit_esr(spec))
}

pub fn write_psd(path: &Path, psd: &MotionPsd) -> Result<()> {
    write_atomic(path, &emit_psd(psd))
}

/// Writes to a temporary file in the target directory, then renames it into
/// place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| PipelineError::new(Stage::Output, e).with_file(path);
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| fail(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| fail(&e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_esr() {
        let s = parse_esr("# dwell_s=1.5\nfrequency_hz,counts\n2.86e9,100\n2.87e9,90\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dwell_per_point(), 1.5);
        assert_eq!(s.counts(), &[100, 90]);
    }

    #[test]
    fn decreasing_frequency_located() {
        let text = "# dwell_s=1\nfrequency_hz,counts\n2.87e9,10\n2.88e9,11\n2.86e9,12\n";
        let e = parse_esr(text).unwrap_err();
        assert_eq!((e.stage, e.line, e.column), (Stage::Ingest, Some(5), Some(1)));
    }

    #[test]
    fn negative_counts_located() {
        let e = parse_esr("# dwell_s=1\nfrequency_hz,counts\n2.87e9,-3\n").unwrap_err();
        assert_eq!((e.line, e.column), (Some(3), Some(2)));
        assert!(e.message.contains("negative"));
    }

    #[test]
    fn bad_header() {
        let e = parse_esr("# dwell_s=1\nfreq,counts\n2.87e9,3\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("header"));
    }

    #[test]
    fn missing_dwell() {
        assert!(parse_esr("frequency_hz,counts\n2.87e9,3\n").is_err());
    }

    #[test]
    fn ensemble_round_trip() {
        let records = vec![
            EnsembleRecord {
                particle_id: "a".into(),
                beta_heat: 2.480_665_5e-5,
                beta_uncertainty: Some(1.0 / 3.0 * 1e-7),
                r_hydro: 1.0e-7 + 1e-23,
                sigma_abs: 4e-18,
                sigma_abs_uncertainty: Some(0.1e-18),
            },
            EnsembleRecord {
                particle_id: "b".into(),
                beta_heat: 0.0,
                beta_uncertainty: None,
                r_hydro: 5e-8,
                sigma_abs: 0.0,
                sigma_abs_uncertainty: None,
            },
        ];
        assert_eq!(parse_ensemble(&emit_ensemble(&records)).unwrap(), records);
    }

    #[test]
    fn four_column_ensemble() {
        let r = parse_ensemble("particle_id,beta_heat,r_hydro_m,sigma_abs_m2\nx,1e-5,1e-7,1e-18\n").unwrap();
        assert_eq!(r[0].beta_uncertainty, None);
        let e = parse_ensemble("particle_id,beta_heat,r_hydro_m,sigma_abs_m2\nx,1e-5,1e-7\n").unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn heating_and_calibration_tables() {
        let pts = parse_heating_table("intensity_w_m2,pressure_pa,d_hz,sigma_d_hz\n1e10,2000,2.86e9,\n").unwrap();
        assert_eq!(pts[0].sigma_d, 0.0);
        let e = parse_heating_table("intensity_w_m2,pressure_pa,d_hz,sigma_d_hz\n1e10,0,2.86e9,1\n").unwrap_err();
        assert_eq!(e.column, Some(2));
        let cal = parse_calibration_table("t_set_k,d_hz\n294,2.8705e9\n").unwrap();
        assert_eq!(cal, vec![(294.0, 2.8705e9)]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }
}

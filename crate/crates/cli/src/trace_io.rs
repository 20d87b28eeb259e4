//! Trace CSV files: header `t_s,s_i,s_s,c`, one bin per row, decimal
//! seconds and integer counts, LF line endings, UTF-8.

use std::io::{Read, Write};
use std::path::Path;

use tlens::counting::{TimeTrace, TIMESTAMP_TOLERANCE};

use crate::error::{CliError, CliResult};

pub const HEADER: [&str; 4] = ["t_s", "s_i", "s_s", "c"];

/// Writes `trace` as CSV. Timestamps use the shortest representation that
/// parses back to the same `f64`.
pub fn write_trace<W: Write>(out: W, trace: &TimeTrace) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(HEADER)?;
    for i in 0..trace.len() {
        w.write_record([
            trace.t[i].to_string(),
            trace.s_i[i].to_string(),
            trace.s_s[i].to_string(),
            trace.c[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(path: &Path, trace: &TimeTrace) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_trace(std::io::BufWriter::new(file), trace).map_err(|e| CliError::io(path, e))
}

fn parse_count(field: &str, column: &str, line: u64) -> CliResult<u64> {
    field.trim().parse::<u64>().map_err(|_| {
        CliError::Validation(format!(
            "line {line}: column {column}: expected a non-negative integer count, got '{field}'"
        ))
    })
}

/// Reads a trace. The bin width is the spacing of the first two rows, or
/// `single_bin_width` for a one-row file.
pub fn read_trace<R: Read>(input: R, single_bin_width: f64) -> CliResult<TimeTrace> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("line 1: {e}")))?
        .clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(CliError::Validation(format!(
            "line 1: expected header '{}', got '{}'",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut trace = TimeTrace {
        t: Vec::new(),
        s_i: Vec::new(),
        s_s: Vec::new(),
        c: Vec::new(),
        bin_width: single_bin_width,
    };
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Validation(format!("line {line}: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let t: f64 = record[0].trim().parse().map_err(|_| {
            CliError::Validation(format!("line {line}: column t_s: expected seconds, got '{}'", &record[0]))
        })?;
        if !t.is_finite() {
            return Err(CliError::Validation(format!("line {line}: timestamp must be finite")));
        }
        let n = trace.t.len();
        if n == 1 {
            trace.bin_width = t - trace.t[0];
            if !(trace.bin_width > 0.0) {
                return Err(CliError::Validation(format!(
                    "line {line}: timestamps must increase (got {t} after {})",
                    trace.t[0]
                )));
            }
        } else if n > 1 {
            let expected = trace.t[0] + n as f64 * trace.bin_width;
            if (t - expected).abs() > TIMESTAMP_TOLERANCE {
                return Err(CliError::Validation(format!(
                    "line {line}: non-uniform timestamp {t}, expected {expected}"
                )));
            }
        }
        trace.t.push(t);
        trace.s_i.push(parse_count(&record[1], "s_i", line)?);
        trace.s_s.push(parse_count(&record[2], "s_s", line)?);
        trace.c.push(parse_count(&record[3], "c", line)?);
    }
    if trace.is_empty() {
        return Err(CliError::Validation("trace has no rows".into()));
    }
    trace.validate()?;
    Ok(trace)
}

pub fn load_trace(path: &Path, single_bin_width: f64) -> CliResult<TimeTrace> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_trace(std::io::BufReader::new(file), single_bin_width).map_err(|e| match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

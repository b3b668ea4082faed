//! Line-oriented evaluation report.
//!
//! ```text
//! # digest <hex> protocol <name> train <profile> test <profile>
//! # warning <text>
//! <video_id> <gt> <pred> <parse_failures>
//! OBO=<v> MAE=<v> N=<n> N_mae=<n'> parse_fail_rate=<v>
//! ```
//! An undefined MAE is written as `NA`.

use std::fmt::Write as _;

use super::pipeline::{EvalResult, VideoResult};
use crate::error::{Error, Result};

/// Report header fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportHeader {
    pub digest: String,
    pub protocol: String,
    pub train: String,
    pub test: String,
}

pub fn format_report(header: &ReportHeader, r: &EvalResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# digest {} protocol {} train {} test {}",
        header.digest, header.protocol, header.train, header.test
    );
    for w in &r.warnings {
        let _ = writeln!(s, "# warning {w}");
    }
    for row in &r.rows {
        let _ = writeln!(s, "{} {} {} {}", row.video_id, row.gt, row.pred, row.parse_failures);
    }
    let _ = writeln!(s, "{}", summary_line(r));
    s
}

pub fn summary_line(r: &EvalResult) -> String {
    let mae = r.mae.map_or_else(|| "NA".to_string(), |v| v.to_string());
    format!(
        "OBO={} MAE={} N={} N_mae={} parse_fail_rate={}",
        r.obo, mae, r.n, r.n_mae, r.parse_fail_rate
    )
}

pub fn parse_report(text: &str) -> Result<(ReportHeader, EvalResult)> {
    let bad = |line: usize, m: &str| Error::Format {
        offset: line as u64,
        message: format!("report line {}: {m}", line + 1),
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| bad(0, "empty report"))?;
    let f: Vec<&str> = first.split_whitespace().collect();
    if f.len() != 9 || f[0] != "#" || f[1] != "digest" || f[3] != "protocol" || f[5] != "train" || f[7] != "test" {
        return Err(bad(0, "malformed header"));
    }
    let header = ReportHeader {
        digest: f[2].into(),
        protocol: f[4].into(),
        train: f[6].into(),
        test: f[8].into(),
    };
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if let Some(w) = line.strip_prefix("# warning ") {
            warnings.push(w.to_string());
            continue;
        }
        if line.starts_with("OBO=") {
            let mut kv = std::collections::HashMap::new();
            for part in line.split_whitespace() {
                let (k, v) = part.split_once('=').ok_or_else(|| bad(i, "malformed summary"))?;
                kv.insert(k, v);
            }
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(i, &format!("summary lacks {k}")));
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(i, &format!("bad {k}"))) };
            let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(i, &format!("bad {k}"))) };
            let mae = match get("MAE")? {
                "NA" => None,
                _ => Some(num("MAE")?),
            };
            let result = EvalResult {
                rows,
                obo: num("OBO")?,
                mae,
                n: int("N")?,
                n_mae: int("N_mae")?,
                parse_fail_rate: num("parse_fail_rate")?,
                warnings,
            };
            if result.n != result.rows.len() {
                return Err(bad(i, "N disagrees with the row count"));
            }
            return Ok((header, result));
        }
        let v: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| s.parse::<u64>().map_err(|_| bad(i, "non-numeric field"));
        if v.len() != 4 {
            return Err(bad(i, "expected `video_id gt pred parse_failures`"));
        }
        rows.push(VideoResult {
            video_id: parse(v[0])? as usize,
            gt: parse(v[1])?,
            pred: parse(v[2])?,
            parse_failures: parse(v[3])? as usize,
        });
    }
    Err(bad(text.lines().count(), "missing summary line"))
}

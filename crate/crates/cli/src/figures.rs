//! Tidy plot data (`figure,group,method,x,y,size`) from report JSON.
//!
//! Disparity reports give one `rates` row per race. Diagnostics reports give
//! one `consistency` row per occupied positive-context bin and one
//! `composition` row per race (true vs. proxy composition among positives).

use std::path::Path;

use fairproxy::tables::format_significant;
use serde_json::Value;

use crate::{CliError, CliResult};

pub const HEADER: [&str; 6] = ["figure", "group", "method", "x", "y", "size"];

#[derive(Debug, Clone, PartialEq)]
pub struct FigureRow {
    pub figure: &'static str,
    pub group: String,
    pub method: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub size: Option<f64>,
}

fn malformed(what: &str) -> CliError {
    CliError::Usage(format!("malformed report: {what}"))
}

fn field<'a>(v: &'a Value, key: &str) -> CliResult<&'a Value> {
    v.get(key).ok_or_else(|| malformed(&format!("missing {key:?}")))
}

fn text(v: &Value, key: &str) -> CliResult<String> {
    field(v, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| malformed(&format!("{key:?} is not a string")))
}

fn array<'a>(v: &'a Value, key: &str) -> CliResult<&'a Vec<Value>> {
    field(v, key)?
        .as_array()
        .ok_or_else(|| malformed(&format!("{key:?} is not an array")))
}

pub fn rows_from_report(report: &Value) -> CliResult<Vec<FigureRow>> {
    match text(report, "kind")?.as_str() {
        "disparity" => disparity_rows(report),
        "diagnostics" => diagnostics_rows(report),
        other => Err(malformed(&format!("unknown report kind {other:?}"))),
    }
}

fn disparity_rows(report: &Value) -> CliResult<Vec<FigureRow>> {
    let mut method = text(report, "method")?;
    if let Some(proxy) = report.get("proxy").and_then(Value::as_str) {
        method = format!("{method}:{proxy}");
    }
    let per_race = field(report, "per_race")?;
    array(report, "races")?
        .iter()
        .enumerate()
        .map(|(i, race)| {
            let race = race.as_str().ok_or_else(|| malformed("race label"))?;
            let entry = field(per_race, race)?;
            Ok(FigureRow {
                figure: "rates",
                group: race.to_string(),
                method: method.clone(),
                x: Some(i as f64),
                y: entry.get("mu").and_then(Value::as_f64),
                size: entry.get("n_group").and_then(Value::as_f64),
            })
        })
        .collect()
}

fn diagnostics_rows(report: &Value) -> CliResult<Vec<FigureRow>> {
    let proxy = text(report, "proxy")?;
    let mut rows = Vec::new();
    for profile in array(report, "profiles")? {
        if profile.get("context").and_then(Value::as_u64) != Some(1) {
            continue;
        }
        let race = text(profile, "race")?;
        for bin in array(profile, "bins")? {
            rows.push(FigureRow {
                figure: "consistency",
                group: race.clone(),
                method: proxy.clone(),
                x: bin.get("bin_center").and_then(Value::as_f64),
                y: bin.get("violation").and_then(Value::as_f64),
                size: bin.get("records").and_then(Value::as_f64),
            });
        }
    }
    let consistency = field(report, "consistency")?;
    let size = report.get("n_positive").and_then(Value::as_f64);
    for entry in array(consistency, "contexts")? {
        if entry.get("context").and_then(Value::as_u64) != Some(1) {
            continue;
        }
        rows.push(FigureRow {
            figure: "composition",
            group: text(entry, "race")?,
            method: proxy.clone(),
            x: entry.get("phi").and_then(Value::as_f64),
            y: entry.get("omega_bar").and_then(Value::as_f64),
            size,
        });
    }
    Ok(rows)
}

fn number(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format_significant(v, 12),
        _ => String::new(),
    }
}

pub fn write_rows(path: &Path, rows: &[FigureRow]) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(fairproxy::Error::from)?;
    let mut write = |record: &[&str]| writer.write_record(record).map_err(fairproxy::Error::from);
    write(&HEADER)?;
    for row in rows {
        let (x, y, size) = (number(row.x), number(row.y), number(row.size));
        write(&[row.figure, &row.group, &row.method, &x, &y, &size])?;
    }
    writer.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn disparity_report_gives_one_row_per_race() {
        let report = json!({
            "kind": "disparity", "method": "bayes", "proxy": "cbisg",
            "races": ["a", "b"],
            "per_race": {"a": {"mu": 0.25, "n_group": 10}, "b": {"mu": null, "n_group": 0}}
        });
        let rows = rows_from_report(&report).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, "bayes:cbisg");
        assert_eq!(rows[0].y, Some(0.25));
        assert_eq!(rows[1].y, None);
    }

    #[test]
    fn profile_bins_become_rows() {
        let bins: Vec<Value> = (0..8)
            .map(|b| json!({"bin_center": (b as f64 + 0.5) / 8.0, "violation": 0.01, "records": 5}))
            .collect();
        let report = json!({
            "kind": "diagnostics", "proxy": "bisg", "n_positive": 40,
            "profiles": [{"race": "a", "context": 1, "bins": bins}, {"race": "a", "context": 0, "bins": []}],
            "consistency": {"contexts": [{"race": "a", "context": 1, "phi": 0.4, "omega_bar": 0.35}]}
        });
        let rows = rows_from_report(&report).unwrap();
        assert_eq!(rows.iter().filter(|r| r.figure == "consistency").count(), 8);
        let comp: Vec<_> = rows.iter().filter(|r| r.figure == "composition").collect();
        assert_eq!(comp.len(), 1);
        assert_eq!((comp[0].x, comp[0].y, comp[0].size), (Some(0.4), Some(0.35), Some(40.0)));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(rows_from_report(&json!({"kind": "other"})).is_err());
        assert!(rows_from_report(&json!({})).is_err());
    }
}

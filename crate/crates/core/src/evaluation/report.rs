use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fairness_std, mean, ser};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const REPORT_SCHEMA: &str = "fairkd-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportMetadata {
    pub model_id: String,
    pub data_id: String,
    pub distilled: Option<bool>,
    pub loss_kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub groups: Vec<GroupAccuracy>,
    pub average: f64,
    pub std: f64,
    /// `None` when some group reaches 100% and the ratio is undefined.
    pub ser: Option<f64>,
    pub ser_degenerate: bool,
    pub metadata: ReportMetadata,
    /// Config digest, tool version and similar run provenance.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

pub fn build_report(groups: Vec<GroupAccuracy>, metadata: ReportMetadata) -> Result<EvalReport> {
    let acc: Vec<f64> = groups.iter().map(|g| g.accuracy).collect();
    if acc.iter().any(|a| !(0.0..=100.0).contains(a)) {
        return Err(Error::InvalidConfig(format!(
            "group accuracies must lie in [0, 100], got {acc:?}"
        )));
    }
    let std = fairness_std(&acc)?;
    let (ser, ser_degenerate) = match ser(&acc) {
        Ok(v) => (Some(v), false),
        Err(Error::DegenerateDenominator) => (None, true),
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        average: mean(&acc)?,
        groups,
        std,
        ser,
        ser_degenerate,
        metadata,
        provenance: BTreeMap::new(),
    })
}

impl EvalReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.accuracy).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::FormatVersionMismatch(format!(
                "report schema `{}`, expected `{REPORT_SCHEMA}`",
                report.schema
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?, path)
    }
}

/// Decimal rounding with ties away from zero.
///
/// The value is first fixed at 9 decimals, so binary noise such as
/// `96.2349999999` rounds as the decimal `96.235` it stands for.
pub fn round_half_away(x: f64, decimals: usize) -> String {
    const FIXED: usize = 9;
    assert!(decimals <= FIXED, "at most {FIXED} decimals");
    if !x.is_finite() {
        return x.to_string();
    }
    let fixed = format!("{:.FIXED$}", x.abs());
    let (int, frac) = fixed.split_once('.').expect("fixed-point output");
    let scaled: u128 = format!("{int}{frac}").parse().expect("digits");
    let factor = 10u128.pow((FIXED - decimals) as u32);
    let mut q = scaled / factor;
    if (scaled % factor) * 2 >= factor {
        q += 1;
    }
    let unit = 10u128.pow(decimals as u32);
    let sign = if x < 0.0 && q != 0 { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{q}")
    } else {
        format!("{sign}{}.{:0decimals$}", q / unit, q % unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(Error::InvalidConfig(format!(
                "unknown table format `{other}`"
            ))),
        }
    }
}

const DEGENERATE: &str = "degenerate";

fn or_dash(s: &str) -> String {
    if s.is_empty() {
        "-".to_string()
    } else {
        s.to_string()
    }
}

fn row(report: &EvalReport) -> Vec<String> {
    let m = &report.metadata;
    let mut cells = vec![
        or_dash(&m.model_id),
        match m.distilled {
            Some(true) => "Yes".into(),
            Some(false) => "No".into(),
            None => "-".into(),
        },
        or_dash(&m.data_id),
        or_dash(&m.loss_kind),
    ];
    cells.extend(report.groups.iter().map(|g| round_half_away(g.accuracy, 2)));
    cells.push(round_half_away(report.average, 2));
    cells.push(round_half_away(report.std, 2));
    cells.push(
        report
            .ser
            .map_or_else(|| DEGENERATE.to_string(), |s| round_half_away(s, 2)),
    );
    cells
}

/// Per-group accuracies followed by Average, STD and SER, one row per
/// report. All reports must share the group names of the first.
pub fn render_table(reports: &[EvalReport], format: TableFormat) -> Result<String> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    let names: Vec<&str> = first.groups.iter().map(|g| g.group.as_str()).collect();
    for r in reports {
        let other: Vec<&str> = r.groups.iter().map(|g| g.group.as_str()).collect();
        if other != names {
            return Err(Error::ShapeMismatch(format!(
                "report groups {other:?} differ from {names:?}"
            )));
        }
    }
    let mut header: Vec<String> = ["Model", "Distillation", "Data", "Loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(names.iter().map(|s| s.to_string()));
    header.extend(["Average", "STD", "SER"].iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = reports.iter().map(row).collect();

    match format {
        TableFormat::Markdown => {
            let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
            let mut out = line(&header);
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for r in &rows {
                out.push_str(&line(r));
            }
            Ok(out)
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let to_err = |e: csv::Error| Error::InvalidConfig(format!("csv output: {e}"));
            w.write_record(&header).map_err(to_err)?;
            for r in &rows {
                w.write_record(r).map_err(to_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn groups(acc: &[f64]) -> Vec<GroupAccuracy> {
        acc.iter()
            .enumerate()
            .map(|(i, &a)| GroupAccuracy {
                group: format!("g{i}"),
                accuracy: a,
            })
            .collect()
    }

    #[test]
    fn report_examples() {
        let r = build_report(
            groups(&[97.40, 96.07, 95.52, 95.95]),
            ReportMetadata::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(r.average, 96.24, epsilon = 0.005);
        let r = build_report(
            groups(&[97.12, 95.78, 94.93, 95.36]),
            ReportMetadata::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(r.average, 95.80, epsilon = 0.005);
        assert_abs_diff_eq!(r.std, 0.95, epsilon = 0.005);
        assert_abs_diff_eq!(r.ser.unwrap(), 1.76, epsilon = 0.005);

        let d = build_report(groups(&[90.0, 100.0]), ReportMetadata::default()).unwrap();
        assert_abs_diff_eq!(d.std, 7.0711, epsilon = 5e-5);
        assert!(d.ser_degenerate && d.ser.is_none());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(96.235, 2), "96.24");
        assert_eq!(round_half_away(-96.235, 2), "-96.24");
        assert_eq!(round_half_away(0.125, 2), "0.13");
        assert_eq!(round_half_away(1.0049, 2), "1.00");
        assert_eq!(round_half_away(-0.001, 2), "0.00");
        assert_eq!(round_half_away(2.5, 0), "3");
        assert_eq!(round_half_away(87.8, 2), "87.80");
    }

    #[test]
    fn json_round_trip() {
        let mut r = build_report(groups(&[91.0, 92.5]), ReportMetadata::default()).unwrap();
        r.provenance.insert("tool_version".into(), "0.1.0".into());
        let back = EvalReport::from_json(&r.to_json(), Path::new("r")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn tables_render_and_csv_round_trips() {
        let meta = ReportMetadata {
            model_id: "student".into(),
            data_id: String::new(),
            distilled: Some(true),
            loss_kind: "adaface".into(),
        };
        let r = build_report(groups(&[95.63, 93.20, 92.25, 91.55]), meta).unwrap();
        let md = render_table(std::slice::from_ref(&r), TableFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains(
            "| student | Yes | - | adaface | 95.63 | 93.20 | 92.25 | 91.55 | 93.16 | 1.78 | 1.93 |"
        ));

        let csv_text = render_table(&[r], TableFormat::Csv).unwrap();
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        let header = reader.headers().unwrap().clone();
        assert_eq!(header.len(), 11);
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(&rows[0][2], "-");
        assert_eq!(&rows[0][10], "1.93");
        assert!(render_table(&[], TableFormat::Csv).is_err());
    }
}

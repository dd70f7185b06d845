//! Published group accuracies with their printed Average, STD and SER, used
//! to check the metric definitions against reference values.

use std::path::{Path, PathBuf};

use super::{fairness_std, mean, round_half_away, ser};
use crate::error::{Error, Result};
use crate::io::read_to_string;

pub const FIXTURE_MAGIC: &str = "#fairkd-fixture v1";
const COLUMNS: &str = "id\taccuracies\taverage\tstd\tser";

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRow {
    pub id: String,
    pub line: usize,
    pub accuracies: Vec<f64>,
    /// Printed average, STD and SER.
    pub printed: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublishedFixture {
    pub path: PathBuf,
    pub groups: Vec<String>,
    pub rows: Vec<FixtureRow>,
}

/// Outcome for one row. Columns are ordered average, STD, SER.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCheck {
    pub id: String,
    pub computed: [String; 3],
    pub printed: [String; 3],
    /// Full-precision computed value minus printed value.
    pub deltas: [f64; 3],
    pub pass: bool,
}

impl PublishedFixture {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::FixtureFormat {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(FIXTURE_MAGIC) {
            return Err(err(1, format!("expected `{FIXTURE_MAGIC}`")));
        }
        let mut groups: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        let mut seen_columns = false;
        for (i, line) in lines {
            let lineno = i + 1;
            if let Some(g) = line.strip_prefix("#groups ") {
                groups = Some(g.split(',').map(str::to_string).collect());
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == COLUMNS {
                seen_columns = true;
                continue;
            }
            if !seen_columns {
                return Err(err(lineno, "row before column header".into()));
            }
            let g = groups
                .as_ref()
                .ok_or_else(|| err(lineno, "no #groups line".into()))?;
            let f: Vec<&str> = line.split('\t').collect();
            let [id, acc, avg, std, s] = f[..] else {
                return Err(err(lineno, format!("expected 5 fields, got {}", f.len())));
            };
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(lineno, format!("bad number `{s}`")))
            };
            let accuracies = acc.split(',').map(num).collect::<Result<Vec<_>>>()?;
            if accuracies.len() != g.len() {
                return Err(err(
                    lineno,
                    format!("{} accuracies for {} groups", accuracies.len(), g.len()),
                ));
            }
            rows.push(FixtureRow {
                id: id.to_string(),
                line: lineno,
                accuracies,
                printed: [num(avg)?, num(std)?, num(s)?],
            });
        }
        if rows.is_empty() {
            return Err(err(1, "fixture has no rows".into()));
        }
        Ok(PublishedFixture {
            path: path.to_path_buf(),
            groups: groups.unwrap_or_default(),
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }
}

impl FixtureRow {
    pub fn check(&self) -> Result<FixtureCheck> {
        let avg = mean(&self.accuracies)?;
        let std = fairness_std(&self.accuracies)?;
        let (ser_value, ser_text) = match ser(&self.accuracies) {
            Ok(v) => (v, round_half_away(v, 2)),
            Err(Error::DegenerateDenominator) => (f64::INFINITY, "degenerate".to_string()),
            Err(e) => return Err(e),
        };
        let computed = [round_half_away(avg, 2), round_half_away(std, 2), ser_text];
        let printed = self.printed.map(|p| round_half_away(p, 2));
        let values = [avg, std, ser_value];
        let deltas = std::array::from_fn(|i| values[i] - self.printed[i]);
        Ok(FixtureCheck {
            id: self.id.clone(),
            pass: computed == printed,
            computed,
            printed,
            deltas,
        })
    }
}

pub fn verify_fixture(fixture: &PublishedFixture) -> Result<Vec<FixtureCheck>> {
    fixture.rows.iter().map(FixtureRow::check).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str =
        "#fairkd-fixture v1\n#groups a,b,c,d\n# comment\nid\taccuracies\taverage\tstd\tser\n\
        r100\t97.40,96.07,95.52,95.95\t96.24\t0.81\t1.72\n\
        kd\t93.65,92.28,90.88,89.87\t91.67\t1.65\t1.60\n";

    #[test]
    fn rows_pass_and_perturbation_fails() {
        let fx = PublishedFixture::parse(TEXT, Path::new("f")).unwrap();
        assert_eq!(fx.groups.len(), 4);
        let checks = verify_fixture(&fx).unwrap();
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");

        let mut bad = fx.rows[0].clone();
        bad.accuracies[0] += 0.5;
        let c = bad.check().unwrap();
        assert!(!c.pass);
        assert!(c.deltas[0] > 0.1);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let text = TEXT.replace("96.24", "x");
        match PublishedFixture::parse(&text, Path::new("f")) {
            Err(Error::FixtureFormat { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let text = TEXT.replace("97.40,", "");
        assert!(matches!(
            PublishedFixture::parse(&text, Path::new("f")),
            Err(Error::FixtureFormat { .. })
        ));
    }
}

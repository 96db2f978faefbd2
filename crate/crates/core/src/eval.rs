//! Weighted option-selection accuracy and the four-column evaluation report.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Modality, OptionLabel, PuzzleManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub puzzle_id: u64,
    pub instance_id: u64,
    pub predicted: OptionLabel,
    pub answer: OptionLabel,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.answer
    }
}

/// Checks manifest membership and `(puzzle_id, instance_id)` uniqueness.
pub fn validate_records(records: &[EvalRecord], manifest: &PuzzleManifest) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if manifest.get(r.puzzle_id).is_none() {
            return Err(Error::invalid(
                "predictions",
                format!("puzzle_id {} is not in the manifest", r.puzzle_id),
            ));
        }
        if !seen.insert((r.puzzle_id, r.instance_id)) {
            return Err(Error::invalid(
                "predictions",
                format!(
                    "duplicate record (puzzle_id {}, instance_id {})",
                    r.puzzle_id, r.instance_id
                ),
            ));
        }
    }
    Ok(())
}

pub fn parse_predictions(text: &str, ctx: &str, manifest: &PuzzleManifest) -> Result<Vec<EvalRecord>> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<EvalRecord>(line).map_err(|e| Error::json(format!("{ctx}:{}", i + 1), e))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_records(&records, manifest)?;
    Ok(records)
}

/// Reads a JSON-lines prediction file and validates it against `manifest`.
pub fn load_predictions(path: &Path, manifest: &PuzzleManifest) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, &path.display().to_string(), manifest)
}

/// Records in the fixed summation order (puzzle_id, instance_id).
fn sorted<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Vec<&'a EvalRecord> {
    let mut v: Vec<_> = records.into_iter().collect();
    v.sort_by_key(|r| (r.puzzle_id, r.instance_id));
    v
}

fn weighted<'a>(records: impl IntoIterator<Item = &'a EvalRecord>, manifest: &PuzzleManifest) -> Result<f64> {
    let records = sorted(records);
    if records.is_empty() {
        return Err(Error::Empty("record set"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for r in records {
        let w = manifest.weight(r.puzzle_id).ok_or_else(|| {
            Error::invalid(
                "predictions",
                format!("puzzle_id {} is not in the manifest", r.puzzle_id),
            )
        })?;
        if r.correct() {
            num += w;
        }
        den += w;
    }
    Ok(100.0 * num / den)
}

/// `100 * sum(w_i * acc_i) / sum(w_i)` over instances, where `w_i` is the
/// weight of the instance's puzzle.
pub fn wosa(records: &[EvalRecord], manifest: &PuzzleManifest) -> Result<f64> {
    weighted(records, manifest)
}

/// Unweighted percentage of correct records.
pub fn option_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("record set"));
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub text: usize,
    pub vl: usize,
    pub total: usize,
}

/// `None` marks a split with no records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WosaReport {
    pub acc: f64,
    pub text_wosa: Option<f64>,
    pub vl_wosa: Option<f64>,
    pub tot_wosa: f64,
    pub counts: SplitCounts,
}

pub fn split_report(records: &[EvalRecord], manifest: &PuzzleManifest) -> Result<WosaReport> {
    if records.is_empty() {
        return Err(Error::Empty("record set"));
    }
    let modality = |r: &EvalRecord| manifest.get(r.puzzle_id).map(|e| e.modality);
    let text: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| modality(r) == Some(Modality::Text))
        .collect();
    let vl: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| modality(r) == Some(Modality::Vl))
        .collect();
    let split = |part: &[&EvalRecord]| -> Result<Option<f64>> {
        if part.is_empty() {
            Ok(None)
        } else {
            weighted(part.iter().copied(), manifest).map(Some)
        }
    };
    Ok(WosaReport {
        acc: option_accuracy(records)?,
        text_wosa: split(&text)?,
        vl_wosa: split(&vl)?,
        tot_wosa: wosa(records, manifest)?,
        counts: SplitCounts {
            text: text.len(),
            vl: vl.len(),
            total: records.len(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            other => Err(Error::invalid(
                "report format",
                format!("`{other}` (use table|json)"),
            )),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Table rows use two decimals and `-` for an absent split.
pub fn render_report(report: &WosaReport, format: ReportFormat, method: &str) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let header = ["Method", "acc", "text_wosa", "vl_wosa", "tot_wosa"];
            let row = [
                method.to_string(),
                cell(Some(report.acc)),
                cell(report.text_wosa),
                cell(report.vl_wosa),
                cell(Some(report.tot_wosa)),
            ];
            let widths: Vec<usize> = header
                .iter()
                .zip(&row)
                .map(|(h, r)| h.len().max(r.len()))
                .collect();
            let mut out = String::new();
            for line in [header.map(String::from), row] {
                let cells: Vec<String> = line
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| {
                        if i == 0 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    })
                    .collect();
                writeln!(out, "{}", cells.join("  ")).unwrap();
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PuzzleEntry;

    fn manifest(entries: &[(u64, f64, Modality)]) -> PuzzleManifest {
        PuzzleManifest::from_entries(
            entries
                .iter()
                .map(|&(id, weight, modality)| (id, PuzzleEntry { weight, modality })),
        )
        .unwrap()
    }

    fn rec(puzzle_id: u64, instance_id: u64, correct: bool) -> EvalRecord {
        EvalRecord {
            puzzle_id,
            instance_id,
            predicted: OptionLabel::A,
            answer: if correct { OptionLabel::A } else { OptionLabel::B },
        }
    }

    #[test]
    fn weighted_accuracy_fixtures() {
        let m = manifest(&[
            (1, 1.0, Modality::Text),
            (2, 2.0, Modality::Vl),
            (3, 3.0, Modality::Vl),
        ]);
        let all = [rec(1, 0, true), rec(2, 0, true), rec(3, 0, true)];
        assert_eq!(wosa(&all, &m).unwrap(), 100.0);
        let mixed = [rec(1, 0, true), rec(2, 0, false), rec(3, 0, true)];
        assert!((wosa(&mixed, &m).unwrap() - 400.0 / 6.0).abs() < 1e-9);
        let none = [rec(1, 0, false), rec(2, 0, false)];
        assert_eq!(wosa(&none, &m).unwrap(), 0.0);
        assert!(wosa(&[], &m).is_err());
    }

    #[test]
    fn accuracy() {
        let r = [
            rec(1, 0, true),
            rec(1, 1, false),
            rec(1, 2, false),
            rec(1, 3, false),
        ];
        assert_eq!(option_accuracy(&r).unwrap(), 25.0);
        assert_eq!(option_accuracy(&r[..1]).unwrap(), 100.0);
        assert!(option_accuracy(&[]).is_err());
    }

    #[test]
    fn split_fixtures() {
        let m = manifest(&[(1, 1.0, Modality::Text), (2, 1.0, Modality::Vl)]);
        let r = split_report(&[rec(1, 0, true), rec(2, 0, false)], &m).unwrap();
        assert_eq!(r.text_wosa, Some(100.0));
        assert_eq!(r.vl_wosa, Some(0.0));
        assert_eq!(r.tot_wosa, 50.0);

        let only_vl = manifest(&[(5, 2.0, Modality::Vl), (6, 1.0, Modality::Vl)]);
        let r = split_report(&[rec(5, 0, true), rec(6, 0, false)], &only_vl).unwrap();
        assert_eq!(r.text_wosa, None);
        assert_eq!(r.vl_wosa, Some(r.tot_wosa));
        assert_eq!(r.counts.text, 0);
    }

    #[test]
    fn table_has_one_row_per_method() {
        let r = WosaReport {
            acc: 24.30,
            text_wosa: Some(24.04),
            vl_wosa: Some(21.77),
            tot_wosa: 22.71,
            counts: SplitCounts {
                text: 1,
                vl: 1,
                total: 2,
            },
        };
        let t = render_report(&r, ReportFormat::Table, "our");
        let row = t.lines().nth(1).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells, ["our", "24.30", "24.04", "21.77", "22.71"]);

        let absent = WosaReport { text_wosa: None, ..r };
        let t = render_report(&absent, ReportFormat::Table, "x");
        assert_eq!(t.lines().nth(1).unwrap().split_whitespace().nth(2), Some("-"));

        let json = render_report(&absent, ReportFormat::Json, "x");
        let back: WosaReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, absent);
    }

    #[test]
    fn prediction_validation() {
        let m = manifest(&[(1, 1.0, Modality::Text)]);
        let ok = "{\"puzzle_id\":1,\"instance_id\":0,\"predicted\":\"A\",\"answer\":\"A\"}\n\
                  {\"puzzle_id\":1,\"instance_id\":1,\"predicted\":\"B\",\"answer\":\"A\"}\n\
                  {\"puzzle_id\":1,\"instance_id\":2,\"predicted\":\"E\",\"answer\":\"D\"}\n";
        assert_eq!(parse_predictions(ok, "t", &m).unwrap().len(), 3);

        let bad_letter = r#"{"puzzle_id":1,"instance_id":0,"predicted":"F","answer":"A"}"#;
        assert!(parse_predictions(bad_letter, "t", &m).is_err());

        let unknown = r#"{"puzzle_id":9,"instance_id":0,"predicted":"A","answer":"A"}"#;
        let err = parse_predictions(unknown, "t", &m).unwrap_err();
        assert!(err.to_string().contains("puzzle_id 9"), "{err}");

        let dup = "{\"puzzle_id\":1,\"instance_id\":0,\"predicted\":\"A\",\"answer\":\"A\"}\n\
                   {\"puzzle_id\":1,\"instance_id\":0,\"predicted\":\"B\",\"answer\":\"A\"}";
        assert!(parse_predictions(dup, "t", &m).is_err());
    }
}

//! Page-view click logs: record types, JSON-lines parsing and click semantics.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A list of dense feature channels. Every image (query or result) carries
/// the same channel arity and per-channel dimensions within one record.
pub type Features = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum PvlogError {
    #[error("line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub item_id: String,
    #[serde(rename = "leaf")]
    pub leaf_category: String,
    #[serde(rename = "top")]
    pub top_category: String,
    #[serde(rename = "pos")]
    pub position: u32,
    pub clicked: bool,
    #[serde(rename = "click_ts")]
    pub click_time: Option<i64>,
    #[serde(rename = "features")]
    pub item_features: Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvRecord {
    pub pv_id: String,
    pub user_id: String,
    pub query_id: String,
    pub query_features: Features,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(rename = "pred_cat")]
    pub predicted_top_category: String,
    #[serde(rename = "sel_cat")]
    pub selected_top_category: Option<String>,
    pub results: Vec<ResultEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirstClick {
    pub item_id: String,
    pub top_category: String,
}

/// Negative (abandoned prediction) and hard (clicked after switching) labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchClick {
    pub y_neg: String,
    pub y_hard: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ClickSummary {
    pub first_click: Option<FirstClick>,
    pub switch: Option<SwitchClick>,
    pub clicked_items: Vec<String>,
    pub nonclicked_items: Vec<String>,
}

fn shape_of(features: &Features) -> Vec<usize> {
    features.iter().map(Vec::len).collect()
}

impl PvRecord {
    /// Checks every record invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if let Some(sel) = &self.selected_top_category {
            if sel == &self.predicted_top_category {
                return Err(format!("sel_cat equals pred_cat ({sel})"));
            }
        }
        let shape = shape_of(&self.query_features);
        let mut prev = 0u32;
        for (i, entry) in self.results.iter().enumerate() {
            if entry.position == 0 {
                return Err(format!("result {i}: positions are 1-based"));
            }
            if entry.position <= prev {
                return Err(format!(
                    "result {i}: position {} not strictly increasing after {prev}",
                    entry.position
                ));
            }
            prev = entry.position;
            match (entry.clicked, entry.click_time) {
                (false, Some(_)) => {
                    return Err(format!("result {i}: click_ts present on unclicked entry"));
                }
                (true, Some(t)) if t < self.timestamp => {
                    return Err(format!("result {i}: click_ts {t} precedes ts {}", self.timestamp));
                }
                (true, None) => {
                    return Err(format!("result {i}: clicked entry without click_ts"));
                }
                _ => {}
            }
            if shape_of(&entry.item_features) != shape {
                return Err(format!("result {i}: feature channel shape differs from query"));
            }
        }
        if shape.is_empty() {
            return Err("query has no feature channels".into());
        }
        let finite = |f: &Features| f.iter().flatten().all(|x| x.is_finite());
        if !finite(&self.query_features) || !self.results.iter().all(|r| finite(&r.item_features)) {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }

    pub fn clicked(&self) -> impl Iterator<Item = &ResultEntry> {
        self.results.iter().filter(|r| r.clicked)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("PvRecord serializes")
    }
}

/// Parses one JSON line and validates it.
pub fn parse_line(line: &str, line_no: usize) -> Result<PvRecord, PvlogError> {
    let record: PvRecord = serde_json::from_str(line).map_err(|e| PvlogError::MalformedLine {
        line_no,
        reason: e.to_string(),
    })?;
    record
        .validate()
        .map_err(|reason| PvlogError::MalformedLine { line_no, reason })?;
    Ok(record)
}

/// Outcome of a lenient parse: the valid records plus the rejected lines.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<PvRecord>,
    pub rejected: Vec<PvlogError>,
}

/// Reads a PVLOG stream. Blank lines are ignored; line numbers are 1-based.
///
/// With `strict` the first malformed line aborts the parse, otherwise it is
/// collected into [`ParseOutcome::rejected`] and skipped.
pub fn parse_pvlog<R: BufRead>(reader: R, strict: bool) -> Result<ParseOutcome, PvlogError> {
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, idx + 1) {
            Ok(r) => out.records.push(r),
            Err(e) if strict => return Err(e),
            Err(e) => out.rejected.push(e),
        }
    }
    Ok(out)
}

pub fn parse_pvlog_str(text: &str, strict: bool) -> Result<ParseOutcome, PvlogError> {
    parse_pvlog(text.as_bytes(), strict)
}

pub fn write_pvlog<W: Write>(mut writer: W, records: &[PvRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(writer, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Derives first-click and switch-click semantics of one page view.
///
/// The first click is the earliest `click_time`, ties going to the lower
/// position. A switch is reported only if the category tab was switched and
/// at least one click happened (all recorded clicks follow the switch).
pub fn extract_click_summary(record: &PvRecord) -> ClickSummary {
    let mut summary = ClickSummary::default();
    let mut first: Option<&ResultEntry> = None;
    for entry in &record.results {
        if entry.clicked {
            summary.clicked_items.push(entry.item_id.clone());
            let t = entry.click_time.unwrap_or(record.timestamp);
            let better = match first {
                None => true,
                Some(f) => {
                    let ft = f.click_time.unwrap_or(record.timestamp);
                    (t, entry.position) < (ft, f.position)
                }
            };
            if better {
                first = Some(entry);
            }
        } else {
            summary.nonclicked_items.push(entry.item_id.clone());
        }
    }
    summary.first_click = first.map(|f| FirstClick {
        item_id: f.item_id.clone(),
        top_category: f.top_category.clone(),
    });
    if let (Some(sel), Some(_)) = (&record.selected_top_category, first) {
        summary.switch = Some(SwitchClick {
            y_neg: record.predicted_top_category.clone(),
            y_hard: sel.clone(),
        });
    }
    summary
}

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{parse_table, HarnessError, Table};

pub const CURVES_HEADER: &str = "#posefuse-curves v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortKey {
    TotalTransIvar,
    TotalRotIvar,
    HRatio,
    PhiForward,
    InlierCount,
}

impl SortKey {
    pub const ALL: [SortKey; 5] = [
        SortKey::TotalTransIvar,
        SortKey::TotalRotIvar,
        SortKey::HRatio,
        SortKey::PhiForward,
        SortKey::InlierCount,
    ];

    pub fn column(self) -> &'static str {
        match self {
            SortKey::TotalTransIvar => "total_trans_ivar",
            SortKey::TotalRotIvar => "total_rot_ivar",
            SortKey::HRatio => "h_ratio",
            SortKey::PhiForward => "phi_forward",
            SortKey::InlierCount => "inlier_count",
        }
    }
}

impl fmt::Display for SortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for SortKey {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SortKey::ALL
            .into_iter()
            .find(|k| k.column() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown sort key `{s}`")))
    }
}

fn is_error_column(name: &str) -> bool {
    name.ends_with("_err")
}

/// Sorts rows by descending `key`, so curves run from the most to the
/// least confident scene (rows without a key value last, input order
/// kept among equals) and replaces every `*_err` column by its
/// trailing moving average over `window` rows. The first rows use the
/// shorter windows available; empty cells are skipped in the average.
pub fn analyze(table: &Table, key: SortKey, window: usize) -> Result<Table, HarnessError> {
    if window == 0 {
        return Err(HarnessError::Usage("window must be ≥ 1".into()));
    }
    let keys = table
        .numbers(key.column())
        .ok_or_else(|| HarnessError::Data(format!("results lack column `{key}`")))?;
    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.sort_by(|&a, &b| match (keys[a], keys[b]) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let mut rows: Vec<Vec<String>> = order.iter().map(|&i| table.rows[i].clone()).collect();

    for (c, name) in table.columns.iter().enumerate() {
        if !is_error_column(name) {
            continue;
        }
        let values: Vec<Option<f64>> = rows.iter().map(|r| r[c].parse::<f64>().ok()).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let lo = (i + 1).saturating_sub(window);
            let seen: Vec<f64> = values[lo..=i].iter().flatten().copied().collect();
            row[c] = if seen.is_empty() {
                String::new()
            } else {
                format!("{:?}", seen.iter().sum::<f64>() / seen.len() as f64)
            };
        }
    }
    Ok(Table {
        columns: table.columns.clone(),
        rows,
    })
}

pub fn curves_to_csv(t: &Table) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(&t.columns).expect("in-memory csv");
    for r in &t.rows {
        w.write_record(r).expect("in-memory csv");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv");
    format!("{CURVES_HEADER}\n{body}")
}

/// Reads a results file, smooths it and writes the curves file.
pub fn analyze_file(results: &Path, key: SortKey, window: usize, out: &Path) -> Result<(), HarnessError> {
    if window == 0 {
        return Err(HarnessError::Usage("window must be ≥ 1".into()));
    }
    let text = std::fs::read_to_string(results).map_err(|e| HarnessError::Data(format!("{}: {e}", results.display())))?;
    if !text.starts_with("#posefuse-results") {
        return Err(HarnessError::Data(format!("{}: not a results file", results.display())));
    }
    let curves = analyze(&parse_table(&text)?, key, window)?;
    std::fs::write(out, curves_to_csv(&curves)).map_err(|e| HarnessError::Data(format!("{}: {e}", out.display())))
}

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2, Array3};

use super::{MaskedCube, ReturnPanel};
use crate::error::{Error, Result};
use crate::io::{fmt_num, write_atomic};

const FIXED_COLUMNS: [&str; 4] = ["date", "asset_id", "return", "rf"];

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a panel CSV: `date,asset_id,return,rf,<char_1>,...,<char_M>` with
/// one row per (date, asset), rows grouped by strictly increasing date.
/// Empty or `NA` characteristic cells are missing.
pub fn load_csv(path: impl AsRef<Path>) -> Result<ReturnPanel> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    for (i, want) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i).map(str::trim) != Some(*want) {
            return Err(parse_err(
                1,
                format!("column {} must be \"{want}\", header is {:?}", i + 1, header),
            ));
        }
    }
    let char_names: Vec<String> = header.iter().skip(4).map(|s| s.trim().to_string()).collect();
    let m = char_names.len();

    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut asset_ids: Vec<String> = Vec::new();
    let mut asset_index: HashMap<String, usize> = HashMap::new();
    // Per date: returns, rf, characteristic cells; filled in asset order.
    let mut rows_ret: Vec<Vec<Option<f64>>> = Vec::new();
    let mut rows_char: Vec<Vec<Option<Vec<Option<f64>>>>> = Vec::new();
    let mut rf: Vec<f64> = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 + m {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", 4 + m, record.len()),
            ));
        }
        let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date {:?}: {e}", &record[0])))?;
        let asset = record[1].trim().to_string();
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad {what} value {s:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {what} value")));
            }
            Ok(v)
        };
        let ret = num(&record[2], "return")?;
        let rate = num(&record[3], "rf")?;
        let mut chars = Vec::with_capacity(m);
        for c in 0..m {
            let cell = record[4 + c].trim();
            chars.push(if cell.is_empty() || cell == "NA" {
                None
            } else {
                Some(num(cell, &char_names[c])?)
            });
        }

        match dates.last() {
            Some(&last) if last == date => {}
            Some(&last) if date < last => {
                return Err(parse_err(line, format!("date {date} after {last}: dates must increase")));
            }
            prev => {
                if prev.is_some() {
                    check_complete(&rows_ret, &asset_ids, &dates, line)?;
                }
                dates.push(date);
                rf.push(rate);
                rows_ret.push(vec![None; asset_ids.len()]);
                rows_char.push(vec![None; asset_ids.len()]);
            }
        }

        let d = dates.len() - 1;
        let idx = match asset_index.get(&asset) {
            Some(&i) => i,
            None if d == 0 => {
                asset_index.insert(asset.clone(), asset_ids.len());
                asset_ids.push(asset.clone());
                rows_ret[0].push(None);
                rows_char[0].push(None);
                asset_ids.len() - 1
            }
            None => {
                return Err(parse_err(
                    line,
                    format!("asset {asset:?} on {date} is not in the first date's universe"),
                ));
            }
        };
        if rows_ret[d][idx].is_some() {
            return Err(parse_err(line, format!("duplicate row for {asset} on {date}")));
        }
        rows_ret[d][idx] = Some(ret);
        rows_char[d][idx] = Some(chars);
    }
    if dates.is_empty() {
        return Err(parse_err(2, "panel has no rows"));
    }
    check_complete(&rows_ret, &asset_ids, &dates, 0)?;

    let (t, n) = (dates.len(), asset_ids.len());
    let mut returns = Array2::<f64>::zeros((t, n));
    let mut values = Array3::<f64>::from_elem((t, n, m), f64::NAN);
    let mut observed = Array3::<bool>::from_elem((t, n, m), false);
    for d in 0..t {
        for i in 0..n {
            returns[[d, i]] = rows_ret[d][i].expect("completeness checked");
            if let Some(chars) = &rows_char[d][i] {
                for (c, v) in chars.iter().enumerate() {
                    if let Some(v) = v {
                        values[[d, i, c]] = *v;
                        observed[[d, i, c]] = true;
                    }
                }
            }
        }
    }
    ReturnPanel::new(
        dates,
        asset_ids,
        char_names,
        returns,
        MaskedCube { values, observed },
        Array1::from(rf),
    )
}

fn check_complete(
    rows: &[Vec<Option<f64>>],
    assets: &[String],
    dates: &[NaiveDate],
    line: u64,
) -> Result<()> {
    let d = rows.len() - 1;
    if let Some(i) = rows[d].iter().position(Option::is_none) {
        return Err(parse_err(
            line,
            format!("asset {} missing on {}", assets[i], dates[d]),
        ));
    }
    Ok(())
}

/// Writes the panel in the format read by [`load_csv`].
pub fn save_csv(panel: &ReturnPanel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&FIXED_COLUMNS.join(","));
    for name in panel.characteristic_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let chars = panel.characteristics();
    for (d, date) in panel.dates().iter().enumerate() {
        let rf = fmt_num(panel.risk_free()[d]);
        for (i, asset) in panel.asset_ids().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}",
                date.format("%Y-%m-%d"),
                asset,
                fmt_num(panel.returns()[[d, i]]),
                rf
            ));
            for c in 0..panel.n_characteristics() {
                out.push(',');
                if chars.observed[[d, i, c]] {
                    out.push_str(&fmt_num(chars.values[[d, i, c]]));
                } else {
                    out.push_str("NA");
                }
            }
            out.push('\n');
        }
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

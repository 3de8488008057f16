//! Minimal CSV tables and summary statistics for experiment reports.

use std::fmt::Display;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::write_file;

/// A CSV table with a fixed header. Floats use Rust's shortest round-trip
/// formatting, so re-parsing a cell yields the exact value.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::invalid(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Column values parsed as `f64`.
    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("no column {name}")))?;
        self.rows
            .iter()
            .map(|r| {
                r[idx]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("column {name}: {e}")))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Table> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or(Error::Empty("CSV header"))?
            .split(',')
            .collect();
        let mut table = Table::new(&header);
        for line in lines {
            table.push(line.split(',').map(str::to_string).collect())?;
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

/// Formats one cell.
pub fn cell(v: impl Display) -> String {
    v.to_string()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Nearest-rank percentile, `p` in [0, 100].
pub fn percentile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_checks_width() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![cell(1), cell(0.1 + 0.2)]).unwrap();
        assert!(t.push(vec![cell(1)]).is_err());
        let parsed = Table::parse(&t.to_csv()).unwrap();
        assert_eq!(parsed, t);
        assert_eq!(parsed.column_f64("b").unwrap(), vec![0.1 + 0.2]);
    }

    #[test]
    fn statistics() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((std_dev(&v) - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }
}

//! Minimal CSV writer: header row, `,` separator, `.` decimal point, LF
//! line endings. Floats use the shortest representation that round-trips.

use std::path::Path;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// A value that can be placed in a CSV cell.
pub trait Cell {
    fn cell(&self) -> String;
}

impl Cell for f64 {
    fn cell(&self) -> String {
        if self.is_nan() {
            "nan".into()
        } else if self.is_infinite() {
            if *self > 0.0 { "inf".into() } else { "-inf".into() }
        } else {
            format!("{self:?}")
        }
    }
}

macro_rules! display_cell {
    ($($t:ty),*) => {$(
        impl Cell for $t {
            fn cell(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
display_cell!(usize, u64, i64, u32, bool, String, &str);

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(invalid(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        if row.iter().any(|c| c.contains([',', '\n', '\r', '"'])) {
            return Err(invalid("cells may not contain separators, quotes, or newlines"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.render().as_bytes())
    }

    /// Parses text produced by [`Csv::render`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n');
        let header: Vec<&str> = lines.next().ok_or_else(|| invalid("empty csv"))?.split(',').collect();
        let mut csv = Self::new(&header);
        for l in lines {
            csv.push(l.split(',').map(str::to_string).collect())?;
        }
        Ok(csv)
    }

    /// Values of one column parsed as floats.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("no column `{name}`")))?;
        self.rows
            .iter()
            .map(|r| r[j].parse::<f64>().map_err(|_| invalid(format!("`{}` is not a number", r[j]))))
            .collect()
    }
}

/// Builds a row from heterogeneous cells.
#[macro_export]
macro_rules! csv_row {
    ($($v:expr),* $(,)?) => {
        vec![$($crate::io::csv::Cell::cell(&$v)),*]
    };
}

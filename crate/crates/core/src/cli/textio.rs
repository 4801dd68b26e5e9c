//! Whitespace-separated numeric matrices with a `#` header of `key=value`
//! pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A numeric matrix plus its header fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextMatrix {
    pub header: BTreeMap<String, String>,
    pub data: Array2<f64>,
}

impl TextMatrix {
    pub fn new(data: Array2<f64>) -> Self {
        Self {
            header: BTreeMap::new(),
            data,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.header.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad header value {key}={v}"))))
            .transpose()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.header.is_empty() {
            let fields: Vec<String> = self.header.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "# {}", fields.join(" "));
        }
        for row in self.data.rows() {
            let cells: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut values = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    if let Some((k, v)) = field.split_once('=') {
                        header.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let before = values.len();
            for cell in line.split_whitespace() {
                values.push(
                    cell.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("line {}: '{cell}' is not a number", lineno + 1)))?,
                );
            }
            let width = values.len() - before;
            match cols {
                None => cols = Some(width),
                Some(c) if c != width => {
                    return Err(Error::Parse(format!("line {}: expected {c} columns, found {width}", lineno + 1)));
                }
                _ => {}
            }
            rows += 1;
        }
        let data = Array2::from_shape_vec((rows, cols.unwrap_or(0)), values).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self { header, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a single row or column of numbers as a vector.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let m = TextMatrix::read(path)?;
    if m.data.nrows() != 1 && m.data.ncols() != 1 {
        return Err(Error::Parse(format!("{}: expected a single row or column", path.display())));
    }
    Ok(m.data.iter().copied().collect())
}

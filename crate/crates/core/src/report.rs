//! Output formats shared by every report: aligned text tables and
//! line-delimited `key=value` records.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Records,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "text" => Ok(Self::Text),
            "records" => Ok(Self::Records),
            other => Err(Error::InvalidArgument(format!(
                "unknown format {other:?} (expected text or records)"
            ))),
        }
    }
}

/// A table rendered either as right-aligned columns or as one
/// `key=value ...` line per row.
#[derive(Debug, Clone, Default)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let row: Vec<String> = row.into_iter().map(|c| c.to_string()).collect();
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self, format: Format) -> String {
        let mut out = String::new();
        match format {
            Format::Text => {
                let widths: Vec<usize> = (0..self.columns.len())
                    .map(|c| {
                        self.rows
                            .iter()
                            .map(|r| r[c].len())
                            .chain([self.columns[c].len()])
                            .max()
                            .unwrap_or(0)
                    })
                    .collect();
                let line = |cells: &[String]| {
                    cells
                        .iter()
                        .zip(&widths)
                        .map(|(c, w)| format!("{c:>w$}"))
                        .collect::<Vec<_>>()
                        .join("  ")
                };
                let _ = writeln!(out, "{}", line(&self.columns));
                for r in &self.rows {
                    let _ = writeln!(out, "{}", line(r));
                }
            }
            Format::Records => {
                for r in &self.rows {
                    let fields: Vec<String> = self
                        .columns
                        .iter()
                        .zip(r)
                        .map(|(k, v)| format!("{k}={}", v.replace(' ', "_")))
                        .collect();
                    let _ = writeln!(out, "{}", fields.join(" "));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_both_formats() {
        let mut t = Table::new(["a", "long_name"]);
        t.push(["1", "x"]);
        t.push(["22", "y z"]);
        assert_eq!(
            t.render(Format::Text),
            " a  long_name\n 1          x\n22        y z\n"
        );
        assert_eq!(
            t.render(Format::Records),
            "a=1 long_name=x\na=22 long_name=y_z\n"
        );
        assert_eq!("records".parse::<Format>().unwrap(), Format::Records);
        assert!("json".parse::<Format>().is_err());
    }
}

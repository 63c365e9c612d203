//! Report files: tab-separated tables whose leading `#` lines echo the
//! effective configuration. Floats use 17 significant digits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliResult;

/// `{:.16e}`: 17 significant digits, parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// A table under construction.
#[derive(Clone, Debug)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// One output directory.
#[derive(Debug)]
pub struct Report {
    dir: PathBuf,
    config: String,
}

impl Report {
    /// Creates `dir` and writes `config.toml` into it.
    pub fn create(dir: &Path, config: String) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), &config)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn preamble(&self, notes: &[&str]) -> String {
        let mut s = String::new();
        for note in notes {
            let _ = writeln!(s, "# note: {note}");
        }
        s.push_str("# effective config:\n");
        for line in self.config.lines() {
            let _ = writeln!(s, "#   {line}");
        }
        s
    }

    pub fn write_table(&self, name: &str, table: &Table) -> CliResult<()> {
        self.write_table_with_notes(name, table, &[])
    }

    pub fn write_table_with_notes(&self, name: &str, table: &Table, notes: &[&str]) -> CliResult<()> {
        let mut s = self.preamble(notes);
        s.push_str(&table.header.join("\t"));
        s.push('\n');
        for row in &table.rows {
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        std::fs::write(self.dir.join(name), s)?;
        Ok(())
    }
}

/// Reads a table written by [`Report::write_table`], skipping comment lines.
pub fn read_table(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .unwrap_or_default();
    let rows = lines.map(|l| l.split('\t').map(str::to_string).collect()).collect();
    (header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn tables_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let r = Report::create(dir.path(), "seed = 1\n".into()).unwrap();
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), num(0.1)]);
        r.write_table_with_notes("t.tsv", &t, &["hello"]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("t.tsv")).unwrap();
        assert!(text.starts_with("# note: hello\n# effective config:\n#   seed = 1\n"));
        let (h, rows) = read_table(&text);
        assert_eq!(h, ["a", "b"]);
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.1);
    }
}

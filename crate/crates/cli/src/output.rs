use crate::CliResult;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes the same rows as `{stem}.csv` and `{stem}.json`.
pub fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(dir, stem, rows)
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, stem: &str, value: &T) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(format!("{stem}.json")), text)?;
    Ok(())
}

/// Appends one JSON line per record.
pub struct JsonLines {
    file: fs::File,
}

impl JsonLines {
    pub fn create(path: &Path) -> CliResult<Self> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        Ok(JsonLines { file: fs::File::create(path)? })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> expres::Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Plain fixed-width table on stdout.
pub fn print_table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
    };
    println!("{}", line(header.to_vec()));
    for r in rows {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
}

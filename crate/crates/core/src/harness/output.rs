//! File writers. CSV is UTF-8 with LF line endings and floats printed with
//! 17 significant digits.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Round-trippable float: `{:.16e}` (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Empty field for a missing value.
pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_csv<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path.as_ref())?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}

pub fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Files written by one command, relative to its output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Manifest {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Manifest {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.12345679, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn csv_uses_lf() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&p, &["x", "y"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y\n1,2\n");
    }
}

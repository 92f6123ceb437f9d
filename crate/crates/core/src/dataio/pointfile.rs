//! Whitespace-separated point-cloud text files.
//!
//! One point per line, `3 + f` numeric columns, `f` inferred from the first
//! data row. Blank lines and everything after `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{PatError, Result};
use crate::geometry::PointCloud;
use crate::tensor::{Real, Tensor};

/// Parses point-cloud text; `path` only labels errors.
pub fn parse_point_cloud<T: Real>(text: &str, path: &Path) -> Result<PointCloud<T>> {
    let err = |line: usize, msg: String| PatError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| err(i + 1, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(err(i + 1, format!("non-finite value {tok:?}")));
            }
            data.push(T::of(v));
            n += 1;
        }
        match cols {
            None if n < 3 => return Err(PatError::Format(format!("{}:{}: need at least 3 columns, got {n}", path.display(), i + 1))),
            None => cols = Some(n),
            Some(c) if c != n => return Err(err(i + 1, format!("expected {c} columns, got {n}"))),
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| PatError::Format(format!("{}: no points", path.display())))?;
    PointCloud::new(Tensor::new(&[rows, cols], data)?)
}

pub fn load_point_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    parse_point_cloud(&fs::read_to_string(path)?, path)
}

/// One line per point, columns separated by single spaces, shortest
/// round-trip formatting.
pub fn format_point_cloud<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut s = String::new();
    for row in cloud.points().data().chunks(cloud.channels()) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn save_point_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    fs::write(path, format_point_cloud(cloud))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PointCloud<f64>> {
        parse_point_cloud(text, Path::new("mem.txt"))
    }

    #[test]
    fn basic_shapes() {
        let c = parse("0 0 0\n1 0 0").unwrap();
        assert_eq!((c.len(), c.extra()), (2, 0));
        let c = parse("0 0 0 0.1 0.2 0.3\n1 0 0 1 1 1\n").unwrap();
        assert_eq!(c.extra(), 3);
    }

    #[test]
    fn located_errors() {
        let e = parse("0 0 0\n\n1 0\n").unwrap_err();
        assert!(matches!(e, PatError::Parse { line: 3, .. }), "{e}");
        let e = parse("0 0 x\n").unwrap_err();
        assert!(matches!(e, PatError::Parse { line: 1, .. }));
        assert!(matches!(parse("0 0\n1 1\n"), Err(PatError::Format(_))));
        assert!(parse("# only comments\n").is_err());
    }

    #[test]
    fn round_trip_modulo_comments() {
        let original = "# header\n0.25 -1 3.5 0\n\n1e-3 2 2 1 # trailing\n";
        let c = parse(original).unwrap();
        let saved = format_point_cloud(&c);
        assert_eq!(saved, "0.25 -1 3.5 0\n0.001 2 2 1\n");
        assert_eq!(format_point_cloud(&parse(&saved).unwrap()), saved);
    }
}

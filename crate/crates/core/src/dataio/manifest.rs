//! Dataset directories: one point-cloud file per sample and an `index.tsv`
//! with one `label<TAB>path` line per sample, paths relative to the directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::pointfile::{load_point_cloud, save_point_cloud};
use crate::error::{contract, PatError, Result};
use crate::model::{Label, Sample};
use crate::tensor::Real;

pub const INDEX_FILE: &str = "index.tsv";

/// Writes `samples` under `dir`; only class-labelled samples are supported.
pub fn save_dataset<T: Real>(dir: &Path, samples: &[Sample<T>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let Label::Class(c) = s.label else {
            return Err(contract("dataset directories hold class labels only"));
        };
        let name = format!("{i:06}.txt");
        save_point_cloud(&dir.join(&name), &s.cloud)?;
        index.push_str(&format!("{c}\t{name}\n"));
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

/// Reads the index and every file it names, in index order.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<Vec<Sample<T>>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)?;
    let err = |line: usize, msg: String| PatError::Parse {
        path: index_path.clone(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, rel) = line
            .split_once('\t')
            .ok_or_else(|| err(i + 1, "expected label<TAB>path".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| err(i + 1, format!("bad label {label:?}")))?;
        let path: PathBuf = dir.join(rel.trim());
        out.push(Sample {
            cloud: load_point_cloud(&path)?,
            label: Label::Class(label),
        });
    }
    Ok(out)
}

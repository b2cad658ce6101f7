//! On-disk layout: a JSON manifest plus one headerless CSV matrix per subject.
//! Synthetic datasets also carry `truth_mask.csv` next to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{build_graph, AdjacencyRule, Dataset};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_MASK_FILE: &str = "truth_mask.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_rois: usize,
    pub subjects: Vec<SubjectEntry>,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    /// Path relative to the manifest directory.
    pub file: String,
    pub label: String,
    pub group: String,
}

/// Reads a headerless comma-separated matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("line {}: {tok:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(format!(
                    "line {} has {} values, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

/// Writes a matrix with shortest round-trip decimal formatting, so reading it
/// back reproduces every value bit-for-bit.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 12);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(manifest_path: &Path, rule: AdjacencyRule) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut graphs = Vec::with_capacity(manifest.subjects.len());
    for subject in &manifest.subjects {
        let label = manifest
            .classes
            .iter()
            .position(|c| c == &subject.label)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown label {:?} (classes {:?})",
                    subject.label, manifest.classes
                ))
            })?;
        let path = base.join(&subject.file);
        let fc = read_matrix_csv(&path)?;
        if fc.shape() != (manifest.n_rois, manifest.n_rois) {
            return Err(Error::shape(
                format!("{0}x{0} matrix", manifest.n_rois),
                format!("{}x{} in {}", fc.nrows(), fc.ncols(), path.display()),
            ));
        }
        graphs.push(build_graph(&fc, label, &subject.group, rule)?);
    }

    let truth_path = base.join(TRUTH_MASK_FILE);
    let truth_mask = if truth_path.exists() {
        Some(read_matrix_csv(&truth_path)?)
    } else {
        None
    };
    Dataset::new(graphs, manifest.classes, truth_mask)
}

/// Writes `manifest.json`, `subjects/sub_NNNN.csv` and, if present,
/// `truth_mask.csv` under `dir`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let subjects_dir = dir.join("subjects");
    fs::create_dir_all(&subjects_dir).map_err(|e| Error::io(&subjects_dir, e))?;

    let mut subjects = Vec::with_capacity(dataset.len());
    for (idx, g) in dataset.graphs.iter().enumerate() {
        let file = format!("subjects/sub_{idx:04}.csv");
        write_matrix_csv(&dir.join(&file), &g.node_features)?;
        subjects.push(SubjectEntry {
            file,
            label: dataset.class_names[g.label].clone(),
            group: g.group.clone(),
        });
    }
    if let Some(mask) = &dataset.truth_mask {
        write_matrix_csv(&dir.join(TRUTH_MASK_FILE), mask)?;
    }
    let manifest = Manifest {
        n_rois: dataset.n_rois,
        subjects,
        classes: dataset.class_names.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticConfig};

    fn write_manifest(dir: &Path, subjects: &[(&str, usize, &str, &str)], classes: &[&str]) -> PathBuf {
        let mut entries = Vec::new();
        for &(file, n, label, group) in subjects {
            let m = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.1 * (i + j) as f64 });
            write_matrix_csv(&dir.join(file), &m).unwrap();
            entries.push(SubjectEntry {
                file: file.into(),
                label: label.into(),
                group: group.into(),
            });
        }
        let manifest = Manifest {
            n_rois: subjects[0].1,
            subjects: entries,
            classes: classes.iter().map(|s| s.to_string()).collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        path
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = generate_synthetic(&SyntheticConfig {
            n_rois: 6,
            n_per_class: 3,
            planted_edges: 2,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&manifest, AdjacencyRule::Complete).unwrap();
        assert_eq!(loaded, ds);

        // saving the loaded copy reproduces the matrix files byte for byte
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for idx in 0..ds.len() {
            let f = format!("subjects/sub_{idx:04}.csv");
            assert_eq!(
                fs::read(dir.path().join(&f)).unwrap(),
                fs::read(dir2.path().join(&f)).unwrap()
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[("a.csv", 4, "hc", "s1"), ("b.csv", 5, "mdd", "s1")],
            &["hc", "mdd"],
        );
        assert!(matches!(
            load_dataset(&path, AdjacencyRule::Complete),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn unknown_label_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a.csv", 4, "other", "s1")], &["hc", "mdd"]);
        assert!(matches!(load_dataset(&path, AdjacencyRule::Complete), Err(Error::Invalid(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a.csv", 4, "hc", "s1")], &["hc", "mdd"]);
        fs::remove_file(dir.path().join("a.csv")).unwrap();
        assert!(matches!(load_dataset(&path, AdjacencyRule::Complete), Err(Error::Io { .. })));
    }

    #[test]
    fn groups_echo_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let subjects: Vec<(String, &str, &str)> = (0..6)
            .map(|i| {
                (
                    format!("s{i}.csv"),
                    if i % 2 == 0 { "hc" } else { "mdd" },
                    if i < 3 { "siteA" } else { "siteB" },
                )
            })
            .collect();
        let refs: Vec<(&str, usize, &str, &str)> =
            subjects.iter().map(|(f, l, g)| (f.as_str(), 4, *l, *g)).collect();
        let path = write_manifest(dir.path(), &refs, &["hc", "mdd"]);
        let ds = load_dataset(&path, AdjacencyRule::Complete).unwrap();
        assert_eq!(ds.groups(), vec!["siteA".to_string(), "siteB".to_string()]);
    }
}

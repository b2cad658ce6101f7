//! Brain network data model.
//!
//! A [`Graph`] is one subject: a binary adjacency over ROIs, the
//! functional-connectivity matrix used as node features (row `i` is the FC
//! profile of ROI `i`), a binary class label and a group (site) tag.
//! A [`Dataset`] is an immutable collection of graphs sharing one ROI count.

mod fc;
mod io;
mod synthetic;

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use fc::compute_fc;
pub use io::{load_dataset, read_matrix_csv, save_dataset, write_matrix_csv, Manifest, SubjectEntry};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Maximum entrywise asymmetry accepted before an input matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adjacency: DMatrix<f64>,
    pub node_features: DMatrix<f64>,
    pub label: usize,
    pub group: String,
}

/// How the binary adjacency is derived from an FC matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "fraction")]
pub enum AdjacencyRule {
    /// Every off-diagonal pair connected.
    #[default]
    Complete,
    /// Keep the strongest `|fc|` fraction of undirected edges.
    TopFraction(f64),
}

impl Graph {
    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    /// Checks the structural invariants: square, matching shapes, exact
    /// symmetry, zero diagonals, binary adjacency and finite features.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_features.nrows();
        if n < 2 {
            return Err(Error::invalid(format!("graph needs at least 2 nodes, got {n}")));
        }
        for (name, m) in [("adjacency", &self.adjacency), ("node_features", &self.node_features)] {
            if m.shape() != (n, n) {
                return Err(Error::shape(format!("{name} {n}x{n}"), format!("{:?}", m.shape())));
            }
            let asym = max_asymmetry(m);
            if asym != 0.0 {
                return Err(Error::NotSymmetric(asym));
            }
            if (0..n).any(|i| m[(i, i)] != 0.0) {
                return Err(Error::invalid(format!("{name} has a nonzero diagonal")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if self.adjacency.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("adjacency must be binary"));
        }
        if self.label > 1 {
            return Err(Error::invalid(format!("label {} outside {{0,1}}", self.label)));
        }
        Ok(())
    }
}

/// Builds a graph from a (numerically) symmetric FC matrix. The stored
/// features are exactly symmetric with a zero diagonal.
pub fn build_graph(fc: &DMatrix<f64>, label: usize, group: &str, rule: AdjacencyRule) -> Result<Graph> {
    let n = fc.nrows();
    if fc.ncols() != n {
        return Err(Error::shape("square matrix", format!("{:?}", fc.shape())));
    }
    if fc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fc matrix".into()));
    }
    let asym = max_asymmetry(fc);
    let scale = fc.amax().max(1.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let mut features = fc.clone();
    for i in 0..n {
        features[(i, i)] = 0.0;
        for j in 0..i {
            features[(i, j)] = features[(j, i)];
        }
    }
    let adjacency = match rule {
        AdjacencyRule::Complete => complete_adjacency(n),
        AdjacencyRule::TopFraction(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("top fraction {q} outside (0, 1]")));
            }
            let abs = features.map(f64::abs);
            top_edges_adjacency(&abs, keep_count(q, n))
        }
    };
    let g = Graph {
        adjacency,
        node_features: features,
        label,
        group: group.to_string(),
    };
    g.validate()?;
    Ok(g)
}

pub fn complete_adjacency(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Number of undirected edges kept at fraction `q` of `n(n-1)/2`.
pub fn keep_count(q: f64, n: usize) -> usize {
    let total = n * (n - 1) / 2;
    // the epsilon absorbs products like 0.3 * 10 = 2.9999999999999996
    ((q * total as f64) + 1e-9).floor().min(total as f64) as usize
}

/// Upper-triangle edges `(i, j)`, `i < j`, sorted by descending weight with
/// lexicographic tie-break.
pub fn ranked_edges(weights: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let n = weights.nrows();
    let mut edges: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, weights[(i, j)]))
        .collect();
    // stable sort keeps lexicographic order among equal weights
    edges.sort_by(|a, b| b.2.total_cmp(&a.2));
    edges
}

pub fn top_edges_adjacency(weights: &DMatrix<f64>, keep: usize) -> DMatrix<f64> {
    let n = weights.nrows();
    let mut adj = DMatrix::zeros(n, n);
    for &(i, j, _) in ranked_edges(weights).iter().take(keep) {
        adj[(i, j)] = 1.0;
        adj[(j, i)] = 1.0;
    }
    adj
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub n_rois: usize,
    pub class_names: Vec<String>,
    /// Planted edges for synthetic data.
    pub truth_mask: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(
        graphs: Vec<Graph>,
        class_names: Vec<String>,
        truth_mask: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n_rois = graphs
            .first()
            .map(Graph::n_nodes)
            .ok_or_else(|| Error::invalid("dataset has no graphs"))?;
        let ds = Dataset {
            graphs,
            n_rois,
            class_names,
            truth_mask,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != 2 {
            return Err(Error::invalid(format!(
                "expected 2 class names, got {}",
                self.class_names.len()
            )));
        }
        for (idx, g) in self.graphs.iter().enumerate() {
            if g.n_nodes() != self.n_rois {
                return Err(Error::shape(
                    format!("{0}x{0} matrices", self.n_rois),
                    format!("subject {idx} with {0}x{0}", g.n_nodes()),
                ));
            }
            g.validate()?;
        }
        let counts = self.class_counts();
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::invalid(format!(
                "each class needs at least 2 samples, got {counts:?}"
            )));
        }
        if let Some(mask) = &self.truth_mask {
            if mask.shape() != (self.n_rois, self.n_rois) {
                return Err(Error::shape(
                    format!("{0}x{0} truth mask", self.n_rois),
                    format!("{:?}", mask.shape()),
                ));
            }
            if max_asymmetry(mask) != 0.0 || (0..self.n_rois).any(|i| mask[(i, i)] != 0.0) {
                return Err(Error::invalid("truth mask must be symmetric with zero diagonal"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for g in &self.graphs {
            counts[g.label.min(1)] += 1;
        }
        counts
    }

    /// Distinct group tags in sorted order.
    pub fn groups(&self) -> Vec<String> {
        self.graphs
            .iter()
            .map(|g| g.group.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Graphs at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Vec<&Graph> {
        indices.iter().map(|&i| &self.graphs[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc4() -> DMatrix<f64> {
        // |fc| ranking over undirected edges: (2,3)=0.9 > (0,1)=0.8 > (1,3)=-0.7 > (0,2)=0.3 > ...
        DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.8, 0.3, 0.1, //
                0.8, 0.0, 0.2, -0.7, //
                0.3, 0.2, 0.0, 0.9, //
                0.1, -0.7, 0.9, 0.0,
            ],
        )
    }

    #[test]
    fn complete_rule_has_all_off_diagonal_edges() {
        let fc = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.1, 0.5, 0.0, 0.2, 0.1, 0.2, 0.0]);
        let g = build_graph(&fc, 0, "a", AdjacencyRule::Complete).unwrap();
        assert_eq!(g.adjacency.sum(), 6.0);
        assert!((0..3).all(|i| g.adjacency[(i, i)] == 0.0));
    }

    #[test]
    fn top_fraction_one_equals_complete() {
        let a = build_graph(&fc4(), 1, "a", AdjacencyRule::TopFraction(1.0)).unwrap();
        let b = build_graph(&fc4(), 1, "a", AdjacencyRule::Complete).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_fraction_half_keeps_strongest_three() {
        let g = build_graph(&fc4(), 0, "a", AdjacencyRule::TopFraction(0.5)).unwrap();
        // brute force: sort |fc| of the 6 upper-triangle entries
        let fc = fc4();
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                all.push((fc[(i, j)].abs(), i, j));
            }
        }
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let expected: BTreeSet<(usize, usize)> = all[..3].iter().map(|&(_, i, j)| (i, j)).collect();
        let mut kept = BTreeSet::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                if g.adjacency[(i, j)] == 1.0 {
                    kept.insert((i, j));
                }
            }
        }
        assert_eq!(kept, expected);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn asymmetric_fc_is_rejected() {
        let mut fc = fc4();
        fc[(0, 1)] = 0.1;
        assert!(matches!(
            build_graph(&fc, 0, "a", AdjacencyRule::Complete),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn dataset_requires_two_per_class() {
        let g = build_graph(&fc4(), 0, "a", AdjacencyRule::Complete).unwrap();
        let mut h = g.clone();
        h.label = 1;
        let err = Dataset::new(vec![g.clone(), g, h], vec!["a".into(), "b".into()], None);
        assert!(err.is_err());
    }

    #[test]
    fn keep_count_is_robust_to_rounding() {
        assert_eq!(keep_count(0.3, 5), 3);
        assert_eq!(keep_count(0.1, 20), 19);
        assert_eq!(keep_count(0.7, 5), 7);
        assert_eq!(keep_count(1.0, 4), 6);
    }
}

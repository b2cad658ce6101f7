//! Subgraph generator: per-edge selection probabilities from node features
//! (MLP + sigmoid), a Gumbel-Softmax relaxed edge mask, and the connectivity
//! regularizer that keeps the selected subgraph compact.
//!
//! The default relaxation is a two-category (in/out) concrete distribution
//! per undirected edge. The alternative [`MaskMode::RowSoftmax`] relaxes an
//! `n`-way choice per node instead.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Linear, Visitor, VisitorMut};
use crate::tape::{Tape, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DEFAULT_GEN_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Two-category concrete relaxation per undirected edge.
    #[default]
    Edge,
    /// `n`-way concrete relaxation over each node's row, then symmetrized.
    RowSoftmax,
}

/// Two-layer perceptron `n -> hidden -> n` producing edge logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

impl<T> GeneratorParams<T> {
    pub fn map<U>(&self, f: &mut Visitor<'_, T, U>) -> GeneratorParams<U> {
        GeneratorParams {
            lin1: self.lin1.map("generator.lin1", f),
            lin2: self.lin2.map("generator.lin2", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        self.lin1.for_each_mut("generator.lin1", f);
        self.lin2.for_each_mut("generator.lin2", f);
    }
}

impl GeneratorParams<DMatrix<f64>> {
    pub fn init(n_rois: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GeneratorParams {
            lin1: Linear::init(n_rois, hidden, rng),
            lin2: Linear::init(hidden, n_rois, rng),
        }
    }

    pub fn zeros(n_rois: usize, hidden: usize) -> Self {
        GeneratorParams {
            lin1: Linear {
                weight: DMatrix::zeros(n_rois, hidden),
                bias: DMatrix::zeros(1, hidden),
            },
            lin2: Linear {
                weight: DMatrix::zeros(hidden, n_rois),
                bias: DMatrix::zeros(1, n_rois),
            },
        }
    }

    pub fn n_rois(&self) -> usize {
        self.lin1.fan_in()
    }
}

/// Edge selection probabilities and the relaxed sample drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    pub probs: DMatrix<f64>,
    pub sampled: DMatrix<f64>,
}

impl EdgeMask {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("probs", &self.probs), ("sampled", &self.sampled)] {
            if crate::graph::max_asymmetry(m) != 0.0 {
                return Err(Error::invalid(format!("{name} mask is not symmetric")));
            }
            if (0..m.nrows()).any(|i| m[(i, i)] != 0.0) {
                return Err(Error::invalid(format!("{name} mask has a nonzero diagonal")));
            }
            if m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("{name} mask leaves [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Records the probability stage on a tape for a row-stacked batch `x`.
pub(crate) fn edge_probs_on_tape(tape: &mut Tape, params: &GeneratorParams<Var>, x: Var, n: usize) -> Var {
    let h = tape.matmul(x, params.lin1.weight);
    let h = tape.add_row(h, params.lin1.bias);
    let h = tape.relu(h);
    let logits = tape.matmul(h, params.lin2.weight);
    let logits = tape.add_row(logits, params.lin2.bias);
    let raw = tape.sigmoid(logits);
    tape.block_symmetrize(raw, n)
}

/// Largest relaxed logit whose sigmoid is still strictly below 1.
const OPEN_LOGIT: f64 = 36.0;

/// Pre-drawn Gumbel noise for a row-stacked batch of `n x n` masks.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    pub mode: MaskMode,
    /// Edge mode: `c_in - c_out` per undirected edge (mirrored, zero diagonal).
    /// Row mode: one Gumbel(0, 1) draw per entry.
    pub values: DMatrix<f64>,
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

impl GumbelNoise {
    pub fn draw(mode: MaskMode, blocks: usize, n: usize, rng: &mut impl Rng) -> Self {
        let mut values = DMatrix::zeros(blocks * n, n);
        for b in 0..blocks {
            match mode {
                MaskMode::Edge => {
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let c_in = gumbel(rng);
                            let c_out = gumbel(rng);
                            values[(b * n + i, j)] = c_in - c_out;
                            values[(b * n + j, i)] = c_in - c_out;
                        }
                    }
                }
                MaskMode::RowSoftmax => {
                    for i in 0..n {
                        for j in 0..n {
                            values[(b * n + i, j)] = gumbel(rng);
                        }
                    }
                }
            }
        }
        GumbelNoise { mode, values }
    }
}

fn off_diagonal_blocks(blocks: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(blocks * n, n, |r, c| if r % n == c { 0.0 } else { 1.0 })
}

/// Relaxed mask on a tape from row-stacked probabilities.
pub(crate) fn relaxed_mask_on_tape(tape: &mut Tape, probs: Var, noise: &GumbelNoise, tau: f64, n: usize) -> Var {
    let blocks = tape.value(probs).nrows() / n;
    match noise.mode {
        MaskMode::Edge => {
            // softmax over {(log p + c_in)/τ, (log(1-p) + c_out)/τ}, "in" coordinate
            let logit = tape.clamped_logit(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let noise_v = tape.leaf(noise.values.clone());
            let shifted = tape.add(logit, noise_v);
            let scaled = tape.scale(shifted, 1.0 / tau);
            // beyond ±36 the sigmoid rounds to exactly 0 or 1
            let scaled = tape.clamp(scaled, -OPEN_LOGIT, OPEN_LOGIT);
            let s = tape.sigmoid(scaled);
            tape.mul_const(s, off_diagonal_blocks(blocks, n))
        }
        MaskMode::RowSoftmax => {
            let logp = tape.clamped_ln(probs, PROB_CLAMP, 1.0);
            let noise_v = tape.leaf(noise.values.clone());
            let shifted = tape.add(logp, noise_v);
            let scaled = tape.scale(shifted, 1.0 / tau);
            let rows = tape.row_softmax(scaled);
            tape.block_symmetrize(rows, n)
        }
    }
}

fn check_features(x: &DMatrix<f64>, params: &GeneratorParams<DMatrix<f64>>) -> Result<()> {
    if x.ncols() != params.n_rois() || x.nrows() != params.lin2.fan_out() {
        return Err(Error::shape(
            format!("{0}x{0} node features", params.n_rois()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    Ok(())
}

/// Symmetric edge probabilities `(σ(MLP(X)) + σ(MLP(X))ᵀ) / 2` with a zero diagonal.
pub fn edge_scores(x: &DMatrix<f64>, params: &GeneratorParams<DMatrix<f64>>) -> Result<DMatrix<f64>> {
    check_features(x, params)?;
    let mut tape = Tape::new();
    let bound = params.map(&mut |_, m, _| tape.leaf(m.clone()));
    let xv = tape.leaf(x.clone());
    let probs = edge_probs_on_tape(&mut tape, &bound, xv, x.nrows());
    Ok(tape.value(probs).clone())
}

/// One relaxed edge mask drawn from `probs` at temperature `tau`.
pub fn gumbel_sample(probs: &DMatrix<f64>, tau: f64, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    gumbel_sample_with(probs, tau, MaskMode::Edge, rng)
}

pub fn gumbel_sample_with(
    probs: &DMatrix<f64>,
    tau: f64,
    mode: MaskMode,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if !probs.is_square() {
        return Err(Error::shape("square probability matrix", format!("{:?}", probs.shape())));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("edge probabilities must lie in [0, 1]"));
    }
    let n = probs.nrows();
    let noise = GumbelNoise::draw(mode, 1, n, rng);
    let mut tape = Tape::new();
    let p = tape.leaf(probs.clone());
    let s = relaxed_mask_on_tape(&mut tape, p, &noise, tau, n);
    Ok(tape.value(s).clone())
}

/// Masks the FC node features by `mask.sampled`; adjacency, label and group
/// are unchanged.
pub fn apply_mask(g: &Graph, mask: &EdgeMask) -> Result<Graph> {
    if mask.sampled.shape() != g.node_features.shape() {
        return Err(Error::shape(
            format!("{:?}", g.node_features.shape()),
            format!("{:?}", mask.sampled.shape()),
        ));
    }
    Ok(Graph {
        adjacency: g.adjacency.clone(),
        node_features: g.node_features.component_mul(&mask.sampled),
        label: g.label,
        group: g.group.clone(),
    })
}

/// `‖RowNorm(SᵀAS) - I‖_F`.
pub fn connectivity_loss(s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<f64> {
    if !s.is_square() || s.shape() != a.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", s.shape())));
    }
    Ok(crate::tape::connectivity_value_and_grad(s, a).0)
}

/// Probabilities for every graph in a row-stacked batch.
pub(crate) fn batch_features(graphs: &[&Graph]) -> (DMatrix<f64>, Arc<Vec<DMatrix<f64>>>) {
    let n = graphs[0].n_nodes();
    let mut x = DMatrix::zeros(graphs.len() * n, n);
    for (b, g) in graphs.iter().enumerate() {
        x.rows_mut(b * n, n).copy_from(&g.node_features);
    }
    let adj = graphs.iter().map(|g| g.adjacency.clone()).collect();
    (x, Arc::new(adj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sym_random(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let p = edge_scores(&DMatrix::from_element(5, 5, 0.3), &GeneratorParams::zeros(5, 16)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(p[(i, j)], if i == j { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn scores_are_symmetric_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = GeneratorParams::init(6, 16, &mut rng);
        let x = sym_random(&mut rng, 6);
        let p = edge_scores(&x, &params).unwrap();
        assert_eq!(crate::graph::max_asymmetry(&p), 0.0);
        assert!(p.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(p, edge_scores(&x, &params).unwrap());
        assert!(edge_scores(&DMatrix::zeros(5, 5), &params).is_err());
    }

    #[test]
    fn samples_are_valid_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = sym_random(&mut rng, 7).map(|v| 0.5 + 0.45 * v);
        let mut probs = probs;
        probs.fill_diagonal(0.0);
        for mode in [MaskMode::Edge, MaskMode::RowSoftmax] {
            let s = gumbel_sample_with(&probs, 0.7, mode, &mut rng).unwrap();
            let mask = EdgeMask {
                probs: probs.clone(),
                sampled: s.clone(),
            };
            mask.validate().unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    if i != j {
                        assert!(s[(i, j)] > 0.0 && s[(i, j)] < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let probs = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 0.3 });
        let a = gumbel_sample(&probs, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gumbel_sample(&probs, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn low_temperature_is_nearly_binary() {
        let probs = DMatrix::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 0.999 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 2000;
        let hits = (0..draws)
            .filter(|_| gumbel_sample(&probs, 1e-3, &mut rng).unwrap()[(0, 1)] > 1.0 - 1e-3)
            .count();
        assert!(hits as f64 / draws as f64 >= 0.99, "{hits}/{draws}");
    }

    #[test]
    fn extreme_probabilities_are_clamped() {
        let probs = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let s = gumbel_sample(&probs, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(gumbel_sample(&probs, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn mask_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fc = sym_random(&mut rng, 4);
        let g = crate::graph::build_graph(&fc, 1, "s", crate::graph::AdjacencyRule::Complete).unwrap();
        let ones = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        let full = apply_mask(&g, &EdgeMask { probs: ones.clone(), sampled: ones }).unwrap();
        assert_eq!(full, g);

        let zeros = DMatrix::zeros(4, 4);
        let empty = apply_mask(&g, &EdgeMask { probs: zeros.clone(), sampled: zeros }).unwrap();
        assert_eq!(empty.node_features.amax(), 0.0);
        assert_eq!(empty.adjacency, g.adjacency);

        let mut single = DMatrix::zeros(4, 4);
        single[(1, 3)] = 1.0;
        single[(3, 1)] = 1.0;
        let sub = apply_mask(&g, &EdgeMask { probs: single.clone(), sampled: single }).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let keep = (i, j) == (1, 3) || (i, j) == (3, 1);
                assert_eq!(sub.node_features[(i, j)], if keep { g.node_features[(i, j)] } else { 0.0 });
            }
        }
        assert_eq!((sub.label, sub.group.as_str()), (1, "s"));
        assert!(apply_mask(&g, &EdgeMask { probs: DMatrix::zeros(3, 3), sampled: DMatrix::zeros(3, 3) }).is_err());
    }

    #[test]
    fn connectivity_values() {
        let a = crate::graph::complete_adjacency(4);
        let ones = DMatrix::from_element(4, 4, 1.0);
        assert!((connectivity_loss(&ones, &a).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        // scaling S by c > 0 scales SᵀAS by c², which the row normalization removes
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = DMatrix::from_fn(4, 4, |_, _| rng.random_range(0.1..0.9));
        let l1 = connectivity_loss(&s, &a).unwrap();
        let l2 = connectivity_loss(&(&s * 3.7), &a).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        // a permutation S with A = I maps SᵀAS to I exactly
        let perm = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(connectivity_loss(&perm, &DMatrix::identity(3, 3)).unwrap(), 0.0);
    }
}

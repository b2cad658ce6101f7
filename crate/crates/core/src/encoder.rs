//! Graph encoder: GIN message passing, bilinear second-order pooling and a
//! linear classifier head.
//!
//! Each GIN layer computes `MLP((1 + ε) h_v + Σ_{u ∈ N(v)} h_u)` where the
//! MLP is `Linear → BatchNorm → ReLU → Linear → BatchNorm → ReLU`. The
//! readout is `flatten(Wᵀ Hᵀ H W)` on the final layer's node matrix `H`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Linear, Norm, ParamKind, RunningStats, Visitor, VisitorMut};
use crate::tape::{BatchStats, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer<T> {
    pub eps: T,
    pub lin1: Linear<T>,
    pub norm1: Norm<T>,
    pub lin2: Linear<T>,
    pub norm2: Norm<T>,
}

impl<T> GinLayer<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Visitor<'_, T, U>) -> GinLayer<U> {
        GinLayer {
            eps: f(&format!("{prefix}.eps"), &self.eps, ParamKind::Eps),
            lin1: self.lin1.map(&format!("{prefix}.lin1"), f),
            norm1: self.norm1.map(&format!("{prefix}.norm1"), f),
            lin2: self.lin2.map(&format!("{prefix}.lin2"), f),
            norm2: self.norm2.map(&format!("{prefix}.norm2"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{prefix}.eps"), &mut self.eps, ParamKind::Eps);
        self.lin1.for_each_mut(&format!("{prefix}.lin1"), f);
        self.norm1.for_each_mut(&format!("{prefix}.norm1"), f);
        self.lin2.for_each_mut(&format!("{prefix}.lin2"), f);
        self.norm2.for_each_mut(&format!("{prefix}.norm2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<GinLayer<T>>,
    /// Bilinear pooling map `W: hidden x f'`.
    pub pool: T,
    /// `f'² -> 2` logits.
    pub classifier: Linear<T>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut Visitor<'_, T, U>) -> EncoderParams<U> {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| l.map(&format!("encoder.gin{k}"), f))
                .collect(),
            pool: f("encoder.pool", &self.pool, ParamKind::Weight),
            classifier: self.classifier.map("encoder.classifier", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("encoder.gin{k}"), f);
        }
        f("encoder.pool", &mut self.pool, ParamKind::Weight);
        self.classifier.for_each_mut("encoder.classifier", f);
    }
}

impl EncoderParams<DMatrix<f64>> {
    /// Uniform(±1/√fan_in) affine maps, ε = 0, identity batch norm.
    pub fn init(input_dim: usize, hidden: usize, layers: usize, pool_dim: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|k| GinLayer {
                eps: DMatrix::zeros(1, 1),
                lin1: Linear::init(if k == 0 { input_dim } else { hidden }, hidden, rng),
                norm1: Norm::init(hidden),
                lin2: Linear::init(hidden, hidden, rng),
                norm2: Norm::init(hidden),
            })
            .collect();
        let bound = 1.0 / (hidden as f64).sqrt();
        let pool = DMatrix::from_fn(hidden, pool_dim, |_, _| rng.random_range(-bound..bound));
        EncoderParams {
            layers,
            pool,
            classifier: Linear::init(pool_dim * pool_dim, 2, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.lin1.fan_in())
    }

    pub fn hidden(&self) -> usize {
        self.pool.nrows()
    }

    pub fn pool_dim(&self) -> usize {
        self.pool.ncols()
    }

    pub fn fresh_running_stats(&self) -> Vec<[RunningStats; 2]> {
        self.layers
            .iter()
            .map(|l| {
                [
                    RunningStats::new(l.lin1.fan_out()),
                    RunningStats::new(l.lin2.fan_out()),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding {
    pub values: DVector<f64>,
}

fn norm_on_tape(
    tape: &mut Tape,
    x: Var,
    norm: &Norm<Var>,
    running: &RunningStats,
    mode: Mode,
    stats: &mut Vec<BatchStats>,
) -> Var {
    match mode {
        Mode::Train => {
            let (y, s) = tape.batch_norm(x, norm.gamma, norm.beta);
            stats.push(s);
            y
        }
        Mode::Eval => tape.fixed_norm(x, norm.gamma, norm.beta, &running.mean, &running.var),
    }
}

/// GIN stack over a row-stacked batch. In train mode also returns each
/// layer's two batch-norm statistics.
pub(crate) fn gin_on_tape(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    running: &[[RunningStats; 2]],
    x: Var,
    adj: &Arc<Vec<DMatrix<f64>>>,
    mode: Mode,
) -> (Var, Vec<[BatchStats; 2]>) {
    let mut h = x;
    let mut all_stats = Vec::new();
    for (layer, run) in params.layers.iter().zip(running) {
        let mut stats = Vec::with_capacity(2);
        let agg = tape.gin_aggregate(h, layer.eps, adj.clone());
        let y = tape.matmul(agg, layer.lin1.weight);
        let y = tape.add_row(y, layer.lin1.bias);
        let y = norm_on_tape(tape, y, &layer.norm1, &run[0], mode, &mut stats);
        let y = tape.relu(y);
        let y = tape.matmul(y, layer.lin2.weight);
        let y = tape.add_row(y, layer.lin2.bias);
        let y = norm_on_tape(tape, y, &layer.norm2, &run[1], mode, &mut stats);
        h = tape.relu(y);
        // eval mode records nothing
        if let Ok(pair) = <[BatchStats; 2]>::try_from(stats) {
            all_stats.push(pair);
        }
    }
    (h, all_stats)
}

/// `flatten(Wᵀ H_bᵀ H_b W)` per block: a `B x f'²` embedding matrix.
pub(crate) fn sopool_on_tape(tape: &mut Tape, pool: Var, h: Var, n: usize) -> Var {
    let hw = tape.matmul(h, pool);
    tape.block_gram(hw, n)
}

pub(crate) fn logits_on_tape(tape: &mut Tape, classifier: &Linear<Var>, z: Var, dropout: Option<DMatrix<f64>>) -> Var {
    let z = match dropout {
        Some(mask) => tape.mul_const(z, mask),
        None => z,
    };
    let l = tape.matmul(z, classifier.weight);
    tape.add_row(l, classifier.bias)
}

/// Inverted dropout mask: entries 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    if rate <= 0.0 {
        return DMatrix::from_element(rows, cols, 1.0);
    }
    let keep = 1.0 / (1.0 - rate);
    DMatrix::from_fn(rows, cols, |_, _| if rng.random_bool(rate) { 0.0 } else { keep })
}

fn check_graph(g: &Graph, params: &EncoderParams<DMatrix<f64>>) -> Result<()> {
    if g.node_features.ncols() != params.input_dim() {
        return Err(Error::shape(
            format!("{} input features", params.input_dim()),
            format!("{}", g.node_features.ncols()),
        ));
    }
    if g.adjacency.shape() != (g.n_nodes(), g.n_nodes()) {
        return Err(Error::shape("square adjacency", format!("{:?}", g.adjacency.shape())));
    }
    Ok(())
}

/// Final-layer node representations (`n x hidden`) for one graph.
pub fn gin_forward(
    g: &Graph,
    params: &EncoderParams<DMatrix<f64>>,
    running: &[[RunningStats; 2]],
    mode: Mode,
) -> Result<DMatrix<f64>> {
    check_graph(g, params)?;
    let mut tape = Tape::new();
    let bound = params.map(&mut |_, m, _| tape.leaf(m.clone()));
    let x = tape.leaf(g.node_features.clone());
    let adj = Arc::new(vec![g.adjacency.clone()]);
    let (h, _) = gin_on_tape(&mut tape, &bound, running, x, &adj, mode);
    Ok(tape.value(h).clone())
}

/// Bilinear second-order pooling `flatten(Wᵀ Hᵀ H W)`.
pub fn sopool_embed(h: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<GraphEmbedding> {
    if h.ncols() != w.nrows() {
        return Err(Error::shape(format!("{} columns", w.nrows()), format!("{}", h.ncols())));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let wv = tape.leaf(w.clone());
    let z = sopool_on_tape(&mut tape, wv, hv, h.nrows());
    Ok(GraphEmbedding {
        values: tape.value(z).row(0).transpose(),
    })
}

/// Logits and cross-entropy loss `-log softmax(logits)[label]`.
pub fn classify_loss(
    emb: &GraphEmbedding,
    label: usize,
    classifier: &Linear<DMatrix<f64>>,
) -> Result<(DVector<f64>, f64)> {
    if label > 1 {
        return Err(Error::invalid(format!("label {label} outside {{0,1}}")));
    }
    if emb.values.len() != classifier.fan_in() {
        return Err(Error::shape(
            format!("{}-dim embedding", classifier.fan_in()),
            format!("{}", emb.values.len()),
        ));
    }
    let mut tape = Tape::new();
    let bound = classifier.map("classifier", &mut |_, m, _| tape.leaf(m.clone()));
    let z = tape.leaf(DMatrix::from_row_slice(1, emb.values.len(), emb.values.as_slice()));
    let logits = logits_on_tape(&mut tape, &bound, z, None);
    let loss = tape.softmax_cross_entropy(logits, &[label]);
    Ok((tape.value(logits).row(0).transpose(), tape.scalar(loss)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub pool_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 128,
            layers: 5,
            pool_dim: 16,
            dropout: 0.5,
        }
    }
}

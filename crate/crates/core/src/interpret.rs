//! Dominant subgraphs and graph-theoretic profiles of learned edge masks.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{keep_count, ranked_edges, top_edges_adjacency};

pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_DENSITIES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Element-wise mean of same-shaped square matrices.
pub fn mean_mask(masks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = masks.first().ok_or_else(|| Error::invalid("no masks given"))?;
    if !first.is_square() {
        return Err(Error::shape("square masks", format!("{:?}", first.shape())));
    }
    let mut sum = DMatrix::zeros(first.nrows(), first.ncols());
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::shape(format!("{:?}", first.shape()), format!("{:?}", m.shape())));
        }
        sum += m;
    }
    Ok(sum / masks.len() as f64)
}

/// Top `top_k` undirected edges of the mean mask, `i < j`, ties broken
/// lexicographically. Asking for more edges than exist returns all of them.
pub fn dominant_subgraph(masks: &[DMatrix<f64>], top_k: usize) -> Result<Vec<Edge>> {
    let mean = mean_mask(masks)?;
    let edges = ranked_edges(&mean);
    if top_k > edges.len() {
        log::warn!("top_k {top_k} exceeds the {} available edges; returning all", edges.len());
    }
    Ok(edges
        .into_iter()
        .take(top_k)
        .map(|(i, j, weight)| Edge { i, j, weight })
        .collect())
}

/// Fraction of `edges` present in a binary truth mask.
pub fn precision(edges: &[Edge], truth: &DMatrix<f64>) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let hits = edges.iter().filter(|e| truth[(e.i, e.j)] != 0.0).count();
    hits as f64 / edges.len() as f64
}

pub fn edges_csv(edges: &[Edge]) -> String {
    let mut s = String::from("i,j,weight\n");
    for e in edges {
        let _ = writeln!(s, "{},{},{}", e.i, e.j, e.weight);
    }
    s
}

/// Keeps the `⌊d·n(n−1)/2⌋` heaviest undirected edges as a binary graph.
pub fn sparsify_density(w: &DMatrix<f64>, d: f64) -> Result<DMatrix<f64>> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(Error::invalid(format!("density {d} outside (0, 1]")));
    }
    if !w.is_square() {
        return Err(Error::shape("square weights", format!("{:?}", w.shape())));
    }
    Ok(top_edges_adjacency(w, keep_count(d, w.nrows())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Bc,
    Dc,
    Cp,
    Eff,
    LocEff,
    Lp,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Bc, Metric::Dc, Metric::Cp, Metric::Eff, Metric::LocEff, Metric::Lp];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bc => "Bc",
            Metric::Dc => "Dc",
            Metric::Cp => "Cp",
            Metric::Eff => "Eff",
            Metric::LocEff => "LocEff",
            Metric::Lp => "Lp",
        }
    }
}

/// Per-node values of the six metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub bc: Vec<f64>,
    pub dc: Vec<f64>,
    pub cp: Vec<f64>,
    pub eff: Vec<f64>,
    pub loc_eff: Vec<f64>,
    pub lp: Vec<f64>,
}

impl NodeMetrics {
    pub fn get(&self, m: Metric) -> &[f64] {
        match m {
            Metric::Bc => &self.bc,
            Metric::Dc => &self.dc,
            Metric::Cp => &self.cp,
            Metric::Eff => &self.eff,
            Metric::LocEff => &self.loc_eff,
            Metric::Lp => &self.lp,
        }
    }
}

fn neighbours(a: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = a.nrows();
    (0..n)
        .map(|i| (0..n).filter(|&j| j != i && a[(i, j)] != 0.0).collect())
        .collect()
}

/// Hop distances from `s`; `None` marks unreachable nodes.
fn bfs(adj: &[Vec<usize>], s: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[s] = Some(0);
    let mut queue = VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        let dv = dist[v].unwrap();
        for &u in &adj[v] {
            if dist[u].is_none() {
                dist[u] = Some(dv + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Mean inverse distance over ordered pairs of distinct nodes.
fn global_efficiency(adj: &[Vec<usize>]) -> f64 {
    let n = adj.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|s| bfs(adj, s).iter().flatten().filter(|&&d| d > 0).map(|&d| 1.0 / d as f64).sum::<f64>())
        .sum();
    total / (n * (n - 1)) as f64
}

/// Unnormalized betweenness (Brandes), each unordered pair counted once.
fn betweenness(adj: &[Vec<usize>]) -> Vec<f64> {
    let n = adj.len();
    let mut bc = vec![0.0; n];
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0; n];
        let mut dist: Vec<i64> = vec![-1; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in &adj[v] {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0; n];
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                bc[w] += delta[w];
            }
        }
    }
    bc.iter().map(|b| b / 2.0).collect()
}

/// The six nodal metrics of a simple undirected binary graph.
///
/// Eff uses `1/∞ = 0`. Lp averages the finite distances to reachable nodes
/// and is `n` for an isolated node.
pub fn node_metrics(a: &DMatrix<f64>) -> Result<NodeMetrics> {
    if !a.is_square() {
        return Err(Error::shape("square adjacency", format!("{:?}", a.shape())));
    }
    let n = a.nrows();
    let adj = neighbours(a);
    let mut m = NodeMetrics {
        bc: betweenness(&adj),
        dc: adj.iter().map(|nb| nb.len() as f64).collect(),
        cp: vec![0.0; n],
        eff: vec![0.0; n],
        loc_eff: vec![0.0; n],
        lp: vec![0.0; n],
    };
    for v in 0..n {
        let nb = &adj[v];
        let k = nb.len();
        if k >= 2 {
            let links = nb
                .iter()
                .enumerate()
                .flat_map(|(x, &p)| nb[x + 1..].iter().map(move |&q| (p, q)))
                .filter(|&(p, q)| a[(p, q)] != 0.0)
                .count();
            m.cp[v] = 2.0 * links as f64 / (k * (k - 1)) as f64;
            let pos: BTreeMap<usize, usize> = nb.iter().enumerate().map(|(x, &u)| (u, x)).collect();
            let sub: Vec<Vec<usize>> = nb
                .iter()
                .map(|&u| adj[u].iter().filter_map(|w| pos.get(w).copied()).collect())
                .collect();
            m.loc_eff[v] = global_efficiency(&sub);
        }
        let dist = bfs(&adj, v);
        let reach: Vec<usize> = dist.iter().flatten().copied().filter(|&d| d > 0).collect();
        if n > 1 {
            m.eff[v] = reach.iter().map(|&d| 1.0 / d as f64).sum::<f64>() / (n - 1) as f64;
        }
        m.lp[v] = if reach.is_empty() {
            n as f64
        } else {
            reach.iter().sum::<usize>() as f64 / reach.len() as f64
        };
    }
    Ok(m)
}

/// Trapezoidal area under `ys` sampled at increasing `xs`.
pub fn auc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("auc needs at least two matching samples"));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("auc abscissae must increase"));
    }
    Ok(xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum())
}

/// Node-to-system assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemMap {
    /// System name of each node.
    pub assignment: Vec<String>,
}

impl SystemMap {
    pub fn new(assignment: Vec<String>) -> Result<Self> {
        if assignment.is_empty() || assignment.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("system map must name a system for every node"));
        }
        Ok(SystemMap { assignment })
    }

    /// Parses `node_index,system_name` lines; a non-numeric first line is a header.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<usize, String> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (idx, name) = line
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("system map line {}: expected index,name", ln + 1)))?;
            let idx = match idx.trim().parse::<usize>() {
                Ok(i) => i,
                Err(_) if ln == 0 => continue,
                Err(_) => return Err(Error::invalid(format!("system map line {}: bad node index", ln + 1))),
            };
            if entries.insert(idx, name.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("system map assigns node {idx} twice")));
            }
        }
        let n = entries.len();
        if entries.keys().copied().ne(0..n) {
            return Err(Error::invalid("system map must cover nodes 0..n exactly once"));
        }
        SystemMap::new(entries.into_values().collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SystemMap::parse(&text)
    }

    pub fn n_nodes(&self) -> usize {
        self.assignment.len()
    }

    /// Distinct systems in sorted order.
    pub fn systems(&self) -> Vec<String> {
        let mut s = self.assignment.clone();
        s.sort();
        s.dedup();
        s
    }
}

/// Per-node AUC of every metric across `densities` for one weight matrix.
pub fn node_auc(w: &DMatrix<f64>, densities: &[f64]) -> Result<Vec<[f64; 6]>> {
    let per_density: Vec<NodeMetrics> = densities
        .iter()
        .map(|&d| node_metrics(&sparsify_density(w, d)?))
        .collect::<Result<_>>()?;
    (0..w.nrows())
        .map(|v| {
            let mut out = [0.0; 6];
            for (slot, metric) in out.iter_mut().zip(Metric::ALL) {
                let ys: Vec<f64> = per_density.iter().map(|m| m.get(metric)[v]).collect();
                *slot = auc(densities, &ys)?;
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemProfile {
    pub systems: Vec<String>,
    /// Mean AUC per system, metrics in `Metric::ALL` order.
    pub auc: Vec<[f64; 6]>,
}

impl SystemProfile {
    /// Up to two systems with the largest AUC per metric (name order on ties).
    pub fn ranking(&self) -> BTreeMap<String, Vec<String>> {
        Metric::ALL
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut idx: Vec<usize> = (0..self.systems.len()).collect();
                idx.sort_by(|&a, &b| self.auc[b][k].total_cmp(&self.auc[a][k]).then(a.cmp(&b)));
                (m.name().to_string(), idx.iter().take(2).map(|&i| self.systems[i].clone()).collect())
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("system");
        for m in Metric::ALL {
            s.push(',');
            s.push_str(m.name());
        }
        s.push('\n');
        for (name, row) in self.systems.iter().zip(&self.auc) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Averages per-node AUCs within each system, then across subjects.
pub fn profile_systems(weights: &[DMatrix<f64>], map: &SystemMap, densities: &[f64]) -> Result<SystemProfile> {
    if weights.is_empty() {
        return Err(Error::invalid("no subject matrices to profile"));
    }
    if let Some(w) = weights.iter().find(|w| w.nrows() != map.n_nodes() || !w.is_square()) {
        return Err(Error::shape(
            format!("{0}x{0} matrices", map.n_nodes()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    let systems = map.systems();
    let members: Vec<Vec<usize>> = systems
        .iter()
        .map(|s| (0..map.n_nodes()).filter(|&v| &map.assignment[v] == s).collect())
        .collect();
    let per_subject: Vec<Vec<[f64; 6]>> = weights
        .par_iter()
        .map(|w| {
            let nodes = node_auc(w, densities)?;
            Ok(members
                .iter()
                .map(|idx| {
                    let mut acc = [0.0; 6];
                    for &v in idx {
                        for k in 0..6 {
                            acc[k] += nodes[v][k];
                        }
                    }
                    acc.map(|a| a / idx.len() as f64)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let auc = (0..systems.len())
        .map(|s| {
            let mut acc = [0.0; 6];
            for subj in &per_subject {
                for k in 0..6 {
                    acc[k] += subj[s][k];
                }
            }
            acc.map(|a| a / per_subject.len() as f64)
        })
        .collect();
    Ok(SystemProfile { systems, auc })
}

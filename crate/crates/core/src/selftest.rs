//! Analytic oracle checks shipped with the library so they can be run
//! outside the test harness.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Open01};

use crate::encoder::{gin_forward, sopool_embed, EncoderParams, Mode};
use crate::entropy::{self, EntropyConfig, GramMatrix};
use crate::error::Result;
use crate::eval::{kfold_split, loso_split};
use crate::generator::{connectivity_loss, gumbel_sample};
use crate::graph::{complete_adjacency, generate_synthetic, Dataset, Graph, SyntheticConfig};
use crate::interpret::node_metrics;
use crate::model::{Model, ModelConfig, ObjectiveSettings};
use crate::tape::Tape;
use crate::trainer::{objective_gradients, rng_stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let checks: [fn(u64) -> Result<CheckResult>; 10] = [
        entropy_limits,
        shannon_limit,
        mi_properties,
        entropy_gradient,
        objective_gradient,
        gumbel_statistics,
        connectivity_values,
        graph_metrics,
        split_properties,
        permutation_invariance,
    ];
    checks
        .iter()
        .map(|c| c(seed).unwrap_or_else(|e| check("error", false, e.to_string())))
        .collect()
}

pub fn entropy_limits(_seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for n in [2usize, 8, 32] {
        for alpha in [1.01, 2.0] {
            let uniform = GramMatrix::new(DMatrix::identity(n, n) / n as f64, true)?;
            let rank1 = GramMatrix::new(DMatrix::from_element(n, n, 1.0 / n as f64), true)?;
            worst = worst.max((entropy::renyi_entropy(&uniform, alpha)? - (n as f64).log2()).abs());
            worst = worst.max(entropy::renyi_entropy(&rank1, alpha)?.abs());
        }
    }
    Ok(check("entropy limits", worst < 1e-9, format!("max abs error {worst:.2e}")))
}

pub fn shannon_limit(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut closer = 0;
    for _ in 0..100 {
        let a = random_matrix(16, 16, &mut rng);
        let k = &a * a.transpose();
        let g = GramMatrix::new(&k / k.trace(), true)?;
        let hs = entropy::von_neumann_entropy(&g)?;
        let near = (entropy::renyi_entropy(&g, 1.001)? - hs).abs();
        let far = (entropy::renyi_entropy(&g, 1.01)? - hs).abs();
        closer += usize::from(near < far);
    }
    Ok(check("Shannon limit", closer >= 95, format!("{closer}/100 closer at alpha 1.001")))
}

pub fn mi_properties(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EntropyConfig::default();
    let mut violations = 0;
    for _ in 0..1000 {
        let z = random_matrix(32, 8, &mut rng);
        let mix = random_matrix(8, 8, &mut rng) * rng.random_range(0.0..1.0);
        let w = &z * mix + random_matrix(32, 8, &mut rng);
        let ab = entropy::mutual_information(&z, &w, &cfg)?;
        let ba = entropy::mutual_information(&w, &z, &cfg)?;
        let ga = entropy::rbf_gram(&z, entropy::batch_kernel_width(&z, cfg.knn_k)?)?.normalize()?;
        let gb = entropy::rbf_gram(&w, entropy::batch_kernel_width(&w, cfg.knn_k)?)?.normalize()?;
        let joint = entropy::joint_entropy(&ga, &gb, cfg.renyi_alpha)?;
        let ha = entropy::renyi_entropy(&ga, cfg.renyi_alpha)?;
        let hb = entropy::renyi_entropy(&gb, cfg.renyi_alpha)?;
        if (ab - ba).abs() > 1e-12 || ab < -1e-6 || joint < ha.max(hb) - 1e-6 {
            violations += 1;
        }
    }
    Ok(check("MI properties", violations == 0, format!("{violations} violations in 1000 pairs")))
}

pub fn entropy_gradient(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_matrix(8, 3, &mut rng);
    let sigma = entropy::batch_kernel_width(&z, 10)?;
    let alpha = 1.01;
    let g = entropy::entropy_gradient(&z, sigma, alpha)?;
    let h = |z: &DMatrix<f64>| -> Result<f64> {
        entropy::renyi_entropy(&entropy::rbf_gram(z, sigma)?.normalize()?, alpha)
    };
    let step = 1e-5;
    let mut fd = DMatrix::zeros(z.nrows(), z.ncols());
    for k in 0..z.len() {
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[k] += step;
        minus[k] -= step;
        fd[k] = (h(&plus)? - h(&minus)?) / (2.0 * step);
    }
    let rel = (&g - &fd).norm() / fd.norm();
    Ok(check("entropy gradient", rel < 1e-4, format!("relative error {rel:.2e}")))
}

/// Largest per-block relative error between the analytic gradient of the
/// full objective and central differences, with fixed noise and widths.
pub fn objective_gradient_error(seed: u64) -> Result<(String, f64)> {
    let ds = generate_synthetic(&SyntheticConfig {
        n_rois: 10,
        n_per_class: 2,
        planted_edges: 4,
        seed,
        ..Default::default()
    })?;
    let batch: Vec<&Graph> = ds.graphs.iter().collect();
    let cfg = ModelConfig {
        encoder: crate::encoder::EncoderConfig {
            hidden: 6,
            layers: 2,
            pool_dim: 3,
            dropout: 0.5,
        },
        gen_hidden: 5,
        ..Default::default()
    };
    let mut model = Model::init(cfg, 10, &mut rng_stream(seed, Stream::Init))?;
    // move ε and the norm parameters off their initial values
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    model.params.for_each_mut(&mut |_, m, _| {
        m.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    });
    let noise = model.draw_noise(4, &mut rng_stream(seed, Stream::Gumbel), &mut rng_stream(seed, Stream::Dropout));
    let mut settings = ObjectiveSettings {
        conn_weight: 0.5,
        mi_weight: 0.5,
        tau: 1.0,
        entropy: EntropyConfig::default(),
        sigma_override: None,
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    settings.sigma_override = Some(model.forward(&mut tape, &bound, &batch, Some(&noise), Mode::Train, &settings)?.sigmas);
    let (_, grads, _) = objective_gradients(&model, &batch, Some(&noise), &settings)?;

    let value = |m: &Model| -> Result<f64> { Ok(objective_gradients(m, &batch, Some(&noise), &settings)?.0.total) };
    let names: Vec<String> = model.params.leaves().into_iter().map(|(n, _, _)| n).collect();
    let step = 1e-5;
    let mut fds = Vec::with_capacity(grads.len());
    for (b, g) in grads.iter().enumerate() {
        let mut fd = DMatrix::zeros(g.nrows(), g.ncols());
        for k in 0..g.len() {
            let mut shifted = [model.clone(), model.clone()];
            for (s, sign) in shifted.iter_mut().zip([1.0, -1.0]) {
                let mut i = 0;
                s.params.for_each_mut(&mut |_, m, _| {
                    if i == b {
                        m[k] += sign * step;
                    }
                    i += 1;
                });
            }
            fd[k] = (value(&shifted[0])? - value(&shifted[1])?) / (2.0 * step);
        }
        fds.push(fd);
    }
    // biases feeding a batch norm have an exactly zero gradient; their error
    // is measured against a floor tied to the whole gradient
    let floor = 1e-6 * fds.iter().map(|f| f.norm_squared()).sum::<f64>().sqrt();
    let mut worst = (String::new(), 0.0);
    for ((name, g), fd) in names.iter().zip(&grads).zip(&fds) {
        let rel = (g - fd).norm() / fd.norm().max(floor);
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    Ok(worst)
}

pub fn objective_gradient(seed: u64) -> Result<CheckResult> {
    let (name, rel) = objective_gradient_error(seed)?;
    Ok(check(
        "objective gradient",
        rel < 1e-3,
        format!("worst block {name} relative error {rel:.2e}"),
    ))
}

pub fn gumbel_statistics(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, tau) = (0.7f64, 0.5);
    let probs = DMatrix::from_fn(2, 2, |i, j| if i == j { 0.0 } else { p });
    let draws = 10_000;
    let mean = (0..draws)
        .map(|_| gumbel_sample(&probs, tau, &mut rng).map(|s| s[(0, 1)]))
        .sum::<Result<f64>>()?
        / draws as f64;
    // independent two-category Concrete draws
    let g = |rng: &mut ChaCha8Rng| -> f64 {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    };
    let oracle = (0..200_000)
        .map(|_| {
            let a = ((p.ln() + g(&mut rng)) / tau).exp();
            let b = (((1.0 - p).ln() + g(&mut rng)) / tau).exp();
            a / (a + b)
        })
        .sum::<f64>()
        / 200_000.0;
    let entropies: Vec<f64> = [5.0, 1.0, 0.5, 0.1]
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            for _ in 0..2000 {
                let s = gumbel_sample(&probs, t, &mut rng)?[(0, 1)].clamp(1e-300, 1.0 - 1e-16);
                acc -= s * s.log2() + (1.0 - s) * (1.0 - s).log2();
            }
            Ok(acc / 2000.0)
        })
        .collect::<Result<_>>()?;
    let monotone = entropies.windows(2).all(|w| w[1] <= w[0]);
    Ok(check(
        "Gumbel statistics",
        (mean - oracle).abs() <= 0.03 && monotone,
        format!("mean {mean:.4} vs oracle {oracle:.4}; entropies {entropies:.3?}"),
    ))
}

pub fn connectivity_values(_seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = connectivity_loss(&DMatrix::identity(5, 5), &DMatrix::identity(5, 5))?.abs();
    for n in [4usize, 8] {
        let l = connectivity_loss(&DMatrix::from_element(n, n, 1.0), &complete_adjacency(n))?;
        worst = worst.max((l - ((n - 1) as f64).sqrt()).abs());
    }
    Ok(check("connectivity loss", worst < 1e-10, format!("max abs error {worst:.2e}")))
}

/// All-pairs hop distances by repeated relaxation.
fn floyd(a: &DMatrix<f64>) -> Vec<Vec<Option<usize>>> {
    let n = a.nrows();
    let mut d: Vec<Vec<Option<usize>>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { Some(0) } else if a[(i, j)] != 0.0 { Some(1) } else { None }).collect())
        .collect();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(x), Some(y)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| x + y < c) {
                        d[i][j] = Some(x + y);
                    }
                }
            }
        }
    }
    d
}

/// Counts shortest `s`-`t` paths, and those through `v`, by enumeration.
fn count_paths(a: &DMatrix<f64>, d: &[Vec<Option<usize>>], s: usize, t: usize, v: usize) -> (usize, usize) {
    let n = a.nrows();
    let mut total = 0;
    let mut through = 0;
    let mut stack = VecDeque::from([(s, vec![s])]);
    while let Some((u, path)) = stack.pop_back() {
        if u == t {
            total += 1;
            through += usize::from(path.contains(&v));
            continue;
        }
        for w in 0..n {
            if a[(u, w)] != 0.0 && d[s][w] == d[s][u].map(|x| x + 1) && d[w][t].is_some() {
                let mut p = path.clone();
                p.push(w);
                stack.push_back((w, p));
            }
        }
    }
    (total, through)
}

pub fn graph_metrics(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for case in 0..500 {
        let n = rng.random_range(2..=8);
        let density = [0.25, 0.5, 0.75][case % 3];
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(density) {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
        }
        let m = node_metrics(&a)?;
        let d = floyd(&a);
        for v in 0..n {
            let deg = (0..n).filter(|&u| a[(v, u)] != 0.0).count();
            let mut bc = 0.0;
            for s in 0..n {
                for t in (s + 1)..n {
                    if s != v && t != v && d[s][t].is_some() {
                        let (total, through) = count_paths(&a, &d, s, t, v);
                        bc += through as f64 / total as f64;
                    }
                }
            }
            let nb: Vec<usize> = (0..n).filter(|&u| a[(v, u)] != 0.0).collect();
            let mut links = 0;
            for (x, &p) in nb.iter().enumerate() {
                for &q in &nb[x + 1..] {
                    links += usize::from(a[(p, q)] != 0.0);
                }
            }
            let cp = if deg < 2 { 0.0 } else { 2.0 * links as f64 / (deg * (deg - 1)) as f64 };
            let finite: Vec<usize> = (0..n).filter(|&u| u != v).filter_map(|u| d[v][u]).collect();
            let eff = finite.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / (n - 1) as f64;
            let lp = if finite.is_empty() {
                n as f64
            } else {
                finite.iter().sum::<usize>() as f64 / finite.len() as f64
            };
            let loc = if deg < 2 {
                0.0
            } else {
                let sub = DMatrix::from_fn(deg, deg, |x, y| a[(nb[x], nb[y])]);
                let ds = floyd(&sub);
                let mut acc = 0.0;
                for x in 0..deg {
                    for y in 0..deg {
                        if x != y {
                            acc += ds[x][y].map_or(0.0, |l| 1.0 / l as f64);
                        }
                    }
                }
                acc / (deg * (deg - 1)) as f64
            };
            let exact = m.dc[v] == deg as f64 && (m.bc[v] - bc).abs() < 1e-12 && m.cp[v] == cp;
            let close = (m.eff[v] - eff).abs() < 1e-12 && (m.loc_eff[v] - loc).abs() < 1e-12 && (m.lp[v] - lp).abs() < 1e-12;
            if !(exact && close) {
                mismatches += 1;
            }
        }
    }
    Ok(check("graph metrics", mismatches == 0, format!("{mismatches} node mismatches over 500 graphs")))
}

fn labelled_dataset(labels: &[usize], groups: &[String]) -> Result<Dataset> {
    let graphs = labels
        .iter()
        .zip(groups)
        .map(|(&label, group)| Graph {
            adjacency: complete_adjacency(2),
            node_features: DMatrix::zeros(2, 2),
            label,
            group: group.clone(),
        })
        .collect();
    Dataset::new(graphs, vec!["control".into(), "patient".into()], None)
}

pub fn split_properties(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.random_range(20..=200);
        let n_groups = rng.random_range(2..=17);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let groups: Vec<String> = (0..n).map(|i| format!("g{}", i % n_groups)).collect();
        let ds = labelled_dataset(&labels, &groups)?;
        let s = rng.random();
        let plan = kfold_split(&ds, 10, s)?;
        violations += usize::from(plan.validate(n).is_err() || plan != kfold_split(&ds, 10, s)?);
        let mut tested: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort_unstable();
        violations += usize::from(tested != (0..n).collect::<Vec<_>>());
        for f in &plan.folds {
            violations += usize::from(f.test.len().abs_diff(n / 10) > 1 || f.val.len().abs_diff(n / 10) > 1);
        }
        let loso = loso_split(&ds, s)?;
        violations += usize::from(loso.validate(n).is_err() || loso.folds.len() != ds.groups().len());
        for f in &loso.folds {
            let g = f.test_group.as_deref().unwrap_or_default();
            violations += usize::from(f.train.iter().any(|&i| ds.graphs[i].group == g));
        }
    }
    Ok(check("split properties", violations == 0, format!("{violations} violations in 100 cases")))
}

pub fn permutation_invariance(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let params = EncoderParams::init(n, 16, 3, 4, &mut rng);
    let mut running = params.fresh_running_stats();
    for layer in running.iter_mut() {
        for s in layer.iter_mut() {
            s.mean.iter_mut().for_each(|m| *m = rng.random_range(-0.5..0.5));
            s.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = random_matrix(n, n, &mut rng);
        let x = (&x + x.transpose()) / 2.0;
        let g = crate::graph::build_graph(&x, 0, "g", crate::graph::AdjacencyRule::TopFraction(0.4))?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = Graph {
            adjacency: DMatrix::from_fn(n, n, |i, j| g.adjacency[(perm[i], perm[j])]),
            node_features: DMatrix::from_fn(n, n, |i, j| g.node_features[(perm[i], j)]),
            label: 0,
            group: "g".into(),
        };
        let a = sopool_embed(&gin_forward(&g, &params, &running, Mode::Eval)?, &params.pool)?;
        let b = sopool_embed(&gin_forward(&pg, &params, &running, Mode::Eval)?, &params.pool)?;
        worst = worst.max((a.values - b.values).amax());
    }
    Ok(check("permutation invariance", worst < 1e-10, format!("max abs difference {worst:.2e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(7) {
            assert!(r.passed, "{r}");
        }
    }
}

//! Cross-validation splits and the evaluation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph};
use crate::trainer::{self, rng_stream, FitResult, Stream, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Tenfold,
    Loso,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Held-out group for leave-one-group-out folds.
    pub test_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: Scheme,
    pub seed: u64,
    pub folds: Vec<Fold>,
    pub warnings: Vec<String>,
}

impl SplitPlan {
    /// Checks that every fold partitions `0..n` into disjoint non-empty
    /// train and test sets.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.folds.is_empty() {
            return Err(Error::invalid("split plan has no folds"));
        }
        for (f, fold) in self.folds.iter().enumerate() {
            let mut seen = vec![false; n];
            for &i in fold.train.iter().chain(&fold.val).chain(&fold.test) {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("fold {f} repeats or exceeds index {i}")));
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::invalid(format!("fold {f} does not cover every sample")));
            }
            if fold.train.len() < 2 || fold.val.is_empty() || fold.test.is_empty() {
                return Err(Error::invalid(format!("fold {f} has an empty or undersized split")));
            }
        }
        Ok(())
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Label-stratified k folds: fold `i` tests, fold `(i+1) mod k` validates.
pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 3 {
        return Err(Error::invalid(format!("k must be at least 3, got {k}")));
    }
    let counts = ds.class_counts();
    if let Some(c) = (0..2).find(|&c| counts[c] < k) {
        return Err(Error::invalid(format!(
            "class {:?} has {} samples, fewer than k = {k}",
            ds.class_names[c], counts[c]
        )));
    }
    let mut rng = rng_stream(seed, Stream::Split);
    // shuffle within each class, then deal the concatenation round-robin
    let mut dealt = Vec::with_capacity(ds.len());
    for c in 0..2 {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.graphs[i].label == c).collect();
        idx.shuffle(&mut rng);
        dealt.extend(idx);
    }
    let mut buckets = vec![Vec::new(); k];
    for (p, i) in dealt.into_iter().enumerate() {
        buckets[p % k].push(i);
    }
    let folds = (0..k)
        .map(|i| {
            let v = (i + 1) % k;
            let train = (0..k).filter(|&j| j != i && j != v).flat_map(|j| buckets[j].iter().copied());
            Fold {
                train: sorted(train.collect()),
                val: sorted(buckets[v].clone()),
                test: sorted(buckets[i].clone()),
                test_group: None,
            }
        })
        .collect();
    Ok(SplitPlan {
        scheme: Scheme::Tenfold,
        seed,
        folds,
        warnings: Vec::new(),
    })
}

/// Fraction of each class in the training pool held out for validation.
pub const LOSO_VAL_FRACTION: f64 = 0.1;

/// One fold per group; validation is a stratified tenth of the remaining groups.
pub fn loso_split(ds: &Dataset, seed: u64) -> Result<SplitPlan> {
    let groups = ds.groups();
    if groups.len() < 2 {
        return Err(Error::invalid("leave-one-group-out needs at least 2 groups"));
    }
    let mut warnings = Vec::new();
    let mut folds = Vec::with_capacity(groups.len());
    for (f, group) in groups.iter().enumerate() {
        let test: Vec<usize> = (0..ds.len()).filter(|&i| &ds.graphs[i].group == group).collect();
        for c in 0..2 {
            if !test.iter().any(|&i| ds.graphs[i].label == c) {
                let msg = format!("group {group:?} has no {:?} samples", ds.class_names[c]);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let mut rng = rng_stream(seed.wrapping_add(f as u64), Stream::Split);
        let pool: Vec<usize> = (0..ds.len()).filter(|&i| &ds.graphs[i].group != group).collect();
        let (train, val) = carve_validation(ds, &pool, LOSO_VAL_FRACTION, &mut rng);
        if val.is_empty() || train.len() < 2 {
            return Err(Error::invalid(format!("too few training samples outside group {group:?}")));
        }
        folds.push(Fold {
            train,
            val,
            test,
            test_group: Some(group.clone()),
        });
    }
    Ok(SplitPlan {
        scheme: Scheme::Loso,
        seed,
        folds,
        warnings,
    })
}

/// Splits `pool` into (train, val), holding out about `fraction` of each
/// class (at least one sample when the class has two or more).
fn carve_validation(ds: &Dataset, pool: &[usize], fraction: f64, rng: &mut impl rand::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..2 {
        let mut class: Vec<usize> = pool.iter().copied().filter(|&i| ds.graphs[i].label == c).collect();
        class.shuffle(rng);
        let take = if class.len() >= 2 {
            ((class.len() as f64 * fraction).round() as usize).clamp(1, class.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&class[..take]);
        train.extend_from_slice(&class[take..]);
    }
    (sorted(train), sorted(val))
}

/// Stratified (train, val) split of the whole dataset for single-model training.
pub fn holdout_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let (train, val) = carve_validation(ds, &all, val_fraction, &mut rng_stream(seed, Stream::Split));
    if val.is_empty() || train.len() < 2 {
        return Err(Error::invalid("dataset too small for a train/validation split"));
    }
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_group: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub test_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scheme: Scheme,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
    pub warnings: Vec<String>,
}

pub const REPORT_CSV_HEADER: &str = "fold,test_group,n_train,n_val,n_test,test_accuracy,best_epoch,best_val_acc";

impl Report {
    pub fn new(scheme: Scheme, seed: u64, folds: Vec<FoldResult>, warnings: Vec<String>) -> Report {
        let acc: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
        Report {
            scheme,
            seed,
            summary: Summary::of(&acc),
            folds,
            warnings,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        let opt = |v: Option<String>| v.unwrap_or_default();
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                f.fold,
                opt(f.test_group.clone()),
                f.n_train,
                f.n_val,
                f.n_test,
                f.test_accuracy,
                opt(f.best_epoch.map(|e| e.to_string())),
                opt(f.best_val_acc.map(|a| a.to_string())),
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

pub struct Evaluation {
    pub report: Report,
    /// Fitted model per fold, in fold order.
    pub fits: Vec<FitResult>,
}

/// Trains and tests every fold. Folds run on the current rayon pool, each
/// seeded with `cfg.seed + fold`.
pub fn evaluate(plan: &SplitPlan, ds: &Dataset, cfg: &TrainConfig) -> Result<Evaluation> {
    ds.validate()?;
    plan.validate(ds.len())?;
    cfg.validate()?;
    let pick = |idx: &[usize]| -> Vec<&Graph> { idx.iter().map(|&i| &ds.graphs[i]).collect() };
    let outcomes: Vec<Result<(FoldResult, FitResult)>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let fold_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(f as u64),
                ..*cfg
            };
            let fit = trainer::fit(&pick(&fold.train), &pick(&fold.val), &fold_cfg)?;
            let test_accuracy = fit.model.accuracy(&pick(&fold.test))?;
            log::info!("fold {f}: test accuracy {test_accuracy:.3}");
            let result = FoldResult {
                fold: f,
                test_group: fold.test_group.clone(),
                n_train: fold.train.len(),
                n_val: fold.val.len(),
                n_test: fold.test.len(),
                test_accuracy,
                best_epoch: fit.best_epoch,
                best_val_acc: fit.best_val_acc,
            };
            Ok((result, fit))
        })
        .collect();
    let mut results = Vec::new();
    let mut fits = Vec::new();
    for o in outcomes {
        let (r, f) = o?;
        results.push(r);
        fits.push(f);
    }
    Ok(Evaluation {
        report: Report::new(plan.scheme, plan.seed, results, plan.warnings.clone()),
        fits,
    })
}

/// Per-group sample counts, in group order.
pub fn group_sizes(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for g in &ds.graphs {
        *out.entry(g.group.clone()).or_insert(0) += 1;
    }
    out
}

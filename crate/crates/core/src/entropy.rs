//! Matrix-based Rényi α-order entropy and mutual information.
//!
//! Entropy is a functional of the eigenspectrum of a trace-normalized Gram
//! matrix `D = K / tr(K)`:
//!
//! ```text
//! H_α(D) = 1/(1-α) · log₂ Σ_i λ_i(D)^α
//! ```
//!
//! Joint entropy uses the normalized Hadamard product of two Gram matrices
//! and mutual information is `H(a) + H(b) - H(a, b)`. All values are in bits.
//!
//! The kernel is the Gaussian RBF with a width taken as the mean k-nearest
//! neighbour distance of the batch. The width is a statistic of the data and
//! is held constant when differentiating.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RENYI_ALPHA: f64 = 1.01;
pub const DEFAULT_KNN_K: usize = 10;
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// Eigenvalues below this are treated as evidence the input is not PSD.
pub const PSD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub renyi_alpha: f64,
    pub knn_k: usize,
    pub eig_floor: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            renyi_alpha: DEFAULT_RENYI_ALPHA,
            knn_k: DEFAULT_KNN_K,
            eig_floor: DEFAULT_EIG_FLOOR,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.renyi_alpha)?;
        if self.knn_k == 0 {
            return Err(Error::invalid("knn_k must be at least 1"));
        }
        if !(self.eig_floor > 0.0 && self.eig_floor < 1e-3) {
            return Err(Error::invalid(format!(
                "eig_floor {} must lie in (0, 1e-3)",
                self.eig_floor
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) || alpha == 1.0 {
        return Err(Error::invalid(format!(
            "renyi_alpha must be positive and different from 1, got {alpha}"
        )));
    }
    Ok(())
}

/// Symmetric PSD kernel matrix over a batch of `N` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub normalized: bool,
}

impl GramMatrix {
    pub fn new(values: DMatrix<f64>, normalized: bool) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::shape("square Gram matrix", format!("{:?}", values.shape())));
        }
        check_symmetric(&values)?;
        Ok(GramMatrix { values, normalized })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// `K / tr(K)`.
    pub fn normalize(&self) -> Result<GramMatrix> {
        if self.normalized {
            return Ok(self.clone());
        }
        let tr = self.values.trace();
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::invalid(format!("Gram trace {tr} is not positive")));
        }
        Ok(GramMatrix {
            values: &self.values / tr,
            normalized: true,
        })
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let asym = crate::graph::max_asymmetry(m);
    if asym > 1e-10 * m.amax().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Mean over samples of the mean of the `k` smallest nonzero Euclidean
/// distances to other samples. Duplicate samples (zero distance) are skipped;
/// a sample with fewer than `k` nonzero distances uses all of them.
pub fn kernel_width(z: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = z.nrows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n <= k {
        return Err(Error::invalid(format!(
            "kernel width needs more than k={k} samples, got {n}"
        )));
    }
    let sq = pairwise_sq_dists(z);
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut row = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        row.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq[(i, j)].sqrt())
                .filter(|&d| d > 0.0),
        );
        if row.is_empty() {
            continue;
        }
        row.sort_by(f64::total_cmp);
        let take = k.min(row.len());
        total += row[..take].iter().sum::<f64>() / take as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::invalid("all samples are identical; kernel width would be 0"));
    }
    // a sample with no nonzero distance contributes nothing; average over the rest
    let sigma = total / counted as f64;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonFinite("kernel width".into()));
    }
    Ok(sigma)
}

/// Kernel width with `k` reduced to `N - 1` for batches too small for `k`.
pub fn batch_kernel_width(z: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::invalid("kernel width needs at least 2 samples"));
    }
    kernel_width(z, k.min(n - 1))
}

pub(crate) fn pairwise_sq_dists(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (z.row(i) - z.row(j)).norm_squared();
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

/// Unnormalized Gaussian RBF Gram matrix, `exp(-‖z_i - z_j‖² / 2σ²)`.
pub fn rbf_gram(z: &DMatrix<f64>, sigma: f64) -> Result<GramMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(GramMatrix {
        values: rbf_values(z, sigma),
        normalized: false,
    })
}

pub(crate) fn rbf_values(z: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let denom = 2.0 * sigma * sigma;
    let mut k = pairwise_sq_dists(z).map(|d| (-d / denom).exp());
    k.fill_diagonal(1.0);
    k
}

struct Spectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

fn spectrum(d: &DMatrix<f64>) -> Result<Spectrum> {
    check_symmetric(d)?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gram matrix".into()));
    }
    let eig = SymmetricEigen::new(d.clone());
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL {
        return Err(Error::NotPsd(min));
    }
    Ok(Spectrum {
        values: eig.eigenvalues.iter().copied().collect(),
        vectors: eig.eigenvectors,
    })
}

/// `Σ λ^α`, with eigenvalues below the solver's resolution counted as 0.
fn power_sum(values: &[f64], alpha: f64) -> f64 {
    let top = values.iter().copied().fold(0.0, f64::max);
    let resolution = values.len() as f64 * f64::EPSILON * top;
    values
        .iter()
        .filter(|&&l| l > resolution)
        .map(|&l| l.powf(alpha))
        .sum()
}

fn entropy_from_power_sum(s: f64, alpha: f64) -> f64 {
    s.log2() / (1.0 - alpha)
}

/// Rényi α-entropy in bits. Normalizes `gram` by its trace if needed.
pub fn renyi_entropy(gram: &GramMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let d = gram.normalize()?;
    let spec = spectrum(&d.values)?;
    Ok(entropy_from_power_sum(power_sum(&spec.values, alpha), alpha))
}

/// Shannon limit `-Σ λ log₂ λ` of the same spectrum.
pub fn von_neumann_entropy(gram: &GramMatrix) -> Result<f64> {
    let d = gram.normalize()?;
    let spec = spectrum(&d.values)?;
    Ok(spec
        .values
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| -l * l.log2())
        .sum())
}

/// Entropy of a normalized Gram `d` together with `∂H/∂D`.
///
/// The gradient is `α D^{α-1} / ((1-α) ln2 tr(D^α))`, with the spectrum
/// floored at `eig_floor` before the matrix power so it stays finite when
/// eigenvalues vanish.
pub(crate) fn renyi_value_and_grad(
    d: &DMatrix<f64>,
    alpha: f64,
    eig_floor: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let spec = spectrum(d)?;
    let s = power_sum(&spec.values, alpha);
    let h = entropy_from_power_sum(s, alpha);
    let coef = alpha / ((1.0 - alpha) * std::f64::consts::LN_2 * s);
    let powered: Vec<f64> = spec
        .values
        .iter()
        .map(|&l| coef * l.max(eig_floor).powf(alpha - 1.0))
        .collect();
    let v = &spec.vectors;
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * powered[j]);
    let grad = &scaled * v.transpose();
    Ok((h, grad))
}

/// Backward of `D = K / tr(K)`: maps `∂L/∂D` to `∂L/∂K`.
pub(crate) fn trace_normalize_backward(k: &DMatrix<f64>, grad_d: &DMatrix<f64>) -> DMatrix<f64> {
    let tr = k.trace();
    let inner = grad_d.dot(k);
    let mut g = grad_d / tr;
    for i in 0..g.nrows() {
        g[(i, i)] -= inner / (tr * tr);
    }
    g
}

/// Backward of the RBF Gram: maps `∂L/∂K` to `∂L/∂Z` with σ held fixed.
pub(crate) fn rbf_backward(
    z: &DMatrix<f64>,
    k: &DMatrix<f64>,
    sigma: f64,
    grad_k: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = z.nrows();
    let inv_s2 = 1.0 / (sigma * sigma);
    // W_ij = (G_ij + G_ji) K_ij / σ²; ∂L/∂z_i = Σ_j W_ij (z_j - z_i)
    let mut w = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (grad_k[(i, j)] + grad_k[(j, i)]) * k[(i, j)] * inv_s2
        }
    });
    let row_sums: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    for (i, s) in row_sums.into_iter().enumerate() {
        w[(i, i)] = -s;
    }
    w * z
}

fn check_pair(a: &GramMatrix, b: &GramMatrix) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(
            format!("{:?}", a.values.shape()),
            format!("{:?}", b.values.shape()),
        ));
    }
    Ok(())
}

/// Normalized Hadamard product `(D_a ∘ D_b) / tr(D_a ∘ D_b)`.
pub fn joint_gram(a: &GramMatrix, b: &GramMatrix) -> Result<GramMatrix> {
    check_pair(a, b)?;
    let da = a.normalize()?;
    let db = b.normalize()?;
    GramMatrix {
        values: da.values.component_mul(&db.values),
        normalized: false,
    }
    .normalize()
}

pub fn joint_entropy(a: &GramMatrix, b: &GramMatrix, alpha: f64) -> Result<f64> {
    renyi_entropy(&joint_gram(a, b)?, alpha)
}

/// Mutual information between two embedding sets of the same batch. Each
/// set gets its own kernel width.
pub fn mutual_information(z: &DMatrix<f64>, z_sub: &DMatrix<f64>, cfg: &EntropyConfig) -> Result<f64> {
    cfg.validate()?;
    if z.nrows() != z_sub.nrows() {
        return Err(Error::shape(
            format!("{} samples", z.nrows()),
            format!("{} samples", z_sub.nrows()),
        ));
    }
    let ga = rbf_gram(z, batch_kernel_width(z, cfg.knn_k)?)?;
    let gb = rbf_gram(z_sub, batch_kernel_width(z_sub, cfg.knn_k)?)?;
    mutual_information_from_grams(&ga, &gb, cfg.renyi_alpha)
}

pub fn mutual_information_from_grams(a: &GramMatrix, b: &GramMatrix, alpha: f64) -> Result<f64> {
    let ha = renyi_entropy(a, alpha)?;
    let hb = renyi_entropy(b, alpha)?;
    let hab = joint_entropy(a, b, alpha)?;
    Ok(ha + hb - hab)
}

/// `∂H_α(rbf_gram(Z, σ)) / ∂Z` with σ held constant.
pub fn entropy_gradient(z: &DMatrix<f64>, sigma: f64, alpha: f64) -> Result<DMatrix<f64>> {
    entropy_gradient_floored(z, sigma, alpha, DEFAULT_EIG_FLOOR)
}

pub fn entropy_gradient_floored(
    z: &DMatrix<f64>,
    sigma: f64,
    alpha: f64,
    eig_floor: f64,
) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    let k = rbf_gram(z, sigma)?.values;
    let d = &k / k.trace();
    let (_, grad_d) = renyi_value_and_grad(&d, alpha, eig_floor)?;
    let grad_k = trace_normalize_backward(&k, &grad_d);
    Ok(rbf_backward(z, &k, sigma, &grad_k))
}

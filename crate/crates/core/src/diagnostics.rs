//! Scatter identities, likelihoods and prototype-geometry metrics.
//!
//! On the unit sphere `‖f − x‖² = 2(1 − fᵀx)`, so nearest-center assignment under an
//! isotropic Gaussian model is the cosine-argmax classifier. The scatter identities
//! here tie that classifier's objective to the off-diagonal Gram entries of the
//! prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, dot, norm, EmbeddingMatrix};

/// Tolerance for the scatter identities.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Hard assignment of N samples to K classes (each column of the K×N indicator
/// matrix has exactly one 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    k: usize,
    labels: Vec<usize>,
}

impl AssignmentMatrix {
    pub fn from_labels(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::DimensionMismatch(format!("sample {i} has label {l}, but K = {k}")));
        }
        Ok(Self { k, labels })
    }

    /// Builds from a K×N 0/1 indicator matrix.
    pub fn from_indicators(u: &EmbeddingMatrix) -> Result<Self> {
        let (k, n) = u.shape();
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut hit = None;
            let mut count = 0;
            for c in 0..k {
                let v = u.get(c, i);
                if v == 1.0 {
                    hit = Some(c);
                    count += 1;
                } else if v != 0.0 {
                    return Err(Error::InvalidConfig(format!("indicator entry ({c}, {i}) is {v}, expected 0 or 1")));
                }
            }
            match (hit, count) {
                (Some(c), 1) => labels.push(c),
                _ => return Err(Error::EmptyAssignment { sample: i, count }),
            }
        }
        Ok(Self { k, labels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// u_{k,i}
    pub fn get(&self, k: usize, i: usize) -> f64 {
        f64::from(u8::from(self.labels[i] == k))
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn to_indicators(&self) -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::zeros(self.k, self.n());
        for (i, &l) in self.labels.iter().enumerate() {
            m.set(l, i, 1.0);
        }
        m
    }
}

fn check_features(features: &EmbeddingMatrix, u: &AssignmentMatrix) -> Result<()> {
    if features.rows() != u.n() {
        return Err(Error::shape(format!("{} feature rows", u.n()), features.rows().to_string()));
    }
    Ok(())
}

/// Negative log-likelihood of the features under unit-variance isotropic Gaussians
/// centered at the assigned rows of `centers`:
/// `½ Σ u_ik ‖f_i − x_k‖² + N·(d/2)·ln(2π)`.
pub fn gaussian_nll(features: &EmbeddingMatrix, u: &AssignmentMatrix, centers: &EmbeddingMatrix) -> Result<f64> {
    check_features(features, u)?;
    if centers.rows() != u.k() || centers.cols() != features.cols() {
        return Err(Error::shape(
            format!("{}x{}", u.k(), features.cols()),
            format!("{}x{}", centers.rows(), centers.cols()),
        ));
    }
    let quad: f64 = u.labels().iter().enumerate().map(|(i, &k)| dist_sq(features.row(i), centers.row(k))).sum();
    let n = u.n() as f64;
    let d = features.cols() as f64;
    Ok(0.5 * quad + n * 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn require_unit(m: &EmbeddingMatrix) -> Result<()> {
    if m.unit_rows() {
        Ok(())
    } else {
        Err(Error::NotNormalized)
    }
}

/// Assigns each feature to the prototype of largest cosine similarity.
pub fn cosine_assign(features: &EmbeddingMatrix, prototypes: &EmbeddingMatrix) -> Result<AssignmentMatrix> {
    require_unit(features)?;
    require_unit(prototypes)?;
    if features.cols() != prototypes.cols() {
        return Err(Error::shape(format!("{} columns", prototypes.cols()), features.cols().to_string()));
    }
    let labels = features
        .row_iter()
        .map(|f| argmax_lowest(prototypes.row_iter().map(|x| dot(f, x))).expect("K >= 1"))
        .collect();
    AssignmentMatrix::from_labels(labels, prototypes.rows())
}

/// Total, within-class and between-class scatter with class means as centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub within: f64,
    pub total: f64,
    pub between: f64,
    pub global_mean: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
    /// Classes with no assigned sample; they contribute zero to every term.
    pub empty_classes: Vec<usize>,
}

impl ScatterReport {
    /// |within − (total − between)| / max(total, 1).
    pub fn residual(&self) -> f64 {
        (self.within - (self.total - self.between)).abs() / self.total.max(1.0)
    }
}

pub fn huygens(features: &EmbeddingMatrix, u: &AssignmentMatrix) -> Result<ScatterReport> {
    check_features(features, u)?;
    let d = features.cols();
    let n = u.n();
    if n == 0 {
        return Err(Error::EmptyAssignment { sample: 0, count: 0 });
    }
    let counts = u.counts();
    let mut sums = vec![vec![0.0; d]; u.k()];
    let mut global = vec![0.0; d];
    for (i, &l) in u.labels().iter().enumerate() {
        let f = features.row(i);
        sums[l].iter_mut().zip(f).for_each(|(s, x)| *s += x);
        global.iter_mut().zip(f).for_each(|(s, x)| *s += x);
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let class_means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { s } else { s.into_iter().map(|x| x / c as f64).collect() })
        .collect();

    let within = u.labels().iter().enumerate().map(|(i, &l)| dist_sq(features.row(i), &class_means[l])).sum();
    let total = features.row_iter().map(|f| dist_sq(f, &global)).sum();
    let between = class_means.iter().zip(&counts).map(|(m, &c)| c as f64 * dist_sq(m, &global)).sum();
    let empty_classes = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k).collect();
    Ok(ScatterReport { within, total, between, global_mean: global, class_counts: counts, class_means, empty_classes })
}

/// Both sides of the affine link between between-class scatter of unit prototypes and
/// their count-weighted off-diagonal inner products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetweenOffdiag {
    /// Σ_k N_k ‖x_k − f̄‖² with f̄ = Σ_k N_k x_k / N.
    pub between: f64,
    /// Σ_{k≠k'} N_k N_k' / N · x_kᵀ x_k'.
    pub weighted_offdiag: f64,
    /// N − Σ_k N_k² / N.
    pub constant: f64,
}

impl BetweenOffdiag {
    /// |between + weighted_offdiag − constant| / max(constant, 1).
    pub fn residual(&self) -> f64 {
        (self.between + self.weighted_offdiag - self.constant).abs() / self.constant.abs().max(1.0)
    }
}

pub fn between_vs_offdiag(prototypes: &EmbeddingMatrix, counts: &[usize]) -> Result<BetweenOffdiag> {
    require_unit(prototypes)?;
    let k = prototypes.rows();
    if counts.len() != k {
        return Err(Error::shape(format!("{k} counts"), counts.len().to_string()));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidConfig(format!("count for class {i} must be positive")));
    }
    let nk: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let n: f64 = nk.iter().sum();
    let mut fbar = vec![0.0; prototypes.cols()];
    for (x, w) in prototypes.row_iter().zip(&nk) {
        fbar.iter_mut().zip(x).for_each(|(f, xi)| *f += w * xi);
    }
    fbar.iter_mut().for_each(|f| *f /= n);
    let between = prototypes.row_iter().zip(&nk).map(|(x, w)| w * dist_sq(x, &fbar)).sum();
    let mut weighted_offdiag = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            weighted_offdiag += 2.0 * nk[a] * nk[b] / n * dot(prototypes.row(a), prototypes.row(b));
        }
    }
    let constant = n - nk.iter().map(|c| c * c).sum::<f64>() / n;
    Ok(BetweenOffdiag { between, weighted_offdiag, constant })
}

/// Prototype movement and feature-cluster geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub displacement_mean: f64,
    pub displacement_median: f64,
    /// Mean over non-empty classes of the per-class mean (1 − cos(f, f̄_k)).
    pub dispersion: f64,
    pub max_offdiag_gram: f64,
    pub per_class_dispersion: Vec<Option<f64>>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn class_feature_means(features: &EmbeddingMatrix, labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; features.cols()]; k];
    let mut counts = vec![0; k];
    for (f, &l) in features.row_iter().zip(labels) {
        sums[l].iter_mut().zip(f).for_each(|(s, x)| *s += x);
        counts[l] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    (sums, counts)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let den = norm(a) * norm(b);
    if den == 0.0 {
        0.0
    } else {
        dot(a, b) / den
    }
}

pub fn geometry_metrics(
    x: &EmbeddingMatrix,
    v: &EmbeddingMatrix,
    features: &EmbeddingMatrix,
    labels: &[usize],
) -> Result<GeometryMetrics> {
    if x.shape() != v.shape() {
        return Err(Error::shape(format!("{}x{}", v.rows(), v.cols()), format!("{}x{}", x.rows(), x.cols())));
    }
    if features.rows() != labels.len() || features.cols() != x.cols() {
        return Err(Error::shape(
            format!("{}x{}", labels.len(), x.cols()),
            format!("{}x{}", features.rows(), features.cols()),
        ));
    }
    let k = x.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::DimensionMismatch(format!("label {bad} out of range for K = {k}")));
    }
    let disp: Vec<f64> = x.row_iter().zip(v.row_iter()).map(|(a, b)| dist_sq(a, b).sqrt()).collect();
    let displacement_mean = disp.iter().sum::<f64>() / k as f64;

    let (means, counts) = class_feature_means(features, labels, k);
    let mut acc = vec![0.0; k];
    for (f, &l) in features.row_iter().zip(labels) {
        acc[l] += 1.0 - cosine(f, &means[l]);
    }
    let per_class_dispersion: Vec<Option<f64>> =
        acc.iter().zip(&counts).map(|(&a, &c)| (c > 0).then(|| a / c as f64)).collect();
    let present: Vec<f64> = per_class_dispersion.iter().flatten().copied().collect();
    let dispersion = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };

    Ok(GeometryMetrics {
        displacement_mean,
        displacement_median: median(disp),
        dispersion,
        max_offdiag_gram: x.gram().max_abs_offdiag(),
        per_class_dispersion,
    })
}

/// Cosine between each prototype and its class feature mean (`None` for empty classes).
pub fn alignment_to_class_means(
    prototypes: &EmbeddingMatrix,
    features: &EmbeddingMatrix,
    labels: &[usize],
) -> Result<Vec<Option<f64>>> {
    if features.rows() != labels.len() || features.cols() != prototypes.cols() {
        return Err(Error::shape(
            format!("{}x{}", labels.len(), prototypes.cols()),
            format!("{}x{}", features.rows(), features.cols()),
        ));
    }
    let k = prototypes.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::DimensionMismatch(format!("label {bad} out of range for K = {k}")));
    }
    let (means, counts) = class_feature_means(features, labels, k);
    Ok(prototypes
        .row_iter()
        .zip(means.iter().zip(&counts))
        .map(|(x, (m, &c))| (c > 0).then(|| cosine(x, m)))
        .collect())
}

/// Serialized diagnostics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub displacement_mean: f64,
    pub displacement_median: f64,
    pub dispersion: f64,
    pub max_offdiag_gram: f64,
    pub within: f64,
    pub total: f64,
    pub between: f64,
}

impl MetricsRecord {
    pub fn new(g: &GeometryMetrics, s: &ScatterReport) -> Self {
        Self {
            displacement_mean: g.displacement_mean,
            displacement_median: g.displacement_median,
            dispersion: g.dispersion,
            max_offdiag_gram: g.max_offdiag_gram,
            within: s.within,
            total: s.total,
            between: s.between,
        }
    }
}

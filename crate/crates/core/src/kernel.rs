//! Exponential chi-square and RBF kernels, the kNN similarity graph and its
//! unnormalized Laplacian.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwslError};

/// Guard added to every chi-square denominator so shared empty bins give 0/ε.
pub const CHI2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `exp(-gamma * chi2(x, y))`
    ExpChi2,
    /// `exp(-|x - y|^2 / (2 sigma^2))`
    Rbf,
}

/// A fully resolved kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub gamma: f64,
    pub sigma: f64,
}

impl KernelConfig {
    pub fn exp_chi2(gamma: f64) -> Self {
        KernelConfig {
            kind: KernelKind::ExpChi2,
            gamma,
            sigma: 1.0,
        }
    }

    pub fn rbf(sigma: f64) -> Self {
        KernelConfig {
            kind: KernelKind::Rbf,
            gamma: 1.0,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            KernelKind::ExpChi2 => self.gamma > 0.0 && self.gamma.is_finite(),
            KernelKind::Rbf => self.sigma > 0.0 && self.sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SwslError::InvalidArgument(format!(
                "kernel parameters must be positive and finite: {self:?}"
            )))
        }
    }

    /// Check that a feature vector is a valid input for this kernel.
    pub fn check_features(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SwslError::NonFinite("kernel input".into()));
        }
        if self.kind == KernelKind::ExpChi2 {
            check_non_negative(x)?;
        }
        Ok(())
    }

    /// Kernel value for two already-validated vectors of equal length.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::ExpChi2 => (-self.gamma * chi2_unchecked(x, y)).exp(),
            KernelKind::Rbf => (-squared_euclidean(x, y) / (2.0 * self.sigma * self.sigma)).exp(),
        }
    }
}

fn check_non_negative(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| v < 0.0) {
        Some(i) => Err(SwslError::InvalidData(format!(
            "chi-square input has negative entry {} at position {i}",
            x[i]
        ))),
        None => Ok(()),
    }
}

pub(crate) fn chi2_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        let diff = a - b;
        acc += diff * diff / (a + b + CHI2_EPS);
    }
    0.5 * acc
}

pub(crate) fn squared_euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `½ Σ (x_i - y_i)² / (x_i + y_i + ε)` for non-negative vectors.
pub fn chi_square_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(SwslError::dim(x.len(), y.len()));
    }
    check_non_negative(x)?;
    check_non_negative(y)?;
    Ok(chi2_unchecked(x, y))
}

fn check_all(features: &[Vec<f64>], kernel: Option<&KernelConfig>) -> Result<usize> {
    let dim = features.first().map(Vec::len).unwrap_or(0);
    for x in features {
        if x.len() != dim {
            return Err(SwslError::dim(dim, x.len()));
        }
        if let Some(k) = kernel {
            k.check_features(x)?;
        }
    }
    Ok(dim)
}

/// Inverse of the mean chi-square distance over all unordered distinct pairs.
pub fn estimate_gamma(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(SwslError::InvalidArgument(
            "gamma estimation needs at least two points".into(),
        ));
    }
    check_all(features, Some(&KernelConfig::exp_chi2(1.0)))?;
    let n = features.len();
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| chi2_unchecked(&features[i], &features[j]))
                .sum::<f64>()
        })
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    let mean = row_sums.iter().sum::<f64>() / pairs;
    if mean <= 0.0 {
        return Err(SwslError::InvalidData(
            "all points coincide; mean chi-square distance is zero".into(),
        ));
    }
    Ok(1.0 / mean)
}

/// Symmetric Gram matrix over `features`.
pub fn kernel_matrix(features: &[Vec<f64>], kernel: &KernelConfig) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    check_all(features, Some(kernel))?;
    let n = features.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| kernel.eval(&features[i], &features[j]))
                .collect()
        })
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in upper.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            k[(i, i + off)] = v;
            k[(i + off, i)] = v;
        }
    }
    Ok(k)
}

/// Rectangular kernel matrix with rows from `left` and columns from `right`.
pub fn cross_kernel(
    left: &[Vec<f64>],
    right: &[Vec<f64>],
    kernel: &KernelConfig,
) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    let dl = check_all(left, Some(kernel))?;
    let dr = check_all(right, Some(kernel))?;
    if !left.is_empty() && !right.is_empty() && dl != dr {
        return Err(SwslError::dim(dr, dl));
    }
    let rows: Vec<Vec<f64>> = left
        .par_iter()
        .map(|x| right.iter().map(|y| kernel.eval(x, y)).collect())
        .collect();
    Ok(DMatrix::from_fn(left.len(), right.len(), |i, j| rows[i][j]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMetric {
    Chi2,
    Euclidean,
}

/// Settings for the kNN similarity graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k: usize,
    pub sigma: f64,
    pub metric: GraphMetric,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 20,
            sigma: 1.0,
            metric: GraphMetric::Chi2,
        }
    }
}

/// Symmetric kNN weights `W`, degrees `D` and `L = D - W`.
#[derive(Clone, Debug)]
pub struct GraphLaplacian {
    pub weights: DMatrix<f64>,
    pub degrees: DVector<f64>,
    pub laplacian: DMatrix<f64>,
}

impl GraphLaplacian {
    /// Laplacian of a graph with no edges, used when a graph is not wanted.
    pub fn empty(n: usize) -> Self {
        GraphLaplacian {
            weights: DMatrix::zeros(n, n),
            degrees: DVector::zeros(n),
            laplacian: DMatrix::zeros(n, n),
        }
    }

    pub fn from_weights(weights: DMatrix<f64>) -> Self {
        let n = weights.nrows();
        let degrees = DVector::from_fn(n, |i, _| weights.row(i).sum());
        let mut laplacian = -weights.clone();
        for i in 0..n {
            laplacian[(i, i)] += degrees[i];
        }
        GraphLaplacian {
            weights,
            degrees,
            laplacian,
        }
    }

    pub fn num_edges(&self) -> usize {
        let n = self.weights.nrows();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.weights[(i, j)] > 0.0)
            .count()
    }
}

/// kNN graph over `features`: `i ~ j` when either is among the other's `k`
/// nearest neighbours (distance ties broken by lower index). Edge weights are
/// `exp(-dist² / (2σ²))` with `dist` taken in the chosen metric.
pub fn knn_graph(features: &[Vec<f64>], cfg: &GraphConfig) -> Result<GraphLaplacian> {
    let n = features.len();
    if cfg.k < 1 || cfg.k >= n {
        return Err(SwslError::InvalidArgument(format!(
            "graph needs 1 <= k < N, got k = {} with N = {n}",
            cfg.k
        )));
    }
    if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
        return Err(SwslError::InvalidArgument(format!(
            "graph sigma must be positive, got {}",
            cfg.sigma
        )));
    }
    match cfg.metric {
        GraphMetric::Chi2 => {
            check_all(features, Some(&KernelConfig::exp_chi2(1.0)))?;
        }
        GraphMetric::Euclidean => {
            check_all(features, None)?;
        }
    }
    let dist = |i: usize, j: usize| match cfg.metric {
        GraphMetric::Chi2 => chi2_unchecked(&features[i], &features[j]),
        GraphMetric::Euclidean => squared_euclidean(&features[i], &features[j]).sqrt(),
    };
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { dist(i, j) })
                .collect()
        })
        .collect();

    let mut adjacent = vec![vec![false; n]; n];
    for (i, row) in rows.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &j in order.iter().take(cfg.k) {
            adjacent[i][j] = true;
            adjacent[j][i] = true;
        }
    }

    let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
    let weights = DMatrix::from_fn(n, n, |i, j| {
        if i != j && adjacent[i][j] {
            let d = rows[i][j];
            (-d * d / two_s2).exp()
        } else {
            0.0
        }
    });
    Ok(GraphLaplacian::from_weights(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn chi2_hand_cases() {
        assert_eq!(chi_square_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            chi_square_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            1.0,
            epsilon = 1e-11
        );
        assert!(chi_square_distance(&[-0.1, 1.0], &[0.0, 1.0]).is_err());
        assert!(chi_square_distance(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn chi2_matches_termwise_loop() {
        let x = [0.1, 0.0, 0.4, 0.5];
        let y = [0.3, 0.2, 0.0, 0.5];
        let mut expected = 0.0;
        for i in 0..4 {
            let num = (x[i] - y[i]) * (x[i] - y[i]);
            expected += num / (x[i] + y[i] + 1e-12);
        }
        expected /= 2.0;
        assert_abs_diff_eq!(
            chi_square_distance(&x, &y).unwrap(),
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn gamma_rejects_coincident_points() {
        let same = vec![vec![0.5, 0.5]; 3];
        assert!(estimate_gamma(&same).is_err());
        assert!(estimate_gamma(&[vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn gamma_two_points_at_distance_two() {
        // ½·(4 - 0)²/4 = 2
        let g = estimate_gamma(&[vec![4.0], vec![0.0]]).unwrap();
        assert_abs_diff_eq!(g, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn gamma_three_points_distances_one_two_three() {
        // Disjoint supports: d = ½(|x|₁ + |y|₁), so masses 0, 2, 4 give 1, 2, 3.
        let pts = [
            vec![0.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 4.0],
        ];
        assert_abs_diff_eq!(
            chi_square_distance(&pts[0], &pts[1]).unwrap(),
            1.0,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            chi_square_distance(&pts[0], &pts[2]).unwrap(),
            2.0,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            chi_square_distance(&pts[1], &pts[2]).unwrap(),
            3.0,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(estimate_gamma(&pts).unwrap(), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn kernel_scalar_and_diagonal() {
        let k = KernelConfig::exp_chi2(1.0);
        let x = vec![1.0, 0.0];
        let y = vec![0.0, 1.0];
        let m = kernel_matrix(&[x, y], &k).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_abs_diff_eq!(m[(0, 1)], (-1.0f64).exp(), epsilon = 1e-11);
        assert_abs_diff_eq!(m[(0, 1)], 0.367879, epsilon = 1e-6);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }

    #[test]
    fn kernel_rejects_negative_histograms() {
        let k = KernelConfig::exp_chi2(1.0);
        assert!(kernel_matrix(&[vec![0.5, -0.5]], &k).is_err());
        assert!(kernel_matrix(&[vec![0.5, -0.5]], &KernelConfig::rbf(1.0)).is_ok());
    }

    #[test]
    fn collinear_knn_graph() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let g = knn_graph(
            &pts,
            &GraphConfig {
                k: 1,
                sigma: 1.0,
                metric: GraphMetric::Euclidean,
            },
        )
        .unwrap();
        let w = (-0.5f64).exp();
        assert_abs_diff_eq!(g.weights[(0, 1)], w, epsilon = 1e-15);
        assert_abs_diff_eq!(g.weights[(1, 2)], w, epsilon = 1e-15);
        assert_eq!(g.weights[(0, 2)], 0.0);
        assert_eq!(g.num_edges(), 2);
        for i in 0..3 {
            assert!(g.laplacian.row(i).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn identical_points_have_unit_weights() {
        let pts = vec![vec![0.25, 0.75]; 5];
        let g = knn_graph(
            &pts,
            &GraphConfig {
                k: 2,
                sigma: 1.0,
                metric: GraphMetric::Chi2,
            },
        )
        .unwrap();
        for w in g.weights.iter() {
            assert!(*w == 0.0 || *w == 1.0);
        }
        assert!(g.num_edges() >= 5);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let pts = vec![vec![0.0], vec![1.0]];
        let mut cfg = GraphConfig {
            k: 2,
            sigma: 1.0,
            metric: GraphMetric::Euclidean,
        };
        assert!(knn_graph(&pts, &cfg).is_err());
        cfg.k = 0;
        assert!(knn_graph(&pts, &cfg).is_err());
    }

    fn histograms(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum::<f64>() + 1e-9;
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn chi2_symmetric_non_negative(
            x in prop::collection::vec(0.0f64..5.0, 6),
            y in prop::collection::vec(0.0f64..5.0, 6),
        ) {
            let a = chi_square_distance(&x, &y).unwrap();
            let b = chi_square_distance(&y, &x).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn knn_graph_permutation_invariant(pts in histograms(12, 4), shift in 1usize..11) {
            let cfg = GraphConfig { k: 3, sigma: 1.0, metric: GraphMetric::Chi2 };
            // Distinct distances almost surely, so tie-breaking does not interfere.
            let perm: Vec<usize> = (0..12).map(|i| (i + shift) % 12).collect();
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| pts[p].clone()).collect();
            let g = knn_graph(&pts, &cfg).unwrap();
            let gp = knn_graph(&permuted, &cfg).unwrap();
            for i in 0..12 {
                for j in 0..12 {
                    prop_assert_eq!(gp.weights[(i, j)], g.weights[(perm[i], perm[j])]);
                }
            }
        }
    }
}

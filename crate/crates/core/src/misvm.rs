//! Kernel SVM (SMO dual solver), the miSVM alternating heuristic, and
//! naiveSWSL, which feeds supervised instances to miSVM as singleton bags.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::data::{Label, SwslDataset};
use crate::error::{Result, SwslError};
use crate::kernel::{kernel_matrix, KernelConfig};
use crate::model::{Model, ModelMeta};

const TAU: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// Soft-margin penalty `C`.
    pub slack_c: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    pub max_updates: usize,
    /// Outer relabeling rounds for miSVM.
    pub max_outer: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            slack_c: 1.0,
            tol: 1e-5,
            max_updates: 100_000,
            max_outer: 20,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slack_c > 0.0 && self.slack_c.is_finite()) {
            return Err(SwslError::InvalidArgument(
                "slack_c must be positive".into(),
            ));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_updates == 0 || self.max_outer == 0 {
            return Err(SwslError::InvalidArgument(
                "svm tolerance and iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Solution of the soft-margin dual.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    /// `y_i a_i` for every training instance.
    pub dual_coefficients: Vec<f64>,
    pub bias: f64,
    pub support_indices: Vec<usize>,
    pub kernel: KernelConfig,
    pub slack_c: f64,
    /// Final maximal violating-pair gap.
    pub kkt_gap: f64,
    pub dual_objective: f64,
    pub updates: usize,
}

impl SvmModel {
    /// Decision values on the training set, given its Gram matrix.
    pub fn training_scores(&self, gram: &DMatrix<f64>) -> Vec<f64> {
        (0..gram.nrows())
            .map(|i| {
                self.support_indices
                    .iter()
                    .map(|&j| self.dual_coefficients[j] * gram[(i, j)])
                    .sum::<f64>()
                    + self.bias
            })
            .collect()
    }

    /// Portable model keeping only the support vectors.
    pub fn to_model(&self, features: &[Vec<f64>], method: Method, meta: ModelMeta) -> Model {
        Model {
            method,
            alpha: self
                .support_indices
                .iter()
                .map(|&i| self.dual_coefficients[i])
                .collect(),
            bias: self.bias,
            train_features: self
                .support_indices
                .iter()
                .map(|&i| features[i].clone())
                .collect(),
            kernel: self.kernel,
            meta: ModelMeta {
                support_indices: Some(self.support_indices.clone()),
                ..meta
            },
        }
    }
}

fn check_labels(labels: &[Label]) -> Result<()> {
    let pos = labels.iter().any(|l| l.is_positive());
    let neg = labels.iter().any(|l| !l.is_positive());
    if pos && neg {
        Ok(())
    } else {
        Err(SwslError::InvalidData(
            "SVM training needs both positive and negative examples".into(),
        ))
    }
}

/// SMO over a precomputed Gram matrix, with maximal-violating-pair selection.
pub fn train_svm_gram(
    gram: &DMatrix<f64>,
    labels: &[Label],
    kernel: &KernelConfig,
    cfg: &SvmConfig,
) -> Result<SvmModel> {
    cfg.validate()?;
    let n = labels.len();
    if gram.shape() != (n, n) {
        return Err(SwslError::dim_in(n, gram.nrows(), "gram matrix"));
    }
    check_labels(labels)?;
    let c = cfg.slack_c;
    let y: Vec<f64> = labels.iter().map(|l| l.value()).collect();
    let mut a = vec![0.0; n];
    // Gradient of ½ aᵀQa - Σa with Q_ij = y_i y_j K_ij.
    let mut g = vec![-1.0; n];

    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut updates = 0;
    let mut gap;
    loop {
        let mut i = None;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = None;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * g[t];
            if in_up(a[t], y[t]) && v > gmax {
                gmax = v;
                i = Some(t);
            }
            if in_low(a[t], y[t]) && v < gmin {
                gmin = v;
                j = Some(t);
            }
        }
        gap = gmax - gmin;
        let (Some(i), Some(j)) = (i, j) else { break };
        if gap < cfg.tol {
            break;
        }
        if updates == cfg.max_updates {
            log::warn!("SMO stopped after {updates} updates with KKT gap {gap:.3e}");
            break;
        }
        updates += 1;

        let (ai_old, aj_old) = (a[i], a[j]);
        let qij = y[i] * y[j] * gram[(i, j)];
        let (qii, qjj) = (gram[(i, i)], gram[(j, j)]);
        if y[i] != y[j] {
            let quad = (qii + qjj + 2.0 * qij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > c {
                    a[i] = c;
                    a[j] = c - diff;
                }
            } else if a[j] > c {
                a[j] = c;
                a[i] = c + diff;
            }
        } else {
            let quad = (qii + qjj - 2.0 * qij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > c {
                if a[i] > c {
                    a[i] = c;
                    a[j] = sum - c;
                }
            } else if a[j] < 0.0 {
                a[j] = 0.0;
                a[i] = sum;
            }
            if sum > c {
                if a[j] > c {
                    a[j] = c;
                    a[i] = sum - c;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = sum;
            }
        }
        let (di, dj) = (a[i] - ai_old, a[j] - aj_old);
        for t in 0..n {
            g[t] += y[t] * (y[i] * gram[(t, i)] * di + y[j] * gram[(t, j)] * dj);
        }
    }

    // Bias from free vectors, or the middle of the feasible interval.
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * g[t];
        if a[t] > 0.0 && a[t] < c {
            free_sum += yg;
            free += 1;
        } else if (a[t] >= c && y[t] < 0.0) || (a[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        0.5 * (ub + lb)
    };
    let dual_objective = a.iter().sum::<f64>()
        - 0.5
            * a.iter()
                .zip(&g)
                .map(|(ai, gi)| ai * (gi + 1.0))
                .sum::<f64>();
    Ok(SvmModel {
        dual_coefficients: a.iter().zip(&y).map(|(ai, yi)| ai * yi).collect(),
        bias: -rho,
        support_indices: (0..n).filter(|&t| a[t] > 0.0).collect(),
        kernel: *kernel,
        slack_c: c,
        kkt_gap: gap,
        dual_objective,
        updates,
    })
}

/// Soft-margin kernel SVM over labeled instances.
pub fn train_kernel_svm(
    features: &[Vec<f64>],
    labels: &[Label],
    kernel: &KernelConfig,
    cfg: &SvmConfig,
) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(SwslError::dim_in(features.len(), labels.len(), "labels"));
    }
    check_labels(labels)?;
    let gram = kernel_matrix(features, kernel)?;
    train_svm_gram(&gram, labels, kernel, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilBag {
    pub label: Label,
    /// Indices into [`MilProblem::features`].
    pub members: Vec<usize>,
}

/// Bags over a flat feature table; members of each bag are contiguous and
/// appear in bag order.
#[derive(Clone, Debug, PartialEq)]
pub struct MilProblem {
    pub features: Vec<Vec<f64>>,
    pub bags: Vec<MilBag>,
}

impl MilProblem {
    fn push_bag(&mut self, label: Label, members: Vec<Vec<f64>>) {
        let start = self.features.len();
        let idx = (start..start + members.len()).collect();
        self.features.extend(members);
        self.bags.push(MilBag {
            label,
            members: idx,
        });
    }

    /// The dataset's bags only; supervised instances are ignored.
    pub fn weak_only(dataset: &SwslDataset) -> Self {
        let mut p = MilProblem {
            features: Vec::new(),
            bags: Vec::new(),
        };
        for bag in dataset.bags() {
            let feats = dataset
                .bag_features(bag)
                .into_iter()
                .map(<[f64]>::to_vec)
                .collect();
            p.push_bag(bag.label, feats);
        }
        p
    }

    /// Supervised instances as singleton bags (in file order), then the dataset's bags.
    pub fn with_singletons(dataset: &SwslDataset) -> Self {
        let mut p = MilProblem {
            features: Vec::new(),
            bags: Vec::new(),
        };
        for inst in dataset.supervised() {
            p.push_bag(
                inst.label.expect("supervised instances are labeled"),
                vec![inst.features.clone()],
            );
        }
        let weak = Self::weak_only(dataset);
        for bag in weak.bags {
            p.push_bag(
                bag.label,
                bag.members
                    .iter()
                    .map(|&i| weak.features[i].clone())
                    .collect(),
            );
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags.iter().any(|b| b.members.is_empty()) {
            return Err(SwslError::InvalidData("MIL bags must be non-empty".into()));
        }
        let pos = self.bags.iter().any(|b| b.label.is_positive());
        let neg = self.bags.iter().any(|b| !b.label.is_positive());
        if !(pos && neg) {
            return Err(SwslError::InvalidData(
                "miSVM needs at least one positive and one negative bag".into(),
            ));
        }
        Ok(())
    }

    /// True when every positive bag holds at least one positive label.
    pub fn satisfies_bag_constraint(&self, labels: &[Label]) -> bool {
        self.bags
            .iter()
            .filter(|b| b.label.is_positive())
            .all(|b| b.members.iter().any(|&i| labels[i].is_positive()))
    }
}

#[derive(Clone, Debug)]
pub struct MisvmFit {
    pub svm: SvmModel,
    /// Working instance labels after the last outer round.
    pub labels: Vec<Label>,
    /// Label assignment after every outer round.
    pub label_history: Vec<Vec<Label>>,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// miSVM: label every positive-bag instance +1, then alternate SVM training
/// and relabeling by decision sign, forcing each positive bag's top-scoring
/// member to +1 when the bag would otherwise have no positive. Negative-bag
/// instances stay -1 throughout.
pub fn train_misvm(
    problem: &MilProblem,
    kernel: &KernelConfig,
    cfg: &SvmConfig,
) -> Result<MisvmFit> {
    cfg.validate()?;
    problem.validate()?;
    let gram = kernel_matrix(&problem.features, kernel)?;
    let mut labels = vec![Label::Negative; problem.features.len()];
    for bag in &problem.bags {
        for &i in &bag.members {
            labels[i] = bag.label;
        }
    }

    let mut history = Vec::new();
    let mut outer = 0;
    loop {
        outer += 1;
        let svm = train_svm_gram(&gram, &labels, kernel, cfg)?;
        let scores = svm.training_scores(&gram);
        let mut next = labels.clone();
        for bag in problem.bags.iter().filter(|b| b.label.is_positive()) {
            for &i in &bag.members {
                next[i] = if scores[i] > 0.0 {
                    Label::Positive
                } else {
                    Label::Negative
                };
            }
            if !bag.members.iter().any(|&i| next[i].is_positive()) {
                let mut best = bag.members[0];
                for &i in &bag.members[1..] {
                    if scores[i] > scores[best] {
                        best = i;
                    }
                }
                next[best] = Label::Positive;
            }
        }
        history.push(next.clone());
        let converged = next == labels;
        if converged || outer == cfg.max_outer {
            return Ok(MisvmFit {
                svm,
                labels: next,
                label_history: history,
                outer_iterations: outer,
                converged,
            });
        }
        labels = next;
    }
}

/// naiveSWSL: miSVM with every supervised instance as a singleton bag.
pub fn train_naive_swsl(
    dataset: &SwslDataset,
    kernel: &KernelConfig,
    cfg: &SvmConfig,
) -> Result<MisvmFit> {
    train_misvm(&MilProblem::with_singletons(dataset), kernel, cfg)
}

/// Package a miSVM fit as a portable model.
pub fn misvm_model(problem: &MilProblem, fit: &MisvmFit, method: Method, cfg: &SvmConfig) -> Model {
    fit.svm.to_model(
        &problem.features,
        method,
        ModelMeta {
            config: serde_json::json!({ "svm": cfg }),
            stop_reason: Some(
                if fit.converged {
                    "labels_stable"
                } else {
                    "max_outer"
                }
                .into(),
            ),
            outer_iterations: Some(fit.outer_iterations),
            ..ModelMeta::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Bag, Instance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable_2d(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 {
                Label::Positive
            } else {
                Label::Negative
            };
            let shift = label.value() * 1.5;
            feats.push(vec![
                shift + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            labels.push(label);
        }
        (feats, labels)
    }

    /// Independent KKT check: y_i f_i ≥ 1 at a = 0, = 1 when free, ≤ 1 at a = C.
    fn max_kkt_violation(gram: &DMatrix<f64>, labels: &[Label], m: &SvmModel) -> f64 {
        let scores = m.training_scores(gram);
        let mut worst: f64 = 0.0;
        for i in 0..labels.len() {
            let a = m.dual_coefficients[i].abs();
            let margin = labels[i].value() * scores[i];
            let v = if a <= 0.0 {
                (1.0 - margin).max(0.0)
            } else if a >= m.slack_c {
                (margin - 1.0).max(0.0)
            } else {
                (margin - 1.0).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    #[test]
    fn two_points_become_support_vectors() {
        let feats = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let labels = vec![Label::Positive, Label::Negative];
        let k = KernelConfig::rbf(1.0);
        let m = train_kernel_svm(&feats, &labels, &k, &SvmConfig::default()).unwrap();
        assert_eq!(m.support_indices, vec![0, 1]);
        let gram = kernel_matrix(&feats, &k).unwrap();
        let s = m.training_scores(&gram);
        assert!(s[0] > 0.0 && s[1] < 0.0);
        assert!(m.dual_objective > 0.0);
    }

    #[test]
    fn separable_set_is_fit_exactly() {
        let (feats, labels) = separable_2d(3, 20);
        let k = KernelConfig::rbf(1.0);
        let cfg = SvmConfig {
            slack_c: 1e3,
            ..SvmConfig::default()
        };
        let m = train_kernel_svm(&feats, &labels, &k, &cfg).unwrap();
        let gram = kernel_matrix(&feats, &k).unwrap();
        for (s, l) in m.training_scores(&gram).iter().zip(&labels) {
            assert!(s * l.value() > 0.0);
        }
        assert!(m.kkt_gap < 1e-5);
        assert!(max_kkt_violation(&gram, &labels, &m) < 1e-4);
        for c in &m.dual_coefficients {
            assert!(c.abs() <= cfg.slack_c);
        }
    }

    #[test]
    fn kkt_holds_on_random_problems() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<Vec<f64>> = (0..30)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let labels: Vec<Label> = feats
                .iter()
                .map(|f| Label::from_sign(f[0] + 0.3 * rng.random_range(-1.0..1.0)))
                .collect();
            let k = KernelConfig::rbf(0.7);
            let cfg = SvmConfig {
                slack_c: 2.0,
                ..SvmConfig::default()
            };
            let m = train_kernel_svm(&feats, &labels, &k, &cfg).unwrap();
            let gram = kernel_matrix(&feats, &k).unwrap();
            assert!(max_kkt_violation(&gram, &labels, &m) < 1e-4);
            let balance: f64 = m.dual_coefficients.iter().sum();
            assert!(balance.abs() < 1e-10);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let feats = vec![vec![0.0], vec![1.0]];
        let labels = vec![Label::Positive; 2];
        assert!(train_kernel_svm(
            &feats,
            &labels,
            &KernelConfig::rbf(1.0),
            &SvmConfig::default()
        )
        .is_err());
    }

    fn toy_dataset(witness_all: bool) -> SwslDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut instances = Vec::new();
        let mut bags = Vec::new();
        for t in 0..6 {
            let positive = t < 3;
            let ids: Vec<String> = (0..4).map(|j| format!("b{t}_{j}")).collect();
            for (j, id) in ids.iter().enumerate() {
                let truly = positive && (witness_all || j == 0);
                let c = if truly { 0.8 } else { 0.2 };
                let x = c + rng.random_range(-0.05..0.05);
                instances.push(Instance::new(id.clone(), vec![x, 1.0 - x], None));
            }
            let label = if positive {
                Label::Positive
            } else {
                Label::Negative
            };
            bags.push(Bag::new(format!("b{t}"), label, ids));
        }
        SwslDataset::new(instances, bags).unwrap()
    }

    #[test]
    fn misvm_with_full_witnesses_converges_fast() {
        let ds = toy_dataset(true);
        let problem = MilProblem::weak_only(&ds);
        let cfg = SvmConfig {
            slack_c: 100.0,
            ..SvmConfig::default()
        };
        let fit = train_misvm(&problem, &KernelConfig::exp_chi2(5.0), &cfg).unwrap();
        assert!(fit.converged && fit.outer_iterations <= 2);
        for bag in problem.bags.iter().filter(|b| b.label.is_positive()) {
            assert!(bag.members.iter().all(|&i| fit.labels[i].is_positive()));
        }
    }

    #[test]
    fn misvm_keeps_bag_constraint_and_fixed_point() {
        let ds = toy_dataset(false);
        let problem = MilProblem::weak_only(&ds);
        let k = KernelConfig::exp_chi2(5.0);
        let fit = train_misvm(&problem, &k, &SvmConfig::default()).unwrap();
        for labels in &fit.label_history {
            assert!(problem.satisfies_bag_constraint(labels));
        }
        for bag in problem.bags.iter().filter(|b| !b.label.is_positive()) {
            assert!(bag.members.iter().all(|&i| !fit.labels[i].is_positive()));
        }
        if fit.converged {
            let gram = kernel_matrix(&problem.features, &k).unwrap();
            let scores = fit.svm.training_scores(&gram);
            for bag in problem.bags.iter().filter(|b| b.label.is_positive()) {
                let forced = !bag.members.iter().any(|&i| scores[i] > 0.0);
                for &i in &bag.members {
                    if !forced {
                        assert_eq!(fit.labels[i], Label::from_sign(scores[i]));
                    }
                }
            }
        }
    }

    #[test]
    fn naive_swsl_without_bags_is_plain_svm() {
        let (feats, labels) = separable_2d(5, 16);
        let instances: Vec<Instance> = feats
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (f, l))| Instance::new(format!("s{i}"), f.clone(), Some(*l)))
            .collect();
        let ds = SwslDataset::new(instances, vec![]).unwrap();
        let k = KernelConfig::rbf(0.8);
        let cfg = SvmConfig::default();
        let fit = train_naive_swsl(&ds, &k, &cfg).unwrap();
        let svm = train_kernel_svm(&feats, &labels, &k, &cfg).unwrap();
        assert_eq!(fit.labels, labels);
        assert_eq!(fit.svm.dual_coefficients, svm.dual_coefficients);
        assert_eq!(fit.svm.bias, svm.bias);
    }
}

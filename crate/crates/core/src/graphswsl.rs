//! graphSWSL: manifold-regularized least squares over supervised instances
//! with a squared hinge on every positive bag's maximum score, trained by the
//! concave-convex procedure.
//!
//! With `f = Kα`, the objective is
//!
//! ```text
//! P(α) = Σ_{i<n} (y_i - f_i)² + λ1 αᵀKα + (λ2/N²) fᵀLf + λ3 Σ_t max(0, 1 - max_{j∈B_t} f_j)²
//! ```
//!
//! Each CCCP step replaces every bag maximum by its linearization at the
//! current iterate (a δ-weighted average over the maximizing members) and
//! minimizes the resulting convex piecewise quadratic exactly with an
//! active-set Newton method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{AutoOr, Method};
use crate::data::{BagRange, IndexedDataset};
use crate::error::{Result, SwslError};
use crate::kernel::{kernel_matrix, knn_graph, GraphConfig, GraphLaplacian, KernelConfig};
use crate::model::{Model, ModelMeta};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Bag-loss weight; `"auto"` uses (labeled count) / (positive bag count).
    pub lambda3: AutoOr,
    /// Stop when the relative objective decrease per CCCP step drops below this.
    pub cccp_tol: f64,
    pub cccp_max_iters: usize,
    /// Subproblem gradient-norm threshold, relative to `1 + |∇ at the start|`.
    pub subproblem_tol: f64,
    pub subproblem_max_iters: usize,
    /// Relative band for membership in a bag's maximizing set.
    pub tie_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda1: 1e-2,
            lambda2: 1e-1,
            lambda3: AutoOr::Auto,
            cccp_tol: 1e-6,
            cccp_max_iters: 50,
            subproblem_tol: 1e-8,
            subproblem_max_iters: 100,
            tie_tol: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SwslError::InvalidArgument(m.to_string()));
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be positive");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda2 must be non-negative");
        }
        if let AutoOr::Value(v) = self.lambda3 {
            if !(v > 0.0 && v.is_finite()) {
                return bad("lambda3 must be positive or \"auto\"");
            }
        }
        if !(self.cccp_tol > 0.0 && self.subproblem_tol > 0.0 && self.tie_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.cccp_max_iters == 0 || self.subproblem_max_iters == 0 {
            return bad("iteration limits must be at least 1");
        }
        Ok(())
    }

    /// Resolve λ3 for a problem with `n` labeled positions and `num_bags` positive bags.
    pub fn lambdas(&self, n: usize, num_bags: usize) -> Lambdas {
        let lambda3 = match self.lambda3 {
            AutoOr::Value(v) => v,
            // With no bags the value is inert; with no labels n/T would vanish.
            AutoOr::Auto if num_bags == 0 => 1.0,
            AutoOr::Auto => n.max(1) as f64 / num_bags as f64,
        };
        Lambdas {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3,
        }
    }
}

/// Resolved regularization weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// Everything the objective needs: labels `Y` (zero past `n`), the selector
/// `J` (implicit: ones on the first `n` diagonal entries), Gram matrix `K`,
/// graph Laplacian `L` and positive-bag ranges.
#[derive(Clone, Debug)]
pub struct ProblemMatrices {
    pub y: DVector<f64>,
    pub n: usize,
    pub kernel: DMatrix<f64>,
    pub graph: GraphLaplacian,
    pub bag_ranges: Vec<BagRange>,
}

/// Build the problem over all training positions. Without `graph` the
/// Laplacian is zero, which is exact whenever λ2 = 0.
pub fn build_problem(
    data: &IndexedDataset,
    kernel: &KernelConfig,
    graph: Option<&GraphConfig>,
) -> Result<ProblemMatrices> {
    let big_n = data.len();
    if big_n < 2 {
        return Err(SwslError::InvalidData(format!(
            "training needs at least 2 instances, got {big_n}"
        )));
    }
    let k = kernel_matrix(&data.features, kernel)?;
    let graph = match graph {
        Some(cfg) => knn_graph(&data.features, cfg)?,
        None => GraphLaplacian::empty(big_n),
    };
    let mut y = DVector::zeros(big_n);
    for (i, l) in data.labels.iter().enumerate() {
        y[i] = l.value();
    }
    ProblemMatrices::new(y, data.n(), k, graph, data.bag_ranges.clone())
}

impl ProblemMatrices {
    pub fn new(
        y: DVector<f64>,
        n: usize,
        kernel: DMatrix<f64>,
        graph: GraphLaplacian,
        bag_ranges: Vec<BagRange>,
    ) -> Result<Self> {
        let big_n = y.len();
        if kernel.shape() != (big_n, big_n) || graph.laplacian.shape() != (big_n, big_n) {
            return Err(SwslError::dim_in(big_n, kernel.nrows(), "problem matrices"));
        }
        if n > big_n || y.iter().skip(n).any(|&v| v != 0.0) {
            return Err(SwslError::InvalidData(
                "labels must be zero outside the labeled block".into(),
            ));
        }
        let mut next = n;
        for r in &bag_ranges {
            if r.start != next || r.end < r.start || r.end >= big_n {
                return Err(SwslError::InvalidData(format!(
                    "bag range {:?} does not continue the layout at {next}",
                    r.one_based()
                )));
            }
            next = r.end + 1;
        }
        if next != big_n {
            return Err(SwslError::InvalidData(
                "bag ranges must tile the unlabeled block".into(),
            ));
        }
        Ok(ProblemMatrices {
            y,
            n,
            kernel,
            graph,
            bag_ranges,
        })
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn num_bags(&self) -> usize {
        self.bag_ranges.len()
    }

    /// The diagonal selector `J`, materialized.
    pub fn selector(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.size(), self.size(), |i, j| {
            if i == j && i < self.n {
                1.0
            } else {
                0.0
            }
        })
    }

    fn graph_weight(&self, lambdas: &Lambdas) -> f64 {
        let big_n = self.size() as f64;
        lambdas.lambda2 / (big_n * big_n)
    }

    fn check_len(&self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.size() {
            return Err(SwslError::dim_in(self.size(), alpha.len(), "alpha"));
        }
        Ok(())
    }

    /// Training-set scores `Kα`.
    pub fn scores(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.kernel * alpha
    }

    /// Every term except the bag loss, given `f = Kα`.
    fn smooth_part(&self, alpha: &DVector<f64>, f: &DVector<f64>, lambdas: &Lambdas) -> f64 {
        let loss: f64 = (0..self.n).map(|i| (self.y[i] - f[i]).powi(2)).sum();
        let rkhs = alpha.dot(f);
        let intrinsic = if lambdas.lambda2 == 0.0 {
            0.0
        } else {
            f.dot(&(&self.graph.laplacian * f))
        };
        loss + lambdas.lambda1 * rkhs + self.graph_weight(lambdas) * intrinsic
    }

    /// Objective with explicit slacks `ξ`.
    pub fn objective_value(
        &self,
        alpha: &DVector<f64>,
        xi: &[f64],
        lambdas: &Lambdas,
    ) -> Result<f64> {
        self.check_len(alpha)?;
        if xi.len() != self.num_bags() {
            return Err(SwslError::dim_in(self.num_bags(), xi.len(), "slacks"));
        }
        let f = self.scores(alpha);
        let v = self.smooth_part(alpha, &f, lambdas)
            + lambdas.lambda3 * xi.iter().map(|x| x * x).sum::<f64>();
        finite(v, "objective")
    }

    /// Largest training score inside each positive bag.
    pub fn bag_maxima(&self, f: &DVector<f64>) -> Vec<f64> {
        self.bag_ranges
            .iter()
            .map(|r| r.indices().map(|j| f[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Smallest feasible slacks: `ξ_t = max(0, 1 - max_{j∈B_t} f_j)`.
    pub fn optimal_slacks(&self, alpha: &DVector<f64>) -> Vec<f64> {
        self.bag_maxima(&self.scores(alpha))
            .into_iter()
            .map(|m| (1.0 - m).max(0.0))
            .collect()
    }

    /// Objective with slacks eliminated.
    pub fn penalized_objective(&self, alpha: &DVector<f64>, lambdas: &Lambdas) -> Result<f64> {
        self.check_len(alpha)?;
        let f = self.scores(alpha);
        let bag: f64 = self
            .bag_maxima(&f)
            .into_iter()
            .map(|m| (1.0 - m).max(0.0).powi(2))
            .sum();
        finite(
            self.smooth_part(alpha, &f, lambdas) + lambdas.lambda3 * bag,
            "penalized objective",
        )
    }

    /// Absolute indices of bag `t`'s members that attain its maximum score
    /// within `tie_tol * (1 + |max|)`.
    pub fn max_set(&self, f: &DVector<f64>, t: usize, tie_tol: f64) -> Vec<usize> {
        let r = self.bag_ranges[t];
        let max = r.indices().map(|j| f[j]).fold(f64::NEG_INFINITY, f64::max);
        let band = tie_tol * (1.0 + max.abs());
        r.indices().filter(|&j| f[j] >= max - band).collect()
    }

    /// Subgradient weights `δ_t` of the bag maximum, one entry per member:
    /// `1/r_t` on the `r_t` maximizing members, zero elsewhere.
    pub fn subgradient_weights(
        &self,
        alpha: &DVector<f64>,
        t: usize,
        tie_tol: f64,
    ) -> Result<Vec<f64>> {
        self.check_len(alpha)?;
        if t >= self.num_bags() {
            return Err(SwslError::InvalidArgument(format!("no bag with index {t}")));
        }
        let f = self.scores(alpha);
        let set = self.max_set(&f, t, tie_tol);
        let r = self.bag_ranges[t];
        let mut w = vec![0.0; r.len()];
        for j in &set {
            w[j - r.start] = 1.0 / set.len() as f64;
        }
        Ok(w)
    }

    /// Linearize every bag maximum at `alpha`.
    pub fn linearize(&self, alpha: &DVector<f64>, tie_tol: f64) -> Linearization {
        let f = self.scores(alpha);
        let bags = (0..self.num_bags())
            .map(|t| {
                let members = self.max_set(&f, t, tie_tol);
                let weight = 1.0 / members.len() as f64;
                let avg: f64 = members.iter().map(|&j| f[j]).sum::<f64>() * weight;
                let max = self.bag_ranges[t]
                    .indices()
                    .map(|j| f[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                LinearizedBag {
                    members,
                    weight,
                    offset: max - avg,
                }
            })
            .collect();
        Linearization { bags }
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SwslError::NonFinite(what.into()))
    }
}

/// Linear surrogate of one bag maximum: `offset + weight * Σ_{j∈members} f_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedBag {
    pub members: Vec<usize>,
    pub weight: f64,
    pub offset: f64,
}

impl LinearizedBag {
    fn value(&self, f: &DVector<f64>) -> f64 {
        self.offset + self.weight * self.members.iter().map(|&j| f[j]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub bags: Vec<LinearizedBag>,
}

impl Linearization {
    pub fn max_sets(&self) -> Vec<Vec<usize>> {
        self.bags.iter().map(|b| b.members.clone()).collect()
    }
}

/// The convex CCCP subproblem with slacks eliminated:
/// `smooth(α) + λ3 Σ_t max(0, 1 - ℓ_t(Kα))²`.
pub struct Subproblem<'a> {
    problem: &'a ProblemMatrices,
    lambdas: Lambdas,
    lin: Linearization,
    /// `(J + (λ2/N²) L) K + λ1 I`, shared by every Newton system.
    base: DMatrix<f64>,
}

impl<'a> Subproblem<'a> {
    pub fn new(problem: &'a ProblemMatrices, lambdas: Lambdas, lin: Linearization) -> Self {
        let base = base_system(problem, &lambdas);
        Self::with_base(problem, lambdas, lin, base)
    }

    fn with_base(
        problem: &'a ProblemMatrices,
        lambdas: Lambdas,
        lin: Linearization,
        base: DMatrix<f64>,
    ) -> Self {
        Subproblem {
            problem,
            lambdas,
            lin,
            base,
        }
    }

    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    pub fn objective(&self, alpha: &DVector<f64>) -> f64 {
        let f = self.problem.scores(alpha);
        self.objective_at(alpha, &f)
    }

    fn objective_at(&self, alpha: &DVector<f64>, f: &DVector<f64>) -> f64 {
        let bag: f64 = self
            .lin
            .bags
            .iter()
            .map(|b| (1.0 - b.value(f)).max(0.0).powi(2))
            .sum();
        self.problem.smooth_part(alpha, f, &self.lambdas) + self.lambdas.lambda3 * bag
    }

    /// `r` such that the gradient equals `2 K r`.
    fn half_residual(&self, alpha: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
        let p = self.problem;
        let mut r = alpha * self.lambdas.lambda1;
        for i in 0..p.n {
            r[i] += f[i] - p.y[i];
        }
        if self.lambdas.lambda2 != 0.0 {
            r += (&p.graph.laplacian * f) * p.graph_weight(&self.lambdas);
        }
        for b in &self.lin.bags {
            let h = (1.0 - b.value(f)).max(0.0);
            if h > 0.0 {
                for &j in &b.members {
                    r[j] -= self.lambdas.lambda3 * h * b.weight;
                }
            }
        }
        r
    }

    pub fn gradient(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let f = self.problem.scores(alpha);
        (&self.problem.kernel * self.half_residual(alpha, &f)) * 2.0
    }

    fn active_set(&self, f: &DVector<f64>) -> Vec<bool> {
        self.lin.bags.iter().map(|b| b.value(f) < 1.0).collect()
    }

    /// Minimizer of the quadratic obtained by fixing which bags are violated.
    fn newton_point(&self, active: &[bool]) -> Result<DVector<f64>> {
        let p = self.problem;
        let l3 = self.lambdas.lambda3;
        let mut system = self.base.clone();
        let mut rhs = p.y.clone();
        for (b, _) in self.lin.bags.iter().zip(active).filter(|(_, &a)| a) {
            // λ3 δδᵀK adds λ3 w² Σ_{j∈S} K_j to every row in S.
            let mut row = DVector::zeros(p.size());
            for &j in &b.members {
                row += p.kernel.column(j);
            }
            row *= l3 * b.weight * b.weight;
            for &i in &b.members {
                for c in 0..p.size() {
                    system[(i, c)] += row[c];
                }
                rhs[i] += l3 * (1.0 - b.offset) * b.weight;
            }
        }
        solve_system(system, &rhs)
    }

    /// Exact minimizer of `s ↦ objective(α + s d)` over `s ≥ 0`.
    fn line_search(
        &self,
        alpha: &DVector<f64>,
        f: &DVector<f64>,
        d: &DVector<f64>,
        fd: &DVector<f64>,
    ) -> f64 {
        let p = self.problem;
        let gw = p.graph_weight(&self.lambdas);
        let (mut a2, mut a1) = (0.0, 0.0);
        for i in 0..p.n {
            a2 += fd[i] * fd[i];
            a1 -= 2.0 * (p.y[i] - f[i]) * fd[i];
        }
        a2 += self.lambdas.lambda1 * d.dot(fd);
        a1 += 2.0 * self.lambdas.lambda1 * alpha.dot(fd);
        if self.lambdas.lambda2 != 0.0 {
            let lfd = &p.graph.laplacian * fd;
            a2 += gw * fd.dot(&lfd);
            a1 += 2.0 * gw * f.dot(&lfd);
        }
        let bags: Vec<(f64, f64)> = self
            .lin
            .bags
            .iter()
            .map(|b| {
                let slope = b.weight * b.members.iter().map(|&j| fd[j]).sum::<f64>();
                (1.0 - b.value(f), slope)
            })
            .collect();
        let l3 = self.lambdas.lambda3;
        let deriv = |s: f64| {
            let mut g = 2.0 * a2 * s + a1;
            for &(r, e) in &bags {
                g -= 2.0 * l3 * (r - s * e).max(0.0) * e;
            }
            g
        };
        if deriv(0.0) >= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut expansions = 0;
        while deriv(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
            expansions += 1;
            if expansions > 60 {
                return hi;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if deriv(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn base_system(p: &ProblemMatrices, lambdas: &Lambdas) -> DMatrix<f64> {
    let big_n = p.size();
    let mut system = if lambdas.lambda2 != 0.0 {
        &p.graph.laplacian * &p.kernel * p.graph_weight(lambdas)
    } else {
        DMatrix::zeros(big_n, big_n)
    };
    for i in 0..p.n {
        for c in 0..big_n {
            system[(i, c)] += p.kernel[(i, c)];
        }
    }
    for i in 0..big_n {
        system[(i, i)] += lambdas.lambda1;
    }
    system
}

fn solve_system(system: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let big_n = system.nrows();
    let trace = system.trace().abs().max(f64::MIN_POSITIVE);
    if let Some(x) = system.clone().lu().solve(rhs) {
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let mut jittered = system;
    for i in 0..big_n {
        jittered[(i, i)] += 1e-10 * trace / big_n as f64;
    }
    jittered
        .lu()
        .solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| SwslError::NoConvergence("linear system is singular".into()))
}

#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub alpha: DVector<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Minimize the convex subproblem starting from `start`.
///
/// Each iteration solves the Newton system for the current set of violated
/// bags and takes an exact line search along the resulting direction,
/// falling back to steepest descent if that direction does not descend.
pub fn solve_subproblem(
    sub: &Subproblem<'_>,
    start: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<SubproblemSolution> {
    let k = &sub.problem.kernel;
    let mut alpha = start.clone();
    let mut f = k * &alpha;
    let start_value = sub.objective_at(&alpha, &f);
    let grad_norm =
        |alpha: &DVector<f64>, f: &DVector<f64>| (k * sub.half_residual(alpha, f)).norm() * 2.0;
    let g0 = grad_norm(&alpha, &f);
    let threshold = tol * (1.0 + g0);
    let done = |alpha: DVector<f64>, f: &DVector<f64>, g: f64, iterations| {
        let objective = sub.objective_at(&alpha, f);
        if objective > start_value {
            // Rounding only; never hand back a worse point than the start.
            return SubproblemSolution {
                alpha: start.clone(),
                objective: start_value,
                gradient_norm: g0,
                iterations,
            };
        }
        SubproblemSolution {
            alpha,
            objective,
            gradient_norm: g,
            iterations,
        }
    };
    if g0 <= threshold {
        return Ok(done(alpha, &f, g0, 0));
    }

    let mut last_g = g0;
    for it in 1..=max_iters {
        let active = sub.active_set(&f);
        let target = sub.newton_point(&active)?;
        let mut d = target - &alpha;
        let mut fd = k * &d;
        let mut step = sub.line_search(&alpha, &f, &d, &fd);
        let newton = step > 0.0;
        if !newton {
            d = -(k * sub.half_residual(&alpha, &f));
            fd = k * &d;
            step = sub.line_search(&alpha, &f, &d, &fd);
        }
        alpha.axpy(step, &d, 1.0);
        f.axpy(step, &fd, 1.0);
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(SwslError::NonFinite("subproblem iterate".into()));
        }
        let g = grad_norm(&alpha, &f);
        last_g = g;
        if g <= threshold {
            return Ok(done(alpha, &f, g, it));
        }
        if newton && (step - 1.0).abs() <= 1e-9 && sub.active_set(&f) == active {
            // Full step into the region whose quadratic it minimizes.
            return Ok(done(alpha, &f, g, it));
        }
        if step == 0.0 {
            break;
        }
    }
    Err(SwslError::NoConvergence(format!(
        "subproblem gradient norm {last_g:.3e} above {threshold:.3e} after {max_iters} iterations"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoBags,
    RelativeDecrease,
    MaxSetsStable,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct CccpState {
    pub alpha: DVector<f64>,
    pub xi: Vec<f64>,
    pub max_sets: Vec<Vec<usize>>,
    /// Penalized objective at the warm start and after every CCCP step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub lambdas: Lambdas,
}

/// Solution of the bag-free system `(JK + λ1 I + (λ2/N²) LK) α = Y`.
pub fn supervised_solution(p: &ProblemMatrices, lambdas: &Lambdas) -> Result<DVector<f64>> {
    solve_system(base_system(p, lambdas), &p.y)
}

/// Run CCCP on an assembled problem.
pub fn run_cccp(p: &ProblemMatrices, cfg: &SolverConfig) -> Result<CccpState> {
    cfg.validate()?;
    let lambdas = cfg.lambdas(p.n, p.num_bags());
    let base = base_system(p, &lambdas);
    let mut alpha = solve_system(base.clone(), &p.y)?;
    let mut trace = vec![p.penalized_objective(&alpha, &lambdas)?];
    let mut lin = p.linearize(&alpha, cfg.tie_tol);

    let mut iterations = 0;
    let stop_reason = if p.num_bags() == 0 {
        StopReason::NoBags
    } else {
        loop {
            if iterations == cfg.cccp_max_iters {
                break StopReason::MaxIterations;
            }
            iterations += 1;
            let sub = Subproblem::with_base(p, lambdas, lin.clone(), base.clone());
            let sol = solve_subproblem(&sub, &alpha, cfg.subproblem_tol, cfg.subproblem_max_iters)?;
            alpha = sol.alpha;
            let value = p.penalized_objective(&alpha, &lambdas)?;
            let prev = *trace.last().expect("trace starts non-empty");
            trace.push(value);
            let next = p.linearize(&alpha, cfg.tie_tol);
            let stable = next.max_sets() == lin.max_sets();
            lin = next;
            if stable {
                break StopReason::MaxSetsStable;
            }
            if prev - value < cfg.cccp_tol * prev.abs().max(f64::MIN_POSITIVE) {
                break StopReason::RelativeDecrease;
            }
        }
    };

    Ok(CccpState {
        xi: p.optimal_slacks(&alpha),
        max_sets: lin.max_sets(),
        alpha,
        objective_trace: trace,
        iterations,
        stop_reason,
        lambdas,
    })
}

/// Train graphSWSL on an assembled dataset. The kNN graph is only built
/// when λ2 > 0.
pub fn train_with_state(
    data: &IndexedDataset,
    kernel: &KernelConfig,
    graph: &GraphConfig,
    cfg: &SolverConfig,
) -> Result<(Model, CccpState)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SwslError::InvalidData("empty training set".into()));
    }
    let graph = (cfg.lambda2 > 0.0).then_some(graph);
    let p = build_problem(data, kernel, graph)?;
    let state = run_cccp(&p, cfg)?;
    let config = serde_json::json!({
        "solver": cfg,
        "graph": graph,
        "lambdas": state.lambdas,
    });
    let model = Model {
        method: Method::Graphswsl,
        alpha: state.alpha.iter().copied().collect(),
        bias: 0.0,
        train_features: data.features.clone(),
        kernel: *kernel,
        meta: ModelMeta {
            objective_trace: state.objective_trace.clone(),
            config,
            stop_reason: Some(
                serde_json::to_value(state.stop_reason)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            ),
            support_indices: None,
            outer_iterations: Some(state.iterations),
        },
    };
    Ok((model, state))
}

pub fn train(
    data: &IndexedDataset,
    kernel: &KernelConfig,
    graph: &GraphConfig,
    cfg: &SolverConfig,
) -> Result<Model> {
    train_with_state(data, kernel, graph, cfg).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_training_set, Bag, Instance, Label, SwslDataset};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lambdas(l1: f64, l2: f64, l3: f64) -> Lambdas {
        Lambdas {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
        }
    }

    fn random_problem(seed: u64, n: usize, bags: &[usize]) -> ProblemMatrices {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big_n = n + bags.iter().sum::<usize>();
        let feats: Vec<Vec<f64>> = (0..big_n)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let k = kernel_matrix(&feats, &KernelConfig::exp_chi2(4.0)).unwrap();
        let g = knn_graph(
            &feats,
            &GraphConfig {
                k: 3.min(big_n - 1),
                ..GraphConfig::default()
            },
        )
        .unwrap();
        let mut y = DVector::zeros(big_n);
        for i in 0..n {
            y[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let mut ranges = Vec::new();
        let mut start = n;
        for &b in bags {
            ranges.push(BagRange {
                start,
                end: start + b - 1,
            });
            start += b;
        }
        ProblemMatrices::new(y, n, k, g, ranges).unwrap()
    }

    fn layout(n_sup: usize, neg_bag: usize, pos_bags: &[usize]) -> IndexedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut instances = Vec::new();
        let mut bags = Vec::new();
        let mut feat = || vec![rng.random::<f64>() + 0.01, rng.random::<f64>() + 0.01];
        for i in 0..n_sup {
            let l = if i % 2 == 0 {
                Label::Positive
            } else {
                Label::Negative
            };
            instances.push(Instance::new(format!("s{i}"), feat(), Some(l)));
        }
        let mut ids = Vec::new();
        for j in 0..neg_bag {
            instances.push(Instance::new(format!("n{j}"), feat(), None));
            ids.push(format!("n{j}"));
        }
        if neg_bag > 0 {
            bags.push(Bag::new("neg", Label::Negative, ids));
        }
        for (t, &size) in pos_bags.iter().enumerate() {
            let ids: Vec<String> = (0..size).map(|j| format!("p{t}_{j}")).collect();
            for id in &ids {
                instances.push(Instance::new(id.clone(), feat(), None));
            }
            bags.push(Bag::new(format!("p{t}"), Label::Positive, ids));
        }
        assemble_training_set(&SwslDataset::new(instances, bags).unwrap()).unwrap()
    }

    #[test]
    fn build_problem_layouts() {
        let k = KernelConfig::exp_chi2(1.0);
        let p = build_problem(&layout(2, 0, &[]), &k, None).unwrap();
        assert_eq!(p.y.iter().filter(|v| **v != 0.0).count(), 2);
        assert_eq!(p.selector(), DMatrix::identity(2, 2));
        assert_eq!(p.num_bags(), 0);

        let p = build_problem(
            &layout(2, 3, &[2, 3]),
            &k,
            Some(&GraphConfig {
                k: 2,
                ..GraphConfig::default()
            }),
        )
        .unwrap();
        assert_eq!(p.selector().trace(), 5.0);
        assert!(p.y.iter().skip(5).all(|&v| v == 0.0));
        assert_eq!(p.num_bags(), 2);
        assert!(build_problem(&layout(1, 0, &[]), &k, None).is_err());
    }

    #[test]
    fn objective_at_zero_is_label_count() {
        let p = random_problem(2, 6, &[3, 2]);
        let zero = DVector::zeros(p.size());
        let v = p
            .objective_value(&zero, &[0.0, 0.0], &lambdas(0.3, 0.7, 2.0))
            .unwrap();
        assert_abs_diff_eq!(v, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn objective_slack_scaling() {
        let p = random_problem(3, 4, &[2, 2]);
        let alpha = DVector::from_fn(p.size(), |i, _| (i as f64).sin());
        let l = lambdas(0.1, 0.2, 1.7);
        let xi = [0.4, 1.1];
        let a = p.objective_value(&alpha, &xi, &l).unwrap();
        let b = p.objective_value(&alpha, &[0.8, 2.2], &l).unwrap();
        let sq: f64 = xi.iter().map(|x| x * x).sum();
        assert_abs_diff_eq!(b - a, 3.0 * 1.7 * sq, epsilon = 1e-10);
    }

    #[test]
    fn interpolating_alpha_zeroes_the_loss() {
        // Three labeled points, no regularization: α = (JK)^{-1} Y on the labeled block.
        let p = random_problem(4, 3, &[]);
        let alpha = p.kernel.clone().lu().solve(&p.y).unwrap();
        let v = p
            .objective_value(&alpha, &[], &lambdas(0.0, 0.0, 0.0))
            .unwrap();
        assert!(v < 1e-18, "{v}");
    }

    #[test]
    fn penalized_objective_bag_terms() {
        let p = random_problem(5, 3, &[2]);
        let l = lambdas(0.1, 0.1, 3.0);
        let zero = DVector::zeros(p.size());
        let smooth = p
            .penalized_objective(&zero, &lambdas(0.1, 0.1, 0.0))
            .unwrap();
        assert_abs_diff_eq!(
            p.penalized_objective(&zero, &l).unwrap() - smooth,
            3.0,
            epsilon = 1e-12
        );

        // Large α on a bag member drives its score past 1: no bag loss.
        let mut alpha = DVector::zeros(p.size());
        alpha[3] = 10.0;
        let f = p.scores(&alpha);
        assert!(f[3] >= 1.0);
        let with = p.penalized_objective(&alpha, &l).unwrap();
        let without = p
            .penalized_objective(&alpha, &lambdas(0.1, 0.1, 0.0))
            .unwrap();
        assert_abs_diff_eq!(with, without, epsilon = 1e-12);
    }

    #[test]
    fn penalized_matches_objective_at_optimal_slacks() {
        for seed in 0..10 {
            let p = random_problem(seed, 5, &[3, 1, 4]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let alpha = DVector::from_fn(p.size(), |_, _| rng.random_range(-1.0..1.0));
            let l = lambdas(0.2, 0.5, 1.5);
            let f = p.scores(&alpha);
            let xi: Vec<f64> = p
                .bag_ranges
                .iter()
                .map(|r| {
                    let mut m = f64::NEG_INFINITY;
                    for j in r.start..=r.end {
                        m = m.max(f[j]);
                    }
                    (1.0 - m).max(0.0)
                })
                .collect();
            let a = p.penalized_objective(&alpha, &l).unwrap();
            let b = p.objective_value(&alpha, &xi, &l).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            // any larger feasible slack is worse
            let bumped: Vec<f64> = xi.iter().map(|x| x + 0.1).collect();
            assert!(p.objective_value(&alpha, &bumped, &l).unwrap() > a);
        }
    }

    fn problem_with_scores(scores: &[f64]) -> (ProblemMatrices, DVector<f64>) {
        // Identity kernel makes the scores equal α.
        let m = scores.len();
        let p = ProblemMatrices::new(
            DVector::zeros(m),
            0,
            DMatrix::identity(m, m),
            GraphLaplacian::empty(m),
            vec![BagRange {
                start: 0,
                end: m - 1,
            }],
        )
        .unwrap();
        (p, DVector::from_column_slice(scores))
    }

    #[test]
    fn subgradient_weight_cases() {
        let (p, a) = problem_with_scores(&[0.2, 0.9]);
        assert_eq!(p.subgradient_weights(&a, 0, 1e-9).unwrap(), vec![0.0, 1.0]);
        let (p, a) = problem_with_scores(&[0.9, 0.9, 0.2]);
        assert_eq!(
            p.subgradient_weights(&a, 0, 1e-9).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        let (p, a) = problem_with_scores(&[-3.0]);
        assert_eq!(p.subgradient_weights(&a, 0, 1e-9).unwrap(), vec![1.0]);
        assert!(p.subgradient_weights(&a, 1, 1e-9).is_err());
    }

    #[test]
    fn supervised_only_training_is_closed_form() {
        let p = random_problem(7, 12, &[]);
        let cfg = SolverConfig {
            lambda1: 0.05,
            lambda2: 2.0,
            ..SolverConfig::default()
        };
        let state = run_cccp(&p, &cfg).unwrap();
        assert_eq!(state.stop_reason, StopReason::NoBags);
        let big_n = p.size() as f64;
        let system = p.selector() * &p.kernel
            + DMatrix::identity(p.size(), p.size()) * 0.05
            + &p.graph.laplacian * &p.kernel * (2.0 / (big_n * big_n));
        let expected = system.lu().solve(&p.y).unwrap();
        assert!((&state.alpha - &expected).norm() <= 1e-9 * expected.norm());
    }

    #[test]
    fn subproblem_descends_and_stops_at_stationary_point() {
        for seed in 0..5 {
            let p = random_problem(seed, 6, &[3, 4, 2]);
            let l = lambdas(0.1, 0.5, 4.0);
            let start = supervised_solution(&p, &l).unwrap();
            let sub = Subproblem::new(&p, l, p.linearize(&start, 1e-9));
            let sol = solve_subproblem(&sub, &start, 1e-10, 100).unwrap();
            assert!(sol.objective <= sub.objective(&start) + 1e-10);
            assert!(sub.gradient(&sol.alpha).norm() < 1e-6);
        }
    }

    #[test]
    fn subproblem_is_convex_along_segments() {
        let p = random_problem(9, 5, &[3, 3]);
        let l = lambdas(0.1, 0.5, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchor = DVector::from_fn(p.size(), |_, _| rng.random_range(-1.0..1.0));
        let sub = Subproblem::new(&p, l, p.linearize(&anchor, 1e-9));
        for _ in 0..50 {
            let a = DVector::from_fn(p.size(), |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(p.size(), |_, _| rng.random_range(-2.0..2.0));
            let mid = (&a + &b) * 0.5;
            let lhs = sub.objective(&mid);
            let rhs = 0.5 * (sub.objective(&a) + sub.objective(&b));
            assert!(lhs <= rhs + 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn cccp_trace_is_monotone() {
        for seed in 0..8 {
            let p = random_problem(seed, 8, &[4, 3, 5, 2]);
            let state = run_cccp(&p, &SolverConfig::default()).unwrap();
            for w in state.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-8, "{:?}", state.objective_trace);
            }
            assert!(state.xi.iter().all(|&x| x >= 0.0));
            for (set, r) in state.max_sets.iter().zip(&p.bag_ranges) {
                assert!(!set.is_empty());
                assert!(set.iter().all(|j| (r.start..=r.end).contains(j)));
            }
        }
    }

    #[test]
    fn auto_lambda3_is_labeled_over_bags() {
        let cfg = SolverConfig::default();
        assert_eq!(cfg.lambdas(30, 6).lambda3, 5.0);
        assert_eq!(cfg.lambdas(30, 0).lambda3, 1.0);
    }

    #[test]
    fn rejects_invalid_config() {
        let p = random_problem(1, 4, &[2]);
        for cfg in [
            SolverConfig {
                lambda1: 0.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                lambda2: -1.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                lambda3: AutoOr::Value(0.0),
                ..SolverConfig::default()
            },
            SolverConfig {
                cccp_max_iters: 0,
                ..SolverConfig::default()
            },
        ] {
            assert!(run_cccp(&p, &cfg).is_err());
        }
    }
}

//! Average precision, evaluation reports and grid-search cross-validation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::data::{FoldSpec, Label, SwslDataset};
use crate::error::{Result, SwslError};
use crate::model::Model;
use crate::pipeline::train_method;
use crate::synth::GroundTruth;

/// Scores with their true labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub scores: Vec<f64>,
    pub truth: Vec<Label>,
}

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank. Scores are sorted descending and ties
/// keep input order.
pub fn average_precision(r: &RankedResult) -> Result<f64> {
    if r.scores.len() != r.truth.len() {
        return Err(SwslError::dim_in(
            r.scores.len(),
            r.truth.len(),
            "ranking truth",
        ));
    }
    if r.scores.iter().any(|s| s.is_nan()) {
        return Err(SwslError::NonFinite("ranking scores".into()));
    }
    let total_pos = r.truth.iter().filter(|l| l.is_positive()).count();
    if total_pos == 0 {
        return Err(SwslError::InvalidData(
            "average precision is undefined without positives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..r.scores.len()).collect();
    order.sort_by(|&a, &b| r.scores[b].total_cmp(&r.scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if r.truth[i].is_positive() {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLevel {
    Bag,
    Instance,
}

impl std::str::FromStr for EvalLevel {
    type Err = SwslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bag" => Ok(EvalLevel::Bag),
            "instance" => Ok(EvalLevel::Instance),
            other => Err(SwslError::InvalidArgument(format!(
                "unknown level `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub per_class_ap: BTreeMap<String, f64>,
    /// Unweighted mean of `per_class_ap`.
    pub map_value: f64,
    pub counts: BTreeMap<String, ClassCounts>,
}

impl EvalReport {
    /// Combine single-class reports at the same level.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
        let Some(first) = reports.first() else {
            return Err(SwslError::InvalidArgument("no reports to merge".into()));
        };
        let mut per_class_ap = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for r in reports {
            if r.level != first.level {
                return Err(SwslError::InvalidArgument("reports mix levels".into()));
            }
            for (k, v) in &r.per_class_ap {
                if per_class_ap.insert(k.clone(), *v).is_some() {
                    return Err(SwslError::InvalidArgument(format!(
                        "class `{k}` appears twice"
                    )));
                }
            }
            counts.extend(r.counts.iter().map(|(k, v)| (k.clone(), *v)));
        }
        let map_value = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
        Ok(EvalReport {
            level: first.level,
            per_class_ap,
            map_value,
            counts,
        })
    }
}

/// Scores and truth for every item at the requested level.
///
/// Bag level ranks each bag by its maximum member score, plus each supervised
/// instance as a singleton; a bag is positive when any member is truly
/// positive (falling back to the bag label without `truth`). Instance level
/// ranks every instance, taking truth from `truth` or the instance's own label.
pub fn score_items(
    model: &Model,
    data: &SwslDataset,
    truth: Option<&GroundTruth>,
    level: EvalLevel,
) -> Result<RankedResult> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    match level {
        EvalLevel::Bag => {
            for inst in data.supervised() {
                let label = truth
                    .and_then(|t| t.label(&inst.id))
                    .or(inst.label)
                    .expect("supervised instances are labeled");
                scores.push(model.predict_instance(&inst.features)?);
                labels.push(label);
            }
            for bag in data.bags() {
                let label = match truth {
                    Some(t) => {
                        let mut any = false;
                        for id in &bag.instances {
                            let l = t.label(id).ok_or_else(|| {
                                SwslError::InvalidData(format!("no truth for instance `{id}`"))
                            })?;
                            any |= l.is_positive();
                        }
                        Label::from_sign(if any { 1.0 } else { -1.0 })
                    }
                    None => bag.label,
                };
                scores.push(model.predict_bag(&data.bag_features(bag))?);
                labels.push(label);
            }
        }
        EvalLevel::Instance => {
            let feats: Vec<Vec<f64>> = data
                .instances()
                .iter()
                .map(|i| i.features.clone())
                .collect();
            for inst in data.instances() {
                let label = truth
                    .and_then(|t| t.label(&inst.id))
                    .or(inst.label)
                    .ok_or_else(|| {
                        SwslError::InvalidData(format!("no truth for instance `{}`", inst.id))
                    })?;
                labels.push(label);
            }
            scores = model.predict_many(&feats)?;
        }
    }
    Ok(RankedResult {
        scores,
        truth: labels,
    })
}

/// Single-class report for `model` on `data`.
pub fn evaluate(
    model: &Model,
    data: &SwslDataset,
    truth: Option<&GroundTruth>,
    level: EvalLevel,
    class_name: &str,
) -> Result<EvalReport> {
    let ranked = score_items(model, data, truth, level)?;
    let ap = average_precision(&ranked)?;
    let positives = ranked.truth.iter().filter(|l| l.is_positive()).count();
    Ok(EvalReport {
        level,
        per_class_ap: BTreeMap::from([(class_name.to_string(), ap)]),
        map_value: ap,
        counts: BTreeMap::from([(
            class_name.to_string(),
            ClassCounts {
                positives,
                negatives: ranked.truth.len() - positives,
            },
        )]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "MAP")]
    Map,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub selection_metric: SelectionMetric,
}

impl Default for GridSpec {
    /// Seven log-spaced values from 1e-3 to 1e3 on each axis.
    fn default() -> Self {
        let axis: Vec<f64> = (-3..=3).map(|e| 10f64.powi(e)).collect();
        GridSpec {
            lambda1_values: axis.clone(),
            lambda2_values: axis,
            selection_metric: SelectionMetric::Map,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Held-out metric per fold; `None` when the fold has no positive item.
    pub fold_scores: Vec<Option<f64>>,
    pub mean_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: Method,
    pub num_folds: usize,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    pub best_score: f64,
    pub selection_metric: SelectionMetric,
    pub table: Vec<CvCell>,
}

/// Apply a grid cell to a run configuration. SVM-based methods read the
/// λ1 axis as their slack penalty `C`.
pub fn apply_cell(method: Method, base: &RunConfig, lambda1: f64, lambda2: f64) -> RunConfig {
    let mut cfg = base.clone();
    match method {
        Method::Graphswsl => {
            cfg.solver.lambda1 = lambda1;
            cfg.solver.lambda2 = lambda2;
        }
        Method::Misvm | Method::NaiveSwsl | Method::Svm => cfg.svm.slack_c = lambda1,
    }
    cfg
}

/// Grid search with k-fold cross-validation.
///
/// Every cell trains on all folds but one and scores the held-out fold at bag
/// level (supervised items count as singleton bags). The cell with the
/// highest mean held-out score wins; ties go to the smaller λ1, then the
/// smaller λ2. Cells whose training fails are reported and skipped.
pub fn cross_validate(
    data: &SwslDataset,
    folds: &FoldSpec,
    grid: &GridSpec,
    method: Method,
    base: &RunConfig,
) -> Result<CvReport> {
    if folds.num_folds < 2 {
        return Err(SwslError::InvalidArgument(
            "cross-validation needs at least 2 folds".into(),
        ));
    }
    if grid.lambda1_values.is_empty() || grid.lambda2_values.is_empty() {
        return Err(SwslError::InvalidArgument(
            "grid axes must be non-empty".into(),
        ));
    }
    let lambda2_axis: Vec<f64> = match method {
        Method::Graphswsl => grid.lambda2_values.clone(),
        _ => vec![grid.lambda2_values[0]],
    };
    let cells: Vec<(f64, f64)> = grid
        .lambda1_values
        .iter()
        .flat_map(|&l1| lambda2_axis.iter().map(move |&l2| (l1, l2)))
        .collect();
    let splits: Vec<(SwslDataset, SwslDataset)> =
        (0..folds.num_folds).map(|f| folds.split(data, f)).collect();

    let table: Vec<CvCell> = cells
        .par_iter()
        .map(|&(l1, l2)| {
            let cfg = apply_cell(method, base, l1, l2);
            let mut fold_scores = Vec::with_capacity(splits.len());
            for (train, test) in &splits {
                let score = train_method(method, train, &cfg).and_then(|model| {
                    let ranked = score_items(&model, test, None, EvalLevel::Bag)?;
                    if ranked.truth.iter().any(|l| l.is_positive()) {
                        average_precision(&ranked).map(Some)
                    } else {
                        Ok(None)
                    }
                });
                match score {
                    Ok(s) => fold_scores.push(s),
                    Err(e) => {
                        return CvCell {
                            lambda1: l1,
                            lambda2: l2,
                            fold_scores,
                            mean_score: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            }
            let defined: Vec<f64> = fold_scores.iter().flatten().copied().collect();
            let mean_score =
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            CvCell {
                lambda1: l1,
                lambda2: l2,
                fold_scores,
                mean_score,
                error: None,
            }
        })
        .collect();

    for cell in table.iter().filter(|c| c.error.is_some()) {
        log::warn!(
            "cv cell (lambda1={}, lambda2={}) failed: {}",
            cell.lambda1,
            cell.lambda2,
            cell.error.as_deref().unwrap_or_default()
        );
    }

    let best = table
        .iter()
        .filter_map(|c| c.mean_score.map(|s| (c, s)))
        .fold(None::<(&CvCell, f64)>, |acc, (c, s)| match acc {
            None => Some((c, s)),
            Some((b, bs)) => {
                let better = s > bs
                    || (s == bs
                        && (c.lambda1, c.lambda2)
                            .partial_cmp(&(b.lambda1, b.lambda2))
                            .is_some_and(|o| o.is_lt()));
                Some(if better { (c, s) } else { (b, bs) })
            }
        });
    let Some((best, best_score)) = best else {
        return Err(SwslError::NoConvergence(
            "every cross-validation cell failed".into(),
        ));
    };
    Ok(CvReport {
        method,
        num_folds: folds.num_folds,
        best_lambda1: best.lambda1,
        best_lambda2: best.lambda2,
        best_score,
        selection_metric: grid.selection_metric,
        table,
    })
}

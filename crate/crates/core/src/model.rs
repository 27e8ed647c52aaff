//! Trained kernel-expansion models shared by every method.
//!
//! All methods predict with `f(x) = Σ_i α_i k(x, x_i) + b`; graphSWSL has no
//! bias, SVM-based methods store signed dual coefficients of their support
//! vectors. Bag scores are the maximum over member scores.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{Result, SwslError};
use crate::kernel::KernelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    #[serde(default)]
    pub objective_trace: Vec<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub method: Method,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
    pub train_features: Vec<Vec<f64>>,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub meta: ModelMeta,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.train_features.len() {
            return Err(SwslError::InvalidData(format!(
                "model has {} coefficients but {} training vectors",
                self.alpha.len(),
                self.train_features.len()
            )));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) || !self.bias.is_finite() {
            return Err(SwslError::NonFinite("model coefficients".into()));
        }
        let d = self.dim();
        for x in &self.train_features {
            if x.len() != d {
                return Err(SwslError::dim_in(d, x.len(), "model training vector"));
            }
        }
        self.kernel.validate()
    }

    pub fn dim(&self) -> usize {
        self.train_features.first().map(Vec::len).unwrap_or(0)
    }

    /// Decision score of one instance.
    pub fn predict_instance(&self, x: &[f64]) -> Result<f64> {
        if !self.train_features.is_empty() && x.len() != self.dim() {
            return Err(SwslError::dim(self.dim(), x.len()));
        }
        self.kernel.check_features(x)?;
        let s: f64 = self
            .alpha
            .iter()
            .zip(&self.train_features)
            .map(|(a, xi)| a * self.kernel.eval(x, xi))
            .sum();
        Ok(s + self.bias)
    }

    /// Scores of many instances, evaluated in parallel.
    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.predict_instance(x)).collect()
    }

    /// Maximum member score.
    pub fn predict_bag<X: AsRef<[f64]>>(&self, members: &[X]) -> Result<f64> {
        if members.is_empty() {
            return Err(SwslError::InvalidArgument(
                "cannot score an empty bag".into(),
            ));
        }
        members
            .iter()
            .map(|x| self.predict_instance(x.as_ref()))
            .try_fold(f64::NEG_INFINITY, |m, s| Ok(m.max(s?)))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| SwslError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SwslError::io(path, e))?;
        let model: Model =
            serde_json::from_str(&text).map_err(|e| SwslError::parse(path, e.to_string()))?;
        model
            .validate()
            .map_err(|e| SwslError::parse(path, e.to_string()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model(alpha: Vec<f64>, feats: Vec<Vec<f64>>) -> Model {
        Model {
            method: Method::Graphswsl,
            alpha,
            bias: 0.0,
            train_features: feats,
            kernel: KernelConfig::exp_chi2(1.3),
            meta: ModelMeta::default(),
        }
    }

    fn feats() -> Vec<Vec<f64>> {
        vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]]
    }

    #[test]
    fn one_hot_alpha_on_training_point() {
        let m = model(vec![1.0, 0.0, 0.0], feats());
        assert_eq!(m.predict_instance(&[0.2, 0.8]).unwrap(), 1.0);
        let zero = model(vec![0.0; 3], feats());
        assert_eq!(zero.predict_instance(&[0.3, 0.7]).unwrap(), 0.0);
        assert!(m.predict_instance(&[0.3]).is_err());
    }

    #[test]
    fn score_matches_explicit_sum() {
        let alpha = vec![0.7, -1.2, 0.4];
        let m = model(alpha.clone(), feats());
        let x = [0.35, 0.65];
        let mut expected = 0.0;
        for (a, xi) in alpha.iter().zip(feats()) {
            let mut d = 0.0;
            for j in 0..2 {
                d += (x[j] - xi[j]).powi(2) / (x[j] + xi[j] + 1e-12);
            }
            expected += a * (-1.3 * 0.5 * d).exp();
        }
        assert_abs_diff_eq!(m.predict_instance(&x).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn bag_scores() {
        let m = model(vec![1.0, -0.5, 0.2], feats());
        let single = vec![vec![0.4, 0.6]];
        assert_eq!(
            m.predict_bag(&single).unwrap(),
            m.predict_instance(&single[0]).unwrap()
        );
        let empty: Vec<Vec<f64>> = vec![];
        assert!(m.predict_bag(&empty).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = model(vec![0.1, 0.2, 0.3], feats());
        let back: Model = serde_json::from_str(&m.to_json_string()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn scale_covariance_and_bag_dominance(
            alpha in prop::collection::vec(-2.0f64..2.0, 3),
            c in -3.0f64..3.0,
            pts in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let bag: Vec<Vec<f64>> = pts.chunks(2).map(|p| p.to_vec()).collect();
            let m = model(alpha.clone(), feats());
            let scaled = model(alpha.iter().map(|a| a * c).collect(), feats());
            let bag_score = m.predict_bag(&bag).unwrap();
            for x in &bag {
                let s = m.predict_instance(x).unwrap();
                prop_assert!(bag_score >= s);
                prop_assert!((scaled.predict_instance(x).unwrap() - c * s).abs() < 1e-12);
            }
            let mut rev = bag.clone();
            rev.reverse();
            prop_assert_eq!(m.predict_bag(&rev).unwrap(), bag_score);
        }
    }
}

//! Run configuration shared by the CLI and the evaluation harness.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Result, SwslError};
use crate::graphswsl::SolverConfig;
use crate::kernel::{estimate_gamma, GraphConfig, KernelConfig, KernelKind};
use crate::misvm::SvmConfig;

/// A positive real that may instead be derived from the data (`"auto"` in JSON).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl Serialize for AutoOr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AutoOr::Auto => s.serialize_str("auto"),
            AutoOr::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = AutoOr;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"auto\"")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<AutoOr, E> {
                if v == "auto" {
                    Ok(AutoOr::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

/// Kernel settings before data-dependent resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSettings {
    pub kind: KernelKind,
    pub gamma: AutoOr,
    pub sigma: f64,
}

impl Default for KernelSettings {
    fn default() -> Self {
        KernelSettings {
            kind: KernelKind::ExpChi2,
            gamma: AutoOr::Auto,
            sigma: 1.0,
        }
    }
}

impl KernelSettings {
    /// Fix `gamma`, estimating it from `features` when set to auto.
    pub fn resolve(&self, features: &[Vec<f64>]) -> Result<KernelConfig> {
        let gamma = match (self.kind, self.gamma) {
            (_, AutoOr::Value(g)) => g,
            (KernelKind::ExpChi2, AutoOr::Auto) => estimate_gamma(features)?,
            (KernelKind::Rbf, AutoOr::Auto) => 1.0,
        };
        let cfg = KernelConfig {
            kind: self.kind,
            gamma,
            sigma: self.sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Manifold-regularized least squares with bag-max constraints, trained by CCCP.
    Graphswsl,
    /// miSVM on the weak bags only.
    Misvm,
    /// miSVM over weak bags plus supervised instances as singleton bags.
    NaiveSwsl,
    /// Kernel SVM on the supervised instances only.
    Svm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Graphswsl => "graphswsl",
            Method::Misvm => "misvm",
            Method::NaiveSwsl => "naive_swsl",
            Method::Svm => "svm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = SwslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphswsl" => Ok(Method::Graphswsl),
            "misvm" => Ok(Method::Misvm),
            "naive_swsl" => Ok(Method::NaiveSwsl),
            "svm" => Ok(Method::Svm),
            other => Err(SwslError::InvalidArgument(format!(
                "unknown method `{other}`"
            ))),
        }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kernel: KernelSettings,
    pub graph: GraphConfig,
    pub solver: SolverConfig,
    pub svm: SvmConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SwslError::parse(origin, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SwslError::io(path, e))?;
        Self::from_json_str(&text, path)
    }
}

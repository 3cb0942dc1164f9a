//! Bounded proper losses, their expectations `L(p*, p)` and induced entropies `H(p) = L(p, p)`.
//!
//! Every loss is described by its pointwise vector `ℓ(·, p)`; the expectation under `p*` is the
//! inner product with that vector. Losses with a decision step (classification, weighted
//! FP/FN, three-part, asymmetric class penalty) first turn `p` into the Bayes action for that
//! cost structure, which keeps them proper.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, LabelDistribution};

pub const DEFAULT_CE_EPSILON: f64 = 1e-6;
pub const DEFAULT_FP_COST: f64 = 1.0;
pub const DEFAULT_FN_COST: f64 = 2.0;
pub const DEFAULT_CLASS0_PENALTY: f64 = 2.0;

const THREE_PART_LOW: f64 = 0.25;
const THREE_PART_HIGH: f64 = 15.0 / 16.0;
const THREE_PART_DEFER: f64 = 0.25;
const THREE_PART_FP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossRecord", into = "LossRecord")]
pub enum LossSpec {
    /// `‖e_y - p‖²`.
    Brier,
    /// Negative log-likelihood of `p` clamped to `[ε, 1-ε]` and renormalized, capped at `ln(1/ε)`.
    CrossEntropy { epsilon: f64 },
    /// 0-1 error of the argmax class.
    Classification,
    /// Binary; predicts 1 when `p1 · c_fn >= p0 · c_fp`.
    WeightedFpFn { c_fp: f64, c_fn: f64 },
    /// Binary; predict 0, defer at fixed cost 0.25, or predict 1 at false-positive cost 4.
    ThreePart,
    /// Multiclass; predicting class 0 costs `gamma` when wrong.
    AsymmetricClassPenalty { gamma: f64 },
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec::CrossEntropy {
            epsilon: DEFAULT_CE_EPSILON,
        }
    }

    pub fn weighted_fp_fn(c_fp: f64, c_fn: f64) -> Result<Self> {
        let spec = LossSpec::WeightedFpFn { c_fp, c_fn };
        spec.validate()?;
        Ok(spec)
    }

    pub fn asymmetric(gamma: f64) -> Result<Self> {
        let spec = LossSpec::AsymmetricClassPenalty { gamma };
        spec.validate()?;
        Ok(spec)
    }

    /// The six loss kinds with default parameters.
    pub fn all_defaults() -> Vec<LossSpec> {
        vec![
            LossSpec::Brier,
            LossSpec::cross_entropy(),
            LossSpec::Classification,
            LossSpec::WeightedFpFn {
                c_fp: DEFAULT_FP_COST,
                c_fn: DEFAULT_FN_COST,
            },
            LossSpec::ThreePart,
            LossSpec::AsymmetricClassPenalty {
                gamma: DEFAULT_CLASS0_PENALTY,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match *self {
            LossSpec::CrossEntropy { epsilon } => {
                if !(epsilon > 0.0 && epsilon < 0.5) {
                    return Err(Error::invalid(format!(
                        "cross-entropy clamp must lie in (0, 0.5), got {epsilon}"
                    )));
                }
                Ok(())
            }
            LossSpec::WeightedFpFn { c_fp, c_fn } => {
                positive("c_fp", c_fp)?;
                positive("c_fn", c_fn)
            }
            LossSpec::AsymmetricClassPenalty { gamma } => positive("gamma", gamma),
            _ => Ok(()),
        }
    }

    /// Upper bound `B` of the pointwise loss.
    pub fn bound(&self) -> f64 {
        match *self {
            LossSpec::Brier => 2.0,
            LossSpec::CrossEntropy { epsilon } => (1.0 / epsilon).ln(),
            LossSpec::Classification => 1.0,
            LossSpec::WeightedFpFn { c_fp, c_fn } => c_fp.max(c_fn),
            LossSpec::ThreePart => THREE_PART_FP,
            LossSpec::AsymmetricClassPenalty { gamma } => gamma.max(1.0),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LossSpec::Brier => "brier",
            LossSpec::CrossEntropy { .. } => "cross_entropy",
            LossSpec::Classification => "classification",
            LossSpec::WeightedFpFn { .. } => "weighted_fp_fn",
            LossSpec::ThreePart => "three_part",
            LossSpec::AsymmetricClassPenalty { .. } => "asymmetric_class_penalty",
        }
    }

    pub fn is_binary_only(&self) -> bool {
        matches!(self, LossSpec::WeightedFpFn { .. } | LossSpec::ThreePart)
    }

    pub fn supports(&self, num_classes: usize) -> Result<()> {
        if self.is_binary_only() && num_classes != 2 {
            return Err(Error::UnsupportedLoss(format!(
                "{} is defined for 2 classes only, got {num_classes}",
                self.kind_name()
            )));
        }
        Ok(())
    }

    /// `ℓ(y, p)` for every class `y`.
    pub fn loss_vector(&self, p: &LabelDistribution) -> Result<Vec<f64>> {
        self.supports(p.num_classes())?;
        let p = p.probs();
        let n = p.len();
        let v = match *self {
            LossSpec::Brier => {
                let sq: f64 = p.iter().map(|x| x * x).sum();
                p.iter().map(|py| (1.0 - 2.0 * py + sq).max(0.0)).collect()
            }
            LossSpec::CrossEntropy { epsilon } => {
                let clamped: Vec<f64> = p.iter().map(|x| x.clamp(epsilon, 1.0 - epsilon)).collect();
                let total: f64 = clamped.iter().sum();
                let cap = self.bound();
                clamped
                    .iter()
                    .map(|q| (-(q / total).ln()).clamp(0.0, cap))
                    .collect()
            }
            LossSpec::Classification => {
                let hat = argmax(p);
                (0..n).map(|y| if y == hat { 0.0 } else { 1.0 }).collect()
            }
            LossSpec::WeightedFpFn { c_fp, c_fn } => {
                if p[1] * c_fn >= p[0] * c_fp {
                    vec![c_fp, 0.0]
                } else {
                    vec![0.0, c_fn]
                }
            }
            LossSpec::ThreePart => {
                let p1 = p[1];
                if p1 < THREE_PART_LOW {
                    vec![0.0, 1.0]
                } else if p1 < THREE_PART_HIGH {
                    vec![THREE_PART_DEFER, THREE_PART_DEFER]
                } else {
                    vec![THREE_PART_FP, 0.0]
                }
            }
            LossSpec::AsymmetricClassPenalty { gamma } => {
                let mut scores = p.to_vec();
                scores[0] = gamma * p[0] + (1.0 - gamma);
                let hat = argmax(&scores);
                if hat == 0 {
                    (0..n).map(|y| if y == 0 { 0.0 } else { gamma }).collect()
                } else {
                    (0..n).map(|y| if y == hat { 0.0 } else { 1.0 }).collect()
                }
            }
        };
        Ok(v)
    }

    pub fn pointwise_loss(&self, y: usize, p: &LabelDistribution) -> Result<f64> {
        if y >= p.num_classes() {
            return Err(Error::invalid(format!(
                "label {y} out of range for {} classes",
                p.num_classes()
            )));
        }
        Ok(self.loss_vector(p)?[y])
    }

    /// `L(p*, p) = E_{y ~ p*} ℓ(y, p)`.
    pub fn expected_loss(&self, p_star: &LabelDistribution, p: &LabelDistribution) -> Result<f64> {
        if p_star.num_classes() != p.num_classes() {
            return Err(Error::invalid(format!(
                "class count mismatch: {} vs {}",
                p_star.num_classes(),
                p.num_classes()
            )));
        }
        let v = self.loss_vector(p)?;
        Ok(p_star.probs().iter().zip(&v).map(|(a, l)| a * l).sum())
    }

    /// Generalized entropy `H(p) = L(p, p)`.
    pub fn entropy(&self, p: &LabelDistribution) -> Result<f64> {
        self.expected_loss(p, p)
    }

    /// Reducible loss `L(p*, p) - L(p*, p*)`.
    pub fn reducible_loss(&self, p_star: &LabelDistribution, p: &LabelDistribution) -> Result<f64> {
        Ok(self.expected_loss(p_star, p)? - self.entropy(p_star)?)
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LossSpec::CrossEntropy { epsilon } if epsilon != DEFAULT_CE_EPSILON => {
                write!(f, "crossentropy:{epsilon}")
            }
            LossSpec::CrossEntropy { .. } => f.write_str("crossentropy"),
            LossSpec::Brier => f.write_str("brier"),
            LossSpec::Classification => f.write_str("classification"),
            LossSpec::WeightedFpFn { c_fp, c_fn } => write!(f, "fpfn:{c_fp}:{c_fn}"),
            LossSpec::ThreePart => f.write_str("threepart"),
            LossSpec::AsymmetricClassPenalty { gamma } => write!(f, "asym:{gamma}"),
        }
    }
}

/// Parses the CLI loss syntax: `brier`, `crossentropy[:eps]`, `classification`,
/// `fpfn[:c_fp:c_fn]`, `threepart`, `asym[:gamma]`.
impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase();
        let nums: Vec<f64> = parts
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad loss parameter `{t}` in `{s}`")))
            })
            .collect::<Result<_>>()?;
        let arity = |n: usize| {
            if nums.len() > n {
                Err(Error::invalid(format!("too many parameters in loss `{s}`")))
            } else {
                Ok(())
            }
        };
        let spec = match head.as_str() {
            "brier" | "square" => {
                arity(0)?;
                LossSpec::Brier
            }
            "crossentropy" | "cross_entropy" | "ce" => {
                arity(1)?;
                LossSpec::CrossEntropy {
                    epsilon: nums.first().copied().unwrap_or(DEFAULT_CE_EPSILON),
                }
            }
            "classification" | "zero_one" | "01" => {
                arity(0)?;
                LossSpec::Classification
            }
            "fpfn" | "weighted_fp_fn" => {
                arity(2)?;
                if nums.len() == 1 {
                    return Err(Error::invalid("fpfn takes both c_fp and c_fn"));
                }
                LossSpec::WeightedFpFn {
                    c_fp: nums.first().copied().unwrap_or(DEFAULT_FP_COST),
                    c_fn: nums.get(1).copied().unwrap_or(DEFAULT_FN_COST),
                }
            }
            "threepart" | "three_part" => {
                arity(0)?;
                LossSpec::ThreePart
            }
            "asym" | "asymmetric_class_penalty" => {
                arity(1)?;
                LossSpec::AsymmetricClassPenalty {
                    gamma: nums.first().copied().unwrap_or(DEFAULT_CLASS0_PENALTY),
                }
            }
            other => return Err(Error::invalid(format!("unknown loss `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Persisted form: `{kind, params, epsilon?}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl From<LossSpec> for LossRecord {
    fn from(spec: LossSpec) -> Self {
        let mut params = BTreeMap::new();
        let mut epsilon = None;
        match spec {
            LossSpec::CrossEntropy { epsilon: e } => epsilon = Some(e),
            LossSpec::WeightedFpFn { c_fp, c_fn } => {
                params.insert("c_fp".to_string(), c_fp);
                params.insert("c_fn".to_string(), c_fn);
            }
            LossSpec::AsymmetricClassPenalty { gamma } => {
                params.insert("gamma".to_string(), gamma);
            }
            _ => {}
        }
        LossRecord {
            kind: spec.kind_name().to_string(),
            params,
            epsilon,
        }
    }
}

impl TryFrom<LossRecord> for LossSpec {
    type Error = Error;

    fn try_from(r: LossRecord) -> Result<Self> {
        let param = |name: &str| {
            r.params
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("loss `{}` is missing `{name}`", r.kind)))
        };
        let spec = match r.kind.as_str() {
            "brier" => LossSpec::Brier,
            "cross_entropy" => LossSpec::CrossEntropy {
                epsilon: r.epsilon.unwrap_or(DEFAULT_CE_EPSILON),
            },
            "classification" => LossSpec::Classification,
            "weighted_fp_fn" => LossSpec::WeightedFpFn {
                c_fp: param("c_fp")?,
                c_fn: param("c_fn")?,
            },
            "three_part" => LossSpec::ThreePart,
            "asymmetric_class_penalty" => LossSpec::AsymmetricClassPenalty {
                gamma: param("gamma")?,
            },
            other => return Err(Error::invalid(format!("unknown loss kind `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

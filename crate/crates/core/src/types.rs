//! Shared vocabulary: simplex points, k-snapshot records, routing configurations and decisions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;

/// Absolute tolerance on the simplex sum accepted by [`LabelDistribution::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Below this deviation from 1 a vector is considered normalized to float precision and is
/// left untouched, which keeps repeated construction idempotent bit for bit.
const NORMALIZED_SLACK: f64 = 4.0 * f64::EPSILON;

/// A point of the probability simplex over `num_classes() >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, SIMPLEX_TOLERANCE)
    }

    /// Validates `probs` against the simplex, accepting sums within `tolerance` of one and
    /// renormalizing silently.
    pub fn with_tolerance(mut probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(format!(
                "a label distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        for (c, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() {
                return Err(Error::invalid(format!("probability for class {c} is not finite")));
            }
            if *p < 0.0 {
                if *p < -tolerance {
                    return Err(Error::invalid(format!("probability for class {c} is negative ({p})")));
                }
                *p = 0.0;
            }
            if *p > 1.0 + tolerance {
                return Err(Error::invalid(format!("probability for class {c} exceeds 1 ({p})")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, outside tolerance {tolerance}"
            )));
        }
        if (sum - 1.0).abs() > NORMALIZED_SLACK {
            for p in probs.iter_mut() {
                *p /= sum;
            }
        }
        for p in probs.iter_mut() {
            *p = p.min(1.0);
        }
        Ok(LabelDistribution { probs })
    }

    /// Binary distribution `(1 - p1, p1)`.
    pub fn binary(p1: f64) -> Result<Self> {
        Self::new(vec![1.0 - p1, p1])
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self::new(probs)
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Index of the largest probability; ties resolve to the lowest class index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    pub fn l1_distance(&self, other: &LabelDistribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Mean of a non-empty set of distributions over the same classes.
    pub fn mean<'a, I>(dists: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a LabelDistribution>,
    {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for d in dists {
            match acc.as_mut() {
                None => acc = Some(d.probs.clone()),
                Some(a) => {
                    if a.len() != d.probs.len() {
                        return Err(Error::invalid("class count mismatch while averaging"));
                    }
                    for (x, y) in a.iter_mut().zip(&d.probs) {
                        *x += y;
                    }
                }
            }
            n += 1;
        }
        let mut acc = acc.ok_or_else(|| Error::invalid("cannot average an empty set"))?;
        for x in acc.iter_mut() {
            *x /= n as f64;
        }
        Self::new(acc)
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        LabelDistribution::new(probs)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.probs
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Normalized histogram of `labels`, each label viewed as a one-hot vector.
pub fn snapshot_mean(labels: &[usize], num_classes: usize) -> Result<LabelDistribution> {
    if labels.is_empty() {
        return Err(Error::invalid("snapshot needs at least one label"));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    let k = labels.len() as f64;
    LabelDistribution::new(counts.into_iter().map(|c| c as f64 / k).collect())
}

/// One calibration or test record: a weak-model prediction with `k` sampled labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotExample {
    pub id: String,
    pub features: Option<Vec<f64>>,
    pub weak_pred: LabelDistribution,
    pub labels: Vec<usize>,
    pub snapshot_mean: LabelDistribution,
    /// Exact conditional label distribution, when known (synthetic data).
    pub truth: Option<LabelDistribution>,
}

impl SnapshotExample {
    pub fn new(
        id: impl Into<String>,
        features: Option<Vec<f64>>,
        weak_pred: LabelDistribution,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let snapshot_mean = snapshot_mean(&labels, weak_pred.num_classes())?;
        Ok(SnapshotExample {
            id: id.into(),
            features,
            weak_pred,
            labels,
            snapshot_mean,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: LabelDistribution) -> Result<Self> {
        if truth.num_classes() != self.weak_pred.num_classes() {
            return Err(Error::invalid("truth and prediction class counts differ"));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.weak_pred.num_classes()
    }

    /// Exact truth when attached, otherwise the snapshot mean.
    pub fn ground_truth(&self) -> &LabelDistribution {
        self.truth.as_ref().unwrap_or(&self.snapshot_mean)
    }
}

/// Predict with the weak model, route to oracle `i`, or abstain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Predict,
    Route(usize),
    Abstain,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Predict => f.write_str("predict"),
            Action::Route(i) => write!(f, "route:{i}"),
            Action::Abstain => f.write_str("abstain"),
        }
    }
}

/// A task configuration: loss, one routing penalty per oracle, abstention penalty.
///
/// `abstain_penalty = f64::INFINITY` disables abstention.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    pub loss: LossSpec,
    pub route_penalties: Vec<f64>,
    pub abstain_penalty: f64,
}

impl RoutingConfig {
    pub fn new(loss: LossSpec, route_penalties: Vec<f64>, abstain_penalty: f64) -> Result<Self> {
        if route_penalties.is_empty() {
            return Err(Error::invalid("at least one routing penalty is required"));
        }
        for a in &route_penalties {
            if a.is_nan() || *a < 0.0 {
                return Err(Error::invalid(format!("routing penalty must be >= 0, got {a}")));
            }
        }
        if abstain_penalty.is_nan() || abstain_penalty < 0.0 {
            return Err(Error::invalid(format!(
                "abstention penalty must be >= 0, got {abstain_penalty}"
            )));
        }
        Ok(RoutingConfig {
            loss,
            route_penalties,
            abstain_penalty,
        })
    }

    /// Single Bayes oracle with penalty `alpha`.
    pub fn single(loss: LossSpec, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(loss, vec![alpha], beta)
    }
}

/// The chosen action together with the estimated cost of every available action, listed in
/// tie-break priority order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub action: Action,
    pub est_costs: Vec<(Action, f64)>,
}

impl RoutingDecision {
    /// Argmin over `costs`, which must be given in priority order
    /// (Predict, Route(0), Route(1), ..., Abstain). The first minimum wins.
    pub fn from_costs(costs: Vec<(Action, f64)>) -> Self {
        let mut best = 0;
        for (i, (_, c)) in costs.iter().enumerate().skip(1) {
            if *c < costs[best].1 {
                best = i;
            }
        }
        RoutingDecision {
            action: costs[best].0,
            est_costs: costs,
        }
    }

    pub fn cost_of(&self, action: Action) -> Option<f64> {
        self.est_costs
            .iter()
            .find(|(a, _)| *a == action)
            .map(|(_, c)| *c)
    }

    pub fn chosen_cost(&self) -> f64 {
        self.cost_of(self.action).expect("chosen action has a cost")
    }
}

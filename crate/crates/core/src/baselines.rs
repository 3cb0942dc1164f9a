//! Priority scores for two-way routing curves. Higher scores are routed first.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrator::CalibratedRouterModel;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::partition::BinId;
use crate::types::{LabelDistribution, SnapshotExample};

/// Bin assignment and served prediction for each example of a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub bins: Vec<BinId>,
    pub predictions: Vec<LabelDistribution>,
}

impl Deployment {
    /// With `use_centroids` and a recalibrated model, each example is served its bin
    /// centroid; otherwise the raw weak prediction.
    pub fn new(model: &CalibratedRouterModel, test: &[SnapshotExample], use_centroids: bool) -> Result<Self> {
        let bins = test.iter().map(|e| model.bin_of(e)).collect::<Result<Vec<_>>>()?;
        let predictions = test
            .iter()
            .zip(&bins)
            .map(|(e, b)| {
                if use_centroids {
                    model.deployed_prediction(e, *b).into_owned()
                } else {
                    e.weak_pred.clone()
                }
            })
            .collect();
        Ok(Deployment { bins, predictions })
    }

    /// Raw weak predictions, all examples in a single bin.
    pub fn raw(test: &[SnapshotExample]) -> Self {
        Deployment {
            bins: vec![BinId::cell(0, 0); test.len()],
            predictions: test.iter().map(|e| e.weak_pred.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPolicy {
    pub name: String,
    /// One score per test example, in test order.
    pub scores: Vec<f64>,
}

impl RankedPolicy {
    pub fn new(name: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("policy score {s} is not finite")));
        }
        Ok(RankedPolicy {
            name: name.into(),
            scores,
        })
    }

    /// Test indices in routing order: descending score, ties by ascending id.
    pub fn order(&self, test: &[SnapshotExample]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then_with(|| test[a].id.cmp(&test[b].id))
        });
        idx
    }
}

fn check_len(test: &[SnapshotExample], deployment: &Deployment) -> Result<()> {
    if test.len() != deployment.len() {
        return Err(Error::invalid(format!(
            "{} test examples but {} deployed predictions",
            test.len(),
            deployment.len()
        )));
    }
    Ok(())
}

/// Entropy of the served prediction, `L(f(x), f(x))`.
pub fn total_uncertainty_scores(
    test: &[SnapshotExample],
    loss: &LossSpec,
    deployment: &Deployment,
) -> Result<RankedPolicy> {
    check_len(test, deployment)?;
    let scores = deployment
        .predictions
        .par_iter()
        .map(|p| loss.entropy(p))
        .collect::<Result<Vec<_>>>()?;
    RankedPolicy::new("total_uncertainty", scores)
}

fn true_reducible(test: &[SnapshotExample], loss: &LossSpec, deployment: &Deployment) -> Result<Vec<f64>> {
    check_len(test, deployment)?;
    test.par_iter()
        .zip(&deployment.predictions)
        .map(|(e, p)| loss.reducible_loss(e.ground_truth(), p))
        .collect()
}

/// True reducible loss of each point against its ground truth.
pub fn pointwise_optimal_scores(
    test: &[SnapshotExample],
    loss: &LossSpec,
    deployment: &Deployment,
) -> Result<RankedPolicy> {
    RankedPolicy::new("pointwise_optimal", true_reducible(test, loss, deployment)?)
}

/// Mean true reducible loss of the test points sharing a bin.
pub fn bucket_optimal_scores(
    test: &[SnapshotExample],
    loss: &LossSpec,
    deployment: &Deployment,
) -> Result<RankedPolicy> {
    let rl = true_reducible(test, loss, deployment)?;
    let mut sums: BTreeMap<BinId, (f64, usize)> = BTreeMap::new();
    for (r, b) in rl.iter().zip(&deployment.bins) {
        let s = sums.entry(*b).or_default();
        s.0 += r;
        s.1 += 1;
    }
    let scores = deployment
        .bins
        .iter()
        .map(|b| {
            let (s, n) = sums[b];
            s / n as f64
        })
        .collect();
    RankedPolicy::new("bucket_optimal", scores)
}

/// The calibrated router's estimated reducible loss of each point's bin.
pub fn hoc_router_scores(
    test: &[SnapshotExample],
    loss: &LossSpec,
    model: &CalibratedRouterModel,
    deployment: &Deployment,
) -> Result<RankedPolicy> {
    check_len(test, deployment)?;
    let mut per_bin = BTreeMap::new();
    for b in &deployment.bins {
        if !per_bin.contains_key(b) {
            per_bin.insert(*b, model.estimate_decomposition(*b, loss)?.reducible);
        }
    }
    RankedPolicy::new(
        "hoc_router",
        deployment.bins.iter().map(|b| per_bin[b]).collect(),
    )
}

/// Uniform random priorities from a seeded stream.
pub fn random_scores(test: &[SnapshotExample], seed: u64) -> Result<RankedPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RankedPolicy::new("random", (0..test.len()).map(|_| rng.random::<f64>()).collect())
}

/// Scores supplied from outside, keyed by example id.
pub fn external_scores(
    name: &str,
    test: &[SnapshotExample],
    scores: &HashMap<String, f64>,
) -> Result<RankedPolicy> {
    let v = test
        .iter()
        .map(|e| {
            scores
                .get(&e.id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no external score for example `{}`", e.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    RankedPolicy::new(name, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, weak: f64, truth: f64) -> SnapshotExample {
        SnapshotExample::new(id, None, LabelDistribution::binary(weak).unwrap(), vec![0])
            .unwrap()
            .with_truth(LabelDistribution::binary(truth).unwrap())
            .unwrap()
    }

    #[test]
    fn total_uncertainty_examples() {
        let test = vec![ex("a", 0.0, 0.0), ex("b", 0.5, 0.0), ex("c", 0.5, 1.0)];
        let s = total_uncertainty_scores(&test, &LossSpec::Brier, &Deployment::raw(&test)).unwrap();
        assert_eq!(s.scores[0], 0.0);
        assert!((s.scores[1] - 0.5).abs() < 1e-15);
        assert_eq!(s.scores[1], s.scores[2]);
    }

    #[test]
    fn pointwise_examples() {
        let test = vec![ex("a", 0.3, 0.3), ex("b", 1.0, 0.0)];
        let s = pointwise_optimal_scores(&test, &LossSpec::Brier, &Deployment::raw(&test)).unwrap();
        assert!(s.scores[0].abs() < 1e-15);
        assert!((s.scores[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bucket_scores_average_within_bins() {
        let test = vec![ex("a", 0.3, 0.3), ex("b", 1.0, 0.0), ex("c", 0.5, 0.5)];
        let mut dep = Deployment::raw(&test);
        dep.bins = vec![BinId::cell(0, 0), BinId::cell(0, 0), BinId::cell(0, 1)];
        let s = bucket_optimal_scores(&test, &LossSpec::Brier, &dep).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.scores[0], s.scores[1]);
        assert!(s.scores[2].abs() < 1e-15);
        assert_eq!(s.order(&test), vec![0, 1, 2]);

        dep.bins = (0..3).map(|i| BinId::cell(0, i)).collect();
        let b = bucket_optimal_scores(&test, &LossSpec::Brier, &dep).unwrap();
        let p = pointwise_optimal_scores(&test, &LossSpec::Brier, &dep).unwrap();
        assert_eq!(b.scores, p.scores);
    }

    #[test]
    fn ties_break_by_id() {
        let test = vec![ex("b", 0.5, 0.5), ex("a", 0.5, 0.5), ex("c", 0.1, 0.5)];
        let p = RankedPolicy::new("x", vec![1.0, 1.0, 2.0]).unwrap();
        assert_eq!(p.order(&test), vec![2, 1, 0]);
    }

    #[test]
    fn external_scores_require_every_id() {
        let test = vec![ex("a", 0.5, 0.5), ex("b", 0.5, 0.5)];
        let mut m = HashMap::new();
        m.insert("a".to_string(), 1.0);
        assert!(external_scores("ext", &test, &m).is_err());
        m.insert("b".to_string(), 2.0);
        assert_eq!(external_scores("ext", &test, &m).unwrap().scores, vec![1.0, 2.0]);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(RankedPolicy::new("x", vec![f64::NAN]).is_err());
    }
}

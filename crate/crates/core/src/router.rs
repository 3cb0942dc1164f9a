//! Predict / route / abstain decisions.
//!
//! The router evaluates a simulated cost for every action on a bin's tagged mixture and takes
//! the argmin. Decisions depend only on the bin, so a [`Router`] computes them once per bin and
//! answers queries by lookup.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrator::CalibratedRouterModel;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::partition::BinId;
use crate::types::{Action, LabelDistribution, RoutingConfig, RoutingDecision, SnapshotExample};

/// Monte Carlo sample count for aggregated oracles whose outcome space is too large to
/// enumerate.
pub const ORACLE_MC_SAMPLES: usize = 1000;
pub const ORACLE_MC_SEED: u64 = 0x6f72_6163_6c65;
/// Largest number of label-count vectors enumerated exactly.
const ENUMERATION_LIMIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// One-hot at the most frequent label (lowest class index on ties).
    MajorityVote,
    /// Empirical label frequencies.
    Mean,
}

/// An oracle whose expected loss is a function of the true conditional distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSpec {
    /// Returns `p*` itself; its expected loss is the entropy `L(p*, p*)`.
    Bayes,
    /// Draws `annotators` labels from `p*` and aggregates them.
    Aggregated {
        annotators: usize,
        rule: Aggregation,
    },
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if let OracleSpec::Aggregated { annotators: 0, .. } = self {
            return Err(Error::invalid("aggregated oracle needs at least one annotator"));
        }
        Ok(())
    }

    /// `c(L, p*)`: expected loss of this oracle's answer when the labels follow `p_star`.
    pub fn cost(&self, loss: &LossSpec, p_star: &LabelDistribution) -> Result<f64> {
        match *self {
            OracleSpec::Bayes => loss.entropy(p_star),
            OracleSpec::Aggregated { annotators, rule } => {
                let n = p_star.num_classes();
                if count_compositions(annotators, n) <= ENUMERATION_LIMIT {
                    aggregated_cost_exact(loss, p_star, annotators, rule)
                } else {
                    aggregated_cost_mc(loss, p_star, annotators, rule)
                }
            }
        }
    }
}

impl fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleSpec::Bayes => f.write_str("bayes"),
            OracleSpec::Aggregated {
                annotators,
                rule: Aggregation::MajorityVote,
            } => write!(f, "majority:{annotators}"),
            OracleSpec::Aggregated {
                annotators,
                rule: Aggregation::Mean,
            } => write!(f, "mean:{annotators}"),
        }
    }
}

/// CLI syntax: `bayes`, `majority:K`, `mean:K`.
impl FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "bayes" {
            return Ok(OracleSpec::Bayes);
        }
        let (name, k) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("unknown oracle `{s}`")))?;
        let rule = match name {
            "majority" => Aggregation::MajorityVote,
            "mean" => Aggregation::Mean,
            _ => return Err(Error::invalid(format!("unknown oracle `{s}`"))),
        };
        let annotators = k
            .parse()
            .map_err(|_| Error::invalid(format!("bad annotator count in `{s}`")))?;
        let spec = OracleSpec::Aggregated { annotators, rule };
        spec.validate()?;
        Ok(spec)
    }
}

fn count_compositions(k: usize, n: usize) -> usize {
    // C(k + n - 1, n - 1), saturating
    let mut c: usize = 1;
    for i in 1..n {
        c = c.saturating_mul(k + i) / i;
        if c > ENUMERATION_LIMIT {
            return usize::MAX;
        }
    }
    c
}

fn aggregate(counts: &[usize], k: usize, rule: Aggregation) -> Result<LabelDistribution> {
    match rule {
        Aggregation::Mean => {
            LabelDistribution::new(counts.iter().map(|&c| c as f64 / k as f64).collect())
        }
        Aggregation::MajorityVote => {
            let mut best = 0;
            for (i, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = i;
                }
            }
            LabelDistribution::one_hot(best, counts.len())
        }
    }
}

fn aggregated_cost_exact(
    loss: &LossSpec,
    p_star: &LabelDistribution,
    k: usize,
    rule: Aggregation,
) -> Result<f64> {
    let n = p_star.num_classes();
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=k).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let mut counts = vec![0usize; n];
    let mut total = 0.0;
    enumerate_counts(&mut counts, 0, k, &mut |counts| {
        let mut log_p = ln_fact[k];
        for (c, p) in counts.iter().zip(p_star.probs()) {
            if *c > 0 {
                if *p == 0.0 {
                    return Ok(());
                }
                log_p += *c as f64 * p.ln() - ln_fact[*c];
            }
        }
        total += log_p.exp() * loss.expected_loss(p_star, &aggregate(counts, k, rule)?)?;
        Ok(())
    })?;
    Ok(total)
}

fn enumerate_counts<F>(counts: &mut [usize], pos: usize, remaining: usize, f: &mut F) -> Result<()>
where
    F: FnMut(&[usize]) -> Result<()>,
{
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        return f(counts);
    }
    for c in 0..=remaining {
        counts[pos] = c;
        enumerate_counts(counts, pos + 1, remaining - c, f)?;
    }
    counts[pos] = 0;
    Ok(())
}

fn aggregated_cost_mc(
    loss: &LossSpec,
    p_star: &LabelDistribution,
    k: usize,
    rule: Aggregation,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_MC_SEED);
    let n = p_star.num_classes();
    let mut counts = vec![0usize; n];
    let mut total = 0.0;
    for _ in 0..ORACLE_MC_SAMPLES {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..k {
            counts[sample_class(&mut rng, p_star.probs())] += 1;
        }
        total += loss.expected_loss(p_star, &aggregate(&counts, k, rule)?)?;
    }
    Ok(total / ORACLE_MC_SAMPLES as f64)
}

pub(crate) fn sample_class<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn check_oracles(config: &RoutingConfig, oracles: &[OracleSpec]) -> Result<()> {
    if oracles.len() != config.route_penalties.len() {
        return Err(Error::invalid(format!(
            "{} oracles given for {} routing penalties",
            oracles.len(),
            config.route_penalties.len()
        )));
    }
    oracles.iter().try_for_each(OracleSpec::validate)
}

/// Simulated cost of every action on `bin`, in tie-break priority order.
pub fn simulated_costs(
    model: &CalibratedRouterModel,
    bin: BinId,
    config: &RoutingConfig,
    oracles: &[OracleSpec],
) -> Result<Vec<(Action, f64)>> {
    check_oracles(config, oracles)?;
    let dec = model.estimate_decomposition(bin, &config.loss)?;
    let mixture = model.mixture(bin);
    let mut costs = Vec::with_capacity(oracles.len() + 2);
    costs.push((Action::Predict, dec.irreducible + dec.reducible));
    for (i, (oracle, alpha)) in oracles.iter().zip(&config.route_penalties).enumerate() {
        let expected = match oracle {
            OracleSpec::Bayes => dec.irreducible,
            _ => mixture.average(|e| oracle.cost(&config.loss, &e.snapshot_mean))?,
        };
        costs.push((Action::Route(i), expected + alpha));
    }
    costs.push((Action::Abstain, config.abstain_penalty));
    Ok(costs)
}

pub fn decide(
    model: &CalibratedRouterModel,
    bin: BinId,
    config: &RoutingConfig,
    oracles: &[OracleSpec],
) -> Result<RoutingDecision> {
    Ok(RoutingDecision::from_costs(simulated_costs(model, bin, config, oracles)?))
}

/// Closed-form optimal action for a single Bayes oracle.
pub fn tree_decide(il: f64, rl: f64, alpha: f64, beta: f64) -> Action {
    if rl >= alpha {
        if il >= beta - alpha {
            Action::Abstain
        } else {
            Action::Route(0)
        }
    } else if il + rl >= beta {
        Action::Abstain
    } else {
        Action::Predict
    }
}

/// True cost of taking `action` at a point with conditional distribution `p_star` where the
/// deployed prediction is `prediction`.
pub fn true_cost(
    action: Action,
    p_star: &LabelDistribution,
    prediction: &LabelDistribution,
    config: &RoutingConfig,
    oracles: &[OracleSpec],
) -> Result<f64> {
    match action {
        Action::Predict => config.loss.expected_loss(p_star, prediction),
        Action::Route(i) => {
            let oracle = oracles
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no oracle with index {i}")))?;
            Ok(oracle.cost(&config.loss, p_star)? + config.route_penalties[i])
        }
        Action::Abstain => Ok(config.abstain_penalty),
    }
}

/// Argmin of the true costs at a single point.
pub fn pointwise_optimal(
    p_star: &LabelDistribution,
    weak: &LabelDistribution,
    config: &RoutingConfig,
    oracles: &[OracleSpec],
) -> Result<RoutingDecision> {
    check_oracles(config, oracles)?;
    let mut costs = Vec::with_capacity(oracles.len() + 2);
    costs.push((Action::Predict, true_cost(Action::Predict, p_star, weak, config, oracles)?));
    for i in 0..oracles.len() {
        let a = Action::Route(i);
        costs.push((a, true_cost(a, p_star, weak, config, oracles)?));
    }
    costs.push((Action::Abstain, config.abstain_penalty));
    Ok(RoutingDecision::from_costs(costs))
}

/// A model bound to one routing configuration, with every bin's decision precomputed.
#[derive(Debug)]
pub struct Router<'a> {
    model: &'a CalibratedRouterModel,
    config: RoutingConfig,
    oracles: Vec<OracleSpec>,
    decisions: BTreeMap<BinId, RoutingDecision>,
}

impl<'a> Router<'a> {
    pub fn new(
        model: &'a CalibratedRouterModel,
        config: RoutingConfig,
        oracles: Vec<OracleSpec>,
    ) -> Result<Self> {
        check_oracles(&config, &oracles)?;
        config.loss.supports(model.num_classes)?;
        let decisions = model
            .all_bins()
            .into_par_iter()
            .map(|bin| Ok((bin, decide(model, bin, &config, &oracles)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Router {
            model,
            config,
            oracles,
            decisions,
        })
    }

    /// Single Bayes oracle per routing penalty.
    pub fn with_bayes_oracles(model: &'a CalibratedRouterModel, config: RoutingConfig) -> Result<Self> {
        let oracles = vec![OracleSpec::Bayes; config.route_penalties.len()];
        Self::new(model, config, oracles)
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.config
    }

    pub fn oracles(&self) -> &[OracleSpec] {
        &self.oracles
    }

    pub fn model(&self) -> &CalibratedRouterModel {
        self.model
    }

    pub fn decision_for_bin(&self, bin: BinId) -> &RoutingDecision {
        &self.decisions[&bin]
    }

    pub fn route(&self, example: &SnapshotExample) -> Result<(BinId, &RoutingDecision)> {
        let bin = self.model.bin_of(example)?;
        Ok((bin, self.decision_for_bin(bin)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_examples() {
        assert_eq!(tree_decide(0.2, 0.1, 0.05, 0.3), Action::Route(0));
        assert_eq!(tree_decide(0.0, 0.0, 0.1, 0.2), Action::Predict);
        assert_eq!(tree_decide(1.0, 0.5, 0.1, 0.2), Action::Abstain);
        assert_eq!(tree_decide(5.0, 3.0, 0.1, f64::INFINITY), Action::Route(0));
    }

    #[test]
    fn argmin_examples() {
        let d = RoutingDecision::from_costs(vec![
            (Action::Predict, 0.3),
            (Action::Route(0), 0.25),
            (Action::Abstain, 0.3),
        ]);
        assert_eq!(d.action, Action::Route(0));
        let d = RoutingDecision::from_costs(vec![
            (Action::Predict, 0.3),
            (Action::Route(0), 0.3),
            (Action::Abstain, 0.3),
        ]);
        assert_eq!(d.action, Action::Predict);
        let d = RoutingDecision::from_costs(vec![
            (Action::Predict, 0.3),
            (Action::Route(0), 0.1),
            (Action::Abstain, 0.0),
        ]);
        assert_eq!(d.action, Action::Abstain);
    }

    #[test]
    fn pointwise_examples() {
        let one = LabelDistribution::binary(0.0).unwrap();
        let other = LabelDistribution::binary(1.0).unwrap();
        let cfg = RoutingConfig::single(LossSpec::Brier, 0.1, f64::INFINITY).unwrap();
        let d = pointwise_optimal(&one, &other, &cfg, &[OracleSpec::Bayes]).unwrap();
        assert_eq!(d.action, Action::Route(0));
        assert_eq!(d.cost_of(Action::Predict), Some(2.0));

        let u = LabelDistribution::uniform(2).unwrap();
        let cfg = RoutingConfig::single(LossSpec::Brier, 0.1, 0.0).unwrap();
        let d = pointwise_optimal(&u, &u, &cfg, &[OracleSpec::Bayes]).unwrap();
        assert_eq!(d.action, Action::Abstain);

        let cfg = RoutingConfig::single(LossSpec::Brier, 0.1, 0.4).unwrap();
        let p = LabelDistribution::binary(0.3).unwrap();
        let d = pointwise_optimal(&p, &p, &cfg, &[OracleSpec::Bayes]).unwrap();
        assert_ne!(d.action, Action::Route(0));
    }

    #[test]
    fn oracle_syntax() {
        assert_eq!("bayes".parse::<OracleSpec>().unwrap(), OracleSpec::Bayes);
        let m: OracleSpec = "majority:5".parse().unwrap();
        assert_eq!(m.to_string(), "majority:5");
        assert!("majority:0".parse::<OracleSpec>().is_err());
        assert!("vote:3".parse::<OracleSpec>().is_err());
    }

    #[test]
    fn single_annotator_mean_oracle_on_brier() {
        // one label y ~ p, answer one_hot(y): E‖p − e_y‖² = 1 − ‖p‖² + (1 − ‖p‖²) = 2(1 − ‖p‖²)
        let p = LabelDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let oracle = OracleSpec::Aggregated {
            annotators: 1,
            rule: Aggregation::Mean,
        };
        let c = oracle.cost(&LossSpec::Brier, &p).unwrap();
        assert!((c - 2.0 * (1.0 - 0.38)).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_close_to_enumeration() {
        let p = LabelDistribution::new(vec![0.6, 0.4]).unwrap();
        let exact = aggregated_cost_exact(&LossSpec::Brier, &p, 5, Aggregation::MajorityVote).unwrap();
        let mc = aggregated_cost_mc(&LossSpec::Brier, &p, 5, Aggregation::MajorityVote).unwrap();
        // Brier of a one-hot answer is at most 2, so the MC standard error is below 2/sqrt(1000)
        assert!((exact - mc).abs() < 4.0 * 2.0 / (ORACLE_MC_SAMPLES as f64).sqrt());
    }

    #[test]
    fn composition_count() {
        assert_eq!(count_compositions(3, 2), 4);
        assert_eq!(count_compositions(2, 3), 6);
        assert_eq!(count_compositions(1000, 10), usize::MAX);
    }
}

//! Routing curves, three-way cost sweeps and multi-loss reports.

use std::fmt::Write as _;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    bucket_optimal_scores, hoc_router_scores, pointwise_optimal_scores, total_uncertainty_scores,
    Deployment, RankedPolicy,
};
use crate::calibrator::CalibratedRouterModel;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::router::{OracleSpec, Router};
use crate::types::{Action, RoutingConfig, SnapshotExample};

pub const CURVE_GRID_POINTS: usize = 101;

/// Pairwise (cascade) summation; the reduction order depends only on the slice length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Sample standard deviation divided by `sqrt(n)`.
pub fn standard_error(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    let sq: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    (pairwise_sum(&sq) / (n - 1) as f64).sqrt() / (n as f64).sqrt()
}

/// Number of points routed at grid index `i`: `round(i·n/100)`.
pub fn routed_count(i: usize, n: usize) -> usize {
    let steps = CURVE_GRID_POINTS - 1;
    (2 * i * n + steps) / (2 * steps)
}

pub fn grid_fraction(i: usize) -> f64 {
    i as f64 / (CURVE_GRID_POINTS - 1) as f64
}

/// Per-point loss when kept (`L(p*, f)`) and when routed to the Bayes oracle (`L(p*, p*)`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub unrouted: Vec<f64>,
    pub routed: Vec<f64>,
}

impl LossTerms {
    pub fn new(test: &[SnapshotExample], loss: &LossSpec, deployment: &Deployment) -> Result<Self> {
        if test.len() != deployment.len() {
            return Err(Error::invalid("deployment does not match the test set"));
        }
        if test.is_empty() {
            return Err(Error::invalid("test set is empty"));
        }
        let pairs = test
            .par_iter()
            .zip(&deployment.predictions)
            .map(|(e, p)| {
                let gt = e.ground_truth();
                Ok((loss.expected_loss(gt, p)?, loss.entropy(gt)?))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let (unrouted, routed) = pairs.into_iter().unzip();
        Ok(LossTerms { unrouted, routed })
    }

    pub fn len(&self) -> usize {
        self.unrouted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unrouted.is_empty()
    }

    /// Mean loss along a routing order over (a multiset of) test indices.
    pub fn curve_values(&self, order: &[usize]) -> Vec<f64> {
        let n = order.len();
        let base: Vec<f64> = order.iter().map(|&i| self.unrouted[i]).collect();
        let base = pairwise_sum(&base);
        // compensated prefix sums of the per-point saving
        let mut prefix = Vec::with_capacity(n + 1);
        let (mut s, mut c) = (0.0f64, 0.0f64);
        prefix.push(0.0);
        for &i in order {
            let d = self.unrouted[i] - self.routed[i];
            let t = s + d;
            c += if s.abs() >= d.abs() { (s - t) + d } else { (d - t) + s };
            s = t;
            prefix.push(s + c);
        }
        (0..CURVE_GRID_POINTS)
            .map(|g| {
                let k = routed_count(g, n);
                if k == n {
                    let r: Vec<f64> = order.iter().map(|&i| self.routed[i]).collect();
                    mean(&r)
                } else {
                    (base - prefix[k]) / n as f64
                }
            })
            .collect()
    }

    /// Expected curve of a uniformly random routing order.
    pub fn random_curve(&self) -> Vec<f64> {
        let n = self.len();
        let u = mean(&self.unrouted);
        let r = mean(&self.routed);
        (0..CURVE_GRID_POINTS)
            .map(|g| {
                let q = routed_count(g, n) as f64 / n as f64;
                (1.0 - q) * u + q * r
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingCurve {
    pub policy: String,
    pub loss: String,
    pub points: Vec<CurvePoint>,
}

impl RoutingCurve {
    pub fn from_values(policy: &str, loss: &LossSpec, values: Vec<f64>) -> Self {
        RoutingCurve {
            policy: policy.to_string(),
            loss: loss.to_string(),
            points: values
                .into_iter()
                .enumerate()
                .map(|(i, mean_loss)| CurvePoint {
                    fraction: grid_fraction(i),
                    mean_loss,
                })
                .collect(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_loss).collect()
    }

    pub fn at(&self, fraction: f64) -> f64 {
        let i = (fraction * (CURVE_GRID_POINTS - 1) as f64).round() as usize;
        self.points[i].mean_loss
    }
}

pub fn routing_curve(
    policy: &RankedPolicy,
    test: &[SnapshotExample],
    loss: &LossSpec,
    deployment: &Deployment,
) -> Result<RoutingCurve> {
    let terms = LossTerms::new(test, loss, deployment)?;
    policy_curve(policy, test, loss, &terms)
}

pub fn policy_curve(
    policy: &RankedPolicy,
    test: &[SnapshotExample],
    loss: &LossSpec,
    terms: &LossTerms,
) -> Result<RoutingCurve> {
    if policy.scores.len() != test.len() {
        return Err(Error::invalid(format!(
            "policy `{}` scores {} points, test set has {}",
            policy.name,
            policy.scores.len(),
            test.len()
        )));
    }
    Ok(RoutingCurve::from_values(
        &policy.name,
        loss,
        terms.curve_values(&policy.order(test)),
    ))
}

/// Curves of `policies` on `resamples` bootstrap resamples of the test set:
/// `out[r][p][g]`. Each resample is ordered by the policy's global ranking.
pub fn bootstrap_curves(
    policies: &[&RankedPolicy],
    test: &[SnapshotExample],
    terms: &LossTerms,
    resamples: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let n = test.len();
    let ranks: Vec<Vec<usize>> = policies
        .iter()
        .map(|p| {
            let mut rank = vec![0; n];
            for (pos, i) in p.order(test).into_iter().enumerate() {
                rank[i] = pos;
            }
            rank
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<usize>> = (0..resamples)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect();
    draws
        .par_iter()
        .map(|draw| {
            ranks
                .iter()
                .map(|rank| {
                    let mut order = draw.clone();
                    order.sort_by_key(|&i| rank[i]);
                    terms.curve_values(&order)
                })
                .collect()
        })
        .collect()
}

/// Per-grid standard deviation across resamples of `f(curves of one resample)`.
pub fn bootstrap_se<F>(boot: &[Vec<Vec<f64>>], f: F) -> Vec<f64>
where
    F: Fn(&[Vec<f64>], usize) -> f64,
{
    (0..CURVE_GRID_POINTS)
        .map(|g| {
            let v: Vec<f64> = boot.iter().map(|curves| f(curves, g)).collect();
            standard_error(&v) * (v.len() as f64).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPolicy {
    ThreeWay,
    PredictRoute,
    PredictAbstain,
}

impl SweepPolicy {
    pub const ALL: [SweepPolicy; 3] = [
        SweepPolicy::ThreeWay,
        SweepPolicy::PredictRoute,
        SweepPolicy::PredictAbstain,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepPolicy::ThreeWay => "three_way",
            SweepPolicy::PredictRoute => "predict_route",
            SweepPolicy::PredictAbstain => "predict_abstain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub policy: SweepPolicy,
    /// Mean true cost against ground truth.
    pub mean_cost: f64,
    pub std_error: f64,
    /// Mean estimated (simulated) cost of the chosen actions.
    pub est_mean_cost: f64,
    /// Standard error of the per-point cost difference three-way minus this policy.
    pub paired_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSweep {
    pub loss: String,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl CostSweep {
    pub fn row(&self, beta_index: usize, policy: SweepPolicy) -> &SweepRow {
        let p = SweepPolicy::ALL.iter().position(|q| *q == policy).unwrap();
        &self.rows[beta_index * SweepPolicy::ALL.len() + p]
    }
}

/// Per-point true costs of each action, computed once per sweep.
struct PointCosts {
    predict: Vec<f64>,
    route: Vec<Vec<f64>>,
}

pub fn cost_sweep(
    model: &CalibratedRouterModel,
    test: &[SnapshotExample],
    deployment: &Deployment,
    loss: &LossSpec,
    alphas: &[f64],
    betas: &[f64],
    oracles: &[OracleSpec],
) -> Result<CostSweep> {
    if test.len() != deployment.len() || test.is_empty() {
        return Err(Error::invalid("deployment does not match a nonempty test set"));
    }
    if alphas.len() != oracles.len() {
        return Err(Error::invalid("one routing penalty per oracle is required"));
    }
    loss.supports(model.num_classes)?;
    let costs = test
        .par_iter()
        .zip(&deployment.predictions)
        .map(|(e, p)| {
            let gt = e.ground_truth();
            let route = oracles
                .iter()
                .map(|o| o.cost(loss, gt))
                .collect::<Result<Vec<_>>>()?;
            Ok((loss.expected_loss(gt, p)?, route))
        })
        .collect::<Result<Vec<_>>>()?;
    let (predict, route) = costs.into_iter().unzip();
    let point_costs = PointCosts { predict, route };

    let evaluate = |router: &Router| -> (Vec<f64>, Vec<f64>) {
        let cfg = router.config();
        deployment
            .bins
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let d = router.decision_for_bin(*b);
                let truth = match d.action {
                    Action::Predict => point_costs.predict[i],
                    Action::Route(j) => point_costs.route[i][j] + cfg.route_penalties[j],
                    Action::Abstain => cfg.abstain_penalty,
                };
                (truth, d.chosen_cost())
            })
            .unzip()
    };

    let pr_router = Router::new(
        model,
        RoutingConfig::new(*loss, alphas.to_vec(), f64::INFINITY)?,
        oracles.to_vec(),
    )?;
    let pr = evaluate(&pr_router);

    let mut rows = Vec::with_capacity(betas.len() * 3);
    for &beta in betas {
        let three = Router::new(
            model,
            RoutingConfig::new(*loss, alphas.to_vec(), beta)?,
            oracles.to_vec(),
        )?;
        let pa = Router::new(
            model,
            RoutingConfig::new(*loss, vec![f64::INFINITY; alphas.len()], beta)?,
            oracles.to_vec(),
        )?;
        let tw = evaluate(&three);
        let pa = evaluate(&pa);
        for (policy, (truth, est)) in [
            (SweepPolicy::ThreeWay, &tw),
            (SweepPolicy::PredictRoute, &pr),
            (SweepPolicy::PredictAbstain, &pa),
        ] {
            let diff: Vec<f64> = tw.0.iter().zip(truth).map(|(a, b)| a - b).collect();
            rows.push(SweepRow {
                beta,
                policy,
                mean_cost: mean(truth),
                std_error: standard_error(truth),
                est_mean_cost: mean(est),
                paired_se: standard_error(&diff),
            });
        }
    }
    Ok(CostSweep {
        loss: loss.to_string(),
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLossReport {
    pub curves: Vec<RoutingCurve>,
    /// Losses that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Routing curves of the calibrated router and the baselines for each loss, all served by one
/// calibrated model.
pub fn multi_loss_report(
    model: &CalibratedRouterModel,
    test: &[SnapshotExample],
    deployment: &Deployment,
    losses: &[LossSpec],
    external: Option<&RankedPolicy>,
) -> Result<MultiLossReport> {
    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    for loss in losses {
        if let Err(e) = loss.supports(model.num_classes) {
            warn!("skipping loss {loss}: {e}");
            skipped.push((loss.to_string(), e.to_string()));
            continue;
        }
        let terms = LossTerms::new(test, loss, deployment)?;
        let mut policies = vec![
            hoc_router_scores(test, loss, model, deployment)?,
            total_uncertainty_scores(test, loss, deployment)?,
            bucket_optimal_scores(test, loss, deployment)?,
            pointwise_optimal_scores(test, loss, deployment)?,
        ];
        if let Some(ext) = external {
            policies.push(ext.clone());
        }
        for p in &policies {
            curves.push(policy_curve(p, test, loss, &terms)?);
        }
        curves.push(RoutingCurve::from_values("random", loss, terms.random_curve()));
    }
    Ok(MultiLossReport { curves, skipped })
}

/// Inclusive grid `lo:hi:step`; the last point is kept when within half a step of `hi`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad number `{t}` in grid `{s}`")))
    };
    match parts.as_slice() {
        [single] => {
            let v = if single.trim().eq_ignore_ascii_case("inf") {
                f64::INFINITY
            } else {
                num(single)?
            };
            Ok(vec![v])
        }
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if step.is_nan() || step <= 0.0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
                return Err(Error::invalid(format!("invalid grid `{s}`")));
            }
            let n = ((hi - lo) / step + 0.5).floor() as usize;
            Ok((0..=n)
                .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        _ => Err(Error::invalid(format!("grid must be `value` or `lo:hi:step`, got `{s}`"))),
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

pub fn curves_to_csv(curves: &[RoutingCurve]) -> String {
    let mut out = String::from("policy,loss,fraction,mean_loss\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                c.policy,
                c.loss,
                fmt_f64(p.fraction),
                fmt_f64(p.mean_loss)
            );
        }
    }
    out
}

pub fn sweep_to_csv(sweep: &CostSweep) -> String {
    let mut out = String::from("alpha,beta,policy,mean_cost,std_error,est_mean_cost,paired_se\n");
    let alpha = sweep
        .alphas
        .iter()
        .map(|a| fmt_f64(*a))
        .collect::<Vec<_>>()
        .join(";");
    for r in &sweep.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            alpha,
            fmt_f64(r.beta),
            r.policy.name(),
            fmt_f64(r.mean_cost),
            fmt_f64(r.std_error),
            fmt_f64(r.est_mean_cost),
            fmt_f64(r.paired_se)
        );
    }
    out
}

//! Randomized checks of the loss and routing lemmas, runnable from the CLI.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibrator::CalibratedRouterModel;
use crate::error::Result;
use crate::losses::LossSpec;
use crate::partition::{PartitionKind, PartitionSpec};
use crate::router::{simulated_costs, tree_decide, OracleSpec};
use crate::synthetic::{generate, GroundTruthFn, SyntheticConfig};
use crate::types::{Action, LabelDistribution, RoutingConfig, RoutingDecision};

pub const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest observed excess over the bound (negative when every trial had room).
    pub worst_excess: f64,
    /// Smallest failing input found by bisection, if any trial failed.
    pub counterexample: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, {} violations, worst excess {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.violations,
            self.worst_excess
        )?;
        if let Some(c) = &self.counterexample {
            write!(f, ", counterexample {c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Point on the simplex: uniform (Dirichlet(1)) most of the time, with faces and vertices
/// mixed in so boundary behaviour is exercised.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> LabelDistribution {
    let mut w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    match rng.random_range(0..10) {
        0 => {
            let c = rng.random_range(0..n);
            w.iter_mut().enumerate().for_each(|(i, x)| *x = f64::from(u8::from(i == c)));
        }
        1 => {
            let c = rng.random_range(0..n);
            w[c] = 0.0;
            if w.iter().all(|x| *x == 0.0) {
                w[(c + 1) % n] = 1.0;
            }
        }
        _ => {}
    }
    let s: f64 = w.iter().sum();
    LabelDistribution::new(w.into_iter().map(|x| x / s).collect()).expect("normalized weights")
}

fn lerp(a: &LabelDistribution, b: &LabelDistribution, t: f64) -> LabelDistribution {
    LabelDistribution::new(
        a.probs()
            .iter()
            .zip(b.probs())
            .map(|(x, y)| x + t * (y - x))
            .collect(),
    )
    .expect("convex combination")
}

/// Moves `p2` toward `p1` while `fails` still holds; returns the closest failing point.
fn shrink<F>(p1: &LabelDistribution, p2: &LabelDistribution, fails: F) -> LabelDistribution
where
    F: Fn(&LabelDistribution) -> bool,
{
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if fails(&lerp(p1, p2, mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lerp(p1, p2, hi)
}

fn class_counts(loss: &LossSpec) -> Vec<usize> {
    if loss.is_binary_only() {
        vec![2]
    } else {
        vec![2, 3]
    }
}

/// `|L(p1, q) − L(p2, q)| ≤ (B/2)·‖p1 − p2‖₁` and the same for `L(p, p)`.
pub fn lipschitz_checks(loss: &LossSpec, n: usize, trials: usize, seed: u64) -> Result<[CheckResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_b = loss.bound() / 2.0;
    let tl_excess = |p1: &LabelDistribution, p2: &LabelDistribution, q: &LabelDistribution| -> f64 {
        let d = loss.expected_loss(p1, q).unwrap() - loss.expected_loss(p2, q).unwrap();
        d.abs() - half_b * p1.l1_distance(p2)
    };
    let ir_excess = |p1: &LabelDistribution, p2: &LabelDistribution| -> f64 {
        let d = loss.entropy(p1).unwrap() - loss.entropy(p2).unwrap();
        d.abs() - half_b * p1.l1_distance(p2)
    };
    let mut tl = CheckResult {
        name: format!("lipschitz_total:{loss}:{n}"),
        trials,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
        counterexample: None,
    };
    let mut ir = CheckResult {
        name: format!("lipschitz_entropy:{loss}:{n}"),
        ..tl.clone()
    };
    for _ in 0..trials {
        let p1 = random_simplex(&mut rng, n);
        let p2 = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        let e = tl_excess(&p1, &p2, &q);
        tl.worst_excess = tl.worst_excess.max(e);
        if e > SLACK {
            tl.violations += 1;
            if tl.counterexample.is_none() {
                let p2s = shrink(&p1, &p2, |p| tl_excess(&p1, p, &q) > SLACK);
                tl.counterexample = Some(format!("p1={:?} p2={:?} q={:?}", p1.probs(), p2s.probs(), q.probs()));
            }
        }
        let e = ir_excess(&p1, &p2);
        ir.worst_excess = ir.worst_excess.max(e);
        if e > SLACK {
            ir.violations += 1;
            if ir.counterexample.is_none() {
                let p2s = shrink(&p1, &p2, |p| ir_excess(&p1, p) > SLACK);
                ir.counterexample = Some(format!("p1={:?} p2={:?}", p1.probs(), p2s.probs()));
            }
        }
    }
    Ok([tl, ir])
}

/// `L(p, p) ≤ L(p, q)` for random pairs.
pub fn properness_check(loss: &LossSpec, n: usize, trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = CheckResult {
        name: format!("properness:{loss}:{n}"),
        trials,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
        counterexample: None,
    };
    for _ in 0..trials {
        let p = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        let e = loss.entropy(&p)? - loss.expected_loss(&p, &q)?;
        r.worst_excess = r.worst_excess.max(e);
        if e > SLACK {
            r.violations += 1;
            if r.counterexample.is_none() {
                let qs = shrink(&p, &q, |q| {
                    loss.entropy(&p).unwrap() - loss.expected_loss(&p, q).unwrap() > SLACK
                });
                r.counterexample = Some(format!("p={:?} q={:?}", p.probs(), qs.probs()));
            }
        }
    }
    Ok(r)
}

/// The closed-form decision tree against the argmin of `{IL+RL, IL+α, β}`, skipping inputs
/// within `1e-12` of a tie.
pub fn tree_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = CheckResult {
        name: "tree_vs_argmin".to_string(),
        trials: 0,
        violations: 0,
        worst_excess: 0.0,
        counterexample: None,
    };
    for _ in 0..trials {
        let il: f64 = rng.random_range(0.0..2.0);
        let rl: f64 = rng.random_range(0.0..2.0);
        let alpha: f64 = rng.random_range(0.0..2.0);
        let beta = if rng.random_range(0..10) == 0 {
            f64::INFINITY
        } else {
            rng.random_range(0.0..2.0)
        };
        let (p, ro, a) = (il + rl, il + alpha, beta);
        if (p - ro).abs() < 1e-12 || (p - a).abs() < 1e-12 || (ro - a).abs() < 1e-12 {
            continue;
        }
        r.trials += 1;
        let argmin = RoutingDecision::from_costs(vec![
            (Action::Predict, p),
            (Action::Route(0), ro),
            (Action::Abstain, a),
        ])
        .action;
        if tree_decide(il, rl, alpha, beta) != argmin {
            r.violations += 1;
            r.counterexample
                .get_or_insert_with(|| format!("IL={il} RL={rl} alpha={alpha} beta={beta}"));
        }
    }
    r
}

/// On seeded synthetic bins with exact conditional distributions, the simulated cost of every
/// action is within `(B/2)·W₁` of its true mean cost over the bin.
pub fn simulated_cost_check(loss: &LossSpec, seed: u64) -> Result<CheckResult> {
    let mut cfg = SyntheticConfig::new(GroundTruthFn::Sinusoidal, seed);
    cfg.train = 2_000;
    cfg.calibration = 2_000;
    cfg.test = 2_000;
    cfg.k = 20;
    cfg.test_k = 1;
    let data = generate(cfg)?;
    let spec = PartitionSpec::fit(PartitionKind::TopClassQuantile, &data.calibration, 10)?;
    let model = CalibratedRouterModel::calibrate(spec, &data.calibration, true)?;
    let w1 = model.wasserstein_error(&data.test)?;
    let config = RoutingConfig::single(*loss, 0.05, 0.3)?;
    let half_b = loss.bound() / 2.0;

    let mut r = CheckResult {
        name: format!("simulated_cost_gap:{loss}"),
        trials: 0,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
        counterexample: None,
    };
    for (bin, w) in &w1 {
        let costs = simulated_costs(&model, *bin, &config, &[OracleSpec::Bayes])?;
        let members: Vec<_> = data
            .test
            .iter()
            .filter(|e| model.bin_of(e).ok() == Some(*bin))
            .collect();
        let n = members.len() as f64;
        for (action, sim) in costs {
            let mut total = 0.0;
            for e in &members {
                let pred = model.deployed_prediction(e, *bin);
                let gt = e.ground_truth();
                total += match action {
                    Action::Predict => loss.expected_loss(gt, &pred)?,
                    Action::Route(_) => loss.entropy(gt)? + config.route_penalties[0],
                    Action::Abstain => config.abstain_penalty,
                };
            }
            let excess = (sim - total / n).abs() - half_b * w;
            r.trials += 1;
            r.worst_excess = r.worst_excess.max(excess);
            if excess > SLACK {
                r.violations += 1;
                r.counterexample
                    .get_or_insert_with(|| format!("bin {bin} action {action}: excess {excess:e}"));
            }
        }
    }
    Ok(r)
}

pub fn run_lemma_checks(seed: u64, trials: usize) -> Result<LemmaReport> {
    let losses = LossSpec::all_defaults();
    let mut jobs: Vec<(usize, LossSpec, usize)> = Vec::new();
    for loss in &losses {
        for n in class_counts(loss) {
            jobs.push((jobs.len(), *loss, n));
        }
    }
    let per_loss = jobs
        .par_iter()
        .map(|(i, loss, n)| {
            let s = seed.wrapping_add(1000 * *i as u64);
            let [tl, ir] = lipschitz_checks(loss, *n, trials, s)?;
            let pr = properness_check(loss, *n, trials, s + 1)?;
            Ok(vec![tl, ir, pr])
        })
        .collect::<Result<Vec<_>>>()?;
    let gaps = losses
        .par_iter()
        .map(|l| simulated_cost_check(l, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut checks: Vec<CheckResult> = per_loss.into_iter().flatten().collect();
    checks.push(tree_check(trials, seed.wrapping_add(7)));
    checks.extend(gaps);
    Ok(LemmaReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_is_deterministic() {
        let a = run_lemma_checks(5, 300).unwrap();
        let b = run_lemma_checks(5, 300).unwrap();
        assert_eq!(a, b);
        for c in &a.checks {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn shrink_finds_boundary() {
        let p1 = LabelDistribution::binary(0.0).unwrap();
        let p2 = LabelDistribution::binary(1.0).unwrap();
        let s = shrink(&p1, &p2, |p| p.prob(1) > 0.25);
        assert!((s.prob(1) - 0.25).abs() < 1e-9);
    }
}

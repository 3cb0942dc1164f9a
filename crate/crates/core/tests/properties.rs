use hoc_router::calibrator::wasserstein_1d;
use hoc_router::partition::BinId;
use hoc_router::{
    decide, tree_decide, Action, CalibratedRouterModel, LabelDistribution, LossSpec, OracleSpec,
    PartitionKind, PartitionSpec, RoutingConfig, SnapshotExample,
};
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = LabelDistribution> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        if s <= 0.0 {
            LabelDistribution::uniform(w.len()).unwrap()
        } else {
            LabelDistribution::with_tolerance(w.iter().map(|x| x / s).collect(), 1e-9).unwrap()
        }
    })
}

fn any_loss() -> impl Strategy<Value = LossSpec> {
    prop::sample::select(LossSpec::all_defaults())
}

fn l1(a: &LabelDistribution, b: &LabelDistribution) -> f64 {
    a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()).sum()
}

// Brute-force expected loss from the per-label pointwise loss.
fn expected_by_labels(loss: &LossSpec, p_star: &LabelDistribution, p: &LabelDistribution) -> f64 {
    (0..p_star.num_classes())
        .map(|y| p_star.prob(y) * loss.pointwise_loss(y, p).unwrap())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn expected_loss_matches_label_sum(loss in any_loss(), p_star in simplex(2), p in simplex(2)) {
        let a = loss.expected_loss(&p_star, &p).unwrap();
        let b = expected_by_labels(&loss, &p_star, &p);
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn losses_stay_within_bound(loss in any_loss(), p_star in simplex(2), p in simplex(2)) {
        let v = loss.expected_loss(&p_star, &p).unwrap();
        prop_assert!(v >= -1e-12 && v <= loss.bound() + 1e-12);
    }

    #[test]
    fn reducible_is_nonnegative_and_sums(loss in any_loss(), p_star in simplex(2), p in simplex(2)) {
        let rl = loss.reducible_loss(&p_star, &p).unwrap();
        let il = loss.entropy(&p_star).unwrap();
        prop_assert!(rl >= -1e-12);
        prop_assert!((il + rl - loss.expected_loss(&p_star, &p).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn brier_three_class_lipschitz(p1 in simplex(3), p2 in simplex(3), q in simplex(3)) {
        let loss = LossSpec::Brier;
        let d = l1(&p1, &p2);
        let gap = (loss.expected_loss(&p1, &q).unwrap() - loss.expected_loss(&p2, &q).unwrap()).abs();
        prop_assert!(gap <= loss.bound() / 2.0 * d + 1e-9);
    }

    #[test]
    fn tree_agrees_with_cost_argmin(il in 0.0f64..2.0, rl in 0.0f64..2.0, alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let costs = [(Action::Predict, il + rl), (Action::Route(0), il + alpha), (Action::Abstain, beta)];
        // first strict minimum in Predict, Route, Abstain order
        let mut best = costs[0];
        for c in &costs[1..] {
            if c.1 < best.1 {
                best = *c;
            }
        }
        prop_assert_eq!(tree_decide(il, rl, alpha, beta), best.0);
    }

    #[test]
    fn infinite_beta_never_abstains(il in 0.0f64..2.0, rl in 0.0f64..2.0, alpha in 0.0f64..2.0) {
        prop_assert_ne!(tree_decide(il, rl, alpha, f64::INFINITY), Action::Abstain);
    }

    #[test]
    fn wasserstein_is_symmetric_and_shift_exact(
        a in prop::collection::vec(0.0f64..1.0, 1..40),
        shift in 0.0f64..0.5,
    ) {
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert!((wasserstein_1d(&a, &b) - shift).abs() <= 1e-12);
        let c: Vec<f64> = a.iter().rev().map(|x| x * 0.5).collect();
        prop_assert!((wasserstein_1d(&a, &c) - wasserstein_1d(&c, &a)).abs() <= 1e-12);
    }

    #[test]
    fn snapshot_mean_is_label_frequency(labels in prop::collection::vec(0usize..3, 1..60)) {
        let e = SnapshotExample::new("x", None, LabelDistribution::uniform(3).unwrap(), labels.clone()).unwrap();
        for c in 0..3 {
            let count = labels.iter().filter(|&&y| y == c).count();
            prop_assert_eq!(e.snapshot_mean.prob(c), count as f64 / labels.len() as f64);
        }
    }

    #[test]
    fn loss_specs_round_trip_through_text(loss in any_loss()) {
        let back: LossSpec = loss.to_string().parse().unwrap();
        prop_assert_eq!(back, loss);
    }
}

fn example(id: usize, p1: f64, labels: Vec<usize>) -> SnapshotExample {
    SnapshotExample::new(format!("e{id}"), None, LabelDistribution::binary(p1).unwrap(), labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bin_estimates_are_mixture_averages(
        rows in prop::collection::vec((0.0f64..1.0, prop::collection::vec(0usize..2, 1..12)), 20..80),
        loss in any_loss(),
    ) {
        let cal: Vec<SnapshotExample> = rows.into_iter().enumerate().map(|(i, (p, l))| example(i, p, l)).collect();
        let spec = PartitionSpec::fit(PartitionKind::TopClassQuantile, &cal, 3).unwrap();
        let model = CalibratedRouterModel::calibrate(spec.clone(), &cal, false).unwrap();
        for bin in model.all_bins() {
            let members: Vec<&SnapshotExample> = cal.iter().filter(|e| spec.assign(e).unwrap() == bin).collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let il: f64 = members.iter().map(|e| loss.entropy(&e.snapshot_mean).unwrap()).sum::<f64>() / n;
            let total: f64 = members.iter().map(|e| loss.expected_loss(&e.snapshot_mean, &e.weak_pred).unwrap()).sum::<f64>() / n;
            let d = model.estimate_decomposition(bin, &loss).unwrap();
            prop_assert!((d.irreducible - il).abs() <= 1e-12);
            prop_assert!((d.total() - total).abs() <= 1e-12);
        }
        prop_assert!(model.mixture(BinId::Overflow).count() == cal.len());
    }

    #[test]
    fn bin_decision_is_argmin_of_estimates(
        rows in prop::collection::vec((0.0f64..1.0, prop::collection::vec(0usize..2, 1..12)), 20..60),
        alpha in 0.0f64..1.0,
        beta in 0.0f64..1.0,
    ) {
        let cal: Vec<SnapshotExample> = rows.into_iter().enumerate().map(|(i, (p, l))| example(i, p, l)).collect();
        let spec = PartitionSpec::fit(PartitionKind::TopClassQuantile, &cal, 3).unwrap();
        let model = CalibratedRouterModel::calibrate(spec, &cal, true).unwrap();
        let config = RoutingConfig::single(LossSpec::Brier, alpha, beta).unwrap();
        for bin in model.all_bins() {
            let d = model.estimate_decomposition(bin, &LossSpec::Brier).unwrap();
            let got = decide(&model, bin, &config, &[OracleSpec::Bayes]).unwrap();
            let expected = [d.total(), d.irreducible + alpha, beta];
            prop_assert!((got.chosen_cost() - expected.iter().cloned().fold(f64::INFINITY, f64::min)).abs() <= 1e-12);
        }
    }
}

#[test]
fn aggregated_mean_oracle_matches_closed_form_for_brier() {
    // Mean of K labels has E||p_hat - e_y||^2 = (1 + 1/K) (1 - sum p^2) under Brier.
    for k in [1usize, 3, 7, 20] {
        for p1 in [0.0, 0.1, 0.35, 0.5, 0.9] {
            let p = LabelDistribution::binary(p1).unwrap();
            let oracle = OracleSpec::Aggregated { annotators: k, rule: hoc_router::router::Aggregation::Mean };
            let got = oracle.cost(&LossSpec::Brier, &p).unwrap();
            let gini = 1.0 - p1 * p1 - (1.0 - p1) * (1.0 - p1);
            let expected = (1.0 + 1.0 / k as f64) * gini;
            assert!((got - expected).abs() < 1e-12, "k={k} p1={p1}: {got} vs {expected}");
        }
    }
}

#[test]
fn majority_vote_oracle_matches_binomial_tail() {
    // Classification loss of a K-vote majority: probability the vote lands on class 1 times
    // (1 - p1) plus the complement times p1; ties go to class 0.
    fn binom(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }
    for k in [1u64, 2, 5, 8] {
        for p1 in [0.2, 0.5, 0.7] {
            let p = LabelDistribution::binary(p1).unwrap();
            let win1: f64 = (0..=k)
                .filter(|&j| 2 * j > k)
                .map(|j| binom(k, j) * p1.powi(j as i32) * (1.0 - p1).powi((k - j) as i32))
                .sum();
            let expected = win1 * (1.0 - p1) + (1.0 - win1) * p1;
            let oracle = OracleSpec::Aggregated {
                annotators: k as usize,
                rule: hoc_router::router::Aggregation::MajorityVote,
            };
            let got = oracle.cost(&LossSpec::Classification, &p).unwrap();
            assert!((got - expected).abs() < 1e-12, "k={k} p1={p1}: {got} vs {expected}");
        }
    }
}

#[test]
fn model_bytes_round_trip() {
    let cal: Vec<SnapshotExample> = (0..50)
        .map(|i| example(i, (i as f64 * 0.37).fract(), vec![i % 2, (i / 3) % 2, 1]))
        .collect();
    let spec = PartitionSpec::fit(PartitionKind::TopClassQuantile, &cal, 4).unwrap();
    let model = CalibratedRouterModel::calibrate(spec, &cal, true).unwrap();
    let bytes = model.to_bytes().unwrap();
    let back = CalibratedRouterModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

//! Synthetic binary tasks with a known conditional distribution.
//!
//! Inputs are standard normal scalars and labels are Bernoulli(p*(x)). Train, calibration and
//! test splits draw from separate ChaCha streams (0, 1 and 2) of the same seed, so changing
//! one split's size never perturbs the others.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{bucket_of, quantile_edges};
use crate::types::{LabelDistribution, SnapshotExample};

pub const TRAIN_STREAM: u64 = 0;
pub const CALIBRATION_STREAM: u64 = 1;
pub const TEST_STREAM: u64 = 2;

const WEAK_CLAMP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundTruthFn {
    Sinusoidal,
    ThreeSteps,
    Piecewise,
}

impl GroundTruthFn {
    pub const ALL: [GroundTruthFn; 3] = [
        GroundTruthFn::Sinusoidal,
        GroundTruthFn::ThreeSteps,
        GroundTruthFn::Piecewise,
    ];

    /// `P(y = 1 | x)`.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            GroundTruthFn::Sinusoidal => (0.98 * sinusoidal_u(x) + 1.0) / 2.0,
            GroundTruthFn::ThreeSteps => {
                if x <= -1.0 {
                    0.0
                } else if x < 1.0 {
                    (100.0 * x).sin() / 2.0 + 0.5
                } else {
                    1.0
                }
            }
            GroundTruthFn::Piecewise => {
                if x <= -1.0 {
                    0.5
                } else if x <= -0.5 {
                    (100.0 * x).sin() / 4.0 + 0.5
                } else if x <= 0.0 {
                    0.25
                } else if x <= 0.5 {
                    (100.0 * x).sin() / 4.0 + 0.5
                } else {
                    (100.0 * x).sin() / 4.0 + 0.25
                }
            }
        }
    }
}

/// `w(x) = 0.2·ln(1 + exp((|x| − 1)/0.2))`, evaluated without overflow.
pub fn sinusoidal_w(x: f64) -> f64 {
    let z = (x.abs() - 1.0) / 0.2;
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    0.2 * softplus
}

/// `v(x) = sgn(x)·(120|x| − 112·w(x) − 0.0635)` with `sgn(0) = 0`.
pub fn sinusoidal_v(x: f64) -> f64 {
    let sgn = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    sgn * (120.0 * x.abs() - 112.0 * sinusoidal_w(x) - 0.0635)
}

pub fn sinusoidal_u(x: f64) -> f64 {
    0.6 * sinusoidal_v(x).cos() + 0.4 * (4.2 * x).cos()
}

impl fmt::Display for GroundTruthFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroundTruthFn::Sinusoidal => "sinusoidal",
            GroundTruthFn::ThreeSteps => "three-steps",
            GroundTruthFn::Piecewise => "piecewise",
        })
    }
}

impl FromStr for GroundTruthFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "sinusoidal" => Ok(GroundTruthFn::Sinusoidal),
            "three-steps" | "threesteps" => Ok(GroundTruthFn::ThreeSteps),
            "piecewise" => Ok(GroundTruthFn::Piecewise),
            other => Err(Error::invalid(format!("unknown synthetic function `{other}`"))),
        }
    }
}

/// 1-D binned-frequency classifier: equal-mass cells over x, add-one smoothed label frequency
/// per cell, clamped to `[0.01, 0.99]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedFrequencyPredictor {
    pub edges: Vec<f64>,
    pub p1: Vec<f64>,
}

impl BinnedFrequencyPredictor {
    pub fn fit(train: &[(f64, usize)], bins: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if bins == 0 {
            return Err(Error::invalid("weak predictor needs at least one bin"));
        }
        let mut xs: Vec<f64> = train.iter().map(|(x, _)| *x).collect();
        xs.sort_by(f64::total_cmp);
        let edges = quantile_edges(&xs, bins);
        let cells = edges.len() + 1;
        let mut ones = vec![0usize; cells];
        let mut totals = vec![0usize; cells];
        for (x, y) in train {
            let b = bucket_of(&edges, *x);
            totals[b] += 1;
            ones[b] += *y;
        }
        let p1 = ones
            .iter()
            .zip(&totals)
            .map(|(&o, &t)| ((o as f64 + 1.0) / (t as f64 + 2.0)).clamp(WEAK_CLAMP.0, WEAK_CLAMP.1))
            .collect();
        Ok(BinnedFrequencyPredictor { edges, p1 })
    }

    pub fn predict_p1(&self, x: f64) -> f64 {
        self.p1[bucket_of(&self.edges, x)]
    }

    pub fn predict(&self, x: f64) -> LabelDistribution {
        LabelDistribution::binary(self.predict_p1(x)).expect("clamped probability")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub function: GroundTruthFn,
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
    /// Labels per calibration point.
    pub k: usize,
    /// Labels per test point.
    pub test_k: usize,
    pub weak_bins: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(function: GroundTruthFn, seed: u64) -> Self {
        SyntheticConfig {
            function,
            train: 10_000,
            calibration: 5_000,
            test: 100_000,
            k: 100,
            test_k: 100,
            weak_bins: 50,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: Vec<(f64, usize)>,
    pub weak: BinnedFrequencyPredictor,
    pub calibration: Vec<SnapshotExample>,
    pub test: Vec<SnapshotExample>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> usize {
    usize::from(rng.random::<f64>() < p)
}

fn snapshot_split(
    function: GroundTruthFn,
    weak: &BinnedFrequencyPredictor,
    n: usize,
    k: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SnapshotExample>> {
    (0..n)
        .map(|i| {
            let x: f64 = rng.sample(StandardNormal);
            let p = function.eval(x);
            let labels = (0..k).map(|_| bernoulli(rng, p)).collect();
            SnapshotExample::new(format!("{prefix}-{i}"), Some(vec![x]), weak.predict(x), labels)?
                .with_truth(LabelDistribution::binary(p)?)
        })
        .collect()
}

pub fn generate(config: SyntheticConfig) -> Result<SyntheticDataset> {
    if config.train == 0 || config.calibration == 0 || config.test == 0 {
        return Err(Error::invalid("every split needs at least one example"));
    }
    if config.k == 0 || config.test_k == 0 {
        return Err(Error::invalid("snapshot size must be at least 1"));
    }
    let f = config.function;

    let mut rng = stream(config.seed, TRAIN_STREAM);
    let train: Vec<(f64, usize)> = (0..config.train)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            (x, bernoulli(&mut rng, f.eval(x)))
        })
        .collect();
    let weak = BinnedFrequencyPredictor::fit(&train, config.weak_bins)?;

    let mut rng = stream(config.seed, CALIBRATION_STREAM);
    let calibration = snapshot_split(f, &weak, config.calibration, config.k, "cal", &mut rng)?;
    let mut rng = stream(config.seed, TEST_STREAM);
    let test = snapshot_split(f, &weak, config.test, config.test_k, "test", &mut rng)?;

    Ok(SyntheticDataset {
        config,
        train,
        weak,
        calibration,
        test,
    })
}

impl SyntheticDataset {
    /// Training pairs as single-label snapshot examples, with the fitted weak prediction.
    pub fn train_examples(&self) -> Result<Vec<SnapshotExample>> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                SnapshotExample::new(format!("train-{i}"), Some(vec![x]), self.weak.predict(x), vec![y])?
                    .with_truth(LabelDistribution::binary(self.config.function.eval(x))?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_examples() {
        assert_eq!(GroundTruthFn::ThreeSteps.eval(-2.0), 0.0);
        assert_eq!(GroundTruthFn::Piecewise.eval(-0.25), 0.25);
        assert!((GroundTruthFn::Sinusoidal.eval(0.0) - 0.99).abs() < 1e-15);
        assert_eq!(GroundTruthFn::ThreeSteps.eval(1.0), 1.0);
        assert_eq!(GroundTruthFn::Piecewise.eval(-1.0), 0.5);
    }

    #[test]
    fn softplus_does_not_overflow() {
        assert!((sinusoidal_w(1e6) - 0.2 * (1e6 - 1.0) / 0.2).abs() < 1e-3);
        assert!(sinusoidal_w(0.0) > 0.0);
        assert!(GroundTruthFn::Sinusoidal.eval(1e300).is_finite());
    }

    #[test]
    fn weak_predictor_base_rate() {
        let train: Vec<_> = (0..10).map(|i| (i as f64, usize::from(i < 3))).collect();
        let w = BinnedFrequencyPredictor::fit(&train, 1).unwrap();
        assert_eq!(w.predict_p1(100.0), 4.0 / 12.0);
        let all_one: Vec<_> = (0..1000).map(|i| (i as f64, 1)).collect();
        let w = BinnedFrequencyPredictor::fit(&all_one, 4).unwrap();
        assert!((0..1000).all(|i| w.predict_p1(i as f64) >= 0.99));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = SyntheticConfig::new(GroundTruthFn::Piecewise, 9);
        cfg.train = 200;
        cfg.calibration = 50;
        cfg.test = 70;
        cfg.k = 5;
        cfg.test_k = 2;
        let a = generate(cfg).unwrap();
        let b = generate(cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.calibration, b.calibration);
        assert_eq!(a.test, b.test);
        assert!(a.test.iter().all(|e| e.truth.is_some() && e.labels.len() == 2));
    }

    #[test]
    fn splits_use_independent_streams() {
        let mut cfg = SyntheticConfig::new(GroundTruthFn::Sinusoidal, 3);
        cfg.train = 100;
        cfg.calibration = 20;
        cfg.test = 30;
        cfg.k = 3;
        let a = generate(cfg).unwrap();
        cfg.test = 60;
        let b = generate(cfg).unwrap();
        assert_eq!(a.calibration, b.calibration);
        assert_eq!(a.test[..], b.test[..30]);
    }

    #[test]
    fn names_round_trip() {
        for f in GroundTruthFn::ALL {
            assert_eq!(f.to_string().parse::<GroundTruthFn>().unwrap(), f);
        }
    }
}

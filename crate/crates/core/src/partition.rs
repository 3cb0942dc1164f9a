//! Input partitions ("bins") on which routing decisions are held constant.
//!
//! Three kinds are supported: top-class quantile bins over the weak model's confidence,
//! quantile bins over one auxiliary feature, and exact level sets of the weak prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::types::SnapshotExample;

/// Decimal places used to identify distinct prediction vectors for level-set binning.
pub const LEVEL_SET_DECIMALS: i32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    TopClassQuantile,
    Feature1DQuantile { feature: usize },
    LevelSet,
}

/// Identifier of a partition cell. `Overflow` collects level sets unseen at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinId {
    Cell { group: usize, bucket: usize },
    Overflow,
}

impl BinId {
    pub fn cell(group: usize, bucket: usize) -> Self {
        BinId::Cell { group, bucket }
    }
}

impl fmt::Display for BinId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinId::Cell { group, bucket } => write!(f, "{group}:{bucket}"),
            BinId::Overflow => f.write_str("overflow"),
        }
    }
}

impl FromStr for BinId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "overflow" {
            return Ok(BinId::Overflow);
        }
        let bad = || Error::invalid(format!("bad bin id `{s}`"));
        let (g, b) = s.split_once(':').ok_or_else(bad)?;
        Ok(BinId::Cell {
            group: g.parse().map_err(|_| bad())?,
            bucket: b.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for BinId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BinId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A fitted partition. Immutable after [`PartitionSpec::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub buckets: usize,
    pub num_classes: usize,
    /// Sorted interior boundaries; one list per class for top-class binning, a single list for
    /// feature binning, empty for level sets.
    pub edges: Vec<Vec<f64>>,
    /// Rounded prediction vectors, sorted; bucket `i` of a level-set partition is `level_sets[i]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub level_sets: Vec<Vec<i64>>,
}

/// Parsed form of the CLI partition syntax: `topclass:B`, `feature:B[:index]`, `levelset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionRequest {
    pub kind: PartitionKind,
    pub buckets: usize,
}

impl FromStr for PartitionRequest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::invalid(format!("partition `{s}` is missing a count")))?
                .parse()
                .map_err(|_| Error::invalid(format!("bad count in partition `{s}`")))
        };
        let req = match parts[0] {
            "topclass" if parts.len() == 2 => PartitionRequest {
                kind: PartitionKind::TopClassQuantile,
                buckets: num(1)?,
            },
            "feature" if parts.len() == 2 || parts.len() == 3 => PartitionRequest {
                kind: PartitionKind::Feature1DQuantile {
                    feature: if parts.len() == 3 { num(2)? } else { 0 },
                },
                buckets: num(1)?,
            },
            "levelset" if parts.len() == 1 => PartitionRequest {
                kind: PartitionKind::LevelSet,
                buckets: 1,
            },
            _ => return Err(Error::invalid(format!("unrecognized partition `{s}`"))),
        };
        if req.buckets == 0 {
            return Err(Error::invalid("partition needs at least one bucket"));
        }
        Ok(req)
    }
}

impl fmt::Display for PartitionRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PartitionKind::TopClassQuantile => write!(f, "topclass:{}", self.buckets),
            PartitionKind::Feature1DQuantile { feature } => {
                write!(f, "feature:{}:{feature}", self.buckets)
            }
            PartitionKind::LevelSet => f.write_str("levelset"),
        }
    }
}

/// Equal-mass boundaries over already sorted values: boundary `j` sits midway between the
/// values at ranks `⌊j·n/B⌋ - 1` and `⌊j·n/B⌋`. Duplicate boundaries collapse.
pub(crate) fn quantile_edges(sorted: &[f64], buckets: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(buckets.saturating_sub(1));
    for j in 1..buckets {
        let i = j * n / buckets;
        if i == 0 || i >= n {
            continue;
        }
        let e = 0.5 * (sorted[i - 1] + sorted[i]);
        if edges.last().is_none_or(|last| e > *last) {
            edges.push(e);
        }
    }
    edges
}

/// Half-open `[lo, hi)` bucket lookup; the last bucket is closed above.
pub(crate) fn bucket_of(edges: &[f64], value: f64) -> usize {
    edges.partition_point(|e| *e <= value)
}

fn level_set_key(probs: &[f64]) -> Vec<i64> {
    let scale = 10f64.powi(LEVEL_SET_DECIMALS);
    probs.iter().map(|p| (p * scale).round() as i64).collect()
}

fn feature_value(example: &SnapshotExample, feature: usize) -> Result<f64> {
    let v = example
        .features
        .as_ref()
        .and_then(|f| f.get(feature))
        .copied()
        .ok_or_else(|| {
            Error::invalid(format!(
                "example `{}` has no feature {feature} for feature binning",
                example.id
            ))
        })?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("example `{}` has a non-finite feature", example.id)));
    }
    Ok(v)
}

impl PartitionSpec {
    pub fn fit(kind: PartitionKind, calibration: &[SnapshotExample], buckets: usize) -> Result<Self> {
        let first = calibration
            .first()
            .ok_or_else(|| Error::invalid("cannot fit a partition on an empty calibration set"))?;
        if buckets == 0 {
            return Err(Error::invalid("partition needs at least one bucket"));
        }
        let num_classes = first.num_classes();
        if calibration.iter().any(|e| e.num_classes() != num_classes) {
            return Err(Error::invalid("calibration examples disagree on the class count"));
        }
        let mut spec = PartitionSpec {
            kind,
            buckets,
            num_classes,
            edges: Vec::new(),
            level_sets: Vec::new(),
        };
        match kind {
            PartitionKind::TopClassQuantile => {
                let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
                for e in calibration {
                    per_class[e.weak_pred.argmax()].push(e.weak_pred.max_prob());
                }
                spec.edges = per_class
                    .into_iter()
                    .map(|mut v| {
                        v.sort_by(f64::total_cmp);
                        quantile_edges(&v, buckets)
                    })
                    .collect();
            }
            PartitionKind::Feature1DQuantile { feature } => {
                let mut v = calibration
                    .iter()
                    .map(|e| feature_value(e, feature))
                    .collect::<Result<Vec<_>>>()?;
                v.sort_by(f64::total_cmp);
                spec.edges = vec![quantile_edges(&v, buckets)];
            }
            PartitionKind::LevelSet => {
                let keys: BTreeSet<Vec<i64>> = calibration
                    .iter()
                    .map(|e| level_set_key(e.weak_pred.probs()))
                    .collect();
                spec.level_sets = keys.into_iter().collect();
                spec.buckets = spec.level_sets.len();
            }
        }
        Ok(spec)
    }

    pub fn assign(&self, example: &SnapshotExample) -> Result<BinId> {
        if example.num_classes() != self.num_classes {
            return Err(Error::invalid(format!(
                "example `{}` has {} classes, partition expects {}",
                example.id,
                example.num_classes(),
                self.num_classes
            )));
        }
        Ok(match self.kind {
            PartitionKind::TopClassQuantile => {
                let class = example.weak_pred.argmax();
                BinId::cell(class, bucket_of(&self.edges[class], example.weak_pred.max_prob()))
            }
            PartitionKind::Feature1DQuantile { feature } => {
                BinId::cell(0, bucket_of(&self.edges[0], feature_value(example, feature)?))
            }
            PartitionKind::LevelSet => {
                let key = level_set_key(example.weak_pred.probs());
                match self.level_sets.binary_search(&key) {
                    Ok(i) => BinId::cell(0, i),
                    Err(_) => BinId::Overflow,
                }
            }
        })
    }

    /// Every cell of the partition (the overflow bin is not listed).
    pub fn bins(&self) -> Vec<BinId> {
        match self.kind {
            PartitionKind::TopClassQuantile => (0..self.num_classes)
                .flat_map(|c| (0..=self.edges[c].len()).map(move |b| BinId::cell(c, b)))
                .collect(),
            PartitionKind::Feature1DQuantile { .. } => {
                (0..=self.edges[0].len()).map(|b| BinId::cell(0, b)).collect()
            }
            PartitionKind::LevelSet => (0..self.level_sets.len()).map(|b| BinId::cell(0, b)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinQuality {
    pub count: usize,
    /// `½·E|RL − mean RL|` within the bin.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionQuality {
    pub per_bin: BTreeMap<BinId, BinQuality>,
    pub empty_bins: Vec<BinId>,
    /// Mass-weighted average of the per-bin bounds.
    pub aggregate: f64,
}

/// Excess-cost bound of the best constant predict/route decision per bin (no abstention),
/// using each example's snapshot mean as the conditional-distribution proxy.
pub fn partition_quality(
    spec: &PartitionSpec,
    data: &[SnapshotExample],
    loss: &LossSpec,
) -> Result<PartitionQuality> {
    let mut rl_by_bin: BTreeMap<BinId, Vec<f64>> = BTreeMap::new();
    for e in data {
        let rl = loss.reducible_loss(&e.snapshot_mean, &e.weak_pred)?;
        rl_by_bin.entry(spec.assign(e)?).or_default().push(rl);
    }
    let total: usize = rl_by_bin.values().map(Vec::len).sum();
    let mut per_bin = BTreeMap::new();
    let mut aggregate = 0.0;
    for (bin, rls) in &rl_by_bin {
        let n = rls.len() as f64;
        let mean = rls.iter().sum::<f64>() / n;
        let mad = rls.iter().map(|r| (r - mean).abs()).sum::<f64>() / n;
        let bound = 0.5 * mad;
        aggregate += bound * n / total as f64;
        per_bin.insert(*bin, BinQuality { count: rls.len(), bound });
    }
    let empty_bins = spec
        .bins()
        .into_iter()
        .filter(|b| !rl_by_bin.contains_key(b))
        .collect();
    Ok(PartitionQuality {
        per_bin,
        empty_bins,
        aggregate,
    })
}

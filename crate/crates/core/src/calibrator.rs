//! Bin-and-Estimate calibration.
//!
//! For every partition cell the calibrator keeps the raw list of `(prediction, snapshot mean)`
//! pairs observed on the k-snapshot calibration set. No loss is evaluated at calibration time:
//! irreducible and reducible loss estimates are computed from the stored pairs on demand, for
//! whichever loss the caller supplies.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::partition::{BinId, PartitionSpec};
use crate::types::{LabelDistribution, SnapshotExample};

pub const MODEL_MAGIC: &str = "hoc-router-model";
pub const MODEL_VERSION: u32 = 1;

/// One tagged mixture component: the deployed prediction and the snapshot mean of a
/// calibration point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub prediction: LabelDistribution,
    pub snapshot_mean: LabelDistribution,
}

/// Empirical distribution of `(prediction, snapshot mean)` pairs within one bin.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaggedMixture {
    entries: Vec<MixtureEntry>,
}

/// Estimated irreducible and reducible loss of a bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub irreducible: f64,
    pub reducible: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.irreducible + self.reducible
    }
}

impl TaggedMixture {
    pub fn push(&mut self, entry: MixtureEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[MixtureEntry] {
        &self.entries
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean snapshot mean of the bin.
    pub fn centroid(&self) -> Result<LabelDistribution> {
        LabelDistribution::mean(self.entries.iter().map(|e| &e.snapshot_mean))
    }

    fn replace_predictions(&mut self, prediction: &LabelDistribution) {
        for e in &mut self.entries {
            e.prediction = prediction.clone();
        }
    }

    /// Mean of `f(entry)` over the entries.
    pub fn average<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(&MixtureEntry) -> Result<f64>,
    {
        if self.entries.is_empty() {
            return Err(Error::invalid("average over an empty mixture"));
        }
        let mut sum = 0.0;
        for e in &self.entries {
            sum += f(e)?;
        }
        Ok(sum / self.entries.len() as f64)
    }

    /// Mixture-average total loss `mean L(ȳ, f)`.
    pub fn total_loss(&self, loss: &LossSpec) -> Result<f64> {
        self.average(|e| loss.expected_loss(&e.snapshot_mean, &e.prediction))
    }

    /// `IL = mean L(ȳ, ȳ)` and `RL = mean L(ȳ, f) − IL`.
    pub fn decompose(&self, loss: &LossSpec) -> Result<Decomposition> {
        let irreducible = self.average(|e| loss.entropy(&e.snapshot_mean))?;
        let total = self.total_loss(loss)?;
        Ok(Decomposition {
            irreducible,
            reducible: total - irreducible,
        })
    }
}

/// Higher-order predictor realized as bin-conditional tagged mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedRouterModel {
    pub partition: PartitionSpec,
    pub num_classes: usize,
    pub recalibrated: bool,
    pub mixtures: BTreeMap<BinId, TaggedMixture>,
    /// All calibration points; serves empty and overflow bins.
    pub global_mixture: TaggedMixture,
    /// Bin centroids, present iff `recalibrated`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub centroids: BTreeMap<BinId, LabelDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_centroid: Option<LabelDistribution>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    magic: String,
    version: u32,
    model: CalibratedRouterModel,
}

impl CalibratedRouterModel {
    /// Builds per-bin mixtures; with `recalibrate`, every stored prediction in a bin is
    /// replaced by the bin centroid, which also becomes the deployed prediction for the bin.
    pub fn calibrate(
        partition: PartitionSpec,
        calibration: &[SnapshotExample],
        recalibrate: bool,
    ) -> Result<Self> {
        if calibration.is_empty() {
            return Err(Error::invalid("calibration set is empty"));
        }
        let num_classes = partition.num_classes;
        let mut mixtures: BTreeMap<BinId, TaggedMixture> = BTreeMap::new();
        let mut global_mixture = TaggedMixture::default();
        for e in calibration {
            if e.num_classes() != num_classes {
                return Err(Error::invalid(format!(
                    "calibration example `{}` has {} classes, expected {num_classes}",
                    e.id,
                    e.num_classes()
                )));
            }
            let entry = MixtureEntry {
                prediction: e.weak_pred.clone(),
                snapshot_mean: e.snapshot_mean.clone(),
            };
            mixtures.entry(partition.assign(e)?).or_default().push(entry.clone());
            global_mixture.push(entry);
        }

        let mut centroids = BTreeMap::new();
        let mut global_centroid = None;
        if recalibrate {
            for (bin, mixture) in mixtures.iter_mut() {
                let c = mixture.centroid()?;
                mixture.replace_predictions(&c);
                centroids.insert(*bin, c);
            }
            let c = global_mixture.centroid()?;
            global_mixture.replace_predictions(&c);
            global_centroid = Some(c);
        }

        Ok(CalibratedRouterModel {
            partition,
            num_classes,
            recalibrated: recalibrate,
            mixtures,
            global_mixture,
            centroids,
            global_centroid,
        })
    }

    pub fn bin_of(&self, example: &SnapshotExample) -> Result<BinId> {
        self.partition.assign(example)
    }

    /// Whether `bin` has its own calibration data (otherwise the global mixture is used).
    pub fn has_data(&self, bin: BinId) -> bool {
        self.mixtures.get(&bin).is_some_and(|m| !m.is_empty())
    }

    /// The mixture used for `bin`, falling back to the global mixture.
    pub fn mixture(&self, bin: BinId) -> &TaggedMixture {
        match self.mixtures.get(&bin) {
            Some(m) if !m.is_empty() => m,
            _ => &self.global_mixture,
        }
    }

    /// Every bin the router may see: all partition cells plus the overflow bin.
    pub fn all_bins(&self) -> Vec<BinId> {
        let mut bins = self.partition.bins();
        bins.push(BinId::Overflow);
        bins
    }

    /// The prediction actually served for `example`: its bin centroid when recalibrated,
    /// the raw weak prediction otherwise.
    pub fn deployed_prediction<'a>(
        &'a self,
        example: &'a SnapshotExample,
        bin: BinId,
    ) -> Cow<'a, LabelDistribution> {
        if !self.recalibrated {
            return Cow::Borrowed(&example.weak_pred);
        }
        match self.centroids.get(&bin) {
            Some(c) => Cow::Borrowed(c),
            None => Cow::Borrowed(
                self.global_centroid
                    .as_ref()
                    .expect("recalibrated model stores a global centroid"),
            ),
        }
    }

    pub fn estimate_decomposition(&self, bin: BinId, loss: &LossSpec) -> Result<Decomposition> {
        loss.supports(self.num_classes)?;
        self.mixture(bin).decompose(loss)
    }

    /// Per-bin 1-Wasserstein distance (ℓ1 on the simplex) between the stored snapshot-mean
    /// mixture and the ground-truth distributions of `reference` examples falling in the bin.
    /// Binary problems only. Reference ground truth is the exact distribution when attached
    /// and the snapshot mean otherwise.
    pub fn wasserstein_error(&self, reference: &[SnapshotExample]) -> Result<BTreeMap<BinId, f64>> {
        if self.num_classes != 2 {
            return Err(Error::UnsupportedDiagnostic(format!(
                "wasserstein error is implemented for 2 classes, model has {}",
                self.num_classes
            )));
        }
        let mut by_bin: BTreeMap<BinId, Vec<f64>> = BTreeMap::new();
        for e in reference {
            by_bin
                .entry(self.bin_of(e)?)
                .or_default()
                .push(e.ground_truth().prob(1));
        }
        let mut out = BTreeMap::new();
        for (bin, reference_p1) in by_bin {
            let calibrated_p1: Vec<f64> = self
                .mixture(bin)
                .entries()
                .iter()
                .map(|e| e.snapshot_mean.prob(1))
                .collect();
            // distance on the p1 coordinate is half the ℓ1 distance on the 2-simplex
            out.insert(bin, 2.0 * wasserstein_1d(&calibrated_p1, &reference_p1));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let file = ModelFile {
            magic: MODEL_MAGIC.to_string(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let mut bytes = serde_json::to_vec(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            magic: Option<String>,
            version: Option<u32>,
        }
        let header: Header = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("not a model file: {e}")))?;
        if header.magic.as_deref() != Some(MODEL_MAGIC) {
            return Err(Error::Format(format!(
                "not a model file (magic {:?})",
                header.magic.unwrap_or_default()
            )));
        }
        if header.version != Some(MODEL_VERSION) {
            return Err(Error::Format(format!(
                "unsupported model version {:?} (expected {MODEL_VERSION})",
                header.version
            )));
        }
        let file: ModelFile = serde_json::from_slice(bytes)?;
        Ok(file.model)
    }
}

/// Exact 1-Wasserstein distance between two uniform empirical distributions on the line,
/// computed as the area between their CDFs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut area = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(u), Some(v)) => u.min(*v),
            (Some(u), None) => *u,
            (None, Some(v)) => *v,
            (None, None) => unreachable!(),
        };
        area += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::PartitionKind;

    fn d(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    fn ex(id: &str, weak: f64, labels: Vec<usize>) -> SnapshotExample {
        SnapshotExample::new(id, Some(vec![weak]), LabelDistribution::binary(weak).unwrap(), labels)
            .unwrap()
    }

    fn one_bin(cal: &[SnapshotExample]) -> PartitionSpec {
        PartitionSpec::fit(PartitionKind::Feature1DQuantile { feature: 0 }, cal, 1).unwrap()
    }

    #[test]
    fn recalibration_uses_centroid() {
        let cal = vec![ex("a", 0.9, vec![0]), ex("b", 0.8, vec![1])];
        let model = CalibratedRouterModel::calibrate(one_bin(&cal), &cal, true).unwrap();
        let bin = BinId::cell(0, 0);
        assert_eq!(model.centroids[&bin], d(&[0.5, 0.5]));
        assert!(model.mixtures[&bin].entries().iter().all(|e| e.prediction == d(&[0.5, 0.5])));
        assert_eq!(model.deployed_prediction(&cal[0], bin).as_ref(), &d(&[0.5, 0.5]));
    }

    #[test]
    fn single_example_centroid_is_its_mean() {
        let cal = vec![ex("a", 0.9, vec![0, 0, 1, 0])];
        let model = CalibratedRouterModel::calibrate(one_bin(&cal), &cal, true).unwrap();
        assert_eq!(model.centroids[&BinId::cell(0, 0)], d(&[0.75, 0.25]));
    }

    #[test]
    fn no_recalibration_passes_predictions_through() {
        let cal = vec![ex("a", 0.9, vec![0]), ex("b", 0.2, vec![1])];
        let model = CalibratedRouterModel::calibrate(one_bin(&cal), &cal, false).unwrap();
        let stored: Vec<_> = model.mixtures[&BinId::cell(0, 0)]
            .entries()
            .iter()
            .map(|e| e.prediction.clone())
            .collect();
        assert_eq!(stored, vec![cal[0].weak_pred.clone(), cal[1].weak_pred.clone()]);
        assert!(model.centroids.is_empty());
    }

    #[test]
    fn decomposition_examples() {
        let mut m = TaggedMixture::default();
        m.push(MixtureEntry {
            prediction: d(&[0.5, 0.5]),
            snapshot_mean: d(&[1.0, 0.0]),
        });
        m.push(MixtureEntry {
            prediction: d(&[0.5, 0.5]),
            snapshot_mean: d(&[0.0, 1.0]),
        });
        let dec = m.decompose(&LossSpec::Brier).unwrap();
        assert_eq!(dec.irreducible, 0.0);
        assert!((dec.reducible - 0.5).abs() < 1e-15);

        let mut m = TaggedMixture::default();
        for p in [0.3, 0.6] {
            m.push(MixtureEntry {
                prediction: LabelDistribution::binary(p).unwrap(),
                snapshot_mean: LabelDistribution::binary(p).unwrap(),
            });
        }
        assert!(m.decompose(&LossSpec::Brier).unwrap().reducible.abs() < 1e-15);

        let mut m = TaggedMixture::default();
        m.push(MixtureEntry {
            prediction: d(&[1.0, 0.0]),
            snapshot_mean: d(&[1.0, 0.0]),
        });
        let dec = m.decompose(&LossSpec::Brier).unwrap();
        assert_eq!((dec.irreducible, dec.reducible), (0.0, 0.0));
    }

    #[test]
    fn empty_bins_fall_back_to_global() {
        let cal = vec![ex("a", 0.9, vec![0]), ex("b", 0.8, vec![1])];
        let spec = PartitionSpec::fit(PartitionKind::LevelSet, &cal, 1).unwrap();
        let model = CalibratedRouterModel::calibrate(spec, &cal, true).unwrap();
        let unseen = ex("c", 0.5, vec![0]);
        let bin = model.bin_of(&unseen).unwrap();
        assert_eq!(bin, BinId::Overflow);
        assert!(!model.has_data(bin));
        assert_eq!(model.mixture(bin).count(), 2);
        assert_eq!(model.deployed_prediction(&unseen, bin).as_ref(), &d(&[0.5, 0.5]));
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.1, 0.4], &[0.4, 0.1]), 0.0);
        assert!((2.0 * wasserstein_1d(&[0.8], &[0.5]) - 0.6).abs() < 1e-12);
        assert!((2.0 * wasserstein_1d(&[0.0, 1.0], &[0.5, 0.5]) - 1.0).abs() < 1e-12);
        // unequal sizes: {0} vs {0, 1} differ by half the mass moved a distance of 1
        assert!((wasserstein_1d(&[0.0], &[0.0, 1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_error_is_binary_only() {
        let cal = vec![SnapshotExample::new("a", Some(vec![0.0]), d(&[0.2, 0.3, 0.5]), vec![2]).unwrap()];
        let spec = one_bin(&cal);
        let model = CalibratedRouterModel::calibrate(spec, &cal, false).unwrap();
        assert!(matches!(
            model.wasserstein_error(&cal),
            Err(Error::UnsupportedDiagnostic(_))
        ));
    }

    #[test]
    fn wasserstein_error_against_itself_is_zero() {
        let cal = vec![ex("a", 0.9, vec![0, 1]), ex("b", 0.8, vec![1, 1])];
        let model = CalibratedRouterModel::calibrate(one_bin(&cal), &cal, false).unwrap();
        let w = model.wasserstein_error(&cal).unwrap();
        assert_eq!(w[&BinId::cell(0, 0)], 0.0);
    }

    #[test]
    fn model_bytes_round_trip_exactly() {
        let cal: Vec<_> = (0..50)
            .map(|i| ex(&i.to_string(), (i as f64 * 0.137).fract(), vec![i % 2, (i / 3) % 2]))
            .collect();
        let spec = PartitionSpec::fit(PartitionKind::TopClassQuantile, &cal, 4).unwrap();
        let model = CalibratedRouterModel::calibrate(spec, &cal, true).unwrap();
        let bytes = model.to_bytes().unwrap();
        let back = CalibratedRouterModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn model_rejects_foreign_files() {
        let bad = br#"{"magic":"something-else","version":1,"model":null}"#;
        assert!(CalibratedRouterModel::from_bytes(bad).is_err());
    }
}

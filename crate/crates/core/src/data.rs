//! Samples, datasets, the synthetic biased-data generator, stratified
//! splitting and seeded batching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{derive_seed, Mat, Rng};

/// Number of action-unit intensities per sample.
pub const AU_DIM: usize = 12;

/// Action units in the order of the `au_0..au_11` columns.
pub const AU_NAMES: [&str; AU_DIM] =
    ["AU01", "AU02", "AU04", "AU06", "AU07", "AU10", "AU12", "AU14", "AU15", "AU17", "AU23", "AU24"];

pub const DEFAULT_CLASS_NAMES: [&str; 7] = ["happy", "sad", "angry", "fear", "surprise", "disgust", "neutral"];

const AU_ACTIVE: f64 = 0.8;
const AU_REST: f64 = 0.1;

/// Illustrative FACS-inspired prototypes: each class has 2-3 active units.
/// Indices refer to [`AU_NAMES`].
const DEFAULT_ACTIVE_AUS: [&[usize]; 7] = [
    &[3, 6],     // happy: AU06, AU12
    &[0, 2, 8],  // sad: AU01, AU04, AU15
    &[2, 4, 10], // angry: AU04, AU07, AU23
    &[0, 1, 2],  // fear: AU01, AU02, AU04
    &[0, 1],     // surprise: AU01, AU02
    &[5, 8, 9],  // disgust: AU10, AU15, AU17
    &[9, 11],    // neutral: AU17, AU24
];

/// Default prototype table for the first `n_classes` classes (at most 7).
pub fn default_au_prototypes(n_classes: usize) -> Result<Vec<[f64; AU_DIM]>> {
    if n_classes > DEFAULT_ACTIVE_AUS.len() {
        return Err(Error::ConfigInvalid(format!(
            "default AU prototypes cover 7 classes, {n_classes} requested; supply au_prototypes"
        )));
    }
    Ok(DEFAULT_ACTIVE_AUS[..n_classes]
        .iter()
        .map(|active| {
            let mut row = [AU_REST; AU_DIM];
            for &k in active.iter() {
                row[k] = AU_ACTIVE;
            }
            row
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A protected attribute and the names of its groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub groups: Vec<String>,
}

/// One observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub au: [f64; AU_DIM],
    pub label: usize,
    /// Group index per attribute, in schema order. `None` means unknown.
    pub groups: Vec<Option<usize>>,
}

/// Immutable, validated collection of samples with class and attribute schemas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    attributes: Vec<Attribute>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        class_names: Vec<String>,
        attributes: Vec<Attribute>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidDataset("no classes".into()));
        }
        if splits.len() != samples.len() {
            return Err(Error::InvalidDataset(format!("{} split tags for {} samples", splits.len(), samples.len())));
        }
        let feature_dim = samples.first().map_or(0, |s| s.features.len());
        let mut ids = BTreeSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id {}", s.id)));
            }
            if s.features.len() != feature_dim {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has {} features, expected {feature_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset(format!("sample {} has non-finite features", s.id)));
            }
            if s.au.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidDataset(format!("sample {} has AU outside [0,1]", s.id)));
            }
            if s.label >= class_names.len() {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has label {} but only {} classes",
                    s.id,
                    s.label,
                    class_names.len()
                )));
            }
            if s.groups.len() != attributes.len() {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has {} group entries for {} attributes",
                    s.id,
                    s.groups.len(),
                    attributes.len()
                )));
            }
            for (g, attr) in s.groups.iter().zip(&attributes) {
                if let Some(g) = *g {
                    if g >= attr.groups.len() {
                        return Err(Error::InvalidDataset(format!(
                            "sample {} has {} group {g} outside schema",
                            s.id, attr.name
                        )));
                    }
                }
            }
        }
        Ok(Self { samples, class_names, attributes, splits })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Sample indices in dataset order belonging to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn with_splits(&self, splits: Vec<Split>) -> Result<Self> {
        Self::new(self.samples.clone(), self.class_names.clone(), self.attributes.clone(), splits)
    }

    pub fn features(&self, idx: &[usize]) -> Mat {
        let d = self.feature_dim();
        Mat::from_fn(idx.len(), d, |r, c| self.samples[idx[r]].features[c])
    }

    pub fn au(&self, idx: &[usize]) -> Mat {
        Mat::from_fn(idx.len(), AU_DIM, |r, c| self.samples[idx[r]].au[c])
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Group assignments of attribute `attr` for the given samples.
    pub fn groups(&self, attr: usize, idx: &[usize]) -> Vec<Option<usize>> {
        idx.iter().map(|&i| self.samples[i].groups[attr]).collect()
    }

    /// `counts[c][g]` = number of samples with label `c` and group `g` of `attr`.
    pub fn group_class_counts(&self, attr: usize, idx: &[usize]) -> Vec<Vec<usize>> {
        let k = self.attributes[attr].groups.len();
        let mut counts = vec![vec![0usize; k]; self.n_classes()];
        for &i in idx {
            let s = &self.samples[i];
            if let Some(g) = s.groups[attr] {
                counts[s.label][g] += 1;
            }
        }
        counts
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Magnitude of the group signal injected into the features.
    pub bias_strength: f64,
    /// Probability that a sample carries its class's majority group.
    pub group_skew: f64,
    pub au_noise: f64,
    pub feature_noise: f64,
    /// One row of 12 intensities per class. Empty means the built-in table.
    pub au_prototypes: Vec<[f64; AU_DIM]>,
    /// Empty means uniform.
    pub class_priors: Vec<f64>,
    /// Majority group per class. Empty means `class % 2`.
    pub majority_group: Vec<usize>,
    /// Empty means the default emotion names (or `class_<i>`).
    pub class_names: Vec<String>,
    pub attribute_name: String,
    pub group_names: [String; 2],
    /// Train/val/test proportions used for the stratified split.
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_classes: 7,
            feature_dim: 16,
            bias_strength: 1.0,
            group_skew: 0.9,
            au_noise: 0.1,
            feature_noise: 1.0,
            au_prototypes: Vec::new(),
            class_priors: Vec::new(),
            majority_group: Vec::new(),
            class_names: Vec::new(),
            attribute_name: "gender".into(),
            group_names: ["male".into(), "female".into()],
            split_ratios: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

/// A [`GenConfig`] with every defaulted table filled in.
#[derive(Debug, Clone)]
struct ResolvedGen {
    prototypes: Vec<[f64; AU_DIM]>,
    priors: Vec<f64>,
    majority: Vec<usize>,
    class_names: Vec<String>,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    fn resolve(&self) -> Result<ResolvedGen> {
        let invalid = |m: String| Err(Error::ConfigInvalid(m));
        let c = self.n_classes;
        if c == 0 {
            return invalid("n_classes must be at least 1".into());
        }
        if self.n_samples == 0 {
            return invalid("n_samples must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return invalid("feature_dim must be at least 1".into());
        }
        if !(0.5..=1.0).contains(&self.group_skew) {
            return invalid(format!("group_skew {} outside [0.5, 1]", self.group_skew));
        }
        for (name, v) in
            [("bias_strength", self.bias_strength), ("au_noise", self.au_noise), ("feature_noise", self.feature_noise)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let prototypes =
            if self.au_prototypes.is_empty() { default_au_prototypes(c)? } else { self.au_prototypes.clone() };
        if prototypes.len() != c {
            return invalid(format!("{} AU prototypes for {c} classes", prototypes.len()));
        }
        if prototypes.iter().flatten().any(|&x| !(0.0..=1.0).contains(&x)) {
            return invalid("AU prototypes must lie in [0, 1]".into());
        }
        let priors = if self.class_priors.is_empty() { vec![1.0; c] } else { self.class_priors.clone() };
        if priors.len() != c || priors.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return invalid("class_priors must have one non-negative entry per class".into());
        }
        if !(priors.iter().sum::<f64>() > 0.0) {
            return invalid("class_priors sum to zero".into());
        }
        let majority =
            if self.majority_group.is_empty() { (0..c).map(|y| y % 2).collect() } else { self.majority_group.clone() };
        if majority.len() != c || majority.iter().any(|&g| g > 1) {
            return invalid("majority_group must hold one entry in {0, 1} per class".into());
        }
        let class_names = if !self.class_names.is_empty() {
            self.class_names.clone()
        } else if c <= DEFAULT_CLASS_NAMES.len() {
            DEFAULT_CLASS_NAMES[..c].iter().map(|s| s.to_string()).collect()
        } else {
            (0..c).map(|i| format!("class_{i}")).collect()
        };
        if class_names.len() != c {
            return invalid(format!("{} class names for {c} classes", class_names.len()));
        }
        validate_ratios(self.split_ratios)?;
        Ok(ResolvedGen { prototypes, priors, majority, class_names })
    }
}

fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::ConfigInvalid(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    Ok(())
}

/// Draws a dataset whose features mix a class signal with a group signal,
/// where the group is correlated with the class through `group_skew`.
///
/// `features = W_y[:, y] + bias_strength * W_a[:, a] + feature_noise * ε`,
/// with `W_y`, `W_a` standard-normal projections fixed by the seed, and
/// `au = clip(prototype[y] + au_noise * ε, 0, 1)`.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    let r = cfg.resolve()?;
    let (c, d) = (cfg.n_classes, cfg.feature_dim);

    let mut proj_rng = Rng::new(derive_seed(cfg.seed, &[1]));
    let class_proj = Mat::from_fn(d, c, |_, _| proj_rng.normal());
    let group_proj = Mat::from_fn(d, 2, |_, _| proj_rng.normal());

    let mut rng = Rng::new(derive_seed(cfg.seed, &[2]));
    let width = digits(cfg.n_samples);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let y = rng.categorical(&r.priors);
        let a = if rng.uniform() < cfg.group_skew { r.majority[y] } else { 1 - r.majority[y] };
        let mut au = [0.0; AU_DIM];
        for (k, v) in au.iter_mut().enumerate() {
            *v = (r.prototypes[y][k] + cfg.au_noise * rng.normal()).clamp(0.0, 1.0);
        }
        let features = (0..d)
            .map(|j| class_proj.get(j, y) + cfg.bias_strength * group_proj.get(j, a) + cfg.feature_noise * rng.normal())
            .collect();
        samples.push(Sample { id: format!("s{i:0width$}"), features, au, label: y, groups: vec![Some(a)] });
    }
    let attributes = vec![Attribute { name: cfg.attribute_name.clone(), groups: cfg.group_names.to_vec() }];
    let n = samples.len();
    let ds = Dataset::new(samples, r.class_names, attributes, vec![Split::Train; n])?;
    split_stratified(&ds, cfg.split_ratios, derive_seed(cfg.seed, &[3]))
}

fn digits(n: usize) -> usize {
    let mut d = 1;
    let mut m = n.saturating_sub(1);
    while m >= 10 {
        m /= 10;
        d += 1;
    }
    d
}

/// Per-class split sizes by largest remainder, each split getting at least one sample.
fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|x| libm::floor(x) as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..3).max_by_key(|&k| (counts[k], core::cmp::Reverse(k))).unwrap_or(0);
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    counts
}

/// Reassigns every sample to train/val/test so that each class is split in
/// the given proportions.
pub fn split_stratified(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
    validate_ratios(ratios)?;
    let mut rng = Rng::new(seed);
    let mut splits = vec![Split::Train; ds.len()];
    for class in 0..ds.n_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < Split::ALL.len() {
            return Err(Error::TooFewSamples { class, count: members.len(), needed: Split::ALL.len() });
        }
        rng.shuffle(&mut members);
        let counts = split_counts(members.len(), ratios);
        let mut it = members.into_iter();
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(count) {
                splits[i] = *split;
            }
        }
    }
    ds.with_splits(splits)
}

/// Seeded shuffled mini-batches of a split. The permutation is a function of
/// `(seed, epoch)` only.
pub fn batches(ds: &Dataset, split: Split, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx = ds.indices(split);
    let mut rng = Rng::new(derive_seed(seed, &[0xBA7C, epoch as u64]));
    rng.shuffle(&mut idx);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

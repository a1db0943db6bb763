//! Classification metrics and equality-of-opportunity fairness scores.
//!
//! The fairness score of a protected attribute is the worst-case ratio of
//! per-group accuracy to the accuracy of the best group `a_d`:
//!
//! ```text
//! F = min_{a ≠ a_d} acc(a) / acc(a_d)
//! ```
//!
//! which equals `min acc / max acc` over all retained groups. Samples whose
//! group is unknown are left out of every group statistic.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Attribute;
use crate::error::{Error, Result};

/// Predictions, true labels and group memberships of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    /// Per attribute name, the group of every sample (`None` = excluded).
    pub groups: BTreeMap<String, Vec<Option<usize>>>,
}

impl EvalInput {
    pub fn new(preds: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "EvalInput preds/labels",
                expected: labels.len(),
                found: preds.len(),
            });
        }
        Ok(Self { preds, labels, groups: BTreeMap::new() })
    }

    pub fn with_groups(mut self, attr: &str, groups: Vec<Option<usize>>) -> Result<Self> {
        if groups.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                context: "EvalInput groups",
                expected: self.labels.len(),
                found: groups.len(),
            });
        }
        self.groups.insert(attr.to_string(), groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn attr_groups(&self, attr: &str) -> Result<&[Option<usize>]> {
        self.groups
            .get(attr)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::SchemaMismatch(format!("no group assignments for attribute {attr:?}")))
    }

    fn correct(&self, i: usize) -> bool {
        self.preds[i] == self.labels[i]
    }
}

pub fn accuracy(inp: &EvalInput) -> Result<f64> {
    if inp.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct = (0..inp.len()).filter(|&i| inp.correct(i)).count();
    Ok(correct as f64 / inp.len() as f64)
}

/// Support-weighted mean of per-class F1. Classes with an undefined
/// precision or recall contribute an F1 of zero.
pub fn weighted_f1(inp: &EvalInput, n_classes: usize) -> Result<f64> {
    if inp.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &y) in inp.preds.iter().zip(&inp.labels) {
        for (what, idx) in [("prediction", p), ("label", y)] {
            if idx >= n_classes {
                return Err(Error::IndexOutOfRange { what, index: idx, bound: n_classes });
            }
        }
        predicted[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let n = inp.len() as f64;
    let mut total = 0.0;
    for c in 0..n_classes {
        if support[c] == 0 || predicted[c] == 0 || tp[c] == 0 {
            continue;
        }
        let precision = tp[c] as f64 / predicted[c] as f64;
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = 2.0 * precision * recall / (precision + recall);
        total += support[c] as f64 / n * f1;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub name: String,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy of the groups that have samples, plus the names of schema
/// groups that have none.
pub fn retained_group_accuracy(inp: &EvalInput, attr: &Attribute) -> Result<(Vec<GroupAccuracy>, Vec<String>)> {
    let groups = inp.attr_groups(&attr.name)?;
    let k = attr.groups.len();
    let mut correct = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (i, g) in groups.iter().enumerate() {
        if let Some(g) = *g {
            if g >= k {
                return Err(Error::IndexOutOfRange { what: "group", index: g, bound: k });
            }
            count[g] += 1;
            if inp.correct(i) {
                correct[g] += 1;
            }
        }
    }
    let mut kept = Vec::new();
    let mut empty = Vec::new();
    for g in 0..k {
        if count[g] == 0 {
            empty.push(attr.groups[g].clone());
        } else {
            kept.push(GroupAccuracy {
                group: g,
                name: attr.groups[g].clone(),
                accuracy: correct[g] as f64 / count[g] as f64,
                count: count[g],
            });
        }
    }
    Ok((kept, empty))
}

/// Per-group accuracy. Every group of the attribute must have samples.
pub fn group_accuracy(inp: &EvalInput, attr: &Attribute) -> Result<Vec<GroupAccuracy>> {
    let (kept, empty) = retained_group_accuracy(inp, attr)?;
    if let Some(name) = empty.into_iter().next() {
        return Err(Error::EmptyGroup(name));
    }
    Ok(kept)
}

/// Worst-case min-max ratio over `(group, accuracy)` pairs.
///
/// Returns the score and the most accurate group (lowest index on ties).
pub fn fairness_from_accuracies(accs: &[(usize, f64)]) -> Result<(f64, usize)> {
    if accs.len() < 2 {
        return Err(Error::DegenerateGroups(accs.len()));
    }
    let mut best = accs[0];
    for &(g, acc) in &accs[1..] {
        if acc > best.1 || (acc == best.1 && g < best.0) {
            best = (g, acc);
        }
    }
    if !(best.1 > 0.0) {
        return Err(Error::ZeroMaxAccuracy);
    }
    let worst = accs.iter().filter(|(g, _)| *g != best.0).map(|(_, acc)| acc / best.1).fold(f64::INFINITY, f64::min);
    Ok((worst, best.0))
}

/// Fairness score of an attribute over its retained groups, with `a_d`.
pub fn fairness_score(inp: &EvalInput, attr: &Attribute) -> Result<(f64, usize)> {
    let (kept, _) = retained_group_accuracy(inp, attr)?;
    let accs: Vec<(usize, f64)> = kept.iter().map(|g| (g.group, g.accuracy)).collect();
    fairness_from_accuracies(&accs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFairness {
    pub class: usize,
    /// min/max ratio of per-group recall; `None` when undefined.
    pub ratio: Option<f64>,
    /// Recall per schema group; `None` for groups without samples of this class.
    pub recalls: Vec<Option<f64>>,
    /// Why `ratio` is undefined.
    pub undefined_reason: Option<String>,
}

/// Per-class min-max ratio of group recalls.
///
/// For each class `c` the samples with true label `c` are split by group
/// (over the groups retained for the attribute as a whole). Classes that
/// some retained group never exhibits are reported as undefined.
pub fn per_class_fairness(inp: &EvalInput, attr: &Attribute, n_classes: usize) -> Result<Vec<ClassFairness>> {
    let groups = inp.attr_groups(&attr.name)?;
    let (kept, _) = retained_group_accuracy(inp, attr)?;
    let retained: BTreeSet<usize> = kept.iter().map(|g| g.group).collect();
    let k = attr.groups.len();
    let mut hits = vec![vec![0usize; k]; n_classes];
    let mut totals = vec![vec![0usize; k]; n_classes];
    for (i, g) in groups.iter().enumerate() {
        let (Some(g), y) = (*g, inp.labels[i]) else { continue };
        if y >= n_classes {
            return Err(Error::IndexOutOfRange { what: "label", index: y, bound: n_classes });
        }
        totals[y][g] += 1;
        if inp.correct(i) {
            hits[y][g] += 1;
        }
    }
    let mut out = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let recalls: Vec<Option<f64>> =
            (0..k).map(|g| (totals[c][g] > 0).then(|| hits[c][g] as f64 / totals[c][g] as f64)).collect();
        let missing = retained.iter().find(|&&g| recalls[g].is_none());
        let (ratio, reason) = if let Some(&g) = missing {
            (None, Some(Error::EmptyGroup(attr.groups[g].clone()).to_string()))
        } else {
            let accs: Vec<(usize, f64)> = retained.iter().filter_map(|&g| recalls[g].map(|r| (g, r))).collect();
            match fairness_from_accuracies(&accs) {
                Ok((f, _)) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        out.push(ClassFairness { class: c, ratio, recalls, undefined_reason: reason });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub name: String,
    pub groups: Vec<GroupAccuracy>,
    /// Schema groups without any evaluated sample.
    pub excluded_groups: Vec<String>,
    pub fairness: Option<f64>,
    /// Name of the most accurate group.
    pub best_group: Option<String>,
    pub fairness_note: Option<String>,
    pub per_class: Vec<ClassFairness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub n: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub class_names: Vec<String>,
    pub attributes: Vec<AttributeReport>,
}

/// Full report over every attribute in `attributes` present in `inp`.
pub fn build_report(inp: &EvalInput, class_names: &[String], attributes: &[Attribute]) -> Result<FairnessReport> {
    let n_classes = class_names.len();
    let mut attrs = Vec::new();
    for attr in attributes {
        if !inp.groups.contains_key(&attr.name) {
            continue;
        }
        let (groups, excluded) = retained_group_accuracy(inp, attr)?;
        let accs: Vec<(usize, f64)> = groups.iter().map(|g| (g.group, g.accuracy)).collect();
        let (fairness, best_group, note) = match fairness_from_accuracies(&accs) {
            Ok((f, g)) => (Some(f), Some(attr.groups[g].clone()), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        attrs.push(AttributeReport {
            name: attr.name.clone(),
            groups,
            excluded_groups: excluded,
            fairness,
            best_group,
            fairness_note: note,
            per_class: per_class_fairness(inp, attr, n_classes)?,
        });
    }
    Ok(FairnessReport {
        n: inp.len(),
        accuracy: accuracy(inp)?,
        weighted_f1: weighted_f1(inp, n_classes)?,
        class_names: class_names.to_vec(),
        attributes: attrs,
    })
}

impl FairnessReport {
    /// Flat metric table. Keys: `accuracy`, `weighted_f1`,
    /// `fairness/<attr>`, `group_accuracy/<attr>/<group>`,
    /// `class_fairness/<attr>/<class>`. Undefined values are `None`.
    pub fn metrics(&self) -> BTreeMap<String, Option<f64>> {
        let mut m = BTreeMap::new();
        m.insert("accuracy".into(), Some(self.accuracy));
        m.insert("weighted_f1".into(), Some(self.weighted_f1));
        for a in &self.attributes {
            m.insert(format!("fairness/{}", a.name), a.fairness);
            for g in &a.groups {
                m.insert(format!("group_accuracy/{}/{}", a.name, g.name), Some(g.accuracy));
            }
            for c in &a.per_class {
                let class = self.class_names.get(c.class).cloned().unwrap_or_else(|| c.class.to_string());
                m.insert(format!("class_fairness/{}/{}", a.name, class), c.ratio);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator, 0 for one run).
    pub std: f64,
    /// Number of runs where the metric was defined.
    pub n: usize,
    pub min: f64,
    pub max: f64,
}

impl MetricStat {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Rounding can put the mean a hair outside the observed range.
        Some(Self { mean: mean.clamp(min, max), std, n, min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub runs: usize,
    /// Metrics defined in at least one run.
    pub metrics: BTreeMap<String, MetricStat>,
    /// Metrics undefined in every run.
    pub undefined: Vec<String>,
}

impl SeedAggregate {
    pub fn mean(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).map(|m| m.mean)
    }
}

/// Mean and sample std of every metric across runs. Fairness scores are
/// averaged per run (mean of ratios).
pub fn aggregate(runs: &[FairnessReport]) -> Result<SeedAggregate> {
    let first = runs.first().ok_or(Error::EmptyInput)?;
    let keys: Vec<String> = first.metrics().into_keys().collect();
    let mut values: BTreeMap<String, Vec<f64>> = keys.iter().map(|k| (k.clone(), Vec::new())).collect();
    for (r, run) in runs.iter().enumerate() {
        if run.class_names != first.class_names {
            return Err(Error::SchemaMismatch(format!("run {r} has different class names")));
        }
        let m = run.metrics();
        if m.len() != keys.len() || !keys.iter().all(|k| m.contains_key(k)) {
            return Err(Error::SchemaMismatch(format!("run {r} reports a different metric set")));
        }
        for (k, v) in m {
            if let (Some(v), Some(slot)) = (v, values.get_mut(&k)) {
                slot.push(v);
            }
        }
    }
    let mut metrics = BTreeMap::new();
    let mut undefined = Vec::new();
    for (k, v) in values {
        match MetricStat::from_values(&v) {
            Some(s) => {
                metrics.insert(k, s);
            }
            None => undefined.push(k),
        }
    }
    Ok(SeedAggregate { runs: runs.len(), metrics, undefined })
}

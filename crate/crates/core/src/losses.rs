//! Training objectives with exact gradients.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, log_sum_exp, softmax, Mat};

/// Value of an objective and its gradients. A `None` gradient means the
/// term does not depend on that input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossOut {
    pub value: f64,
    pub d_logits: Option<Mat>,
    pub d_h: Option<Mat>,
    pub d_a: Option<Mat>,
    pub d_domain: Option<Mat>,
}

fn add_grad(a: Option<Mat>, b: Option<Mat>) -> Result<Option<Mat>> {
    Ok(match (a, b) {
        (Some(mut x), Some(y)) => {
            x.add_assign(&y)?;
            Some(x)
        }
        (x, None) => x,
        (None, y) => y,
    })
}

impl LossOut {
    /// Sum of two terms; gradients add.
    pub fn plus(self, other: LossOut) -> Result<LossOut> {
        Ok(LossOut {
            value: self.value + other.value,
            d_logits: add_grad(self.d_logits, other.d_logits)?,
            d_h: add_grad(self.d_h, other.d_h)?,
            d_a: add_grad(self.d_a, other.d_a)?,
            d_domain: add_grad(self.d_domain, other.d_domain)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && [&self.d_logits, &self.d_h, &self.d_a, &self.d_domain]
                .iter()
                .all(|g| g.as_ref().is_none_or(Mat::is_finite))
    }
}

/// The methods compared by the experiment harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    CeBaseline,
    PosMatch,
    SpectralDecoupling,
    SdPlusPosMatch,
    DomainAware,
    DomainUnaware,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::CeBaseline,
        MethodKind::PosMatch,
        MethodKind::SpectralDecoupling,
        MethodKind::SdPlusPosMatch,
        MethodKind::DomainAware,
        MethodKind::DomainUnaware,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::CeBaseline => "ce_baseline",
            MethodKind::PosMatch => "pos_match",
            MethodKind::SpectralDecoupling => "spectral_decoupling",
            MethodKind::SdPlusPosMatch => "sd_plus_pos_match",
            MethodKind::DomainAware => "domain_aware",
            MethodKind::DomainUnaware => "domain_unaware",
        }
    }

    /// Human-readable row label for report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            MethodKind::CeBaseline => "Cross Entropy Baseline",
            MethodKind::PosMatch => "Positive Matching",
            MethodKind::SpectralDecoupling => "Spectral Decoupling",
            MethodKind::SdPlusPosMatch => "Spectral Decoupling + Positive Matching",
            MethodKind::DomainAware => "Domain-aware",
            MethodKind::DomainUnaware => "Domain-unaware",
        }
    }

    /// Stable numeric id, used when deriving per-method seeds.
    pub fn id(self) -> u64 {
        match self {
            MethodKind::CeBaseline => 1,
            MethodKind::PosMatch => 2,
            MethodKind::SpectralDecoupling => 3,
            MethodKind::SdPlusPosMatch => 4,
            MethodKind::DomainAware => 5,
            MethodKind::DomainUnaware => 6,
        }
    }

    pub fn uses_pos_match(self) -> bool {
        matches!(self, MethodKind::PosMatch | MethodKind::SdPlusPosMatch)
    }

    pub fn uses_sd(self) -> bool {
        matches!(self, MethodKind::SpectralDecoupling | MethodKind::SdPlusPosMatch)
    }

    /// Whether training consumes protected-attribute labels.
    pub fn needs_group_labels(self) -> bool {
        matches!(self, MethodKind::DomainAware | MethodKind::DomainUnaware)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::ConfigInvalid(alloc::format!("unknown method {s:?}")))
    }
}

fn check_rows(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { context, expected, found });
    }
    Ok(())
}

/// Positive matching contrastive loss on unit-norm rows.
///
/// `L = -(1/N) Σ_i Σ_{p ∈ P_i} (A_i·A_p)(h_i·h_p)` where `P_i` holds the
/// other batch samples with the same label. Gradients flow through both
/// factors.
pub fn pos_match_loss(h: &Mat, a: &Mat, labels: &[usize]) -> Result<LossOut> {
    let n = h.rows();
    check_rows("pos_match_loss A rows", n, a.rows())?;
    check_rows("pos_match_loss labels", n, labels.len())?;
    let mut d_h = Mat::zeros(n, h.cols());
    let mut d_a = Mat::zeros(n, a.cols());
    if n == 0 {
        return Ok(LossOut { value: 0.0, d_h: Some(d_h), d_a: Some(d_a), ..LossOut::default() });
    }
    // Each unordered positive pair appears twice in the double sum.
    let mut pair_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] != labels[j] {
                continue;
            }
            let au_sim = dot(a.row(i), a.row(j));
            let h_sim = dot(h.row(i), h.row(j));
            pair_sum += au_sim * h_sim;
            for k in 0..h.cols() {
                let (hi, hj) = (h.get(i, k), h.get(j, k));
                d_h.row_mut(i)[k] += au_sim * hj;
                d_h.row_mut(j)[k] += au_sim * hi;
            }
            for k in 0..a.cols() {
                let (ai, aj) = (a.get(i, k), a.get(j, k));
                d_a.row_mut(i)[k] += h_sim * aj;
                d_a.row_mut(j)[k] += h_sim * ai;
            }
        }
    }
    let nf = n as f64;
    let scale = -2.0 / nf;
    Ok(LossOut {
        value: -2.0 * pair_sum / nf,
        d_h: Some(d_h.scaled(scale)),
        d_a: Some(d_a.scaled(scale)),
        ..LossOut::default()
    })
}

/// Mean softmax cross entropy.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> Result<LossOut> {
    let n = logits.rows();
    check_rows("cross_entropy labels", n, labels.len())?;
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Mat::zeros(n, logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::IndexOutOfRange { what: "label", index: y, bound: logits.cols() });
        }
        let z = logits.row(i);
        value += log_sum_exp(z) - z[y];
        let row = grad.row_mut(i);
        row.copy_from_slice(&softmax(z));
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g /= nf);
    }
    Ok(LossOut { value: value / nf, d_logits: Some(grad), ..LossOut::default() })
}

/// Unweighted sum of the positive matching loss and cross entropy.
pub fn combined_loss(h: &Mat, a: &Mat, logits: &Mat, labels: &[usize]) -> Result<LossOut> {
    pos_match_loss(h, a, labels)?.plus(cross_entropy(logits, labels)?)
}

/// How the spectral decoupling coefficient is brought in over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdSchedule {
    /// `lambda * min(1, step / anneal_steps)`.
    #[default]
    Ramp,
    /// `0` before `anneal_steps`, `lambda` from then on.
    Switch,
}

impl SdSchedule {
    pub fn coefficient(self, lambda: f64, step: usize, anneal_steps: usize) -> f64 {
        if anneal_steps == 0 {
            return lambda;
        }
        match self {
            SdSchedule::Ramp => lambda * (step as f64 / anneal_steps as f64).min(1.0),
            SdSchedule::Switch => {
                if step >= anneal_steps {
                    lambda
                } else {
                    0.0
                }
            }
        }
    }
}

/// Spectral decoupling penalty with the default linear ramp.
pub fn sd_penalty(logits: &Mat, lambda: f64, step: usize, anneal_steps: usize) -> LossOut {
    sd_penalty_with(logits, SdSchedule::Ramp.coefficient(lambda, step, anneal_steps))
}

/// `(c/2)·(1/N)·Σ z²` for an already-annealed coefficient `c`.
pub fn sd_penalty_with(logits: &Mat, coefficient: f64) -> LossOut {
    let n = logits.rows().max(1) as f64;
    let sq: f64 = logits.as_slice().iter().map(|z| z * z).sum();
    LossOut { value: 0.5 * coefficient * sq / n, d_logits: Some(logits.scaled(coefficient / n)), ..LossOut::default() }
}

/// Gradient reversal: `-lambda * g`.
pub fn grad_reverse(g: &Mat, lambda: f64) -> Mat {
    g.scaled(-lambda)
}

/// Joint (class, group) label for domain-aware classification.
pub fn domain_aware_encode(class: usize, group: usize, n_groups: usize) -> Result<usize> {
    if group >= n_groups {
        return Err(Error::IndexOutOfRange { what: "group", index: group, bound: n_groups });
    }
    Ok(class * n_groups + group)
}

/// Inverse of [`domain_aware_encode`] for a head with `n_classes * n_groups` outputs.
pub fn domain_aware_decode(index: usize, n_classes: usize, n_groups: usize) -> Result<(usize, usize)> {
    let bound = n_classes * n_groups;
    if n_groups == 0 || index >= bound {
        return Err(Error::IndexOutOfRange { what: "joint label", index, bound });
    }
    Ok((index / n_groups, index % n_groups))
}

/// Mixed-radix index over several attributes (first attribute most
/// significant). `None` if any group is unknown.
pub fn joint_group_index(groups: &[Option<usize>], sizes: &[usize]) -> Option<usize> {
    let mut idx = 0;
    for (g, &k) in groups.iter().zip(sizes) {
        let g = (*g)?;
        if g >= k {
            return None;
        }
        idx = idx * k + g;
    }
    Some(idx)
}

/// Number of joint groups over the given attribute sizes.
pub fn joint_group_count(sizes: &[usize]) -> usize {
    sizes.iter().product()
}

/// Labels for a domain-aware head.
pub fn domain_aware_labels(classes: &[usize], joint_groups: &[usize], n_groups: usize) -> Result<Vec<usize>> {
    classes.iter().zip(joint_groups).map(|(&y, &g)| domain_aware_encode(y, g, n_groups)).collect()
}

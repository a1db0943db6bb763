//! Feed-forward feature extractor with classification, embedding (h),
//! action-unit projection (A) and optional domain heads.
//!
//! ```text
//! x ──► [Linear+ReLU]* ──► feat ──► Linear ───────────────► logits
//!                            ├────► Linear+ReLU ─► normalize ► h
//!                            └────► Linear (domain) ───────► domain logits
//! au ─► Linear+ReLU ─► normalize ─────────────────────────► A
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::AU_DIM;
use crate::error::{Error, Result};
use crate::losses::grad_reverse;
use crate::numkit::{derive_seed, normalize_rows, normalize_rows_backward, Mat, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub feat_dim: usize,
    /// Width of the classification head.
    pub n_classes: usize,
    pub h_dim: usize,
    pub au_proj_dim: usize,
    /// Width of the domain head; `None` builds no domain head.
    pub domain_classes: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            extractor_hidden: vec![64, 64],
            feat_dim: 64,
            n_classes: 7,
            h_dim: 128,
            au_proj_dim: 32,
            domain_classes: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.input_dim, self.feat_dim, self.n_classes, self.h_dim, self.au_proj_dim];
        if widths.iter().chain(&self.extractor_hidden).any(|&w| w == 0) || self.domain_classes == Some(0) {
            return Err(Error::ConfigInvalid("all layer widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Extractor layer widths from input to feature output.
    fn extractor_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.extractor_hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.extractor_hidden);
        w.push(self.feat_dim);
        w
    }
}

/// Affine map `y = x Wᵀ + b` with `W` stored as out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    fn he_init(fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let std = libm::sqrt(2.0 / fan_in as f64);
        Self { weight: Mat::from_fn(fan_out, fan_in, |_, _| std * rng.normal()), bias: vec![0.0; fan_out] }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Mat::zeros(self.weight.rows(), self.weight.cols()), bias: vec![0.0; self.bias.len()] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut y = x.matmul_nt(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    /// Accumulates parameter gradients for upstream `dy` given input `x` and
    /// returns the gradient with respect to `x` when requested.
    fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear, want_input: bool) -> Result<Option<Mat>> {
        grad.weight.add_assign(&dy.matmul_tn(x)?)?;
        for (g, s) in grad.bias.iter_mut().zip(dy.column_sums()) {
            *g += s;
        }
        if want_input {
            Ok(Some(dy.matmul(&self.weight)?))
        } else {
            Ok(None)
        }
    }
}

/// Trainable parameters. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
    pub h_head: Linear,
    pub au_head: Linear,
    pub domain_head: Option<Linear>,
}

/// Gradients share the parameter layout.
pub type ParamGrads = ModelParams;

const TAG_CLASSIFIER: u64 = 1;
const TAG_H_HEAD: u64 = 2;
const TAG_AU_HEAD: u64 = 3;
const TAG_DOMAIN_HEAD: u64 = 4;
const TAG_EXTRACTOR: u64 = 100;

/// Initializes every layer from its own seed stream, so adding or removing
/// a head leaves the other layers unchanged.
pub fn init(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let seed = |tag: u64| derive_seed(cfg.init_seed, &[tag]);
    let widths = cfg.extractor_widths();
    let extractor = widths
        .windows(2)
        .enumerate()
        .map(|(k, w)| Linear::he_init(w[0], w[1], seed(TAG_EXTRACTOR + k as u64)))
        .collect();
    Ok(ModelParams {
        config: cfg.clone(),
        extractor,
        classifier: Linear::he_init(cfg.feat_dim, cfg.n_classes, seed(TAG_CLASSIFIER)),
        h_head: Linear::he_init(cfg.feat_dim, cfg.h_dim, seed(TAG_H_HEAD)),
        au_head: Linear::he_init(AU_DIM, cfg.au_proj_dim, seed(TAG_AU_HEAD)),
        domain_head: cfg.domain_classes.map(|k| Linear::he_init(cfg.feat_dim, k, seed(TAG_DOMAIN_HEAD))),
    })
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            extractor: self.extractor.iter().map(Linear::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
            h_head: self.h_head.zeros_like(),
            au_head: self.au_head.zeros_like(),
            domain_head: self.domain_head.as_ref().map(Linear::zeros_like),
        }
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> =
            self.extractor.iter().enumerate().map(|(k, l)| (format!("extractor.{k}"), l)).collect();
        out.push(("classifier".into(), &self.classifier));
        out.push(("h_head".into(), &self.h_head));
        out.push(("au_head".into(), &self.au_head));
        if let Some(d) = &self.domain_head {
            out.push(("domain_head".into(), d));
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.extractor.iter_mut().collect();
        out.push(&mut self.classifier);
        out.push(&mut self.h_head);
        out.push(&mut self.au_head);
        if let Some(d) = &mut self.domain_head {
            out.push(d);
        }
        out
    }

    /// Every parameter tensor as `(name, shape, values)` in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((format!("{name}.weight"), l.weight.shape(), l.weight.as_slice()));
            out.push((format!("{name}.bias"), (1, l.bias.len()), l.bias.as_slice()));
        }
        out
    }

    /// Mutable views in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers_mut() {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }

    /// Rebuilds parameters from a config and flat tensors in
    /// [`ModelParams::named_tensors`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: &[Vec<f64>]) -> Result<Self> {
        let mut params = init(config)?;
        let mut slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::DimensionMismatch {
                context: "tensor count",
                expected: slots.len(),
                found: tensors.len(),
            });
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    context: "tensor length",
                    expected: slot.len(),
                    found: t.len(),
                });
            }
            slot.copy_from_slice(t);
        }
        Ok(params)
    }
}

/// A projected embedding before and after row normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// ReLU output.
    pub raw: Mat,
    /// Unit-norm rows of `raw`.
    pub unit: Mat,
    pub norms: Vec<f64>,
}

impl Embedding {
    fn from_raw(raw: Mat) -> Result<Self> {
        let (unit, norms) = normalize_rows(&raw)?;
        Ok(Self { raw, unit, norms })
    }
}

/// Values cached by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub input: Mat,
    pub au_input: Option<Mat>,
    /// Post-ReLU output of every extractor layer; the last one is the feature.
    pub extractor: Vec<Mat>,
    pub logits: Mat,
    pub probs: Mat,
    pub h: Option<Embedding>,
    pub a: Option<Embedding>,
    pub domain_logits: Option<Mat>,
}

impl Activations {
    pub fn features(&self) -> &Mat {
        self.extractor.last().unwrap_or(&self.input)
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

fn relu(m: Mat) -> Mat {
    m.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Zeroes `grad` wherever the ReLU output was inactive.
fn relu_mask(mut grad: Mat, post: &Mat) -> Mat {
    for (g, &y) in grad.as_mut_slice().iter_mut().zip(post.as_slice()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut probs = logits.clone();
    for i in 0..logits.rows() {
        let p = crate::numkit::softmax(logits.row(i));
        probs.row_mut(i).copy_from_slice(&p);
    }
    probs
}

/// Full forward pass: logits, normalized h and A, and domain logits if the
/// model has a domain head.
pub fn forward(p: &ModelParams, x: &Mat, au: &Mat) -> Result<Activations> {
    forward_with(p, x, Some(au))
}

/// Forward pass. Without `au` the embedding heads are skipped, which is all
/// that cross-entropy-only objectives and prediction need.
pub fn forward_with(p: &ModelParams, x: &Mat, au: Option<&Mat>) -> Result<Activations> {
    let cfg = &p.config;
    if x.cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch { context: "forward features", expected: cfg.input_dim, found: x.cols() });
    }
    let mut extractor = Vec::with_capacity(p.extractor.len());
    let mut cur = x;
    for layer in &p.extractor {
        extractor.push(relu(layer.forward(cur)?));
        cur = extractor.last().unwrap_or(x);
    }
    let feat = cur;
    let logits = p.classifier.forward(feat)?;
    let probs = softmax_rows(&logits);
    let domain_logits = match &p.domain_head {
        Some(d) => Some(d.forward(feat)?),
        None => None,
    };
    let (h, a) = match au {
        Some(au) => {
            if au.shape() != (x.rows(), AU_DIM) {
                return Err(Error::DimensionMismatch {
                    context: "forward AU rows",
                    expected: x.rows(),
                    found: au.rows(),
                });
            }
            let h = Embedding::from_raw(relu(p.h_head.forward(feat)?))?;
            let a = Embedding::from_raw(relu(p.au_head.forward(au)?))?;
            (Some(h), Some(a))
        }
        None => (None, None),
    };
    Ok(Activations { input: x.clone(), au_input: au.cloned(), extractor, logits, probs, h, a, domain_logits })
}

/// Upstream gradients entering the network. `d_h` and `d_a` are taken with
/// respect to the normalized embeddings.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub d_logits: Option<Mat>,
    pub d_h: Option<Mat>,
    pub d_a: Option<Mat>,
    pub d_domain: Option<Mat>,
    /// Reversal strength applied where the domain head meets the extractor.
    pub rev_lambda: f64,
}

/// Backpropagates logit, h and A gradients.
pub fn backward(p: &ModelParams, acts: &Activations, d_logits: &Mat, d_h: &Mat, d_a: &Mat) -> Result<ParamGrads> {
    backward_with(
        p,
        acts,
        &Upstream {
            d_logits: Some(d_logits.clone()),
            d_h: Some(d_h.clone()),
            d_a: Some(d_a.clone()),
            ..Upstream::default()
        },
    )
}

fn expect_shape(context: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::DimensionMismatch { context, expected: rows, found: m.rows() });
    }
    if m.cols() != cols {
        return Err(Error::DimensionMismatch { context, expected: cols, found: m.cols() });
    }
    Ok(())
}

/// Exact gradients of every parameter for the given upstream gradients.
///
/// Logit and h gradients reach the extractor; A gradients stop at the AU
/// head; domain gradients train the domain head and reach the extractor
/// scaled by `-rev_lambda`.
pub fn backward_with(p: &ModelParams, acts: &Activations, up: &Upstream) -> Result<ParamGrads> {
    let n = acts.batch_size();
    let feat = acts.features();
    let mut grads = p.zeros_like();
    let mut d_feat: Option<Mat> = None;
    let accumulate = |d: Mat, acc: &mut Option<Mat>| -> Result<()> {
        match acc {
            Some(a) => a.add_assign(&d),
            None => {
                *acc = Some(d);
                Ok(())
            }
        }
    };

    if let Some(dl) = &up.d_logits {
        expect_shape("d_logits", dl, n, p.classifier.out_dim())?;
        if let Some(d) = p.classifier.backward(feat, dl, &mut grads.classifier, true)? {
            accumulate(d, &mut d_feat)?;
        }
    }
    if let Some(dh) = &up.d_h {
        let h = acts.h.as_ref().ok_or(Error::ConfigInvalid("h gradient without h activations".into()))?;
        expect_shape("d_h", dh, n, p.h_head.out_dim())?;
        let d_pre = relu_mask(normalize_rows_backward(&h.unit, &h.norms, dh), &h.raw);
        if let Some(d) = p.h_head.backward(feat, &d_pre, &mut grads.h_head, true)? {
            accumulate(d, &mut d_feat)?;
        }
    }
    if let Some(da) = &up.d_a {
        let a = acts.a.as_ref().ok_or(Error::ConfigInvalid("A gradient without A activations".into()))?;
        let au = acts.au_input.as_ref().ok_or(Error::ConfigInvalid("missing AU input".into()))?;
        expect_shape("d_a", da, n, p.au_head.out_dim())?;
        let d_pre = relu_mask(normalize_rows_backward(&a.unit, &a.norms, da), &a.raw);
        p.au_head.backward(au, &d_pre, &mut grads.au_head, false)?;
    }
    if let Some(dd) = &up.d_domain {
        let (head, grad) = match (&p.domain_head, &mut grads.domain_head) {
            (Some(h), Some(g)) => (h, g),
            _ => return Err(Error::ConfigInvalid("domain gradient but the model has no domain head".into())),
        };
        expect_shape("d_domain", dd, n, head.out_dim())?;
        let want = up.rev_lambda != 0.0;
        if let Some(d) = head.backward(feat, dd, grad, want)? {
            accumulate(grad_reverse(&d, up.rev_lambda), &mut d_feat)?;
        }
    }

    let Some(mut d_post) = d_feat else {
        return Ok(grads);
    };
    for k in (0..p.extractor.len()).rev() {
        let input = if k == 0 { &acts.input } else { &acts.extractor[k - 1] };
        let d_pre = relu_mask(d_post, &acts.extractor[k]);
        match p.extractor[k].backward(input, &d_pre, &mut grads.extractor[k], k > 0)? {
            Some(d) => d_post = d,
            None => break,
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            extractor_hidden: vec![6],
            feat_dim: 5,
            n_classes: 7,
            h_dim: 128,
            au_proj_dim: 32,
            domain_classes: None,
            init_seed: 4,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> (Mat, Mat) {
        let mut rng = Rng::new(seed);
        let x = Mat::from_fn(n, d, |_, _| rng.normal());
        let au = Mat::from_fn(n, AU_DIM, |_, _| rng.uniform());
        (x, au)
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = small_cfg();
        let a = init(&cfg).unwrap();
        assert_eq!(a, init(&cfg).unwrap());
        assert_ne!(a, init(&ModelConfig { init_seed: 5, ..cfg.clone() }).unwrap());
        assert_eq!(a.classifier.weight.shape(), (7, 5));
        assert_eq!(a.extractor[0].weight.shape(), (6, 8));
        assert!(a.classifier.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_std_matches_he_scale() {
        let cfg = ModelConfig { input_dim: 64, extractor_hidden: vec![64], ..ModelConfig::default() };
        let p = init(&cfg).unwrap();
        let w = p.extractor[1].weight.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (w.len() - 1) as f64;
        let target = libm::sqrt(2.0 / 64.0);
        assert!((libm::sqrt(var) - target).abs() / target < 0.1);
    }

    #[test]
    fn adding_domain_head_keeps_other_layers() {
        let cfg = small_cfg();
        let plain = init(&cfg).unwrap();
        let with = init(&ModelConfig { domain_classes: Some(2), ..cfg }).unwrap();
        assert_eq!(plain.extractor, with.extractor);
        assert_eq!(plain.classifier, with.classifier);
        assert_eq!(plain.au_head, with.au_head);
        assert!(with.domain_head.is_some());
    }

    #[test]
    fn forward_shapes_and_unit_rows() {
        let cfg = ModelConfig { input_dim: 8, ..ModelConfig::default() };
        let p = init(&cfg).unwrap();
        let (x, au) = batch(2, 8, 1);
        let acts = forward(&p, &x, &au).unwrap();
        assert_eq!(acts.logits.shape(), (2, 7));
        let h = acts.h.as_ref().unwrap();
        let a = acts.a.as_ref().unwrap();
        assert_eq!(h.unit.shape(), (2, 128));
        assert_eq!(a.unit.shape(), (2, 32));
        for e in [h, a] {
            for r in e.unit.iter_rows() {
                assert!((crate::numkit::norm(r) - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(acts, forward(&p, &x, &au).unwrap());
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let mut p = init(&small_cfg()).unwrap();
        p.classifier = p.classifier.zeros_like();
        let (x, au) = batch(3, 8, 2);
        let acts = forward(&p, &x, &au).unwrap();
        assert!(acts.logits.as_slice().iter().all(|&z| z == 0.0));
        assert!(acts.probs.as_slice().iter().all(|&q| (q - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn dead_embedding_is_degenerate() {
        let mut p = init(&small_cfg()).unwrap();
        p.au_head.weight = p.au_head.weight.map(|_| 0.0);
        let (x, au) = batch(2, 8, 3);
        assert!(matches!(forward(&p, &x, &au), Err(Error::DegenerateVector { row: Some(0), .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init(&small_cfg()).unwrap();
        let (x, au) = batch(4, 8, 5);
        let acts = forward(&p, &x, &au).unwrap();
        let g = backward(&p, &acts, &Mat::zeros(4, 7), &Mat::zeros(4, 128), &Mat::zeros(4, 32)).unwrap();
        assert!(g.named_tensors().iter().all(|t| t.2.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn heads_are_independent() {
        let p = init(&small_cfg()).unwrap();
        let (x, au) = batch(4, 8, 6);
        let acts = forward(&p, &x, &au).unwrap();
        let mut rng = Rng::new(9);
        let d_a = Mat::from_fn(4, 32, |_, _| rng.normal());
        let only_a = backward_with(&p, &acts, &Upstream { d_a: Some(d_a), ..Upstream::default() }).unwrap();
        for (name, _, v) in only_a.named_tensors() {
            if !name.starts_with("au_head") {
                assert!(v.iter().all(|&g| g == 0.0), "{name} received A gradient");
            }
        }
        let d_h = Mat::from_fn(4, 128, |_, _| rng.normal());
        let only_h = backward_with(&p, &acts, &Upstream { d_h: Some(d_h), ..Upstream::default() }).unwrap();
        assert!(only_h.classifier.weight.as_slice().iter().all(|&g| g == 0.0));

        // Changing the AU head does not change the logits path.
        let mut q = p.clone();
        q.au_head.weight = q.au_head.weight.map(|w| w * 1.5 + 0.1);
        let acts_q = forward(&q, &x, &au).unwrap();
        assert_eq!(acts.logits, acts_q.logits);
        let dl = Mat::from_fn(4, 7, |i, j| (i + j) as f64 * 0.1);
        let gp = backward_with(&p, &acts, &Upstream { d_logits: Some(dl.clone()), ..Upstream::default() }).unwrap();
        let gq = backward_with(&q, &acts_q, &Upstream { d_logits: Some(dl), ..Upstream::default() }).unwrap();
        assert_eq!(gp.extractor, gq.extractor);
        assert_eq!(gp.classifier, gq.classifier);
    }

    #[test]
    fn tensors_round_trip() {
        let p = init(&ModelConfig { domain_classes: Some(3), ..small_cfg() }).unwrap();
        let flat: Vec<Vec<f64>> = p.named_tensors().iter().map(|t| t.2.to_vec()).collect();
        assert_eq!(ModelParams::from_tensors(&p.config, &flat).unwrap(), p);
        assert!(ModelParams::from_tensors(&p.config, &flat[1..]).is_err());
    }
}

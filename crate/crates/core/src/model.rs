//! A small differentiable tagger and relation classifier whose only
//! trainable parameters are low-rank adapters.
//!
//! For a token `t`: `x = E[t]`, `z = relu(x · W_trunk)` and the tag logits
//! are `z · W_tag`. A relation between marked positions `p` and `q` is
//! scored from `[z_p ; z_q] · W_rel`. Each `W` is the merged weight
//! `W0 + (alpha/r)·B·A`; the embedding `E` is frozen and never adapted.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{merge, AdapterPair, AdapterSet, BackboneWeights};
use crate::matrix::Matrix;
use crate::seed;

pub const TRUNK: &str = "trunk";
pub const TAG_HEAD: &str = "tag_head";
pub const REL_HEAD: &str = "rel_head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tagging,
    Relation,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Tagging, Task::Relation];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Tagging => "tagging",
            Task::Relation => "relation",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    /// One tag id per token.
    Tags(Vec<usize>),
    /// Marked head/tail token positions and the relation id between them.
    Relation { head: usize, tail: usize, label: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

impl Example {
    pub fn task(&self) -> Task {
        match self.target {
            Target::Tags(_) => Task::Tagging,
            Target::Relation { .. } => Task::Relation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub tag_classes: usize,
    pub relation_classes: usize,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("tag_classes", self.tag_classes),
            ("relation_classes", self.relation_classes),
            ("rank", self.rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("model.alpha must be positive".into()));
        }
        let max_rank = self.hidden.min(self.tag_classes).min(self.relation_classes);
        if self.rank > max_rank {
            return Err(Error::Config(format!(
                "model.rank {} exceeds min(hidden, tag_classes, relation_classes) = {max_rank}",
                self.rank
            )));
        }
        Ok(())
    }

    /// `(d, l)` of every adapted layer.
    pub fn layer_shapes(&self) -> [(&'static str, usize, usize); 3] {
        [
            (TRUNK, self.hidden, self.hidden),
            (TAG_HEAD, self.hidden, self.tag_classes),
            (REL_HEAD, 2 * self.hidden, self.relation_classes),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // η = 0 is accepted: it is the identity update.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("sgd.learning_rate must be a non-negative number".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("sgd.epochs and sgd.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to one adapter's factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrad {
    pub b: Matrix,
    pub a: Matrix,
}

/// Adapter gradients by layer key. Frozen weights have no entry.
pub type Gradients = BTreeMap<String, FactorGrad>;

/// Output of [`ToyModel::predict`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Tags(Vec<usize>),
    Relation(usize),
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    backbone: Arc<BackboneWeights>,
    adapters: AdapterSet,
}

/// Merged weights for one forward/backward pass.
struct Effective {
    trunk: Matrix,
    tag: Matrix,
    rel: Matrix,
}

struct Workspace {
    d_trunk: Matrix,
    d_tag: Matrix,
    d_rel: Matrix,
}

impl ToyModel {
    /// Seeded frozen backbone with freshly initialized adapters (`B = 0`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "backbone"));
        let h = config.hidden;
        let embedding = Matrix::normal(config.vocab_size, h, 1.0, &mut rng);
        let mut layers = BTreeMap::new();
        for (key, d, l) in config.layer_shapes() {
            layers.insert(key.to_string(), Matrix::normal(d, l, 1.0 / (d as f64).sqrt(), &mut rng));
        }
        let backbone = BackboneWeights::new(layers, embedding);
        let adapters = Self::initial_adapters(&config);
        Ok(Self {
            config,
            backbone: Arc::new(backbone),
            adapters,
        })
    }

    pub fn initial_adapters(config: &ModelConfig) -> AdapterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "adapters"));
        let mut set = AdapterSet::new();
        for (key, d, l) in config.layer_shapes() {
            set.insert(key, AdapterPair::init(d, l, config.rank, config.alpha, &mut rng));
        }
        set
    }

    pub fn from_parts(config: ModelConfig, backbone: Arc<BackboneWeights>, adapters: AdapterSet) -> Result<Self> {
        config.validate()?;
        let expected_embedding = (config.vocab_size, config.hidden);
        if backbone.embedding().shape() != expected_embedding {
            return Err(Error::ShapeMismatch {
                key: "embedding".into(),
                expected: expected_embedding,
                found: backbone.embedding().shape(),
            });
        }
        for (key, d, l) in config.layer_shapes() {
            let w = backbone
                .layer(key)
                .ok_or_else(|| Error::UnknownLayer { key: key.to_string() })?;
            if w.shape() != (d, l) {
                return Err(Error::ShapeMismatch {
                    key: key.to_string(),
                    expected: (d, l),
                    found: w.shape(),
                });
            }
            if adapters.get(key).is_none() {
                return Err(Error::InvalidAdapter {
                    key: key.to_string(),
                    reason: "missing adapter".into(),
                });
            }
        }
        if adapters.len() != 3 {
            return Err(Error::Incompatible(format!(
                "toy model adapts exactly {TRUNK}, {TAG_HEAD} and {REL_HEAD}; got {} layers",
                adapters.len()
            )));
        }
        merge(&backbone, &adapters)?;
        Ok(Self {
            config,
            backbone,
            adapters,
        })
    }

    /// Same frozen backbone, different adapters.
    pub fn with_adapters(&self, adapters: AdapterSet) -> Result<Self> {
        self.adapters.check_compatible(&adapters)?;
        Ok(Self {
            config: self.config.clone(),
            backbone: Arc::clone(&self.backbone),
            adapters,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Arc<BackboneWeights> {
        &self.backbone
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn into_adapters(self) -> AdapterSet {
        self.adapters
    }

    fn effective(&self) -> Effective {
        let mut merged = merge(&self.backbone, &self.adapters).expect("adapters validated at construction");
        let mut take = |k: &str| merged.remove(k).expect("layer present");
        Effective {
            trunk: take(TRUNK),
            tag: take(TAG_HEAD),
            rel: take(REL_HEAD),
        }
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.tokens.is_empty() {
            return Err(Error::InvalidExample("empty token sequence".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(&token) = ex.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        match &ex.target {
            Target::Tags(tags) => {
                if tags.len() != ex.tokens.len() {
                    return Err(Error::InvalidExample(format!(
                        "{} tags for {} tokens",
                        tags.len(),
                        ex.tokens.len()
                    )));
                }
                if let Some(t) = tags.iter().find(|&&t| t >= self.config.tag_classes) {
                    return Err(Error::InvalidExample(format!("tag id {t} out of range")));
                }
            }
            &Target::Relation { head, tail, label } => {
                let n = ex.tokens.len();
                if head >= n || tail >= n || head == tail {
                    return Err(Error::InvalidExample(format!(
                        "marked positions ({head}, {tail}) invalid for length {n}"
                    )));
                }
                if label >= self.config.relation_classes {
                    return Err(Error::InvalidExample(format!("relation id {label} out of range")));
                }
            }
        }
        Ok(())
    }

    /// Per-position class distributions: one per token for tagging, a single
    /// distribution for a relation.
    pub fn forward(&self, ex: &Example) -> Result<Vec<Vec<f64>>> {
        self.check_example(ex)?;
        let eff = self.effective();
        Ok(self.forward_with(&eff, ex))
    }

    fn forward_with(&self, eff: &Effective, ex: &Example) -> Vec<Vec<f64>> {
        match &ex.target {
            Target::Tags(_) => ex
                .tokens
                .iter()
                .map(|&t| {
                    let (_, z) = self.hidden_state(eff, t);
                    softmax(&row_times(&z, &eff.tag))
                })
                .collect(),
            &Target::Relation { head, tail, .. } => {
                let u = self.pair_features(eff, ex.tokens[head], ex.tokens[tail]);
                vec![softmax(&row_times(&u, &eff.rel))]
            }
        }
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        let probs = self.forward(ex)?;
        Ok(match ex.target {
            Target::Tags(_) => Prediction::Tags(probs.iter().map(|p| argmax(p)).collect()),
            Target::Relation { .. } => Prediction::Relation(argmax(&probs[0])),
        })
    }

    /// Predictions for many examples sharing one merge.
    pub fn predict_all(&self, examples: &[Example]) -> Result<Vec<Prediction>> {
        for ex in examples {
            self.check_example(ex)?;
        }
        let eff = self.effective();
        Ok(examples
            .iter()
            .map(|ex| {
                let probs = self.forward_with(&eff, ex);
                match ex.target {
                    Target::Tags(_) => Prediction::Tags(probs.iter().map(|p| argmax(p)).collect()),
                    Target::Relation { .. } => Prediction::Relation(argmax(&probs[0])),
                }
            })
            .collect())
    }

    fn hidden_state(&self, eff: &Effective, token: usize) -> (Vec<f64>, Vec<f64>) {
        let x = self.backbone.embedding().row(token);
        let pre = row_times(x, &eff.trunk);
        let z = pre.iter().map(|&v| v.max(0.0)).collect();
        (pre, z)
    }

    fn pair_features(&self, eff: &Effective, head: usize, tail: usize) -> Vec<f64> {
        let (_, mut u) = self.hidden_state(eff, head);
        let (_, zt) = self.hidden_state(eff, tail);
        u.extend_from_slice(&zt);
        u
    }

    /// Mean over the batch of each example's mean token-level (or single
    /// relation-level) negative log-likelihood.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let refs: Vec<&Example> = batch.iter().collect();
        Ok(self.loss_and_grad(&refs, false)?.0)
    }

    pub fn grad(&self, batch: &[Example]) -> Result<Gradients> {
        let refs: Vec<&Example> = batch.iter().collect();
        Ok(self.loss_and_grad(&refs, true)?.1.expect("gradient requested"))
    }

    pub(crate) fn loss_and_grad(&self, batch: &[&Example], want_grad: bool) -> Result<(f64, Option<Gradients>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let eff = self.effective();
        let h = self.config.hidden;
        let mut ws = want_grad.then(|| Workspace {
            d_trunk: Matrix::zeros(h, h),
            d_tag: Matrix::zeros(h, self.config.tag_classes),
            d_rel: Matrix::zeros(2 * h, self.config.relation_classes),
        });
        let batch_weight = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            match &ex.target {
                Target::Tags(tags) => {
                    let weight = batch_weight / ex.tokens.len() as f64;
                    for (&token, &gold) in ex.tokens.iter().zip(tags) {
                        let (pre, z) = self.hidden_state(&eff, token);
                        let logits = row_times(&z, &eff.tag);
                        let (nll, dlogits) = nll_and_grad(&logits, gold);
                        total += weight * nll;
                        if let Some(ws) = ws.as_mut() {
                            let dz = accumulate_head(&mut ws.d_tag, &eff.tag, &z, &dlogits, weight);
                            self.backprop_trunk(&mut ws.d_trunk, token, &pre, &dz);
                        }
                    }
                }
                &Target::Relation { head, tail, label } => {
                    let (pre_h, z_h) = self.hidden_state(&eff, ex.tokens[head]);
                    let (pre_t, z_t) = self.hidden_state(&eff, ex.tokens[tail]);
                    let u: Vec<f64> = z_h.iter().chain(&z_t).copied().collect();
                    let logits = row_times(&u, &eff.rel);
                    let (nll, dlogits) = nll_and_grad(&logits, label);
                    total += batch_weight * nll;
                    if let Some(ws) = ws.as_mut() {
                        let du = accumulate_head(&mut ws.d_rel, &eff.rel, &u, &dlogits, batch_weight);
                        self.backprop_trunk(&mut ws.d_trunk, ex.tokens[head], &pre_h, &du[..h]);
                        self.backprop_trunk(&mut ws.d_trunk, ex.tokens[tail], &pre_t, &du[h..]);
                    }
                }
            }
        }
        let grads = ws.map(|ws| {
            let mut grads = Gradients::new();
            for (key, dw) in [(TRUNK, ws.d_trunk), (TAG_HEAD, ws.d_tag), (REL_HEAD, ws.d_rel)] {
                let pair = self.adapters.get(key).expect("layer present");
                grads.insert(key.to_string(), factor_grad(pair, &dw));
            }
            grads
        });
        Ok((total, grads))
    }

    /// `dW_trunk += x ⊗ (dz ⊙ 1[pre > 0])`.
    fn backprop_trunk(&self, d_trunk: &mut Matrix, token: usize, pre: &[f64], dz: &[f64]) {
        let x = self.backbone.embedding().row(token);
        let h = pre.len();
        let dpre: Vec<f64> = pre
            .iter()
            .zip(dz)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let data = d_trunk.data_mut();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (d, g) in data[i * h..(i + 1) * h].iter_mut().zip(&dpre) {
                *d += xi * g;
            }
        }
    }

    /// One plain SGD step `X ← X − η ∇_X L` on every factor.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        for (key, pair) in self.adapters.iter_mut() {
            let g = &grads[key];
            pair.b_mut().add_scaled(&g.b, -learning_rate);
            pair.a_mut().add_scaled(&g.a, -learning_rate);
        }
    }
}

/// `∇B = s·G·Aᵀ`, `∇A = s·Bᵀ·G` for `G = ∂L/∂W_eff`.
fn factor_grad(pair: &AdapterPair, dw: &Matrix) -> FactorGrad {
    let s = pair.scale();
    FactorGrad {
        b: dw.matmul_transpose(pair.a()).scaled(s),
        a: pair.b().transpose_matmul(dw).scaled(s),
    }
}

/// Adds `weight · v ⊗ dlogits` to `d_head` and returns `weight · W · dlogits`.
fn accumulate_head(d_head: &mut Matrix, w: &Matrix, v: &[f64], dlogits: &[f64], weight: f64) -> Vec<f64> {
    let c = dlogits.len();
    let data = d_head.data_mut();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (d, g) in data[i * c..(i + 1) * c].iter_mut().zip(dlogits) {
            *d += weight * vi * g;
        }
    }
    (0..w.rows())
        .map(|i| weight * w.row(i).iter().zip(dlogits).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Row vector times matrix.
fn row_times(v: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(v.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(i)) {
            *o += vi * w;
        }
    }
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// `(-log p[gold], p - onehot(gold))`.
fn nll_and_grad(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let nll = lse - logits[gold];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[gold] -= 1.0;
    (nll.max(0.0), grad)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Runs `sgd.epochs` epochs of seeded-shuffle mini-batch SGD over `data`,
/// starting from `model`'s adapters, and returns the trained adapters.
/// `model` itself is left untouched.
pub fn local_update(model: &ToyModel, data: &[Example], sgd: &SgdConfig, seed: u64) -> Result<AdapterSet> {
    sgd.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..sgd.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sgd.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let (_, grads) = current.loss_and_grad(&batch, true)?;
            current.apply_gradients(&grads.expect("gradient requested"), sgd.learning_rate);
        }
    }
    Ok(current.adapters)
}

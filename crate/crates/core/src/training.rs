//! Stage-one and stage-two training, debugging fine-tunes and the
//! remove-and-finetune baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageExample;
use crate::error::{Error, Result};
use crate::losses::{self, Concept, LossBreakdown, LossWeights};
use crate::metrics;
use crate::model::{fixed_class_weights, ProtoPNet, Trainable};
use crate::tensor::{softmax, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Base learning rate of the prototype block; `None` uses `learning_rate`.
    pub prototype_learning_rate: Option<f64>,
    /// The prototype learning rate is multiplied by `prototype_lr_decay`
    /// every `prototype_lr_period` epochs.
    pub prototype_lr_decay: f64,
    pub prototype_lr_period: usize,
    /// Project prototypes after every `n`-th epoch; `None` disables it.
    pub projection_period: Option<usize>,
    /// Freezes the convolutional backbone.
    pub freeze_embedding: bool,
    /// Freezes the 1x1 adaptation layers.
    pub freeze_adaptation: bool,
    pub weights: LossWeights,
    /// 1: plain min; 3: mean of the three smallest distances.
    pub robust_k: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Apply the IAIA-BL penalty to training examples that carry a mask.
    pub iaia: bool,
    /// Compute test macro F1 after every epoch.
    pub evaluate_test: bool,
    /// With trainable layers, pass concepts that know their source
    /// image through the current embedding at every step.
    pub reembed_concepts: bool,
    /// Fine-tune the aggregation weights along with the prototypes
    /// (debugging rounds only; stage one keeps them fixed).
    pub train_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 20,
            learning_rate: 3e-3,
            prototype_learning_rate: None,
            prototype_lr_decay: 0.15,
            prototype_lr_period: 4,
            projection_period: Some(10),
            freeze_embedding: false,
            freeze_adaptation: false,
            weights: LossWeights::default(),
            robust_k: 3,
            seed: 0,
            adam: AdamConfig::default(),
            iaia: false,
            evaluate_test: true,
            reembed_concepts: true,
            train_weights: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for debugging rounds: frozen backbone and adaptation layers,
    /// no projection, constant prototype learning rate, trainable weights.
    pub fn finetune() -> Self {
        Self {
            freeze_embedding: true,
            freeze_adaptation: true,
            projection_period: None,
            prototype_lr_decay: 1.0,
            train_weights: true,
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > train_size.max(1) {
            return Err(Error::Config(format!(
                "batch size {} with {train_size} training examples",
                self.batch_size
            )));
        }
        if !(self.prototype_lr_decay > 0.0 && self.prototype_lr_decay <= 1.0) {
            return Err(Error::Config(
                "prototype_lr_decay must lie in (0, 1]".into(),
            ));
        }
        if self.prototype_lr_period == 0 || self.projection_period == Some(0) {
            return Err(Error::Config("periods must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.prototype_learning_rate.is_some_and(|lr| !(lr > 0.0))
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.robust_k == 0 {
            return Err(Error::Config("robust_k must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn prototype_lr(&self, epoch: usize) -> f64 {
        let base = self.prototype_learning_rate.unwrap_or(self.learning_rate);
        base * self
            .prototype_lr_decay
            .powi((epoch / self.prototype_lr_period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub loss: LossBreakdown,
    /// Macro F1 of the predictions made during the epoch's forward passes.
    pub train_macro_f1: f64,
    pub test_macro_f1: Option<f64>,
    pub projected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss.total)
    }
}

/// Adam moments for every parameter block, in [`ProtoPNet::blocks`] order.
#[derive(Clone, Debug)]
struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &ProtoPNet, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = model.blocks().iter().map(|(_, t)| t.len()).collect();
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Vec<f64>>], lrs: &[f64]) {
        self.t += 1;
        let c = self.cfg;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / b1t;
                let vh = v[k] / b2t;
                *x -= lrs[i] * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

fn block_trainable(model: &ProtoPNet, t: Trainable) -> Vec<bool> {
    let n = model.layers.len();
    let mut out: Vec<bool> = (0..n).flat_map(|i| [t.layer(i, n); 2]).collect();
    out.push(t.prototypes);
    out.push(t.weights);
    out
}

fn param_vars(vars: &crate::model::ParamVars) -> Vec<crate::tensor::Var> {
    let mut out: Vec<_> = vars.layers.iter().flat_map(|&(k, b)| [k, b]).collect();
    out.push(vars.prototypes);
    out.push(vars.weights);
    out
}

struct ExampleResult {
    grads: Vec<Option<Vec<f64>>>,
    ce: f64,
    cluster: f64,
    separation: f64,
    iaia: f64,
    predicted: usize,
}

fn example_step(
    model: &ProtoPNet,
    ex: &ImageExample,
    cfg: &TrainConfig,
    trainable: Trainable,
    batch_n: f64,
    masked_n: f64,
) -> Result<ExampleResult> {
    let w = &cfg.weights;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, trainable);
    let x = tape.constant(ex.pixels.clone());
    let fwd = model.forward_on(&mut tape, &vars, x)?;
    let predicted = crate::tensor::argmax(tape.value(fwd.logits).data()).unwrap_or(0);
    let ce = tape.softmax_cross_entropy(fwd.logits, ex.label)?;
    let cl = losses::cluster_term(&mut tape, model, &fwd, ex.label, cfg.robust_k)?;
    let sep = losses::separation_term(&mut tape, model, &fwd, ex.label, cfg.robust_k)?;
    let per_example = {
        let a = tape.scale(cl, w.cluster)?;
        let b = tape.scale(sep, w.separation)?;
        let s = tape.add(ce, a)?;
        let s = tape.add(s, b)?;
        tape.scale(s, 1.0 / batch_n)?
    };
    let mut total = per_example;
    let mut iaia = 0.0;
    if cfg.iaia {
        if let Some(mask) = ex.mask.as_deref() {
            let cells = losses::latent_mask(&model.config, mask)?;
            let ia = losses::iaia_term(&mut tape, model, &fwd, ex.label, &cells)?;
            iaia = tape.value(ia).item();
            let s = tape.scale(ia, w.iaia / masked_n)?;
            total = tape.add(total, s)?;
        }
    }
    tape.backward(total)?;
    let grads = param_vars(&vars)
        .into_iter()
        .map(|v| {
            tape.requires_grad(v)
                .then(|| tape.grad_or_zeros(v).into_data())
        })
        .collect();
    Ok(ExampleResult {
        grads,
        ce: tape.value(ce).item(),
        cluster: tape.value(cl).item(),
        separation: tape.value(sep).item(),
        iaia,
        predicted,
    })
}

/// Forget, remember and diversity terms with gradients for every trainable
/// block (the embedding only sees them through re-embedded concepts).
fn concept_terms(
    model: &ProtoPNet,
    cfg: &TrainConfig,
    trainable: Trainable,
    forbidden: &[Vec<Concept>],
    valid: &[Vec<Concept>],
) -> Result<(f64, f64, f64, Vec<Option<Vec<f64>>>)> {
    let w = &cfg.weights;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, trainable);
    let reembed = cfg.reembed_concepts && trainable.any_layer();
    let fv = losses::concept_vars(&mut tape, model, Some(&vars), forbidden, reembed)?;
    let vv = losses::concept_vars(&mut tape, model, Some(&vars), valid, reembed)?;
    let f = losses::forget_term(&mut tape, model, vars.prototypes, &fv)?;
    let r = losses::remember_term(&mut tape, model, vars.prototypes, &vv)?;
    let d = losses::div_term(&mut tape, model, vars.prototypes)?;
    let vals = (
        tape.value(f).item(),
        tape.value(r).item(),
        tape.value(d).item(),
    );
    let a = tape.scale(f, w.forget)?;
    let b = tape.scale(r, w.remember)?;
    let c = tape.scale(d, w.div)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, c)?;
    let grads = if tape.requires_grad(s) {
        tape.backward(s)?;
        param_vars(&vars)
            .into_iter()
            .map(|v| {
                tape.requires_grad(v)
                    .then(|| tape.grad_or_zeros(v).into_data())
            })
            .collect()
    } else {
        vec![None; param_vars(&vars).len()]
    };
    Ok((vals.0, vals.1, vals.2, grads))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Shared optimisation loop over the composite objective.
pub fn train(
    model: &mut ProtoPNet,
    train: &[ImageExample],
    test: &[ImageExample],
    cfg: &TrainConfig,
    trainable: Trainable,
    forbidden: &[Vec<Concept>],
    valid: &[Vec<Concept>],
) -> Result<TrainReport> {
    cfg.validate(train.len())?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut adam = Adam::new(model, cfg.adam);
    let mask = block_trainable(model, trainable);
    let nblocks = mask.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut lrs = vec![cfg.learning_rate; nblocks];
        lrs[nblocks - 2] = cfg.prototype_lr(epoch);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        let mut preds = vec![0usize; train.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch_n = chunk.len() as f64;
            let masked_n = chunk
                .iter()
                .filter(|&&i| train[i].mask.is_some())
                .count()
                .max(1) as f64;
            let snapshot = &*model;
            let results: Vec<Result<ExampleResult>> = chunk
                .par_iter()
                .map(|&i| example_step(snapshot, &train[i], cfg, trainable, batch_n, masked_n))
                .collect();
            let mut grads: Vec<Option<Vec<f64>>> = mask
                .iter()
                .zip(model.blocks())
                .map(|(&on, (_, t))| on.then(|| vec![0.0; t.len()]))
                .collect();
            let mut b = LossBreakdown::default();
            let mut masked = 0usize;
            for (&i, r) in chunk.iter().zip(results) {
                let r = r.map_err(|e| diverged(epoch, e))?;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                        acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                    }
                }
                b.cross_entropy += r.ce / batch_n;
                b.cluster += r.cluster / batch_n;
                b.separation += r.separation / batch_n;
                if cfg.iaia && train[i].mask.is_some() {
                    b.iaia += r.iaia;
                    masked += 1;
                }
                preds[i] = r.predicted;
            }
            if masked > 0 {
                b.iaia /= masked as f64;
            }
            let (f, rm, d, cg) = concept_terms(model, cfg, trainable, forbidden, valid)
                .map_err(|e| diverged(epoch, e))?;
            b.forget = f;
            b.remember = rm;
            b.div = d;
            b.total = b.weighted_total(&cfg.weights);
            if !b.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite loss".into(),
                });
            }
            for (acc, g) in grads.iter_mut().zip(&cg) {
                if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            adam.step(blocks_mut(model), &grads, &lrs);
            add_breakdown(&mut sums, &b);
            batches += 1;
        }
        let mut loss = scale_breakdown(&sums, 1.0 / batches.max(1) as f64);
        loss.total = loss.weighted_total(&cfg.weights);
        let projected =
            cfg.projection_period.is_some_and(|p| (epoch + 1) % p == 0) && trainable.prototypes;
        if projected {
            model.project(train)?;
        }
        let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
        let train_macro_f1 =
            metrics::f1(&preds, &labels, model.num_classes(), metrics::F1Mode::Macro)?;
        let test_macro_f1 = if cfg.evaluate_test && !test.is_empty() {
            Some(metrics::macro_f1(model, test)?)
        } else {
            None
        };
        log::debug!(
            "epoch {epoch}: loss {:.4}, train F1 {train_macro_f1:.3}",
            loss.total
        );
        report.epochs.push(EpochStats {
            epoch,
            loss,
            train_macro_f1,
            test_macro_f1,
            projected,
        });
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn blocks_mut(model: &mut ProtoPNet) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for l in &mut model.layers {
        out.push(&mut l.kernel);
        out.push(&mut l.bias);
    }
    out.push(&mut model.prototypes);
    out.push(&mut model.weights);
    out
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.cross_entropy += b.cross_entropy;
    acc.cluster += b.cluster;
    acc.separation += b.separation;
    acc.iaia += b.iaia;
    acc.forget += b.forget;
    acc.remember += b.remember;
    acc.div += b.div;
    acc.total += b.total;
}

fn scale_breakdown(b: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        cross_entropy: b.cross_entropy * s,
        cluster: b.cluster * s,
        separation: b.separation * s,
        iaia: b.iaia * s,
        forget: b.forget * s,
        remember: b.remember * s,
        div: b.div * s,
        total: b.total * s,
    }
}

/// Embedding and prototypes fitted jointly with the aggregation layer fixed
/// at the 1 / -0.5 pattern.
pub fn train_stage1(
    model: &mut ProtoPNet,
    train_set: &[ImageExample],
    test_set: &[ImageExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    model.weights = fixed_class_weights(model.num_classes(), &model.prototype_class);
    let trainable = Trainable {
        embedding: !cfg.freeze_embedding,
        adaptation: !cfg.freeze_adaptation,
        prototypes: true,
        weights: false,
    };
    let none = losses::empty_sets(model.num_classes());
    train(model, train_set, test_set, cfg, trainable, &none, &none)
}

/// One debugging fine-tune: the stage-one objective plus forgetting and
/// remembering. Fails if the forgetting loss did not decrease.
pub fn finetune_debug(
    model: &mut ProtoPNet,
    train_set: &[ImageExample],
    test_set: &[ImageExample],
    forbidden: &[Vec<Concept>],
    valid: &[Vec<Concept>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let before = losses::forget_loss(model, forbidden)?;
    let trainable = Trainable {
        embedding: !cfg.freeze_embedding,
        adaptation: !cfg.freeze_adaptation,
        prototypes: true,
        weights: cfg.train_weights,
    };
    let report = train(model, train_set, test_set, cfg, trainable, forbidden, valid)?;
    let after = losses::forget_loss(model, forbidden)?;
    if before > 0.0 && cfg.epochs > 0 && after >= before {
        return Err(Error::Training {
            epoch: cfg.epochs.saturating_sub(1),
            reason: format!("forgetting loss did not decrease ({before} -> {after})"),
        });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Ridge penalty `l2/2 ||W||^2`, which makes the optimum unique.
    pub l2: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 0.05,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_cross_entropy: f64,
}

/// Prototype activations of every example, one row each.
pub fn activation_features(model: &ProtoPNet, examples: &[ImageExample]) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|ex| Ok(model.forward(&ex.pixels)?.activations))
        .collect()
}

/// Mean cross entropy plus ridge penalty of linear weights `w` (`v x k`,
/// row-major) on fixed features, and its gradient.
pub fn logistic_objective(
    w: &[f64],
    features: &[Vec<f64>],
    labels: &[usize],
    v: usize,
    l2: f64,
) -> (f64, f64, Vec<f64>) {
    let k = features.first().map_or(0, Vec::len);
    let n = features.len() as f64;
    let mut grad = vec![0.0; v * k];
    let mut ce = 0.0;
    for (a, &y) in features.iter().zip(labels) {
        let logits: Vec<f64> = (0..v)
            .map(|u| (0..k).map(|j| w[u * k + j] * a[j]).sum())
            .collect();
        let p = softmax(&logits);
        ce -= p[y].max(f64::MIN_POSITIVE).ln() / n;
        for u in 0..v {
            let d = (p[u] - if u == y { 1.0 } else { 0.0 }) / n;
            for j in 0..k {
                grad[u * k + j] += d * a[j];
            }
        }
    }
    let reg: f64 = w.iter().map(|x| x * x).sum::<f64>() * l2 / 2.0;
    grad.iter_mut().zip(w).for_each(|(g, x)| *g += l2 * x);
    (ce + reg, ce, grad)
}

/// Refits only the aggregation layer by multinomial logistic regression on
/// the prototype activations. Entries where `allowed` is false stay at zero.
pub fn fit_aggregation(
    model: &mut ProtoPNet,
    examples: &[ImageExample],
    cfg: &Stage2Config,
    allowed: Option<&[bool]>,
) -> Result<Stage2Report> {
    if examples.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let features = activation_features(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let v = model.num_classes();
    let mut w = model.weights.data().to_vec();
    let apply_mask = |w: &mut [f64]| {
        if let Some(a) = allowed {
            w.iter_mut()
                .zip(a)
                .filter(|(_, &ok)| !ok)
                .for_each(|(x, _)| *x = 0.0);
        }
    };
    apply_mask(&mut w);
    let initial = logistic_objective(&w, &features, &labels, v, cfg.l2).0;
    let c = AdamConfig::default();
    let (mut m, mut s) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    for t in 1..=cfg.iterations {
        let (_, _, mut g) = logistic_objective(&w, &features, &labels, v, cfg.l2);
        apply_mask(&mut g);
        let (b1t, b2t) = (1.0 - c.beta1.powi(t as i32), 1.0 - c.beta2.powi(t as i32));
        for i in 0..w.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * g[i] * g[i];
            w[i] -= cfg.learning_rate * (m[i] / b1t) / ((s[i] / b2t).sqrt() + c.epsilon);
        }
        apply_mask(&mut w);
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Training {
            epoch: 0,
            reason: "non-finite aggregation weights".into(),
        });
    }
    let (final_loss, final_ce, _) = logistic_objective(&w, &features, &labels, v, cfg.l2);
    model.weights = Tensor::new(model.weights.shape().to_vec(), w)?;
    Ok(Stage2Report {
        initial_loss: initial,
        final_loss,
        final_cross_entropy: final_ce,
    })
}

pub fn train_stage2(
    model: &mut ProtoPNet,
    train_set: &[ImageExample],
    cfg: &Stage2Config,
) -> Result<Stage2Report> {
    fit_aggregation(model, train_set, cfg, None)
}

/// Zeroes the aggregation columns of `bad` prototypes and refits the rest.
pub fn remove_and_finetune(
    model: &mut ProtoPNet,
    bad: &[usize],
    train_set: &[ImageExample],
    cfg: &Stage2Config,
) -> Result<Stage2Report> {
    let k = model.num_prototypes();
    if let Some(&j) = bad.iter().find(|&&j| j >= k) {
        return Err(Error::Index(format!("prototype {j} of {k}")));
    }
    for y in 0..model.num_classes() {
        if model.prototypes_of(y).iter().all(|j| bad.contains(j)) {
            return Err(Error::BaselineInapplicable(format!(
                "every prototype of class {y} is marked for removal"
            )));
        }
    }
    let v = model.num_classes();
    let allowed: Vec<bool> = (0..v * k).map(|i| !bad.contains(&(i % k))).collect();
    fit_aggregation(model, train_set, cfg, Some(&allowed))
}

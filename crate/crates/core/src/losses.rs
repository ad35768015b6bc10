//! Loss terms. Each term has a tape-building form used by training and a
//! value form used by evaluation, reports and tests.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageExample;
use crate::error::{shape_err, Error, Result};
use crate::model::{ForwardVars, ModelConfig, ParamVars, ProtoPNet, Trainable};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cluster: f64,
    pub separation: f64,
    pub forget: f64,
    pub remember: f64,
    pub iaia: f64,
    pub div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cluster: 0.5,
            separation: 0.08,
            forget: 100.0,
            remember: 0.0,
            iaia: 0.001,
            div: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cluster: 0.0,
            separation: 0.0,
            forget: 0.0,
            remember: 0.0,
            iaia: 0.0,
            div: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cluster,
            self.separation,
            self.forget,
            self.remember,
            self.iaia,
            self.div,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A region to forget or remember, as latent patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    /// `[m, d']` patches as embedded when the concept was collected.
    pub patches: Tensor,
    /// Source image and the flat latent cells the patches came from, so the
    /// region can be re-embedded with the current embedding.
    pub source: Option<(Tensor, Vec<usize>)>,
}

impl Concept {
    pub fn fixed(patches: Tensor) -> Self {
        Self {
            patches,
            source: None,
        }
    }
}

/// Per-class concept sets.
pub type ConceptSets = Vec<Vec<Concept>>;

/// Puts every concept on `tape`: re-embedded through `vars` when `reembed`
/// is set and the concept knows its source, as a constant otherwise.
pub fn concept_vars(
    tape: &mut Tape,
    model: &ProtoPNet,
    vars: Option<&ParamVars>,
    sets: &[Vec<Concept>],
    reembed: bool,
) -> Result<Vec<Vec<Var>>> {
    let d = model.config.latent_depth;
    let mut out = Vec::with_capacity(sets.len());
    for concepts in sets {
        let mut row = Vec::with_capacity(concepts.len());
        for c in concepts {
            check_concept(&c.patches, d)?;
            let v = match (&c.source, vars) {
                (Some((pixels, cells)), Some(vars)) if reembed => {
                    let x = tape.constant(pixels.clone());
                    let z = model.embed_on(tape, vars, x)?;
                    let picked = tape.pick(z, &row_indices(cells, d))?;
                    tape.reshape(picked, vec![cells.len(), d])?
                }
                _ => tape.constant(c.patches.clone()),
            };
            row.push(v);
        }
        out.push(row);
    }
    Ok(out)
}

/// The same sets with patches recomputed by the current embedding.
pub fn reembedded(model: &ProtoPNet, sets: &[Vec<Concept>]) -> Result<ConceptSets> {
    let d = model.config.latent_depth;
    sets.iter()
        .map(|cs| {
            cs.iter()
                .map(|c| {
                    let Some((pixels, cells)) = &c.source else {
                        return Ok(c.clone());
                    };
                    let z = model.embed(pixels)?;
                    let mut data = Vec::with_capacity(cells.len() * d);
                    for &i in cells {
                        data.extend_from_slice(&z.data()[i * d..(i + 1) * d]);
                    }
                    Ok(Concept {
                        patches: Tensor::new(vec![cells.len(), d], data)?,
                        source: c.source.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn empty_sets(num_classes: usize) -> ConceptSets {
    vec![Vec::new(); num_classes]
}

/// Unweighted value of every term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub iaia: f64,
    pub forget: f64,
    pub remember: f64,
    pub div: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.cross_entropy
            + w.cluster * self.cluster
            + w.separation * self.separation
            + w.iaia * self.iaia
            + w.forget * self.forget
            + w.remember * self.remember
            + w.div * self.div
    }
}

/// Flat indices of the rows of a `[k, n]` matrix.
fn row_indices(rows: &[usize], n: usize) -> Vec<usize> {
    rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect()
}

fn check_robust_k(robust_k: usize, domain: usize) -> Result<()> {
    if robust_k == 0 || robust_k > domain {
        return Err(Error::Config(format!(
            "robust_k = {robust_k} with {domain} candidate distances"
        )));
    }
    Ok(())
}

/// Sub-matrix `[rows.len(), d']` of the prototype matrix on the tape.
fn prototype_rows(tape: &mut Tape, prototypes: Var, rows: &[usize]) -> Result<Var> {
    let d = tape.value(prototypes).shape()[1];
    let picked = tape.pick(prototypes, &row_indices(rows, d))?;
    tape.reshape(picked, vec![rows.len(), d])
}

/// Cluster term for one example: min (or mean of the `robust_k` smallest)
/// squared distance between its class's prototypes and its patches.
pub fn cluster_term(
    tape: &mut Tape,
    model: &ProtoPNet,
    fwd: &ForwardVars,
    label: usize,
    robust_k: usize,
) -> Result<Var> {
    let own = model.prototypes_of(label);
    if own.is_empty() {
        return Err(Error::Config(format!("class {label} has no prototypes")));
    }
    let n = tape.value(fwd.distances).shape()[1];
    check_robust_k(robust_k, own.len() * n)?;
    let d = tape.pick(fwd.distances, &row_indices(&own, n))?;
    tape.smallest_mean(d, robust_k)
}

/// Separation term for one example: the negated cluster statistic over
/// prototypes of the other classes.
pub fn separation_term(
    tape: &mut Tape,
    model: &ProtoPNet,
    fwd: &ForwardVars,
    label: usize,
    robust_k: usize,
) -> Result<Var> {
    let other: Vec<usize> = (0..model.num_prototypes())
        .filter(|&j| model.prototype_class[j] != label)
        .collect();
    if other.is_empty() {
        return Err(Error::Config(
            "separation needs prototypes of another class".into(),
        ));
    }
    let n = tape.value(fwd.distances).shape()[1];
    check_robust_k(robust_k, other.len() * n)?;
    let d = tape.pick(fwd.distances, &row_indices(&other, n))?;
    let m = tape.smallest_mean(d, robust_k)?;
    tape.neg(m)
}

/// Mean of a pixel mask over each latent cell's receptive field.
pub fn latent_mask(config: &ModelConfig, mask: &[u8]) -> Result<Vec<f64>> {
    let [h, w, _] = config.input_shape;
    if mask.len() != h * w {
        return shape_err(format!("mask of {} pixels for a {h}x{w} image", mask.len()));
    }
    let (gh, gw) = config.latent_grid();
    let (rf, jump) = config.receptive_field();
    let mut out = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let (y0, x0) = (r * jump, c * jump);
            let (y1, x1) = ((y0 + rf).min(h), (x0 + rf).min(w));
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += f64::from(mask[y * w + x]);
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    Ok(out)
}

/// Unscaled per-example IAIA-BL penalty on latent-resolution attribution
/// maps: `sum_{own} ||(1 - m) * act|| + sum_{other} ||act||`.
pub fn iaia_term(
    tape: &mut Tape,
    model: &ProtoPNet,
    fwd: &ForwardVars,
    label: usize,
    cell_mask: &[f64],
) -> Result<Var> {
    let n = tape.value(fwd.patch_activations).shape()[1];
    if cell_mask.len() != n {
        return shape_err(format!("cell mask of {} for {n} patches", cell_mask.len()));
    }
    let irrelevant = tape.constant(Tensor::vector(cell_mask.iter().map(|m| 1.0 - m).collect()));
    let mut parts = Vec::with_capacity(model.num_prototypes());
    for j in 0..model.num_prototypes() {
        let idx: Vec<usize> = (j * n..(j + 1) * n).collect();
        let row = tape.pick(fwd.patch_activations, &idx)?;
        let row = if model.prototype_class[j] == label {
            tape.mul(row, irrelevant)?
        } else {
            row
        };
        parts.push(tape.norm_l2(row)?);
    }
    let all = tape.concat(&parts)?;
    tape.sum(all)
}

/// `(1/v) sum_y max_{p in P^y, f in F_y, q in f} act(p, q)`; empty classes add 0.
/// `forbidden[y]` holds `[m, d']` patch matrices on the tape.
pub fn forget_term(
    tape: &mut Tape,
    model: &ProtoPNet,
    prototypes: Var,
    forbidden: &[Vec<Var>],
) -> Result<Var> {
    let mut parts = Vec::new();
    for (y, concepts) in forbidden.iter().enumerate() {
        let concepts: Vec<Var> = concepts
            .iter()
            .copied()
            .filter(|&c| !tape.value(c).is_empty())
            .collect();
        if concepts.is_empty() {
            continue;
        }
        let p = prototype_rows(tape, prototypes, &model.prototypes_of(y))?;
        let mut maxes = Vec::with_capacity(concepts.len());
        for q in concepts {
            let d = tape.pairwise_sq_dist(p, q)?;
            let a = model.activation_on(tape, d)?;
            maxes.push(tape.max_with_argmax(a)?.0);
        }
        let all = tape.concat(&maxes)?;
        parts.push(tape.max_with_argmax(all)?.0);
    }
    scaled_sum(tape, &parts, 1.0 / model.num_classes() as f64)
}

/// `-(1/v) sum_y min_{p in P^y, v in V_y} max_{q in v} act(p, q)`; empty classes add 0.
pub fn remember_term(
    tape: &mut Tape,
    model: &ProtoPNet,
    prototypes: Var,
    valid: &[Vec<Var>],
) -> Result<Var> {
    let mut parts = Vec::new();
    for (y, concepts) in valid.iter().enumerate() {
        let concepts: Vec<Var> = concepts
            .iter()
            .copied()
            .filter(|&c| !tape.value(c).is_empty())
            .collect();
        if concepts.is_empty() {
            continue;
        }
        let p = prototype_rows(tape, prototypes, &model.prototypes_of(y))?;
        let mut best = Vec::with_capacity(concepts.len());
        for q in concepts {
            let d = tape.pairwise_sq_dist(p, q)?;
            let a = model.activation_on(tape, d)?;
            best.push(tape.max_rows(a)?.0);
        }
        let all = tape.concat(&best)?;
        parts.push(tape.min_with_argmin(all)?.0);
    }
    scaled_sum(tape, &parts, -1.0 / model.num_classes() as f64)
}

/// `(1/|P|) sum_y sum_{p in P^y} min_{p' in P^y, p' != p} ||p - p'||^2`.
pub fn div_term(tape: &mut Tape, model: &ProtoPNet, prototypes: Var) -> Result<Var> {
    let mut parts = Vec::new();
    for y in 0..model.num_classes() {
        let own = model.prototypes_of(y);
        let c = own.len();
        if c < 2 {
            continue;
        }
        let p = prototype_rows(tape, prototypes, &own)?;
        let d = tape.pairwise_sq_dist(p, p)?;
        for i in 0..c {
            let others: Vec<usize> = (0..c).filter(|&j| j != i).map(|j| i * c + j).collect();
            let row = tape.pick(d, &others)?;
            parts.push(tape.min_with_argmin(row)?.0);
        }
    }
    scaled_sum(tape, &parts, 1.0 / model.num_prototypes() as f64)
}

fn scaled_sum(tape: &mut Tape, parts: &[Var], s: f64) -> Result<Var> {
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.concat(parts)?;
    let total = tape.sum(all)?;
    tape.scale(total, s)
}

fn check_concept(c: &Tensor, d: usize) -> Result<()> {
    if c.shape().len() != 2 || c.shape()[1] != d {
        return shape_err(format!("concept shape {:?}, expected [m, {d}]", c.shape()));
    }
    Ok(())
}

/// Mean of `||(1 - m) * IG||^2` over examples, given per-example masks and
/// input gradients of equal length.
pub fn rrr_loss(masks: &[&[u8]], input_gradients: &[Tensor]) -> Result<f64> {
    if masks.len() != input_gradients.len() || masks.is_empty() {
        return shape_err("rrr_loss needs one mask per input gradient");
    }
    let mut total = 0.0;
    for (m, g) in masks.iter().zip(input_gradients) {
        let shape = g.shape();
        let pixels = shape[..shape.len() - 1].iter().product::<usize>();
        if m.len() != pixels {
            return shape_err(format!("mask of {} for gradient {:?}", m.len(), shape));
        }
        let c = shape[shape.len() - 1];
        total += g
            .data()
            .chunks(c)
            .zip(m.iter())
            .filter(|(_, &mi)| mi == 0)
            .flat_map(|(px, _)| px.iter())
            .map(|v| v * v)
            .sum::<f64>();
    }
    Ok(total / masks.len() as f64)
}

/// Per-example terms built on a fresh tape with frozen parameters.
fn example_terms(
    model: &ProtoPNet,
    ex: &ImageExample,
    robust_k: usize,
    with_iaia: bool,
) -> Result<(f64, f64, f64, f64)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, Trainable::NONE);
    let x = tape.constant(ex.pixels.clone());
    let fwd = model.forward_on(&mut tape, &vars, x)?;
    let ce = tape.softmax_cross_entropy(fwd.logits, ex.label)?;
    let cl = cluster_term(&mut tape, model, &fwd, ex.label, robust_k)?;
    let sep = separation_term(&mut tape, model, &fwd, ex.label, robust_k)?;
    let ia = if with_iaia {
        let mask = ex
            .mask
            .as_deref()
            .ok_or_else(|| Error::Data(format!("example {} has no mask", ex.id)))?;
        let cells = latent_mask(&model.config, mask)?;
        let v = iaia_term(&mut tape, model, &fwd, ex.label, &cells)?;
        tape.value(v).item()
    } else {
        0.0
    };
    Ok((
        tape.value(ce).item(),
        tape.value(cl).item(),
        tape.value(sep).item(),
        ia,
    ))
}

fn mean_over<'a>(
    model: &ProtoPNet,
    batch: &[&'a ImageExample],
    f: impl Fn(&(f64, f64, f64, f64)) -> f64,
    robust_k: usize,
    with_iaia: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return shape_err("empty batch");
    }
    let mut s = 0.0;
    for ex in batch {
        s += f(&example_terms(model, ex, robust_k, with_iaia)?);
    }
    Ok(s / batch.len() as f64)
}

pub fn cluster_loss(model: &ProtoPNet, batch: &[&ImageExample], robust_k: usize) -> Result<f64> {
    mean_over(model, batch, |t| t.1, robust_k, false)
}

pub fn sep_loss(model: &ProtoPNet, batch: &[&ImageExample], robust_k: usize) -> Result<f64> {
    mean_over(model, batch, |t| t.2, robust_k, false)
}

/// `lambda_iaia` times the batch mean of the per-example IAIA-BL penalty.
pub fn iaia_loss(model: &ProtoPNet, batch: &[&ImageExample], lambda_iaia: f64) -> Result<f64> {
    Ok(lambda_iaia * mean_over(model, batch, |t| t.3, 1, true)?)
}

fn prototype_only<F>(model: &ProtoPNet, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.constant(model.prototypes.clone());
    let v = build(&mut tape, p)?;
    Ok(tape.value(v).item())
}

/// Forgetting loss on the patches as stored in the concepts.
pub fn forget_loss(model: &ProtoPNet, forbidden: &[Vec<Concept>]) -> Result<f64> {
    prototype_only(model, |t, p| {
        let f = concept_vars(t, model, None, forbidden, false)?;
        forget_term(t, model, p, &f)
    })
}

/// Remembering loss on the patches as stored in the concepts.
pub fn remember_loss(model: &ProtoPNet, valid: &[Vec<Concept>]) -> Result<f64> {
    prototype_only(model, |t, p| {
        let v = concept_vars(t, model, None, valid, false)?;
        remember_term(t, model, p, &v)
    })
}

pub fn div_loss(model: &ProtoPNet) -> Result<f64> {
    prototype_only(model, |t, p| div_term(t, model, p))
}

/// Everything the composite objective needs besides the model and batch.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub weights: LossWeights,
    pub robust_k: usize,
    pub forbidden: &'a [Vec<Concept>],
    pub valid: &'a [Vec<Concept>],
    /// Apply the IAIA-BL penalty to examples carrying a mask.
    pub iaia: bool,
}

/// Value of the full objective on a batch, term by term. The IAIA-BL term
/// averages over the masked examples of the batch.
pub fn composite_loss(
    model: &ProtoPNet,
    batch: &[&ImageExample],
    obj: &Objective<'_>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return shape_err("empty batch");
    }
    let mut b = LossBreakdown::default();
    let mut masked = 0usize;
    for ex in batch {
        let use_mask = obj.iaia && ex.mask.is_some();
        let (ce, cl, sep, ia) = example_terms(model, ex, obj.robust_k, use_mask)?;
        b.cross_entropy += ce;
        b.cluster += cl;
        b.separation += sep;
        if use_mask {
            b.iaia += ia;
            masked += 1;
        }
    }
    let n = batch.len() as f64;
    b.cross_entropy /= n;
    b.cluster /= n;
    b.separation /= n;
    if masked > 0 {
        b.iaia /= masked as f64;
    }
    b.forget = forget_loss(model, obj.forbidden)?;
    b.remember = remember_loss(model, obj.valid)?;
    b.div = div_loss(model)?;
    b.total = b.weighted_total(&obj.weights);
    Ok(b)
}

/// How prototypes may be matched in [`param_distance`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Permute only within each class's prototype block.
    #[default]
    WithinClass,
    /// Any permutation of all prototypes.
    Global,
}

/// `||phi - phi'||^2 + min_pi sum_j ||p_j - p'_pi(j)||^2 + ||w - w'||^2`.
pub fn param_distance(a: &ProtoPNet, b: &ProtoPNet, matching: Matching) -> Result<f64> {
    let (ba, bb) = (a.blocks(), b.blocks());
    if ba.len() != bb.len()
        || ba
            .iter()
            .zip(&bb)
            .any(|((_, x), (_, y))| x.shape() != y.shape())
    {
        return shape_err("param_distance: models differ in shape");
    }
    if matching == Matching::WithinClass && a.prototype_class != b.prototype_class {
        return shape_err("param_distance: class maps differ");
    }
    let sq = |x: &Tensor, y: &Tensor| crate::model::sq_dist(x.data(), y.data());
    let embedding: f64 = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| sq(&x.kernel, &y.kernel) + sq(&x.bias, &y.bias))
        .sum();
    let groups: Vec<Vec<usize>> = match matching {
        Matching::Global => vec![(0..a.num_prototypes()).collect()],
        Matching::WithinClass => (0..a.num_classes()).map(|y| a.prototypes_of(y)).collect(),
    };
    let mut protos = 0.0;
    for g in groups {
        let n = g.len();
        let mut cost = Vec::with_capacity(n * n);
        for &i in &g {
            for &j in &g {
                cost.push(crate::model::sq_dist(a.prototype(i), b.prototype(j)));
            }
        }
        protos += crate::assignment::min_cost_assignment(&cost, n).0;
    }
    Ok(embedding + protos + sq(&a.weights, &b.weights))
}

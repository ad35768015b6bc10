//! F1 scores, confusion matrices and activation precision.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageExample;
use crate::error::{shape_err, Error, Result};
use crate::explain::{attribution_from_record, percentile};
use crate::model::ProtoPNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    Micro,
    Macro,
}

/// `m[true][predicted]`.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    v: usize,
) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return shape_err("predictions and labels differ in length");
    }
    let mut m = vec![vec![0; v]; v];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= v || y >= v {
            return Err(Error::Index(format!("class id out of range for v = {v}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn class_scores(confusion: &[Vec<usize>]) -> Vec<ClassScores> {
    let v = confusion.len();
    (0..v)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..v).map(|r| confusion[r][c]).sum();
            ClassScores {
                precision: ratio(tp, predicted),
                recall: ratio(tp, support),
                f1: ratio(2 * tp, support + predicted),
                support,
            }
        })
        .collect()
}

/// Micro F1 equals accuracy for single-label data; macro F1 is the
/// unweighted mean over all `v` classes.
pub fn f1(predictions: &[usize], labels: &[usize], v: usize, mode: F1Mode) -> Result<f64> {
    let m = confusion_matrix(predictions, labels, v)?;
    Ok(match mode {
        F1Mode::Micro => {
            let tp: usize = (0..v).map(|c| m[c][c]).sum();
            ratio(tp, predictions.len())
        }
        F1Mode::Macro => {
            let s = class_scores(&m);
            s.iter().map(|c| c.f1).sum::<f64>() / v.max(1) as f64
        }
    })
}

pub fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let v = confusion.len();
    let mut out = String::from("true\\predicted");
    for c in 0..v {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (r, row) in confusion.iter().enumerate() {
        out.push_str(&r.to_string());
        for n in row {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApVariant {
    /// Fraction of thresholded pixels inside the mask.
    Original,
    /// Same, with each thresholded pixel weighted by its attribution.
    Modified,
}

pub const DEFAULT_TAU: f64 = 5.0;

/// Activation precision of one map against one mask. `None` if the
/// thresholded region carries no weight.
pub fn activation_precision_one(
    map: &[f64],
    mask: &[u8],
    tau: f64,
    variant: ApVariant,
) -> Result<Option<f64>> {
    if !(tau > 0.0 && tau <= 100.0) {
        return Err(Error::Config(format!("tau = {tau} outside (0, 100]")));
    }
    if map.len() != mask.len() || map.is_empty() {
        return shape_err(format!("map of {} vs mask of {}", map.len(), mask.len()));
    }
    let t = percentile(map, 100.0 - tau);
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &m) in map.iter().zip(mask) {
        if a >= t {
            let w = match variant {
                ApVariant::Original => 1.0,
                ApVariant::Modified => a,
            };
            den += w;
            if m != 0 {
                num += w;
            }
        }
    }
    Ok(if den > 0.0 { Some(num / den) } else { None })
}

/// Mean activation precision over examples; examples whose thresholded
/// region is empty are skipped with a warning. `None` if all are skipped.
pub fn activation_precision(
    maps: &[&[f64]],
    masks: &[&[u8]],
    tau: f64,
    variant: ApVariant,
) -> Result<Option<f64>> {
    if maps.len() != masks.len() {
        return shape_err("one mask per map required");
    }
    let mut vals = Vec::with_capacity(maps.len());
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        match activation_precision_one(m, k, tau, variant)? {
            Some(v) => vals.push(v),
            None => log::warn!("activation precision: example {i} has an empty thresholded region"),
        }
    }
    Ok(if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Modified AP (tau = 5) of each prototype over the masked examples of
    /// its class; `None` when no such example exists.
    pub prototype_ap: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
}

/// F1 and per-prototype AP of `model` on `examples`.
pub fn evaluate(model: &ProtoPNet, examples: &[ImageExample]) -> Result<EvalResult> {
    let k = model.num_prototypes();
    let v = model.num_classes();
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut ap_sum = vec![(0.0, 0usize); k];
    for ex in examples {
        let out = model.forward(&ex.pixels)?;
        preds.push(out.predicted());
        labels.push(ex.label);
        let Some(mask) = ex.mask.as_deref() else {
            continue;
        };
        for j in model.prototypes_of(ex.label) {
            let map = attribution_from_record(&model.config, &out.record, j, &ex.id)?;
            if let Some(ap) =
                activation_precision_one(&map.values, mask, DEFAULT_TAU, ApVariant::Modified)?
            {
                ap_sum[j].0 += ap;
                ap_sum[j].1 += 1;
            }
        }
    }
    let confusion = confusion_matrix(&preds, &labels, v)?;
    let per_class = class_scores(&confusion);
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / v as f64;
    let micro_f1 = f1(&preds, &labels, v, F1Mode::Micro)?;
    let prototype_ap: Vec<Option<f64>> = ap_sum
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    let known: Vec<f64> = prototype_ap.iter().flatten().copied().collect();
    let mean_ap = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
    Ok(EvalResult {
        per_class,
        macro_f1,
        micro_f1,
        confusion,
        prototype_ap,
        mean_ap,
    })
}

/// Macro F1 only (no attribution work).
pub fn macro_f1(model: &ProtoPNet, examples: &[ImageExample]) -> Result<f64> {
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        preds.push(model.predict(ex)?);
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    f1(&preds, &labels, model.num_classes(), F1Mode::Macro)
}

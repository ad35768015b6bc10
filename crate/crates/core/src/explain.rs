//! Explanations: relevance scores, upscaled attribution maps, cut-outs,
//! display patches with contours and overlays, and input gradients.

use std::collections::VecDeque;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{ImageExample, Rect};
use crate::error::{Error, Result};
use crate::model::{ActivationRecord, ModelConfig, ProtoPNet, Trainable};
use crate::tensor::{Tape, Tensor};

/// Matches the top-5% threshold used for cut-outs, display and AP.
pub const TOP_PERCENT: f64 = 5.0;
/// Fraction of thresholded attribution mass a cut-out must enclose.
pub const CUTOUT_MASS: f64 = 0.95;
/// Minimum display-patch area at 224x224 resolution.
pub const MIN_PATCH_AREA: usize = 200;

/// `(prototype, w^y_j * a_j(x))`, sorted by decreasing score (index breaks ties).
pub fn relevance(model: &ProtoPNet, x: &Tensor, class: usize) -> Result<Vec<(usize, f64)>> {
    if class >= model.num_classes() {
        return Err(Error::Index(format!(
            "class {class} of {}",
            model.num_classes()
        )));
    }
    let out = model.forward(x)?;
    let w = model.weights.row(class);
    let mut scores: Vec<(usize, f64)> = out
        .activations
        .iter()
        .zip(w)
        .map(|(a, w)| w * a)
        .enumerate()
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub prototype: usize,
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width` values.
    pub values: Vec<f64>,
}

impl AttributionMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Bilinear upscale of a `gh x gw` grid to `h x w` with align-corners
/// semantics: grid node `(i, j)` lands on pixel `(i (h-1)/(gh-1), j (w-1)/(gw-1))`.
pub fn upscale_bilinear(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(grid.len(), gh * gw, "grid size");
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let gy = align(r, h, gh);
        for c in 0..w {
            let gx = align(c, w, gw);
            out.push(sample_grid(grid, gh, gw, gy, gx));
        }
    }
    out
}

/// Position of output index `i` (of `n`) on a grid axis of `g` nodes.
fn align(i: usize, n: usize, g: usize) -> f64 {
    if n <= 1 || g <= 1 {
        0.0
    } else {
        i as f64 * (g - 1) as f64 / (n - 1) as f64
    }
}

/// Bilinear interpolation of a grid at fractional node coordinates.
pub fn sample_grid(grid: &[f64], gh: usize, gw: usize, gy: f64, gx: f64) -> f64 {
    let y0 = (gy.floor() as usize).min(gh - 1);
    let x0 = (gx.floor() as usize).min(gw - 1);
    let y1 = (y0 + 1).min(gh - 1);
    let x1 = (x0 + 1).min(gw - 1);
    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
    let g = |y: usize, x: usize| grid[y * gw + x];
    let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
    let bottom = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Pixel coordinates `(row, col)` where latent node `(i, j)` lands.
pub fn node_position(config: &ModelConfig, i: usize, j: usize) -> (f64, f64) {
    let [h, w, _] = config.input_shape;
    let (gh, gw) = config.latent_grid();
    let pos = |k: usize, n: usize, g: usize| {
        if g <= 1 {
            0.0
        } else {
            k as f64 * (n - 1) as f64 / (g - 1) as f64
        }
    };
    (pos(i, h, gh), pos(j, w, gw))
}

pub fn attribution_from_record(
    config: &ModelConfig,
    record: &ActivationRecord,
    prototype: usize,
    image_id: &str,
) -> Result<AttributionMap> {
    let row = record
        .patch_activations
        .get(prototype)
        .ok_or_else(|| Error::Index(format!("prototype {prototype}")))?;
    let (gh, gw) = record.grid;
    let [h, w, _] = config.input_shape;
    Ok(AttributionMap {
        prototype,
        image_id: image_id.to_string(),
        height: h,
        width: w,
        values: upscale_bilinear(row, gh, gw, h, w),
    })
}

pub fn attribution(
    model: &ProtoPNet,
    prototype: usize,
    ex: &ImageExample,
) -> Result<AttributionMap> {
    let out = model.forward(&ex.pixels)?;
    attribution_from_record(&model.config, &out.record, prototype, &ex.id)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// `T(attr)`: 1 where the value is at least the `(100 - top_percent)`
/// percentile (ties included).
pub fn threshold_mask(values: &[f64], top_percent: f64) -> Vec<bool> {
    let t = percentile(values, 100.0 - top_percent);
    values.iter().map(|&v| v >= t).collect()
}

/// 4-connected components of a binary raster, in raster order of their
/// first pixel. Each component lists its flat pixel indices in BFS order.
pub fn components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

fn bounding_box(pixels: &[usize], width: usize) -> Rect {
    let rows = pixels.iter().map(|p| p / width);
    let cols = pixels.iter().map(|p| p % width);
    let (r0, r1) = (rows.clone().min().unwrap_or(0), rows.max().unwrap_or(0));
    let (c0, c1) = (cols.clone().min().unwrap_or(0), cols.max().unwrap_or(0));
    Rect::new(c0, r0, c1 - c0 + 1, r1 - r0 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Class(usize),
    All,
}

/// Image region to forget or remember, stored as the latent patches it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutOut {
    pub image_id: String,
    pub prototype: usize,
    pub boxes: Vec<Rect>,
    /// Latent cells `(row, col)` whose patches were taken.
    pub cells: Vec<(usize, usize)>,
    /// `[cells.len(), d']`
    #[serde(serialize_with = "ser_tensor_b64", deserialize_with = "de_tensor_b64")]
    pub patches: Tensor,
    pub scope: Scope,
    /// Fraction of thresholded attribution mass inside `boxes`.
    pub enclosed_mass: f64,
}

#[derive(Serialize, Deserialize)]
struct EncodedTensor {
    shape: Vec<usize>,
    /// Little-endian `f64` values, base64.
    data: String,
}

fn ser_tensor_b64<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedTensor {
        shape: t.shape().to_vec(),
        data: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
    .serialize(s)
}

fn de_tensor_b64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
    use serde::de::Error as _;
    let enc = EncodedTensor::deserialize(d)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(enc.data)
        .map_err(D::Error::custom)?;
    if bytes.len() % 8 != 0 {
        return Err(D::Error::custom("tensor byte length not a multiple of 8"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(enc.shape, data).map_err(D::Error::custom)
}

/// Boxes around the thresholded attribution: components of `T(attr)` are
/// taken by decreasing mass until at least 95% of the thresholded mass
/// `sum T(attr) * attr` is enclosed. Returns the boxes and the enclosed fraction.
pub fn cutout_boxes(map: &AttributionMap) -> Result<(Vec<Rect>, f64)> {
    let (h, w) = (map.height, map.width);
    let total_raw: f64 = map.values.iter().sum();
    if !(total_raw > 0.0) {
        return Err(Error::Explain(format!(
            "attribution of prototype {} on {} has no mass",
            map.prototype, map.image_id
        )));
    }
    let on = threshold_mask(&map.values, TOP_PERCENT);
    let total: f64 = map
        .values
        .iter()
        .zip(&on)
        .filter(|(_, &o)| o)
        .map(|(v, _)| v)
        .sum();
    let mut comps: Vec<(f64, Vec<usize>)> = components(&on, h, w)
        .into_iter()
        .map(|c| (c.iter().map(|&p| map.values[p]).sum(), c))
        .collect();
    // Stable: equal masses keep raster order.
    comps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut boxes: Vec<Rect> = Vec::new();
    let mut enclosed = 0.0;
    for (_, comp) in &comps {
        boxes.push(bounding_box(comp, w));
        enclosed = enclosed_mass(map, &on, &boxes);
        if enclosed >= CUTOUT_MASS * total {
            break;
        }
    }
    Ok((boxes, enclosed / total))
}

/// Thresholded mass inside the union of `boxes`.
fn enclosed_mass(map: &AttributionMap, on: &[bool], boxes: &[Rect]) -> f64 {
    let mut s = 0.0;
    for r in 0..map.height {
        for c in 0..map.width {
            let i = r * map.width + c;
            if on[i] && boxes.iter().any(|b| b.contains(r, c)) {
                s += map.values[i];
            }
        }
    }
    s
}

/// Latent cells assigned to `boxes`: those whose receptive field
/// intersects some box, in row-major order.
pub fn cells_in_boxes(config: &ModelConfig, boxes: &[Rect]) -> Vec<(usize, usize)> {
    let (gh, gw) = config.latent_grid();
    let (rf, jump) = config.receptive_field();
    let mut cells = Vec::new();
    for i in 0..gh {
        for j in 0..gw {
            let field = Rect::new(j * jump, i * jump, rf, rf);
            if boxes.iter().any(|b| b.intersects(&field)) {
                cells.push((i, j));
            }
        }
    }
    cells
}

/// Builds the cut-out of `map` and embeds it with the latent volume `latent`
/// of the same image.
pub fn extract_cutout(
    config: &ModelConfig,
    map: &AttributionMap,
    latent: &Tensor,
    scope: Scope,
) -> Result<CutOut> {
    let (boxes, enclosed) = cutout_boxes(map)?;
    let cells = cells_in_boxes(config, &boxes);
    let s = latent.shape();
    if s.len() != 3 || (s[0], s[1]) != config.latent_grid() {
        return Err(Error::Shape(format!("latent shape {s:?}")));
    }
    let d = s[2];
    let mut data = Vec::with_capacity(cells.len() * d);
    for &(i, j) in &cells {
        let o = (i * s[1] + j) * d;
        data.extend_from_slice(&latent.data()[o..o + d]);
    }
    Ok(CutOut {
        image_id: map.image_id.clone(),
        prototype: map.prototype,
        boxes,
        patches: Tensor::new(vec![cells.len(), d], data)?,
        cells,
        scope,
        enclosed_mass: enclosed,
    })
}

/// The `a` images with the highest image-level activation of `prototype`,
/// ties broken by ascending id.
pub fn top_activated<'a>(
    model: &ProtoPNet,
    examples: impl IntoIterator<Item = &'a ImageExample>,
    prototype: usize,
    a: usize,
) -> Result<Vec<(&'a ImageExample, f64)>> {
    let mut scored = Vec::new();
    for ex in examples {
        let z = model.embed(&ex.pixels)?;
        scored.push((ex, model.act_image(prototype, &z)?.0));
    }
    Ok(rank_top(scored, a))
}

/// Sort by decreasing score, ids ascending on ties, keep the first `a`.
pub fn rank_top<T: HasId>(mut scored: Vec<(T, f64)>, a: usize) -> Vec<(T, f64)> {
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.id().cmp(y.0.id())));
    scored.truncate(a);
    scored
}

pub trait HasId {
    fn id(&self) -> &str;
}

impl HasId for &ImageExample {
    fn id(&self) -> &str {
        &self.id
    }
}

impl HasId for String {
    fn id(&self) -> &str {
        self
    }
}

/// A highlighted region shown to the annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplayPatch {
    pub image_id: String,
    pub prototype: usize,
    /// Outer boundary pixels `(row, col)` in tracing order.
    pub contour: Vec<(usize, usize)>,
    pub area: usize,
    /// Flat pixel indices of the region, ascending.
    pub pixels: Vec<usize>,
    pub bbox: Rect,
}

/// Minimum patch area for an image of `height x width`, scaled from the
/// 224x224 reference so the rule keeps the same relative size.
pub fn scaled_min_area(height: usize, width: usize) -> usize {
    (MIN_PATCH_AREA * height * width).div_ceil(224 * 224).max(1)
}

/// Components of the top-5% attribution with at least `min_area` pixels.
pub fn display_patches(map: &AttributionMap, min_area: usize) -> Vec<DisplayPatch> {
    let on = threshold_mask(&map.values, TOP_PERCENT);
    components(&on, map.height, map.width)
        .into_iter()
        .filter(|c| c.len() >= min_area)
        .map(|mut c| {
            c.sort_unstable();
            DisplayPatch {
                image_id: map.image_id.clone(),
                prototype: map.prototype,
                contour: trace_contour(&c, map.height, map.width),
                area: c.len(),
                bbox: bounding_box(&c, map.width),
                pixels: c,
            }
        })
        .collect()
}

/// Moore-neighbour tracing of the outer boundary of one 4-connected region
/// (pixels sorted ascending), starting from its first raster pixel.
pub fn trace_contour(pixels: &[usize], height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut inside = vec![false; height * width];
    for &p in pixels {
        inside[p] = true;
    }
    let is_in = |r: i64, c: i64| {
        r >= 0
            && c >= 0
            && (r as usize) < height
            && (c as usize) < width
            && inside[r as usize * width + c as usize]
    };
    // Clockwise from west.
    const DIRS: [(i64, i64); 8] = [
        (0, -1),
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
        (1, 0),
        (1, -1),
    ];
    let Some(&first) = pixels.first() else {
        return Vec::new();
    };
    let start = ((first / width) as i64, (first % width) as i64);
    let mut contour = vec![(start.0 as usize, start.1 as usize)];
    let mut cur = start;
    // Entered the start pixel from the west (raster scan order).
    let mut back = 0usize;
    let limit = 4 * pixels.len() + 8;
    let mut first_move: Option<((i64, i64), usize)> = None;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let n = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
            if is_in(n.0, n.1) {
                found = Some((n, d));
                break;
            }
        }
        let Some((next, d)) = found else { break };
        if let Some(fm) = first_move {
            if cur == start && (next, d) == fm {
                break;
            }
        } else {
            first_move = Some((next, d));
        }
        // New backtrack: the background neighbour checked just before `next`.
        let prev = DIRS[(d + 7) % 8];
        let rel = (cur.0 + prev.0 - next.0, cur.1 + prev.1 - next.1);
        back = DIRS
            .iter()
            .position(|&v| v == rel)
            .expect("adjacent neighbour");
        cur = next;
        if cur == start {
            continue;
        }
        contour.push((cur.0 as usize, cur.1 as usize));
    }
    contour
}

fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |x: f64| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
    [
        (f(3.0) * 255.0).round() as u8,
        (f(2.0) * 255.0).round() as u8,
        (f(1.0) * 255.0).round() as u8,
    ]
}

/// Image blended half-and-half with the min-max normalised attribution in a
/// jet colormap; display-patch boundaries drawn in white.
pub fn overlay(map: &AttributionMap, ex: &ImageExample, patches: &[DisplayPatch]) -> RgbImage {
    let base = crate::dataset::to_rgb_image(ex);
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(map.width as u32, map.height as u32);
    for r in 0..map.height {
        for c in 0..map.width {
            let heat = jet((map.at(r, c) - lo) / span);
            let px = base.get_pixel(c as u32, r as u32).0;
            let mut out = [0u8; 3];
            for k in 0..3 {
                out[k] = ((f64::from(px[k]) + f64::from(heat[k])) / 2.0).round() as u8;
            }
            img.put_pixel(c as u32, r as u32, image::Rgb(out));
        }
    }
    for p in patches {
        for &(r, c) in &p.contour {
            img.put_pixel(c as u32, r as u32, image::Rgb([255, 255, 255]));
        }
    }
    img
}

/// `d p(y | x) / d x`, shaped like the input.
pub fn input_gradient(model: &ProtoPNet, x: &Tensor, label: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, Trainable::NONE);
    let xv = tape.param(x.clone());
    let fwd = model.forward_on(&mut tape, &vars, xv)?;
    let ce = tape.softmax_cross_entropy(fwd.logits, label)?;
    let p = (-tape.value(ce).item()).exp();
    tape.backward(ce)?;
    let g = tape.grad_or_zeros(xv);
    let data = g.data().iter().map(|v| -p * v).collect();
    Tensor::new(g.shape().to_vec(), data)
}

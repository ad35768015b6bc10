//! Synthetic confounded classification task.
//!
//! Each class owns a procedural glyph (shape plus a muted colour family)
//! drawn at a random position over a noisy background. Training images of
//! the confounded classes additionally carry a saturated colour square of a
//! class-specific colour, placed away from the glyph. Test images never
//! contain a square. Background and glyph channels stay strictly inside
//! `(0, 1)`, so a confounder colour (channels in `{0, 1}`) cannot occur by
//! accident.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageExample, Rect};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: Vec<usize>,
    pub test_per_class: Vec<usize>,
    pub confounded_classes: Vec<usize>,
    /// One RGB colour per entry of `confounded_classes`, channels in {0, 255}.
    pub confounder_colors: Vec<[u8; 3]>,
    pub square_size: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            train_per_class: vec![40; 5],
            test_per_class: vec![20; 5],
            confounded_classes: vec![0, 1, 2],
            confounder_colors: vec![[255, 0, 255], [0, 255, 255], [255, 255, 0]],
            square_size: 6,
            width: 32,
            height: 32,
            channels: 3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The same task without confounders.
    pub fn clean(&self) -> Self {
        Self {
            confounded_classes: vec![],
            confounder_colors: vec![],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > GLYPHS.len() {
            return bad(format!("num_classes must be in 1..={}", GLYPHS.len()));
        }
        if self.train_per_class.len() != self.num_classes
            || self.test_per_class.len() != self.num_classes
        {
            return bad("per-class counts must have one entry per class".into());
        }
        if self.channels != 3 && self.channels != 1 {
            return bad("channels must be 1 or 3".into());
        }
        if self.confounded_classes.len() != self.confounder_colors.len() {
            return bad("one confounder colour per confounded class".into());
        }
        if let Some(&c) = self
            .confounded_classes
            .iter()
            .find(|&&c| c >= self.num_classes)
        {
            return bad(format!("confounded class {c} out of range"));
        }
        for (i, a) in self.confounder_colors.iter().enumerate() {
            if a.iter().any(|&ch| ch != 0 && ch != 255) {
                return bad(format!(
                    "confounder colour {a:?} must use saturated channels"
                ));
            }
            if self.confounder_colors[..i].contains(a) {
                return bad(format!("confounder colour {a:?} repeated"));
            }
        }
        if self.square_size == 0 || self.square_size > self.width || self.square_size > self.height
        {
            return bad("square does not fit inside the image".into());
        }
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16x16".into());
        }
        Ok(())
    }

    pub fn confounder_color(&self, class: usize) -> Option<[u8; 3]> {
        self.confounded_classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.confounder_colors[i])
    }
}

#[derive(Clone, Copy, Debug)]
enum Glyph {
    Disk,
    Plus,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bars,
    Frame,
}

const GLYPHS: [Glyph; 8] = [
    Glyph::Disk,
    Glyph::Plus,
    Glyph::Triangle,
    Glyph::Ring,
    Glyph::Cross,
    Glyph::Diamond,
    Glyph::Bars,
    Glyph::Frame,
];

/// Base colour per class; glyphs jitter around it.
const GLYPH_COLORS: [[f64; 3]; 8] = [
    [0.78, 0.38, 0.32],
    [0.34, 0.66, 0.36],
    [0.34, 0.42, 0.78],
    [0.74, 0.64, 0.28],
    [0.60, 0.36, 0.70],
    [0.30, 0.66, 0.68],
    [0.80, 0.52, 0.22],
    [0.45, 0.45, 0.45],
];

impl Glyph {
    /// Membership test in normalised coordinates `u, v` in `[-1, 1]`.
    fn covers(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Glyph::Disk => r2 <= 1.0,
            Glyph::Plus => u.abs() <= 0.34 || v.abs() <= 0.34,
            Glyph::Triangle => v >= -0.9 && u.abs() <= (v + 0.9) * 0.55,
            Glyph::Ring => (0.42..=1.0).contains(&r2),
            Glyph::Cross => (u.abs() - v.abs()).abs() <= 0.36,
            Glyph::Diamond => u.abs() + v.abs() <= 1.0,
            Glyph::Bars => (v.abs() - 0.6).abs() <= 0.3,
            Glyph::Frame => u.abs().max(v.abs()) >= 0.62,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
    mask: Vec<u8>,
}

impl Canvas {
    fn background(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let base: Vec<f64> = (0..c).map(|_| rng.gen_range(0.32..0.62)).collect();
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            for b in &base {
                data.push(quantize((b + rng.gen_range(-0.07..0.07)).clamp(0.04, 0.96)));
            }
        }
        Self {
            h,
            w,
            c,
            data,
            mask: vec![0; h * w],
        }
    }

    fn set(&mut self, row: usize, col: usize, rgb: &[f64]) {
        let o = (row * self.w + col) * self.c;
        if self.c == 1 {
            self.data[o] = quantize(rgb.iter().sum::<f64>() / rgb.len() as f64);
        } else {
            for (k, v) in rgb.iter().enumerate() {
                self.data[o + k] = quantize(*v);
            }
        }
    }

    /// Draws `glyph` inside `bbox`, marking its pixels in the mask.
    fn draw_glyph(&mut self, glyph: Glyph, bbox: Rect, color: [f64; 3], rng: &mut ChaCha8Rng) {
        let (cx, cy) = (
            bbox.x as f64 + bbox.width as f64 / 2.0,
            bbox.y as f64 + bbox.height as f64 / 2.0,
        );
        let half = bbox.width as f64 / 2.0;
        for row in bbox.y..bbox.bottom() {
            for col in bbox.x..bbox.right() {
                let u = (col as f64 + 0.5 - cx) / half;
                let v = (row as f64 + 0.5 - cy) / half;
                if glyph.covers(u, v) {
                    let px: Vec<f64> = color
                        .iter()
                        .map(|ch| (ch + rng.gen_range(-0.04..0.04)).clamp(0.04, 0.96))
                        .collect();
                    self.set(row, col, &px);
                    self.mask[row * self.w + col] = 1;
                }
            }
        }
    }

    fn fill(&mut self, r: Rect, rgb: [u8; 3]) {
        let px: Vec<f64> = rgb.iter().map(|&b| b as f64 / 255.0).collect();
        for row in r.y..r.bottom() {
            for col in r.x..r.right() {
                let o = (row * self.w + col) * self.c;
                if self.c == 1 {
                    self.data[o] = px.iter().sum::<f64>() / 3.0;
                } else {
                    self.data[o..o + 3].copy_from_slice(&px);
                }
            }
        }
    }

    fn into_example(
        self,
        id: String,
        label: usize,
        confounder: Option<Rect>,
    ) -> Result<ImageExample> {
        Ok(ImageExample {
            id,
            pixels: Tensor::new(vec![self.h, self.w, self.c], self.data)?,
            label,
            mask: Some(self.mask),
            confounder,
        })
    }
}

fn draw_example(
    spec: &DatasetSpec,
    id: String,
    label: usize,
    square: Option<[u8; 3]>,
    rng: &mut ChaCha8Rng,
) -> Result<ImageExample> {
    let (h, w) = (spec.height, spec.width);
    let mut canvas = Canvas::background(h, w, spec.channels, rng);
    let max_size = (w.min(h) * 7 / 16).max(6);
    let size = rng.gen_range(max_size - 4..=max_size);
    let bbox = Rect::new(
        rng.gen_range(0..=w - size),
        rng.gen_range(0..=h - size),
        size,
        size,
    );
    let base = GLYPH_COLORS[label];
    let color = base.map(|c| c + rng.gen_range(-0.06..0.06));
    canvas.draw_glyph(GLYPHS[label], bbox, color, rng);

    let mut placed = None;
    if let Some(rgb) = square {
        let s = spec.square_size;
        for _ in 0..PLACEMENT_RETRIES {
            let r = Rect::new(rng.gen_range(0..=w - s), rng.gen_range(0..=h - s), s, s);
            let overlaps = (r.y..r.bottom())
                .any(|row| (r.x..r.right()).any(|col| canvas.mask[row * w + col] == 1));
            if !overlaps && !r.intersects(&bbox) {
                placed = Some(r);
                break;
            }
        }
        let r = placed.ok_or_else(|| {
            Error::Generation(format!(
                "{id}: no room for a {s}x{s} square after {PLACEMENT_RETRIES} tries"
            ))
        })?;
        canvas.fill(r, rgb);
    }
    canvas.into_example(id, label, placed)
}

/// Pure function of `spec`: the same spec yields identical bytes.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.num_classes {
        let square = spec.confounder_color(class);
        for i in 0..spec.train_per_class[class] {
            train.push(draw_example(
                spec,
                format!("train-c{class}-{i:04}"),
                class,
                square,
                &mut rng,
            )?);
        }
        for i in 0..spec.test_per_class[class] {
            test.push(draw_example(
                spec,
                format!("test-c{class}-{i:04}"),
                class,
                None,
                &mut rng,
            )?);
        }
    }
    let visualization = train.clone();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
        visualization,
    })
}

/// Moves every object onto the background of an image of another class.
/// Pixels of the donor's own object that the pasted object does not cover
/// are replaced with uniform noise.
pub fn context_swap(examples: &[ImageExample], seed: u64) -> Result<Vec<ImageExample>> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Generation("empty input".into()))?;
    if examples.iter().all(|e| e.label == first.label) {
        return Err(Error::Generation(
            "context swap needs at least two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|ex| {
            let mask = ex
                .mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: context swap needs a mask", ex.id)))?;
            let donors: Vec<&ImageExample> =
                examples.iter().filter(|d| d.label != ex.label).collect();
            let donor = donors[rng.gen_range(0..donors.len())];
            if donor.pixels.shape() != ex.pixels.shape() {
                return Err(Error::Shape(format!(
                    "{} vs {}: image shapes differ",
                    ex.id, donor.id
                )));
            }
            let c = ex.channels();
            let mut data = donor.pixels.data().to_vec();
            if let Some(dmask) = &donor.mask {
                for (p, &m) in dmask.iter().enumerate() {
                    if m == 1 && mask[p] == 0 {
                        for v in &mut data[p * c..(p + 1) * c] {
                            *v = quantize(rng.gen_range(0.0..1.0));
                        }
                    }
                }
            }
            for (p, &m) in mask.iter().enumerate() {
                if m == 1 {
                    data[p * c..(p + 1) * c].copy_from_slice(&ex.pixels.data()[p * c..(p + 1) * c]);
                }
            }
            Ok(ImageExample {
                id: format!("{}-swap", ex.id),
                pixels: Tensor::new(ex.pixels.shape().to_vec(), data)?,
                label: ex.label,
                mask: Some(mask.clone()),
                confounder: None,
            })
        })
        .collect()
}

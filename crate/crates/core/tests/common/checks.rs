//! Hand-worked activation precision, projection and cut-out checks.

use super::{random_example, random_model, random_tensor, rng, sqd};
use protodebug::dataset::{ImageExample, Rect};
use protodebug::explain::{cutout_boxes, upscale_bilinear, AttributionMap};
use protodebug::metrics::{activation_precision_one, ApVariant};
use rand::Rng;

fn ap(map: &[f64], mask: &[u8], tau: f64) -> (Option<f64>, Option<f64>) {
    (
        activation_precision_one(map, mask, tau, ApVariant::Original).unwrap(),
        activation_precision_one(map, mask, tau, ApVariant::Modified).unwrap(),
    )
}

fn mask_of(on: &[usize]) -> Vec<u8> {
    (0..16).map(|i| u8::from(on.contains(&i))).collect()
}

fn map(values: Vec<f64>, h: usize, w: usize) -> AttributionMap {
    AttributionMap {
        prototype: 0,
        image_id: "x".into(),
        height: h,
        width: w,
        values,
    }
}

/// Independent recomputation of the thresholded mass inside the boxes.
fn enclosed_fraction(m: &AttributionMap, boxes: &[Rect]) -> f64 {
    let mut sorted = m.values.clone();
    sorted.sort_by(f64::total_cmp);
    let pos = 0.95 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let t = sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64);
    let (mut inside, mut total) = (0.0, 0.0);
    for r in 0..m.height {
        for c in 0..m.width {
            let v = m.values[r * m.width + c];
            if v >= t {
                total += v;
                let in_box = boxes
                    .iter()
                    .any(|b| r >= b.y && r < b.y + b.height && c >= b.x && c < b.x + b.width);
                if in_box {
                    inside += v;
                }
            }
        }
    }
    inside / total
}

/// 4x4 maps where the thresholded set and both ratios are worked out by hand.
pub fn activation_precision_hand_cases() {
    let ramp: Vec<f64> = (0..16).map(f64::from).collect();
    // tau = 25: the 75th percentile sits at 11.25, so pixels 12..=15 pass.
    assert_eq!(
        ap(&ramp, &mask_of(&[12, 13, 14, 15]), 25.0),
        (Some(1.0), Some(1.0))
    );
    assert_eq!(
        ap(&ramp, &mask_of(&[13, 15]), 25.0),
        (Some(0.5), Some(28.0 / 54.0))
    );
    assert_eq!(
        ap(&ramp, &mask_of(&[0, 1, 2]), 25.0),
        (Some(0.0), Some(0.0))
    );

    // tau = 5 on a map with a single peak: threshold 1.25, only pixel 0 passes.
    let mut peak = vec![0.0; 16];
    peak[0] = 2.0;
    for i in [5, 10, 15] {
        peak[i] = 1.0;
    }
    assert_eq!(ap(&peak, &mask_of(&[5]), 5.0), (Some(0.0), Some(0.0)));
    assert_eq!(ap(&peak, &mask_of(&[0, 5]), 5.0), (Some(1.0), Some(1.0)));

    // Ties at the threshold are all kept: eight 3s pass at tau = 25.
    let plateau: Vec<f64> = (0..16).map(|i| if i < 8 { 3.0 } else { 1.0 }).collect();
    assert_eq!(
        ap(&plateau, &mask_of(&[0, 1, 8]), 25.0),
        (Some(0.25), Some(0.25))
    );

    // tau = 100 keeps everything; the modified variant weights by value.
    let ones_up: Vec<f64> = (1..=16).map(f64::from).collect();
    assert_eq!(
        ap(&ones_up, &mask_of(&[0, 1, 4, 5]), 100.0),
        (Some(0.25), Some(14.0 / 136.0))
    );

    // An all-zero map: every pixel passes but carries no weight.
    assert_eq!(
        ap(&[0.0; 16], &mask_of(&[0, 1, 2, 3]), 5.0),
        (Some(0.25), None)
    );

    assert!(activation_precision_one(&ramp, &mask_of(&[]), 0.0, ApVariant::Original).is_err());
    assert!(activation_precision_one(&ramp, &[0; 15], 5.0, ApVariant::Original).is_err());
}

pub fn projection_moves_each_prototype_onto_its_nearest_own_class_patch() {
    let mut r = rng(8);
    for _ in 0..20 {
        let mut m = random_model(&mut r);
        let train: Vec<ImageExample> = (0..12)
            .map(|i| random_example(&mut r, &m.config, i))
            .collect();
        if (0..m.num_classes()).any(|y| !train.iter().any(|e| e.label == y)) {
            continue;
        }
        let before = m.clone();
        let sources = m.project(&train).unwrap();
        let d = m.config.latent_depth;
        for (j, (id, idx)) in sources.iter().enumerate() {
            let src = train.iter().find(|e| &e.id == id).unwrap();
            assert_eq!(src.label, m.prototype_class[j]);
            let z = m.embed(&src.pixels).unwrap();
            let patch = &z.data()[idx * d..(idx + 1) * d];
            let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(m.prototype(j)), bits(patch));
            let chosen = sqd(before.prototype(j), patch);
            for ex in train.iter().filter(|e| e.label == m.prototype_class[j]) {
                let z = m.embed(&ex.pixels).unwrap();
                for q in z.data().chunks(d) {
                    assert!(sqd(before.prototype(j), q) >= chosen);
                }
            }
        }
        // Embedding and weights are untouched.
        assert_eq!(m.layers, before.layers);
        assert_eq!(m.weights, before.weights);
    }
}

pub fn cutout_boxes_enclose_most_of_the_thresholded_mass() {
    let mut r = rng(9);
    for _ in 0..100 {
        let (gh, gw) = (r.gen_range(2..8), r.gen_range(2..8));
        let (h, w) = (r.gen_range(8..40), r.gen_range(8..40));
        let grid = random_tensor(&mut r, &[gh * gw], 0.0, 5.0);
        let mut values = upscale_bilinear(grid.data(), gh, gw, h, w);
        // Sprinkle isolated spikes so there are several components.
        for _ in 0..r.gen_range(0..6) {
            let i = r.gen_range(0..h * w);
            values[i] += r.gen_range(0.0..10.0);
        }
        let m = map(values, h, w);
        let (boxes, frac) = cutout_boxes(&m).unwrap();
        assert!(!boxes.is_empty());
        let again = enclosed_fraction(&m, &boxes);
        assert!(again >= 0.95, "enclosed {again}");
        assert!((again - frac).abs() < 1e-12);
    }
    assert!(cutout_boxes(&map(vec![0.0; 16], 4, 4)).is_err());
}

//! Every loss term against a direct loop implementation built on
//! `common::naive_patches`, which shares no code with the tape.

use super::{act, naive_patches, random_example, random_model, random_tensor, rng, sqd};
use itertools::Itertools;
use protodebug::dataset::ImageExample;
use protodebug::losses::{
    cluster_loss, composite_loss, div_loss, forget_loss, iaia_loss, param_distance, remember_loss,
    rrr_loss, sep_loss, Concept, LossWeights, Matching, Objective,
};
use protodebug::model::ProtoPNet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 50;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn batch(r: &mut ChaCha8Rng, m: &ProtoPNet) -> Vec<ImageExample> {
    (0..r.gen_range(1..4))
        .map(|i| random_example(r, &m.config, i))
        .collect()
}

fn smallest_mean(mut xs: Vec<f64>, k: usize) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[..k].iter().sum::<f64>() / k as f64
}

/// Squared distances from prototype `j` to every patch.
fn dists(m: &ProtoPNet, j: usize, patches: &[Vec<f64>]) -> Vec<f64> {
    patches.iter().map(|q| sqd(m.prototype(j), q)).collect()
}

fn class_dists(m: &ProtoPNet, ex: &ImageExample, own: bool) -> Vec<f64> {
    let patches = naive_patches(m, &ex.pixels);
    (0..m.num_prototypes())
        .filter(|&j| (m.prototype_class[j] == ex.label) == own)
        .flat_map(|j| dists(m, j, &patches))
        .collect()
}

fn robust_k(r: &mut ChaCha8Rng, m: &ProtoPNet, ex: &[ImageExample]) -> usize {
    let n = naive_patches(m, &ex[0].pixels).len();
    let ppc = m.config.prototypes_per_class;
    r.gen_range(1..=ppc * n)
}

pub fn cluster_and_separation() {
    let mut r = rng(100);
    for _ in 0..INSTANCES {
        let m = random_model(&mut r);
        let b = batch(&mut r, &m);
        let refs: Vec<&ImageExample> = b.iter().collect();
        let k = robust_k(&mut r, &m, &b);
        let cl = b
            .iter()
            .map(|ex| smallest_mean(class_dists(&m, ex, true), k))
            .sum::<f64>()
            / b.len() as f64;
        let sep = b
            .iter()
            .map(|ex| -smallest_mean(class_dists(&m, ex, false), k))
            .sum::<f64>()
            / b.len() as f64;
        assert!(close(cluster_loss(&m, &refs, k).unwrap(), cl));
        assert!(close(sep_loss(&m, &refs, k).unwrap(), sep));
    }
}

/// Receptive field and jump from the layer shapes.
fn rf_jump(m: &ProtoPNet) -> (usize, usize) {
    let (mut rf, mut jump) = (1, 1);
    for l in &m.layers {
        rf += (l.kernel.shape()[1] - 1) * jump;
        jump *= l.stride;
    }
    (rf, jump)
}

fn cell_mask(m: &ProtoPNet, mask: &[u8]) -> Vec<f64> {
    let [h, w, _] = m.config.input_shape;
    let (rf, jump) = rf_jump(m);
    let grid = naive_patches(
        m,
        &random_tensor(&mut rng(0), &m.config.input_shape, 0.0, 1.0),
    )
    .len();
    let side = (grid as f64).sqrt() as usize;
    let mut out = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let pix: Vec<u8> = (r * jump..(r * jump + rf).min(h))
                .cartesian_product(c * jump..(c * jump + rf).min(w))
                .map(|(y, x)| mask[y * w + x])
                .collect();
            out.push(pix.iter().map(|&v| f64::from(v)).sum::<f64>() / pix.len() as f64);
        }
    }
    out
}

pub fn iaia_penalty() {
    let mut r = rng(101);
    for _ in 0..INSTANCES {
        let m = random_model(&mut r);
        let b = batch(&mut r, &m);
        let refs: Vec<&ImageExample> = b.iter().collect();
        let lambda = r.gen_range(0.001..2.0);
        let mut total = 0.0;
        for ex in &b {
            let patches = naive_patches(&m, &ex.pixels);
            let cells = cell_mask(&m, ex.mask.as_deref().unwrap());
            for j in 0..m.num_prototypes() {
                let own = m.prototype_class[j] == ex.label;
                let norm2: f64 = dists(&m, j, &patches)
                    .iter()
                    .zip(&cells)
                    .map(|(&d, &c)| {
                        let a = act(&m, d) * if own { 1.0 - c } else { 1.0 };
                        a * a
                    })
                    .sum();
                total += norm2.sqrt();
            }
        }
        let expected = lambda * total / b.len() as f64;
        assert!(close(iaia_loss(&m, &refs, lambda).unwrap(), expected));
    }
}

fn random_sets(r: &mut ChaCha8Rng, m: &ProtoPNet) -> Vec<Vec<Concept>> {
    let d = m.config.latent_depth;
    (0..m.num_classes())
        .map(|_| {
            (0..r.gen_range(0..4))
                .map(|_| {
                    let rows = r.gen_range(1..5);
                    Concept::fixed(random_tensor(r, &[rows, d], 0.0, 1.0))
                })
                .collect()
        })
        .collect()
}

fn rows(c: &Concept) -> Vec<Vec<f64>> {
    let d = c.patches.shape()[1];
    c.patches.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn forget_oracle(m: &ProtoPNet, sets: &[Vec<Concept>]) -> f64 {
    let mut s = 0.0;
    for (y, cs) in sets.iter().enumerate() {
        if cs.is_empty() {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for j in m.prototypes_of(y) {
            for c in cs {
                for q in rows(c) {
                    best = best.max(act(m, sqd(m.prototype(j), &q)));
                }
            }
        }
        s += best;
    }
    s / m.num_classes() as f64
}

fn remember_oracle(m: &ProtoPNet, sets: &[Vec<Concept>]) -> f64 {
    let mut s = 0.0;
    for (y, cs) in sets.iter().enumerate() {
        if cs.is_empty() {
            continue;
        }
        let mut worst = f64::INFINITY;
        for j in m.prototypes_of(y) {
            for c in cs {
                let a = rows(c)
                    .iter()
                    .map(|q| act(m, sqd(m.prototype(j), q)))
                    .fold(f64::NEG_INFINITY, f64::max);
                worst = worst.min(a);
            }
        }
        s += worst;
    }
    -s / m.num_classes() as f64
}

fn div_oracle(m: &ProtoPNet) -> f64 {
    let mut s = 0.0;
    for j in 0..m.num_prototypes() {
        let others: Vec<usize> = m
            .prototypes_of(m.prototype_class[j])
            .into_iter()
            .filter(|&i| i != j)
            .collect();
        if let Some(d) = others
            .iter()
            .map(|&i| sqd(m.prototype(j), m.prototype(i)))
            .reduce(f64::min)
        {
            s += d;
        }
    }
    s / m.num_prototypes() as f64
}

pub fn forget_remember_and_diversity() {
    let mut r = rng(102);
    for _ in 0..INSTANCES {
        let m = random_model(&mut r);
        let f = random_sets(&mut r, &m);
        let v = random_sets(&mut r, &m);
        assert!(close(forget_loss(&m, &f).unwrap(), forget_oracle(&m, &f)));
        assert!(close(
            remember_loss(&m, &v).unwrap(),
            remember_oracle(&m, &v)
        ));
        assert!(close(div_loss(&m).unwrap(), div_oracle(&m)));
    }
}

pub fn right_for_the_right_reasons_penalty() {
    let mut r = rng(103);
    for _ in 0..INSTANCES {
        let (h, w, c) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..4));
        let n = r.gen_range(1..4);
        let grads: Vec<_> = (0..n)
            .map(|_| random_tensor(&mut r, &[h, w, c], -2.0, 2.0))
            .collect();
        let masks: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..h * w).map(|_| u8::from(r.gen_bool(0.5))).collect())
            .collect();
        let mut expected = 0.0;
        for (g, m) in grads.iter().zip(&masks) {
            for y in 0..h {
                for x in 0..w {
                    if m[y * w + x] == 0 {
                        for k in 0..c {
                            expected += g.data()[(y * w + x) * c + k].powi(2);
                        }
                    }
                }
            }
        }
        expected /= n as f64;
        let mrefs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
        assert!(close(rrr_loss(&mrefs, &grads).unwrap(), expected));
    }
}

fn cross_entropy_oracle(m: &ProtoPNet, ex: &ImageExample) -> f64 {
    let patches = naive_patches(m, &ex.pixels);
    let acts: Vec<f64> = (0..m.num_prototypes())
        .map(|j| {
            dists(m, j, &patches)
                .into_iter()
                .map(|d| act(m, d))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let k = acts.len();
    let logits: Vec<f64> = (0..m.num_classes())
        .map(|c| (0..k).map(|j| m.weights.data()[c * k + j] * acts[j]).sum())
        .collect();
    let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
    lse - logits[ex.label]
}

pub fn composite_objective() {
    let mut r = rng(104);
    for _ in 0..INSTANCES {
        let m = random_model(&mut r);
        let mut b = batch(&mut r, &m);
        // Some examples without masks: the IAIA term averages over masked ones only.
        for ex in b.iter_mut().skip(1) {
            if r.gen_bool(0.5) {
                ex.mask = None;
            }
        }
        let refs: Vec<&ImageExample> = b.iter().collect();
        let f = random_sets(&mut r, &m);
        let v = random_sets(&mut r, &m);
        let weights = LossWeights {
            cluster: r.gen_range(0.0..1.0),
            separation: r.gen_range(0.0..1.0),
            forget: r.gen_range(0.0..100.0),
            remember: r.gen_range(0.0..1.0),
            iaia: r.gen_range(0.0..1.0),
            div: r.gen_range(0.0..1.0),
        };
        let obj = Objective {
            weights,
            robust_k: 1,
            forbidden: &f,
            valid: &v,
            iaia: true,
        };
        let got = composite_loss(&m, &refs, &obj).unwrap();

        let n = b.len() as f64;
        let ce = b.iter().map(|ex| cross_entropy_oracle(&m, ex)).sum::<f64>() / n;
        let cl = b
            .iter()
            .map(|ex| smallest_mean(class_dists(&m, ex, true), 1))
            .sum::<f64>()
            / n;
        let sep = b
            .iter()
            .map(|ex| -smallest_mean(class_dists(&m, ex, false), 1))
            .sum::<f64>()
            / n;
        let masked: Vec<&ImageExample> = b.iter().filter(|e| e.mask.is_some()).collect();
        let ia = iaia_loss(&m, &masked, 1.0).unwrap();
        let expected = ce
            + weights.cluster * cl
            + weights.separation * sep
            + weights.iaia * ia
            + weights.forget * forget_oracle(&m, &f)
            + weights.remember * remember_oracle(&m, &v)
            + weights.div * div_oracle(&m);
        assert!(close(got.cross_entropy, ce));
        assert!(close(got.iaia, ia));
        assert!(close(got.total, expected), "{} vs {expected}", got.total);
    }
}

fn perturbed(r: &mut ChaCha8Rng, m: &ProtoPNet) -> ProtoPNet {
    let mut o = m.clone();
    for l in &mut o.layers {
        for v in l.kernel.data_mut().iter_mut().chain(l.bias.data_mut()) {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    for v in o
        .prototypes
        .data_mut()
        .iter_mut()
        .chain(o.weights.data_mut())
    {
        *v = r.gen_range(-1.0..1.0);
    }
    o
}

/// Minimum over all bijections allowed by `matching`, by enumeration,
/// summed in the order the formula is written so the result is bit-exact.
fn distance_oracle(a: &ProtoPNet, b: &ProtoPNet, matching: Matching) -> f64 {
    let embedding: f64 = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| sqd(x.kernel.data(), y.kernel.data()) + sqd(x.bias.data(), y.bias.data()))
        .sum();
    let groups: Vec<Vec<usize>> = match matching {
        Matching::Global => vec![(0..a.num_prototypes()).collect()],
        Matching::WithinClass => (0..a.num_classes()).map(|y| a.prototypes_of(y)).collect(),
    };
    let mut protos = 0.0;
    for g in groups {
        protos += g
            .iter()
            .copied()
            .permutations(g.len())
            .map(|perm| {
                g.iter()
                    .zip(&perm)
                    .map(|(&i, &j)| sqd(a.prototype(i), b.prototype(j)))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
    }
    embedding + protos + sqd(a.weights.data(), b.weights.data())
}

pub fn parameter_distance_by_enumeration() {
    let mut r = rng(105);
    let mut checked = 0;
    while checked < INSTANCES {
        let a = random_model(&mut r);
        if a.num_prototypes() > 6 {
            continue;
        }
        let b = perturbed(&mut r, &a);
        for matching in [Matching::WithinClass, Matching::Global] {
            let got = param_distance(&a, &b, matching).unwrap();
            let want = distance_oracle(&a, &b, matching);
            assert_eq!(got, want, "{matching:?}");
        }
        assert_eq!(param_distance(&a, &a, Matching::Global).unwrap(), 0.0);
        checked += 1;
    }
}

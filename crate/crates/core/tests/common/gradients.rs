//! Reverse-mode gradients against central finite differences.

use super::{random_example, random_model, random_tensor, rng};
use protodebug::losses::{self, composite_loss, Concept, LossWeights, Objective};
use protodebug::model::{ProtoPNet, Trainable};
use protodebug::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CONFIGS: u64 = 20;

type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Relative error with a small floor so exact zeros compare cleanly.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

/// `sum(w * op(inputs))` for a fixed random projection `w`, which turns any
/// output shape into a scalar with a generic upstream gradient.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

fn value(inputs: &[Tensor], build: Build, w: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = project(&mut tape, out, w).unwrap();
    tape.value(s).item()
}

/// Largest relative error over every input entry.
fn check(name: &str, inputs: Vec<Tensor>, build: Build, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let w = random_tensor(rng, &shape, -1.0, 1.0);
    let s = project(&mut tape, out, &w).unwrap();
    tape.backward(s).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for e in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= H;
            let n = (value(&plus, build, &w) - value(&minus, build, &w)) / (2.0 * H);
            let err = rel_err(analytic[i].data()[e], n);
            assert!(
                err < TOL,
                "{name}: input {i} entry {e}: analytic {} numeric {n}",
                analytic[i].data()[e]
            );
            worst = worst.max(err);
        }
    }
    worst
}

fn shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.gen_range(0..3) {
        0 => vec![rng.gen_range(1..6)],
        1 => vec![rng.gen_range(1..4), rng.gen_range(1..4)],
        _ => vec![
            rng.gen_range(1..3),
            rng.gen_range(1..3),
            rng.gen_range(1..4),
        ],
    }
}

/// Entries separated by at least 0.2 so no perturbation changes an argmax.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.3 - 1.0 + rng.gen_range(0.0..0.1))
        .collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Entries with `|x| >= 0.1`, away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn unary(name: &str, seed: u64, gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor, build: Build) {
    let mut r = rng(seed);
    for _ in 0..CONFIGS {
        let s = shape(&mut r);
        let x = gen(&mut r, &s);
        check(name, vec![x], build, &mut r);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, -1.5, 1.5)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, 0.3, 2.5)
}

pub fn elementwise_binary_ops() {
    let mut r = rng(1);
    for _ in 0..CONFIGS {
        let s = shape(&mut r);
        let a = uniform(&mut r, &s);
        let b = uniform(&mut r, &s);
        check(
            "add",
            vec![a.clone(), b.clone()],
            &|t, v| t.add(v[0], v[1]),
            &mut r,
        );
        check(
            "sub",
            vec![a.clone(), b.clone()],
            &|t, v| t.sub(v[0], v[1]),
            &mut r,
        );
        check(
            "mul",
            vec![a.clone(), b.clone()],
            &|t, v| t.mul(v[0], v[1]),
            &mut r,
        );
        check("sq_l2", vec![a, b], &|t, v| t.sq_l2(v[0], v[1]), &mut r);
    }
}

pub fn scalar_broadcast_in_binary_ops() {
    let mut r = rng(2);
    for _ in 0..CONFIGS {
        let s = shape(&mut r);
        let a = uniform(&mut r, &s);
        let c = uniform(&mut r, &[]);
        check(
            "mul scalar",
            vec![c.clone(), a.clone()],
            &|t, v| t.mul(v[0], v[1]),
            &mut r,
        );
        check("add scalar", vec![a, c], &|t, v| t.add(v[0], v[1]), &mut r);
    }
}

pub fn unary_ops() {
    unary("neg", 3, uniform, &|t, v| t.neg(v[0]));
    unary("scale", 4, uniform, &|t, v| t.scale(v[0], -1.7));
    unary("add_scalar", 5, uniform, &|t, v| t.add_scalar(v[0], 0.4));
    unary("ln", 6, positive, &|t, v| t.ln(v[0]));
    unary("exp", 7, uniform, &|t, v| t.exp(v[0]));
    unary("relu", 8, off_kink, &|t, v| t.relu(v[0]));
    unary("sigmoid", 9, uniform, &|t, v| t.sigmoid(v[0]));
    unary("sum", 10, uniform, &|t, v| t.sum(v[0]));
    unary("mean", 11, uniform, &|t, v| t.mean(v[0]));
    unary("norm_l2", 12, off_kink, &|t, v| t.norm_l2(v[0]));
}

pub fn reductions_with_selection() {
    unary("max", 13, distinct, &|t, v| Ok(t.max_with_argmax(v[0])?.0));
    unary("min", 14, distinct, &|t, v| Ok(t.min_with_argmin(v[0])?.0));
    let mut r = rng(15);
    for _ in 0..CONFIGS {
        let (m, n) = (r.gen_range(1..4), r.gen_range(1..5));
        let x = distinct(&mut r, &[m, n]);
        check(
            "max_rows",
            vec![x.clone()],
            &|t, v| Ok(t.max_rows(v[0])?.0),
            &mut r,
        );
        let k = r.gen_range(1..=m * n);
        check(
            "smallest_mean",
            vec![x],
            &move |t, v| t.smallest_mean(v[0], k),
            &mut r,
        );
    }
}

pub fn shape_ops() {
    let mut r = rng(16);
    for _ in 0..CONFIGS {
        let (m, n) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = uniform(&mut r, &[m, n]);
        check(
            "reshape",
            vec![x.clone()],
            &move |t, v| t.reshape(v[0], vec![n, m]),
            &mut r,
        );
        let index: Vec<usize> = (0..r.gen_range(1..8))
            .map(|_| r.gen_range(0..m * n))
            .collect();
        check(
            "pick",
            vec![x.clone()],
            &move |t, v| t.pick(v[0], &index),
            &mut r,
        );
        let len = r.gen_range(1..4);
        let y = uniform(&mut r, &[len]);
        check(
            "concat",
            vec![x, y],
            &|t, v| t.concat(&[v[0], v[1], v[0]]),
            &mut r,
        );
    }
}

pub fn linear_algebra_ops() {
    let mut r = rng(17);
    for _ in 0..CONFIGS {
        let (m, n, d) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5));
        let a = uniform(&mut r, &[m, d]);
        let b = uniform(&mut r, &[n, d]);
        let v = uniform(&mut r, &[d]);
        check(
            "matvec",
            vec![a.clone(), v],
            &|t, x| t.matvec(x[0], x[1]),
            &mut r,
        );
        check(
            "pairwise",
            vec![a.clone(), b],
            &|t, x| t.pairwise_sq_dist(x[0], x[1]),
            &mut r,
        );
        check(
            "pairwise self",
            vec![a],
            &|t, x| t.pairwise_sq_dist(x[0], x[0]),
            &mut r,
        );
    }
}

pub fn convolution_and_bias() {
    let mut r = rng(18);
    for _ in 0..CONFIGS {
        let (h, w, c) = (r.gen_range(3..7), r.gen_range(3..7), r.gen_range(1..4));
        let (o, kh, kw) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let stride = r.gen_range(1..3);
        let x = uniform(&mut r, &[h, w, c]);
        let k = uniform(&mut r, &[o, kh, kw, c]);
        let b = uniform(&mut r, &[c]);
        check(
            "conv2d",
            vec![x.clone(), k],
            &move |t, v| t.conv2d(v[0], v[1], stride),
            &mut r,
        );
        check(
            "bias",
            vec![x, b],
            &|t, v| t.add_channel_bias(v[0], v[1]),
            &mut r,
        );
    }
}

pub fn softmax_cross_entropy() {
    let mut r = rng(19);
    for _ in 0..CONFIGS {
        let n = r.gen_range(2..7);
        let z = random_tensor(&mut r, &[n], -3.0, 3.0);
        let label = r.gen_range(0..n);
        check(
            "ce",
            vec![z],
            &move |t, v| t.softmax_cross_entropy(v[0], label),
            &mut r,
        );
    }
}

fn block_mut(m: &mut ProtoPNet, b: usize) -> &mut Tensor {
    let n = m.layers.len();
    match b {
        b if b < 2 * n => {
            let l = &mut m.layers[b / 2];
            if b % 2 == 0 {
                &mut l.kernel
            } else {
                &mut l.bias
            }
        }
        b if b == 2 * n => &mut m.prototypes,
        _ => &mut m.weights,
    }
}

fn random_concepts(r: &mut ChaCha8Rng, m: &ProtoPNet) -> Vec<Vec<Concept>> {
    let d = m.config.latent_depth;
    (0..m.num_classes())
        .map(|_| {
            (0..r.gen_range(0..3))
                .map(|_| {
                    let m = r.gen_range(1..4);
                    Concept::fixed(random_tensor(r, &[m, d], 0.0, 1.0))
                })
                .collect()
        })
        .collect()
}

/// The whole per-image objective through the model, checked on a random
/// subset of coordinates of every parameter block.
pub fn full_objective_through_the_network() {
    let mut r = rng(20);
    for _ in 0..CONFIGS {
        let model = random_model(&mut r);
        let ex = random_example(&mut r, &model.config, 0);
        let forbidden = random_concepts(&mut r, &model);
        let valid = random_concepts(&mut r, &model);
        let weights = LossWeights {
            cluster: r.gen_range(0.0..1.0),
            separation: r.gen_range(0.0..1.0),
            forget: r.gen_range(0.0..2.0),
            remember: r.gen_range(0.0..2.0),
            iaia: r.gen_range(0.0..1.0),
            div: r.gen_range(0.0..1.0),
        };
        let obj = Objective {
            weights,
            robust_k: 1,
            forbidden: &forbidden,
            valid: &valid,
            iaia: true,
        };

        let all = Trainable {
            embedding: true,
            adaptation: true,
            prototypes: true,
            weights: true,
        };
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, all);
        let x = tape.constant(ex.pixels.clone());
        let fwd = model.forward_on(&mut tape, &vars, x).unwrap();
        let ce = tape.softmax_cross_entropy(fwd.logits, ex.label).unwrap();
        let cl = losses::cluster_term(&mut tape, &model, &fwd, ex.label, 1).unwrap();
        let sep = losses::separation_term(&mut tape, &model, &fwd, ex.label, 1).unwrap();
        let cells = losses::latent_mask(&model.config, ex.mask.as_deref().unwrap()).unwrap();
        let ia = losses::iaia_term(&mut tape, &model, &fwd, ex.label, &cells).unwrap();
        let fv = losses::concept_vars(&mut tape, &model, None, &forbidden, false).unwrap();
        let vv = losses::concept_vars(&mut tape, &model, None, &valid, false).unwrap();
        let f = losses::forget_term(&mut tape, &model, vars.prototypes, &fv).unwrap();
        let rm = losses::remember_term(&mut tape, &model, vars.prototypes, &vv).unwrap();
        let dv = losses::div_term(&mut tape, &model, vars.prototypes).unwrap();
        let mut total = ce;
        for (v, w) in [
            (cl, weights.cluster),
            (sep, weights.separation),
            (ia, weights.iaia),
            (f, weights.forget),
            (rm, weights.remember),
            (dv, weights.div),
        ] {
            let s = tape.scale(v, w).unwrap();
            total = tape.add(total, s).unwrap();
        }
        let expected = composite_loss(&model, &[&ex], &obj).unwrap().total;
        assert!((tape.value(total).item() - expected).abs() < 1e-12);
        tape.backward(total).unwrap();

        let mut handles: Vec<Var> = vars.layers.iter().flat_map(|&(k, b)| [k, b]).collect();
        handles.push(vars.prototypes);
        handles.push(vars.weights);
        for (b, &h) in handles.iter().enumerate() {
            let g = tape.grad_or_zeros(h);
            for _ in 0..8 {
                let e = r.gen_range(0..g.len());
                let mut plus = model.clone();
                block_mut(&mut plus, b).data_mut()[e] += H;
                let mut minus = model.clone();
                block_mut(&mut minus, b).data_mut()[e] -= H;
                let fp = composite_loss(&plus, &[&ex], &obj).unwrap().total;
                let fm = composite_loss(&minus, &[&ex], &obj).unwrap().total;
                let n = (fp - fm) / (2.0 * H);
                let err = rel_err(g.data()[e], n);
                assert!(
                    err < TOL,
                    "block {b} entry {e}: analytic {} numeric {n}",
                    g.data()[e]
                );
            }
        }
    }
}

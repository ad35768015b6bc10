#![allow(dead_code)]

pub mod checks;
pub mod gradients;
pub mod oracles;

use protodebug::dataset::ImageExample;
use protodebug::model::{ActivationKind, ModelConfig, ProtoPNet};
use protodebug::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// A small network: 11x11 inputs give a 2x2 latent grid.
pub fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let side = [9usize, 11, 13][rng.gen_range(0..3)];
    ModelConfig {
        input_shape: [side, side, rng.gen_range(1..=3)],
        conv_channels: [rng.gen_range(2..=4), rng.gen_range(2..=4)],
        latent_depth: rng.gen_range(2..=5),
        num_classes: rng.gen_range(2..=3),
        prototypes_per_class: rng.gen_range(1..=3),
        activation: if rng.gen_bool(0.5) {
            ActivationKind::Log
        } else {
            ActivationKind::Exp
        },
        epsilon: 1e-4,
        gamma: 1.0,
    }
}

pub fn random_model(rng: &mut ChaCha8Rng) -> ProtoPNet {
    let cfg = tiny_config(rng);
    let mut m = ProtoPNet::new(cfg, rng.gen()).unwrap();
    for l in &mut m.layers {
        l.bias
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.2..0.2));
    }
    m
}

pub fn random_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig, id: usize) -> ImageExample {
    let [h, w, c] = cfg.input_shape;
    let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.4))).collect();
    ImageExample {
        id: format!("ex-{id:03}"),
        pixels: random_tensor(rng, &[h, w, c], 0.0, 1.0),
        label: rng.gen_range(0..cfg.num_classes),
        mask: Some(mask),
        confounder: None,
    }
}

/// Direct loop implementation of the embedding, independent of the tape.
pub fn naive_embed(m: &ProtoPNet, x: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let [h, w, c] = m.config.input_shape;
    let mut cur: Vec<Vec<Vec<f64>>> = (0..h)
        .map(|r| {
            (0..w)
                .map(|q| x.data()[(r * w + q) * c..(r * w + q + 1) * c].to_vec())
                .collect()
        })
        .collect();
    let last = m.layers.len() - 1;
    for (li, l) in m.layers.iter().enumerate() {
        let ks = l.kernel.shape();
        let (co, kh, kw, ci) = (ks[0], ks[1], ks[2], ks[3]);
        let (ih, iw) = (cur.len(), cur[0].len());
        let (oh, ow) = ((ih - kh) / l.stride + 1, (iw - kw) / l.stride + 1);
        let mut next = vec![vec![vec![0.0; co]; ow]; oh];
        for r in 0..oh {
            for q in 0..ow {
                for o in 0..co {
                    let mut s = l.bias.data()[o];
                    for a in 0..kh {
                        for b in 0..kw {
                            for i in 0..ci {
                                let kv = l.kernel.data()[((o * kh + a) * kw + b) * ci + i];
                                s += kv * cur[r * l.stride + a][q * l.stride + b][i];
                            }
                        }
                    }
                    next[r][q][o] = if li == last {
                        1.0 / (1.0 + (-s).exp())
                    } else {
                        s.max(0.0)
                    };
                }
            }
        }
        cur = next;
    }
    cur
}

/// Flattened latent patches, row-major.
pub fn naive_patches(m: &ProtoPNet, x: &Tensor) -> Vec<Vec<f64>> {
    naive_embed(m, x).into_iter().flatten().collect()
}

pub fn sqd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn act(m: &ProtoPNet, d2: f64) -> f64 {
    let c = &m.config;
    match c.activation {
        ActivationKind::Log => ((d2 + 1.0) / (d2 + c.epsilon)).ln(),
        ActivationKind::Exp => (-c.gamma * d2).exp(),
    }
}

/// A five-class confounded task small enough for a test.
pub fn small_spec(seed: u64) -> protodebug::datagen::DatasetSpec {
    protodebug::datagen::DatasetSpec {
        train_per_class: vec![8; 5],
        test_per_class: vec![4; 5],
        seed,
        ..Default::default()
    }
}

pub fn quick_train() -> protodebug::training::TrainConfig {
    protodebug::training::TrainConfig {
        epochs: 4,
        batch_size: 10,
        projection_period: Some(2),
        evaluate_test: false,
        ..Default::default()
    }
}

//! The three-stage part-prototype network.
//!
//! Embedding: two 3x3 stride-2 convolutions with ReLU, then two 1x1
//! adaptation convolutions (ReLU, sigmoid), giving a latent volume in
//! `(0, 1)^{h' x w' x d'}`. Prototype layer: `k` latent vectors, each owned
//! by one class, scored against every latent patch with a bell-shaped
//! activation and max-pooled over the image. Aggregation: a bias-free
//! `v x k` linear layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageExample, Rect};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// `log(d + 1) - log(d + eps)`
    Log,
    /// `exp(-gamma * d)`
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `[height, width, channels]` of the input images.
    pub input_shape: [usize; 3],
    pub conv_channels: [usize; 2],
    pub latent_depth: usize,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub activation: ActivationKind,
    pub epsilon: f64,
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [32, 32, 3],
            conv_channels: [16, 32],
            latent_depth: 32,
            num_classes: 5,
            prototypes_per_class: 2,
            activation: ActivationKind::Log,
            epsilon: 1e-8,
            gamma: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.gamma <= 0.0 {
            return Err(Error::Config("epsilon and gamma must be positive".into()));
        }
        if self.num_classes == 0 || self.prototypes_per_class == 0 || self.latent_depth == 0 {
            return Err(Error::Config("empty model".into()));
        }
        let [h, w, _] = self.input_shape;
        if h < 7 || w < 7 {
            return Err(Error::Config("input must be at least 7x7".into()));
        }
        Ok(())
    }

    /// Layer geometry: (kernel, stride) per layer, in order.
    pub fn layer_geometry(&self) -> [(usize, usize); 4] {
        [(3, 2), (3, 2), (1, 1), (1, 1)]
    }

    /// Spatial size `(rows, cols)` of the latent grid.
    pub fn latent_grid(&self) -> (usize, usize) {
        let mut h = self.input_shape[0];
        let mut w = self.input_shape[1];
        for (k, s) in self.layer_geometry() {
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
        }
        (h, w)
    }

    /// `(size, jump)` of a latent cell's receptive field.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut rf, mut jump) = (1, 1);
        for (k, s) in self.layer_geometry() {
            rf += (k - 1) * jump;
            jump *= s;
        }
        (rf, jump)
    }
}

/// Activation of a prototype on a patch at squared distance `d2`.
pub fn activation(kind: ActivationKind, d2: f64, epsilon: f64, gamma: f64) -> f64 {
    match kind {
        ActivationKind::Log => (d2 + 1.0).ln() - (d2 + epsilon).ln(),
        ActivationKind::Exp => (-gamma * d2).exp(),
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[out, kh, kw, in]`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoPNet {
    pub config: ModelConfig,
    /// Embedding parameters, in forward order.
    pub layers: Vec<ConvLayer>,
    /// `[k, d']`
    pub prototypes: Tensor,
    /// Owning class of each prototype.
    pub prototype_class: Vec<usize>,
    /// `[v, k]`
    pub weights: Tensor,
}

/// Trailing 1x1 layers counted as adaptation rather than embedding.
pub const ADAPTATION_LAYERS: usize = 2;

/// Which parameter blocks receive gradients on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    /// The strided convolutional backbone.
    pub embedding: bool,
    /// The two 1x1 layers between backbone and prototypes.
    pub adaptation: bool,
    pub prototypes: bool,
    pub weights: bool,
}

impl Trainable {
    /// Whether layer `i` (of `n`) receives gradients.
    pub fn layer(&self, i: usize, n: usize) -> bool {
        if i + ADAPTATION_LAYERS >= n {
            self.adaptation
        } else {
            self.embedding
        }
    }

    pub fn any_layer(&self) -> bool {
        self.embedding || self.adaptation
    }

    pub const NONE: Trainable = Trainable {
        embedding: false,
        adaptation: false,
        prototypes: false,
        weights: false,
    };
}

/// Parameter handles on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub prototypes: Var,
    pub weights: Var,
}

/// Tape handles produced by [`ProtoPNet::forward_on`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[h', w', d']`
    pub latent: Var,
    /// `[n, d']`, row-major over the latent grid.
    pub patches: Var,
    /// `[k, n]` squared distances.
    pub distances: Var,
    /// `[k, n]` activations.
    pub patch_activations: Var,
    /// `[k]` image-level activations.
    pub activations: Var,
    pub argmax: Vec<usize>,
    /// `[v]`
    pub logits: Var,
}

/// Per-prototype, per-patch activations of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub grid: (usize, usize),
    /// `[k][n]`
    pub patch_activations: Vec<Vec<f64>>,
    pub image_activations: Vec<f64>,
    pub argmax: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub activations: Vec<f64>,
    pub logits: Vec<f64>,
    pub record: ActivationRecord,
    /// `[n, d']` latent patches.
    pub patches: Tensor,
}

impl ForwardOutput {
    pub fn predicted(&self) -> usize {
        crate::tensor::argmax(&self.logits).unwrap_or(0)
    }
}

/// One `1 x 1 x d'` cell of a latent volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub vector: Vec<f64>,
    pub receptive_field: Rect,
}

/// Splits a `[h', w', d']` latent into its cells, row-major, each tagged
/// with the input rectangle it sees.
pub fn patches(config: &ModelConfig, latent: &Tensor) -> Result<Vec<Patch>> {
    let s = latent.shape();
    if s.len() != 3 || s[2] != config.latent_depth {
        return shape_err(format!("latent shape {s:?}"));
    }
    let (rf, jump) = config.receptive_field();
    let [ih, iw, _] = config.input_shape;
    let d = s[2];
    let mut out = Vec::with_capacity(s[0] * s[1]);
    for row in 0..s[0] {
        for col in 0..s[1] {
            let o = (row * s[1] + col) * d;
            let (y, x) = (row * jump, col * jump);
            out.push(Patch {
                row,
                col,
                vector: latent.data()[o..o + d].to_vec(),
                receptive_field: Rect::new(x, y, rf.min(iw - x), rf.min(ih - y)),
            });
        }
    }
    Ok(out)
}

/// Stage-one aggregation pattern: 1 for the owning class, -0.5 elsewhere.
pub fn fixed_class_weights(num_classes: usize, prototype_class: &[usize]) -> Tensor {
    let k = prototype_class.len();
    let mut w = vec![0.0; num_classes * k];
    for u in 0..num_classes {
        for (j, &c) in prototype_class.iter().enumerate() {
            w[u * k + j] = if c == u { 1.0 } else { -0.5 };
        }
    }
    Tensor::new(vec![num_classes, k], w).expect("consistent shape")
}

impl ProtoPNet {
    /// Random initialisation: He-uniform kernels, zero biases, prototypes
    /// uniform in `(0, 1)^{d'}`, fixed class weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_in = config.input_shape[2];
        let [c1, c2] = config.conv_channels;
        let d = config.latent_depth;
        let dims = [(c_in, c1), (c1, c2), (c2, d), (d, d)];
        let layers = config
            .layer_geometry()
            .iter()
            .zip(dims)
            .map(|(&(k, stride), (ci, co))| {
                let fan_in = (k * k * ci) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let n = co * k * k * ci;
                let kernel: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Ok(ConvLayer {
                    kernel: Tensor::new(vec![co, k, k, ci], kernel)?,
                    bias: Tensor::zeros(&[co]),
                    stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let k = config.num_prototypes();
        let prototypes: Vec<f64> = (0..k * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let prototype_class: Vec<usize> = (0..k).map(|j| j / config.prototypes_per_class).collect();
        let weights = fixed_class_weights(config.num_classes, &prototype_class);
        Ok(Self {
            prototypes: Tensor::new(vec![k, d], prototypes)?,
            weights,
            prototype_class,
            layers,
            config,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototype_class.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    pub fn prototypes_of(&self, class: usize) -> Vec<usize> {
        (0..self.num_prototypes())
            .filter(|&j| self.prototype_class[j] == class)
            .collect()
    }

    pub fn activation(&self, d2: f64) -> f64 {
        activation(
            self.config.activation,
            d2,
            self.config.epsilon,
            self.config.gamma,
        )
    }

    /// Registers every parameter block on `tape`, as a differentiable leaf
    /// when `trainable` says so and as a constant otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: Trainable) -> ParamVars {
        let leaf = |tape: &mut Tape, t: &Tensor, grad: bool| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let n = self.layers.len();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let g = trainable.layer(i, n);
                (leaf(tape, &l.kernel, g), leaf(tape, &l.bias, g))
            })
            .collect();
        ParamVars {
            layers,
            prototypes: leaf(tape, &self.prototypes, trainable.prototypes),
            weights: leaf(tape, &self.weights, trainable.weights),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.config.input_shape {
            return shape_err(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                self.config.input_shape
            ));
        }
        Ok(())
    }

    /// `h(x)` on a tape.
    pub fn embed_on(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (layer, &(k, b))) in self.layers.iter().zip(&vars.layers).enumerate() {
            h = tape.conv2d(h, k, layer.stride)?;
            h = tape.add_channel_bias(h, b)?;
            h = if i == last {
                tape.sigmoid(h)?
            } else {
                tape.relu(h)?
            };
        }
        Ok(h)
    }

    /// Activation function applied elementwise on the tape.
    pub fn activation_on(&self, tape: &mut Tape, d2: Var) -> Result<Var> {
        match self.config.activation {
            ActivationKind::Log => {
                let num = tape.add_scalar(d2, 1.0)?;
                let num = tape.ln(num)?;
                let den = tape.add_scalar(d2, self.config.epsilon)?;
                let den = tape.ln(den)?;
                tape.sub(num, den)
            }
            ActivationKind::Exp => {
                let s = tape.scale(d2, -self.config.gamma)?;
                tape.exp(s)
            }
        }
    }

    /// Full forward pass of one image on a tape.
    pub fn forward_on(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<ForwardVars> {
        let latent = self.embed_on(tape, vars, x)?;
        let s = tape.value(latent).shape().to_vec();
        let patches = tape.reshape(latent, vec![s[0] * s[1], s[2]])?;
        let distances = tape.pairwise_sq_dist(vars.prototypes, patches)?;
        let patch_activations = self.activation_on(tape, distances)?;
        let (activations, argmax) = tape.max_rows(patch_activations)?;
        let logits = tape.matvec(vars.weights, activations)?;
        Ok(ForwardVars {
            latent,
            patches,
            distances,
            patch_activations,
            activations,
            argmax,
            logits,
        })
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        let xv = tape.constant(x.clone());
        let z = self.embed_on(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        let xv = tape.constant(x.clone());
        let f = self.forward_on(&mut tape, &vars, xv)?;
        let grid = {
            let s = tape.value(f.latent).shape();
            (s[0], s[1])
        };
        let acts = tape.value(f.patch_activations);
        let n = acts.shape()[1];
        Ok(ForwardOutput {
            activations: tape.value(f.activations).data().to_vec(),
            logits: tape.value(f.logits).data().to_vec(),
            record: ActivationRecord {
                grid,
                patch_activations: acts.data().chunks(n).map(<[f64]>::to_vec).collect(),
                image_activations: tape.value(f.activations).data().to_vec(),
                argmax: f.argmax.clone(),
            },
            patches: tape.value(f.patches).clone(),
        })
    }

    pub fn forward_example(&self, ex: &ImageExample) -> Result<ForwardOutput> {
        self.forward(&ex.pixels)
    }

    pub fn predict(&self, ex: &ImageExample) -> Result<usize> {
        Ok(self.forward(&ex.pixels)?.predicted())
    }

    /// Image-level activation of prototype `j` on latent `z`, with its argmax patch.
    pub fn act_image(&self, j: usize, latent: &Tensor) -> Result<(f64, usize)> {
        let d = self.config.latent_depth;
        if latent.shape().len() != 3 || latent.shape()[2] != d {
            return shape_err(format!("latent shape {:?}", latent.shape()));
        }
        let p = self.prototype(j);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, q) in latent.data().chunks(d).enumerate() {
            let a = self.activation(sq_dist(p, q));
            if a > best.0 {
                best = (a, i);
            }
        }
        Ok(best)
    }

    /// Replaces each prototype with its nearest latent patch among the
    /// training images of its class (first minimum wins). Returns, per
    /// prototype, the source image id and patch index.
    pub fn project<'a>(
        &mut self,
        train: impl IntoIterator<Item = &'a ImageExample>,
    ) -> Result<Vec<(String, usize)>> {
        let train: Vec<&ImageExample> = train.into_iter().collect();
        let d = self.config.latent_depth;
        let k = self.num_prototypes();
        let mut best: Vec<Option<(f64, String, usize, Vec<f64>)>> = vec![None; k];
        for ex in &train {
            let z = self.embed(&ex.pixels)?;
            for j in 0..k {
                if self.prototype_class[j] != ex.label {
                    continue;
                }
                let p = self.prototype(j);
                for (i, q) in z.data().chunks(d).enumerate() {
                    let dist = sq_dist(p, q);
                    if best[j].as_ref().map_or(true, |b| dist < b.0) {
                        best[j] = Some((dist, ex.id.clone(), i, q.to_vec()));
                    }
                }
            }
        }
        let mut sources = Vec::with_capacity(k);
        for (j, b) in best.into_iter().enumerate() {
            let (_, id, i, q) = b.ok_or_else(|| {
                Error::Data(format!(
                    "class {} has no training examples",
                    self.prototype_class[j]
                ))
            })?;
            self.prototypes.data_mut()[j * d..(j + 1) * d].copy_from_slice(&q);
            sources.push((id, i));
        }
        Ok(sources)
    }

    /// Flat views of every parameter block, in checkpoint order.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.kernel"), &l.kernel));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out.push(("prototypes".into(), &self.prototypes));
        out.push(("weights".into(), &self.weights));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.prototypes);
        out.push(&mut self.weights);
        out
    }

    /// Embedding parameters flattened, in layer order.
    pub fn embedding_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel.data().iter().chain(l.bias.data()).copied())
            .collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PPNCKPT\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    activation: ActivationKind,
    epsilon: f64,
    gamma: f64,
    prototype_class: Vec<usize>,
    strides: Vec<usize>,
    blocks: Vec<BlockHeader>,
}

impl ProtoPNet {
    /// Checkpoint layout: 8-byte magic, `u64` LE header length, JSON header,
    /// then every block as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            activation: self.config.activation,
            epsilon: self.config.epsilon,
            gamma: self.config.gamma,
            prototype_class: self.prototype_class.clone(),
            strides: self.layers.iter().map(|l| l.stride).collect(),
            blocks: self
                .blocks()
                .into_iter()
                .map(|(name, t)| BlockHeader {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.blocks() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        r = &r[len..];
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut model = ProtoPNet::new(header.config.clone(), 0)?;
        model.prototype_class = header.prototype_class.clone();
        if model.prototype_class.len() != model.config.num_prototypes()
            || model
                .prototype_class
                .iter()
                .any(|&c| c >= model.config.num_classes)
        {
            return Err(Error::Format("class map inconsistent with config".into()));
        }
        for (l, &s) in model.layers.iter_mut().zip(&header.strides) {
            l.stride = s;
        }
        let expected: Vec<Vec<usize>> = model
            .blocks()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        if header.blocks.len() != expected.len() {
            return Err(Error::Format("block count mismatch".into()));
        }
        for (b, want) in header.blocks.iter().zip(&expected) {
            if &b.shape != want {
                return Err(Error::Format(format!(
                    "block {} has shape {:?}, config implies {:?}",
                    b.name, b.shape, want
                )));
            }
        }
        for t in model.blocks_mut() {
            let n = t.len();
            if r.len() < n * 8 {
                return Err(Error::Format("truncated parameter block".into()));
            }
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let mut b = [0u8; 8];
                b.copy_from_slice(&r[i * 8..i * 8 + 8]);
                *v = f64::from_le_bytes(b);
            }
            r = &r[n * 8..];
        }
        if !r.is_empty() {
            return Err(Error::Format(
                "trailing bytes after parameter blocks".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

//! A small deterministic point-cloud classifier with hand-written gradients.
//!
//! Architecture: a shared per-point MLP `3 → H → H` with ReLU activations,
//! a channel-wise max pool over points (ties go to the lowest point index),
//! and an affine head `H → K` producing logits. Order-invariance comes from
//! the max pool, so the network accepts clouds of any size ≥ 1.
//!
//! Reverse-mode gradients are computed manually for **both** the parameters
//! and the input coordinates; the input gradient is what lets the trigger be
//! optimized through the frozen network and also powers saliency defenses.

use crate::error::{Error, Result};
use crate::geometry::{gather_rows, PointCloud};
use crate::rng::{derive, Domain};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use std::path::Path;

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPBACKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// All weights and biases of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    hidden: usize,
    classes: usize,
    w1: Array2<f64>, // H×3
    b1: Array1<f64>, // H
    w2: Array2<f64>, // H×H
    b2: Array1<f64>, // H
    w3: Array2<f64>, // K×H
    b3: Array1<f64>, // K
}

impl ModelParams {
    /// Fresh parameters, each layer drawn uniformly from
    /// ±sqrt(1/fan_in) (weights and biases alike) using the model-init
    /// random stream of `seed`.
    pub fn init(hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::BadCount {
                name: "hidden",
                got: 0,
                reason: "hidden width must be at least 1",
            });
        }
        if classes < 2 {
            return Err(Error::BadCount {
                name: "classes",
                got: classes,
                reason: "a classifier needs at least 2 classes",
            });
        }
        let mut rng = derive(seed, Domain::ModelInit, 0);
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let w1 = draw(hidden, 3, 3);
        let b1 = draw(1, hidden, 3).row(0).to_owned();
        let w2 = draw(hidden, hidden, hidden);
        let b2 = draw(1, hidden, hidden).row(0).to_owned();
        let w3 = draw(classes, hidden, hidden);
        let b3 = draw(1, classes, hidden).row(0).to_owned();
        Ok(ModelParams {
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    /// Per-point MLP width H.
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Number of output classes K.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let k = self.classes;
        h * 3 + h + h * h + h + k * h + k
    }

    /// Flatten all parameters into one vector. Order: w1 row-major, b1,
    /// w2 row-major, b2, w3 row-major, b3 — the same layout
    /// [`set_from_flat`](Self::set_from_flat), gradients, and checkpoints use.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(self.w1.iter());
        flat.extend(self.b1.iter());
        flat.extend(self.w2.iter());
        flat.extend(self.b2.iter());
        flat.extend(self.w3.iter());
        flat.extend(self.b3.iter());
        flat
    }

    /// Overwrite all parameters from a flat vector (inverse of
    /// [`to_flat`](Self::to_flat)).
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                left: flat.len(),
                right: self.param_count(),
            });
        }
        let mut it = flat.iter();
        for dst in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
        {
            *dst = *it.next().expect("length checked above");
        }
        Ok(())
    }
}

/// Gradients of a scalar objective with respect to every parameter and to
/// the input coordinates.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    /// N×3 gradient with respect to the input coordinates.
    pub input: Array2<f64>,
}

impl Gradients {
    /// Parameter gradients flattened in [`ModelParams::to_flat`] order
    /// (the input gradient is not included).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend(self.w1.iter());
        flat.extend(self.b1.iter());
        flat.extend(self.w2.iter());
        flat.extend(self.b2.iter());
        flat.extend(self.w3.iter());
        flat.extend(self.b3.iter());
        flat
    }
}

struct ForwardCache {
    a1: Array2<f64>,
    z1: Array2<f64>,
    a2: Array2<f64>,
    pooled: Array1<f64>,
    winners: Vec<usize>,
    logits: Array1<f64>,
}

fn forward_cached(params: &ModelParams, x: &ArrayView2<f64>) -> ForwardCache {
    let n = x.nrows();
    let h = params.hidden;
    let a1 = x.dot(&params.w1.t()) + &params.b1;
    let z1 = a1.mapv(|v| v.max(0.0));
    let a2 = z1.dot(&params.w2.t()) + &params.b2;
    let mut pooled = Array1::zeros(h);
    let mut winners = vec![0usize; h];
    for c in 0..h {
        let mut best = f64::NEG_INFINITY;
        let mut best_row = 0usize;
        for r in 0..n {
            let v = a2[[r, c]].max(0.0);
            if v > best {
                best = v;
                best_row = r;
            }
        }
        pooled[c] = best;
        winners[c] = best_row;
    }
    let logits = params.w3.dot(&pooled) + &params.b3;
    ForwardCache {
        a1,
        z1,
        a2,
        pooled,
        winners,
        logits,
    }
}

fn require_points(cloud: &PointCloud, op: &'static str) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::TooFewPoints {
            op,
            needed: 1,
            got: 0,
        });
    }
    Ok(())
}

/// Class logits for one cloud.
pub fn forward(params: &ModelParams, cloud: &PointCloud) -> Result<Array1<f64>> {
    require_points(cloud, "classifier forward")?;
    Ok(forward_cached(params, &cloud.points()).logits)
}

/// Predicted class: argmax of the logits, ties to the lowest class index.
pub fn predict(params: &ModelParams, cloud: &PointCloud) -> Result<usize> {
    let logits = forward(params, cloud)?;
    Ok(argmax(&logits.view()))
}

pub(crate) fn argmax(values: &ArrayView1<f64>) -> usize {
    let mut best = 0usize;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable cross-entropy `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(logits: &ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&l| (l - max).exp())
            .sum::<f64>()
            .ln();
    Ok(lse - logits[label])
}

fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|l| (l - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Backpropagate `dlogits` through the network. Only rows that won at least
/// one max-pool channel carry gradient, so the backward pass works on that
/// compact row subset.
fn backprop(
    params: &ModelParams,
    x: &ArrayView2<f64>,
    cache: &ForwardCache,
    dlogits: &Array1<f64>,
) -> Gradients {
    let n = x.nrows();
    let h = params.hidden;
    let k = params.classes;

    let dw3 = Array2::from_shape_fn((k, h), |(i, j)| dlogits[i] * cache.pooled[j]);
    let db3 = dlogits.clone();
    let dpooled = params.w3.t().dot(dlogits);

    let mut rows: Vec<usize> = cache.winners.clone();
    rows.sort_unstable();
    rows.dedup();
    let mut dz2c = Array2::zeros((rows.len(), h));
    for c in 0..h {
        let r = rows.binary_search(&cache.winners[c]).expect("winner row");
        dz2c[[r, c]] = dpooled[c];
    }

    let a2c = gather_rows(cache.a2.view(), &rows);
    let z1c = gather_rows(cache.z1.view(), &rows);
    let a1c = gather_rows(cache.a1.view(), &rows);
    let xc = gather_rows(*x, &rows);

    let da2c = &dz2c * &a2c.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let dw2 = da2c.t().dot(&z1c);
    let db2 = da2c.sum_axis(Axis(0));
    let dz1c = da2c.dot(&params.w2);
    let da1c = &dz1c * &a1c.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let dw1 = da1c.t().dot(&xc);
    let db1 = da1c.sum_axis(Axis(0));
    let dxc = da1c.dot(&params.w1);

    let mut input = Array2::zeros((n, 3));
    for (ci, &r) in rows.iter().enumerate() {
        for axis in 0..3 {
            input[[r, axis]] = dxc[[ci, axis]];
        }
    }

    Gradients {
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
        w3: dw3,
        b3: db3,
        input,
    }
}

/// Cross-entropy loss of one cloud against `label`, plus gradients with
/// respect to all parameters and the input coordinates.
pub fn backward(params: &ModelParams, cloud: &PointCloud, label: usize) -> Result<(f64, Gradients)> {
    require_points(cloud, "classifier backward")?;
    if label >= params.classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: params.classes,
        });
    }
    let x = cloud.points();
    let cache = forward_cached(params, &x);
    let loss = cross_entropy(&cache.logits.view(), label)?;
    let mut dlogits = softmax(&cache.logits.view());
    dlogits[label] -= 1.0;
    Ok((loss, backprop(params, &x, &cache, &dlogits)))
}

/// Gradient of `logits[class]` with respect to the input coordinates
/// (N×3). Used by saliency-based defenses.
pub fn logit_input_gradient(
    params: &ModelParams,
    cloud: &PointCloud,
    class: usize,
) -> Result<Array2<f64>> {
    require_points(cloud, "logit input gradient")?;
    if class >= params.classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: params.classes,
        });
    }
    let x = cloud.points();
    let cache = forward_cached(params, &x);
    let mut dlogits = Array1::zeros(params.classes);
    dlogits[class] = 1.0;
    Ok(backprop(params, &x, &cache, &dlogits).input)
}

/// Adam optimizer state over one flat parameter vector.
///
/// Weight decay is decoupled: it is added to the update as `lr · wd · θ`
/// rather than folded into the gradient moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    /// State for `len` parameters, moments initialized to zero.
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Number of tracked parameters.
    pub fn len(&self) -> usize {
        self.m.len()
    }

    /// True when tracking zero parameters.
    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update in place.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam step",
                left: params.len().max(grads.len()),
                right: self.m.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: `lr0 · ½(1 + cos(π·epoch/total))`.
/// Epoch 0 gives `lr0`; the last epoch approaches 0.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    debug_assert!(epoch < total_epochs, "epoch out of range");
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Write a checkpoint: magic, format version, H, K, then the flat
/// parameters as little-endian 64-bit floats. Loading is bit-exact.
pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = crate::ioutil::create_writer(path)?;
    w.write_bytes(CHECKPOINT_MAGIC)?;
    w.write_u32(CHECKPOINT_VERSION)?;
    w.write_u32(u32::try_from(params.hidden).expect("hidden fits u32"))?;
    w.write_u32(u32::try_from(params.classes).expect("classes fits u32"))?;
    for v in params.to_flat() {
        w.write_f64(v)?;
    }
    w.finish()
}

/// Read a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut r = crate::ioutil::open_reader(path)?;
    r.expect_magic(CHECKPOINT_MAGIC, "model checkpoint")?;
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: r.path().to_string(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let hidden = r.read_u32()? as usize;
    let classes = r.read_u32()? as usize;
    let mut params = ModelParams::init(hidden, classes, 0)?;
    let mut flat = vec![0.0; params.param_count()];
    for v in flat.iter_mut() {
        *v = r.read_f64()?;
    }
    if r.read_u8().is_ok() {
        return Err(Error::CorruptContainer {
            path: r.path().to_string(),
            reason: "trailing bytes after parameters".to_string(),
        });
    }
    params.set_from_flat(&flat)?;
    Ok(params)
}

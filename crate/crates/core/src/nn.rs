//! Small feedforward classifier with exact analytic gradients with respect
//! to parameters and inputs, plus a deterministic training loop.
//!
//! Logits are the model boundary; softmax lives inside the losses and
//! `predict`, stabilized with log-sum-exp throughout.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DYNM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Weight matrix, shape (fan_out, fan_in).
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

impl MlpModel {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Builds a model from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<MlpModel> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        let mut dims = vec![layers[0].w.ncols()];
        for layer in &layers {
            if layer.w.ncols() != *dims.last().unwrap() {
                return Err(Error::DimMismatch(format!(
                    "layer expects {} inputs, previous layer provides {}",
                    layer.w.ncols(),
                    dims.last().unwrap()
                )));
            }
            if layer.w.nrows() != layer.b.len() {
                return Err(Error::DimMismatch("weight rows != bias length".into()));
            }
            dims.push(layer.w.nrows());
        }
        Ok(MlpModel { dims, layers })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_all(MAGIC).unwrap();
        out.write_all(&VERSION.to_le_bytes()).unwrap();
        out.write_all(&(self.dims.len() as u32).to_le_bytes()).unwrap();
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes()).unwrap();
        }
        for layer in &self.layers {
            for v in layer.w.iter() {
                out.write_all(&v.to_bits().to_le_bytes()).unwrap();
            }
            for v in layer.b.iter() {
                out.write_all(&v.to_bits().to_le_bytes()).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<MlpModel> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::corrupt(path, "truncated magic"))?;
        if &magic != MAGIC {
            return Err(Error::corrupt(path, "bad magic; not a model file"));
        }
        let mut v4 = [0u8; 4];
        cursor
            .read_exact(&mut v4)
            .map_err(|_| Error::corrupt(path, "truncated version"))?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        cursor
            .read_exact(&mut v4)
            .map_err(|_| Error::corrupt(path, "truncated dim count"))?;
        let n_dims = u32::from_le_bytes(v4) as usize;
        if n_dims < 2 {
            return Err(Error::corrupt(path, "fewer than two layer dims"));
        }
        let mut dims = Vec::with_capacity(n_dims);
        let mut v8 = [0u8; 8];
        for _ in 0..n_dims {
            cursor
                .read_exact(&mut v8)
                .map_err(|_| Error::corrupt(path, "truncated dims"))?;
            dims.push(u64::from_le_bytes(v8) as usize);
        }
        let mut layers = Vec::with_capacity(n_dims - 1);
        for l in 0..n_dims - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut wv = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out * fan_in {
                cursor
                    .read_exact(&mut v8)
                    .map_err(|_| Error::corrupt(path, "truncated weights"))?;
                wv.push(f64::from_bits(u64::from_le_bytes(v8)));
            }
            let mut bv = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                cursor
                    .read_exact(&mut v8)
                    .map_err(|_| Error::corrupt(path, "truncated biases"))?;
                bv.push(f64::from_bits(u64::from_le_bytes(v8)));
            }
            layers.push(DenseLayer {
                w: Array2::from_shape_vec((fan_out, fan_in), wv).unwrap(),
                b: Array1::from_vec(bv),
            });
        }
        if cursor.position() != bytes.len() as u64 {
            return Err(Error::corrupt(path, "trailing bytes"));
        }
        MlpModel::from_layers(layers)
    }

    /// SHA-256 of the serialized parameters; stable identity for manifests.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MlpModel::from_bytes(&bytes, path)
}

/// He-scaled random initialization: zero-mean normal with std sqrt(2/fan_in),
/// zero biases. Deterministic given the seed.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<MlpModel> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least input and output dims, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("all layer dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        layers.push(DenseLayer {
            w,
            b: Array1::zeros(fan_out),
        });
    }
    MlpModel::from_layers(layers)
}

/// Logits for a batch; rows are samples.
pub fn forward(model: &MlpModel, batch: &Array2<f64>) -> Result<Array2<f64>> {
    if batch.ncols() != model.input_dim() {
        return Err(Error::DimMismatch(format!(
            "batch has {} features, model expects {}",
            batch.ncols(),
            model.input_dim()
        )));
    }
    let mut a = batch.clone();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = a.dot(&layer.w.t());
        z += &layer.b;
        if l != last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        a = z;
    }
    Ok(a)
}

/// Post-activation outputs per layer; `activations[0]` is the input and the
/// final entry holds the logits.
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

pub fn forward_cached(model: &MlpModel, batch: &Array2<f64>) -> Result<ForwardCache> {
    if batch.ncols() != model.input_dim() {
        return Err(Error::DimMismatch(format!(
            "batch has {} features, model expects {}",
            batch.ncols(),
            model.input_dim()
        )));
    }
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    activations.push(batch.clone());
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = activations[l].dot(&layer.w.t());
        z += &layer.b;
        if l != last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        activations.push(z);
    }
    Ok(ForwardCache { activations })
}

/// Per-layer parameter gradients in layer order.
pub type ParamGrads = Vec<(Array2<f64>, Array1<f64>)>;

/// Backpropagates `dlogits` through the cached forward pass, returning
/// parameter gradients and the gradient with respect to the input batch.
///
/// The ReLU subgradient at exactly zero is zero.
pub fn backward(model: &MlpModel, cache: &ForwardCache, dlogits: &Array2<f64>) -> (ParamGrads, Array2<f64>) {
    let n_layers = model.layers.len();
    let mut grads: ParamGrads = Vec::with_capacity(n_layers);
    let mut delta = dlogits.clone();
    for l in (0..n_layers).rev() {
        let input_act = &cache.activations[l];
        let grad_w = delta.t().dot(input_act);
        let grad_b = delta.sum_axis(Axis(0));
        grads.push((grad_w, grad_b));
        delta = delta.dot(&model.layers[l].w);
        if l > 0 {
            // mask by the post-activation of the previous hidden layer
            delta.zip_mut_with(input_act, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
    }
    grads.reverse();
    (grads, delta)
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-sample cross-entropy, stable under large logits.
pub fn per_sample_ce(logits: &Array2<f64>, labels: &[usize]) -> Array1<f64> {
    let mut losses = Array1::zeros(logits.nrows());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        losses[i] = lse - row[labels[i]];
    }
    losses
}

/// Mean cross-entropy and its gradient with respect to the logits,
/// `(softmax - onehot) / m`.
pub fn loss_ce(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let m = logits.nrows() as f64;
    let losses = per_sample_ce(logits, labels);
    let mut grad = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= 1.0;
    }
    grad.mapv_inplace(|v| v / m);
    (losses.sum() / m, grad)
}

/// Soft-label cross-entropy: mean over rows of `-sum(target * log softmax)`.
pub fn loss_ce_soft(logits: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    let m = logits.nrows() as f64;
    let mut total = 0.0;
    for (row, t) in logits.rows().into_iter().zip(targets.rows()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (&z, &tv) in row.iter().zip(t.iter()) {
            total += tv * (lse - z);
        }
    }
    let mut grad = softmax_rows(logits);
    grad -= targets;
    grad.mapv_inplace(|v| v / m);
    (total / m, grad)
}

/// Per-sample cross-entropy losses and input gradients (no 1/m scaling);
/// rows are independent, as the attacks require.
pub fn ce_input_gradients(
    model: &MlpModel,
    batch: &Array2<f64>,
    labels: &[usize],
) -> Result<(Array1<f64>, Array2<f64>)> {
    let cache = forward_cached(model, batch)?;
    let losses = per_sample_ce(cache.logits(), labels);
    let mut dlogits = softmax_rows(cache.logits());
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
    }
    let (_, input_grads) = backward(model, &cache, &dlogits);
    Ok((losses, input_grads))
}

/// Exact analytic gradient of the cross-entropy loss with respect to a
/// single input.
pub fn input_gradient(model: &MlpModel, x: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
    let batch = x.insert_axis(Axis(0)).to_owned();
    let (_, grads) = ce_input_gradients(model, &batch, &[y])?;
    Ok(grads.row(0).to_owned())
}

/// Gradient of a single logit with respect to the input (no softmax).
pub fn logit_input_gradient(model: &MlpModel, x: ArrayView1<f64>, class: usize) -> Result<Array1<f64>> {
    let batch = x.insert_axis(Axis(0)).to_owned();
    let cache = forward_cached(model, &batch)?;
    let mut dlogits = Array2::zeros((1, model.output_dim()));
    dlogits[(0, class)] = 1.0;
    let (_, input_grads) = backward(model, &cache, &dlogits);
    Ok(input_grads.row(0).to_owned())
}

/// Optimizer state; Adam keeps first/second moment estimates per tensor.
pub struct OptimizerState {
    kind: OptimizerKind,
    t: u64,
    moments: Option<Vec<(Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>)>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &MlpModel) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam { .. } => Some(
                model
                    .layers
                    .iter()
                    .map(|l| {
                        (
                            Array2::zeros(l.w.raw_dim()),
                            Array1::zeros(l.b.raw_dim()),
                            Array2::zeros(l.w.raw_dim()),
                            Array1::zeros(l.b.raw_dim()),
                        )
                    })
                    .collect(),
            ),
        };
        OptimizerState {
            kind,
            t: 0,
            moments,
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &ParamGrads, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, (gw, gb)) in model.layers.iter_mut().zip(grads) {
                    layer.w.scaled_add(-lr, gw);
                    layer.b.scaled_add(-lr, gb);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let moments = self.moments.as_mut().unwrap();
                for ((layer, (gw, gb)), (mw, mb, vw, vb)) in
                    model.layers.iter_mut().zip(grads).zip(moments.iter_mut())
                {
                    mw.zip_mut_with(gw, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    mb.zip_mut_with(gb, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    vw.zip_mut_with(gw, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    vb.zip_mut_with(gb, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    ndarray::Zip::from(&mut layer.w)
                        .and(&*mw)
                        .and(&*vw)
                        .for_each(|p, &m, &v| {
                            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                        });
                    ndarray::Zip::from(&mut layer.b)
                        .and(&*mb)
                        .and(&*vb)
                        .for_each(|p, &m, &v| {
                            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                        });
                }
            }
        }
    }
}

/// Shuffled batch index plan for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect()
}

/// Trains with mini-batch cross-entropy; returns the model and per-epoch
/// mean loss. Deterministic given the seed. Aborts on non-finite loss.
pub fn train(model: MlpModel, data: &Dataset, config: &TrainConfig) -> Result<(MlpModel, Vec<f64>)> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::EmptyTable);
    }
    if data.d() != model.input_dim() {
        return Err(Error::DimMismatch(format!(
            "dataset has {} features, model expects {}",
            data.d(),
            model.input_dim()
        )));
    }
    let mut model = model;
    let mut opt = OptimizerState::new(config.optimizer, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let batches = epoch_batches(data.n(), config.batch_size, config.shuffle, &mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch_idx) in batches.iter().enumerate() {
            let x = data.features().select(Axis(0), batch_idx);
            let y: Vec<usize> = batch_idx.iter().map(|&i| data.labels()[i]).collect();
            let cache = forward_cached(&model, &x)?;
            let (loss, dlogits) = loss_ce(cache.logits(), &y);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    context: "cross-entropy".into(),
                });
            }
            let (grads, _) = backward(&model, &cache, &dlogits);
            opt.step(&mut model, &grads, config.learning_rate);
            epoch_loss += loss * batch_idx.len() as f64;
        }
        history.push(epoch_loss / data.n() as f64);
    }
    Ok((model, history))
}

/// Argmax labels (ties to the lowest class index) and softmax probabilities.
pub fn predict(model: &MlpModel, data: &Dataset) -> Result<(Vec<usize>, Array2<f64>)> {
    let logits = forward(model, data.features())?;
    Ok(predict_from_logits(&logits))
}

pub fn predict_from_logits(logits: &Array2<f64>) -> (Vec<usize>, Array2<f64>) {
    let probs = softmax_rows(logits);
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| argmax_lowest(row.iter().cloned()))
        .collect();
    (labels, probs)
}

/// Index of the maximum value; ties break toward the lower index.
pub fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

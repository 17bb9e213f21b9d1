//! MLP position estimator.
//!
//! Received-signal matrices are flattened into standardized real feature
//! vectors and mapped to a 3-vector position by a small tanh MLP. The
//! parameter vector is flat; the hidden layers form the feature extractor and
//! the output layer the regressor, which is the split that later adaptation
//! rates act on. Training is mini-batch Adam on the mean squared positioning
//! error with an optional validation holdout.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::channel::{BeamformingConfig, ChannelModel};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::{Real, C};

/// Hidden activation. Only tanh is defined; the id is serialized so the
/// format can grow without breaking old files.
const ACTIVATION_TANH: u8 = 0;

// ---------------------------------------------------------------------------
// Architecture and parameters
// ---------------------------------------------------------------------------

/// Layer sizes: `input_dim -> hidden[0] -> ... -> hidden.last() -> 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

pub const OUTPUT_DIM: usize = 3;

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidInput {
                what: "mlp architecture",
                details: "input and hidden dimensions must be positive".into(),
            });
        }
        Ok(Self { input_dim, hidden })
    }

    /// `(fan_in, fan_out)` of every layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, OUTPUT_DIM));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Parameters of the feature extractor (all hidden layers).
    pub fn feature_param_count(&self) -> usize {
        let dims = self.layer_dims();
        dims[..dims.len() - 1].iter().map(|(i, o)| i * o + o).sum()
    }

    /// Parameters of the regressor (the output layer).
    pub fn regressor_param_count(&self) -> usize {
        let (i, o) = *self.layer_dims().last().expect("at least one layer");
        i * o + o
    }
}

/// Flat parameter vector plus its architecture.
#[derive(Debug, Clone)]
pub struct MlpParams<T: Real> {
    arch: MlpArchitecture,
    w: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    /// Scaled-uniform init: every layer entry from `U(-a, a)` with
    /// `a = 1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(arch: MlpArchitecture, rng: &mut R) -> Self {
        let mut w = Vec::with_capacity(arch.param_count());
        for (fan_in, fan_out) in arch.layer_dims() {
            let bound = T::of(1.0) / T::of(fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                w.push((T::uniform_01(rng) * T::of(2.0) - T::one()) * bound);
            }
        }
        Self { arch, w }
    }

    pub fn from_vec(arch: MlpArchitecture, w: Vec<T>) -> Result<Self> {
        if w.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                what: "mlp parameters",
                expected: arch.param_count(),
                got: w.len(),
            });
        }
        Ok(Self { arch, w })
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[T] {
        &self.w
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Lossless feature/regressor split (regressor = output layer).
    pub fn split_params(&self) -> (&[T], &[T]) {
        self.w.split_at(self.arch.feature_param_count())
    }

    /// Inverse of [`split_params`]; fails on length mismatch.
    pub fn merge_params(arch: MlpArchitecture, feat: &[T], reg: &[T]) -> Result<Self> {
        if feat.len() != arch.feature_param_count() || reg.len() != arch.regressor_param_count() {
            return Err(Error::DimensionMismatch {
                what: "merge_params",
                expected: arch.param_count(),
                got: feat.len() + reg.len(),
            });
        }
        let mut w = Vec::with_capacity(arch.param_count());
        w.extend_from_slice(feat);
        w.extend_from_slice(reg);
        Ok(Self { arch, w })
    }

    fn layer_views(&self) -> Vec<(ArrayView2<'_, T>, &[T])> {
        let mut views = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in self.arch.layer_dims() {
            let w = ArrayView2::from_shape((fan_out, fan_in), &self.w[offset..offset + fan_in * fan_out])
                .expect("layout is consistent by construction");
            offset += fan_in * fan_out;
            let b = &self.w[offset..offset + fan_out];
            offset += fan_out;
            views.push((w, b));
        }
        views
    }

    /// Forward pass for a single feature vector.
    pub fn forward(&self, features: &[T]) -> Result<Vec3<T>> {
        if features.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                what: "forward",
                expected: self.arch.input_dim,
                got: features.len(),
            });
        }
        let layers = self.layer_views();
        let mut a: Vec<T> = features.to_vec();
        for (idx, (w, b)) in layers.iter().enumerate() {
            let mut next = vec![T::zero(); b.len()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut acc = b[o];
                for (i, &x) in a.iter().enumerate() {
                    acc += w[[o, i]] * x;
                }
                *slot = if idx + 1 < layers.len() { acc.tanh() } else { acc };
            }
            a = next;
        }
        Ok([a[0], a[1], a[2]])
    }

    /// Batched forward pass (`Q x input_dim` -> `Q x 3`).
    pub fn forward_batch(&self, features: &Array2<T>) -> Result<Array2<T>> {
        if features.ncols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                what: "forward_batch",
                expected: self.arch.input_dim,
                got: features.ncols(),
            });
        }
        let layers = self.layer_views();
        let mut a = features.clone();
        for (idx, (w, b)) in layers.iter().enumerate() {
            let mut z = a.dot(&w.t());
            for (o, &bias) in b.iter().enumerate() {
                z.column_mut(o).mapv_inplace(|v| v + bias);
            }
            if idx + 1 < layers.len() {
                z.mapv_inplace(|v| v.tanh());
            }
            a = z;
        }
        Ok(a)
    }
}

// ---------------------------------------------------------------------------
// Datasets and featurization
// ---------------------------------------------------------------------------

/// Standardized feature rows with position labels (Q x F, Q x 3).
#[derive(Debug, Clone)]
pub struct LabeledDataset<T: Real> {
    pub features: Array2<T>,
    pub labels: Array2<T>,
}

impl<T: Real> LabeledDataset<T> {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: self.labels.select(Axis(0), indices),
        }
    }

    /// Concatenate two datasets (same feature dimension).
    pub fn concat(&self, other: &Self) -> Self {
        let mut features = Array2::zeros((self.len() + other.len(), self.features.ncols()));
        features.slice_mut(ndarray::s![..self.len(), ..]).assign(&self.features);
        features.slice_mut(ndarray::s![self.len().., ..]).assign(&other.features);
        let mut labels = Array2::zeros((self.len() + other.len(), OUTPUT_DIM));
        labels.slice_mut(ndarray::s![..self.len(), ..]).assign(&self.labels);
        labels.slice_mut(ndarray::s![self.len().., ..]).assign(&other.labels);
        Self { features, labels }
    }
}

/// Raw feature encoding of a received-signal matrix: real parts of all
/// entries in row-major order, then imaginary parts.
pub fn raw_features<T: Real>(y: &Array2<C<T>>) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * y.len());
    out.extend(y.iter().map(|z| z.re));
    out.extend(y.iter().map(|z| z.im));
    out
}

/// Frozen per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer<T: Real> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> Featurizer<T> {
    /// Fit mean and scale (std, floored at 1e-12) on raw feature rows.
    pub fn fit(rows: &Array2<T>) -> Self {
        let q = rows.nrows().max(1);
        let dim = rows.ncols();
        let mut mean = vec![T::zero(); dim];
        for row in rows.rows() {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        let qf = T::of(q as f64);
        for m in &mut mean {
            *m /= qf;
        }
        let mut var = vec![T::zero(); dim];
        for row in rows.rows() {
            for ((s, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let d = v - m;
                *s += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|&s| (s / qf).sqrt().max(T::of(1e-12)))
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardize one raw feature vector. Non-finite inputs are rejected.
    pub fn apply(&self, raw: &[T]) -> Result<Vec<T>> {
        if raw.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "featurize",
                expected: self.dim(),
                got: raw.len(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("received-signal features"));
        }
        Ok(raw
            .iter()
            .zip(self.mean.iter().zip(self.scale.iter()))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect())
    }

    /// Standardize a received-signal matrix directly.
    pub fn featurize(&self, y: &Array2<C<T>>) -> Result<Vec<T>> {
        self.apply(&raw_features(y))
    }
}

/// Draw `count` labeled samples under `model` (positions uniform in the ROI,
/// signals via the channel sampler), fit the standardizer on them, and return
/// the standardized dataset with the frozen statistics.
pub fn generate_source_dataset<T: Real, R: Rng + ?Sized>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    count: usize,
    rng: &mut R,
) -> Result<(LabeledDataset<T>, Featurizer<T>)> {
    let (raw, labels) = generate_raw_dataset(model, bf, count, rng)?;
    let featurizer = Featurizer::fit(&raw);
    let dataset = standardize_rows(&raw, &labels, &featurizer)?;
    Ok((dataset, featurizer))
}

/// Like [`generate_source_dataset`] but standardized with pre-frozen
/// statistics (used for target-domain and evaluation sets).
pub fn generate_dataset_with_featurizer<T: Real, R: Rng + ?Sized>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    featurizer: &Featurizer<T>,
    count: usize,
    rng: &mut R,
) -> Result<LabeledDataset<T>> {
    let (raw, labels) = generate_raw_dataset(model, bf, count, rng)?;
    standardize_rows(&raw, &labels, featurizer)
}

fn generate_raw_dataset<T: Real, R: Rng + ?Sized>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    count: usize,
    rng: &mut R,
) -> Result<(Array2<T>, Array2<T>)> {
    if count == 0 {
        return Err(Error::InvalidInput {
            what: "dataset",
            details: "at least one sample".into(),
        });
    }
    let sampler = model.received_sampler(bf)?;
    let dim = 2 * model.num_bands() * model.plan().rows();
    let mut raw = Array2::zeros((count, dim));
    let mut labels = Array2::zeros((count, OUTPUT_DIM));
    for q in 0..count {
        let p = model.roi().sample(rng);
        let y = sampler.sample(p, rng)?;
        let row = raw_features(&y);
        for (c, v) in row.into_iter().enumerate() {
            raw[[q, c]] = v;
        }
        for u in 0..OUTPUT_DIM {
            labels[[q, u]] = p[u];
        }
    }
    Ok((raw, labels))
}

fn standardize_rows<T: Real>(
    raw: &Array2<T>,
    labels: &Array2<T>,
    featurizer: &Featurizer<T>,
) -> Result<LabeledDataset<T>> {
    let mut features = raw.clone();
    for mut row in features.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - featurizer.mean[c]) / featurizer.scale[c];
        }
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("standardized features"));
    }
    Ok(LabeledDataset {
        features,
        labels: labels.clone(),
    })
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// Total squared positioning error `sum_q |p_q - f(x_q)|^2` and its gradient
/// w.r.t. the flat parameter vector, by backpropagation.
pub fn loss_and_gradient<T: Real>(
    dataset: &LabeledDataset<T>,
    params: &MlpParams<T>,
) -> Result<(T, Vec<T>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput {
            what: "loss",
            details: "empty dataset".into(),
        });
    }
    let layers = params.layer_views();
    let num_layers = layers.len();

    // Forward, keeping activations of every layer.
    let mut activations: Vec<Array2<T>> = Vec::with_capacity(num_layers + 1);
    activations.push(dataset.features.clone());
    for (idx, (w, b)) in layers.iter().enumerate() {
        let mut z = activations[idx].dot(&w.t());
        for (o, &bias) in b.iter().enumerate() {
            z.column_mut(o).mapv_inplace(|v| v + bias);
        }
        if idx + 1 < num_layers {
            z.mapv_inplace(|v| v.tanh());
        }
        activations.push(z);
    }

    let prediction = &activations[num_layers];
    let residual = prediction - &dataset.labels;
    let loss = residual.iter().map(|&r| r * r).sum::<T>();

    // Backward: delta through the linear output, then tanh layers.
    let mut grad = vec![T::zero(); params.len()];
    let mut delta = residual.mapv(|r| r * T::of(2.0));
    // Offsets of each layer inside the flat vector.
    let dims = params.arch.layer_dims();
    let mut offsets = Vec::with_capacity(num_layers);
    let mut off = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }
    for idx in (0..num_layers).rev() {
        let (fan_in, fan_out) = dims[idx];
        let a_prev = &activations[idx];
        // dL/dW = delta^T a_prev; dL/db = column sums of delta.
        let gw = delta.t().dot(a_prev);
        let base = offsets[idx];
        for o in 0..fan_out {
            for i in 0..fan_in {
                grad[base + o * fan_in + i] = gw[[o, i]];
            }
        }
        let bias_base = base + fan_in * fan_out;
        for o in 0..fan_out {
            grad[bias_base + o] = delta.column(o).sum();
        }
        if idx > 0 {
            let (w, _) = &layers[idx];
            let mut back = delta.dot(w);
            back.zip_mut_with(&activations[idx], |d, &a| *d *= T::one() - a * a);
            delta = back;
        }
    }
    Ok((loss, grad))
}

/// Mean squared positioning error over a dataset, m^2.
pub fn mse<T: Real>(dataset: &LabeledDataset<T>, params: &MlpParams<T>) -> Result<T> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput {
            what: "mse",
            details: "empty dataset".into(),
        });
    }
    let prediction = params.forward_batch(&dataset.features)?;
    let residual = &prediction - &dataset.labels;
    Ok(residual.iter().map(|&r| r * r).sum::<T>() / T::of(dataset.len() as f64))
}

/// Root mean squared positioning error, m.
pub fn rmse<T: Real>(dataset: &LabeledDataset<T>, params: &MlpParams<T>) -> Result<T> {
    mse(dataset, params).map(|v| v.sqrt())
}

// ---------------------------------------------------------------------------
// Adam training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamConfig<T: Real> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::of(1e-3),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
        }
    }
}

/// Adam moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    cfg: AdamConfig<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig<T>, dim: usize) -> Self {
        Self {
            cfg,
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected update of `w` along `grad`.
    pub fn update(&mut self, w: &mut [T], grad: &[T]) {
        assert_eq!(w.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let t = T::of(self.step as f64);
        let corr1 = T::one() - b1.powf(t);
        let corr2 = T::one() - b2.powf(t);
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            w[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig<T: Real> {
    pub adam: AdamConfig<T>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the dataset held out for validation; 0 disables the
    /// holdout and the final parameters are returned.
    pub holdout_fraction: f64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 40,
            batch_size: 64,
            holdout_fraction: 0.1,
        }
    }
}

/// One epoch row of the training log.
#[derive(Debug, Clone)]
pub struct EpochStats<T: Real> {
    pub epoch: usize,
    pub train_loss: T,
    pub val_loss: Option<T>,
}

#[derive(Debug)]
pub struct TrainReport<T: Real> {
    pub params: MlpParams<T>,
    pub curve: Vec<EpochStats<T>>,
    pub best_val_loss: Option<T>,
}

/// Mini-batch Adam on the mean squared positioning error. Returns the
/// best-validation parameters (or the final ones when no holdout is used)
/// and aborts when the loss exceeds 1e3 x its initial value.
pub fn train_source<T: Real, R: Rng + ?Sized>(
    dataset: &LabeledDataset<T>,
    initial: &MlpParams<T>,
    cfg: &TrainConfig<T>,
    rng: &mut R,
) -> Result<TrainReport<T>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput {
            what: "training",
            details: "empty dataset".into(),
        });
    }
    let n = dataset.len();
    let holdout = ((n as f64) * cfg.holdout_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // Deterministic shuffle for the holdout split.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (val_idx, train_idx) = order.split_at(holdout);
    let train = dataset.select(train_idx);
    let val = if holdout > 0 { Some(dataset.select(val_idx)) } else { None };

    let mut params = initial.clone();
    let mut adam = AdamState::new(cfg.adam.clone(), params.len());
    let initial_loss = mse(&train, &params)?;
    let mut best: Option<(T, MlpParams<T>)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut shuffled: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.max(1);

    for epoch in 1..=cfg.epochs {
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        for chunk in shuffled.chunks(batch) {
            let mini = train.select(chunk);
            let (_, mut grad) = loss_and_gradient(&mini, &params)?;
            let scale = T::of(chunk.len() as f64).recip();
            for g in &mut grad {
                *g *= scale;
            }
            adam.update(params.as_mut_slice(), &grad);
        }
        let train_loss = mse(&train, &params)?;
        if !train_loss.is_finite() || train_loss > initial_loss * T::of(1e3) {
            return Err(Error::Diverged {
                initial: initial_loss.to_f64(),
                current: train_loss.to_f64(),
                epoch,
            });
        }
        let val_loss = match &val {
            Some(v) => {
                let loss = mse(v, &params)?;
                let better = best.as_ref().map_or(true, |(b, _)| loss < *b);
                if better {
                    best = Some((loss, params.clone()));
                }
                Some(loss)
            }
            None => None,
        };
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }

    let (best_val_loss, params) = match best {
        Some((loss, p)) => (Some(loss), p),
        None => (None, params),
    };
    Ok(TrainReport {
        params,
        curve,
        best_val_loss,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MLPE";
const FORMAT_VERSION: u32 = 1;

/// Write parameters and standardization statistics to a flat binary file:
/// magic, version, layer sizes, activation id, featurizer stats, then the
/// parameter vector, all little-endian with `f64` payloads.
pub fn save_estimator<T: Real>(
    path: &Path,
    params: &MlpParams<T>,
    featurizer: &Featurizer<T>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.arch.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(params.arch.hidden.len() as u32).to_le_bytes());
    for &h in &params.arch.hidden {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.push(ACTIVATION_TANH);
    buf.extend_from_slice(&(featurizer.dim() as u32).to_le_bytes());
    for &m in &featurizer.mean {
        buf.extend_from_slice(&m.to_f64().to_le_bytes());
    }
    for &s in &featurizer.scale {
        buf.extend_from_slice(&s.to_f64().to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &w in params.as_slice() {
        buf.extend_from_slice(&w.to_f64().to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read an estimator written by [`save_estimator`].
pub fn load_estimator<T: Real>(path: &Path) -> Result<(MlpParams<T>, Featurizer<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::InvalidInput {
                what: "estimator file",
                details: "truncated".into(),
            });
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()))
    };
    let read_f64 = |cursor: &mut usize| -> Result<f64> {
        Ok(f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::InvalidInput {
            what: "estimator file",
            details: "bad magic".into(),
        });
    }
    let version = read_u32(&mut cursor)?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidInput {
            what: "estimator file",
            details: format!("unsupported version {version}"),
        });
    }
    let input_dim = read_u32(&mut cursor)? as usize;
    let n_hidden = read_u32(&mut cursor)? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(read_u32(&mut cursor)? as usize);
    }
    let activation = take(&mut cursor, 1)?[0];
    if activation != ACTIVATION_TANH {
        return Err(Error::InvalidInput {
            what: "estimator file",
            details: format!("unknown activation id {activation}"),
        });
    }
    let feat_dim = read_u32(&mut cursor)? as usize;
    let mut mean = Vec::with_capacity(feat_dim);
    for _ in 0..feat_dim {
        mean.push(T::of(read_f64(&mut cursor)?));
    }
    let mut scale = Vec::with_capacity(feat_dim);
    for _ in 0..feat_dim {
        scale.push(T::of(read_f64(&mut cursor)?));
    }
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let mut w = Vec::with_capacity(count);
    for _ in 0..count {
        w.push(T::of(read_f64(&mut cursor)?));
    }
    let arch = MlpArchitecture::new(input_dim, hidden)?;
    let params = MlpParams::from_vec(arch, w)?;
    Ok((params, Featurizer { mean, scale }))
}

/// Feature dimension the estimator expects for a given model.
pub fn feature_dim<T: Real>(model: &ChannelModel<T>) -> usize {
    2 * model.num_bands() * model.plan().rows()
}

/// Write a dataset as CSV: feature columns `f0..f{F-1}` then the label
/// columns `px,py,pz`.
pub fn save_dataset_csv<T: Real>(path: &Path, dataset: &LabeledDataset<T>) -> Result<()> {
    let mut text = String::new();
    for c in 0..dataset.features.ncols() {
        text.push_str(&format!("f{c},"));
    }
    text.push_str("px,py,pz\n");
    for q in 0..dataset.len() {
        for c in 0..dataset.features.ncols() {
            text.push_str(&format!("{},", dataset.features[[q, c]].to_f64()));
        }
        text.push_str(&format!(
            "{},{},{}\n",
            dataset.labels[[q, 0]].to_f64(),
            dataset.labels[[q, 1]].to_f64(),
            dataset.labels[[q, 2]].to_f64()
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset_csv`].
pub fn load_dataset_csv<T: Real>(path: &Path) -> Result<LabeledDataset<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::InvalidInput {
        what: "dataset csv",
        details: "empty file".into(),
    })?;
    let cols = header.split(',').count();
    if cols < 4 {
        return Err(Error::InvalidInput {
            what: "dataset csv",
            details: "expected feature columns plus px,py,pz".into(),
        });
    }
    let dim = cols - 3;
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    let mut features = Array2::zeros((rows.len(), dim));
    let mut labels = Array2::zeros((rows.len(), OUTPUT_DIM));
    for (q, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(Error::InvalidInput {
                what: "dataset csv",
                details: format!("row {q} has {} cells, expected {cols}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let value = cell.parse::<f64>().map_err(|e| Error::InvalidInput {
                what: "dataset csv",
                details: format!("row {q}: {e}"),
            })?;
            if c < dim {
                features[[q, c]] = T::of(value);
            } else {
                labels[[q, c - dim]] = T::of(value);
            }
        }
    }
    Ok(LabeledDataset { features, labels })
}

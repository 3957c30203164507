//! Feed-forward classifier: leaky-ReLU hidden layers, softmax output,
//! multinomial logistic loss, Nesterov-momentum training, and a
//! finite-difference gradient checker.
//!
//! The default receiver topology is [L, 8, n_classes]; the deeper variant is
//! [L, 64, 64, n_classes]. Inputs are normalized by a per-dataset affine map
//! (zero mean, unit variance) whose parameters are fitted on the training
//! buffer, stored on the model, and reused unchanged at evaluation.

use crate::seqgen::BitMap;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("window length must be odd and nonzero, got {0}")]
    EvenWindow(usize),
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("window length {l} does not fit in {n} samples at stride {stride}")]
    WindowTooLong { l: usize, n: usize, stride: usize },
    #[error("labels ({labels}) must cover samples/stride ({expect})")]
    LabelMismatch { labels: usize, expect: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u8, n_classes: usize },
    #[error("topology must have >= 2 layers, nonzero widths, and 2 or 4 output classes")]
    BadTopology,
    #[error("input of length {got} does not match the model input size {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("dataset classes ({ds}) do not match model output size ({model})")]
    ClassMismatch { ds: usize, model: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("gradient check limits exceeded: {0}")]
    CheckTooLarge(String),
    #[error("model file corrupt: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Length-L views into a sample buffer, each centred on a label position.
///
/// Windows are slices of the underlying buffer (no materialization). Labels
/// index positions spaced `stride` samples apart (stride 1: one sample per
/// bit; stride 2: two samples per symbol with the on-symbol sample first).
/// Window i is centred on the sample of label `first_label + i`; edge windows
/// that would run past the buffer are dropped.
#[derive(Debug, Clone)]
pub struct WindowedDataset<'a> {
    samples: &'a [f64],
    labels: &'a [u8],
    l: usize,
    stride: usize,
    first_label: usize,
    num_windows: usize,
    n_classes: usize,
}

impl<'a> WindowedDataset<'a> {
    pub fn len(&self) -> usize {
        self.num_windows
    }

    pub fn is_empty(&self) -> bool {
        self.num_windows == 0
    }

    pub fn window_len(&self) -> usize {
        self.l
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn samples(&self) -> &'a [f64] {
        self.samples
    }

    /// The L raw (unnormalized) samples of window `i`.
    pub fn window(&self, i: usize) -> &'a [f64] {
        let centre = (self.first_label + i) * self.stride;
        let half = (self.l - 1) / 2;
        &self.samples[centre - half..centre + half + 1]
    }

    /// Transmitted class of the centre element of window `i`.
    pub fn label(&self, i: usize) -> u8 {
        self.labels[self.first_label + i]
    }
}

/// Build the sliding-window dataset over `samples` with one window per label
/// position that admits a full window. `labels.len() * stride` must equal
/// `samples.len()`.
pub fn make_windows<'a>(
    samples: &'a [f64],
    labels: &'a [u8],
    l: usize,
    stride: usize,
    n_classes: usize,
) -> Result<WindowedDataset<'a>, MlpError> {
    if l == 0 || l.is_multiple_of(2) {
        return Err(MlpError::EvenWindow(l));
    }
    if stride == 0 {
        return Err(MlpError::ZeroStride);
    }
    if labels.len() * stride != samples.len() {
        return Err(MlpError::LabelMismatch {
            labels: labels.len(),
            expect: samples.len() / stride,
        });
    }
    if l > samples.len() {
        return Err(MlpError::WindowTooLong {
            l,
            n: samples.len(),
            stride,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| (c as usize) >= n_classes) {
        return Err(MlpError::LabelOutOfRange {
            label: bad,
            n_classes,
        });
    }
    let half = (l - 1) / 2;
    let first_label = half.div_ceil(stride);
    let last_label = (samples.len() - 1 - half) / stride;
    if last_label < first_label {
        return Err(MlpError::WindowTooLong {
            l,
            n: samples.len(),
            stride,
        });
    }
    Ok(WindowedDataset {
        samples,
        labels,
        l,
        stride,
        first_label,
        num_windows: last_label - first_label + 1,
        n_classes,
    })
}

/// Population mean and standard deviation of a sample buffer; the affine
/// input map of a dataset. A degenerate (constant) buffer maps to std 1.
pub fn fit_normalizer(samples: &[f64]) -> (f64, f64) {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-300 { std } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    /// weights[l] has shape (fan_out, fan_in).
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub leaky_slope: f64,
    /// Frozen input normalization, fitted from the training buffer.
    pub input_mean: f64,
    pub input_std: f64,
    pub init_seed: u64,
}

impl MlpModel {
    /// He-initialized model: weights ~ N(0, sqrt(2/fan_in)), biases zero.
    pub fn new(layer_sizes: &[usize], leaky_slope: f64, init_seed: u64) -> Result<Self, MlpError> {
        Self::validate_topology(layer_sizes)?;
        let mut rng = ChaCha12Rng::seed_from_u64(init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                normal.sample(&mut rng)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            leaky_slope,
            input_mean: 0.0,
            input_std: 1.0,
            init_seed,
        })
    }

    /// All-zero weights and biases (uniform predictor), for baselines.
    pub fn zeroed(layer_sizes: &[usize], leaky_slope: f64) -> Result<Self, MlpError> {
        let mut model = Self::new(layer_sizes, leaky_slope, 0)?;
        for w in &mut model.weights {
            w.fill(0.0);
        }
        Ok(model)
    }

    fn validate_topology(layer_sizes: &[usize]) -> Result<(), MlpError> {
        let n_out = *layer_sizes.last().unwrap_or(&0);
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) || !(n_out == 2 || n_out == 4) {
            return Err(MlpError::BadTopology);
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Class probabilities for one window (softmax output, sums to 1).
    pub fn forward(&self, window: &[f64]) -> Result<Vec<f64>, MlpError> {
        if window.len() != self.input_size() {
            return Err(MlpError::DimMismatch {
                got: window.len(),
                want: self.input_size(),
            });
        }
        let inv = 1.0 / self.input_std;
        let x = Array2::from_shape_fn((1, window.len()), |(_, j)| {
            (window[j] - self.input_mean) * inv
        });
        let cache = self.forward_cached(x);
        let logits = cache.z.last().unwrap();
        let (probs, _) = softmax_and_loss(logits, &[0]);
        Ok(probs.row(0).to_vec())
    }

    /// Forward pass keeping pre-activations and activations for backprop.
    /// `a[0]` is the (already normalized) input batch; `z.last()` the logits.
    fn forward_cached(&self, x: Array2<f64>) -> Cache {
        let n_layers = self.weights.len();
        let mut a = Vec::with_capacity(n_layers);
        let mut z = Vec::with_capacity(n_layers);
        a.push(x);
        for l in 0..n_layers {
            let mut zl = a[l].dot(&self.weights[l].t());
            zl += &self.biases[l];
            if l + 1 < n_layers {
                let slope = self.leaky_slope;
                let al = zl.mapv(|v| if v > 0.0 { v } else { slope * v });
                a.push(al);
            }
            z.push(zl);
        }
        Cache { a, z }
    }

    /// Plain-text serialization: header with layer sizes, slope, seed, and
    /// input map; then per-layer weight rows and bias line, 17 fractional
    /// digits in scientific notation (round-trip exact for 64-bit floats).
    pub fn save_text(&self) -> String {
        let sizes = self
            .layer_sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        writeln!(
            out,
            "mlp-v1 layers={} slope={:.17e} seed={} input_mean={:.17e} input_std={:.17e}",
            sizes, self.leaky_slope, self.init_seed, self.input_mean, self.input_std
        )
        .unwrap();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            writeln!(out, "W{} {} {}", l, w.nrows(), w.ncols()).unwrap();
            for row in w.rows() {
                let line = row
                    .iter()
                    .map(|v| format!("{v:.17e}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                out.push_str(&line);
                out.push('\n');
            }
            writeln!(out, "b{} {}", l, b.len()).unwrap();
            let line = b
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn save_file(&self, path: &Path) -> Result<(), MlpError> {
        std::fs::write(path, self.save_text())?;
        Ok(())
    }

    pub fn load_text(text: &str) -> Result<Self, MlpError> {
        let corrupt = |msg: &str| MlpError::BadModelFile(msg.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| corrupt("empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("mlp-v1") {
            return Err(corrupt("bad magic"));
        }
        let mut layer_sizes: Vec<usize> = Vec::new();
        let mut slope = None;
        let mut seed = None;
        let mut mean = None;
        let mut std = None;
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| corrupt("malformed header field"))?;
            match key {
                "layers" => {
                    layer_sizes = value
                        .split(',')
                        .map(|s| s.parse().map_err(|_| corrupt("bad layer size")))
                        .collect::<Result<_, _>>()?;
                }
                "slope" => slope = Some(value.parse().map_err(|_| corrupt("bad slope"))?),
                "seed" => seed = Some(value.parse().map_err(|_| corrupt("bad seed"))?),
                "input_mean" => mean = Some(value.parse().map_err(|_| corrupt("bad mean"))?),
                "input_std" => std = Some(value.parse().map_err(|_| corrupt("bad std"))?),
                _ => return Err(corrupt("unknown header field")),
            }
        }
        Self::validate_topology(&layer_sizes)?;
        let mut model = MlpModel {
            layer_sizes: layer_sizes.clone(),
            weights: Vec::new(),
            biases: Vec::new(),
            leaky_slope: slope.ok_or_else(|| corrupt("missing slope"))?,
            input_mean: mean.ok_or_else(|| corrupt("missing input_mean"))?,
            input_std: std.ok_or_else(|| corrupt("missing input_std"))?,
            init_seed: seed.ok_or_else(|| corrupt("missing seed"))?,
        };
        let parse_row = |line: &str, want: usize| -> Result<Vec<f64>, MlpError> {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| corrupt("bad value")))
                .collect::<Result<_, _>>()?;
            if vals.len() != want {
                return Err(corrupt("wrong row length"));
            }
            Ok(vals)
        };
        for l in 0..layer_sizes.len() - 1 {
            let head = lines.next().ok_or_else(|| corrupt("missing weight header"))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != format!("W{l}") {
                return Err(corrupt("bad weight header"));
            }
            let rows: usize = parts[1].parse().map_err(|_| corrupt("bad row count"))?;
            let cols: usize = parts[2].parse().map_err(|_| corrupt("bad col count"))?;
            if rows != layer_sizes[l + 1] || cols != layer_sizes[l] {
                return Err(corrupt("weight shape mismatch"));
            }
            let mut w = Array2::zeros((rows, cols));
            for r in 0..rows {
                let line = lines.next().ok_or_else(|| corrupt("missing weight row"))?;
                let vals = parse_row(line, cols)?;
                for (c, v) in vals.into_iter().enumerate() {
                    w[[r, c]] = v;
                }
            }
            let head = lines.next().ok_or_else(|| corrupt("missing bias header"))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 2 || parts[0] != format!("b{l}") {
                return Err(corrupt("bad bias header"));
            }
            let blen: usize = parts[1].parse().map_err(|_| corrupt("bad bias length"))?;
            if blen != layer_sizes[l + 1] {
                return Err(corrupt("bias shape mismatch"));
            }
            let line = lines.next().ok_or_else(|| corrupt("missing bias row"))?;
            model.biases.push(Array1::from_vec(parse_row(line, blen)?));
            model.weights.push(w);
        }
        Ok(model)
    }

    pub fn load_file(path: &Path) -> Result<Self, MlpError> {
        Self::load_text(&std::fs::read_to_string(path)?)
    }
}

struct Cache {
    a: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
}

/// Row-wise stable softmax plus mean multinomial logistic loss over the true
/// labels: loss = mean(logsumexp(z) - z[true]).
fn softmax_and_loss(logits: &Array2<f64>, labels: &[u8]) -> (Array2<f64>, f64) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[r] as usize];
        row.mapv_inplace(|z| (z - lse).exp());
    }
    (probs, loss / labels.len().max(1) as f64)
}

/// Normalized input batch and labels for the given window indices.
fn fill_batch(
    ds: &WindowedDataset,
    idxs: &[usize],
    mean: f64,
    std: f64,
) -> (Array2<f64>, Vec<u8>) {
    let l = ds.window_len();
    let inv = 1.0 / std;
    let mut x = Array2::zeros((idxs.len(), l));
    let mut labels = Vec::with_capacity(idxs.len());
    for (r, &i) in idxs.iter().enumerate() {
        let w = ds.window(i);
        let mut row = x.row_mut(r);
        for (c, &v) in w.iter().enumerate() {
            row[c] = (v - mean) * inv;
        }
        labels.push(ds.label(i));
    }
    (x, labels)
}

/// Mean batch loss and analytic gradients at the model's current parameters.
fn backprop(
    model: &MlpModel,
    ds: &WindowedDataset,
    idxs: &[usize],
) -> (Vec<Array2<f64>>, Vec<Array1<f64>>, f64) {
    let (x, labels) = fill_batch(ds, idxs, model.input_mean, model.input_std);
    let cache = model.forward_cached(x);
    let logits = cache.z.last().unwrap();
    let (mut dz, loss) = softmax_and_loss(logits, &labels);
    let inv_b = 1.0 / labels.len() as f64;
    dz *= inv_b;
    for (r, &y) in labels.iter().enumerate() {
        dz[[r, y as usize]] -= inv_b;
    }
    let n_layers = model.weights.len();
    let mut gw_rev = Vec::with_capacity(n_layers);
    let mut gb_rev = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        gw_rev.push(dz.t().dot(&cache.a[l]));
        gb_rev.push(dz.sum_axis(Axis(0)));
        if l > 0 {
            let mut da = dz.dot(&model.weights[l]);
            let slope = model.leaky_slope;
            da.zip_mut_with(&cache.z[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d *= slope;
                }
            });
            dz = da;
        }
    }
    gw_rev.reverse();
    gb_rev.reverse();
    (gw_rev, gb_rev, loss)
}

fn check_model_dataset(model: &MlpModel, ds: &WindowedDataset) -> Result<(), MlpError> {
    if ds.is_empty() {
        return Err(MlpError::EmptyDataset);
    }
    if ds.window_len() != model.input_size() {
        return Err(MlpError::DimMismatch {
            got: ds.window_len(),
            want: model.input_size(),
        });
    }
    if ds.n_classes() != model.n_classes() {
        return Err(MlpError::ClassMismatch {
            ds: ds.n_classes(),
            model: model.n_classes(),
        });
    }
    Ok(())
}

/// Mean multinomial logistic loss of the model over the whole dataset.
pub fn loss(model: &MlpModel, ds: &WindowedDataset) -> Result<f64, MlpError> {
    check_model_dataset(model, ds)?;
    let chunk = 4096;
    let mut total = 0.0;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let idxs: Vec<usize> = (start..end).collect();
        let (x, labels) = fill_batch(ds, &idxs, model.input_mean, model.input_std);
        let cache = model.forward_cached(x);
        let (_, mean_loss) = softmax_and_loss(cache.z.last().unwrap(), &labels);
        total += mean_loss * labels.len() as f64;
        start = end;
    }
    Ok(total / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed for mini-batch shuffling (weight init is seeded on the model).
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 3,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlpError::BadConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MlpError::BadConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(MlpError::BadConfig(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Nesterov-momentum SGD. Per mini-batch, with look-ahead point w̃:
///   w̃ = w + μ·v;  g = ∇L(w̃);  v ← μ·v − η·g;  w ← w + v.
/// The learning rate η halves at each quarter of the total update budget.
/// The input normalizer is fitted here from the training buffer and frozen
/// on the returned model. Errors if the loss turns non-finite or the final
/// full-dataset loss exceeds the initial one.
pub fn train_nesterov(
    model: MlpModel,
    ds: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, MlpError> {
    cfg.validate()?;
    check_model_dataset(&model, ds)?;
    let mut model = model;
    let (mean, std) = fit_normalizer(ds.samples());
    model.input_mean = mean;
    model.input_std = std;
    let initial_loss = loss(&model, ds)?;

    let mut vw: Vec<Array2<f64>> = model.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut vb: Vec<Array1<f64>> = model.biases.iter().map(|b| Array1::zeros(b.len())).collect();
    let mut lookahead = model.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let batches_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let quarter = ((4 * step) / total_steps).min(3) as i32;
            let eta = cfg.learning_rate * 0.5f64.powi(quarter);
            for l in 0..model.weights.len() {
                lookahead.weights[l].assign(&model.weights[l]);
                lookahead.weights[l].scaled_add(cfg.momentum, &vw[l]);
                lookahead.biases[l].assign(&model.biases[l]);
                lookahead.biases[l].scaled_add(cfg.momentum, &vb[l]);
            }
            let (gw, gb, batch_loss) = backprop(&lookahead, ds, chunk);
            if !batch_loss.is_finite() {
                return Err(MlpError::Diverged(format!(
                    "non-finite batch loss at update {step}"
                )));
            }
            for l in 0..model.weights.len() {
                vw[l] *= cfg.momentum;
                vw[l].scaled_add(-eta, &gw[l]);
                model.weights[l] += &vw[l];
                vb[l] *= cfg.momentum;
                vb[l].scaled_add(-eta, &gb[l]);
                model.biases[l] += &vb[l];
            }
            step += 1;
        }
    }

    let final_loss = loss(&model, ds)?;
    if !final_loss.is_finite() || final_loss > initial_loss {
        return Err(MlpError::Diverged(format!(
            "final loss {final_loss} vs initial {initial_loss}"
        )));
    }
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss,
    })
}

/// BER measurement from argmax decisions over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BerCount {
    pub bit_errors: u64,
    pub bits_counted: u64,
}

impl BerCount {
    pub fn ber(&self) -> f64 {
        self.bit_errors as f64 / self.bits_counted as f64
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        // Strict > keeps the lowest index on ties (deterministic).
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Argmax classification of every window; 4-class symbol decisions are
/// mapped to bit errors through `bit_map` (1 bit per window for 2 classes,
/// 2 bits per window for 4). Softmax is strictly increasing per row, so
/// argmax over logits equals argmax over probabilities.
pub fn classify_ber(
    model: &MlpModel,
    ds: &WindowedDataset,
    bit_map: &BitMap,
) -> Result<BerCount, MlpError> {
    check_model_dataset(model, ds)?;
    let bits_per_window = if model.n_classes() == 4 { 2 } else { 1 };
    let chunk = 4096;
    let mut bit_errors = 0u64;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let idxs: Vec<usize> = (start..end).collect();
        let (x, labels) = fill_batch(ds, &idxs, model.input_mean, model.input_std);
        let cache = model.forward_cached(x);
        let logits = cache.z.last().unwrap();
        for (r, &label) in labels.iter().enumerate() {
            let pred = argmax_row(logits.row(r).as_slice().unwrap()) as u8;
            if model.n_classes() == 4 {
                bit_errors += u64::from(bit_map.bit_errors(label, pred));
            } else {
                bit_errors += u64::from(pred != label);
            }
        }
        start = end;
    }
    Ok(BerCount {
        bit_errors,
        bits_counted: bits_per_window * ds.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over parameters of |g_fd − g_an| / max(|g_fd| + |g_an|, 1e-4);
    /// the floor absorbs finite-difference round-off on near-zero entries.
    pub max_relative_error: f64,
    /// L2 norm of (g_fd − g_an) over all parameters.
    pub l2_error: f64,
    /// Parameters whose ±step perturbation flipped the sign of some hidden
    /// pre-activation. Their finite differences straddle a leaky-ReLU kink
    /// where the loss is not differentiable in the step direction, so the
    /// oracle itself is invalid there; they are counted and excluded.
    pub kink_crossings: usize,
}

/// Loss plus a hash of the sign pattern of all hidden pre-activations, used
/// to detect leaky-ReLU kink crossings between perturbed evaluations.
fn loss_and_sign_hash(model: &MlpModel, ds: &WindowedDataset, idxs: &[usize]) -> (f64, u64) {
    let (x, labels) = fill_batch(ds, idxs, model.input_mean, model.input_std);
    let cache = model.forward_cached(x);
    let (_, loss) = softmax_and_loss(cache.z.last().unwrap(), &labels);
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for zl in &cache.z[..cache.z.len() - 1] {
        for &v in zl.iter() {
            hash = (hash ^ u64::from(v > 0.0)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    (loss, hash)
}

/// Compare analytic gradients against central finite differences with the
/// given step. Limited to small models and datasets (the cost is two loss
/// evaluations per parameter).
pub fn gradient_check(
    model: &MlpModel,
    ds: &WindowedDataset,
    step: f64,
) -> Result<GradCheck, MlpError> {
    check_model_dataset(model, ds)?;
    if model.num_params() > 10_000 || ds.len() > 64 {
        return Err(MlpError::CheckTooLarge(format!(
            "{} params / {} windows (limits: 10000 / 64)",
            model.num_params(),
            ds.len()
        )));
    }
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let (gw, gb, _) = backprop(model, ds, &idxs);
    let mut work = model.clone();
    let mut max_rel = 0.0f64;
    let mut l2 = 0.0f64;
    let mut kinks = 0usize;
    let mut check_param = |work: &mut MlpModel, layer: usize, is_bias: bool, flat: usize, analytic: f64| {
        let read = |m: &MlpModel| -> f64 {
            if is_bias {
                m.biases[layer][flat]
            } else {
                let cols = m.weights[layer].ncols();
                m.weights[layer][[flat / cols, flat % cols]]
            }
        };
        let write = |m: &mut MlpModel, v: f64| {
            if is_bias {
                m.biases[layer][flat] = v;
            } else {
                let cols = m.weights[layer].ncols();
                m.weights[layer][[flat / cols, flat % cols]] = v;
            }
        };
        let orig = read(work);
        write(work, orig + step);
        let (lp, sign_p) = loss_and_sign_hash(work, ds, &idxs);
        write(work, orig - step);
        let (lm, sign_m) = loss_and_sign_hash(work, ds, &idxs);
        write(work, orig);
        if sign_p != sign_m {
            kinks += 1;
            return;
        }
        let fd = (lp - lm) / (2.0 * step);
        let diff = (fd - analytic).abs();
        max_rel = max_rel.max(diff / (fd.abs() + analytic.abs()).max(1e-4));
        l2 += diff * diff;
    };
    for layer in 0..model.weights.len() {
        for flat in 0..model.weights[layer].len() {
            let cols = model.weights[layer].ncols();
            let analytic = gw[layer][[flat / cols, flat % cols]];
            check_param(&mut work, layer, false, flat, analytic);
        }
        for (flat, &analytic) in gb[layer].iter().enumerate() {
            check_param(&mut work, layer, true, flat, analytic);
        }
    }
    Ok(GradCheck {
        max_relative_error: max_rel,
        l2_error: l2.sqrt(),
        kink_crossings: kinks,
    })
}

/// Analytic gradient L2 norm at the current parameters (for minimum checks).
pub fn gradient_norm(model: &MlpModel, ds: &WindowedDataset) -> Result<f64, MlpError> {
    check_model_dataset(model, ds)?;
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let (gw, gb, _) = backprop(model, ds, &idxs);
    let mut sq = 0.0;
    for g in &gw {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    for g in &gb {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sq.sqrt())
}

//! Neural back-end: an affine projection standing in for LDA, length
//! normalization, and an affine softmax classifier, with an analytic
//! backward pass and Adam.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};

/// Lower bound on the length-normalization divisor.
pub const NORM_GUARD: f64 = 1e-12;
/// Lower clamp on posteriors before taking logs in the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendModel {
    /// Projection weights, latent × input.
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    /// Classifier weights, classes × latent.
    pub w_g: Array2<f64>,
    pub b_g: Array1<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub pre_norm: Array2<f64>,
    /// Row norms of `pre_norm`, already guarded.
    pub norms: Array1<f64>,
    pub latent: Array2<f64>,
    pub logits: Array2<f64>,
    pub posteriors: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Row-wise log-softmax of the logits.
    pub fn log_posteriors(&self) -> Array2<f64> {
        let mut out = self.logits.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    pub w_g: Array2<f64>,
    pub b_g: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &BackendModel) -> Self {
        Self {
            w_h: Array2::zeros(model.w_h.raw_dim()),
            b_h: Array1::zeros(model.b_h.raw_dim()),
            w_g: Array2::zeros(model.w_g.raw_dim()),
            b_g: Array1::zeros(model.b_g.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w_h += &other.w_h;
        self.b_h += &other.b_h;
        self.w_g += &other.w_g;
        self.b_g += &other.b_g;
    }

    /// Slices in the fixed parameter order (W_h, b_h, W_g, b_g).
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_h.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
            self.w_g.as_slice().expect("standard layout"),
            self.b_g.as_slice().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl BackendModel {
    /// Xavier-uniform weights and zero biases.
    pub fn new(input_dim: usize, latent_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        check_dims(input_dim, latent_dim, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_h = xavier(latent_dim, input_dim, &mut rng);
        let w_g = xavier(classes, latent_dim, &mut rng);
        Ok(Self {
            w_h,
            b_h: Array1::zeros(latent_dim),
            w_g,
            b_g: Array1::zeros(classes),
        })
    }

    pub fn from_parts(
        w_h: Array2<f64>,
        b_h: Array1<f64>,
        w_g: Array2<f64>,
        b_g: Array1<f64>,
    ) -> Result<Self> {
        let (d, input) = w_h.dim();
        let (c, d2) = w_g.dim();
        check_dims(input, d, c)?;
        if d2 != d || b_h.len() != d || b_g.len() != c {
            return Err(Error::Shape(format!(
                "inconsistent parameter shapes: W_h {d}×{input}, b_h {}, W_g {c}×{d2}, b_g {}",
                b_h.len(),
                b_g.len()
            )));
        }
        let model = Self {
            // force standard layout for flat parameter access
            w_h: w_h.as_standard_layout().into_owned(),
            b_h,
            w_g: w_g.as_standard_layout().into_owned(),
            b_g,
        };
        if !model.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(model)
    }

    /// Projection initialized from a closed-form LDA fit on labeled data:
    /// the leading generalized eigenvectors of (between, within) class
    /// scatter, centered on the data mean. The classifier is Xavier-uniform.
    pub fn with_lda_init(source: &Dataset, latent_dim: usize, seed: u64) -> Result<Self> {
        let classes = source.class_count();
        let input_dim = source.dim();
        check_dims(input_dim, latent_dim, classes)?;
        let labels = source
            .labels()
            .ok_or_else(|| Error::Unlabeled("LDA initialization needs source labels".into()))?;
        let x = source.to_f64();
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty dataset");

        let mut class_sums = Array2::<f64>::zeros((classes, input_dim));
        let mut counts = vec![0usize; classes];
        for (row, &label) in x.axis_iter(Axis(0)).zip(labels) {
            class_sums.row_mut(label).scaled_add(1.0, &row);
            counts[label] += 1;
        }
        let mut within = DMatrix::<f64>::zeros(input_dim, input_dim);
        let mut between = DMatrix::<f64>::zeros(input_dim, input_dim);
        let class_means: Vec<Array1<f64>> = (0..classes)
            .map(|k| {
                if counts[k] > 0 {
                    class_sums.row(k).mapv(|v| v / counts[k] as f64)
                } else {
                    mean.clone()
                }
            })
            .collect();
        for (row, &label) in x.axis_iter(Axis(0)).zip(labels) {
            let diff = DMatrix::from_iterator(
                input_dim,
                1,
                row.iter().zip(class_means[label].iter()).map(|(a, b)| a - b),
            );
            within += &diff * diff.transpose() / n;
        }
        for k in 0..classes {
            let diff = DMatrix::from_iterator(
                input_dim,
                1,
                class_means[k].iter().zip(mean.iter()).map(|(a, b)| a - b),
            );
            between += &diff * diff.transpose() * (counts[k] as f64 / n);
        }
        let ridge = 1e-6 * (within.trace() / input_dim as f64).max(1e-12);
        for i in 0..input_dim {
            within[(i, i)] += ridge;
        }

        let we = SymmetricEigen::new(within);
        let inv_sqrt = DMatrix::from_diagonal(&we.eigenvalues.map(|l| 1.0 / l.max(ridge).sqrt()));
        let whitener = &we.eigenvectors * inv_sqrt * we.eigenvectors.transpose();
        let whitened = &whitener * between * &whitener;
        let be = SymmetricEigen::new(whitened);
        let mut order: Vec<usize> = (0..input_dim).collect();
        order.sort_by(|&a, &b| be.eigenvalues[b].total_cmp(&be.eigenvalues[a]));

        let mut w_h = Array2::<f64>::zeros((latent_dim, input_dim));
        for (r, &k) in order.iter().take(latent_dim).enumerate() {
            let dir = &whitener * be.eigenvectors.column(k);
            let norm = dir.norm().max(NORM_GUARD);
            // deterministic sign: largest-magnitude entry positive
            let pivot = dir.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..input_dim {
                w_h[[r, j]] = sign * dir[j] / norm;
            }
        }
        let b_h = -w_h.dot(&mean);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_g = xavier(classes, latent_dim, &mut rng);
        Self::from_parts(w_h, b_h, w_g, Array1::zeros(classes))
    }

    pub fn input_dim(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.w_g.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_h.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
            self.w_g.as_slice().expect("standard layout"),
            self.b_g.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_h.as_slice_mut().expect("standard layout"),
            self.b_h.as_slice_mut().expect("standard layout"),
            self.w_g.as_slice_mut().expect("standard layout"),
            self.b_g.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input".into()));
        }
        let pre_norm = x.dot(&self.w_h.t()) + &self.b_h;
        let norms = pre_norm.map_axis(Axis(1), |row| {
            row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_GUARD)
        });
        let latent = &pre_norm / &norms.view().insert_axis(Axis(1));
        let logits = latent.dot(&self.w_g.t()) + &self.b_g;
        let mut posteriors = logits.clone();
        for mut row in posteriors.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(ForwardTrace {
            input: x.to_owned(),
            pre_norm,
            norms,
            latent,
            logits,
            posteriors,
        })
    }

    /// Gradients of `mean CE(labels)` (when labels are given) plus the linear
    /// terms `<grad_latent, latent> + <grad_posteriors, posteriors>`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_latent: Option<ArrayView2<'_, f64>>,
        grad_posteriors: Option<ArrayView2<'_, f64>>,
        labels: Option<&[usize]>,
    ) -> Result<Gradients> {
        let b = trace.batch_size();
        let (d, c) = (self.latent_dim(), self.class_count());
        if let Some(g) = &grad_latent {
            if g.dim() != (b, d) {
                return Err(Error::Shape(format!("latent adjoint {:?}, expected ({b}, {d})", g.dim())));
            }
        }
        if let Some(g) = &grad_posteriors {
            if g.dim() != (b, c) {
                return Err(Error::Shape(format!(
                    "posterior adjoint {:?}, expected ({b}, {c})",
                    g.dim()
                )));
            }
        }

        let p = &trace.posteriors;
        let mut d_logits = Array2::<f64>::zeros((b, c));
        if let Some(labels) = labels {
            check_labels(labels, b, c)?;
            let scale = 1.0 / b as f64;
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..c {
                    let target = if k == y { 1.0 } else { 0.0 };
                    d_logits[[i, k]] = (p[[i, k]] - target) * scale;
                }
            }
        }
        if let Some(gp) = grad_posteriors {
            // softmax Jacobian: p ⊙ (g − <g, p>)
            for i in 0..b {
                let dot: f64 = (0..c).map(|k| gp[[i, k]] * p[[i, k]]).sum();
                for k in 0..c {
                    d_logits[[i, k]] += p[[i, k]] * (gp[[i, k]] - dot);
                }
            }
        }

        let w_g = d_logits.t().dot(&trace.latent);
        let b_g = d_logits.sum_axis(Axis(0));
        let mut d_latent = d_logits.dot(&self.w_g);
        if let Some(gz) = grad_latent {
            d_latent += &gz;
        }

        // length normalization Jacobian: (I − z zᵀ) / ‖x‖
        let mut d_pre = Array2::<f64>::zeros((b, d));
        for i in 0..b {
            let z = trace.latent.row(i);
            let g = d_latent.row(i);
            let norm = trace.norms[i];
            let raw_norm = trace.pre_norm.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if raw_norm < NORM_GUARD {
                // guarded branch: the divisor is a constant
                d_pre.row_mut(i).assign(&g.mapv(|v| v / norm));
            } else {
                let dot = z.dot(&g);
                for k in 0..d {
                    d_pre[[i, k]] = (g[k] - z[k] * dot) / norm;
                }
            }
        }

        let w_h = d_pre.t().dot(&trace.input);
        let b_h = d_pre.sum_axis(Axis(0));
        Ok(Gradients { w_h, b_h, w_g, b_g })
    }
}

fn check_dims(input_dim: usize, latent_dim: usize, classes: usize) -> Result<()> {
    if input_dim == 0 || latent_dim == 0 || classes == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive (input {input_dim}, latent {latent_dim}, classes {classes})"
        )));
    }
    if latent_dim > input_dim {
        return Err(Error::Config(format!(
            "latent dim {latent_dim} exceeds input dim {input_dim}"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { row, label, classes });
    }
    Ok(())
}

/// Mean over rows of `−ln max(p[label], 1e-12)`.
pub fn cross_entropy(posteriors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (b, c) = posteriors.dim();
    check_labels(labels, b, c)?;
    if b == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -posteriors[[i, y]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &BackendModel, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(&sizes, config)
    }

    /// One Adam update. Non-finite gradients are rejected before anything
    /// is modified.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam expects {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != self.first[k].len() {
                return Err(Error::Shape(format!("adam tensor {k} size mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {k}")));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(model: &mut BackendModel, state: &mut AdamState, grads: &Gradients) -> Result<()> {
    let mut params = model.tensors_mut();
    state.apply(&mut params, &grads.tensors())
}

/// One supervised step on a source batch. Returns the batch cross-entropy.
pub fn source_step(
    model: &mut BackendModel,
    adam: &mut AdamState,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    let trace = model.forward(x)?;
    let ce = cross_entropy(trace.posteriors.view(), labels)?;
    let grads = model.backward(&trace, None, None, Some(labels))?;
    adam_step(model, adam, &grads)?;
    Ok(ce)
}

/// Full-dataset cross-entropy and accuracy.
pub fn evaluate_ce(model: &BackendModel, data: &Dataset) -> Result<(f64, f64)> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Unlabeled(format!("{} dataset", data.domain())))?;
    let trace = model.forward(data.to_f64().view())?;
    let ce = cross_entropy(trace.posteriors.view(), labels)?;
    let correct = trace
        .posteriors
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok((ce, correct as f64 / labels.len() as f64))
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Full-dataset cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_ce: f64,
    pub final_accuracy: f64,
    pub steps: usize,
}

/// Source-only training on the cross-entropy alone.
pub fn pretrain_source(
    model: &mut BackendModel,
    source: &Dataset,
    epochs: usize,
    adam: &mut AdamState,
    sampler: &mut BatchSampler,
) -> Result<PretrainReport> {
    if !source.has_labels() {
        return Err(Error::Unlabeled("pretraining needs a labeled source".into()));
    }
    let n = source.len();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut steps = 0;
    for _ in 0..epochs {
        sampler.start_epoch();
        for batch in 0..sampler.batches_per_epoch(n, n) {
            let idx = sampler.next_source_batch(n)?;
            let x = source.gather(&idx);
            let y = source.labels_at(&idx)?;
            source_step(model, adam, x.view(), &y).map_err(|e| Error::Batch {
                batch,
                source: Box::new(e),
            })?;
            steps += 1;
        }
        epoch_losses.push(evaluate_ce(model, source)?.0);
    }
    let (final_ce, final_accuracy) = evaluate_ce(model, source)?;
    Ok(PretrainReport {
        epoch_losses,
        final_ce,
        final_accuracy,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub class_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

const CHECKPOINT_FORMAT: &str = "otlid-checkpoint";

/// Writes `u32 LE header length`, the JSON header, then the parameters as
/// little-endian `f32` in the order W_h, b_h, W_g, b_g (row-major).
pub fn save_checkpoint(path: &Path, model: &BackendModel, seed: u64, config_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        input_dim: model.input_dim(),
        latent_dim: model.latent_dim(),
        class_count: model.class_count(),
        seed,
        config_hash: config_hash.into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(4 + json.len() + 4 * model.parameter_count());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for tensor in model.tensors() {
        for &v in tensor {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(BackendModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 {
        return Err(bad("truncated checkpoint"));
    }
    let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad("not a checkpoint file"));
    }
    let (input, d, c) = (header.input_dim, header.latent_dim, header.class_count);
    check_dims(input, d, c)?;
    let payload = &bytes[4 + len..];
    let expected = 4 * (d * input + d + c * d + c);
    if payload.len() != expected {
        return Err(bad(&format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|w| f64::from(f32::from_le_bytes(w.try_into().unwrap())));
    let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
    let w_h = Array2::from_shape_vec((d, input), take(d * input)).map_err(|e| Error::Shape(e.to_string()))?;
    let b_h = Array1::from(take(d));
    let w_g = Array2::from_shape_vec((c, d), take(c * d)).map_err(|e| Error::Shape(e.to_string()))?;
    let b_g = Array1::from(take(c));
    Ok((BackendModel::from_parts(w_h, b_h, w_g, b_g)?, header))
}

//! A small CNN trainer: convolutions with stride 1 and "same" zero padding,
//! ReLU, flatten, a dense head and softmax cross-entropy, trained with plain
//! SGD.
//!
//! Activations are NHWC. Convolutions run as im2col followed by a GEMM; the
//! kernel `(n, s, s, m)` is permuted to `(s, s, n) × m` so that im2col copies
//! contiguous channel runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Dataset};
use crate::params::{ModelParams, ParamEntry, ParamsError, Role};
use crate::rng::{stream, Purpose};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input shape {actual} does not match the architecture input {expected}")]
    InputShape { expected: Shape, actual: Shape },
    #[error("{inputs} input rows but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Dense { in_features: usize, out_features: usize },
    Relu,
    Flatten,
    SoftmaxXent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Act {
    fn len(self) -> usize {
        match self {
            Act::Spatial { h, w, c } => h * w * c,
            Act::Flat(f) => f,
        }
    }
}

/// Layer stack plus input geometry `(h, w, channels)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    input: (usize, usize, usize),
    layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        let arch = Architecture { input, layers };
        arch.activations()?;
        Ok(arch)
    }

    /// conv(1→32, 5) → relu → conv(32→64, 5) → relu → flatten → dense(→10).
    pub fn reference() -> Self {
        Architecture::conv_stack((28, 28, 1), &[32, 64], 5, 10).expect("reference architecture is valid")
    }

    /// Convolutions (each followed by ReLU) then flatten and a dense head.
    pub fn conv_stack(
        input: (usize, usize, usize),
        channels: &[usize],
        kernel: usize,
        classes: usize,
    ) -> Result<Self, NnError> {
        let (h, w, c) = input;
        let mut layers = Vec::new();
        let mut prev = c;
        for &ch in channels {
            layers.push(LayerSpec::Conv2d { in_channels: prev, out_channels: ch, kernel });
            layers.push(LayerSpec::Relu);
            prev = ch;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { in_features: h * w * prev, out_features: classes });
        layers.push(LayerSpec::SoftmaxXent);
        Architecture::new(input, layers)
    }

    pub fn input(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Activation shape entering each layer, followed by the final output.
    fn activations(&self) -> Result<Vec<Act>, NnError> {
        let bad = |msg: String| Err(NnError::Architecture(msg));
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return bad("input extents must be positive".into());
        }
        let mut act = Act::Spatial { h, w, c };
        let mut acts = vec![act];
        for (i, layer) in self.layers.iter().enumerate() {
            act = match (*layer, act) {
                (LayerSpec::Conv2d { in_channels, out_channels, kernel }, Act::Spatial { h, w, c }) => {
                    if in_channels != c {
                        return bad(format!("layer {i}: conv expects {in_channels} channels, gets {c}"));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return bad(format!("layer {i}: conv extents must be positive"));
                    }
                    Act::Spatial { h, w, c: out_channels }
                }
                (LayerSpec::Dense { in_features, out_features }, Act::Flat(f)) => {
                    if in_features != f {
                        return bad(format!("layer {i}: dense expects {in_features} features, gets {f}"));
                    }
                    if out_features == 0 {
                        return bad(format!("layer {i}: dense needs outputs"));
                    }
                    Act::Flat(out_features)
                }
                (LayerSpec::Relu, a) => a,
                (LayerSpec::Flatten, a) => Act::Flat(a.len()),
                (LayerSpec::SoftmaxXent, Act::Flat(f)) => {
                    if i + 1 != self.layers.len() {
                        return bad("the softmax cross-entropy head must be the last layer".into());
                    }
                    Act::Flat(f)
                }
                (l, a) => return bad(format!("layer {i}: {l:?} cannot follow activation {a:?}")),
            };
            acts.push(act);
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxXent) {
            return bad("the last layer must be the softmax cross-entropy head".into());
        }
        Ok(acts)
    }

    pub fn num_classes(&self) -> usize {
        match self.activations().expect("validated").last() {
            Some(&Act::Flat(f)) => f,
            _ => unreachable!("validated architecture ends flat"),
        }
    }

    /// `(name, role, dims)` of every parameter, in order.
    pub fn param_layout(&self) -> Vec<(String, Role, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                    out.push((
                        format!("conv{i}.kernel"),
                        Role::Kernel,
                        vec![in_channels, kernel, kernel, out_channels],
                    ));
                    out.push((format!("conv{i}.bias"), Role::Bias, vec![out_channels]));
                }
                LayerSpec::Dense { in_features, out_features } => {
                    out.push((format!("dense{i}.weight"), Role::WeightMatrix, vec![in_features, out_features]));
                    out.push((format!("dense{i}.bias"), Role::Bias, vec![out_features]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, _, d)| d.iter().product::<usize>()).sum()
    }

    /// Glorot-uniform weights, zero biases. Conv fans are `n·s·s` and `m·s·s`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        let entries = self
            .param_layout()
            .into_iter()
            .map(|(name, role, dims)| {
                let shape = Shape::new(dims.clone()).expect("validated extents");
                let tensor = match role {
                    Role::Bias => Tensor::zeros(shape),
                    Role::Kernel | Role::WeightMatrix => {
                        let (fan_in, fan_out) = match role {
                            Role::Kernel => (dims[0] * dims[1] * dims[2], dims[3] * dims[1] * dims[2]),
                            _ => (dims[0], dims[1]),
                        };
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                        let data = (0..shape.numel()).map(|_| rng.random_range(-limit..=limit)).collect();
                        Tensor::new(shape, data).expect("sized to shape")
                    }
                };
                ParamEntry { name, role, tensor }
            })
            .collect();
        ModelParams::new(entries).expect("layout names are unique")
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<(), NnError> {
        let layout = self.param_layout();
        let template = ModelParams::new(
            layout
                .into_iter()
                .map(|(name, role, dims)| ParamEntry {
                    name,
                    role,
                    tensor: Tensor::zeros(Shape::new(dims).expect("validated extents")),
                })
                .collect(),
        )?;
        template.check_congruent(params)?;
        Ok(())
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize, NnError> {
        let (h, w, c) = self.input;
        match inputs.dims() {
            &[b, ih, iw, ic] if (ih, iw, ic) == (h, w, c) => Ok(b),
            _ => Err(NnError::InputShape {
                expected: Shape::new([1, h, w, c]).expect("validated extents"),
                actual: inputs.shape().clone(),
            }),
        }
    }

    fn check_labels(&self, batch: &Batch, rows: usize) -> Result<(), NnError> {
        if batch.labels.len() != rows {
            return Err(NnError::LabelCount { inputs: rows, labels: batch.labels.len() });
        }
        let classes = self.num_classes();
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelRange { label, classes });
        }
        Ok(())
    }

    fn run_forward(
        &self,
        params: &ModelParams,
        inputs: &Tensor,
        keep: bool,
    ) -> Result<(Vec<f32>, usize, Vec<LayerCache>), NnError> {
        self.check_params(params)?;
        let batch = self.check_input(inputs)?;
        let acts = self.activations()?;
        let mut x = inputs.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut p = params.entries().iter();
        for (layer, act) in self.layers.iter().zip(&acts) {
            match (*layer, *act) {
                (LayerSpec::Conv2d { in_channels, out_channels, kernel }, Act::Spatial { h, w, .. }) => {
                    let k = p.next().expect("kernel entry");
                    let b = p.next().expect("bias entry");
                    let geom = ConvGeom { batch, h, w, c: in_channels, s: kernel, m: out_channels };
                    let col = im2col(&x, &geom);
                    let kmat = kernel_to_mat(k.tensor.data(), &geom);
                    let rows = geom.rows();
                    let mut out = vec![0.0f32; rows * out_channels];
                    gemm(rows, geom.patch(), out_channels, &col, false, &kmat, false, &mut out);
                    add_bias(&mut out, b.tensor.data());
                    caches.push(LayerCache::Conv { geom, col: if keep { col } else { Vec::new() } });
                    x = out;
                }
                (LayerSpec::Dense { in_features, out_features }, _) => {
                    let wt = p.next().expect("weight entry");
                    let b = p.next().expect("bias entry");
                    let mut out = vec![0.0f32; batch * out_features];
                    gemm(batch, in_features, out_features, &x, false, wt.tensor.data(), false, &mut out);
                    add_bias(&mut out, b.tensor.data());
                    caches.push(LayerCache::Dense {
                        input: if keep { x } else { Vec::new() },
                        in_features,
                        out_features,
                    });
                    x = out;
                }
                (LayerSpec::Relu, _) => {
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(LayerCache::Relu { output: if keep { x.clone() } else { Vec::new() } });
                }
                (LayerSpec::Flatten, _) | (LayerSpec::SoftmaxXent, _) => caches.push(LayerCache::Passthrough),
                _ => unreachable!("validated architecture"),
            }
        }
        Ok((x, batch, caches))
    }

    /// Logits `(batch, classes)` and the activation record `backward` needs.
    pub fn forward(&self, params: &ModelParams, inputs: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
        let (logits, batch, layers) = self.run_forward(params, inputs, true)?;
        let classes = self.num_classes();
        let logits = Tensor::from_vec(&[batch, classes], logits).expect("logit rows");
        Ok((logits, ForwardCache { layers }))
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter.
    pub fn loss_and_grad(&self, params: &ModelParams, batch: &Batch) -> Result<(f32, ModelParams), NnError> {
        let (logits, cache) = self.forward(params, &batch.inputs)?;
        self.check_labels(batch, logits.dims()[0])?;
        let (loss, dlogits) = softmax_xent(logits.data(), &batch.labels, self.num_classes(), true);
        let grads = self.backward(params, cache, dlogits)?;
        Ok((loss as f32, grads))
    }

    fn backward(&self, params: &ModelParams, cache: ForwardCache, mut g: Vec<f32>) -> Result<ModelParams, NnError> {
        let entries = params.entries();
        let mut grads: Vec<Option<Tensor>> = vec![None; entries.len()];
        // Parameter entries consumed by the layers before each one.
        let mut cursor = entries.len();
        let first_param_layer =
            self.layers.iter().position(|l| matches!(l, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }));
        for (index, layer_cache) in cache.layers.into_iter().enumerate().rev() {
            let need_input_grad = first_param_layer.is_some_and(|f| index > f);
            match layer_cache {
                LayerCache::Conv { geom, col } => {
                    cursor -= 2;
                    let kernel = &entries[cursor];
                    let rows = geom.rows();
                    let patch = geom.patch();
                    let mut dkmat = vec![0.0f32; patch * geom.m];
                    gemm(patch, rows, geom.m, &col, true, &g, false, &mut dkmat);
                    grads[cursor] = Some(
                        Tensor::new(kernel.tensor.shape().clone(), mat_to_kernel(&dkmat, &geom)).expect("kernel shape"),
                    );
                    grads[cursor + 1] = Some(bias_grad(&g, geom.m));
                    if need_input_grad {
                        let kmat = kernel_to_mat(kernel.tensor.data(), &geom);
                        let mut dcol = vec![0.0f32; rows * patch];
                        gemm(rows, geom.m, patch, &g, false, &kmat, true, &mut dcol);
                        g = col2im(&dcol, &geom);
                    }
                }
                LayerCache::Dense { input, in_features, out_features } => {
                    cursor -= 2;
                    let weight = &entries[cursor];
                    let batch = g.len() / out_features;
                    let mut dw = vec![0.0f32; in_features * out_features];
                    gemm(in_features, batch, out_features, &input, true, &g, false, &mut dw);
                    grads[cursor] = Some(Tensor::new(weight.tensor.shape().clone(), dw).expect("weight shape"));
                    grads[cursor + 1] = Some(bias_grad(&g, out_features));
                    if need_input_grad {
                        let mut dx = vec![0.0f32; batch * in_features];
                        gemm(batch, out_features, in_features, &g, false, weight.tensor.data(), true, &mut dx);
                        g = dx;
                    }
                }
                LayerCache::Relu { output } => {
                    for (gv, &o) in g.iter_mut().zip(&output) {
                        if o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                LayerCache::Passthrough => {}
            }
        }
        let entries = entries
            .iter()
            .zip(grads)
            .map(|(e, g)| ParamEntry {
                name: e.name.clone(),
                role: e.role,
                tensor: g.expect("every parameter receives a gradient"),
            })
            .collect();
        Ok(ModelParams::new(entries)?)
    }

    /// Accuracy (first-maximum argmax) and mean loss over the whole dataset.
    pub fn evaluate(&self, params: &ModelParams, dataset: &Dataset) -> Result<Evaluation, NnError> {
        if dataset.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        let classes = self.num_classes();
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for chunk in indices.chunks(EVAL_BATCH) {
            let batch = dataset.gather(chunk);
            let (logits, rows, _) = self.run_forward(params, &batch.inputs, false)?;
            self.check_labels(&batch, rows)?;
            for (row, &label) in logits.chunks(classes).zip(&batch.labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            let (mean, _) = softmax_xent(&logits, &batch.labels, classes, false);
            loss_sum += mean * rows as f64;
        }
        Ok(Evaluation { accuracy: correct as f64 / dataset.len() as f64, loss: loss_sum / dataset.len() as f64 })
    }
}

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Per-layer activations kept by [`Architecture::forward`].
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug)]
enum LayerCache {
    Conv { geom: ConvGeom, col: Vec<f32> },
    Dense { input: Vec<f32>, in_features: usize, out_features: usize },
    Relu { output: Vec<f32> },
    Passthrough,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    s: usize,
    m: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.s * self.s * self.c
    }

    /// Leading pad; the trailing pad is `s - 1 - lead`.
    fn pad(&self) -> usize {
        (self.s - 1) / 2
    }
}

/// Rows `(b, y, x)`, columns `(ky, kx, c)`.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let patch = g.patch();
    let pad = g.pad() as isize;
    let mut col = vec![0.0f32; g.rows() * patch];
    for b in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((b * g.h + y) * g.w + xx) * patch;
                for ky in 0..g.s {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.s {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + sy as usize) * g.w + sx as usize) * g.c;
                        let dst = row + (ky * g.s + kx) * g.c;
                        col[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f32], g: &ConvGeom) -> Vec<f32> {
    let patch = g.patch();
    let pad = g.pad() as isize;
    let mut dx = vec![0.0f32; g.batch * g.h * g.w * g.c];
    for b in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((b * g.h + y) * g.w + xx) * patch;
                for ky in 0..g.s {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.s {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + sy as usize) * g.w + sx as usize) * g.c;
                        let src = row + (ky * g.s + kx) * g.c;
                        for (d, &v) in dx[dst..dst + g.c].iter_mut().zip(&dcol[src..src + g.c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(n, s, s, m)` → `(s, s, n) × m`.
fn kernel_to_mat(k: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (n, s, m) = (g.c, g.s, g.m);
    let mut out = vec![0.0f32; k.len()];
    for i in 0..n {
        for ky in 0..s {
            for kx in 0..s {
                let src = ((i * s + ky) * s + kx) * m;
                let dst = ((ky * s + kx) * n + i) * m;
                out[dst..dst + m].copy_from_slice(&k[src..src + m]);
            }
        }
    }
    out
}

fn mat_to_kernel(mat: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (n, s, m) = (g.c, g.s, g.m);
    let mut out = vec![0.0f32; mat.len()];
    for i in 0..n {
        for ky in 0..s {
            for kx in 0..s {
                let dst = ((i * s + ky) * s + kx) * m;
                let src = ((ky * s + kx) * n + i) * m;
                out[dst..dst + m].copy_from_slice(&mat[src..src + m]);
            }
        }
    }
    out
}

/// `c = op(a) · op(b)` for row-major `m×k` and `k×n` operands; a transposed
/// operand is read from its stored `k×m` (or `n×k`) layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements the
    // strides address, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad(g: &[f32], width: usize) -> Tensor {
    let mut acc = vec![0.0f64; width];
    for row in g.chunks(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::from_vec(&[width], acc.into_iter().map(|v| v as f32).collect()).expect("bias shape")
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy (computed in `f64`) and, if asked, its gradient
/// with respect to the logits.
fn softmax_xent(logits: &[f32], labels: &[usize], classes: usize, want_grad: bool) -> (f64, Vec<f32>) {
    let batch = labels.len();
    let mut grad = if want_grad { vec![0.0f32; logits.len()] } else { Vec::new() };
    let mut total = 0.0f64;
    for (r, (row, &label)) in logits.chunks(classes).zip(labels).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label] as f64;
        if want_grad {
            for (j, &v) in row.iter().enumerate() {
                let p = (v as f64 - lse).exp();
                let target = if j == label { 1.0 } else { 0.0 };
                grad[r * classes + j] = ((p - target) / batch as f64) as f32;
            }
        }
    }
    (total / batch as f64, grad)
}

/// `w − η·g` for every parameter.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f32) -> Result<ModelParams, NnError> {
    let mut out = params.clone();
    sgd_update(&mut out, grads, lr)?;
    Ok(out)
}

/// In-place form of [`sgd_step`].
pub fn sgd_update(params: &mut ModelParams, grads: &ModelParams, lr: f32) -> Result<(), NnError> {
    params.check_congruent(grads)?;
    for (p, g) in params.entries_mut().iter_mut().zip(grads.entries()) {
        for (w, &d) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Learning rate, local epochs and minibatch size for one client's training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub learning_rate: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<(), NnError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(NnError::Hyperparams(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::Hyperparams("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Run-level settings of a federated experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub total_clients: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn local(&self) -> LocalTraining {
        LocalTraining {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
        }
    }

    /// Zero rounds and zero local epochs are allowed (they make no-op runs).
    pub fn validate(&self) -> Result<(), NnError> {
        self.local().validate()?;
        if self.total_clients == 0 {
            return Err(NnError::Hyperparams("at least one client is required".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(NnError::Hyperparams(format!(
                "clients per round must be in 1..={}, got {}",
                self.total_clients, self.clients_per_round
            )));
        }
        Ok(())
    }
}

/// `epochs` passes of shuffled minibatch SGD over the given samples.
///
/// Each epoch reshuffles with `rng`; the trailing partial batch is kept.
pub fn train_local(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &LocalTraining,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams, NnError> {
    cfg.validate()?;
    let mut model = params.clone();
    if indices.is_empty() {
        return Ok(model);
    }
    let mut order = indices.to_vec();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.gather(chunk);
            let (_, grads) = arch.loss_and_grad(&model, &batch)?;
            sgd_update(&mut model, &grads, cfg.learning_rate)?;
        }
    }
    Ok(model)
}

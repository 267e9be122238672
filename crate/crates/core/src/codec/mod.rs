//! Residual pooling: turning a locally trained model into a compact delta and
//! back.
//!
//! A client computes the residual `after − before` of its model, optionally
//! drops low-contribution output filters, and collapses every `(n, s, s, m)`
//! kernel residual to its `(n, 1, 1, m)` spatial mean. Biases and dense
//! weights travel raw. The server averages the pooled deltas of a round, and
//! any model is recovered as `G⁰ + expand(Σ aggregated deltas)`.

mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ModelParams, ParamEntry, ParamsError, Role};
use crate::tensor::{Tensor, TensorError};

pub use wire::{
    count_bytes, count_bytes_full, decode, encode, encode_full, Frame, WireError, FRAME_OVERHEAD, MAGIC, VERSION,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("entry `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error("delta entry {index} (`{delta}`) does not line up with model entry `{model}`")]
    Incongruent { index: usize, delta: String, model: String },
    #[error("delta has {delta} entries but the model has {model}")]
    EntryCount { delta: usize, model: usize },
    #[error("cannot aggregate an empty list of deltas")]
    EmptyAggregate,
    #[error("invalid aggregation weights: {0}")]
    BadWeights(String),
    #[error("top fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("threshold must be non-negative, got {0}")]
    BadThreshold(f32),
    #[error("entry `{name}`: mask covers {mask} filters but the tensor has {filters}")]
    MaskLength { name: String, mask: usize, filters: usize },
}

fn tensor_err(name: &str) -> impl FnOnce(TensorError) -> CodecError + '_ {
    move |source| CodecError::Tensor { name: name.to_string(), source }
}

/// One bit per output filter (last tensor axis); `true` means transmitted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterMask(Vec<bool>);

impl FilterMask {
    pub fn all(filters: usize) -> Self {
        FilterMask(vec![true; filters])
    }

    pub fn none(filters: usize) -> Self {
        FilterMask(vec![false; filters])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        FilterMask(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_set(&self, filter: usize) -> bool {
        self.0[filter]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &FilterMask) -> FilterMask {
        FilterMask(self.0.iter().zip(&other.0).map(|(&a, &b)| a || b).collect())
    }
}

/// A named tensor of a delta, with an optional output-filter mask.
///
/// Masked-out filters always hold zeros in `tensor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
    pub mask: Option<FilterMask>,
}

impl DeltaEntry {
    /// Elements that actually travel: all of them, or only unmasked filters.
    pub fn payload_len(&self) -> usize {
        match &self.mask {
            None => self.tensor.numel(),
            Some(mask) => {
                let filters = mask.len().max(1);
                self.tensor.numel() / filters * mask.kept()
            }
        }
    }

    fn is_kernel(&self) -> bool {
        self.role == Role::Kernel && self.tensor.dims().len() == 4
    }
}

/// Model-shaped residual `after − before`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDelta {
    pub entries: Vec<DeltaEntry>,
}

/// A residual with every conv kernel pooled to `(n, 1, 1, m)`; other entries
/// keep their shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledDelta {
    pub entries: Vec<DeltaEntry>,
}

impl PooledDelta {
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// All-zero delta congruent with the pooled form of `model`.
    pub fn zeros_for(model: &ModelParams) -> PooledDelta {
        let entries = model
            .entries()
            .iter()
            .map(|e| {
                let tensor = if e.role == Role::Kernel && e.tensor.dims().len() == 4 {
                    let d = e.tensor.dims();
                    Tensor::zeros(crate::tensor::Shape::new([d[0], 1, 1, d[3]]).expect("positive extents"))
                } else {
                    Tensor::zeros(e.tensor.shape().clone())
                };
                DeltaEntry { name: e.name.clone(), role: e.role, tensor, mask: None }
            })
            .collect();
        PooledDelta { entries }
    }

    /// A full model viewed as an unpooled delta.
    pub fn from_params(model: &ModelParams) -> PooledDelta {
        PooledDelta {
            entries: model
                .entries()
                .iter()
                .map(|e| DeltaEntry { name: e.name.clone(), role: e.role, tensor: e.tensor.clone(), mask: None })
                .collect(),
        }
    }

    /// The inverse of [`PooledDelta::from_params`]; masks are dropped.
    pub fn into_params(self) -> Result<ModelParams, CodecError> {
        let entries =
            self.entries.into_iter().map(|e| ParamEntry { name: e.name, role: e.role, tensor: e.tensor }).collect();
        Ok(ModelParams::new(entries)?)
    }

    /// All-zero delta with exactly the shapes of `model` (no pooling).
    pub fn zeros_unpooled(model: &ModelParams) -> PooledDelta {
        PooledDelta {
            entries: model
                .entries()
                .iter()
                .map(|e| DeltaEntry {
                    name: e.name.clone(),
                    role: e.role,
                    tensor: Tensor::zeros(e.tensor.shape().clone()),
                    mask: None,
                })
                .collect(),
        }
    }

    /// Same names, roles and shapes, in order. Masks may differ.
    pub fn check_congruent(&self, other: &PooledDelta) -> Result<(), CodecError> {
        if self.entries.len() != other.entries.len() {
            return Err(CodecError::EntryCount { delta: other.entries.len(), model: self.entries.len() });
        }
        for (index, (a, b)) in self.entries.iter().zip(&other.entries).enumerate() {
            if a.name != b.name || a.role != b.role || a.tensor.shape() != b.tensor.shape() {
                return Err(CodecError::Incongruent {
                    index,
                    delta: format!("{} {}", b.name, b.tensor.shape()),
                    model: format!("{} {}", a.name, a.tensor.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.data().iter().all(|&v| v == 0.0))
    }

    pub fn to_bits(&self) -> Vec<u32> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits())).collect()
    }
}

/// `after − before`, entry by entry.
pub fn compute_residual(after: &ModelParams, before: &ModelParams) -> Result<ResidualDelta, CodecError> {
    let diff = after.sub(before)?;
    let entries = diff
        .entries()
        .iter()
        .map(|e| DeltaEntry { name: e.name.clone(), role: e.role, tensor: e.tensor.clone(), mask: None })
        .collect();
    Ok(ResidualDelta { entries })
}

/// Spatial mean pooling of every conv-kernel residual; everything else is
/// copied. Masks carry over unchanged.
pub fn pool_residual(r: &ResidualDelta) -> Result<PooledDelta, CodecError> {
    let entries = r
        .entries
        .iter()
        .map(|e| {
            let tensor = if e.is_kernel() {
                e.tensor.spatial_mean_pool().map_err(tensor_err(&e.name))?
            } else {
                e.tensor.clone()
            };
            Ok(DeltaEntry { name: e.name.clone(), role: e.role, tensor, mask: e.mask.clone() })
        })
        .collect::<Result<_, CodecError>>()?;
    Ok(PooledDelta { entries })
}

/// Wraps an unpooled residual for transmission as-is (identity codec).
pub fn identity_pooled(r: &ResidualDelta) -> PooledDelta {
    PooledDelta { entries: r.entries.clone() }
}

/// Which output filters of each conv kernel are transmitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "value")]
pub enum FilterPolicy {
    #[default]
    All,
    /// Keep filters whose `|contribution|` is strictly greater than the value.
    Threshold(f32),
    /// Keep the `ceil(p·m)` filters with the largest `|contribution|`.
    TopFraction(f64),
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), CodecError> {
        match *self {
            FilterPolicy::All => Ok(()),
            FilterPolicy::Threshold(t) if t >= 0.0 => Ok(()),
            FilterPolicy::Threshold(t) => Err(CodecError::BadThreshold(t)),
            FilterPolicy::TopFraction(p) if p > 0.0 && p <= 1.0 => Ok(()),
            FilterPolicy::TopFraction(p) => Err(CodecError::BadFraction(p)),
        }
    }
}

/// Signed sum of each output filter's kernel elements, in row-major order.
pub fn filter_contributions(kernel: &Tensor) -> Vec<f64> {
    let m = *kernel.dims().last().expect("non-empty shape");
    let mut sums = vec![0.0f64; m];
    for (i, &v) in kernel.data().iter().enumerate() {
        sums[i % m] += v as f64;
    }
    sums
}

fn select_mask(contrib: &[f64], policy: FilterPolicy) -> FilterMask {
    match policy {
        FilterPolicy::All => FilterMask::all(contrib.len()),
        FilterPolicy::Threshold(t) => FilterMask::from_bits(contrib.iter().map(|c| c.abs() > t as f64).collect()),
        FilterPolicy::TopFraction(p) => {
            let keep = ((p * contrib.len() as f64).ceil() as usize).clamp(1, contrib.len());
            let mut order: Vec<usize> = (0..contrib.len()).collect();
            // Stable sort: equal magnitudes keep the lower filter index first.
            order.sort_by(|&a, &b| contrib[b].abs().total_cmp(&contrib[a].abs()));
            let mut bits = vec![false; contrib.len()];
            for &j in &order[..keep] {
                bits[j] = true;
            }
            FilterMask::from_bits(bits)
        }
    }
}

/// Masks out conv-kernel output filters whose contribution fails `policy`,
/// zeroing their values. Non-kernel entries are untouched and unmasked.
pub fn filter_select(r: &ResidualDelta, policy: FilterPolicy) -> Result<ResidualDelta, CodecError> {
    policy.validate()?;
    let entries = r
        .entries
        .iter()
        .map(|e| {
            if !e.is_kernel() {
                return e.clone();
            }
            let mut mask = select_mask(&filter_contributions(&e.tensor), policy);
            if let Some(prev) = &e.mask {
                mask = FilterMask::from_bits(mask.bits().iter().zip(prev.bits()).map(|(&a, &b)| a && b).collect());
            }
            let mut tensor = e.tensor.clone();
            apply_mask(&mut tensor, &mask);
            DeltaEntry { name: e.name.clone(), role: e.role, tensor, mask: Some(mask) }
        })
        .collect();
    Ok(ResidualDelta { entries })
}

fn apply_mask(tensor: &mut Tensor, mask: &FilterMask) {
    let m = mask.len();
    for (i, v) in tensor.data_mut().iter_mut().enumerate() {
        if !mask.is_set(i % m) {
            *v = 0.0;
        }
    }
}

/// Unweighted entrywise mean of the deltas, summed in list order in `f64`.
///
/// The result's mask is the union of the inputs' masks (absent if any input
/// is unmasked for that entry).
pub fn aggregate(deltas: &[PooledDelta]) -> Result<PooledDelta, CodecError> {
    aggregate_weighted(deltas, &vec![1.0; deltas.len()])
}

/// `Σ wᵢ·dᵢ / Σ wᵢ`, accumulated in list order in `f64`.
pub fn aggregate_weighted(deltas: &[PooledDelta], weights: &[f64]) -> Result<PooledDelta, CodecError> {
    let first = deltas.first().ok_or(CodecError::EmptyAggregate)?;
    if weights.len() != deltas.len() {
        return Err(CodecError::BadWeights(format!("{} weights for {} deltas", weights.len(), deltas.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(CodecError::BadWeights(format!("weights must be non-negative with a positive sum: {weights:?}")));
    }
    for d in &deltas[1..] {
        first.check_congruent(d)?;
    }
    let total: f64 = weights.iter().sum();
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| {
            // -0.0 is the additive identity, so a single input passes through bitwise.
            let mut acc = vec![-0.0f64; e.tensor.numel()];
            for (d, &w) in deltas.iter().zip(weights) {
                for (a, &v) in acc.iter_mut().zip(d.entries[k].tensor.data()) {
                    *a += w * v as f64;
                }
            }
            let data = acc.into_iter().map(|a| (a / total) as f32).collect();
            let mask = deltas
                .iter()
                .map(|d| d.entries[k].mask.clone())
                .reduce(|a, b| match (a, b) {
                    (Some(a), Some(b)) => Some(a.union(&b)),
                    _ => None,
                })
                .flatten();
            DeltaEntry {
                name: e.name.clone(),
                role: e.role,
                tensor: Tensor::new(e.tensor.shape().clone(), data).expect("same shape"),
                mask,
            }
        })
        .collect();
    Ok(PooledDelta { entries })
}

/// Entrywise sum of two congruent deltas (`a + b` in `f32`).
pub fn add_deltas(a: &PooledDelta, b: &PooledDelta) -> Result<PooledDelta, CodecError> {
    a.check_congruent(b)?;
    let entries = a
        .entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| {
            let tensor = x.tensor.add(&y.tensor).map_err(tensor_err(&x.name))?;
            let mask = match (&x.mask, &y.mask) {
                (Some(p), Some(q)) => Some(p.union(q)),
                _ => None,
            };
            Ok(DeltaEntry { name: x.name.clone(), role: x.role, tensor, mask })
        })
        .collect::<Result<_, CodecError>>()?;
    Ok(PooledDelta { entries })
}

/// Sum of a run of aggregated deltas folded oldest-first:
/// `((zero + d₁) + d₂) + …`. An empty history gives the zero delta of
/// `template`.
pub fn cumulative_catch_up(template: &PooledDelta, history: &[PooledDelta]) -> Result<PooledDelta, CodecError> {
    let mut acc = PooledDelta {
        entries: template
            .entries
            .iter()
            .map(|e| DeltaEntry {
                name: e.name.clone(),
                role: e.role,
                tensor: Tensor::zeros(e.tensor.shape().clone()),
                mask: None,
            })
            .collect(),
    };
    for d in history {
        let mut next = add_deltas(&acc, d)?;
        // Unmasked accumulator: masks only describe single transmissions.
        next.entries.iter_mut().for_each(|e| e.mask = None);
        acc = next;
    }
    Ok(acc)
}

/// `base + d`, with each pooled kernel broadcast back to `(n, s, s, m)` first.
/// Masked-out filters hold zeros and therefore leave the base untouched.
pub fn apply_delta(base: &ModelParams, d: &PooledDelta) -> Result<ModelParams, CodecError> {
    if base.len() != d.entries.len() {
        return Err(CodecError::EntryCount { delta: d.entries.len(), model: base.len() });
    }
    let entries = base
        .entries()
        .iter()
        .zip(&d.entries)
        .enumerate()
        .map(|(index, (b, e))| {
            if b.name != e.name || b.role != e.role {
                return Err(CodecError::Incongruent { index, delta: e.name.clone(), model: b.name.clone() });
            }
            let update = if e.is_kernel() && e.tensor.dims() != b.tensor.dims() {
                let (_, s, _) = b.tensor.shape().kernel_dims().map_err(tensor_err(&b.name))?;
                e.tensor.broadcast_expand(s).map_err(tensor_err(&e.name))?
            } else {
                e.tensor.clone()
            };
            let tensor = b.tensor.add(&update).map_err(tensor_err(&b.name))?;
            Ok(ParamEntry { name: b.name.clone(), role: b.role, tensor })
        })
        .collect::<Result<Vec<_>, CodecError>>()?;
    Ok(ModelParams::new(entries)?)
}

/// Model-shaped view of a pooled delta (kernels broadcast to `s × s`), using
/// `like` for the spatial extents.
pub fn expand_delta(like: &ModelParams, d: &PooledDelta) -> Result<ModelParams, CodecError> {
    apply_delta(&like.zeros_like(), d)
}

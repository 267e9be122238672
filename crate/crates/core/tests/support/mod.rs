//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpn_core::codec::{DeltaEntry, FilterMask, PooledDelta};
use rpn_core::data::Batch;
use rpn_core::{Architecture, LayerSpec, ModelParams, ParamEntry, Role, Tensor};

/// `G⁰` plus the deltas summed one by one in pooled space, each value folded
/// oldest first, then broadcast over the kernel window by explicit loops.
pub fn sequential_oracle(g0: &ModelParams, history: &[PooledDelta]) -> ModelParams {
    let mut out = g0.clone();
    for (k, entry) in out.entries_mut().iter_mut().enumerate() {
        let pooled_len = history.first().map_or(0, |d| d.entries[k].tensor.numel());
        let mut sum = vec![0.0f32; pooled_len];
        for d in history {
            for (s, &v) in sum.iter_mut().zip(d.entries[k].tensor.data()) {
                *s += v;
            }
        }
        if history.is_empty() {
            continue;
        }
        let dims = entry.tensor.dims().to_vec();
        let data = entry.tensor.data_mut();
        if entry.role == Role::Kernel && dims.len() == 4 && pooled_len != data.len() {
            let (n, s, m) = (dims[0], dims[1], dims[3]);
            for i in 0..n {
                for a in 0..s {
                    for b in 0..s {
                        for j in 0..m {
                            data[((i * s + a) * s + b) * m + j] += sum[i * m + j];
                        }
                    }
                }
            }
        } else {
            for (x, s) in data.iter_mut().zip(&sum) {
                *x += s;
            }
        }
    }
    out
}

/// Encoded frame size from the byte layout, entry by entry.
pub fn frame_bytes(entries: &[(usize, usize, Option<usize>, usize)]) -> usize {
    // magic 4, version 1, round 4, count 2, crc 4
    let header = 4 + 1 + 4 + 2 + 4;
    header
        + entries
            .iter()
            .map(|&(name_len, rank, mask_bits, payload)| {
                let mask = mask_bits.map_or(0, |bits| 4 + bits.div_ceil(8));
                1 + name_len + 1 + 1 + 4 * rank + 1 + mask + 4 + 4 * payload
            })
            .sum::<usize>()
}

pub fn full_frame_bytes(p: &ModelParams) -> usize {
    frame_bytes(
        &p.entries().iter().map(|e| (e.name.len(), e.tensor.dims().len(), None, e.tensor.numel())).collect::<Vec<_>>(),
    )
}

pub fn delta_frame_bytes(d: &PooledDelta) -> usize {
    frame_bytes(
        &d.entries
            .iter()
            .map(|e| {
                let rows = e.tensor.numel() / e.tensor.dims().last().unwrap();
                let payload = match &e.mask {
                    Some(m) => rows * m.bits().iter().filter(|&&b| b).count(),
                    None => e.tensor.numel(),
                };
                (e.name.len(), e.tensor.dims().len(), e.mask.as_ref().map(|m| m.len()), payload)
            })
            .collect::<Vec<_>>(),
    )
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor for gradients that are essentially zero.
pub const FD_FLOOR: f64 = 1e-4;

struct Forward {
    loss: f64,
    /// Sign pattern of every ReLU input, to detect kinks crossed by a step.
    pattern: Vec<bool>,
}

/// Naive 64-bit forward pass. `params[k]` is the k-th parameter tensor.
fn forward64(arch: &Architecture, params: &[Vec<f64>], x: &[f64], labels: &[usize]) -> Forward {
    let (h, w, c0) = arch.input();
    let batch = labels.len();
    let mut pattern = Vec::new();
    let mut total = 0.0;
    for b in 0..batch {
        let mut act: Vec<f64> = x[b * h * w * c0..(b + 1) * h * w * c0].to_vec();
        let mut p = 0;
        for layer in arch.layers() {
            match *layer {
                LayerSpec::Conv2d { in_channels: n, out_channels: m, kernel: s } => {
                    let (k, bias) = (&params[p], &params[p + 1]);
                    p += 2;
                    let pad = (s as isize - 1) / 2;
                    let mut out = vec![0.0; h * w * m];
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            for j in 0..m {
                                let mut acc = bias[j];
                                for a in 0..s as isize {
                                    for bb in 0..s as isize {
                                        let (sy, sx) = (y + a - pad, xx + bb - pad);
                                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                            continue;
                                        }
                                        for i in 0..n {
                                            let v = act[((sy as usize) * w + sx as usize) * n + i];
                                            acc += v * k[((i * s + a as usize) * s + bb as usize) * m + j];
                                        }
                                    }
                                }
                                out[((y as usize) * w + xx as usize) * m + j] = acc;
                            }
                        }
                    }
                    act = out;
                }
                LayerSpec::Dense { in_features, out_features } => {
                    let (wt, bias) = (&params[p], &params[p + 1]);
                    p += 2;
                    act = (0..out_features)
                        .map(|o| bias[o] + (0..in_features).map(|i| act[i] * wt[i * out_features + o]).sum::<f64>())
                        .collect();
                }
                LayerSpec::Relu => {
                    for v in act.iter_mut() {
                        pattern.push(*v > 0.0);
                        *v = v.max(0.0);
                    }
                }
                LayerSpec::Flatten => {}
                LayerSpec::SoftmaxXent => {
                    let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + act.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - act[labels[b]];
                }
            }
        }
    }
    Forward { loss: total / batch as f64, pattern }
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_relative_error: f64,
}

/// Central differences on every parameter of a random batch.
pub fn fd_check(arch: &Architecture, batch_size: usize, seed: u64) -> Result<FdReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch.init_params(seed);
    let (h, w, c) = arch.input();
    let classes = arch.num_classes();
    let x: Vec<f32> = (0..batch_size * h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..classes)).collect();
    let batch = Batch { inputs: Tensor::from_vec(&[batch_size, h, w, c], x.clone()).unwrap(), labels: labels.clone() };
    let (loss, grads) = arch.loss_and_grad(&params, &batch).map_err(|e| e.to_string())?;

    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut p64: Vec<Vec<f64>> =
        params.entries().iter().map(|e| e.tensor.data().iter().map(|&v| v as f64).collect()).collect();
    let base = forward64(arch, &p64, &x64, &labels);
    if (base.loss - loss as f64).abs() > 1e-5 * base.loss.abs().max(1.0) {
        return Err(format!("loss {loss} vs 64-bit {}", base.loss));
    }

    let mut report = FdReport { checked: 0, skipped: 0, max_relative_error: 0.0 };
    for (k, entry) in grads.entries().iter().enumerate() {
        for idx in 0..entry.tensor.numel() {
            let orig = p64[k][idx];
            p64[k][idx] = orig + FD_STEP;
            let plus = forward64(arch, &p64, &x64, &labels);
            p64[k][idx] = orig - FD_STEP;
            let minus = forward64(arch, &p64, &x64, &labels);
            p64[k][idx] = orig;
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                report.skipped += 1;
                continue;
            }
            let fd = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let an = entry.tensor.data()[idx] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
            if rel >= FD_TOLERANCE {
                return Err(format!("{}[{idx}]: analytic {an:e}, numeric {fd:e}, relative error {rel:e}", entry.name));
            }
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    if report.skipped * 10 > report.checked {
        return Err(format!("{} coordinates crossed a ReLU kink, {} checked", report.skipped, report.checked));
    }
    Ok(report)
}

/// One network per layer kind: dense, conv (odd and even kernels), ReLU after
/// conv and after dense.
pub fn fd_suite() -> Vec<(&'static str, Architecture, usize, u64)> {
    vec![
        (
            "dense",
            Architecture::new(
                (2, 3, 1),
                vec![LayerSpec::Flatten, LayerSpec::Dense { in_features: 6, out_features: 4 }, LayerSpec::SoftmaxXent],
            )
            .unwrap(),
            5,
            1,
        ),
        (
            "two conv",
            Architecture::new(
                (5, 5, 2),
                vec![
                    LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3 },
                    LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel: 3 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { in_features: 50, out_features: 4 },
                    LayerSpec::SoftmaxXent,
                ],
            )
            .unwrap(),
            3,
            2,
        ),
        ("relu conv stack", Architecture::conv_stack((6, 6, 1), &[3, 2], 5, 3).unwrap(), 2, 3),
        (
            "even kernel, dense relu",
            Architecture::new(
                (4, 4, 2),
                vec![
                    LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { in_features: 48, out_features: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { in_features: 5, out_features: 3 },
                    LayerSpec::SoftmaxXent,
                ],
            )
            .unwrap(),
            4,
            4,
        ),
    ]
}

// Contents of the committed golden frames.

fn ramp(n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|i| (i as f32 - n as f32 / 2.0) * scale).collect()
}

pub fn masked_delta() -> PooledDelta {
    let mut kernel = ramp(6, 0.125);
    // Filter 1 of (2, 1, 1, 3) is masked out and holds zeros.
    kernel[1] = 0.0;
    kernel[4] = 0.0;
    PooledDelta {
        entries: vec![
            DeltaEntry {
                name: "conv0.kernel".into(),
                role: Role::Kernel,
                tensor: Tensor::from_vec(&[2, 1, 1, 3], kernel).unwrap(),
                mask: Some(FilterMask::from_bits(vec![true, false, true])),
            },
            DeltaEntry {
                name: "conv0.bias".into(),
                role: Role::Bias,
                tensor: Tensor::from_vec(&[3], vec![0.5, -0.25, 1e-3]).unwrap(),
                mask: None,
            },
            DeltaEntry {
                name: "dense3.weight".into(),
                role: Role::WeightMatrix,
                tensor: Tensor::from_vec(&[4, 2], ramp(8, 0.0625)).unwrap(),
                mask: None,
            },
        ],
    }
}

pub fn full_model() -> ModelParams {
    ModelParams::new(vec![
        ParamEntry {
            name: "conv0.kernel".into(),
            role: Role::Kernel,
            tensor: Tensor::from_vec(&[1, 3, 3, 2], ramp(18, 0.01)).unwrap(),
        },
        ParamEntry {
            name: "conv0.bias".into(),
            role: Role::Bias,
            tensor: Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(),
        },
    ])
    .unwrap()
}

pub fn silent_delta() -> PooledDelta {
    PooledDelta {
        entries: vec![DeltaEntry {
            name: "k".into(),
            role: Role::Kernel,
            tensor: Tensor::from_vec(&[3, 1, 1, 9], vec![0.0; 27]).unwrap(),
            mask: Some(FilterMask::none(9)),
        }],
    }
}

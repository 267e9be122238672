use proptest::prelude::*;
use rpn_core::codec::{
    self, compute_residual, filter_select, pool_residual, DeltaEntry, FilterMask, FilterPolicy, PooledDelta,
    ResidualDelta,
};
use rpn_core::data::partition_random;
use rpn_core::{Role, Shape, Tensor};

fn kernel_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..5, prop::sample::select(vec![2usize, 3, 5]), 1usize..6).prop_flat_map(|(n, s, m)| {
        prop::collection::vec(-10.0f32..10.0, n * s * s * m)
            .prop_map(move |data| Tensor::from_vec(&[n, s, s, m], data).unwrap())
    })
}

fn delta_strategy() -> impl Strategy<Value = PooledDelta> {
    let entry = (
        "[a-z][a-z0-9._]{0,12}",
        prop::sample::select(vec![Role::Kernel, Role::Bias, Role::WeightMatrix]),
        prop::collection::vec(1usize..4, 1..5),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(name, role, dims, masked, bits)| {
            let numel: usize = dims.iter().product();
            let m = *dims.last().unwrap();
            let mask = masked.then(|| FilterMask::from_bits((0..m).map(|j| bits >> j & 1 == 1).collect()));
            let data = (0..numel)
                .map(|i| {
                    let keep = mask.as_ref().map_or(true, |k| k.is_set(i % m));
                    if keep {
                        f32::from_bits((bits.rotate_left(i as u32) as u32 & 0x3fff_ffff) | 0x3000_0000)
                    } else {
                        0.0
                    }
                })
                .collect();
            DeltaEntry { name, role, tensor: Tensor::from_vec(&dims, data).unwrap(), mask }
        });
    prop::collection::vec(entry, 0..5).prop_map(|mut entries| {
        for (i, e) in entries.iter_mut().enumerate() {
            e.name = format!("{}{i}", e.name);
        }
        PooledDelta { entries }
    })
}

fn brute_pool(t: &Tensor) -> Vec<f64> {
    let d = t.dims();
    let (n, s, m) = (d[0], d[1], d[3]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0f64;
            for a in 0..s {
                for b in 0..s {
                    acc += t.data()[((i * s + a) * s + b) * m + j] as f64;
                }
            }
            out[i * m + j] = acc;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pool_then_broadcast_preserves_kernel_sums(k in kernel_strategy()) {
        let s = k.dims()[1];
        let back = k.spatial_mean_pool().unwrap().broadcast_expand(s).unwrap();
        for (x, y) in brute_pool(&back).iter().zip(brute_pool(&k)) {
            prop_assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-3), "{x} vs {y}");
        }
    }

    #[test]
    fn pooled_mean_is_the_kernel_mean(k in kernel_strategy()) {
        let s = k.dims()[1];
        let pooled = k.spatial_mean_pool().unwrap();
        for (p, sum) in pooled.data().iter().zip(brute_pool(&k)) {
            prop_assert_eq!(*p, (sum / (s * s) as f64) as f32);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn broadcast_then_pool_is_identity(n in 1usize..4, s in 1usize..6, m in 1usize..4, seed in any::<u32>()) {
        let data = (0..n * m).map(|i| (seed.wrapping_mul(i as u32 + 1) % 1000) as f32 / 7.0 - 50.0).collect();
        let p = Tensor::from_vec(&[n, 1, 1, m], data).unwrap();
        prop_assert_eq!(p.broadcast_expand(s).unwrap().spatial_mean_pool().unwrap(), p);
    }

    #[test]
    fn add_sub_roundtrip(a in prop::collection::vec(-1e3f32..1e3, 12), b in prop::collection::vec(-1e3f32..1e3, 12)) {
        let x = Tensor::from_vec(&[3, 4], a).unwrap();
        let y = Tensor::from_vec(&[3, 4], b).unwrap();
        let back = x.add(&y).unwrap().sub(&y).unwrap();
        for (u, v) in back.data().iter().zip(x.data()) {
            prop_assert!((u - v).abs() <= 1e-3);
        }
        prop_assert_eq!(x.add(&y).unwrap(), y.add(&x).unwrap());
    }

    #[test]
    fn codec_roundtrip_and_exact_size(d in delta_strategy(), round in any::<u32>()) {
        let bytes = codec::encode(round, &d).unwrap();
        prop_assert_eq!(bytes.len(), codec::count_bytes(&d));
        let frame = codec::decode(&bytes).unwrap();
        prop_assert_eq!(frame.round, round);
        let back = frame.into_delta();
        prop_assert_eq!(back.to_bits(), d.to_bits());
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(codec::encode(round, &back).unwrap(), bytes);
    }

    #[test]
    fn grand_mean_survives_pooling(k in kernel_strategy()) {
        let r = ResidualDelta { entries: vec![DeltaEntry { name: "k".into(), role: Role::Kernel, tensor: k.clone(), mask: None }] };
        let pooled = pool_residual(&r).unwrap();
        let expanded = pooled.entries[0].tensor.broadcast_expand(k.dims()[1]).unwrap();
        let mean = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let (a, b) = (mean(&expanded), mean(&k));
        // Relative to the mean magnitude: a near-zero grand mean of large values
        // still carries the f32 rounding of each pooled value.
        let scale = k.data().iter().map(|v| v.abs() as f64).sum::<f64>() / k.numel() as f64;
        prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(scale), "{a} vs {b}");
    }

    #[test]
    fn masked_filters_carry_no_payload(k in kernel_strategy(), p in 0.01f64..=1.0) {
        let r = ResidualDelta { entries: vec![DeltaEntry { name: "k".into(), role: Role::Kernel, tensor: k.clone(), mask: None }] };
        let sel = pool_residual(&filter_select(&r, FilterPolicy::TopFraction(p)).unwrap()).unwrap();
        let e = &sel.entries[0];
        let m = k.dims()[3];
        let kept = e.mask.as_ref().unwrap().kept();
        prop_assert_eq!(kept, ((p * m as f64).ceil() as usize).clamp(1, m));
        prop_assert_eq!(e.payload_len(), k.dims()[0] * kept);
        prop_assert_eq!(codec::decode(&codec::encode(0, &sel).unwrap()).unwrap().into_delta(), sel);
    }

    #[test]
    fn partitions_are_disjoint_and_exhaustive(count in 10usize..400, n in 1usize..10, seed in any::<u64>(), jitter in 0.0f64..0.9) {
        prop_assume!(n <= count);
        let plan = partition_random(count, n, seed, jitter).unwrap();
        let mut all: Vec<usize> = plan.assignments.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
        let q = count as f64 / n as f64;
        for &size in &plan.sizes() {
            prop_assert!(size as f64 >= (q * (1.0 - jitter)).floor() && size as f64 <= (q * (1.0 + jitter)).ceil());
        }
        prop_assert_eq!(plan, partition_random(count, n, seed, jitter).unwrap());
    }
}

#[test]
fn single_kernel_payload_ratio_is_nine() {
    let model = rpn_core::ModelParams::new(vec![rpn_core::ParamEntry {
        name: "k".into(),
        role: Role::Kernel,
        tensor: Tensor::zeros(Shape::new([4, 3, 3, 6]).unwrap()),
    }])
    .unwrap();
    let pooled = pool_residual(&compute_residual(&model, &model).unwrap()).unwrap();
    let header = codec::count_bytes(&PooledDelta { entries: vec![] });
    let entry_overhead = 1 + 1 + 1 + 1 + 16 + 1 + 4;
    let full_payload = codec::count_bytes_full(&model) - header - entry_overhead;
    let pooled_payload = codec::count_bytes(&pooled) - header - entry_overhead;
    assert_eq!(full_payload, 4 * 4 * 9 * 6);
    assert_eq!(full_payload, 9 * pooled_payload);
}

#[test]
fn header_only_and_minimal_frames() {
    let empty = PooledDelta { entries: vec![] };
    assert_eq!(codec::count_bytes(&empty), codec::FRAME_OVERHEAD);
    assert_eq!(codec::encode(3, &empty).unwrap().len(), 15);

    let one = PooledDelta {
        entries: vec![DeltaEntry {
            name: "k".into(),
            role: Role::Kernel,
            tensor: Tensor::from_vec(&[1, 1, 1, 1], vec![0.0]).unwrap(),
            mask: None,
        }],
    };
    let bytes = codec::encode(0, &one).unwrap();
    // name_len, name, role, rank, 4 dims, flag, then the payload length.
    let len_at = 11 + 1 + 1 + 1 + 1 + 16 + 1;
    assert_eq!(u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().unwrap()), 4);
    assert_eq!(bytes.len(), len_at + 4 + 4 + 4);

    let mut none = one.clone();
    none.entries[0].mask = Some(FilterMask::none(1));
    let bytes = codec::encode(0, &none).unwrap();
    assert_eq!(bytes.len(), codec::count_bytes(&none));
    assert_eq!(codec::decode(&bytes).unwrap().into_delta(), none);
    assert_eq!(none.entries[0].payload_len(), 0);
}

#[test]
fn identical_deltas_aggregate_to_themselves() {
    let d = PooledDelta {
        entries: vec![DeltaEntry {
            name: "w".into(),
            role: Role::WeightMatrix,
            tensor: Tensor::from_vec(&[2, 3], vec![0.1, -0.7, 3.3, 1e-4, 9.9, -2.0]).unwrap(),
            mask: None,
        }],
    };
    let agg = codec::aggregate(&vec![d.clone(); 7]).unwrap();
    for (a, b) in agg.entries[0].tensor.data().iter().zip(d.entries[0].tensor.data()) {
        assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
    }
}

use mgru_core::cells::{BnConfig, Cell, MgruCell, MgruipCell, RecurrentCell};
use mgru_core::context::{splice, splice_backward, splice_indices, ContextSpec, LayerContextPlan};
use mgru_core::network::{model_latency_ms, receptive_field, CellKind, LatencyModel, Model, ModelConfig};
use mgru_core::numerics::{batch_norm, matmul, matmul_nt, matmul_tn, BnMode, BnState, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_strategy(max_order: usize, max_stride: usize) -> impl Strategy<Value = ContextSpec> {
    (0..=max_order, 1..=max_stride, 0..=max_order, 1..=max_stride)
        .prop_map(|(k1, s1, k2, s2)| ContextSpec::new(k1, s1, k2, s2))
}

fn random_cell(mgru: bool, cfg: BnConfig, d: usize, n: usize, rng: &mut ChaCha8Rng) -> Cell {
    if mgru {
        Cell::Mgru(MgruCell::new(d, n, cfg, rng).unwrap())
    } else {
        let p = (d + n - 1).clamp(1, 4);
        Cell::Mgruip(MgruipCell::new(d, n, p, cfg, rng).unwrap())
    }
}

/// Naive gather: every output row is rebuilt from explicit index arithmetic.
fn gather_oracle(h: &Tensor, x: &Tensor, spec: &ContextSpec) -> Vec<f64> {
    let s = h.shape();
    let (frames, batch, n) = (s[0] as i64, s[1], s[2]);
    let at = |t: &Tensor, f: i64, b: usize, c: usize| {
        let f = f.clamp(0, frames - 1) as usize;
        t.data()[(f * batch + b) * n + c]
    };
    let mut out = Vec::new();
    for t in 0..frames {
        for b in 0..batch {
            out.extend((0..n).map(|c| at(x, t, b, c)));
            for i in 1..=spec.k1 as i64 {
                out.extend((0..n).map(|c| at(h, t - i * spec.s1 as i64, b, c)));
            }
            for j in 1..=spec.k2 as i64 {
                out.extend((0..n).map(|c| at(h, t + j * spec.s2 as i64, b, c)));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cell_step_stays_in_range(
        seed in any::<u64>(),
        mgru in any::<bool>(),
        cfg_idx in 0usize..6,
        batch in 2usize..6,
        n in 1usize..6,
        d in 1usize..5,
        scale in 0.1f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BnConfig::grid()[cfg_idx];
        let mut cell = random_cell(mgru, cfg, d, n, &mut rng);
        let x = Tensor::uniform(&[batch, d], scale, &mut rng);
        let h_prev = Tensor::uniform(&[batch, n], scale, &mut rng).map(f64::abs);
        let (h, cache) = cell.step(&x, &h_prev).unwrap();
        for &z in cache.gate().data() {
            prop_assert!(z > 0.0 && z < 1.0, "z = {z}");
        }
        for &c in cache.candidate().data() {
            prop_assert!(c >= 0.0);
        }
        for ((&hv, &p), &c) in h.data().iter().zip(h_prev.data()).zip(cache.candidate().data()) {
            prop_assert!(p.min(c) <= hv && hv <= p.max(c), "{hv} outside [{p}, {c}]");
        }
    }

    #[test]
    fn splice_matches_gather(
        seed in any::<u64>(),
        frames in 1usize..=20,
        batch in 1usize..4,
        n in 1usize..4,
        spec in spec_strategy(3, 7),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::uniform(&[frames, batch, n], 1.0, &mut rng);
        let x = Tensor::uniform(&[frames, batch, n], 1.0, &mut rng);
        let out = splice(&h, &x, &spec).unwrap();
        prop_assert_eq!(out.shape(), &[frames, batch, n * (1 + spec.k1 + spec.k2)][..]);
        prop_assert_eq!(out.data(), &gather_oracle(&h, &x, &spec)[..]);
    }

    #[test]
    fn splice_indices_are_clamped_and_ordered(t in 0usize..50, extra in 1usize..50, spec in spec_strategy(4, 9)) {
        let frames = t + extra;
        let idx = splice_indices(t, frames, &spec).unwrap();
        prop_assert_eq!(idx.len(), spec.k1 + spec.k2);
        let (hist, fut) = idx.split_at(spec.k1);
        prop_assert!(hist.iter().all(|&i| i <= t));
        prop_assert!(fut.iter().all(|&i| i >= t && i < frames));
        prop_assert!(hist.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(fut.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn interior_splice_indices_are_distinct_from_t(spec in spec_strategy(4, 9), margin in 0usize..5) {
        let t = spec.k1 * spec.s1 + margin;
        let frames = t + spec.k2 * spec.s2 + 1;
        let idx = splice_indices(t, frames, &spec).unwrap();
        let (hist, fut) = idx.split_at(spec.k1);
        prop_assert!(idx.iter().all(|&i| i != t));
        prop_assert!(hist.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(fut.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn splice_commutes_with_batch_permutation(seed in any::<u64>(), frames in 1usize..10, spec in spec_strategy(3, 4)) {
        let (batch, n) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::uniform(&[frames, batch, n], 1.0, &mut rng);
        let x = Tensor::uniform(&[frames, batch, n], 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| {
            let w = t.shape()[2];
            let data = t
                .data()
                .chunks(batch * w)
                .flat_map(|frame| perm.iter().flat_map(move |&b| frame[b * w..(b + 1) * w].to_vec()))
                .collect();
            Tensor::from_vec(&[t.shape()[0], batch, w], data).unwrap()
        };
        let lhs = splice(&permute(&h), &permute(&x), &spec).unwrap();
        let rhs = permute(&splice(&h, &x, &spec).unwrap());
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn splice_backward_is_adjoint(seed in any::<u64>(), frames in 1usize..12, spec in spec_strategy(3, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::uniform(&[frames, 2, 3], 1.0, &mut rng);
        let x = Tensor::uniform(&[frames, 2, 3], 1.0, &mut rng);
        let g = Tensor::uniform(&[frames, 2, spec.spliced_width(3)], 1.0, &mut rng);
        let lhs = splice(&h, &x, &spec).unwrap().mul(&g).unwrap().sum();
        let (dx, dh) = splice_backward(&g, &spec, 3).unwrap();
        let rhs = x.mul(&dx).unwrap().sum() + h.mul(&dh).unwrap().sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn context_spec_display_round_trips(spec in spec_strategy(9, 9)) {
        prop_assert_eq!(spec.to_string().parse::<ContextSpec>().unwrap(), spec);
    }

    #[test]
    fn latency_is_base_plus_future_reach(specs in prop::collection::vec(spec_strategy(4, 6), 0..6), base in 0u32..200) {
        let plan = LayerContextPlan::new(specs.clone());
        let lat = LatencyModel { base_latency_ms: f64::from(base), frame_ms: 10.0 };
        let reach: usize = specs.iter().map(|s| s.k2 * s.s2).sum();
        prop_assert_eq!(model_latency_ms(&plan, &lat), f64::from(base) + 10.0 * reach as f64);
        prop_assert_eq!(receptive_field(&plan).future_frames, reach);
        let past_only = LayerContextPlan::new(specs.iter().map(|s| ContextSpec::new(s.k1, s.s1, 0, 1)).collect());
        prop_assert_eq!(model_latency_ms(&past_only, &lat), f64::from(base));
    }

    #[test]
    fn transposed_products_agree(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[m, k], 1.0, &mut rng);
        let w = Tensor::uniform(&[k, n], 1.0, &mut rng);
        let g = Tensor::uniform(&[m, n], 1.0, &mut rng);
        let tn = matmul_tn(&a, &g).unwrap();
        let tn_ref = matmul(&a.transpose().unwrap(), &g).unwrap();
        prop_assert!(tn.sub(&tn_ref).unwrap().max_abs() < 1e-12);
        let nt = matmul_nt(&g, &w).unwrap();
        let nt_ref = matmul(&g, &w.transpose().unwrap()).unwrap();
        prop_assert!(nt.sub(&nt_ref).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_output_is_standardized(seed in any::<u64>(), batch in 2usize..16, c in 1usize..5, scale in 0.5f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[batch, c], scale, &mut rng);
        let mut st = BnState::new(c);
        let (y, _) = batch_norm(&x, &mut st).unwrap();
        for ch in 0..c {
            let col: Vec<f64> = (0..batch).map(|b| y.data()[b * c + ch]).collect();
            let mean = col.iter().sum::<f64>() / batch as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / batch as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1.0 + 1e-9);
        }
        let before = st.clone();
        st.mode = BnMode::Eval;
        let (a, _) = batch_norm(&x, &mut st).unwrap();
        let (b, _) = batch_norm(&x, &mut st).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(&st.running_mean, &before.running_mean);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Outputs up to frame t never read input frames beyond t + total future reach.
    #[test]
    fn truncation_preserves_past_outputs(
        seed in any::<u64>(),
        specs in prop::collection::vec(spec_strategy(2, 3), 1..3),
        frames in 4usize..14,
        cut in 0usize..14,
    ) {
        let plan = LayerContextPlan::new(specs);
        let config = ModelConfig {
            cell_kind: CellKind::MgruipCtx,
            layers: plan.len() + 1,
            cells: 3,
            projection: Some(2),
            input_dim: 2,
            output_dim: 2,
            bn: BnConfig::HYBRID,
            context: plan.clone(),
        };
        let mut model = Model::new(config, seed).unwrap();
        model.set_bn_mode(BnMode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::uniform(&[frames, 2, 2], 1.0, &mut rng);
        let t = cut % frames;
        let keep = (t + plan.total_future_reach() + 1).min(frames);
        let (full, _) = model.forward(&x).unwrap();
        let (part, _) = model.forward(&x.truncate_frames(keep).unwrap()).unwrap();
        prop_assert_eq!(full.frame(t).unwrap(), part.frame(t).unwrap());
    }
}

use dina::formats::*;
use dina_core::grpo::Rollout;
use dina_core::math::{self, to_f32_grid};
use dina_core::rvq::{self, Codebook, CodebookLevel, Projection, RvqModel, TokenGrid};
use dina_core::seqcodec::{build_dataset, DatasetConfig, Mix, Vocab};
use dina_core::toy_model::{ToyConfig, TrainConfig, TrainState};
use dina_core::Tensor;
use proptest::prelude::*;

fn grid_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = Tensor::randn(rows, cols, 1.0, &mut math::rng(seed));
    t.round_f32();
    t
}

fn small_rvq(seed: u64, d_in: usize, dim: usize, sizes: &[usize]) -> RvqModel {
    let levels = sizes
        .iter()
        .enumerate()
        .map(|(i, &k)| CodebookLevel {
            entries: grid_tensor(k, dim, seed + i as u64),
            cluster_size: (0..k).map(|j| to_f32_grid(1.0 + j as f64 * 0.37)).collect(),
            embed_sum: grid_tensor(k, dim, seed + 100 + i as u64),
        })
        .collect();
    RvqModel {
        projection: Projection::new(grid_tensor(d_in, dim, seed + 7), grid_tensor(1, dim, seed + 8)).unwrap(),
        codebook: Codebook::from_levels(levels, 0.95, 1e-5).unwrap(),
        semantic_decoder: Projection::new(grid_tensor(dim, d_in, seed + 9), grid_tensor(1, d_in, seed + 10)).unwrap(),
    }
}

#[test]
fn rvq_checkpoint_without_trailer_uses_identity() {
    let m = small_rvq(1, 3, 3, &[4, 2]);
    let bytes = encode_rvq(&m);
    let cut = bytes.windows(4).rposition(|w| w == b"PROJ").unwrap();
    let back = decode_rvq(&bytes[..cut]).unwrap();
    assert_eq!(back.codebook.levels(), m.codebook.levels());
    assert_eq!(back.projection, Projection::identity(3));
}

#[test]
fn trained_tokenizer_survives_checkpoint() {
    let x = rvq::synthetic_features(256, 8, 3);
    let cfg = rvq::RvqTrainConfig { sizes: vec![8, 4], dim: 8, steps: 20, batch_size: 64, ..Default::default() };
    let (model, _) = rvq::train_rvq(&x, &cfg).unwrap();
    let back = decode_rvq(&encode_rvq(&model)).unwrap();
    // f32 storage: token assignments survive unless a distance tie is within rounding
    let a = rvq::quantize(&x, &model.codebook, &model.projection).unwrap().token_grid;
    let b = rvq::quantize(&x, &back.codebook, &back.projection).unwrap().token_grid;
    let same = a.tokens().iter().zip(b.tokens()).filter(|(p, q)| p == q).count();
    assert!(same as f64 >= 0.99 * a.tokens().len() as f64);
    assert_eq!(encode_rvq(&back), encode_rvq(&decode_rvq(&encode_rvq(&back)).unwrap()));
}

#[test]
fn toy_checkpoint_restores_training_state() {
    let cfg = ToyConfig { hidden: 16, layers: 1, heads: 2, ffn_hidden: 32, prebuffer_hidden: 16, depth_width: 16, depth_layers: 1, depth_heads: 2, levels: vec![4, 4], text_vocab: 16, max_seq_len: 256 };
    let mut st = TrainState::new(&cfg, TrainConfig::default()).unwrap();
    let batch = dina_core::toy_model::memorization_batch(&cfg.vocab(), 2, 0).unwrap();
    st.train(std::slice::from_ref(&batch), 2).unwrap();
    let back = TrainState::from_tensors(decode_named(&encode_named(&st.to_tensors())).unwrap()).unwrap();
    assert_eq!(back.store, st.store);
    assert_eq!(back.adam, st.adam);
    assert_eq!(back.model, st.model);
    assert_eq!(back.train, st.train);
    // the loss history is informational and stored at f32 precision
    let rounded: Vec<f64> = st.history.iter().map(|&v| to_f32_grid(v)).collect();
    assert_eq!(back.history, rounded);
}

fn arb_rollout() -> impl Strategy<Value = Rollout> {
    (1usize..5, 1usize..4, any::<u64>()).prop_map(|(t, l, seed)| {
        let g = |n: usize, s: u64| -> Vec<f64> { grid_tensor(1, n, s).data.iter().map(|v| -v.abs()).collect() };
        let lp = g(t * l, seed);
        let op = g(t * l, seed ^ 1);
        Rollout {
            group: (seed % 3) as u32,
            reward: (seed % 1000) as f64 / 997.0,
            actions: (0..t).map(|i| (0..l).map(|j| ((seed >> (i + j)) % 9) as u32).collect()).collect(),
            actor_logp: lp.chunks(l).map(<[f64]>::to_vec).collect(),
            old_logp: op.chunks(l).map(<[f64]>::to_vec).collect(),
            sampler_prob: g(t, seed ^ 2).iter().map(|v| math::exp(*v)).map(to_f32_grid).collect(),
            actor_prob: g(t, seed ^ 3).iter().map(|v| math::exp(*v)).map(to_f32_grid).collect(),
            entropy: seed as f64 / 3.0,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rvq_round_trip(seed in 0u64..1000, d_in in 1usize..5, dim in 1usize..5, sizes in prop::collection::vec(1usize..6, 1..4)) {
        let m = small_rvq(seed, d_in, dim, &sizes);
        prop_assert_eq!(decode_rvq(&encode_rvq(&m)).unwrap(), m);
    }

    #[test]
    fn features_round_trip(rows in 1usize..20, cols in 1usize..10, seed in any::<u64>()) {
        let x = grid_tensor(rows, cols, seed);
        prop_assert_eq!(decode_features(&encode_features(&x)).unwrap(), x);
    }

    #[test]
    fn tokens_round_trip(levels in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let tokens: Vec<u32> = (0..levels * h * w).map(|i| (seed.rotate_left(i as u32) % 1000) as u32).collect();
        let g = TokenGrid::new(tokens, levels, vec![h, w]).unwrap();
        prop_assert_eq!(decode_tokens(&encode_tokens(&g)).unwrap(), g);
    }

    #[test]
    fn shard_round_trip(seed in 0u64..500) {
        let cfg = DatasetConfig { vocab: Vocab::new(32, vec![8, 4, 4]).unwrap(), n_samples: 12, max_seq_len: 256, seed, ..Default::default() };
        let seqs = build_dataset(&Mix::default(), &cfg).unwrap();
        let bytes = encode_shard(&seqs);
        prop_assert_eq!(decode_shard(&bytes).unwrap(), seqs);
        prop_assert!(decode_shard(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rollout_log_round_trip(rs in prop::collection::vec(arb_rollout(), 1..6), verdict in 0u8..3) {
        let v = [Verdict::Unscored, Verdict::Kept, Verdict::Dropped][verdict as usize];
        let log: Vec<(Rollout, Verdict)> = rs.into_iter().map(|r| (r, v)).collect();
        prop_assert_eq!(decode_rollouts(&encode_rollouts(&log)).unwrap(), log);
    }

    #[test]
    fn decoders_never_panic_on_garbage(bytes in prop::collection::vec(any::<u8>(), 0..200), which in 0usize..6) {
        let magic: [&[u8]; 6] = [RVQ_MAGIC, FEATURES_MAGIC, TOKENS_MAGIC, SHARD_MAGIC, TOY_MAGIC, ROLLOUT_MAGIC];
        let mut buf = magic[which].to_vec();
        buf.extend(bytes);
        let _ = decode_rvq(&buf);
        let _ = decode_features(&buf);
        let _ = decode_tokens(&buf);
        let _ = decode_shard(&buf);
        let _ = decode_named(&buf);
        let _ = decode_rollouts(&buf);
    }
}

use dina_core::math;
use dina_core::pipeline_sim::{self as sim, MappingKind};
use dina_core::rvq::{self, Codebook, Projection, TokenGrid};
use dina_core::seqcodec::{build_text_guided_segment, flatten, GuideMode, Token, Vocab};
use dina_core::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // quantized output plus the final residual gives back the input exactly
    #[test]
    fn rvq_reconstruction_identity(seed in any::<u64>(), d in 1usize..8, levels in 1usize..5, n in 1usize..12) {
        let mut rng = math::rng(seed);
        let entries = (0..levels).map(|_| Tensor::randn(6, d, 1.0, &mut rng)).collect();
        let cb = Codebook::from_entries(entries, 0.99, 1e-5).unwrap();
        let x = Tensor::randn(n, d, 2.0, &mut rng);
        let q = rvq::quantize(&x, &cb, &Projection::identity(d)).unwrap();
        prop_assert_eq!(q.residuals.len(), levels + 1);
        let last = &q.residuals[levels];
        for p in 0..n {
            for c in 0..d {
                prop_assert!((q.quantized[(p, c)] + last[(p, c)] - x[(p, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parallel_layout_keeps_every_token(text in prop::collection::vec(0u32..29, 1..10), n in 1usize..10, pick in any::<prop::sample::Index>()) {
        let v = Vocab::new(32, vec![4, 3]).unwrap();
        let grid = TokenGrid::flat((0..n as u32 * 2).map(|i| i % 3).collect(), 2).unwrap();
        let delay = 1 + pick.index(text.len());
        let flat = flatten(&build_text_guided_segment(&text, &grid, delay, GuideMode::Parallel, &v).unwrap());
        let texts: Vec<u32> = flat.iter().filter_map(|t| if let Token::Text(x) = t { Some(*x) } else { None }).collect();
        let frames: Vec<Vec<u32>> = flat.iter().filter_map(|t| if let Token::Frame(f) = t { Some(f.clone()) } else { None }).collect();
        let mut want = text.clone();
        want.push(v.text_end());
        prop_assert_eq!(texts, want);
        prop_assert_eq!(frames, grid.positions().map(|f| f.to_vec()).collect::<Vec<_>>());
    }

    #[test]
    fn vshape_never_crosses_devices_for_the_skip_edge(seed in any::<u64>()) {
        let p = sim::random_profile(&mut math::rng(seed));
        let s = sim::simulate(&sim::assign(MappingKind::VShape, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(s.skip_events(), 0);
        prop_assert!(s.bubble >= 0.0 && s.bubble < 1.0);
    }
}

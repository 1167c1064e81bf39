use std::sync::OnceLock;

use proptest::prelude::*;
use v2m_core::alignment::{extend_tokens, nn_source_indices, Alpha};
use v2m_core::codec::{frame_signal, rvq_decode, rvq_encode, truncate_stack, AudioCodec, CodecConfig};
use v2m_core::metrics::{matrix_sqrt_psd, symmetric_eigen};
use v2m_core::model::{Model, ModelConfig};
use v2m_core::numerics::{Graph, Tensor};
use v2m_core::rng::SplitMix64;
use v2m_core::synthetic::{gen_pair, make_dataset, PairSpec, SpecRanges};
use v2m_core::video::VideoClip;

fn codec() -> &'static AudioCodec {
    static CODEC: OnceLock<AudioCodec> = OnceLock::new();
    CODEC.get_or_init(|| {
        let ds = make_dataset(20, &SpecRanges::default(), 8).unwrap();
        let waves: Vec<Vec<f64>> = ds.items.iter().map(|p| p.wave.clone()).collect();
        AudioCodec::fit(CodecConfig::default(), &waves, 20, 3).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn single_stage_requantisation_is_a_fixpoint(seed in 0u64..10_000) {
        let codec = codec();
        let stack = truncate_stack(&codec.stack, 1);
        let pair = gen_pair(&PairSpec { seed, duration: 0.5, ..PairSpec::default() }).unwrap();
        let latents = codec.transform.analysis(&frame_signal(&pair.wave, codec.cfg()).unwrap()).unwrap();
        let grid = rvq_encode(&latents, &stack, 50.0, 0.5).unwrap();
        let decoded = rvq_decode(&grid, &stack).unwrap();
        let again = rvq_encode(&decoded, &stack, 50.0, 0.5).unwrap();
        prop_assert_eq!(again.codes, grid.codes);
    }

    #[test]
    fn nearest_neighbour_indices_copy_rows_in_runs(
        t_v in 1usize..40,
        f_v in prop::sample::select(vec![10.0, 24.0, 25.0, 30.0]),
        ratio in 1usize..5,
        t_q in 1usize..120,
    ) {
        let f_q = f_v * ratio as f64;
        let idx = nn_source_indices(t_v, f_v, t_q, f_q).unwrap();
        prop_assert_eq!(idx.len(), t_q);
        prop_assert!(idx.iter().all(|&i| i < t_v));
        prop_assert!(idx.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        // Runs are `ratio` long except where the tail is clamped or cut.
        let mut runs = vec![0usize; t_v];
        for &i in &idx {
            runs[i] += 1;
        }
        let last = *idx.last().unwrap();
        for (i, &r) in runs.iter().enumerate() {
            if i < last && i > 0 {
                prop_assert_eq!(r, ratio);
            }
        }
    }

    #[test]
    fn extension_is_affine_in_alpha(seed in any::<u64>(), a in 0.0f64..=1.0) {
        let mut rng = SplitMix64::new(seed);
        let mut g = Graph::new();
        let tables: Vec<_> = (0..3).map(|_| g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng))).collect();
        let z = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let codes: Vec<usize> = (0..15).map(|_| rng.below(6)).collect();
        let lo = extend_tokens(&mut g, &codes, &tables, z, Alpha::new(0.0).unwrap()).unwrap();
        let hi = extend_tokens(&mut g, &codes, &tables, z, Alpha::new(1.0).unwrap()).unwrap();
        let mid = extend_tokens(&mut g, &codes, &tables, z, Alpha::new(a).unwrap()).unwrap();
        for ((m, h), l) in g.value(mid).data().iter().zip(g.value(hi).data()).zip(g.value(lo).data()) {
            prop_assert!((m - (a * h + (1.0 - a) * l)).abs() <= 1e-12);
        }
    }

    #[test]
    fn matrix_square_root_is_symmetric_psd(seed in any::<u64>(), n in 1usize..12, rank in 1usize..12) {
        let mut rng = SplitMix64::new(seed);
        let a = Tensor::randn(&[rank, n], 1.0, &mut rng);
        let s = a.transpose().matmul(&a).unwrap();
        let r = matrix_sqrt_psd(&s).unwrap();
        let scale = s.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..n {
                prop_assert!((r.row(i)[j] - r.row(j)[i]).abs() <= 1e-10 * scale);
            }
        }
        let (vals, _) = symmetric_eigen(&r).unwrap();
        prop_assert!(vals.iter().all(|&v| v >= -1e-8 * scale.sqrt()));
    }

    #[test]
    fn dynamics_attention_is_row_stochastic(seed in any::<u64>(), frames in 2usize..6) {
        let model = Model::new(ModelConfig::micro()).unwrap();
        let store = model.init_params(seed % 7);
        let mut rng = SplitMix64::new(seed);
        let data: Vec<Vec<f64>> = (0..frames).map(|_| (0..768).map(|_| rng.next_f64()).collect()).collect();
        let clip = VideoClip::from_frames(&data, 3, 16, 16, 25.0).unwrap();
        let (track, maps) = model.dynamics.encode_clip(&store, &clip).unwrap();
        prop_assert_eq!(track.z_d.rows(), frames);
        prop_assert_eq!(maps.len(), frames);
        for a in &maps {
            for i in 0..a.rows() {
                prop_assert!(a.row(i).iter().all(|&w| w >= 0.0));
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

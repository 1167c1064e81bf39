use super::*;
use crate::numerics::finite_diff_check;

fn setup(cfg: DynamicsConfig, seed: u64) -> (DynamicsEncoder, ParamStore) {
    let enc = DynamicsEncoder::new(cfg).unwrap();
    let mut store = ParamStore::new();
    enc.init_params(&mut store, &mut SplitMix64::new(seed));
    (enc, store)
}

fn micro() -> DynamicsConfig {
    DynamicsConfig {
        height: 4,
        width: 4,
        channels: 1,
        patch: 2,
        d_g: 4,
        radius: 1,
        d_flow: 4,
        d_m: 8,
        iters: 2,
        heads: 2,
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SplitMix64::new(seed))
}

fn clip_from(frames: &[Vec<f64>], cfg: &DynamicsConfig) -> VideoClip {
    VideoClip::from_frames(frames, cfg.channels, cfg.height, cfg.width, 10.0).unwrap()
}

#[test]
fn config_rejects_indivisible_frames() {
    let cfg = DynamicsConfig {
        patch: 3,
        ..DynamicsConfig::default()
    };
    assert!(matches!(DynamicsEncoder::new(cfg), Err(Error::Config(_))));
}

#[test]
fn embed_constant_frame_gives_constant_rows() {
    let (enc, store) = setup(DynamicsConfig::default(), 1);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let f = s.g.constant(Tensor::full(&[256, 3], 0.4));
    let e = enc.embed_frame(&mut s, f).unwrap();
    let v = s.g.value(e);
    assert_eq!(v.shape(), &[16, 8]);
    for i in 1..16 {
        assert_eq!(v.row(i), v.row(0));
    }
}

#[test]
fn embed_single_cell_is_linear_map_of_channel_means() {
    let cfg = DynamicsConfig {
        height: 4,
        width: 4,
        patch: 4,
        ..DynamicsConfig::default()
    };
    let (enc, store) = setup(cfg, 2);
    let frame = Tensor::randn(&[16, 3], 0.2, &mut SplitMix64::new(3));
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let f = s.g.constant(frame.clone());
    let e = enc.embed_frame(&mut s, f).unwrap();
    let means: Vec<f64> = (0..3).map(|c| (0..16).map(|p| frame.get(p, c)).sum::<f64>() / 16.0).collect();
    let w = store.tensor("dyn.embed.w").unwrap();
    let b = store.tensor("dyn.embed.b").unwrap();
    for j in 0..8 {
        let expect: f64 = (0..3).map(|c| means[c] * w.get(c, j)).sum::<f64>() + b.get(0, j);
        assert!((s.g.value(e).get(0, j) - expect).abs() < 1e-12);
    }
}

#[test]
fn checkerboard_pools_to_half() {
    let enc = DynamicsEncoder::new(DynamicsConfig {
        height: 4,
        width: 4,
        channels: 1,
        patch: 2,
        ..DynamicsConfig::default()
    })
    .unwrap();
    let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
    let mut g = Graph::new();
    let f = g.constant(Tensor::matrix(16, 1, board).unwrap());
    let pooled = enc.pool_patches(&mut g, f).unwrap();
    assert_eq!(g.value(pooled).data(), &[0.5; 4]);
}

#[test]
fn correlation_volume_examples() {
    let mut g = Graph::new();
    // orthonormal rows scaled by 2: Corr = 4·I / √4
    let mut rows = vec![vec![0.0; 4]; 4];
    for (i, r) in rows.iter_mut().enumerate() {
        r[i] = 2.0;
    }
    let a = g.constant(Tensor::from_rows(&rows).unwrap());
    let c = DynamicsEncoder::correlation_volume(&mut g, a, a).unwrap();
    let expect = {
        let mut t = Tensor::eye(4);
        t.data_mut().iter_mut().for_each(|v| *v *= 4.0 / 2.0);
        t
    };
    assert_eq!(g.value(c), &expect);

    let z = g.constant(Tensor::zeros(&[4, 4]));
    let c = DynamicsEncoder::correlation_volume(&mut g, a, z).unwrap();
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));

    let x = g.constant(rand(&[6, 3], 1));
    let y = g.constant(rand(&[6, 3], 2));
    let xy = DynamicsEncoder::correlation_volume(&mut g, x, y).unwrap();
    let yx = DynamicsEncoder::correlation_volume(&mut g, y, x).unwrap();
    assert_eq!(g.value(xy).transpose(), *g.value(yx));

    let w = g.constant(rand(&[5, 3], 3));
    assert!(DynamicsEncoder::correlation_volume(&mut g, x, w).is_err());
}

#[test]
fn identical_pair_keeps_zero_flow() {
    let (enc, store) = setup(DynamicsConfig::default(), 4);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let feat = s.g.constant(rand(&[16, 8], 5));
    let corr = DynamicsEncoder::correlation_volume(s.g, feat, feat).unwrap();
    let out = enc.refine_flow(&mut s, corr, corr, 3).unwrap();
    assert!(s.g.value(out.flow_fwd).data().iter().all(|&v| v == 0.0));
    assert!(s.g.value(out.flow_bwd).data().iter().all(|&v| v == 0.0));
    assert_eq!(s.g.value(out.corr).shape(), &[16, 18]);
    assert_eq!(s.g.value(out.flow).shape(), &[16, 16]);
}

#[test]
fn shifted_grid_window_argmax_points_to_shift() {
    let (enc, store) = setup(DynamicsConfig::default(), 6);
    // unit rows: self-correlation strictly dominates (Cauchy-Schwarz)
    let mut a = rand(&[16, 8], 7);
    for row in a.data_mut().chunks_mut(8) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let mut b = Tensor::zeros(&[16, 8]);
    for y in 0..4 {
        for x in 0..3 {
            for j in 0..8 {
                b.data_mut()[(y * 4 + x + 1) * 8 + j] = a.get(y * 4 + x, j);
            }
        }
    }
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let (av, bv) = (s.g.constant(a), s.g.constant(b));
    let corr = DynamicsEncoder::correlation_volume(s.g, av, bv).unwrap();
    let out = enc.refine_flow(&mut s, corr, corr, 1).unwrap();
    let windows = s.g.value(out.corr);
    let full = s.g.value(corr);
    for y in 0..4 {
        for x in 0..3 {
            let p = y * 4 + x;
            // exhaustive oracle over every target cell
            let best_q = (0..16).max_by(|&i, &j| full.get(p, i).total_cmp(&full.get(p, j))).unwrap();
            assert_eq!(best_q, p + 1, "cell {p}");
            let fwd = &windows.row(p)[..9];
            let best_tap = (0..9).max_by(|&i, &j| fwd[i].total_cmp(&fwd[j])).unwrap();
            assert_eq!(best_tap, 5, "cell {p}"); // (oy, ox) = (0, +1)
        }
    }
}

#[test]
fn more_iterations_change_features() {
    let (enc, store) = setup(DynamicsConfig::default(), 8);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let c1 = s.g.constant(rand(&[16, 16], 9));
    let c2 = s.g.constant(rand(&[16, 16], 10));
    let one = enc.refine_flow(&mut s, c1, c2, 1).unwrap();
    let three = enc.refine_flow(&mut s, c1, c2, 3).unwrap();
    assert!(s.g.value(one.flow).max_abs_diff(s.g.value(three.flow)) > 1e-6);
    assert!(enc.refine_flow(&mut s, c1, c2, 0).is_err());
}

#[test]
fn fuse_motion_examples() {
    let (enc, mut store) = setup(DynamicsConfig::default(), 11);
    let mut rng = SplitMix64::new(12);
    store.get_mut("dyn.fuse.b").unwrap().value = Tensor::randn(&[1, 32], 0.5, &mut rng);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let zc = s.g.constant(Tensor::zeros(&[16, 18]));
    let zf = s.g.constant(Tensor::zeros(&[16, 16]));
    let out = enc.fuse_motion(&mut s, zc, zf).unwrap();
    let bias = store.tensor("dyn.fuse.b").unwrap();
    for i in 0..16 {
        for j in 0..32 {
            assert_eq!(s.g.value(out).get(i, j), bias.get(0, j).tanh());
        }
    }

    let c = rand(&[16, 18], 13);
    let f = rand(&[16, 16], 14);
    let base = {
        let (cv, fv) = (s.g.constant(c.clone()), s.g.constant(f.clone()));
        let o = enc.fuse_motion(&mut s, cv, fv).unwrap();
        s.g.value(o).clone()
    };
    let mut c2 = c.clone();
    c2.data_mut()[0] += 0.1;
    let mut f2 = f.clone();
    f2.data_mut()[0] += 0.1;
    for (cc, ff) in [(c2, f.clone()), (c, f2)] {
        let (cv, fv) = (s.g.constant(cc), s.g.constant(ff));
        let o = enc.fuse_motion(&mut s, cv, fv).unwrap();
        let out = s.g.value(o).clone();
        assert!(out.max_abs_diff(&base) > 0.0);
    }
}

#[test]
fn fuse_motion_scalar_path_oracle() {
    let cfg = DynamicsConfig {
        height: 4,
        width: 4,
        patch: 4,
        ..DynamicsConfig::default()
    };
    let (enc, store) = setup(cfg, 15);
    let c = rand(&[1, 18], 16);
    let f = rand(&[1, 16], 17);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let (cv, fv) = (s.g.constant(c.clone()), s.g.constant(f.clone()));
    let o = enc.fuse_motion(&mut s, cv, fv).unwrap();
    let out = s.g.value(o).clone();
    let w = store.tensor("dyn.fuse.w").unwrap();
    let b = store.tensor("dyn.fuse.b").unwrap();
    let x: Vec<f64> = c.data().iter().chain(f.data()).copied().collect();
    for j in 0..32 {
        let mut acc = b.get(0, j);
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w.get(i, j);
        }
        assert!((out.get(0, j) - acc.tanh()).abs() < 1e-12);
    }
}

#[test]
fn aggregate_single_cell_and_uniform_cases() {
    let (enc, store) = setup(DynamicsConfig::default(), 18);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let one = s.g.constant(rand(&[1, 32], 19));
    let (pooled, att) = enc.aggregate_attention(&mut s, one).unwrap();
    assert_eq!(att.data(), &[1.0]);
    let v = s.linear("dyn.attn.v", one).unwrap();
    assert_eq!(s.g.value(pooled), s.g.value(v));

    let row = rand(&[1, 32], 20);
    let same = s.g.constant(Tensor::from_rows(&vec![row.data().to_vec(); 16]).unwrap());
    let (_, att) = enc.aggregate_attention(&mut s, same).unwrap();
    for v in att.data() {
        assert!((v - 1.0 / 16.0).abs() < 1e-15);
    }

    let r = s.g.constant(rand(&[16, 32], 21));
    let (_, att) = enc.aggregate_attention(&mut s, r).unwrap();
    for i in 0..16 {
        assert!((att.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn aggregate_is_invariant_to_cell_order() {
    let (enc, store) = setup(DynamicsConfig::default(), 22);
    let z = rand(&[16, 32], 23);
    let mut perm: Vec<usize> = (0..16).collect();
    SplitMix64::new(24).shuffle(&mut perm);
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let (a, b) = (s.g.constant(z), s.g.constant(permuted));
    let (pa, _) = enc.aggregate_attention(&mut s, a).unwrap();
    let (pb, _) = enc.aggregate_attention(&mut s, b).unwrap();
    assert!(s.g.value(pa).max_abs_diff(s.g.value(pb)) < 1e-12);
}

#[test]
fn static_clip_rows_are_equal() {
    let cfg = DynamicsConfig::default();
    let (enc, store) = setup(cfg.clone(), 25);
    let frame: Vec<f64> = (0..768).map(|i| (i % 7) as f64 / 7.0).collect();
    let clip = clip_from(&vec![frame; 5], &cfg);
    let (track, att) = enc.encode_clip(&store, &clip).unwrap();
    assert_eq!(track.z_d.shape(), &[5, 32]);
    assert_eq!(att.len(), 5);
    for i in 1..5 {
        assert_eq!(track.z_d.row(i), track.z_d.row(0));
    }
}

#[test]
fn two_frame_clip_and_too_short() {
    let cfg = micro();
    let (enc, store) = setup(cfg.clone(), 26);
    let clip = clip_from(&[vec![0.1; 16], vec![0.9; 16]], &cfg);
    let (track, _) = enc.encode_clip(&store, &clip).unwrap();
    assert_eq!(track.z_d.rows(), 2);
    let one = clip_from(&[vec![0.1; 16]], &cfg);
    assert!(matches!(enc.encode_clip(&store, &one), Err(Error::Input(_))));
}

#[test]
fn motion_rows_stand_out() {
    let cfg = DynamicsConfig {
        channels: 1,
        ..DynamicsConfig::default()
    };
    let (enc, store) = setup(cfg.clone(), 27);
    let blob_at = |py: usize, px: usize| -> Vec<f64> {
        (0..256)
            .map(|i| {
                let (y, x) = (i / 16, i % 16);
                if (py..py + 4).contains(&y) && (px..px + 4).contains(&x) {
                    0.9
                } else {
                    0.2
                }
            })
            .collect()
    };
    let (a, b) = (blob_at(4, 4), blob_at(8, 8));
    let clip = clip_from(&[a.clone(), a.clone(), a.clone(), b.clone(), b.clone(), b], &cfg);
    let (track, _) = enc.encode_clip(&store, &clip).unwrap();
    let dist: Vec<f64> = (0..6)
        .map(|i| {
            track.z_d.row(i).iter().zip(track.z_d.row(0)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&i, &j| dist[j].total_cmp(&dist[i]));
    let mut top = order[..2].to_vec();
    top.sort_unstable();
    assert_eq!(top, vec![2, 3], "{dist:?}");
}

#[test]
fn pixel_gradients_match_finite_differences() {
    let cfg = micro();
    for seed in 0..20u64 {
        let (enc, mut store) = setup(cfg.clone(), 100 + seed);
        // non-zero flow head so the sampling path is exercised
        let mut rng = SplitMix64::new(200 + seed);
        store.get_mut("dyn.delta.w").unwrap().value = Tensor::randn(&[4, 4], 0.3, &mut rng);
        store.get_mut("dyn.delta.b").unwrap().value = Tensor::randn(&[1, 4], 0.3, &mut rng);
        let probe = rand(&[2, 8], 300 + seed);
        let pixels = Tensor::matrix(32, 1, (0..32).map(|_| rng.next_f64()).collect()).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let mut s = Session::new(g, &store);
                let out = enc.encode(&mut s, x, 2)?;
                let w = s.g.constant(probe.clone());
                let p = s.g.mul(out.z_d, w)?;
                Ok(s.g.sum(p))
            },
            &pixels,
            1e-3,
        )
        .unwrap();
        assert!(r.pass, "seed {seed}: {r:?}");
    }
}

#[test]
fn attention_csv_has_one_row_per_query() {
    let csv = attention_csv(&Tensor::full(&[3, 3], 1.0 / 3.0));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "query,key_0,key_1,key_2");
    assert!(lines[1].starts_with("0,"));
}

use super::*;
use crate::numerics::finite_diff_check;

fn micro() -> DecoderConfig {
    DecoderConfig {
        n_layers: 2,
        n_heads: 2,
        d: 8,
        k: 2,
        m: 5,
        max_t: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
        ffn_mult: 2,
    }
}

/// Base and adapters, with non-zero `Up` when `active`.
fn build(cfg: DecoderConfig, seed: u64, active: bool) -> (Decoder, ParamStore) {
    let dec = Decoder::new(cfg).unwrap();
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    dec.init_base(&mut store, &mut rng);
    dec.init_adapters(&mut store, &mut rng);
    if active {
        for name in dec.adapted_weights() {
            let up = format!("{name}.lora.up");
            let shape = store.tensor(&up).unwrap().shape().to_vec();
            store.get_mut(&up).unwrap().value = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
    (dec, store)
}

fn logits_of(dec: &Decoder, store: &ParamStore, x: &Tensor, zs: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, store);
    let xv = s.g.constant(x.clone());
    let zv = s.g.constant(zs.clone());
    let out = dec.forward(&mut s, xv, zv).unwrap();
    out.logits.iter().map(|&v| s.g.value(v).clone()).collect()
}

#[test]
fn config_validation() {
    assert!(DecoderConfig::default().validate().is_ok());
    let bad = DecoderConfig {
        lora_rank: 65,
        ..DecoderConfig::default()
    };
    assert!(matches!(Decoder::new(bad), Err(Error::Config(_))));
    let bad = DecoderConfig {
        n_heads: 5,
        ..DecoderConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn lora_examples() {
    let mut rng = SplitMix64::new(1);
    let w = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let down = Tensor::randn(&[4, 2], 1.0, &mut rng);
    assert_eq!(apply_lora(&w, &down, &Tensor::zeros(&[2, 4]), 8.0).unwrap(), w);
    let delta = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let full = apply_lora(&w, &Tensor::eye(4), &delta, 4.0).unwrap();
    for ((f, a), b) in full.data().iter().zip(w.data()).zip(delta.data()) {
        assert_eq!(*f, a + b);
    }
    let wide = Tensor::randn(&[4, 5], 1.0, &mut rng);
    assert!(matches!(
        apply_lora(&w, &wide, &Tensor::zeros(&[5, 4]), 1.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_adapters_match_base() {
    let (dec, with) = build(micro(), 3, false);
    let base = with.partition(false);
    let mut heads_only = base.clone();
    for (n, p) in with.iter() {
        if n.starts_with("dec.head") {
            heads_only.insert(n.clone(), p.value.clone(), true);
        }
    }
    let mut rng = SplitMix64::new(4);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let zs = Tensor::randn(&[3, 8], 1.0, &mut rng);
    assert_eq!(logits_of(&dec, &with, &x, &zs), logits_of(&dec, &heads_only, &x, &zs));

    // with alpha = 0 the dynamics rows are ignored entirely
    let codes = vec![1, 2, 0, 4, 3, 3, 2, 1];
    let run = |store: &ParamStore, zd: &Tensor| {
        let mut g = Graph::new();
        let mut s = Session::inference(&mut g, store);
        let zd = s.g.constant(zd.clone());
        let zsv = s.g.constant(zs.clone());
        let x = dec.input(&mut s, &codes, 5, zd, Alpha::new(0.0).unwrap()).unwrap();
        let out = dec.forward(&mut s, x, zsv).unwrap();
        out.logits.iter().map(|&v| s.g.value(v).clone()).collect::<Vec<_>>()
    };
    let zd_a = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let zd_b = Tensor::randn(&[5, 8], 1.0, &mut rng);
    assert_eq!(run(&with, &zd_a), run(&heads_only, &zd_b));
}

#[test]
fn strict_causality_with_active_adapters() {
    let (dec, store) = build(micro(), 5, true);
    let mut rng = SplitMix64::new(6);
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let zs = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let base = logits_of(&dec, &store, &x, &zs);
    for j in 0..6 {
        let mut xp = x.clone();
        for c in 0..8 {
            xp.data_mut()[j * 8 + c] += 0.5 + rng.next_f64();
        }
        let pert = logits_of(&dec, &store, &xp, &zs);
        for (b, p) in base.iter().zip(&pert) {
            for i in 0..j {
                let same = b.row(i).iter().zip(p.row(i)).all(|(u, v)| u.to_bits() == v.to_bits());
                assert!(same, "position {i} moved when perturbing {j}");
            }
            assert_ne!(b.row(j), p.row(j), "position {j} ignored its own input");
        }
    }
}

#[test]
fn single_semantic_row() {
    let (dec, store) = build(micro(), 7, true);
    let mut rng = SplitMix64::new(8);
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let zs = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, &store);
    let xv = s.g.constant(x.clone());
    let zv = s.g.constant(zs.clone());
    let out = dec.forward(&mut s, xv, zv).unwrap();
    for &a in &out.cross_attention {
        assert!(s.g.value(a).data().iter().all(|&v| v == 1.0));
    }
    // the query side cannot matter with a single key
    let mut other = store.clone();
    let q = other.get_mut("dec.l0.cross.q.w").unwrap();
    q.value = Tensor::randn(&[8, 8], 2.0, &mut rng);
    assert_eq!(logits_of(&dec, &store, &x, &zs), logits_of(&dec, &other, &x, &zs));
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let (dec, store) = build(micro(), 9, true);
    let mut rng = SplitMix64::new(10);
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, &store);
    let xv = s.g.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
    let zv = s.g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
    let out = dec.forward(&mut s, xv, zv).unwrap();
    for &a in &out.cross_attention {
        let a = s.g.value(a);
        assert_eq!(a.shape(), &[6, 5]);
        for i in 0..6 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn overlong_input_is_rejected() {
    let (dec, store) = build(micro(), 11, false);
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, &store);
    let xv = s.g.constant(Tensor::zeros(&[9, 8]));
    let zv = s.g.constant(Tensor::zeros(&[1, 8]));
    assert!(matches!(dec.forward(&mut s, xv, zv), Err(Error::Input(_))));
}

#[test]
fn gradients_reach_only_trainable_weights() {
    let (dec, store) = build(micro(), 12, true);
    let mut rng = SplitMix64::new(13);
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let xv = s.g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
    let zv = s.g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
    let out = dec.forward(&mut s, xv, zv).unwrap();
    let mut total = None;
    for &l in &out.logits {
        let ce = s.g.weighted_cross_entropy(l, &[0, 1, 2, 3], &[1.0; 4]).unwrap();
        total = Some(match total {
            None => ce,
            Some(t) => s.g.add(t, ce).unwrap(),
        });
    }
    s.g.backward(total.unwrap()).unwrap();
    let grads = s.grads();
    for name in dec.adapted_weights() {
        for part in ["down", "up"] {
            let g = &grads[&format!("{name}.lora.{part}")];
            assert!(g.data().iter().any(|v| *v != 0.0), "{name}.{part}");
        }
    }
    assert!(grads.contains_key("dec.head.0.w"));
    for (name, p) in store.iter() {
        if !p.trainable {
            assert!(!grads.contains_key(name), "frozen {name} received a gradient");
        }
    }
}

fn probe_loss(dec: &Decoder, s: &mut Session, x: Var, zs: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let out = dec.forward(s, x, zs)?;
    let mut total = None;
    for (l, t) in out.logits.iter().zip(targets) {
        let w: Vec<f64> = (0..t.len()).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let ce = s.g.weighted_cross_entropy(*l, t, &w)?;
        total = Some(match total {
            None => ce,
            Some(a) => s.g.add(a, ce)?,
        });
    }
    Ok(total.expect("k > 0"))
}

#[test]
fn full_forward_gradient_check() {
    for seed in 0..20u64 {
        let (dec, store) = build(micro(), 100 + seed, true);
        let mut rng = SplitMix64::new(200 + seed);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let zs = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let targets: Vec<Vec<usize>> = (0..2).map(|_| (0..4).map(|_| rng.below(5)).collect()).collect();
        let r = finite_diff_check(
            |g, xv| {
                let mut s = Session::new(g, &store);
                let zv = s.g.constant(zs.clone());
                probe_loss(&dec, &mut s, xv, zv, &targets)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.pass, "input seed {seed}: {r:?}");
        let r = finite_diff_check(
            |g, zv| {
                let mut s = Session::new(g, &store);
                let xv = s.g.constant(x.clone());
                probe_loss(&dec, &mut s, xv, zv, &targets)
            },
            &zs,
            1e-3,
        )
        .unwrap();
        assert!(r.pass, "semantics seed {seed}: {r:?}");
        let down = store.tensor("dec.l1.self.v.lora.down").unwrap().clone();
        let r = finite_diff_check(
            |g, dv| {
                let mut s = Session::new(g, &store);
                s.bind("dec.l1.self.v.lora.down", dv);
                let xv = s.g.constant(x.clone());
                let zv = s.g.constant(zs.clone());
                probe_loss(&dec, &mut s, xv, zv, &targets)
            },
            &down,
            1e-3,
        )
        .unwrap();
        assert!(r.pass, "adapter seed {seed}: {r:?}");
    }
}

/// Cross-attention block alone: `softmax(z Wq (zs Wk)ᵀ / √d) · zs Wv`.
fn cross_block(g: &mut Graph, z: Var, zs: Var, w: &[Tensor; 3], probe: &Tensor) -> Result<Var> {
    let wq = g.constant(w[0].clone());
    let wk = g.constant(w[1].clone());
    let wv = g.constant(w[2].clone());
    let q = g.matmul(z, wq)?;
    let k = g.matmul(zs, wk)?;
    let v = g.matmul(zs, wv)?;
    let d = g.shape(z).1 as f64;
    let (out, _) = multi_head_attention(g, q, k, v, 1, false, Some(1.0 / d.sqrt()))?;
    let p = g.constant(probe.clone());
    let y = g.mul(out, p)?;
    Ok(g.sum(y))
}

#[test]
fn cross_attention_block_gradient_check() {
    for seed in 0..20u64 {
        let mut rng = SplitMix64::new(300 + seed);
        let w = [
            Tensor::randn(&[6, 6], 0.5, &mut rng),
            Tensor::randn(&[6, 6], 0.5, &mut rng),
            Tensor::randn(&[6, 6], 0.5, &mut rng),
        ];
        let z = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let zs = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let probe = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let r = finite_diff_check(
            |g, x| {
                let zsv = g.constant(zs.clone());
                cross_block(g, x, zsv, &w, &probe)
            },
            &z,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "query seed {seed}: {r:?}");
        let r = finite_diff_check(
            |g, x| {
                let zv = g.constant(z.clone());
                cross_block(g, zv, x, &w, &probe)
            },
            &zs,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "key seed {seed}: {r:?}");
    }
}

#[test]
fn self_attention_block_gradient_check() {
    for seed in 0..20u64 {
        let mut rng = SplitMix64::new(400 + seed);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let wq = Tensor::randn(&[8, 8], 0.4, &mut rng);
        let probe = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let r = finite_diff_check(
            |g, xv| {
                let w = g.constant(wq.clone());
                let q = g.matmul(xv, w)?;
                let (out, _) = multi_head_attention(g, q, xv, xv, 2, true, None)?;
                let p = g.constant(probe.clone());
                let y = g.mul(out, p)?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "seed {seed}: {r:?}");
    }
}

#[test]
fn sampler_rules() {
    let logits = [0.1, 2.0, -1.0, 2.0, 0.5];
    let mut rng = SplitMix64::new(1);
    assert_eq!(Sampler::argmax(0).sample(&logits, &mut rng), 1);
    let top1 = Sampler {
        temperature: 1.0,
        top_k: 1,
        seed: 0,
    };
    assert_eq!(top1.sample(&logits, &mut rng), 1);
    let top2 = Sampler {
        temperature: 1.0,
        top_k: 2,
        seed: 0,
    };
    for _ in 0..200 {
        let c = top2.sample(&logits, &mut rng);
        assert!(c == 1 || c == 3);
    }
    // frequencies follow softmax(logits / T) within the kept set
    let hot = Sampler {
        temperature: 2.0,
        top_k: 5,
        seed: 0,
    };
    let mut counts = [0usize; 5];
    for _ in 0..40_000 {
        counts[hot.sample(&logits, &mut rng)] += 1;
    }
    let w: Vec<f64> = logits.iter().map(|l| (l / 2.0_f64).exp()).collect();
    let z: f64 = w.iter().sum();
    for i in 0..5 {
        let p = counts[i] as f64 / 40_000.0;
        assert!((p - w[i] / z).abs() < 0.01, "class {i}: {p}");
    }
}

#[test]
fn generation_contract() {
    let (dec, store) = build(micro(), 14, true);
    let mut rng = SplitMix64::new(15);
    let zd = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let zs = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let alpha = Alpha::default();
    let gen = |s: &Sampler| dec.generate(&store, &zd, &zs, alpha, 6, 3.0, 2.0, s).unwrap();
    let a = gen(&Sampler::argmax(1));
    assert_eq!(a, gen(&Sampler::argmax(2)));
    let top1 = Sampler {
        temperature: 0.7,
        top_k: 1,
        seed: 3,
    };
    assert_eq!(a, gen(&top1));
    let s = Sampler {
        seed: 4,
        ..Sampler::default()
    };
    let b = gen(&s);
    assert_eq!(b, gen(&s));
    assert_eq!(b.len(), 6);
    assert!(b.codes.iter().all(|&c| c < 5));
    assert!(dec.generate(&store, &zd, &zs, alpha, 7, 3.5, 2.0, &s).is_err());
}

#[test]
fn generation_matches_teacher_forced_argmax() {
    let (dec, store) = build(micro(), 16, true);
    let mut rng = SplitMix64::new(17);
    let zd = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let zs = Tensor::randn(&[2, 8], 1.0, &mut rng);
    let alpha = Alpha::new(0.4).unwrap();
    let grid = dec.generate(&store, &zd, &zs, alpha, 5, 2.5, 2.0, &Sampler::argmax(0)).unwrap();
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, &store);
    let zdv = s.g.constant(zd.clone());
    let zsv = s.g.constant(zs.clone());
    let x = dec.input(&mut s, &grid.codes, 5, zdv, alpha).unwrap();
    let out = dec.forward(&mut s, x, zsv).unwrap();
    for i in 0..5 {
        for (k, &l) in out.logits.iter().enumerate() {
            let row = s.g.value(l).row(i);
            let best = (0..5).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(grid.code(i, k), best);
        }
    }
}

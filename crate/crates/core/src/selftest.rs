//! Runtime invariant suite: numerical oracles and contracts of every
//! module, runnable from a release binary.

use std::time::Instant;

use crate::alignment::{extend_tokens, nn_source_indices, Alpha};
use crate::codec::{frame_signal, quantization_mse, train_codebooks, truncate_stack, CodecConfig, Transform};
use crate::decoder::{Decoder, DecoderConfig};
use crate::dynamics::{DynamicsConfig, DynamicsEncoder};
use crate::error::Result;
use crate::metrics::{frechet_distance, kl_divergence, matrix_sqrt_psd, FeatureSet};
use crate::model::{Model, ModelConfig};
use crate::nn::{multi_head_attention, ParamStore, Session};
use crate::numerics::{finite_diff_check, Graph, Tensor, Var};
use crate::rng::SplitMix64;
use crate::semantics::select_keyframes;
use crate::synthetic::{gen_pair, make_dataset, PairSpec, SpecRanges};
use crate::trainer::{training_loss, Schedule, ScheduleKind};
use crate::video::VideoClip;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (m, n) = g.shape(y);
    let w = g.constant(Tensor::randn(&[m, n], 1.0, &mut SplitMix64::new(seed ^ 0x9e37)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error of `f` over `seeds` random points of `shape`.
fn worst_over_seeds<F>(seeds: u64, shape: &[usize], tol: f64, f: F) -> Result<(bool, f64)>
where
    F: Fn(&mut Graph, Var, u64) -> Result<Var>,
{
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in 0..seeds {
        let x = Tensor::randn(shape, 1.0, &mut SplitMix64::new(10_000 + seed));
        let r = finite_diff_check(|g, v| f(g, v, seed), &x, tol)?;
        worst = worst.max(r.max_rel_err);
        ok &= r.pass;
    }
    Ok((ok, worst))
}

fn micro_decoder(seed: u64) -> (Decoder, ParamStore) {
    let dec = Decoder::new(DecoderConfig {
        n_layers: 2,
        n_heads: 2,
        d: 8,
        k: 2,
        m: 5,
        max_t: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
        ffn_mult: 2,
    })
    .expect("valid micro config");
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    dec.init_base(&mut store, &mut rng);
    dec.init_adapters(&mut store, &mut rng);
    for name in dec.adapted_weights() {
        let up = format!("{name}.lora.up");
        let shape = store.tensor(&up).expect("adapter").shape().to_vec();
        store.get_mut(&up).expect("adapter").value = Tensor::randn(&shape, 0.3, &mut rng);
    }
    (dec, store)
}

/// Finite-difference agreement of every differentiable building block on
/// `seeds` random instances each.
pub fn gradient_suite(seeds: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut lines = Vec::new();
        let mut all = true;
        let mut record = |name: &str, tol: f64, r: (bool, f64)| {
            all &= r.0;
            lines.push(format!("{name} worst {:.2e} (tol {tol:.0e})", r.1));
        };
        record(
            "matmul",
            1e-4,
            worst_over_seeds(seeds, &[3, 4], 1e-4, |g, x, s| {
                let b = g.constant(Tensor::randn(&[4, 3], 1.0, &mut SplitMix64::new(s)));
                let y = g.matmul(x, b)?;
                probe(g, y, s)
            })?,
        );
        record(
            "softmax",
            1e-4,
            worst_over_seeds(seeds, &[3, 5], 1e-4, |g, x, s| {
                let y = g.softmax_rows(x);
                probe(g, y, s)
            })?,
        );
        record(
            "attention",
            1e-4,
            worst_over_seeds(seeds, &[5, 8], 1e-4, |g, x, s| {
                let w = g.constant(Tensor::randn(&[8, 8], 0.4, &mut SplitMix64::new(s)));
                let q = g.matmul(x, w)?;
                let (y, _) = multi_head_attention(g, q, x, x, 2, true, None)?;
                probe(g, y, s)
            })?,
        );
        record(
            "token extension",
            1e-4,
            worst_over_seeds(seeds, &[4, 3], 1e-4, |g, x, s| {
                let mut rng = SplitMix64::new(s);
                let e0 = g.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
                let codes: Vec<usize> = (0..8).map(|_| rng.below(5)).collect();
                let alpha = Alpha::new(rng.next_f64())?;
                let table = g.param(Tensor::randn(&[5, 3], 1.0, &mut rng));
                let y = extend_tokens(g, &codes, &[e0, table], x, alpha)?;
                let y = g.tanh(y);
                probe(g, y, s)
            })?,
        );
        record(
            "token extension (embeddings)",
            1e-4,
            worst_over_seeds(seeds, &[5, 3], 1e-4, |g, x, s| {
                let mut rng = SplitMix64::new(s);
                let z = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
                let e1 = g.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
                let codes: Vec<usize> = (0..8).map(|_| rng.below(5)).collect();
                let y = extend_tokens(g, &codes, &[x, e1], z, Alpha::new(rng.next_f64())?)?;
                let y = g.tanh(y);
                probe(g, y, s)
            })?,
        );
        let cross = |g: &mut Graph, z: Var, zs: Var, s: u64| -> Result<Var> {
            let mut rng = SplitMix64::new(s);
            let mut w = || g_const(Tensor::randn(&[6, 6], 0.5, &mut rng));
            let (wq, wk, wv) = (w(), w(), w());
            let (wq, wk, wv) = (g.constant(wq), g.constant(wk), g.constant(wv));
            let q = g.matmul(z, wq)?;
            let k = g.matmul(zs, wk)?;
            let v = g.matmul(zs, wv)?;
            let (y, _) = multi_head_attention(g, q, k, v, 1, false, Some(1.0 / 6f64.sqrt()))?;
            probe(g, y, s)
        };
        record(
            "cross-attention (queries)",
            1e-4,
            worst_over_seeds(seeds, &[4, 6], 1e-4, |g, x, s| {
                let zs = g.constant(Tensor::randn(&[3, 6], 1.0, &mut SplitMix64::new(s + 500)));
                cross(g, x, zs, s)
            })?,
        );
        record(
            "cross-attention (semantics)",
            1e-4,
            worst_over_seeds(seeds, &[3, 6], 1e-4, |g, x, s| {
                let z = g.constant(Tensor::randn(&[4, 6], 1.0, &mut SplitMix64::new(s + 500)));
                cross(g, z, x, s)
            })?,
        );
        record(
            "weighted NLL",
            1e-4,
            worst_over_seeds(seeds, &[6, 4], 1e-4, |g, x, s| {
                let mut rng = SplitMix64::new(s);
                let codes: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
                let w = Schedule::new(ScheduleKind::Cosine).weights(6);
                let x2 = g.scale(x, 2.0);
                training_loss(g, &[x2], &codes, &w)
            })?,
        );
        let dyn_cfg = DynamicsConfig {
            height: 4,
            width: 4,
            channels: 1,
            patch: 2,
            d_g: 3,
            radius: 1,
            d_flow: 4,
            d_m: 4,
            iters: 2,
            heads: 2,
        };
        let enc = DynamicsEncoder::new(dyn_cfg)?;
        record(
            "dynamics path",
            1e-3,
            worst_over_seeds(seeds, &[32, 1], 1e-3, |g, x, s| {
                let mut store = ParamStore::new();
                let mut rng = SplitMix64::new(s);
                enc.init_params(&mut store, &mut rng);
                for name in ["dyn.delta.w", "dyn.delta.b"] {
                    let shape = store.tensor(name)?.shape().to_vec();
                    store.get_mut(name).expect("present").value = Tensor::randn(&shape, 0.3, &mut rng);
                }
                let mut sess = Session::new(g, &store);
                let sig = sess.g.tanh(x);
                let half = sess.g.scale(sig, 0.5);
                let out = enc.encode(&mut sess, half, 2)?;
                probe(sess.g, out.z_d, s)
            })?,
        );
        record(
            "full decoder forward",
            1e-3,
            worst_over_seeds(seeds, &[4, 8], 1e-3, |g, x, s| {
                let (dec, store) = micro_decoder(100 + s);
                let mut rng = SplitMix64::new(200 + s);
                let mut sess = Session::new(g, &store);
                let zs = sess.g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
                let out = dec.forward(&mut sess, x, zs)?;
                let codes: Vec<usize> = (0..8).map(|_| rng.below(5)).collect();
                let w = Schedule::new(ScheduleKind::Cosine).weights(4);
                training_loss(sess.g, &out.logits, &codes, &w)
            })?,
        );
        lines.push(format!("{:.1} s", start.elapsed().as_secs_f64()));
        Ok((all, lines.join("; ")))
    };
    CheckOutcome::from_result("gradient correctness", run())
}

fn g_const(t: Tensor) -> Tensor {
    t
}

/// Token extension reduces to the summed code embeddings at `α = 0`, to the
/// dynamics at `α = 1`, and is linear in between.
pub fn extension_endpoints() -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut rng = SplitMix64::new(31);
        let mut g = Graph::new();
        let (t, k, m, d) = (7, 4, 9, 6);
        let raw: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[m, d], 1.0, &mut rng)).collect();
        let tables: Vec<Var> = raw.iter().map(|t| g.constant(t.clone())).collect();
        let z = Tensor::randn(&[t, d], 1.0, &mut rng);
        let zv = g.constant(z.clone());
        let codes: Vec<usize> = (0..t * k).map(|_| rng.below(m)).collect();
        // baseline: per-position sum over codebooks, in codebook order
        let mut base = vec![0.0; t * d];
        for i in 0..t {
            for c in 0..d {
                let mut acc = raw[0].row(codes[i * k])[c];
                for j in 1..k {
                    acc += raw[j].row(codes[i * k + j])[c];
                }
                base[i * d + c] = acc;
            }
        }
        let a0 = extend_tokens(&mut g, &codes, &tables, zv, Alpha::new(0.0)?)?;
        let a1 = extend_tokens(&mut g, &codes, &tables, zv, Alpha::new(1.0)?)?;
        let bits = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let zero_ok = bits(g.value(a0).data(), &base);
        let one_ok = bits(g.value(a1).data(), z.data());
        let (va, vb) = (g.value(a1).clone(), g.value(a0).clone());
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let al = rng.next_f64();
            let o = extend_tokens(&mut g, &codes, &tables, zv, Alpha::new(al)?)?;
            for ((o, x), y) in g.value(o).data().iter().zip(va.data()).zip(vb.data()) {
                worst = worst.max((o - (al * x + (1.0 - al) * y)).abs());
            }
        }
        Ok((
            zero_ok && one_ok && worst <= 1e-12,
            format!("alpha=0 bit-exact {zero_ok}, alpha=1 bit-exact {one_ok}, linearity worst {worst:.1e}"),
        ))
    };
    CheckOutcome::from_result("token extension endpoints", run())
}

/// Latents of synthetic waves, in clip order.
fn latents_of(waves: &[Vec<f64>], transform: &Transform, cfg: &CodecConfig) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for w in waves {
        let lat = transform.analysis(&frame_signal(w, cfg)?)?;
        rows.extend((0..lat.rows()).map(|i| lat.row(i).to_vec()));
    }
    Ok(rows)
}

/// Held-out reconstruction error for `K = 1..=4` stages; must never grow.
pub fn rvq_residual_property() -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let cfg = CodecConfig::default();
        let transform = Transform::new(cfg.clone(), 5)?;
        let train = make_dataset(20, &SpecRanges::default(), 100)?;
        let held = make_dataset(20, &SpecRanges::default(), 200)?;
        let waves = |d: &crate::synthetic::Dataset| d.items.iter().map(|p| p.wave.clone()).collect::<Vec<_>>();
        let fit = latents_of(&waves(&train), &transform, &cfg)?;
        let mut eval = latents_of(&waves(&held), &transform, &cfg)?;
        eval.truncate(1000);
        if eval.len() < 1000 {
            return Ok((false, format!("only {} held-out latents", eval.len())));
        }
        let fit = Tensor::from_rows(&fit)?;
        let eval = Tensor::from_rows(&eval)?;
        let stack = train_codebooks(&fit, 4, cfg.m, 25, 7)?;
        let mses = (1..=4)
            .map(|k| quantization_mse(&eval, &truncate_stack(&stack, k)))
            .collect::<Result<Vec<_>>>()?;
        let ok = mses.windows(2).all(|w| w[1] <= w[0]);
        Ok((ok, format!("MSE by K: {:?}", mses.iter().map(|m| format!("{m:.4e}")).collect::<Vec<_>>())))
    };
    CheckOutcome::from_result("RVQ residual property", run())
}

/// Perturbing decoder input row `j` leaves logits before `j` bit-identical.
pub fn decoder_causality() -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let (dec, store) = micro_decoder(55);
        let mut rng = SplitMix64::new(56);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let zs = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let logits = |x: &Tensor| -> Result<Vec<Tensor>> {
            let mut g = Graph::new();
            let mut s = Session::inference(&mut g, &store);
            let xv = s.g.constant(x.clone());
            let zv = s.g.constant(zs.clone());
            let out = dec.forward(&mut s, xv, zv)?;
            Ok(out.logits.iter().map(|&v| s.g.value(v).clone()).collect())
        };
        let base = logits(&x)?;
        let mut violations = 0;
        let mut blind = 0;
        for j in 0..6 {
            let mut xp = x.clone();
            for c in 0..8 {
                xp.data_mut()[j * 8 + c] += 0.5 + rng.next_f64();
            }
            let pert = logits(&xp)?;
            for (b, p) in base.iter().zip(&pert) {
                for i in 0..j {
                    if b.row(i).iter().zip(p.row(i)).any(|(u, v)| u.to_bits() != v.to_bits()) {
                        violations += 1;
                    }
                }
                if b.row(j) == p.row(j) {
                    blind += 1;
                }
            }
        }
        Ok((
            violations == 0 && blind == 0,
            format!("T=6 with active adapters: {violations} earlier-position changes, {blind} positions blind to their own input"),
        ))
    };
    CheckOutcome::from_result("decoder causality", run())
}

/// Closed forms at `τ ∈ {0, ⌊Q/2⌋, Q−1}` and monotonicity of the decaying
/// kinds on 1000 random pairs.
pub fn schedule_fidelity() -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let pi = std::f64::consts::PI;
        let mut worst = 0.0f64;
        let mut random_ok = true;
        for &(a_max, eps, q) in &[(1.0, 0.1, 100usize), (2.5, 0.0, 37), (0.7, 0.3, 10)] {
            for &tau in &[0, q / 2, q - 1] {
                let (t, qf) = (tau as f64, q as f64);
                for kind in ScheduleKind::ALL {
                    let s = Schedule {
                        kind,
                        a_max,
                        eps,
                        seed: 3,
                    };
                    let got = s.weight(tau, q)?;
                    let expect = match kind {
                        ScheduleKind::Constant => 1.0,
                        ScheduleKind::Step => a_max * if t < qf / 2.0 { 1.0 } else { 0.0 } + eps,
                        ScheduleKind::Linear => (qf - t) * a_max / qf + eps,
                        ScheduleKind::Cosine => a_max * (1.0 + (pi * t / qf).cos()) / 2.0 + eps,
                        ScheduleKind::Random => {
                            random_ok &= got >= eps.min(a_max) && got <= a_max.max(eps);
                            random_ok &= got == s.weight(tau, q)?;
                            got
                        }
                    };
                    worst = worst.max((got - expect).abs());
                }
            }
        }
        let mut rng = SplitMix64::new(77);
        let mut monotone_fail = 0;
        for _ in 0..1000 {
            let q = 2 + rng.below(400);
            let (a, b) = (rng.below(q), rng.below(q));
            let (lo, hi) = (a.min(b), a.max(b));
            for kind in [ScheduleKind::Cosine, ScheduleKind::Linear, ScheduleKind::Step] {
                let s = Schedule::new(kind);
                if s.weight(lo, q)? < s.weight(hi, q)? {
                    monotone_fail += 1;
                }
            }
        }
        Ok((
            worst <= 1e-12 && random_ok && monotone_fail == 0,
            format!("closed-form worst {worst:.1e}, random bounded {random_ok}, monotonicity violations {monotone_fail}/3000"),
        ))
    };
    CheckOutcome::from_result("schedule fidelity", run())
}

/// One-dimensional closed form, self-distance and matrix square roots.
pub fn frechet_oracles() -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut rng = SplitMix64::new(91);
        let mut closed = 0.0f64;
        for _ in 0..10 {
            let a: Vec<f64> = (0..40).map(|_| 0.5 + 1.5 * rng.normal()).collect();
            let b: Vec<f64> = (0..30).map(|_| -1.0 + 0.6 * rng.normal()).collect();
            let stats = |x: &[f64]| {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
                (m, v.sqrt())
            };
            let ((m1, s1), (m2, s2)) = (stats(&a), stats(&b));
            let p = FeatureSet::new(Tensor::matrix(40, 1, a)?, "oracle");
            let q = FeatureSet::new(Tensor::matrix(30, 1, b)?, "oracle");
            closed = closed.max((frechet_distance(&p, &q)? - ((m1 - m2).powi(2) + (s1 - s2).powi(2))).abs());
        }
        let mut self_fd = 0.0f64;
        for n in [10, 64] {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(32, 1.0)).collect();
            let p = FeatureSet::new(Tensor::from_rows(&rows)?, "oracle");
            self_fd = self_fd.max(frechet_distance(&p, &p)?);
        }
        let mut sqrt_err = 0.0f64;
        for _ in 0..10 {
            let a = Tensor::randn(&[40, 32], 1.0, &mut rng);
            let s = a.transpose().matmul(&a)?;
            let r = matrix_sqrt_psd(&s)?;
            let rr = r.matmul(&r)?;
            let num: f64 = rr.data().iter().zip(s.data()).map(|(x, y)| (x - y).powi(2)).sum();
            sqrt_err = sqrt_err.max((num / s.sq_norm()).sqrt());
        }
        Ok((
            closed <= 1e-8 && self_fd < 1e-8 && sqrt_err < 1e-8,
            format!("1-D closed form {closed:.1e}, FD(P,P) {self_fd:.1e}, sqrt reconstruction {sqrt_err:.1e}"),
        ))
    };
    CheckOutcome::from_result("Frechet oracles", run())
}

/// Further per-module contracts.
pub fn module_invariants() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.push(CheckOutcome::from_result("softmax rows sum to one", (|| {
        let mut rng = SplitMix64::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[20, 9], 5.0, &mut rng));
        let y = g.softmax_rows(x);
        let worst = (0..20)
            .map(|i| (g.value(y).row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((worst < 1e-12, format!("worst {worst:.1e}")))
    })()));
    out.push(CheckOutcome::from_result("static clip gives constant dynamics", (|| {
        let model = Model::new(ModelConfig::micro())?;
        let store = model.init_params(2);
        let frame: Vec<f64> = SplitMix64::new(3).normals(768, 0.1).iter().map(|v| (0.5 + v).clamp(0.0, 1.0)).collect();
        let clip = VideoClip::from_frames(&vec![frame; 6], 3, 16, 16, 25.0)?;
        let (track, att) = model.dynamics.encode_clip(&store, &clip)?;
        let same = (1..6).all(|i| track.z_d.row(i) == track.z_d.row(0));
        let stochastic = att.iter().all(|a| (0..a.rows()).all(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9));
        Ok((same && stochastic, format!("rows identical {same}, attention row-stochastic {stochastic}")))
    })()));
    out.push(CheckOutcome::from_result("keyframes and interpolation", (|| {
        let pair = gen_pair(&PairSpec {
            duration: 1.0,
            beat_period: 0.4,
            motion: crate::synthetic::MotionKind::SceneCut,
            ..PairSpec::default()
        })?;
        let keys = select_keyframes(&pair.clip, 3)?;
        let cut_frames: Vec<usize> = pair.beat_times.iter().map(|b| (b * 25.0).round() as usize).collect();
        let keys_ok = keys == [0, cut_frames[0], cut_frames[1]];
        let idx = nn_source_indices(2, 2.0, 4, 4.0)?;
        Ok((keys_ok && idx == [0, 1, 1, 1], format!("keyframes {keys:?}, nn indices {idx:?}")))
    })()));
    out.push(CheckOutcome::from_result("synthetic data determinism", (|| {
        let a = make_dataset(10, &SpecRanges::default(), 4)?;
        let b = make_dataset(10, &SpecRanges::default(), 4)?;
        let same = a.items == b.items && a.train == b.train && a.test == b.test;
        Ok((same && a.train.len() == 9 && a.test.len() == 1, format!("identical {same}, split {}/{}", a.train.len(), a.test.len())))
    })()));
    out.push(CheckOutcome::from_result("KL divergence is non-negative", (|| {
        let mut rng = SplitMix64::new(5);
        let mut worst = f64::INFINITY;
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| rng.below(10) as f64).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.below(10) as f64).collect();
            worst = worst.min(kl_divergence(&a, &b)?);
        }
        let zero = kl_divergence(&[1.0, 2.0], &[1.0, 2.0])?;
        Ok((worst >= 0.0 && zero == 0.0, format!("min {worst:.2e}, self {zero}")))
    })()));
    out
}

/// Every check, criteria first.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = vec![
        gradient_suite(20),
        extension_endpoints(),
        rvq_residual_property(),
        decoder_causality(),
        schedule_fidelity(),
        frechet_oracles(),
    ];
    out.extend(module_invariants());
    out
}

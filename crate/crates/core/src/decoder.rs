//! Autoregressive token decoder: causal self-attention, single-head
//! cross-attention over projected semantics, K per-codebook output heads and
//! low-rank adapters on a frozen base.

use serde::{Deserialize, Serialize};

use crate::alignment::{blend, summed_embeddings, Alpha};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, multi_head_attention, ParamStore, Session};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Model width (reference system: 1536 with 48 layers).
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub max_t: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Hidden width of the feed-forward block, as a multiple of `d`.
    pub ffn_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d: 64,
            k: 4,
            m: 64,
            max_t: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            ffn_mult: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d == 0 || self.k == 0 || self.m == 0 {
            return Err(Error::config("decoder sizes must be positive"));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model dim {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d {
            return Err(Error::config(format!(
                "LoRA rank {} must lie in 1..={}",
                self.lora_rank, self.d
            )));
        }
        if self.max_t == 0 || self.ffn_mult == 0 {
            return Err(Error::config("max_t and ffn_mult must be positive"));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// `W + (lora_alpha/r)·Down·Up` with `r = Down.cols()`.
pub fn apply_lora(w: &Tensor, down: &Tensor, up: &Tensor, lora_alpha: f64) -> Result<Tensor> {
    let r = down.cols();
    if r == 0 || r > w.rows() {
        return Err(Error::config(format!("LoRA rank {r} exceeds model dim {}", w.rows())));
    }
    let delta = down.matmul(up)?;
    if delta.shape() != w.shape() {
        return Err(Error::Dimension {
            op: "apply_lora",
            left: w.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    let scale = lora_alpha / r as f64;
    let data = w.data().iter().zip(delta.data()).map(|(a, b)| a + scale * b).collect();
    Tensor::new(w.shape().to_vec(), data)
}

const SELF_PROJ: [&str; 4] = ["q", "k", "v", "o"];
const CROSS_PROJ: [&str; 3] = ["q", "k", "v"];

/// Logits per codebook head plus the cross-attention maps per layer.
pub struct DecoderOutput {
    /// `K` matrices of shape `[T × M]`.
    pub logits: Vec<Var>,
    /// `[T × N_d]` per layer.
    pub cross_attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    /// Zero selects the argmax.
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 16,
            seed: 0,
        }
    }
}

impl Sampler {
    pub fn argmax(seed: u64) -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
            seed,
        }
    }

    /// Draws one class from `logits`.
    pub fn sample(&self, logits: &[f64], rng: &mut SplitMix64) -> usize {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        if self.temperature <= 0.0 || self.top_k <= 1 {
            return order[0];
        }
        let kept = &order[..self.top_k.min(order.len())];
        let max = logits[kept[0]];
        let weights: Vec<f64> = kept
            .iter()
            .map(|&i| ((logits[i] - max) / self.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.next_f64() * total;
        for (&i, w) in kept.iter().zip(&weights) {
            if u < *w {
                return i;
            }
            u -= w;
        }
        kept[kept.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Frozen base transformer: embeddings, positions, attention and
    /// feed-forward weights.
    pub fn init_base(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let c = &self.cfg;
        let emb_std = 1.0 / (c.k as f64).sqrt();
        for k in 0..c.k {
            store.insert(format!("dec.embed.{k}"), Tensor::randn(&[c.m, c.d], emb_std, rng), false);
        }
        store.insert("dec.start", Tensor::randn(&[1, c.d], 1.0, rng), false);
        store.insert("dec.pos", Tensor::randn(&[c.max_t, c.d], 0.1, rng), false);
        for l in 0..c.n_layers {
            let p = format!("dec.l{l}");
            for ln in ["ln1", "ln2", "ln3"] {
                init_layer_norm(store, &format!("{p}.{ln}"), c.d, false);
            }
            for name in SELF_PROJ {
                init_linear(store, &format!("{p}.self.{name}"), c.d, c.d, false, rng);
            }
            for name in CROSS_PROJ {
                let std = (1.0 / c.d as f64).sqrt();
                store.insert(format!("{p}.cross.{name}.w"), Tensor::randn(&[c.d, c.d], std, rng), false);
            }
            init_linear(store, &format!("{p}.ffn.fc1"), c.d, c.ffn_mult * c.d, false, rng);
            init_linear(store, &format!("{p}.ffn.fc2"), c.ffn_mult * c.d, c.d, false, rng);
        }
        init_layer_norm(store, "dec.ln_f", c.d, false);
    }

    /// Trainable output heads and adapters (`Up` zero so the effective
    /// weights start equal to the base).
    pub fn init_adapters(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let c = &self.cfg;
        for k in 0..c.k {
            init_linear(store, &format!("dec.head.{k}"), c.d, c.m, true, rng);
        }
        let std = (1.0 / c.d as f64).sqrt();
        for name in self.adapted_weights() {
            store.insert(
                format!("{name}.lora.down"),
                Tensor::randn(&[c.d, c.lora_rank], std, rng),
                true,
            );
            store.insert(format!("{name}.lora.up"), Tensor::zeros(&[c.lora_rank, c.d]), true);
        }
    }

    /// Prefixes of every weight carrying an adapter.
    pub fn adapted_weights(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.cfg.n_layers {
            out.extend(SELF_PROJ.iter().map(|n| format!("dec.l{l}.self.{n}")));
            out.extend(CROSS_PROJ.iter().map(|n| format!("dec.l{l}.cross.{n}")));
        }
        out
    }

    fn weight(&self, s: &mut Session, prefix: &str) -> Result<Var> {
        let w = s.p(&format!("{prefix}.w"))?;
        let down_name = format!("{prefix}.lora.down");
        if s.store().get(&down_name).is_none() {
            return Ok(w);
        }
        let down = s.p(&down_name)?;
        let up = s.p(&format!("{prefix}.lora.up"))?;
        let delta = s.g.matmul(down, up)?;
        let delta = s.g.scale(delta, self.cfg.lora_scale());
        s.g.add(w, delta)
    }

    fn proj(&self, s: &mut Session, prefix: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.weight(s, prefix)?;
        if bias {
            let b = s.p(&format!("{prefix}.b"))?;
            s.g.affine(x, w, b)
        } else {
            s.g.matmul(x, w)
        }
    }

    pub fn embedding_tables(&self, s: &mut Session) -> Result<Vec<Var>> {
        (0..self.cfg.k).map(|k| s.p(&format!("dec.embed.{k}"))).collect()
    }

    /// Decoder input for the first `t` positions: row `i` blends dynamics
    /// row `i` with the summed embeddings of the codes at `i − 1`, and the
    /// start embedding at `i = 0`.
    pub fn input(&self, s: &mut Session, codes: &[usize], t: usize, z_tilde_d: Var, alpha: Alpha) -> Result<Var> {
        let k = self.cfg.k;
        if t == 0 || codes.len() < (t - 1) * k {
            return Err(Error::contract(format!(
                "{} codes cannot feed {t} positions",
                codes.len()
            )));
        }
        if s.g.shape(z_tilde_d).0 < t {
            return Err(Error::contract(format!(
                "dynamics has {} rows, need {t}",
                s.g.shape(z_tilde_d).0
            )));
        }
        let start = s.p("dec.start")?;
        let shifted = if t == 1 {
            start
        } else {
            let tables = self.embedding_tables(s)?;
            let prev = summed_embeddings(s.g, &tables, &codes[..(t - 1) * k])?;
            s.g.concat_rows(&[start, prev])?
        };
        let dyn_rows = if s.g.shape(z_tilde_d).0 == t {
            z_tilde_d
        } else {
            s.g.slice_rows(z_tilde_d, 0, t)?
        };
        blend(s.g, dyn_rows, shifted, alpha)
    }

    /// Full forward over `extended` `[T × d]` with cross-attention on
    /// `z_tilde_s` `[N_d × d]`.
    pub fn forward(&self, s: &mut Session, extended: Var, z_tilde_s: Var) -> Result<DecoderOutput> {
        let c = &self.cfg;
        let (t, d) = s.g.shape(extended);
        if t > c.max_t {
            return Err(Error::input(format!("{t} positions exceed max_t {}", c.max_t)));
        }
        if d != c.d || s.g.shape(z_tilde_s).1 != c.d {
            return Err(Error::Dimension {
                op: "decoder_forward",
                left: vec![t, d],
                right: vec![s.g.shape(z_tilde_s).0, s.g.shape(z_tilde_s).1],
            });
        }
        let pos = s.p("dec.pos")?;
        let pos = s.g.slice_rows(pos, 0, t)?;
        let mut x = s.g.add(extended, pos)?;
        let mut cross_attention = Vec::with_capacity(c.n_layers);
        let inv_sqrt_d = 1.0 / (c.d as f64).sqrt();
        for l in 0..c.n_layers {
            let p = format!("dec.l{l}");

            let h = s.layer_norm(&format!("{p}.ln1"), x)?;
            let q = self.proj(s, &format!("{p}.self.q"), h, true)?;
            let k = self.proj(s, &format!("{p}.self.k"), h, true)?;
            let v = self.proj(s, &format!("{p}.self.v"), h, true)?;
            let (a, _) = multi_head_attention(s.g, q, k, v, c.n_heads, true, None)?;
            let a = self.proj(s, &format!("{p}.self.o"), a, true)?;
            x = s.g.add(x, a)?;

            let h = s.layer_norm(&format!("{p}.ln2"), x)?;
            let q = self.proj(s, &format!("{p}.cross.q"), h, false)?;
            let k = self.proj(s, &format!("{p}.cross.k"), z_tilde_s, false)?;
            let v = self.proj(s, &format!("{p}.cross.v"), z_tilde_s, false)?;
            let (a, maps) = multi_head_attention(s.g, q, k, v, 1, false, Some(inv_sqrt_d))?;
            cross_attention.push(maps[0]);
            x = s.g.add(x, a)?;

            let h = s.layer_norm(&format!("{p}.ln3"), x)?;
            let h = s.mlp2(&format!("{p}.ffn"), h)?;
            x = s.g.add(x, h)?;
        }
        let out = s.layer_norm("dec.ln_f", x)?;
        let logits = (0..c.k)
            .map(|k| s.linear(&format!("dec.head.{k}"), out))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderOutput { logits, cross_attention })
    }

    /// Samples `t_q` token rows one position at a time, feeding each
    /// sampled row back through the token extension.
    pub fn generate(
        &self,
        store: &ParamStore,
        z_tilde_d: &Tensor,
        z_tilde_s: &Tensor,
        alpha: Alpha,
        t_q: usize,
        frame_rate_q: f64,
        duration: f64,
        sampler: &Sampler,
    ) -> Result<TokenGrid> {
        if z_tilde_d.rows() < t_q {
            return Err(Error::input(format!(
                "dynamics has {} rows, need {t_q}",
                z_tilde_d.rows()
            )));
        }
        let k = self.cfg.k;
        let mut rng = SplitMix64::new(derive_seed(sampler.seed, "decoder.sample"));
        let mut codes = Vec::with_capacity(t_q * k);
        for i in 0..t_q {
            let mut g = Graph::new();
            let mut s = Session::inference(&mut g, store);
            let zd = s.g.constant(z_tilde_d.clone());
            let zs = s.g.constant(z_tilde_s.clone());
            let x = self.input(&mut s, &codes, i + 1, zd, alpha)?;
            let out = self.forward(&mut s, x, zs)?;
            for head in &out.logits {
                codes.push(sampler.sample(s.g.value(*head).row(i), &mut rng));
            }
        }
        TokenGrid::new(codes, k, self.cfg.m, frame_rate_q, duration)
    }
}

#[cfg(test)]
mod tests;

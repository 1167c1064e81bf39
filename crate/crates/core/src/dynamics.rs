//! Frame-wise dynamics features.
//!
//! For every frame `i` the triplet `(i-1, i, i+1)` (edges replicated) is
//! embedded into patch feature grids, forward and backward all-pairs
//! correlation volumes are built, a small recurrent update refines a
//! bi-directional flow estimate while sampling local correlation windows,
//! and the final window and hidden features are fused into per-cell motion
//! features. Self-attention over cells followed by average pooling gives one
//! `d_m` vector per frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_linear, mean_of, multi_head_attention, ParamStore, Session};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;
use crate::video::VideoClip;

const PREFIX: &str = "dyn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Per-cell embedding width.
    pub d_g: usize,
    /// Correlation window radius (1 → 3×3).
    pub radius: usize,
    /// Hidden width of the flow update network.
    pub d_flow: usize,
    /// Output dynamics width (reference system: 1024).
    pub d_m: usize,
    /// Refinement iterations.
    pub iters: usize,
    pub heads: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            d_g: 8,
            radius: 1,
            d_flow: 16,
            d_m: 32,
            iters: 2,
            heads: 4,
        }
    }
}

impl DynamicsConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn taps(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    /// Width of the gathered correlation features (both directions).
    pub fn d_corr(&self) -> usize {
        2 * self.taps()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "frame {}×{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.iters == 0 {
            return Err(Error::config("flow refinement needs at least one iteration"));
        }
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return Err(Error::config("d_m must be divisible by the head count"));
        }
        Ok(())
    }
}

/// Per-frame dynamics `[T_v × d_m]` with its timing.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrack {
    pub z_d: Tensor,
    pub frame_rate: f64,
    pub duration: f64,
}

/// Results of the iterative refinement, all `[cells × ·]`.
#[derive(Debug, Clone, Copy)]
pub struct FlowFeatures {
    /// Last gathered correlation windows, forward then backward.
    pub corr: Var,
    /// Last hidden state of the update network.
    pub flow: Var,
    pub flow_fwd: Var,
    pub flow_bwd: Var,
}

pub struct DynamicsOutput {
    pub z_d: Var,
    /// Head-averaged cell attention per frame.
    pub attention: Vec<Tensor>,
}

/// `[cells × H·W]` averaging matrix for `patch × patch` blocks.
pub fn pooling_matrix(height: usize, width: usize, patch: usize) -> Tensor {
    let (gh, gw) = (height / patch, width / patch);
    let mut data = vec![0.0; gh * gw * height * width];
    let inv = 1.0 / (patch * patch) as f64;
    for y in 0..height {
        for x in 0..width {
            let cell = (y / patch) * gw + x / patch;
            data[cell * height * width + y * width + x] = inv;
        }
    }
    Tensor::from_parts(vec![gh * gw, height * width], data)
}

#[derive(Debug, Clone)]
pub struct DynamicsEncoder {
    pub cfg: DynamicsConfig,
    pool: Tensor,
}

impl DynamicsEncoder {
    pub fn new(cfg: DynamicsConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = pooling_matrix(cfg.height, cfg.width, cfg.patch);
        Ok(Self { cfg, pool })
    }

    /// Registers trainable weights. The flow-delta head starts at zero, so
    /// flow stays exactly zero until training moves it.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let c = &self.cfg;
        init_linear(store, &format!("{PREFIX}.embed"), c.channels, c.d_g, true, rng);
        let update_in = c.d_corr() + 4 + c.d_flow;
        init_linear(store, &format!("{PREFIX}.update"), update_in, c.d_flow, true, rng);
        store.insert(format!("{PREFIX}.delta.w"), Tensor::zeros(&[c.d_flow, 4]), true);
        store.insert(format!("{PREFIX}.delta.b"), Tensor::zeros(&[1, 4]), true);
        init_linear(store, &format!("{PREFIX}.fuse"), c.d_corr() + c.d_flow, c.d_m, true, rng);
        for name in ["q", "k", "v"] {
            init_linear(store, &format!("{PREFIX}.attn.{name}"), c.d_m, c.d_m, true, rng);
        }
    }

    /// Patch means per channel, `[cells × C]`.
    pub fn pool_patches(&self, g: &mut Graph, frame: Var) -> Result<Var> {
        let pool = g.constant(self.pool.clone());
        g.matmul(pool, frame)
    }

    /// Frame `[H·W × C]` to a `[cells × d_g]` feature grid.
    pub fn embed_frame(&self, s: &mut Session, frame: Var) -> Result<Var> {
        let pooled = self.pool_patches(s.g, frame)?;
        s.linear(&format!("{PREFIX}.embed"), pooled)
    }

    /// `Corr[p, q] = ⟨a[p], b[q]⟩ / √d_g`.
    pub fn correlation_volume(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Dimension {
                op: "correlation_volume",
                left: vec![g.shape(a).0, g.shape(a).1],
                right: vec![g.shape(b).0, g.shape(b).1],
            });
        }
        let d = g.shape(a).1 as f64;
        let c = g.matmul_nt(a, b)?;
        Ok(g.scale(c, 1.0 / d.sqrt()))
    }

    pub fn refine_flow(&self, s: &mut Session, corr_fwd: Var, corr_bwd: Var, iters: usize) -> Result<FlowFeatures> {
        if iters == 0 {
            return Err(Error::config("flow refinement needs at least one iteration"));
        }
        let c = &self.cfg;
        let (gh, gw) = c.grid();
        let p = c.cells();
        let mut flow_fwd = s.g.constant(Tensor::zeros(&[p, 2]));
        let mut flow_bwd = s.g.constant(Tensor::zeros(&[p, 2]));
        let mut hidden = s.g.constant(Tensor::zeros(&[p, c.d_flow]));
        let mut corr_feat = None;
        for _ in 0..iters {
            let wf = s.g.window_sample(corr_fwd, flow_fwd, gh, gw, c.radius)?;
            let wb = s.g.window_sample(corr_bwd, flow_bwd, gh, gw, c.radius)?;
            let cf = s.g.concat_cols(&[wf, wb])?;
            let inp = s.g.concat_cols(&[cf, flow_fwd, flow_bwd, hidden])?;
            let h = s.linear(&format!("{PREFIX}.update"), inp)?;
            hidden = s.g.tanh(h);
            let delta = s.linear(&format!("{PREFIX}.delta"), hidden)?;
            let df = s.g.slice_cols(delta, 0, 2)?;
            let db = s.g.slice_cols(delta, 2, 2)?;
            flow_fwd = s.g.add(flow_fwd, df)?;
            flow_bwd = s.g.add(flow_bwd, db)?;
            corr_feat = Some(cf);
        }
        Ok(FlowFeatures {
            corr: corr_feat.expect("at least one iteration"),
            flow: hidden,
            flow_fwd,
            flow_bwd,
        })
    }

    /// `tanh([F_corr | F_flow] · W + b)`, `[cells × d_m]`.
    pub fn fuse_motion(&self, s: &mut Session, f_corr: Var, f_flow: Var) -> Result<Var> {
        let x = s.g.concat_cols(&[f_corr, f_flow])?;
        let y = s.linear(&format!("{PREFIX}.fuse"), x)?;
        Ok(s.g.tanh(y))
    }

    /// Self-attention over cells then mean pooling. Returns the pooled
    /// `[1 × d_m]` vector and the head-averaged `[cells × cells]` attention.
    pub fn aggregate_attention(&self, s: &mut Session, z_m: Var) -> Result<(Var, Tensor)> {
        let q = s.linear(&format!("{PREFIX}.attn.q"), z_m)?;
        let k = s.linear(&format!("{PREFIX}.attn.k"), z_m)?;
        let v = s.linear(&format!("{PREFIX}.attn.v"), z_m)?;
        let (out, attns) = multi_head_attention(s.g, q, k, v, self.cfg.heads, false, None)?;
        let pooled = s.g.mean_rows(out);
        let maps: Vec<&Tensor> = attns.iter().map(|&a| s.g.value(a)).collect();
        Ok((pooled, mean_of(&maps)))
    }

    /// Dynamics for one frame from its embedded neighbours.
    pub fn encode_triplet(&self, s: &mut Session, prev: Var, cur: Var, next: Var) -> Result<(Var, Tensor)> {
        let corr_fwd = Self::correlation_volume(s.g, cur, next)?;
        let corr_bwd = Self::correlation_volume(s.g, cur, prev)?;
        let flow = self.refine_flow(s, corr_fwd, corr_bwd, self.cfg.iters)?;
        let z_m = self.fuse_motion(s, flow.corr, flow.flow)?;
        self.aggregate_attention(s, z_m)
    }

    /// `frames` holds `t_v` stacked `[H·W × C]` frames; returns `[t_v × d_m]`.
    pub fn encode(&self, s: &mut Session, frames: Var, t_v: usize) -> Result<DynamicsOutput> {
        if t_v < 2 {
            return Err(Error::input(format!("dynamics need at least 2 frames, got {t_v}")));
        }
        let hw = self.cfg.height * self.cfg.width;
        if s.g.shape(frames) != (t_v * hw, self.cfg.channels) {
            return Err(Error::Dimension {
                op: "encode_dynamics",
                left: vec![s.g.shape(frames).0, s.g.shape(frames).1],
                right: vec![t_v * hw, self.cfg.channels],
            });
        }
        let mut embedded = Vec::with_capacity(t_v);
        for i in 0..t_v {
            let f = s.g.slice_rows(frames, i * hw, hw)?;
            embedded.push(self.embed_frame(s, f)?);
        }
        let mut rows = Vec::with_capacity(t_v);
        let mut attention = Vec::with_capacity(t_v);
        for i in 0..t_v {
            let prev = embedded[i.saturating_sub(1)];
            let next = embedded[(i + 1).min(t_v - 1)];
            let (z, a) = self.encode_triplet(s, prev, embedded[i], next)?;
            rows.push(z);
            attention.push(a);
        }
        let z_d = s.g.concat_rows(&rows)?;
        Ok(DynamicsOutput { z_d, attention })
    }

    /// Gradient-free encoding of a whole clip.
    pub fn encode_clip(&self, store: &ParamStore, clip: &VideoClip) -> Result<(DynamicsTrack, Vec<Tensor>)> {
        let mut g = Graph::new();
        let mut s = Session::inference(&mut g, store);
        let frames = s.g.constant(clip.stacked());
        let out = self.encode(&mut s, frames, clip.len())?;
        let track = DynamicsTrack {
            z_d: s.g.value(out.z_d).clone(),
            frame_rate: clip.frame_rate(),
            duration: clip.duration(),
        };
        Ok((track, out.attention))
    }
}

/// CSV with one row per query cell: `query,key_0,key_1,...`.
pub fn attention_csv(attention: &Tensor) -> String {
    let n = attention.cols();
    let mut out = String::from("query");
    for j in 0..n {
        out.push_str(&format!(",key_{j}"));
    }
    out.push('\n');
    for i in 0..attention.rows() {
        out.push_str(&i.to_string());
        for v in attention.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;

//! Keyframe semantics: content-change keyframe selection, a patch-token
//! image encoder and average pooling across keyframes.

use serde::{Deserialize, Serialize};

use crate::dynamics::pooling_matrix;
use crate::error::{Error, Result};
use crate::nn::{init_linear, ParamStore, Session};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;
use crate::video::VideoClip;

const PREFIX: &str = "sem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticsConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Hidden states per image: one global token plus a square patch grid
    /// (reference system: 50).
    pub n_h: usize,
    /// Feature width (reference system: 768).
    pub d_s: usize,
}

impl Default for SemanticsConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            n_h: 17,
            d_s: 32,
        }
    }
}

impl SemanticsConfig {
    /// Side of the patch grid, `√(N_h − 1)`.
    pub fn grid_side(&self) -> Result<usize> {
        let cells = self.n_h.checked_sub(1).filter(|&c| c > 0).ok_or_else(|| {
            Error::config("N_h must be at least 2 (global token plus patches)")
        })?;
        let side = (cells as f64).sqrt().round() as usize;
        if side * side != cells {
            return Err(Error::config(format!("N_h - 1 = {cells} is not a square patch count")));
        }
        if self.height % side != 0 || self.width % side != 0 {
            return Err(Error::config(format!(
                "frame {}×{} not divisible into {side}×{side} patches",
                self.height, self.width
            )));
        }
        Ok(side)
    }
}

/// Pooled keyframe features `[N_h × d_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticBundle {
    pub z_s: Tensor,
    pub keyframe_indices: Vec<usize>,
}

/// Picks the `n_s` frames with the largest mean absolute difference from
/// their predecessor; frame 0 always scores highest. Ties go to the lower
/// index and the result is sorted ascending.
pub fn select_keyframes(clip: &VideoClip, n_s: usize) -> Result<Vec<usize>> {
    if n_s == 0 || n_s > clip.len() {
        return Err(Error::input(format!(
            "cannot select {n_s} keyframes from {} frames",
            clip.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..clip.len())
        .map(|i| {
            let s = if i == 0 { f64::INFINITY } else { clip.frame_difference(i, i - 1) };
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored[..n_s].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct SemanticsEncoder {
    pub cfg: SemanticsConfig,
    pool: Tensor,
}

impl SemanticsEncoder {
    pub fn new(cfg: SemanticsConfig) -> Result<Self> {
        let side = cfg.grid_side()?;
        let pool = pooling_matrix(cfg.height, cfg.width, cfg.height / side);
        if cfg.height / side != cfg.width / side {
            return Err(Error::config("semantic patches must be square"));
        }
        Ok(Self { cfg, pool })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let c = &self.cfg;
        init_linear(store, &format!("{PREFIX}.patch"), c.channels, c.d_s, true, rng);
        init_linear(store, &format!("{PREFIX}.global"), c.channels, c.d_s, true, rng);
    }

    /// Frame `[H·W × C]` to `[N_h × d_s]`: global-mean token first, then one
    /// row per patch.
    pub fn encode_image(&self, s: &mut Session, frame: Var) -> Result<Var> {
        let pool = s.g.constant(self.pool.clone());
        let pooled = s.g.matmul(pool, frame)?;
        let patches = s.linear(&format!("{PREFIX}.patch"), pooled)?;
        let mean = s.g.mean_rows(frame);
        let global = s.linear(&format!("{PREFIX}.global"), mean)?;
        s.g.concat_rows(&[global, patches])
    }

    /// Mean of the keyframe encodings. `frames` is the stacked clip; indices
    /// are visited in ascending order, so the result does not depend on the
    /// order they are given in.
    pub fn encode(&self, s: &mut Session, frames: Var, keyframes: &[usize]) -> Result<Var> {
        if keyframes.is_empty() {
            return Err(Error::input("no keyframes"));
        }
        let hw = self.cfg.height * self.cfg.width;
        let mut order = keyframes.to_vec();
        order.sort_unstable();
        let mut acc: Option<Var> = None;
        for &i in &order {
            let f = s.g.slice_rows(frames, i * hw, hw)?;
            let e = self.encode_image(s, f)?;
            acc = Some(match acc {
                None => e,
                Some(a) => s.g.add(a, e)?,
            });
        }
        Ok(s.g.scale(acc.expect("non-empty"), 1.0 / order.len() as f64))
    }

    pub fn encode_clip(&self, store: &ParamStore, clip: &VideoClip, n_s: usize) -> Result<SemanticBundle> {
        let keyframe_indices = select_keyframes(clip, n_s)?;
        let mut g = Graph::new();
        let mut s = Session::inference(&mut g, store);
        let frames = s.g.constant(clip.stacked());
        let z = self.encode(&mut s, frames, &keyframe_indices)?;
        Ok(SemanticBundle {
            z_s: s.g.value(z).clone(),
            keyframe_indices,
        })
    }
}

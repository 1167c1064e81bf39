//! Temporal and dimensional alignment of dynamics onto the token grid, and
//! the token extension that blends dynamics into summed code embeddings.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsTrack;
use crate::error::{Error, Result};
use crate::nn::{init_mlp2, ParamStore, Session};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

/// Dynamics strength in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub const DEFAULT: Alpha = Alpha(0.25);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Input(format!("alpha {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Alpha {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Source frame for each of `t_q` target rows:
/// `clamp(round(i'·f_v/f_q), 0, t_v − 1)`, rounding half away from zero.
pub fn nn_source_indices(t_v: usize, f_v: f64, t_q: usize, f_q: f64) -> Result<Vec<usize>> {
    if t_v == 0 {
        return Err(Error::input("empty dynamics track"));
    }
    if !(f_v > 0.0 && f_q > 0.0) {
        return Err(Error::input("frame rates must be positive"));
    }
    Ok((0..t_q)
        .map(|i| ((i as f64 * f_v / f_q).round() as usize).min(t_v - 1))
        .collect())
}

/// Nearest-neighbour resampling of a dynamics track to `f_q` rows per second.
pub fn interpolate_nn(track: &DynamicsTrack, f_q: f64) -> Result<Tensor> {
    let t_v = track.z_d.rows();
    let t_q = (track.duration * f_q).round() as usize;
    let idx = nn_source_indices(t_v, track.frame_rate, t_q, f_q)?;
    let d = track.z_d.cols();
    let mut data = Vec::with_capacity(t_q * d);
    for &i in &idx {
        data.extend_from_slice(track.z_d.row(i));
    }
    Tensor::matrix(t_q, d, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub d_m: usize,
    pub d_s: usize,
    /// Decoder model width.
    pub d: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { d_m: 32, d_s: 32, d: 64 }
    }
}

pub fn init_params(cfg: &AlignmentConfig, store: &mut ParamStore, rng: &mut SplitMix64) {
    init_mlp2(store, "align.dyn", cfg.d_m, 2 * cfg.d, cfg.d, true, rng);
    init_mlp2(store, "align.sem", cfg.d_s, 2 * cfg.d, cfg.d, true, rng);
}

/// Row-wise MLP `d_m → 2d → d`.
pub fn project_dynamics(s: &mut Session, z: Var) -> Result<Var> {
    s.mlp2("align.dyn", z)
}

/// Row-wise MLP `d_s → 2d → d`; one output row per semantic row.
pub fn project_semantics(s: &mut Session, z: Var) -> Result<Var> {
    s.mlp2("align.sem", z)
}

/// `Σ_k E_k[codes[i, k]]` for row-major `codes` with `tables.len()` columns.
pub fn summed_embeddings(g: &mut Graph, tables: &[Var], codes: &[usize]) -> Result<Var> {
    let k = tables.len();
    if k == 0 || codes.len() % k != 0 {
        return Err(Error::contract(format!(
            "{} codes do not form rows of {k} codebooks",
            codes.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (j, &table) in tables.iter().enumerate() {
        let col: Vec<usize> = codes.iter().skip(j).step_by(k).copied().collect();
        let e = g.gather_rows(table, &col)?;
        acc = Some(match acc {
            None => e,
            Some(a) => g.add(a, e)?,
        });
    }
    Ok(acc.expect("k > 0"))
}

/// `α·dynamics + (1−α)·embedded`, row by row.
pub fn blend(g: &mut Graph, dynamics: Var, embedded: Var, alpha: Alpha) -> Result<Var> {
    let (a, b) = (g.shape(dynamics), g.shape(embedded));
    if a != b {
        return Err(Error::contract(format!(
            "dynamics {a:?} and embeddings {b:?} disagree"
        )));
    }
    let x = g.scale(dynamics, alpha.get());
    let y = g.scale(embedded, 1.0 - alpha.get());
    g.add(x, y)
}

/// Token extension: `z_i = α·z̃_d[i] + (1−α)·Σ_k E_k[code_{i,k}]`.
pub fn extend_tokens(
    g: &mut Graph,
    codes: &[usize],
    tables: &[Var],
    z_tilde_d: Var,
    alpha: Alpha,
) -> Result<Var> {
    let k = tables.len().max(1);
    let t_q = codes.len() / k;
    let rows = g.shape(z_tilde_d).0;
    if rows != t_q {
        return Err(Error::contract(format!(
            "token grid has {t_q} rows but dynamics has {rows}"
        )));
    }
    let e = summed_embeddings(g, tables, codes)?;
    blend(g, z_tilde_d, e, alpha)
}

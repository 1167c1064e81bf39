//! Distribution and alignment metrics for generated audio: a spectral
//! feature extractor, Fréchet distance between Gaussian fits, KL divergence
//! of dominant-band label histograms and a beat-synchronisation score.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub bands: usize,
    /// Added to band energies before the logarithm.
    pub floor: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            frame_len: 256,
            hop: 128,
            bands: 16,
            floor: 1e-10,
        }
    }
}

impl SpectralConfig {
    pub fn extractor_id(&self) -> String {
        format!(
            "spectral-b{}-n{}-h{}-f{:e}",
            self.bands, self.frame_len, self.hop, self.floor
        )
    }

    pub fn dim(&self) -> usize {
        2 * self.bands
    }

    /// Seconds from the start of the wave to the centre of frame `t`.
    pub fn frame_time(&self, t: usize, sample_rate: u32) -> f64 {
        (t * self.hop) as f64 / f64::from(sample_rate) + self.frame_len as f64 / (2.0 * f64::from(sample_rate))
    }
}

/// Framed log band energies.
pub struct BandAnalyzer {
    cfg: SpectralConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `[bands × bins]` triangular weights.
    filters: Vec<Vec<f64>>,
}

impl BandAnalyzer {
    pub fn new(cfg: SpectralConfig) -> Result<Self> {
        if cfg.frame_len < 4 || cfg.hop == 0 || cfg.bands == 0 || !(cfg.floor > 0.0) {
            return Err(Error::config("invalid spectral analysis configuration"));
        }
        let n = cfg.frame_len;
        let fft = FftPlanner::new().plan_fft_forward(n);
        let window = (0..n)
            .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin().powi(2))
            .collect();
        let bins = n / 2 + 1;
        let nyq = (bins - 1) as f64;
        let step = nyq / (cfg.bands + 1) as f64;
        let filters = (0..cfg.bands)
            .map(|b| {
                let (lo, c, hi) = (b as f64 * step, (b + 1) as f64 * step, (b + 2) as f64 * step);
                (0..bins)
                    .map(|k| {
                        let f = k as f64;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn cfg(&self) -> &SpectralConfig {
        &self.cfg
    }

    /// Centre frequency of band `b` in Hz.
    pub fn band_center(&self, b: usize, sample_rate: u32) -> f64 {
        (b + 1) as f64 * f64::from(sample_rate) / 2.0 / (self.cfg.bands + 1) as f64
    }

    /// `[frames × bands]` log energies.
    pub fn log_energies(&self, wave: &[f64]) -> Result<Tensor> {
        let n = self.cfg.frame_len;
        if wave.len() < n {
            return Err(Error::input(format!(
                "wave of {} samples is shorter than one {n}-sample analysis frame",
                wave.len()
            )));
        }
        let frames = (wave.len() - n) / self.cfg.hop + 1;
        let mut out = Vec::with_capacity(frames * self.cfg.bands);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            let seg = &wave[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((b, x), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            for f in &self.filters {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + self.cfg.floor).ln());
            }
        }
        Tensor::matrix(frames, self.cfg.bands, out)
    }

    /// Per-band mean then per-band standard deviation of the log energies.
    pub fn features(&self, wave: &[f64]) -> Result<Vec<f64>> {
        let e = self.log_energies(wave)?;
        let (t, b) = (e.rows(), e.cols());
        let mut mean = vec![0.0; b];
        for i in 0..t {
            for (m, v) in mean.iter_mut().zip(e.row(i)) {
                *m += v / t as f64;
            }
        }
        let mut std = vec![0.0; b];
        for i in 0..t {
            for ((s, v), m) in std.iter_mut().zip(e.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / t as f64;
            }
        }
        mean.extend(std.into_iter().map(f64::sqrt));
        Ok(mean)
    }

    /// Histogram over bands of each frame's loudest band (lowest index on
    /// ties).
    pub fn label_histogram(&self, wave: &[f64]) -> Result<Vec<f64>> {
        let e = self.log_energies(wave)?;
        let mut h = vec![0.0; self.cfg.bands];
        for i in 0..e.rows() {
            let row = e.row(i);
            let best = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            h[best] += 1.0;
        }
        Ok(h)
    }

    /// Positive log-energy flux summed over bands; entry 0 is zero.
    pub fn onset_strength(&self, wave: &[f64]) -> Result<Vec<f64>> {
        let e = self.log_energies(wave)?;
        let mut flux = vec![0.0; e.rows()];
        for t in 1..e.rows() {
            flux[t] = e.row(t).iter().zip(e.row(t - 1)).map(|(a, b)| (a - b).max(0.0)).sum();
        }
        Ok(flux)
    }
}

/// Convenience wrapper over [`BandAnalyzer::features`].
pub fn spectral_features(wave: &[f64], cfg: &SpectralConfig) -> Result<Vec<f64>> {
    BandAnalyzer::new(cfg.clone())?.features(wave)
}

/// Eigenvalues and eigenvectors (as columns of the returned row-major
/// matrix) of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(s: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::input("eigendecomposition needs a square matrix"));
    }
    let mut a = s.data().to_vec();
    let mut v = Tensor::eye(n).into_data();
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i * n + i]).collect();
    Ok((values, Tensor::matrix(n, n, v)?))
}

fn check_symmetric(s: &Tensor) -> Result<()> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::input("matrix square root needs a square matrix"));
    }
    let norm = s.sq_norm().sqrt();
    let asym: f64 = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (s.get(i, j) - s.get(j, i)).powi(2))
        .sum::<f64>()
        .sqrt();
    if asym > 1e-8 * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::input(format!("matrix is not symmetric (asymmetry {asym:e})")));
    }
    Ok(())
}

/// Principal square root `U·diag(√max(λ, 0))·Uᵀ` of a symmetric PSD matrix.
pub fn matrix_sqrt_psd(s: &Tensor) -> Result<Tensor> {
    check_symmetric(s)?;
    let n = s.rows();
    let sym = Tensor::matrix(
        n,
        n,
        (0..n * n)
            .map(|k| 0.5 * (s.data()[k] + s.data()[(k % n) * n + k / n]))
            .collect(),
    )?;
    let (vals, u) = symmetric_eigen(&sym)?;
    let roots: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| u.get(i, k) * roots[k] * u.get(j, k)).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::matrix(n, n, out)
}

/// Singular values of a square matrix by one-sided Jacobi rotations.
pub fn singular_values(b: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = (b.rows(), b.cols());
    // columns stored contiguously
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| b.get(i, j)).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    Ok(cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
}

/// Features of `N` clips from one extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub features: Tensor,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: Tensor, extractor_id: impl Into<String>) -> Self {
        Self {
            features,
            extractor_id: extractor_id.into(),
        }
    }

    pub fn from_waves(waves: &[Vec<f64>], cfg: &SpectralConfig) -> Result<Self> {
        let an = BandAnalyzer::new(cfg.clone())?;
        let rows = waves.iter().map(|w| an.features(w)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::input("no clips to extract features from"));
        }
        Ok(Self::new(Tensor::from_rows(&rows)?, cfg.extractor_id()))
    }

    /// Mean and unbiased covariance.
    pub fn gaussian(&self) -> Result<(Vec<f64>, Tensor)> {
        let (n, d) = (self.features.rows(), self.features.cols());
        if n < 2 {
            return Err(Error::input(format!("covariance needs at least 2 clips, got {n}")));
        }
        let mut mu = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mu.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let x: Vec<f64> = self.features.row(i).iter().zip(&mu).map(|(v, m)| v - m).collect();
            for a in 0..d {
                for b in a..d {
                    cov[a * d + b] += x[a] * x[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Ok((mu, Tensor::matrix(d, d, cov)?))
    }
}

/// `‖μ_P − μ_Q‖² + Tr(Σ_P + Σ_Q − 2·(√Σ_P Σ_Q √Σ_P)^{1/2})`, clamped at 0.
///
/// The last trace equals the sum of singular values of `√Σ_Q·√Σ_P`, which
/// is how it is computed.
pub fn frechet_distance(p: &FeatureSet, q: &FeatureSet) -> Result<f64> {
    if p.extractor_id != q.extractor_id {
        return Err(Error::input(format!(
            "feature extractors differ: {} vs {}",
            p.extractor_id, q.extractor_id
        )));
    }
    if p.features.cols() != q.features.cols() {
        return Err(Error::input("feature widths differ"));
    }
    let (mp, sp) = p.gaussian()?;
    let (mq, sq) = q.gaussian()?;
    let mean_term: f64 = mp.iter().zip(&mq).map(|(a, b)| (a - b).powi(2)).sum();
    let d = sp.rows();
    let trace = |s: &Tensor| (0..d).map(|i| s.get(i, i)).sum::<f64>();
    let root_p = matrix_sqrt_psd(&sp)?;
    let root_q = matrix_sqrt_psd(&sq)?;
    let cross: f64 = singular_values(&root_q.matmul(&root_p)?)?.iter().sum();
    Ok((mean_term + trace(&sp) + trace(&sq) - 2.0 * cross).max(0.0))
}

/// Add-one smoothing followed by normalisation.
pub fn smooth_histogram(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().map(|v| v + 1.0).sum();
    h.iter().map(|v| (v + 1.0) / total).collect()
}

/// `KL(ref ‖ gen)` between the smoothed histograms.
pub fn kl_divergence(h_gen: &[f64], h_ref: &[f64]) -> Result<f64> {
    if h_gen.len() != h_ref.len() || h_gen.is_empty() {
        return Err(Error::input("histograms must have the same non-zero length"));
    }
    if h_gen.iter().chain(h_ref).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::input("histogram counts must be finite and non-negative"));
    }
    let (g, r) = (smooth_histogram(h_gen), smooth_histogram(h_ref));
    Ok(r.iter().zip(&g).map(|(r, g)| r * (r / g).ln()).sum::<f64>().max(0.0))
}

/// Half-width of the beat matching window in seconds.
pub const BEAT_TOLERANCE_S: f64 = 0.05;

/// Frames whose onset strength exceeds `mean + 2·std` and is the maximum
/// of its ±2-frame neighbourhood (earliest frame wins a plateau).
pub fn onset_peaks(flux: &[f64]) -> Vec<usize> {
    const REACH: usize = 2;
    let n = flux.len();
    if n < 3 {
        return Vec::new();
    }
    let mean = flux.iter().sum::<f64>() / n as f64;
    let std = (flux.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let thr = mean + 2.0 * std;
    (1..n)
        .filter(|&t| {
            let before = t.saturating_sub(REACH)..t;
            let after = t + 1..(t + REACH + 1).min(n);
            flux[t] > thr && before.into_iter().all(|u| flux[u] < flux[t]) && after.into_iter().all(|u| flux[u] <= flux[t])
        })
        .collect()
}

/// Fraction of `beat_times` with a detected onset within ±50 ms.
pub fn beat_sync_score(wave: &[f64], sample_rate: u32, beat_times: &[f64], cfg: &SpectralConfig) -> Result<f64> {
    if beat_times.is_empty() {
        return Err(Error::input("no beats to score"));
    }
    let duration = wave.len() as f64 / f64::from(sample_rate);
    let inside: Vec<f64> = beat_times.iter().copied().filter(|&b| b >= 0.0 && b < duration).collect();
    if inside.is_empty() {
        return Err(Error::input(format!("no beat falls inside the {duration:.3} s wave")));
    }
    let an = BandAnalyzer::new(cfg.clone())?;
    let peaks: Vec<f64> = onset_peaks(&an.onset_strength(wave)?)
        .into_iter()
        .map(|t| cfg.frame_time(t, sample_rate))
        .collect();
    let hit = inside
        .iter()
        .filter(|&&b| peaks.iter().any(|p| (p - b).abs() <= BEAT_TOLERANCE_S))
        .count();
    Ok(hit as f64 / inside.len() as f64)
}

/// Evaluation summary written by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fd: f64,
    pub kl: f64,
    pub beat_sync: f64,
    pub n_clips: usize,
    pub extractor_id: String,
    pub config_hash: String,
}

#[cfg(test)]
mod tests;

//! Toy waveform codec with residual vector quantization.
//!
//! Waveforms are cut into Hann-windowed frames, projected onto a fixed
//! column-orthonormal basis to get latents, and quantized by a stack of `K`
//! k-means codebooks where each stage encodes what the previous stages left
//! over. Decoding sums the selected codewords and overlap-adds the frames
//! back into a waveform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub frame_len: usize,
    pub hop: usize,
    /// Latent dimension.
    pub d: usize,
    pub sample_rate: u32,
    /// Codebook count (reference system: 4).
    pub k: usize,
    /// Codebook size (reference system: 2048).
    pub m: usize,
}

impl Default for CodecConfig {
    /// 8 kHz, hop 160: 50 tokens per second.
    fn default() -> Self {
        Self {
            frame_len: 320,
            hop: 160,
            d: 16,
            sample_rate: 8000,
            k: 4,
            m: 64,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::config("hop must be in 1..=frame_len"));
        }
        if self.d == 0 || self.d > self.frame_len {
            return Err(Error::config("latent dim must be in 1..=frame_len"));
        }
        if self.k < 1 || self.m < 2 {
            return Err(Error::config("need K >= 1 and M >= 2"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(())
    }

    /// Tokens per second.
    pub fn token_rate(&self) -> f64 {
        f64::from(self.sample_rate) / self.hop as f64
    }

    /// Token count for a clip of `duration` seconds.
    pub fn tokens_for(&self, duration: f64) -> usize {
        (duration * self.token_rate()).round() as usize
    }
}

/// Half-sample-shifted periodic Hann window, `sin²(π(n + ½)/N)`.
///
/// It never touches zero and two copies at hop `N/2` sum to exactly one.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
            s * s
        })
        .collect()
}

/// Splits a waveform into `T_q = round(len/hop)` windowed frames; frame `i`
/// covers samples `[i·hop, i·hop + frame_len)`, zero-padded past the end.
pub fn frame_signal(wave: &[f64], cfg: &CodecConfig) -> Result<Tensor> {
    if wave.len() < cfg.frame_len {
        return Err(Error::input(format!(
            "waveform of {} samples is shorter than one frame ({})",
            wave.len(),
            cfg.frame_len
        )));
    }
    let t_q = ((wave.len() as f64 / cfg.hop as f64).round() as usize).max(1);
    let window = hann_window(cfg.frame_len);
    let mut data = vec![0.0; t_q * cfg.frame_len];
    for i in 0..t_q {
        let start = i * cfg.hop;
        for (n, w) in window.iter().enumerate() {
            if let Some(s) = wave.get(start + n) {
                data[i * cfg.frame_len + n] = s * w;
            }
        }
    }
    Tensor::matrix(t_q, cfg.frame_len, data)
}

/// Column-orthonormal `[rows × cols]` basis from modified Gram-Schmidt on a
/// seeded Gaussian matrix.
pub fn orthonormal_basis(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    // Work column-major.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v = rng.normals(rows, 1.0);
        for _ in 0..2 {
            for c in &columns {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        columns.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, c) in columns.iter().enumerate() {
        for i in 0..rows {
            data[i * cols + j] = c[i];
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

/// Linear analysis/synthesis pair over a fixed orthonormal basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub cfg: CodecConfig,
    /// `[frame_len × d]`, column-orthonormal.
    pub basis: Tensor,
}

impl Transform {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let basis = orthonormal_basis(cfg.frame_len, cfg.d, derive_seed(seed, "codec.basis"));
        Ok(Self { cfg, basis })
    }

    pub fn with_basis(cfg: CodecConfig, basis: Tensor) -> Result<Self> {
        cfg.validate()?;
        if basis.shape() != [cfg.frame_len, cfg.d] {
            return Err(Error::Dimension {
                op: "codec basis",
                left: basis.shape().to_vec(),
                right: vec![cfg.frame_len, cfg.d],
            });
        }
        Ok(Self { cfg, basis })
    }

    /// `latents = frames · B`.
    pub fn analysis(&self, frames: &Tensor) -> Result<Tensor> {
        frames.matmul(&self.basis)
    }

    /// Overlap-adds `latents · Bᵀ` and divides by the summed window, giving
    /// `T_q · hop` samples.
    pub fn synthesis(&self, latents: &Tensor) -> Result<Vec<f64>> {
        let frames = latents.matmul(&self.basis.transpose())?;
        let (t_q, fl, hop) = (frames.rows(), self.cfg.frame_len, self.cfg.hop);
        let span = (t_q - 1) * hop + fl;
        let window = hann_window(fl);
        let mut out = vec![0.0; span];
        let mut wsum = vec![0.0; span];
        for i in 0..t_q {
            let row = frames.row(i);
            for n in 0..fl {
                out[i * hop + n] += row[n];
                wsum[i * hop + n] += window[n];
            }
        }
        for (o, w) in out.iter_mut().zip(&wsum) {
            *o = if *w > 1e-8 { *o / w } else { 0.0 };
        }
        out.truncate(t_q * hop);
        Ok(out)
    }
}

/// `K` codebooks of shape `[M × d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStack {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub books: Vec<Tensor>,
}

/// Discrete music representation: `[T_q × K]` codes, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub duration: f64,
    pub frame_rate_q: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub codes: Vec<usize>,
}

impl TokenGrid {
    pub fn new(codes: Vec<usize>, k: usize, m: usize, frame_rate_q: f64, duration: f64) -> Result<Self> {
        if k == 0 || codes.len() % k != 0 {
            return Err(Error::input("code count not a multiple of K"));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c >= m) {
            return Err(Error::Index {
                what: "code",
                index: bad,
                bound: m,
            });
        }
        let grid = Self {
            duration,
            frame_rate_q,
            k,
            m,
            codes,
        };
        let expected = (duration * frame_rate_q).round() as usize;
        if grid.len() != expected {
            return Err(Error::contract(format!(
                "token grid has {} rows but round(t·f) = {expected}",
                grid.len()
            )));
        }
        Ok(grid)
    }

    /// Row count `T_q`.
    pub fn len(&self) -> usize {
        self.codes.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, i: usize, k: usize) -> usize {
        self.codes[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.codes[i * self.k..(i + 1) * self.k]
    }

    /// Codes of codebook `k` over all positions.
    pub fn column(&self, k: usize) -> Vec<usize> {
        (0..self.len()).map(|i| self.code(i, k)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: TokenGrid = serde_json::from_str(s)?;
        Self::new(g.codes, g.k, g.m, g.frame_rate_q, g.duration)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `book`; ties go to the lowest index.
pub fn nearest(book: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..book.rows() {
        let d = sq_dist(book.row(j), x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Clusters that end an iteration
/// empty are re-seeded to the point with the largest quantization error.
pub fn kmeans(data: &Tensor, m: usize, iters: usize, rng: &mut SplitMix64) -> Result<Tensor> {
    let (n, d) = (data.rows(), data.cols());
    if n < m {
        return Err(Error::input(format!("k-means needs at least {m} points, got {n}")));
    }
    let mut centroids = vec![0.0; m * d];
    let first = rng.below(n);
    centroids[..d].copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut idx = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    idx = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            idx.unwrap_or(0)
        } else {
            rng.below(n)
        };
        centroids[c * d..(c + 1) * d].copy_from_slice(data.row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(data.row(i), data.row(pick)));
        }
    }

    let mut assign = vec![0usize; n];
    let mut err = vec![0.0; n];
    for _ in 0..iters {
        let book = Tensor::from_parts(vec![m, d], centroids.clone());
        for i in 0..n {
            let (j, e) = nearest(&book, data.row(i));
            assign[i] = j;
            err[i] = e;
        }
        let mut sums = vec![0.0; m * d];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            } else {
                let worst = (0..n)
                    .max_by(|&a, &b| err[a].total_cmp(&err[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                centroids[c * d..(c + 1) * d].copy_from_slice(data.row(worst));
                err[worst] = 0.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, d], centroids))
}

/// Fits `k` codebooks of size `m`, stage `s` on the residuals left by
/// stages `0..s`.
pub fn train_codebooks(latents: &Tensor, k: usize, m: usize, iters: usize, seed: u64) -> Result<CodebookStack> {
    if k == 0 || m < 2 {
        return Err(Error::config("need K >= 1 and M >= 2"));
    }
    if latents.rows() < m {
        return Err(Error::input(format!(
            "codebook training needs N >= M ({} < {m})",
            latents.rows()
        )));
    }
    let d = latents.cols();
    let mut residual = latents.clone();
    let mut books = Vec::with_capacity(k);
    for stage in 0..k {
        let mut rng = SplitMix64::new(derive_seed(seed, &format!("rvq.stage{stage}")));
        let book = kmeans(&residual, m, iters, &mut rng)?;
        for i in 0..residual.rows() {
            let (j, _) = nearest(&book, residual.row(i));
            let code = book.row(j).to_vec();
            let row = &mut residual.data_mut()[i * d..(i + 1) * d];
            row.iter_mut().zip(&code).for_each(|(r, c)| *r -= c);
        }
        books.push(book);
    }
    Ok(CodebookStack { k, m, d, books })
}

/// Greedy residual nearest-neighbour coding. Returns row-major `[T × K]`
/// codes.
pub fn rvq_codes(latents: &Tensor, stack: &CodebookStack) -> Result<Vec<usize>> {
    if latents.cols() != stack.d {
        return Err(Error::Dimension {
            op: "rvq_encode",
            left: latents.shape().to_vec(),
            right: vec![stack.m, stack.d],
        });
    }
    let mut codes = Vec::with_capacity(latents.rows() * stack.k);
    for i in 0..latents.rows() {
        let mut r = latents.row(i).to_vec();
        for book in &stack.books {
            let (j, _) = nearest(book, &r);
            r.iter_mut().zip(book.row(j)).for_each(|(x, c)| *x -= c);
            codes.push(j);
        }
    }
    Ok(codes)
}

/// Quantizes latents into a [`TokenGrid`] carrying the given timing.
pub fn rvq_encode(latents: &Tensor, stack: &CodebookStack, frame_rate_q: f64, duration: f64) -> Result<TokenGrid> {
    let codes = rvq_codes(latents, stack)?;
    TokenGrid::new(codes, stack.k, stack.m, frame_rate_q, duration)
}

/// `latent_i = Σ_k books[k][code[i,k]]`.
pub fn rvq_decode(grid: &TokenGrid, stack: &CodebookStack) -> Result<Tensor> {
    if grid.k != stack.k {
        return Err(Error::contract(format!(
            "grid has K={} but codebook stack has K={}",
            grid.k, stack.k
        )));
    }
    let mut out = vec![0.0; grid.len() * stack.d];
    for i in 0..grid.len() {
        let row = &mut out[i * stack.d..(i + 1) * stack.d];
        for (k, book) in stack.books.iter().enumerate() {
            let c = grid.code(i, k);
            if c >= stack.m {
                return Err(Error::Index {
                    what: "code",
                    index: c,
                    bound: stack.m,
                });
            }
            row.iter_mut().zip(book.row(c)).for_each(|(o, v)| *o += v);
        }
    }
    Ok(Tensor::from_parts(vec![grid.len(), stack.d], out))
}

/// Stack truncated to its first `k` stages.
pub fn truncate_stack(stack: &CodebookStack, k: usize) -> CodebookStack {
    CodebookStack {
        k,
        m: stack.m,
        d: stack.d,
        books: stack.books[..k].to_vec(),
    }
}

/// Mean squared reconstruction error of `decode(encode(latents))`.
pub fn quantization_mse(latents: &Tensor, stack: &CodebookStack) -> Result<f64> {
    let codes = rvq_codes(latents, stack)?;
    let grid = TokenGrid {
        duration: 0.0,
        frame_rate_q: 0.0,
        k: stack.k,
        m: stack.m,
        codes,
    };
    let rec = rvq_decode(&grid, stack)?;
    Ok(sq_dist(latents.data(), rec.data()) / latents.len() as f64)
}

/// Transform plus trained codebooks: waveform in, tokens out, and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioCodec {
    pub transform: Transform,
    pub stack: CodebookStack,
}

impl AudioCodec {
    /// Fits codebooks on the latents of all `waves`.
    pub fn fit(cfg: CodecConfig, waves: &[Vec<f64>], iters: usize, seed: u64) -> Result<Self> {
        let transform = Transform::new(cfg.clone(), seed)?;
        let mut rows = Vec::new();
        let mut n = 0;
        for w in waves {
            let lat = transform.analysis(&frame_signal(w, &cfg)?)?;
            n += lat.rows();
            rows.extend_from_slice(lat.data());
        }
        let latents = Tensor::matrix(n, cfg.d, rows)?;
        let stack = train_codebooks(&latents, cfg.k, cfg.m, iters, derive_seed(seed, "codec.books"))?;
        Ok(Self { transform, stack })
    }

    pub fn cfg(&self) -> &CodecConfig {
        &self.transform.cfg
    }

    pub fn encode_wave(&self, wave: &[f64]) -> Result<TokenGrid> {
        let cfg = self.cfg();
        let frames = frame_signal(wave, cfg)?;
        let latents = self.transform.analysis(&frames)?;
        let duration = wave.len() as f64 / f64::from(cfg.sample_rate);
        rvq_encode(&latents, &self.stack, cfg.token_rate(), duration)
    }

    pub fn decode_wave(&self, grid: &TokenGrid) -> Result<Vec<f64>> {
        let latents = rvq_decode(grid, &self.stack)?;
        self.transform.synthesis(&latents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CodecConfig {
        CodecConfig {
            frame_len: 8,
            hop: 4,
            d: 4,
            sample_rate: 100,
            k: 2,
            m: 4,
        }
    }

    #[test]
    fn framing_examples() {
        let cfg = CodecConfig::default();
        let f = frame_signal(&vec![0.0; 8000], &cfg).unwrap();
        assert_eq!(f.rows(), 50);
        assert!(f.data().iter().all(|&v| v == 0.0));

        let cfg = CodecConfig {
            hop: 8,
            ..small_cfg()
        };
        let mut wave = vec![0.0; 32];
        wave[0] = 1.0;
        let f = frame_signal(&wave, &cfg).unwrap();
        assert_eq!(f.rows(), 4);
        assert_eq!(f.get(0, 0), hann_window(8)[0]);
        assert!(f.data()[8..].iter().all(|&v| v == 0.0));

        assert!(matches!(
            frame_signal(&[0.0; 7], &small_cfg()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hann_is_cola_at_half_hop() {
        let w = hann_window(320);
        for n in 0..160 {
            assert!((w[n] + w[n + 160] - 1.0).abs() < 1e-12);
        }
        assert!(w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = orthonormal_basis(32, 8, 3);
        let g = b.transpose().matmul(&b).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(8)) < 1e-12);
    }

    #[test]
    fn zero_latents_give_silence() {
        let t = Transform::new(small_cfg(), 1).unwrap();
        let wave = t.synthesis(&Tensor::zeros(&[5, 4])).unwrap();
        assert_eq!(wave.len(), 20);
        assert!(wave.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_rank_single_frame_reconstructs() {
        let cfg = CodecConfig {
            frame_len: 16,
            hop: 16,
            d: 16,
            sample_rate: 16,
            k: 1,
            m: 2,
        };
        let t = Transform::new(cfg.clone(), 9).unwrap();
        let mut rng = SplitMix64::new(4);
        let wave = rng.normals(16, 1.0);
        let lat = t.analysis(&frame_signal(&wave, &cfg).unwrap()).unwrap();
        let rec = t.synthesis(&lat).unwrap();
        for (a, b) in wave.iter().zip(&rec) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn analysis_residual_matches_projector_oracle() {
        let cfg = CodecConfig::default();
        let t = Transform::new(cfg.clone(), 2).unwrap();
        let mut rng = SplitMix64::new(8);
        let frames = frame_signal(&rng.normals(1600, 1.0), &cfg).unwrap();
        let lat = t.analysis(&frames).unwrap();
        // explicit projector P = B·Bᵀ
        let proj = t.basis.matmul(&t.basis.transpose()).unwrap();
        let inside = frames.matmul(&proj).unwrap();
        let outside: f64 = frames
            .data()
            .iter()
            .zip(inside.data())
            .map(|(f, p)| (f - p) * (f - p))
            .sum();
        let residual = frames.sq_norm() - lat.sq_norm();
        assert!((outside - residual).abs() < 1e-9 * frames.sq_norm());
        // reconstructed frames equal the projection
        let rec_frames = lat.matmul(&t.basis.transpose()).unwrap();
        assert!(rec_frames.max_abs_diff(&inside) < 1e-12);
    }

    #[test]
    fn kmeans_exact_cover() {
        let mut rng = SplitMix64::new(5);
        let pts = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let stack = train_codebooks(&pts, 1, 6, 10, 1).unwrap();
        assert!(quantization_mse(&pts, &stack).unwrap() < 1e-24);
    }

    #[test]
    fn kmeans_two_clusters_fixpoint() {
        let mut rng = SplitMix64::new(6);
        let mut data = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { -1.0 } else { 1.0 };
            data.push(c + 1e-3 * rng.normal());
        }
        // symmetric noise: the two cluster means are exactly ±1 + mean(noise)
        let pts = Tensor::matrix(200, 1, data.clone()).unwrap();
        let book = kmeans(&pts, 2, 20, &mut SplitMix64::new(1)).unwrap();
        let mut c = [book.get(0, 0), book.get(1, 0)];
        c.sort_by(f64::total_cmp);
        let mean = |sign: f64| {
            let xs: Vec<f64> = data.iter().copied().filter(|x| x.signum() == sign).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!((c[0] - mean(-1.0)).abs() < 1e-12);
        assert!((c[1] - mean(1.0)).abs() < 1e-12);

        let exact = Tensor::matrix(4, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let book = kmeans(&exact, 2, 5, &mut SplitMix64::new(2)).unwrap();
        let mut c = [book.get(0, 0), book.get(1, 0)];
        c.sort_by(f64::total_cmp);
        assert!((c[0] + 1.0).abs() < 1e-6 && (c[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Duplicates force k-means++ to fall back to uniform picks.
        let data = Tensor::matrix(5, 1, vec![0.0, 0.0, 0.0, 0.0, 10.0]).unwrap();
        let book = kmeans(&data, 3, 5, &mut SplitMix64::new(0)).unwrap();
        let mut vals: Vec<f64> = book.data().to_vec();
        vals.sort_by(f64::total_cmp);
        assert!(vals.contains(&10.0));
        assert!(vals.contains(&0.0));
    }

    #[test]
    fn training_needs_enough_points() {
        let pts = Tensor::zeros(&[3, 2]);
        assert!(matches!(train_codebooks(&pts, 1, 4, 3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn exact_hit_and_tie_break() {
        let mut rng = SplitMix64::new(3);
        let book = Tensor::randn(&[8, 3], 1.0, &mut rng);
        let stack = CodebookStack {
            k: 1,
            m: 8,
            d: 3,
            books: vec![book.clone()],
        };
        let x = Tensor::matrix(1, 3, book.row(7).to_vec()).unwrap();
        assert_eq!(rvq_codes(&x, &stack).unwrap(), vec![7]);
        assert_eq!(quantization_mse(&x, &stack).unwrap(), 0.0);

        let mut rows = vec![vec![5.0, 5.0]; 6];
        rows[2] = vec![1.0, 0.0];
        rows[5] = vec![-1.0, 0.0];
        let stack = CodebookStack {
            k: 1,
            m: 6,
            d: 2,
            books: vec![Tensor::from_rows(&rows).unwrap()],
        };
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(rvq_codes(&x, &stack).unwrap(), vec![2]);
    }

    #[test]
    fn decode_examples() {
        let mut rng = SplitMix64::new(12);
        let books: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 2], 1.0, &mut rng)).collect();
        let stack = CodebookStack {
            k: 3,
            m: 4,
            d: 2,
            books: books.clone(),
        };
        let grid = TokenGrid::new(vec![0; 6], 3, 4, 1.0, 2.0).unwrap();
        let dec = rvq_decode(&grid, &stack).unwrap();
        for j in 0..2 {
            let expect = books[0].get(0, j) + books[1].get(0, j) + books[2].get(0, j);
            assert_eq!(dec.get(1, j), expect);
        }
        let one = truncate_stack(&stack, 1);
        let g1 = TokenGrid::new(vec![3, 1], 1, 4, 1.0, 2.0).unwrap();
        let dec = rvq_decode(&g1, &one).unwrap();
        assert_eq!(dec.row(0), books[0].row(3));
        assert_eq!(dec.row(1), books[0].row(1));

        let bad = TokenGrid {
            duration: 1.0,
            frame_rate_q: 1.0,
            k: 1,
            m: 4,
            codes: vec![9],
        };
        assert!(matches!(rvq_decode(&bad, &one), Err(Error::Index { .. })));
    }

    #[test]
    fn token_grid_contract_and_json() {
        assert!(TokenGrid::new(vec![0; 8], 4, 64, 50.0, 0.04).is_ok());
        assert!(TokenGrid::new(vec![0; 8], 4, 64, 50.0, 1.0).is_err());
        assert!(TokenGrid::new(vec![64; 4], 4, 64, 50.0, 0.02).is_err());
        let g = TokenGrid::new(vec![1, 2, 3, 4, 5, 6, 7, 8], 4, 64, 50.0, 0.04).unwrap();
        let js = g.to_json().unwrap();
        assert!(js.contains("\"K\":4") && js.contains("\"M\":64") && js.contains("\"codes\":[1,2"));
        assert_eq!(TokenGrid::from_json(&js).unwrap(), g);
    }

    #[test]
    fn wave_roundtrip_keeps_duration() {
        let cfg = CodecConfig {
            m: 16,
            ..CodecConfig::default()
        };
        let mut rng = SplitMix64::new(1);
        let waves: Vec<Vec<f64>> = (0..2).map(|_| rng.normals(8000, 0.3)).collect();
        let codec = AudioCodec::fit(cfg.clone(), &waves, 5, 3).unwrap();
        let grid = codec.encode_wave(&waves[0]).unwrap();
        assert_eq!(grid.len(), 50);
        assert_eq!(grid.duration, 1.0);
        let wave = codec.decode_wave(&grid).unwrap();
        assert_eq!(wave.len(), 8000);
        let again = codec.encode_wave(&wave).unwrap();
        assert_eq!(again.len(), grid.len());
    }
}

//! Seeded paired video/music clips with beat-aligned dynamics.
//!
//! Each pair shows either a blob that jumps to a new position or a
//! background that swaps colour exactly at every beat, while the audio is a
//! steady tone with a decaying burst starting at the same instants. The
//! background palette is tied to the tone, so keyframe semantics carry
//! information about pitch and frame dynamics carry information about
//! timing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, derive_seed_u64, SplitMix64};
use crate::video::{ClipHeader, VideoClip};
use crate::wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    MovingBlob,
    SceneCut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    /// Seconds.
    pub duration: f64,
    /// Video frames per second.
    pub frame_rate_v: f64,
    pub sample_rate: u32,
    /// Seconds between beats; beats fall at `k · beat_period`, `k ≥ 1`.
    pub beat_period: f64,
    pub motion: MotionKind,
    /// Candidate tone frequencies in Hz; one is picked per pair.
    pub tone_set: Vec<f64>,
    /// Standard deviation of additive Gaussian noise on the waveform.
    pub noise_level: f64,
    pub frame_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Replace the tone after the first quarter of the clip with one drawn
    /// independently of the video.
    #[serde(default)]
    pub random_tail: bool,
}

impl Default for PairSpec {
    /// Two-second clips (reference datasets use 10 s), 25 fps, 8 kHz audio.
    fn default() -> Self {
        Self {
            duration: 2.0,
            frame_rate_v: 25.0,
            sample_rate: 8000,
            beat_period: 0.5,
            motion: MotionKind::MovingBlob,
            tone_set: vec![220.0, 330.0, 440.0, 550.0],
            noise_level: 0.01,
            frame_size: 16,
            channels: 3,
            seed: 0,
            random_tail: false,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.frame_rate_v > 0.0 && self.sample_rate > 0) {
            return Err(Error::input("duration, frame rate and sample rate must be positive"));
        }
        if self.beat_period <= 1.0 / self.frame_rate_v {
            return Err(Error::input(format!(
                "beat period {} s is not resolvable at {} fps",
                self.beat_period, self.frame_rate_v
            )));
        }
        if self.tone_set.is_empty() || self.tone_set.iter().any(|f| *f <= 0.0) {
            return Err(Error::input("tone set must hold positive frequencies"));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::input("noise level must be non-negative"));
        }
        if self.frame_size < 4 || !matches!(self.channels, 1 | 3) {
            return Err(Error::input("frame size must be >= 4 and channels 1 or 3"));
        }
        Ok(())
    }

    pub fn beat_times(&self) -> Vec<f64> {
        (1..)
            .map(|k| k as f64 * self.beat_period)
            .take_while(|&b| b < self.duration)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub clip: VideoClip,
    pub wave: Vec<f64>,
    pub beat_times: Vec<f64>,
    /// Index into the spec's tone set.
    pub tone_index: usize,
    pub spec: PairSpec,
}

pub const TONE_AMPLITUDE: f64 = 0.3;
pub const BURST_AMPLITUDE: f64 = 0.6;
pub const BURST_FREQ: f64 = 1000.0;
pub const BURST_DECAY_S: f64 = 0.03;
const BLOB_LEVEL: f64 = 0.95;

/// Background colour for palette slot `i`.
pub fn palette(i: usize, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|ch| {
            let phase = (i as f64 * 0.37 + ch as f64 * 0.23).fract();
            0.1 + 0.5 * phase
        })
        .collect()
}

pub fn gen_pair(spec: &PairSpec) -> Result<Pair> {
    spec.validate()?;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, "pair"));
    let tone_index = rng.below(spec.tone_set.len());
    let beats = spec.beat_times();

    let t_v = (spec.duration * spec.frame_rate_v).round() as usize;
    let (c, s) = (spec.channels, spec.frame_size);
    let beat_frames: Vec<usize> = beats
        .iter()
        .map(|b| (b * spec.frame_rate_v).round() as usize)
        .collect();

    let blob = (s / 4).max(1);
    let n_segments = beats.len() + 1;
    let mut positions: Vec<(usize, usize)> = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        loop {
            let p = (rng.below(s - blob + 1), rng.below(s - blob + 1));
            if positions.last() != Some(&p) {
                positions.push(p);
                break;
            }
        }
    }
    let backgrounds = [palette(tone_index, c), palette(tone_index + 7, c)];

    let mut data = Vec::with_capacity(t_v * c * s * s);
    for j in 0..t_v {
        let segment = beat_frames.iter().filter(|&&bf| bf <= j).count();
        let bg = match spec.motion {
            MotionKind::MovingBlob => &backgrounds[0],
            MotionKind::SceneCut => &backgrounds[segment % 2],
        };
        for &level in bg {
            for y in 0..s {
                for x in 0..s {
                    let in_blob = spec.motion == MotionKind::MovingBlob && {
                        let (by, bx) = positions[segment];
                        (by..by + blob).contains(&y) && (bx..bx + blob).contains(&x)
                    };
                    data.push(if in_blob { BLOB_LEVEL } else { level });
                }
            }
        }
    }
    let clip = VideoClip::new(Tensor::new(vec![t_v, c, s, s], data)?, spec.frame_rate_v, spec.duration)?;

    let sr = f64::from(spec.sample_rate);
    let n = (spec.duration * sr).round() as usize;
    let freq = spec.tone_set[tone_index];
    let tail_freq = if spec.random_tail {
        spec.tone_set[SplitMix64::new(derive_seed(spec.seed, "tail")).below(spec.tone_set.len())]
    } else {
        freq
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut wave: Vec<f64> = (0..n)
        .map(|i| {
            let f = if i < n / 4 { freq } else { tail_freq };
            TONE_AMPLITUDE * (two_pi * f * i as f64 / sr).sin()
        })
        .collect();
    let decay = BURST_DECAY_S * sr;
    for &b in &beats {
        let start = (b * sr).round() as usize;
        for (i, w) in wave.iter_mut().enumerate().skip(start) {
            let dt = (i - start) as f64;
            let env = BURST_AMPLITUDE * (-dt / decay).exp();
            if env < 1e-6 {
                break;
            }
            *w += env * (two_pi * BURST_FREQ * dt / sr).cos();
        }
    }
    if spec.noise_level > 0.0 {
        let mut noise = SplitMix64::new(derive_seed(spec.seed, "noise"));
        for w in &mut wave {
            *w += spec.noise_level * noise.normal();
        }
    }
    for w in &mut wave {
        *w = w.clamp(-1.0, 1.0);
    }

    Ok(Pair {
        clip,
        wave,
        beat_times: beats,
        tone_index,
        spec: spec.clone(),
    })
}

/// Ranges from which per-item specs are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRanges {
    pub base: PairSpec,
    pub beat_period: (f64, f64),
    pub noise_level: (f64, f64),
    pub motions: Vec<MotionKind>,
}

impl Default for SpecRanges {
    fn default() -> Self {
        Self {
            base: PairSpec::default(),
            beat_period: (0.3, 0.7),
            noise_level: (0.0, 0.02),
            motions: vec![MotionKind::MovingBlob, MotionKind::SceneCut],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Pair>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn split_key(item_seed: u64) -> u64 {
    derive_seed(item_seed, "split")
}

/// Per-item spec for index `i`.
pub fn item_spec(ranges: &SpecRanges, seed: u64, i: usize) -> PairSpec {
    let item_seed = derive_seed_u64(seed, i as u64);
    let mut rng = SplitMix64::new(derive_seed(item_seed, "spec"));
    let motion = ranges.motions[rng.below(ranges.motions.len())];
    PairSpec {
        beat_period: rng.uniform(ranges.beat_period.0, ranges.beat_period.1),
        noise_level: rng.uniform(ranges.noise_level.0, ranges.noise_level.1),
        motion,
        seed: item_seed,
        ..ranges.base.clone()
    }
}

/// Draws `n ≥ 10` pairs and splits them 9:1. The `round(n/10)` items with
/// the smallest hash of their item seed form the test split.
pub fn make_dataset(n: usize, ranges: &SpecRanges, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::input(format!("dataset needs at least 10 items, got {n}")));
    }
    if ranges.motions.is_empty() || ranges.beat_period.0 > ranges.beat_period.1 {
        return Err(Error::input("empty motion list or inverted beat-period range"));
    }
    let specs: Vec<PairSpec> = (0..n).map(|i| item_spec(ranges, seed, i)).collect();
    let items = specs.iter().map(gen_pair).collect::<Result<Vec<_>>>()?;
    let (train, test) = split_indices(&specs.iter().map(|s| s.seed).collect::<Vec<_>>());
    Ok(Dataset { items, train, test })
}

/// 9:1 split by item-seed hash; both index lists sorted ascending.
pub fn split_indices(item_seeds: &[u64]) -> (Vec<usize>, Vec<usize>) {
    let n = item_seeds.len();
    let n_test = ((n as f64) / 10.0).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_key(item_seeds[i]), i));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Writes `video.bin`, `video.json`, `audio.wav`, `beats.json` and
/// `spec.json` into `dir`.
pub fn write_pair(dir: &Path, pair: &Pair) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("video.bin"), pair.clip.to_bytes())?;
    fs::write(dir.join("video.json"), serde_json::to_string_pretty(&pair.clip.header())?)?;
    wav::write_wav(dir.join("audio.wav"), &pair.wave, pair.spec.sample_rate)?;
    fs::write(dir.join("beats.json"), serde_json::to_string(&pair.beat_times)?)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&pair.spec)?)?;
    Ok(())
}

pub fn read_clip(dir: &Path) -> Result<VideoClip> {
    let header: ClipHeader = serde_json::from_str(&fs::read_to_string(dir.join("video.json"))?)?;
    VideoClip::from_bytes(&header, &fs::read(dir.join("video.bin"))?)
}

/// Clip, decoded audio and beat times stored by [`write_pair`].
pub fn read_pair(dir: &Path) -> Result<(VideoClip, Vec<f64>, u32, Vec<f64>)> {
    let clip = read_clip(dir)?;
    let (wave, sr) = wav::read_wav(dir.join("audio.wav"))?;
    let beats: Vec<f64> = serde_json::from_str(&fs::read_to_string(dir.join("beats.json"))?)?;
    Ok((clip, wave, sr, beats))
}

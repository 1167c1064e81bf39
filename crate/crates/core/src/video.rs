use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames `[T_v × C × H × W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    frame_rate: f64,
    duration: f64,
}

/// Sidecar metadata for raw clip storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipHeader {
    #[serde(rename = "T_v")]
    pub t_v: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub f_v: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor, frame_rate: f64, duration: f64) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 4 {
            return Err(Error::input(format!("video must be [T,C,H,W], got {shape:?}")));
        }
        if !matches!(shape[1], 1 | 3) {
            return Err(Error::input(format!("channel count must be 1 or 3, got {}", shape[1])));
        }
        if frame_rate <= 0.0 || duration <= 0.0 {
            return Err(Error::input("frame rate and duration must be positive"));
        }
        if shape[0] != (duration * frame_rate).round() as usize {
            return Err(Error::contract(format!(
                "clip has {} frames but round(t·f_v) = {}",
                shape[0],
                (duration * frame_rate).round()
            )));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            frames,
            frame_rate,
            duration,
        })
    }

    /// Clip of `t_v` copies of one `[C × H × W]` frame.
    pub fn from_frames(frames: &[Vec<f64>], c: usize, h: usize, w: usize, frame_rate: f64) -> Result<Self> {
        let t_v = frames.len();
        let data = frames.concat();
        let t = Tensor::new(vec![t_v, c, h, w], data)?;
        Self::new(t, frame_rate, t_v as f64 / frame_rate)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Raw `[C × H × W]` values of frame `i`.
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.channels() * self.height() * self.width();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    /// Frame `i` as a `[H·W × C]` matrix (pixels row-major, channels as columns).
    pub fn frame_matrix(&self, i: usize) -> Tensor {
        pixel_major(self.frame(i), self.channels(), self.height() * self.width())
    }

    /// All frames stacked as `[T_v·H·W × C]`.
    pub fn stacked(&self) -> Tensor {
        let (c, hw) = (self.channels(), self.height() * self.width());
        let mut data = Vec::with_capacity(self.frames.len());
        for i in 0..self.len() {
            data.extend(pixel_major(self.frame(i), c, hw).into_data());
        }
        Tensor::from_parts(vec![self.len() * hw, c], data)
    }

    /// Mean absolute pixel difference between frames `i` and `j`.
    pub fn frame_difference(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.frame(i), self.frame(j));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    pub fn header(&self) -> ClipHeader {
        ClipHeader {
            t_v: self.len(),
            c: self.channels(),
            h: self.height(),
            w: self.width(),
            f_v: self.frame_rate,
        }
    }

    /// Little-endian `f64` dump of the `[T,C,H,W]` tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.frames.data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(header: &ClipHeader, bytes: &[u8]) -> Result<Self> {
        let n = header.t_v * header.c * header.h * header.w;
        if bytes.len() != n * 8 {
            return Err(Error::input(format!(
                "clip payload has {} bytes, header implies {}",
                bytes.len(),
                n * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(vec![header.t_v, header.c, header.h, header.w], data)?;
        Self::new(t, header.f_v, header.t_v as f64 / header.f_v)
    }
}

fn pixel_major(frame: &[f64], c: usize, hw: usize) -> Tensor {
    let mut data = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            data[p * c + ch] = frame[ch * hw + p];
        }
    }
    Tensor::from_parts(vec![hw, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_contract() {
        let f = Tensor::zeros(&[5, 1, 4, 4]);
        assert!(VideoClip::new(f.clone(), 5.0, 1.0).is_ok());
        assert!(VideoClip::new(f.clone(), 5.0, 2.0).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[5, 2, 4, 4]), 5.0, 1.0).is_err());
        assert!(VideoClip::new(Tensor::full(&[5, 1, 4, 4], 1.5), 5.0, 1.0).is_err());
    }

    #[test]
    fn layouts_and_bytes() {
        let frames: Vec<Vec<f64>> = (0..2)
            .map(|t| (0..12).map(|i| (t * 12 + i) as f64 / 24.0).collect())
            .collect();
        let clip = VideoClip::from_frames(&frames, 3, 2, 2, 2.0).unwrap();
        let m = clip.frame_matrix(1);
        assert_eq!(m.shape(), &[4, 3]);
        // pixel 1, channel 2 of frame 1 = element 2*4 + 1
        assert_eq!(m.get(1, 2), frames[1][9]);
        let s = clip.stacked();
        assert_eq!(s.row(4), clip.frame_matrix(1).row(0));
        let back = VideoClip::from_bytes(&clip.header(), &clip.to_bytes()).unwrap();
        assert_eq!(back, clip);
    }
}

//! On-disk datasets and audio sets.
//!
//! A dataset directory holds `items/NNNN/` clip directories and a
//! `split.json` listing train and test item indices.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use v2m_core::synthetic::read_pair;
use v2m_core::video::VideoClip;
use v2m_core::wav::read_wav;

use crate::args::Split;

pub const ITEMS_DIR: &str = "items";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitFile {
    pub fn select(&self, split: Split, n: usize) -> Vec<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Test => self.test.clone(),
            Split::All => (0..n).collect(),
        }
    }
}

pub fn item_name(i: usize) -> String {
    format!("{i:04}")
}

#[derive(Debug, Clone)]
pub struct Item {
    pub name: String,
    pub clip: VideoClip,
    pub wave: Vec<f64>,
    pub sample_rate: u32,
    pub beats: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub split: SplitFile,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            bail!(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("data directory {} does not exist", dir.display())
            ));
        }
        let split_path = dir.join(SPLIT_FILE);
        let split: SplitFile = serde_json::from_str(
            &fs::read_to_string(&split_path).with_context(|| format!("reading {}", split_path.display()))?,
        )
        .with_context(|| format!("parsing {}", split_path.display()))?;
        let names = item_dirs(dir)?;
        let mut items = Vec::with_capacity(names.len());
        for (i, path) in names.iter().enumerate() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if name != item_name(i) {
                bail!(v2m_core::Error::Input(format!("unexpected item directory {}", path.display())));
            }
            let (clip, wave, sample_rate, beats) =
                read_pair(path).with_context(|| format!("reading clip {}", path.display()))?;
            items.push(Item {
                name,
                clip,
                wave,
                sample_rate,
                beats,
            });
        }
        if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= items.len()) {
            bail!(v2m_core::Error::Input(format!("split lists item {bad} but only {} exist", items.len())));
        }
        Ok(Self { items, split })
    }

    pub fn select(&self, split: Split) -> Vec<&Item> {
        self.split.select(split, self.items.len()).into_iter().map(|i| &self.items[i]).collect()
    }
}

fn item_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(ITEMS_DIR);
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// One audio clip with its beat annotation, when present.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub path: PathBuf,
    pub wave: Vec<f64>,
    pub sample_rate: u32,
    pub beats: Option<Vec<f64>>,
}

fn read_audio_dir(dir: &Path) -> Result<AudioClip> {
    let path = dir.join("audio.wav");
    let (wave, sample_rate) = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
    let beats_path = dir.join("beats.json");
    let beats = if beats_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&beats_path)?)?)
    } else {
        None
    };
    Ok(AudioClip {
        path,
        wave,
        sample_rate,
        beats,
    })
}

/// Audio of a clip directory, or of the `items/` of a set directory,
/// restricted to `split` when the set has a split file.
pub fn load_audio_set(dir: &Path, split: Split) -> Result<Vec<AudioClip>> {
    if dir.join("audio.wav").is_file() {
        return Ok(vec![read_audio_dir(dir)?]);
    }
    if !dir.join(ITEMS_DIR).is_dir() {
        bail!(v2m_core::Error::Input(format!(
            "{} holds neither audio.wav nor an items directory",
            dir.display()
        )));
    }
    let dirs = item_dirs(dir)?;
    let chosen: Vec<PathBuf> = if dir.join(SPLIT_FILE).is_file() {
        let split_file: SplitFile = serde_json::from_str(&fs::read_to_string(dir.join(SPLIT_FILE))?)?;
        split_file
            .select(split, dirs.len())
            .into_iter()
            .map(|i| dir.join(ITEMS_DIR).join(item_name(i)))
            .collect()
    } else {
        dirs
    };
    let clips = chosen.iter().map(|d| read_audio_dir(d)).collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        bail!(v2m_core::Error::Input(format!("no audio clips under {}", dir.display())));
    }
    Ok(clips)
}

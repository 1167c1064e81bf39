//! The full conditioned model: encoders, alignment, decoder and the codec,
//! plus checkpoint storage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{self, nn_source_indices, project_dynamics, project_semantics, AlignmentConfig, Alpha};
use crate::codec::{AudioCodec, CodecConfig, TokenGrid};
use crate::decoder::{Decoder, DecoderConfig, DecoderOutput, Sampler};
use crate::dynamics::{DynamicsConfig, DynamicsEncoder};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{derive_seed, SplitMix64};
use crate::semantics::{select_keyframes, SemanticsConfig, SemanticsEncoder};
use crate::video::VideoClip;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub dynamics: DynamicsConfig,
    pub semantics: SemanticsConfig,
    pub decoder: DecoderConfig,
    pub n_keyframes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            dynamics: DynamicsConfig::default(),
            semantics: SemanticsConfig::default(),
            decoder: DecoderConfig::default(),
            n_keyframes: 3,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and a 16-entry, two-stage codec for quick runs.
    pub fn micro() -> Self {
        Self {
            codec: CodecConfig {
                k: 2,
                m: 16,
                ..CodecConfig::default()
            },
            dynamics: DynamicsConfig {
                d_flow: 8,
                d_m: 16,
                heads: 2,
                ..DynamicsConfig::default()
            },
            semantics: SemanticsConfig {
                d_s: 16,
                ..SemanticsConfig::default()
            },
            decoder: DecoderConfig {
                n_heads: 2,
                d: 32,
                k: 2,
                m: 16,
                max_t: 128,
                lora_rank: 4,
                lora_alpha: 8.0,
                ..DecoderConfig::default()
            },
            n_keyframes: 3,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            d_m: self.dynamics.d_m,
            d_s: self.semantics.d_s,
            d: self.decoder.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.dynamics.validate()?;
        self.semantics.grid_side()?;
        self.decoder.validate()?;
        if self.codec.k != self.decoder.k || self.codec.m != self.decoder.m {
            return Err(Error::config(format!(
                "decoder heads {}×{} do not match codec {}×{}",
                self.decoder.k, self.decoder.m, self.codec.k, self.codec.m
            )));
        }
        let (d, s) = (&self.dynamics, &self.semantics);
        if (d.height, d.width, d.channels) != (s.height, s.width, s.channels) {
            return Err(Error::config("dynamics and semantics frame layouts differ"));
        }
        if self.n_keyframes == 0 {
            return Err(Error::config("need at least one keyframe"));
        }
        Ok(())
    }
}

/// A training or evaluation pair with everything that does not depend on
/// weights precomputed.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub frames: Tensor,
    pub t_v: usize,
    pub nn_index: Vec<usize>,
    pub keyframes: Vec<usize>,
    pub tokens: TokenGrid,
}

impl PreparedItem {
    pub fn t_q(&self) -> usize {
        self.tokens.len()
    }
}

/// Conditioning inputs of the decoder for one clip.
pub struct Conditioning {
    /// `[T_q × d]`.
    pub dynamics: Var,
    /// `[N_d × d]`.
    pub semantics: Var,
    pub dynamics_attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dynamics: DynamicsEncoder,
    pub semantics: SemanticsEncoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            dynamics: DynamicsEncoder::new(cfg.dynamics.clone())?,
            semantics: SemanticsEncoder::new(cfg.semantics.clone())?,
            decoder: Decoder::new(cfg.decoder.clone())?,
            cfg,
        })
    }

    /// Frozen base seeded from `(seed, "model.base")`, trainable parts from
    /// `(seed, "model.init")`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut base = SplitMix64::new(derive_seed(seed, "model.base"));
        self.decoder.init_base(&mut store, &mut base);
        let mut rng = SplitMix64::new(derive_seed(seed, "model.init"));
        self.dynamics.init_params(&mut store, &mut rng);
        self.semantics.init_params(&mut store, &mut rng);
        alignment::init_params(&self.cfg.alignment(), &mut store, &mut rng);
        self.decoder.init_adapters(&mut store, &mut rng);
        store
    }

    pub fn prepare(&self, clip: &VideoClip, tokens: TokenGrid) -> Result<PreparedItem> {
        let c = &self.cfg.dynamics;
        if (clip.channels(), clip.height(), clip.width()) != (c.channels, c.height, c.width) {
            return Err(Error::input(format!(
                "clip is {}×{}×{}, model expects {}×{}×{}",
                clip.channels(),
                clip.height(),
                clip.width(),
                c.channels,
                c.height,
                c.width
            )));
        }
        if tokens.k != self.cfg.decoder.k || tokens.m != self.cfg.decoder.m {
            return Err(Error::input("token grid does not match the decoder heads"));
        }
        if tokens.len() > self.cfg.decoder.max_t {
            return Err(Error::input(format!(
                "{} tokens exceed max_t {}",
                tokens.len(),
                self.cfg.decoder.max_t
            )));
        }
        let nn_index = nn_source_indices(clip.len(), clip.frame_rate(), tokens.len(), tokens.frame_rate_q)?;
        let keyframes = select_keyframes(clip, self.cfg.n_keyframes.min(clip.len()))?;
        Ok(PreparedItem {
            frames: clip.stacked(),
            t_v: clip.len(),
            nn_index,
            keyframes,
            tokens,
        })
    }

    /// Encodes a clip and aligns it to `nn_index.len()` token positions.
    pub fn condition(
        &self,
        s: &mut Session,
        frames: &Tensor,
        t_v: usize,
        nn_index: &[usize],
        keyframes: &[usize],
    ) -> Result<Conditioning> {
        let fv = s.g.constant(frames.clone());
        let dyn_out = self.dynamics.encode(s, fv, t_v)?;
        let aligned = s.g.gather_rows(dyn_out.z_d, nn_index)?;
        let dynamics = project_dynamics(s, aligned)?;
        let z_s = self.semantics.encode(s, fv, keyframes)?;
        let semantics = project_semantics(s, z_s)?;
        Ok(Conditioning {
            dynamics,
            semantics,
            dynamics_attention: dyn_out.attention,
        })
    }

    /// Teacher-forced logits for a prepared item.
    pub fn forward(&self, s: &mut Session, item: &PreparedItem, alpha: Alpha) -> Result<DecoderOutput> {
        let cond = self.condition(s, &item.frames, item.t_v, &item.nn_index, &item.keyframes)?;
        let x = self.decoder.input(s, &item.tokens.codes, item.t_q(), cond.dynamics, alpha)?;
        self.decoder.forward(s, x, cond.semantics)
    }

    /// Generates a token grid for `clip` and returns it with the per-frame
    /// dynamics attention maps.
    pub fn generate(
        &self,
        store: &ParamStore,
        clip: &VideoClip,
        alpha: Alpha,
        sampler: &Sampler,
    ) -> Result<(TokenGrid, Vec<Tensor>)> {
        let f_q = self.cfg.codec.token_rate();
        let t_q = self.cfg.codec.tokens_for(clip.duration());
        let nn_index = nn_source_indices(clip.len(), clip.frame_rate(), t_q, f_q)?;
        let keyframes = select_keyframes(clip, self.cfg.n_keyframes.min(clip.len()))?;
        let mut g = Graph::new();
        let mut s = Session::inference(&mut g, store);
        let cond = self.condition(&mut s, &clip.stacked(), clip.len(), &nn_index, &keyframes)?;
        let zd = s.g.value(cond.dynamics).clone();
        let zs = s.g.value(cond.semantics).clone();
        let grid = self
            .decoder
            .generate(store, &zd, &zs, alpha, t_q, f_q, clip.duration(), sampler)?;
        Ok((grid, cond.dynamics_attention))
    }
}

/// Model weights with the configuration that produced them. Frozen base
/// weights and trainable adapters are kept in separate sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub code_version: String,
    pub config: ModelConfig,
    pub alpha: Alpha,
    pub step: usize,
    pub codec: AudioCodec,
    pub base: ParamStore,
    pub adapters: ParamStore,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        alpha: Alpha,
        step: usize,
        codec: AudioCodec,
        store: &ParamStore,
        code_version: &str,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            code_version: code_version.to_string(),
            config,
            alpha,
            step,
            codec,
            base: store.partition(false),
            adapters: store.partition(true),
        }
    }

    pub fn params(&self) -> ParamStore {
        let mut store = self.base.clone();
        store.merge(self.adapters.clone());
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads and checks the format version, the codec against the model
    /// configuration, and that every expected weight is present with the
    /// right shape.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let probe: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(probe)?;
        if ckpt.codec.cfg() != &ckpt.config.codec {
            return Err(Error::Contract("checkpoint codec disagrees with its configuration".into()));
        }
        let model = Model::new(ckpt.config.clone())?;
        let expected = model.init_params(0);
        let params = ckpt.params();
        for (name, p) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks {name}")))?;
            if got.value.shape() != p.value.shape() || got.trainable != p.trainable {
                return Err(Error::Contract(format!("checkpoint entry {name} does not match the configuration")));
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_pair, PairSpec};

    fn fixture() -> (Model, AudioCodec, crate::synthetic::Pair) {
        let cfg = ModelConfig::micro();
        let pair = gen_pair(&PairSpec {
            duration: 0.4,
            beat_period: 0.2,
            ..PairSpec::default()
        })
        .unwrap();
        let codec = AudioCodec::fit(cfg.codec.clone(), &[pair.wave.clone()], 5, 0).unwrap();
        (Model::new(cfg).unwrap(), codec, pair)
    }

    #[test]
    fn config_consistency() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::micro();
        bad.decoder.m = 32;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ModelConfig::micro();
        bad.semantics.channels = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prepare_checks_layout() {
        let (model, codec, pair) = fixture();
        let tokens = codec.encode_wave(&pair.wave).unwrap();
        let item = model.prepare(&pair.clip, tokens.clone()).unwrap();
        assert_eq!(item.t_q(), 20);
        assert_eq!(item.nn_index.len(), 20);
        assert_eq!(item.keyframes[0], 0);
        let gray = VideoClip::from_frames(&vec![vec![0.5; 256]; 10], 1, 16, 16, 25.0).unwrap();
        assert!(model.prepare(&gray, tokens).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let (model, _, pair) = fixture();
        let store = model.init_params(3);
        let s = Sampler {
            seed: 9,
            ..Sampler::default()
        };
        let (a, att) = model.generate(&store, &pair.clip, Alpha::default(), &s).unwrap();
        let (b, _) = model.generate(&store, &pair.clip, Alpha::default(), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_eq!(att.len(), pair.clip.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, codec, _) = fixture();
        let store = model.init_params(4);
        let ckpt = Checkpoint::new(model.cfg.clone(), Alpha::default(), 7, codec, &store, "test");
        assert_eq!(ckpt.base.len() + ckpt.adapters.len(), store.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params(), store);

        let mut raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        raw["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_vec(&raw).unwrap()).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Version { expected: 1, found: 99 })
        ));

        let mut short = ckpt.clone();
        short.adapters = ParamStore::new();
        short.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Contract(_))));
    }
}

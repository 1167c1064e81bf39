//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use v2m_core::alignment::Alpha;
use v2m_core::codec::AudioCodec;
use v2m_core::decoder::Sampler;
use v2m_core::metrics::{
    beat_sync_score, frechet_distance, kl_divergence, BandAnalyzer, EvalReport, FeatureSet, SpectralConfig,
};
use v2m_core::model::{Checkpoint, Model, ModelConfig, PreparedItem};
use v2m_core::nn::ParamStore;
use v2m_core::numerics::Tensor;
use v2m_core::rng::{derive_seed, derive_seed_u64};
use v2m_core::selftest::{self, CheckOutcome};
use v2m_core::synthetic::{make_dataset, read_clip, write_pair, SpecRanges};
use v2m_core::trainer::{
    evaluate_nll, train, NllReport, Schedule, ScheduleKind, StepRecord, TrainConfig, LOG_HEADER,
};
use v2m_core::wav::write_wav;
use v2m_core::Error;

use crate::args::{
    CompareSchedulesArgs, EvalArgs, ExtractorArgs, GenerateArgs, MakeDataArgs, SweepAlphaArgs,
    SweepOptions, TrainArgs, TrainOptions,
};
use crate::data::{item_name, load_audio_set, AudioClip, Dataset, SplitFile, ITEMS_DIR, SPLIT_FILE};
use crate::exit::{CheckFailure, UsageError};
use crate::manifest::RunManifest;
use crate::CODE_VERSION;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn to_json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

/// Writes a dataset of `n` seeded pairs under `out`.
pub fn cmd_make_data(args: &MakeDataArgs) -> Result<()> {
    let manifest = RunManifest::start("make-data", args, Some(args.seed))?;
    let n = usize::try_from(args.n)?;
    if n < 10 {
        bail!(UsageError(format!("--n must be at least 10, got {n}")));
    }
    let mut ranges = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SpecRanges>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SpecRanges::default(),
    };
    if let Some(d) = args.duration {
        ranges.base.duration = d;
    }
    ranges.base.random_tail |= args.random_tail;
    let ds = make_dataset(n, &ranges, args.seed)?;

    let items_dir = args.out.join(ITEMS_DIR);
    if items_dir.is_dir() {
        let stale = fs::read_dir(&items_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .any(|e| e.file_name().to_string_lossy().parse::<usize>().map_or(true, |i| i >= n));
        if stale {
            bail!(Error::Input(format!(
                "{} already holds a larger or different dataset",
                args.out.display()
            )));
        }
    }
    create_dir(&items_dir)?;
    let mut outputs = Vec::new();
    for (i, pair) in ds.items.iter().enumerate() {
        let dir = items_dir.join(item_name(i));
        write_pair(&dir, pair).with_context(|| format!("writing {}", dir.display()))?;
        outputs.push(dir);
    }
    let split = SplitFile {
        train: ds.train.clone(),
        test: ds.test.clone(),
    };
    outputs.push(write_file(&args.out.join(SPLIT_FILE), to_json(&split)?)?);
    outputs.push(write_file(&args.out.join("ranges.json"), to_json(&ranges)?)?);
    manifest.finish(&args.out, &outputs)
}

/// A dataset tokenised for one model.
pub struct Prepared {
    pub model: Model,
    pub codec: AudioCodec,
    pub train: Vec<PreparedItem>,
    pub test: Vec<PreparedItem>,
    /// Dataset indices of `test`.
    pub test_indices: Vec<usize>,
}

/// Fits the codec on the training audio and tokenises both splits.
pub fn prepare(data: &Dataset, cfg: ModelConfig, codec_iters: usize, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let sr = cfg.codec.sample_rate;
    if let Some(item) = data.items.iter().find(|it| it.sample_rate != sr) {
        bail!(Error::Input(format!(
            "clip {} is sampled at {} Hz but the model expects {sr} Hz",
            item.name, item.sample_rate
        )));
    }
    if data.split.train.is_empty() {
        bail!(Error::Input("dataset has no training items".into()));
    }
    let waves: Vec<Vec<f64>> = data.split.train.iter().map(|&i| data.items[i].wave.clone()).collect();
    let codec = AudioCodec::fit(cfg.codec.clone(), &waves, codec_iters, derive_seed(seed, "codec"))?;
    let model = Model::new(cfg)?;
    let tokenise = |idx: &[usize]| -> Result<Vec<PreparedItem>> {
        idx.iter()
            .map(|&i| {
                let item = &data.items[i];
                let grid = codec.encode_wave(&item.wave)?;
                model
                    .prepare(&item.clip, grid)
                    .with_context(|| format!("preparing clip {}", item.name))
            })
            .collect()
    };
    let train = tokenise(&data.split.train)?;
    let test = tokenise(&data.split.test)?;
    Ok(Prepared {
        model,
        codec,
        train,
        test,
        test_indices: data.split.test.clone(),
    })
}

pub fn train_config(opts: &TrainOptions, alpha: Alpha, kind: ScheduleKind, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: opts.batch_size,
        total_steps: opts.steps,
        warmup_steps: opts
            .warmup
            .unwrap_or(TrainConfig::default().warmup_steps)
            .min(opts.steps),
        lr_max: opts.lr,
        weight_decay: opts.weight_decay,
        grad_clip: opts.grad_clip,
        alpha,
        schedule: Schedule {
            kind,
            a_max: opts.a_max,
            eps: opts.eps,
            seed,
        },
        seed,
        workers: opts.workers,
        ..TrainConfig::default()
    }
}

pub fn metrics_csv(log: &[StepRecord], cfg: &TrainConfig) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        s.push_str(&r.csv_row(cfg));
        s.push('\n');
    }
    s
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    /// Held-out likelihood, when the dataset has a test split.
    pub heldout: Option<NllReport>,
    pub checkpoint: PathBuf,
}

/// Trains adapters on `--data` and writes `checkpoint.json`, `metrics.csv`
/// and, with a test split, `heldout.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let manifest = RunManifest::start("train", args, Some(args.seed))?;
    let cfg = train_config(&args.opts, args.alpha, args.schedule, args.seed);
    cfg.validate()?;
    let data = Dataset::load(&args.data)?;
    let prepared = prepare(&data, args.opts.model.config(), args.opts.codec_iters, args.seed)?;
    let model = &prepared.model;
    create_dir(&args.out)?;
    let mut outputs = Vec::new();

    let mut store = model.init_params(args.seed);
    let ckpt_dir = args.out.join("checkpoints");
    let every = args.checkpoint_every;
    let mut periodic = Vec::new();
    let mut on_step = |rec: &StepRecord, store: &ParamStore| -> v2m_core::Result<()> {
        if every > 0 && (rec.step + 1) % every == 0 && rec.step + 1 < cfg.total_steps {
            fs::create_dir_all(&ckpt_dir)?;
            let path = ckpt_dir.join(format!("step-{:06}.json", rec.step + 1));
            Checkpoint::new(model.cfg.clone(), cfg.alpha, rec.step + 1, prepared.codec.clone(), store, CODE_VERSION)
                .save(&path)?;
            periodic.push(path);
        }
        Ok(())
    };
    let log = train(model, &mut store, &prepared.train, &cfg, &mut on_step)?;
    outputs.extend(periodic);

    let checkpoint = args.out.join("checkpoint.json");
    Checkpoint::new(model.cfg.clone(), cfg.alpha, log.len(), prepared.codec.clone(), &store, CODE_VERSION)
        .save(&checkpoint)?;
    outputs.push(checkpoint.clone());
    outputs.push(write_file(&args.out.join("metrics.csv"), metrics_csv(&log, &cfg))?);
    let heldout = if prepared.test.is_empty() {
        None
    } else {
        let r = evaluate_nll(model, &store, &prepared.test, cfg.alpha, &cfg.schedule)?;
        outputs.push(write_file(&args.out.join("heldout.json"), to_json(&r)?)?);
        Some(r)
    };
    manifest.finish(&args.out, &outputs)?;
    Ok(TrainOutcome {
        log,
        heldout,
        checkpoint,
    })
}

fn fmt_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a string");
    }
    s
}

/// Frame-by-frame dynamics rows as CSV: `frame,d0,d1,…`.
pub fn dynamics_csv(z_d: &Tensor) -> String {
    let mut s = String::from("frame");
    for c in 0..z_d.cols() {
        write!(s, ",d{c}").expect("writing to a string");
    }
    s.push('\n');
    for t in 0..z_d.rows() {
        writeln!(s, "{t},{}", fmt_row(z_d.row(t))).expect("writing to a string");
    }
    s
}

/// Per-frame attention maps as long-form CSV: `frame,query,key,weight`.
pub fn attention_csv(maps: &[Tensor]) -> String {
    let mut s = String::from("frame,query,key,weight\n");
    for (t, a) in maps.iter().enumerate() {
        for q in 0..a.rows() {
            for (k, w) in a.row(q).iter().enumerate() {
                writeln!(s, "{t},{q},{k},{w}").expect("writing to a string");
            }
        }
    }
    s
}

struct Generator {
    ckpt: Checkpoint,
    model: Model,
    store: ParamStore,
    alpha: Alpha,
}

impl Generator {
    fn load(path: &Path, alpha: Option<Alpha>) -> Result<Self> {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let model = Model::new(ckpt.config.clone())?;
        let store = ckpt.params();
        let alpha = alpha.unwrap_or(ckpt.alpha);
        Ok(Self {
            ckpt,
            model,
            store,
            alpha,
        })
    }

    /// Writes audio, tokens, dynamics and attention for the clip in `src`.
    fn clip(&self, src: &Path, out: &Path, sampler: &Sampler) -> Result<Vec<PathBuf>> {
        let clip = read_clip(src).with_context(|| format!("reading clip {}", src.display()))?;
        let (grid, attention) = self.model.generate(&self.store, &clip, self.alpha, sampler)?;
        let wave = self.ckpt.codec.decode_wave(&grid)?;
        let (track, _) = self.model.dynamics.encode_clip(&self.store, &clip)?;
        create_dir(out)?;
        let audio = out.join("audio.wav");
        write_wav(&audio, &wave, self.ckpt.codec.cfg().sample_rate)?;
        let mut written = vec![
            audio,
            write_file(&out.join("tokens.json"), grid.to_json()?)?,
            write_file(&out.join("dynamics.csv"), dynamics_csv(&track.z_d))?,
            write_file(&out.join("attention.csv"), attention_csv(&attention))?,
        ];
        let beats = src.join("beats.json");
        if beats.is_file() {
            written.push(write_file(&out.join("beats.json"), fs::read(&beats)?)?);
        }
        Ok(written)
    }
}

/// Generates music for a clip directory, or for one split of a dataset
/// into `out/items/`. Returns the directories holding `audio.wav`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::start("generate", args, Some(args.seed))?;
    let gen = Generator::load(&args.ckpt, args.alpha)?;
    let sampler = |seed| Sampler {
        temperature: args.temperature,
        top_k: args.top_k,
        seed,
    };
    let mut outputs = Vec::new();
    let mut dirs = Vec::new();
    if args.video.join("video.json").is_file() {
        outputs.extend(gen.clip(&args.video, &args.out, &sampler(args.seed))?);
        dirs.push(args.out.clone());
    } else {
        let split_path = args.video.join(SPLIT_FILE);
        let text = fs::read_to_string(&split_path).with_context(|| {
            format!("{} is neither a clip nor a dataset directory", args.video.display())
        })?;
        let split: SplitFile = serde_json::from_str(&text)?;
        let n = split.train.len() + split.test.len();
        for i in split.select(args.split, n) {
            let name = item_name(i);
            let out = args.out.join(ITEMS_DIR).join(&name);
            let src = args.video.join(ITEMS_DIR).join(&name);
            outputs.extend(gen.clip(&src, &out, &sampler(derive_seed_u64(args.seed, i as u64)))?);
            dirs.push(out);
        }
    }
    manifest.finish(&args.out, &outputs)?;
    Ok(dirs)
}

pub fn spectral_config(e: &ExtractorArgs) -> SpectralConfig {
    SpectralConfig {
        frame_len: e.frame_len,
        hop: e.hop,
        bands: e.bands,
        ..SpectralConfig::default()
    }
}

fn pooled_histogram(analyzer: &BandAnalyzer, waves: &[&[f64]]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; analyzer.cfg().bands];
    for w in waves {
        for (t, h) in total.iter_mut().zip(analyzer.label_histogram(w)?) {
            *t += h;
        }
    }
    Ok(total)
}

/// Scores generated clips against references. `beat_sync` averages clips
/// with a beat inside them and is NaN (JSON `null`) when there are none.
pub fn evaluate_sets(
    gen: &[AudioClip],
    reference: &[AudioClip],
    ref_features: Option<FeatureSet>,
    cfg: &SpectralConfig,
) -> Result<(EvalReport, FeatureSet)> {
    let analyzer = BandAnalyzer::new(cfg.clone())?;
    let sr = gen[0].sample_rate;
    if let Some(c) = gen.iter().chain(reference).find(|c| c.sample_rate != sr) {
        bail!(Error::Input(format!(
            "{} is sampled at {} Hz, expected {sr} Hz",
            c.path.display(),
            c.sample_rate
        )));
    }
    let gen_waves: Vec<&[f64]> = gen.iter().map(|c| c.wave.as_slice()).collect();
    let ref_waves: Vec<&[f64]> = reference.iter().map(|c| c.wave.as_slice()).collect();
    let gen_fs = FeatureSet::from_waves(&gen.iter().map(|c| c.wave.clone()).collect::<Vec<_>>(), cfg)?;
    let ref_fs = match ref_features {
        Some(f) => f,
        None => FeatureSet::from_waves(&reference.iter().map(|c| c.wave.clone()).collect::<Vec<_>>(), cfg)?,
    };
    let fd = frechet_distance(&gen_fs, &ref_fs)?;
    let kl = kl_divergence(&pooled_histogram(&analyzer, &gen_waves)?, &pooled_histogram(&analyzer, &ref_waves)?)?;
    let mut scores = Vec::new();
    for c in gen {
        let duration = c.wave.len() as f64 / f64::from(c.sample_rate);
        if let Some(beats) = c.beats.as_ref().filter(|b| b.iter().any(|&t| (0.0..duration).contains(&t))) {
            scores.push(beat_sync_score(&c.wave, c.sample_rate, beats, cfg)?);
        }
    }
    let beat_sync = if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg)?);
    let config_hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let report = EvalReport {
        fd,
        kl,
        beat_sync,
        n_clips: gen.len(),
        extractor_id: cfg.extractor_id(),
        config_hash,
    };
    Ok((report, gen_fs))
}

/// Writes `metrics.json` and the generated set's `features.json` to `--out`.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let manifest = RunManifest::start("eval", args, None)?;
    let cfg = spectral_config(&args.extractor);
    let gen = load_audio_set(&args.gen_dir, args.split)?;
    let reference = load_audio_set(&args.ref_dir, args.split)?;
    let ref_features = match &args.ref_features {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(serde_json::from_str::<FeatureSet>(&text)?)
        }
        None => None,
    };
    let (report, features) = evaluate_sets(&gen, &reference, ref_features, &cfg)?;
    create_dir(&args.out)?;
    let outputs = vec![
        write_file(&args.out.join("metrics.json"), to_json(&report)?)?,
        write_file(&args.out.join("features.json"), serde_json::to_string(&features)?)?,
    ];
    manifest.finish(&args.out, &outputs)?;
    Ok(report)
}

/// Metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub setting: String,
    pub seed: u64,
    pub final_loss: f64,
    pub nll: f64,
    pub weighted_nll: f64,
    pub first_quartile_nll: f64,
    pub fd: f64,
    pub kl: f64,
    pub beat_sync: f64,
}

const RUN_FIELDS: [&str; 7] = ["final_loss", "nll", "weighted_nll", "first_quartile_nll", "fd", "kl", "beat_sync"];

impl RunRow {
    fn values(&self) -> [f64; 7] {
        [
            self.final_loss,
            self.nll,
            self.weighted_nll,
            self.first_quartile_nll,
            self.fd,
            self.kl,
            self.beat_sync,
        ]
    }
}

/// Trains with `alpha` and `kind`, then scores held-out likelihood and
/// audio generated for every test clip.
fn run_setting(
    data: &Dataset,
    prepared: &Prepared,
    sweep: &SweepOptions,
    setting: String,
    alpha: Alpha,
    kind: ScheduleKind,
    seed: u64,
) -> Result<RunRow> {
    let model = &prepared.model;
    let cfg = train_config(&sweep.opts, alpha, kind, seed);
    cfg.validate()?;
    let mut store = model.init_params(seed);
    let log = train(model, &mut store, &prepared.train, &cfg, &mut |_, _| Ok(()))?;
    let nll = evaluate_nll(model, &store, &prepared.test, alpha, &cfg.schedule)?;
    let mut gen = Vec::new();
    let mut reference = Vec::new();
    for &i in &prepared.test_indices {
        let item = &data.items[i];
        let sampler = Sampler {
            temperature: sweep.temperature,
            top_k: 16,
            seed: derive_seed_u64(seed, i as u64),
        };
        let (grid, _) = model.generate(&store, &item.clip, alpha, &sampler)?;
        let path = PathBuf::from(&item.name);
        gen.push(AudioClip {
            path: path.clone(),
            wave: prepared.codec.decode_wave(&grid)?,
            sample_rate: item.sample_rate,
            beats: Some(item.beats.clone()),
        });
        reference.push(AudioClip {
            path,
            wave: item.wave.clone(),
            sample_rate: item.sample_rate,
            beats: Some(item.beats.clone()),
        });
    }
    let (report, _) = evaluate_sets(&gen, &reference, None, &spectral_config(&sweep.extractor))?;
    Ok(RunRow {
        setting,
        seed,
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
        nll: nll.overall,
        weighted_nll: nll.weighted,
        first_quartile_nll: nll.first_quartile,
        fd: report.fd,
        kl: report.kl,
        beat_sync: report.beat_sync,
    })
}

/// Runs every setting for every seed; settings share data and, per seed,
/// the codec and model initialisation.
fn sweep(
    command: &str,
    label: &str,
    args: &impl Serialize,
    sweep: &SweepOptions,
    settings: &[(String, Alpha, ScheduleKind)],
    table: &str,
) -> Result<Vec<RunRow>> {
    let manifest = RunManifest::start(command, args, Some(sweep.seed))?;
    if settings.is_empty() || sweep.seeds == 0 {
        bail!(UsageError("need at least one setting and one seed".into()));
    }
    let data = Dataset::load(&sweep.data)?;
    if data.split.test.len() < 2 {
        bail!(Error::Input(format!(
            "sweeps need at least two test clips, {} has {}",
            sweep.data.display(),
            data.split.test.len()
        )));
    }
    let mut runs = Vec::new();
    for seed in sweep.seed..sweep.seed + sweep.seeds {
        let prepared = prepare(&data, sweep.opts.model.config(), sweep.opts.codec_iters, seed)?;
        for (name, alpha, kind) in settings {
            runs.push(run_setting(&data, &prepared, sweep, name.clone(), *alpha, *kind, seed)?);
        }
    }
    create_dir(&sweep.out)?;
    let header = RUN_FIELDS.join(",");
    let mut per_run = format!("{label},seed,{header}\n");
    for r in &runs {
        writeln!(per_run, "{},{},{}", r.setting, r.seed, fmt_row(&r.values())).expect("writing to a string");
    }
    let mut summary = format!("{label},seeds,{header}\n");
    for (name, _, _) in settings {
        let rows: Vec<&RunRow> = runs.iter().filter(|r| &r.setting == name).collect();
        let mut mean = [0.0; 7];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v / rows.len() as f64;
            }
        }
        writeln!(summary, "{name},{},{}", rows.len(), fmt_row(&mean)).expect("writing to a string");
    }
    let outputs = vec![
        write_file(&sweep.out.join("runs.csv"), per_run)?,
        write_file(&sweep.out.join(table), summary)?,
    ];
    manifest.finish(&sweep.out, &outputs)?;
    Ok(runs)
}

/// One row per α in `sweep.csv`, averaged over seeds; every run in `runs.csv`.
pub fn cmd_sweep_alpha(args: &SweepAlphaArgs) -> Result<Vec<RunRow>> {
    let settings: Vec<_> = args.alphas.iter().map(|&a| (a.to_string(), a, args.schedule)).collect();
    sweep("sweep-alpha", "alpha", args, &args.sweep, &settings, "sweep.csv")
}

/// One row per schedule kind in `schedules.csv`; every run in `runs.csv`.
pub fn cmd_compare_schedules(args: &CompareSchedulesArgs) -> Result<Vec<RunRow>> {
    let settings: Vec<_> = args.schedules.iter().map(|&k| (k.to_string(), args.alpha, k)).collect();
    sweep("compare-schedules", "schedule", args, &args.sweep, &settings, "schedules.csv")
}

/// Runs the invariant suite and reports every check; fails
/// with a numeric error if any check does.
pub fn cmd_selftest(report: &mut dyn FnMut(&CheckOutcome)) -> Result<Vec<CheckOutcome>> {
    let outcomes = selftest::run_all();
    outcomes.iter().for_each(|c| report(c));
    let failed: Vec<&str> = outcomes.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!(CheckFailure(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(outcomes)
}

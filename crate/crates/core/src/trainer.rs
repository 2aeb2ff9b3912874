//! Simu-GAN training: data pipeline, alternating updates, metrics,
//! checkpoints, and clean-to-noisy simulation with the generator alone.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use noisim_diffcore::{AdamConfig, AdamState, Graph, Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    denormalize_segment, griffin_lim, mean_band_power, normalize_segment, read_segment, read_wav,
    segment_spectrogram, stft_magnitude, write_pgm, write_segment, write_wav, CorpusManifest, Domain,
    FeatureSegment, ManifestEntry, NormStats, RawSegment, Spectrogram, StftConfig, FEATURE_BINS, SEGMENT_FRAMES,
};
use crate::checkpoint::{self, Container};
use crate::error::{Error, Result};
use crate::losses::{gan_loss_d, gan_loss_g, mpc_loss, total_generator_loss, LossReport, LossWeights};
use crate::models::{init_params, sample_patches, ArchPlan, Discriminator, Generator, Heads};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(a: AdamSettings) -> Self {
        AdamConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl AdamSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchPlan,
    pub weights: LossWeights,
    pub adam: AdamSettings,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub patches_per_layer: usize,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub clean_manifest: PathBuf,
    pub noisy_manifest: PathBuf,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchPlan::default(),
            weights: LossWeights::default(),
            adam: AdamSettings::default(),
            batch_size: 1,
            steps: 2000,
            seed: 0,
            patches_per_layer: 256,
            checkpoint_interval: 500,
            clean_manifest: PathBuf::new(),
            noisy_manifest: PathBuf::new(),
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patches_per_layer == 0 {
            return Err(Error::Config("patches_per_layer must be at least 1".into()));
        }
        if self.clean_manifest.as_os_str().is_empty() || self.noisy_manifest.as_os_str().is_empty() {
            return Err(Error::Config("clean_manifest and noisy_manifest are required".into()));
        }
        self.arch.validate()?;
        self.weights.validate()?;
        self.adam.validate()?;
        self.stft.validate()?;
        if self.stft.bins() != FEATURE_BINS {
            return Err(Error::Config(format!(
                "fft_size {} gives {} bins, the networks expect {FEATURE_BINS}",
                self.stft.fft_size,
                self.stft.bins()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file; relative manifest paths resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            for p in [&mut c.clean_manifest, &mut c.noisy_manifest] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(c)
    }
}

/// A raw segment with its origin and, when known, its frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegment {
    pub raw: RawSegment,
    pub source: PathBuf,
    /// Index of the segment within its source file.
    pub index: usize,
    pub sample_rate: u32,
    pub labels: Option<Vec<usize>>,
}

/// Read every manifest entry and cut it into segments. WAV entries go
/// through the STFT; `.seg` entries are denormalized back to magnitudes.
/// Unreadable entries are skipped with a warning.
pub fn load_segments(manifest: &CorpusManifest, stft: &StftConfig) -> Result<Vec<LabeledSegment>> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        match segments_of(e, stft) {
            Ok(mut s) => out.append(&mut s),
            Err(err) => log::warn!("skipping {}: {err}", e.path.display()),
        }
    }
    Ok(out)
}

fn segments_of(e: &ManifestEntry, stft: &StftConfig) -> Result<Vec<LabeledSegment>> {
    if e.path.extension().is_some_and(|x| x == "seg") {
        let seg = read_segment(&e.path)?;
        let sample_rate = (SEGMENT_FRAMES as f64 * stft.hop as f64 / e.duration).round() as u32;
        return Ok(vec![LabeledSegment {
            raw: denormalize_segment(&seg),
            source: e.path.clone(),
            index: 0,
            sample_rate,
            labels: e.labels.clone().filter(|l| l.len() == SEGMENT_FRAMES),
        }]);
    }
    let clip = read_wav(&e.path)?;
    let spec = stft_magnitude(&clip, stft)?;
    Ok(segment_spectrogram(&spec, SEGMENT_FRAMES, SEGMENT_FRAMES)
        .into_iter()
        .enumerate()
        .map(|(index, raw)| {
            let labels = e
                .labels
                .as_ref()
                .and_then(|l| l.get(raw.start..raw.start + SEGMENT_FRAMES))
                .map(<[usize]>::to_vec);
            LabeledSegment {
                raw,
                source: e.path.clone(),
                index,
                sample_rate: clip.sample_rate,
                labels,
            }
        })
        .collect())
}

pub fn normalize_all(segs: &[LabeledSegment], stats: &NormStats) -> Result<Vec<FeatureSegment>> {
    segs.iter().map(|s| normalize_segment(&s.raw, stats)).collect()
}

/// Normalized clean and noisy training segments sharing one set of
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub clean: Vec<FeatureSegment>,
    pub noisy: Vec<FeatureSegment>,
    pub stats: NormStats,
}

impl TrainingSet {
    pub fn from_raw(clean: &[LabeledSegment], noisy: &[LabeledSegment]) -> Result<Self> {
        if clean.is_empty() || noisy.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "{} clean and {} noisy segments",
                clean.len(),
                noisy.len()
            )));
        }
        let stats = NormStats::from_segments(clean.iter().chain(noisy).map(|s| &s.raw))?;
        Ok(Self {
            clean: normalize_all(clean, &stats)?,
            noisy: normalize_all(noisy, &stats)?,
            stats,
        })
    }

    pub fn load(config: &TrainConfig) -> Result<Self> {
        let clean = load_segments(&CorpusManifest::load(&config.clean_manifest)?, &config.stft)?;
        let noisy = load_segments(&CorpusManifest::load(&config.noisy_manifest)?, &config.stft)?;
        Self::from_raw(&clean, &noisy)
    }
}

/// Seeded per-epoch shuffling. Position `p` of the endless stream falls in
/// epoch `p / len`, whose order is a permutation drawn from `(seed, tag,
/// epoch)`.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    len: usize,
    seed: u64,
    tag: u64,
    cached: Option<(u64, Vec<usize>)>,
}

pub const CLEAN_STREAM: u64 = 1;
pub const NOISY_STREAM: u64 = 2;
const STEP_STREAM: u64 = 1 << 62;

impl EpochSampler {
    pub fn new(len: usize, seed: u64, tag: u64) -> Self {
        assert!(len > 0, "sampler over an empty corpus");
        Self {
            len,
            seed,
            tag,
            cached: None,
        }
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.tag << 32) | (epoch & 0xffff_ffff));
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn at(&mut self, pos: u64) -> usize {
        let epoch = pos / self.len as u64;
        if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.cached = Some((epoch, self.epoch_order(epoch)));
        }
        self.cached.as_ref().unwrap().1[(pos % self.len as u64) as usize]
    }

    /// Indices for training step `step` with `size` items per batch.
    pub fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|i| self.at(step * size as u64 + i)).collect()
    }
}

/// Randomness consumed by training step `step`: dropout masks and patch
/// locations.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STEP_STREAM | step);
    rng
}

/// Stack segments into an `[n, 1, 129, 128]` batch.
pub fn stack_batch(segs: &[&FeatureSegment]) -> Tensor {
    let mut data = Vec::with_capacity(segs.len() * FEATURE_BINS * SEGMENT_FRAMES);
    for s in segs {
        data.extend_from_slice(&s.data);
    }
    Tensor::new(vec![segs.len(), 1, FEATURE_BINS, SEGMENT_FRAMES], data).expect("segment sizes are fixed")
}

/// Everything a run needs to continue: networks, optimizer moments and the
/// feature statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub heads: Heads,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub opt_h: AdamState,
    pub stats: NormStats,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorUpdate {
    pub loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
    /// Largest gradient magnitude that reached a generator parameter.
    pub generator_grad_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorUpdate {
    pub gan_g: f64,
    pub mpc_x: f64,
    pub mpc_y: f64,
    pub total: f64,
}

fn mean_sigmoid(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| noisim_diffcore::kernels::sigmoid(v)).sum::<f64>() / t.len() as f64
}

impl TrainState {
    pub fn new(config: TrainConfig, stats: NormStats) -> Result<Self> {
        let (generator, discriminator, heads) = init_params(&config.arch, config.seed)?;
        let adam: AdamConfig = config.adam.into();
        Ok(Self {
            opt_g: AdamState::new(adam, generator.params.tensors()),
            opt_d: AdamState::new(adam, discriminator.params.tensors()),
            opt_h: AdamState::new(adam, heads.params.tensors()),
            config,
            step: 0,
            generator,
            discriminator,
            heads,
            stats,
        })
    }

    /// One Adam step on the discriminator against real `y` and a constant
    /// copy of `G(x)`.
    pub fn discriminator_step(&mut self, x: &Tensor, y: &Tensor, rng: &mut ChaCha8Rng) -> Result<DiscriminatorUpdate> {
        let mut g = Graph::new();
        let gb = self.generator.params.bind(&mut g, true);
        let db = self.discriminator.params.bind(&mut g, true);
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        let out = self.generator.forward(&mut g, &gb, xi, Mode::Train, rng)?;
        let fake_in = g.detach(out.output);
        let real = self.discriminator.forward(&mut g, &db, yi)?;
        let fake = self.discriminator.forward(&mut g, &db, fake_in)?;
        let loss = gan_loss_d(&mut g, real, fake);
        g.backward(loss)?;
        let generator_grad_max = gb
            .iter()
            .filter_map(|&id| g.grad(id))
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let grads = self.discriminator.params.grads(&g, &db);
        self.opt_d.step(self.discriminator.params.tensors_mut(), &grads)?;
        Ok(DiscriminatorUpdate {
            loss: g.value(loss).item(),
            real_mean: mean_sigmoid(g.value(real)),
            fake_mean: mean_sigmoid(g.value(fake)),
            generator_grad_max,
        })
    }

    /// One Adam step on the generator and heads with the discriminator held
    /// fixed. `x̂ = G(x)` is recomputed on a fresh graph; `ŷ = G(y)` feeds
    /// the identity term.
    pub fn generator_step(&mut self, x: &Tensor, y: &Tensor, rng: &mut ChaCha8Rng) -> Result<GeneratorUpdate> {
        let mut g = Graph::new();
        let gb = self.generator.params.bind(&mut g, true);
        let hb = self.heads.params.bind(&mut g, true);
        let db = self.discriminator.params.bind(&mut g, false);
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        let fx = self.generator.forward(&mut g, &gb, xi, Mode::Train, rng)?;
        let fy = self.generator.forward(&mut g, &gb, yi, Mode::Train, rng)?;
        let qx = self.generator.encode_features(&mut g, &gb, fx.output, Mode::Train, rng)?;
        let qy = self.generator.encode_features(&mut g, &gb, fy.output, Mode::Train, rng)?;
        let i = self.config.patches_per_layer;
        let px = sample_patches(&mut g, &qx, &fx.features, &self.heads, &hb, i, rng)?;
        let py = sample_patches(&mut g, &qy, &fy.features, &self.heads, &hb, i, rng)?;
        let tau = self.config.weights.tau;
        let mpc_x = mpc_loss(&mut g, &px, tau)?;
        let mpc_y = mpc_loss(&mut g, &py, tau)?;
        let fake = self.discriminator.forward(&mut g, &db, fx.output)?;
        let gan_g = gan_loss_g(&mut g, fake);
        let total = total_generator_loss(&mut g, gan_g, mpc_x, mpc_y, &self.config.weights)?;
        g.backward(total)?;
        let gg = self.generator.params.grads(&g, &gb);
        let hg = self.heads.params.grads(&g, &hb);
        self.opt_g.step(self.generator.params.tensors_mut(), &gg)?;
        self.opt_h.step(self.heads.params.tensors_mut(), &hg)?;
        Ok(GeneratorUpdate {
            gan_g: g.value(gan_g).item(),
            mpc_x: g.value(mpc_x).item(),
            mpc_y: g.value(mpc_y).item(),
            total: g.value(total).item(),
        })
    }

    /// Discriminator update, then generator and heads update.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let d = self.discriminator_step(x, y, rng)?;
        let gu = self.generator_step(x, y, rng)?;
        self.step += 1;
        Ok(LossReport {
            l_gan_d: d.loss,
            l_gan_g: gu.gan_g,
            l_mpc_x: gu.mpc_x,
            l_mpc_y: gu.mpc_y,
            l_total: gu.total,
            d_real_mean: d.real_mean,
            d_fake_mean: d.fake_mean,
        })
    }

    /// Map clean segments to simulated noisy ones with the generator in eval
    /// mode.
    pub fn simulate_segments(&self, segs: &[FeatureSegment]) -> Result<Vec<FeatureSegment>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        segs.iter()
            .map(|s| {
                let mut g = Graph::new();
                let gb = self.generator.params.bind(&mut g, false);
                let x = g.input(stack_batch(&[s]));
                let out = self.generator.forward(&mut g, &gb, x, Mode::Eval, &mut rng)?;
                FeatureSegment::new(g.value(out.output).data().to_vec(), s.stats)
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let snapshot = SimuGanSnapshot {
            kind: SIMUGAN_KIND.into(),
            config: self.config.clone(),
            stats: self.stats,
            adam_steps: [self.opt_g.t, self.opt_d.t, self.opt_h.t],
        };
        let mut tensors = Vec::new();
        for (prefix, params, opt) in [
            ("g", &self.generator.params, &self.opt_g),
            ("d", &self.discriminator.params, &self.opt_d),
            ("h", &self.heads.params, &self.opt_h),
        ] {
            push_params(&mut tensors, prefix, params, opt);
        }
        Container {
            step: self.step,
            snapshot: serde_json::to_string(&snapshot).expect("snapshot serializes"),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let snap: SimuGanSnapshot = serde_json::from_str(&c.snapshot)
            .map_err(|e| Error::Format(format!("checkpoint snapshot: {e}")))?;
        if snap.kind != SIMUGAN_KIND {
            return Err(Error::Format(format!("checkpoint holds a {} model, not {SIMUGAN_KIND}", snap.kind)));
        }
        let mut state = Self::new(snap.config, snap.stats)?;
        state.step = c.step;
        let mut pool = TensorPool::new(&c.tensors);
        pool.fill("g", &mut state.generator.params, &mut state.opt_g)?;
        pool.fill("d", &mut state.discriminator.params, &mut state.opt_d)?;
        pool.fill("h", &mut state.heads.params, &mut state.opt_h)?;
        pool.finish()?;
        [state.opt_g.t, state.opt_d.t, state.opt_h.t] = snap.adam_steps;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.to_container(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&checkpoint::load(path)?)
    }

    /// Parameter and moment tensors stored in a checkpoint.
    pub fn tensor_count(&self) -> usize {
        3 * (self.generator.params.len() + self.discriminator.params.len() + self.heads.params.len())
    }
}

const SIMUGAN_KIND: &str = "simugan";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimuGanSnapshot {
    kind: String,
    config: TrainConfig,
    stats: NormStats,
    adam_steps: [u64; 3],
}

/// Appends `prefix/name`, `prefix/name#m` and `prefix/name#v` for every
/// parameter.
pub(crate) fn push_params(out: &mut Vec<(String, Tensor)>, prefix: &str, params: &ParamSet, opt: &AdamState) {
    for (i, (name, t)) in params.iter().enumerate() {
        out.push((format!("{prefix}/{name}"), t.clone()));
        let dims = t.dims().to_vec();
        out.push((
            format!("{prefix}/{name}#m"),
            Tensor::new(dims.clone(), opt.m[i].clone()).expect("moment matches param"),
        ));
        out.push((
            format!("{prefix}/{name}#v"),
            Tensor::new(dims, opt.v[i].clone()).expect("moment matches param"),
        ));
    }
}

/// Checks a checkpoint's tensors off against a freshly built inventory.
pub(crate) struct TensorPool<'a> {
    tensors: std::collections::HashMap<&'a str, &'a Tensor>,
    used: usize,
}

impl<'a> TensorPool<'a> {
    pub(crate) fn new(list: &'a [(String, Tensor)]) -> Self {
        Self {
            tensors: list.iter().map(|(n, t)| (n.as_str(), t)).collect(),
            used: 0,
        }
    }

    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.dims() != dims {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, the configured model needs {:?}",
                t.dims(),
                dims
            )));
        }
        self.used += 1;
        Ok((*t).clone())
    }

    pub(crate) fn fill(&mut self, prefix: &str, params: &mut ParamSet, opt: &mut AdamState) -> Result<()> {
        for i in 0..params.len() {
            let name = params.names()[i].clone();
            let dims = params.get(i).dims().to_vec();
            *params.get_mut(i) = self.take(&format!("{prefix}/{name}"), &dims)?;
            opt.m[i] = self.take(&format!("{prefix}/{name}#m"), &dims)?.into_data();
            opt.v[i] = self.take(&format!("{prefix}/{name}#v"), &dims)?.into_data();
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.used != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, the configured model uses {}",
                self.tensors.len(),
                self.used
            )));
        }
        Ok(())
    }
}

/// Run `config.steps` training steps on prepared data. With `out` set, the
/// metrics CSV and checkpoints are written there.
pub fn run_training(config: &TrainConfig, data: &TrainingSet, out: Option<&Path>) -> Result<TrainState> {
    config.validate()?;
    if data.clean.is_empty() || data.noisy.is_empty() {
        return Err(Error::EmptyCorpus("training set has an empty domain".into()));
    }
    let mut state = TrainState::new(config.clone(), data.stats)?;
    let mut clean_order = EpochSampler::new(data.clean.len(), config.seed, CLEAN_STREAM);
    let mut noisy_order = EpochSampler::new(data.noisy.len(), config.seed, NOISY_STREAM);
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    for s in 0..config.steps {
        let xs: Vec<&FeatureSegment> = clean_order.batch(s, config.batch_size).into_iter().map(|i| &data.clean[i]).collect();
        let ys: Vec<&FeatureSegment> = noisy_order.batch(s, config.batch_size).into_iter().map(|i| &data.noisy[i]).collect();
        let mut rng = step_rng(config.seed, s);
        let report = state.train_step(&stack_batch(&xs), &stack_batch(&ys), &mut rng)?;
        if let Some((w, path)) = metrics.as_mut() {
            writeln!(w, "{}", report.csv_row(state.step)).map_err(|e| Error::io(&*path, e))?;
        }
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("loss report at step {}: {report:?}", state.step)));
        }
        if state.step % 50 == 0 || state.step == config.steps {
            log::info!(
                "step {}: d {:.4} g {:.4} mpc_x {:.4} mpc_y {:.4}",
                state.step,
                report.l_gan_d,
                report.l_gan_g,
                report.l_mpc_x,
                report.l_mpc_y
            );
        } else {
            log::debug!("step {}: {report:?}", state.step);
        }
        if let Some(dir) = out {
            if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0 && state.step != config.steps {
                state.save(dir.join(format!("ckpt_{:06}.sgan", state.step)))?;
            }
        }
    }
    if let Some((mut w, path)) = metrics {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out {
        state.save(dir.join("final.sgan"))?;
    }
    Ok(state)
}

/// Load the corpora named by `config` and train, writing into `out`.
pub fn train(config: &TrainConfig, out: &Path) -> Result<TrainState> {
    config.validate()?;
    let data = TrainingSet::load(config)?;
    log::info!(
        "training on {} clean and {} noisy segments, stats lo {:.4} hi {:.4}",
        data.clean.len(),
        data.noisy.len(),
        data.stats.lo,
        data.stats.hi
    );
    run_training(config, &data, Some(out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulateOptions {
    /// Also write Griffin-Lim audio for every segment.
    pub wav: bool,
    pub griffin_lim_iterations: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            wav: false,
            griffin_lim_iterations: 60,
        }
    }
}

/// Simulate every segment of a clean manifest. Writes `<stem>_<k>.seg`,
/// `<stem>_<k>.pgm`, optionally `<stem>_<k>.wav`, and `simulated.tsv`
/// listing the `.seg` files; returns that manifest with resolved paths.
pub fn simulate(state: &TrainState, clean: &CorpusManifest, out: &Path, opts: &SimulateOptions) -> Result<CorpusManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let segs = load_segments(clean, &state.config.stft)?;
    if segs.is_empty() {
        return Err(Error::EmptyCorpus("clean manifest yielded no segments".into()));
    }
    let features = normalize_all(&segs, &state.stats)?;
    let simulated = state.simulate_segments(&features)?;
    let mut entries = Vec::with_capacity(segs.len());
    for (src, sim) in segs.iter().zip(&simulated) {
        let stem = src.source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = format!("{stem}_{:03}", src.index);
        write_segment(out.join(format!("{name}.seg")), sim)?;
        write_pgm(out.join(format!("{name}.pgm")), &sim.data, FEATURE_BINS, SEGMENT_FRAMES)?;
        if opts.wav {
            let spec = Spectrogram {
                mag: denormalize_segment(sim).data,
                bins: FEATURE_BINS,
                frames: SEGMENT_FRAMES,
                config: state.config.stft,
            };
            let clip = griffin_lim(&spec, opts.griffin_lim_iterations, src.sample_rate)?;
            write_wav(out.join(format!("{name}.wav")), &clip)?;
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(format!("{name}.seg")),
            domain: Domain::Simulated,
            duration: (SEGMENT_FRAMES * state.config.stft.hop) as f64 / src.sample_rate as f64,
            labels: src.labels.clone(),
        });
    }
    let manifest = CorpusManifest::new(entries)?;
    manifest.save(out.join("simulated.tsv"))?;
    CorpusManifest::load(out.join("simulated.tsv"))
}

/// Mean `|X|²` over `bins` after mapping segments back to magnitudes.
pub fn mean_band_energy(segs: &[FeatureSegment], bins: std::ops::Range<usize>) -> f64 {
    let raw: Vec<RawSegment> = segs.iter().map(denormalize_segment).collect();
    mean_band_power(&raw, bins)
}

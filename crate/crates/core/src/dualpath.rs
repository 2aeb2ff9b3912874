//! Dual-path training of a frame classifier: clean and noisy views of the
//! same utterance go through one shared model, tied by a symmetric KL term
//! between the two output distributions.

use std::fs;
use std::path::{Path, PathBuf};

use noisim_diffcore::{AdamConfig, AdamState, Graph, Mode, NodeId, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    normalize_segment, segment_spectrogram, stft_magnitude, CorpusManifest, FeatureSegment, NormStats, StftConfig,
    SynthUtterance, FEATURE_BINS, SEGMENT_FRAMES,
};
use crate::checkpoint::{self, Container};
use crate::error::{Error, Result};
use crate::models::INIT_STD;
use crate::params::{normal_tensor, ParamSet};
use crate::trainer::{load_segments, normalize_all, push_params, stack_batch, AdamSettings, EpochSampler, TensorPool, TrainState};

const PAIR_STREAM: u64 = 3;
const CLEAN_PATH_STREAM: u64 = 1 << 61;
const NOISY_PATH_STREAM: u64 = 1 << 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticPlan {
    pub channels: [usize; 2],
    pub dropout: f64,
}

impl Default for AcousticPlan {
    fn default() -> Self {
        Self {
            channels: [8, 16],
            dropout: 0.0,
        }
    }
}

impl AcousticPlan {
    pub fn tiny() -> Self {
        Self {
            channels: [2, 3],
            dropout: 0.0,
        }
    }
}

/// Frequency rows after the two stride-(2, 1) convolutions.
pub const ENCODED_BINS: usize = (FEATURE_BINS.div_ceil(2)).div_ceil(2);

/// Two stride-(2, 1) 3×3 convolutions over frequency, then a per-frame
/// linear decoder and log-softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    pub plan: AcousticPlan,
    pub vocab: usize,
    pub params: ParamSet,
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const OUT_W: usize = 4;
const OUT_B: usize = 5;

impl AcousticModel {
    pub fn new(plan: AcousticPlan, vocab: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || plan.channels.contains(&0) || !(0.0..1.0).contains(&plan.dropout) {
            return Err(Error::Config(format!("invalid acoustic model: vocab {vocab}, plan {plan:?}")));
        }
        let [c1, c2] = plan.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("conv1.weight", normal_tensor(&[c1, 1, 3, 3], 0.1, &mut rng));
        p.push("conv1.bias", Tensor::zeros(&[c1]));
        p.push("conv2.weight", normal_tensor(&[c2, c1, 3, 3], 0.1, &mut rng));
        p.push("conv2.bias", Tensor::zeros(&[c2]));
        p.push("out.weight", normal_tensor(&[vocab, c2 * ENCODED_BINS], INIT_STD, &mut rng));
        p.push("out.bias", Tensor::zeros(&[vocab]));
        Ok(Self { plan, vocab, params: p })
    }

    /// Log-probabilities `[n·T, V]`, row `n·T + t` for frame `t` of example `n`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, b: &[NodeId], x: NodeId, mode: Mode, rng: &mut R) -> Result<NodeId> {
        let d = g.dims(x);
        if d.len() != 4 || d[1] != 1 || d[2] != FEATURE_BINS {
            return Err(Error::Diff(noisim_diffcore::Error::Shape {
                op: "acoustic_forward",
                detail: format!("expected [n, 1, {FEATURE_BINS}, t] input, got {:?}", d),
            }));
        }
        let h = g.conv2d(x, b[CONV1_W], b[CONV1_B], (2, 1), (1, 1))?;
        let h = g.relu(h);
        let h = g.conv2d(h, b[CONV2_W], b[CONV2_B], (2, 1), (1, 1))?;
        let h = g.relu(h);
        let rows = g.frames_to_rows(h)?;
        let rows = g.dropout(rows, self.plan.dropout, mode, rng)?;
        let logits = g.linear(rows, b[OUT_W], b[OUT_B])?;
        Ok(g.log_softmax(logits)?)
    }

    /// Log-probabilities of one segment, `[T, V]`, in eval mode.
    pub fn log_probs(&self, seg: &FeatureSegment) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.input(stack_batch(&[seg]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &b, x, Mode::Eval, &mut rng)?;
        Ok(g.value(out).clone())
    }
}

pub trait FramePredictor {
    /// One class id per frame of `seg`.
    fn predict(&self, seg: &FeatureSegment) -> Result<Vec<usize>>;
}

impl FramePredictor for AcousticModel {
    fn predict(&self, seg: &FeatureSegment) -> Result<Vec<usize>> {
        let lp = self.log_probs(seg)?;
        Ok(lp
            .data()
            .chunks(self.vocab)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Weights of the dual-path objective `α·KL + β·CE_clean + (1 − β)·CE_noisy`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl PathWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "alpha {} and beta {} must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualPathTerms {
    pub total: NodeId,
    pub kl: NodeId,
    pub asr_clean: NodeId,
    pub asr_noisy: NodeId,
}

/// `½(KL(c‖n) + KL(n‖c))`, averaged over frames.
pub fn symmetric_kl(g: &mut Graph, clean: NodeId, noisy: NodeId) -> Result<NodeId> {
    let a = g.kl_div(clean, noisy)?;
    let b = g.kl_div(noisy, clean)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

pub fn dual_path_loss(g: &mut Graph, clean: NodeId, noisy: NodeId, labels: &[usize], w: PathWeights) -> Result<DualPathTerms> {
    if g.dims(clean) != g.dims(noisy) {
        return Err(Error::Diff(noisim_diffcore::Error::Shape {
            op: "dual_path_loss",
            detail: format!("clean {:?} vs noisy {:?}", g.dims(clean), g.dims(noisy)),
        }));
    }
    let kl = symmetric_kl(g, clean, noisy)?;
    let asr_clean = g.cross_entropy(clean, labels)?;
    let asr_noisy = g.cross_entropy(noisy, labels)?;
    let total = combine(g, kl, asr_clean, asr_noisy, w)?;
    Ok(DualPathTerms {
        total,
        kl,
        asr_clean,
        asr_noisy,
    })
}

/// `α·kl + β·clean + (1 − β)·noisy` on graph nodes.
pub fn combine(g: &mut Graph, kl: NodeId, clean: NodeId, noisy: NodeId, w: PathWeights) -> Result<NodeId> {
    let a = g.scale(kl, w.alpha);
    let b = g.scale(clean, w.beta);
    let c = g.scale(noisy, 1.0 - w.beta);
    let ab = g.add(a, b)?;
    Ok(g.add(ab, c)?)
}

/// Scalar form of [`combine`].
pub fn combine_value(kl: f64, clean: f64, noisy: f64, w: PathWeights) -> f64 {
    w.alpha * kl + w.beta * clean + (1.0 - w.beta) * noisy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualPathConfig {
    pub alpha: f64,
    pub beta: f64,
    pub vocab: usize,
    pub plan: AcousticPlan,
    pub adam: AdamSettings,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Labeled clean corpus whose simulated versions form the noisy path.
    pub clean_manifest: PathBuf,
}

impl Default for DualPathConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.7,
            vocab: 4,
            plan: AcousticPlan::default(),
            adam: AdamSettings {
                beta1: 0.9,
                ..AdamSettings::default()
            },
            seed: 0,
            steps: 300,
            batch_size: 2,
            clean_manifest: PathBuf::new(),
        }
    }
}

impl DualPathConfig {
    pub fn weights(&self) -> PathWeights {
        PathWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.adam.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab {} is below 2", self.vocab)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_json(&text)?;
        if c.clean_manifest.is_relative() && !c.clean_manifest.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                c.clean_manifest = dir.join(&c.clean_manifest);
            }
        }
        Ok(c)
    }

    /// The same run with single-path weights.
    pub fn variant(&self, v: Variant) -> Self {
        let (alpha, beta) = match v {
            Variant::DualPath => (self.alpha, self.beta),
            Variant::CleanOnly => (0.0, 1.0),
            Variant::NoisyOnly => (0.0, 0.0),
        };
        Self {
            alpha,
            beta,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    DualPath,
    CleanOnly,
    NoisyOnly,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::DualPath => "dual-path",
            Variant::CleanOnly => "clean-only",
            Variant::NoisyOnly => "noisy-only",
        })
    }
}

/// A clean segment, its noisy counterpart, and the frame labels shared by
/// both.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUtterance {
    pub clean: FeatureSegment,
    pub noisy: FeatureSegment,
    pub labels: Vec<usize>,
}

/// A noisy segment with its frame labels; all that evaluation gets to see.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalExample {
    pub noisy: FeatureSegment,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticState {
    pub config: DualPathConfig,
    pub step: u64,
    pub model: AcousticModel,
    pub opt: AdamState,
    pub stats: NormStats,
    /// Training objective after every step.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualPathReport {
    pub total: f64,
    pub kl: f64,
    pub asr_clean: f64,
    pub asr_noisy: f64,
}

fn path_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream | step);
    rng
}

impl AcousticState {
    pub fn new(config: DualPathConfig, stats: NormStats) -> Result<Self> {
        config.validate()?;
        let model = AcousticModel::new(config.plan, config.vocab, config.seed)?;
        let adam: AdamConfig = config.adam.into();
        Ok(Self {
            opt: AdamState::new(adam, model.params.tensors()),
            config,
            step: 0,
            model,
            stats,
            history: Vec::new(),
        })
    }

    /// Two forward passes, one combined backward, one Adam step.
    pub fn train_step(&mut self, batch: &[&LabeledUtterance]) -> Result<DualPathReport> {
        let clean: Vec<&FeatureSegment> = batch.iter().map(|u| &u.clean).collect();
        let noisy: Vec<&FeatureSegment> = batch.iter().map(|u| &u.noisy).collect();
        let mut labels = Vec::with_capacity(batch.len() * SEGMENT_FRAMES);
        for u in batch {
            if u.labels.len() != SEGMENT_FRAMES || u.labels.iter().any(|&l| l >= self.config.vocab) {
                return Err(Error::Format(format!(
                    "utterance labels must be {SEGMENT_FRAMES} ids below {}",
                    self.config.vocab
                )));
            }
            labels.extend_from_slice(&u.labels);
        }
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g, true);
        let xc = g.input(stack_batch(&clean));
        let xn = g.input(stack_batch(&noisy));
        let mut rc = path_rng(self.config.seed, CLEAN_PATH_STREAM, self.step);
        let mut rn = path_rng(self.config.seed, NOISY_PATH_STREAM, self.step);
        let lc = self.model.forward(&mut g, &b, xc, Mode::Train, &mut rc)?;
        let ln = self.model.forward(&mut g, &b, xn, Mode::Train, &mut rn)?;
        let t = dual_path_loss(&mut g, lc, ln, &labels, self.config.weights())?;
        g.backward(t.total)?;
        let grads = self.model.params.grads(&g, &b);
        self.opt.step(self.model.params.tensors_mut(), &grads)?;
        self.step += 1;
        let report = DualPathReport {
            total: g.value(t.total).item(),
            kl: g.value(t.kl).item(),
            asr_clean: g.value(t.asr_clean).item(),
            asr_noisy: g.value(t.asr_noisy).item(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("dual-path loss at step {}", self.step)));
        }
        self.history.push(report.total);
        Ok(report)
    }

    pub fn to_container(&self) -> Container {
        let snap = AcousticSnapshot {
            kind: ACOUSTIC_KIND.into(),
            config: self.config.clone(),
            stats: self.stats,
            adam_steps: self.opt.t,
        };
        let mut tensors = Vec::new();
        push_params(&mut tensors, "a", &self.model.params, &self.opt);
        Container {
            step: self.step,
            snapshot: serde_json::to_string(&snap).expect("snapshot serializes"),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let snap: AcousticSnapshot = serde_json::from_str(&c.snapshot)
            .map_err(|e| Error::Format(format!("checkpoint snapshot: {e}")))?;
        if snap.kind != ACOUSTIC_KIND {
            return Err(Error::Format(format!("checkpoint holds a {} model, not {ACOUSTIC_KIND}", snap.kind)));
        }
        let mut s = Self::new(snap.config, snap.stats)?;
        s.step = c.step;
        let mut pool = TensorPool::new(&c.tensors);
        pool.fill("a", &mut s.model.params, &mut s.opt)?;
        pool.finish()?;
        s.opt.t = snap.adam_steps;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.to_container(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&checkpoint::load(path)?)
    }
}

const ACOUSTIC_KIND: &str = "dualpath";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcousticSnapshot {
    kind: String,
    config: DualPathConfig,
    stats: NormStats,
    adam_steps: u64,
}

/// Train one shared model on paired clean/noisy utterances.
pub fn train_dualpath(corpus: &[LabeledUtterance], config: &DualPathConfig, stats: NormStats) -> Result<AcousticState> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("dual-path corpus is empty".into()));
    }
    let mut state = AcousticState::new(config.clone(), stats)?;
    let mut order = EpochSampler::new(corpus.len(), config.seed, PAIR_STREAM);
    for s in 0..config.steps {
        let batch: Vec<&LabeledUtterance> = order.batch(s, config.batch_size).into_iter().map(|i| &corpus[i]).collect();
        let r = state.train_step(&batch)?;
        if state.step % 50 == 0 {
            log::info!("step {}: total {:.4} kl {:.4} clean {:.4} noisy {:.4}", state.step, r.total, r.kl, r.asr_clean, r.asr_noisy);
        }
    }
    Ok(state)
}

pub fn frame_error_rate(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len(), "prediction and label lengths differ");
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64
}

/// Frame error rate over the noisy inputs of `test`.
pub fn evaluate_noisy_path(model: &dyn FramePredictor, test: &[EvalExample]) -> Result<f64> {
    let (mut wrong, mut total) = (0usize, 0usize);
    for ex in test {
        let pred = model.predict(&ex.noisy)?;
        if pred.len() != ex.labels.len() {
            return Err(Error::Format(format!(
                "predictor returned {} frames for {} labels",
                pred.len(),
                ex.labels.len()
            )));
        }
        wrong += pred.iter().zip(&ex.labels).filter(|(p, l)| p != l).count();
        total += ex.labels.len();
    }
    Ok(if total == 0 { 0.0 } else { wrong as f64 / total as f64 })
}

/// Pair every labeled clean segment of `clean` with its simulation by the
/// Simu-GAN generator in `gan`.
pub fn simulated_pairs(gan: &TrainState, clean: &CorpusManifest) -> Result<Vec<LabeledUtterance>> {
    let segs = load_segments(clean, &gan.config.stft)?;
    let labeled: Vec<_> = segs.into_iter().filter(|s| s.labels.is_some()).collect();
    let features = normalize_all(&labeled, &gan.stats)?;
    let simulated = gan.simulate_segments(&features)?;
    Ok(labeled
        .into_iter()
        .zip(features)
        .zip(simulated)
        .map(|((s, clean), noisy)| LabeledUtterance {
            clean,
            noisy,
            labels: s.labels.expect("filtered to labeled segments"),
        })
        .collect())
}

/// Labeled noisy segments of a test manifest, normalized with `stats`.
pub fn eval_examples(test: &CorpusManifest, stats: &NormStats, stft: &StftConfig) -> Result<Vec<EvalExample>> {
    let segs = load_segments(test, stft)?;
    let labeled: Vec<_> = segs.into_iter().filter(|s| s.labels.is_some()).collect();
    let features = normalize_all(&labeled, stats)?;
    Ok(labeled
        .into_iter()
        .zip(features)
        .map(|(s, noisy)| EvalExample {
            noisy,
            labels: s.labels.expect("filtered to labeled segments"),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub variant: String,
    pub fer: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("seed,variant,fer\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.seed, r.variant, r.fer));
    }
    s
}

/// Pair clean utterances with noisy versions of the same signals (same
/// labels), segment both, and normalize with `stats`, or with statistics
/// of the pairs themselves when `stats` is `None`.
pub fn paired_segments(
    clean: &[SynthUtterance],
    noisy: &[SynthUtterance],
    stft: &StftConfig,
    stats: Option<NormStats>,
) -> Result<(Vec<LabeledUtterance>, NormStats)> {
    if clean.len() != noisy.len() {
        return Err(Error::Format(format!("{} clean vs {} noisy utterances", clean.len(), noisy.len())));
    }
    let mut raw = Vec::new();
    for (c, n) in clean.iter().zip(noisy) {
        let cs = segment_spectrogram(&stft_magnitude(&c.clip, stft)?, SEGMENT_FRAMES, SEGMENT_FRAMES);
        let ns = segment_spectrogram(&stft_magnitude(&n.clip, stft)?, SEGMENT_FRAMES, SEGMENT_FRAMES);
        for (a, b) in cs.into_iter().zip(ns) {
            let labels = c.labels[a.start..a.start + SEGMENT_FRAMES].to_vec();
            raw.push((a, b, labels));
        }
    }
    let stats = match stats {
        Some(s) => s,
        None => NormStats::from_segments(raw.iter().flat_map(|(a, b, _)| [a, b]))?,
    };
    let pairs = raw
        .into_iter()
        .map(|(a, b, labels)| {
            Ok(LabeledUtterance {
                clean: normalize_segment(&a, &stats)?,
                noisy: normalize_segment(&b, &stats)?,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, stats))
}

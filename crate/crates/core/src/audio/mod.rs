//! Audio ingestion and the spectrogram feature pipeline.

mod features;
mod griffin_lim;
mod image;
mod manifest;
mod segfile;
mod stft;
mod synth;
mod wav;

pub use features::{
    denormalize_segment, normalize_segment, segment_spectrogram, FeatureSegment, NormStats, RawSegment,
    FEATURE_BINS, SEGMENT_FRAMES,
};
pub use griffin_lim::{griffin_lim, griffin_lim_traced};
pub use image::{decode_pgm, encode_pgm, spectrogram_display, write_pgm};
pub use manifest::{CorpusManifest, Domain, ManifestEntry};
pub use segfile::{decode_segment, encode_segment, read_segment, write_segment};
pub use stft::{stft_magnitude, Spectrogram, StftConfig, Window};
pub use synth::{
    band_bins, mean_band_power, noisy_counterpart, synth_corpus, write_corpus, NoiseRecipe, SynthCorpus, SynthProfile, SynthUtterance,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, AudioClip};

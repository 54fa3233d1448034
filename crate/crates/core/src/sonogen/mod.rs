//! Synthetic sonar-like signals, STFT rendering and ground-truth masks.

pub mod corpus;
pub mod fft;
pub mod stft;
pub mod synth;

pub use corpus::{
    desk_classes, render_corpus, render_sample, CorpusSchedule, Dataset, DatasetManifest,
    ImageLayout, ManifestEntry, Split, MANIFEST_FILE,
};
pub use fft::{dft, dft_real, idft};
pub use stft::{log_normalize, magnitudes, stft, Spectrogram, StftParams, TimeSeries, Window};
pub use synth::{ground_truth_mask, synth_signal, ClassSpec, Harmonic, SynthParams, TonalTrack};

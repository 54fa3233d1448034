//! Labelled corpus rendering and the JSON manifest that indexes it.
//!
//! Manifest schema (`manifest.json`, paths relative to the manifest's
//! directory):
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "layout":   { "stft": {fft_size, hop, sample_rate, window}, "first_bin", "rows", "cols" },
//!   "seed":     u64,
//!   "schedule": { noise_level, interference_prob, interference_gain, amplitude_jitter, test_fraction },
//!   "classes":  [ClassSpec],
//!   "class_masks": { "<class_id>": "masks/class_<id>.spg" },
//!   "entries":  [{ id, spectrogram, mask, class_id, noise_level, seed, split, synthetic }]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stft::{stft, Spectrogram, StftParams, Window};
use super::synth::{ground_truth_mask, synth_signal, ClassSpec, Harmonic, SynthParams, TonalTrack};
use crate::error::{Error, Result};
use crate::spg;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Image geometry: STFT parameters plus the bin/frame window kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub stft: StftParams,
    pub first_bin: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for ImageLayout {
    /// 128-point Hann STFT at 8 kHz, hop 64, bins 1..=64 by 64 frames.
    fn default() -> Self {
        Self {
            stft: StftParams {
                fft_size: 128,
                hop: 64,
                sample_rate: 8000,
                window: Window::Hann,
            },
            first_bin: 1,
            rows: 64,
            cols: 64,
        }
    }
}

impl ImageLayout {
    pub fn duration(&self) -> f64 {
        self.stft.samples_for_frames(self.cols) as f64 / self.stft.sample_rate as f64
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Frequency at the centre of image row `row`.
    pub fn row_freq(&self, row: usize) -> f64 {
        (row + self.first_bin) as f64 * self.stft.bin_width()
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.first_bin + self.rows > self.stft.fft_size / 2 + 1 {
            return Err(Error::InvalidParam(format!(
                "rows {}..{} exceed the {} available bins",
                self.first_bin,
                self.first_bin + self.rows,
                self.stft.fft_size / 2 + 1
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidParam("image must be non-empty".into()));
        }
        Ok(())
    }

    pub fn class_mask(&self, spec: &ClassSpec) -> Array2<f64> {
        ground_truth_mask(spec, self.rows, self.cols, &self.stft, self.first_bin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSchedule {
    pub noise_level: f64,
    /// Probability that each other class interferes with a sample.
    pub interference_prob: f64,
    pub interference_gain: f64,
    pub amplitude_jitter: f64,
    /// Fraction of each class held out as the test split.
    pub test_fraction: f64,
}

impl Default for CorpusSchedule {
    fn default() -> Self {
        Self {
            noise_level: 0.3,
            interference_prob: 0.5,
            interference_gain: 0.5,
            amplitude_jitter: 0.2,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub spectrogram: String,
    /// Absent for generated (synthetic) samples.
    pub mask: Option<String>,
    pub class_id: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub split: Split,
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub layout: ImageLayout,
    pub seed: u64,
    pub schedule: CorpusSchedule,
    pub classes: Vec<ClassSpec>,
    pub class_masks: BTreeMap<usize, String>,
    pub entries: Vec<ManifestEntry>,
}

/// Images of one split, flattened row-major into the rows of `x`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Array2<f64>,
    /// Class index (position in `DatasetManifest::classes`).
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize, layout: &ImageLayout) -> Array2<f64> {
        self.x
            .row(i)
            .to_owned()
            .into_shape_with_order((layout.rows, layout.cols))
            .expect("dataset row has layout size")
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

impl DatasetManifest {
    pub fn class_index(&self, class_id: usize) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.class_id == class_id)
            .ok_or_else(|| Error::InvalidParam(format!("unknown class id {class_id}")))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that every referenced file exists and has the layout's dims.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        self.layout.validate()?;
        let ids: BTreeSet<usize> = self.classes.iter().map(|c| c.class_id).collect();
        if ids.len() != self.classes.len() {
            return Err(Error::InvalidParam("duplicate class ids".into()));
        }
        let dims = (self.layout.rows, self.layout.cols);
        let check = |rel: &str| -> Result<()> {
            let g = spg::read(&dir.join(rel))?;
            if g.dim() != dims {
                return Err(Error::shape(format!("{dims:?}"), format!("{:?} in {rel}", g.dim())));
            }
            Ok(())
        };
        for rel in self.class_masks.values() {
            check(rel)?;
        }
        for e in &self.entries {
            if !ids.contains(&e.class_id) {
                return Err(Error::InvalidParam(format!("entry {} has unknown class", e.id)));
            }
            check(&e.spectrogram)?;
            if let Some(m) = &e.mask {
                check(m)?;
            }
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Dataset> {
        let entries: Vec<&ManifestEntry> = self.entries_in(split).collect();
        self.load_entries(dir, &entries)
    }

    pub fn load_entries(&self, dir: &Path, entries: &[&ManifestEntry]) -> Result<Dataset> {
        let px = self.layout.pixels();
        let mut x = Array2::zeros((entries.len(), px));
        let mut labels = Vec::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let g = spg::read(&dir.join(&e.spectrogram))?;
            if g.len() != px {
                return Err(Error::shape(px, g.len()));
            }
            x.row_mut(i).assign(&ndarray::ArrayView1::from(g.as_slice().unwrap()));
            labels.push(self.class_index(e.class_id)?);
            ids.push(e.id.clone());
        }
        Ok(Dataset { x, labels, ids })
    }

    /// Ground-truth template per class index.
    pub fn load_class_masks(&self, dir: &Path) -> Result<Vec<Array2<f64>>> {
        self.classes
            .iter()
            .map(|c| {
                let rel = self.class_masks.get(&c.class_id).ok_or_else(|| {
                    Error::InvalidParam(format!("no mask for class {}", c.class_id))
                })?;
                spg::read(&dir.join(rel))
            })
            .collect()
    }
}

/// Renders one image of `spec` under `schedule`; deterministic in `seed`.
pub fn render_sample(
    spec: &ClassSpec,
    others: &[ClassSpec],
    layout: &ImageLayout,
    schedule: &CorpusSchedule,
    seed: u64,
) -> Result<Spectrogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interference: Vec<ClassSpec> = others
        .iter()
        .filter(|_| rng.random::<f64>() < schedule.interference_prob)
        .cloned()
        .collect();
    let params = SynthParams {
        sample_rate: layout.stft.sample_rate,
        duration: layout.duration(),
        noise_level: schedule.noise_level,
        interference_gain: schedule.interference_gain,
        amplitude_jitter: schedule.amplitude_jitter,
    };
    let x = synth_signal(spec, &params, &interference, rng.random())?;
    let full = stft(&x, &layout.stft)?;
    let mut img = full.crop(layout.first_bin, layout.rows, layout.cols)?;
    img.grid = spg::quantize(&img.grid);
    Ok(img)
}

/// Writes `per_class` images for every class plus one ground-truth mask per
/// class, and the manifest, under `out_dir`.
pub fn render_corpus(
    classes: &[ClassSpec],
    per_class: usize,
    layout: &ImageLayout,
    schedule: &CorpusSchedule,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if classes.len() < 2 {
        return Err(Error::InvalidParam("a corpus needs at least two classes".into()));
    }
    layout.validate()?;
    let mut seen = BTreeSet::new();
    for c in classes {
        c.validate(layout.stft.sample_rate)?;
        if !seen.insert(c.class_id) {
            return Err(Error::InvalidParam(format!("duplicate class id {}", c.class_id)));
        }
    }
    let n_test = ((per_class as f64) * schedule.test_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut class_masks = BTreeMap::new();
    for (ci, spec) in classes.iter().enumerate() {
        let mask_rel = format!("masks/class_{}.spg", spec.class_id);
        spg::write(&out_dir.join(&mask_rel), &layout.class_mask(spec))?;
        class_masks.insert(spec.class_id, mask_rel.clone());
        let others: Vec<ClassSpec> = classes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != ci)
            .map(|(_, c)| c.clone())
            .collect();
        for i in 0..per_class {
            let sample_seed: u64 = rng.random();
            let img = render_sample(spec, &others, layout, schedule, sample_seed)?;
            let id = format!("c{}_{i:04}", spec.class_id);
            let rel = format!("spg/{id}.spg");
            spg::write(&out_dir.join(&rel), &img.grid)?;
            entries.push(ManifestEntry {
                id,
                spectrogram: rel,
                mask: Some(mask_rel.clone()),
                class_id: spec.class_id,
                noise_level: schedule.noise_level,
                seed: sample_seed,
                split: if i >= per_class - n_test {
                    Split::Test
                } else {
                    Split::Train
                },
                synthetic: false,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        layout: *layout,
        seed,
        schedule: *schedule,
        classes: classes.to_vec(),
        class_masks,
        entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// The four-class desk corpus: bin-centred tonals, harmonics, a frequency
/// modulated line and two gated lines.
pub fn desk_classes(layout: &ImageLayout) -> Vec<ClassSpec> {
    // bin positions are laid out for 64 rows and scale with the image height
    let bw = layout.stft.bin_width() * layout.rows as f64 / 64.0;
    let dur = layout.duration() + 1.0;
    let tone = |bin: f64, harmonics: Vec<(u32, f64)>, start: f64, end: f64| TonalTrack {
        base_freq: bin * bw,
        harmonics: harmonics
            .into_iter()
            .map(|(multiple, amplitude)| Harmonic {
                multiple,
                amplitude,
            })
            .collect(),
        fm_depth: 0.0,
        fm_rate: 0.0,
        start_time: start,
        end_time: end,
    };
    let half = layout.duration() / 2.0;
    vec![
        ClassSpec {
            class_id: 0,
            name: "tanker".into(),
            tracks: vec![tone(8.0, vec![(1, 1.0), (2, 0.7)], 0.0, dur)],
        },
        ClassSpec {
            class_id: 1,
            name: "trawler".into(),
            tracks: vec![tone(12.0, vec![(1, 0.9), (3, 0.7)], 0.0, dur)],
        },
        ClassSpec {
            class_id: 2,
            name: "submarine".into(),
            tracks: vec![TonalTrack {
                fm_depth: 1.0 * bw,
                fm_rate: 2.0,
                ..tone(28.0, vec![(1, 1.0)], 0.0, dur)
            }],
        },
        ClassSpec {
            class_id: 3,
            name: "diver".into(),
            tracks: vec![
                tone(44.0, vec![(1, 1.0)], 0.0, half * 1.3),
                tone(56.0, vec![(1, 0.9)], half * 0.7, dur),
            ],
        },
    ]
}

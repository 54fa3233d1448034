//! End-to-end workflow as resumable stages sharing one JSON config.
//!
//! Every stage writes into `<stage-dir>/<stage>/` and appends an entry to
//! `<stage-dir>/ledger.json` recording the sha256 of each artifact, the
//! stage's config hash, its seed and wall time. A stage refuses to run when
//! an upstream stage has no entry, when the upstream entry was produced
//! under a different config, or when an upstream file no longer matches its
//! recorded hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clusterer::{elbow_select, representatives, KMeansConfig, RepresentativeSet};
use crate::error::{Error, Result};
use crate::evalkit::{panel, run_sweep, signatures_for, SweepConfig, SweepInputs, SweepReport};
use crate::maskforge::{
    ae_centroid_mask, extract_with, general_mask, Approach, ExtractConfig, FusionMode, GeneralMask, DEFAULT_THRESHOLD,
};
use crate::nnkit::{
    accuracy, normalize_rows, spec_cnn, train_autoencoder, train_classifier_on, upsampler_spec, AutoencoderConfig, Network,
    Shape, TrainConfig,
};
use crate::scorecam::score_cam;
use crate::sonogen::{
    desk_classes, render_corpus, ClassSpec, CorpusSchedule, Dataset, DatasetManifest, ImageLayout, ManifestEntry, Split,
    MANIFEST_FILE,
};
use crate::spg;
use crate::wgan::{sample_synthetic, train_wgan_class, GanBundle, WganConfig};

pub const LEDGER_FILE: &str = "ledger.json";
pub const CLASSIFIER_FILE: &str = "classifier.nnp";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    TrainCnn,
    TrainWgan,
    Augment,
    Cluster,
    Extract,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::TrainCnn,
        Stage::TrainWgan,
        Stage::Augment,
        Stage::Cluster,
        Stage::Extract,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainCnn => "train-cnn",
            Stage::TrainWgan => "train-wgan",
            Stage::Augment => "augment",
            Stage::Cluster => "cluster",
            Stage::Extract => "extract",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub per_class: usize,
    pub layout: ImageLayout,
    pub schedule: CorpusSchedule,
    /// Class definitions; the built-in four-class set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<ClassSpec>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            per_class: 50,
            layout: ImageLayout::default(),
            schedule: CorpusSchedule::default(),
            classes: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Width of the second dense layer (the clustering embedding).
    pub embedding: usize,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embedding: 64,
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStageConfig {
    pub train: WganConfig,
    /// Class ids to train a GAN for; every class when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
}

impl Default for GanStageConfig {
    /// Narrower critic and a shorter schedule than the standalone defaults so
    /// that four class GANs fit a laptop budget.
    fn default() -> Self {
        Self {
            train: WganConfig {
                epochs: 40,
                critic_widths: (8, 16),
                ..WganConfig::default()
            },
            classes: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Synthetic images added across all classes, split evenly and capped
    /// per class at the number of real training images of that class.
    pub synthetic_total: usize,
    /// Use the classifier retrained on the augmented set for everything
    /// downstream.
    pub use_for_masks: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            synthetic_total: 50,
            use_for_masks: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans: KMeansConfig,
    pub autoencoder: Option<AutoencoderConfig>,
    pub decoder_channels: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 10,
            kmeans: KMeansConfig::default(),
            autoencoder: Some(AutoencoderConfig::default()),
            decoder_channels: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub classifier: ClassifierConfig,
    pub wgan: GanStageConfig,
    pub augment: AugmentConfig,
    pub cluster: ClusterConfig,
    pub extract: ExtractConfig,
    pub sweep: Vec<SweepConfig>,
}

impl Default for PipelineConfig {
    /// The four-class desk corpus, 50 images per class, extracted with
    /// add-clip fusion. The sweep adds max-fusion direct@0.75 for comparison.
    fn default() -> Self {
        let fusion = FusionMode::AddClip;
        let mut sweep = SweepConfig::standard_with(fusion);
        sweep.push(SweepConfig {
            approach: Approach::Direct,
            threshold: DEFAULT_THRESHOLD,
            fusion: FusionMode::Max,
        });
        Self {
            seed: 7,
            corpus: CorpusConfig::default(),
            classifier: ClassifierConfig::default(),
            wgan: GanStageConfig::default(),
            augment: AugmentConfig::default(),
            cluster: ClusterConfig::default(),
            extract: ExtractConfig {
                fusion,
                ..ExtractConfig::default()
            },
            sweep,
        }
    }
}

impl PipelineConfig {
    /// Tiny 32×32 corpus with minimal training; runs end to end in seconds.
    pub fn quick() -> Self {
        let layout = ImageLayout {
            rows: 32,
            cols: 32,
            ..ImageLayout::default()
        };
        let short = |epochs, batch_size| TrainConfig {
            epochs,
            batch_size,
            ..TrainConfig::default()
        };
        Self {
            seed: 11,
            corpus: CorpusConfig {
                per_class: 10,
                layout,
                ..CorpusConfig::default()
            },
            classifier: ClassifierConfig {
                embedding: 16,
                train: short(6, 8),
            },
            wgan: GanStageConfig {
                train: WganConfig {
                    epochs: 2,
                    batch_size: 4,
                    critic_steps: 2,
                    latent_dim: 8,
                    generator_channels: 4,
                    critic_widths: (2, 4),
                    ..WganConfig::default()
                },
                classes: None,
            },
            augment: AugmentConfig {
                synthetic_total: 8,
                use_for_masks: true,
            },
            cluster: ClusterConfig {
                k_max: 4,
                autoencoder: Some(AutoencoderConfig {
                    train: short(3, 16),
                    ..AutoencoderConfig::default()
                }),
                decoder_channels: 4,
                ..ClusterConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn classes(&self) -> Vec<ClassSpec> {
        self.corpus
            .classes
            .clone()
            .unwrap_or_else(|| desk_classes(&self.corpus.layout))
    }

    /// Sets every threshold used by extraction and the sweep.
    pub fn override_threshold(&mut self, threshold: f64) {
        self.extract.threshold = threshold;
        let mut seen = Vec::new();
        self.sweep.retain_mut(|c| {
            c.threshold = threshold;
            let key = (c.approach.clone(), c.fusion);
            let fresh = !seen.contains(&key);
            seen.push(key);
            fresh
        });
    }

    /// Seed used by `stage`, derived from the master seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Synth => self.seed,
            _ => splitmix(self.seed ^ (stage as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    /// Paths relative to the stage directory root.
    pub artifacts: Vec<ArtifactRecord>,
    /// Digest of each upstream entry this run consumed.
    pub inputs: BTreeMap<Stage, String>,
}

impl LedgerEntry {
    /// Hash over every artifact path and hash.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.artifacts {
            h.update(a.path.as_bytes());
            h.update(b"\0");
            h.update(a.sha256.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Append-only record of stage runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
}

impl RunLedger {
    pub fn load(stage_dir: &Path) -> Result<Self> {
        let path = stage_dir.join(LEDGER_FILE);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn latest(&self, stage: Stage) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }

    fn append(stage_dir: &Path, entry: LedgerEntry) -> Result<()> {
        let mut ledger = Self::load(stage_dir)?;
        ledger.entries.push(entry);
        let path = stage_dir.join(LEDGER_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&ledger)?).map_err(|e| Error::io(&path, e))
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<T> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact {
        stage: stage.name().into(),
        detail: format!("{} not found", path.display()),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Optional per-invocation inputs for `extract`.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Single `.spg` image to extract instead of the test split.
    pub input: Option<PathBuf>,
    /// Directory for extracted signatures instead of the stage directory.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentMetrics {
    pub synthetic_per_class: BTreeMap<usize, usize>,
    pub base_test_accuracy: f64,
    pub augmented_test_accuracy: f64,
    /// Augmented minus base, in percentage points.
    pub delta_points: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub class_id: usize,
    pub probe_last10: f64,
    pub max_critic_abs: f64,
    pub generator_updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractRecord {
    pub id: String,
    pub predicted_class: usize,
    pub true_class: Option<usize>,
    pub retained_cells: usize,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub stage_dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, stage_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            stage_dir: stage_dir.into(),
        }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.stage_dir.join(stage.name())
    }

    fn classifier_stage(&self) -> Stage {
        if self.config.augment.use_for_masks {
            Stage::Augment
        } else {
            Stage::TrainCnn
        }
    }

    pub fn dependencies(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Synth => vec![],
            Stage::TrainCnn | Stage::TrainWgan => vec![Stage::Synth],
            Stage::Augment => vec![Stage::Synth, Stage::TrainCnn, Stage::TrainWgan],
            Stage::Cluster => {
                let mut d = vec![Stage::Synth, Stage::TrainCnn];
                if self.config.augment.use_for_masks {
                    d.push(Stage::Augment);
                }
                d
            }
            Stage::Extract | Stage::Sweep => {
                let mut d = self.dependencies(Stage::Cluster);
                d.push(Stage::Cluster);
                d
            }
            Stage::Report => vec![Stage::Synth, Stage::TrainCnn, Stage::TrainWgan, Stage::Augment, Stage::Cluster, Stage::Sweep],
        }
    }

    fn own_section(&self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.config;
        Ok(match stage {
            Stage::Synth => serde_json::to_value((&c.corpus, c.classes()))?,
            Stage::TrainCnn => serde_json::to_value(c.classifier)?,
            Stage::TrainWgan => serde_json::to_value(&c.wgan)?,
            Stage::Augment => serde_json::to_value(c.augment)?,
            Stage::Cluster => serde_json::to_value((c.cluster, c.extract.cam))?,
            Stage::Extract => serde_json::to_value(c.extract)?,
            Stage::Sweep => serde_json::to_value((&c.sweep, c.extract.cam))?,
            Stage::Report => serde_json::Value::Null,
        })
    }

    /// Hash of the config sections a stage reads, chained through the hashes
    /// of its upstream stages.
    pub fn config_hash(&self, stage: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(self.config.stage_seed(stage).to_le_bytes());
        h.update(serde_json::to_vec(&self.own_section(stage)?)?);
        for dep in self.dependencies(stage) {
            h.update(self.config_hash(dep)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Confirms every upstream stage ran under the current config and that
    /// its files are intact.
    pub fn check_upstream(&self, stage: Stage) -> Result<BTreeMap<Stage, String>> {
        let ledger = RunLedger::load(&self.stage_dir)?;
        let mut inputs = BTreeMap::new();
        for dep in self.dependencies(stage) {
            let entry = ledger.latest(dep).ok_or_else(|| Error::MissingArtifact {
                stage: dep.name().into(),
                detail: format!("`{stage}` needs `{dep}` to run first"),
            })?;
            if entry.config_hash != self.config_hash(dep)? {
                return Err(Error::StaleArtifact {
                    stage: dep.name().into(),
                    detail: format!("config changed since `{dep}` ran; rerun it before `{stage}`"),
                });
            }
            for a in &entry.artifacts {
                let path = self.stage_dir.join(&a.path);
                let actual = hash_file(&path).map_err(|_| Error::MissingArtifact {
                    stage: dep.name().into(),
                    detail: format!("{} is gone", a.path),
                })?;
                if actual != a.sha256 {
                    return Err(Error::StaleArtifact {
                        stage: dep.name().into(),
                        detail: format!("{} changed since it was recorded", a.path),
                    });
                }
            }
            inputs.insert(dep, entry.digest());
        }
        Ok(inputs)
    }

    /// Runs one stage and appends its ledger entry.
    pub fn run_stage(&self, stage: Stage, opts: &StageOptions) -> Result<LedgerEntry> {
        let inputs = self.check_upstream(stage)?;
        let started = Instant::now();
        let out = match (stage, &opts.output) {
            (Stage::Extract, Some(o)) => o.clone(),
            _ => self.dir(stage),
        };
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        }
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        log::info!("running stage `{stage}`");
        match stage {
            Stage::Synth => self.synth(&out)?,
            Stage::TrainCnn => self.train_cnn(&out)?,
            Stage::TrainWgan => self.train_wgan(&out)?,
            Stage::Augment => self.augment(&out)?,
            Stage::Cluster => self.cluster(&out)?,
            Stage::Extract => self.extract(&out, opts.input.as_deref())?,
            Stage::Sweep => self.sweep(&out)?,
            Stage::Report => self.report(&out)?,
        }
        let mut files = Vec::new();
        walk(&out, &mut files)?;
        let artifacts = files
            .iter()
            .map(|p| {
                Ok(ArtifactRecord {
                    path: rel(&self.stage_dir, p),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = LedgerEntry {
            stage,
            config_hash: self.config_hash(stage)?,
            seed: self.config.stage_seed(stage),
            wall_time_s: started.elapsed().as_secs_f64(),
            artifacts,
            inputs,
        };
        RunLedger::append(&self.stage_dir, entry.clone())?;
        Ok(entry)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<LedgerEntry>> {
        Stage::ALL
            .into_iter()
            .map(|s| self.run_stage(s, &StageOptions::default()))
            .collect()
    }

    pub fn manifest(&self) -> Result<(DatasetManifest, PathBuf)> {
        let dir = self.dir(Stage::Synth);
        let m = DatasetManifest::load(&dir.join(MANIFEST_FILE)).map_err(|e| Error::MissingArtifact {
            stage: Stage::Synth.name().into(),
            detail: e.to_string(),
        })?;
        Ok((m, dir))
    }

    fn image_shape(&self) -> Shape {
        Shape::new(1, self.config.corpus.layout.rows, self.config.corpus.layout.cols)
    }

    fn load_network(&self, stage: Stage, file: &str) -> Result<Network> {
        Network::load(&self.dir(stage).join(file)).map_err(|e| Error::MissingArtifact {
            stage: stage.name().into(),
            detail: e.to_string(),
        })
    }

    /// The classifier every mask-producing stage uses.
    pub fn classifier(&self) -> Result<Network> {
        self.load_network(self.classifier_stage(), CLASSIFIER_FILE)
    }

    fn class_dir(out: &Path, class_id: usize) -> PathBuf {
        out.join(format!("class_{class_id}"))
    }

    fn load_masks(&self, file: &str) -> Result<BTreeMap<usize, GeneralMask>> {
        let (m, _) = self.manifest()?;
        let dir = self.dir(Stage::Cluster);
        let mut out = BTreeMap::new();
        for (index, class) in m.classes.iter().enumerate() {
            let cdir = Self::class_dir(&dir, class.class_id);
            let path = cdir.join(file);
            if !path.exists() {
                continue;
            }
            let reps: RepresentativeSet = read_json(&cdir.join("representatives.json"), Stage::Cluster)?;
            let contributors = if file == GENERAL_MASK_FILE {
                reps.entries.iter().map(|r| r.sample_id.clone()).collect()
            } else {
                (0..reps.entries.len()).map(|i| format!("centroid_{i}")).collect()
            };
            out.insert(
                index,
                GeneralMask {
                    grid: spg::read(&path)?,
                    class: index,
                    contributors,
                },
            );
        }
        Ok(out)
    }

    /// Representative-based general mask per class index.
    pub fn general_masks(&self) -> Result<BTreeMap<usize, GeneralMask>> {
        let masks = self.load_masks(GENERAL_MASK_FILE)?;
        if masks.is_empty() {
            return Err(Error::MissingArtifact {
                stage: Stage::Cluster.name().into(),
                detail: "no general masks".into(),
            });
        }
        Ok(masks)
    }

    /// Decoded-centroid general mask per class index, when the autoencoder
    /// was trained.
    pub fn ae_general_masks(&self) -> Result<Option<BTreeMap<usize, GeneralMask>>> {
        let masks = self.load_masks(AE_MASK_FILE)?;
        Ok((!masks.is_empty()).then_some(masks))
    }

    fn synth(&self, out: &Path) -> Result<()> {
        let c = &self.config.corpus;
        render_corpus(&self.config.classes(), c.per_class, &c.layout, &c.schedule, self.config.seed, out)?;
        Ok(())
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            seed: self.config.stage_seed(stage),
            ..self.config.classifier.train
        }
    }

    fn fit_classifier(&self, train: &Dataset, test: &Dataset, m: &DatasetManifest, stage: Stage) -> Result<Network> {
        let spec = spec_cnn(self.image_shape(), m.num_classes(), self.config.classifier.embedding);
        train_classifier_on(spec, train, (!test.is_empty()).then_some(test), &self.train_config(stage))
    }

    fn train_cnn(&self, out: &Path) -> Result<()> {
        let (m, dir) = self.manifest()?;
        let train = m.load_split(&dir, Split::Train)?;
        let test = m.load_split(&dir, Split::Test)?;
        let net = self.fit_classifier(&train, &test, &m, Stage::TrainCnn)?;
        net.save(&out.join(CLASSIFIER_FILE))?;
        write_json(
            &out.join("metrics.json"),
            &ClassifierMetrics {
                train_accuracy: accuracy(&net, &train)?,
                test_accuracy: accuracy(&net, &test)?,
                epochs: net.params.meta.epochs,
            },
        )
    }

    fn gan_classes(&self, m: &DatasetManifest) -> Vec<usize> {
        self.config
            .wgan
            .classes
            .clone()
            .unwrap_or_else(|| m.classes.iter().map(|c| c.class_id).collect())
    }

    fn train_wgan(&self, out: &Path) -> Result<()> {
        let (m, dir) = self.manifest()?;
        let mut summary = Vec::new();
        for (i, class_id) in self.gan_classes(&m).into_iter().enumerate() {
            let cfg = WganConfig {
                seed: self.config.stage_seed(Stage::TrainWgan).wrapping_add(i as u64),
                ..self.config.wgan.train
            };
            let bundle = train_wgan_class(&m, &dir, class_id, &cfg)?;
            bundle.save(&Self::class_dir(out, class_id))?;
            summary.push(GanSummary {
                class_id,
                probe_last10: bundle.history.probe_tail_mean(10).unwrap_or(f64::NAN),
                max_critic_abs: bundle.history.max_critic_abs(),
                generator_updates: bundle.history.generator_updates,
            });
        }
        write_json(&out.join("summary.json"), &summary)
    }

    fn augment(&self, out: &Path) -> Result<()> {
        let (m, dir) = self.manifest()?;
        let train = m.load_split(&dir, Split::Train)?;
        let test = m.load_split(&dir, Split::Test)?;
        let gan_dir = self.dir(Stage::TrainWgan);
        let classes = self.gan_classes(&m);
        let mut aug = m.clone();
        aug.entries.retain(|e| e.split == Split::Train);
        for e in &mut aug.entries {
            e.spectrogram = format!("../{}/{}", Stage::Synth.name(), e.spectrogram);
            e.mask = e.mask.as_ref().map(|p| format!("../{}/{}", Stage::Synth.name(), p));
        }
        aug.class_masks = m
            .class_masks
            .iter()
            .map(|(k, v)| (*k, format!("../{}/{}", Stage::Synth.name(), v)))
            .collect();
        let mut per_class = BTreeMap::new();
        let n = classes.len().max(1);
        let seed = self.config.stage_seed(Stage::Augment);
        for (i, &class_id) in classes.iter().enumerate() {
            let index = m.class_index(class_id)?;
            let real = train.labels.iter().filter(|&&l| l == index).count();
            let want = self.config.augment.synthetic_total / n + usize::from(i < self.config.augment.synthetic_total % n);
            let count = want.min(real);
            let bundle = GanBundle::load(&Self::class_dir(&gan_dir, class_id)).map_err(|e| Error::MissingArtifact {
                stage: Stage::TrainWgan.name().into(),
                detail: e.to_string(),
            })?;
            for (j, img) in sample_synthetic(&bundle, count, seed.wrapping_add(class_id as u64))?.iter().enumerate() {
                let rel_path = format!("spg/g{class_id}_{j:04}.spg");
                spg::write(&out.join(&rel_path), img)?;
                aug.entries.push(ManifestEntry {
                    id: format!("g{class_id}_{j:04}"),
                    spectrogram: rel_path,
                    mask: None,
                    class_id,
                    noise_level: f64::NAN,
                    seed: seed.wrapping_add(class_id as u64),
                    split: Split::Train,
                    synthetic: true,
                });
            }
            per_class.insert(class_id, count);
        }
        for e in &mut aug.entries {
            if e.noise_level.is_nan() {
                e.noise_level = m.schedule.noise_level;
            }
        }
        aug.save(out)?;
        let augmented = aug.load_split(out, Split::Train)?;
        let net = self.fit_classifier(&augmented, &test, &m, Stage::Augment)?;
        net.save(&out.join(CLASSIFIER_FILE))?;
        let base = self.load_network(Stage::TrainCnn, CLASSIFIER_FILE)?;
        let base_acc = accuracy(&base, &test)?;
        let aug_acc = accuracy(&net, &test)?;
        write_json(
            &out.join("metrics.json"),
            &AugmentMetrics {
                synthetic_per_class: per_class,
                base_test_accuracy: base_acc,
                augmented_test_accuracy: aug_acc,
                delta_points: 100.0 * (aug_acc - base_acc),
            },
        )
    }

    fn cluster(&self, out: &Path) -> Result<()> {
        let (m, dir) = self.manifest()?;
        let net = self.classifier()?;
        let train = m.load_split(&dir, Split::Train)?;
        let layout = m.layout;
        let cc = &self.config.cluster;
        let kcfg = KMeansConfig {
            seed: self.config.stage_seed(Stage::Cluster),
            ..cc.kmeans
        };
        let mut emb = net.embeddings(train.x.view())?;
        normalize_rows(&mut emb);
        let mut models = Vec::new();
        for (index, class) in m.classes.iter().enumerate() {
            let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == index).collect();
            if rows.is_empty() {
                return Err(Error::InvalidParam(format!("class {} has no training images", class.class_id)));
            }
            let points = emb.select(Axis(0), &rows);
            let ids: Vec<String> = rows.iter().map(|&i| train.ids[i].clone()).collect();
            let distinct = distinct_count(&points);
            let k_hi = cc.k_max.min(distinct).max(1);
            let k_lo = cc.k_min.clamp(1, k_hi);
            let (elbow, fitted) = elbow_select(points.view(), k_lo..=k_hi, &kcfg)?;
            let model = fitted
                .into_iter()
                .find(|f| f.k == elbow.best_k)
                .expect("best k was fitted");
            let reps = representatives(&model, points.view(), &ids)?;
            let maps = reps
                .entries
                .iter()
                .map(|r| score_cam(&net, &train.image(rows[r.index], &layout), index, &self.config.extract.cam, &r.sample_id))
                .collect::<Result<Vec<_>>>()?;
            let mut mask = general_mask(&maps)?;
            mask.class = index;
            let cdir = Self::class_dir(out, class.class_id);
            model.save(&cdir.join("model.json"))?;
            write_json(&cdir.join("elbow.json"), &elbow)?;
            write_json(&cdir.join("representatives.json"), &reps)?;
            mask.save(&cdir.join(GENERAL_MASK_FILE))?;
            spg::write_png(&cdir.join("general_mask.png"), &mask.grid)?;
            models.push((cdir, model));
        }
        if let Some(ae_cfg) = cc.autoencoder {
            let cfg = AutoencoderConfig {
                train: TrainConfig {
                    seed: self.config.stage_seed(Stage::Cluster).wrapping_add(1),
                    ..ae_cfg.train
                },
                ..ae_cfg
            };
            let emb_dim = emb.ncols();
            let spec = upsampler_spec(emb_dim, layout.rows, layout.cols, cc.decoder_channels)?;
            let ae = train_autoencoder(&train, &net, spec, &cfg)?;
            ae.decoder.save(&out.join("decoder.nnp"))?;
            for (index, (cdir, model)) in models.iter().enumerate() {
                let mut centroids: Array2<f64> = model.centroid_matrix();
                if cfg.normalize_embedding {
                    normalize_rows(&mut centroids);
                }
                let mask = ae_centroid_mask(centroids.view(), &ae.decoder, &net, index, &self.config.extract.cam)?;
                mask.save(&cdir.join(AE_MASK_FILE))?;
                spg::write_png(&cdir.join("ae_general_mask.png"), &mask.grid)?;
                let decoded = ae.decode(centroids.view())?;
                let first = decoded.row(0).to_owned().into_shape_with_order((layout.rows, layout.cols)).unwrap();
                spg::write_png(&cdir.join("ae_centroid_0.png"), &first)?;
            }
        }
        Ok(())
    }

    fn extract(&self, out: &Path, input: Option<&Path>) -> Result<()> {
        let net = self.classifier()?;
        let general = self.general_masks()?;
        let cfg = &self.config.extract;
        let mut records = Vec::new();
        let mut run = |image: &Array2<f64>, id: &str, truth: Option<usize>| -> Result<()> {
            let ex = extract_with(&net, image, &general, cfg, Approach::Direct, id)?;
            ex.signature.save(out, id)?;
            spg::write_png(&out.join(format!("{id}_mask.png")), &ex.binary.to_grid())?;
            spg::write_png(&out.join(format!("{id}_cam.png")), &ex.fused.grid)?;
            records.push(ExtractRecord {
                id: id.to_string(),
                predicted_class: ex.predicted,
                true_class: truth,
                retained_cells: ex.binary.count(),
            });
            Ok(())
        };
        match input {
            Some(path) => {
                let image = spg::read(path)?;
                let id = path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
                run(&image, &id, None)?;
            }
            None => {
                let (m, dir) = self.manifest()?;
                let test = m.load_split(&dir, Split::Test)?;
                for i in 0..test.len() {
                    run(&test.image(i, &m.layout), &test.ids[i], Some(test.labels[i]))?;
                }
            }
        }
        write_json(&out.join("summary.json"), &records)
    }

    fn sweep_inputs<'a>(
        &self,
        net: &'a Network,
        images: &'a [Array2<f64>],
        test: &'a Dataset,
        gt: &'a [Array2<f64>],
        general: &'a BTreeMap<usize, GeneralMask>,
        ae: Option<&'a BTreeMap<usize, GeneralMask>>,
    ) -> SweepInputs<'a> {
        SweepInputs {
            classifier: net,
            images,
            labels: &test.labels,
            ids: &test.ids,
            ground_truth: gt,
            general,
            ae_general: ae,
            cam: self.config.extract.cam,
        }
    }

    fn sweep(&self, out: &Path) -> Result<()> {
        let (m, dir) = self.manifest()?;
        let test = m.load_split(&dir, Split::Test)?;
        let images: Vec<Array2<f64>> = (0..test.len()).map(|i| test.image(i, &m.layout)).collect();
        let gt = m.load_class_masks(&dir)?;
        let net = self.classifier()?;
        let general = self.general_masks()?;
        let ae = self.ae_general_masks()?;
        let inputs = self.sweep_inputs(&net, &images, &test, &gt, &general, ae.as_ref());
        let corpus_hash = corpus_digest(&m, &dir)?;
        let report = run_sweep(&inputs, &self.config.sweep, &corpus_hash)?;
        report.save(out)
    }

    pub fn sweep_report(&self) -> Result<SweepReport> {
        read_json(&self.dir(Stage::Sweep).join("sweep.json"), Stage::Sweep)
    }

    fn report(&self, out: &Path) -> Result<()> {
        let (m, dir) = self.manifest()?;
        let sweep = self.sweep_report()?;
        let cnn: ClassifierMetrics = read_json(&self.dir(Stage::TrainCnn).join("metrics.json"), Stage::TrainCnn)?;
        let aug: AugmentMetrics = read_json(&self.dir(Stage::Augment).join("metrics.json"), Stage::Augment)?;
        let gans: Vec<GanSummary> = read_json(&self.dir(Stage::TrainWgan).join("summary.json"), Stage::TrainWgan)?;
        let mut s = String::new();
        let _ = writeln!(s, "# Signature extraction report\n");
        let _ = writeln!(s, "Corpus: {} classes, {} images, seed {}.\n", m.num_classes(), m.entries.len(), m.seed);
        let _ = writeln!(
            s,
            "Classifier: train accuracy {:.3}, test accuracy {:.3} after {} epochs.\n",
            cnn.train_accuracy, cnn.test_accuracy, cnn.epochs
        );
        let _ = writeln!(
            s,
            "Augmentation: test accuracy {:.3} -> {:.3} ({:+.1} points) with {:?} synthetic images per class.\n",
            aug.base_test_accuracy, aug.augmented_test_accuracy, aug.delta_points, aug.synthetic_per_class
        );
        let _ = writeln!(s, "| GAN class | probe (last 10) | max critic weight | generator updates |");
        let _ = writeln!(s, "|---|---|---|---|");
        for g in &gans {
            let _ = writeln!(s, "| {} | {:.3} | {:.4} | {} |", g.class_id, g.probe_last10, g.max_critic_abs, g.generator_updates);
        }
        let _ = writeln!(s, "\n| Class | k | representatives |");
        let _ = writeln!(s, "|---|---|---|");
        for class in &m.classes {
            let cdir = Self::class_dir(&self.dir(Stage::Cluster), class.class_id);
            let elbow: crate::clusterer::ElbowResult = read_json(&cdir.join("elbow.json"), Stage::Cluster)?;
            let reps: RepresentativeSet = read_json(&cdir.join("representatives.json"), Stage::Cluster)?;
            let _ = writeln!(s, "| {} | {} | {} |", class.name, elbow.best_k, reps.sample_ids().join(", "));
        }
        let _ = writeln!(s, "\n## Extraction sweep\n\n{}", sweep.to_markdown());
        fs::write(out.join("report.md"), s).map_err(|e| Error::io(out.join("report.md"), e))?;

        // one row per class: image, tonal mask, then each configuration
        let test = m.load_split(&dir, Split::Test)?;
        let images: Vec<Array2<f64>> = (0..test.len()).map(|i| test.image(i, &m.layout)).collect();
        let gt = m.load_class_masks(&dir)?;
        let net = self.classifier()?;
        let general = self.general_masks()?;
        let ae = self.ae_general_masks()?;
        let inputs = self.sweep_inputs(&net, &images, &test, &gt, &general, ae.as_ref());
        let configs: Vec<SweepConfig> = sweep
            .rows
            .iter()
            .map(|r| r.config.clone())
            .filter(|c| c.approach != Approach::AeCentroid || ae.is_some())
            .collect();
        let mut rows = Vec::new();
        for index in 0..m.num_classes() {
            let Some(i) = test.labels.iter().position(|&l| l == index) else {
                continue;
            };
            let mut row = vec![images[i].clone(), gt[index].clone()];
            row.extend(signatures_for(&inputs, i, &configs)?.into_iter().map(|s| s.grid));
            rows.push(row);
        }
        if !rows.is_empty() {
            panel(&rows)?.save(out.join("panel.png"))?;
        }
        Ok(())
    }
}

const GENERAL_MASK_FILE: &str = "general_mask.spg";
const AE_MASK_FILE: &str = "ae_general_mask.spg";

/// Hash over the manifest and every file it references.
pub fn corpus_digest(m: &DatasetManifest, dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let manifest = dir.join(MANIFEST_FILE);
    h.update(fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    let files = m
        .entries
        .iter()
        .flat_map(|e| std::iter::once(&e.spectrogram).chain(e.mask.as_ref()))
        .chain(m.class_masks.values());
    for rel in files {
        let path = dir.join(rel);
        h.update(rel.as_bytes());
        h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn distinct_count(points: &Array2<f64>) -> usize {
    points
        .outer_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<std::collections::HashSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("denoise".parse::<Stage>().is_err());
    }

    #[test]
    fn config_round_trips_and_hashes_chain() {
        let cfg = PipelineConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let p = Pipeline::new(cfg.clone(), "/nonexistent");
        let mut changed = cfg;
        changed.corpus.schedule.noise_level = 0.4;
        let q = Pipeline::new(changed, "/nonexistent");
        // a corpus change invalidates everything downstream
        for s in Stage::ALL {
            assert_ne!(p.config_hash(s).unwrap(), q.config_hash(s).unwrap(), "{s}");
        }
    }

    #[test]
    fn threshold_override_collapses_the_sweep() {
        let mut cfg = PipelineConfig::default();
        cfg.override_threshold(0.6);
        assert_eq!(cfg.extract.threshold, 0.6);
        assert_eq!(cfg.sweep.len(), 4);
        assert!(cfg.sweep.iter().all(|c| c.threshold == 0.6));
    }

    #[test]
    fn stages_refuse_to_run_without_upstream() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(PipelineConfig::default(), dir.path());
        match p.run_stage(Stage::TrainCnn, &StageOptions::default()) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "synth"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Extraction quality against known tonal masks, and the threshold/approach
//! sweep over a test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::GrayImage;
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskforge::{
    binarize, combine, extract_signature, reverse_from_masks, Approach, FusionMode, GeneralMask, Provenance, SignatureImage,
};
use crate::nnkit::Network;
use crate::scorecam::{predict, score_cam, CamConfig, SaliencyMap};
use crate::spg;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub removed_noise_pct: f64,
    pub overwritten_tones_pct: f64,
    pub intersecting_regions: usize,
}

fn tones(gt: ArrayView2<f64>) -> Array2<bool> {
    gt.mapv(|v| v >= 0.5)
}

fn check(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Percentage of cells outside the tonal mask that were whitened.
pub fn removed_noise_pct(retained: &Array2<bool>, gt: ArrayView2<f64>) -> Result<f64> {
    check(retained.dim(), gt.dim())?;
    let gt = tones(gt);
    let (mut noise, mut removed) = (0usize, 0usize);
    Zip::from(retained).and(&gt).for_each(|&keep, &tone| {
        if !tone {
            noise += 1;
            removed += usize::from(!keep);
        }
    });
    if noise == 0 {
        return Err(Error::UndefinedMetric("removed noise: mask covers every cell".into()));
    }
    Ok(100.0 * removed as f64 / noise as f64)
}

/// Percentage of tonal-mask cells that were whitened.
pub fn overwritten_tones_pct(retained: &Array2<bool>, gt: ArrayView2<f64>) -> Result<f64> {
    check(retained.dim(), gt.dim())?;
    let gt = tones(gt);
    let (mut total, mut lost) = (0usize, 0usize);
    Zip::from(retained).and(&gt).for_each(|&keep, &tone| {
        if tone {
            total += 1;
            lost += usize::from(!keep);
        }
    });
    if total == 0 {
        return Err(Error::UndefinedMetric("overwritten tones: empty tonal mask".into()));
    }
    Ok(100.0 * lost as f64 / total as f64)
}

/// 4-connected components of `cells`, as a label grid (0 = background) and
/// the component count.
pub fn components(cells: &Array2<bool>) -> (Array2<usize>, usize) {
    let (rows, cols) = cells.dim();
    let mut label = Array2::zeros((rows, cols));
    let mut next = 0;
    let mut stack = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !cells[[r, c]] || label[[r, c]] != 0 {
                continue;
            }
            next += 1;
            label[[r, c]] = next;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                let mut visit = |yy: usize, xx: usize| {
                    if cells[[yy, xx]] && label[[yy, xx]] == 0 {
                        label[[yy, xx]] = next;
                        stack.push((yy, xx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < rows {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < cols {
                    visit(y, x + 1);
                }
            }
        }
    }
    (label, next)
}

/// Number of retained connected regions touching any other class's tonal
/// mask.
pub fn intersecting_regions(retained: &Array2<bool>, other_gts: &[ArrayView2<f64>]) -> Result<usize> {
    let (label, n) = components(retained);
    let mut hit = vec![false; n + 1];
    for gt in other_gts {
        check(retained.dim(), gt.dim())?;
        Zip::from(&label).and(gt).for_each(|&l, &g| {
            if l != 0 && g >= 0.5 {
                hit[l] = true;
            }
        });
    }
    Ok(hit.iter().filter(|&&h| h).count())
}

pub fn evaluate(signature: &SignatureImage, gt: ArrayView2<f64>, other_gts: &[ArrayView2<f64>]) -> Result<ExtractionMetrics> {
    Ok(ExtractionMetrics {
        removed_noise_pct: removed_noise_pct(&signature.retained, gt)?,
        overwritten_tones_pct: overwritten_tones_pct(&signature.retained, gt)?,
        intersecting_regions: intersecting_regions(&signature.retained, other_gts)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub approach: Approach,
    pub threshold: f64,
    pub fusion: FusionMode,
}

impl SweepConfig {
    pub fn label(&self) -> String {
        let name = match self.approach {
            Approach::Direct => "direct",
            Approach::Reverse => "reverse",
            Approach::AeCentroid => "ae-centroid",
        };
        let fusion = match self.fusion {
            FusionMode::Max => "max",
            FusionMode::AddClip => "add",
        };
        format!("{name}@{:.2}/{fusion}", self.threshold)
    }

    /// Direct at 0.65/0.75/0.85, the autoencoder baseline and reverse
    /// extraction at 0.75, all with max fusion.
    pub fn standard() -> Vec<SweepConfig> {
        Self::standard_with(FusionMode::Max)
    }

    pub fn standard_with(fusion: FusionMode) -> Vec<SweepConfig> {
        let at = |approach, threshold| SweepConfig {
            approach,
            threshold,
            fusion,
        };
        vec![
            at(Approach::Direct, 0.65),
            at(Approach::Direct, 0.75),
            at(Approach::Direct, 0.85),
            at(Approach::AeCentroid, 0.75),
            at(Approach::Reverse, 0.75),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: SweepConfig,
    pub label: String,
    pub images: usize,
    pub removed_noise_pct: f64,
    pub overwritten_tones_pct: f64,
    /// Mean over images.
    pub intersecting_regions: f64,
    pub intersecting_regions_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub corpus_hash: String,
    pub classifier_accuracy: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, approach: Approach, threshold: f64, fusion: FusionMode) -> Option<&SweepRow> {
        self.rows.iter().find(|r| {
            r.config.approach == approach && r.config.fusion == fusion && (r.config.threshold - threshold).abs() < 1e-9
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Approach | Threshold | Fusion | Removed Noise | Overwritten Tones | Intersecting Tonal Regions |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &self.rows {
            let name = match r.config.approach {
                Approach::Direct => "Denoiser",
                Approach::Reverse => "Reverse extractor",
                Approach::AeCentroid => "Auto-encoder centroid mask",
            };
            let fusion = match r.config.fusion {
                FusionMode::Max => "max",
                FusionMode::AddClip => "add-clip",
            };
            let _ = writeln!(
                s,
                "| {name} | {:.2} | {fusion} | {:.1}% | {:.1}% | {:.2} |",
                r.config.threshold, r.removed_noise_pct, r.overwritten_tones_pct, r.intersecting_regions
            );
        }
        let _ = writeln!(s, "\n{} test images; classifier accuracy {:.3}; corpus {}", self.rows.first().map_or(0, |r| r.images), self.classifier_accuracy, self.corpus_hash);
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("sweep.json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let md = dir.join("sweep.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

/// Everything the sweep reads besides the configurations.
pub struct SweepInputs<'a> {
    pub classifier: &'a Network,
    /// Test images as grids, with their true class index and sample id.
    pub images: &'a [Array2<f64>],
    pub labels: &'a [usize],
    pub ids: &'a [String],
    /// Tonal mask per class index.
    pub ground_truth: &'a [Array2<f64>],
    /// Representative-based general mask per class index.
    pub general: &'a BTreeMap<usize, GeneralMask>,
    /// Decoded-centroid general mask per class index, if trained.
    pub ae_general: Option<&'a BTreeMap<usize, GeneralMask>>,
    pub cam: CamConfig,
}

/// Signatures for one image under every configuration, in order.
pub fn signatures_for(inputs: &SweepInputs<'_>, index: usize, configs: &[SweepConfig]) -> Result<Vec<SignatureImage>> {
    let image = &inputs.images[index];
    let source = &inputs.ids[index];
    let net = inputs.classifier;
    let classes = net.output_shape().len();
    let predicted = predict(net, image)?;
    let mut cams: Vec<Option<SaliencyMap>> = vec![None; classes];
    let mut cam_for = |c: usize| -> Result<SaliencyMap> {
        if cams[c].is_none() {
            cams[c] = Some(score_cam(net, image, c, &inputs.cam, source)?);
        }
        Ok(cams[c].clone().unwrap())
    };
    let lookup = |set: &BTreeMap<usize, GeneralMask>, c: usize, what: &str| -> Result<GeneralMask> {
        set.get(&c).cloned().ok_or_else(|| Error::MissingArtifact {
            stage: "cluster".into(),
            detail: format!("{what} general mask for class {c}"),
        })
    };
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        let provenance = |contributors: Vec<String>| Provenance {
            approach: cfg.approach.clone(),
            threshold: cfg.threshold,
            fusion: cfg.fusion,
            contributors,
            source: source.clone(),
        };
        let sig = match cfg.approach {
            Approach::Direct | Approach::AeCentroid => {
                let set = if cfg.approach == Approach::Direct {
                    inputs.general
                } else {
                    inputs.ae_general.ok_or_else(|| Error::MissingArtifact {
                        stage: "cluster".into(),
                        detail: "autoencoder-centroid general masks".into(),
                    })?
                };
                let g = lookup(set, predicted, "class")?;
                let fused = combine(&g, &cam_for(predicted)?, cfg.fusion)?;
                let mask = binarize(&fused.grid, cfg.threshold)?;
                extract_signature(image, &mask, predicted, provenance(g.contributors.clone()))?
            }
            Approach::Reverse => {
                let mut masks = Vec::new();
                let mut contributors = Vec::new();
                for c in (0..classes).filter(|&c| c != predicted) {
                    let g = lookup(inputs.general, c, "class")?;
                    let fused = combine(&g, &cam_for(c)?, cfg.fusion)?;
                    masks.push(binarize(&fused.grid, cfg.threshold)?);
                    contributors.extend(g.contributors.iter().cloned());
                }
                reverse_from_masks(image, &masks, predicted, provenance(contributors))?
            }
        };
        out.push(sig);
    }
    Ok(out)
}

/// Mean metrics per configuration over every test image, scored against
/// the image's true-class tonal mask.
pub fn run_sweep(inputs: &SweepInputs<'_>, configs: &[SweepConfig], corpus_hash: &str) -> Result<SweepReport> {
    let n = inputs.images.len();
    if inputs.labels.len() != n || inputs.ids.len() != n {
        return Err(Error::shape(n, inputs.labels.len().min(inputs.ids.len())));
    }
    if n == 0 {
        return Err(Error::InvalidParam("sweep needs at least one test image".into()));
    }
    let mut sums = vec![(0.0, 0.0, 0usize); configs.len()];
    let mut correct = 0;
    for i in 0..n {
        let label = inputs.labels[i];
        let gt = inputs
            .ground_truth
            .get(label)
            .ok_or_else(|| Error::InvalidParam(format!("no tonal mask for class index {label}")))?;
        let others: Vec<ArrayView2<f64>> = inputs
            .ground_truth
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != label)
            .map(|(_, g)| g.view())
            .collect();
        let sigs = signatures_for(inputs, i, configs)?;
        correct += usize::from(sigs.first().is_some_and(|s| s.class == label));
        for (acc, sig) in sums.iter_mut().zip(&sigs) {
            let m = evaluate(sig, gt.view(), &others)?;
            acc.0 += m.removed_noise_pct;
            acc.1 += m.overwritten_tones_pct;
            acc.2 += m.intersecting_regions;
        }
    }
    let rows = configs
        .iter()
        .zip(&sums)
        .map(|(cfg, &(removed, over, regions))| SweepRow {
            label: cfg.label(),
            config: cfg.clone(),
            images: n,
            removed_noise_pct: removed / n as f64,
            overwritten_tones_pct: over / n as f64,
            intersecting_regions: regions as f64 / n as f64,
            intersecting_regions_total: regions,
        })
        .collect();
    Ok(SweepReport {
        corpus_hash: corpus_hash.to_string(),
        classifier_accuracy: correct as f64 / n as f64,
        rows,
    })
}

/// Tiles grids into one grayscale image: one row per entry of `rows`,
/// separated by a 2-pixel mid-gray gutter.
pub fn panel(rows: &[Vec<Array2<f64>>]) -> Result<GrayImage> {
    const GAP: u32 = 2;
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidParam("empty panel".into()))?;
    let (h, w) = (first.nrows() as u32, first.ncols() as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let width = cols * w + (cols.saturating_sub(1)) * GAP;
    let height = rows.len() as u32 * h + (rows.len() as u32).saturating_sub(1) * GAP;
    let mut img = GrayImage::from_pixel(width, height, image::Luma([128]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, grid) in row.iter().enumerate() {
            if grid.dim() != first.dim() {
                return Err(Error::shape(format!("{:?}", first.dim()), format!("{:?}", grid.dim())));
            }
            let tile = spg::to_gray(grid);
            image::imageops::replace(&mut img, &tile, (ci as u32 * (w + GAP)) as i64, (ri as u32 * (h + GAP)) as i64);
        }
    }
    Ok(img)
}

//! Mask assembly and signature extraction: class-level general masks, fusion
//! with an image's own saliency, thresholding, and whitening of everything
//! outside the kept region.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::Network;
use crate::scorecam::{score_cam, CamConfig, SaliencyMap};
use crate::spg;

/// Value written to removed cells.
pub const WHITE: f64 = 1.0;

pub const DEFAULT_THRESHOLD: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralMask {
    pub grid: Array2<f64>,
    pub class: usize,
    pub contributors: Vec<String>,
}

impl GeneralMask {
    pub fn save(&self, path: &Path) -> Result<()> {
        spg::write(path, &self.grid)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Max,
    AddClip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub grid: Array2<bool>,
    pub threshold: f64,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn to_grid(&self) -> Array2<f64> {
        self.grid.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Direct,
    Reverse,
    AeCentroid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub approach: Approach,
    pub threshold: f64,
    pub fusion: FusionMode,
    /// Sample ids behind the general mask(s) used.
    pub contributors: Vec<String>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignatureImage {
    pub grid: Array2<f64>,
    /// `true` where the input image was kept.
    pub retained: Array2<bool>,
    pub class: usize,
    pub provenance: Provenance,
}

impl SignatureImage {
    /// Writes `<stem>.spg`, `<stem>.png` and the `<stem>.json` provenance
    /// sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        spg::write(&dir.join(format!("{stem}.spg")), &self.grid)?;
        spg::write_png(&dir.join(format!("{stem}.png")), &self.grid)?;
        let path = dir.join(format!("{stem}.json"));
        #[derive(Serialize)]
        struct Sidecar<'a> {
            class: usize,
            retained_cells: usize,
            #[serde(flatten)]
            provenance: &'a Provenance,
        }
        let sidecar = Sidecar {
            class: self.class,
            retained_cells: self.retained.iter().filter(|&&b| b).count(),
            provenance: &self.provenance,
        };
        fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn whitened(&self) -> Array2<bool> {
        self.retained.mapv(|b| !b)
    }
}

fn same_dim(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Cell-wise mean of one or more saliency maps.
pub fn general_mask(maps: &[SaliencyMap]) -> Result<GeneralMask> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidParam("general mask needs at least one map".into()))?;
    let mut acc = Array2::<f64>::zeros(first.grid.dim());
    for m in maps {
        same_dim(first.grid.dim(), m.grid.dim())?;
        acc += &m.grid;
    }
    acc /= maps.len() as f64;
    Ok(GeneralMask {
        grid: acc,
        class: first.class,
        contributors: maps.iter().map(|m| m.source.clone()).collect(),
    })
}

/// Overlays a class's general mask on an image-specific saliency map.
pub fn combine(general: &GeneralMask, specific: &SaliencyMap, mode: FusionMode) -> Result<SaliencyMap> {
    same_dim(general.grid.dim(), specific.grid.dim())?;
    let grid = Zip::from(&general.grid).and(&specific.grid).map_collect(|&g, &s| match mode {
        FusionMode::Max => g.max(s),
        FusionMode::AddClip => (g + s).min(1.0),
    });
    Ok(SaliencyMap {
        grid,
        class: specific.class,
        source: specific.source.clone(),
    })
}

/// Cells at or above `threshold` become 1.
pub fn binarize(mask: &Array2<f64>, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParam(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(BinaryMask {
        grid: mask.mapv(|v| v >= threshold),
        threshold,
    })
}

/// Keeps `image` where `keep` is true and whitens the rest.
fn apply(image: ArrayView2<f64>, keep: &Array2<bool>) -> Array2<f64> {
    Zip::from(image).and(keep).map_collect(|&v, &k| if k { v } else { WHITE })
}

/// Keeps the image under the mask and whitens every other cell.
pub fn extract_signature(image: &Array2<f64>, mask: &BinaryMask, class: usize, provenance: Provenance) -> Result<SignatureImage> {
    same_dim(image.dim(), mask.grid.dim())?;
    Ok(SignatureImage {
        grid: apply(image.view(), &mask.grid),
        retained: mask.grid.clone(),
        class,
        provenance,
    })
}

/// Whitens the union of the given masks and keeps everything else.
pub fn reverse_from_masks(image: &Array2<f64>, others: &[BinaryMask], class: usize, provenance: Provenance) -> Result<SignatureImage> {
    let mut keep = Array2::from_elem(image.dim(), true);
    for m in others {
        same_dim(image.dim(), m.grid.dim())?;
        Zip::from(&mut keep).and(&m.grid).for_each(|k, &o| *k &= !o);
    }
    Ok(SignatureImage {
        grid: apply(image.view(), &keep),
        retained: keep,
        class,
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub threshold: f64,
    pub fusion: FusionMode,
    pub cam: CamConfig,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            fusion: FusionMode::Max,
            cam: CamConfig::default(),
        }
    }
}

/// Intermediate products of one direct extraction.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub predicted: usize,
    pub specific: SaliencyMap,
    pub fused: SaliencyMap,
    pub binary: BinaryMask,
    pub signature: SignatureImage,
}

fn general_for(general: &BTreeMap<usize, GeneralMask>, class: usize) -> Result<&GeneralMask> {
    general
        .get(&class)
        .ok_or_else(|| Error::InvalidParam(format!("no general mask for class {class}")))
}

/// Image CAM for `class`, fused with that class's general mask and
/// binarised.
fn class_mask(
    net: &Network,
    image: &Array2<f64>,
    general: &GeneralMask,
    class: usize,
    config: &ExtractConfig,
    source: &str,
) -> Result<(SaliencyMap, SaliencyMap, BinaryMask)> {
    let specific = score_cam(net, image, class, &config.cam, source)?;
    let fused = combine(general, &specific, config.fusion)?;
    let binary = binarize(&fused.grid, config.threshold)?;
    Ok((specific, fused, binary))
}

/// Predict, build the fused mask for the predicted class against the
/// supplied general masks, binarise and extract.
pub fn extract_with(
    net: &Network,
    image: &Array2<f64>,
    general: &BTreeMap<usize, GeneralMask>,
    config: &ExtractConfig,
    approach: Approach,
    source: &str,
) -> Result<Extraction> {
    let predicted = crate::scorecam::predict(net, image)?;
    let g = general_for(general, predicted)?;
    let (specific, fused, binary) = class_mask(net, image, g, predicted, config, source)?;
    let signature = extract_signature(
        image,
        &binary,
        predicted,
        Provenance {
            approach,
            threshold: config.threshold,
            fusion: config.fusion,
            contributors: g.contributors.clone(),
            source: source.to_string(),
        },
    )?;
    Ok(Extraction {
        predicted,
        specific,
        fused,
        binary,
        signature,
    })
}

/// Whitens the fused, binarised masks of every class except the predicted
/// one.
pub fn reverse_extract(
    net: &Network,
    image: &Array2<f64>,
    general: &BTreeMap<usize, GeneralMask>,
    config: &ExtractConfig,
    source: &str,
) -> Result<SignatureImage> {
    let classes = net.output_shape().len();
    if classes < 2 {
        return Err(Error::InvalidParam("reverse extraction needs at least two classes".into()));
    }
    let predicted = crate::scorecam::predict(net, image)?;
    let mut masks = Vec::with_capacity(classes - 1);
    let mut contributors = Vec::new();
    for c in (0..classes).filter(|&c| c != predicted) {
        let g = general_for(general, c)?;
        masks.push(class_mask(net, image, g, c, config, source)?.2);
        contributors.extend(g.contributors.iter().cloned());
    }
    reverse_from_masks(
        image,
        &masks,
        predicted,
        Provenance {
            approach: Approach::Reverse,
            threshold: config.threshold,
            fusion: config.fusion,
            contributors,
            source: source.to_string(),
        },
    )
}

/// General mask built from decoded cluster centroids: each centroid row is
/// decoded to an image, explained with Score-CAM for `class`, and the maps
/// are averaged.
pub fn ae_centroid_mask(
    centroids: ArrayView2<f64>,
    decoder: &Network,
    classifier: &Network,
    class: usize,
    cam: &CamConfig,
) -> Result<GeneralMask> {
    if decoder.input_shape().len() != centroids.ncols() {
        return Err(Error::shape(decoder.input_shape(), centroids.ncols()));
    }
    let image = classifier.input_shape();
    if decoder.output_shape().len() != image.len() {
        return Err(Error::shape(image, decoder.output_shape()));
    }
    let decoded = decoder.predict(centroids)?;
    let mut maps = Vec::with_capacity(decoded.nrows());
    for (i, row) in decoded.outer_iter().enumerate() {
        let img = row
            .to_owned()
            .into_shape_with_order((image.height, image.width))
            .map_err(|e| Error::InvalidParam(e.to_string()))?;
        maps.push(score_cam(classifier, &img, class, cam, &format!("centroid_{i}"))?);
    }
    let mut mask = general_mask(&maps)?;
    mask.class = class;
    Ok(mask)
}

//! Gallery quality measures: shape diversity over object masks, object
//! faithfulness through an image embedding, and image preservation through a
//! perceptual distance. The models behind masks, embeddings and distances are
//! pluggable.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Binary object mask of `word` in an image, row-major at image resolution.
pub trait MaskProvider: Send + Sync {
    fn object_mask(&self, image: &RgbImage, word: &str) -> Result<Vec<bool>>;
}

/// Distance between two images of the same size; 0 for identical images.
pub trait PerceptualProvider: Send + Sync {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

pub trait ImageEmbeddingProvider: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "masks of {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// One minus the mean IoU over all unordered pairs of distinct masks.
pub fn diversity(masks: &[Vec<bool>]) -> Result<f64> {
    if masks.len() < 2 {
        return Err(Error::TooFewMasks(masks.len()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            sum += iou(&masks[i], &masks[j])?;
            pairs += 1;
        }
    }
    Ok(1.0 - sum / pairs as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Provider("zero embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of each variation's embedding to the mean embedding of the class
/// references, averaged over variations.
pub fn faithfulness(
    variations: &[RgbImage],
    references: &[RgbImage],
    provider: &dyn ImageEmbeddingProvider,
) -> Result<f64> {
    Ok(faithfulness_each(variations, references, provider)?
        .iter()
        .sum::<f64>()
        / variations.len() as f64)
}

/// The per-variation cosines [`faithfulness`] averages.
pub fn faithfulness_each(
    variations: &[RgbImage],
    references: &[RgbImage],
    provider: &dyn ImageEmbeddingProvider,
) -> Result<Vec<f64>> {
    if variations.is_empty() || references.is_empty() {
        return Err(Error::InvalidValue(
            "faithfulness needs variations and references".into(),
        ));
    }
    let refs = references
        .iter()
        .map(|r| provider.embed_image(r))
        .collect::<Result<Vec<_>>>()?;
    let dim = refs[0].len();
    if refs.iter().any(|e| e.len() != dim) {
        return Err(Error::Provider(
            "reference embeddings differ in dimension".into(),
        ));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|d| refs.iter().map(|e| e[d]).sum::<f64>() / refs.len() as f64)
        .collect();
    variations
        .iter()
        .map(|v| cosine(&provider.embed_image(v)?, &mean))
        .collect()
}

pub fn preservation(
    original: &RgbImage,
    variation: &RgbImage,
    provider: &dyn PerceptualProvider,
) -> Result<f64> {
    if !original.same_size(variation) {
        return Err(Error::ShapeMismatch(format!(
            "images of {}x{} and {}x{}",
            original.width(),
            original.height(),
            variation.width(),
            variation.height()
        )));
    }
    provider.distance(original, variation)
}

/// Mean over pixels of the channel-averaged absolute difference.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanAbsoluteDifference;

impl PerceptualProvider for MeanAbsoluteDifference {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if !a.same_size(b) {
            return Err(Error::ShapeMismatch("images differ in size".into()));
        }
        let pixels = (a.width() * a.height()) as f64;
        let total: f64 = a
            .data()
            .chunks_exact(3)
            .zip(b.data().chunks_exact(3))
            .map(|(p, q)| {
                p.iter()
                    .zip(q)
                    .map(|(x, y)| f64::from((x - y).abs()))
                    .sum::<f64>()
                    / 3.0
            })
            .sum();
        Ok(total / pixels)
    }
}

pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    crate::trace::hex(&h.finalize())
}

/// Embeddings looked up by image content.
#[derive(Clone, Debug, Default)]
pub struct PlantedEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
}

impl PlantedEmbeddings {
    pub fn plant(&mut self, image: &RgbImage, vector: Vec<f64>) {
        self.vectors.insert(image_digest(image), vector);
    }
}

impl ImageEmbeddingProvider for PlantedEmbeddings {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.vectors
            .get(&image_digest(image))
            .cloned()
            .ok_or_else(|| Error::Provider("no embedding planted for this image".into()))
    }
}

/// Per-channel mean and standard deviation of the pixel values.
#[derive(Clone, Copy, Debug, Default)]
pub struct ColorMomentEmbedder;

impl ImageEmbeddingProvider for ColorMomentEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let n = (image.width() * image.height()) as f64;
        let mut out = Vec::with_capacity(6);
        for c in 0..3 {
            let vals = image
                .data()
                .iter()
                .skip(c)
                .step_by(3)
                .map(|&v| f64::from(v));
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            out.push(mean);
            out.push(var.sqrt());
        }
        Ok(out)
    }
}

/// Masks looked up by image content.
#[derive(Clone, Debug, Default)]
pub struct FixedMasks {
    masks: HashMap<String, Vec<bool>>,
}

impl FixedMasks {
    pub fn insert(&mut self, image: &RgbImage, mask: Vec<bool>) {
        self.masks.insert(image_digest(image), mask);
    }
}

impl MaskProvider for FixedMasks {
    fn object_mask(&self, image: &RgbImage, _word: &str) -> Result<Vec<bool>> {
        self.masks
            .get(&image_digest(image))
            .cloned()
            .ok_or_else(|| Error::Provider("no mask known for this image".into()))
    }
}

/// Reads `<stem>.object.png` next to each image; any nonzero pixel is part
/// of the object. Masks produced by an external segmenter can be dropped in
/// under that name.
#[derive(Clone, Debug)]
pub struct MaskFiles {
    pub paths: HashMap<String, PathBuf>,
}

impl MaskFiles {
    pub fn sibling_of(image_path: &Path) -> PathBuf {
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        image_path.with_file_name(format!("{stem}.object.png"))
    }

    pub fn load(path: &Path, width: usize, height: usize) -> Result<Vec<bool>> {
        let img = image::open(path)?.to_luma8();
        if img.width() as usize != width || img.height() as usize != height {
            let resized = image::imageops::resize(
                &img,
                width as u32,
                height as u32,
                image::imageops::FilterType::Nearest,
            );
            return Ok(resized.pixels().map(|p| p.0[0] > 0).collect());
        }
        Ok(img.pixels().map(|p| p.0[0] > 0).collect())
    }
}

impl MaskProvider for MaskFiles {
    fn object_mask(&self, image: &RgbImage, _word: &str) -> Result<Vec<bool>> {
        let path = self
            .paths
            .get(&image_digest(image))
            .ok_or_else(|| Error::Provider("no mask file registered for this image".into()))?;
        Self::load(path, image.width(), image.height())
    }
}

/// One row of a gallery metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub gallery: String,
    pub method: String,
    pub variation: String,
    pub proxy: String,
    pub preservation: f64,
    pub faithfulness: Option<f64>,
    /// Gallery-level value, repeated on each of its rows.
    pub diversity: Option<f64>,
}

pub fn write_csv(rows: &[MetricsRow], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(r: impl std::io::Read) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Gallery-level means of a report, one entry per (gallery, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GallerySummary {
    pub gallery: String,
    pub method: String,
    pub diversity: Option<f64>,
    pub faithfulness: Option<f64>,
    pub preservation: f64,
    pub variations: usize,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<GallerySummary> {
    let mut groups: Vec<((String, String), Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        let key = (r.gallery.clone(), r.method.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((gallery, method), g)| {
            let n = g.len() as f64;
            let faith: Vec<f64> = g.iter().filter_map(|r| r.faithfulness).collect();
            GallerySummary {
                gallery,
                method,
                diversity: g[0].diversity,
                faithfulness: (!faith.is_empty())
                    .then(|| faith.iter().sum::<f64>() / faith.len() as f64),
                preservation: g.iter().map(|r| r.preservation).sum::<f64>() / n,
                variations: g.len(),
            }
        })
        .collect()
}

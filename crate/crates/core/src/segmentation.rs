//! Attention-guided segmentation of a denoising trace.
//!
//! Self-attention maps at one resolution are averaged over the run, each
//! pixel's attention row is used as its feature vector for K-Means, and the
//! resulting segments are named after the prompt noun whose aggregated
//! cross-attention covers them best.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::grid::resample_nearest;
use crate::kmeans::{kmeans, KMeansOptions};
use crate::prompt::PromptSpec;
use crate::trace::DenoisingTrace;

pub const DEFAULT_CLUSTERS: usize = 5;
pub const DEFAULT_SIGMA: f64 = 0.3;
pub const SEGMENTATION_RESOLUTION: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Background,
    /// Token position of a prompt noun.
    Noun(usize),
}

/// Cluster-id grid, optionally with a label per cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSegmentation")]
pub struct SegmentationMap {
    side: usize,
    clusters: usize,
    grid: Vec<usize>,
    labels: Option<Vec<SegmentLabel>>,
    /// Nouns that competed for the labels.
    nouns: Vec<usize>,
}

#[derive(Deserialize)]
struct RawSegmentation {
    side: usize,
    clusters: usize,
    grid: Vec<usize>,
    labels: Option<Vec<SegmentLabel>>,
    #[serde(default)]
    nouns: Vec<usize>,
}

impl TryFrom<RawSegmentation> for SegmentationMap {
    type Error = Error;

    fn try_from(r: RawSegmentation) -> Result<Self> {
        let map = SegmentationMap::new(r.side, r.clusters, r.grid)?;
        match r.labels {
            Some(labels) => map.with_labels(labels, r.nouns),
            None => Ok(map),
        }
    }
}

impl SegmentationMap {
    pub fn new(side: usize, clusters: usize, grid: Vec<usize>) -> Result<Self> {
        if grid.len() != side * side {
            return Err(Error::ShapeMismatch(format!(
                "segmentation grid of side {side} cannot hold {} labels",
                grid.len()
            )));
        }
        if let Some(&bad) = grid.iter().find(|&&c| c >= clusters) {
            return Err(Error::InvalidValue(format!(
                "cluster id {bad} not below {clusters}"
            )));
        }
        Ok(Self {
            side,
            clusters,
            grid,
            labels: None,
            nouns: vec![],
        })
    }

    pub fn with_labels(mut self, labels: Vec<SegmentLabel>, nouns: Vec<usize>) -> Result<Self> {
        if labels.len() != self.clusters {
            return Err(Error::InvalidValue(format!(
                "{} labels for {} clusters",
                labels.len(),
                self.clusters
            )));
        }
        if let Some(SegmentLabel::Noun(p)) = labels
            .iter()
            .find(|l| matches!(l, SegmentLabel::Noun(p) if !nouns.contains(p)))
        {
            return Err(Error::UnknownNoun(*p));
        }
        self.labels = Some(labels);
        self.nouns = nouns;
        Ok(self)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn labels(&self) -> Option<&[SegmentLabel]> {
        self.labels.as_deref()
    }

    pub fn nouns(&self) -> &[usize] {
        &self.nouns
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn segment_mask(&self, cluster: usize) -> Vec<bool> {
        self.grid.iter().map(|&c| c == cluster).collect()
    }

    /// Label of every pixel; fails on an unlabeled map.
    pub fn pixel_labels(&self) -> Result<Vec<SegmentLabel>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidValue("segmentation has not been labeled".into()))?;
        Ok(self.grid.iter().map(|&c| labels[c]).collect())
    }

    /// Indexed-color PNG, one palette entry per cluster, magnified `scale` times.
    /// Labeled maps color background segments black.
    pub fn save_png(&self, path: &Path, scale: usize) -> Result<()> {
        let scale = scale.max(1);
        let size = self.side * scale;
        let palette: Vec<u8> = (0..self.clusters).flat_map(|c| self.color(c)).collect();
        let file = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(file, size as u32, size as u32);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(palette);
        let mut writer = encoder.write_header().map_err(png_error)?;
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                data.push(self.grid[(y / scale) * self.side + x / scale] as u8);
            }
        }
        writer.write_image_data(&data).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
        Ok(())
    }

    /// Legend naming each cluster's label and palette color.
    pub fn legend(&self, prompt: Option<&PromptSpec>) -> serde_json::Value {
        let entries: Vec<_> = (0..self.clusters)
            .map(|c| {
                let label = self.labels.as_ref().map(|l| l[c]);
                let name = match label {
                    None => serde_json::Value::Null,
                    Some(SegmentLabel::Background) => "background".into(),
                    Some(SegmentLabel::Noun(p)) => prompt
                        .and_then(|pr| pr.noun_slot(p).and_then(|s| pr.slot_word(s)))
                        .unwrap_or_else(|| format!("token {p}"))
                        .into(),
                };
                serde_json::json!({
                    "cluster": c,
                    "label": label,
                    "name": name,
                    "color": self.color(c),
                    "pixels": self.grid.iter().filter(|&&g| g == c).count(),
                })
            })
            .collect();
        serde_json::json!({ "side": self.side, "segments": entries })
    }

    fn color(&self, cluster: usize) -> [u8; 3] {
        if let Some(SegmentLabel::Background) = self.labels.as_ref().map(|l| l[cluster]) {
            return [0, 0, 0];
        }
        PALETTE[cluster % PALETTE.len()]
    }
}

fn png_error(e: png::EncodingError) -> Error {
    Error::Io(std::io::Error::other(e))
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
    [120, 120, 120],
    [170, 255, 195],
    [128, 0, 0],
];

/// Mean of all self-attention maps at `resolution` over every step and layer.
pub fn aggregate_self_attention(trace: &DenoisingTrace, resolution: usize) -> Result<AttentionMap> {
    aggregate_self_attention_where(trace, resolution, |_| true)
}

/// Like [`aggregate_self_attention`], restricted to the steps accepted by `keep`.
pub fn aggregate_self_attention_where(
    trace: &DenoisingTrace,
    resolution: usize,
    keep: impl Fn(u32) -> bool,
) -> Result<AttentionMap> {
    let layers = trace.self_layers_at(resolution);
    if layers.is_empty() {
        return Err(Error::NoLayerAtResolution(resolution));
    }
    let mut weighted: Vec<(Arc<AttentionMap>, usize)> = Vec::new();
    for step in trace.steps().iter().filter(|s| keep(s.t)) {
        for &l in &layers {
            let map = &step.self_attention[l];
            match weighted.iter_mut().find(|(m, _)| Arc::ptr_eq(m, map)) {
                Some((_, count)) => *count += 1,
                None => weighted.push((map.clone(), 1)),
            }
        }
    }
    let total: usize = weighted.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(Error::InvalidValue(
            "no steps selected for aggregation".into(),
        ));
    }
    let side = resolution * resolution;
    let mut sum = vec![0.0f64; side * side];
    for (map, count) in &weighted {
        let w = *count as f64;
        sum.iter_mut()
            .zip(map.values())
            .for_each(|(s, &v)| *s += w * f64::from(v));
    }
    let total = total as f64;
    Ok(AttentionMap::new_unchecked(
        resolution,
        sum.into_iter().map(|v| (v / total) as f32).collect(),
    ))
}

/// K-Means over the rows of an aggregated map: pixel `i` is described by its
/// attention distribution over all pixels.
pub fn cluster_segments(
    agg: &AttentionMap,
    k: usize,
    options: &KMeansOptions,
) -> Result<SegmentationMap> {
    let side = agg.side();
    let data: Vec<f64> = agg.values().iter().map(|&v| f64::from(v)).collect();
    let result = kmeans(&data, side, k, options)?;
    SegmentationMap::new(agg.resolution(), k, result.labels)
}

/// How aggregated noun maps are scaled before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NounMapNorm {
    /// Divide by the peak, so the map spans [0, 1].
    #[default]
    Max,
    /// Divide by the total, so the map sums to 1.
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NounMap {
    pub position: usize,
    pub side: usize,
    pub values: Vec<f64>,
}

pub fn aggregate_noun_maps(
    trace: &DenoisingTrace,
    noun_positions: &[usize],
    side: usize,
    norm: NounMapNorm,
) -> Result<Vec<NounMap>> {
    aggregate_noun_maps_where(trace, noun_positions, side, norm, |_| true)
}

/// Per noun, the mean of its cross-attention column over the steps accepted
/// by `keep` and every layer at resolution `side` or below, resampled to
/// `side`. The object of interest sums the columns of all its tokens.
pub fn aggregate_noun_maps_where(
    trace: &DenoisingTrace,
    noun_positions: &[usize],
    side: usize,
    norm: NounMapNorm,
    keep: impl Fn(u32) -> bool,
) -> Result<Vec<NounMap>> {
    let layers: Vec<(usize, usize)> = trace
        .cross_layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.resolution <= side)
        .map(|(i, l)| (i, l.resolution))
        .collect();
    if layers.is_empty() {
        return Err(Error::NoLayerAtResolution(side));
    }
    let prompt = trace.prompt();
    let mut out = Vec::with_capacity(noun_positions.len());
    for &pos in noun_positions {
        let tokens = if pos == prompt.object_token_pos {
            prompt.object_span()
        } else {
            pos..pos + 1
        };
        let mut sum = vec![0.0f64; side * side];
        let mut count = 0usize;
        for step in trace.steps().iter().filter(|s| keep(s.t)) {
            for &(l, res) in &layers {
                let map = &step.cross_attention[l];
                if tokens.end > map.token_count() {
                    return Err(Error::InvalidValue(format!(
                        "token {pos} outside a map of {} tokens",
                        map.token_count()
                    )));
                }
                let mut column = vec![0.0f64; res * res];
                for t in tokens.clone() {
                    column
                        .iter_mut()
                        .zip(map.column(t))
                        .for_each(|(c, v)| *c += f64::from(v));
                }
                let column = resample_nearest(&column, res, side);
                sum.iter_mut().zip(column).for_each(|(s, v)| *s += v);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidValue(
                "no steps selected for aggregation".into(),
            ));
        }
        let scale = match norm {
            NounMapNorm::Max => sum.iter().copied().fold(0.0, f64::max),
            NounMapNorm::Sum => sum.iter().sum(),
        };
        if scale <= 0.0 {
            return Err(Error::DegenerateMap { token: pos });
        }
        out.push(NounMap {
            position: pos,
            side,
            values: sum.into_iter().map(|v| v / scale).collect(),
        });
    }
    Ok(out)
}

/// Mean of `a` over the pixels of `mask`.
pub fn score_segment(mask: &[bool], a: &[f64]) -> Result<f64> {
    if mask.len() != a.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} pixels against a map of {}",
            mask.len(),
            a.len()
        )));
    }
    let (sum, count) = mask
        .iter()
        .zip(a)
        .filter(|(&m, _)| m)
        .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
    if count == 0 {
        return Err(Error::EmptySegment);
    }
    Ok(sum / count as f64)
}

/// Names every segment after the noun with the highest score, or background
/// when no score exceeds `sigma`. Ties go to the earliest noun in the prompt.
pub fn label_segments(
    seg: &SegmentationMap,
    noun_maps: &[NounMap],
    sigma: f64,
) -> Result<SegmentationMap> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidValue(format!("sigma {sigma} outside [0,1]")));
    }
    if let Some(m) = noun_maps.iter().find(|m| m.side != seg.side) {
        return Err(Error::ResolutionMismatch {
            expected: seg.side,
            found: m.side,
        });
    }
    let mut ordered: Vec<&NounMap> = noun_maps.iter().collect();
    ordered.sort_by_key(|m| m.position);
    let mut labels = Vec::with_capacity(seg.clusters);
    for cluster in 0..seg.clusters {
        let mask = seg.segment_mask(cluster);
        if !mask.iter().any(|&b| b) {
            labels.push(SegmentLabel::Background);
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for m in &ordered {
            let s = score_segment(&mask, &m.values)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((m.position, s));
            }
        }
        labels.push(match best {
            Some((pos, s)) if s > sigma => SegmentLabel::Noun(pos),
            _ => SegmentLabel::Background,
        });
    }
    seg.clone()
        .with_labels(labels, ordered.iter().map(|m| m.position).collect())
}

/// Union of the segments labeled `noun`.
pub fn object_region(seg: &SegmentationMap, noun: usize) -> Result<Vec<bool>> {
    let labels = seg
        .labels()
        .ok_or_else(|| Error::InvalidValue("segmentation has not been labeled".into()))?;
    if !seg.nouns().contains(&noun) {
        return Err(Error::UnknownNoun(noun));
    }
    Ok(seg
        .grid()
        .iter()
        .map(|&c| labels[c] == SegmentLabel::Noun(noun))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationOptions {
    pub clusters: usize,
    pub sigma: f64,
    pub resolution: usize,
    pub normalization: NounMapNorm,
    pub kmeans: KMeansOptions,
}

impl Default for SegmentationOptions {
    fn default() -> Self {
        Self {
            clusters: DEFAULT_CLUSTERS,
            sigma: DEFAULT_SIGMA,
            resolution: SEGMENTATION_RESOLUTION,
            normalization: NounMapNorm::Max,
            kmeans: KMeansOptions::default(),
        }
    }
}

/// Full labeled segmentation of a trace over the steps accepted by `keep`,
/// competing between all nouns of the trace's prompt.
pub fn segment_trace(
    trace: &DenoisingTrace,
    options: &SegmentationOptions,
    keep: impl Fn(u32) -> bool + Copy,
) -> Result<SegmentationMap> {
    let agg = aggregate_self_attention_where(trace, options.resolution, keep)?;
    let seg = cluster_segments(&agg, options.clusters, &options.kmeans)?;
    let nouns = aggregate_noun_maps_where(
        trace,
        &trace.prompt().noun_positions,
        options.resolution,
        options.normalization,
        keep,
    )?;
    label_segments(&seg, &nouns, options.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map4(values: [f64; 4], position: usize) -> NounMap {
        NounMap {
            position,
            side: 2,
            values: values.to_vec(),
        }
    }

    #[test]
    fn score_of_two_pixel_segment() {
        let s = score_segment(&[true, true, false, false], &[0.8, 0.6, 0.1, 0.1]).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
        assert!(matches!(
            score_segment(&[false; 4], &[0.0; 4]),
            Err(Error::EmptySegment)
        ));
    }

    #[test]
    fn labels_follow_threshold_and_ties() {
        let seg = SegmentationMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let dog = map4([0.7, 0.7, 0.2, 0.2], 1);
        let table = map4([0.1, 0.1, 0.3, 0.3], 4);
        let labeled = label_segments(&seg, &[table.clone(), dog.clone()], 0.3).unwrap();
        assert_eq!(
            labeled.labels().unwrap(),
            &[SegmentLabel::Noun(1), SegmentLabel::Background]
        );

        let a = map4([0.5; 4], 2);
        let b = map4([0.5; 4], 6);
        let tie = label_segments(&seg, &[b, a], 0.3).unwrap();
        assert_eq!(
            tie.labels().unwrap(),
            &[SegmentLabel::Noun(2), SegmentLabel::Noun(2)]
        );
    }

    #[test]
    fn regions_are_unions_of_segments() {
        let seg = SegmentationMap::new(2, 3, vec![0, 1, 2, 2])
            .unwrap()
            .with_labels(
                vec![
                    SegmentLabel::Noun(1),
                    SegmentLabel::Background,
                    SegmentLabel::Noun(1),
                ],
                vec![1, 3],
            )
            .unwrap();
        assert_eq!(
            object_region(&seg, 1).unwrap(),
            vec![true, false, true, true]
        );
        assert_eq!(object_region(&seg, 3).unwrap(), vec![false; 4]);
        assert!(matches!(object_region(&seg, 7), Err(Error::UnknownNoun(7))));
    }

    #[test]
    fn png_and_legend_export() {
        let dir = tempfile::tempdir().unwrap();
        let seg = SegmentationMap::new(2, 2, vec![0, 1, 1, 0])
            .unwrap()
            .with_labels(
                vec![SegmentLabel::Background, SegmentLabel::Noun(1)],
                vec![1],
            )
            .unwrap();
        let path = dir.path().join("seg.png");
        seg.save_png(&path, 4).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().color_type, png::ColorType::Indexed);
        assert_eq!(reader.info().width, 8);
        let legend = seg.legend(None);
        assert_eq!(legend["segments"][0]["name"], "background");
        assert_eq!(legend["segments"][1]["pixels"], 2);
    }

    #[test]
    fn serde_roundtrip() {
        let seg = SegmentationMap::new(2, 2, vec![0, 1, 1, 0])
            .unwrap()
            .with_labels(
                vec![SegmentLabel::Background, SegmentLabel::Noun(3)],
                vec![3],
            )
            .unwrap();
        let json = serde_json::to_string(&seg).unwrap();
        assert_eq!(serde_json::from_str::<SegmentationMap>(&json).unwrap(), seg);
        assert!(
            serde_json::from_str::<SegmentationMap>(&json.replace("[0,1,1,0]", "[0,1,1,5]"))
                .is_err()
        );
    }

    proptest! {
        #[test]
        fn score_lies_within_map_range(
            a in prop::collection::vec(0.0f64..1.0, 9),
            mask in prop::collection::vec(any::<bool>(), 9),
        ) {
            prop_assume!(mask.iter().any(|&b| b));
            let s = score_segment(&mask, &a).unwrap();
            let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }

        #[test]
        fn labels_ignore_cluster_numbering(
            grid in prop::collection::vec(0usize..3, 9),
            maps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 9), 1..4),
            perm in Just([2usize, 0, 1]),
        ) {
            let seg = SegmentationMap::new(3, 3, grid.clone()).unwrap();
            let renamed = SegmentationMap::new(3, 3, grid.iter().map(|&c| perm[c]).collect()).unwrap();
            let nouns: Vec<NounMap> = maps
                .into_iter()
                .enumerate()
                .map(|(i, values)| NounMap { position: i * 2, side: 3, values })
                .collect();
            let a = label_segments(&seg, &nouns, 0.3).unwrap().pixel_labels().unwrap();
            let b = label_segments(&renamed, &nouns, 0.3).unwrap().pixel_labels().unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

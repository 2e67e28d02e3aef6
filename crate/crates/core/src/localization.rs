//! Attention-based shape localization: object pixels from cross-attention,
//! injection masks, and selective self-attention injection.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{row_sum, AttentionMap, CrossAttentionMap, InjectionMask, ObjectPixelSet};
use crate::error::{Error, Result};
use crate::grid::resample_nearest;
use crate::trace::DenoisingTrace;

pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// Pixels of `cmap` whose attention to `token_pos`, relative to the column
/// maximum, is at least `threshold`, on a `target_resolution` grid.
pub fn extract_object_pixels(
    cmap: &CrossAttentionMap,
    token_pos: usize,
    threshold: f64,
    target_resolution: usize,
) -> Result<ObjectPixelSet> {
    if token_pos >= cmap.token_count() {
        return Err(Error::InvalidValue(format!(
            "token {token_pos} outside a map of {} tokens",
            cmap.token_count()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidValue(format!(
            "threshold {threshold} outside [0,1]"
        )));
    }
    let column = cmap.column(token_pos);
    let max = column.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Err(Error::DegenerateMap { token: token_pos });
    }
    let max = f64::from(max);
    let normalized: Vec<f64> = column.iter().map(|&v| f64::from(v) / max).collect();
    let resampled = resample_nearest(&normalized, cmap.resolution(), target_resolution);
    let pixels = resampled
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(i, _)| i);
    ObjectPixelSet::new(target_resolution, pixels)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskVariant {
    Rows,
    Columns,
    RowsAndColumns,
    /// Rows and columns of `O ∖ O′`.
    Exclude(ObjectPixelSet),
}

pub fn build_injection_mask(
    object: &ObjectPixelSet,
    variant: &MaskVariant,
) -> Result<InjectionMask> {
    let n = object.resolution();
    let none = vec![false; n * n];
    match variant {
        MaskVariant::Rows => InjectionMask::new(n, object.to_indicator(), none),
        MaskVariant::Columns => InjectionMask::new(n, none, object.to_indicator()),
        MaskVariant::RowsAndColumns => {
            InjectionMask::new(n, object.to_indicator(), object.to_indicator())
        }
        MaskVariant::Exclude(other) => {
            let kept = object.difference(other)?;
            InjectionMask::new(n, kept.to_indicator(), kept.to_indicator())
        }
    }
}

/// Copies the entries selected by `mask` from `s_ref` and the rest from
/// `s_new`. With `renormalize`, rows that mix both sources are rescaled to sum
/// to one; rows taken wholly from either map are left untouched.
pub fn inject_self_attention(
    s_ref: &AttentionMap,
    s_new: &AttentionMap,
    mask: &InjectionMask,
    renormalize: bool,
) -> Result<AttentionMap> {
    for found in [s_new.resolution(), mask.resolution()] {
        if found != s_ref.resolution() {
            return Err(Error::ResolutionMismatch {
                expected: s_ref.resolution(),
                found,
            });
        }
    }
    let side = s_ref.side();
    let any_col = (0..side).any(|j| mask.col_selected(j));
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let (r, n) = (s_ref.row(i), s_new.row(i));
        if mask.row_selected(i) {
            out.extend_from_slice(r);
            continue;
        }
        if !any_col {
            out.extend_from_slice(n);
            continue;
        }
        let start = out.len();
        out.extend((0..side).map(|j| if mask.col_selected(j) { r[j] } else { n[j] }));
        let row = &mut out[start..];
        if renormalize && row != r && row != n {
            let sum = row_sum(row);
            if sum > 0.0 {
                row.iter_mut()
                    .for_each(|v| *v = (f64::from(*v) / sum) as f32);
            }
        }
    }
    Ok(AttentionMap::new_unchecked(s_ref.resolution(), out))
}

/// How the object pixels of the preserved nouns turn into masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Rows,
    Columns,
    #[default]
    RowsAndColumns,
    /// Rows and columns of the preserved pixels, minus the pixels of the
    /// object of interest.
    ExcludeObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionOptions {
    pub threshold: f64,
    /// Cross-attention resolution the object pixels are read from.
    pub source_resolution: usize,
    /// Injection runs on steps `t > window_end`.
    pub window_end: u32,
    /// Self-attention layers above this resolution are left alone.
    pub max_resolution: usize,
    pub mask_mode: MaskMode,
    pub renormalize_rows: bool,
}

impl Default for InjectionOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            source_resolution: 16,
            window_end: 15,
            max_resolution: 32,
            mask_mode: MaskMode::RowsAndColumns,
            renormalize_rows: true,
        }
    }
}

/// Masks for every (step, self-attention layer) pair inside the injection
/// window. Steps outside the window and layers above the resolution cap have
/// no mask.
#[derive(Clone, Debug, Default)]
pub struct InjectionPlan {
    masks: HashMap<(u32, usize), Arc<InjectionMask>>,
    renormalize_rows: bool,
}

impl InjectionPlan {
    pub fn mask(&self, t: u32, layer: usize) -> Option<&Arc<InjectionMask>> {
        self.masks.get(&(t, layer))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn renormalize_rows(&self) -> bool {
        self.renormalize_rows
    }

    /// Applies the plan's mask for (t, layer) to a freshly computed map.
    /// Returns `None` when nothing is injected there.
    pub fn apply(
        &self,
        t: u32,
        layer: usize,
        reference: &AttentionMap,
        fresh: &AttentionMap,
    ) -> Result<Option<AttentionMap>> {
        match self.mask(t, layer) {
            Some(m) if !m.is_zero() => {
                inject_self_attention(reference, fresh, m, self.renormalize_rows).map(Some)
            }
            _ => Ok(None),
        }
    }
}

/// Builds the masks protecting the nouns at `preserve_tokens`, read from the
/// reference trace's cross-attention at each step of the window.
/// `interest_tokens` only matter for [`MaskMode::ExcludeObject`].
pub fn injection_plan(
    trace: &DenoisingTrace,
    preserve_tokens: &[usize],
    interest_tokens: &[usize],
    options: &InjectionOptions,
) -> Result<InjectionPlan> {
    let layers: Vec<(usize, usize)> = trace
        .self_layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.resolution <= options.max_resolution)
        .map(|(i, l)| (i, l.resolution))
        .collect();
    let mut masks = HashMap::new();
    let mut cache: HashMap<(usize, usize), Arc<InjectionMask>> = HashMap::new();
    for step in trace.steps().iter().filter(|s| s.t > options.window_end) {
        let mut by_resolution: HashMap<usize, Arc<InjectionMask>> = HashMap::new();
        for &(layer, resolution) in &layers {
            let mask = match by_resolution.get(&resolution) {
                Some(m) => m.clone(),
                None => {
                    let m = if preserve_tokens.is_empty() {
                        InjectionMask::zeros(resolution)
                    } else {
                        let cmap = trace.cross_attention_at(step.t, options.source_resolution)?;
                        let object =
                            union_pixels(cmap, preserve_tokens, options.threshold, resolution)?;
                        let variant = match options.mask_mode {
                            MaskMode::Rows => MaskVariant::Rows,
                            MaskMode::Columns => MaskVariant::Columns,
                            MaskMode::RowsAndColumns => MaskVariant::RowsAndColumns,
                            MaskMode::ExcludeObject => MaskVariant::Exclude(union_pixels(
                                cmap,
                                interest_tokens,
                                options.threshold,
                                resolution,
                            )?),
                        };
                        build_injection_mask(&object, &variant)?
                    };
                    // Consecutive steps usually produce the same mask; share it.
                    let key = (resolution, hash_mask(&m));
                    let m = match cache.get(&key) {
                        Some(c) if **c == m => c.clone(),
                        _ => {
                            let m = Arc::new(m);
                            cache.insert(key, m.clone());
                            m
                        }
                    };
                    by_resolution.insert(resolution, m.clone());
                    m
                }
            };
            masks.insert((step.t, layer), mask);
        }
    }
    Ok(InjectionPlan {
        masks,
        renormalize_rows: options.renormalize_rows,
    })
}

fn union_pixels(
    cmap: &CrossAttentionMap,
    tokens: &[usize],
    threshold: f64,
    resolution: usize,
) -> Result<ObjectPixelSet> {
    let mut set = ObjectPixelSet::empty(resolution);
    for &t in tokens {
        set = set.union(&extract_object_pixels(cmap, t, threshold, resolution)?)?;
    }
    Ok(set)
}

fn hash_mask(m: &InjectionMask) -> usize {
    let side = m.side();
    (0..side)
        .map(|i| usize::from(m.row_selected(i)) * 2 + usize::from(m.col_selected(i)))
        .fold(0usize, |h, v| h.wrapping_mul(31).wrapping_add(v))
}

//! Attention maps, object pixel sets and injection masks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Post-softmax rows must sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Self-attention map of a layer working on an N×N feature grid: an N²×N²
/// row-stochastic matrix where entry `[i, j]` is how much pixel `j` affects
/// pixel `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMap")]
pub struct AttentionMap {
    resolution: usize,
    values: Vec<f32>,
}

#[derive(Deserialize)]
struct RawMap {
    resolution: usize,
    values: Vec<f32>,
}

impl TryFrom<RawMap> for AttentionMap {
    type Error = Error;

    fn try_from(raw: RawMap) -> Result<Self> {
        check_shape(raw.resolution, raw.values.len())?;
        check_finite(&raw.values)?;
        Ok(Self::new_unchecked(raw.resolution, raw.values))
    }
}

fn check_shape(resolution: usize, len: usize) -> Result<()> {
    let side = resolution * resolution;
    if resolution == 0 || len != side * side {
        return Err(Error::ShapeMismatch(format!(
            "attention map at resolution {resolution} needs {} values, got {len}",
            side * side
        )));
    }
    Ok(())
}

fn check_finite(values: &[f32]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite attention value".into()));
    }
    Ok(())
}

pub(crate) fn row_sum(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v)).sum()
}

impl AttentionMap {
    /// Builds a map and checks the stochastic-matrix invariants.
    pub fn new(resolution: usize, values: Vec<f32>) -> Result<Self> {
        check_shape(resolution, values.len())?;
        check_finite(&values)?;
        if values.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
            return Err(Error::InvalidValue("attention value outside [0,1]".into()));
        }
        let map = Self::new_unchecked(resolution, values);
        let err = map.max_row_sum_error();
        if err > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidValue(format!(
                "row sums deviate from 1 by {err:e}"
            )));
        }
        Ok(map)
    }

    /// Builds a map without checking row sums. Used for the raw blend of the
    /// injection formula when row re-normalization is switched off.
    pub fn new_unchecked(resolution: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), resolution.pow(4));
        Self { resolution, values }
    }

    /// Normalizes each row of non-negative `weights` to sum to one.
    pub fn from_weights(resolution: usize, mut weights: Vec<f64>) -> Result<Self> {
        check_shape(resolution, weights.len())?;
        let side = resolution * resolution;
        for row in weights.chunks_mut(side) {
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::InvalidValue(
                    "attention row has no positive weight".into(),
                ));
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Self::new(resolution, weights.into_iter().map(|v| v as f32).collect())
    }

    pub fn uniform(resolution: usize) -> Self {
        let side = resolution * resolution;
        Self::new_unchecked(resolution, vec![1.0 / side as f32; side * side])
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Number of pixels, N².
    pub fn side(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let side = self.side();
        &self.values[i * side..(i + 1) * side]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.side())
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.side() + j]
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.rows()
            .map(|r| (row_sum(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Cross-attention map: N² pixels × L prompt tokens, row-stochastic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCross")]
pub struct CrossAttentionMap {
    resolution: usize,
    tokens: usize,
    values: Vec<f32>,
}

#[derive(Deserialize)]
struct RawCross {
    resolution: usize,
    tokens: usize,
    values: Vec<f32>,
}

impl TryFrom<RawCross> for CrossAttentionMap {
    type Error = Error;

    fn try_from(raw: RawCross) -> Result<Self> {
        CrossAttentionMap::new(raw.resolution, raw.tokens, raw.values)
    }
}

impl CrossAttentionMap {
    pub fn new(resolution: usize, tokens: usize, values: Vec<f32>) -> Result<Self> {
        if resolution == 0 || tokens == 0 || values.len() != resolution * resolution * tokens {
            return Err(Error::ShapeMismatch(format!(
                "cross-attention map {resolution}x{resolution}x{tokens} cannot hold {} values",
                values.len()
            )));
        }
        check_finite(&values)?;
        let map = Self {
            resolution,
            tokens,
            values,
        };
        let err = map.max_row_sum_error();
        if err > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidValue(format!(
                "row sums deviate from 1 by {err:e}"
            )));
        }
        Ok(map)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, pixel: usize) -> &[f32] {
        &self.values[pixel * self.tokens..(pixel + 1) * self.tokens]
    }

    /// Attention of every pixel to token `token`, row-major over the N×N grid.
    pub fn column(&self, token: usize) -> Vec<f32> {
        self.values
            .chunks_exact(self.tokens)
            .map(|r| r[token])
            .collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.values
            .chunks_exact(self.tokens)
            .map(|r| (row_sum(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Flat pixel indices of an object on an N×N grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectPixelSet {
    resolution: usize,
    pixels: BTreeSet<usize>,
}

impl ObjectPixelSet {
    pub fn new(resolution: usize, pixels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let pixels: BTreeSet<usize> = pixels.into_iter().collect();
        if let Some(&p) = pixels.iter().next_back() {
            if p >= resolution * resolution {
                return Err(Error::InvalidValue(format!(
                    "pixel {p} outside a {resolution}x{resolution} grid"
                )));
            }
        }
        Ok(Self { resolution, pixels })
    }

    pub fn empty(resolution: usize) -> Self {
        Self {
            resolution,
            pixels: BTreeSet::new(),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &BTreeSet<usize> {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.pixels.contains(&pixel)
    }

    fn same_resolution(&self, other: &Self) -> Result<()> {
        if self.resolution != other.resolution {
            return Err(Error::ResolutionMismatch {
                expected: self.resolution,
                found: other.resolution,
            });
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_resolution(other)?;
        Ok(Self {
            resolution: self.resolution,
            pixels: self.pixels.union(&other.pixels).copied().collect(),
        })
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.same_resolution(other)?;
        Ok(Self {
            resolution: self.resolution,
            pixels: self.pixels.difference(&other.pixels).copied().collect(),
        })
    }

    pub fn to_indicator(&self) -> Vec<bool> {
        let mut v = vec![false; self.resolution * self.resolution];
        self.pixels.iter().for_each(|&p| v[p] = true);
        v
    }
}

/// Binary N²×N² mask selecting which self-attention entries are copied from
/// the reference run.
///
/// Every mask this crate builds is a union of whole rows and whole columns,
/// `M[i, j] = rows[i] || cols[j]`, so it is stored as the two indicator
/// vectors instead of the dense matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionMask {
    resolution: usize,
    rows: Vec<bool>,
    cols: Vec<bool>,
}

impl InjectionMask {
    pub fn new(resolution: usize, rows: Vec<bool>, cols: Vec<bool>) -> Result<Self> {
        let side = resolution * resolution;
        if rows.len() != side || cols.len() != side {
            return Err(Error::ShapeMismatch(format!(
                "mask indicators must have {side} entries"
            )));
        }
        Ok(Self {
            resolution,
            rows,
            cols,
        })
    }

    pub fn zeros(resolution: usize) -> Self {
        let side = resolution * resolution;
        Self {
            resolution,
            rows: vec![false; side],
            cols: vec![false; side],
        }
    }

    pub fn ones(resolution: usize) -> Self {
        let side = resolution * resolution;
        Self {
            resolution,
            rows: vec![true; side],
            cols: vec![false; side],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn side(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i] || self.cols[j]
    }

    pub fn row_selected(&self, i: usize) -> bool {
        self.rows[i]
    }

    pub fn col_selected(&self, j: usize) -> bool {
        self.cols[j]
    }

    pub fn is_zero(&self) -> bool {
        !self.rows.iter().chain(&self.cols).any(|&b| b)
    }

    /// Row-major dense 0/1 matrix.
    pub fn to_dense(&self) -> Vec<u8> {
        let side = self.side();
        let mut out = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                out.push(u8::from(self.get(i, j)));
            }
        }
        out
    }

    /// Entry-wise OR of two masks.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.resolution != other.resolution {
            return Err(Error::ResolutionMismatch {
                expected: self.resolution,
                found: other.resolution,
            });
        }
        let or = |a: &[bool], b: &[bool]| a.iter().zip(b).map(|(x, y)| *x || *y).collect();
        Ok(Self {
            resolution: self.resolution,
            rows: or(&self.rows, &other.rows),
            cols: or(&self.cols, &other.cols),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(AttentionMap::new(1, vec![1.0]).is_ok());
        assert!(AttentionMap::new(1, vec![0.5]).is_err());
        assert!(AttentionMap::new(2, vec![0.25; 15]).is_err());
        assert!(AttentionMap::new(1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn weights_are_normalized() {
        let m = AttentionMap::from_weights(1, vec![3.0]).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert!(AttentionMap::from_weights(1, vec![0.0]).is_err());
    }

    #[test]
    fn cross_map_columns() {
        let c = CrossAttentionMap::new(1, 2, vec![0.25, 0.75]).unwrap();
        assert_eq!(c.column(1), vec![0.75]);
        assert!(CrossAttentionMap::new(1, 2, vec![0.5, 0.75]).is_err());
    }

    #[test]
    fn pixel_sets_check_bounds_and_resolution() {
        assert!(ObjectPixelSet::new(2, [3]).is_ok());
        assert!(ObjectPixelSet::new(2, [4]).is_err());
        let a = ObjectPixelSet::new(2, [0, 1]).unwrap();
        let b = ObjectPixelSet::new(3, [1]).unwrap();
        assert!(matches!(a.union(&b), Err(Error::ResolutionMismatch { .. })));
    }

    #[test]
    fn mask_json_roundtrip() {
        let m = InjectionMask::new(1, vec![true], vec![false]).unwrap();
        let back: InjectionMask =
            serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let a = AttentionMap::uniform(2);
        let back: AttentionMap = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}

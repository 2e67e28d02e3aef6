use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C×H×W latent code, channel-major. Generation is square, so H = W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatent")]
pub struct LatentImage {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

#[derive(Deserialize)]
struct RawLatent {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl TryFrom<RawLatent> for LatentImage {
    type Error = Error;

    fn try_from(r: RawLatent) -> Result<Self> {
        LatentImage::new(r.channels, r.height, r.width, r.values)
    }
}

impl LatentImage {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || height != width {
            return Err(Error::ShapeMismatch(format!(
                "latent must be C×N×N with positive sizes, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "latent {channels}x{height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite latent value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Self {
            channels,
            height: side,
            width: side,
            values: vec![0.0; channels * side * side],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Spatial side length.
    pub fn side(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, pixel: usize) -> f32 {
        self.values[c * self.pixels() + pixel]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }
}

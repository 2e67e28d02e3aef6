//! Decoded RGB images and PNG export.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Interleaved RGB image with samples in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} RGB image cannot hold {} samples",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| f32::from(b) / 255.0)
            .collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Places images side by side, padding shorter ones with black.
    pub fn hstack(images: &[RgbImage]) -> Result<Self> {
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width: usize = images.iter().map(|i| i.width).sum();
        let mut data = vec![0.0; width * height * 3];
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    let dst = (y * width + x0 + x) * 3;
                    data[dst..dst + 3].copy_from_slice(&img.pixel(x, y));
                }
            }
            x0 += img.width;
        }
        Self::new(width, height, data)
    }
}

/// Writes a binary mask on a `side`×`side` grid as a black/white PNG,
/// magnified `scale` times.
pub fn save_mask_png(mask: &[bool], side: usize, scale: usize, path: &Path) -> Result<()> {
    let size = side * scale;
    let img = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
        let (x, y) = (x as usize / scale, y as usize / scale);
        Luma([if mask[y * side + x] { 255u8 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_preserves_8bit_samples() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 255.0).collect();
        let img = RgbImage::new(2, 2, data).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn hstack_concatenates() {
        let a = RgbImage::new(1, 1, vec![1.0; 3]).unwrap();
        let b = RgbImage::new(2, 1, vec![0.5; 6]).unwrap();
        let s = RgbImage::hstack(&[a, b]).unwrap();
        assert_eq!((s.width(), s.height()), (3, 1));
        assert_eq!(s.pixel(2, 0), [0.5; 3]);
    }
}

use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage::new(width, height, vec![0.0; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads any PNG, converting to 8-bit luma.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let pixels = luma.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(GrayImage::new(w as usize, h as usize, pixels))
    }

    /// Quantizes to 8 bits and back, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| to_u8(v) as f64 / 255.0)
            .collect();
        GrayImage::new(self.width, self.height, pixels)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = GrayImage::new(3, 2, vec![0.0, 0.1, 0.5, 0.77, 1.0, 0.33]);
        img.save_png(&path).unwrap();
        let back = GrayImage::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }
}

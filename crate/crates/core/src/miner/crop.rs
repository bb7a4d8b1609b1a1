use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::ingest::{luma, pearson, Frame};
use crate::proposals::BBox;
use crate::tensor::Tensor;

/// A square RGB patch stored channel-first as bytes. Network input is the
/// same patch scaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Crop {
    size: u32,
    data: Vec<u8>,
}

impl Crop {
    pub const CHANNELS: u32 = 3;

    pub fn from_chw(size: u32, data: Vec<u8>) -> Result<Self> {
        let expected = (Self::CHANNELS * size * size) as usize;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "crop of size {size} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Crop { size, data })
    }

    pub fn from_image(img: &RgbImage) -> Self {
        assert_eq!(img.width(), img.height(), "crops are square");
        let size = img.width();
        let plane = (size * size) as usize;
        let mut data = vec![0u8; 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p[c];
            }
        }
        Crop { size, data }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn to_image(&self) -> RgbImage {
        let plane = (self.size * self.size) as usize;
        RgbImage::from_fn(self.size, self.size, |x, y| {
            let i = (y * self.size + x) as usize;
            Rgb([self.data[i], self.data[plane + i], self.data[2 * plane + i]])
        })
    }

    /// `[3, S, S]` tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s = self.size as usize;
        Tensor::from_vec(
            vec![3, s, s],
            self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        )
        .expect("shape matches data")
    }

    /// Mirror image about the vertical axis.
    pub fn flipped(&self) -> Crop {
        let s = self.size as usize;
        let mut data = self.data.clone();
        for row in data.chunks_mut(s) {
            row.reverse();
        }
        Crop {
            size: self.size,
            data,
        }
    }

    /// Grayscale values after downsampling to `n` x `n`.
    pub fn downsampled_luma(&self, n: u32) -> Vec<f64> {
        let img = self.to_image();
        if n == self.size {
            return luma(&img);
        }
        luma(&imageops::resize(&img, n, n, FilterType::Triangle))
    }
}

/// Pixel correlation of two crops after downsampling both to `n` x `n`.
pub fn crop_correlation(a: &Crop, b: &Crop, n: u32) -> f64 {
    pearson(&a.downsampled_luma(n), &b.downsampled_luma(n))
}

/// Cuts an `s` x `s` patch for `bbox`: the centred window when the box is at
/// least `s` in both dimensions, otherwise the whole box resized to `s`.
pub fn crop_patch(frame: &Frame, bbox: &BBox, s: u32) -> Result<Crop> {
    if !bbox.fits_in(frame.width(), frame.height()) {
        return Err(Error::BoxOutsideFrame {
            bbox: *bbox,
            width: frame.width(),
            height: frame.height(),
        });
    }
    let view = if bbox.w >= s && bbox.h >= s {
        let ox = bbox.x + (bbox.w - s) / 2;
        let oy = bbox.y + (bbox.h - s) / 2;
        imageops::crop_imm(&frame.pixels, ox, oy, s, s).to_image()
    } else {
        let region = imageops::crop_imm(&frame.pixels, bbox.x, bbox.y, bbox.w, bbox.h).to_image();
        imageops::resize(&region, s, s, FilterType::Triangle)
    };
    Ok(Crop::from_image(&view))
}

/// Whole frame resized to `s` x `s`.
pub fn resize_frame(frame: &Frame, s: u32) -> Crop {
    Crop::from_image(&imageops::resize(&frame.pixels, s, s, FilterType::Triangle))
}

//! RGB image buffer in [0,1], channels-last row-major.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * IMAGE_CHANNELS {
            return Err(Error::InvalidDims(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * IMAGE_CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * IMAGE_CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * IMAGE_CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * IMAGE_CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rectangular sub-image with top-left corner (y, x).
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::InvalidDims(format!(
                "crop {h}x{w}@({y},{x}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut out = ImageTensor::zeros(h, w);
        for r in 0..h {
            let src = ((y + r) * self.width + x) * IMAGE_CHANNELS;
            let dst = r * w * IMAGE_CHANNELS;
            out.data[dst..dst + w * IMAGE_CHANNELS]
                .copy_from_slice(&self.data[src..src + w * IMAGE_CHANNELS]);
        }
        Ok(out)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, IMAGE_CHANNELS], self.data.clone())
            .expect("image buffer is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != IMAGE_CHANNELS {
            return Err(Error::InvalidDims(format!(
                "expected [H,W,3] tensor, got {:?}",
                s
            )));
        }
        Self::new(s[0], s[1], t.data().to_vec())
    }

    pub fn clamp01(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Channel-last feature map: cell `(x, y)` holds a contiguous `depth`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(width: usize, height: usize, depth: usize) -> Self {
        Self {
            width,
            height,
            depth,
            data: vec![0.0; width * height * depth],
        }
    }

    pub fn from_data(width: usize, height: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * depth {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match {width}x{height}x{depth}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            data,
        })
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            depth: CHANNELS,
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.depth;
        &self.data[i..i + self.depth]
    }

    /// Iterates over the feature vectors of all cells, row-major.
    pub fn features(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.depth)
    }

    pub fn same_shape(&self, other: &FeatureTensor) -> bool {
        self.width == other.width && self.height == other.height && self.depth == other.depth
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

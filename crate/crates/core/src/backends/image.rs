//! Pixel, mask, patch-grid and box containers shared by every stage.

use serde::{Deserialize, Serialize};

use super::BackendError;

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<[f64; 3]>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> Result<Self, BackendError> {
        if height == 0 || width == 0 {
            return Err(BackendError::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(BackendError::InvalidInput(format!(
                "expected {} pixels for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .flatten()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(BackendError::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Result<Self, BackendError> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    /// Sub-image covering rows `y0..y1` and columns `x0..x1`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Result<Self, BackendError> {
        if y1 > self.height || x1 > self.width || y0 >= y1 || x0 >= x1 {
            return Err(BackendError::InvalidInput(format!(
                "crop [{y0}..{y1}, {x0}..{x1}] outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity((y1 - y0) * (x1 - x0));
        for r in y0..y1 {
            pixels.extend_from_slice(&self.pixels[r * self.width + x0..r * self.width + x1]);
        }
        Ok(Self { height: y1 - y0, width: x1 - x0, pixels })
    }
}

/// Binary foreground mask; `true` marks foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self, BackendError> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(BackendError::InvalidInput(format!(
                "mask of {} values does not fit {height}x{width}",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.values[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|v| *v)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    pub fn matches_image(&self, image: &ImageTensor) -> bool {
        self.height == image.height() && self.width == image.width()
    }
}

/// Per-patch embeddings laid out as `grid_h x grid_w x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    features: Vec<f64>,
}

impl PatchGrid {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, features: Vec<f64>) -> Result<Self, BackendError> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(BackendError::InvalidInput(format!(
                "patch grid dimensions must be positive, got {grid_h}x{grid_w}x{dim}"
            )));
        }
        if features.len() != grid_h * grid_w * dim {
            return Err(BackendError::InvalidInput(format!(
                "expected {} features, got {}",
                grid_h * grid_w * dim,
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::InvalidInput("non-finite patch feature".into()));
        }
        Ok(Self { grid_h, grid_w, dim, features })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.grid_w + col) * self.dim;
        &self.features[start..start + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }
}

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left and `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BackendError> {
        let b = Self { x1, y1, x2, y2 };
        if [x1, y1, x2, y2].iter().any(|v| !v.is_finite()) || x2 <= x1 || y2 <= y1 {
            return Err(BackendError::InvalidInput(format!("malformed box {:?}", b.to_array())));
        }
        Ok(b)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = BackendError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A candidate region with its pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub feature: Vec<f64>,
    pub bbox: BBox,
    pub objectness: Option<f64>,
}

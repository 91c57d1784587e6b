//! Grayscale design images: the unit of dedup, training and scoring.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// A grayscale pixel grid with values in `[0, 1]`, stored row-major with
/// row 0 at the top. Element fields of a [`crate::geometry::WheelDomain`]
/// use the same layout, so a design image maps onto the element grid
/// index-for-index.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageError {
    /// Pixel buffer length does not match `width * height`.
    SizeMismatch { expected: usize, got: usize },
    /// A pixel value fell outside `[0, 1]` or was not finite.
    PixelOutOfRange { index: usize },
    /// Two images that must share a pixel grid do not.
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    /// Operation requires a binarized image.
    NotBinary { index: usize },
    /// Zero-sized images are not representable.
    EmptyImage,
    Other(String),
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::SizeMismatch { expected, got } => {
                write!(f, "pixel buffer has {got} values, expected {expected}")
            }
            ImageError::PixelOutOfRange { index } => {
                write!(f, "pixel {index} is not a finite value in [0, 1]")
            }
            ImageError::ShapeMismatch { a, b } => {
                write!(f, "image shapes differ: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)
            }
            ImageError::NotBinary { index } => write!(f, "pixel {index} is neither 0 nor 1"),
            ImageError::EmptyImage => write!(f, "image must have nonzero width and height"),
            ImageError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for ImageError {}

impl DesignImage {
    /// Builds an image from row-major pixels, validating range and size.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(ImageError::SizeMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(index) = pixels.iter().position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(ImageError::PixelOutOfRange { index });
        }
        Ok(Self { width, height, pixels })
    }

    /// All-zero (void) image.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    /// True if every pixel is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// Fraction of pixels that are solid (`>= 0.5`).
    pub fn solid_fraction(&self) -> f64 {
        let solid = self.pixels.iter().filter(|&&p| p >= 0.5).count();
        solid as f64 / self.pixels.len() as f64
    }

    /// Pixel-wise L1 distance to another image of the same shape.
    pub fn l1_distance(&self, other: &DesignImage) -> Result<f64, ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::ShapeMismatch {
                a: (self.width, self.height),
                b: (other.width, other.height),
            });
        }
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| crate::fmath::abs(a - b))
            .sum())
    }

    /// Nearest-neighbor resample to a new size; identity when sizes match.
    pub fn resample_nearest(&self, width: usize, height: usize) -> Result<DesignImage, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage);
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            let src_r = (r * self.height) / height;
            for c in 0..width {
                let src_c = (c * self.width) / width;
                pixels.push(self.pixels[src_r * self.width + src_c]);
            }
        }
        Ok(DesignImage {
            width,
            height,
            pixels,
        })
    }
}

/// Thresholds a grayscale image to {0, 1}: `pixel >= threshold -> 1`.
pub fn binarize(image: &DesignImage, threshold: f64) -> DesignImage {
    let pixels = image
        .pixels
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    DesignImage {
        width: image.width,
        height: image.height,
        pixels,
    }
}

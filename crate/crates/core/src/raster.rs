//! In-memory RGB rasters and class-index masks, with PNM file IO.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// An 8-bit RGB image stored row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "raster {height}x{width}x3 needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Raster {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rows `start..height`, all columns.
    pub fn rows_from(&self, start: usize) -> Raster {
        let offset = start.min(self.height) * self.width * 3;
        Raster {
            height: self.height - start.min(self.height),
            width: self.width,
            data: self.data[offset..].to_vec(),
        }
    }

    /// Reads a binary PPM (P6) file.
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Raster::new(h as usize, w as usize, rgb.into_raw())
    }

    /// Writes an uncompressed binary PPM (P6) file.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster buffer length checked at construction");
        img.save_with_format(path, ImageFormat::Pnm)
            .map_err(|e| image_error(path, e))
    }
}

/// H×W map of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("mask must be at least 1x1".into()));
        }
        if classes.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                classes.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Mask {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    /// Largest class index present plus one.
    pub fn class_bound(&self) -> usize {
        self.classes.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// Checks that every index is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c as usize >= num_classes) {
            Some(c) => Err(Error::invalid(format!(
                "class index {c} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Reads a single-channel 8-bit PGM (P5) index raster.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Mask::new(h as usize, w as usize, gray.into_raw())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.classes.clone())
            .expect("mask buffer length checked at construction");
        img.save_with_format(path, ImageFormat::Pnm)
            .map_err(|e| image_error(path, e))
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

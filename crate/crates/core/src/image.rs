//! Image planes and semantic label maps.

use std::path::Path;

use egic_tensor::Array;
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// An RGB image with values nominally in `[0, 1]`.
///
/// Stored channels-first (`[3, h, w]`), which is the layout the networks
/// consume.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImagePlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width, "image data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamped(&self) -> Self {
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    /// `[1, 3, h, w]` array.
    pub fn to_array(&self) -> Array {
        Array::new([1, CHANNELS, self.height, self.width], self.data.clone())
    }

    /// `[n, 3, h, w]` array of equally sized images.
    pub fn batch_to_array(images: &[ImagePlane]) -> Array {
        assert!(!images.is_empty(), "empty image batch");
        let (h, w) = images[0].size();
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for im in images {
            assert_eq!(im.size(), (h, w), "batch images differ in size");
            data.extend_from_slice(&im.data);
        }
        Array::new([images.len(), CHANNELS, h, w], data)
    }

    /// Sample `index` of a `[n, 3, h, w]` array.
    pub fn from_array(array: &Array, index: usize) -> Self {
        let (n, c, h, w) = array.dims4();
        assert_eq!(c, CHANNELS, "expected 3 channels");
        assert!(index < n, "batch index out of range");
        let len = c * h * w;
        Self::new(h, w, array.data()[index * len..(index + 1) * len].to_vec())
    }

    pub fn split_batch(array: &Array) -> Vec<Self> {
        (0..array.shape()[0]).map(|i| Self::from_array(array, i)).collect()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Per-pixel semantic classes in `1..=num_classes`; class 1 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), height * width, "label data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Self {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u16) {
        self.data[y * self.width + x] = class;
    }

    pub fn max_class(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Checks every label lies in `1..=num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&c| c == 0 || usize::from(c) > num_classes)
        {
            Some(c) => Err(Error::Contract(format!(
                "label {c} outside 1..={num_classes}"
            ))),
            None => Ok(()),
        }
    }

    /// Zero-based class indices for a batch of maps, flattened in batch order.
    pub fn batch_indices(maps: &[LabelMap]) -> Vec<usize> {
        maps.iter()
            .flat_map(|m| m.data.iter().map(|&c| usize::from(c) - 1))
            .collect()
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(y as usize, x as usize) as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_owned(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::new(h, w, img.pixels().map(|p| u16::from(p[0])).collect()))
    }
}

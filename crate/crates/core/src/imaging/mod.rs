//! Images, resampling, tiling, PSNR and augmentation.

mod augment;
mod metrics;
mod resize;
mod tiles;

pub use augment::{augment, Augment};
pub use metrics::{mse, psnr, psnr_with, PsnrChannels, PSNR_CAP};
pub use resize::bicubic_resize;
pub use tiles::{axis_origins, decompose, recombine, TileGrid};

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (`[C, H, W]`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::clamped(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// The `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in top..top + h {
                data.extend_from_slice(&plane[y * self.width + left..y * self.width + left + w]);
            }
        }
        Ok(Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone())
            .expect("image length matches its dims")
    }

    /// Stacks same-sized images into `[N, C, H, W]`.
    pub fn batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(Error::shape(
                    "image batch",
                    format!("{}x{}x{} vs {h}x{w}x{c}", img.height, img.width, img.channels),
                ));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Sample `n` of an `[N, C, H, W]` tensor, clamped into `[0, 1]`.
    pub fn from_batch(t: &Tensor<f32>, n: usize) -> Result<Image> {
        let [_, c, h, w] = *t.shape() else {
            return Err(Error::shape("image", format!("expected NCHW, got {:?}", t.shape())));
        };
        let sample = t.slice_outer(n, 1)?;
        Image::clamped(h, w, c, sample.into_data())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: DynamicImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let to_unit = |v: u8| v as f32 / 255.0;
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = to_unit(p[c]);
                }
            }
            Image {
                height: h,
                width: w,
                channels: 3,
                data,
            }
        } else {
            let data = img.to_luma8().pixels().map(|p| to_unit(p[0])).collect();
            Image {
                height: h,
                width: w,
                channels: 1,
                data,
            }
        }
    }

    /// 8-bit quantization with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// The image as it reads back after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        let data = self.to_u8().into_iter().map(|v| v as f32 / 255.0).collect();
        Image { data, ..*self }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let plane = self.height * self.width;
        let dynamic = if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, q).expect("buffer size matches"))
        } else {
            let mut interleaved = Vec::with_capacity(q.len());
            for i in 0..plane {
                for c in 0..3 {
                    interleaved.push(q[c * plane + i]);
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, interleaved).expect("buffer size matches"))
        };
        dynamic.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

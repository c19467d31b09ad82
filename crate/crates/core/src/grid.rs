//! Plain row-major containers shared across modules: index grids, feature
//! grids and RGB images.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Row-major grid of code ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl IndexGrid {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != h * w {
            return domain(format!(
                "index grid {h}x{w} needs {} entries, got {}",
                h * w,
                data.len()
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u32) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.w + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks(self.w.max(1))
    }
}

/// Row-major grid of `dim`-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * dim {
            return domain(format!(
                "feature grid {h}x{w}x{dim} needs {} values, got {}",
                h * w * dim,
                data.len()
            ));
        }
        Ok(Self { h, w, dim, data })
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.w + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1))
    }

    /// (h·w, dim) tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.h * self.w, self.dim), device)?
            .to_dtype(dtype)?)
    }

    /// From an (h·w, dim) or (dim, h, w) tensor; `channels_first` selects the latter.
    pub fn from_tensor(t: &Tensor, h: usize, w: usize, channels_first: bool) -> Result<Self> {
        let t = if channels_first {
            let (c, th, tw) = t.dims3()?;
            if (th, tw) != (h, w) {
                return domain(format!("expected {h}x{w} map, got {th}x{tw}"));
            }
            t.reshape((c, h * w))?.t()?
        } else {
            t.clone()
        };
        let (n, dim) = t.dims2()?;
        if n != h * w {
            return domain(format!("expected {} rows, got {n}", h * w));
        }
        let data = t
            .to_dtype(DType::F32)?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, dim, data)
    }
}

/// An RGB image with values in `[0, 1]`, stored height × width × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return domain(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Stacks images of one size into a (B, 3, H, W) tensor.
    pub fn batch_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return domain("empty image batch");
        };
        let (h, w) = (first.height, first.width);
        let mut planar = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return domain(format!(
                    "batch mixes {h}x{w} with {}x{}",
                    img.height, img.width
                ));
            }
            for c in 0..3 {
                planar.extend((0..h * w).map(|p| img.data[p * 3 + c]));
            }
        }
        Ok(Tensor::from_vec(planar, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 {
            return domain(format!("expected 3 channels, got {c}"));
        }
        let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok((0..b)
            .map(|i| {
                let base = i * 3 * h * w;
                let data = (0..h * w)
                    .flat_map(|p| (0..3).map(move |c| (p, c)))
                    .map(|(p, c)| v[base + c * h * w + p])
                    .collect();
                Image {
                    height: h,
                    width: w,
                    data,
                }
            })
            .collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    /// Resizes with a Catmull-Rom (bicubic) filter.
    pub fn resize_bicubic(&self, height: usize, width: usize) -> Self {
        let raw: Vec<f32> = self.data.clone();
        let src = image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        let out = image::imageops::resize(
            &src,
            width as u32,
            height as u32,
            image::imageops::FilterType::CatmullRom,
        );
        Self {
            height,
            width,
            data: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Center-crops to `(h, w)` then resizes to `(th, tw)`.
    pub fn crop_resize(&self, x: usize, y: usize, w: usize, h: usize, th: usize, tw: usize) -> Self {
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        let cropped = Self {
            height: h,
            width: w,
            data,
        };
        if (h, w) == (th, tw) {
            cropped
        } else {
            cropped.resize_bicubic(th, tw)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let img = Image::new(2, 3, (0..18).map(|v| v as f32 / 18.0).collect()).unwrap();
        let t = Image::batch_to_tensor(std::slice::from_ref(&img), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        let back = Image::batch_from_tensor(&t).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn png_round_trip_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::filled(5, 7, [0.2, 0.4, 0.6]);
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!((back.height, back.width), (5, 7));
        assert!((back.data[0] - 0.2).abs() < 1.0 / 255.0);
    }
}

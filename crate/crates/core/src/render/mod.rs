//! Image buffers and the three renderers: tiled Gaussian splatting, z-buffer
//! mesh rasterization and a differentiable soft silhouette.

pub mod mesh;
pub mod silhouette;
pub mod splat;

use std::path::Path;

use crate::error::{Error, Result};

pub use mesh::{mesh_raster, MeshRender};
pub use silhouette::{soft_silhouette, soft_silhouette_taped, SilhouetteConfig};
pub use splat::{splat_render, splat_render_taped, SplatConfig};

/// Row-major interleaved floating-point image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::Shape(format!(
                "image sizes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let mut out = Image::new(w, h, c);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(x, y);
                let i = ((y / factor) * w + x / factor) * c;
                for k in 0..c {
                    out.data[i + k] += src[k] * norm;
                }
            }
        }
        Ok(out)
    }

    /// Writes an 8-bit PNG (gray for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Invalid(format!("cannot encode {c}-channel image"))),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Reads an 8-bit PNG into `[0, 1]` values with the requested channel count.
    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => img.to_luma8().into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            3 => img.to_rgb8().into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            c => return Err(Error::Invalid(format!("cannot decode into {c} channels"))),
        };
        Image::from_data(w, h, channels, data)
    }

    /// Quantizes to the 8-bit grid, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Color plus coverage produced by a renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTarget {
    pub color: Image,
    pub alpha: Image,
    pub background: [f64; 3],
}

impl RenderTarget {
    pub fn background(width: usize, height: usize, background: [f64; 3]) -> Self {
        RenderTarget {
            color: Image::filled(width, height, &background),
            alpha: Image::new(width, height, 1),
            background,
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

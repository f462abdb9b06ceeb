use std::path::Path;

use crate::error::{Error, Result};

/// Pixel count every frame is resized to before blurriness and motion are measured.
pub const WORKING_PIXELS: usize = 65_536;

/// An image with one (gray) or three (RGB) interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FrameImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width * height == 0 {
            return Err(Error::argument("frame must have at least one pixel"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::argument(format!(
                "frame must have 1 or 3 channels, got {channels}"
            )));
        }
        crate::error::ensure_dim(width * height * channels, data.len())?;
        Ok(FrameImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    /// Grayscale frame filled from `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        FrameImage {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Luma conversion `0.299 R + 0.587 G + 0.114 B`; gray frames are returned unchanged.
    pub fn to_gray(&self) -> FrameImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        FrameImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Bilinear resize with pixel-center alignment and clamped borders.
    pub fn resize(&self, width: usize, height: usize) -> FrameImage {
        let width = width.max(1);
        let height = height.max(1);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.at(x0, y0, c) * (1.0 - tx) + self.at(x1, y0, c) * tx;
                    let bottom = self.at(x0, y1, c) * (1.0 - tx) + self.at(x1, y1, c) * tx;
                    data.push(top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        FrameImage {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    /// Resizes so that `width * height` is as close to `pixels` as rounding
    /// allows while keeping the aspect ratio.
    pub fn resize_to_pixels(&self, pixels: usize) -> FrameImage {
        let (w, h) = working_size(self.width, self.height, pixels);
        self.resize(w, h)
    }

    pub fn open(path: &Path) -> Result<FrameImage> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::invalid(format!("{}: {other}", path.display())),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect();
        FrameImage::new(w as usize, h as usize, 3, data)
    }

    /// Saves as 8-bit PNG (or whatever format the extension names).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.channels == 3 {
            image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path))
        } else {
            image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path))
        };
        match result {
            Some(Ok(())) => Ok(()),
            Some(Err(image::ImageError::IoError(io))) => Err(Error::io(path, io)),
            Some(Err(e)) => Err(Error::invalid(format!("{}: {e}", path.display()))),
            None => Err(Error::invalid("frame buffer size mismatch")),
        }
    }
}

pub fn working_size(width: usize, height: usize, pixels: usize) -> (usize, usize) {
    let scale = (pixels as f64 / (width * height) as f64).sqrt();
    let w = ((width as f64 * scale).round() as usize).max(1);
    let h = ((height as f64 * scale).round() as usize).max(1);
    (w, h)
}

/// Image files in `dir` sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| {
                matches!(
                    e.to_ascii_lowercase().as_str(),
                    "png" | "jpg" | "jpeg" | "bmp"
                )
            })
            .unwrap_or(false);
        if is_image {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

//! In-memory images and single-channel maps, plus PNG and raw float I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Single-channel map (masks, opacities, uncertainties).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Clamp-to-edge lookup.
    #[inline]
    pub fn pixel_clamped(&self, x: isize, y: isize) -> [f32; 3] {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.pixel(cx, cy)
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Area-averaging downsample by an integer factor (trailing rows and
    /// columns that do not fill a block are dropped).
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set_pixel(x, y, acc.map(|v| v * norm));
            }
        }
        out
    }

    /// Columns `[x0, x1)` as a new image.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Image {
        let mut out = Image::new(x1 - x0, self.height);
        for y in 0..self.height {
            for x in x0..x1 {
                out.set_pixel(x - x0, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_owned(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// Raw dump: width, height, channels as u32 LE, then f32 LE values.
    pub fn write_f32(&self, path: &Path) -> Result<()> {
        write_raw(path, self.width, self.height, 3, &self.data)
    }

    pub fn read_f32(path: &Path) -> Result<Image> {
        let (width, height, channels, data) = read_raw(path)?;
        if channels != 3 {
            return Err(Error::Ingestion(format!(
                "{}: expected 3 channels, found {channels}",
                path.display()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }
}

impl GrayMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn downsample(&self, factor: usize) -> GrayMap {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = GrayMap::new(w, h);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.get(x * factor + dx, y * factor + dy);
                    }
                }
                out.set(x, y, acc * norm);
            }
        }
        out
    }

    /// Binary map: 1 where the value exceeds `threshold`.
    pub fn threshold(&self, threshold: f32) -> GrayMap {
        GrayMap {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn read_png(path: &Path) -> Result<GrayMap> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_owned(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(GrayMap {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn write_f32(&self, path: &Path) -> Result<()> {
        write_raw(path, self.width, self.height, 1, &self.data)
    }

    pub fn read_f32(path: &Path) -> Result<GrayMap> {
        let (width, height, channels, data) = read_raw(path)?;
        if channels != 1 {
            return Err(Error::Ingestion(format!(
                "{}: expected 1 channel, found {channels}",
                path.display()
            )));
        }
        Ok(GrayMap {
            width,
            height,
            data,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Shared layout for raw float dumps and `.feat` files: a header of
/// `height, width, channels` (u32 LE) then row-major channel-last f32 LE.
pub(crate) fn write_raw(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f32],
) -> Result<()> {
    assert_eq!(data.len(), width * height * channels);
    let mut bytes = Vec::with_capacity(12 + data.len() * 4);
    for v in [height, width, channels] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_raw(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Ingestion(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (word(0), word(1), word(2));
    let expected = 12 + height * width * channels * 4;
    if bytes.len() != expected {
        return Err(Error::Ingestion(format!(
            "{}: header says {height}x{width}x{channels} ({expected} bytes) but file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, channels, data))
}

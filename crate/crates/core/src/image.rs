//! Minimal HWC image type, geometric helpers and portable pixmap I/O.
//!
//! PPM is the only on-disk image format. Reading accepts `P3` (ASCII) and
//! `P6` (binary) with any `maxval` in `1..=65535`; writing always emits `P6`
//! with `maxval` 255.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Image with channel values in `[0, 1]`, stored row-major as `h × w × c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: &[f64]) -> Self {
        let channels = color.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(color);
        }
        Image {
            width,
            height,
            channels,
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

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear resample of the window `(x0, y0, w, h)` (in source pixel
    /// units, may be fractional) to `out_w × out_h`.
    pub fn crop_resize(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::filled(out_w, out_h, &vec![0.0; self.channels]);
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f64;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f64;
                for c in 0..self.channels {
                    let a = self.pixel(x_lo, y_lo)[c] * (1.0 - tx) + self.pixel(x_hi, y_lo)[c] * tx;
                    let b = self.pixel(x_lo, y_hi)[c] * (1.0 - tx) + self.pixel(x_hi, y_hi)[c] * tx;
                    out.pixel_mut(ox, oy)[c] = a * (1.0 - ty) + b * ty;
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(x, y).copy_from_slice(self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Encodes as binary `P6`; greyscale images are replicated to RGB.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in self.data.chunks(self.channels) {
            for c in 0..3 {
                let v = if self.channels >= 3 { px[c] } else { px[0] };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes)
    }

    /// Decodes a `P3` or `P6` pixmap into a 3-channel image.
    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let mut cursor = PpmCursor { bytes, pos: 0 };
        let binary = match cursor.token()? {
            b"P6" => true,
            b"P3" => false,
            other => {
                return Err(Error::format(
                    "ppm",
                    format!("unknown magic {:?}", String::from_utf8_lossy(other)),
                ))
            }
        };
        let width = cursor.number()?;
        let height = cursor.number()?;
        let maxval = cursor.number()?;
        if width == 0 || height == 0 {
            return Err(Error::format("ppm", "zero dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::format("ppm", format!("maxval {maxval} out of range")));
        }
        let count = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .filter(|&c| c <= 1 << 28)
            .ok_or_else(|| Error::format("ppm", "image too large"))?;
        let scale = maxval as f64;
        let mut data = Vec::with_capacity(count);
        if binary {
            // Exactly one whitespace byte separates the header from the raster.
            cursor.expect_whitespace()?;
            let wide = maxval > 255;
            let need = if wide { count * 2 } else { count };
            let raster = cursor.take(need)?;
            if wide {
                for pair in raster.chunks_exact(2) {
                    let v = u16::from_be_bytes([pair[0], pair[1]]) as usize;
                    data.push(sample(v, maxval, scale)?);
                }
            } else {
                for &b in raster {
                    data.push(sample(b as usize, maxval, scale)?);
                }
            }
        } else {
            for _ in 0..count {
                let v = cursor.number()?;
                data.push(sample(v, maxval, scale)?);
            }
        }
        Image::new(width, height, 3, data)
    }
}

fn sample(v: usize, maxval: usize, scale: f64) -> Result<f64> {
    if v > maxval {
        return Err(Error::format("ppm", format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(v as f64 / scale)
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("ppm", "unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        if tok.len() > 9 || !tok.iter().all(u8::is_ascii_digit) {
            return Err(Error::format(
                "ppm",
                format!("expected a number, got {:?}", String::from_utf8_lossy(tok)),
            ));
        }
        Ok(tok.iter().fold(0, |acc, d| acc * 10 + (d - b'0') as usize))
    }

    fn expect_whitespace(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::format("ppm", "missing separator before raster")),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                "ppm",
                format!("raster truncated: need {n} bytes, have {}", self.bytes.len() - self.pos),
            )),
        }
    }
}

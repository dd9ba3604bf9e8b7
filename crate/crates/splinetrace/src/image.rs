//! Grayscale images and binary PGM (P5) I/O.
//!
//! Pixel values are `f64` in [0,1], row-major. Normalized coordinates map
//! (x, y) in [0,1]^2 onto columns and rows respectively, y growing downward.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in [0,1].
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn clamp_in_place(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Encode as 8-bit binary PGM (P5).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        out.extend_from_slice(format!("P5\n{} {}\n255\n", self.width, self.height).as_bytes());
        for p in &self.pixels {
            out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_pgm_bytes())?;
        Ok(())
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::new();
        // header: magic, width, height, maxval, each separated by whitespace
        // (comments starting with '#' are allowed per the format)
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated pgm header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
                Error::Format("non-utf8 pgm header".into())
            })?);
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected P5 magic, got {}", fields[0])));
        }
        let width: usize = fields[1].parse().map_err(|_| Error::Format("bad width".into()))?;
        let height: usize = fields[2].parse().map_err(|_| Error::Format("bad height".into()))?;
        let maxval: usize = fields[3].parse().map_err(|_| Error::Format("bad maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height;
        if bytes.len() < pos + need {
            return Err(Error::Format("truncated pgm pixel data".into()));
        }
        let pixels = bytes[pos..pos + need]
            .iter()
            .map(|b| f64::from(*b) / 255.0)
            .collect();
        Ok(GrayImage { width, height, pixels })
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_pgm_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let mut img = GrayImage::new(7, 5);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i % 256) as f64 / 255.0;
        }
        let back = GrayImage::from_pgm_bytes(&img.to_pgm_bytes()).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_rejects_bad_magic() {
        assert!(GrayImage::from_pgm_bytes(b"P2\n2 2\n255\n....").is_err());
    }
}

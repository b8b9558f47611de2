//! Single-channel intensity images and binary PGM (P5) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Mat;

/// Row-major grid of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel intensity outside [0,1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.pixels[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    /// Rounds every pixel to the nearest multiple of 1/255 so the image
    /// survives a PGM round trip unchanged.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (*p * 255.0).round() / 255.0;
        }
    }

    /// `(h*w) x 1` feature map for the visual encoder.
    pub fn as_column(&self) -> Mat {
        Mat::from_shape_vec((self.pixels.len(), 1), self.pixels.clone())
            .expect("pixel count matches shape")
    }

    /// Mean intensity over a rectangle `[y0, y1) x [x0, x1)`.
    pub fn region_mean(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += self.get(y, x);
            }
        }
        sum / ((y1 - y0) * (x1 - x0)) as f64
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
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
                return Err(Error::Data("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Data(format!("expected P5 magic, got '{}'", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad PGM header field '{s}'")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| Error::Data("truncated PGM raster".into()))?;
        let pixels = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
        ImageGrid::new(height, width, pixels)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let mut img = ImageGrid::new(2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        img.quantize();
        let back = ImageGrid::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = ImageGrid::from_pgm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ImageGrid::from_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(ImageGrid::from_pgm(b"P5\n4 4\n255\n\x00").is_err());
        assert!(ImageGrid::new(1, 1, vec![1.5]).is_err());
    }
}

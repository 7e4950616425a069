//! Grayscale / color image carriers and 8-bit PNG, PGM (P5) and PPM (P6)
//! codecs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png codec: {0}")]
    Png(#[from] ::image::ImageError),
    #[error("malformed netpbm file: {0}")]
    Netpbm(String),
    #[error("image dimensions must be positive and match the pixel count")]
    Dimensions,
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImageError::Dimensions);
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::Dimensions);
        }
        Self::new(width, height, data.iter().map(|&v| v as f32 / 255.0).collect())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// `i + 0.5`), clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - ax) + self.get(x1, y0) * ax;
        let bot = self.get(x0, y1) * (1.0 - ax) + self.get(x1, y1) * ax;
        top * (1.0 - ay) + bot * ay
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// Rounds every pixel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.pixels.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.pixels.len() as f64).sqrt()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_u8())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let (w, h, data) = read_netpbm(path, "P5", 1)?;
        Self::from_u8(w, h, &data)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = ::image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or(ImageError::Dimensions)?;
        buf.save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    /// Reads any PNG and converts it to luma.
    pub fn read_png(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path)?;
        match img {
            ::image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::from_u8(w as usize, h as usize, g.as_raw())
            }
            other => Ok(ColorImage::from_rgb8(&other.to_rgb8())?.to_gray()),
        }
    }

    /// Dispatches on extension: `.pgm`, `.ppm` or PNG otherwise.
    pub fn read_any(path: &Path) -> Result<Self, ImageError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("pgm") => Self::read_pgm(path),
            Some("ppm") => Ok(ColorImage::read_ppm(path)?.to_gray()),
            _ => Self::read_png(path),
        }
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImageError::Dimensions);
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    fn from_rgb8(img: &::image::RgbImage) -> Result<Self, ImageError> {
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
            .collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// Luma with weights 0.299 / 0.587 / 0.114.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|c| (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).clamp(0.0, 1.0))
                .collect(),
        }
    }

    fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|c| c.map(quantize)).collect()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_u8())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let (w, h, data) = read_netpbm(path, "P6", 3)?;
        let pixels = data
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        Self::new(w, h, pixels)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or(ImageError::Dimensions)?;
        buf.save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
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
            return Err(ImageError::Netpbm("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != magic {
        return Err(ImageError::Netpbm(format!("expected {magic}, found {}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Netpbm(format!("bad header value {s}")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(ImageError::Netpbm(format!("only maxval 255 supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(ImageError::Netpbm("truncated raster".into()));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrayImage::from_fn(7, 5, |x, y| ((x * 37 + y * 11) % 256) as f32 / 255.0);
        let p = dir.path().join("g.pgm");
        g.write_pgm(&p).unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap(), g);
        let c = ColorImage::new(3, 2, (0..6).map(|i| [i as f32 / 255.0, 0.5, 1.0]).collect()).unwrap();
        let p = dir.path().join("c.ppm");
        c.write_ppm(&p).unwrap();
        let back = ColorImage::read_ppm(&p).unwrap();
        assert_eq!(back.to_u8(), c.to_u8());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrayImage::from_fn(9, 4, |x, y| ((x + y) * 20) as f32 / 255.0);
        let p = dir.path().join("g.png");
        g.write_png(&p).unwrap();
        assert_eq!(GrayImage::read_any(&p).unwrap(), g);
    }

    #[test]
    fn luma_weights() {
        let c = ColorImage::new(1, 1, vec![[1.0, 0.0, 0.0]]).unwrap();
        assert!((c.to_gray().get(0, 0) - 0.299).abs() < 1e-7);
        let c = ColorImage::new(1, 1, vec![[1.0, 1.0, 1.0]]).unwrap();
        assert!((c.to_gray().get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::new(0, 2, vec![]).is_err());
    }
}

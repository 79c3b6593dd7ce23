//! 8-bit RGB images: PPM and PNG files, conversion to network input and mask
//! overlays.

use std::io::{BufRead, Write};

use crate::error::{invalid, Error, Result};
use crate::mask::{palette_color, PanopticMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, h, w]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::lit(f64::from(px[c]) / 255.0);
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("sized above")
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)?;
        Ok(())
    }

    /// Reads a binary (P6) PPM with maxval 255.
    pub fn read_ppm<R: BufRead>(mut input: R) -> Result<Self> {
        let mut fields = Vec::new();
        let mut token = Vec::new();
        let mut byte = [0u8; 1];
        while fields.len() < 4 {
            input.read_exact(&mut byte)?;
            match byte[0] {
                b'#' if token.is_empty() => {
                    let mut skip = String::new();
                    input.read_line(&mut skip)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        fields.push(String::from_utf8_lossy(&token).into_owned());
                        token.clear();
                    }
                }
                c => token.push(c),
            }
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!(
                "expected a P6 PPM, found {}",
                fields[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(Error::Format(format!(
                "only 8-bit PPM is supported, maxval {max}"
            )));
        }
        let mut data = vec![0u8; w * h * 3];
        input.read_exact(&mut data)?;
        Self::new(w, h, data)
    }

    pub fn write_png<W: Write>(&self, out: W) -> Result<()> {
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&self.data)
            .map_err(|e| Error::Png(e.to_string()))?;
        w.finish().map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }
}

/// Palette rendering of a mask.
pub fn colorize(mask: &PanopticMask) -> RgbImage {
    let mut img = RgbImage::filled(mask.width(), mask.height(), [0, 0, 0]);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let (c, k) = mask.get(y, x);
            img.put(y, x, palette_color(c, k));
        }
    }
    img
}

/// `alpha * palette + (1 - alpha) * image`, per pixel.
pub fn overlay(image: &RgbImage, mask: &PanopticMask, alpha: f64) -> Result<RgbImage> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(invalid(format!(
            "overlay: image is {}x{}, mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let colors = colorize(mask);
    let data = image
        .data()
        .iter()
        .zip(colors.data())
        .map(|(&a, &b)| (alpha * f64::from(b) + (1.0 - alpha) * f64::from(a)).round() as u8)
        .collect();
    RgbImage::new(image.width(), image.height(), data)
}

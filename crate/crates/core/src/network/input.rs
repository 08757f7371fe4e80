//! Image ingestion and the input pipeline in front of the stem.

use std::path::Path;

use crate::bitcore::RealTensor;
use crate::error::{Error, Result};

/// Appends a 4th channel holding the per-pixel mean of R, G and B.
pub fn add_intensity_channel(img: &RealTensor) -> Result<RealTensor> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape(&[3, h, w], img.shape()));
    }
    let hw = h * w;
    let v = img.values();
    let mut out = Vec::with_capacity(4 * hw);
    out.extend_from_slice(v);
    out.extend((0..hw).map(|p| (v[p] + v[hw + p] + v[2 * hw + p]) / 3.0));
    RealTensor::new(vec![4, h, w], out)
}

/// Per-channel `(x - mean) / std` for RGB; the intensity channel uses the
/// average of the RGB constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn channel(&self, c: usize) -> (f32, f32) {
        if c < 3 {
            (self.mean[c], self.std[c])
        } else {
            (
                self.mean.iter().sum::<f32>() / 3.0,
                self.std.iter().sum::<f32>() / 3.0,
            )
        }
    }

    pub fn apply(&self, x: &mut RealTensor) -> Result<()> {
        let (c, h, w) = x.chw()?;
        let hw = h * w;
        for ch in 0..c {
            let (m, s) = self.channel(ch);
            for v in &mut x.values_mut()[ch * hw..(ch + 1) * hw] {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

/// Raw RGB `[0, 1]` image to the normalized 4-channel network input.
pub fn preprocess(rgb: &RealTensor, norm: &Normalization) -> Result<RealTensor> {
    let mut x = add_intensity_channel(rgb)?;
    norm.apply(&mut x)?;
    Ok(x)
}

/// Decodes a PNG or PPM/PGM file into a `3 x H x W` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<RealTensor> {
    let path = path.as_ref();
    let format = image::ImageFormat::from_path(path)
        .map_err(|_| Error::Data(format!("{}: unsupported image type (PNG or PPM only)", path.display())))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::Data(format!(
            "{}: unsupported image type (PNG or PPM only)",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    RealTensor::new(vec![3, h, w], out)
}

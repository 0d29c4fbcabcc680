//! Visual inputs for each region: the crop, the image blurred everywhere except
//! the region, and a mirror-padded square crop, all resized to the encoder's
//! square input resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Encoder};
use crate::embedding::{EmbeddingError, RegionRepresentation};
use crate::scene::{BBox, SceneError};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("pixel buffer holds {actual} bytes, expected {expected} for {width}x{height} RGB")]
    BufferSize {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error(transparent)]
    Bounds(#[from] SceneError),
    #[error("invalid imaging config: {0}")]
    Config(String),
    #[error("encoder failed: {0}")]
    Encoder(#[from] BackendError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Row-major 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BufferSize {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.iter().copied().cycle().take(n * 3).collect())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Paints `bbox` with a solid color.
    pub fn fill_rect(&mut self, bbox: BBox, rgb: [u8; 3]) -> Result<(), ImagingError> {
        bbox.check_bounds(self.width, self.height)?;
        for y in bbox.y..bbox.y + bbox.h {
            for x in bbox.x..bbox.x + bbox.w {
                self.set(x, y, rgb);
            }
        }
        Ok(())
    }

    /// The pixels under `bbox`, at native resolution.
    pub fn sub_image(&self, bbox: BBox) -> Result<Image, ImagingError> {
        bbox.check_bounds(self.width, self.height)?;
        let mut pixels = Vec::with_capacity(bbox.area() as usize * 3);
        for y in bbox.y..bbox.y + bbox.h {
            let start = self.offset(bbox.x, y);
            pixels.extend_from_slice(&self.pixels[start..start + bbox.w as usize * 3]);
        }
        Image::new(bbox.w, bbox.h, pixels)
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Result<Image, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = sample_positions(self.width, width);
        let ys = sample_positions(self.height, height);
        let mut out = Vec::with_capacity(width as usize * height as usize * 3);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let p00 = self.get(x0, y0);
                let p10 = self.get(x1, y0);
                let p01 = self.get(x0, y1);
                let p11 = self.get(x1, y1);
                for c in 0..3 {
                    let top = (1.0 - wx) * p00[c] as f64 + wx * p10[c] as f64;
                    let bottom = (1.0 - wx) * p01[c] as f64 + wx * p11[c] as f64;
                    out.push(quantize((1.0 - wy) * top + wy * bottom));
                }
            }
        }
        Image::new(width, height, out)
    }
}

/// For each output coordinate: the two source taps and the weight of the second.
fn sample_positions(src: u32, dst: u32) -> Vec<(u32, u32, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = pos.floor();
            let i0 = lo as u32;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - lo)
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    /// Samples outside the image repeat the nearest edge pixel.
    #[default]
    Clamp,
}

/// Which views feed a [`RegionRepresentation`]. Single-view modes put the same
/// embedding in both slots, so the crop/blur mix weight has no effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationMode {
    #[default]
    CropBlur,
    Blur,
    Mirror,
    Crop,
}

impl RepresentationMode {
    pub const ALL: [RepresentationMode; 4] = [
        RepresentationMode::CropBlur,
        RepresentationMode::Blur,
        RepresentationMode::Mirror,
        RepresentationMode::Crop,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RepresentationMode::CropBlur => "crop-blur",
            RepresentationMode::Blur => "blur",
            RepresentationMode::Mirror => "mirror",
            RepresentationMode::Crop => "crop",
        }
    }
}

impl std::str::FromStr for RepresentationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown representation `{s}` (expected crop-blur, blur, mirror or crop)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagingConfig {
    /// Side of the square encoder input.
    pub encoder_resolution: u32,
    pub blur_sigma: f64,
    pub border_mode: BorderMode,
    pub representation: RepresentationMode,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            encoder_resolution: 224,
            blur_sigma: 10.0,
            border_mode: BorderMode::Clamp,
            representation: RepresentationMode::CropBlur,
        }
    }
}

impl ImagingConfig {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.encoder_resolution == 0 {
            return Err(ImagingError::Config("encoder_resolution must be at least 1".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(ImagingError::Config(format!(
                "blur_sigma must be finite and non-negative, got {}",
                self.blur_sigma
            )));
        }
        Ok(())
    }

    fn resize_to_encoder(&self, image: &Image) -> Result<Image, ImagingError> {
        image.resize_bilinear(self.encoder_resolution, self.encoder_resolution)
    }
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(3σ)`.
/// `σ = 0` gives the identity kernel `[1.0]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur of the whole image at native resolution, clamping
/// at the borders. Intermediate values stay in `f64`; each channel is rounded
/// once at the end.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return image.clone();
    }
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (image.width as i64, image.height as i64);
    let src = image.pixels();

    let mut horizontal = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, weight) in kernel.iter().enumerate() {
                let sx = (x + t as i64 - radius).clamp(0, w - 1);
                let o = ((y * w + sx) * 3) as usize;
                for c in 0..3 {
                    acc[c] += weight * src[o + c] as f64;
                }
            }
            let o = ((y * w + x) * 3) as usize;
            horizontal[o..o + 3].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, weight) in kernel.iter().enumerate() {
                let sy = (y + t as i64 - radius).clamp(0, h - 1);
                let o = ((sy * w + x) * 3) as usize;
                for c in 0..3 {
                    acc[c] += weight * horizontal[o + c];
                }
            }
            let o = ((y * w + x) * 3) as usize;
            for c in 0..3 {
                out[o + c] = quantize(acc[c]);
            }
        }
    }
    Image {
        width: image.width,
        height: image.height,
        pixels: out,
    }
}

/// Blurs the whole image, then pastes the original pixels inside `bbox` back
/// unchanged. Native resolution; see [`blur_except`] for the encoder input.
pub fn blur_outside(image: &Image, bbox: BBox, sigma: f64) -> Result<Image, ImagingError> {
    bbox.check_bounds(image.width, image.height)?;
    let mut out = gaussian_blur(image, sigma);
    let row_bytes = bbox.w as usize * 3;
    for y in bbox.y..bbox.y + bbox.h {
        let o = image.offset(bbox.x, y);
        out.pixels[o..o + row_bytes].copy_from_slice(&image.pixels[o..o + row_bytes]);
    }
    Ok(out)
}

/// The bbox sub-image stretched to the encoder's square input.
pub fn crop_region(image: &Image, bbox: BBox, cfg: &ImagingConfig) -> Result<Image, ImagingError> {
    cfg.validate()?;
    cfg.resize_to_encoder(&image.sub_image(bbox)?)
}

/// The whole image blurred except inside `bbox`, resized to the encoder input.
pub fn blur_except(image: &Image, bbox: BBox, cfg: &ImagingConfig) -> Result<Image, ImagingError> {
    cfg.validate()?;
    cfg.resize_to_encoder(&blur_outside(image, bbox, cfg.blur_sigma)?)
}

/// Symmetric reflection of `i` into `[0, n)`, repeating the edge sample:
/// `0 1 .. n-1 n-1 .. 1 0 0 1 ..`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    let p = i % (2 * n);
    if p < n {
        p
    } else {
        2 * n - 1 - p
    }
}

/// Squares a crop by reflecting its content past the bottom (wide crops) or
/// right (tall crops) edge, at native resolution.
pub fn mirror_pad_square(crop: &Image) -> Image {
    let side = crop.width.max(crop.height);
    if crop.width == crop.height {
        return crop.clone();
    }
    let mut pixels = Vec::with_capacity(side as usize * side as usize * 3);
    for y in 0..side {
        let sy = reflect_index(y as usize, crop.height as usize) as u32;
        for x in 0..side {
            let sx = reflect_index(x as usize, crop.width as usize) as u32;
            pixels.extend_from_slice(&crop.get(sx, sy));
        }
    }
    Image {
        width: side,
        height: side,
        pixels,
    }
}

/// Crop, mirror-pad the short axis to a square, resize to the encoder input.
pub fn mirror_pad_crop(
    image: &Image,
    bbox: BBox,
    cfg: &ImagingConfig,
) -> Result<Image, ImagingError> {
    cfg.validate()?;
    cfg.resize_to_encoder(&mirror_pad_square(&image.sub_image(bbox)?))
}

/// Encodes the views selected by `cfg.representation` for one region.
pub fn represent_region(
    image: &Image,
    bbox: BBox,
    cfg: &ImagingConfig,
    encoder: &dyn Encoder,
) -> Result<RegionRepresentation, ImagingError> {
    let (crop_emb, blur_emb) = match cfg.representation {
        RepresentationMode::CropBlur => (
            encoder.encode_image(&crop_region(image, bbox, cfg)?)?,
            encoder.encode_image(&blur_except(image, bbox, cfg)?)?,
        ),
        single => {
            let view = match single {
                RepresentationMode::Blur => blur_except(image, bbox, cfg)?,
                RepresentationMode::Mirror => mirror_pad_crop(image, bbox, cfg)?,
                _ => crop_region(image, bbox, cfg)?,
            };
            let emb = encoder.encode_image(&view)?;
            (emb.clone(), emb)
        }
    };
    Ok(RegionRepresentation::new(crop_emb, blur_emb)?)
}

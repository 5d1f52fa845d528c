//! The universal image carrier: a W x H x L float cube.

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Image cube with band-sequential storage, row-major within each band
/// (L = 1 for panchromatic images). Values are nominally in [0,1]; file
/// ingestion clamps into that range, in-memory pipeline stages may overshoot
/// transiently (bicubic ringing) and clamp at their public outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterVolume {
    width: usize,
    height: usize,
    bands: usize,
    pixels: Vec<f32>,
}

impl RasterVolume {
    pub fn new(width: usize, height: usize, bands: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(CoreError::contract(format!(
                "raster dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        let want = width * height * bands;
        if pixels.len() != want {
            return Err(CoreError::shape(
                "RasterVolume::new",
                format!("{width}x{height}x{bands} wants {want} pixel(s), got {}", pixels.len()),
            ));
        }
        Ok(RasterVolume {
            width,
            height,
            bands,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        Self::filled(width, height, bands, 0.0)
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: f32) -> Self {
        Self::new(width, height, bands, vec![value; width * height * bands]).expect("positive dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, band: usize) -> usize {
        (band * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> f32 {
        self.pixels[self.index(x, y, band)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, band: usize, value: f32) {
        let i = self.index(x, y, band);
        self.pixels[i] = value;
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.pixels[band * plane..(band + 1) * plane]
    }

    /// Copies one band out as a single-band raster.
    pub fn band_volume(&self, band: usize) -> Result<RasterVolume> {
        if band >= self.bands {
            return Err(CoreError::contract(format!(
                "band {band} out of range for {} band(s)",
                self.bands
            )));
        }
        RasterVolume::new(self.width, self.height, 1, self.band(band).to_vec())
    }

    /// Rectangular sub-volume (all bands).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RasterVolume> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(CoreError::contract(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * self.bands);
        for b in 0..self.bands {
            for y in y0..y0 + h {
                let row = self.index(x0, y, b);
                pixels.extend_from_slice(&self.pixels[row..row + w]);
            }
        }
        RasterVolume::new(w, h, self.bands, pixels)
    }

    /// Clamps all pixels into [0,1]; returns how many were changed.
    pub fn clamp_unit(&mut self) -> usize {
        let mut clamped = 0;
        for p in self.pixels.iter_mut() {
            let c = p.clamp(0.0, 1.0);
            if c != *p {
                *p = c;
                clamped += 1;
            }
        }
        clamped
    }

    /// The band-sequential layout coincides with a row-major [L,H,W] tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .pixels
            .iter()
            .map(|&v| T::from_f32(v).expect("f32 fits"))
            .collect();
        Tensor::new(&[self.bands, self.height, self.width], data).expect("raster shape")
    }

    /// Inverse of [`RasterVolume::to_tensor`]; narrows to f32.
    pub fn from_tensor<T: Scalar>(tensor: &Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 {
            return Err(CoreError::shape(
                "RasterVolume::from_tensor",
                format!("rank {} (want [bands, height, width])", s.len()),
            ));
        }
        let pixels = tensor
            .data()
            .iter()
            .map(|&v| v.to_f32().expect("finite"))
            .collect();
        RasterVolume::new(s[2], s[1], s[0], pixels)
    }
}

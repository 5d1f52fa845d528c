//! Bicubic resampling and the reduced-resolution degradation protocol.
//!
//! Conventions (fixed so oracles reproduce): Keys cubic convolution kernel
//! with a = -0.5, half-pixel sample centers, clamp-to-edge boundaries, and a
//! widened renormalized kernel for anti-aliased downsampling. Arithmetic runs
//! in f64 per output sample; nothing in this module clamps, so resampling is
//! linear and callers clamp at pipeline boundaries only.

use crate::error::CoreError;
use crate::raster::RasterVolume;
use crate::Result;

/// Default Keys kernel parameter.
pub const KERNEL_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// A resampling recipe: integer scale factor, direction and kernel parameter.
#[derive(Debug, Clone, Copy)]
pub struct ResamplePlan {
    pub scale: usize,
    pub direction: Direction,
    pub kernel_a: f64,
}

impl ResamplePlan {
    pub fn up(scale: usize) -> Self {
        ResamplePlan {
            scale,
            direction: Direction::Up,
            kernel_a: KERNEL_A,
        }
    }

    pub fn down(scale: usize) -> Self {
        ResamplePlan {
            scale,
            direction: Direction::Down,
            kernel_a: KERNEL_A,
        }
    }

    pub fn apply(&self, img: &RasterVolume) -> Result<RasterVolume> {
        match self.direction {
            Direction::Up => upsample_bicubic_with(img, self.scale, self.kernel_a),
            Direction::Down => downsample_bicubic_with(img, self.scale, self.kernel_a),
        }
    }
}

/// Keys piecewise cubic: (a+2)|t|^3-(a+3)|t|^2+1 on |t|<=1,
/// a|t|^3-5a|t|^2+8a|t|-4a on 1<|t|<2, else 0.
pub fn cubic_kernel(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample taps and weights of one 1D pass.
/// Upsampling: 4 taps, unit weights sum (partition of unity).
/// Downsampling: support widened by s and weights renormalized to sum 1.
fn line_taps(dst: usize, n_src: usize, scale: usize, up: bool, a: f64) -> (isize, Vec<f64>) {
    let s = scale as f64;
    if up {
        let src = (dst as f64 + 0.5) / s - 0.5;
        let base = src.floor() as isize - 1;
        let weights = (0..4)
            .map(|k| cubic_kernel(src - (base + k as isize) as f64, a))
            .collect();
        (base, weights)
    } else {
        let src = (dst as f64 + 0.5) * s - 0.5;
        let lo = (src - 2.0 * s).ceil() as isize;
        let hi = (src + 2.0 * s).floor() as isize;
        let mut weights: Vec<f64> = (lo..=hi)
            .map(|k| cubic_kernel((src - k as f64) / s, a))
            .collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let _ = n_src;
        (lo, weights)
    }
}

/// One separable pass along x for every row of every band.
fn resample_axis_x(
    src: &[f64],
    w_in: usize,
    rows: usize,
    w_out: usize,
    scale: usize,
    up: bool,
    a: f64,
) -> Vec<f64> {
    let taps: Vec<(isize, Vec<f64>)> = (0..w_out)
        .map(|x| line_taps(x, w_in, scale, up, a))
        .collect();
    let mut out = vec![0.0f64; rows * w_out];
    for r in 0..rows {
        let row = &src[r * w_in..(r + 1) * w_in];
        let orow = &mut out[r * w_out..(r + 1) * w_out];
        for (x, (base, weights)) in taps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &wgt) in weights.iter().enumerate() {
                let idx = (base + k as isize).clamp(0, w_in as isize - 1) as usize;
                acc += wgt * row[idx];
            }
            orow[x] = acc;
        }
    }
    out
}

fn resample_band(
    band: &[f32],
    w_in: usize,
    h_in: usize,
    scale: usize,
    up: bool,
    a: f64,
) -> Vec<f32> {
    let (w_out, h_out) = if up {
        (w_in * scale, h_in * scale)
    } else {
        (w_in / scale, h_in / scale)
    };
    let src: Vec<f64> = band.iter().map(|&v| v as f64).collect();
    // X pass, then transpose, Y pass as another X pass, transpose back.
    let xed = resample_axis_x(&src, w_in, h_in, w_out, scale, up, a);
    let mut t = vec![0.0f64; w_out * h_in];
    for y in 0..h_in {
        for x in 0..w_out {
            t[x * h_in + y] = xed[y * w_out + x];
        }
    }
    let yed = resample_axis_x(&t, h_in, w_out, h_out, scale, up, a);
    let mut out = vec![0.0f32; w_out * h_out];
    for x in 0..w_out {
        for y in 0..h_out {
            out[y * w_out + x] = yed[x * h_out + y] as f32;
        }
    }
    out
}

fn upsample_bicubic_with(img: &RasterVolume, scale: usize, a: f64) -> Result<RasterVolume> {
    if scale < 2 {
        return Err(CoreError::contract(format!(
            "upsample scale must be >= 2, got {scale}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut pixels = Vec::with_capacity(w * scale * h * scale * img.bands());
    for b in 0..img.bands() {
        pixels.extend(resample_band(img.band(b), w, h, scale, true, a));
    }
    RasterVolume::new(w * scale, h * scale, img.bands(), pixels)
}

fn downsample_bicubic_with(img: &RasterVolume, scale: usize, a: f64) -> Result<RasterVolume> {
    if scale < 2 {
        return Err(CoreError::contract(format!(
            "downsample scale must be >= 2, got {scale}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    if w % scale != 0 || h % scale != 0 {
        return Err(CoreError::contract(format!(
            "downsample by {scale} needs dimensions divisible by {scale}; \
             {w}x{h} would need {}x{} of padding",
            (scale - w % scale) % scale,
            (scale - h % scale) % scale
        )));
    }
    let mut pixels = Vec::with_capacity((w / scale) * (h / scale) * img.bands());
    for b in 0..img.bands() {
        pixels.extend(resample_band(img.band(b), w, h, scale, false, a));
    }
    RasterVolume::new(w / scale, h / scale, img.bands(), pixels)
}

/// Separable bicubic enlargement by an integer factor (half-pixel centers,
/// clamp-to-edge).
pub fn upsample_bicubic(img: &RasterVolume, scale: usize) -> Result<RasterVolume> {
    upsample_bicubic_with(img, scale, KERNEL_A)
}

/// Anti-aliased bicubic reduction by an integer factor: kernel support and
/// argument scaled by the factor, weights renormalized per output pixel.
pub fn downsample_bicubic(img: &RasterVolume, scale: usize) -> Result<RasterVolume> {
    downsample_bicubic_with(img, scale, KERNEL_A)
}

/// Reduced-resolution protocol: degrade the HR MS cube so the original pair
/// can serve as ground truth. Returns (ms_lr, pan, gt).
pub fn wald_degrade(
    ms_hr: &RasterVolume,
    pan_hr: &RasterVolume,
    scale: usize,
) -> Result<(RasterVolume, RasterVolume, RasterVolume)> {
    if pan_hr.bands() != 1 {
        return Err(CoreError::contract(format!(
            "panchromatic image must have 1 band, got {}",
            pan_hr.bands()
        )));
    }
    if ms_hr.width() != pan_hr.width() || ms_hr.height() != pan_hr.height() {
        return Err(CoreError::shape(
            "wald_degrade",
            format!(
                "co-registered HR pair required: MS {}x{} vs PAN {}x{}",
                ms_hr.width(),
                ms_hr.height(),
                pan_hr.width(),
                pan_hr.height()
            ),
        ));
    }
    let ms_lr = downsample_bicubic(ms_hr, scale)?;
    Ok((ms_lr, pan_hr.clone(), ms_hr.clone()))
}

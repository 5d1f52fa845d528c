//! Procedural synthetic scenes for demos, self-checks and regression runs.
//!
//! Each scene is a band cube with smooth per-band backgrounds plus a shared
//! high-frequency texture field scaled by per-band gains, and a PAN image
//! that is a convex combination of the bands. The fine texture survives in
//! the PAN but not in a downsampled MS cube, which is exactly the structure
//! pansharpening is supposed to recover.

use crate::raster::RasterVolume;
use crate::rng::Xorshift64Star;

/// Generates a correlated (MS, PAN) pair of the given HR geometry.
pub fn gen_scene(width: usize, height: usize, bands: usize, seed: u64) -> (RasterVolume, RasterVolume) {
    let mut rng = Xorshift64Star::new(seed);

    // Shared fine texture: a few oriented sinusoids with short periods.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.uniform(0.0, std::f64::consts::PI);
            let period = rng.uniform(3.0, 8.0);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let amp = rng.uniform(0.6, 1.0);
            (angle, period, phase, amp)
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.3).sum();
    let detail = |x: f64, y: f64| -> f64 {
        waves
            .iter()
            .map(|&(angle, period, phase, amp)| {
                let u = x * angle.cos() + y * angle.sin();
                amp * (std::f64::consts::TAU * u / period + phase).sin()
            })
            .sum::<f64>()
            / amp_total
    };

    // Per-band smooth backgrounds and texture gains.
    struct Band {
        offset: f64,
        gain: f64,
        lows: Vec<(f64, f64, f64, f64)>,
    }
    let band_specs: Vec<Band> = (0..bands)
        .map(|_| Band {
            offset: rng.uniform(0.4, 0.6),
            gain: rng.uniform(0.12, 0.22),
            lows: (0..3)
                .map(|_| {
                    let angle = rng.uniform(0.0, std::f64::consts::PI);
                    let period = rng.uniform(width as f64 / 4.0, width as f64 / 1.5);
                    let phase = rng.uniform(0.0, std::f64::consts::TAU);
                    let amp = rng.uniform(0.02, 0.05);
                    (angle, period, phase, amp)
                })
                .collect(),
        })
        .collect();

    let mut weights: Vec<f64> = (0..bands).map(|_| rng.uniform(0.5, 1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);

    let mut ms = RasterVolume::zeros(width, height, bands);
    let mut pan = RasterVolume::zeros(width, height, 1);
    for y in 0..height {
        for x in 0..width {
            let d = detail(x as f64, y as f64);
            let mut pan_value = 0.0;
            for (b, spec) in band_specs.iter().enumerate() {
                let low: f64 = spec
                    .lows
                    .iter()
                    .map(|&(angle, period, phase, amp)| {
                        let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                        amp * (std::f64::consts::TAU * u / period + phase).sin()
                    })
                    .sum();
                let v = (spec.offset + low + spec.gain * d).clamp(0.05, 0.95);
                ms.set(x, y, b, v as f32);
                pan_value += weights[b] * v;
            }
            pan.set(x, y, 0, pan_value as f32);
        }
    }
    (ms, pan)
}

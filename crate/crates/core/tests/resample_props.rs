//! Resampling contracts: kernel identities, polynomial reproduction, direct
//! 2D tap oracles, linearity, and the degradation protocol.

use pansharp_core::raster::RasterVolume;
use pansharp_core::resample::{
    cubic_kernel, downsample_bicubic, upsample_bicubic, wald_degrade, KERNEL_A,
};
use pansharp_core::rng::Xorshift64Star;

fn make_band(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f32) -> RasterVolume {
    let mut r = RasterVolume::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            r.set(x, y, 0, f(x, y));
        }
    }
    r
}

// ---------------------------------------------------------------------------
// kernel identities
// ---------------------------------------------------------------------------

#[test]
fn kernel_knots() {
    assert_eq!(cubic_kernel(0.0, KERNEL_A), 1.0);
    assert_eq!(cubic_kernel(1.0, KERNEL_A), 0.0);
    assert_eq!(cubic_kernel(-1.0, KERNEL_A), 0.0);
    assert_eq!(cubic_kernel(2.0, KERNEL_A), 0.0);
    assert_eq!(cubic_kernel(2.5, KERNEL_A), 0.0);
}

#[test]
fn kernel_partition_of_unity_over_grid() {
    // 1000-point grid; the four (or three) taps inside the support must sum
    // to one to 1e-12.
    for i in 0..1000 {
        let t = -3.0 + 6.0 * (i as f64 + 0.5) / 1000.0;
        let base = t.floor() as isize;
        let total: f64 = (base - 2..=base + 2)
            .map(|k| cubic_kernel(t - k as f64, KERNEL_A))
            .sum();
        assert!((total - 1.0).abs() <= 1e-12, "t={t}: sum {total}");
    }
}

// ---------------------------------------------------------------------------
// upsampling
// ---------------------------------------------------------------------------

#[test]
fn upsample_keeps_constants() {
    let img = RasterVolume::filled(6, 5, 2, 0.375);
    let up = upsample_bicubic(&img, 4).unwrap();
    assert_eq!(up.width(), 24);
    assert_eq!(up.height(), 20);
    for &v in up.pixels() {
        assert!((v - 0.375).abs() <= 1e-6);
    }
}

#[test]
fn upsample_reproduces_linear_ramp_in_interior() {
    let (w, h, s) = (8usize, 8usize, 4usize);
    let (a, b, c) = (0.04f64, 0.03f64, 0.05f64);
    let img = make_band(w, h, |x, y| (a * x as f64 + b * y as f64 + c) as f32);
    let up = upsample_bicubic(&img, s).unwrap();
    for yo in 0..h * s {
        for xo in 0..w * s {
            let sx = (xo as f64 + 0.5) / s as f64 - 0.5;
            let sy = (yo as f64 + 0.5) / s as f64 - 0.5;
            // interior: all four taps in range on both axes
            let interior = |t: f64, n: usize| t.floor() >= 1.0 && t.floor() + 2.0 <= n as f64 - 1.0;
            if interior(sx, w) && interior(sy, h) {
                let want = a * sx + b * sy + c;
                let got = up.get(xo, yo, 0) as f64;
                assert!((got - want).abs() <= 1e-6, "({xo},{yo}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn upsample_matches_direct_tap_oracle() {
    let mut rng = Xorshift64Star::new(21);
    let img = make_band(6, 6, |_, _| rng.uniform(0.0, 1.0) as f32);
    let s = 4usize;
    let up = upsample_bicubic(&img, s).unwrap();
    // independent oracle: per output pixel, explicit 4x4 tap sum
    for yo in 0..6 * s {
        for xo in 0..6 * s {
            let sx = (xo as f64 + 0.5) / s as f64 - 0.5;
            let sy = (yo as f64 + 0.5) / s as f64 - 0.5;
            let (bx, by) = (sx.floor() as isize - 1, sy.floor() as isize - 1);
            let mut acc = 0.0f64;
            for ky in 0..4 {
                for kx in 0..4 {
                    let wx = cubic_kernel(sx - (bx + kx) as f64, KERNEL_A);
                    let wy = cubic_kernel(sy - (by + ky) as f64, KERNEL_A);
                    let px = (bx + kx).clamp(0, 5) as usize;
                    let py = (by + ky).clamp(0, 5) as usize;
                    acc += wx * wy * img.get(px, py, 0) as f64;
                }
            }
            let got = up.get(xo, yo, 0) as f64;
            assert!((got - acc).abs() <= 1e-6, "({xo},{yo}): {got} vs {acc}");
        }
    }
}

#[test]
fn upsample_rejects_degenerate_scale() {
    let img = RasterVolume::filled(4, 4, 1, 0.5);
    assert!(upsample_bicubic(&img, 1).is_err());
}

// ---------------------------------------------------------------------------
// downsampling
// ---------------------------------------------------------------------------

#[test]
fn downsample_keeps_constants() {
    let img = RasterVolume::filled(16, 12, 3, 0.6);
    let down = downsample_bicubic(&img, 4).unwrap();
    assert_eq!((down.width(), down.height(), down.bands()), (4, 3, 3));
    for &v in down.pixels() {
        assert!((v - 0.6).abs() <= 1e-6);
    }
}

#[test]
fn downsample_reproduces_linear_ramp_in_interior() {
    let (w, h, s) = (32usize, 32usize, 4usize);
    let (a, b, c) = (0.01f64, 0.015f64, 0.1f64);
    let img = make_band(w, h, |x, y| (a * x as f64 + b * y as f64 + c) as f32);
    let down = downsample_bicubic(&img, s).unwrap();
    for yo in 0..h / s {
        for xo in 0..w / s {
            let sx = (xo as f64 + 0.5) * s as f64 - 0.5;
            let sy = (yo as f64 + 0.5) * s as f64 - 0.5;
            let interior = |t: f64, n: usize| t - 2.0 * s as f64 >= 0.0 && t + 2.0 * s as f64 <= n as f64 - 1.0;
            if interior(sx, w) && interior(sy, h) {
                let want = a * sx + b * sy + c;
                let got = down.get(xo, yo, 0) as f64;
                assert!((got - want).abs() <= 1e-6, "({xo},{yo}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn downsample_matches_widened_kernel_oracle() {
    let mut rng = Xorshift64Star::new(22);
    let img = make_band(16, 16, |_, _| rng.uniform(0.0, 1.0) as f32);
    let s = 4usize;
    let down = downsample_bicubic(&img, s).unwrap();
    // independent oracle: 2D widened window, normalized over the window
    for yo in 0..4 {
        for xo in 0..4 {
            let sx = (xo as f64 + 0.5) * s as f64 - 0.5;
            let sy = (yo as f64 + 0.5) * s as f64 - 0.5;
            let (mut acc, mut total) = (0.0f64, 0.0f64);
            let lo_x = (sx - 2.0 * s as f64).ceil() as isize;
            let hi_x = (sx + 2.0 * s as f64).floor() as isize;
            let lo_y = (sy - 2.0 * s as f64).ceil() as isize;
            let hi_y = (sy + 2.0 * s as f64).floor() as isize;
            for ky in lo_y..=hi_y {
                for kx in lo_x..=hi_x {
                    let w = cubic_kernel((sx - kx as f64) / s as f64, KERNEL_A)
                        * cubic_kernel((sy - ky as f64) / s as f64, KERNEL_A);
                    let px = kx.clamp(0, 15) as usize;
                    let py = ky.clamp(0, 15) as usize;
                    acc += w * img.get(px, py, 0) as f64;
                    total += w;
                }
            }
            let want = acc / total;
            let got = down.get(xo, yo, 0) as f64;
            assert!((got - want).abs() <= 1e-6, "({xo},{yo}): {got} vs {want}");
        }
    }
}

#[test]
fn downsample_names_required_padding() {
    let img = RasterVolume::filled(15, 16, 1, 0.5);
    let err = downsample_bicubic(&img, 4).unwrap_err().to_string();
    assert!(err.contains("1x0"), "{err}");
}

// ---------------------------------------------------------------------------
// shared properties
// ---------------------------------------------------------------------------

#[test]
fn resampling_is_linear() {
    let mut rng = Xorshift64Star::new(23);
    let x = make_band(8, 8, |_, _| rng.uniform(0.0, 1.0) as f32);
    let y = make_band(8, 8, |_, _| rng.uniform(0.0, 1.0) as f32);
    let (alpha, beta) = (0.7f32, -0.4f32);
    let mix = RasterVolume::new(
        8,
        8,
        1,
        x.pixels()
            .iter()
            .zip(y.pixels())
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect(),
    )
    .unwrap();
    for result in [
        (
            upsample_bicubic(&mix, 2).unwrap(),
            upsample_bicubic(&x, 2).unwrap(),
            upsample_bicubic(&y, 2).unwrap(),
        ),
        (
            downsample_bicubic(&mix, 2).unwrap(),
            downsample_bicubic(&x, 2).unwrap(),
            downsample_bicubic(&y, 2).unwrap(),
        ),
    ] {
        let (rm, rx, ry) = result;
        for i in 0..rm.pixels().len() {
            let want = alpha * rx.pixels()[i] + beta * ry.pixels()[i];
            assert!((rm.pixels()[i] - want).abs() <= 1e-5);
        }
    }
}

#[test]
fn bands_resample_independently() {
    let mut rng = Xorshift64Star::new(24);
    let pixels: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let cube = RasterVolume::new(8, 8, 3, pixels).unwrap();
    let up_cube = upsample_bicubic(&cube, 2).unwrap();
    for b in 0..3 {
        let single = upsample_bicubic(&cube.band_volume(b).unwrap(), 2).unwrap();
        assert_eq!(up_cube.band(b), single.band(0), "band {b}");
    }
}

// ---------------------------------------------------------------------------
// degradation protocol
// ---------------------------------------------------------------------------

#[test]
fn wald_shapes_and_identity() {
    let mut rng = Xorshift64Star::new(25);
    let ms = RasterVolume::new(
        64,
        64,
        8,
        (0..64 * 64 * 8).map(|_| rng.uniform(0.0, 1.0) as f32).collect(),
    )
    .unwrap();
    let pan = RasterVolume::filled(64, 64, 1, 0.5);
    let (ms_lr, pan_out, gt) = wald_degrade(&ms, &pan, 4).unwrap();
    assert_eq!((ms_lr.width(), ms_lr.height(), ms_lr.bands()), (16, 16, 8));
    assert_eq!(pan_out, pan);
    assert_eq!(gt, ms);
}

#[test]
fn wald_constant_cube_stays_constant() {
    let ms = RasterVolume::filled(32, 32, 4, 0.42);
    let pan = RasterVolume::filled(32, 32, 1, 0.5);
    let (ms_lr, _, _) = wald_degrade(&ms, &pan, 4).unwrap();
    for &v in ms_lr.pixels() {
        assert!((v - 0.42).abs() <= 1e-6);
    }
}

#[test]
fn wald_rejects_bad_inputs() {
    let ms = RasterVolume::filled(32, 32, 4, 0.4);
    let pan2 = RasterVolume::filled(32, 32, 2, 0.4);
    assert!(wald_degrade(&ms, &pan2, 4).is_err());
    let pan_small = RasterVolume::filled(16, 16, 1, 0.4);
    assert!(wald_degrade(&ms, &pan_small, 4).is_err());
}

#[test]
fn gaussian_blob_survives_down_up_cycle() {
    // Regression value frozen from the oracle run of this build: a smooth
    // Gaussian blob loses little energy in a x4 down/up cycle.
    let img = make_band(64, 64, |x, y| {
        let dx = x as f64 - 31.5;
        let dy = y as f64 - 31.5;
        (0.2 + 0.6 * (-(dx * dx + dy * dy) / (2.0 * 144.0)).exp()) as f32
    });
    let cycled = upsample_bicubic(&downsample_bicubic(&img, 4).unwrap(), 4).unwrap();
    let mse: f64 = img
        .pixels()
        .iter()
        .zip(cycled.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / (64.0 * 64.0);
    let psnr = 10.0 * (1.0 / mse).log10();
    assert!(psnr >= 61.7, "down-up PSNR {psnr}, regression floor 61.7");
}

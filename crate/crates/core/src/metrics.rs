//! Quality metrics: PSNR, SSIM, CC, SAM, ERGAS, and the consolidated report.
//!
//! All metrics are computed on [0,1]-normalized data with peak 1.0, in f64.
//! Conventions pinned here so oracles reproduce: SSIM uses an 11x11 Gaussian
//! window (sigma 1.5), K1 = 0.01, K2 = 0.03, valid-window positions only;
//! CC is the per-band Pearson coefficient; SAM is reported in radians.

use std::fmt::Write as _;

use crate::error::CoreError;
use crate::raster::RasterVolume;
use crate::Result;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(op: &'static str, pred: &RasterVolume, gt: &RasterVolume) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() || pred.bands() != gt.bands() {
        return Err(CoreError::shape(
            op,
            format!(
                "pred {}x{}x{} vs gt {}x{}x{}",
                pred.width(),
                pred.height(),
                pred.bands(),
                gt.width(),
                gt.height(),
                gt.bands()
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Per-band 10*log10(1/MSE) against peak 1.0; a zero-MSE band reports +inf.
pub fn psnr_per_band(pred: &RasterVolume, gt: &RasterVolume) -> Result<Vec<f64>> {
    check_same_shape("psnr", pred, gt)?;
    let n = (pred.width() * pred.height()) as f64;
    Ok((0..pred.bands())
        .map(|b| {
            let mse = pred
                .band(b)
                .iter()
                .zip(gt.band(b))
                .map(|(&p, &g)| {
                    let d = p as f64 - g as f64;
                    d * d
                })
                .sum::<f64>()
                / n;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (1.0 / mse).log10()
            }
        })
        .collect())
}

/// Mean over bands, in dB.
pub fn psnr(pred: &RasterVolume, gt: &RasterVolume) -> Result<f64> {
    let bands = psnr_per_band(pred, gt)?;
    Ok(bands.iter().sum::<f64>() / bands.len() as f64)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            let d2 = (dy * dy + dx * dx) as f64;
            w.push((-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity per band over all valid window positions.
pub fn ssim_per_band(pred: &RasterVolume, gt: &RasterVolume) -> Result<Vec<f64>> {
    check_same_shape("ssim", pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(CoreError::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut out = Vec::with_capacity(pred.bands());
    for b in 0..pred.bands() {
        let p = pred.band(b);
        let g = gt.band(b);
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut mp, mut mg) = (0.0f64, 0.0f64);
                let mut t = 0;
                for dy in 0..SSIM_WINDOW {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..SSIM_WINDOW {
                        let wt = window[t];
                        mp += wt * p[row + dx] as f64;
                        mg += wt * g[row + dx] as f64;
                        t += 1;
                    }
                }
                let (mut vp, mut vg, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                let mut t = 0;
                for dy in 0..SSIM_WINDOW {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..SSIM_WINDOW {
                        let wt = window[t];
                        let dp = p[row + dx] as f64 - mp;
                        let dg = g[row + dx] as f64 - mg;
                        vp += wt * dp * dp;
                        vg += wt * dg * dg;
                        cov += wt * dp * dg;
                        t += 1;
                    }
                }
                total += ((2.0 * mp * mg + c1) * (2.0 * cov + c2))
                    / ((mp * mp + mg * mg + c1) * (vp + vg + c2));
                count += 1;
            }
        }
        out.push(total / count as f64);
    }
    Ok(out)
}

pub fn ssim(pred: &RasterVolume, gt: &RasterVolume) -> Result<f64> {
    let bands = ssim_per_band(pred, gt)?;
    Ok(bands.iter().sum::<f64>() / bands.len() as f64)
}

// ---------------------------------------------------------------------------
// CC (Pearson correlation)
// ---------------------------------------------------------------------------

/// Pearson correlation per band. Degenerate rule: a constant gt band scores
/// 1 when the pred band equals it exactly, otherwise 0; a constant pred band
/// against a varying gt band scores 0.
pub fn cc_per_band(pred: &RasterVolume, gt: &RasterVolume) -> Result<Vec<f64>> {
    check_same_shape("cc", pred, gt)?;
    let n = (pred.width() * pred.height()) as f64;
    Ok((0..pred.bands())
        .map(|b| {
            let p = pred.band(b);
            let g = gt.band(b);
            let mp = p.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mg = g.iter().map(|&v| v as f64).sum::<f64>() / n;
            let (mut vp, mut vg, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for (&pv, &gv) in p.iter().zip(g) {
                let dp = pv as f64 - mp;
                let dg = gv as f64 - mg;
                vp += dp * dp;
                vg += dg * dg;
                cov += dp * dg;
            }
            if p == g {
                return 1.0; // exact match, including the constant-band case
            }
            if vg == 0.0 || vp == 0.0 {
                return 0.0;
            }
            cov / (vp.sqrt() * vg.sqrt())
        })
        .collect())
}

pub fn cc(pred: &RasterVolume, gt: &RasterVolume) -> Result<f64> {
    let bands = cc_per_band(pred, gt)?;
    Ok(bands.iter().sum::<f64>() / bands.len() as f64)
}

// ---------------------------------------------------------------------------
// SAM
// ---------------------------------------------------------------------------

/// Spectral angle threshold below which a pixel vector counts as zero.
const SAM_NORM_FLOOR: f64 = 1e-12;

/// Mean per-pixel spectral angle in radians between the L-band vectors.
pub fn sam(pred: &RasterVolume, gt: &RasterVolume) -> Result<f64> {
    check_same_shape("sam", pred, gt)?;
    if pred.bands() < 2 {
        return Err(CoreError::contract(
            "sam needs at least 2 bands to form spectral vectors",
        ));
    }
    let plane = pred.width() * pred.height();
    let l = pred.bands();
    let mut total = 0.0f64;
    for i in 0..plane {
        let (mut dot, mut np, mut ng) = (0.0f64, 0.0f64, 0.0f64);
        let mut identical = true;
        for b in 0..l {
            let pv = pred.pixels()[b * plane + i] as f64;
            let gv = gt.pixels()[b * plane + i] as f64;
            identical &= pv == gv;
            dot += pv * gv;
            np += pv * pv;
            ng += gv * gv;
        }
        if identical {
            continue; // angle between identical vectors is exactly 0
        }
        let (np, ng) = (np.sqrt(), ng.sqrt());
        if np < SAM_NORM_FLOOR || ng < SAM_NORM_FLOOR {
            continue; // zero-direction pixels contribute angle 0
        }
        total += (dot / (np * ng)).clamp(-1.0, 1.0).acos();
    }
    Ok(total / plane as f64)
}

// ---------------------------------------------------------------------------
// ERGAS
// ---------------------------------------------------------------------------

/// 100/s * sqrt(mean_l (RMSE_l / mu_l)^2) with mu_l the gt band mean.
pub fn ergas(pred: &RasterVolume, gt: &RasterVolume, scale: usize) -> Result<f64> {
    check_same_shape("ergas", pred, gt)?;
    let n = (pred.width() * pred.height()) as f64;
    let mut acc = 0.0f64;
    for b in 0..pred.bands() {
        let mu = gt.band(b).iter().map(|&v| v as f64).sum::<f64>() / n;
        if mu.abs() <= 1e-12 {
            return Err(CoreError::contract(format!(
                "ergas undefined: gt band {b} mean is near zero; rescale the data"
            )));
        }
        let mse = pred
            .band(b)
            .iter()
            .zip(gt.band(b))
            .map(|(&p, &g)| {
                let d = p as f64 - g as f64;
                d * d
            })
            .sum::<f64>()
            / n;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / scale as f64 * (acc / pred.bands() as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Consolidated report
// ---------------------------------------------------------------------------

/// All five metrics plus wall-clock prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub cc: f64,
    pub sam_rad: f64,
    pub ergas: f64,
    pub time_s: f64,
    pub psnr_db_bands: Vec<f64>,
    pub ssim_bands: Vec<f64>,
    pub cc_bands: Vec<f64>,
}

impl MetricsReport {
    /// Plain-text serialization, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "psnr_db={}", self.psnr_db);
        let _ = writeln!(out, "ssim={}", self.ssim);
        let _ = writeln!(out, "cc={}", self.cc);
        let _ = writeln!(out, "sam_rad={}", self.sam_rad);
        let _ = writeln!(out, "ergas={}", self.ergas);
        let _ = writeln!(out, "time_s={}", self.time_s);
        for (i, v) in self.psnr_db_bands.iter().enumerate() {
            let _ = writeln!(out, "psnr_db_b{i}={v}");
        }
        for (i, v) in self.ssim_bands.iter().enumerate() {
            let _ = writeln!(out, "ssim_b{i}={v}");
        }
        for (i, v) in self.cc_bands.iter().enumerate() {
            let _ = writeln!(out, "cc_b{i}={v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = MetricsReport {
            psnr_db: f64::NAN,
            ssim: f64::NAN,
            cc: f64::NAN,
            sam_rad: f64::NAN,
            ergas: f64::NAN,
            time_s: 0.0,
            psnr_db_bands: Vec::new(),
            ssim_bands: Vec::new(),
            cc_bands: Vec::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CoreError::Config {
                line: lineno + 1,
                detail: format!("expected key=value, got {line:?}"),
            })?;
            let value: f64 = value.parse().map_err(|_| CoreError::Config {
                line: lineno + 1,
                detail: format!("bad number {value:?}"),
            })?;
            let push_band = |bands: &mut Vec<f64>, idx: &str| -> Result<()> {
                let i: usize = idx.parse().map_err(|_| CoreError::Config {
                    line: lineno + 1,
                    detail: format!("bad band index {idx:?}"),
                })?;
                if bands.len() != i {
                    return Err(CoreError::Config {
                        line: lineno + 1,
                        detail: format!("band {i} out of order"),
                    });
                }
                bands.push(value);
                Ok(())
            };
            match key {
                "psnr_db" => report.psnr_db = value,
                "ssim" => report.ssim = value,
                "cc" => report.cc = value,
                "sam_rad" => report.sam_rad = value,
                "ergas" => report.ergas = value,
                "time_s" => report.time_s = value,
                _ => {
                    if let Some(idx) = key.strip_prefix("psnr_db_b") {
                        push_band(&mut report.psnr_db_bands, idx)?;
                    } else if let Some(idx) = key.strip_prefix("ssim_b") {
                        push_band(&mut report.ssim_bands, idx)?;
                    } else if let Some(idx) = key.strip_prefix("cc_b") {
                        push_band(&mut report.cc_bands, idx)?;
                    } else {
                        return Err(CoreError::Config {
                            line: lineno + 1,
                            detail: format!("unknown key {key:?}"),
                        });
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Runs all five metrics; `time_s` is the caller-measured prediction time.
pub fn evaluate(
    pred: &RasterVolume,
    gt: &RasterVolume,
    scale: usize,
    time_s: f64,
) -> Result<MetricsReport> {
    let psnr_db_bands = psnr_per_band(pred, gt)?;
    let ssim_bands = ssim_per_band(pred, gt)?;
    let cc_bands = cc_per_band(pred, gt)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricsReport {
        psnr_db: mean(&psnr_db_bands),
        ssim: mean(&ssim_bands),
        cc: mean(&cc_bands),
        sam_rad: sam(pred, gt)?,
        ergas: ergas(pred, gt, scale)?,
        time_s,
        psnr_db_bands,
        ssim_bands,
        cc_bands,
    })
}

//! Patch-pair extraction and dataset splitting.

use crate::error::CoreError;
use crate::raster::RasterVolume;
use crate::rng::Xorshift64Star;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Unassigned,
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Unassigned => "none",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SplitTag::Unassigned),
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(CoreError::contract(format!("unknown split tag {other}"))),
        }
    }
}

/// One training sample: an LR MS patch, the matching HR PAN patch and the HR
/// ground-truth patch (both exactly `scale`x the MS patch footprint).
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub ms: RasterVolume,
    pub pan: RasterVolume,
    pub gt: RasterVolume,
    /// Offsets in LR MS pixel units.
    pub ms_x: usize,
    pub ms_y: usize,
    pub tag: SplitTag,
}

/// How patch offsets are chosen.
#[derive(Debug, Clone, Copy)]
pub enum PatchPlan {
    /// Deterministic grid with the given stride.
    Grid { stride: usize },
    /// Seeded random offsets.
    Random { count: usize, seed: u64 },
}

/// Derives and validates the scale factor binding an (ms_lr, pan, gt) triple.
pub fn derive_scale(ms_lr: &RasterVolume, pan: &RasterVolume, gt: &RasterVolume) -> Result<usize> {
    if pan.bands() != 1 {
        return Err(CoreError::contract(format!(
            "panchromatic image must have 1 band, got {}",
            pan.bands()
        )));
    }
    if gt.bands() != ms_lr.bands() {
        return Err(CoreError::shape(
            "derive_scale",
            format!("gt has {} band(s), ms has {}", gt.bands(), ms_lr.bands()),
        ));
    }
    if pan.width() % ms_lr.width() != 0 || pan.height() % ms_lr.height() != 0 {
        return Err(CoreError::shape(
            "derive_scale",
            format!(
                "pan {}x{} is not an integer multiple of ms {}x{}",
                pan.width(),
                pan.height(),
                ms_lr.width(),
                ms_lr.height()
            ),
        ));
    }
    let sx = pan.width() / ms_lr.width();
    let sy = pan.height() / ms_lr.height();
    if sx != sy || sx < 2 {
        return Err(CoreError::shape(
            "derive_scale",
            format!("inconsistent or degenerate scale {sx}x{sy}"),
        ));
    }
    if gt.width() != pan.width() || gt.height() != pan.height() {
        return Err(CoreError::shape(
            "derive_scale",
            format!(
                "gt {}x{} must match pan {}x{}",
                gt.width(),
                gt.height(),
                pan.width(),
                pan.height()
            ),
        ));
    }
    Ok(sx)
}

/// Grid offsets covering the LR image: top-left corners with the given stride.
pub fn grid_offsets(lr_w: usize, lr_h: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut offsets = Vec::new();
    if patch > lr_w || patch > lr_h || stride == 0 {
        return offsets;
    }
    let mut y = 0;
    while y + patch <= lr_h {
        let mut x = 0;
        while x + patch <= lr_w {
            offsets.push((x, y));
            x += stride;
        }
        y += stride;
    }
    offsets
}

/// Seeded random top-left corners (duplicates allowed, like random crops).
pub fn random_offsets(
    lr_w: usize,
    lr_h: usize,
    patch: usize,
    count: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = Xorshift64Star::new(seed);
    (0..count)
        .map(|_| {
            (
                rng.below(lr_w - patch + 1),
                rng.below(lr_h - patch + 1),
            )
        })
        .collect()
}

/// Cuts one patch pair at an LR offset; the pan/gt windows sit at `scale`
/// times the MS offsets and sizes.
pub fn materialize_pair(
    ms_lr: &RasterVolume,
    pan: &RasterVolume,
    gt: &RasterVolume,
    offset: (usize, usize),
    patch: usize,
    scale: usize,
) -> Result<PatchPair> {
    let (x, y) = offset;
    Ok(PatchPair {
        ms: ms_lr.crop(x, y, patch, patch)?,
        pan: pan.crop(x * scale, y * scale, patch * scale, patch * scale)?,
        gt: gt.crop(x * scale, y * scale, patch * scale, patch * scale)?,
        ms_x: x,
        ms_y: y,
        tag: SplitTag::Unassigned,
    })
}

/// Extracts patch pairs per the plan. Offsets are in LR pixels; each pair's
/// pan and gt patches are exactly `scale`x the MS patch.
pub fn extract_patches(
    ms_lr: &RasterVolume,
    pan: &RasterVolume,
    gt: &RasterVolume,
    patch: usize,
    plan: PatchPlan,
) -> Result<Vec<PatchPair>> {
    if patch == 0 || patch > ms_lr.width() || patch > ms_lr.height() {
        return Err(CoreError::contract(format!(
            "patch size {patch} does not fit in {}x{} LR image",
            ms_lr.width(),
            ms_lr.height()
        )));
    }
    let scale = derive_scale(ms_lr, pan, gt)?;
    let offsets = match plan {
        PatchPlan::Grid { stride } => {
            if stride == 0 {
                return Err(CoreError::contract("stride must be positive"));
            }
            grid_offsets(ms_lr.width(), ms_lr.height(), patch, stride)
        }
        PatchPlan::Random { count, seed } => {
            random_offsets(ms_lr.width(), ms_lr.height(), patch, count, seed)
        }
    };
    offsets
        .into_iter()
        .map(|o| materialize_pair(ms_lr, pan, gt, o, patch, scale))
        .collect()
}

/// Seeded shuffle then partition into train/val/test; pairs beyond the
/// requested counts stay untagged.
pub fn split_dataset(
    pairs: &mut [PatchPair],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<()> {
    let (n_train, n_val, n_test) = counts;
    let total = n_train + n_val + n_test;
    if total > pairs.len() {
        return Err(CoreError::contract(format!(
            "requested {total} tagged pairs from an inventory of {}",
            pairs.len()
        )));
    }
    for p in pairs.iter_mut() {
        p.tag = SplitTag::Unassigned;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    Xorshift64Star::new(seed).shuffle(&mut order);
    for (rank, &idx) in order.iter().enumerate() {
        pairs[idx].tag = if rank < n_train {
            SplitTag::Train
        } else if rank < n_train + n_val {
            SplitTag::Val
        } else if rank < total {
            SplitTag::Test
        } else {
            SplitTag::Unassigned
        };
    }
    Ok(())
}

/// Borrows the pairs carrying one tag.
pub fn select(pairs: &[PatchPair], tag: SplitTag) -> Vec<&PatchPair> {
    pairs.iter().filter(|p| p.tag == tag).collect()
}
